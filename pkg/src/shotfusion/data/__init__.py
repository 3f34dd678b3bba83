from .dataset import aux_vector, ear_stats, load_record, load_split, mar_stats
from .formats import (
    ChecksumError,
    FormatError,
    StorageError,
    TruncatedError,
    decode_clip,
    decode_landmarks,
    encode_clip,
    encode_landmarks,
    load_clip,
    load_landmarks,
    save_clip,
    save_landmarks,
)
from .manifest import (
    DEMO_DIM,
    DatasetManifest,
    ManifestError,
    SampleRecord,
    attach_demographics,
    demographic_vector,
    subject_split,
    train_count,
    validation_subjects,
)
from .shots import split_shots
from .synth import (
    GeneratorConfig,
    derive_seed,
    generate_dataset,
    generate_subject,
    render_frames,
    simulate_subject,
    template_face,
)
