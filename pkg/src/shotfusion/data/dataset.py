"""Turn manifest records into model inputs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..graph import compute_ear, compute_mar, normalize_coords
from ..model import AUX_DIMS, SampleInput
from .formats import load_clip, load_landmarks
from .manifest import DatasetManifest, SampleRecord


def ear_stats(coords: np.ndarray) -> np.ndarray:
    """(mean, std) over frames of the two-eye average EAR."""
    ear = 0.5 * (compute_ear(coords, "right") + compute_ear(coords, "left"))
    ear = np.atleast_1d(ear)
    return np.array([ear.mean(), ear.std()])


def mar_stats(coords: np.ndarray) -> np.ndarray:
    mar = np.atleast_1d(compute_mar(coords))
    return np.array([mar.mean(), mar.std()])


def aux_vector(names: Sequence[str], shots: Sequence[np.ndarray], rec: SampleRecord) -> np.ndarray | None:
    """Auxiliary features in the order given; per-shot statistics are pooled over all frames."""
    if not names:
        return None
    allframes = np.concatenate(list(shots), axis=0) if shots else None
    parts = []
    for name in names:
        if name == "ear":
            parts.append(ear_stats(allframes))
        elif name == "mar":
            parts.append(mar_stats(allframes))
        elif name == "demographics":
            if rec.demo_vector is None:
                raise ValueError(f"{rec.sample_id}: manifest has no demographic vector")
            parts.append(np.asarray(rec.demo_vector, dtype=np.float64))
        else:
            raise ValueError(f"unknown auxiliary feature {name!r}")
        if parts[-1].shape != (AUX_DIMS[name],):
            raise ValueError(f"{name} features have shape {parts[-1].shape}")
    return np.concatenate(parts)


def load_record(m: DatasetManifest, rec: SampleRecord, clips: bool = True,
                aux: Sequence[str] = ()) -> SampleInput:
    """Read one sample.  With ``clips=False`` the clip file is never opened."""
    raw = load_landmarks(m.resolve(rec.landmark_path)).astype(np.float64)
    shots = [raw]
    clip_list = [load_clip(m.resolve(rec.clip_path)).astype(np.float64)] if clips else None
    return SampleInput(rec.sample_id, rec.label, [normalize_coords(s) for s in shots], clip_list,
                       aux_vector(aux, shots, rec))


def load_split(m: DatasetManifest, split: str | None = None, clips: bool = True,
               aux: Sequence[str] = (), records: Sequence[SampleRecord] | None = None) -> list[SampleInput]:
    recs = records if records is not None else (m.records if split is None else m.split(split))
    return [load_record(m, r, clips, aux) for r in recs]
