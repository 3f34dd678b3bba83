import numpy as np
import pytest

from shotfusion.data import GeneratorConfig, attach_demographics, generate_dataset, subject_split
from shotfusion.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    """Small model that still exercises every layer type."""
    base = dict(d_model=8, gat_dims=(8,), gat_heads=2, r3d_widths=(4, 8), r3d_blocks=(1, 1))
    base.update(kw)
    return ModelConfig(**base)


def small_generator(**kw) -> GeneratorConfig:
    base = dict(subjects_per_class=3, shots_per_subject=2, frames_per_shot=16, render_size=32,
                clip_frames=4, clip_height=16, clip_width=16)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_ds")
    m = generate_dataset(small_generator(), 5, out)
    m = attach_demographics(subject_split(m, 0.67, 5), 5)
    m.save()
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: test_acceptance appends (number, passed, detail)
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}  {'PASS' if ok else 'FAIL'}  {detail}")
