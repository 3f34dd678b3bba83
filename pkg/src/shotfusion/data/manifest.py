"""Dataset manifest (JSON lines), subject-independent splits, demographic vectors."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..config import ConfigError, dataclass_from_kv, parse_kv
from .synth import GeneratorConfig, derive_seed

MANIFEST_NAME = "manifest.jsonl"
CONFIG_NAME = "generator.cfg"
SPLITS = ("train", "test")
DEMO_GROUPS = (("age", 2), ("gender", 2), ("race", 6))
DEMO_DIM = sum(n for _, n in DEMO_GROUPS)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    subject_id: str
    label: int
    split: str
    landmark_path: str
    clip_path: str
    demo_vector: tuple[int, ...] | None = None

    def to_json(self) -> str:
        d = {"sample_id": self.sample_id, "subject_id": self.subject_id, "label": self.label,
             "split": self.split, "landmark_path": self.landmark_path, "clip_path": self.clip_path}
        if self.demo_vector is not None:
            d["demo_vector"] = list(self.demo_vector)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        try:
            rec = cls(str(d["sample_id"]), str(d["subject_id"]), int(d["label"]), str(d["split"]),
                      str(d["landmark_path"]), str(d["clip_path"]),
                      tuple(int(v) for v in d["demo_vector"]) if d.get("demo_vector") is not None else None)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest record {d!r}: {exc}") from None
        if rec.label not in (0, 1):
            raise ManifestError(f"{rec.sample_id}: label must be 0 or 1")
        if rec.split not in SPLITS:
            raise ManifestError(f"{rec.sample_id}: split must be one of {SPLITS}")
        return rec


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    config: GeneratorConfig | None = None
    seed: int | None = None
    root: Path | None = None

    def save(self, root: str | Path | None = None) -> Path:
        root = Path(root) if root is not None else self.root
        if root is None:
            raise ManifestError("manifest has no root directory")
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        path = root / MANIFEST_NAME
        path.write_text("".join(r.to_json() + "\n" for r in self.records))
        if self.config is not None:
            (root / CONFIG_NAME).write_text(f"seed = {self.seed}\n" + self.config.to_text())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            records.append(SampleRecord.from_dict(d))
        ids = [r.sample_id for r in records]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"{path}: duplicate sample_id")
        cfg = seed = None
        cfg_path = path.parent / CONFIG_NAME
        if cfg_path.exists():
            kv = parse_kv(cfg_path.read_text(), str(cfg_path))
            seed = int(kv.pop("seed")) if "seed" in kv else None
            cfg = dataclass_from_kv(GeneratorConfig, kv)
        return cls(records, cfg, seed, path.parent)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def subjects(self, label: int | None = None) -> list[str]:
        return sorted({r.subject_id for r in self.records if label is None or r.label == label})

    def by_id(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def counts(self) -> dict[str, dict[int, int]]:
        out = {s: {0: 0, 1: 0} for s in SPLITS}
        for r in self.records:
            out[r.split][r.label] += 1
        return out


def train_count(n: int, fraction: float) -> int:
    """round(fraction * n) (half up), kept inside [1, n - 1]."""
    return min(max(int(np.floor(fraction * n + 0.5)), 1), n - 1)


def subject_split(m: DatasetManifest, train_fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Assign whole subjects to train/test per class at ``train_fraction``."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    assign: dict[str, str] = {}
    for label in (0, 1):
        subs = m.subjects(label)
        if len(subs) < 2:
            raise ManifestError(f"class {label} needs at least 2 subjects to split, has {len(subs)}")
        order = rng.permutation(len(subs))
        k = train_count(len(subs), train_fraction)
        for rank, i in enumerate(order):
            assign[subs[i]] = "train" if rank < k else "test"
    records = [replace(r, split=assign[r.subject_id]) for r in m.records]
    return DatasetManifest(records, m.config, m.seed, m.root)


def validation_subjects(records: list[SampleRecord], fraction: float = 0.1, seed: int = 0) -> set[str]:
    """Hold out ``fraction`` of the given subjects per class (at least one when a
    class has two or more subjects)."""
    rng = np.random.default_rng(derive_seed(seed, "validation"))
    held: set[str] = set()
    for label in (0, 1):
        subs = sorted({r.subject_id for r in records if r.label == label})
        if len(subs) < 2 or fraction <= 0:
            continue
        k = min(max(int(np.floor(fraction * len(subs) + 0.5)), 1), len(subs) - 1)
        held.update(subs[i] for i in rng.permutation(len(subs))[:k])
    return held


def demographic_vector(subject_id: str, label: int, seed: int, informative: bool = False) -> tuple[int, ...]:
    """Concatenated one-hots: age bucket (2), gender (2), race (6).

    Label-independent noise by default; with ``informative`` the age bucket
    equals the label 90% of the time.
    """
    rng = np.random.default_rng(derive_seed(seed, f"demo:{subject_id}"))
    picks = [int(rng.integers(n)) for _, n in DEMO_GROUPS]
    if informative:
        picks[0] = label if rng.random() < 0.9 else 1 - label
    vec = []
    for (_, n), k in zip(DEMO_GROUPS, picks):
        vec += [1 if i == k else 0 for i in range(n)]
    return tuple(vec)


def attach_demographics(m: DatasetManifest, seed: int, informative: bool | None = None) -> DatasetManifest:
    if informative is None:
        informative = bool(m.config.demographics_informative) if m.config is not None else False
    vecs = {}
    for r in m.records:
        if r.subject_id not in vecs:
            vecs[r.subject_id] = demographic_vector(r.subject_id, r.label, seed, informative)
    records = [replace(r, demo_vector=vecs[r.subject_id]) for r in m.records]
    return DatasetManifest(records, m.config, m.seed, m.root)
