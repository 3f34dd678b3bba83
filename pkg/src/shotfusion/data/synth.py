"""Seeded synthetic face-landmark videos with class-dependent behaviour.

Each subject is one continuous recording cut into equal shots.  A neutral
68-point template (inter-ocular distance 1, y pointing down) is animated by

* blinks: the eyelids close vertically about a fixed eye center, so eye
  centers (and therefore the normalization scale) do not move;
* head sway: a slow rigid rotation plus translation;
* mouth jitter: i.i.d. Gaussian noise on the 20 mouth points only.

Eye points carry no noise, so a frame inside a blink always has a lower EAR
than the subject's open-eye value.  Frames are rasterized as soft discs (one
channel per region group) and resampled into clips.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ConfigError, dataclass_from_kv, dataclass_to_kv, read_kv
from ..graph import REGIONS
from ..visual import sample_clip
from .formats import save_clip, save_landmarks

RANGE_KEYS = ("blink_interval", "blink_duration", "sway", "jitter")
CLASS_PREFIX = {0: "sober", 1: "intox"}

# channel groups of the rendered frames
CHANNELS = (
    REGIONS["right_eye"] + REGIONS["left_eye"] + REGIONS["right_brow"] + REGIONS["left_brow"],
    REGIONS["outer_lip"] + REGIONS["inner_lip"],
    REGIONS["jaw"] + REGIONS["nose_bridge"] + REGIONS["nose_base"],
)
EYE_NODES = REGIONS["right_eye"] + REGIONS["left_eye"]
MOUTH_NODES = REGIONS["outer_lip"] + REGIONS["inner_lip"]


@dataclass(frozen=True)
class GeneratorConfig:
    subjects_per_class: int = 10
    shots_per_subject: int = 4
    frames_per_shot: int = 32
    fps: float = 25.0
    clip_frames: int = 8
    clip_height: int = 32
    clip_width: int = 32
    render_size: int = 64
    face_scale: float = 0.3          # inter-ocular distance as a fraction of render_size
    disc_sigma: float = 1.0          # render pixels
    # class-conditional latent ranges (lo, hi); sober first, then intoxicated
    blink_interval_sober: tuple[float, ...] = (0.9, 1.5)
    blink_interval_intox: tuple[float, ...] = (0.9, 1.5)
    blink_duration_sober: tuple[float, ...] = (0.1, 0.2)
    blink_duration_intox: tuple[float, ...] = (0.3, 0.6)
    sway_sober: tuple[float, ...] = (0.015, 0.025)
    sway_intox: tuple[float, ...] = (0.06, 0.10)
    jitter_sober: tuple[float, ...] = (0.008, 0.012)
    jitter_intox: tuple[float, ...] = (0.04, 0.06)
    shape_noise: float = 0.02        # static per-subject perturbation of non-eye points
    demographics_informative: bool = False

    def __post_init__(self):
        for name in ("subjects_per_class", "shots_per_subject", "frames_per_shot", "clip_frames",
                     "clip_height", "clip_width", "render_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.fps <= 0 or self.face_scale <= 0 or self.disc_sigma <= 0:
            raise ConfigError("fps, face_scale and disc_sigma must be positive")
        if self.shape_noise < 0:
            raise ConfigError("shape_noise must be nonnegative")
        for key in RANGE_KEYS:
            for cls in ("sober", "intox"):
                name = f"{key}_{cls}"
                lo_hi = getattr(self, name)
                if len(lo_hi) != 2:
                    raise ConfigError(f"{name} needs two values lo,hi")
                lo, hi = lo_hi
                if lo < 0 or hi < lo:
                    raise ConfigError(f"{name}: need 0 <= lo <= hi, got {lo},{hi}")
                if key in ("blink_interval", "blink_duration") and lo <= 0:
                    raise ConfigError(f"{name}: durations must be positive")

    def latent_range(self, key: str, label: int) -> tuple[float, float]:
        return tuple(getattr(self, f"{key}_{CLASS_PREFIX[label]}"))

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        return dataclass_from_kv(cls, read_kv(path))

    def to_text(self) -> str:
        return dataclass_to_kv(self)


@dataclass
class Subject:
    subject_id: str
    label: int
    blink_interval: float
    blink_duration: float
    sway: float
    jitter: float
    seed: int = field(repr=False, default=0)


def derive_seed(seed: int, key: str) -> int:
    """64-bit seed from sha256 of ``"{seed}:{key}"`` (independent of generation order)."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{key}".encode()).digest()[:8], "little")


def template_face() -> np.ndarray:
    """Neutral frontal 68-point face, eye centers at (-0.5, -0.4) and (0.5, -0.4)."""
    pts = np.zeros((68, 2))
    th = np.pi * (1 - np.arange(17) / 16)
    pts[0:17] = np.stack([1.05 * np.cos(th), -0.1 + 1.3 * np.sin(th)], -1)
    k = np.arange(5) / 4
    pts[17:22] = np.stack([-0.85 + 0.65 * k, -0.72 - 0.1 * np.sin(np.pi * k)], -1)
    pts[22:27] = np.stack([0.2 + 0.65 * k, -0.72 - 0.1 * np.sin(np.pi * k)], -1)
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.45, 0.05, 4)], -1)
    pts[31:36] = np.stack([np.linspace(-0.2, 0.2, 5), 0.2 + 0.05 * (1 - np.abs(np.linspace(-1, 1, 5)))], -1)
    pts[36:42] = eye_points(-0.5, -0.4, 1.0)
    pts[42:48] = eye_points(0.5, -0.4, 1.0)
    th = np.pi - np.arange(12) * np.pi / 6
    pts[48:60] = np.stack([0.42 * np.cos(th), 0.55 - 0.18 * np.sin(th)], -1)
    th = np.pi - np.arange(8) * np.pi / 4
    pts[60:68] = np.stack([0.3 * np.cos(th), 0.55 - 0.07 * np.sin(th)], -1)
    return pts


def eye_points(cx: float, cy: float, openness, width: float = 0.36, height: float = 0.054) -> np.ndarray:
    """Six eye points (corner, two upper, corner, two lower) for openness in [0, 1].

    Returns [..., 6, 2]; EAR = 2 * height * openness / width.
    """
    o = np.asarray(openness, dtype=np.float64)[..., None]
    h = height * o
    xs = np.array([-0.5, -1 / 6, 1 / 6, 0.5, 1 / 6, -1 / 6]) * width + cx
    ys = np.array([0.0, -1.0, -1.0, 0.0, 1.0, 1.0])
    x = np.broadcast_to(xs, o.shape[:-1] + (6,))
    y = cy + ys * h
    return np.stack([x, y], axis=-1)


def blink_closure(n_frames: int, fps: float, interval: float, duration: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Per-frame closure in [0, 0.9]; nonzero exactly inside blink events.

    Inside an event the closure is 0.9 * (0.2 + 0.8 sin(pi u)), u in [0, 1),
    so even the first frame of a blink is clearly narrower than an open eye.
    """
    t = np.arange(n_frames) / fps
    closure = np.zeros(n_frames)
    start = rng.uniform(0.0, interval)
    end_time = n_frames / fps
    while start < end_time:
        u = (t - start) / duration
        inside = (u >= 0) & (u < 1)
        closure[inside] = np.maximum(closure[inside], 0.9 * (0.2 + 0.8 * np.sin(np.pi * u[inside])))
        start += duration + interval * rng.uniform(0.75, 1.25)
    return closure


def draw_subject(subject_id: str, label: int, cfg: GeneratorConfig, seed: int) -> Subject:
    s = derive_seed(seed, subject_id)
    rng = np.random.default_rng(s)
    vals = {key: float(rng.uniform(*cfg.latent_range(key, label))) for key in RANGE_KEYS}
    return Subject(subject_id, label, vals["blink_interval"], vals["blink_duration"], vals["sway"],
                   vals["jitter"], s)


@dataclass
class Trajectory:
    coords: np.ndarray     # [F_total, 68, 2] in render pixels
    closure: np.ndarray    # [F_total] eyelid closure, 0 = open


def simulate_subject(subj: Subject, cfg: GeneratorConfig) -> Trajectory:
    rng = np.random.default_rng(subj.seed + 1)
    n = cfg.shots_per_subject * cfg.frames_per_shot
    face = template_face()
    noise = rng.normal(0.0, cfg.shape_noise, face.shape)
    noise[list(EYE_NODES)] = 0.0
    face = face + noise
    eye_open = rng.uniform(0.9, 1.1)

    closure = blink_closure(n, cfg.fps, subj.blink_interval, subj.blink_duration, rng)
    pts = np.broadcast_to(face, (n, 68, 2)).copy()
    openness = eye_open * (1.0 - closure)
    pts[:, 36:42] = eye_points(-0.5, -0.4, openness)
    pts[:, 42:48] = eye_points(0.5, -0.4, openness)
    # mouth: a slow talking motion shared by both classes, then class-dependent jitter
    t = np.arange(n) / cfg.fps
    talk = 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi))
    lower = [55, 56, 57, 58, 59, 65, 66, 67]
    pts[:, lower, 1] += talk[:, None]
    mouth = list(MOUTH_NODES)
    pts[:, mouth] += rng.normal(0.0, subj.jitter, (n, len(mouth), 2))

    # rigid head sway: rotation (radians) and translation (inter-ocular units)
    freq = rng.uniform(0.3, 0.8, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    wave = np.sin(2 * np.pi * freq * t[:, None] + phase)
    ang = subj.sway * wave[:, 0]
    shift = subj.sway * np.stack([wave[:, 1], 0.5 * wave[:, 2]], -1)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)   # [n, 2, 2]
    pts = np.einsum("nij,nkj->nki", rot, pts) + shift[:, None, :]

    px = cfg.face_scale * cfg.render_size
    center = np.array([cfg.render_size / 2, cfg.render_size / 2 - 0.05 * cfg.render_size])
    return Trajectory(pts * px + center, closure)


def render_frames(coords: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """[F, 68, 2] pixel coords -> [F, 3, size, size] soft-disc images in [0, 1]."""
    grid = np.arange(size) + 0.5
    frames = np.empty((coords.shape[0], len(CHANNELS), size, size))
    for ci, nodes in enumerate(CHANNELS):
        p = coords[:, list(nodes)]
        gx = np.exp(-0.5 * ((grid[None, None, :] - p[..., 0:1]) / sigma) ** 2)   # F, P, W
        gy = np.exp(-0.5 * ((grid[None, None, :] - p[..., 1:2]) / sigma) ** 2)   # F, P, H
        frames[:, ci] = np.matmul(gy.transpose(0, 2, 1), gx)
    return np.minimum(frames, 1.0)


@dataclass
class ShotData:
    sample_id: str
    subject_id: str
    label: int
    shot_index: int
    landmarks: np.ndarray   # [F, 68, 2] render-pixel coordinates
    clip: np.ndarray        # [C, T, H, W]
    closure: np.ndarray     # [F]


def subject_ids(cfg: GeneratorConfig) -> list[tuple[str, int]]:
    out = []
    for label in (0, 1):
        out += [(f"{CLASS_PREFIX[label]}{i:03d}", label) for i in range(cfg.subjects_per_class)]
    return out


def generate_subject(subject_id: str, label: int, cfg: GeneratorConfig, seed: int) -> list[ShotData]:
    subj = draw_subject(subject_id, label, cfg, seed)
    traj = simulate_subject(subj, cfg)
    F = cfg.frames_per_shot
    shots = []
    for k in range(cfg.shots_per_subject):
        coords = traj.coords[k * F:(k + 1) * F]
        frames = render_frames(coords, cfg.render_size, cfg.disc_sigma)
        clip = sample_clip(frames, cfg.clip_frames, cfg.clip_height, cfg.clip_width)
        shots.append(ShotData(f"{subject_id}_shot{k}", subject_id, label, k,
                              coords.astype(np.float32), clip.astype(np.float32),
                              traj.closure[k * F:(k + 1) * F]))
    return shots


def generate_dataset(cfg: GeneratorConfig, seed: int, out_dir: str | Path, jobs: int = 1):
    """Write landmark/clip files, ``generator.cfg`` and ``manifest.jsonl`` under ``out_dir``.

    Every sample starts in the train split; call ``subject_split`` afterwards.
    Returns the manifest.  Output bytes do not depend on ``jobs``.
    """
    from .manifest import DatasetManifest, SampleRecord

    out = Path(out_dir)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    ids = subject_ids(cfg)

    def work(item):
        sid, label = item
        recs = []
        for shot in generate_subject(sid, label, cfg, seed):
            lpath = f"landmarks/{shot.sample_id}.lmk"
            cpath = f"clips/{shot.sample_id}.clp"
            save_landmarks(out / lpath, shot.landmarks)
            save_clip(out / cpath, shot.clip)
            recs.append(SampleRecord(shot.sample_id, sid, label, "train", lpath, cpath))
        return recs

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            chunks = list(pool.map(work, ids))
    else:
        chunks = [work(i) for i in ids]
    records = sorted((r for c in chunks for r in c), key=lambda r: r.sample_id)
    m = DatasetManifest(records, cfg, seed, out)
    m.save()
    return m
