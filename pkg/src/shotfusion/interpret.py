"""Landmark saliency and 3D Grad-CAM.

Both target the raw class logit (not the softmax probability) and run with
the model frozen in eval mode, so parameters are never modified.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor, backward, getitem
from .graph import NUM_LANDMARKS, REGIONS
from .model import FusionModel, SampleInput

GROUPS = {
    "eyes": REGIONS["right_eye"] + REGIONS["left_eye"],
    "mouth": REGIONS["outer_lip"] + REGIONS["inner_lip"],
    "brows": REGIONS["right_brow"] + REGIONS["left_brow"],
}
# ranges as printed in the landmark-importance table; indexing convention unknown
REPORTED_RANGES = {"jawline": (12, 15), "eyes": (43, 46), "mouth_corners": (49, 54)}


def _check_class(target_class: int) -> int:
    if target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    return int(target_class)


@dataclass
class SaliencyReport:
    sample_id: str
    target_class: int
    scores: np.ndarray                       # [68] in [0, 1]
    all_zero: bool
    regions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "target_class": self.target_class,
                "scores": [float(v) for v in self.scores], "all_zero": self.all_zero,
                "regions": self.regions}


def region_aggregates(scores: np.ndarray) -> dict:
    """Mean score per region (0-indexed iBUG layout) and for the table's ranges
    read both as 0-indexed and as 1-indexed point numbers."""
    out = {}
    for name, nodes in list(REGIONS.items()) + list(GROUPS.items()):
        out[name] = {"mean": float(scores[list(nodes)].mean()), "max": float(scores[list(nodes)].max()),
                     "nodes": [int(min(nodes)), int(max(nodes))]}
    for name, (a, b) in REPORTED_RANGES.items():
        out[f"reported_{name}"] = {
            "zero_indexed": float(scores[a:b + 1].mean()),
            "one_indexed": float(scores[a - 1:b].mean()),
            "points": [a, b],
        }
    return out


def landmark_saliency(model: FusionModel, sample: SampleInput, target_class: int) -> SaliencyReport:
    """Per-node mean over frames of |d logit / d (x, y)|, normalized to max 1."""
    target_class = _check_class(target_class)
    was_training = model.training
    model.eval()
    coords = [Tensor(np.array(c, dtype=np.float64), requires_grad=True) for c in sample.landmarks]
    try:
        with model.frozen():
            out = model([sample], landmark_inputs=[coords])
            logit = getitem(out.logits, (0, target_class))
            if logit.requires_grad:
                backward(logit)
    finally:
        model.train(was_training)
    per_frame = [np.linalg.norm(c.grad, axis=-1) if c.grad is not None else np.zeros(c.shape[:2])
                 for c in coords]
    raw = np.concatenate(per_frame, axis=0).mean(axis=0)
    top = raw.max()
    if not np.isfinite(top):
        raise ContractError("non-finite saliency")
    all_zero = bool(top == 0)
    scores = np.zeros(NUM_LANDMARKS) if all_zero else raw / top
    return SaliencyReport(sample.sample_id, target_class, scores, all_zero, region_aggregates(scores))


@dataclass
class ActivationMap:
    sample_id: str
    target_class: int
    maps: list[np.ndarray]          # per shot [T', H', W'], nonnegative
    upsampled: list[np.ndarray]     # per shot [T, H, W]

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "target_class": self.target_class,
                "shapes": [list(m.shape) for m in self.maps],
                "upsampled_shapes": [list(u.shape) for u in self.upsampled]}


def upsample_nearest(vol: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    idx = [np.minimum((np.arange(n) * s) // n, s - 1) for n, s in zip(shape, vol.shape)]
    return vol[np.ix_(*idx)]


def grad_cam3d(model: FusionModel, sample: SampleInput, target_class: int) -> ActivationMap:
    """Channel weights = mean of d logit / d A over (T', H', W'); map = relu(sum_c w_c A_c)."""
    target_class = _check_class(target_class)
    if model.visual is None:
        raise ContractError("model has no visual branch")
    if sample.clips is None:
        raise ContractError(f"sample {sample.sample_id} has no clips")
    was_training = model.training
    model.eval()
    try:
        with model.frozen():
            out = model([sample], keep_visual_features=True)
            feats = model.visual.last_features
            backward(getitem(out.logits, (0, target_class)))
    finally:
        model.train(was_training)
        model.visual.last_features = None
    A = feats.data
    G = feats.grad if feats.grad is not None else np.zeros_like(A)
    maps, ups = [], []
    for k, clip in enumerate(sample.clips):
        w = G[k].mean(axis=(1, 2, 3))
        cam = np.maximum(np.tensordot(w, A[k], axes=1), 0.0)
        maps.append(cam)
        ups.append(upsample_nearest(cam, tuple(np.asarray(clip).shape[1:])))
    return ActivationMap(sample.sample_id, target_class, maps, ups)


def write_pgm(path: str | Path, img: np.ndarray, vmax: float | None = None) -> None:
    """8-bit binary PGM (P5); values scaled by ``vmax`` (default: image max)."""
    img = np.asarray(img, dtype=np.float64)
    top = img.max() if vmax is None else vmax
    scaled = np.zeros_like(img) if top <= 0 else np.clip(img / top, 0.0, 1.0)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = raw[m.end():m.end() + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def export_cam(cam: ActivationMap, out_dir: str | Path) -> Path:
    """One PGM per pre-upsampling frame t' of each shot, plus ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    vmax = max((float(m.max()) for m in cam.maps), default=0.0)
    for k, m in enumerate(cam.maps):
        for t in range(m.shape[0]):
            name = f"{cam.sample_id}_k{k}_t{t:02d}.pgm"
            write_pgm(out / name, m[t], vmax)
            files.append({"shot": k, "t": t, "file": name})
    index = {**cam.to_dict(), "scale_max": vmax, "frames": files}
    path = out / "index.json"
    path.write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    return path
