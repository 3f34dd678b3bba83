"""The dual-branch model and the variant switches used by the ablation runner."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor, concat
from .fusion import FusionGate, ReductionHead, concat_fuse, fuse, gate_alpha, reduce_head
from .graph import LandmarkBranch
from .nn import ACTIVATIONS, Linear, Module, linear
from .visual import VisualBranch

BASE_VARIANTS = ("fused_weighted", "fused_concat", "visual_only", "landmarks_only")
AUX_VARIANTS = ("+ear", "+mar", "+demographics")
ACT_VARIANTS = tuple(f"act={a}" for a in ("relu", "swish", "leaky_relu"))
VARIANTS = BASE_VARIANTS + ACT_VARIANTS + AUX_VARIANTS
AUX_DIMS = {"ear": 2, "mar": 2, "demographics": 10}

PROFILES = {
    "desk": {"d_model": 64},
    "paper": {"d_model": 512},
}


@dataclass
class ModelConfig:
    d_model: int = 64
    gat_dims: tuple[int, ...] = (32, 32)
    gat_heads: int = 2
    gat_attn_slope: float = 0.2
    use_velocity: bool = True
    velocity_scale: float = 1.0
    center_shot: bool = True
    feature_scale: float = 10.0
    r3d_widths: tuple[int, ...] = (8, 16)
    r3d_blocks: tuple[int, ...] = (1, 1)
    clip_channels: int = 3
    fusion: str = "weighted"          # weighted | concat | visual_only | landmarks_only
    fusion_mode: str = "gated"        # gated | global  (weighted fusion only)
    activation: str = "leaky_relu"
    aux: tuple[str, ...] = ()
    dropout: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.fusion not in ("weighted", "concat", "visual_only", "landmarks_only"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        for a in self.aux:
            if a not in AUX_DIMS:
                raise ValueError(f"unknown auxiliary feature {a!r}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 (two halving stages)")

    @property
    def uses_clips(self) -> bool:
        return self.fusion != "landmarks_only"

    @property
    def uses_landmarks(self) -> bool:
        return self.fusion != "visual_only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("gat_dims", "r3d_widths", "r3d_blocks", "aux"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def parse_variant(variant: str) -> list[str]:
    """Split ``"fused_concat:act=relu"`` style composites and validate each part."""
    parts = [p for p in variant.split(":") if p]
    if not parts:
        raise ValueError("empty variant")
    for p in parts:
        if p not in VARIANTS:
            raise ValueError(f"unknown variant {p!r}; valid: {', '.join(VARIANTS)}")
    return parts


def apply_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    updates: dict = {}
    aux = list(cfg.aux)
    for part in parse_variant(variant):
        if part == "fused_weighted":
            updates["fusion"] = "weighted"
        elif part == "fused_concat":
            updates["fusion"] = "concat"
        elif part in ("visual_only", "landmarks_only"):
            updates["fusion"] = part
        elif part.startswith("act="):
            updates["activation"] = part[4:]
        else:
            name = part[1:]
            if name not in aux:
                aux.append(name)
    updates["aux"] = tuple(aux)
    return replace(cfg, **updates)


@dataclass
class SampleInput:
    """One classification unit: its ordered shots, already preprocessed."""
    sample_id: str
    label: int
    landmarks: list[np.ndarray] = field(default_factory=list)   # per shot [F, 68, 2], normalized
    clips: list[np.ndarray] | None = None                        # per shot [C, T, H, W]
    aux: np.ndarray | None = None                                # concatenated auxiliary vector


@dataclass
class ModelOutput:
    logits: Tensor
    alpha: Tensor | None
    F_vis: Tensor | None
    F_land: Tensor | None


class FusionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        D = cfg.d_model
        self.landmark = (LandmarkBranch(D, cfg.gat_dims, cfg.gat_heads, rng, cfg.gat_attn_slope,
                                        cfg.activation, cfg.use_velocity, cfg.velocity_scale, dtype,
                                        cfg.center_shot, cfg.feature_scale)
                         if cfg.uses_landmarks else None)
        self.visual = (VisualBranch(D, cfg.clip_channels, cfg.r3d_widths, cfg.r3d_blocks, rng,
                                    cfg.activation, cfg.bn_momentum, cfg.bn_eps, dtype)
                       if cfg.uses_clips else None)
        aux_dim = sum(AUX_DIMS[a] for a in cfg.aux)
        self.aux_dim = aux_dim
        self.aux_proj = Linear(D + aux_dim, D, rng, dtype) if (aux_dim and cfg.uses_landmarks) else None
        self.gate = (FusionGate(D, cfg.fusion_mode, rng, dtype) if cfg.fusion == "weighted" else None)
        head_in = 2 * D if cfg.fusion == "concat" else D
        if aux_dim and not cfg.uses_landmarks:
            head_in += aux_dim
        self.head = ReductionHead(head_in, D, rng, cfg.dropout, cfg.activation, cfg.bn_momentum,
                                  cfg.bn_eps, dtype)

    def __call__(self, batch: Sequence[SampleInput], rng: np.random.Generator | None = None,
                 keep_visual_features: bool = False, landmark_inputs=None) -> ModelOutput:
        """Forward a batch.  ``landmark_inputs`` optionally overrides the per-sample
        landmark arrays with tensors (used for input saliency)."""
        cfg = self.cfg
        F_land = F_vis = alpha = None
        aux = None
        if self.aux_dim:
            if any(s.aux is None for s in batch):
                raise ContractError(f"model expects auxiliary features {cfg.aux}")
            aux = Tensor._wrap(np.stack([s.aux for s in batch]).astype(cfg.dtype))
        if self.landmark is not None:
            lm = landmark_inputs if landmark_inputs is not None else [s.landmarks for s in batch]
            F_land = self.landmark(lm)
            if self.aux_proj is not None:
                F_land = linear(concat([F_land, aux], axis=-1), self.aux_proj)
        if self.visual is not None:
            if any(s.clips is None for s in batch):
                raise ContractError("visual branch needs clips for every sample")
            F_vis = self.visual([s.clips for s in batch], keep_features=keep_visual_features)
        if cfg.fusion == "weighted":
            alpha = gate_alpha(F_vis, F_land, self.gate)
            fused = fuse(F_vis, F_land, alpha)
        elif cfg.fusion == "concat":
            fused = concat_fuse(F_vis, F_land)
        elif cfg.fusion == "visual_only":
            fused = F_vis if aux is None else concat([F_vis, aux], axis=-1)
        else:
            fused = F_land
        logits = reduce_head(fused, self.head, rng)
        return ModelOutput(logits, alpha, F_vis, F_land)
