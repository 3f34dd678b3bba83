import math

import numpy as np
import pytest

from shotfusion.autodiff import ShapeError, Tensor, backward, gradient_report, reduce_sum
from shotfusion.fusion import FusionGate, ReductionHead, concat_fuse, cross_entropy, fuse, gate_alpha, reduce_head
from shotfusion.graph import normalize_coords
from shotfusion.model import FusionModel, SampleInput, apply_variant, parse_variant
from shotfusion.data.synth import template_face
from shotfusion.nn import dropout_disabled, softmax

from conftest import tiny_config


def weighted_sum(out, seed=0):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return reduce_sum(out * Tensor(w))


# -- gate / fuse -------------------------------------------------------------------------

def test_zero_gate_gives_half(rng):
    gate = FusionGate(4, "gated", rng)
    gate.gate.weight.data[...] = 0
    a = gate_alpha(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))), gate)
    assert a.shape == (3, 1) and np.all(a.data == 0.5)


def test_global_gate_converged_value():
    gate = FusionGate(4, "global")
    gate.global_alpha_logit.data[...] = -0.11845
    a = gate_alpha(Tensor(np.zeros(4)), Tensor(np.zeros(4)), gate).data
    assert abs(float(a) - 0.47042) < 1e-5


def test_alpha_strictly_inside_unit_interval(rng):
    gate = FusionGate(4, "gated", rng)
    gate.gate.weight.data[...] *= 50
    a = gate_alpha(Tensor(rng.normal(0, 5, (10_000, 4))), Tensor(rng.normal(0, 5, (10_000, 4))), gate).data
    assert np.all((a > 0) & (a < 1))


def test_fuse_endpoints_exact(rng):
    v, l = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.array_equal(fuse(Tensor(v), Tensor(l), Tensor(np.ones((5, 1)))).data, v)
    assert np.array_equal(fuse(Tensor(v), Tensor(l), Tensor(np.zeros((5, 1)))).data, l)


def test_fuse_equal_inputs_any_alpha(rng):
    v = rng.normal(size=(4, 6))
    for a in rng.uniform(size=20):
        assert np.array_equal(fuse(Tensor(v), Tensor(v.copy()), Tensor(a)).data, v)


def test_fuse_fractional_weight():
    out = fuse(Tensor(np.ones(8)), Tensor(np.zeros(8)), Tensor(0.4704)).data
    assert np.all(out == 0.4704)


def test_fuse_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fuse(Tensor(np.ones(2)), Tensor(np.ones(2)), Tensor(1.5))
    with pytest.raises(ShapeError):
        fuse(Tensor(np.ones(2)), Tensor(np.ones(3)), Tensor(0.5))


@pytest.mark.parametrize("mode", ["gated", "global"])
def test_gate_and_fuse_grads(mode, rng):
    gate = FusionGate(3, mode, rng)
    v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    l = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    if mode == "global":
        gate.global_alpha_logit.data[...] = 0.3
    report = gradient_report(lambda: weighted_sum(fuse(v, l, gate_alpha(v, l, gate))),
                             {"v": v, "l": l, **gate.parameters()})
    assert max(report.values()) < 1e-6, report


def test_concat_order(rng):
    v, l = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert np.array_equal(concat_fuse(Tensor(v), Tensor(l)).data, np.concatenate([v, l], -1))


# -- head / loss ------------------------------------------------------------------------

def test_zero_head_gives_output_bias(rng):
    head = ReductionHead(8, 8, rng).eval()
    for t in head.parameters().values():
        if t.ndim == 2:
            t.data[...] = 0
    head.fc_out.bias.data[...] = [0.25, -1.5]
    out = reduce_head(Tensor(rng.normal(size=(3, 8))), head).data
    assert np.array_equal(out, [[0.25, -1.5]] * 3)


def test_head_eval_deterministic(rng):
    head = ReductionHead(8, 8, rng).eval()
    x = Tensor(rng.normal(size=(2, 8)))
    assert np.array_equal(reduce_head(x, head).data, reduce_head(x, head).data)


def test_head_grads(rng):
    head = ReductionHead(8, 8, rng)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    with dropout_disabled():
        report = gradient_report(lambda: cross_entropy(reduce_head(x, head), [0, 1, 1, 0]),
                                 {"x": x, **head.parameters()})
    assert max(report.values()) < 1e-6, report


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros(2)), 1).data == pytest.approx(math.log(2), abs=1e-15)
    big = cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0]).data
    assert np.isfinite(big) and abs(big) < 1e-12
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 2))), [2])


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    z = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    labels = np.array([1, 0, 1])
    backward(cross_entropy(z, labels))
    expected = (softmax(Tensor(z.data)).data - np.eye(2)[labels]) / 3
    assert np.allclose(z.grad, expected, rtol=0, atol=1e-15)


# -- model ---------------------------------------------------------------------------------

def make_samples(rng, n=3, shots=2, aux_dim=0):
    out = []
    for i in range(n):
        lm = [normalize_coords(template_face() + rng.normal(0, 0.02, (2, 68, 2))) for _ in range(shots)]
        clips = [rng.uniform(size=(3, 4, 8, 8)) for _ in range(shots)]
        aux = rng.normal(size=aux_dim) if aux_dim else None
        out.append(SampleInput(f"s{i}", i % 2, lm, clips, aux))
    return out


def test_variants_parse_and_apply():
    cfg = tiny_config()
    assert apply_variant(cfg, "fused_concat:act=relu").activation == "relu"
    assert apply_variant(cfg, "landmarks_only:+ear:+mar").aux == ("ear", "mar")
    with pytest.raises(ValueError):
        parse_variant("fused_magic")


@pytest.mark.parametrize("variant", ["fused_weighted", "fused_concat:act=swish", "visual_only:+ear",
                                     "landmarks_only:+demographics"])
def test_full_model_grads(variant, rng):
    cfg = apply_variant(tiny_config(), variant)
    model = FusionModel(cfg, seed=3)
    aux_dim = model.aux_dim
    samples = make_samples(rng, aux_dim=aux_dim)
    with dropout_disabled():
        report = gradient_report(lambda: cross_entropy(model(samples).logits, [s.label for s in samples]),
                                 model.parameters(), max_elements=6, seed=1)
    assert max(report.values()) < 1e-6, {k: v for k, v in report.items() if v >= 1e-6}


def test_model_alpha_and_branch_outputs(rng):
    model = FusionModel(tiny_config(), seed=0).eval()
    out = model(make_samples(rng))
    assert out.alpha.shape == (3, 1)
    assert np.all((out.alpha.data > 0) & (out.alpha.data < 1))
    assert out.F_vis.shape == out.F_land.shape == (3, 8)
