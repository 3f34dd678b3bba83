"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
that is printed in the terminal summary under "acceptance criteria".

Criteria 6, 7 and 10 train full models on the default dataset and take
about 25 minutes together on one core.
"""
import itertools
import time

import numpy as np
import pytest

from shotfusion import kernels
from shotfusion.autodiff import Tensor, gradient_report, reduce_sum, tanh
from shotfusion.checkpoint import ChecksumError, load_checkpoint, save_checkpoint
from shotfusion.cli import main
from shotfusion.data import DatasetManifest, load_split
from shotfusion.data.synth import template_face
from shotfusion.fusion import FusionGate, ReductionHead, cross_entropy, fuse, gate_alpha, reduce_head
from shotfusion.graph import (
    GATLayer,
    GRU,
    LSTM,
    LandmarkBranch,
    build_facial_graph,
    gat_layer,
    gru_forward,
    lstm_forward,
    normalize_coords,
)
from shotfusion.interpret import grad_cam3d, landmark_saliency
from shotfusion.model import FusionModel, apply_variant
from shotfusion.nn import (
    BatchNorm,
    Linear,
    activation,
    adaptive_avg_pool3d,
    batchnorm,
    conv3d,
    dropout_disabled,
    log_softmax,
    softmax,
)
from shotfusion.train import (
    ConfusionMatrix,
    TrainConfig,
    ablation_run,
    classification_metrics,
    evaluate,
    model_checkpoint,
    predict,
    recompute_from_predictions,
    restore_model,
    train,
)
from shotfusion.visual import ResidualBlock3d, residual_block3d

from conftest import ACCEPTANCE, tiny_config
from test_fusion import make_samples
from test_graph import eight_node_subgraph, scalar_gru, scalar_lstm

H = 1e-5
GRAD_TOL = 1e-6
SEEDS = (42, 43, 44, 45, 46)
VARIANTS = ("fused_weighted", "landmarks_only", "visual_only")


def report(num, ok, detail):
    ACCEPTANCE.append((num, bool(ok), detail))
    assert ok, detail


def weighted_sum(out, seed=0):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return reduce_sum(out * Tensor(w))


# -- shared fixtures -------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_ds")
    assert main(["synth", "--seed", "42", "--out", str(root)]) == 0
    return DatasetManifest.load(root)


@pytest.fixture(scope="module")
def fused_run(default_dataset):
    tc = TrainConfig(seed=42)
    t0 = time.perf_counter()
    res = train(default_dataset, tc)
    elapsed = time.perf_counter() - t0
    test = load_split(default_dataset, "test")
    return tc, res, evaluate(res.model, test, "test"), elapsed, test


# -- 1: gradient oracle ------------------------------------------------------------------

def gradient_cases(rng):
    """(name, loss_fn, params) for every layer type and the assembled model."""
    cases = []
    lin = Linear(5, 3, rng)
    lin.bias.data[...] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    cases.append(("linear", lambda: weighted_sum(tanh(lin(x))), {"x": x, **lin.parameters()}))

    for kind in ("relu", "leaky_relu", "swish", "sigmoid"):
        a = Tensor(rng.uniform(0.1, 2, 7) * rng.choice([-1, 1], 7), requires_grad=True)
        cases.append((kind, lambda a=a, k=kind: weighted_sum(activation(a, k)), {"x": a}))

    s = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    cases.append(("softmax", lambda: weighted_sum(softmax(s)), {"x": s}))
    cases.append(("log_softmax", lambda: weighted_sum(log_softmax(s)), {"x": s}))

    for mode in (True, False):
        bn = BatchNorm(3).train(mode)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.running_var = rng.uniform(0.5, 2, 3)
        xb = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
        mean, var = bn.running_mean.copy(), bn.running_var.copy()

        def bn_loss(bn=bn, xb=xb, mean=mean, var=var):
            bn.running_mean, bn.running_var = mean.copy(), var.copy()
            return weighted_sum(batchnorm(xb, bn))

        cases.append((f"batchnorm_{'train' if mode else 'eval'}", bn_loss, {"x": xb, **bn.parameters()}))

    xc = Tensor(rng.normal(size=(1, 2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    backends = ["compiled", "python"] if kernels.HAVE_COMPILED else ["python"]
    for backend, method in itertools.product(backends, ("direct", "im2col")):
        def conv_loss(backend=backend, method=method):
            with kernels.use_backend(backend):
                return weighted_sum(conv3d(xc, w, b, stride=(1, 2, 1), padding=1, method=method))
        cases.append((f"conv3d_{backend}_{method}", conv_loss, {"x": xc, "w": w, "b": b}))

    xp = Tensor(rng.normal(size=(1, 2, 5, 3, 4)), requires_grad=True)
    cases.append(("adaptive_pool", lambda: weighted_sum(adaptive_avg_pool3d(xp, (2, 1, 3))), {"x": xp}))

    blk = ResidualBlock3d(1, 2, 2, rng).eval()
    xr = Tensor(rng.normal(size=(2, 1, 4, 4, 4)), requires_grad=True)
    cases.append(("residual_block", lambda: weighted_sum(residual_block3d(xr, blk)), {"x": xr, **blk.parameters()}))

    g = eight_node_subgraph()
    gat = GATLayer(3, 4, 2, rng)
    xg = Tensor(rng.normal(size=(2, 8, 3)), requires_grad=True)
    cases.append(("gat", lambda: weighted_sum(gat_layer(xg, g, gat)), {"x": xg, **gat.parameters()}))

    p, q = LSTM(3, 2, rng), GRU(2, 2, rng)
    p.bias.data[...] = rng.normal(size=8)
    q.bias_hh.data[...] = rng.normal(size=6)
    xs = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(3)]
    cases.append(("lstm_gru", lambda: weighted_sum(gru_forward(lstm_forward(xs, p), q)),
                  {**{f"x{i}": t for i, t in enumerate(xs)}, **{f"lstm.{k}": v for k, v in p.parameters().items()},
                   **{f"gru.{k}": v for k, v in q.parameters().items()}}))

    br = LandmarkBranch(4, (4,), 2, rng, center_shot=True, feature_scale=10.0)
    shots = [Tensor(normalize_coords(template_face() + rng.normal(0, 0.02, (2, 68, 2))), requires_grad=True)
             for _ in range(2)]
    cases.append(("landmark_branch", lambda: weighted_sum(br([shots])), {"shot0": shots[0], **br.parameters()}))

    for mode in ("gated", "global"):
        gate = FusionGate(3, mode, rng)
        v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        l = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        cases.append((f"fusion_{mode}", lambda v=v, l=l, gate=gate: weighted_sum(fuse(v, l, gate_alpha(v, l, gate))),
                      {"v": v, "l": l, **gate.parameters()}))

    head = ReductionHead(8, 8, rng)
    xh = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    cases.append(("head_cross_entropy", lambda: cross_entropy(reduce_head(xh, head), [0, 1, 1, 0]),
                  {"x": xh, **head.parameters()}))

    model = FusionModel(apply_variant(tiny_config(), "fused_weighted"), seed=3)
    samples = make_samples(rng)
    cases.append(("full_model", lambda: cross_entropy(model(samples).logits, [s.label for s in samples]),
                  model.parameters()))
    return cases


def test_criterion_01_gradient_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = {}
    with dropout_disabled():
        for name, loss_fn, params in gradient_cases(rng):
            limit = 6 if name == "full_model" else None
            worst[name] = max(gradient_report(loss_fn, params, h=H, max_elements=limit).values())
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    bad = [k for k, v in worst.items() if not v < GRAD_TOL]
    report(1, not bad and elapsed < 300,
           f"{len(worst)} layer checks, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s"
           + (f", failing {bad}" if bad else ""))


# -- 2: graph attention -----------------------------------------------------------------

def test_criterion_02_gat_attention():
    rng = np.random.default_rng(2)
    layer = GATLayer(4, 8, 2, rng)
    g = build_facial_graph()
    _, att = gat_layer(Tensor(rng.normal(size=(3, 68, 4))), g, layer, return_attention=True)
    row_err = float(np.max(np.abs(att.sum(axis=-1) - 1.0)))

    sub = eight_node_subgraph()
    layer8 = GATLayer(3, 6, 3, rng)
    x = rng.normal(size=(8, 3))
    perm_err = 0.0
    for _ in range(10):
        perm = rng.permutation(8)
        xp = np.empty_like(x)
        xp[perm] = x
        out = gat_layer(Tensor(x), sub, layer8).data
        outp = gat_layer(Tensor(xp), sub.permuted(perm), layer8).data
        perm_err = max(perm_err, float(np.max(np.abs(outp[perm] - out))))
    report(2, row_err < 1e-12 and perm_err < 1e-10,
           f"row sum err {row_err:.1e}, permutation err {perm_err:.1e} (8 nodes, 10 permutations)")


# -- 3: fusion identities -----------------------------------------------------------------

def test_criterion_03_fusion_identities():
    rng = np.random.default_rng(3)
    v, l = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    zero = np.array_equal(fuse(Tensor(v), Tensor(l), np.zeros((5, 1))).data, l)
    one = np.array_equal(fuse(Tensor(v), Tensor(l), np.ones((5, 1))).data, v)
    same = all(np.array_equal(fuse(Tensor(v), Tensor(v.copy()), np.full((5, 1), a)).data, v)
               for a in np.linspace(0, 1, 101))
    gate = FusionGate(8, "gated", rng)
    alphas = []
    for scale in (1.0, 1e2, 1e4):
        for sign in (1, -1):
            gate.gate.weight.data[...] = sign * scale
            alphas.append(gate_alpha(Tensor(np.abs(v) + 1), Tensor(np.abs(l) + 1), gate).data)
    alphas = np.concatenate(alphas)
    inside = bool(np.all((alphas > 0) & (alphas < 1)))
    report(3, zero and one and same and inside,
           f"alpha=0 exact {zero}, alpha=1 exact {one}, equal inputs exact {same}, "
           f"alpha in [{alphas.min():.3g}, {alphas.max():.17g}] open {inside}")


# -- 4: metrics ---------------------------------------------------------------------------

def test_criterion_04_metrics():
    m, _ = classification_metrics(ConfusionMatrix(tp=97, tn=95, fp=3, fn=5))
    worked = (abs(m["accuracy"] - 0.96) < 1e-10 and abs(m["precision"] - 0.97) < 1e-10
              and abs(m["recall"] - 97 / 102) < 1e-10 and round(m["recall"], 5) == 0.95098)
    mismatches = 0
    for n in range(1, 7):
        for labels in itertools.product((0, 1), repeat=n):
            for preds in itertools.product((0, 1), repeat=n):
                got, _ = classification_metrics(ConfusionMatrix.from_predictions(labels, preds))
                mismatches += got != recompute_from_predictions(
                    [{"label": y, "pred": p} for y, p in zip(labels, preds)])
    report(4, worked and mismatches == 0,
           f"worked example {m['accuracy']:.2f}/{m['precision']:.2f}/{m['recall']:.5f}, "
           f"{mismatches} brute-force mismatches over all label/prediction pairs up to n=6")


# -- 5: recurrent cells ----------------------------------------------------------------------

def test_criterion_05_recurrent_cells():
    rng = np.random.default_rng(5)
    lstm_err = gru_err = 0.0
    for _ in range(20):
        p = LSTM(1, 1, rng)
        p.bias.data[...] = rng.normal(size=4)
        xs = rng.normal(size=5)
        got = [float(h.data[0]) for h in lstm_forward([Tensor([x]) for x in xs], p)]
        ref = scalar_lstm(xs, p.weight_ih.data[:, 0], p.weight_hh.data[:, 0], p.bias.data)
        lstm_err = max(lstm_err, float(np.max(np.abs(np.array(got) - ref))))
        q = GRU(1, 1, rng)
        q.bias_ih.data[...] = rng.normal(size=3)
        q.bias_hh.data[...] = rng.normal(size=3)
        got = float(gru_forward([Tensor([x]) for x in xs], q).data[0])
        ref = scalar_gru(xs, q.weight_ih.data[:, 0], q.weight_hh.data[:, 0], q.bias_ih.data, q.bias_hh.data)
        gru_err = max(gru_err, abs(got - ref))
    report(5, lstm_err < 1e-10 and gru_err < 1e-10,
           f"5-step scalar recurrences, 20 draws: LSTM err {lstm_err:.1e}, GRU err {gru_err:.1e}")


# -- 6: end to end ------------------------------------------------------------------------------

def test_criterion_06_end_to_end(fused_run):
    tc, res, rep, elapsed, _ = fused_run
    epochs = len(res.history["epoch"])
    report(6, rep.accuracy >= 0.95 and epochs <= 25 and elapsed <= 600,
           f"test accuracy {rep.accuracy:.4f} after {epochs} epochs in {elapsed:.0f}s "
           f"(desk profile, seed {tc.seed}, mean alpha {rep.mean_alpha:.3f})")


# -- 7: ablation -------------------------------------------------------------------------------

def test_criterion_07_ablation(default_dataset, fused_run):
    rows = {("fused_weighted", 42): fused_run[2].accuracy}
    for variant, seed in itertools.product(VARIANTS, SEEDS):
        if (variant, seed) not in rows:
            rows[(variant, seed)] = ablation_run(variant, TrainConfig(seed=seed), default_dataset)["accuracy"]
    med = {v: float(np.median([rows[(v, s)] for s in SEEDS])) for v in VARIANTS}
    report(7, med["fused_weighted"] >= med["landmarks_only"] and med["fused_weighted"] >= med["visual_only"],
           "median test accuracy over 5 seeds: " + ", ".join(f"{v} {a:.4f}" for v, a in med.items()))


# -- 8: determinism ----------------------------------------------------------------------------

def test_criterion_08_determinism(default_dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", str(default_dataset.root), "--epochs", "2", "--seed", "42", "--out", str(out)]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    same = files == sorted(p.name for p in outs[1].iterdir()) and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    report(8, same, f"two 2-epoch runs, {len(files)} files compared byte for byte ({', '.join(files)})")


# -- 9: persistence ----------------------------------------------------------------------------

def test_criterion_09_persistence(fused_run, tmp_path):
    tc, res, _, _, test = fused_run
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model_checkpoint(res.model, tc))
    before, a_before = predict(res.model, test)
    after, a_after = predict(restore_model(load_checkpoint(path)), test)
    identical = np.array_equal(before, after) and np.array_equal(a_before, a_after)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    try:
        load_checkpoint(bad)
        detected = False
    except ChecksumError:
        detected = True
    report(9, identical and detected,
           f"reloaded logits identical {identical} on {len(test)} test samples, corrupted CRC detected {detected}")


# -- 10: interpretability ----------------------------------------------------------------------

def test_criterion_10_interpretability(fused_run):
    _, res, _, _, test = fused_run
    model = res.model
    eyes, bridge = [], []
    for s in test:
        agg = landmark_saliency(model, s, s.label).regions
        eyes.append(agg["eyes"]["mean"])
        bridge.append(agg["nose_bridge"]["mean"])
    model.eval()
    expected = model.visual.backbone.features(Tensor(test[0].clips[0][None])).shape[2:]
    cam_ok = True
    for s in test[:4]:
        cam = grad_cam3d(model, s, s.label)
        cam_ok &= all(m.shape == expected and np.all(m >= 0) for m in cam.maps)
    eye_mean, bridge_mean = float(np.mean(eyes)), float(np.mean(bridge))
    report(10, eye_mean > bridge_mean and cam_ok,
           f"mean saliency eyes {eye_mean:.3f} vs nose bridge {bridge_mean:.3f} over {len(test)} test samples; "
           f"Grad-CAM nonnegative with shape {tuple(expected)} {cam_ok}")
