"""Command-line entry point: synth | train | eval | ablate | explain | inspect.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training diverged,
5 checkpoint/format error, 6 unknown sample id.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigError, dataclass_from_kv, parse_kv, read_kv
from .data.formats import StorageError, decode_clip, decode_landmarks
from .data.manifest import CONFIG_NAME, MANIFEST_NAME, DatasetManifest, ManifestError, attach_demographics, subject_split
from .data.synth import GeneratorConfig, generate_dataset
from .data.dataset import load_record, load_split
from .model import VARIANTS
from .train import (
    CheckpointMismatch,
    DivergenceError,
    EmptySplitError,
    TrainConfig,
    ablation_table,
    evaluate,
    format_table,
    recompute_from_predictions,
    restore_model,
    train,
    train_config_of,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_FORMAT, EXIT_UNKNOWN_SAMPLE = 0, 2, 3, 4, 5, 6


class UnknownSample(KeyError):
    pass


def note(msg: str) -> None:
    print(f"note: {msg}", file=sys.stderr)


def tree_checksum(root: Path, names) -> str:
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode() + b"\0")
        h.update((root / name).read_bytes())
    return h.hexdigest()


def threads_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # optional; BLAS then uses its own default
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


# -- config merging -----------------------------------------------------------------

TRAIN_FLAGS = ("epochs", "batch_size", "lr", "weight_decay", "variant", "fusion_mode", "activation",
               "val_fraction")


def run_config(args) -> TrainConfig:
    """Config file values, then flags (flags win; each override is noted)."""
    kv = read_kv(args.config) if getattr(args, "config", None) else {}
    base = dataclass_from_kv(TrainConfig, kv) if kv else TrainConfig()
    updates = {}
    for name in TRAIN_FLAGS + ("seed", "profile"):
        val = getattr(args, name, None)
        if val is None:
            continue
        if name in kv and getattr(base, name) != val:
            note(f"--{name.replace('_', '-')}={val} overrides {name}={getattr(base, name)} from {args.config}")
        updates[name] = val
    try:
        return dataclasses.replace(base, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    kv = read_kv(args.config) if args.config else {}
    train_fraction = float(kv.pop("train_fraction", 0.8))
    cfg = dataclass_from_kv(GeneratorConfig, kv)
    if args.subjects is not None:
        cfg = dataclasses.replace(cfg, subjects_per_class=args.subjects)
    seed = 42 if args.seed is None else args.seed
    out = Path(args.out or "data")
    m = generate_dataset(cfg, seed, out, jobs=args.jobs)
    m = attach_demographics(subject_split(m, train_fraction, seed), seed)
    m.save()
    counts = m.counts()
    for split in ("train", "test"):
        subs = {r.subject_id for r in m.split(split)}
        print(f"{split:5s}  sober {counts[split][0]:4d}  intoxicated {counts[split][1]:4d}  subjects {len(subs)}")
    names = [MANIFEST_NAME, CONFIG_NAME] + [r.landmark_path for r in m.records] + [r.clip_path for r in m.records]
    print(f"wrote {len(m.records)} samples to {out}")
    print(f"checksum {tree_checksum(out, names)}")
    return EXIT_OK


def cmd_train(args) -> int:
    tc = run_config(args)
    m = DatasetManifest.load(args.manifest)
    out = Path(args.out or "run")
    print(f"training {tc.variant} ({tc.profile}) for {tc.epochs} epochs, seed {tc.seed}")
    res = train(m, tc, out, resume=args.resume, log=print)
    report = {"config": dataclasses.asdict(tc), "history": res.history, "best_epoch": res.best_epoch,
              "fit_samples": res.fit_ids, "validation_samples": res.val_ids}
    mcfg = tc.model_config()
    if m.split("test"):
        rep = evaluate(res.model, load_split(m, "test", mcfg.uses_clips, mcfg.aux), "test", tc.batch_size)
        report["test"] = rep.to_dict()
        print(f"test accuracy {rep.accuracy:.4f}  precision {rep.precision:.4f}  recall {rep.recall:.4f}")
    (out / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(f"checkpoints and metrics.json in {out}")
    return EXIT_OK


def _load_model(path):
    ck = load_checkpoint(path)
    return restore_model(ck), train_config_of(ck)


def cmd_eval(args) -> int:
    model, tc = _load_model(args.checkpoint)
    m = DatasetManifest.load(args.manifest)
    samples = load_split(m, args.split, model.cfg.uses_clips, model.cfg.aux)
    rep = evaluate(model, samples, args.split, tc.batch_size)
    rep.config = dataclasses.asdict(tc)
    cm = rep.confusion
    print(f"split {args.split}: {cm.total} samples")
    print(f"accuracy  {rep.accuracy:.6f}\nprecision {rep.precision:.6f}\nrecall    {rep.recall:.6f}")
    if rep.mean_alpha is not None:
        print(f"mean alpha {rep.mean_alpha:.6f}")
    print(f"confusion  TP {cm.tp}  TN {cm.tn}  FP {cm.fp}  FN {cm.fn}")
    for f in rep.flags:
        print(f"flag: {f}")
    again = recompute_from_predictions(rep.predictions)
    if any(again[k] != getattr(rep, k) for k in again):
        print("warning: metrics differ from a recomputation over the predictions", file=sys.stderr)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    tc = run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants for p in v.split(":") if p not in VARIANTS]
    if bad or not variants:
        print(f"unknown variant(s) {', '.join(bad) or '(none given)'}; valid: {', '.join(VARIANTS)}",
              file=sys.stderr)
        return EXIT_CONFIG
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tc.seed]
    m = DatasetManifest.load(args.manifest)
    table = ablation_table(m, variants, seeds, tc)
    table["config"] = dataclasses.asdict(tc)
    text = format_table(table["rows"]) + "\n\nmedians\n" + format_table(
        table["medians"], ("variant", "accuracy", "precision", "recall"))
    print(text)
    out = Path(args.out or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=1) + "\n")
    (out / "ablation.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .interpret import export_cam, grad_cam3d, landmark_saliency

    model, _ = _load_model(args.checkpoint)
    m = DatasetManifest.load(args.manifest)
    try:
        rec = m.by_id(args.sample_id)
    except KeyError:
        raise UnknownSample(args.sample_id) from None
    cfg = model.cfg
    sample = load_record(m, rec, clips=cfg.uses_clips, aux=cfg.aux)
    out = Path(args.out or "explain")
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "saliency":
        rep = landmark_saliency(model, sample, args.target)
        path = out / f"{rec.sample_id}_saliency.json"
        path.write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=1) + "\n")
        regions = rep.regions
        print(f"saliency for class {args.target}: eyes {regions['eyes']['mean']:.3f}  "
              f"mouth {regions['mouth']['mean']:.3f}  jaw {regions['jaw']['mean']:.3f}  "
              f"nose_bridge {regions['nose_bridge']['mean']:.3f}" + ("  (all zero)" if rep.all_zero else ""))
        files = [path.name]
    else:
        cam = grad_cam3d(model, sample, args.target)
        path = export_cam(cam, out)
        index = json.loads(path.read_text())
        files = [path.name] + [f["file"] for f in index["frames"]]
        print(f"grad-cam maps {index['shapes']} -> {len(files) - 1} PGM files")
    print(f"wrote {path}")
    print(f"checksum {tree_checksum(out, files)}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir() or path.suffix == ".jsonl":
        m = DatasetManifest.load(path)
        print(f"manifest {m.root / MANIFEST_NAME}: {len(m.records)} samples, seed {m.seed}")
        for split, c in m.counts().items():
            print(f"  {split:5s} sober {c[0]}  intoxicated {c[1]}  subjects {len({r.subject_id for r in m.split(split)})}")
        if m.config is not None:
            print("generator config:")
            print("".join(f"  {line}\n" for line in m.config.to_text().splitlines()), end="")
        return EXIT_OK
    raw = path.read_bytes()
    magic = raw[:4]
    if magic == b"CKP1":
        ck = load_checkpoint(path)
        n = sum(a.size for a in ck.params.values())
        print(f"checkpoint {path}: {len(ck.params)} tensors, {n} parameters, "
              f"epoch {ck.meta.get('epoch')}, optimizer step {ck.optim.get('step')}")
        print(json.dumps(ck.config, sort_keys=True, indent=1))
    elif magic == b"LMK1":
        print(f"landmarks {path}: {decode_landmarks(raw, str(path)).shape}")
    elif magic == b"CLP1":
        print(f"clip {path}: {decode_clip(raw, str(path)).shape}")
    else:
        # a key=value config file?
        try:
            kv = parse_kv(raw.decode(), str(path))
        except (UnicodeDecodeError, ConfigError):
            raise StorageError(f"{path}: unrecognized file (magic {magic!r})") from None
        for k, v in kv.items():
            print(f"{k} = {v}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    common.add_argument("--profile", choices=("desk", "paper"), default=None,
                        help="model dimensions: desk (D=64, default) or paper (D=512)")

    p = argparse.ArgumentParser(prog="shotfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--subjects", type=int, default=None, help="subjects per class")
    s.add_argument("--jobs", type=int, default=1, help="parallel subject workers (bytes unchanged)")
    s.set_defaults(fn=cmd_synth)

    def train_flags(q):
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--weight-decay", dest="weight_decay", type=float)
        q.add_argument("--fusion-mode", dest="fusion_mode", choices=("gated", "global"))
        q.add_argument("--activation", choices=("relu", "swish", "leaky_relu"))
        q.add_argument("--val-fraction", dest="val_fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    t.add_argument("manifest")
    train_flags(t)
    t.add_argument("--variant")
    t.add_argument("--resume", default=None, help="continue from a checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train/test variants over seeds")
    a.add_argument("manifest")
    train_flags(a)
    a.add_argument("--variants", default="fused_weighted,landmarks_only,visual_only")
    a.add_argument("--seeds", default=None, help="comma-separated seeds")
    a.set_defaults(fn=cmd_ablate)

    x = sub.add_parser("explain", parents=[common], help="landmark saliency or Grad-CAM for one sample")
    x.add_argument("checkpoint")
    x.add_argument("manifest")
    x.add_argument("sample_id")
    x.add_argument("--mode", choices=("saliency", "cam"), default="saliency")
    x.add_argument("--target", type=int, choices=(0, 1), default=1, help="class logit to explain")
    x.set_defaults(fn=cmd_explain)

    i = sub.add_parser("inspect", parents=[common], help="dump checkpoint / manifest / file headers")
    i.add_argument("path")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threads_limit(args.threads):
            return args.fn(args)
    except DivergenceError as exc:
        last = f"; last good checkpoint {exc.last_checkpoint}" if exc.last_checkpoint else ""
        print(f"error: {exc}{last}", file=sys.stderr)
        return EXIT_DIVERGED
    except UnknownSample as exc:
        print(f"error: unknown sample_id {exc.args[0]!r}", file=sys.stderr)
        return EXIT_UNKNOWN_SAMPLE
    except (StorageError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ManifestError, EmptySplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
