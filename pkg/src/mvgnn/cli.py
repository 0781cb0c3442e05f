"""Command-line entry point.

Exit codes: 0 success, 1 contract/format errors, 2 failed audit or gradcheck.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import datasets as ds
from . import models as md
from . import trainer as tr
from .errors import MvgnnError

MODEL_CHOICES = list(md.ARCHITECTURES)


def _default_threads():
    env = os.environ.get("MVGNN_THREADS")
    return int(env) if env else 1


def _add_model_flags(p):
    p.add_argument("--model", choices=MODEL_CHOICES, default="clifford-egnn")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--scalar-width", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--per-grade-invariants", action="store_true")


def _add_common_flags(p):
    p.add_argument("--task", choices=list(md.TASKS), default="nbody")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser():
    parser = argparse.ArgumentParser(prog="mvgnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate dataset files")
    _add_common_flags(g)
    g.add_argument("--train", type=int, default=3000)
    g.add_argument("--val", type=int, default=2000)
    g.add_argument("--test", type=int, default=2000)
    g.add_argument("--chain-len", type=int, default=32)
    g.add_argument("--noise-std", type=float, default=0.5)
    g.add_argument("--out", type=Path, default=Path("data"))

    t = sub.add_parser("train", help="train a model")
    _add_common_flags(t)
    _add_model_flags(t)
    t.add_argument("--data", type=Path, required=True, help="directory with generated splits")
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--wd", type=float, default=1e-4)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--out", type=Path, default=Path("run"))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="dataset file")
    e.add_argument("--json", action="store_true")

    a = sub.add_parser("audit-equivariance", help="O(3) equivariance audit")
    _add_common_flags(a)
    _add_model_flags(a)
    a.add_argument("--checkpoint", type=Path, default=None)
    a.add_argument("--trials", type=int, default=20)
    a.add_argument("--tol", type=float, default=1e-8)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--json", action="store_true")

    b = sub.add_parser("bench", help="time forward+backward+optimizer")
    _add_common_flags(b)
    _add_model_flags(b)
    b.add_argument("--all-models", action="store_true", help="bench all four architectures")
    b.add_argument("--batch", type=int, default=100)
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--out", type=Path, default=Path("bench"))
    return parser


def _model_config(args):
    return md.ModelConfig(
        architecture=args.model,
        layers=args.layers,
        channels=args.channels,
        scalar_width=args.scalar_width,
        hidden=args.hidden,
        task=args.task,
        per_grade_invariants=args.per_grade_invariants,
    )


def _split_paths(data_dir, task):
    return {s: Path(data_dir) / f"{task}_{s}.mvds" for s in ("train", "val", "test")}


def _check_task_matches(path, task):
    file_task, _ = ds.load_dataset(path)
    if file_task != task:
        raise MvgnnError(
            f"--task {task} conflicts with dataset header tag {file_task!r} in {path}"
        )


def _emit(args, payload, human_lines):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        for line in human_lines:
            print(line)


def cmd_generate(args):
    if args.task == "nbody":
        cfg = ds.SimConfig(seed=args.seed)
        paths = ds.generate_nbody(args.train, args.val, args.test, cfg, args.out,
                                  threads=args.threads)
    else:
        paths = {}
        for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
            cfg = ds.ChainConfig(chain_len=args.chain_len, noise_std=args.noise_std,
                                 seed=args.seed)
            path = Path(args.out) / f"denoise_{split}.mvds"
            ds.generate_chain_denoise(count, cfg, path,
                                      sample_offset=ds.SPLIT_OFFSETS[split])
            paths[split] = path
    payload = {"files": {k: str(v) for k, v in paths.items()},
               "counts": {"train": args.train, "val": args.val, "test": args.test}}
    _emit(args, payload, [f"{k}: {v}" for k, v in payload["files"].items()])
    return 0


def cmd_train(args):
    model_cfg = _model_config(args)
    defaults = tr.DEFAULT_TRAIN[args.task]
    train_cfg = tr.TrainConfig(
        batch_size=args.batch if args.batch is not None else defaults["batch_size"],
        lr=args.lr if args.lr is not None else defaults["lr"],
        weight_decay=args.wd,
        epochs=args.epochs if args.epochs is not None else defaults["epochs"],
        seed=args.seed,
        precision=args.precision,
    )
    paths = _split_paths(args.data, args.task)
    _check_task_matches(paths["train"], args.task)
    if not args.json:
        print(f"config: model={model_cfg.to_dict()} train={train_cfg.__dict__}")
    report, ckpt = tr.train(model_cfg, train_cfg, paths["train"], paths["val"],
                            paths["test"], args.out, log=None if args.json else print)
    from . import report as rp  # deferred: pulls in matplotlib

    metrics_path = rp.write_metrics(report, Path(args.out) / "metrics.tsv")
    figure_path = rp.render_training_curve(report, Path(args.out) / "training_curve.png")
    payload = report.to_dict()
    payload.update(checkpoint=str(ckpt), metrics=str(metrics_path), figure=str(figure_path))
    _emit(args, payload, [
        f"test_mse {report.test_mse:.6g}",
        f"sec_per_iter {report.sec_per_iter:.6g}",
        f"peak_mem_bytes {report.peak_mem_bytes}",
        f"checkpoint {ckpt}",
    ])
    return 0 if not report.diverged else 1


def cmd_eval(args):
    mse = tr.evaluate(args.checkpoint, args.data)
    _emit(args, {"mse": mse}, [f"mse {mse:.6g}"])
    return 0


def cmd_audit(args):
    model_cfg = _model_config(args)
    if args.checkpoint is not None:
        model_cfg = tr.load_config_sidecar(args.checkpoint)
        model = md.build_model(model_cfg, seed=args.seed)
        from . import autodiff as ad

        ad.load_into(args.checkpoint, model.store)
    else:
        model = md.build_model(model_cfg, seed=args.seed)
    if model_cfg.task == "nbody":
        samples = [ds.simulate(ds.SimConfig(steps=1, seed=args.seed), i) for i in range(4)]
    else:
        cfg = ds.ChainConfig(seed=args.seed)
        samples = ds.make_chain_samples(4, cfg)
    result = tr.audit_equivariance(model, samples, model_cfg.task,
                                   n_trials=args.trials, tol=args.tol, seed=args.seed)
    _emit(args, result, [
        f"max_rotation_error {result['max_rotation_error']:.3g}",
        f"max_reflection_error {result['max_reflection_error']:.3g}",
        f"max_h_invariance_error {result['max_h_invariance_error']:.3g}",
        "PASS" if result["passed"] else "FAIL",
    ])
    return 0 if result["passed"] else 2


def cmd_gradcheck(args):
    results = tr.gradcheck_report(seed=args.seed)
    ok = all(err <= args.tol for err in results.values())
    lines = [f"{op:<14s} {err:.3g}" for op, err in sorted(results.items())]
    lines.append("PASS" if ok else "FAIL")
    _emit(args, {"ops": results, "passed": ok}, lines)
    return 0 if ok else 2


def cmd_bench(args):
    archs = MODEL_CHOICES if args.all_models else [args.model]
    rows = []
    for arch in archs:
        cfg = _model_config(args)
        cfg = md.ModelConfig(**{**cfg.to_dict(), "architecture": arch})
        result = tr.bench(cfg, batch_size=args.batch, n_iters=args.iters,
                          seed=args.seed, precision=args.precision)
        result["model"] = arch
        rows.append(result)
    from . import report as rp

    args.out.mkdir(parents=True, exist_ok=True)
    table = rp.write_bench_table(rows, args.out / "bench.tsv")
    figure = rp.render_bench_figure(rows, args.out / "bench.png")
    lines = [f"{r['model']:<14s} {r['sec_per_iter']:.4g} s/iter  "
             f"{r['peak_mem_bytes'] / 2**20:.0f} MiB rss  "
             f"{r['tape_bytes'] / 2**20:.1f} MiB tape" for r in rows]
    lines += [f"table {table}", f"figure {figure}"]
    _emit(args, {"rows": rows, "table": str(table), "figure": str(figure)}, lines)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "audit-equivariance": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MvgnnError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
