"""Training loop, evaluation, equivariance audit, per-op gradient check, and
benchmark timing."""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datasets as ds
from . import models as md
from .clifford import random_orthogonal
from .errors import ContractError

DEFAULT_TRAIN = {
    "nbody": dict(batch_size=100, lr=5e-3, epochs=100),
    "denoise": dict(batch_size=16, lr=1e-3, epochs=30),
}


@dataclass
class TrainConfig:
    batch_size: int = 100
    lr: float = 5e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    seed: int = 0
    precision: str = "f64"
    clip_norm: float = 1.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 1:
            raise ContractError("batch_size >= 1, lr > 0 and epochs >= 1 required")

    @classmethod
    def for_task(cls, task, **overrides):
        params = dict(DEFAULT_TRAIN[task])
        params.update(overrides)
        return cls(**params)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float


@dataclass
class MetricsReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    test_mse: float = float("nan")
    sec_per_iter: float = float("nan")
    peak_mem_bytes: int = 0
    best_epoch: int = -1
    diverged: bool = False

    def to_dict(self):
        return {
            "epochs": [e.__dict__ for e in self.epochs],
            "test_mse": self.test_mse,
            "sec_per_iter": self.sec_per_iter,
            "peak_mem_bytes": self.peak_mem_bytes,
            "best_epoch": self.best_epoch,
            "diverged": self.diverged,
        }


def peak_rss_bytes():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def evaluate_model(model, samples, task, batch_size=200):
    """Mean squared position error over all nodes, samples and coordinates."""
    sq_sum, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = md.featurize(chunk, task)
            pred, _ = model.forward(batch)
            diff = pred.data - batch.targets
            sq_sum += float((diff * diff).sum())
            count += diff.size
    return sq_sum / count


def evaluate(checkpoint_path, dataset_path, batch_size=200):
    """Load a checkpoint (with its config sidecar) and score a dataset."""
    model_cfg = load_config_sidecar(checkpoint_path)
    task, samples = ds.load_dataset(dataset_path)
    if task != model_cfg.task:
        raise ContractError(f"dataset task {task!r} does not match model task {model_cfg.task!r}")
    model = md.build_model(model_cfg, seed=0)
    ad.load_into(checkpoint_path, model.store)
    return evaluate_model(model, samples, task, batch_size)


def load_config_sidecar(checkpoint_path) -> md.ModelConfig:
    sidecar = Path(str(checkpoint_path) + ".json")
    if not sidecar.exists():
        raise ContractError(f"missing config sidecar {sidecar}")
    return md.ModelConfig.from_dict(json.loads(sidecar.read_text())["model"])


def _grads_or_zero(store):
    """Gradients for Adam; parameters the loss does not reach get zeros
    (the last layer's h-stream feeds no output, for example)."""
    return {
        n: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for n, t in store.trainable_items()
    }


def _clip_grads(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm.

    Deep geometric-product stacks amplify a single outlier batch into a
    gradient spike large enough to destabilize the rest of the run; capping
    the norm keeps such batches from derailing otherwise-healthy training.
    """
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads


def train(model_cfg: md.ModelConfig, train_cfg: TrainConfig, train_path, val_path,
          test_path, out_dir, log=None):
    """Full training run; returns (MetricsReport, checkpoint path).

    Deterministic in the seeds: shuffling, init and optimization all derive
    from train_cfg.seed. The best-validation parameters are saved.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task, train_samples = ds.load_dataset(train_path)
    if task != model_cfg.task:
        raise ContractError(f"dataset task {task!r} does not match model task {model_cfg.task!r}")
    _, val_samples = ds.load_dataset(val_path)
    _, test_samples = ds.load_dataset(test_path)

    model = md.build_model(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    state = None
    report = MetricsReport()
    best_val, best_params = float("inf"), None
    step = 0
    iter_times = []
    warmup = 10
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = md.featurize([train_samples[i] for i in idx], task)
            t0 = time.perf_counter()
            model.store.zero_grad()
            pred, _ = model.forward(batch)
            loss = ad.mse(pred, ad.constant(batch.targets))
            ad.backward(loss)
            step += 1
            state = ad.adam_step(
                model.store,
                grads=_clip_grads(_grads_or_zero(model.store), train_cfg.clip_norm),
                lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                t=step, state=state,
            )
            iter_times.append(time.perf_counter() - t0)
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            report.diverged = True
            break
        val_mse = evaluate_model(model, val_samples, task)
        report.epochs.append(EpochRecord(epoch, train_loss, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_params = {n: t.data.copy() for n, t in model.store.items()}
            report.best_epoch = epoch
        if log:
            log(f"epoch {epoch}: train_loss {train_loss:.6g} val_mse {val_mse:.6g}")

    if best_params is not None:
        for name, data in best_params.items():
            model.store[name].data = data
    report.test_mse = evaluate_model(model, test_samples, task)
    timed = iter_times[warmup:] if len(iter_times) > warmup else iter_times
    report.sec_per_iter = float(np.mean(timed))
    report.peak_mem_bytes = peak_rss_bytes()

    ckpt = out_dir / "model.mvgn"
    ad.save_checkpoint(ckpt, model.store)
    sidecar = {"model": model_cfg.to_dict(), "train": train_cfg.__dict__}
    Path(str(ckpt) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return report, ckpt


def audit_equivariance(model, samples, task, n_trials=20, tol=1e-8, seed=0):
    """Compare forward(rotated inputs) with rotated forward(inputs).

    Returns a report dict; failures are reported, never raised.
    """
    max_rot, max_ref, max_h = 0.0, 0.0, 0.0
    with ad.no_grad():
        base_pred, base_h = model.forward(md.featurize(samples, task))
        for trial in range(n_trials):
            det = 1 if trial % 2 == 0 else -1
            r = random_orthogonal(seed * 100_003 + trial, det).matrix
            rotated = [
                ds.TrajectorySample(
                    x0=s.x0 @ r.T, v0=s.v0 @ r.T, q=s.q,
                    x_target=None if s.x_target is None else s.x_target @ r.T,
                )
                for s in samples
            ]
            pred_t, h_t = model.forward(md.featurize(rotated, task))
            err = float(np.max(np.abs(pred_t.data - base_pred.data @ r.T)))
            h_err = float(np.max(np.abs(h_t.data - base_h.data)))
            if det == 1:
                max_rot = max(max_rot, err)
            else:
                max_ref = max(max_ref, err)
            max_h = max(max_h, h_err)
    return {
        "max_rotation_error": max_rot,
        "max_reflection_error": max_ref,
        "max_h_invariance_error": max_h,
        "tolerance": tol,
        "passed": max(max_rot, max_ref, max_h) <= tol,
    }


def _fd_max_rel(fn, tensors, step=1e-5, rng=None, probes=24):
    """Central-difference max relative gradient error over sampled entries."""
    for t in tensors:
        t.grad = None
    ad.backward(fn())
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(probes, n), replace=False) if rng is not None else range(n)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with ad.no_grad():
                up = float(fn().data)
            flat[i] = orig - step
            with ad.no_grad():
                down = float(fn().data)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            an = grad.reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-2))
    return worst


def gradcheck_report(seed=0):
    """Finite-difference check of every differentiable op; returns op -> max
    relative error."""
    rng = np.random.default_rng(seed)

    def t(shape):
        return ad.Tensor(rng.standard_normal(shape), requires_grad=True)

    results = {}
    x, y = t((3, 4)), t((3, 4))
    cases = {
        "add": lambda: ad.tsum(ad.mul(ad.add(x, y), ad.add(x, y))),
        "sub": lambda: ad.tsum(ad.mul(ad.sub(x, y), ad.sub(x, y))),
        "mul": lambda: ad.tsum(ad.mul(x, y)),
        "div": lambda: ad.tsum(ad.div(x, ad.add(ad.mul(y, y), 1.0))),
        "sigmoid": lambda: ad.tsum(ad.sigmoid(x)),
        "silu": lambda: ad.tsum(ad.silu(x)),
        "mean": lambda: ad.mean(ad.mul(x, y)),
        "concat": lambda: ad.tsum(ad.mul(ad.concat([x, y], axis=0), ad.concat([x, y], axis=0))),
        "narrow": lambda: ad.tsum(ad.narrow(ad.mul(x, x), 1, 1, 2)),
        "reshape": lambda: ad.tsum(ad.mul(ad.reshape(x, (12,)), ad.reshape(y, (12,)))),
        "mse": lambda: ad.mse(x, y),
    }
    for name, fn in cases.items():
        results[name] = _fd_max_rel(fn, [x, y], rng=rng)

    pos = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    results["sqrt"] = _fd_max_rel(lambda: ad.tsum(ad.sqrt(pos)), [pos], rng=rng)

    w = t((2, 4))
    b = t((2,))
    results["linear"] = _fd_max_rel(lambda: ad.tsum(ad.mul(ad.linear(x, w, b), ad.linear(x, w, b))), [x, w, b], rng=rng)

    v = t((4, 3))
    gi = np.array([0, 2, 2, 1, 3])
    si = np.array([0, 0, 1, 1, 1])
    results["gather"] = _fd_max_rel(lambda: ad.tsum(ad.mul(ad.gather(v, gi), ad.gather(v, gi))), [v], rng=rng)
    results["scatter_sum"] = _fd_max_rel(
        lambda: ad.tsum(ad.mul(ad.scatter_sum(ad.gather(v, gi), si, 2), ad.scatter_sum(ad.gather(v, gi), si, 2))),
        [v], rng=rng)

    mv_a, mv_b = t((2, 2, 8)), t((2, 2, 8))
    wg = t((4, 2, 2))
    results["grade_mix"] = _fd_max_rel(lambda: ad.tsum(ad.mul(ad.grade_mix(mv_a, wg), ad.grade_mix(mv_a, wg))), [mv_a, wg], rng=rng)
    results["geom_prod"] = _fd_max_rel(lambda: ad.tsum(ad.mul(ad.geom_prod(mv_a, mv_b), ad.geom_prod(mv_a, mv_b))), [mv_a, mv_b], rng=rng)
    results["mv_norm"] = _fd_max_rel(lambda: ad.tsum(ad.mv_norm(mv_a)), [mv_a], rng=rng)
    results["sum"] = _fd_max_rel(lambda: ad.tsum(ad.mul(ad.tsum(x, axis=1), ad.tsum(y, axis=1))), [x, y], rng=rng)
    return results


def make_bench_batch(task, batch_size, seed=0):
    """Synthetic inputs for timing; no integration needed."""
    rng = np.random.default_rng(seed)
    samples = []
    n = 5 if task == "nbody" else 32
    for _ in range(batch_size):
        x = rng.standard_normal((n, 3))
        samples.append(
            ds.TrajectorySample(
                x0=x,
                v0=rng.standard_normal((n, 3)) * 0.5,
                q=(rng.integers(0, 2, n) * 2.0 - 1.0) if task == "nbody" else np.arange(n) % 3,
                x_target=x + rng.standard_normal((n, 3)) * 0.1,
            )
        )
    return md.featurize(samples, task)


def bench(model_cfg: md.ModelConfig, batch_size=100, n_iters=50, seed=0,
          precision="f64", warmup=10):
    """Time forward+backward+optimizer over n_iters after warmup iterations."""
    with ad.precision(precision):
        model = md.build_model(model_cfg, seed=seed)
        batch = make_bench_batch(model_cfg.task, batch_size, seed)
        targets = ad.constant(batch.targets)
        state = None
        times = []
        tape_bytes = 0
        for it in range(warmup + n_iters):
            t0 = time.perf_counter()
            model.store.zero_grad()
            with ad.track_allocations() as alloc:
                pred, _ = model.forward(batch)
                loss = ad.mse(pred, targets)
                ad.backward(loss)
            state = ad.adam_step(model.store, grads=_grads_or_zero(model.store),
                                 lr=1e-3, t=it + 1, state=state)
            elapsed = time.perf_counter() - t0
            if it >= warmup:
                times.append(elapsed)
            tape_bytes = max(tape_bytes, alloc.bytes)
    times = np.array(times)
    return {
        "sec_per_iter": float(times.mean()),
        "sec_per_iter_std": float(times.std()),
        "peak_mem_bytes": peak_rss_bytes(),
        "tape_bytes": int(tape_bytes),
    }
