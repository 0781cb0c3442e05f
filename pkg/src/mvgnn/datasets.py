"""Data generation: charged N-body trajectories, synthetic noisy chains, and
the binary dataset container both tasks share."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GraphTooSmallError, SimulationDivergedError

DATASET_MAGIC = b"MVDS"
DATASET_VERSION = 1
TASK_NBODY = 0
TASK_DENOISE = 1
TASK_TAGS = {"nbody": TASK_NBODY, "denoise": TASK_DENOISE}
TASK_NAMES = {v: k for k, v in TASK_TAGS.items()}


@dataclass
class TrajectorySample:
    """One graph instance: inputs plus target positions.

    For the denoise task x0 holds the noised coordinates, v0 is zero, and q
    holds integer atom roles (0=C, 1=N, 2=O).
    """

    x0: np.ndarray       # (n, 3)
    v0: np.ndarray       # (n, 3)
    q: np.ndarray        # (n,)
    x_target: np.ndarray # (n, 3)


@dataclass
class SimConfig:
    n: int = 5
    steps: int = 1000
    dt: float = 0.001
    softening: float = 0.01
    coupling: float = 1.0
    pos_std: float = 1.0
    vel_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.softening <= 0 or self.steps < 1:
            raise ValueError("SimConfig requires dt > 0, softening > 0, steps >= 1")


def pairwise_forces(x, q, coupling, softening):
    """Softened Coulomb force on each particle; like charges repel."""
    diff = x[:, None, :] - x[None, :, :]                      # x_i - x_j
    r2 = (diff * diff).sum(-1) + softening
    np.fill_diagonal(r2, 1.0)
    qq = q[:, None] * q[None, :]
    np.fill_diagonal(qq, 0.0)
    w = coupling * qq / r2**1.5
    return (w[:, :, None] * diff).sum(axis=1)


def total_energy(x, v, q, coupling, softening):
    kinetic = 0.5 * (v * v).sum()
    diff = x[:, None, :] - x[None, :, :]
    r2 = (diff * diff).sum(-1) + softening
    qq = q[:, None] * q[None, :]
    pot = coupling * qq / np.sqrt(r2)
    iu = np.triu_indices(len(x), k=1)
    return kinetic + pot[iu].sum()


def integrate(x0, v0, q, cfg: SimConfig, trajectory_out=None):
    """Kick-drift-kick leapfrog for cfg.steps steps; returns (x, v) final.

    If `trajectory_out` is a list, (x, v) copies are appended after each step.
    """
    xs, vs = np.array(x0, dtype=float), np.array(v0, dtype=float)
    a = pairwise_forces(xs, q, cfg.coupling, cfg.softening)  # unit masses
    for step in range(cfg.steps):
        vs += 0.5 * cfg.dt * a
        xs += cfg.dt * vs
        a = pairwise_forces(xs, q, cfg.coupling, cfg.softening)
        vs += 0.5 * cfg.dt * a
        if not np.isfinite(xs).all() or not np.isfinite(vs).all():
            raise SimulationDivergedError(step)
        if trajectory_out is not None:
            trajectory_out.append((xs.copy(), vs.copy()))
    return xs, vs


def simulate(cfg: SimConfig, sample_seed: int) -> TrajectorySample:
    """Draw initial conditions and integrate one trajectory."""
    rng = np.random.default_rng((cfg.seed, sample_seed))
    x = rng.normal(0.0, cfg.pos_std, size=(cfg.n, 3))
    v = rng.normal(0.0, cfg.vel_std, size=(cfg.n, 3))
    q = rng.integers(0, 2, size=cfg.n) * 2.0 - 1.0
    xs, _ = integrate(x, v, q, cfg)
    return TrajectorySample(x0=x, v0=v, q=q, x_target=xs)


def linear_extrapolation(sample: TrajectorySample, cfg: SimConfig) -> np.ndarray:
    """Force-free baseline prediction x0 + v0 * dt * steps."""
    return sample.x0 + sample.v0 * cfg.dt * cfg.steps


# ------------------------------------------------------------------- container


def save_dataset(path, task: str, samples: list[TrajectorySample]):
    n = samples[0].x0.shape[0]
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<B", TASK_TAGS[task]))
        f.write(struct.pack("<Q", len(samples)))
        f.write(struct.pack("<Q", n))
        for s in samples:
            for arr in (s.x0, s.v0, s.q, s.x_target):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, size, what):
    buf = f.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated dataset while reading {what}", offset=f.tell())
    return buf


def load_dataset(path):
    """Returns (task_name, [TrajectorySample])."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"dataset file not found: {path}")
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}", offset=4)
        (tag,) = struct.unpack("<B", _read_exact(f, 1, "task tag"))
        if tag not in TASK_NAMES:
            raise FormatError(f"unknown task tag {tag}", offset=8)
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "sample count"))
        (n,) = struct.unpack("<Q", _read_exact(f, 8, "nodes per sample"))
        samples = []
        block = 8 * (3 * n + 3 * n + n + 3 * n)
        for i in range(count):
            buf = _read_exact(f, block, f"sample {i}")
            vals = np.frombuffer(buf, dtype="<f8")
            x0 = vals[: 3 * n].reshape(n, 3).copy()
            v0 = vals[3 * n : 6 * n].reshape(n, 3).copy()
            q = vals[6 * n : 7 * n].copy()
            xt = vals[7 * n :].reshape(n, 3).copy()
            samples.append(TrajectorySample(x0=x0, v0=v0, q=q, x_target=xt))
    return TASK_NAMES[tag], samples


# ------------------------------------------------------------------- generators

_SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}
SPLIT_OFFSETS = _SPLIT_OFFSETS


def generate_nbody(n_train, n_val, n_test, cfg: SimConfig, out_dir, threads=1):
    """Write train/val/test files; sample i of a split uses seed offset + i.

    Each sample is seeded independently, so results are identical for any
    thread count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count < 1:
            raise ValueError(f"split {split} needs at least one sample")
        offset = _SPLIT_OFFSETS[split]
        seeds = [offset + i for i in range(count)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                samples = list(pool.map(lambda s: simulate(cfg, s), seeds))
        else:
            samples = [simulate(cfg, s) for s in seeds]
        path = out_dir / f"nbody_{split}.mvds"
        save_dataset(path, "nbody", samples)
        paths[split] = path
    return paths


@dataclass
class ChainConfig:
    chain_len: int = 32
    noise_std: float = 0.5
    persistence: float = 0.8
    seed: int = 0


def _chain_walk(rng, length, persistence):
    """Random walk with unit steps whose direction persists."""
    points = np.zeros((length, 3))
    u = rng.standard_normal(3)
    direction = u / np.linalg.norm(u)
    for i in range(1, length):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        d = persistence * direction + (1.0 - persistence) * u
        direction = d / np.linalg.norm(d)
        points[i] = points[i - 1] + direction
    return points


def make_chain_samples(n_samples, cfg: ChainConfig, sample_offset=0):
    """Synthetic backbone-like chains: clean walk, role labels cycling C,N,O,
    noised coordinates as input, clean coordinates as target."""
    if cfg.chain_len < 17:
        raise GraphTooSmallError(
            f"chain_len {cfg.chain_len} < 17; k=16 neighborhoods are infeasible"
        )
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng((cfg.seed, sample_offset + i))
        clean = _chain_walk(rng, cfg.chain_len, cfg.persistence)
        noised = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape)
        roles = np.arange(cfg.chain_len, dtype=float) % 3  # C, N, O surrogate
        samples.append(
            TrajectorySample(x0=noised, v0=np.zeros_like(clean), q=roles, x_target=clean)
        )
    return samples


def generate_chain_denoise(n_samples, cfg: ChainConfig, out_path, sample_offset=0):
    """Write a chain-denoising dataset file; see make_chain_samples."""
    samples = make_chain_samples(n_samples, cfg, sample_offset)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out_path, "denoise", samples)
    return out_path
