"""Message-passing architectures and task featurization.

Four architectures share one skeleton: per-edge messages, degree-normalized
aggregation, node update. The Clifford variants carry a scalar stream h and a
multivector stream v; the EGNN baseline carries h and plain 3-vector positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .errors import ContractError, GraphTooSmallError

ARCHITECTURES = ("clifford-egnn", "mvn-gnn", "mvp-gnn", "egnn")
TASKS = ("nbody", "denoise")
KNN_K = 16


@dataclass
class ModelConfig:
    architecture: str = "clifford-egnn"
    layers: int = 4
    channels: int = 16
    scalar_width: int = 64
    hidden: int = 64
    task: str = "nbody"
    per_grade_invariants: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.layers < 1 or self.channels < 1 or self.scalar_width < 1 or self.hidden < 1:
            raise ContractError("layers, channels and widths must be >= 1")

    def to_dict(self):
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GraphBatch:
    """A batch of graphs flattened into one node/edge table."""

    h0: np.ndarray        # (N, s0) invariant node features
    mv: np.ndarray        # (N, raw_c, 8) embedded multivector inputs
    pos: np.ndarray       # (N, 3) raw input positions
    x0: np.ndarray        # (N, 3) uncentered initial positions
    center: np.ndarray    # (N, 3) per-node graph center
    recv: np.ndarray      # (E,) receiver node index
    send: np.ndarray      # (E,) sender node index
    graph_id: np.ndarray  # (N,)
    n_graphs: int
    deg: np.ndarray       # (N,) in-neighborhood sizes
    targets: np.ndarray | None = None  # (N, 3)

    def __post_init__(self):
        if np.any(self.graph_id[self.recv] != self.graph_id[self.send]):
            raise ContractError("edge endpoints cross graph boundaries")
        counted = np.bincount(self.recv, minlength=len(self.h0)).astype(float)
        if not np.array_equal(counted, self.deg):
            raise ContractError("deg does not match the edge list")

    @property
    def n_nodes(self):
        return self.h0.shape[0]


def _embed_grade1(x):
    """(N, 3) -> (N, 1, 8) multivector array with x in the grade-1 slots."""
    out = np.zeros((x.shape[0], 1, 8))
    out[:, 0, 1:4] = x
    return out


def _knn_edges(points, k):
    n = len(points)
    if n <= k:
        raise GraphTooSmallError(f"k-NN graph needs more than {k} nodes, got {n}")
    d = points[:, None] - points[None, :]
    dist = (d * d).sum(-1)
    np.fill_diagonal(dist, np.inf)
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    recv = np.repeat(np.arange(n), k)
    send = nbrs.reshape(-1)
    return recv, send


def featurize(samples, task) -> GraphBatch:
    """Merge a list of TrajectorySamples into one GraphBatch.

    nbody: fully connected graphs, positions centered per graph, position and
    velocity embedded as two grade-1 channels, h0 = charge.
    denoise: k-NN graphs over the noised coordinates, centered, one grade-1
    channel, h0 = one-hot atom role.
    """
    h0s, mvs, poss, x0s, centers, recvs, sends, gids, targets = ([] for _ in range(9))
    offset = 0
    for gid, s in enumerate(samples):
        n = s.x0.shape[0]
        center = s.x0.mean(axis=0)
        centered = s.x0 - center
        if task == "nbody":
            recv, send = np.nonzero(~np.eye(n, dtype=bool))
            mv = np.concatenate([_embed_grade1(centered), _embed_grade1(s.v0)], axis=1)
            h0 = s.q[:, None].astype(float)
        elif task == "denoise":
            recv, send = _knn_edges(s.x0, KNN_K)
            mv = _embed_grade1(centered)
            h0 = np.eye(3)[s.q.astype(int)]
        else:
            raise ContractError(f"unknown task {task!r}")
        h0s.append(h0)
        mvs.append(mv)
        poss.append(s.x0)
        x0s.append(s.x0)
        centers.append(np.broadcast_to(center, (n, 3)).copy())
        recvs.append(recv + offset)
        sends.append(send + offset)
        gids.append(np.full(n, gid))
        if s.x_target is not None:
            targets.append(s.x_target)
        offset += n
    recv = np.concatenate(recvs)
    return GraphBatch(
        h0=np.concatenate(h0s),
        mv=np.concatenate(mvs),
        pos=np.concatenate(poss),
        x0=np.concatenate(x0s),
        center=np.concatenate(centers),
        recv=recv,
        send=np.concatenate(sends),
        graph_id=np.concatenate(gids),
        n_graphs=len(samples),
        deg=np.bincount(recv, minlength=offset).astype(float),
        targets=np.concatenate(targets) if targets else None,
    )


def _degree_scale(batch):
    """(N, 1, 1) constant 1/sqrt(|N_i|), zero-degree nodes left untouched."""
    d = np.maximum(batch.deg, 1.0)
    return ad.constant((1.0 / np.sqrt(d))[:, None, None])


class _CliffordStyleLayer:
    """Shared body of the Clifford-EGNN and MVN-GNN message passing layers.

    Subclasses provide the multivector edge map; everything downstream
    (invariant messages, gated aggregation, geometric-product update) is
    identical between the two schemes.
    """

    def __init__(self, store, name, cfg: ModelConfig, rng):
        c, s, hdim = cfg.channels, cfg.scalar_width, cfg.hidden
        inv_dim = 4 * c if cfg.per_grade_invariants else c
        self.per_grade = cfg.per_grade_invariants
        self.phi_e = ly.ScalarMLP(store, name + ".phi_e", 2 * s + inv_dim, hdim, s, rng)
        self.phi_v = ly.ScalarMLP(store, name + ".phi_v", s, hdim, c, rng)
        self.psi_v = ly.GeometricProductLayer(store, name + ".psi_v", c, c, rng)
        self.phi_h = ly.ScalarMLP(store, name + ".phi_h", 2 * s, hdim, s, rng)

    def edge_multivector(self, v_i, v_j):
        raise NotImplementedError

    def __call__(self, h, v, batch):
        n = batch.n_nodes
        h_i, h_j = ad.gather(h, batch.recv), ad.gather(h, batch.send)
        v_i, v_j = ad.gather(v, batch.recv), ad.gather(v, batch.send)
        v_ij = self.edge_multivector(v_i, v_j)
        inv = ly.invariant_features(v_ij, per_grade=self.per_grade)
        m_ij = self.phi_e(ad.concat([h_i, h_j, inv], axis=-1))
        m_i = ad.scatter_sum(m_ij, batch.recv, n)
        gates = self.phi_v(m_ij)
        gated = ad.mul(ad.reshape(gates, gates.data.shape + (1,)), v_ij)
        agg = ad.scatter_sum(gated, batch.recv, n)
        v_new = ad.add(v, ad.mul(_degree_scale(batch), self.psi_v(agg)))
        h_upd = self.phi_h(ad.concat([h, m_i], axis=-1))
        # isolated nodes receive no messages and pass through unchanged
        has_msgs = ad.constant((batch.deg > 0).astype(float)[:, None])
        h_new = ad.add(ad.mul(has_msgs, h_upd), ad.mul(ad.sub(1.0, has_msgs), h))
        return h_new, v_new


class CliffordEGNNLayer(_CliffordStyleLayer):
    def __init__(self, store, name, cfg, rng):
        super().__init__(store, name, cfg, rng)
        self.edge_mv = ly.MVLinear(store, name + ".edge_mv", cfg.channels, cfg.channels, rng)

    def edge_multivector(self, v_i, v_j):
        return self.edge_mv(ad.sub(v_i, v_j))


class MVNGNNLayer(_CliffordStyleLayer):
    def __init__(self, store, name, cfg, rng):
        super().__init__(store, name, cfg, rng)
        self.edge_mlp = ly.MVNMLP(store, name + ".edge_mlp", 2 * cfg.channels, cfg.channels, rng)

    def edge_multivector(self, v_i, v_j):
        return self.edge_mlp(ad.concat([v_i, v_j], axis=1))


class MVPGNNLayer:
    """MVP-style message passing: MVP perceptron stacks on edges and nodes,
    with residual connections on both streams."""

    def __init__(self, store, name, cfg: ModelConfig, rng):
        c, s, hdim = cfg.channels, cfg.scalar_width, cfg.hidden
        self.edge_mv = ly.MVLinear(store, name + ".edge_mv", 2 * c, c, rng)
        self.edge_s = ly.ScalarMLP(store, name + ".edge_s", 2 * s, hdim, s, rng)
        self.lin_e = ly.MVPLin(store, name + ".lin_e", s, s, c, c, hdim, rng)
        self.gp_e = ly.MVPGP(store, name + ".gp_e", s, s, c, hdim, rng)
        self.lin_v = ly.MVPLin(store, name + ".lin_v", 2 * s, s, 2 * c, c, hdim, rng)
        self.gp_v = ly.MVPGP(store, name + ".gp_v", s, s, c, hdim, rng)

    def __call__(self, h, v, batch):
        n = batch.n_nodes
        h_i, h_j = ad.gather(h, batch.recv), ad.gather(h, batch.send)
        v_i, v_j = ad.gather(v, batch.recv), ad.gather(v, batch.send)
        v_ij = self.edge_mv(ad.concat([v_i, v_j], axis=1))
        s_ij = self.edge_s(ad.concat([h_i, h_j], axis=-1))
        s_ij, v_ij = self.lin_e(s_ij, v_ij)
        s_ij, v_ij = self.gp_e(s_ij, v_ij)
        scale = _degree_scale(batch)
        s_agg = ad.mul(ad.reshape(scale, (n, 1)), ad.scatter_sum(s_ij, batch.recv, n))
        v_agg = ad.mul(scale, ad.scatter_sum(v_ij, batch.recv, n))
        s_up, v_up = self.lin_v(ad.concat([h, s_agg], axis=-1), ad.concat([v, v_agg], axis=1))
        s_up, v_up = self.gp_v(s_up, v_up)
        return ad.add(h, s_up), ad.add(v, v_up)


class EGNNLayer:
    """Baseline layer on plain positions: invariant messages from distances,
    position update along difference vectors."""

    def __init__(self, store, name, cfg: ModelConfig, rng):
        s, hdim = cfg.scalar_width, cfg.hidden
        self.phi_e = ly.ScalarMLP(store, name + ".phi_e", 2 * s + 1, hdim, s, rng)
        self.phi_x = ly.ScalarMLP(store, name + ".phi_x", s, hdim, 1, rng)
        self.phi_h = ly.ScalarMLP(store, name + ".phi_h", 2 * s, hdim, s, rng)

    def __call__(self, h, x, batch):
        n = batch.n_nodes
        h_i, h_j = ad.gather(h, batch.recv), ad.gather(h, batch.send)
        diff = ad.sub(ad.gather(x, batch.recv), ad.gather(x, batch.send))
        dist = ad.sqrt(ad.add(ad.tsum(ad.mul(diff, diff), axis=-1, keepdims=True), 1e-30))
        m_ij = self.phi_e(ad.concat([h_i, h_j, dist], axis=-1))
        m_i = ad.scatter_sum(m_ij, batch.recv, n)
        x_new = ad.add(x, ad.scatter_sum(ad.mul(self.phi_x(m_ij), diff), batch.recv, n))
        h_new = self.phi_h(ad.concat([h, m_i], axis=-1))
        return h_new, x_new


class MultivectorModel:
    """Embedding, L Clifford-style layers, grade-1 readout."""

    LAYER_TYPES = {"clifford-egnn": CliffordEGNNLayer, "mvn-gnn": MVNGNNLayer,
                   "mvp-gnn": MVPGNNLayer}

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ad.ParameterStore()
        rng = np.random.default_rng(seed)
        raw_c = 2 if cfg.task == "nbody" else 1
        s0 = 1 if cfg.task == "nbody" else 3
        s = cfg.scalar_width
        self.lift_mv = ly.MVLinear(self.store, "embed.mv", raw_c, cfg.channels, rng)
        self.lift_h_w = self.store.add("embed.h.w", ly._uniform(rng, (s, s0), s0))
        self.lift_h_b = self.store.add("embed.h.b", np.zeros(s))
        layer_cls = self.LAYER_TYPES[cfg.architecture]
        self.layers = [
            layer_cls(self.store, f"layer{i:02d}", cfg, rng) for i in range(cfg.layers)
        ]
        self.readout = ly.MVLinear(self.store, "readout.mv", cfg.channels, 1, rng)

    def forward(self, batch: GraphBatch):
        """Returns (predicted positions (N, 3), final scalar stream (N, s))."""
        h = ad.linear(ad.constant(batch.h0), self.lift_h_w, self.lift_h_b)
        v = self.lift_mv(ad.constant(batch.mv))
        for layer in self.layers:
            h, v = layer(h, v, batch)
        out = self.readout(v)  # (N, 1, 8)
        grade1 = ad.reshape(ad.narrow(out, 2, 1, 3), (batch.n_nodes, 3))
        if self.cfg.task == "nbody":
            base = batch.x0  # displacement prediction from the initial positions
        else:
            base = batch.center
        return ad.add(grade1, ad.constant(base)), h


class EGNNModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ad.ParameterStore()
        rng = np.random.default_rng(seed)
        s0 = 1 if cfg.task == "nbody" else 3
        s = cfg.scalar_width
        self.lift_h_w = self.store.add("embed.h.w", ly._uniform(rng, (s, s0), s0))
        self.lift_h_b = self.store.add("embed.h.b", np.zeros(s))
        self.layers = [
            EGNNLayer(self.store, f"layer{i:02d}", cfg, rng) for i in range(cfg.layers)
        ]

    def forward(self, batch: GraphBatch):
        h = ad.linear(ad.constant(batch.h0), self.lift_h_w, self.lift_h_b)
        x = ad.constant(batch.pos)
        for layer in self.layers:
            h, x = layer(h, x, batch)
        return x, h


def build_model(cfg: ModelConfig, seed: int = 0):
    if cfg.architecture == "egnn":
        return EGNNModel(cfg, seed)
    return MultivectorModel(cfg, seed)
