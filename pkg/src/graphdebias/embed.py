"""Shallow embedding models, losses, optimizer, and the training regimes.

All regimes share one trainer: a full-batch pass over the training positives
and their negatives per epoch, one Adam update per epoch. The debiasing
regimes modify the objective only — ``uge-w`` multiplies each edge term by
its importance weight, ``uge-r`` adds the sampled group-score penalty,
``uge-c`` does both. ``fairwalk`` swaps the positive-pair source for the
two-level group sampler, and ``random`` skips training entirely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import AttributedGraph, EdgeSplit, build_group_index
from .ratios import RatioTable, regularizer_term, sample_group_pairs

logger = logging.getLogger(__name__)

REGIMES = ("none", "uge-w", "uge-r", "uge-c", "fairwalk", "random")

_STREAM_INIT = 1
_STREAM_SHUFFLE = 2
_STREAM_FAIRWALK = 3
_STREAM_REG_GROUPS = 4
_STREAM_REG_PAIRS = 5
_STREAM_RANDOM = 6


@dataclass
class EmbeddingModel:
    """Row-per-node embedding matrix with a dot-product scoring function."""

    embeddings: np.ndarray  # (N, d) float64
    model_kind: str = "dot-bce"  # or "mf-bpr"

    @property
    def n_nodes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def score_many(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        z = self.embeddings
        return np.einsum("ij,ij->i", z[us], z[vs])


def score(model: EmbeddingModel, u: int, v: int) -> float:
    """Dot product of the two nodes' embedding rows."""
    z = model.embeddings
    if not (0 <= u < len(z) and 0 <= v < len(z)):
        raise IndexError("node id out of range")
    return float(z[u] @ z[v])


@dataclass
class TrainConfig:
    regime: str = "none"
    epochs: int = 800
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    lambda_: float = 0.5
    reg_fraction: float = 0.1
    neg_ratio: int = 20
    seed: int = 0
    weight_negatives: bool = False
    factorized: bool = False
    d: int = 16
    model: str = "dot-bce"
    pairs_per_group: int = 128
    reg_squared: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.model not in ("dot-bce", "mf-bpr"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_edge_loss(score_value: float, label: int) -> tuple[float, float]:
    """Binary cross-entropy on a logit score; returns (loss, dloss/dscore)."""
    s = np.float64(score_value)
    loss = float(_softplus(s) - label * s)
    grad = float(_sigmoid(s) - label)
    return loss, grad


def bpr_loss(pos_score: float, neg_score: float) -> tuple[float, float, float]:
    """Pairwise logistic loss; returns (loss, d/dpos, d/dneg)."""
    margin = np.float64(pos_score - neg_score)
    loss = float(_softplus(-margin))
    g = float(-_sigmoid(-margin))
    return loss, g, -g


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    learning_rate: float,
    weight_decay: float,
    t: int,
) -> np.ndarray:
    """Bias-corrected Adam update with coupled L2 decay folded into the gradient."""
    if t < 1:
        raise ValueError("step index starts at 1")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise FloatingPointError(f"{bad} non-finite gradient entries at step {t}")
    g = grads + weight_decay * params
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    params -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Positive sampling (fairwalk regime)
# ---------------------------------------------------------------------------

def fairwalk_positive_sampler(
    g: AttributedGraph, u: int, rng: np.random.Generator
) -> int:
    """Draw one positive partner: first a sensitive-value group of u's
    neighbors uniformly at random, then a member of that group uniformly."""
    nbrs = g.neighbors(u)
    if len(nbrs) == 0:
        raise ValueError(f"node {u} is isolated")
    groups = _partition_by_sensitive(g, nbrs)
    members = groups[rng.integers(0, len(groups))]
    return int(members[rng.integers(0, len(members))])


def _partition_by_sensitive(g: AttributedGraph, partners: np.ndarray) -> list[np.ndarray]:
    sens = g.schema.sensitive_indices
    if not sens:
        return [partners]
    profiles = g.attributes[partners][:, list(sens)]
    _, inverse = np.unique(profiles, axis=0, return_inverse=True)
    return [partners[inverse == i] for i in range(inverse.max() + 1)]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Precomputed training context with a pure per-epoch objective.

    ``loss_and_grad`` is a deterministic function of the embedding matrix and
    the epoch index, which is what the finite-difference gradient checks
    exercise; ``run`` drives it through Adam.
    """

    def __init__(
        self,
        g: AttributedGraph,
        splits: EdgeSplit,
        table: RatioTable | None,
        cfg: TrainConfig,
    ):
        if cfg.regime in ("uge-w", "uge-c") and table is None:
            raise ValueError(f"regime {cfg.regime!r} requires a ratio table")
        self.g = g
        self.cfg = cfg
        self.table = table
        self.n = g.n_nodes
        self.pos = splits.train_pos
        self.neg = splits.train_neg
        self.use_weights = cfg.regime in ("uge-w", "uge-c")
        self.use_reg = cfg.regime in ("uge-r", "uge-c") and cfg.lambda_ > 0
        self.full_index = build_group_index(g, "full") if (self.use_weights or self.use_reg) else None
        self.ns_index = build_group_index(g, "nonsensitive") if self.use_reg else None
        if self.use_weights:
            grid = table.weight_grid(self.full_index)
            pid = self.full_index.profile_of_node
            self.pos_weights = grid[pid[self.pos[:, 0]], pid[self.pos[:, 1]]]
            if cfg.weight_negatives:
                self.neg_weights = grid[pid[self.neg[:, 0]], pid[self.neg[:, 1]]]
            else:
                self.neg_weights = np.ones(len(self.neg))
            self._weight_grid = grid
        else:
            self.pos_weights = np.ones(len(self.pos))
            self.neg_weights = np.ones(len(self.neg))
            self._weight_grid = None
        if cfg.model == "mf-bpr":
            self.pos_of_neg = self._pair_negatives()
        if cfg.regime == "fairwalk":
            self._fairwalk_groups = self._train_partner_groups()

    def _pair_negatives(self) -> np.ndarray:
        """Round-robin assignment of each negative to one of its anchor's
        training positives (row index into ``self.pos``)."""
        pos_rows_of_node: dict[int, list[int]] = {}
        for i, (u, _) in enumerate(self.pos):
            pos_rows_of_node.setdefault(int(u), []).append(i)
        counter: dict[int, int] = {}
        out = np.full(len(self.neg), -1, dtype=np.int64)
        for j, (u, _) in enumerate(self.neg):
            rows = pos_rows_of_node.get(int(u))
            if not rows:
                continue
            c = counter.get(int(u), 0)
            out[j] = rows[c % len(rows)]
            counter[int(u)] = c + 1
        return out

    def _train_partner_groups(self) -> dict[int, list[np.ndarray]]:
        partners_of: dict[int, list[int]] = {}
        for u, v in self.pos:
            partners_of.setdefault(int(u), []).append(int(v))
        return {
            u: _partition_by_sensitive(self.g, np.array(vs, dtype=np.int64))
            for u, vs in partners_of.items()
        }

    def _rng(self, stream: int, epoch: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, stream, epoch])
        )

    def _epoch_positives(self, epoch: int) -> np.ndarray:
        if self.cfg.regime != "fairwalk":
            return self.pos
        rng = self._rng(_STREAM_FAIRWALK, epoch)
        partners = np.empty(len(self.pos), dtype=np.int64)
        row = 0
        for u in sorted(self._fairwalk_groups):
            groups = self._fairwalk_groups[u]
            count = sum(len(m) for m in groups)
            gi = rng.integers(0, len(groups), size=count)
            for t in range(count):
                members = groups[gi[t]]
                partners[row] = members[rng.integers(0, len(members))]
                row += 1
        out = self.pos.copy()
        out[:, 1] = partners
        return out

    def loss_and_grad(self, z: np.ndarray, epoch: int) -> tuple[float, float, np.ndarray]:
        """Total objective value, regularizer value, and gradient for one epoch."""
        cfg = self.cfg
        grad = np.zeros_like(z)
        pos = self._epoch_positives(epoch)
        order_rng = self._rng(_STREAM_SHUFFLE, epoch)
        if cfg.model == "dot-bce":
            loss = self._bce_terms(z, grad, pos, order_rng)
        else:
            loss = self._bpr_terms(z, grad, pos, order_rng)
        reg_value = 0.0
        if self.use_reg:
            reg_value = self._reg_terms(z, grad, epoch)
            loss += cfg.lambda_ * reg_value
        return loss, reg_value, grad

    def _accumulate(self, grad, us, vs, coefs, z):
        np.add.at(grad, us, coefs[:, None] * z[vs])
        np.add.at(grad, vs, coefs[:, None] * z[us])

    def _bce_terms(self, z, grad, pos, order_rng) -> float:
        loss = 0.0
        for pairs, weights, label in (
            (pos, self.pos_weights, 1.0),
            (self.neg, self.neg_weights, 0.0),
        ):
            if not len(pairs):
                continue
            order = order_rng.permutation(len(pairs))
            us, vs = pairs[order, 0], pairs[order, 1]
            w = weights[order]
            s = np.einsum("ij,ij->i", z[us], z[vs])
            loss += float(np.sum(w * (_softplus(s) - label * s)))
            self._accumulate(grad, us, vs, w * (_sigmoid(s) - label), z)
        return loss

    def _bpr_terms(self, z, grad, pos, order_rng) -> float:
        usable = self.pos_of_neg >= 0
        neg = self.neg[usable]
        pref = self.pos_of_neg[usable]
        order = order_rng.permutation(len(neg))
        neg = neg[order]
        pref = pref[order]
        us = neg[:, 0]
        pv = pos[pref, 1]
        nv = neg[:, 1]
        w = self.pos_weights[pref]
        margin = np.einsum("ij,ij->i", z[us], z[pv]) - np.einsum("ij,ij->i", z[us], z[nv])
        loss = float(np.sum(w * _softplus(-margin)))
        gm = w * (-_sigmoid(-margin))
        self._accumulate(grad, us, pv, gm, z)
        self._accumulate(grad, us, nv, -gm, z)
        return loss

    def _reg_terms(self, z, grad, epoch) -> float:
        cfg = self.cfg
        groups = sample_group_pairs(
            self.g,
            cfg.reg_fraction,
            seed=[cfg.seed, _STREAM_REG_GROUPS, epoch],
            index=self.full_index,
        )
        value, (us, vs, coefs) = regularizer_term(
            lambda a, b: np.einsum("ij,ij->i", z[a], z[b]),
            self.g,
            groups,
            cfg.pairs_per_group,
            seed=[cfg.seed, _STREAM_REG_PAIRS, epoch],
            full_index=self.full_index,
            ns_index=self.ns_index,
            squared=cfg.reg_squared,
        )
        if len(us):
            self._accumulate(grad, us, vs, cfg.lambda_ * coefs, z)
        return value

    def initial_embeddings(self) -> np.ndarray:
        rng = self._rng(_STREAM_INIT, 0)
        bound = 1.0 / np.sqrt(self.cfg.d)
        return rng.uniform(-bound, bound, size=(self.n, self.cfg.d))

    def run(self, epoch_log: list | None = None) -> EmbeddingModel:
        cfg = self.cfg
        z = self.initial_embeddings()
        state = AdamState.for_params(z)
        for epoch in range(1, cfg.epochs + 1):
            loss, reg_value, grad = self.loss_and_grad(z, epoch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            adam_step(state, z, grad, cfg.learning_rate, cfg.weight_decay, epoch)
            if not np.all(np.isfinite(z)):
                raise FloatingPointError(f"non-finite embedding entries at epoch {epoch}")
            if epoch_log is not None:
                epoch_log.append((epoch, loss, reg_value))
        return EmbeddingModel(embeddings=z, model_kind=cfg.model)


def train(
    g: AttributedGraph,
    splits: EdgeSplit,
    table: RatioTable | None,
    cfg: TrainConfig,
    epoch_log: list | None = None,
) -> EmbeddingModel:
    """Train embeddings under the configured regime.

    The ``random`` baseline draws every dimension uniformly from [0, 1] and
    returns immediately; every other regime runs the shared epoch loop.
    """
    if cfg.regime == "random":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_RANDOM]))
        z = rng.uniform(0.0, 1.0, size=(g.n_nodes, cfg.d))
        return EmbeddingModel(embeddings=z, model_kind=cfg.model)
    trainer = Trainer(g, splits, table, cfg)
    return trainer.run(epoch_log=epoch_log)


# ---------------------------------------------------------------------------
# Embedding file IO
# ---------------------------------------------------------------------------

def save_embeddings(model: EmbeddingModel, g: AttributedGraph, path) -> None:
    """One line per node: original id then d floats with 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(model.n_nodes):
            values = " ".join(f"{x:.9g}" for x in model.embeddings[i])
            fh.write(f"{g.node_ids[i]} {values}\n")


def load_embeddings(path, g: AttributedGraph, model_kind: str = "dot-bce") -> EmbeddingModel:
    id_index = {nid: i for i, nid in enumerate(g.node_ids)}
    z = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] not in id_index:
                raise ValueError(f"embedding file references unknown node id {parts[0]!r}")
            row = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            if z is None:
                z = np.zeros((g.n_nodes, len(row)))
            elif len(row) != z.shape[1]:
                raise ValueError("inconsistent embedding dimension in file")
            z[id_index[parts[0]]] = row
    if z is None:
        raise ValueError(f"empty embedding file {path}")
    return EmbeddingModel(embeddings=z, model_kind=model_kind)
