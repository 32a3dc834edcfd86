"""Synthetic attributed-graph generator with planted attribute effects.

Edges are sampled in two phases: a structural expected-degree prior gives
every pair a base probability, and a planted per-combination multiplier
(rho) scales it depending on the attribute values of the two endpoints.
Because the multipliers are known, the generator can also report the exact
edge-probability ratios an estimator should recover, which makes it the
oracle for the estimation and unbiasedness tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import AttributeSchema, AttributedGraph, from_edge_list

logger = logging.getLogger(__name__)

_ROW_STREAM = 17  # per-row sampling streams share this tag across both samplers


@dataclass
class GenModelParams:
    """Structural weights, node attribute profiles, and planted multipliers.

    ``planted_ratios`` maps a full combination key (the concatenated codes of
    the two endpoints) to a multiplier rho >= 0; any combination occurring in
    ``attribute_profiles`` that is missing from the map is filled with 1.0.
    """

    expected_degrees: np.ndarray  # (N,) positive weights
    attribute_profiles: np.ndarray  # (N, K) int codes
    schema: AttributeSchema
    planted_ratios: dict[tuple[int, ...], float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.expected_degrees = np.asarray(self.expected_degrees, dtype=np.float64)
        self.attribute_profiles = np.asarray(self.attribute_profiles, dtype=np.int32)
        if self.expected_degrees.ndim != 1:
            raise ValueError("expected_degrees must be one-dimensional")
        if np.any(self.expected_degrees <= 0):
            raise ValueError("all expected degrees must be positive")
        if self.attribute_profiles.shape[0] != len(self.expected_degrees):
            raise ValueError("attribute_profiles and expected_degrees disagree on N")
        if self.attribute_profiles.shape[1] != self.schema.n_attributes:
            raise ValueError("attribute_profiles width must match schema")
        for rho in self.planted_ratios.values():
            if not np.isfinite(rho) or rho < 0:
                raise ValueError("planted multipliers must be finite and >= 0")
        k = self.schema.n_attributes
        for key in self.planted_ratios:
            if len(key) != 2 * k:
                raise ValueError(f"ratio key {key!r} must concatenate two {k}-code profiles")
        profiles = {tuple(int(c) for c in row) for row in self.attribute_profiles}
        for p in profiles:
            for q in profiles:
                self.planted_ratios.setdefault(p + q, 1.0)

    @property
    def n_nodes(self) -> int:
        return len(self.expected_degrees)

    def pair_key(self, u: int, v: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.attribute_profiles[u]) + tuple(
            int(c) for c in self.attribute_profiles[v]
        )


def structural_edge_prob(params: GenModelParams, u: int, v: int) -> float:
    """Structural prior probability min(1, w_u * w_v / sum(w)) for a pair."""
    if u == v:
        raise ValueError("self-pairs carry no edge probability")
    w = params.expected_degrees
    return float(min(1.0, w[u] * w[v] / w.sum()))


def _profile_table(params: GenModelParams):
    """Dense profile index plus a (P, P) lookup of a per-key array."""
    profiles, pid = np.unique(params.attribute_profiles, axis=0, return_inverse=True)
    return profiles, pid.astype(np.int64)


def _rho_grid(params: GenModelParams, profiles: np.ndarray) -> np.ndarray:
    p = len(profiles)
    grid = np.empty((p, p), dtype=np.float64)
    for a in range(p):
        ta = tuple(int(c) for c in profiles[a])
        for b in range(p):
            tb = tuple(int(c) for c in profiles[b])
            grid[a, b] = params.planted_ratios[ta + tb]
    return grid


def marginal_ratios(
    params: GenModelParams, sensitive_mask: tuple[bool, ...] | list[bool]
) -> dict[tuple[int, ...], float]:
    """Multipliers for the graph generated without the sensitive attributes.

    For each combination of non-sensitive values, the planted multipliers of
    all full combinations that collapse onto it are averaged with ordered
    pair-count weights, so the expected number of edges inside each
    non-sensitive group is preserved while edges are re-routed within it.
    """
    if len(sensitive_mask) != params.schema.n_attributes:
        raise ValueError("sensitive_mask length must match schema")
    keep = [i for i, s in enumerate(sensitive_mask) if not s]
    profiles, pid = _profile_table(params)
    counts = np.bincount(pid, minlength=len(profiles)).astype(np.float64)
    num: dict[tuple[int, ...], float] = {}
    den: dict[tuple[int, ...], float] = {}
    for a in range(len(profiles)):
        ta = tuple(int(c) for c in profiles[a])
        ra = tuple(ta[i] for i in keep)
        for b in range(len(profiles)):
            tb = tuple(int(c) for c in profiles[b])
            key = ra + tuple(tb[i] for i in keep)
            pairs = counts[a] * counts[b]
            rho = params.planted_ratios[ta + tb]
            num[key] = num.get(key, 0.0) + pairs * rho
            den[key] = den.get(key, 0.0) + pairs
    return {key: num[key] / den[key] for key in num}


def _sample_graph(
    params: GenModelParams, rho_of_pair: np.ndarray, pid: np.ndarray
) -> AttributedGraph:
    """Bernoulli-sample every unordered pair with prob min(1, prior * rho)."""
    n = params.n_nodes
    w = params.expected_degrees
    total = w.sum()
    rows_u, rows_v = [], []
    clipped = 0
    for u in range(n - 1):
        rng = np.random.default_rng(np.random.SeedSequence([params.seed, _ROW_STREAM, u]))
        vs = np.arange(u + 1, n)
        prior = np.minimum(1.0, w[u] * w[vs] / total)
        p = prior * rho_of_pair[pid[u], pid[vs]]
        clipped += int(np.count_nonzero(p > 1.0))
        p = np.minimum(p, 1.0)
        hit = rng.random(len(vs)) < p
        if hit.any():
            chosen = vs[hit]
            rows_u.append(np.full(len(chosen), u, dtype=np.int64))
            rows_v.append(chosen)
    if clipped:
        logger.warning("clipped %d pair probabilities above 1", clipped)
    if rows_u:
        edges = np.column_stack([np.concatenate(rows_u), np.concatenate(rows_v)])
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    return from_edge_list(edges, params.attribute_profiles, params.schema)


def sample_biased_graph(params: GenModelParams) -> AttributedGraph:
    """Sample the observed graph: structural prior times planted multipliers."""
    profiles, pid = _profile_table(params)
    return _sample_graph(params, _rho_grid(params, profiles), pid)


def sample_bias_free_graph(
    params: GenModelParams, sensitive_mask: tuple[bool, ...] | list[bool]
) -> AttributedGraph:
    """Sample the counterfactual graph generated without sensitive attributes."""
    tilde = marginal_ratios(params, sensitive_mask)
    keep = [i for i, s in enumerate(sensitive_mask) if not s]
    profiles, pid = _profile_table(params)
    p = len(profiles)
    grid = np.empty((p, p), dtype=np.float64)
    for a in range(p):
        ra = tuple(int(profiles[a][i]) for i in keep)
        for b in range(p):
            grid[a, b] = tilde[ra + tuple(int(profiles[b][i]) for i in keep)]
    return _sample_graph(params, grid, pid)


# ---------------------------------------------------------------------------
# Analytic ground truth
# ---------------------------------------------------------------------------

def _pairwise_sums(params: GenModelParams, rho_lookup, key_of_profiles):
    """Accumulate sum(prior) and sum(min(1, prior*rho)) per key over u != v."""
    n = params.n_nodes
    w = params.expected_degrees
    total = w.sum()
    profiles, pid = _profile_table(params)
    prior_sum: dict[tuple, float] = {}
    prob_sum: dict[tuple, float] = {}
    for u in range(n):
        vs = np.concatenate([np.arange(0, u), np.arange(u + 1, n)])
        prior = np.minimum(1.0, w[u] * w[vs] / total)
        rho = rho_lookup(pid[u], pid[vs])
        prob = np.minimum(1.0, prior * rho)
        kid = pid[vs]
        for q in np.unique(kid):
            key = key_of_profiles(int(pid[u]), int(q))
            sel = kid == q
            prior_sum[key] = prior_sum.get(key, 0.0) + float(prior[sel].sum())
            prob_sum[key] = prob_sum.get(key, 0.0) + float(prob[sel].sum())
    return prior_sum, prob_sum


def _global_rate(prior_sum, prob_sum) -> float:
    return sum(prob_sum.values()) / sum(prior_sum.values())


def _full_sums(params: GenModelParams):
    profiles, _ = _profile_table(params)
    grid = _rho_grid(params, profiles)

    def lookup(a, bs):
        return grid[a, bs]

    def key_fn(a, b):
        return tuple(int(c) for c in profiles[a]) + tuple(int(c) for c in profiles[b])

    return _pairwise_sums(params, lookup, key_fn)


def true_ratio(params: GenModelParams, key: tuple[int, ...]) -> float:
    """Exact ratio by which a full combination scales structural edge odds.

    Computed as the key's mean sampled probability over its mean structural
    prior, normalized by the observed graph's global edge rate, so it is the
    population value the maximum-likelihood estimator converges to.
    """
    if key not in params.planted_ratios:
        raise KeyError(f"unknown combination key {key!r}")
    prior_sum, prob_sum = _full_sums(params)
    if key not in prior_sum:
        raise KeyError(f"combination key {key!r} has no node pairs")
    rate = _global_rate(prior_sum, prob_sum)
    return (prob_sum[key] / prior_sum[key]) / rate


def true_nonsensitive_ratio(
    params: GenModelParams,
    key: tuple[int, ...],
    sensitive_mask: tuple[bool, ...] | list[bool],
) -> float:
    """Exact ratio for a non-sensitive combination in the bias-free graph.

    Normalized by the *observed* graph's edge rate: the paper-style estimator
    keeps the observed edge total when approximating the bias-free graph, so
    this is the value it targets.
    """
    tilde = marginal_ratios(params, sensitive_mask)
    if key not in tilde:
        raise KeyError(f"unknown non-sensitive key {key!r}")
    keep = [i for i, s in enumerate(sensitive_mask) if not s]
    profiles, _ = _profile_table(params)
    p = len(profiles)
    grid = np.empty((p, p), dtype=np.float64)
    for a in range(p):
        ra = tuple(int(profiles[a][i]) for i in keep)
        for b in range(p):
            grid[a, b] = tilde[ra + tuple(int(profiles[b][i]) for i in keep)]

    def lookup(a, bs):
        return grid[a, bs]

    def key_fn(a, b):
        return tuple(int(profiles[a][i]) for i in keep) + tuple(
            int(profiles[b][i]) for i in keep
        )

    prior_sum, prob_sum = _pairwise_sums(params, lookup, key_fn)
    full_prior, full_prob = _full_sums(params)
    rate = _global_rate(full_prior, full_prob)
    return (prob_sum[key] / prior_sum[key]) / rate


def expected_key_edges(params: GenModelParams) -> dict[tuple[int, ...], float]:
    """Expected ordered-edge count per full key under the planted sampler."""
    _, prob_sum = _full_sums(params)
    return prob_sum


def pair_probability(params: GenModelParams, u: int, v: int) -> float:
    """Planted sampling probability min(1, prior * rho) of the pair (u, v)."""
    base = structural_edge_prob(params, u, v)
    return float(min(1.0, base * params.planted_ratios[params.pair_key(u, v)]))


def write_ground_truth(params: GenModelParams, path) -> None:
    """Dump (key, rho, analytic ratio) rows for every full combination key."""
    prior_sum, prob_sum = _full_sums(params)
    rate = _global_rate(prior_sum, prob_sum)
    schema = params.schema
    k = schema.n_attributes

    def render(profile: tuple[int, ...]) -> str:
        return "|".join(schema.value_names[i][c] for i, c in enumerate(profile))

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("key,rho,ratio\n")
        for key in sorted(prior_sum):
            ratio = (prob_sum[key] / prior_sum[key]) / rate
            name = f"{render(key[:k])},{render(key[k:])}"
            fh.write(f"\"{name}\",{params.planted_ratios[key]:.12g},{ratio:.12g}\n")
