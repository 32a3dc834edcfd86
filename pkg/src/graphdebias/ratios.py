"""Edge-probability ratio estimation, per-edge loss weights, and group scores.

The observed graph over-represents some attribute value combinations relative
to the structural prior. This module estimates, for every combination, the
ratio by which it scales edge probability (with and without the sensitive
attributes), turns the two into per-edge importance weights, and provides the
sampled group-mean score machinery used by the regularized training regime.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import generate
from .graph import AttributedGraph, GroupIndex, build_group_index

logger = logging.getLogger(__name__)


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


@dataclass
class RatioTable:
    """Per-combination ratio estimates and the weights derived from them.

    ``full_ratios`` is keyed by the concatenated attribute codes of an ordered
    node pair; ``nonsensitive_ratios`` by the same restricted to non-sensitive
    attributes. ``smoothing`` is the additive pseudo-count used by every
    estimator that produced the table. Immutable after construction.
    """

    full_ratios: dict[tuple[int, ...], float]
    nonsensitive_ratios: dict[tuple[int, ...], float]
    smoothing: float
    sensitive_mask: tuple[bool, ...]
    factorized: bool = False
    per_attribute_ratios: dict[int, dict[tuple[int, int], float]] = field(default_factory=dict)
    pair_counts: dict[tuple[int, ...], int] = field(default_factory=dict)
    edge_counts: dict[tuple[int, ...], int] = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.full_ratios, self.nonsensitive_ratios):
            for key, r in table.items():
                if not np.isfinite(r) or r < 0:
                    raise ValueError(f"ratio for key {key!r} must be finite and >= 0")
        self._warned_zero = False

    @property
    def n_attributes(self) -> int:
        return len(self.sensitive_mask)

    def _nonsensitive_key(self, full_key: tuple[int, ...]) -> tuple[int, ...]:
        k = self.n_attributes
        keep = [i for i, s in enumerate(self.sensitive_mask) if not s]
        return tuple(full_key[i] for i in keep) + tuple(full_key[k + i] for i in keep)

    def weight_of_key(self, full_key: tuple[int, ...]) -> float:
        """Weight for any pair whose combination is ``full_key``."""
        try:
            r = self.full_ratios[full_key]
            r_tilde = self.nonsensitive_ratios[self._nonsensitive_key(full_key)]
        except KeyError:
            raise KeyError(
                f"combination key {full_key!r} missing from table (schema mismatch)"
            ) from None
        if r == 0.0:
            if not self._warned_zero:
                logger.warning("zero full-combination ratio hit; emitting weight 0")
                self._warned_zero = True
            return 0.0
        return r_tilde / r

    def weight_grid(self, full_index: GroupIndex) -> np.ndarray:
        """(P, P) weights aligned with ``full_index`` profile ids.

        All pairs in a group share the weight, so weights are precomputed
        once per key rather than per edge.
        """
        p = full_index.n_profiles
        grid = np.empty((p, p), dtype=np.float64)
        for a in range(p):
            pa = tuple(int(c) for c in full_index.profiles[a])
            for b in range(p):
                pb = tuple(int(c) for c in full_index.profiles[b])
                grid[a, b] = self.weight_of_key(pa + pb)
        return grid


@dataclass(frozen=True)
class GroupScore:
    """Sampled mean model score over member pairs of one combination key."""

    key: tuple[int, ...]
    q_value: float
    sample_size: int


def _smoothed_ratio(edges, pairs, e_total, p_total, n_keys, alpha):
    num = (edges + alpha) / (e_total + alpha * n_keys)
    den = (pairs + alpha) / (p_total + alpha * n_keys)
    return num / den


def _ratio_map(index: GroupIndex, alpha: float) -> dict[tuple[int, ...], float]:
    if alpha == 0.0 and index.n_edges_total == 0:
        raise ValueError("cannot estimate ratios on an edgeless graph with zero smoothing")
    out = {}
    p = index.n_profiles
    for a in range(p):
        for b in range(p):
            key = index.key_of_id(a * p + b)
            out[key] = float(
                _smoothed_ratio(
                    index.edge_count_grid[a, b],
                    index.pair_count_grid[a, b],
                    index.n_edges_total,
                    index.n_pairs_total,
                    index.n_keys,
                    alpha,
                )
            )
    return out


def _per_attribute_ratios(g: AttributedGraph, attr: int, alpha: float) -> dict:
    codes = g.attributes[:, attr].astype(np.int64)
    n_values = int(codes.max()) + 1
    counts = np.bincount(codes, minlength=n_values)
    pair_grid = np.outer(counts, counts)
    edges = g.directed_edges()
    eid = codes[edges[:, 0]] * n_values + codes[edges[:, 1]]
    edge_grid = np.bincount(eid, minlength=n_values * n_values).reshape(n_values, n_values)
    observed = [(x, y) for x in range(n_values) for y in range(n_values) if pair_grid[x, y] > 0]
    n_keys = len(observed)
    table = {}
    for x, y in observed:
        table[(x, y)] = float(
            _smoothed_ratio(
                edge_grid[x, y],
                pair_grid[x, y],
                g.n_edges_directed,
                g.n_nodes ** 2,
                n_keys,
                alpha,
            )
        )
    return table


def estimate_ratios(
    g: AttributedGraph, factorized: bool = False, alpha: float = 0.5
) -> RatioTable:
    """Estimate the combination ratios of an observed graph.

    For every full key, the estimate is the key's share of directed edges
    over its share of the N^2 ordered pair universe, both additively smoothed
    by ``alpha``. The non-sensitive table is estimated the same way on the
    coarser grouping, using the observed edges directly: removing sensitive
    attributes re-routes edges within each non-sensitive group but does not
    change how many there are.

    With ``factorized`` the full-key ratio is the product of independent
    per-sensitive-attribute estimates and the non-sensitive table is
    identically 1, which is the estimator of choice when the combination
    table is too sparse to trust.
    """
    if alpha < 0:
        raise ValueError("smoothing pseudo-count must be >= 0")
    full_index = build_group_index(g, "full")
    if factorized:
        per_attr = {
            i: _per_attribute_ratios(g, i, alpha) for i in g.schema.sensitive_indices
        }
        full = {}
        for key in full_index.keys():
            k = g.n_attributes
            r = 1.0
            for i in g.schema.sensitive_indices:
                r *= per_attr[i][(key[i], key[k + i])]
            full[key] = r
        ns_index = build_group_index(g, "nonsensitive")
        nonsensitive = {key: 1.0 for key in ns_index.keys()}
        table = RatioTable(
            full_ratios=full,
            nonsensitive_ratios=nonsensitive,
            smoothing=alpha,
            sensitive_mask=g.schema.sensitive_mask,
            factorized=True,
            per_attribute_ratios=per_attr,
        )
    else:
        ns_index = build_group_index(g, "nonsensitive")
        table = RatioTable(
            full_ratios=_ratio_map(full_index, alpha),
            nonsensitive_ratios=_ratio_map(ns_index, alpha),
            smoothing=alpha,
            sensitive_mask=g.schema.sensitive_mask,
        )
    table.pair_counts = {k: full_index.pair_count(k) for k in full_index.keys()}
    table.edge_counts = {k: full_index.edge_count(k) for k in full_index.keys()}
    return table


def true_ratio_table(params: generate.GenModelParams, sensitive_mask) -> RatioTable:
    """Oracle table holding the generator's exact ratios (zero smoothing).

    Both tables are normalized by the observed graph's global edge rate so
    the per-edge weight reduces to the exact planted multiplier ratio.
    """
    prior_sum, prob_sum = generate._full_sums(params)
    rate = generate._global_rate(prior_sum, prob_sum)
    full = {key: (prob_sum[key] / prior_sum[key]) / rate for key in prior_sum}

    mask = tuple(bool(s) for s in sensitive_mask)
    keep = [i for i, s in enumerate(mask) if not s]
    tilde = generate.marginal_ratios(params, mask)
    profiles, _ = generate._profile_table(params)
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

    ns_prior, ns_prob = generate._pairwise_sums(params, lookup, key_fn)
    nonsensitive = {key: (ns_prob[key] / ns_prior[key]) / rate for key in ns_prior}
    return RatioTable(
        full_ratios=full,
        nonsensitive_ratios=nonsensitive,
        smoothing=0.0,
        sensitive_mask=mask,
    )


def edge_weight(table: RatioTable, g: AttributedGraph, u: int, v: int) -> float:
    """Loss weight for the ordered pair (u, v): ratio without over ratio with
    the sensitive attributes. Zero (flagged once) when the full-combination
    ratio is zero, which is only reachable for non-edge pairs."""
    k = g.n_attributes
    if table.n_attributes != k:
        raise KeyError("table was built for a different attribute schema")
    key = tuple(int(c) for c in g.attributes[u]) + tuple(int(c) for c in g.attributes[v])
    return table.weight_of_key(key)


def sample_group_pairs(
    g: AttributedGraph,
    fraction: float,
    seed,
    index: GroupIndex | None = None,
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Uniformly sample full combination keys, paired with their parent
    non-sensitive keys, for the regularizer to compare."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if index is None:
        index = build_group_index(g, "full")
    keys = index.keys()
    m = max(1, round(fraction * len(keys)))
    rng = np.random.default_rng(np.random.SeedSequence(_seed_list(seed)))
    chosen = rng.choice(len(keys), size=m, replace=False)
    k = g.n_attributes
    keep = g.schema.nonsensitive_indices
    out = []
    for i in chosen:
        key = keys[int(i)]
        parent = tuple(key[j] for j in keep) + tuple(key[k + j] for j in keep)
        out.append((key, parent))
    return out


def _sample_member_pairs(
    index: GroupIndex, key: tuple[int, ...], count: int, rng: np.random.Generator
):
    a = len(index.attr_indices)
    us_pool = index.member_nodes(key[:a])
    vs_pool = index.member_nodes(key[a:])
    if len(us_pool) == 0 or len(vs_pool) == 0:
        return None
    us = us_pool[rng.integers(0, len(us_pool), size=count)]
    vs = vs_pool[rng.integers(0, len(vs_pool), size=count)]
    return us, vs


def group_score(
    score_fn, index: GroupIndex, key: tuple[int, ...], pairs_per_group: int, rng
) -> GroupScore | None:
    sampled = _sample_member_pairs(index, key, pairs_per_group, rng)
    if sampled is None:
        return None
    us, vs = sampled
    return GroupScore(key=key, q_value=float(np.mean(score_fn(us, vs))), sample_size=pairs_per_group)


def regularizer_term(
    score_fn,
    g: AttributedGraph,
    group_pairs: list[tuple[tuple[int, ...], tuple[int, ...]]],
    pairs_per_group: int,
    seed,
    full_index: GroupIndex | None = None,
    ns_index: GroupIndex | None = None,
    squared: bool = False,
):
    """Penalty pulling each combination's mean score toward its parent group.

    For every sampled (full key, non-sensitive key), both group means are
    approximated from ``pairs_per_group`` uniformly drawn member pairs; the
    term adds the distance between the two means. Returns the value plus the
    subgradient coefficient each touched pair's score receives (sign(0) is 0
    at ties).
    """
    if full_index is None:
        full_index = build_group_index(g, "full")
    if ns_index is None:
        ns_index = build_group_index(g, "nonsensitive")
    base = _seed_list(seed)
    value = 0.0
    grad_us, grad_vs, grad_coefs = [], [], []
    for j, (full_key, ns_key) in enumerate(group_pairs):
        rng = np.random.default_rng(np.random.SeedSequence(base + [j]))
        try:
            full_sample = _sample_member_pairs(full_index, full_key, pairs_per_group, rng)
            ns_sample = _sample_member_pairs(ns_index, ns_key, pairs_per_group, rng)
        except KeyError:
            full_sample = ns_sample = None
        if full_sample is None or ns_sample is None:
            logger.warning("skipping empty group pair %r / %r", full_key, ns_key)
            continue
        q_full = float(np.mean(score_fn(full_sample[0], full_sample[1])))
        q_ns = float(np.mean(score_fn(ns_sample[0], ns_sample[1])))
        diff = q_full - q_ns
        if squared:
            value += diff * diff
            outer = 2.0 * diff
        else:
            value += abs(diff)
            outer = float(np.sign(diff))
        if outer != 0.0:
            coef = outer / pairs_per_group
            grad_us.extend([full_sample[0], ns_sample[0]])
            grad_vs.extend([full_sample[1], ns_sample[1]])
            grad_coefs.append(np.full(pairs_per_group, coef))
            grad_coefs.append(np.full(pairs_per_group, -coef))
    if grad_us:
        touched = (
            np.concatenate(grad_us),
            np.concatenate(grad_vs),
            np.concatenate(grad_coefs),
        )
    else:
        touched = (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
        )
    return value, touched


def verify_unbiased_expectation(
    params: generate.GenModelParams,
    table: RatioTable,
    losses: np.ndarray,
) -> tuple[float, float]:
    """Expected weighted loss on the observed graph vs. the plain loss on the
    bias-free graph, enumerated exactly over all ordered pairs.

    With the generator's true ratios the two sides agree to machine
    precision; with estimated ratios the gap measures estimation error.
    """
    n = params.n_nodes
    if n > 64:
        raise ValueError("exact enumeration is limited to N <= 64")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (n, n):
        raise ValueError("losses must be an (N, N) array of per-pair values")
    mask = table.sensitive_mask
    tilde = generate.marginal_ratios(params, mask)
    keep = [i for i, s in enumerate(mask) if not s]
    k = params.schema.n_attributes
    lhs = 0.0
    rhs = 0.0
    w = params.expected_degrees
    total = w.sum()
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            prior = min(1.0, w[u] * w[v] / total)
            full_key = params.pair_key(u, v)
            q = min(1.0, prior * params.planted_ratios[full_key])
            ns_key = tuple(full_key[i] for i in keep) + tuple(full_key[k + i] for i in keep)
            q_tilde = min(1.0, prior * tilde[ns_key])
            if q > 0.0:
                r = table.full_ratios[full_key]
                weight = 0.0 if r == 0.0 else table.nonsensitive_ratios[ns_key] / r
                lhs += losses[u, v] * weight * q
            rhs += losses[u, v] * q_tilde
    return lhs, rhs


def export_ratio_csv(table: RatioTable, g: AttributedGraph, path, comment: str | None = None):
    """Write ``key,R,R_tilde,weight,pair_count,edge_count`` rows for audit."""
    index = build_group_index(g, "full")
    schema = g.schema
    k = schema.n_attributes

    def render(codes: tuple[int, ...]) -> str:
        return "|".join(schema.value_names[i][c] for i, c in enumerate(codes))

    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("key,R,R_tilde,weight,pair_count,edge_count\n")
        for key in sorted(index.keys()):
            r = table.full_ratios[key]
            ns_key = table._nonsensitive_key(key)
            r_tilde = table.nonsensitive_ratios[ns_key]
            weight = table.weight_of_key(key)
            name = f"{render(key[:k])},{render(key[k:])}"
            fh.write(
                f"\"{name}\",{r:.12g},{r_tilde:.12g},{weight:.12g},"
                f"{index.pair_count(key)},{index.edge_count(key)}\n"
            )
