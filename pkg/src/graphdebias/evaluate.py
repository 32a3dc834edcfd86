"""Leakage probe, ranking utility, and link-prediction fairness metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingModel, _sigmoid
from .graph import AttributedGraph, EdgeSplit, _sample_non_neighbors

_STREAM_NDCG = 101
_STREAM_PROBE = 102


@dataclass
class EvalReport:
    """All metrics for one trained regime, plus the config echo."""

    regime: str
    seed: int
    config_hash: str
    micro_f1: dict[str, float] = field(default_factory=dict)
    ndcg_at_10: float = 0.0
    dp: dict[str, float | None] = field(default_factory=dict)
    eo: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "regime": self.regime,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "micro_f1": self.micro_f1,
            "ndcg_at_10": self.ndcg_at_10,
            "dp": self.dp,
            "eo": self.eo,
            "counts": self.counts,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[str]:
        rows = []
        for attr in sorted(self.micro_f1):
            dp = self.dp.get(attr)
            eo = self.eo.get(attr)
            rows.append(
                f"{self.regime},{attr},{self.micro_f1[attr]:.6f},{self.ndcg_at_10:.6f},"
                f"{'' if dp is None else f'{dp:.6f}'},{'' if eo is None else f'{eo:.6f}'},"
                f"{self.config_hash},{self.seed}"
            )
        return rows


CSV_HEADER = "regime,attribute,micro_f1,ndcg_at_10,dp,eo,config_hash,seed"


def ndcg_at_k(
    model: EmbeddingModel,
    g: AttributedGraph,
    split: EdgeSplit,
    k: int = 10,
    list_size: int = 100,
    seed: int = 0,
) -> float:
    """Mean NDCG@k of ranking each node's test neighbors inside a candidate
    list padded with sampled non-neighbors. Ties rank lower node ids first."""
    if k > list_size:
        raise ValueError("k must not exceed the candidate list size")
    test_pos_of: dict[int, list[int]] = {}
    for u, v in split.test_pos:
        test_pos_of.setdefault(int(u), []).append(int(v))
    if not test_pos_of:
        raise ValueError("no nodes with test positives to evaluate")
    total = 0.0
    evaluated = 0
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    for u in sorted(test_pos_of):
        positives = np.array(sorted(set(test_pos_of[u])), dtype=np.int64)
        n_pos = len(positives)
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_NDCG, u]))
        negatives = _sample_non_neighbors(g, u, max(0, list_size - n_pos), rng)
        candidates = np.concatenate([positives, negatives])
        scores = model.score_many(np.full(len(candidates), u), candidates)
        order = np.lexsort((candidates, -scores))
        rel = np.zeros(len(candidates))
        rel[: n_pos] = 1.0
        ranked = rel[order][:k]
        dcg = float(np.sum(ranked * discounts[: len(ranked)]))
        idcg = float(np.sum(discounts[: min(n_pos, k)]))
        total += dcg / idcg
        evaluated += 1
    return total / evaluated


def _micro_f1_from_predictions(pred: np.ndarray, truth: np.ndarray) -> float:
    classes = np.unique(np.concatenate([pred, truth]))
    tp = sum(int(np.sum((pred == c) & (truth == c))) for c in classes)
    fp = sum(int(np.sum((pred == c) & (truth != c))) for c in classes)
    fn = sum(int(np.sum((pred != c) & (truth == c))) for c in classes)
    return tp / (tp + 0.5 * (fp + fn))


def probe_micro_f1(
    embeddings: np.ndarray,
    labels: np.ndarray,
    split_frac: float = 0.8,
    l2: float = 1e-4,
    lr: float = 0.1,
    iters: int = 500,
    seed: int = 0,
) -> float:
    """Micro-F1 of a softmax probe predicting a label column from embeddings.

    The probe is a multinomial logistic regression trained with full-batch
    gradient descent on ``split_frac`` of the nodes and scored on the rest.
    For single-label multiclass prediction micro-F1 equals accuracy; both are
    computed and asserted equal.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_PROBE]))
    order = rng.permutation(n)
    n_train = int(split_frac * n)
    train_idx, test_idx = order[:n_train], order[n_train:]
    if len(np.unique(y[train_idx])) < 2:
        raise ValueError("probe train split holds a single label class")
    n_classes = int(y.max()) + 1
    x_tr, y_tr = x[train_idx], y[train_idx]
    onehot = np.zeros((len(train_idx), n_classes))
    onehot[np.arange(len(train_idx)), y_tr] = 1.0
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(iters):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / len(train_idx)
        w -= lr * (x_tr.T @ delta + l2 * w)
        b -= lr * delta.sum(axis=0)
    pred = np.argmax(x[test_idx] @ w + b, axis=1)
    truth = y[test_idx]
    accuracy = float(np.mean(pred == truth))
    micro = _micro_f1_from_predictions(pred, truth)
    assert abs(micro - accuracy) < 1e-15, "micro-F1 must equal accuracy for single-label prediction"
    return micro


def fairness_dp_eo(
    model: EmbeddingModel,
    g: AttributedGraph,
    pairs: np.ndarray,
    labels: np.ndarray,
    attr_index: int,
    min_group_pairs: int = 10,
) -> tuple[float | None, float | None]:
    """Demographic parity and equalized opportunity over evaluated pairs.

    Pairs are grouped by the unordered attribute values of their endpoints;
    sigmoid scores give the per-group prediction rate (all pairs) and TPR
    (true edges only). Each metric is the maximum pairwise gap over groups
    with at least ``min_group_pairs`` qualifying pairs, or None if fewer than
    two groups qualify.
    """
    stats = _group_stats(model, g, pairs, labels, attr_index)
    rates = [s["rate"] for s in stats.values() if s["n"] >= min_group_pairs]
    tprs = [s["tpr"] for s in stats.values() if s["n_pos"] >= min_group_pairs]
    dp = (max(rates) - min(rates)) if len(rates) >= 2 else None
    eo = (max(tprs) - min(tprs)) if len(tprs) >= 2 else None
    return dp, eo


def _group_stats(model, g, pairs, labels, attr_index):
    pairs = np.asarray(pairs, dtype=np.int64)
    labels = np.asarray(labels)
    a = g.attributes[pairs[:, 0], attr_index]
    b = g.attributes[pairs[:, 1], attr_index]
    keys = np.column_stack([np.minimum(a, b), np.maximum(a, b)])
    probs = _sigmoid(model.score_many(pairs[:, 0], pairs[:, 1]))
    stats: dict[tuple[int, int], dict] = {}
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    for i, key in enumerate(uniq):
        sel = inverse == i
        pos = sel & (labels == 1)
        stats[tuple(int(c) for c in key)] = {
            "n": int(sel.sum()),
            "n_pos": int(pos.sum()),
            "rate": float(probs[sel].mean()) if sel.any() else 0.0,
            "tpr": float(probs[pos].mean()) if pos.any() else 0.0,
        }
    return stats


def excluded_group_count(
    model, g, pairs, labels, attr_index, min_group_pairs: int = 10
) -> int:
    stats = _group_stats(model, g, pairs, labels, attr_index)
    return sum(1 for s in stats.values() if s["n"] < min_group_pairs)


def build_report(
    model: EmbeddingModel,
    g: AttributedGraph,
    split: EdgeSplit,
    regime: str,
    config_hash: str,
    seed: int,
    k: int = 10,
    list_size: int = 100,
    probe_split: float = 0.8,
    min_group_pairs: int = 10,
) -> EvalReport:
    """Run the full metric battery for one trained regime."""
    report = EvalReport(regime=regime, seed=seed, config_hash=config_hash)
    sens = g.schema.sensitive_indices
    for i in sens:
        name = g.schema.names[i]
        report.micro_f1[name] = probe_micro_f1(
            model.embeddings, g.attributes[:, i], split_frac=probe_split, seed=seed
        )
    report.ndcg_at_10 = ndcg_at_k(model, g, split, k=k, list_size=list_size, seed=seed)
    pairs = np.concatenate([split.test_pos, split.test_neg], axis=0)
    labels = np.concatenate(
        [np.ones(len(split.test_pos), dtype=np.int64), np.zeros(len(split.test_neg), dtype=np.int64)]
    )
    excluded = 0
    for i in sens:
        name = g.schema.names[i]
        dp, eo = fairness_dp_eo(model, g, pairs, labels, i, min_group_pairs)
        report.dp[name] = dp
        report.eo[name] = eo
        excluded += excluded_group_count(model, g, pairs, labels, i, min_group_pairs)
    evaluated_nodes = len({int(u) for u, _ in split.test_pos})
    report.counts = {
        "evaluated_nodes": evaluated_nodes,
        "evaluated_pairs": int(len(pairs)),
        "excluded_small_groups": excluded,
    }
    return report
