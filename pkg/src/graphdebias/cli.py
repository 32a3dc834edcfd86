"""Experiment runner: generate, train, evaluate, and sweep subcommands.

Every command reads one plain-text config file and writes into the config's
output directory. Outputs are immutable: re-running against an existing
directory requires --overwrite, and re-runs with the same config and seed
reproduce every output byte for byte. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import generate as gen
from .config import ConfigError, ExperimentConfig
from .embed import TrainConfig, load_embeddings, save_embeddings, train
from .graph import AttributedGraph, load_graph, mark_sensitive, split_edges
from .ratios import RatioTable, estimate_ratios, export_ratio_csv

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9]

_GEN_ATTR_STREAM = 201


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.require("out.dir"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _claim_outputs(paths: list[Path], overwrite: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not overwrite:
        raise ConfigError(
            f"output file(s) already exist (pass --overwrite or use a new directory): "
            f"{', '.join(str(p) for p in existing)}"
        )


def _stamp(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.config_hash} master_seed={cfg.master_seed}"


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _parse_attribute_spec(spec: str):
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"gen.attribute must be 'name:v1,v2,...:f1,f2,...', got {spec!r}")
    name = parts[0].strip()
    values = [v.strip() for v in parts[1].split(",") if v.strip()]
    try:
        fractions = [float(f) for f in parts[2].split(",")]
    except ValueError:
        raise ConfigError(f"bad fractions in gen.attribute {spec!r}") from None
    if len(values) != len(fractions) or not values:
        raise ConfigError(f"gen.attribute {spec!r} needs one fraction per value")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"gen.attribute {spec!r} fractions must sum to 1")
    return name, values, fractions


def _assign_column(n: int, fractions: list[float], rng: np.random.Generator) -> np.ndarray:
    bounds = np.floor(np.cumsum(fractions) * n + 0.5).astype(int)
    col = np.zeros(n, dtype=np.int32)
    start = 0
    for code, end in enumerate(bounds):
        col[start:end] = code
        start = end
    col[start:] = len(fractions) - 1
    return rng.permutation(col)


def _parse_ratio_spec(spec: str, schema, profile_codes):
    if ":" not in spec:
        raise ConfigError(f"gen.ratio must be 'profile,profile:rho', got {spec!r}")
    key_part, rho_part = spec.rsplit(":", 1)
    try:
        rho = float(rho_part)
    except ValueError:
        raise ConfigError(f"bad multiplier in gen.ratio {spec!r}") from None
    if rho < 0:
        raise ConfigError(f"gen.ratio {spec!r} multiplier must be >= 0")
    sides = key_part.split(",")
    if len(sides) != 2:
        raise ConfigError(f"gen.ratio key must name two profiles, got {spec!r}")
    codes = []
    for side in sides:
        values = [v.strip() for v in side.split("|")]
        if len(values) != schema.n_attributes:
            raise ConfigError(
                f"gen.ratio key {key_part!r} must give {schema.n_attributes} value(s) per profile"
            )
        for i, value in enumerate(values):
            try:
                codes.append(schema.value_code(i, value))
            except KeyError:
                raise ConfigError(
                    f"gen.ratio key {key_part!r} references unknown value "
                    f"{value!r} for attribute {schema.names[i]!r}"
                ) from None
    return tuple(codes), rho


def build_generator_params(cfg: ExperimentConfig) -> gen.GenModelParams:
    n = cfg.get_int("gen.n_nodes")
    if n is None or n < 2:
        raise ConfigError("gen.n_nodes must be set to at least 2")
    gen_seed = cfg.get_int("gen.seed", cfg.master_seed)
    specs = cfg.multi.get("gen.attribute", [])
    if not specs:
        raise ConfigError("at least one gen.attribute line is required")
    names, value_names, columns = [], [], []
    for i, spec in enumerate(specs):
        name, values, fractions = _parse_attribute_spec(spec)
        rng = np.random.default_rng(np.random.SeedSequence([gen_seed, _GEN_ATTR_STREAM, i]))
        names.append(name)
        value_names.append(tuple(values))
        columns.append(_assign_column(n, fractions, rng))
    from .graph import AttributeSchema

    schema = AttributeSchema(
        names=tuple(names),
        value_names=tuple(value_names),
        sensitive_mask=tuple(False for _ in names),
    )
    profiles = np.column_stack(columns).astype(np.int32)

    avg_degree = cfg.get_float("gen.avg_degree", 10.0)
    weight_file = cfg.get("gen.weight_file")
    exponent = cfg.get_float("gen.degree_exponent")
    if weight_file:
        weights = np.loadtxt(weight_file, dtype=np.float64).reshape(-1)
        if len(weights) != n:
            raise ConfigError("gen.weight_file must hold one weight per node")
    elif exponent is not None:
        if exponent <= 1.0:
            raise ConfigError("gen.degree_exponent must exceed 1")
        ranks = np.arange(1, n + 1, dtype=np.float64)
        weights = ranks ** (-1.0 / (exponent - 1.0))
        weights *= avg_degree / weights.mean()
    else:
        weights = np.full(n, avg_degree, dtype=np.float64)

    ratios: dict[tuple[int, ...], float] = {}
    for spec in cfg.multi.get("gen.ratio", []):
        key, rho = _parse_ratio_spec(spec, schema, profiles)
        ratios[key] = rho
        k = schema.n_attributes
        mirrored = key[k:] + key[:k]  # edge multipliers are symmetric in the endpoints
        ratios.setdefault(mirrored, rho)

    return gen.GenModelParams(
        expected_degrees=weights,
        attribute_profiles=profiles,
        schema=schema,
        planted_ratios=ratios,
        seed=gen_seed,
    )


def cmd_generate(cfg: ExperimentConfig, overwrite: bool = False) -> None:
    out = _out_dir(cfg)
    edge_path = out / "edges.txt"
    attr_path = out / "attrs.csv"
    truth_path = out / "ratios_true.csv"
    _claim_outputs([edge_path, attr_path, truth_path], overwrite)
    params = build_generator_params(cfg)
    g = gen.sample_biased_graph(params)
    stamp = _stamp(cfg)
    with open(edge_path, "w", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        for u in range(g.n_nodes):
            for v in g.neighbors(u):
                if u < v:
                    fh.write(f"{g.node_ids[u]} {g.node_ids[int(v)]}\n")
    with open(attr_path, "w", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        fh.write("id," + ",".join(params.schema.names) + "\n")
        for i in range(g.n_nodes):
            row = [
                params.schema.value_names[j][int(c)]
                for j, c in enumerate(params.attribute_profiles[i])
            ]
            fh.write(f"{g.node_ids[i]}," + ",".join(row) + "\n")
    tmp = str(truth_path)
    gen.write_ground_truth(params, tmp)
    text = Path(tmp).read_text(encoding="utf-8")
    truth_path.write_text(f"# {stamp}\n{text}", encoding="utf-8")
    logger.info("generated %d nodes / %d edges into %s", g.n_nodes, g.n_edges, out)


# ---------------------------------------------------------------------------
# train / evaluate / sweep
# ---------------------------------------------------------------------------

def _load_experiment_graph(cfg: ExperimentConfig) -> AttributedGraph:
    out = Path(cfg.require("out.dir"))
    edges = cfg.get("data.edges", str(out / "edges.txt"))
    attrs = cfg.get("data.attrs", str(out / "attrs.csv"))
    try:
        g = load_graph(edges, attrs)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load graph: {exc}") from None
    sensitive = cfg.get_list("data.sensitive")
    if sensitive:
        try:
            g = mark_sensitive(g, sensitive)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    return g


def _train_config(cfg: ExperimentConfig, regime: str, lambda_override=None) -> TrainConfig:
    try:
        return TrainConfig(
            regime=regime,
            epochs=cfg.get_int("train.epochs", 800),
            learning_rate=cfg.get_float("train.lr", 0.01),
            weight_decay=cfg.get_float("train.weight_decay", 0.0005),
            lambda_=cfg.get_float("train.lambda", 0.5) if lambda_override is None else lambda_override,
            reg_fraction=cfg.get_float("train.reg_fraction", 0.1),
            neg_ratio=cfg.get_int("split.neg_ratio", 20),
            seed=cfg.master_seed,
            weight_negatives=cfg.get_bool("train.weight_negatives", False),
            factorized=cfg.get_bool("train.factorized", False),
            d=cfg.get_int("train.d", 16),
            model=cfg.get("train.model", "dot-bce"),
            pairs_per_group=cfg.get_int("train.pairs_per_group", 128),
            reg_squared=cfg.get_bool("train.reg_squared", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _split(cfg: ExperimentConfig, g: AttributedGraph):
    return split_edges(
        g,
        cfg.get_float("split.train_frac", 0.9),
        cfg.get_int("split.neg_ratio", 20),
        cfg.master_seed,
    )


def _ratio_table(cfg: ExperimentConfig, g: AttributedGraph, regimes: list[str]) -> RatioTable | None:
    needs = any(r in ("uge-w", "uge-c") for r in regimes)
    if not needs:
        return None
    if not cfg.get_bool("ratio.enable", True):
        raise ConfigError("regimes uge-w/uge-c need ratio estimation but ratio.enable is false")
    return estimate_ratios(
        g,
        factorized=cfg.get_bool("train.factorized", False),
        alpha=cfg.get_float("ratio.alpha", 0.5),
    )


def _write_meta(path: Path, cfg: ExperimentConfig, regime: str, train_cfg: TrainConfig) -> None:
    doc = {
        "d": train_cfg.d,
        "regime": regime,
        "seed": train_cfg.seed,
        "config_hash": cfg.config_hash,
        "model": train_cfg.model,
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_train(cfg: ExperimentConfig, overwrite: bool = False) -> None:
    out = _out_dir(cfg)
    regimes = cfg.get_list("train.regimes", "none")
    outputs = []
    for regime in regimes:
        outputs += [
            out / f"emb_{regime}.txt",
            out / f"emb_{regime}.meta.json",
            out / f"train_log_{regime}.csv",
        ]
    outputs.append(out / "ratios_estimated.csv")
    _claim_outputs(outputs, overwrite)
    g = _load_experiment_graph(cfg)
    splits = _split(cfg, g)
    table = _ratio_table(cfg, g, regimes)
    if table is not None:
        export_ratio_csv(table, g, out / "ratios_estimated.csv", comment=_stamp(cfg))
    for regime in regimes:
        train_cfg = _train_config(cfg, regime)
        log: list = []
        model = train(g, splits, table, train_cfg, epoch_log=log)
        save_embeddings(model, g, out / f"emb_{regime}.txt")
        _write_meta(out / f"emb_{regime}.meta.json", cfg, regime, train_cfg)
        with open(out / f"train_log_{regime}.csv", "w", encoding="utf-8") as fh:
            fh.write(f"# {_stamp(cfg)}\n")
            fh.write("epoch,loss,reg_term\n")
            for epoch, loss, reg in log:
                fh.write(f"{epoch},{loss:.9g},{reg:.9g}\n")
        logger.info("trained regime %s", regime)


def _evaluate_model(cfg, g, splits, model, regime) -> ev.EvalReport:
    return ev.build_report(
        model,
        g,
        splits,
        regime=regime,
        config_hash=cfg.config_hash,
        seed=cfg.master_seed,
        k=cfg.get_int("eval.k", 10),
        list_size=cfg.get_int("eval.list_size", 100),
        probe_split=cfg.get_float("eval.probe_split", 0.8),
        min_group_pairs=cfg.get_int("eval.min_group_pairs", 10),
    )


def cmd_evaluate(cfg: ExperimentConfig, overwrite: bool = False) -> None:
    out = _out_dir(cfg)
    regimes = cfg.get_list("train.regimes", "none")
    outputs = [out / f"report_{r}.json" for r in regimes] + [out / "reports.csv"]
    _claim_outputs(outputs, overwrite)
    g = _load_experiment_graph(cfg)
    if not g.schema.sensitive_indices:
        raise ConfigError("data.sensitive must name at least one attribute for evaluation")
    splits = _split(cfg, g)
    rows = [f"# {_stamp(cfg)}", ev.CSV_HEADER]
    for regime in regimes:
        emb_path = out / f"emb_{regime}.txt"
        if not emb_path.exists():
            raise ConfigError(f"missing embeddings for regime {regime!r}: {emb_path}")
        try:
            model = load_embeddings(emb_path, g, model_kind=cfg.get("train.model", "dot-bce"))
        except ValueError as exc:
            raise ConfigError(f"embedding/graph mismatch for {regime!r}: {exc}") from None
        report = _evaluate_model(cfg, g, splits, model, regime)
        (out / f"report_{regime}.json").write_text(report.to_json(), encoding="utf-8")
        rows.extend(report.csv_rows())
        logger.info("evaluated regime %s", regime)
    (out / "reports.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def _parse_lambda_grid(cfg: ExperimentConfig) -> list[float]:
    raw = cfg.get_list("sweep.lambdas")
    if not raw:
        return list(DEFAULT_LAMBDA_GRID)
    try:
        grid = [float(x) for x in raw]
    except ValueError:
        raise ConfigError("sweep.lambdas must be a comma-separated list of numbers") from None
    if not grid:
        raise ConfigError("sweep.lambdas must not be empty")
    return grid


def cmd_sweep(cfg: ExperimentConfig, overwrite: bool = False, workers: int | None = None) -> None:
    out = _out_dir(cfg)
    csv_path = out / "sweep.csv"
    _claim_outputs([csv_path], overwrite)
    grid = _parse_lambda_grid(cfg)
    g = _load_experiment_graph(cfg)
    if not g.schema.sensitive_indices:
        raise ConfigError("data.sensitive must name at least one attribute for a sweep")
    splits = _split(cfg, g)
    table = _ratio_table(cfg, g, ["uge-c"])
    if workers is None:
        workers = cfg.get_int("sweep.workers", 1)

    def run_point(lam: float):
        train_cfg = _train_config(cfg, "uge-c", lambda_override=lam)
        model = train(g, splits, table, train_cfg)
        report = _evaluate_model(cfg, g, splits, model, f"uge-c@{lam:g}")
        return report

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_point, grid))
    else:
        reports = [run_point(lam) for lam in grid]

    attrs = sorted(reports[0].micro_f1)
    header = "lambda," + ",".join(f"micro_f1_{a}" for a in attrs) + ",ndcg_at_10"
    lines = [f"# {_stamp(cfg)}", header]
    for lam, report in zip(grid, reports):
        cells = [f"{lam:g}"] + [f"{report.micro_f1[a]:.6f}" for a in attrs]
        cells.append(f"{report.ndcg_at_10:.6f}")
        lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("swept %d lambda values", len(grid))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdebias",
        description="Config-driven experiments in debiased graph embedding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "sample a synthetic attributed graph with planted attribute effects"),
        ("train", "train embeddings under the configured regimes"),
        ("evaluate", "score trained embeddings: leakage probe, NDCG@10, DP/EO"),
        ("sweep", "train and evaluate the combined regime over a lambda grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the experiment config file")
        p.add_argument("--overwrite", action="store_true", help="allow replacing existing outputs")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=None, help="parallel lambda workers")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.command == "generate":
            cmd_generate(cfg, overwrite=args.overwrite)
        elif args.command == "train":
            cmd_train(cfg, overwrite=args.overwrite)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, overwrite=args.overwrite)
        else:
            cmd_sweep(cfg, overwrite=args.overwrite, workers=args.workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
