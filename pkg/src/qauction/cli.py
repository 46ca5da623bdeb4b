"""Command-line pipeline: gen, train, eval, correlate, ksdist.

Exit codes: 0 success, 2 input error, 3 runtime/divergence error. Every
command takes --config/--seed/--out-dir/--workers; flags win over config-file
values, and the effective configuration is echoed into each primary output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines, dataio, neural, stats
from .errors import (
    CheckpointError,
    DivergenceError,
    InvalidInputError,
    QAuctionError,
    UnsupportedSizeError,
)
from .mechanism import check_feasibility, welfare
from .neural import ArchConfig, TrainConfig
from .simgym import GymConfig, export_host_q, q_learning
from .valuation import (
    ActionCatalog,
    CurvatureSpec,
    ValuationDataset,
    build_profile,
    enumerate_bundles,
    minmax_scale,
)


@dataclass(frozen=True)
class QLearnConfig:
    episodes: int = 400
    alpha: float = 0.2
    gamma_discount: float = 0.9
    eps_explore: float = 0.2


@dataclass(frozen=True)
class DatasetConfig:
    samples: int = 512
    per_instance: bool = False
    normalize_eps: float = 1e-8


@dataclass(frozen=True)
class ArchSection:
    d_model: int = 16
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 32


@dataclass(frozen=True)
class EvalConfig:
    regret_samples: int = 8
    batch_chunk: int = 256


@dataclass(frozen=True)
class RunConfig:
    """Merged configuration for all commands; unknown keys are rejected."""

    seed: int = 0
    gym: GymConfig = GymConfig()
    qlearn: QLearnConfig = QLearnConfig()
    curvature: CurvatureSpec = CurvatureSpec()
    dataset: DatasetConfig = DatasetConfig()
    train: TrainConfig = TrainConfig()
    arch: ArchSection = ArchSection()
    eval: EvalConfig = EvalConfig()


_SECTIONS = {
    "gym": GymConfig,
    "qlearn": QLearnConfig,
    "curvature": CurvatureSpec,
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "arch": ArchSection,
    "eval": EvalConfig,
}


def _strict_build(cls, raw: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidInputError(f"unknown keys in config section {where!r}: {unknown}")
    return cls(**raw)


def load_run_config(path: Optional[str], seed_override: Optional[int]) -> RunConfig:
    """Parse the JSON config file, apply the --seed override, and cascade the
    run seed into sections that did not set their own."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidInputError(f"config {path} must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise InvalidInputError(f"unknown top-level config keys: {unknown}")
    seed = int(raw.get("seed", 0))
    if seed_override is not None:
        seed = seed_override
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _strict_build(cls, dict(raw.get(name, {})), name)
    if "seed" not in raw.get("gym", {}):
        sections["gym"] = replace(sections["gym"], seed=seed)
    if "noise_seed" not in raw.get("curvature", {}):
        sections["curvature"] = replace(sections["curvature"], noise_seed=seed)
    if "seed" not in raw.get("train", {}):
        sections["train"] = replace(sections["train"], seed=seed)
    return RunConfig(seed=seed, **sections)


def effective_config_dict(cfg: RunConfig) -> dict:
    doc = {"seed": cfg.seed}
    for name in _SECTIONS:
        doc[name] = dataclasses.asdict(getattr(cfg, name))
    return doc


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (workers * 4) or 1)))


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _build_sample(args):
    q, spec, index, s = args
    return build_profile(q, spec, index, sample_key=s)


def cmd_gen(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.q_file:
        q, catalog = dataio.read_qmatrix(args.q_file)
    else:
        table = q_learning(
            cfg.gym,
            episodes=cfg.qlearn.episodes,
            alpha=cfg.qlearn.alpha,
            gamma_discount=cfg.qlearn.gamma_discount,
            eps_explore=cfg.qlearn.eps_explore,
        )
        q = export_host_q(table, cfg.gym)
        catalog = ActionCatalog()
    index = enumerate_bundles(catalog)
    spec = cfg.curvature
    n_samples = cfg.dataset.samples

    raws = _pmap(_build_sample, [(q, spec, index, s) for s in range(n_samples)], args.workers)
    raw = np.stack(raws)
    raw_min, raw_max = float(raw.min()), float(raw.max())
    if cfg.dataset.per_instance:
        scaled = np.stack([minmax_scale(raw[s], eps=cfg.dataset.normalize_eps) for s in range(n_samples)])
    else:
        scaled = minmax_scale(raw, eps=cfg.dataset.normalize_eps)
    dataset = ValuationDataset(
        samples=scaled,
        bundle_index=index,
        host_ids=q.host_ids,
        host_types=q.host_types,
        raw_min=raw_min,
        raw_max=raw_max,
    )

    dataio.write_qmatrix_csv(out_dir / "qmatrix.csv", q, catalog)
    dataio.write_dataset(out_dir / "dataset.json", dataset, meta={"config": effective_config_dict(cfg)})
    print(
        f"gen: wrote {dataset.num_samples} samples of {dataset.num_hosts} hosts x "
        f"{dataset.num_bundles} bundles to {out_dir / 'dataset.json'} "
        f"(raw value range [{raw_min:.4f}, {raw_max:.4f}])"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataio.read_dataset(args.dataset)
    train_cfg = cfg.train
    if args.iterations is not None:
        train_cfg = replace(train_cfg, iterations=args.iterations)
    if args.gamma is not None:
        train_cfg = replace(train_cfg, gamma=args.gamma)
    arch = ArchConfig(num_bundles=dataset.num_bundles, **dataclasses.asdict(cfg.arch))

    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as metrics_fh:

        def emit(record: neural.MetricsRecord) -> None:
            metrics_fh.write(json.dumps(record.to_json()) + "\n")
            metrics_fh.flush()

        try:
            params, records = neural.train(
                dataset.samples, train_cfg, dataset.bundle_index, arch=arch, on_metrics=emit
            )
        except DivergenceError as exc:
            print(f"train: diverged: {exc}", file=sys.stderr)
            return 3

    neural.save_checkpoint(params, out_dir / "checkpoint.json", meta={"config": effective_config_dict(cfg)})
    last = records[-1]
    print(
        f"train: {last.iteration} iterations, revenue_mean={last.revenue_mean:.4f}, "
        f"regret_mean={last.regret_mean:.5f}, loss={last.loss:.5f}; "
        f"checkpoint -> {out_dir / 'checkpoint.json'}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _oracle_sample(payload):
    values, index = payload
    sol = baselines.solve_wd(values, index)
    out = baselines.vcg_payments(values, index)
    return out.allocation, out.payments, sol.welfare


def _greedy_sample(payload):
    values, index = payload
    return baselines.greedy_allocate(values, index)


def cmd_eval(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataio.read_dataset(args.dataset)
    index = dataset.bundle_index
    samples = dataset.samples
    s_total, n, m = samples.shape
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    report: dict = {"mode": args.mode, "n_samples": int(s_total), "misreport": bool(args.misreport)}
    if args.misreport and args.mode != "neural":
        print("eval: --misreport requires --mode neural", file=sys.stderr)
        return 2

    if args.mode == "neural":
        if not args.checkpoint:
            print("eval: --checkpoint is required for neural mode", file=sys.stderr)
            return 2
        params = neural.load_checkpoint(args.checkpoint)
        if params.hyper.num_bundles != m:
            print(
                f"eval: checkpoint expects {params.hyper.num_bundles} bundles, dataset has {m}",
                file=sys.stderr,
            )
            return 2
        eval_profiles = samples
        if args.misreport:
            perturbed = np.empty_like(samples)
            chunk = cfg.eval.batch_chunk
            for lo in range(0, s_total, chunk):
                sub = samples[lo : lo + chunk]
                mis, _, _ = neural._ascend_misreports(params, sub, cfg.train, index, rng)
                perturbed[lo : lo + chunk] = mis
            eval_profiles = perturbed

        allocations = np.empty((s_total, n, m))
        payments = np.empty((s_total, n))
        chunk = cfg.eval.batch_chunk
        for lo in range(0, s_total, chunk):
            x, pay = neural.forward_batch(eval_profiles[lo : lo + chunk], params, index)
            allocations[lo : lo + chunk] = x
            payments[lo : lo + chunk] = pay
        revenues = payments.sum(axis=1)
        welfares = (allocations * samples).sum(axis=(1, 2))  # value under true profiles

        reg_count = min(cfg.eval.regret_samples, s_total)
        regrets = neural.regret_estimate(params, samples[:reg_count], cfg.train, index, rng)
        oracle_welfares = np.array(
            [baselines.solve_wd(samples[s], index).welfare for s in range(s_total)]
        )
        dominance_violations = int((revenues > oracle_welfares + 1e-9).sum())
        report.update(
            {
                "mean_revenue": float(revenues.mean()),
                "mean_welfare": float(welfares.mean()),
                "mean_regret": float(regrets.mean()),
                "regret_samples": int(reg_count),
                "oracle_welfare_mean": float(oracle_welfares.mean()),
                "revenue_dominance_violations": dominance_violations,
            }
        )
        heatmap = allocations.mean(axis=0)
    elif args.mode == "oracle":
        results = _pmap(_oracle_sample, [(samples[s], index) for s in range(s_total)], args.workers)
        allocations = np.stack([r[0] for r in results])
        payments = np.stack([r[1] for r in results])
        welfares = np.array([r[2] for r in results])
        revenues = payments.sum(axis=1)
        reg_count = min(cfg.eval.regret_samples, s_total)
        probe_regrets = []
        for s in range(reg_count):
            for i in range(min(n, 3)):
                probe_regrets.append(
                    baselines.measured_regret(
                        lambda rep: baselines.vcg_payments(rep, index), samples[s], i
                    )
                )
        report.update(
            {
                "mean_revenue": float(revenues.mean()),
                "mean_welfare": float(welfares.mean()),
                "mean_regret": float(np.mean(probe_regrets)) if probe_regrets else 0.0,
                "regret_samples": int(reg_count),
            }
        )
        heatmap = allocations.mean(axis=0)
    elif args.mode == "greedy":
        mats = _pmap(_greedy_sample, [(samples[s], index) for s in range(s_total)], args.workers)
        allocations = np.stack(mats)
        welfares = (allocations * samples).sum(axis=(1, 2))
        report.update(
            {
                "mean_revenue": 0.0,
                "mean_welfare": float(welfares.mean()),
                "mean_regret": 0.0,
                "regret_samples": 0,
            }
        )
        heatmap = allocations.mean(axis=0)
    else:
        print(f"eval: unknown mode {args.mode}", file=sys.stderr)
        return 2

    if args.mode != "greedy":
        for s in range(min(8, s_total)):
            rep = check_feasibility(allocations[s], index)
            if not rep.ok:
                print(f"eval: infeasible allocation at sample {s}: {rep}", file=sys.stderr)
                return 3

    report["config"] = effective_config_dict(cfg)
    dataio.dump_json(out_dir / "report.json", report)
    csv_text = dataio.heatmap_csv_text(dataset.host_ids, dataset.host_types, index, heatmap)
    (out_dir / "allocation.csv").write_text(csv_text)
    print(
        f"eval[{args.mode}]: revenue={report['mean_revenue']:.4f} welfare={report['mean_welfare']:.4f} "
        f"regret={report['mean_regret']:.6f} -> {out_dir / 'report.json'}"
    )
    return 0


# ---------------------------------------------------------------------------
# correlate
# ---------------------------------------------------------------------------

_GROUPS = (("all", None), ("enterprises", "Enterprise"), ("users", "User"))


def _corr_or_none(fn, scores, counts):
    try:
        res = fn(scores, counts)
        return {"coefficient": res.coefficient, "p_value": res.p_value, "n": res.n}, None
    except QAuctionError as exc:
        return None, str(exc)


def cmd_correlate(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids, types, _, matrix = dataio.read_heatmap_csv(args.allocation)
    activity = dataio.read_activity_csv(args.activity)
    missing = [h for h in ids if h not in activity]
    if missing:
        print(f"correlate: hosts missing from activity file: {missing}", file=sys.stderr)
        return 2
    scores = matrix.sum(axis=1)
    red = np.array([activity[h][0] for h in ids])
    blue = np.array([activity[h][1] for h in ids])

    rows = []
    for signal, series in (("red", red), ("blue", blue)):
        for group, want_type in _GROUPS:
            mask = np.ones(len(ids), dtype=bool) if want_type is None else np.array(
                [t == want_type for t in types]
            )
            sub_scores = scores[mask]
            sub_series = series[mask]
            row: dict = {"signal": signal, "group": group, "n": int(mask.sum())}
            pearson_res, warn_p = _corr_or_none(stats.pearson, sub_scores, sub_series)
            spearman_res, warn_s = _corr_or_none(stats.spearman, sub_scores, sub_series)
            row["pearson"] = pearson_res
            row["spearman"] = spearman_res
            warn = warn_p or warn_s
            if warn:
                row["warning"] = warn
                print(f"correlate: {signal}/{group}: {warn}", file=sys.stderr)
            rows.append(row)
    doc = {"rows": rows, "config": effective_config_dict(cfg)}
    dataio.dump_json(out_dir / "correlations.json", doc)
    for row in rows:
        p = row["pearson"]
        s = row["spearman"]
        ptxt = f"r={p['coefficient']:.3f} (p={p['p_value']:.3f})" if p else "r=undefined"
        stxt = f"rho={s['coefficient']:.3f} (p={s['p_value']:.3f})" if s else "rho=undefined"
        print(f"{row['signal']:>4} {row['group']:<12} n={row['n']:<3} {ptxt}  {stxt}")
    return 0


# ---------------------------------------------------------------------------
# ksdist
# ---------------------------------------------------------------------------

def cmd_ksdist(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        dataset = dataio.read_dataset(args.dataset)
        types = dataset.host_types
        per_host = dataset.samples.transpose(1, 0, 2).reshape(dataset.num_hosts, -1)
        source = args.dataset
    elif args.q_file:
        q, _ = dataio.read_qmatrix(args.q_file)
        types = q.host_types
        per_host = q.values
        source = args.q_file
    else:
        print("ksdist: one of --dataset or --q-file is required", file=sys.stderr)
        return 2

    groups = {}
    for name, want_type in _GROUPS:
        mask = [want_type is None or t == want_type for t in types]
        vals = per_host[np.array(mask, dtype=bool)].ravel()
        if vals.size == 0:
            print(f"ksdist: group {name!r} is empty", file=sys.stderr)
            return 2
        groups[name] = vals

    summaries = {
        name: {
            "count": int(v.size),
            "min": float(v.min()),
            "median": float(np.median(v)),
            "max": float(v.max()),
        }
        for name, v in groups.items()
    }
    pairs = []
    names = list(groups)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            statistic, p = stats.ks_two_sample(groups[names[a]], groups[names[b]])
            pairs.append({"a": names[a], "b": names[b], "statistic": statistic, "p_value": p})
    doc = {"source": str(source), "groups": summaries, "pairwise": pairs, "config": effective_config_dict(cfg)}
    dataio.dump_json(out_dir / "ks_report.json", doc)
    for pair in pairs:
        print(f"KS({pair['a']} vs {pair['b']}) = {pair['statistic']:.4f} (p={pair['p_value']:.4g})")
    for name, s in summaries.items():
        print(f"{name}: n={s['count']} min={s['min']:.3f} median={s['median']:.3f} max={s['max']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qauction", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out-dir", default="out", help="directory for output files")
        p.add_argument("--workers", type=int, default=1, help="parallel workers over samples")

    p_gen = sub.add_parser("gen", help="generate a valuation dataset")
    shared(p_gen)
    p_gen.add_argument("--q-file", default=None, help="external Q-matrix CSV/JSON instead of simgym")
    p_gen.add_argument("--samples", type=int, default=None)
    p_gen.add_argument("--curvature", choices=["additive", "submodular", "supermodular"], default=None)
    p_gen.add_argument("--theta", type=float, default=None)
    p_gen.add_argument("--per-instance", action="store_true", help="normalize each sample separately")

    p_train = sub.add_parser("train", help="train the neural mechanism")
    shared(p_train)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--iterations", type=int, default=None)
    p_train.add_argument("--gamma", type=float, default=None)

    p_eval = sub.add_parser("eval", help="evaluate a mechanism on a dataset")
    shared(p_eval)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--mode", choices=["neural", "oracle", "greedy"], required=True)
    p_eval.add_argument("--misreport", action="store_true", help="evaluate under adversarial reports")

    p_corr = sub.add_parser("correlate", help="correlate allocation scores with activity counts")
    shared(p_corr)
    p_corr.add_argument("--allocation", required=True, help="allocation heatmap CSV from eval")
    p_corr.add_argument("--activity", required=True, help="CSV host_id,red_actions,blue_actions")

    p_ks = sub.add_parser("ksdist", help="KS tests across host-type groups")
    shared(p_ks)
    p_ks.add_argument("--dataset", default=None)
    p_ks.add_argument("--q-file", default=None)
    return parser


def _apply_flag_overrides(args, cfg: RunConfig) -> RunConfig:
    if args.command == "gen":
        ds = cfg.dataset
        if args.samples is not None:
            ds = replace(ds, samples=args.samples)
        if args.per_instance:
            ds = replace(ds, per_instance=True)
        curvature = cfg.curvature
        if args.curvature is not None:
            curvature = replace(curvature, kind=args.curvature)
        if args.theta is not None:
            curvature = replace(curvature, theta=args.theta)
        cfg = replace(cfg, dataset=ds, curvature=curvature)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed)
        cfg = _apply_flag_overrides(args, cfg)
        if args.command == "gen":
            return cmd_gen(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        if args.command == "correlate":
            return cmd_correlate(args, cfg)
        if args.command == "ksdist":
            return cmd_ksdist(args, cfg)
        raise InvalidInputError(f"unknown command {args.command}")
    except (InvalidInputError, UnsupportedSizeError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
