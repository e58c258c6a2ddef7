"""Command-line experiment harness.

Verbs:
    run        one (strategy, seed) training run from a config or preset
    sweep      cross product of strategies and seeds, optionally in parallel
    summarize  aggregate finished run directories into a summary table
    gen-data   materialize a dataset into the binary cache format

The worker pool size for sweeps is capped by the FEDSEL_THREADS environment
variable (default: one worker per CPU, at most one per sweep cell).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data, engine, metrics, models, runio, selection
from .config import ExperimentConfig, list_presets, load_config, parse_config, render_config
from .errors import ConfigError, FedselError, NonFiniteLossError


def build_dataset(cfg: ExperimentConfig) -> data.FederatedDataset:
    ds = cfg.dataset
    if ds.type == "synthetic":
        spec = data.SyntheticSpec(
            alpha=ds.alpha,
            beta=ds.beta,
            clients=ds.clients,
            total_samples=ds.total_samples,
            powerlaw_exponent=ds.powerlaw_exponent,
            min_shard=ds.min_shard,
            feature_dim=ds.feature_dim,
            num_classes=ds.num_classes,
            seed=ds.seed,
        )
        return data.generate_synthetic(spec)
    if ds.type == "dirichlet-idx":
        pool = data.load_idx(ds.train_images, ds.train_labels)
        test_set = None
        if ds.test_images and ds.test_labels:
            test_set = data.load_idx(ds.test_images, ds.test_labels)
        return data.partition_dirichlet(
            pool,
            clients=ds.clients,
            alpha=ds.alpha,
            min_shard=ds.min_shard,
            seed=ds.seed,
            test_set=test_set,
            num_classes=ds.num_classes,
        )
    if ds.type == "cache":
        return data.load_cache(ds.path)
    raise ConfigError(f"dataset.type: unknown dataset type {ds.type!r}")


def build_model_spec(cfg: ExperimentConfig, dataset: data.FederatedDataset) -> models.ModelSpec:
    return models.ModelSpec(
        kind=cfg.model.kind,
        input_dim=dataset.feature_dim,
        num_classes=dataset.num_classes,
        hidden=cfg.model.hidden,
    )


def run_dir_for(out_dir: Path, strategy: str, m: int, seed: int) -> Path:
    return Path(out_dir) / f"{strategy}_m{m}_seed{seed}"


def execute_run(
    cfg: ExperimentConfig,
    strategy_name: str,
    seed: int,
    out_dir: Path,
    eval_every: int | None = None,
    checkpoint_every: int | None = None,
    dataset: data.FederatedDataset | None = None,
) -> Path:
    """Run one (strategy, seed) cell and write its artifacts.

    Returns the run directory. A non-finite-loss abort still writes the
    partial metrics CSV (with an abort marker row) and the manifest, then
    re-raises.
    """
    if dataset is None:
        dataset = build_dataset(cfg)
    spec = build_model_spec(cfg, dataset)
    m = cfg.train.resolve_m(dataset.num_clients)
    d = cfg.select.resolve_d(m, dataset.num_clients)
    strategy = selection.make_strategy(
        strategy_name,
        num_clients=dataset.num_clients,
        d=d,
        gamma=cfg.select.gamma,
        cold_start=cfg.select.cold_start,
        collect_trace=cfg.select.debug_dump,
    )

    train_cfg = engine.TrainConfig(
        rounds=cfg.train.rounds,
        tau=cfg.train.tau,
        batch_size=cfg.train.batch_size,
        eta0=cfg.train.eta0,
        lr_milestones=cfg.train.lr_milestones,
        m=cfg.train.m,
        fraction=cfg.train.fraction,
        seed=seed,
    )

    run_dir = run_dir_for(out_dir, strategy_name, m, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = runio.write_manifest(run_dir, render_config(cfg), strategy_name, seed, m)

    effective_eval = eval_every if eval_every is not None else cfg.output.eval_every
    try:
        result = engine.run(
            dataset,
            spec,
            train_cfg,
            strategy,
            eval_every=effective_eval,
            checkpoint_every=checkpoint_every,
            checkpoint_path=run_dir / "checkpoint.bin" if checkpoint_every else None,
        )
    except NonFiniteLossError as exc:
        runio.write_metrics_csv(
            run_dir / "metrics.csv", exc.records, strategy_name, seed, abort_reason=str(exc)
        )
        runio.finalize_manifest(manifest_path, status="aborted")
        raise

    runio.write_metrics_csv(run_dir / "metrics.csv", result.records, strategy_name, seed)
    final_losses = metrics.client_losses(dataset, spec, result.params)
    report = metrics.FairnessReport(
        round_index=cfg.train.rounds, jain=metrics.jain_index(final_losses), losses=final_losses
    )
    runio.write_fairness_csv(run_dir / "fairness.csv", report)
    edges, counts = metrics.loss_histogram(final_losses, cfg.output.histogram_bins)
    runio.write_histogram_csv(run_dir / "histogram.csv", edges, counts)
    models.save_params(result.params, run_dir / "final_params.bin")
    if cfg.select.debug_dump and isinstance(strategy, selection.DiscountedUcbSelection):
        runio.write_bandit_debug_csv(run_dir / "bandit_debug.csv", strategy.trace)
    runio.finalize_manifest(manifest_path, status="ok")
    return run_dir


def _sweep_cell(args: tuple) -> str:
    config_text, strategy_name, seed, out_dir, eval_every = args
    cfg = parse_config(config_text)
    run_dir = execute_run(cfg, strategy_name, seed, Path(out_dir), eval_every=eval_every)
    return str(run_dir)


def worker_count(cells: int) -> int:
    env = os.environ.get("FEDSEL_THREADS", "").strip()
    if env:
        limit = int(env)
    else:
        limit = os.cpu_count() or 1
    return max(1, min(limit, cells))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    strategy = args.strategy or cfg.select.strategy
    seed = args.seed if args.seed is not None else cfg.output.seeds[0]
    out_dir = Path(args.out) if args.out else Path(cfg.output.out_dir)
    try:
        run_dir = execute_run(
            cfg,
            strategy,
            seed,
            out_dir,
            eval_every=args.eval_every,
            checkpoint_every=args.checkpoint_every,
        )
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    strategies = (
        [s.strip() for s in args.strategies.split(",") if s.strip()]
        if args.strategies
        else [cfg.select.strategy]
    )
    seeds = (
        [int(s) for s in args.seeds.split(",") if s.strip()]
        if args.seeds
        else list(cfg.output.seeds)
    )
    for name in strategies:
        if name not in selection.STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}")
    out_dir = Path(args.out) if args.out else Path(cfg.output.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    config_text = render_config(cfg)
    cells = [(config_text, strategy, seed, str(out_dir), args.eval_every) for strategy in strategies for seed in seeds]
    workers = worker_count(len(cells))
    failures = 0
    run_dirs: list[str] = []
    if workers == 1:
        for cell in cells:
            try:
                run_dirs.append(_sweep_cell(cell))
            except NonFiniteLossError as exc:
                print(f"aborted {cell[1]} seed {cell[2]}: {exc}", file=sys.stderr)
                failures += 1
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, cell) for cell in cells]
            for cell, future in zip(cells, futures):
                try:
                    run_dirs.append(future.result())
                except NonFiniteLossError as exc:
                    print(f"aborted {cell[1]} seed {cell[2]}: {exc}", file=sys.stderr)
                    failures += 1

    if run_dirs:
        rows = runio.summarize_runs([Path(p) for p in sorted(run_dirs)])
        runio.write_summary_csv(out_dir / "summary.csv", rows)
        print(runio.format_summary_text(rows))
    return 1 if failures else 0


def cmd_summarize(args) -> int:
    rows = runio.summarize_runs([Path(p) for p in args.run_dirs], threshold=args.threshold)
    if args.out:
        runio.write_summary_csv(args.out, rows)
    print(runio.format_summary_text(rows))
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    dataset = build_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_cache(dataset, out)
    sizes = dataset.sizes
    print(
        f"cached {dataset.num_clients} clients, {int(sizes.sum())} train samples, "
        f"{len(dataset.test_set)} test samples -> {out}"
    )
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one (strategy, seed) experiment")
    p_run.add_argument("--config", required=True, help=f"config path or preset ({', '.join(list_presets()) if _presets_available() else 'none'})")
    p_run.add_argument("--strategy", default=None, choices=selection.STRATEGY_NAMES)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--eval-every", type=int, default=None)
    p_run.add_argument("--checkpoint-every", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a strategies x seeds grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--strategies", default=None, help="comma-separated strategy names")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated integer seeds")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--eval-every", type=int, default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_sum = sub.add_parser("summarize", help="summarize finished run directories")
    p_sum.add_argument("run_dirs", nargs="+")
    p_sum.add_argument("--out", default=None)
    p_sum.add_argument("--threshold", type=float, default=None)
    p_sum.set_defaults(func=cmd_summarize)

    p_gen = sub.add_parser("gen-data", help="materialize a dataset cache")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_data)
    return parser


def _presets_available() -> bool:
    try:
        list_presets()
        return True
    except Exception:
        return False


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
