#!/usr/bin/env python3
"""
SAN command-line interface

Subcommands: run, sweep-noise, sweep-unknown, grid, gradcheck, gen-data, score.
Every config key can also be set with a dotted flag, e.g. ``--train.lr0 0.1``.

Exit codes: 0 success, 1 failed check or runtime error, 2 configuration
error, 3 every seed diverged.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

from colorama import Fore, Style, init

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from san.errors import ConfigurationError, SANError  # noqa: E402

# Initialize colorama for colored output
init(autoreset=True)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

# Environment settings are validated on import
try:
    from config.experiment import ExperimentConfig, apply_overrides, load_experiment_config  # noqa: E402
    from domain_data import gen_unda_dataset, write_feature_file  # noqa: E402
    from experiment_runner import ExperimentRunner, emit_plots  # noqa: E402
    from san.metrics import ScoreReport, eval_counts, load_predictions  # noqa: E402
except ConfigurationError as e:
    print(f"{Fore.RED}Configuration error: {e}", file=sys.stderr)
    sys.exit(EXIT_CONFIG)

# Named flag -> dotted config key
FLAG_KEYS = {
    "seed": "experiment.seeds",
    "variant": "experiment.variant",
    "out": "experiment.output_dir",
    "split": "data.split",
    "feature_file": "data.feature_file",
    "rho_s": "noise.rho_s",
    "p_view": "noise.p_view",
    "alpha": "scl.alpha",
    "lam": "train.lambda",
    "beta": "train.beta",
    "nu_y": "scl.nu_y",
    "nu_z": "scl.nu_z",
    "top_n": "train.top_n",
    "epochs": "train.epochs",
}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='Experiment config file (INI or YAML)')
    parser.add_argument('--seed', help='Seed or comma-separated seed list')
    parser.add_argument('--variant', choices=['san', 'san-wo-scl', 'san-wo-aio', 'san-w-cl'])
    parser.add_argument('--split', help='Split preset, e.g. visda-like')
    parser.add_argument('--feature-file', help='Comma-separated feature file instead of synthetic data')
    parser.add_argument('--rho-s', type=float, help='Source label-noise rate')
    parser.add_argument('--p-view', type=float, help='View-noise rate')
    parser.add_argument('--alpha', type=float, help='Augmentation prior (default 0.5)')
    parser.add_argument('--lambda', dest='lam', type=float, help='Contrastive weight (default 0.1)')
    parser.add_argument('--beta', type=float, help='Open-set loss weight (default 1.0)')
    parser.add_argument('--nu-y', type=float, help='Backbone kernel degrees of freedom (default 100)')
    parser.add_argument('--nu-z', type=float, help='Head kernel degrees of freedom (default 10)')
    parser.add_argument('--top-n', type=int, help='Top-n softmax size (default 20)')
    parser.add_argument('--epochs', type=int, help='Training epochs')
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--workers', type=int, help='Parallel grid/sweep cells')
    parser.add_argument('--verbose', action='store_true', help='Log to the console too')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Soft contrastive learning with All-in-One classifier: experiments and checks'
    )
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    run_parser = subparsers.add_parser('run', help='Train and evaluate over the configured seeds')
    _add_common(run_parser)
    run_parser.add_argument('--save-checkpoint', action='store_true', help='Write params_seed<k>.sanp')

    noise_parser = subparsers.add_parser('sweep-noise', help='Variants across label-noise rates')
    _add_common(noise_parser)
    noise_parser.add_argument('--rho-list', default='0,0.2,0.4', help='Comma-separated noise rates')
    noise_parser.add_argument('--variants', default='san,san-wo-aio', help='Comma-separated variants')

    unknown_parser = subparsers.add_parser('sweep-unknown', help='Scores across target-private class counts')
    _add_common(unknown_parser)
    unknown_parser.add_argument('--tgt-private-list', default='1,3,6',
                                help='Comma-separated target-private class counts')

    grid_parser = subparsers.add_parser('grid', help='Grid search over lambda, beta, alpha')
    _add_common(grid_parser)
    grid_parser.add_argument('--grid', action='append', default=[], metavar='KEY=V1,V2',
                             help='Grid axis (lambda, beta, alpha or a dotted key); repeatable')

    check_parser = subparsers.add_parser('gradcheck', help='Finite-difference gradient checks')
    check_parser.add_argument('--configs', type=int, default=50, help='Random network configurations')
    check_parser.add_argument('--seed', type=int, default=0)
    check_parser.add_argument('--step', type=float, default=1e-5)
    check_parser.add_argument('--threshold', type=float, default=1e-4)
    check_parser.add_argument('--out', help='Directory for the run log')
    check_parser.add_argument('--verbose', action='store_true')

    data_parser = subparsers.add_parser('gen-data', help='Write a synthetic benchmark as a feature file')
    _add_common(data_parser)
    data_parser.add_argument('--file', default='features.csv', help='File name inside --out')

    score_parser = subparsers.add_parser('score', help='Score a predictions file offline')
    score_parser.add_argument('predictions', help='Lines of true_label,is_private,prediction')
    return parser


def parse_dotted(extras: List[str]) -> Dict[str, str]:
    """Collect ``--section.key value`` / ``--section.key=value`` pairs"""
    overrides = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith('--') or '.' not in token:
            raise ConfigurationError(f"unrecognized argument: {token}")
        key = token[2:]
        if '=' in key:
            key, value = key.split('=', 1)
        else:
            if i + 1 >= len(extras):
                raise ConfigurationError(f"missing value for {token}")
            value = extras[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


def resolve_config(args: argparse.Namespace, extras: List[str]) -> ExperimentConfig:
    """Config file (or defaults), then dotted overrides, then named flags"""
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig.from_values({})
    overrides = parse_dotted(extras)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, 'save_checkpoint', False):
        overrides["experiment.save_checkpoint"] = "true"
    return apply_overrides(cfg, overrides)


def _csv_list(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f"cannot parse list: {text!r}")


def _print_row(row: Dict):
    status = f"{Fore.RED}DIVERGED" if row["diverged"] else f"{Fore.GREEN}ok"
    cell = ", ".join(f"{k}={v}" for k, v in row.items()
                     if k not in ("diverged", "completed", "h_score", "balance_h_score", "a_c", "a_t"))
    print(f"  {cell}: H={row['h_score']:.4f} B={row['balance_h_score']:.4f} [{status}{Style.RESET_ALL}]")


def cmd_run(args, cfg: ExperimentConfig) -> int:
    runner = ExperimentRunner(cfg.output_dir, args.workers, args.verbose or None)
    artifacts = runner.run_experiment(cfg)
    emit_plots(artifacts, cfg.output_dir)
    print(f"{Style.BRIGHT}Variant {artifacts.variant}{Style.RESET_ALL}")
    for seed, report in sorted(artifacts.reports.items()):
        print(f"  seed {seed}: H={report.h_score:.4f} B={report.balance_h_score:.4f} "
              f"A_c={report.a_c:.4f} A_t={report.a_t:.4f}")
    for seed, reason in sorted(artifacts.diverged.items()):
        print(f"  {Fore.RED}seed {seed} diverged: {reason}")
    if artifacts.all_diverged:
        print(f"{Fore.RED}All seeds diverged")
        return EXIT_DIVERGED
    mean = artifacts.aggregate["mean"]
    print(f"{Fore.GREEN}Mean H={mean['h_score']:.4f} B={mean['balance_h_score']:.4f} "
          f"over {len(artifacts.reports)} seed(s); reports in {cfg.output_dir}")
    return EXIT_OK


def cmd_sweep_noise(args, cfg: ExperimentConfig) -> int:
    runner = ExperimentRunner(cfg.output_dir, args.workers, args.verbose or None)
    rows = runner.run_noise_sweep(cfg, _csv_list(args.rho_list), _csv_list(args.variants, str))
    print(f"{Style.BRIGHT}Label-noise sweep")
    for row in rows:
        _print_row(row)
    return EXIT_DIVERGED if all(r["diverged"] for r in rows) else EXIT_OK


def cmd_sweep_unknown(args, cfg: ExperimentConfig) -> int:
    runner = ExperimentRunner(cfg.output_dir, args.workers, args.verbose or None)
    rows = runner.run_unknown_sweep(cfg, _csv_list(args.tgt_private_list, int))
    print(f"{Style.BRIGHT}Unknown-proportion sweep")
    for row in rows:
        _print_row(row)
    return EXIT_DIVERGED if all(r["diverged"] for r in rows) else EXIT_OK


def parse_grid(specs: List[str]) -> Dict[str, List[float]]:
    grid = {}
    for spec in specs:
        if '=' not in spec:
            raise ConfigurationError(f"grid axis must look like KEY=V1,V2: {spec!r}")
        key, values = spec.split('=', 1)
        grid[key.strip()] = _csv_list(values)
    if not grid:
        raise ConfigurationError("grid needs at least one --grid axis")
    return grid


def cmd_grid(args, cfg: ExperimentConfig) -> int:
    runner = ExperimentRunner(cfg.output_dir, args.workers, args.verbose or None)
    result = runner.grid_search(cfg, parse_grid(args.grid))
    print(f"{Style.BRIGHT}Grid search ({len(result.rows)} cells)")
    for row in result.rows:
        _print_row(row)
    if result.best is None:
        print(f"{Fore.RED}Every cell diverged")
        return EXIT_DIVERGED
    print(f"{Fore.GREEN}Best: " + ", ".join(f"{k}={v}" for k, v in result.best.items()
                                             if '.' in k) + f" (B={result.best['balance_h_score']:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    runner = ExperimentRunner(args.out, verbose=args.verbose or None)
    reports = runner.gradcheck_suite(args.configs, args.seed, args.step, args.threshold)
    worst: Dict[str, float] = {}
    for report in reports:
        for term, err in report.errors.items():
            worst[term] = max(worst.get(term, 0.0), err)
    failed = False
    for term, err in worst.items():
        ok = err < args.threshold
        failed |= not ok
        tag = f"{Fore.GREEN}PASS" if ok else f"{Fore.RED}FAIL"
        print(f"[{tag}{Style.RESET_ALL}] {term}: max relative error {err:.3e} over {len(reports)} configs")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    if cfg.split is None:
        raise ConfigurationError("gen-data needs a synthetic split, not a feature file")
    seed = cfg.seeds[0]
    dataset = gen_unda_dataset(cfg.split, cfg.shift, seed)
    path = write_feature_file(dataset, Path(cfg.output_dir) / args.file)
    print(f"{Fore.GREEN}Wrote {len(dataset.source)} source and {len(dataset.target)} target rows to {path}")
    return EXIT_OK


def cmd_score(args) -> int:
    predictions, truths = load_predictions(args.predictions)
    report = ScoreReport.from_counts(eval_counts(predictions, truths))
    sys.stdout.write(report.to_json())
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    if extras and args.command in ('gradcheck', 'score'):
        parser.error(f"unrecognized arguments: {' '.join(extras)}")

    try:
        if args.command == 'gradcheck':
            return cmd_gradcheck(args)
        if args.command == 'score':
            return cmd_score(args)
        cfg = resolve_config(args, extras)
        handlers = {
            'run': cmd_run,
            'sweep-noise': cmd_sweep_noise,
            'sweep-unknown': cmd_sweep_unknown,
            'grid': cmd_grid,
            'gen-data': cmd_gen_data,
        }
        return handlers[args.command](args, cfg)
    except ConfigurationError as e:
        print(f"{Fore.RED}Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SANError as e:
        print(f"{Fore.RED}Error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
