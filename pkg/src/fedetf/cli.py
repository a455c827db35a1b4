"""Command-line entry point: ``fedetf run | compare | validate``.

Run outputs, all under ``output_dir``:

metrics.csv     ``round,selected_clients,mean_local_loss,test_accuracy,wall_ms``;
                one row per round, flushed as soon as the round finishes;
                selected client ids are joined with ``;``
manifest.json   ``manifest_version``, resolved ``config``, ``seed``,
                ``code_version``, ``overrides``, ``config_digest``,
                ``initial_accuracy``, ``rounds_completed``, ``eval_window``,
                ``final_trailing_mean`` and ``status``; it can be passed back
                as ``--config`` to rerun the same experiment
checkpoints/    ``round_NNNNN.npz`` every ``checkpoint_every`` rounds
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import COMPARE_AXES, FedConfig, parse_config, parse_overrides
from .errors import ConfigError, IdxError, TrainingError
from .experiment import Experiment, load_datasets
from .metrics import trailing_mean

log = logging.getLogger("fedetf")

MANIFEST_VERSION = 1
CSV_HEADER = ("round", "selected_clients", "mean_local_loss", "test_accuracy", "wall_ms")


def _check_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output_dir {str(directory)!r} cannot be created: {exc.strerror}") from None
    if not os.access(directory, os.W_OK | os.X_OK):
        raise ConfigError(f"output_dir {str(directory)!r} is not writable")


def _manifest(config: FedConfig, overrides: dict, **extra) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "code_version": __version__,
        "seed": config.seed,
        "config_digest": config.digest(),
        "overrides": overrides,
        "config": config.to_dict(),
        **extra,
    }


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def run_config(config: FedConfig, overrides: dict | None = None) -> dict:
    """Execute one experiment and write its outputs; returns the manifest."""
    out_dir = Path(config.output_dir)
    _check_writable(out_dir)
    train, test = load_datasets(config)
    exp = Experiment(config, train, test)
    accuracies = []
    status = "running"
    manifest_path = out_dir / "manifest.json"

    def manifest():
        return _manifest(
            config,
            overrides or {},
            status=status,
            initial_accuracy=exp.initial_accuracy,
            rounds_completed=exp.round,
            eval_window=config.eval_window,
            final_trailing_mean=trailing_mean(accuracies, config.eval_window) if accuracies else None,
        )

    _write_json(manifest_path, manifest())
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        fh.flush()
        try:
            while not exp.finished:
                report = exp.step()
                accuracies.append(report.test_accuracy)
                writer.writerow([
                    report.round,
                    ";".join(str(c) for c in report.selected),
                    repr(report.mean_local_loss),
                    repr(report.test_accuracy),
                    f"{report.wall_ms:.3f}",
                ])
                fh.flush()
                log.info("round %d: accuracy %.4f loss %.4f", report.round, report.test_accuracy,
                         report.mean_local_loss)
                if config.checkpoint_every and report.round % config.checkpoint_every == 0:
                    exp.save_checkpoint(out_dir / "checkpoints" / f"round_{report.round:05d}.npz")
        except BaseException:
            status = "failed"
            _write_json(manifest_path, manifest())
            raise
    status = "complete"
    result = manifest()
    _write_json(manifest_path, result)
    return result


def _differing_keys(a: FedConfig, b: FedConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db[k] and k not in COMPARE_AXES and k not in ("seed", "output_dir"))


def compare_configs(a: FedConfig, b: FedConfig, trials: int) -> dict:
    """Paired runs of ``a`` and ``b`` over seeds ``a.seed .. a.seed + trials - 1``.

    Differences are ``b - a`` in trailing-window accuracy.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    bad = _differing_keys(a, b)
    if bad:
        raise ConfigError(f"configs differ outside the comparable axes {COMPARE_AXES}: {', '.join(bad)}")
    rows = []
    for offset in range(trials):
        seed = a.seed + offset
        pair = []
        for cfg in (a, b):
            cfg = cfg.replace(seed=seed)
            train, test = load_datasets(cfg)
            exp = Experiment(cfg, train, test)
            accs = []
            while not exp.finished:
                accs.append(exp.step().test_accuracy)
            pair.append(trailing_mean(accs, cfg.eval_window) if accs else exp.initial_accuracy)
        rows.append({"seed": seed, "a": pair[0], "b": pair[1], "difference": pair[1] - pair[0]})
    diffs = [r["difference"] for r in rows]
    summary = {"trials": trials, "per_seed": rows, "mean_difference": float(np.mean(diffs))}
    if trials > 1:
        summary["std_difference"] = float(np.std(diffs, ddof=1))
    return summary


def _load(path, sets) -> tuple[FedConfig, dict]:
    overrides = parse_overrides(sets)
    return parse_config(path, overrides), overrides


def _cmd_run(args) -> int:
    config, overrides = _load(args.config, args.set)
    manifest = run_config(config, overrides)
    print(f"wrote {config.output_dir}/metrics.csv; trailing-{config.eval_window} accuracy "
          f"{manifest['final_trailing_mean']}")
    return 0


def _cmd_compare(args) -> int:
    a, _ = _load(args.a, args.set)
    b, _ = _load(args.b, args.set)
    summary = compare_configs(a, b, args.trials)
    for row in summary["per_seed"]:
        print(f"seed {row['seed']}: a={row['a']:.4f} b={row['b']:.4f} b-a={row['difference']:+.4f}")
    line = f"mean b-a over {summary['trials']} seed(s): {summary['mean_difference']:+.4f}"
    if "std_difference" in summary:
        line += f" (std {summary['std_difference']:.4f})"
    print(line)
    if args.json:
        print(json.dumps(summary, indent=2))
    return 0


def _cmd_validate(args) -> int:
    config, _ = _load(args.config, args.set)
    print(f"ok: {args.config} (digest {config.digest()})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedetf", description="Federated training with a frozen simplex ETF classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, help="YAML config or run manifest")
    run.set_defaults(func=_cmd_run)

    compare = sub.add_parser("compare", help="paired comparison of two configs over several seeds")
    compare.add_argument("--a", required=True, help="reference config")
    compare.add_argument("--b", required=True, help="treatment config")
    compare.add_argument("--trials", type=int, default=3)
    compare.add_argument("--json", action="store_true", help="also print the summary as JSON")
    compare.set_defaults(func=_cmd_compare)

    validate = sub.add_parser("validate", help="check a config without running it")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=_cmd_validate)

    for p in (run, compare, validate):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedetf: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fedetf: {exc}", file=sys.stderr)
        return 2
    except IdxError as exc:
        print(f"fedetf: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"fedetf: training failed: {exc}", file=sys.stderr)
        return 4
    except KeyboardInterrupt:
        print("fedetf: interrupted", file=sys.stderr)
        return 130
