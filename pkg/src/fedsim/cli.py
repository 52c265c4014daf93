"""fedsim command line.

Exit codes: 0 success (target reached), 2 target missed, 1 usage or runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import sys
from pathlib import Path

from . import detmetrics, experiment
from .experiment import ExperimentConfig
from .fedavg import FedRun
from .partition import DENTAL_CLASS_NAMES
from .session import (DEFAULT_TIMEOUT, ServerConfig, SessionAborted, SessionError,
                      client_session, parse_address, server_session)
from .wire import DEFAULT_PORT, WireError, encode_params

EXIT_OK, EXIT_ERROR, EXIT_MISSED = 0, 1, 2

log = logging.getLogger("fedsim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    d = ExperimentConfig()
    p.add_argument("--config", type=Path, help="key=value file; keys are flag names")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--clients", type=_positive_int, default=d.clients)
    p.add_argument("--local-epochs", type=_positive_int, default=d.local_epochs)
    p.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--target-metric", type=_unit_interval, default=d.target_metric)
    p.add_argument("--max-rounds", type=_positive_int, default=d.max_rounds)
    p.add_argument("--partition", choices=["iid", "label-skew"], default="iid")
    p.add_argument("--shards-per-client", type=_positive_int, default=d.shards_per_client)
    p.add_argument("--dataset-size", type=_positive_int, default=d.dataset_size)
    p.add_argument("--eval-size", type=_positive_int, default=d.eval_size)
    p.add_argument("--workers", type=_positive_int, default=d.workers,
                   help="threads for client training in simulation")
    p.add_argument("--balanced", action="store_true",
                   help="equal class counts instead of the dental class mix")


def _add_run_outputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, help="round CSV path (default: stdout)")
    p.add_argument("--model-out", type=Path, help="write final parameters (wire format)")
    p.add_argument("--plot-data", type=Path, help="write 'round metric' series")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="in-process federated run")
    _add_experiment_flags(p)
    _add_run_outputs(p)

    p = sub.add_parser("centralized", help="single-model SGD with the client-0 seed schedule")
    _add_experiment_flags(p)
    _add_run_outputs(p)

    p = sub.add_parser("sweep-e", help="rounds-to-target for several E values")
    _add_experiment_flags(p)
    p.add_argument("--e-values", default="1,5,10")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("serve", help="networked server")
    _add_experiment_flags(p)
    _add_run_outputs(p)
    p.add_argument("--bind", default=os.environ.get("FEDSIM_BIND", f"127.0.0.1:{DEFAULT_PORT}"))
    p.add_argument("--timeout-secs", type=float, default=DEFAULT_TIMEOUT)

    p = sub.add_parser("client", help="networked client")
    _add_experiment_flags(p)
    p.add_argument("--connect", default=f"127.0.0.1:{DEFAULT_PORT}")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--timeout-secs", type=float, default=DEFAULT_TIMEOUT)

    p = sub.add_parser("eval", help="evaluate YOLO prediction files")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--nms", action="store_true")
    p.add_argument("--nms-threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="CSV report path")

    p = sub.add_parser("partition-stats", help="per-client class histogram")
    _add_experiment_flags(p)
    p.add_argument("--out", type=Path)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Turn ``--config FILE`` entries into flags placed before the user's own.

    argparse keeps the last occurrence, so explicit flags still win.
    """
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return argv
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    try:
        text = known.config.read_text(encoding="utf-8")
    except OSError as exc:
        parser.error(f"cannot read config file: {exc}")
    extra: list[str] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            parser.error(f"{known.config}:{lineno}: expected key=value")
        key, value = key.strip().lstrip("-"), value.strip()
        if key in ("nms", "verbose", "balanced"):
            if value.lower() in ("1", "true", "yes"):
                extra.append(f"--{key}")
            continue
        extra += [f"--{key}", value]
    # insert right after the subcommand so the file's flags parse in its namespace
    cmd_pos = next((i for i, a in enumerate(argv) if not a.startswith("-")), None)
    if cmd_pos is None:
        return argv
    return argv[:cmd_pos + 1] + extra + argv[cmd_pos + 1:]


def _config_from(args) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            clients=args.clients, local_epochs=args.local_epochs, batch_size=args.batch_size,
            learning_rate=args.learning_rate, target_metric=args.target_metric,
            max_rounds=args.max_rounds, partition=args.partition.replace("-", "_"),
            shards_per_client=args.shards_per_client, dataset_size=args.dataset_size,
            eval_size=args.eval_size, seed=args.seed, workers=args.workers,
            balanced=args.balanced)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _emit_run(args, run: FedRun) -> int:
    print(f"# global_metric = {experiment.METRIC_LABEL}", file=sys.stderr)
    _write(args.out, experiment.rounds_csv(run))
    if args.model_out:
        args.model_out.parent.mkdir(parents=True, exist_ok=True)
        args.model_out.write_bytes(encode_params(run.final.params))
    if args.plot_data:
        _write(args.plot_data, experiment.plot_data(run))
    status = "reached" if run.reached_target else "missed"
    print(f"target {run.target_metric:g} {status} after {run.rounds} rounds "
          f"(final metric {run.final.metric:.4f})", file=sys.stderr)
    return EXIT_OK if run.reached_target else EXIT_MISSED


def cmd_simulate(args) -> int:
    return _emit_run(args, experiment.simulate(_config_from(args)))


def cmd_centralized(args) -> int:
    return _emit_run(args, experiment.centralized(_config_from(args)))


def cmd_sweep_e(args) -> int:
    cfg = _config_from(args)
    try:
        e_values = [int(v) for v in args.e_values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--e-values must be comma-separated integers: {args.e_values!r}") from None
    if not e_values or min(e_values) < 1:
        raise UsageError("--e-values needs at least one positive integer")
    rows = experiment.sweep_e(cfg, e_values)
    print(f"# rounds to reach {experiment.METRIC_LABEL} = {cfg.target_metric:g}", file=sys.stderr)
    _write(args.out, experiment.sweep_csv(rows))
    return EXIT_OK if all(r.reached_target for r in rows) else EXIT_MISSED


def cmd_serve(args) -> int:
    cfg = _config_from(args)
    setup = experiment.build(cfg)
    host, port = parse_address(args.bind, DEFAULT_PORT)
    scfg = ServerConfig(cfg.clients, cfg.target_metric, cfg.max_rounds, args.timeout_secs)
    with socket.create_server((host, port), reuse_port=False) as listener:
        log.info("listening on %s:%d for %d clients", host, port, cfg.clients)
        run = server_session(listener, scfg, setup.eval_set, setup.initial)
    return _emit_run(args, run)


def cmd_client(args) -> int:
    cfg = _config_from(args)
    try:
        client = experiment.build(cfg).make_client(args.client_id)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    final = client_session(parse_address(args.connect, DEFAULT_PORT), client, args.timeout_secs)
    best_metric = client.best[1] if client.best else float("nan")
    print(f"client {client.client_id}: final round {final.round}, global metric "
          f"{final.metric:.4f}, best local metric {best_metric:.4f}", file=sys.stderr)
    return EXIT_OK if final.metric >= cfg.target_metric else EXIT_MISSED


def cmd_eval(args) -> int:
    if not 0 <= args.iou_threshold <= 1 or not 0 <= args.nms_threshold <= 1:
        raise UsageError("thresholds must lie in [0, 1]")
    report = detmetrics.evaluate(args.pred_dir, args.gt_dir, args.iou_threshold,
                                 args.nms, args.nms_threshold)
    sys.stdout.write(report.to_table(DENTAL_CLASS_NAMES))
    if args.out:
        _write(args.out, report.to_csv())
    return EXIT_OK


def cmd_partition_stats(args) -> int:
    header, rows = experiment.partition_table(_config_from(args))
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "centralized": cmd_centralized,
    "sweep-e": cmd_sweep_e,
    "serve": cmd_serve,
    "client": cmd_client,
    "eval": cmd_eval,
    "partition-stats": cmd_partition_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_apply_config_file(parser, argv))
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fedsim {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SessionAborted as exc:
        print(f"fedsim {args.command}: aborted by peer (Abort): {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (SessionError, WireError, OSError, ValueError) as exc:
        print(f"fedsim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
