"""Command-line surface: experiment, gen-data, serve, client, evaluate.

Exit codes: 0 success, 2 configuration error, 3 protocol/transport error,
4 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .data import ClientDataset, DataError, load_csv
from .experiment import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    load_config,
    load_model,
    run_experiment,
    save_model,
    write_gen_data,
)
from .fed import FederationConfig, ProtocolError
from .metrics import UndefinedMetricError, evaluate
from .nn import init_params
from .runner import client_loop, server_loop
from .transport import SocketChannel, SocketServerEndpoint, TransportError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_DATA = 4

DEFAULT_SOCKET_TIMEOUT = 60.0


def _parse_host_port(text: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected HOST:PORT, got {text!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise ConfigError(f"invalid port in {text!r}") from None
    if not 0 <= port <= 65535:
        raise ConfigError(f"port out of range in {text!r}")
    return host, port


def _load_experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "rounds", None) is not None:
        cfg = replace(cfg, num_rounds=args.rounds)
    if getattr(args, "local_epochs", None) is not None:
        cfg = replace(cfg, local_epochs=args.local_epochs)
    if getattr(args, "averaging", None) is not None:
        cfg = replace(cfg, averaging_mode=args.averaging)
    if getattr(args, "baseline_epochs", None) is not None:
        cfg = replace(cfg, baseline_epochs=args.baseline_epochs)
    return cfg


def _cmd_experiment(args) -> int:
    cfg = _load_experiment_config(args)
    result = run_experiment(cfg, args.out)
    print(f"wrote {result.out_dir}/auroc.csv, auprc.csv, markdown tables and manifest")
    print(f"config sha256: {config_hash(cfg)}")
    print(result.report.to_markdown("auroc"))
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = _load_experiment_config(args)
    if args.clients is not None:
        if cfg.data.kind != "synthetic":
            raise ConfigError("--clients only applies to synthetic data configs")
        spec = cfg.data.synthetic.with_num_clients(args.clients)
        cfg = replace(cfg, data=replace(cfg.data, synthetic=spec))
    paths = write_gen_data(cfg, args.out)
    for path in paths:
        print(path)
    return EXIT_OK


def _build_federation_config(cfg: ExperimentConfig, timeout: float | None) -> FederationConfig:
    if cfg.data.kind == "synthetic":
        expected = cfg.data.synthetic.client_ids()
    else:
        expected = tuple(client_id for client_id, _ in cfg.data.csv)
    return FederationConfig(
        model=cfg.model,
        num_rounds=cfg.num_rounds,
        local_epochs=cfg.local_epochs,
        averaging_mode=cfg.averaging_mode,
        train=replace(cfg.train, seed=cfg.seed),
        expected_clients=expected,
        round_timeout=timeout,
        submit_final_epoch=cfg.submit_final_epoch,
    )


def _cmd_serve(args) -> int:
    cfg = _load_experiment_config(args)
    host, port = _parse_host_port(args.listen)
    fed_cfg = _build_federation_config(cfg, args.timeout)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    initial = init_params(cfg.model, cfg.seed)
    with SocketServerEndpoint(host, port) as endpoint:
        print(f"listening on {endpoint.address[0]}:{endpoint.address[1]}", flush=True)
        final, history = server_loop(fed_cfg, endpoint, initial)
    save_model(out_dir / "fl.fmdl", final, fed_cfg.num_rounds)
    lines = ["round,client_id,num_train_samples,best_val_loss"]
    for record in history:
        for update in record.updates:
            lines.append(
                f"{record.round_index},{update.client_id},"
                f"{update.num_train_samples},{update.best_val_loss!r}"
            )
    (out_dir / "fl_server_history.csv").write_text("\n".join(lines) + "\n")
    print(f"federation complete after {len(history)} rounds; model in {out_dir}/fl.fmdl")
    return EXIT_OK


def _cmd_client(args) -> int:
    host, port = _parse_host_port(args.connect)
    data_dir = Path(args.data_dir)
    splits = {}
    for split_name in ("train", "val", "test"):
        path = data_dir / f"{args.client_id}_{split_name}.csv"
        if not path.exists():
            raise DataError(f"missing dataset file {path}")
        splits[split_name] = tuple(load_csv(path))
    dataset = ClientDataset(args.client_id, splits["train"], splits["val"], splits["test"])
    channel = SocketChannel.connect(host, port, timeout=args.timeout)
    rounds = client_loop(
        channel,
        args.client_id,
        dataset,
        submit_final_epoch=args.submit_final_epoch,
        timeout=args.timeout,
    )
    print(f"client {args.client_id}: completed {rounds} local rounds")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model_params, _ = load_model(args.model)
    test = load_csv(args.test)
    if not test:
        raise DataError(f"test set {args.test} is empty")
    try:
        auroc, auprc = evaluate(model_params, test)
    except UndefinedMetricError as exc:
        raise DataError(f"metric undefined for {args.test}: {exc}") from None
    print(f"AUROC: {100.0 * auroc:.2f}")
    print(f"AUPRC: {100.0 * auprc:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Federated averaging at desk scale: experiments, data, serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        if out_default is not None:
            p.add_argument("--out", type=Path, default=Path(out_default),
                           help="output directory")

    p = sub.add_parser("experiment", help="train the five models and emit the tables")
    common(p, out_default="runs/experiment")
    p.add_argument("--rounds", type=int, default=None, help="federated rounds override")
    p.add_argument("--local-epochs", dest="local_epochs", type=int, default=None)
    p.add_argument("--averaging", choices=("uniform", "sample_weighted"), default=None)
    p.add_argument("--baseline-epochs", dest="baseline_epochs", type=int, default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("gen-data", help="write the synthetic corpus as CSV files")
    common(p, out_default="data")
    p.add_argument("--clients", type=int, default=None, help="number of clients")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("serve", help="run the federation server over a socket")
    common(p, out_default="runs/serve")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--timeout", type=float, default=DEFAULT_SOCKET_TIMEOUT,
                   help="round timeout in seconds")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("client", help="run one federation client over a socket")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--client-id", dest="client_id", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True, type=Path,
                   help="directory with <client-id>_{train,val,test}.csv")
    p.add_argument("--timeout", type=float, default=DEFAULT_SOCKET_TIMEOUT)
    p.add_argument("--submit-final-epoch", dest="submit_final_epoch",
                   action="store_true",
                   help="send last-epoch weights instead of the best-val checkpoint")
    p.set_defaults(func=_cmd_client)

    p = sub.add_parser("evaluate", help="print AUROC/AUPRC of a saved model on a CSV")
    p.add_argument("--model", required=True, type=Path, help=".fmdl model file")
    p.add_argument("--test", required=True, type=Path, help="test CSV")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, TransportError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
