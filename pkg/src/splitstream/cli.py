"""Command line entry points: experiments, report comparison, data generation,
and standalone TCP server/client processes."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .client import ClientRuntime
from .data import ZScore, write_classification_dir, write_regression_csv
from .errors import SplitStreamError
from .harness import ExperimentConfig, _write_manifest, compare_reports, load_samples, run_experiment
from .metrics import write_epochs_csv
from .models import save_weights, split_model
from .rng import Rng
from .server import SplitServer, TrainState, train_server_model
from .transport import TcpListener, tcp_connect

log = logging.getLogger("splitstream")


def _config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.from_file(path) if path else ExperimentConfig()


def cmd_run(args) -> int:
    config = _config(args.config)
    overrides = {k: v for k, v in (("out", args.out), ("seed", args.seed)) if v is not None}
    config = replace(config, **overrides)
    report = run_experiment(config)
    print(json.dumps({"out": str(config.output_dir()), **report.final}, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    rows = compare_reports(args.reports, args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    if args.task == "cls":
        path = write_classification_dir(args.out, args.n, args.seed)
    else:
        path = write_regression_csv(args.out, args.n, args.seed)
    print(path)
    return 0


def cmd_server(args) -> int:
    config = _config(args.config)
    spec = config.model_spec()
    split = split_model(spec)
    server = SplitServer(spec.config_hash, config.queue_capacity, idle_timeout=config.idle_timeout)
    listener = TcpListener(args.listen)
    host, port = listener.address
    log.info("listening on %s:%d for %d clients (config %016x)", host, port, args.expect_clients, spec.config_hash)
    listener.serve(server.accept)
    try:
        data = server.collect(range(args.expect_clients), timeout=args.timeout)
    finally:
        listener.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out / "dataset_manifest.csv", data.provenance)
    state = TrainState(
        split.server_part, spec.epochs, spec.batch_size, spec.learning_rate, spec.loss,
        Rng(spec.seed).child("shuffle"),
    )
    try:
        train_server_model(state, data)
    finally:
        write_epochs_csv(out / "epochs.csv", [e.to_dict() for e in state.log])
    save_weights(out / "model.weights", spec, split.full().parameters())
    print(json.dumps({"out": str(out), "records": len(data), "epochs": state.epoch}))
    return 0


def cmd_client(args) -> int:
    config = _config(args.config)
    if args.data is not None:
        config = replace(config, data=args.data)
    spec = config.model_spec()
    split = split_model(spec)
    samples = load_samples(config)
    if np.ndim(samples[0].features) == 1:
        # tabular inputs are standardized with the client's own statistics
        samples = ZScore.fit(samples).apply(samples)
    seed = config.seed if args.seed is None else args.seed
    runtime = ClientRuntime(
        args.client_id, split.client_part, samples, spec.config_hash, args.noise_sigma, seed,
        config.max_retries, config.idle_timeout,
    )
    summary = runtime.run(lambda: tcp_connect(args.server))
    print(json.dumps(summary.__dict__))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitstream", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="tabulate final metrics of several runs")
    cmp.add_argument("reports", nargs="+", help="run directories or metrics.json files")
    cmp.add_argument("--out", default="comparison")
    cmp.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    gen.add_argument("--task", choices=["cls", "reg"], required=True)
    gen.add_argument("--n", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    srv = sub.add_parser("server", help="accept clients over TCP and train the server part")
    srv.add_argument("--listen", default="127.0.0.1:7700")
    srv.add_argument("--config")
    srv.add_argument("--expect-clients", type=int, required=True)
    srv.add_argument("--out", default="server_out")
    srv.add_argument("--timeout", type=float, default=None, help="seconds to wait for every DONE")
    srv.set_defaults(func=cmd_server)

    cli = sub.add_parser("client", help="stream one client's privacy features to a server")
    cli.add_argument("--server", required=True)
    cli.add_argument("--client-id", type=int, required=True)
    cli.add_argument("--config")
    cli.add_argument("--data", help="image folder or CSV; the synthetic set when omitted")
    cli.add_argument("--noise-sigma", type=float, default=0.0)
    cli.add_argument("--seed", type=int)
    cli.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-data" and args.n is None:
        args.n = 600 if args.task == "cls" else 6000
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SplitStreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
