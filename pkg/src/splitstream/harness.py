"""Experiment orchestration: partition data across imbalanced clients, run the
split pipeline end to end, baselines, and report comparison."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .client import ClientRuntime, ClientSummary, privacy_forward
from .data import (
    Sample,
    ZScore,
    generate_classification,
    generate_regression,
    load_image_dataset,
    load_tabular_csv,
)
from .errors import ConfigurationError
from .metrics import (
    MetricsReport,
    Task,
    classification_metrics,
    export_feature_image,
    regression_metrics,
    write_epochs_csv,
)
from .models import ModelKind, ModelSpec, build_model, instantiate, save_weights, split_model
from .nn import LossKind, ModelPart, loss_elements
from .rng import Rng
from .server import AssembledDataset, EpochLog, SplitServer, TrainState, evaluate, train_epoch, train_server_model
from .transport import TcpListener, channel_pair, tcp_connect

log = logging.getLogger(__name__)

OUT_ENV = "SPLITSTREAM_OUT"


class Mode(str, Enum):
    SPATIO_TEMPORAL = "spatio_temporal"
    SINGLE_CLIENT = "single_client"
    FEDAVG_LITE = "fedavg_lite"


class TransportKind(str, Enum):
    IN_PROCESS = "in_process"
    TCP = "tcp"


@dataclass
class ExperimentConfig:
    """Every field has a default; ``None`` hyperparameters fall back to the model's defaults."""

    model: ModelKind = ModelKind.COVID_CNN
    scale: str = "1/4"
    seed: int = 0
    split_index: int = 1
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    client_ratios: tuple[str, ...] = ("7/10", "2/10", "1/10")
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    mode: Mode = Mode.SPATIO_TEMPORAL
    single_fraction: float = 0.1
    rounds: int | None = None
    local_epochs: int = 5
    transport: TransportKind = TransportKind.IN_PROCESS
    noise_sigma: float = 0.0
    data: str | None = None  # image directory or CSV; None -> bundled synthetic set
    data_size: int | None = None
    data_seed: int = 0
    out: str = "runs/experiment"
    label: str = ""
    queue_capacity: int = 4096
    feature_images: int = 4
    max_retries: int = 5
    idle_timeout: float = 30.0

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.mode = Mode(self.mode)
        self.transport = TransportKind(self.transport)
        self.client_ratios = tuple(str(r) for r in self.client_ratios)
        ratios = self.ratios
        if not ratios or any(r <= 0 for r in ratios):
            raise ConfigurationError("client ratios must be positive")
        if abs(float(sum(ratios)) - 1.0) > 1e-9:
            raise ConfigurationError(f"client ratios sum to {float(sum(ratios))}, not 1")
        for name in ("val_fraction", "test_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if self.val_fraction + self.test_fraction >= 1:
            raise ConfigurationError("val_fraction + test_fraction must be < 1")
        if not 0 < self.single_fraction <= 1:
            raise ConfigurationError("single_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be positive")

    @property
    def ratios(self) -> list[Fraction]:
        try:
            return [Fraction(r) for r in self.client_ratios]
        except (ValueError, ZeroDivisionError):
            raise ConfigurationError(f"bad client ratios {self.client_ratios}") from None

    @property
    def task(self) -> Task:
        return Task.REGRESSION if self.model is ModelKind.CHOLESTEROL_MLP else Task.CLASSIFICATION

    def model_spec(self) -> ModelSpec:
        spec = build_model(self.model, self.scale, self.seed, self.split_index)
        overrides = {
            k: v
            for k, v in (("epochs", self.epochs), ("batch_size", self.batch_size), ("learning_rate", self.learning_rate))
            if v is not None
        }
        return replace(spec, **overrides)

    def output_dir(self) -> Path:
        root = os.environ.get(OUT_ENV)
        return Path(root) / Path(self.out).name if root else Path(self.out)

    def run_label(self) -> str:
        if self.label:
            return self.label
        if self.mode is Mode.SINGLE_CLIENT:
            return f"single_{self.single_fraction:g}"
        return self.mode.value

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# data


def load_samples(config: ExperimentConfig) -> list[Sample]:
    if config.data is None:
        if config.task is Task.REGRESSION:
            return generate_regression(config.data_size or 6000, config.data_seed)
        samples = generate_classification(config.data_size or 600, config.data_seed)
        size = config.model_spec().input_shape[0]
        if samples[0].features.shape[0] != size:
            raise ConfigurationError(
                f"synthetic images are {samples[0].features.shape[0]}px but the model expects {size}px; "
                "pick a scale that matches or point 'data' at an image folder"
            )
        return samples
    path = Path(config.data)
    if config.task is Task.REGRESSION:
        return load_tabular_csv(path)
    h, w, _ = config.model_spec().input_shape
    return load_image_dataset(path, (h, w))


@dataclass
class DataPartition:
    validation: list[int]
    test: list[int]
    client_shards: list[list[int]]

    def all_indices(self) -> list[int]:
        return self.validation + self.test + [i for s in self.client_shards for i in s]


def shard_sizes(pool: int, ratios) -> list[int]:
    """Floor allocation, empty shards bumped to one, remainder to the largest ratio."""
    ratios = [Fraction(r) for r in ratios]
    sizes = [max(1, int(r * pool)) for r in ratios]
    largest = max(range(len(ratios)), key=lambda i: (ratios[i], -i))
    sizes[largest] += pool - sum(sizes)
    if sizes[largest] < 1:
        raise ConfigurationError(f"{pool} pooled samples cannot give {len(ratios)} nonempty shards")
    return sizes


def split_dataset(n: int, config: ExperimentConfig, seed: int | None = None) -> DataPartition:
    """Shuffle indices 0..n-1; validation, test, then the client pool by ratio."""
    if n < 10:
        raise ConfigurationError(f"dataset of {n} samples is too small to partition (need >= 10)")
    seed = config.seed if seed is None else seed
    perm = [int(i) for i in Rng(seed).child("partition").permutation(n)]
    n_val = int(Fraction(str(config.val_fraction)) * n)
    n_test = int(Fraction(str(config.test_fraction)) * n)
    if n_val < 1 or n_test < 1:
        raise ConfigurationError("validation and test sets must be nonempty")
    pool = perm[n_val + n_test :]
    shards, start = [], 0
    for size in shard_sizes(len(pool), config.ratios):
        shards.append(pool[start : start + size])
        start += size
    return DataPartition(perm[:n_val], perm[n_val : n_val + n_test], shards)


def active_shards(partition: DataPartition, config: ExperimentConfig) -> list[list[int]]:
    """Index lists of the clients that take part, in client_id order."""
    if config.mode is Mode.SINGLE_CLIENT:
        pool = [i for s in partition.client_shards for i in s]
        k = int(Fraction(str(config.single_fraction)) * len(pool))
        if k < 1:
            raise ConfigurationError("single-client fraction leaves the client without data")
        return [pool[:k]]
    return partition.client_shards


@dataclass
class PreparedData:
    clients: list[list[Sample]]
    validation: list[Sample]
    test: list[Sample]
    normalization: dict | None = None


def prepare_data(samples: list[Sample], config: ExperimentConfig) -> PreparedData:
    partition = split_dataset(len(samples), config)
    pick = lambda idx: [samples[i] for i in sorted(idx)]  # noqa: E731
    clients = [pick(s) for s in active_shards(partition, config)]
    val, test = pick(partition.validation), pick(partition.test)
    norm = None
    if config.task is Task.REGRESSION:
        # fitted on the training samples actually in play
        z = ZScore.fit([s for c in clients for s in c])
        clients = [z.apply(c) for c in clients]
        val, test = z.apply(val), z.apply(test)
        norm = z.to_dict()
    return PreparedData(clients, val, test, norm)


# --------------------------------------------------------------------------
# split pipeline


class _Links:
    """Opens client connections to the server over the configured transport."""

    def __init__(self, server: SplitServer, kind: TransportKind):
        self.server = server
        self.listener = None
        if kind is TransportKind.TCP:
            self.listener = TcpListener(("127.0.0.1", 0))
            self.listener.serve(server.accept)

    def connect(self):
        if self.listener is not None:
            return tcp_connect(self.listener.address)
        client_end, server_end = channel_pair()
        self.server.accept(server_end)
        return client_end

    def close(self):
        if self.listener is not None:
            self.listener.close()


def stream_clients(
    split, clients: list[list[Sample]], config: ExperimentConfig, connect_override=None
) -> tuple[AssembledDataset, list[ClientSummary], SplitServer]:
    """Run every client concurrently against one server and assemble the result."""
    server = SplitServer(split.config_hash, config.queue_capacity, idle_timeout=config.idle_timeout)
    links = _Links(server, config.transport)
    connect = connect_override(links.connect) if connect_override else links.connect
    runtimes = [
        ClientRuntime(
            cid, split.client_part, shard, split.config_hash, config.noise_sigma, config.seed,
            config.max_retries, config.idle_timeout,
        )
        for cid, shard in enumerate(clients)
    ]
    try:
        with ThreadPoolExecutor(max_workers=len(runtimes)) as pool:
            futures = [pool.submit(rt.run, connect) for rt in runtimes]
            data = server.collect(range(len(runtimes)), timeout=max(60.0, config.idle_timeout * 2))
            summaries = [f.result() for f in futures]
    finally:
        links.close()
    return data, summaries, server


def _classification_final(ev, loss: LossKind) -> dict[str, float]:
    return {
        "accuracy": classification_metrics(ev.predictions, ev.labels),
        "loss": float(np.mean(ev.per_sample_losses)),
    }


def _regression_final(ev, loss: LossKind) -> dict[str, float]:
    return {**regression_metrics(ev.labels, ev.predictions), "loss": float(np.mean(ev.per_sample_losses))}


def _final_metrics(config: ExperimentConfig, ev, loss: LossKind) -> dict[str, float]:
    if config.task is Task.CLASSIFICATION:
        return _classification_final(ev, loss)
    return _regression_final(ev, loss)


def _report_losses(config: ExperimentConfig, ev) -> list[float]:
    """Per-sample losses for the distribution export: BCE for classification,
    squared log error for regression."""
    if config.task is Task.REGRESSION:
        return [float(v) for v in loss_elements(ev.labels, ev.predictions, LossKind.MSLE)]
    return [float(v) for v in ev.per_sample_losses]


def _validation_hook(config: ExperimentConfig, client_part: ModelPart, val: list[Sample], loss: LossKind):
    def on_epoch(state: TrainState, entry: EpochLog) -> None:
        ev = evaluate(client_part, state.part, val, loss)
        entry.val_loss = float(np.mean(ev.per_sample_losses))
        if config.task is Task.CLASSIFICATION:
            entry.val_accuracy = classification_metrics(ev.predictions, ev.labels)

    return on_epoch


def _write_manifest(path: Path, provenance) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "sample_id"])
        w.writerows(provenance)


def _export_features(out: Path, split, clients, config: ExperimentConfig) -> None:
    if len(split.feature_shape) != 3 or not clients or not clients[0]:
        return
    for sample in clients[0][: config.feature_images]:
        rec = privacy_forward(split.client_part, sample, config.noise_sigma, 0, config.seed)
        export_feature_image(rec, 0, out / "features" / f"client0_sample{sample.sample_id:05d}_c0.pgm")


def run_experiment(config: ExperimentConfig, samples: list[Sample] | None = None) -> MetricsReport:
    """One full run; writes every output file under ``config.output_dir()``."""
    if config.mode is Mode.FEDAVG_LITE:
        return run_baseline_fedavg(config, samples)
    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    spec = config.model_spec()
    prepared = prepare_data(samples if samples is not None else load_samples(config), config)
    split = split_model(spec)
    data, summaries, server = stream_clients(split, prepared.clients, config)
    _write_manifest(out / "dataset_manifest.csv", data.provenance)

    state = TrainState(
        split.server_part, spec.epochs, spec.batch_size, spec.learning_rate, spec.loss,
        Rng(spec.seed).child("shuffle"),
    )
    hook = _validation_hook(config, split.client_part, prepared.validation, spec.loss)
    try:
        train_server_model(state, data, on_epoch=hook)
    finally:
        write_epochs_csv(out / "epochs.csv", [e.to_dict() for e in state.log])
    save_weights(out / "model.weights", spec, split.full().parameters())

    ev = evaluate(split.client_part, split.server_part, prepared.test, spec.loss)
    report = MetricsReport(
        config.task,
        per_epoch=[e.to_dict() for e in state.log],
        final=_final_metrics(config, ev, spec.loss),
        per_sample_losses=_report_losses(config, ev),
        label=config.run_label(),
        extra={
            "mode": config.mode.value,
            "model": spec.name,
            "seed": config.seed,
            "split_index": spec.split_index,
            "config_hash": f"{spec.config_hash:016x}",
            "clients": {str(k): v for k, v in data.client_counts().items()},
            "feature_shape": list(split.feature_shape),
            "n_train": len(data),
            "records_sent": sum(s.records_sent for s in summaries),
        },
    )
    if prepared.normalization is not None:
        report.extra["normalization"] = prepared.normalization
    report.write(out, ev.sample_ids)
    _export_features(out, split, prepared.clients, config)
    return report


# --------------------------------------------------------------------------
# federated averaging baseline


def average_parameters(param_sets: list[dict[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    """Weighted mean in float64, stored back as float32."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size != len(param_sets) or w.sum() <= 0:
        raise ConfigurationError("need one positive weight per parameter set")
    w = w / w.sum()
    return {
        k: np.sum([wi * p[k].astype(np.float64) for wi, p in zip(w, param_sets)], axis=0).astype(np.float32)
        for k in param_sets[0]
    }


def _as_dataset(samples: list[Sample], client_id: int) -> AssembledDataset:
    return AssembledDataset(
        np.stack([s.features for s in samples]).astype(np.float32),
        np.array([s.label for s in samples], dtype=np.float32),
        [(client_id, s.sample_id) for s in samples],
    )


def run_baseline_fedavg(config: ExperimentConfig, samples: list[Sample] | None = None) -> MetricsReport:
    """Each client trains a full model copy for ``local_epochs`` per round;
    the server replaces the global model with the shard-size-weighted mean."""
    config = replace(config, mode=Mode.FEDAVG_LITE)
    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    spec = config.model_spec()
    prepared = prepare_data(samples if samples is not None else load_samples(config), config)
    rounds = config.rounds if config.rounds is not None else max(1, spec.epochs // config.local_epochs)
    global_model = instantiate(spec)
    shards = [_as_dataset(c, cid) for cid, c in enumerate(prepared.clients)]
    sizes = [len(s) for s in shards]
    per_epoch = []
    root = Rng(spec.seed).child("fedavg")
    for r in range(rounds):
        local_params, local_losses = [], []
        for cid, shard in enumerate(shards):
            state = TrainState(
                global_model.copy(), config.local_epochs, spec.batch_size, spec.learning_rate, spec.loss,
                root.child("round", r, "client", cid),
            )
            while state.epoch < state.epochs:
                entry = train_epoch(state, shard.features, shard.labels, shard.provenance)
            local_params.append(state.part.parameters())
            local_losses.append(entry.loss)
        for k, v in average_parameters(local_params, sizes).items():
            global_model.parameters()[k][...] = v
        ev = evaluate(_identity(spec), global_model, prepared.validation, spec.loss)
        row = {
            "epoch": (r + 1) * config.local_epochs,
            "loss": float(np.average(local_losses, weights=sizes)),
            "val_loss": float(np.mean(ev.per_sample_losses)),
        }
        if config.task is Task.CLASSIFICATION:
            row["val_accuracy"] = classification_metrics(ev.predictions, ev.labels)
        per_epoch.append(row)
    write_epochs_csv(out / "epochs.csv", per_epoch)
    save_weights(out / "model.weights", spec, global_model.parameters())

    ev = evaluate(_identity(spec), global_model, prepared.test, spec.loss)
    report = MetricsReport(
        config.task,
        per_epoch=per_epoch,
        final=_final_metrics(config, ev, spec.loss),
        per_sample_losses=_report_losses(config, ev),
        label=config.run_label(),
        extra={
            "mode": config.mode.value,
            "model": spec.name,
            "seed": config.seed,
            "rounds": rounds,
            "local_epochs": config.local_epochs,
            "config_hash": f"{spec.config_hash:016x}",
            "clients": {str(i): n for i, n in enumerate(sizes)},
            "n_train": sum(sizes),
        },
    )
    report.write(out, ev.sample_ids)
    return report


def _identity(spec: ModelSpec) -> ModelPart:
    return ModelPart([], [], tuple(spec.input_shape))


# --------------------------------------------------------------------------
# comparison

_COLUMNS = {
    Task.CLASSIFICATION: ["accuracy", "loss"],
    Task.REGRESSION: ["msle", "rmsle", "smape"],
}


def _unique_labels(reports: list[MetricsReport]) -> list[str]:
    seen: dict[str, int] = {}
    labels = []
    for i, r in enumerate(reports):
        base = r.label or f"run{i}"
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def compare_reports(reports, out=None) -> list[dict]:
    """Final-metric table (differences against the first report) and merged curves."""
    reports = [r if isinstance(r, MetricsReport) else MetricsReport.load(r) for r in reports]
    if len(reports) < 2:
        raise ConfigurationError("need at least two reports to compare")
    tasks = {Task(r.task) for r in reports}
    if len(tasks) > 1:
        raise ConfigurationError(f"cannot compare mixed task types {sorted(t.value for t in tasks)}")
    cols = _COLUMNS[tasks.pop()]
    labels = _unique_labels(reports)
    base = reports[0].final
    rows = []
    for label, r in zip(labels, reports):
        row = {"run": label}
        for c in cols:
            row[c] = r.final.get(c)
        for c in cols:
            a, b = r.final.get(c), base.get(c)
            row[f"delta_{c}"] = None if a is None or b is None else a - b
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        header = ["run"] + cols + [f"delta_{c}" for c in cols]
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, header, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        (out / "comparison.md").write_text(_markdown(header, rows))
        _write_curves(out / "curves.csv", labels, reports, "loss")
        if "accuracy" in cols:
            _write_curves(out / "accuracy_curves.csv", labels, reports, "val_accuracy")
    return rows


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)


def _markdown(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(r[h]) for h in header) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _write_curves(path: Path, labels, reports, key: str) -> None:
    epochs = sorted({e["epoch"] for r in reports for e in r.per_epoch})
    lookup = [{e["epoch"]: e.get(key) for e in r.per_epoch} for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + labels)
        for ep in epochs:
            w.writerow([ep] + [_fmt(l.get(ep)) for l in lookup])
