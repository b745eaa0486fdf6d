"""Central server: admit client feature streams through a bounded queue,
assemble them into one training set, and train the server-side layers."""
from __future__ import annotations

import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    HandshakeError,
    ProtocolError,
    SplitStreamError,
    TransportClosed,
)
from .nn import LossKind, ModelPart, forward_backward, loss_elements, model_forward, sgd_step
from .protocol import (
    AckStatus,
    FeatureRecord,
    MsgType,
    ack_frame,
    parse_done,
    parse_feature,
    parse_hello,
)
from .rng import Rng
from .transport import DEFAULT_IDLE_TIMEOUT, Connection

log = logging.getLogger(__name__)


class AssemblyTimeout(SplitStreamError):
    pass


class FeatureQueue:
    """Bounded multi-producer / single-consumer buffer of feature records.

    Duplicate (client_id, sample_id) pairs are dropped; producers block while
    the buffer is full.
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ConfigurationError("queue capacity must be positive")
        self.capacity = capacity
        self._items: deque[FeatureRecord] = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._seen: dict[int, set[int]] = {}
        self._admitted: Counter = Counter()
        self._done: dict[int, int] = {}
        self.duplicates = 0
        self.dequeued = 0

    def put(self, record: FeatureRecord, timeout: float | None = None) -> bool:
        """True if admitted, False if it was a duplicate."""
        cid = record.client_id
        with self._not_full:
            seen = self._seen.setdefault(cid, set())
            if record.sample_id in seen:
                self.duplicates += 1
                return False
            if cid in self._done:
                raise ProtocolError(f"record from client {cid} after DONE")
            if not self._not_full.wait_for(lambda: len(self._items) < self.capacity, timeout):
                raise TimeoutError("feature queue full")
            # a concurrent session may have admitted it while we waited
            if record.sample_id in seen:
                self.duplicates += 1
                return False
            seen.add(record.sample_id)
            self._admitted[cid] += 1
            self._items.append(record)
            self._not_empty.notify()
            return True

    def get(self, timeout: float | None = None) -> FeatureRecord | None:
        with self._not_empty:
            if not self._not_empty.wait_for(lambda: self._items, timeout):
                return None
            item = self._items.popleft()
            self.dequeued += 1
            self._not_full.notify()
            return item

    def mark_done(self, client_id: int, total: int) -> None:
        with self._lock:
            if self._admitted[client_id] != total:
                raise ProtocolError(
                    f"client {client_id} declared {total} records but {self._admitted[client_id]} were admitted"
                )
            self._done[client_id] = total
            self._not_empty.notify_all()

    def admitted(self, client_id: int) -> int:
        with self._lock:
            return self._admitted[client_id]

    @property
    def admitted_total(self) -> int:
        with self._lock:
            return sum(self._admitted.values())

    def is_done(self, client_id: int) -> bool:
        with self._lock:
            return client_id in self._done

    def done_clients(self) -> set[int]:
        with self._lock:
            return set(self._done)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


def ingest(queue: FeatureQueue, record: FeatureRecord, timeout: float | None = None) -> bool:
    return queue.put(record, timeout)


@dataclass
class AssembledDataset:
    features: np.ndarray  # N x feature dims
    labels: np.ndarray  # N, float32
    provenance: list[tuple[int, int]]  # (client_id, sample_id)

    def __len__(self) -> int:
        return len(self.provenance)

    def client_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(c for c, _ in self.provenance).items()))


def assemble_records(records: list[FeatureRecord]) -> AssembledDataset:
    """Concatenate records in canonical (client_id, sample_id) order."""
    records = sorted(records, key=lambda r: (r.client_id, r.sample_id))
    shapes = Counter(r.feature.shape for r in records)
    if len(shapes) > 1:
        common = shapes.most_common(1)[0][0]
        offenders = [(r.client_id, r.sample_id, r.feature.shape) for r in records if r.feature.shape != common]
        raise ConfigurationError(f"heterogeneous feature dims; expected {common}, offenders {offenders[:10]}")
    if not records:
        return AssembledDataset(np.zeros((0,), np.float32), np.zeros(0, np.float32), [])
    return AssembledDataset(
        np.stack([r.feature for r in records]).astype(np.float32),
        np.array([r.label for r in records], dtype=np.float32),
        [(r.client_id, r.sample_id) for r in records],
    )


def assemble_dataset(queue: FeatureQueue, expected_clients, timeout: float | None = None) -> AssembledDataset:
    """Drain ``queue`` until every expected client has sent DONE."""
    expected = set(expected_clients)
    deadline = None if timeout is None else time.monotonic() + timeout
    records = []
    while True:
        rec = queue.get(timeout=0.05)
        if rec is not None:
            if rec.client_id in expected:
                records.append(rec)
            continue
        if expected <= queue.done_clients() and len(queue) == 0:
            break
        if deadline is not None and time.monotonic() > deadline:
            missing = sorted(expected - queue.done_clients())
            raise AssemblyTimeout(f"clients {missing} never sent DONE")
    return assemble_records(records)


class SplitServer:
    """Accepts client sessions and feeds their records into one FeatureQueue."""

    def __init__(
        self,
        config_hash: int,
        capacity: int = 4096,
        ack_every: int = 64,
        idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    ):
        self.config_hash = config_hash
        self.queue = FeatureQueue(capacity)
        self.ack_every = ack_every
        self.idle_timeout = idle_timeout
        self.errors: list[str] = []
        self.rejected_sessions = 0
        self._threads: list[threading.Thread] = []

    def accept(self, transport) -> threading.Thread:
        t = threading.Thread(target=self.serve_connection, args=(transport,), daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def serve_connection(self, transport) -> None:
        conn = Connection(transport, self.idle_timeout)
        try:
            self._session(conn)
        except TransportClosed as exc:
            log.info("session ended: %s", exc)
        except ProtocolError as exc:
            self.errors.append(str(exc))
            log.warning("protocol error: %s", exc)
        finally:
            conn.close()

    def _session(self, conn: Connection) -> None:
        hello = conn.recv_frame()
        cid = hello.client_id
        try:
            config_hash, _count = parse_hello(hello)
            if config_hash != self.config_hash:
                raise HandshakeError(
                    f"client {cid} config hash {config_hash:016x} != {self.config_hash:016x}",
                    AckStatus.CONFIG_MISMATCH,
                )
        except HandshakeError as exc:
            self.rejected_sessions += 1
            conn.send_frame(ack_frame(cid, exc.reason or AckStatus.BAD_HELLO, 0))
            raise
        conn.send_frame(ack_frame(cid, AckStatus.OK, self.queue.admitted(cid)))
        since_ack = 0
        while True:
            frame = conn.recv_frame()
            if frame.client_id != cid:
                raise ProtocolError(f"client id changed mid-session ({cid} -> {frame.client_id})")
            if frame.msg_type is MsgType.FEATURE:
                admitted = self.queue.put(parse_feature(cid, frame.body))
                since_ack += 1
                if not admitted or since_ack >= self.ack_every:
                    conn.send_frame(ack_frame(cid, AckStatus.OK, self.queue.admitted(cid)))
                    since_ack = 0
            elif frame.msg_type is MsgType.DONE:
                total = parse_done(frame)
                if not self.queue.is_done(cid):
                    self.queue.mark_done(cid, total)
                elif self.queue.admitted(cid) != total:
                    raise ProtocolError(f"client {cid} repeated DONE with a different count")
                conn.send_frame(ack_frame(cid, AckStatus.OK, self.queue.admitted(cid)))
                return
            else:
                raise ProtocolError(f"unexpected {frame.msg_type.name} frame")

    def collect(self, expected_clients, timeout: float | None = None) -> AssembledDataset:
        return assemble_dataset(self.queue, expected_clients, timeout)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float | None = None
    val_loss: float | None = None
    val_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class TrainState:
    part: ModelPart
    epochs: int
    batch_size: int
    learning_rate: float
    loss: LossKind
    rng: Rng
    frozen: frozenset[str] = frozenset()
    epoch: int = 0
    log: list[EpochLog] = field(default_factory=list)

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.part.parameters() if k not in self.frozen]

    @property
    def is_classification(self) -> bool:
        return LossKind(self.loss) is LossKind.BINARY_CROSSENTROPY


def _first_bad(y, out, kind, idx, provenance) -> str:
    for row, i in enumerate(idx):
        try:
            loss_elements(y[row : row + 1], out[row : row + 1], kind)
        except DataError as exc:
            where = provenance[i] if provenance else int(i)
            return f"record {where}: {exc}"
    return "unknown record"


def train_epoch(state: TrainState, features: np.ndarray, labels: np.ndarray, provenance=None) -> EpochLog:
    n = len(features)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    perm = state.rng.permutation(n)
    params = state.part.parameters()
    trainable = state.trainable
    total = 0.0
    correct = 0
    for start in range(0, n, state.batch_size):
        idx = perm[start : start + state.batch_size]
        xb = features[idx]
        yb = labels[idx].reshape(-1, 1)
        try:
            value, grads, out = forward_backward(state.part, xb, yb, state.loss, set(trainable))
        except DataError:
            out = model_forward(state.part, xb)[0]
            raise DataError(_first_bad(yb, out, state.loss, idx, provenance)) from None
        sgd_step(params, grads, state.learning_rate, keys=trainable)
        total += value * len(idx)
        if state.is_classification:
            correct += int(np.sum((out.reshape(-1) >= 0.5) == (yb.reshape(-1) == 1)))
    state.epoch += 1
    entry = EpochLog(state.epoch, total / n, 100.0 * correct / n if state.is_classification else None)
    state.log.append(entry)
    return entry


def train_server_model(state: TrainState, data: AssembledDataset, on_epoch=None):
    """Run the remaining epochs of ``state`` over ``data``.

    ``on_epoch(state, entry)`` may annotate each log entry (validation curves).
    Returns (parameters, per-epoch log).
    """
    while state.epoch < state.epochs:
        entry = train_epoch(state, data.features, data.labels, data.provenance)
        if on_epoch is not None:
            on_epoch(state, entry)
    return state.part.parameters(), state.log


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    predictions: np.ndarray
    labels: np.ndarray
    per_sample_losses: np.ndarray
    sample_ids: list[int]


def predict(parts: list[ModelPart], x: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = []
    for i in range(0, len(x), chunk):
        h = x[i : i + chunk]
        for part in parts:
            h = model_forward(part, h)[0]
        outs.append(h)
    return np.concatenate(outs) if outs else np.zeros((0, 1), np.float32)


def evaluate(client_part: ModelPart, server_part: ModelPart, samples, loss: LossKind) -> Evaluation:
    """Compose client and server parts over raw evaluation samples."""
    if not samples:
        raise DataError("no evaluation samples")
    x = np.stack([s.features for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.float32)
    yhat = predict([client_part, server_part], x).reshape(-1)
    if yhat.shape != y.shape:
        raise ConfigurationError(f"model emits {yhat.shape} outputs for {y.shape} labels")
    per = loss_elements(y, yhat, loss)
    return Evaluation(yhat.astype(np.float64), y.astype(np.float64), per, [s.sample_id for s in samples])
