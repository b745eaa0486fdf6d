"""Client-side process: run the frozen privacy block locally and stream only
its outputs to the server."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Sample
from .errors import ConfigurationError, HandshakeError, ProtocolError, TransportClosed
from .nn import ModelPart, model_forward
from .protocol import (
    AckStatus,
    FeatureRecord,
    Frame,
    MsgType,
    done_frame,
    feature_body,
    hello_frame,
    parse_ack,
)
from .rng import Rng
from .transport import DEFAULT_IDLE_TIMEOUT, Connection

log = logging.getLogger(__name__)

FORWARD_CHUNK = 256


def _noise(seed: int, client_id: int, sample_id: int, shape, sigma: float) -> np.ndarray:
    rng = Rng(seed).child("noise", client_id, sample_id)
    return rng.normal(int(np.prod(shape)), 0.0, sigma).reshape(shape)


def client_features(client_part: ModelPart, samples: list[Sample]) -> np.ndarray:
    """Client-part outputs for ``samples`` (float32, batched)."""
    if not samples:
        return np.zeros((0,) + tuple(client_part.output_shape()), dtype=np.float32)
    x = np.stack([s.features for s in samples]).astype(np.float32)
    outs = [model_forward(client_part, x[i : i + FORWARD_CHUNK])[0] for i in range(0, len(x), FORWARD_CHUNK)]
    return np.concatenate(outs).astype(np.float32)


def privacy_forward(
    client_part: ModelPart,
    sample: Sample,
    noise_sigma: float = 0.0,
    client_id: int = 0,
    seed: int = 0,
    feature: np.ndarray | None = None,
) -> FeatureRecord:
    """Feature record for one sample; ``feature`` may carry a precomputed forward pass."""
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    if feature is None:
        x = np.asarray(sample.features, dtype=np.float32)
        if client_part.input_shape is not None and x.shape != tuple(client_part.input_shape):
            raise ConfigurationError(f"sample shape {x.shape} != client input {client_part.input_shape}")
        feature = model_forward(client_part, x[None])[0][0]
    feature = np.asarray(feature, dtype=np.float32)
    if noise_sigma > 0:
        noisy = feature.astype(np.float64) + _noise(seed, client_id, sample.sample_id, feature.shape, noise_sigma)
        feature = noisy.astype(np.float32)
    return FeatureRecord(client_id, sample.sample_id, feature, sample.label, noise_sigma > 0)


@dataclass
class ClientSummary:
    client_id: int
    records_sent: int
    frames_sent: int
    bytes_sent: int
    reconnects: int


class ClientRuntime:
    """Streams one client's feature records, resuming after dropped connections."""

    def __init__(
        self,
        client_id: int,
        client_part: ModelPart,
        samples: list[Sample],
        config_hash: int,
        noise_sigma: float = 0.0,
        seed: int = 0,
        max_retries: int = 5,
        idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    ):
        self.client_id = client_id
        self.client_part = client_part
        self.samples = list(samples)
        self.config_hash = config_hash
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.max_retries = max_retries
        self.idle_timeout = idle_timeout
        self._records: list[FeatureRecord] | None = None
        if not client_part.layers:
            log.warning("client %d has an empty privacy part: raw inputs leave the client", client_id)

    def records(self) -> list[FeatureRecord]:
        if self._records is None:
            feats = client_features(self.client_part, self.samples)
            self._records = [
                privacy_forward(self.client_part, s, self.noise_sigma, self.client_id, self.seed, f)
                for s, f in zip(self.samples, feats)
            ]
        return self._records

    def _handshake(self, conn: Connection) -> int:
        conn.send_frame(hello_frame(self.client_id, self.config_hash, len(self.samples)))
        frame = conn.recv_frame()
        status, next_index = parse_ack(frame)
        if status != AckStatus.OK:
            raise HandshakeError(f"server rejected client {self.client_id}: status {status}", status)
        if next_index > len(self.samples):
            raise ProtocolError("server acknowledged more records than exist")
        return next_index

    def _stream(self, conn: Connection, start: int) -> None:
        records = self.records()
        for rec in records[start:]:
            conn.send_frame(Frame(MsgType.FEATURE, self.client_id, feature_body(rec)))
            self._frames += 1
            while (ack := conn.poll_frame()) is not None:
                parse_ack(ack)
        conn.send_frame(done_frame(self.client_id, len(records)))
        while True:
            status, acked = parse_ack(conn.recv_frame())
            if status != AckStatus.OK:
                raise ProtocolError(f"server refused DONE: status {status}")
            if acked == len(records):
                return

    def run(self, connect: Callable[[], object]) -> ClientSummary:
        """Handshake, stream every record, then DONE.

        ``connect`` returns a fresh byte transport; it is called again after a
        connection failure and streaming resumes from the server's cumulative ACK.
        """
        self._frames = bytes_sent = reconnects = 0
        while True:
            conn = None
            try:
                conn = Connection(connect(), self.idle_timeout)
                start = self._handshake(conn)
                self._stream(conn, start)
                bytes_sent += conn.bytes_sent
                conn.close()
                return ClientSummary(self.client_id, len(self.samples), self._frames, bytes_sent, reconnects)
            except TransportClosed as exc:
                if conn is not None:
                    bytes_sent += conn.bytes_sent
                    conn.close()
                reconnects += 1
                if reconnects > self.max_retries:
                    raise TransportClosed(f"client {self.client_id}: retries exhausted ({exc})") from None
                log.info("client %d reconnecting after: %s", self.client_id, exc)
