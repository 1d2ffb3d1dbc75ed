"""Parties, the in-process network and one training round of split VFL.

A round is BatchRequest (server to both clients), two EmbeddingUploads in
either order, then two GradientDownloads. Every message crosses the
:class:`Network` as bytes, so the server only ever sees what the codec
carries.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..autodiff import Graph, Tensor
from ..encoders import EmbeddingBundle, Source
from ..fusion import AlignmentError
from ..models import ClientModel, SplitModel
from .messages import (
    BatchRequest,
    EmbeddingUpload,
    GradientDownload,
    Kind,
    ProtocolMessage,
    deserialize,
    serialize,
)

CLIENT_ROLES = (Source.IMAGE_CLIENT, Source.TABULAR_CLIENT)


class ProtocolStateError(RuntimeError):
    """A message arrived that the round state machine does not allow."""


class _Phase(enum.Enum):
    AWAIT_REQUEST = "await_request"
    AWAIT_UPLOADS = "await_uploads"
    AWAIT_DOWNLOADS = "await_downloads"


class RoundStateMachine:
    """Accepts BatchRequest, then both uploads (any order), then both downloads, per round."""

    def __init__(self, first_round: int = 0):
        self.round = first_round
        self.phase = _Phase.AWAIT_REQUEST
        self._seen: set[Source] = set()
        self._ids: list[int] = []

    def accept(self, msg: ProtocolMessage, recipient: Source | None) -> bool:
        """Validate ``msg``; return True when it completes the round."""
        if msg.round != self.round:
            raise ProtocolStateError(f"message for round {msg.round} while in round {self.round}")
        if self.phase is _Phase.AWAIT_REQUEST:
            if msg.kind is not Kind.BATCH_REQUEST or msg.sender is not Source.SERVER:
                raise ProtocolStateError(f"expected BatchRequest from server, got {msg.kind.name} from {msg.sender.name}")
            self._ids = list(msg.batch_ids)
            self._seen = set()
            self.phase = _Phase.AWAIT_UPLOADS
            return False
        if self.phase is _Phase.AWAIT_UPLOADS:
            if msg.kind is not Kind.EMBEDDING_UPLOAD or msg.sender not in CLIENT_ROLES or msg.sender in self._seen:
                raise ProtocolStateError(f"unexpected {msg.kind.name} from {msg.sender.name} while awaiting uploads")
            self._check_ids(msg)
            self._seen.add(msg.sender)
            if len(self._seen) == 2:
                self.phase = _Phase.AWAIT_DOWNLOADS
                self._seen = set()
            return False
        if msg.kind is not Kind.GRADIENT_DOWNLOAD or msg.sender is not Source.SERVER:
            raise ProtocolStateError(f"unexpected {msg.kind.name} from {msg.sender.name} while awaiting downloads")
        if recipient not in CLIENT_ROLES or recipient in self._seen:
            raise ProtocolStateError(f"duplicate or misaddressed GradientDownload to {recipient}")
        self._check_ids(msg)
        self._seen.add(recipient)
        if len(self._seen) == 2:
            self.round += 1
            self.phase = _Phase.AWAIT_REQUEST
            self._seen = set()
            return True
        return False

    def _check_ids(self, msg: ProtocolMessage) -> None:
        if list(msg.batch_ids) != self._ids:
            raise AlignmentError(f"{msg.kind.name} from {msg.sender.name} does not match the requested batch ids")


@dataclass(frozen=True)
class TranscriptEntry:
    round: int
    sender: Source
    recipient: Source | None
    kind: Kind
    payload_bytes: int
    wire_bytes: int

    def to_line(self) -> str:
        if self.recipient is not None:
            to = self.recipient.name
        else:
            to = "CLIENTS" if self.sender is Source.SERVER else Source.SERVER.name
        return f"{self.round}\t{self.sender.name}\t{to}\t{self.kind.name}\t{self.payload_bytes}\t{self.wire_bytes}"

    @classmethod
    def from_line(cls, line: str) -> "TranscriptEntry":
        rnd, sender, to, kind, payload, wire = line.rstrip("\n").split("\t")
        return cls(
            int(rnd),
            Source[sender],
            None if to == "CLIENTS" or (to == "SERVER" and sender != "SERVER") else Source[to],
            Kind[kind],
            int(payload),
            int(wire),
        )


TRANSCRIPT_HEADER = "round\tsender\trecipient\tkind\tpayload_bytes\twire_bytes"


@dataclass
class RoundLog:
    round: int
    batch_size: int
    upstream_bytes: int
    downstream_bytes: int
    upstream_wire_bytes: int
    downstream_wire_bytes: int

    @property
    def per_sample_upstream_bytes(self) -> float:
        return self.upstream_bytes / self.batch_size if self.batch_size else 0.0

    @property
    def per_sample_downstream_bytes(self) -> float:
        return self.downstream_bytes / self.batch_size if self.batch_size else 0.0


Observer = Callable[[ProtocolMessage, bytes, Source | None], None]


@dataclass
class Network:
    """Ordered, reliable in-process delivery with a transcript.

    Messages are serialized on send and parsed on delivery; ``observers`` see
    each message with its exact bytes (the privacy auditor hooks in here).
    """

    precision: str = "f32"
    keep_messages: bool = False
    transcript: list[TranscriptEntry] = field(default_factory=list)
    messages: list[tuple[ProtocolMessage, Source | None]] = field(default_factory=list)
    observers: list[Observer] = field(default_factory=list)
    state: RoundStateMachine = field(default_factory=RoundStateMachine)

    def send(self, msg: ProtocolMessage, recipient: Source | None = None) -> ProtocolMessage:
        raw = serialize(msg, self.precision)
        delivered = deserialize(raw, self.precision)
        self.state.accept(delivered, recipient)
        self.transcript.append(
            TranscriptEntry(msg.round, msg.sender, recipient, msg.kind, delivered.payload_bytes(self.precision), len(raw))
        )
        if self.keep_messages:
            self.messages.append((delivered, recipient))
        for obs in self.observers:
            obs(delivered, raw, recipient)
        return delivered

    def round_log(self, rnd: int, batch_size: int) -> RoundLog:
        entries = [e for e in self.transcript[-5:] if e.round == rnd]
        ups = [e for e in entries if e.kind is Kind.EMBEDDING_UPLOAD]
        downs = [e for e in entries if e.sender is Source.SERVER]
        return RoundLog(
            round=rnd,
            batch_size=batch_size,
            upstream_bytes=sum(e.payload_bytes for e in ups),
            downstream_bytes=sum(e.payload_bytes for e in downs),
            upstream_wire_bytes=sum(e.wire_bytes for e in ups),
            downstream_wire_bytes=sum(e.wire_bytes for e in downs),
        )

    def dump_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(TRANSCRIPT_HEADER + "\n")
            for e in self.transcript:
                fh.write(e.to_line() + "\n")


def read_transcript(path) -> list[TranscriptEntry]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0] == TRANSCRIPT_HEADER:
        lines = lines[1:]
    return [TranscriptEntry.from_line(line) for line in lines if line.strip()]


class Client:
    """A feature-holding party. Owns its raw rows and its encoder, nothing else."""

    def __init__(self, model: ClientModel, ids: Sequence[int], features: np.ndarray, lr: float):
        if len(ids) != features.shape[0]:
            raise ValueError("one feature row per sample id is required")
        self.role = model.role
        self.model = model
        self.lr = lr
        self._features = np.asarray(features, dtype=np.float64)
        self._row = {int(i): r for r, i in enumerate(ids)}
        self._pending: tuple[Graph, tuple[Tensor, Tensor], list[int]] | None = None

    def layers(self):
        return self.model.layers()

    def rows(self, batch_ids: Sequence[int]) -> np.ndarray:
        try:
            idx = [self._row[int(i)] for i in batch_ids]
        except KeyError as exc:
            raise AlignmentError(f"{self.role.name} holds no sample with id {exc.args[0]}") from None
        return self._features[idx]

    def on_batch_request(self, msg: BatchRequest) -> EmbeddingUpload:
        ids = list(msg.batch_ids)
        with Graph() as g:
            outs = self.model.encode(Tensor(self.rows(ids)))
        self._pending = (g, outs, ids)
        return EmbeddingUpload(msg.round, self.role, ids, outs[0].data, outs[1].data)

    def on_gradient(self, msg: GradientDownload) -> None:
        if self._pending is None:
            raise ProtocolStateError(f"{self.role.name} got gradients without an open forward pass")
        g, (z_a, z_b), ids = self._pending
        if list(msg.batch_ids) != ids:
            raise AlignmentError(f"{self.role.name}: gradient ids do not match the uploaded batch")
        grads = ad.vjp(g, {z_a: msg.grad_inv, z_b: msg.grad_spec})
        nn.sgd_step(self.layers(), grads, self.lr)
        self._pending = None


class Server:
    """Label holder and owner of the fusion head."""

    def __init__(self, head, ids: Sequence[int], labels: np.ndarray, lr: float):
        self.head = head
        self.lr = lr
        self.round = 0
        self._labels = np.asarray(labels, dtype=np.float64)
        self._row = {int(i): r for r, i in enumerate(ids)}
        self._grads = None
        self.last_output = None

    def layers(self):
        return self.head.layers()

    def labels(self, batch_ids: Sequence[int]) -> np.ndarray:
        return self._labels[[self._row[int(i)] for i in batch_ids]]

    def batch_request(self, batch_ids: Sequence[int]) -> BatchRequest:
        return BatchRequest(self.round, Source.SERVER, [int(i) for i in batch_ids])

    def on_uploads(self, uploads: dict[Source, EmbeddingUpload]) -> dict[Source, GradientDownload]:
        ids = uploads[Source.IMAGE_CLIENT].batch_ids
        leaves = {}
        bundles = {}
        for role in CLIENT_ROLES:
            up = uploads[role]
            a = Tensor(up.z_inv, requires_grad=True)
            b = Tensor(up.z_spec, requires_grad=True)
            leaves[role] = (a, b)
            bundles[role] = EmbeddingBundle(a, b, role, list(up.batch_ids))
        with Graph() as g:
            out = self.head.forward(bundles[Source.IMAGE_CLIENT], bundles[Source.TABULAR_CLIENT], self.labels(ids))
        grads = ad.backward(g, out.loss)
        self._grads = grads
        self.last_output = out
        return {
            role: GradientDownload(self.round, Source.SERVER, list(ids), grads[leaves[role][0]], grads[leaves[role][1]])
            for role in CLIENT_ROLES
        }

    def apply_update(self) -> None:
        nn.sgd_step(self.layers(), self._grads, self.lr)
        self._grads = None
        self.round += 1


def run_round(server: Server, client_i: Client, client_t: Client, batch_ids: Sequence[int], network: Network) -> tuple[float, RoundLog]:
    """One full exchange; returns the composite loss and the byte log for the round."""
    rnd = server.round
    request = network.send(server.batch_request(batch_ids))
    uploads: dict[Source, EmbeddingUpload] = {}
    for client in (client_i, client_t):
        uploads[client.role] = network.send(client.on_batch_request(request))
    downloads = server.on_uploads(uploads)
    for client in (client_i, client_t):
        client.on_gradient(network.send(downloads[client.role], recipient=client.role))
    server.apply_update()
    return server.last_output.loss.item(), network.round_log(rnd, len(request.batch_ids))


@dataclass
class Federation:
    """The three parties of one federated run plus the wire between them."""

    server: Server
    image_client: Client
    tabular_client: Client
    network: Network
    logs: list[RoundLog] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @classmethod
    def from_model(
        cls,
        model: SplitModel,
        ids: Sequence[int],
        image_view: np.ndarray,
        tabular_view: np.ndarray,
        labels: np.ndarray,
        lr: float,
        precision: str = "f32",
        keep_messages: bool = False,
    ) -> "Federation":
        if not model.variant.federated:
            raise ValueError(f"{model.variant.value} is not a federated variant")
        return cls(
            server=Server(model.head, ids, labels, lr),
            image_client=Client(model.image, ids, image_view, lr),
            tabular_client=Client(model.tabular, ids, tabular_view, lr),
            network=Network(precision=precision, keep_messages=keep_messages),
        )

    def step(self, batch_ids: Sequence[int]) -> float:
        loss, log = run_round(self.server, self.image_client, self.tabular_client, batch_ids, self.network)
        self.logs.append(log)
        self.losses.append(loss)
        return loss

    def train(self, batches: Iterable[Sequence[int]]) -> list[float]:
        return [self.step(b) for b in batches]
