"""Privacy audit over protocol traffic.

Three checks per message: the kind is one of the three protocol kinds,
every tensor has the declared embedding/gradient shape, and no planted
canary value appears as an exact wire word in any tensor payload.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..encoders import EMBED_DIM, Source
from .messages import (
    EmbeddingUpload,
    Kind,
    ProtocolMessage,
    serialize,
    tensor_spans,
    wire_dtype,
)
from .protocol import Client, ProtocolStateError, RoundStateMachine, TranscriptEntry


class AuditFailure(AssertionError):
    pass


@dataclass
class Finding:
    check: str
    message_index: int
    round: int
    sender: str
    kind: str
    offset: int | None
    detail: str

    def __str__(self) -> str:
        where = "" if self.offset is None else f" at byte {self.offset}"
        return f"[{self.check}] message #{self.message_index} (round {self.round}, {self.sender} {self.kind}){where}: {self.detail}"


@dataclass
class AuditReport:
    messages: int = 0
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings

    def raise_for_failure(self) -> None:
        if self.findings:
            raise AuditFailure("; ".join(str(f) for f in self.findings[:5]))

    def to_text(self) -> str:
        lines = [f"passed={str(self.passed).lower()}", f"messages={self.messages}", f"findings={len(self.findings)}"]
        lines += [f"finding.{i}={f}" for i, f in enumerate(self.findings)]
        return "\n".join(lines) + "\n"


def plant_canaries(features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Overwrite one cell per row with a distinctive tiny value; return the values.

    Zero-valued cells are preferred so the data barely changes. The values
    are exactly representable in float32, so a leak of the raw row in either
    wire precision shows up as an exact word.
    """
    flat = features.reshape(features.shape[0], -1)
    out = np.empty(flat.shape[0])
    for r in range(flat.shape[0]):
        zeros = np.flatnonzero(flat[r] == 0)
        col = rng.choice(zeros) if zeros.size else rng.integers(flat.shape[1])
        value = float(np.float32(rng.uniform(1.0, 9.0) * 10.0 ** -int(rng.integers(30, 34))))
        flat[r, col] = value
        out[r] = value
    return out


class PrivacyAuditor:
    """Streaming audit; attach ``observe`` to a Network or feed a transcript."""

    def __init__(self, canaries: Iterable[float], precision: str = "f32", embed_dim: int = EMBED_DIM):
        self.precision = precision
        self.embed_dim = embed_dim
        dt = wire_dtype(precision)
        words = np.asarray(list(canaries), dtype=np.float64).astype(dt)
        self._canary_words = np.unique(words.view(f"<u{dt.itemsize}"))
        self._word = np.dtype(f"<u{dt.itemsize}")
        self.report = AuditReport()

    def observe(self, msg: ProtocolMessage, raw: bytes | None = None, recipient: Source | None = None) -> None:
        idx = self.report.messages
        self.report.messages += 1

        def fail(check: str, detail: str, offset: int | None = None) -> None:
            self.report.findings.append(
                Finding(check, idx, msg.round, msg.sender.name, getattr(msg.kind, "name", str(msg.kind)), offset, detail)
            )

        if not isinstance(getattr(msg, "kind", None), Kind):
            fail("kind", f"undeclared message type {type(msg).__name__}")
            return
        if raw is None:
            raw = serialize(msg, self.precision)
        spans = tensor_spans(raw, self.precision)
        b = len(msg.batch_ids)
        for i, (start, length, shape) in enumerate(spans):
            if shape != (b, self.embed_dim):
                fail("shape", f"tensor {i} has shape {list(shape)}, expected [{b}, {self.embed_dim}]", start)
            if self._canary_words.size and length:
                words = np.frombuffer(raw, dtype=self._word, count=length // self._word.itemsize, offset=start)
                hits = np.flatnonzero(np.isin(words, self._canary_words))
                if hits.size:
                    first = start + int(hits[0]) * self._word.itemsize
                    fail("canary", f"{hits.size} raw canary value(s) found in tensor {i}", first)


def privacy_audit(
    transcript: Sequence[ProtocolMessage],
    canaries: Iterable[float],
    precision: str = "f32",
    embed_dim: int = EMBED_DIM,
) -> AuditReport:
    """Audit a list of delivered messages against the clients' planted canary values."""
    auditor = PrivacyAuditor(canaries, precision, embed_dim)
    for msg in transcript:
        auditor.observe(msg)
    return auditor.report


def audit_transcript_records(entries: Sequence[TranscriptEntry]) -> AuditReport:
    """Checks possible from the text transcript alone: kinds, ordering, per-round structure."""
    report = AuditReport(messages=len(entries))
    machine = RoundStateMachine(first_round=entries[0].round if entries else 0)
    for i, e in enumerate(entries):
        if not isinstance(e.kind, Kind):
            report.findings.append(Finding("kind", i, e.round, e.sender.name, str(e.kind), None, "undeclared kind"))
            continue
        stub = _Stub(e.round, e.sender, e.kind)
        try:
            machine.accept(stub, e.recipient)
        except (ProtocolStateError, ValueError) as exc:
            report.findings.append(Finding("order", i, e.round, e.sender.name, e.kind.name, None, str(exc)))
            machine = RoundStateMachine(first_round=e.round + 1)
    if entries and machine.phase.value != "await_request":
        last = entries[-1]
        report.findings.append(Finding("order", len(entries) - 1, last.round, last.sender.name, last.kind.name, None, "transcript ends mid-round"))
    return report


@dataclass
class _Stub:
    round: int
    sender: Source
    kind: Kind
    batch_ids: tuple = ()


class RawLeakingClient(Client):
    """Adversarial client that uploads its raw rows zero-padded to [b, d_e].

    The shapes are legal, so only the canary check can catch it.
    """

    def __init__(self, *args, embed_dim: int = EMBED_DIM, **kwargs):
        super().__init__(*args, **kwargs)
        self.embed_dim = embed_dim

    def on_batch_request(self, msg):
        up = super().on_batch_request(msg)
        raw = self.rows(msg.batch_ids).reshape(len(msg.batch_ids), -1)[:, : self.embed_dim]
        padded = np.zeros((raw.shape[0], self.embed_dim))
        padded[:, : raw.shape[1]] = raw
        return EmbeddingUpload(up.round, up.sender, up.batch_ids, padded, up.z_spec)


__all__ = [
    "AuditFailure",
    "AuditReport",
    "Finding",
    "PrivacyAuditor",
    "RawLeakingClient",
    "audit_transcript_records",
    "plant_canaries",
    "privacy_audit",
]
