"""Split-VFL execution: messages, parties, accounting, audit and the monolithic oracle."""

from .accounting import CommReport, comm_report, embedding_bytes_per_sample, raw_image_bytes
from .audit import AuditReport, PrivacyAuditor, RawLeakingClient, plant_canaries, privacy_audit
from .messages import (
    BatchRequest,
    CodecError,
    EmbeddingUpload,
    GradientDownload,
    Kind,
    ProtocolMessage,
    deserialize,
    serialize,
)
from .protocol import (
    Client,
    Federation,
    Network,
    ProtocolStateError,
    RoundLog,
    RoundStateMachine,
    Server,
    read_transcript,
    run_round,
)
from .reference import ReferenceRun, monolithic_reference

__all__ = [
    "AuditReport",
    "BatchRequest",
    "Client",
    "CodecError",
    "CommReport",
    "EmbeddingUpload",
    "Federation",
    "GradientDownload",
    "Kind",
    "Network",
    "PrivacyAuditor",
    "ProtocolMessage",
    "ProtocolStateError",
    "RawLeakingClient",
    "ReferenceRun",
    "RoundLog",
    "RoundStateMachine",
    "Server",
    "comm_report",
    "deserialize",
    "embedding_bytes_per_sample",
    "monolithic_reference",
    "plant_canaries",
    "privacy_audit",
    "raw_image_bytes",
    "read_transcript",
    "run_round",
    "serialize",
]
