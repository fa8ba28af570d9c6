"""Multi-agent communication lab: protocols, annotation, occlusion and CARA recovery."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AgentConfig,
    AgentResponse,
    Category,
    CommunicationTrace,
    Dataset,
    Domain,
    Span,
    Stance,
    SystemKind,
    TaskInstance,
    read_traces,
    validate_trace,
    write_traces,
)

__all__ = [
    "AgentConfig",
    "AgentResponse",
    "Category",
    "CommunicationTrace",
    "Dataset",
    "Domain",
    "Span",
    "Stance",
    "SystemKind",
    "TaskInstance",
    "read_traces",
    "validate_trace",
    "write_traces",
]
