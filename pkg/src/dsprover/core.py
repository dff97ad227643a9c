"""Shared value types used by every phase of the workflow."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional


class DraftFormat(str, Enum):
    CONCISE_STEPS = "concise_steps"
    FREE_FORMAT = "free_format"
    NONE = "none"


class Outcome(str, Enum):
    """Terminal classification of one workflow attempt."""

    PROVED = "proved"
    PARTIAL = "partial"
    SKETCH_FAILED = "sketch_failed"
    DRAFT_FAILED = "draft_failed"
    TIMEOUT = "timeout"
    BUDGET_EXHAUSTED = "budget_exhausted"


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"


def canonical_json(obj: Any) -> str:
    """Stable JSON text used for hashing and golden comparisons."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def short_hash(obj: Any, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]


@dataclass(frozen=True)
class FormalStatement:
    """A benchmark problem: header preamble plus the theorem text."""

    id: str
    header: str
    statement: str
    informal_statement: Optional[str] = None
    informal_proof: Optional[str] = None
    source: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("statement id must be non-empty")
        if not self.statement.strip():
            raise ValueError(f"statement {self.id!r} has empty formal statement")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "header": self.header,
            "statement": self.statement,
            "informal_statement": self.informal_statement,
            "informal_proof": self.informal_proof,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FormalStatement":
        return cls(
            id=d["id"],
            header=d.get("header", ""),
            statement=d["statement"],
            informal_statement=d.get("informal_statement"),
            informal_proof=d.get("informal_proof"),
            source=d.get("source", ""),
        )


@dataclass(frozen=True)
class TokenUsage:
    """Token counts split by category, with a per-model breakdown.

    ``per_model`` always sums to ``answer_tokens + thinking_tokens + prover_tokens``.
    """

    answer_tokens: int = 0
    thinking_tokens: int = 0
    prover_tokens: int = 0
    per_model: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        counts = (self.answer_tokens, self.thinking_tokens, self.prover_tokens)
        if any(c < 0 for c in counts) or any(c < 0 for c in self.per_model.values()):
            raise ValueError("token counts must be non-negative")
        if self.per_model and sum(self.per_model.values()) != sum(counts):
            raise ValueError("per_model counts do not sum to category totals")
        if not self.per_model and sum(counts):
            raise ValueError("non-zero token usage needs a per-model attribution")
        object.__setattr__(self, "per_model", dict(sorted(self.per_model.items())))

    @classmethod
    def for_model(
        cls, model_id: str, *, answer: int = 0, thinking: int = 0, prover: int = 0
    ) -> "TokenUsage":
        total = answer + thinking + prover
        return cls(answer, thinking, prover, {model_id: total} if total else {})

    @property
    def total(self) -> int:
        return self.answer_tokens + self.thinking_tokens + self.prover_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        merged = dict(self.per_model)
        for k, v in other.per_model.items():
            merged[k] = merged.get(k, 0) + v
        return TokenUsage(
            self.answer_tokens + other.answer_tokens,
            self.thinking_tokens + other.thinking_tokens,
            self.prover_tokens + other.prover_tokens,
            merged,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer_tokens": self.answer_tokens,
            "thinking_tokens": self.thinking_tokens,
            "prover_tokens": self.prover_tokens,
            "per_model": dict(self.per_model),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TokenUsage":
        return cls(
            d.get("answer_tokens", 0),
            d.get("thinking_tokens", 0),
            d.get("prover_tokens", 0),
            dict(d.get("per_model", {})),
        )


def sum_usage(usages) -> TokenUsage:
    total = TokenUsage()
    for u in usages:
        total = total + u
    return total


@dataclass(frozen=True)
class Diagnostic:
    """A checker message anchored at a 1-based line / 0-based column."""

    line: int
    column: int = 0
    severity: Severity = Severity.ERROR
    message: str = ""
    end_line: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "severity", Severity(self.severity))
        if self.line < 1:
            raise ValueError(f"diagnostic line must be >= 1, got {self.line}")
        if self.end_line is not None and self.end_line < self.line:
            raise ValueError("diagnostic end_line precedes line")

    @property
    def is_error(self) -> bool:
        return self.severity is Severity.ERROR

    def to_dict(self) -> dict[str, Any]:
        return {
            "line": self.line,
            "column": self.column,
            "severity": self.severity.value,
            "message": self.message,
            "end_line": self.end_line,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Diagnostic":
        return cls(
            line=int(d["line"]),
            column=int(d.get("column", 0)),
            severity=Severity(d.get("severity", "error")),
            message=d.get("message", ""),
            end_line=d.get("end_line"),
        )


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 4096
    n: int = 1
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def with_(self, **changes: Any) -> "SamplingParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "n": self.n,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SamplingParams":
        return cls(
            temperature=float(d.get("temperature", 0.7)),
            top_p=float(d.get("top_p", 1.0)),
            max_tokens=int(d.get("max_tokens", 4096)),
            n=int(d.get("n", 1)),
            seed=d.get("seed"),
        )


# Default sampling settings for each model role.
DRAFT_SAMPLING = SamplingParams(temperature=0.6, top_p=0.95, max_tokens=32768)
SKETCH_SAMPLING = SamplingParams(temperature=0.7)
PROVER_SAMPLING = SamplingParams(temperature=1.1, top_p=1.0, max_tokens=64, n=8)


@dataclass(frozen=True)
class PhaseConfig:
    """Which model serves each phase, plus draft formatting options."""

    sketch_model: str
    draft_model: Optional[str] = None
    prover_model: Optional[str] = None
    draft_format: DraftFormat = DraftFormat.CONCISE_STEPS
    use_informal_proof: bool = False
    sampling: Mapping[str, SamplingParams] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "draft_format", DraftFormat(self.draft_format))
        if self.draft_model is None and self.draft_format is not DraftFormat.NONE:
            object.__setattr__(self, "draft_format", DraftFormat.NONE)
        object.__setattr__(self, "sampling", dict(sorted(self.sampling.items())))

    def sampling_for(self, model_id: str, default: SamplingParams) -> SamplingParams:
        return self.sampling.get(model_id, default)

    @property
    def config_hash(self) -> str:
        """Stable identity used in attempt ids; the explicit name wins."""
        if self.name:
            return self.name
        d = self.to_dict()
        d.pop("name")
        return short_hash(d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "draft_model": self.draft_model,
            "sketch_model": self.sketch_model,
            "prover_model": self.prover_model,
            "draft_format": self.draft_format.value,
            "use_informal_proof": self.use_informal_proof,
            "sampling": {k: v.to_dict() for k, v in self.sampling.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PhaseConfig":
        return cls(
            name=d.get("name", ""),
            draft_model=d.get("draft_model"),
            sketch_model=d["sketch_model"],
            prover_model=d.get("prover_model"),
            draft_format=DraftFormat(d.get("draft_format", "concise_steps")),
            use_informal_proof=bool(d.get("use_informal_proof", False)),
            sampling={k: SamplingParams.from_dict(v) for k, v in d.get("sampling", {}).items()},
        )


def new_attempt_id(statement_id: str, config_hash: str, k_index: int) -> str:
    if k_index < 0:
        raise ValueError("k_index must be >= 0")
    return f"{statement_id}/{config_hash}/{k_index}"


def parse_attempt_id(attempt_id: str) -> tuple[str, str, int]:
    """Inverse of :func:`new_attempt_id`; statement ids may themselves contain '/'."""
    stmt, cfg, k = attempt_id.rsplit("/", 2)
    return stmt, cfg, int(k)


TIMING_FIELDS = ("wall_clock", "started_at")


@dataclass(frozen=True)
class AttemptRecord:
    """Everything one workflow attempt produced, in persistable form."""

    attempt_id: str
    statement_id: str
    config: PhaseConfig
    outcome: Outcome
    k_index: int = 0
    draft: Any = None  # dsprover.draft.Draft
    sketch: Any = None  # dsprover.sketch.Sketch
    proof_text: Optional[str] = None
    tokens: TokenUsage = field(default_factory=TokenUsage)
    wall_clock: float = 0.0
    started_at: float = 0.0
    prover_samples: int = 0
    prover_sample_bound: int = 0
    subgoals: tuple = ()  # dsprover.search.SubgoalResult
    cause: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        object.__setattr__(self, "subgoals", tuple(self.subgoals))
        object.__setattr__(self, "flags", tuple(self.flags))
        if self.outcome is Outcome.PROVED:
            if not self.proof_text:
                raise ValueError("proved attempt needs proof text")
            from dsprover.sketch import has_placeholder

            if has_placeholder(self.proof_text):
                raise ValueError("proved attempt still contains a placeholder")
        if self.prover_samples > self.prover_sample_bound:
            raise ValueError("prover samples exceed the A x W x T bound")

    @property
    def solved(self) -> bool:
        return self.outcome is Outcome.PROVED

    @property
    def config_hash(self) -> str:
        return self.config.config_hash

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempt_id": self.attempt_id,
            "statement_id": self.statement_id,
            "k_index": self.k_index,
            "config": self.config.to_dict(),
            "outcome": self.outcome.value,
            "cause": self.cause,
            "flags": list(self.flags),
            "draft": self.draft.to_dict() if self.draft is not None else None,
            "sketch": self.sketch.to_dict() if self.sketch is not None else None,
            "subgoals": [s.to_dict() for s in self.subgoals],
            "proof_text": self.proof_text,
            "tokens": self.tokens.to_dict(),
            "prover_samples": self.prover_samples,
            "prover_sample_bound": self.prover_sample_bound,
            "wall_clock": self.wall_clock,
            "started_at": self.started_at,
        }

    def comparable_dict(self) -> dict[str, Any]:
        """``to_dict`` without timing fields, for reproducibility checks."""
        d = self.to_dict()
        for k in TIMING_FIELDS:
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AttemptRecord":
        from dsprover.draft import Draft
        from dsprover.search import SubgoalResult
        from dsprover.sketch import Sketch

        return cls(
            attempt_id=d["attempt_id"],
            statement_id=d["statement_id"],
            k_index=int(d.get("k_index", 0)),
            config=PhaseConfig.from_dict(d["config"]),
            outcome=Outcome(d["outcome"]),
            cause=d.get("cause", ""),
            flags=tuple(d.get("flags", ())),
            draft=Draft.from_dict(d["draft"]) if d.get("draft") else None,
            sketch=Sketch.from_dict(d["sketch"]) if d.get("sketch") else None,
            subgoals=tuple(SubgoalResult.from_dict(s) for s in d.get("subgoals", ())),
            proof_text=d.get("proof_text"),
            tokens=TokenUsage.from_dict(d.get("tokens", {})),
            prover_samples=int(d.get("prover_samples", 0)),
            prover_sample_bound=int(d.get("prover_sample_bound", 0)),
            wall_clock=float(d.get("wall_clock", 0.0)),
            started_at=float(d.get("started_at", 0.0)),
        )


class Deadline:
    """Time budget for one attempt (or, via :meth:`child`, one subgoal).

    Expires when either real elapsed time or explicitly charged cost reaches
    the budget. Charged cost lets simulated backends report durations so
    offline runs time out deterministically. A child deadline also expires
    with its parent, and cost charged to it is charged to the parent too.
    """

    def __init__(self, budget: float, clock=None, parent: Optional["Deadline"] = None) -> None:
        import time

        if budget <= 0:
            raise ValueError("deadline budget must be > 0")
        self.budget = float(budget)
        self._clock = clock or (parent._clock if parent is not None else time.monotonic)
        self._start = self._clock()
        self.charged = 0.0
        self.parent = parent

    def child(self, budget: Optional[float]) -> "Deadline":
        return Deadline(budget if budget is not None else self.budget, parent=self)

    def charge(self, seconds: float) -> None:
        self.charged += max(float(seconds), 0.0)
        if self.parent is not None:
            self.parent.charge(seconds)

    @property
    def used(self) -> float:
        return max(self._clock() - self._start, self.charged)

    @property
    def remaining(self) -> float:
        own = max(self.budget - self.used, 0.0)
        return own if self.parent is None else min(own, self.parent.remaining)

    @property
    def expired(self) -> bool:
        return self.used >= self.budget or (self.parent is not None and self.parent.expired)
