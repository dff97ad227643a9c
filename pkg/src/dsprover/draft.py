"""Draft phase: ask a reasoning model for a step-by-step calculation and parse it."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from dsprover.core import DRAFT_SAMPLING, DraftFormat, FormalStatement, PhaseConfig, SamplingParams, TokenUsage
from dsprover.errors import DSProverError
from dsprover.gateway import ModelGateway, strip_thinking
from dsprover.prompts import render_draft_prompt

NON_CONFORMING = "non_conforming"
REORDERED = "reordered"

# "### Step 3:", "**Step 3:**", "**Step 3**:", "Step 3:", "### **Step 3.**", a bare "Step 3" line.
STEP_HEADING = re.compile(
    r"^[ \t]*(?:\#{1,6}[ \t]*)?(?:\*\*|__)?[ \t]*Step[ \t]+(?P<num>\d+)[ \t]*"
    r"(?:(?:\*\*|__)[ \t]*)?(?:[:.](?:[ \t]*(?:\*\*|__))?|(?=[ \t]*$))",
    re.MULTILINE | re.IGNORECASE,
)

_MATH_WRAPPERS = (("\\[", "\\]"), ("\\(", "\\)"), ("$$", "$$"), ("$", "$"))


class DraftFailed(DSProverError):
    """The draft model returned nothing usable."""

    def __init__(self, message: str, tokens: Optional[TokenUsage] = None) -> None:
        super().__init__(message)
        self.tokens = tokens or TokenUsage()


@dataclass(frozen=True)
class DraftStep:
    """One parsed step; ``text`` is the verbatim region after the heading."""

    index: int
    body: str
    heading: str = ""
    text: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "body": self.body, "heading": self.heading, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DraftStep":
        return cls(int(d["index"]), d["body"], d.get("heading", ""), d.get("text", ""))


def unwrap_math(body: str) -> str:
    """Drop one enclosing display/inline math delimiter pair, if it wraps everything."""
    s = body.strip()
    for left, right in _MATH_WRAPPERS:
        if len(s) >= len(left) + len(right) and s.startswith(left) and s.endswith(right):
            inner = s[len(left): len(s) - len(right)]
            if left not in inner and right not in inner:
                return inner.strip()
    return s


@dataclass(frozen=True)
class ParsedSteps:
    steps: tuple[DraftStep, ...]
    preamble: str = ""
    flags: tuple[str, ...] = ()


def parse_draft_steps(text: str) -> ParsedSteps:
    """Split a draft on step headings, renumbering in document order.

    ``preamble + heading_1 + text_1 + heading_2 + ...`` reproduces ``text``.
    """
    matches = list(STEP_HEADING.finditer(text))
    if not matches:
        if not text.strip():
            return ParsedSteps((), text)
        return ParsedSteps((DraftStep(1, text.strip(), "", text),), "", (NON_CONFORMING,))
    steps = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        region = text[m.end(): end]
        steps.append(DraftStep(i + 1, unwrap_math(region), m.group(0), region))
    numbers = [int(m.group("num")) for m in matches]
    flags = () if numbers == list(range(1, len(numbers) + 1)) else (REORDERED,)
    return ParsedSteps(tuple(steps), text[: matches[0].start()], flags)


@dataclass(frozen=True)
class Draft:
    statement_id: str
    steps: tuple[DraftStep, ...]
    raw_answer: str
    format: DraftFormat = DraftFormat.CONCISE_STEPS
    tokens: TokenUsage = field(default_factory=TokenUsage)
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "format", DraftFormat(self.format))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "flags", tuple(self.flags))
        if [s.index for s in self.steps] != list(range(1, len(self.steps) + 1)):
            raise ValueError("draft step indices must run 1..n")

    @property
    def text(self) -> str:
        """What the sketch model sees: the filtered answer."""
        return self.raw_answer

    def to_dict(self) -> dict[str, Any]:
        return {
            "statement_id": self.statement_id,
            "format": self.format.value,
            "raw_answer": self.raw_answer,
            "steps": [s.to_dict() for s in self.steps],
            "tokens": self.tokens.to_dict(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Draft":
        return cls(
            statement_id=d["statement_id"],
            steps=tuple(DraftStep.from_dict(s) for s in d.get("steps", ())),
            raw_answer=d["raw_answer"],
            format=DraftFormat(d.get("format", "concise_steps")),
            tokens=TokenUsage.from_dict(d.get("tokens", {})),
            flags=tuple(d.get("flags", ())),
        )


def build_draft(statement_id: str, answer: str, fmt: DraftFormat, tokens: TokenUsage) -> Draft:
    if fmt is DraftFormat.FREE_FORMAT:
        body = answer.strip()
        return Draft(statement_id, (DraftStep(1, body, "", answer),), answer, fmt, tokens)
    parsed = parse_draft_steps(answer)
    return Draft(statement_id, parsed.steps, answer, fmt, tokens, parsed.flags)


def run_draft(
    stmt: FormalStatement,
    config: PhaseConfig,
    gateway: ModelGateway,
    *,
    seed: Optional[int] = None,
    sampling: Optional[SamplingParams] = None,
) -> Draft:
    """Generate and parse one draft. Raises :class:`DraftFailed` on empty output.

    Transport failures propagate as gateway exceptions; the orchestrator maps
    both to the ``draft_failed`` outcome.
    """
    if config.draft_model is None:
        raise ValueError("configuration has no draft model")
    params = sampling or config.sampling_for(config.draft_model, DRAFT_SAMPLING)
    params = params.with_(n=1, seed=seed if seed is not None else params.seed)
    messages = render_draft_prompt(stmt, config.draft_format, config.use_informal_proof)
    completion = gateway.complete(config.draft_model, messages, params)[0]
    markers = gateway.endpoint(config.draft_model).thinking_markers
    answer = strip_thinking(completion.text, markers)
    tokens = TokenUsage.for_model(
        config.draft_model, answer=completion.answer_tokens, thinking=completion.thinking_tokens
    )
    if not answer.strip():
        raise DraftFailed(f"{stmt.id}: draft is empty after removing thinking", tokens)
    return build_draft(stmt.id, answer, config.draft_format, tokens)
