"""Sketch phase: formal sketch parsing, placeholder rewriting and error line masking.

A sketch is analysed purely textually. Every physical line gets a kind, the
names it introduces and the names it references; indentation gives the block
tree. Masking then works on line statuses:

* ``active`` lines render unchanged.
* ``masked_commented`` lines render behind a ``--`` comment marker.
* ``masked_sorried`` lines render as ``sorry``; a run of them in one block
  collapses to a single ``sorry`` followed by the remaining lines commented out.

Statuses only move forward (active, then sorried, then commented), so the
repair loop always terminates.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from dsprover.core import Diagnostic, FormalStatement, PhaseConfig, SKETCH_SAMPLING, SamplingParams, TokenUsage
from dsprover.errors import SketchFailed

log = logging.getLogger(__name__)

PLACEHOLDER_TACTIC = "sorry"
COMMENT_MARKER = "--"
DEFAULT_REPAIR_CAP = 10


class LineKind(str, Enum):
    THEOREM_HEADER = "theorem_header"
    SUBGOAL_DECL = "subgoal_decl"
    PROOF_STEP = "proof_step"
    STRUCTURAL = "structural"
    PLACEHOLDER = "placeholder"
    COMMENT = "comment"
    BLANK = "blank"


class LineStatus(str, Enum):
    ACTIVE = "active"
    MASKED_COMMENTED = "masked_commented"
    MASKED_SORRIED = "masked_sorried"


class Strategy(str, Enum):
    HINTED_ONLY = "hinted_only"
    ALL_HYPOTHESES = "all_hypotheses"


_STATUS_RANK = {LineStatus.ACTIVE: 0, LineStatus.MASKED_SORRIED: 1, LineStatus.MASKED_COMMENTED: 2}
_UNCOUNTED = (LineKind.THEOREM_HEADER, LineKind.COMMENT, LineKind.BLANK)

IDENT = re.compile(r"[^\W\d][\w'!?]*")
PROVE_WITH = re.compile(r"\bprove_with\b(?:\s*\[(?P<hints>[^\]]*)\])?")
PLACEHOLDER_TOKEN = re.compile(r"\bprove_with\b(?:\s*\[[^\]]*\])?|\bsorry\b")
PLACEHOLDER_LINE = re.compile(r"^(?:prove_with\b(?:\s*\[[^\]]*\])?|sorry)\s*$")
THEOREM_START = re.compile(
    r"^\s*(?:@\[[^\]]*\]\s*)?(?:(?:private|protected|noncomputable|nonrec)\s+)*(?:theorem|lemma|example)\b"
)
OPENS_BY = re.compile(r":=\s*by\b")
SUBGOAL_KW = re.compile(r"^(have|haveI|let|letI|suffices|obtain|replace|set)\b")
STRUCTURAL_KW = re.compile(
    r"^(?:·|\.(?=\s)|\||case\b|next\b|constructor\b|cases'?(?=\s|$)|rcases\b|induction'?(?=\s|$)|match\b"
    r"|intro\b|intros\b|rintro\b|by_cases\b|by_contra!?|refine'?(?=\s|$)|split\b|split_ifs\b"
    r"|interval_cases\b|fin_cases\b|choose\b|rename_i\b|any_goals\b|all_goals\b|focus\b|on_goal\b)"
)
BINDER_GROUP = re.compile(r"[(\[{⦃]\s*([^:()\[\]{}⦃⦄]+?)\s*:")
_NOT_NAMES = frozenset({"_", "rfl", "fun", "with", "at", "using", "this"})
# Words that never name a local hypothesis; kept out of reference sets.
_KEYWORDS = frozenset(
    "by have haveI let letI show from fun at with using then else if in do match exact apply "
    "intro intros rintro obtain suffices calc theorem lemma example Type Prop Sort forall exists "
    "true false sorry prove_with".split()
)


# ---------------------------------------------------------------- text helpers


def split_code_comment(text: str) -> tuple[str, str]:
    """Split a line into code and trailing ``--`` comment, ignoring string literals."""
    in_str = False
    i = 0
    while i < len(text):
        c = text[i]
        if c == '"' and (i == 0 or text[i - 1] != "\\"):
            in_str = not in_str
        elif not in_str and text.startswith("--", i):
            return text[:i], text[i:]
        i += 1
    return text, ""


def code_part(text: str) -> str:
    return split_code_comment(text)[0].rstrip()


def indent_of(text: str) -> int:
    return len(text) - len(text.lstrip(" \t"))


def comment_out(text: str) -> str:
    ind = indent_of(text)
    return f"{text[:ind]}{COMMENT_MARKER} {text[ind:]}"


def _strip_block_comments(lines: Sequence[str]) -> list[str]:
    """Replace ``/- ... -/`` regions with spaces so column positions survive."""
    out = []
    depth = 0
    for line in lines:
        buf = []
        i = 0
        while i < len(line):
            if line.startswith("/-", i):
                depth += 1
                buf.append("  ")
                i += 2
            elif depth and line.startswith("-/", i):
                depth -= 1
                buf.append("  ")
                i += 2
            else:
                buf.append(" " if depth else line[i])
                i += 1
        out.append("".join(buf))
    return out


def has_placeholder(text: str) -> bool:
    """True if any ``sorry`` or ``prove_with`` survives outside comments."""
    for line in _strip_block_comments(text.split("\n")):
        if PLACEHOLDER_TOKEN.search(code_part(line)):
            return True
    return False


def parse_hints(raw: Optional[str]) -> tuple[str, ...]:
    if raw is None:
        return ()
    return tuple(h.strip() for h in raw.split(",") if h.strip())


def _idents(text: str) -> list[str]:
    return [m.group(0) for m in IDENT.finditer(text)]


def _names(text: str) -> list[str]:
    return [n for n in _idents(text) if n not in _NOT_NAMES]


def _until_top_level(text: str, stops: tuple[str, ...]) -> str:
    depth = 0
    for i, c in enumerate(text):
        if c in "([{⟨⦃":
            depth += 1
        elif c in ")]}⟩⦄":
            depth -= 1
        elif depth == 0 and any(text.startswith(s, i) for s in stops):
            return text[:i]
    return text


def binder_names(header_code: str) -> list[str]:
    head = _until_top_level(header_code, (":=",))
    out: list[str] = []
    for m in BINDER_GROUP.finditer(head):
        out.extend(n for n in _names(m.group(1)) if n not in out)
    return out


def introduced_names(code: str) -> list[str]:
    """Names a tactic line brings into scope, read off its surface syntax."""
    s = code.strip()
    if not s:
        return []
    if s[0] in "·." and (len(s) == 1 or s[1].isspace()):
        return introduced_names(s[1:])
    if s.startswith("|"):
        pat = s[1:].split("=>", 1)[0]
        return _names(pat)[1:]
    m = re.match(r"(have|haveI|let|letI|suffices|replace)\b\s*(.*)", s)
    if m:
        rest = m.group(2)
        if rest.startswith("rec "):
            rest = rest[4:].lstrip()
        if rest.startswith("⟨"):
            return _names(_until_top_level(rest, (":=", " : ")))
        name = IDENT.match(rest)
        if name and name.group(0) not in _NOT_NAMES:
            return [name.group(0)]
        return ["this"]
    m = re.match(r"set\b\s*(.*)", s)
    if m:
        rest = m.group(1)
        first = IDENT.match(rest)
        names = [first.group(0)] if first else []
        if " with " in rest:
            names += _names(rest.rsplit(" with ", 1)[1])
        return names
    m = re.match(r"obtain\b\s*(.*)", s)
    if m:
        return _names(_until_top_level(m.group(1), (":=", " : ")))
    m = re.match(r"(rcases|cases'|induction'|cases|induction|obtain)\b(.*)", s)
    if m:
        if " with " in m.group(2):
            return _names(m.group(2).rsplit(" with ", 1)[1])
        return []
    m = re.match(r"choose!?\s+(.*?)(?:\s+using\b.*)?$", s)
    if m:
        return _names(m.group(1))
    m = re.match(r"(by_cases|by_contra!?)\s+([^\W\d][\w'!?]*)", s)
    if m:
        return [m.group(2)] if m.group(2) not in _NOT_NAMES else []
    m = re.match(r"(intro|intros|rintro|rename_i|next)\b(.*)", s)
    if m:
        return _names(m.group(2).split("=>", 1)[0])
    m = re.match(r"case\b(.*)", s)
    if m:
        return _names(m.group(1).split("=>", 1)[0])[1:]
    return []


def classify(code: str) -> LineKind:
    s = code.strip()
    if PLACEHOLDER_LINE.match(s):
        return LineKind.PLACEHOLDER
    if SUBGOAL_KW.match(s):
        return LineKind.SUBGOAL_DECL
    if STRUCTURAL_KW.match(s):
        return LineKind.STRUCTURAL
    return LineKind.PROOF_STEP


def _is_block_scoped(code: str) -> bool:
    s = code.strip()
    return bool(re.match(r"^(?:·|\.(?=\s)|\||case\b|next\b)", s))


def _is_opener(code: str) -> bool:
    """Does this line open a nested tactic block?"""
    s = code.strip()
    return s.endswith("by") and bool(re.search(r"\bby$", s)) or s.endswith("=>") or s in ("·", ".")


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class SketchLine:
    """One physical line (or a synthetic placeholder added during repair)."""

    index: int
    text: str
    indent: int
    kind: LineKind
    introduces: tuple[str, ...] = ()
    references: tuple[str, ...] = ()
    status: LineStatus = LineStatus.ACTIVE
    hints: tuple[tuple[str, ...], ...] = ()
    parent: Optional[int] = None
    synthetic: bool = False
    anchor: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LineKind(self.kind))
        object.__setattr__(self, "status", LineStatus(self.status))
        object.__setattr__(self, "hints", tuple(tuple(h) for h in self.hints))
        if set(self.introduces) & set(self.references):
            raise ValueError(f"line {self.index}: a name is both introduced and referenced")

    @property
    def code(self) -> str:
        return code_part(self.text)

    @property
    def significant(self) -> bool:
        return self.kind not in (LineKind.COMMENT, LineKind.BLANK)

    @property
    def countable(self) -> bool:
        return not self.synthetic and self.kind not in _UNCOUNTED

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "index": self.index,
            "text": self.text,
            "indent": self.indent,
            "kind": self.kind.value,
            "introduces": list(self.introduces),
            "references": list(self.references),
            "status": self.status.value,
            "hints": [list(h) for h in self.hints],
            "parent": self.parent,
        }
        if self.synthetic:
            d["synthetic"] = True
            d["anchor"] = self.anchor
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SketchLine":
        return cls(
            index=int(d["index"]),
            text=d["text"],
            indent=int(d["indent"]),
            kind=LineKind(d["kind"]),
            introduces=tuple(d.get("introduces", ())),
            references=tuple(d.get("references", ())),
            status=LineStatus(d.get("status", "active")),
            hints=tuple(tuple(h) for h in d.get("hints", ())),
            parent=d.get("parent"),
            synthetic=bool(d.get("synthetic", False)),
            anchor=d.get("anchor"),
        )


@dataclass(frozen=True)
class SubgoalHole:
    hole_id: int
    line_index: int
    hinted_hypotheses: tuple[str, ...] = ()
    goal_pretty: Optional[str] = None
    strategies: tuple[Strategy, ...] = (Strategy.ALL_HYPOTHESES,)
    rendered_line: int = 0
    column: int = 0
    indent: int = 0
    inline: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hinted_hypotheses", tuple(self.hinted_hypotheses))
        object.__setattr__(self, "strategies", tuple(Strategy(s) for s in self.strategies))

    def to_dict(self) -> dict[str, Any]:
        return {
            "hole_id": self.hole_id,
            "line_index": self.line_index,
            "hinted_hypotheses": list(self.hinted_hypotheses),
            "goal_pretty": self.goal_pretty,
            "strategies": [s.value for s in self.strategies],
            "rendered_line": self.rendered_line,
            "column": self.column,
            "indent": self.indent,
            "inline": self.inline,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SubgoalHole":
        return cls(
            hole_id=int(d["hole_id"]),
            line_index=int(d["line_index"]),
            hinted_hypotheses=tuple(d.get("hinted_hypotheses", ())),
            goal_pretty=d.get("goal_pretty"),
            strategies=tuple(Strategy(s) for s in d.get("strategies", ("all_hypotheses",))),
            rendered_line=int(d.get("rendered_line", 0)),
            column=int(d.get("column", 0)),
            indent=int(d.get("indent", 0)),
            inline=bool(d.get("inline", False)),
        )


def strategies_for(hints: Sequence[str]) -> tuple[Strategy, ...]:
    if hints:
        return (Strategy.HINTED_ONLY, Strategy.ALL_HYPOTHESES)
    return (Strategy.ALL_HYPOTHESES,)


@dataclass(frozen=True)
class Rendered:
    """Rendered sketch text plus, per output line, the sketch line it came from."""

    text: str
    line_map: tuple[int, ...]

    @property
    def lines(self) -> list[str]:
        return self.text.split("\n")

    def sketch_index(self, rendered_line: int) -> Optional[int]:
        if 1 <= rendered_line <= len(self.line_map):
            return self.line_map[rendered_line - 1]
        return None


@dataclass(frozen=True)
class Sketch:
    statement_id: str
    lines: tuple[SketchLine, ...]
    holes: tuple[SubgoalHole, ...] = ()
    repair_iterations: int = 0
    dropped_hints: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    trailing_newline: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "holes", tuple(self.holes))
        object.__setattr__(self, "dropped_hints", tuple(self.dropped_hints))
        object.__setattr__(self, "flags", tuple(self.flags))
        for h in self.holes:
            line = self.line(h.line_index)
            if line.status is LineStatus.MASKED_COMMENTED:
                raise ValueError(f"hole {h.hole_id} sits on a commented-out line")

    def line(self, index: int) -> SketchLine:
        return self.lines[index - 1]

    @property
    def n_original(self) -> int:
        return sum(1 for ln in self.lines if not ln.synthetic)

    @property
    def translation_rate(self) -> float:
        countable = [ln for ln in self.lines if ln.countable]
        if not countable:
            return 1.0
        return sum(1 for ln in countable if ln.status is LineStatus.ACTIVE) / len(countable)

    def active_set(self) -> frozenset[int]:
        return frozenset(ln.index for ln in self.lines if ln.status is LineStatus.ACTIVE)

    def status_vector(self) -> tuple:
        return tuple((ln.index, ln.status) for ln in self.lines)

    def render(self) -> Rendered:
        return render(self)

    @property
    def text(self) -> str:
        return render(self).text

    def to_dict(self) -> dict[str, Any]:
        return {
            "statement_id": self.statement_id,
            "lines": [ln.to_dict() for ln in self.lines],
            "holes": [h.to_dict() for h in self.holes],
            "repair_iterations": self.repair_iterations,
            "translation_rate": self.translation_rate,
            "dropped_hints": list(self.dropped_hints),
            "flags": list(self.flags),
            "trailing_newline": self.trailing_newline,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Sketch":
        return cls(
            statement_id=d.get("statement_id", ""),
            lines=tuple(SketchLine.from_dict(x) for x in d["lines"]),
            holes=tuple(SubgoalHole.from_dict(h) for h in d.get("holes", ())),
            repair_iterations=int(d.get("repair_iterations", 0)),
            dropped_hints=tuple(d.get("dropped_hints", ())),
            flags=tuple(d.get("flags", ())),
            trailing_newline=bool(d.get("trailing_newline", False)),
        )


# ---------------------------------------------------------------- parsing


def parse_sketch(source: str, statement_id: str = "") -> Sketch:
    """Classify every line of ``source`` and compute the block tree and names."""
    if not source.strip():
        raise ValueError("sketch source is empty")
    trailing = source.endswith("\n")
    raw_lines = source.split("\n")
    if trailing:
        raw_lines.pop()
    scrubbed = _strip_block_comments(raw_lines)

    kinds: list[LineKind] = []
    for raw, clean in zip(raw_lines, scrubbed):
        if not raw.strip():
            kinds.append(LineKind.BLANK)
        elif not code_part(clean).strip():
            kinds.append(LineKind.COMMENT)
        else:
            kinds.append(LineKind.PROOF_STEP)

    # Theorem header: everything up to the line that opens the top-level proof.
    header_last = 0
    start = next((i for i, ln in enumerate(scrubbed) if THEOREM_START.match(ln)), None)
    if start is not None:
        end = start
        for j in range(start, len(scrubbed)):
            if kinds[j] is not LineKind.BLANK and kinds[j] is not LineKind.COMMENT and OPENS_BY.search(
                code_part(scrubbed[j])
            ):
                end = j
                break
        else:
            end = start
        for j in range(0, end + 1):
            if kinds[j] not in (LineKind.BLANK, LineKind.COMMENT):
                kinds[j] = LineKind.THEOREM_HEADER
        header_last = end + 1

    header_text = " ".join(code_part(scrubbed[j]) for j in range(len(raw_lines)) if kinds[j] is LineKind.THEOREM_HEADER)
    binders = tuple(binder_names(header_text))

    lines: list[SketchLine] = []
    stack: list[tuple[int, int, str]] = []  # (indent, index, code)
    if header_last:
        stack.append((-1, header_last, ""))
    for i, (raw, clean) in enumerate(zip(raw_lines, scrubbed), start=1):
        kind = kinds[i - 1]
        ind = indent_of(raw)
        code = code_part(clean)
        if kind in (LineKind.BLANK, LineKind.COMMENT):
            lines.append(SketchLine(i, raw, ind, kind))
            continue
        if kind is LineKind.THEOREM_HEADER:
            intro = binders if i == header_last else ()
            lines.append(SketchLine(i, raw, ind, kind, intro, (), hints=_line_hints(code)))
            continue
        kind = classify(code)
        parent = _pop_parent(stack, ind, code)
        stack.append((ind, i, code))
        intro = tuple(dict.fromkeys(introduced_names(code)))
        refs = tuple(sorted(set(_idents(PROVE_WITH.sub(" ", code))) - set(intro) - _KEYWORDS))
        lines.append(SketchLine(i, raw, ind, kind, intro, refs, hints=_line_hints(code), parent=parent))

    sketch = Sketch(statement_id, tuple(lines), trailing_newline=trailing)
    sketch, dropped = _validate_hints(sketch)
    sketch = replace(sketch, dropped_hints=dropped)
    return with_holes(sketch)


def _line_hints(code: str) -> tuple[tuple[str, ...], ...]:
    return tuple(parse_hints(m.group("hints")) for m in PROVE_WITH.finditer(code))


def _pop_parent(stack: list[tuple[int, int, str]], ind: int, code: str) -> Optional[int]:
    s = code.strip()
    if s.startswith("|"):
        while stack and stack[-1][0] > ind:
            stack.pop()
        if stack and stack[-1][0] == ind and stack[-1][2].strip().startswith("|"):
            stack.pop()
        if stack and stack[-1][0] == ind and stack[-1][2].rstrip().endswith("with"):
            return stack[-1][1]
    while stack and stack[-1][0] >= ind:
        stack.pop()
    return stack[-1][1] if stack else None


def _validate_hints(sketch: Sketch) -> tuple[Sketch, tuple[str, ...]]:
    """Drop hinted names that no earlier line or theorem binder introduces."""
    seen: set[str] = set()
    dropped: list[str] = []
    new_lines = []
    for ln in sketch.lines:
        if ln.hints:
            kept = []
            for group in ln.hints:
                ok = tuple(h for h in group if h in seen)
                dropped.extend(f"{ln.index}:{h}" for h in group if h not in seen)
                kept.append(ok)
            ln = replace(ln, hints=tuple(kept))
        new_lines.append(ln)
        if ln.status is not LineStatus.MASKED_COMMENTED:
            seen.update(ln.introduces)
    return replace(sketch, lines=tuple(new_lines), holes=()), tuple(dropped)


# ---------------------------------------------------------------- structure queries


class _Tree:
    """Parent/children/binding relations of one sketch, computed once."""

    def __init__(self, sketch: Sketch) -> None:
        self.sketch = sketch
        self.children: dict[Optional[int], list[int]] = {}
        for ln in sketch.lines:
            if ln.significant and ln.kind is not LineKind.THEOREM_HEADER or ln.synthetic:
                self.children.setdefault(ln.parent, []).append(ln.index)
        self._desc: dict[int, frozenset[int]] = {}
        self.dependents: dict[int, set[int]] = {}
        self._bind()

    def descendants(self, idx: int) -> frozenset[int]:
        got = self._desc.get(idx)
        if got is None:
            out: set[int] = set()
            todo = list(self.children.get(idx, ()))
            while todo:
                c = todo.pop()
                if c not in out:
                    out.add(c)
                    todo.extend(self.children.get(c, ()))
            got = self._desc[idx] = frozenset(out)
        return got

    def ancestors(self, idx: int) -> list[int]:
        out = []
        p = self.sketch.line(idx).parent
        while p is not None:
            out.append(p)
            p = self.sketch.line(p).parent
        return out

    def visible(self, k: int, m: int) -> bool:
        """Is a name introduced on line ``k`` in scope on a later line ``m``?"""
        lk = self.sketch.line(k)
        if lk.kind is LineKind.THEOREM_HEADER:
            return True
        if _is_block_scoped(lk.code):
            return m in self.descendants(k)
        if m in self.descendants(k):
            return False
        return lk.parent is None or lk.parent in self.ancestors(m) or (
            self.sketch.line(lk.parent).kind is LineKind.THEOREM_HEADER
        )

    def _bind(self) -> None:
        lines = [ln for ln in self.sketch.lines if not ln.synthetic]
        for m in lines:
            for name in m.references:
                for k in range(m.index - 1, 0, -1):
                    lk = self.sketch.line(k)
                    if name in lk.introduces and self.visible(k, m.index):
                        self.dependents.setdefault(k, set()).add(m.index)
                        break

    def closure(self, idx: int, within: Optional[frozenset[int]] = None) -> set[int]:
        """Transitive closure of nested lines and name dependents of ``idx``."""
        out: set[int] = set()
        todo = [idx]
        while todo:
            x = todo.pop()
            nxt = set(self.descendants(x)) | self.dependents.get(x, set())
            for y in nxt:
                if y not in out and y != idx and (within is None or y in within):
                    out.add(y)
                    todo.append(y)
        return out

    def block_of(self, idx: int) -> frozenset[int]:
        parent = self.sketch.line(idx).parent
        if parent is None:
            return frozenset(ln.index for ln in self.sketch.lines)
        return self.descendants(parent)


# ---------------------------------------------------------------- rendering


def inline_tail_start(code: str) -> Optional[int]:
    """Column just past ``:= by`` when a tactic follows on the same line."""
    for m in OPENS_BY.finditer(code):
        if code[m.end():].strip():
            return m.end()
    return None


def _sorry_text(line: SketchLine) -> str:
    s = line.code.strip()
    pad = line.text[: line.indent]
    tail = inline_tail_start(line.code)
    if tail is not None:
        return f"{line.code[:tail]} {PLACEHOLDER_TACTIC}"
    if s[:1] in ("·", ".") and (len(s) == 1 or s[1].isspace()):
        return f"{pad}{s[0]} {PLACEHOLDER_TACTIC}"
    if (s.startswith("|") or s.startswith("case") or s.startswith("next")) and "=>" in s:
        return f"{pad}{s.split('=>', 1)[0].rstrip()} => {PLACEHOLDER_TACTIC}"
    return f"{pad}{PLACEHOLDER_TACTIC}"


def render(sketch: Sketch) -> Rendered:
    tree = _Tree(sketch)
    anchored: dict[int, list[SketchLine]] = {}
    for ln in sketch.lines:
        if ln.synthetic:
            anchored.setdefault(ln.anchor or 0, []).append(ln)

    out: list[str] = []
    where: list[int] = []
    run_head: Optional[SketchLine] = None

    def emit(ln: SketchLine) -> None:
        nonlocal run_head
        if not ln.significant:
            out.append(ln.text)
            where.append(ln.index)
            return
        if ln.status is LineStatus.MASKED_COMMENTED:
            out.append(comment_out(ln.text))
        elif ln.status is LineStatus.MASKED_SORRIED and inline_tail_start(ln.code) is not None:
            out.append(_sorry_text(ln))
            run_head = None
        elif ln.status is LineStatus.MASKED_SORRIED:
            absorbed = (
                run_head is not None
                and ln.indent >= run_head.indent
                and (run_head.parent is None or ln.index in tree.descendants(run_head.parent))
            )
            if absorbed:
                out.append(comment_out(ln.text))
            else:
                out.append(_sorry_text(ln))
                run_head = ln
        else:
            out.append(ln.text)
            # A live bare ``sorry`` already closes the goal; masked lines after it fold in.
            bare = ln.kind is LineKind.PLACEHOLDER and ln.code.strip() == PLACEHOLDER_TACTIC
            run_head = ln if bare else None
        where.append(ln.index)

    for sl in anchored.get(0, ()):
        emit(sl)
    for ln in sketch.lines:
        if ln.synthetic:
            continue
        emit(ln)
        for sl in anchored.get(ln.index, ()):
            emit(sl)
    text = "\n".join(out) + ("\n" if sketch.trailing_newline else "")
    return Rendered(text, tuple(where))


def with_holes(sketch: Sketch) -> Sketch:
    """Recompute holes from the rendered text: one per placeholder token."""
    r = render(sketch)
    # Names still bound by an active line before each original line; hints
    # pointing at masked declarations are dropped.
    live_before: dict[int, frozenset[str]] = {}
    live: set[str] = set()
    for ln in sketch.lines:
        if ln.synthetic:
            continue
        live_before[ln.index] = frozenset(live)
        if ln.status is LineStatus.ACTIVE:
            live.update(ln.introduces)
    holes = []
    for rl, (text, idx) in enumerate(zip(r.lines, r.line_map), start=1):
        ln = sketch.line(idx)
        if not ln.significant or ln.status is LineStatus.MASKED_COMMENTED:
            continue
        code = code_part(text)
        toks = list(PLACEHOLDER_TOKEN.finditer(code))
        for k, m in enumerate(toks):
            hints: tuple[str, ...] = ()
            if ln.status is LineStatus.ACTIVE and k < len(ln.hints):
                hints = tuple(h for h in ln.hints[k] if h in live_before.get(idx, frozenset()))
            inline = code.strip() != m.group(0).strip() or len(toks) > 1
            holes.append(
                SubgoalHole(
                    hole_id=len(holes),
                    line_index=idx,
                    hinted_hypotheses=hints,
                    strategies=strategies_for(hints),
                    rendered_line=rl,
                    column=m.start(),
                    indent=indent_of(text),
                    inline=inline,
                )
            )
    return replace(sketch, holes=tuple(holes))


# ---------------------------------------------------------------- rewriting


def rewrite_placeholders(sketch: Sketch) -> Sketch:
    """Replace every ``prove_with[...]`` by ``sorry``; hints stay on the line."""
    new_lines = []
    for ln in sketch.lines:
        if PROVE_WITH.search(ln.code):
            code, comment = split_code_comment(ln.text)
            ln = replace(ln, text=PROVE_WITH.sub(PLACEHOLDER_TACTIC, code) + comment)
        new_lines.append(ln)
    return with_holes(replace(sketch, lines=tuple(new_lines), holes=()))


def translation_rate(original: Sketch, repaired: Sketch) -> float:
    """Share of countable original lines still active after repair."""
    if original.statement_id != repaired.statement_id:
        raise ValueError("sketches belong to different statements")
    denom = sum(1 for ln in original.lines if ln.countable and ln.status is LineStatus.ACTIVE)
    if denom == 0:
        return 1.0
    num = sum(1 for ln in repaired.lines if ln.countable and ln.status is LineStatus.ACTIVE)
    return num / denom


# ---------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskAction:
    """How one diagnostic was handled (for logs and totality checks)."""

    diagnostic_line: int
    owner: Optional[int]
    rule: str
    affected: tuple[int, ...] = ()


def _is_unsolved(diag: Diagnostic) -> bool:
    return diag.message.lstrip().lower().startswith("unsolved goals")


def mask_errors(
    sketch: Sketch,
    diags: Iterable[Diagnostic],
    *,
    mask_rest_of_block: bool = False,
    actions: Optional[list[MaskAction]] = None,
) -> Sketch:
    """Apply the two masking rules for every error diagnostic.

    Diagnostic lines are positions in the sketch's *current rendering*.
    Raises :class:`SketchFailed` when an error lands on the theorem header.
    """
    rendered = render(sketch)
    tree = _Tree(sketch)
    before = {ln.index: ln.status for ln in sketch.lines}
    status = dict(before)
    synth: list[SketchLine] = []
    log_ = actions if actions is not None else []

    def set_status(indices: Iterable[int], st: LineStatus) -> list[int]:
        changed = []
        for i in indices:
            ln = sketch.line(i) if i <= len(sketch.lines) else None
            if ln is not None and not ln.significant:
                continue
            if _STATUS_RANK[st] > _STATUS_RANK[status[i]]:
                status[i] = st
                changed.append(i)
        return changed

    def add_synthetic(opener: int) -> list[int]:
        kids = [c for c in tree.children.get(opener, ()) if not sketch.line(c).synthetic]
        already = [s for s in sketch.lines if s.synthetic and s.parent == opener] + [
            s for s in synth if s.parent == opener
        ]
        if already:
            return []
        op = sketch.line(opener)
        ind = sketch.line(kids[0]).indent if kids else op.indent + 2
        desc = [d for d in tree.descendants(opener) if not sketch.line(d).synthetic]
        anchor = max(desc) if desc else opener
        new = SketchLine(
            index=len(sketch.lines) + len(synth) + 1,
            text=" " * ind + PLACEHOLDER_TACTIC,
            indent=ind,
            kind=LineKind.PLACEHOLDER,
            parent=opener,
            synthetic=True,
            anchor=anchor,
        )
        synth.append(new)
        status[new.index] = LineStatus.ACTIVE
        return [new.index]

    def rendered_is_code(rl: int) -> bool:
        t = rendered.lines[rl - 1]
        return bool(code_part(t).strip())

    for diag in sorted(diags, key=lambda d: (d.line, d.column)):
        if not diag.is_error:
            continue
        if diag.line > len(rendered.line_map):
            log.warning("diagnostic line %d beyond sketch length %d; ignored", diag.line, len(rendered.line_map))
            log_.append(MaskAction(diag.line, None, "ignored"))
            continue
        rl = diag.line
        while rl >= 1 and not rendered_is_code(rl):
            rl -= 1
        if rl < 1:
            log.warning("diagnostic line %d has no owning code line; ignored", diag.line)
            log_.append(MaskAction(diag.line, None, "ignored"))
            continue
        owner = rendered.line_map[rl - 1]
        ln = sketch.line(owner)
        if status[owner] is not before[owner]:
            log_.append(MaskAction(diag.line, owner, "already_masked"))
            continue
        opener_unsolved = _is_unsolved(diag) and _is_opener(ln.code) and before[owner] is LineStatus.ACTIVE

        tail = inline_tail_start(ln.code)
        in_tail = tail is not None and diag.column >= tail and before[owner] is LineStatus.ACTIVE
        is_last_header = ln.kind is LineKind.THEOREM_HEADER and owner == max(
            x.index for x in sketch.lines if x.kind is LineKind.THEOREM_HEADER
        )
        if in_tail and (ln.kind is not LineKind.THEOREM_HEADER or is_last_header):
            # Only the inline proof failed: the line's own statement stays.
            affected = set_status([owner], LineStatus.MASKED_SORRIED)
            log_.append(MaskAction(diag.line, owner, "rule2_inline", tuple(affected)))
            continue

        if ln.kind is LineKind.THEOREM_HEADER:
            if opener_unsolved and owner == max(
                x.index for x in sketch.lines if x.kind is LineKind.THEOREM_HEADER
            ):
                changed = add_synthetic(owner)
                if changed:
                    log_.append(MaskAction(diag.line, owner, "unsolved_goals", tuple(changed)))
                    continue
            log_.append(MaskAction(diag.line, owner, "abort"))
            raise SketchFailed(f"error on theorem header line {owner}: {diag.message}")

        if opener_unsolved:
            changed = add_synthetic(owner)
            if changed:
                log_.append(MaskAction(diag.line, owner, "unsolved_goals", tuple(changed)))
                continue

        rendered_text = rendered.lines[rl - 1].strip()
        if before[owner] is LineStatus.MASKED_SORRIED or (
            ln.kind is LineKind.PLACEHOLDER and rendered_text == PLACEHOLDER_TACTIC
        ):
            # A placeholder that still errs: give up on the enclosing subgoal.
            target = owner
            if ln.kind is not LineKind.SUBGOAL_DECL and ln.parent is not None:
                parent = sketch.line(ln.parent)
                if parent.kind is LineKind.SUBGOAL_DECL and status[parent.index] is LineStatus.ACTIVE:
                    target = parent.index
            affected = set_status([target, *tree.closure(target)], LineStatus.MASKED_COMMENTED)
            log_.append(MaskAction(diag.line, owner, "escalate", tuple(sorted(affected))))
        elif ln.kind is LineKind.SUBGOAL_DECL:
            affected = set_status([owner, *tree.closure(owner)], LineStatus.MASKED_COMMENTED)
            log_.append(MaskAction(diag.line, owner, "rule1", tuple(sorted(affected))))
        elif ln.kind is LineKind.STRUCTURAL:
            affected = set_status([owner], LineStatus.MASKED_SORRIED)
            affected += set_status(tree.closure(owner), LineStatus.MASKED_COMMENTED)
            log_.append(MaskAction(diag.line, owner, "rule1_structural", tuple(sorted(affected))))
        else:
            block = tree.block_of(owner)
            targets = {owner, *tree.closure(owner, within=block)}
            if mask_rest_of_block:
                targets |= {i for i in block if i > owner}
            affected = set_status(sorted(targets), LineStatus.MASKED_SORRIED)
            log_.append(MaskAction(diag.line, owner, "rule2", tuple(sorted(affected))))

    new_lines = [replace(ln, status=status[ln.index]) for ln in sketch.lines] + [
        replace(s, status=status[s.index]) for s in synth
    ]
    out = replace(sketch, lines=tuple(new_lines), holes=())
    out = _fill_empty_blocks(out)
    return with_holes(out)


def _fill_empty_blocks(sketch: Sketch) -> Sketch:
    """Give every live block whose body was entirely commented out a ``sorry``."""
    tree = _Tree(sketch)
    extra: list[SketchLine] = []
    for ln in sketch.lines:
        if ln.synthetic or ln.status is not LineStatus.ACTIVE:
            continue
        is_header_last = ln.kind is LineKind.THEOREM_HEADER and OPENS_BY.search(ln.code)
        if ln.kind is LineKind.THEOREM_HEADER and not is_header_last:
            continue
        if not (_is_opener(ln.code) or is_header_last):
            continue
        kids = tree.children.get(ln.index, [])
        if not kids:
            continue
        if any(sketch.line(k).status is not LineStatus.MASKED_COMMENTED for k in kids):
            continue
        real = [k for k in kids if not sketch.line(k).synthetic]
        ind = sketch.line(real[0]).indent if real else ln.indent + 2
        desc = [d for d in tree.descendants(ln.index) if not sketch.line(d).synthetic]
        extra.append(
            SketchLine(
                index=len(sketch.lines) + len(extra) + 1,
                text=" " * ind + PLACEHOLDER_TACTIC,
                indent=ind,
                kind=LineKind.PLACEHOLDER,
                parent=ln.index,
                synthetic=True,
                anchor=max(desc) if desc else ln.index,
            )
        )
    if not extra:
        return sketch
    return replace(sketch, lines=sketch.lines + tuple(extra), holes=())


# ---------------------------------------------------------------- repair loop


@dataclass(frozen=True)
class RepairResult:
    sketch: Sketch
    verify: Any  # dsprover.verifier.VerifyResult of the final clean check
    active_history: tuple[frozenset[int], ...] = ()
    actions: tuple[MaskAction, ...] = ()


def repair_loop(
    sketch: Sketch,
    check: Callable[[str], Any],
    *,
    cap: int = DEFAULT_REPAIR_CAP,
    mask_rest_of_block: bool = False,
) -> RepairResult:
    """Verify, mask, repeat until clean.

    ``check`` maps rendered source text to a verify result exposing
    ``diagnostics`` and ``remaining_goals``. Raises :class:`SketchFailed`
    (with the partially repaired sketch attached) when errors persist at the
    cap or masking reaches a fixed point.
    """
    history = [sketch.active_set()]
    actions: list[MaskAction] = []
    iterations = 0
    while True:
        result = check(render(sketch).text)
        errors = [d for d in result.diagnostics if d.is_error]
        if not errors:
            done = attach_goals(replace(sketch, repair_iterations=iterations), result)
            return RepairResult(done, result, tuple(history), tuple(actions))
        if iterations >= cap:
            raise SketchFailed(
                f"errors remain after {cap} repair iterations", replace(sketch, repair_iterations=iterations)
            )
        try:
            masked = mask_errors(sketch, errors, mask_rest_of_block=mask_rest_of_block, actions=actions)
        except SketchFailed as exc:
            raise SketchFailed(str(exc), replace(sketch, repair_iterations=iterations)) from None
        if masked.status_vector() == sketch.status_vector():
            raise SketchFailed(
                "masking reached a fixed point with errors remaining",
                replace(sketch, repair_iterations=iterations),
            )
        iterations += 1
        sketch = masked
        history.append(sketch.active_set())


def match_goals(sketch: Sketch, result: Any) -> dict[int, Any]:
    """Pair each hole with the checker goal reported at its position."""
    goals = list(getattr(result, "remaining_goals", ()))
    by_pos = {(g.line, g.column): g for g in goals}
    out: dict[int, Any] = {}
    for k, h in enumerate(sketch.holes):
        g = by_pos.get((h.rendered_line, h.column))
        if g is None and len(goals) == len(sketch.holes):
            g = goals[k]
        if g is not None:
            out[h.hole_id] = g
    return out


def attach_goals(sketch: Sketch, result: Any) -> Sketch:
    """Copy pretty-printed goals from a verify result onto matching holes."""
    found = match_goals(sketch, result)
    holes = tuple(
        replace(h, goal_pretty=found[h.hole_id].goal_pretty) if h.hole_id in found else h for h in sketch.holes
    )
    return replace(sketch, holes=holes)


# ---------------------------------------------------------------- sketch generation

_FENCE = re.compile(r"```[ \t]*(?:lean4?|Lean4?)?[ \t]*\n(.*?)(?:```|\Z)", re.DOTALL)
_HEADER_DIRECTIVE = re.compile(r"^\s*(import|open|set_option|universe|namespace|section)\b")


def _squash(s: str) -> str:
    return " ".join(s.split())


def _statement_lines(stmt: FormalStatement) -> list[str]:
    want = stmt.statement.rstrip()
    if not OPENS_BY.search(want):
        want += " by" if want.endswith(":=") else " := by"
    return want.split("\n")


def normalize_sketch_output(answer: str, stmt: FormalStatement) -> tuple[str, tuple[str, ...]]:
    """Extract the sketch source from a sketch-model answer.

    Returns ``(source, flags)``. The source starts at the theorem statement;
    preamble directives are dropped since the checker session supplies the
    header. If the model altered the statement, the original one is restored.
    """
    flags: list[str] = []
    stmt_lines = _statement_lines(stmt)
    blocks = [m.group(1) for m in _FENCE.finditer(answer)]
    body = next((b for b in reversed(blocks) if any(THEOREM_START.match(x) for x in b.split("\n"))), None)
    if body is None:
        # The prompt leaves a code fence open, so a bare answer continues the statement.
        if answer.lstrip().startswith("```") and blocks:
            cont = blocks[0]
        else:
            cont = answer.split("```", 1)[0]
        body = "\n".join(stmt_lines) + "\n" + cont.strip("\n")
        flags.append("continuation")

    lines = body.split("\n")
    start = next(i for i, ln in enumerate(lines) if THEOREM_START.match(ln))
    if any(ln.strip() for ln in lines[:start]):
        flags.append("preamble_dropped")
    end = start
    while end < len(lines) and not OPENS_BY.search(code_part(lines[end])):
        end += 1
    if end == len(lines):
        end = start
    given = "\n".join(lines[start: end + 1])
    if _squash(given.split(":=")[0]) != _squash("\n".join(stmt_lines).split(":=")[0]):
        flags.append("statement_restored")
    head = list(stmt_lines)
    m = OPENS_BY.search(code_part(lines[end]))
    tail = code_part(lines[end])[m.end():].strip() if m else ""
    if tail:
        head[-1] = head[-1].rstrip() + " " + tail
    rest = lines[end + 1:]
    while rest and not rest[-1].strip():
        rest.pop()
    return "\n".join(head + rest) + "\n", tuple(flags)


@dataclass(frozen=True)
class SketchDraft:
    """Raw sketch produced by the sketch model, before parsing."""

    source: str
    tokens: TokenUsage
    flags: tuple[str, ...] = ()


def run_sketch(
    stmt: FormalStatement,
    config: PhaseConfig,
    draft_text: Optional[str],
    gateway: Any,
    *,
    seed: Optional[int] = None,
    sampling: Optional[SamplingParams] = None,
) -> SketchDraft:
    from dsprover.gateway import strip_thinking
    from dsprover.prompts import render_sketch_prompt

    params = sampling or config.sampling_for(config.sketch_model, SKETCH_SAMPLING)
    params = params.with_(n=1, seed=seed if seed is not None else params.seed)
    messages = render_sketch_prompt(stmt, draft_text)
    completion = gateway.complete(config.sketch_model, messages, params)[0]
    markers = gateway.endpoint(config.sketch_model).thinking_markers
    answer = strip_thinking(completion.text, markers)
    tokens = TokenUsage.for_model(
        config.sketch_model, answer=completion.answer_tokens, thinking=completion.thinking_tokens
    )
    source, flags = normalize_sketch_output(answer, stmt)
    return SketchDraft(source, tokens, flags)
