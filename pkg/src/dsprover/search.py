"""Budgeted best-first tactic search for sketch holes, and proof assembly.

Each hole is searched under one or two strategies (hinted hypotheses only,
then all hypotheses). A strategy runs several independent attempts; an
attempt is a best-first search whose frontier is ordered by
``cum_logprob / depth ** exponent`` with ties going to the node inserted
first. Expanding a node tries the symbolic tactic list in order, then one
batched prover call of ``width`` samples.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Protocol, Sequence

from dsprover.core import PROVER_SAMPLING, Deadline, Outcome, SamplingParams, TokenUsage
from dsprover.errors import DSProverError
from dsprover.sketch import PLACEHOLDER_TOKEN, LineKind, LineStatus, Sketch, Strategy, SubgoalHole, code_part
from dsprover.verifier import TacticOutcome, Verifier, VerifierSession

log = logging.getLogger(__name__)

SYMBOLIC_TACTICS: tuple[str, ...] = (
    "rfl",
    "linarith",
    "nlinarith",
    "ring",
    "positivity",
    "omega",
    "ring_nf",
    "ring_nf at *",
    "simp",
    "simp_all",
    "field_simp",
    "field_simp [*] at *",
    "norm_num",
    "norm_num [*] at *",
    "norm_cast",
    "norm_cast at *",
)

SPLICE_MISMATCH = "splice_mismatch"
PROVER_UNAVAILABLE = "prover_unavailable"
SUBGOALS_COMMENTED = "subgoals_commented"


def clear_prefix(hints: Sequence[str]) -> str:
    return "clear * - " + " ".join(hints)


@dataclass(frozen=True)
class SearchBudget:
    attempts: int = 8
    width: int = 8
    tree_size: int = 64
    beam: int = 4
    per_call_timeout: float = 60.0
    subgoal_wall_clock: Optional[float] = None
    score_exponent: float = 1.0
    loop_guard: bool = True

    def __post_init__(self) -> None:
        for name in ("attempts", "width", "tree_size", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.beam > self.width:
            raise ValueError("beam must not exceed width")

    @property
    def sample_bound(self) -> int:
        return self.attempts * self.width * self.tree_size

    def split(self, strategies: Sequence[Strategy]) -> list[tuple[Strategy, int]]:
        """Attempts per strategy: hinted gets half (rounded down), the rest goes to all-hypotheses."""
        if list(strategies) == [Strategy.HINTED_ONLY, Strategy.ALL_HYPOTHESES]:
            hinted = self.attempts // 2
            out = [(Strategy.HINTED_ONLY, hinted)] if hinted else []
            return out + [(Strategy.ALL_HYPOTHESES, self.attempts - hinted)]
        return [(s, self.attempts // len(strategies)) for s in strategies]

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempts": self.attempts,
            "width": self.width,
            "tree_size": self.tree_size,
            "beam": self.beam,
            "per_call_timeout": self.per_call_timeout,
            "subgoal_wall_clock": self.subgoal_wall_clock,
            "score_exponent": self.score_exponent,
            "loop_guard": self.loop_guard,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SearchBudget":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class TacticSource(str, Enum):
    SYMBOLIC = "symbolic"
    MODEL = "model"


@dataclass(frozen=True)
class SearchNode:
    node_id: int
    state: Any
    goal_pretty: str
    parent: Optional[int] = None
    tactic: str = ""
    tactic_source: TacticSource = TacticSource.SYMBOLIC
    logprob: float = 0.0
    cum_logprob: float = 0.0
    depth: int = 0
    score: float = 0.0


def score(cum_logprob: float, depth: int, exponent: float = 1.0) -> float:
    """Length-normalised score; the root (depth 0) scores 0."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth == 0:
        return 0.0
    return cum_logprob / depth**exponent


class SubgoalStatus(str, Enum):
    PROVED = "proved"
    EXHAUSTED = "exhausted"
    TIMEOUT = "timeout"
    NO_EXPANDABLE_NODES = "no_expandable_nodes"


@dataclass(frozen=True)
class Proposal:
    tactic: str
    logprob: float = 0.0


class TacticProposer(Protocol):
    model_id: str

    def propose(self, goal_pretty: str, n: int, seed: Optional[int]) -> tuple[list[Proposal], TokenUsage]: ...


class GatewayProposer:
    """Step prover behind the model gateway: state text in, one tactic line out."""

    def __init__(
        self,
        gateway: Any,
        model_id: str,
        sampling: SamplingParams = PROVER_SAMPLING,
        prompt_template: str = "{state}",
    ) -> None:
        self.gateway = gateway
        self.model_id = model_id
        self.sampling = sampling
        self.prompt_template = prompt_template

    def propose(self, goal_pretty: str, n: int, seed: Optional[int]) -> tuple[list[Proposal], TokenUsage]:
        from dsprover.gateway import strip_thinking

        params = self.sampling.with_(n=n, seed=seed)
        messages = [{"role": "user", "content": self.prompt_template.format(state=goal_pretty)}]
        outs = self.gateway.complete(self.model_id, messages, params)
        proposals = []
        total = 0
        for c in outs:
            total += c.completion_tokens
            lines = [ln.strip() for ln in strip_thinking(c.text).split("\n") if ln.strip()]
            if lines:
                proposals.append(Proposal(lines[0], c.logprob if c.logprob is not None else 0.0))
        return proposals, TokenUsage.for_model(self.model_id, prover=total)


@dataclass
class SearchStats:
    """Instrumentation counters for one subgoal search."""

    expansions_per_attempt: list[int] = field(default_factory=list)
    samples_per_expansion: list[int] = field(default_factory=list)
    children_per_expansion: list[int] = field(default_factory=list)
    expansion_trace: list[tuple[int, int, float]] = field(default_factory=list)  # (attempt, node_id, score)

    @property
    def model_samples(self) -> int:
        return sum(self.samples_per_expansion)


@dataclass(frozen=True)
class SubgoalResult:
    hole_id: int
    status: SubgoalStatus
    tactics: tuple[str, ...] = ()
    strategy_used: Optional[Strategy] = None
    prefix: tuple[str, ...] = ()
    samples_used: int = 0
    nodes_expanded: int = 0
    attempts_run: int = 0
    flags: tuple[str, ...] = ()
    tokens: TokenUsage = field(default_factory=TokenUsage)

    def __post_init__(self) -> None:
        object.__setattr__(self, "status", SubgoalStatus(self.status))
        if self.strategy_used is not None:
            object.__setattr__(self, "strategy_used", Strategy(self.strategy_used))
        object.__setattr__(self, "tactics", tuple(self.tactics))
        object.__setattr__(self, "prefix", tuple(self.prefix))
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def proved(self) -> bool:
        return self.status is SubgoalStatus.PROVED

    @property
    def tactic_sequence(self) -> tuple[str, ...]:
        return self.prefix + self.tactics

    def to_dict(self) -> dict[str, Any]:
        return {
            "hole_id": self.hole_id,
            "status": self.status.value,
            "tactics": list(self.tactics),
            "strategy_used": self.strategy_used.value if self.strategy_used else None,
            "prefix": list(self.prefix),
            "samples_used": self.samples_used,
            "nodes_expanded": self.nodes_expanded,
            "attempts_run": self.attempts_run,
            "flags": list(self.flags),
            "tokens": self.tokens.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SubgoalResult":
        return cls(
            hole_id=int(d["hole_id"]),
            status=SubgoalStatus(d["status"]),
            tactics=tuple(d.get("tactics", ())),
            strategy_used=Strategy(d["strategy_used"]) if d.get("strategy_used") else None,
            prefix=tuple(d.get("prefix", ())),
            samples_used=int(d.get("samples_used", 0)),
            nodes_expanded=int(d.get("nodes_expanded", 0)),
            attempts_run=int(d.get("attempts_run", 0)),
            flags=tuple(d.get("flags", ())),
            tokens=TokenUsage.from_dict(d.get("tokens", {})),
        )


class _AttemptEnd(str, Enum):
    SOLVED = "solved"
    FRONTIER_EMPTY = "frontier_empty"
    TREE_SIZE = "tree_size"
    TIMEOUT = "timeout"


class SubgoalSearch:
    """State shared by the attempts of one subgoal search."""

    def __init__(
        self,
        verifier: Verifier,
        session: VerifierSession,
        budget: SearchBudget,
        proposer: Optional[TacticProposer],
        symbolic_tactics: Sequence[str],
        deadline: Optional[Deadline],
        seed: int,
    ) -> None:
        self.verifier = verifier
        self.session = session
        self.budget = budget
        self.proposer = proposer
        self.symbolic = list(symbolic_tactics)
        self.deadline = deadline
        self.seed = seed
        self.stats = SearchStats()
        self.tokens = TokenUsage()
        self.flags: list[str] = []

    def _timeout(self) -> float:
        t = self.budget.per_call_timeout
        if self.deadline is not None:
            t = min(t, max(self.deadline.remaining, 0.0))
        return t

    def _expired(self) -> bool:
        return self.deadline is not None and self.deadline.expired

    def _apply(self, state: Any, tactic: str):
        r = self.verifier.apply_tactic(self.session, state, tactic, self._timeout())
        if self.deadline is not None:
            self.deadline.charge(r.elapsed)
        return r

    def _sample(self, goal: str, attempt: int, expansion: int) -> list[Proposal]:
        if self.proposer is None:
            return []
        seed = self.seed * 1_000_003 + attempt * 10_007 + expansion
        try:
            props, used = self.proposer.propose(goal, self.budget.width, seed)
        except DSProverError as exc:
            log.warning("prover unavailable, continuing with symbolic tactics only: %s", exc)
            self.flags.append(PROVER_UNAVAILABLE)
            self.proposer = None
            return []
        self.tokens = self.tokens + used
        return props[: self.budget.width]

    def run_attempt(self, root_state: Any, root_goal: str, attempt: int) -> tuple[_AttemptEnd, tuple[str, ...]]:
        """One best-first search from ``root_state``; returns the solving tactics if any."""
        nodes: dict[int, SearchNode] = {}
        counter = itertools.count()
        root = SearchNode(next(counter), root_state, root_goal)
        nodes[root.node_id] = root
        frontier: list[tuple[float, int, int]] = [(-root.score, root.node_id, root.node_id)]
        expansions = 0
        try:
            while True:
                if self._expired():
                    return _AttemptEnd.TIMEOUT, ()
                if not frontier:
                    return _AttemptEnd.FRONTIER_EMPTY, ()
                if expansions >= self.budget.tree_size:
                    return _AttemptEnd.TREE_SIZE, ()
                _, _, nid = heapq.heappop(frontier)
                node = nodes[nid]
                expansions += 1
                self.stats.expansion_trace.append((attempt, nid, node.score))
                solved, children = self._expand(node, nodes, attempt, expansions)
                if solved is not None:
                    return _AttemptEnd.SOLVED, self._path(nodes, node) + (solved,)
                for ch in children:
                    ch = SearchNode(
                        next(counter), ch.state, ch.goal_pretty, ch.parent, ch.tactic, ch.tactic_source,
                        ch.logprob, ch.cum_logprob, ch.depth, ch.score,
                    )
                    nodes[ch.node_id] = ch
                    heapq.heappush(frontier, (-ch.score, ch.node_id, ch.node_id))
        finally:
            self.stats.expansions_per_attempt.append(expansions)

    @staticmethod
    def _path(nodes: Mapping[int, SearchNode], node: SearchNode) -> tuple[str, ...]:
        out = []
        while node.parent is not None:
            out.append(node.tactic)
            node = nodes[node.parent]
        return tuple(reversed(out))

    def _ancestor_goals(self, nodes: Mapping[int, SearchNode], node: SearchNode) -> set[str]:
        seen = {node.goal_pretty}
        while node.parent is not None:
            node = nodes[node.parent]
            seen.add(node.goal_pretty)
        return seen

    def _expand(
        self, node: SearchNode, nodes: Mapping[int, SearchNode], attempt: int, expansion: int
    ) -> tuple[Optional[str], list[SearchNode]]:
        guard = self._ancestor_goals(nodes, node) if self.budget.loop_guard else set()
        candidates: list[SearchNode] = []
        child_goals: set[str] = set()
        tried: set[str] = set()

        def consider(tactic: str, source: TacticSource, lp: float) -> Optional[str]:
            r = self._apply(node.state, tactic)
            if r.outcome is TacticOutcome.SOLVED:
                return tactic
            if r.outcome is TacticOutcome.NEW_STATE:
                if r.goal_pretty in guard or r.goal_pretty in child_goals:
                    return None
                child_goals.add(r.goal_pretty)
                cum = node.cum_logprob + lp
                depth = node.depth + 1
                candidates.append(
                    SearchNode(
                        -1, r.state, r.goal_pretty, node.node_id, tactic, source, lp, cum, depth,
                        score(cum, depth, self.budget.score_exponent),
                    )
                )
            return None

        for t in self.symbolic:
            if self._expired():
                break
            tried.add(t)
            done = consider(t, TacticSource.SYMBOLIC, 0.0)
            if done is not None:
                self._record(0, len(candidates))
                return done, []

        props = [] if self._expired() else self._sample(node.goal_pretty, attempt, expansion)
        n_samples = len(props)
        unique: list[Proposal] = []
        for p in props:
            if p.tactic not in tried:
                tried.add(p.tactic)
                unique.append(p)
        unique.sort(key=lambda p: -p.logprob)  # stable: equal logprobs keep sample order
        for p in unique:
            if self._expired():
                break
            done = consider(p.tactic, TacticSource.MODEL, p.logprob)
            if done is not None:
                self._record(n_samples, len(candidates))
                return done, []
        kept = candidates[: self.budget.beam]
        self._record(n_samples, len(kept))
        return None, kept

    def _record(self, samples: int, children: int) -> None:
        self.stats.samples_per_expansion.append(samples)
        self.stats.children_per_expansion.append(min(children, self.budget.beam))


def prove_subgoal(
    hole: SubgoalHole,
    state: Any,
    session: VerifierSession,
    verifier: Verifier,
    budget: SearchBudget = SearchBudget(),
    proposer: Optional[TacticProposer] = None,
    symbolic_tactics: Sequence[str] = SYMBOLIC_TACTICS,
    *,
    deadline: Optional[Deadline] = None,
    seed: int = 0,
    stats_out: Optional[list[SearchStats]] = None,
) -> SubgoalResult:
    """Search for a tactic sequence closing ``state`` (the hole's goal)."""
    if budget.subgoal_wall_clock is not None:
        deadline = deadline.child(budget.subgoal_wall_clock) if deadline else Deadline(budget.subgoal_wall_clock)
    search = SubgoalSearch(verifier, session, budget, proposer, symbolic_tactics, deadline, seed)
    goal = hole.goal_pretty or ""
    ends: list[_AttemptEnd] = []
    attempts_run = 0
    result: Optional[SubgoalResult] = None
    for strategy, n_attempts in budget.split(hole.strategies):
        prefix: tuple[str, ...] = ()
        root_state, root_goal = state, goal
        if strategy is Strategy.HINTED_ONLY:
            pre = clear_prefix(hole.hinted_hypotheses)
            r = search._apply(state, pre)
            if r.outcome is TacticOutcome.SOLVED:
                result = _done(hole, (), strategy, (pre,), search, attempts_run)
                break
            if r.outcome is not TacticOutcome.NEW_STATE:
                search.flags.append("clear_failed")
                continue
            prefix, root_state, root_goal = (pre,), r.state, r.goal_pretty
        for a in range(n_attempts):
            if search.proposer is None and a > 0:
                break  # without the prover every attempt would replay the same symbolic search
            attempts_run += 1
            end, tactics = search.run_attempt(root_state, root_goal, len(ends))
            ends.append(end)
            if end is _AttemptEnd.SOLVED:
                result = _done(hole, tactics, strategy, prefix, search, attempts_run)
                break
            if end is _AttemptEnd.TIMEOUT:
                break
        if result is not None or (ends and ends[-1] is _AttemptEnd.TIMEOUT):
            break
    if stats_out is not None:
        stats_out.append(search.stats)
    if result is not None:
        return result
    if any(e is _AttemptEnd.TIMEOUT for e in ends) or (deadline is not None and deadline.expired):
        status = SubgoalStatus.TIMEOUT
    elif ends and all(e is _AttemptEnd.FRONTIER_EMPTY for e in ends):
        status = SubgoalStatus.NO_EXPANDABLE_NODES
    else:
        status = SubgoalStatus.EXHAUSTED
    return SubgoalResult(
        hole.hole_id,
        status,
        samples_used=search.stats.model_samples,
        nodes_expanded=sum(search.stats.expansions_per_attempt),
        attempts_run=attempts_run,
        flags=tuple(dict.fromkeys(search.flags)),
        tokens=search.tokens,
    )


def _done(hole, tactics, strategy, prefix, search: SubgoalSearch, attempts_run: int) -> SubgoalResult:
    return SubgoalResult(
        hole.hole_id,
        SubgoalStatus.PROVED,
        tactics=tactics,
        strategy_used=strategy,
        prefix=prefix,
        samples_used=search.stats.model_samples,
        nodes_expanded=sum(search.stats.expansions_per_attempt),
        attempts_run=attempts_run,
        flags=tuple(dict.fromkeys(search.flags)),
        tokens=search.tokens,
    )


# ---------------------------------------------------------------- assembly


def splice(sketch: Sketch, results: Sequence[SubgoalResult]) -> str:
    """Replace each proved hole's placeholder with its tactic sequence."""
    by_id = {r.hole_id: r for r in results}
    lines = sketch.render().lines
    trailing = sketch.trailing_newline and lines and lines[-1] == ""
    if trailing:
        lines = lines[:-1]
    holes_by_line: dict[int, list[SubgoalHole]] = {}
    for h in sketch.holes:
        holes_by_line.setdefault(h.rendered_line, []).append(h)
    for rl in sorted(holes_by_line, reverse=True):
        text = lines[rl - 1]
        hs = sorted(holes_by_line[rl], key=lambda h: h.column, reverse=True)
        proved = [h for h in hs if h.hole_id in by_id and by_id[h.hole_id].proved]
        if not proved:
            continue
        code = code_part(text)
        standalone = len(hs) == 1 and PLACEHOLDER_TOKEN.fullmatch(code.strip()) is not None
        if standalone:
            seq = by_id[hs[0].hole_id].tactic_sequence
            pad = text[: len(text) - len(text.lstrip())]
            lines[rl - 1: rl] = [pad + t for t in seq] if seq else [pad + "skip"]
            continue
        for h in proved:
            seq = by_id[h.hole_id].tactic_sequence
            m = PLACEHOLDER_TOKEN.match(text, h.column)
            if m is None:
                raise ValueError(f"hole {h.hole_id} is not at its recorded column")
            text = text[: m.start()] + "(" + "; ".join(seq) + ")" + text[m.end():]
        lines[rl - 1] = text
    return "\n".join(lines) + ("\n" if trailing else "")


@dataclass(frozen=True)
class Assembly:
    proof_text: str
    outcome: Outcome
    flags: tuple[str, ...] = ()
    verify: Any = None


def assemble_proof(
    sketch: Sketch,
    results: Sequence[SubgoalResult],
    verifier: Optional[Verifier] = None,
    session: Optional[VerifierSession] = None,
    *,
    timeout: Optional[float] = None,
    require_intact_subgoals: bool = False,
) -> Assembly:
    """Splice proofs into the sketch and re-check the whole text.

    The outcome is ``proved`` only when every hole was proved and the final
    check is clean; a failing final check despite all holes proved is flagged
    ``splice_mismatch``. With ``require_intact_subgoals`` a sketch that lost a
    subgoal declaration to masking is never reported as proved.
    """
    if {r.hole_id for r in results} != {h.hole_id for h in sketch.holes}:
        raise ValueError("need exactly one result per hole")
    text = splice(sketch, results)
    if not all(r.proved for r in results):
        return Assembly(text, Outcome.PARTIAL)
    if require_intact_subgoals and commented_subgoals(sketch):
        return Assembly(text, Outcome.PARTIAL, (SUBGOALS_COMMENTED,))
    if verifier is None or session is None:
        raise ValueError("a verifier session is needed to confirm a complete proof")
    check = verifier.verify(session, text, timeout)
    if check.proved:
        return Assembly(text, Outcome.PROVED, (), check)
    return Assembly(text, Outcome.PARTIAL, (SPLICE_MISMATCH,), check)


def commented_subgoals(sketch: Sketch) -> list[int]:
    """Indices of subgoal declarations that masking commented out."""
    return [
        ln.index
        for ln in sketch.lines
        if ln.kind is LineKind.SUBGOAL_DECL and ln.status is LineStatus.MASKED_COMMENTED
    ]


def attempt_sample_bound(n_holes: int, budget: SearchBudget) -> int:
    return n_holes * budget.sample_bound

