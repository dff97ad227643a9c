"""Workflow driver that runs the phases of an attempt as a buffered pipeline.

One attempt moves through three phases. :func:`Orchestrator.run_attempt`
runs them back to back; :class:`Pipeline` runs many attempts with one worker
pool per phase joined by bounded queues, so drafting for one attempt overlaps
with proving for another. Attempts are retried up to ``k`` times per
configuration (pass@k), and an :class:`EnsemblePlan` chains configurations
until one of them proves the statement. Every finished attempt is appended
to an :class:`AttemptStore`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence

from dsprover.core import (
    PROVER_SAMPLING,
    AttemptRecord,
    Deadline,
    FormalStatement,
    Outcome,
    PhaseConfig,
    TokenUsage,
    new_attempt_id,
    sum_usage,
)
from dsprover.draft import Draft, DraftFailed, run_draft
from dsprover.errors import DSProverError, SketchFailed, StoreError, VerifierUnavailable
from dsprover.search import (
    SYMBOLIC_TACTICS,
    GatewayProposer,
    SearchBudget,
    SubgoalResult,
    SubgoalStatus,
    assemble_proof,
    prove_subgoal,
)
from dsprover.sketch import (
    DEFAULT_REPAIR_CAP,
    Sketch,
    match_goals,
    parse_sketch,
    repair_loop,
    rewrite_placeholders,
    run_sketch,
)

log = logging.getLogger(__name__)

DEFAULT_DEADLINE = 2400.0
DEFAULT_CAPACITY = 32
DEFAULT_FANOUT = 8
PHASES = ("draft", "sketch", "prove")


def derive_seed(*parts: Any) -> int:
    """Stable 31-bit seed from arbitrary labels."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class EnsembleStage:
    config: PhaseConfig
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("stage attempt budget k must be >= 1")


@dataclass(frozen=True)
class EnsemblePlan:
    """Configurations tried one after another on each statement."""

    stages: tuple[EnsembleStage, ...]
    stop_on_success: bool = True
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("an ensemble plan needs at least one stage")

    @classmethod
    def single(cls, config: PhaseConfig, k: int, stop_on_success: bool = True) -> "EnsemblePlan":
        return cls((EnsembleStage(config, k),), stop_on_success, config.config_hash)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "stop_on_success": self.stop_on_success,
            "stages": [{"config": s.config.to_dict(), "k": s.k} for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EnsemblePlan":
        return cls(
            tuple(EnsembleStage(PhaseConfig.from_dict(s["config"]), int(s["k"])) for s in d["stages"]),
            bool(d.get("stop_on_success", True)),
            d.get("name", ""),
        )


# ---------------------------------------------------------------- attempt store


class AttemptStore:
    """Append-only JSON-lines file of attempt records.

    Each append is flushed and fsynced under a lock, so the file is always a
    sequence of whole records, possibly followed by one torn line left by a
    crash. Opening the store for writing cuts that torn tail off.
    """

    def __init__(self, path: Path | str, *, fsync: bool = True) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._records: list[AttemptRecord] = []
        self._ids: set[str] = set()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            good_bytes = 0
            for rec, end in _scan(self.path):
                self._remember(rec)
                good_bytes = end
            if good_bytes != self.path.stat().st_size:
                log.warning("truncating torn tail of %s at byte %d", self.path, good_bytes)
                with open(self.path, "r+b") as f:
                    f.truncate(good_bytes)
        else:
            self.path.touch()

    def _remember(self, rec: AttemptRecord) -> None:
        self._records.append(rec)
        self._ids.add(rec.attempt_id)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, attempt_id: str) -> bool:
        return attempt_id in self._ids

    def records(self) -> list[AttemptRecord]:
        with self._lock:
            return list(self._records)

    def solved_statements(self) -> set[str]:
        with self._lock:
            return {r.statement_id for r in self._records if r.solved}

    def append(self, record: AttemptRecord) -> bool:
        """Persist ``record``; returns False (and writes nothing) for a known attempt id."""
        line = json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"
        with self._lock:
            if record.attempt_id in self._ids:
                return False
            try:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line)
                    f.flush()
                    if self.fsync:
                        os.fsync(f.fileno())
            except OSError as exc:
                raise StoreError(f"cannot append to {self.path}: {exc}") from exc
            self._remember(record)
            return True


def _scan(path: Path) -> Iterator[tuple[AttemptRecord, int]]:
    """Yield whole records with the byte offset just past each one.

    A damaged final line is treated as a torn write and ends the scan; a
    damaged line followed by more data is corruption and raises.
    """
    offset = 0
    with open(path, "rb") as f:
        raws = f.read().split(b"\n")
    tail = raws.pop()  # bytes after the last newline, normally empty
    for i, raw in enumerate(raws):
        last = i == len(raws) - 1 and not tail
        text = raw.decode("utf-8", errors="replace").strip()
        if text:
            try:
                rec = AttemptRecord.from_dict(json.loads(text))
            except (ValueError, KeyError, TypeError) as exc:
                if last:
                    return
                raise StoreError(f"{path}:{i + 1}: unreadable attempt record: {exc}") from exc
            offset += len(raw) + 1
            yield rec, offset
        else:
            offset += len(raw) + 1


def read_records(path: Path | str) -> list[AttemptRecord]:
    """Read-only load: every whole record, ignoring a torn or in-progress tail."""
    p = Path(path)
    if not p.exists():
        raise StoreError(f"attempt store {p} does not exist")
    return [rec for rec, _ in _scan(p)]


# ---------------------------------------------------------------- stage buffer


class StageBuffer:
    """Bounded per-phase queues of ``(statement_id, attempt_id, payload)``.

    ``put`` blocks while a queue is full, which throttles upstream phases.
    Each attempt may enter each phase's queue once; a second entry raises.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, phases: Sequence[str] = PHASES) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.queues: dict[str, queue.Queue] = {p: queue.Queue(maxsize=capacity) for p in phases}
        self._entered: set[tuple[str, str]] = set()
        self._lock = threading.Lock()

    def put(self, phase: str, statement_id: str, attempt_id: str, payload: Any) -> None:
        with self._lock:
            key = (phase, attempt_id)
            if key in self._entered:
                raise RuntimeError(f"attempt {attempt_id} entered phase {phase} twice")
            self._entered.add(key)
        self.queues[phase].put((statement_id, attempt_id, payload))

    def close(self, phase: str, workers: int) -> None:
        for _ in range(workers):
            self.queues[phase].put(None)

    def get(self, phase: str) -> Optional[tuple[str, str, Any]]:
        return self.queues[phase].get()

    def entered(self, phase: str) -> int:
        with self._lock:
            return sum(1 for p, _ in self._entered if p == phase)


# ---------------------------------------------------------------- one attempt


@dataclass
class _Job:
    """Mutable working state of one attempt as it moves through the phases."""

    stmt: FormalStatement
    config: PhaseConfig
    k_index: int
    deadline: Deadline
    attempt_id: str
    started_at: float
    t0: float
    draft: Optional[Draft] = None
    sketch: Optional[Sketch] = None
    session: Any = None
    verify: Any = None
    tokens: list[TokenUsage] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


class Orchestrator:
    """Runs workflow attempts against a model gateway and a checker.

    ``seeded`` derives an explicit sampling seed for every model request from
    the statement together with the phase and attempt labels. Replays are
    then exact and distinct attempts never share a request fingerprint.
    Two ensemble stages that issue the same draft request reuse one response.
    """

    def __init__(
        self,
        gateway: Any,
        verifier: Any,
        *,
        budget: SearchBudget = SearchBudget(),
        symbolic_tactics: Sequence[str] = SYMBOLIC_TACTICS,
        repair_cap: int = DEFAULT_REPAIR_CAP,
        mask_rest_of_block: bool = False,
        require_intact_subgoals: bool = False,
        attempt_sample_cap: Optional[int] = None,
        prover_prompt: str = "{state}",
        store: Optional[AttemptStore] = None,
        seeded: bool = True,
        fanout: int = 1,
        capacity: int = DEFAULT_CAPACITY,
        parallelism: int = 1,
        wall_clock: Callable[[], float] = time.time,
        timer: Callable[[], float] = time.monotonic,
    ) -> None:
        if fanout < 1 or parallelism < 1:
            raise ValueError("fanout and parallelism must be >= 1")
        self.gateway = gateway
        self.verifier = verifier
        self.budget = budget
        self.symbolic_tactics = tuple(symbolic_tactics)
        self.repair_cap = repair_cap
        self.mask_rest_of_block = mask_rest_of_block
        self.require_intact_subgoals = require_intact_subgoals
        self.attempt_sample_cap = attempt_sample_cap
        self.prover_prompt = prover_prompt
        self.store = store
        self.seeded = seeded
        self.fanout = fanout
        self.capacity = capacity
        self.parallelism = parallelism
        self.wall_clock = wall_clock
        self.timer = timer
        self._persist_lock = threading.Lock()

    # ---- seeds

    def _seed(self, *parts: Any) -> Optional[int]:
        return derive_seed(*parts) if self.seeded else None

    # ---- phases

    def _start(self, stmt: FormalStatement, config: PhaseConfig, k_index: int, deadline: Any) -> _Job:
        if not isinstance(deadline, Deadline):
            deadline = Deadline(float(deadline), clock=self.timer)
        return _Job(
            stmt,
            config,
            k_index,
            deadline,
            new_attempt_id(stmt.id, config.config_hash, k_index),
            self.wall_clock(),
            self.timer(),
        )

    def _finish(self, job: _Job, outcome: Outcome, *, cause: str = "", proof_text: Optional[str] = None,
                subgoals: Sequence[SubgoalResult] = (), flags: Iterable[str] = ()) -> AttemptRecord:
        if job.session is not None:
            closer = getattr(self.verifier, "release", None)
            if closer is not None:
                closer(job.session)
        n_holes = len(job.sketch.holes) if job.sketch is not None else 0
        return AttemptRecord(
            attempt_id=job.attempt_id,
            statement_id=job.stmt.id,
            config=job.config,
            outcome=outcome,
            k_index=job.k_index,
            draft=job.draft,
            sketch=job.sketch,
            proof_text=proof_text,
            tokens=sum_usage(job.tokens + [s.tokens for s in subgoals]),
            wall_clock=round(self.timer() - job.t0, 6),
            started_at=job.started_at,
            prover_samples=sum(s.samples_used for s in subgoals),
            prover_sample_bound=n_holes * self.budget.sample_bound,
            subgoals=tuple(subgoals),
            cause=cause,
            flags=tuple(dict.fromkeys(list(job.flags) + list(flags))),
        )

    def phase_draft(self, job: _Job) -> Optional[AttemptRecord]:
        """Produce the draft, or a terminal record. Skipped when the config has no draft model."""
        cfg = job.config
        if cfg.draft_model is None:
            return None
        seed = self._seed(job.stmt.id, "draft", cfg.draft_model, cfg.draft_format.value,
                          cfg.use_informal_proof, job.k_index)
        try:
            job.draft = run_draft(job.stmt, cfg, self.gateway, seed=seed)
        except DraftFailed as exc:
            job.tokens.append(exc.tokens)
            return self._finish(job, Outcome.DRAFT_FAILED, cause=str(exc))
        except DSProverError as exc:
            return self._finish(job, Outcome.DRAFT_FAILED, cause=f"{type(exc).__name__}: {exc}")
        job.tokens.append(job.draft.tokens)
        if job.deadline.expired:
            return self._finish(job, Outcome.TIMEOUT, cause="deadline expired after draft")
        return None

    def phase_sketch(self, job: _Job) -> Optional[AttemptRecord]:
        """Generate the sketch and repair it against the checker; afterwards the holes carry goals."""
        cfg = job.config
        seed = self._seed(job.stmt.id, "sketch", cfg.sketch_model, job.k_index)
        draft_text = job.draft.text if job.draft is not None else None
        try:
            raw = run_sketch(job.stmt, cfg, draft_text, self.gateway, seed=seed)
        except DSProverError as exc:
            return self._finish(job, Outcome.SKETCH_FAILED, cause=f"{type(exc).__name__}: {exc}")
        job.tokens.append(raw.tokens)
        job.flags.extend(raw.flags)
        try:
            job.session = self.verifier.open_session(job.stmt.header)
        except VerifierUnavailable as exc:
            return self._finish(job, Outcome.SKETCH_FAILED, cause=f"verifier_unavailable: {exc}")
        try:
            job.sketch = rewrite_placeholders(parse_sketch(raw.source, job.stmt.id))
        except ValueError as exc:
            return self._finish(job, Outcome.SKETCH_FAILED, cause=f"unparseable sketch: {exc}")

        def check(text: str):
            r = self.verifier.verify(job.session, text, job.deadline.remaining)
            job.deadline.charge(r.elapsed)
            return r

        try:
            repaired = repair_loop(
                job.sketch, check, cap=self.repair_cap, mask_rest_of_block=self.mask_rest_of_block
            )
        except SketchFailed as exc:
            if exc.sketch is not None:
                job.sketch = exc.sketch
            outcome = Outcome.TIMEOUT if job.deadline.expired else Outcome.SKETCH_FAILED
            return self._finish(job, outcome, cause=str(exc))
        except VerifierUnavailable as exc:
            return self._finish(job, Outcome.SKETCH_FAILED, cause=f"verifier_unavailable: {exc}")
        job.sketch, job.verify = repaired.sketch, repaired.verify
        if job.deadline.expired:
            return self._finish(job, Outcome.TIMEOUT, cause="deadline expired during sketch repair")
        return None

    def phase_prove(self, job: _Job) -> AttemptRecord:
        """Search every hole, then splice and re-verify."""
        assert job.sketch is not None
        cfg = job.config
        proposer = None
        if cfg.prover_model is not None:
            sampling = cfg.sampling_for(cfg.prover_model, PROVER_SAMPLING)
            proposer = GatewayProposer(self.gateway, cfg.prover_model, sampling, self.prover_prompt)
        goals = match_goals(job.sketch, job.verify)
        results: list[SubgoalResult] = []
        spent = 0
        capped = False
        for hole in job.sketch.holes:
            goal = goals.get(hole.hole_id)
            if goal is None:
                results.append(SubgoalResult(hole.hole_id, SubgoalStatus.NO_EXPANDABLE_NODES, flags=("goal_unmatched",)))
                continue
            if job.deadline.expired:
                results.append(SubgoalResult(hole.hole_id, SubgoalStatus.TIMEOUT))
                continue
            if self.attempt_sample_cap is not None and spent >= self.attempt_sample_cap:
                capped = True
                results.append(SubgoalResult(hole.hole_id, SubgoalStatus.EXHAUSTED, flags=("skipped",)))
                continue
            state = self.verifier.goal_handle(job.session, goal)
            try:
                r = prove_subgoal(
                    hole,
                    state,
                    job.session,
                    self.verifier,
                    self.budget,
                    proposer,
                    self.symbolic_tactics,
                    deadline=job.deadline,
                    seed=derive_seed(job.stmt.id, cfg.config_hash, job.k_index, hole.hole_id),
                )
            except VerifierUnavailable as exc:
                return self._finish(job, Outcome.PARTIAL, cause=f"verifier_unavailable: {exc}", subgoals=results)
            spent += r.samples_used
            results.append(r)
        if any(r.status is SubgoalStatus.TIMEOUT for r in results):
            asm = assemble_proof(job.sketch, _unproved(results))
            return self._finish(job, Outcome.TIMEOUT, cause="deadline expired during proof search",
                                proof_text=asm.proof_text, subgoals=results)
        remaining = job.deadline.remaining
        asm = assemble_proof(
            job.sketch, results, self.verifier, job.session,
            timeout=remaining, require_intact_subgoals=self.require_intact_subgoals,
        )
        if asm.verify is not None:
            job.deadline.charge(asm.verify.elapsed)
        outcome = asm.outcome
        cause = ""
        if outcome is not Outcome.PROVED:
            if capped:
                outcome, cause = Outcome.BUDGET_EXHAUSTED, "attempt sample cap reached"
            elif asm.verify is not None and asm.verify.timed_out:
                outcome, cause = Outcome.TIMEOUT, "final verification timed out"
        return self._finish(job, outcome, cause=cause, proof_text=asm.proof_text, subgoals=results, flags=asm.flags)

    # ---- public operations

    def run_attempt(
        self, stmt: FormalStatement, config: PhaseConfig, deadline: Any = DEFAULT_DEADLINE, k_index: int = 0
    ) -> AttemptRecord:
        """Run one attempt through all phases; any phase failure ends it early."""
        job = self._start(stmt, config, k_index, deadline)
        for phase in (self.phase_draft, self.phase_sketch):
            done = phase(job)
            if done is not None:
                return done
        return self.phase_prove(job)

    def _persist(self, rec: AttemptRecord) -> None:
        if self.store is not None:
            with self._persist_lock:
                self.store.append(rec)

    def _pending(self, stmt: FormalStatement, config: PhaseConfig, k: int) -> list[int]:
        if self.store is None:
            return list(range(k))
        return [i for i in range(k) if new_attempt_id(stmt.id, config.config_hash, i) not in self.store]

    def run_pass_at_k(
        self,
        stmt: FormalStatement,
        config: PhaseConfig,
        k: int,
        deadline: float = DEFAULT_DEADLINE,
        *,
        stop_on_success: bool = True,
    ) -> tuple[bool, list[AttemptRecord]]:
        """Up to ``k`` independent attempts, in waves of ``fanout`` concurrent ones.

        With ``stop_on_success`` no wave starts after one that proved the
        statement. Attempt ids already in the store are skipped (resume).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        todo = self._pending(stmt, config, k)
        out: list[AttemptRecord] = []
        solved = False
        for w in range(0, len(todo), self.fanout):
            wave = todo[w: w + self.fanout]
            if len(wave) == 1:
                recs = [self.run_attempt(stmt, config, deadline, wave[0])]
            else:
                recs = Pipeline(self, capacity=self.capacity, workers=len(wave)).run(
                    [(stmt, config, i, deadline) for i in wave]
                )
            for rec in recs:
                self._persist(rec)
                out.append(rec)
                solved = solved or rec.solved
            if solved and stop_on_success:
                break
        return solved, out

    def run_ensemble(
        self, stmt: FormalStatement, plan: EnsemblePlan, deadline: float = DEFAULT_DEADLINE
    ) -> tuple[Optional[int], list[AttemptRecord]]:
        """Run the plan's stages in order; returns the 1-based index of the first proving stage."""
        solved_by: Optional[int] = None
        out: list[AttemptRecord] = []
        for i, stage in enumerate(plan.stages, start=1):
            solved, recs = self.run_pass_at_k(
                stmt, stage.config, stage.k, deadline, stop_on_success=plan.stop_on_success
            )
            out.extend(recs)
            if solved and solved_by is None:
                solved_by = i
            if solved_by is not None and plan.stop_on_success:
                break
        return solved_by, out

    def run_benchmark(
        self,
        problems: Sequence[FormalStatement],
        plan: EnsemblePlan,
        deadline: float = DEFAULT_DEADLINE,
        *,
        resume: bool = False,
        progress: Optional[Callable[[str, Optional[int], int], None]] = None,
    ) -> dict[str, Optional[int]]:
        """Run the plan on every problem, ``parallelism`` statements at a time.

        On resume, statements already proved in the store are skipped.
        Returns ``solved_by`` per statement id (None when unsolved or skipped).
        """
        skip = self.store.solved_statements() if (resume and self.store is not None) else set()
        todo = [p for p in problems if p.id not in skip]
        result: dict[str, Optional[int]] = {p.id: None for p in problems}

        def one(p: FormalStatement) -> tuple[str, Optional[int], int]:
            by, recs = self.run_ensemble(p, plan, deadline)
            return p.id, by, len(recs)

        if self.parallelism == 1:
            outcomes = map(one, todo)
        else:
            pool = ThreadPoolExecutor(max_workers=self.parallelism)
            outcomes = pool.map(one, todo)
        try:
            for sid, by, n in outcomes:
                result[sid] = by
                if progress is not None:
                    progress(sid, by, n)
        finally:
            if self.parallelism != 1:
                pool.shutdown(wait=True)
        return result


def _unproved(results: Sequence[SubgoalResult]) -> list[SubgoalResult]:
    """Results with every hole treated as open, for rendering a partial proof."""
    return [SubgoalResult(r.hole_id, r.status if not r.proved else SubgoalStatus.EXHAUSTED) for r in results]


# ---------------------------------------------------------------- pipeline


class Pipeline:
    """Phase worker pools connected by a :class:`StageBuffer`.

    Each phase has ``workers`` threads. An attempt's sketch work starts only
    after its draft finished, and its proof search only after its sketch
    repair finished; attempts otherwise interleave freely. Records come back
    in submission order.
    """

    def __init__(self, orch: Orchestrator, *, capacity: int = DEFAULT_CAPACITY, workers: int = DEFAULT_FANOUT) -> None:
        self.orch = orch
        self.buffer = StageBuffer(capacity)
        self.workers = max(1, workers)

    def run(self, jobs: Sequence[tuple[FormalStatement, PhaseConfig, int, Any]]) -> list[AttemptRecord]:
        done: dict[str, AttemptRecord] = {}
        done_lock = threading.Lock()
        errors: list[BaseException] = []
        order = []
        nxt = {"draft": "sketch", "sketch": "prove"}
        step = {
            "draft": self.orch.phase_draft,
            "sketch": self.orch.phase_sketch,
        }

        def finish(aid: str, rec: AttemptRecord) -> None:
            with done_lock:
                done[aid] = rec

        def worker(phase: str) -> None:
            while True:
                item = self.buffer.get(phase)
                if item is None:
                    return
                sid, aid, job = item
                try:
                    if phase == "prove":
                        finish(aid, self.orch.phase_prove(job))
                        continue
                    rec = step[phase](job)
                    if rec is not None:
                        finish(aid, rec)
                    else:
                        self.buffer.put(nxt[phase], sid, aid, job)
                except BaseException as exc:  # surfaced after the pipeline drains
                    errors.append(exc)
                    finish(aid, None)  # type: ignore[arg-type]

        threads = {
            p: [threading.Thread(target=worker, args=(p,), daemon=True) for _ in range(self.workers)] for p in PHASES
        }
        for ts in threads.values():
            for t in ts:
                t.start()
        for stmt, config, k_index, deadline in jobs:
            job = self.orch._start(stmt, config, k_index, deadline)
            order.append(job.attempt_id)
            self.buffer.put("draft", stmt.id, job.attempt_id, job)
        for p in PHASES:
            self.buffer.close(p, self.workers)
            for t in threads[p]:
                t.join()
        if errors:
            raise errors[0]
        return [done[a] for a in order]
