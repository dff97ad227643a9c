"""Proof-checker backends.

Two implementations share the :class:`Verifier` protocol:

* :class:`ReplVerifier` drives a pool of checker REPL processes. Requests are
  JSON objects followed by a blank line on stdin, responses are JSON objects
  on stdout. Headers (the ``import``/``open`` preamble) are elaborated once per
  distinct header text and the resulting environment id is reused.
* :class:`MockVerifier` answers from a fixture file: pattern-based error rules
  for whole-source checks and a transition table for tactic application.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import queue
import re
import subprocess
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence

from dsprover.core import Diagnostic, Severity, short_hash
from dsprover.errors import ProtocolError, VerifierUnavailable

log = logging.getLogger(__name__)

TIMEOUT_MESSAGE = "timeout"


def header_fingerprint(header: str) -> str:
    norm = "\n".join(line.rstrip() for line in header.strip("\n").split("\n"))
    return hashlib.sha256(norm.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class VerifierSession:
    session_id: str
    environment_handle: Any
    header_fingerprint: str


@dataclass(frozen=True)
class Goal:
    goal_id: Any
    goal_pretty: str
    line: int = 0
    column: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"goal_id": self.goal_id, "goal_pretty": self.goal_pretty, "line": self.line, "column": self.column}


@dataclass(frozen=True)
class VerifyResult:
    diagnostics: tuple[Diagnostic, ...] = ()
    remaining_goals: tuple[Goal, ...] = ()
    elapsed: float = 0.0
    timed_out: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        object.__setattr__(self, "remaining_goals", tuple(self.remaining_goals))

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.is_error]

    @property
    def proved(self) -> bool:
        return not self.errors and not self.remaining_goals


class TacticOutcome(str, Enum):
    NEW_STATE = "new_state"
    SOLVED = "solved"
    FAILED = "failed"


@dataclass(frozen=True)
class TacticResult:
    outcome: TacticOutcome
    state: Any = None
    goal_pretty: str = ""
    message: str = ""
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.outcome is not TacticOutcome.FAILED


class Verifier(Protocol):
    def open_session(self, header: str) -> VerifierSession: ...

    def verify(self, session: VerifierSession, source: str, timeout: Optional[float] = None) -> VerifyResult: ...

    def apply_tactic(
        self, session: VerifierSession, state: Any, tactic: str, timeout: Optional[float] = None
    ) -> TacticResult: ...

    def close(self) -> None: ...


def empty_source_result() -> VerifyResult:
    return VerifyResult((Diagnostic(1, 0, Severity.ERROR, "empty source: no theorem"),))


def blank_imports(source: str) -> str:
    """Blank out ``import`` lines (the session header provides them) keeping line numbers."""
    return "\n".join("" if re.match(r"^\s*import\b", ln) else ln for ln in source.split("\n"))


# ---------------------------------------------------------------- wire protocol


def encode_request(payload: Mapping[str, Any]) -> str:
    """One request record: compact JSON, then a blank line."""
    return json.dumps(payload, ensure_ascii=False) + "\n\n"


def command_request(cmd: str, env: Optional[int]) -> dict[str, Any]:
    req: dict[str, Any] = {"cmd": cmd}
    if env is not None:
        req["env"] = env
    return req


def tactic_request(tactic: str, proof_state: int) -> dict[str, Any]:
    return {"tactic": tactic, "proofState": proof_state}


def decode_command_response(resp: Mapping[str, Any]) -> tuple[Optional[int], list[Diagnostic], list[Goal]]:
    """Read ``{env, messages[], sorries[]}``; positions use 1-based lines."""
    try:
        diags = []
        for m in resp.get("messages", []):
            pos = m.get("pos") or {"line": 1, "column": 0}
            end = m.get("endPos") or {}
            line = max(int(pos.get("line", 1)), 1)
            end_line = end.get("line")
            diags.append(
                Diagnostic(
                    line=line,
                    column=int(pos.get("column", 0)),
                    severity=Severity(m.get("severity", "error")),
                    message=str(m.get("data", "")),
                    end_line=max(int(end_line), line) if end_line is not None else None,
                )
            )
        goals = []
        for s in resp.get("sorries", []):
            pos = s.get("pos") or {}
            goals.append(
                Goal(
                    goal_id=s.get("proofState"),
                    goal_pretty=str(s.get("goal", "")),
                    line=int(pos.get("line", 0)),
                    column=int(pos.get("column", 0)),
                )
            )
        env = resp.get("env")
        return (int(env) if env is not None else None), diags, goals
    except (TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError(f"malformed command response: {exc}") from exc


def decode_tactic_response(resp: Mapping[str, Any]) -> tuple[TacticOutcome, Optional[int], str, str]:
    """Returns ``(outcome, proofState, goals_pretty, message)``."""
    if isinstance(resp.get("message"), str):
        return TacticOutcome.FAILED, None, "", resp["message"]
    errs = [m for m in resp.get("messages", []) if m.get("severity") == "error"]
    if errs:
        return TacticOutcome.FAILED, None, "", str(errs[0].get("data", ""))
    if resp.get("sorries"):
        return TacticOutcome.FAILED, None, "", "tactic introduced sorry"
    if "goals" not in resp:
        raise ProtocolError(f"tactic response without goals: {sorted(resp)}")
    goals = [str(g) for g in resp["goals"]]
    if not goals:
        return TacticOutcome.SOLVED, resp.get("proofState"), "", ""
    ps = resp.get("proofState")
    if ps is None:
        raise ProtocolError("tactic response without proofState")
    return TacticOutcome.NEW_STATE, int(ps), "\n\n".join(goals), ""


class _Timeout(Exception):
    pass


class _Crash(Exception):
    pass


class ReplProcess:
    """One checker process; requests are serialised by ``lock``."""

    def __init__(self, command: Sequence[str], cwd: Optional[str] = None, worker_id: int = 0) -> None:
        self.command = list(command)
        self.cwd = cwd
        self.worker_id = worker_id
        self.generation = 0
        self.lock = threading.Lock()
        self.proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self.transcript: list[tuple[str, str]] = []
        self.record = False

    def start(self) -> None:
        try:
            self.proc = subprocess.Popen(
                self.command,
                cwd=self.cwd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise VerifierUnavailable(f"cannot start checker {self.command!r}: {exc}") from exc
        self.generation += 1
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self.proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc: subprocess.Popen, sink: "queue.Queue[Optional[str]]") -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            sink.put(line)
        sink.put(None)

    def stop(self) -> None:
        if self.proc is not None:
            try:
                self.proc.kill()
                self.proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                pass
            self.proc = None

    def restart(self) -> None:
        self.stop()
        self.start()

    def request(self, payload: Mapping[str, Any], timeout: Optional[float]) -> dict[str, Any]:
        if self.proc is None or self.proc.poll() is not None:
            raise _Crash("checker process is not running")
        wire = encode_request(payload)
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(wire)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise _Crash(str(exc)) from exc
        deadline = None if timeout is None else time.monotonic() + timeout
        buf: list[str] = []
        while True:
            wait = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            try:
                line = self._lines.get(timeout=wait)
            except queue.Empty:
                raise _Timeout() from None
            if line is None:
                raise _Crash("checker closed its output")
            if not buf and not line.strip():
                continue
            buf.append(line)
            text = "".join(buf)
            try:
                resp = json.loads(text)
            except json.JSONDecodeError:
                continue
            if not isinstance(resp, dict):
                raise ProtocolError(f"checker sent a non-object record: {text[:200]!r}")
            if self.record:
                self.transcript.append((wire, text))
            return resp


@dataclass
class _EnvSlot:
    worker: ReplProcess
    env: Optional[int]
    generation: int


class ReplVerifier:
    """Process pool speaking the REPL protocol, with one header load per fingerprint."""

    def __init__(
        self,
        command: Sequence[str],
        *,
        pool_size: int = 8,
        cwd: Optional[str] = None,
        header_timeout: float = 600.0,
        default_timeout: float = 300.0,
    ) -> None:
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.workers = [ReplProcess(command, cwd, i) for i in range(pool_size)]
        self.header_timeout = header_timeout
        self.default_timeout = default_timeout
        self._started = False
        self._lock = threading.Lock()
        self._slots: dict[str, _EnvSlot] = {}
        self._headers: dict[str, str] = {}
        self._fp_locks: dict[str, threading.Lock] = {}
        self._ids = itertools.count()
        self._rr = itertools.count()
        self.header_loads: dict[str, int] = {}

    def _ensure_started(self) -> None:
        with self._lock:
            if not self._started:
                for w in self.workers:
                    w.start()
                self._started = True

    def close(self) -> None:
        for w in self.workers:
            w.stop()

    def _fp_lock(self, fp: str) -> threading.Lock:
        with self._lock:
            return self._fp_locks.setdefault(fp, threading.Lock())

    def _load(self, fp: str) -> _EnvSlot:
        """Return a live environment for ``fp``, elaborating the header if needed."""
        with self._fp_lock(fp):
            slot = self._slots.get(fp)
            if slot is not None and slot.generation == slot.worker.generation:
                return slot
            worker = slot.worker if slot is not None else self.workers[next(self._rr) % len(self.workers)]
            header = self._headers[fp]
            env: Optional[int] = None
            if header.strip():
                with worker.lock:
                    try:
                        resp = worker.request(command_request(header, None), self.header_timeout)
                    except (_Timeout, _Crash) as exc:
                        worker.restart()
                        raise VerifierUnavailable(f"header load failed: {exc}") from exc
                env, diags, _ = decode_command_response(resp)
                if any(d.is_error for d in diags):
                    raise VerifierUnavailable(f"header does not elaborate: {diags[0].message}")
            self.header_loads[fp] = self.header_loads.get(fp, 0) + 1
            slot = _EnvSlot(worker, env, worker.generation)
            self._slots[fp] = slot
            return slot

    def open_session(self, header: str) -> VerifierSession:
        self._ensure_started()
        fp = header_fingerprint(header)
        with self._lock:
            self._headers.setdefault(fp, header)
        slot = self._load(fp)
        return VerifierSession(f"s{next(self._ids)}", slot.env, fp)

    def _call(self, session: VerifierSession, build, timeout: Optional[float]):
        """Run one request against the session's environment; retry once after a crash."""
        for attempt in (0, 1):
            slot = self._load(session.header_fingerprint)
            with slot.worker.lock:
                if slot.generation != slot.worker.generation:
                    continue
                try:
                    return slot, slot.worker.request(build(slot), timeout)
                except _Timeout:
                    slot.worker.restart()
                    raise
                except _Crash as exc:
                    log.warning("checker worker %d crashed: %s", slot.worker.worker_id, exc)
                    slot.worker.restart()
                    if attempt:
                        raise VerifierUnavailable(f"checker crashed twice: {exc}") from exc
        raise VerifierUnavailable("checker environment could not be re-established")

    def verify(self, session: VerifierSession, source: str, timeout: Optional[float] = None) -> VerifyResult:
        if not source.strip():
            return empty_source_result()
        t0 = time.monotonic()
        text = blank_imports(source)
        try:
            _, resp = self._call(session, lambda s: command_request(text, s.env), timeout or self.default_timeout)
        except _Timeout:
            return VerifyResult(
                (Diagnostic(1, 0, Severity.ERROR, TIMEOUT_MESSAGE),), (), time.monotonic() - t0, True
            )
        _, diags, goals = decode_command_response(resp)
        return VerifyResult(tuple(diags), tuple(goals), time.monotonic() - t0)

    def apply_tactic(
        self, session: VerifierSession, state: Any, tactic: str, timeout: Optional[float] = None
    ) -> TacticResult:
        worker_id, generation, ps = _parse_handle(state)
        slot = self._load(session.header_fingerprint)
        if slot.worker.worker_id != worker_id or slot.worker.generation != generation:
            raise ProtocolError(f"proof state {state!r} is no longer live")
        t0 = time.monotonic()
        with slot.worker.lock:
            if slot.worker.generation != generation:
                raise ProtocolError(f"proof state {state!r} is no longer live")
            try:
                resp = slot.worker.request(tactic_request(tactic, ps), timeout or self.default_timeout)
            except _Timeout:
                slot.worker.restart()
                return TacticResult(TacticOutcome.FAILED, message=TIMEOUT_MESSAGE, elapsed=time.monotonic() - t0)
            except _Crash as exc:
                slot.worker.restart()
                raise ProtocolError(f"checker crashed during tactic: {exc}") from exc
        outcome, new_ps, pretty, msg = decode_tactic_response(resp)
        handle = _make_handle(worker_id, generation, new_ps) if new_ps is not None else None
        return TacticResult(outcome, handle, pretty, msg, time.monotonic() - t0)

    def goal_handle(self, session: VerifierSession, goal: Goal) -> str:
        """Wrap a raw proof-state id from a verify result into a tactic handle."""
        slot = self._load(session.header_fingerprint)
        return _make_handle(slot.worker.worker_id, slot.worker.generation, int(goal.goal_id))


def _make_handle(worker_id: int, generation: int, ps: int) -> str:
    return f"{worker_id}:{generation}:{ps}"


def _parse_handle(handle: Any) -> tuple[int, int, int]:
    try:
        a, b, c = str(handle).split(":")
        return int(a), int(b), int(c)
    except ValueError:
        raise ProtocolError(f"not a proof state handle: {handle!r}") from None


# ---------------------------------------------------------------- mock backend


@dataclass(frozen=True)
class Transition:
    tactic: str
    outcome: str
    next_state: Optional[str] = None
    message: str = ""
    cost: Optional[float] = None


@dataclass(frozen=True)
class MockState:
    state_id: str
    goal_pretty: str
    transitions: tuple[Transition, ...] = ()


@dataclass(frozen=True)
class ErrorRule:
    pattern: re.Pattern
    kind: str = "elab"
    message: str = "error"


@dataclass
class MockFixture:
    states: dict[str, MockState] = field(default_factory=dict)
    error_rules: list[ErrorRule] = field(default_factory=list)
    tactic_cost: float = 0.0
    verify_cost: float = 0.0
    unavailable: bool = False
    no_goals_after_sorry: bool = False

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MockFixture":
        states = {}
        for s in d.get("states", []):
            trans = tuple(
                Transition(t["tactic"], t["outcome"], t.get("next_state"), t.get("message", ""), t.get("cost"))
                for t in s.get("transitions", [])
            )
            states[s["state_id"]] = MockState(s["state_id"], s["goal_pretty"], trans)
        for st in states.values():
            for t in st.transitions:
                if t.outcome not in ("solved", "new_state", "failed", "timeout"):
                    raise ValueError(f"state {st.state_id}: unknown outcome {t.outcome!r}")
                if t.outcome == "new_state" and t.next_state not in states:
                    raise ValueError(f"state {st.state_id}: unknown next_state {t.next_state!r}")
        rules = [
            ErrorRule(re.compile(r["pattern"]), r.get("kind", "elab"), r.get("message", "error"))
            for r in d.get("error_rules", [])
        ]
        return cls(
            states,
            rules,
            float(d.get("tactic_cost", 0.0)),
            float(d.get("verify_cost", 0.0)),
            bool(d.get("unavailable", False)),
            bool(d.get("no_goals_after_sorry", False)),
        )

    @classmethod
    def load(cls, path: Path | str) -> "MockFixture":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


_THEOREM = re.compile(r"\s*(?:@\[[^\]]*\]\s*)?(?:(?:private|protected|noncomputable)\s+)*(?:theorem|lemma|example)\b")


def _squash(s: str) -> str:
    return " ".join(s.split())


class MockVerifier:
    """Deterministic checker driven by a :class:`MockFixture`.

    ``verify`` scans code lines top to bottom. The first matching error rule
    on a line yields a diagnostic; a ``parse`` rule also stops the scan, so
    later errors only surface once earlier lines are masked. A tactic block
    with no code lines yields ``unsolved goals`` on its opening line. Each
    ``sorry`` becomes a remaining goal whose text is the proposition of the
    enclosing ``have`` (or of the theorem).
    """

    def __init__(self, fixture: MockFixture | Mapping[str, Any] | None = None) -> None:
        if fixture is None:
            fixture = MockFixture()
        elif not isinstance(fixture, MockFixture):
            fixture = MockFixture.from_dict(fixture)
        self.fixture = fixture
        self._by_goal = {_squash(s.goal_pretty): s.state_id for s in fixture.states.values()}
        self._adhoc: dict[str, str] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self.header_loads: dict[str, int] = {}
        self.verify_calls = 0
        self.tactic_calls = 0

    def close(self) -> None:
        pass

    def open_session(self, header: str) -> VerifierSession:
        if self.fixture.unavailable:
            raise VerifierUnavailable("mock checker configured as unavailable")
        fp = header_fingerprint(header)
        with self._lock:
            self.header_loads.setdefault(fp, 1)
            sid = next(self._ids)
        return VerifierSession(f"m{sid}", f"env:{fp[:12]}", fp)

    def state_for(self, goal_pretty: str) -> str:
        key = _squash(goal_pretty)
        sid = self._by_goal.get(key)
        if sid is not None:
            return sid
        with self._lock:
            return self._adhoc.setdefault(key, f"goal:{short_hash(key)}")

    def _pretty(self, state: str) -> str:
        st = self.fixture.states.get(state)
        if st is not None:
            return st.goal_pretty
        for k, v in self._adhoc.items():
            if v == state:
                return k
        raise ProtocolError(f"unknown mock proof state {state!r}")

    def verify(self, session: VerifierSession, source: str, timeout: Optional[float] = None) -> VerifyResult:
        from dsprover.sketch import (
            PLACEHOLDER_TOKEN,
            _strip_block_comments,
            binder_names,
            code_part,
            indent_of,
            introduced_names,
        )

        with self._lock:
            self.verify_calls += 1
        cost = self.fixture.verify_cost
        if timeout is not None and cost > timeout:
            return VerifyResult((Diagnostic(1, 0, Severity.ERROR, TIMEOUT_MESSAGE),), (), timeout, True)
        raw = source.split("\n")
        lines = [code_part(ln) for ln in _strip_block_comments(raw)]
        code_idx = [i for i, c in enumerate(lines) if c.strip() and not re.match(r"^\s*(import|open)\b", c)]
        if not code_idx:
            return VerifyResult(empty_source_result().diagnostics, (), cost)

        start = next((i for i in code_idx if _THEOREM.match(lines[i])), code_idx[0])
        head_end = next((i for i in code_idx if i >= start and re.search(r":=\s*by\b", lines[i])), start)
        head = set(range(start, head_end + 1))

        def eff_indent(i: int) -> int:
            return indent_of(lines[start]) if i in head else indent_of(lines[i])

        diags: list[Diagnostic] = []
        known: set[str] = set()
        scan_to = len(lines)
        for i in code_idx:
            code = lines[i]
            rule = next((r for r in self.fixture.error_rules if r.pattern.search(code)), None)
            if rule is not None:
                diags.append(Diagnostic(i + 1, rule.pattern.search(code).start(), Severity.ERROR, rule.message))
                if rule.kind == "parse":
                    scan_to = i + 1
                    break
                continue
            m = re.match(r"\s*clear\s*\*\s*-\s*(.*)$", code)
            if m:
                missing = [n for n in m.group(1).split() if n not in known]
                if missing:
                    diags.append(
                        Diagnostic(i + 1, indent_of(code), Severity.ERROR, f"unknown identifier '{missing[0]}'")
                    )
            known.update(binder_names(code) if i in head else introduced_names(code))

        live = [i for i in code_idx if i < scan_to]
        if self.fixture.no_goals_after_sorry:
            # A bare ``sorry`` closes its goal; later tactics in that block have nothing to act on.
            closed_at: list[int] = []
            for i in live:
                ind = eff_indent(i)
                closed_at = [c for c in closed_at if c <= ind]
                if i not in head and closed_at and closed_at[-1] == ind:
                    if not any(d.line == i + 1 for d in diags):
                        diags.append(Diagnostic(i + 1, ind, Severity.ERROR, "no goals to be proved"))
                if lines[i].strip() == "sorry":
                    closed_at.append(ind)
        goals: list[Goal] = []
        for pos, i in enumerate(live):
            code = lines[i]
            if i in head and i != head_end:
                continue
            nxt = live[pos + 1] if pos + 1 < len(live) else None
            opener = re.search(r"\bby$", code.rstrip()) or code.rstrip().endswith("=>")
            if opener and (nxt is None or eff_indent(nxt) <= eff_indent(i)):
                if not any(d.line == i + 1 for d in diags):
                    diags.append(Diagnostic(i + 1, indent_of(code), Severity.ERROR, "unsolved goals"))
            for m in PLACEHOLDER_TOKEN.finditer(code):
                prop = self._enclosing_prop(lines, code_idx, i, start, eff_indent)
                goals.append(Goal(self.state_for(prop), prop, i + 1, m.start()))
        diags.sort(key=lambda d: (d.line, d.column))
        return VerifyResult(tuple(diags), tuple(goals), cost)

    @staticmethod
    def _enclosing_prop(lines: list[str], code_idx: list[int], i: int, start: int, eff_indent) -> str:
        def prop_of(code: str) -> Optional[str]:
            m = re.match(r"\s*(?:have|haveI|suffices|let)\b\s*[^:]*?:\s*(.*?)\s*:=\s*by\b", code)
            return m.group(1) if m else None

        def theorem_prop() -> str:
            text = " ".join(lines[j].strip() for j in code_idx if j >= start)
            head = text.split(":= by", 1)[0]
            depth, last = 0, -1
            for k, c in enumerate(head):
                if c in "([{⦃⟨":
                    depth += 1
                elif c in ")]}⦄⟩":
                    depth -= 1
                elif c == ":" and depth == 0 and head[k + 1: k + 2] != "=":
                    last = k
            return head[last + 1:].strip() if last >= 0 else head.strip()

        own = prop_of(lines[i])
        if own is not None:
            return own
        if i <= start:
            return theorem_prop()
        ind = eff_indent(i)
        for j in reversed([k for k in code_idx if start <= k < i]):
            if eff_indent(j) < ind:
                if j == start or _THEOREM.match(lines[j]):
                    return theorem_prop()
                p = prop_of(lines[j])
                if p is not None:
                    return p
                ind = eff_indent(j)
        return theorem_prop()

    def apply_tactic(
        self, session: VerifierSession, state: Any, tactic: str, timeout: Optional[float] = None
    ) -> TacticResult:
        with self._lock:
            self.tactic_calls += 1
        pretty = self._pretty(str(state))
        st = self.fixture.states.get(str(state))
        tac = tactic.strip()
        trans = None
        if st is not None:
            trans = next((t for t in st.transitions if t.tactic.strip() == tac), None)
        cost = self.fixture.tactic_cost if trans is None or trans.cost is None else trans.cost
        if trans is None:
            if re.match(r"clear\s*\*\s*-", tac):
                return TacticResult(TacticOutcome.NEW_STATE, state, pretty, elapsed=cost)
            return TacticResult(TacticOutcome.FAILED, message=f"mock: no transition for {tac!r}", elapsed=cost)
        if trans.outcome == "timeout" or (timeout is not None and cost > timeout):
            return TacticResult(TacticOutcome.FAILED, message=TIMEOUT_MESSAGE, elapsed=cost)
        if trans.outcome == "solved":
            return TacticResult(TacticOutcome.SOLVED, elapsed=cost)
        if trans.outcome == "failed":
            return TacticResult(TacticOutcome.FAILED, message=trans.message or "tactic failed", elapsed=cost)
        nxt = self.fixture.states[trans.next_state]  # validated at load time
        return TacticResult(TacticOutcome.NEW_STATE, nxt.state_id, nxt.goal_pretty, elapsed=cost)

    def goal_handle(self, session: VerifierSession, goal: Goal) -> str:
        return str(goal.goal_id)


def load_verifier(cfg: Mapping[str, Any], base_dir: Path | str = ".") -> Verifier:
    """Build a verifier from the ``verifier`` block of a run configuration."""
    kind = cfg.get("kind", "mock")
    if kind == "mock":
        fixture = cfg.get("fixture")
        if fixture is None:
            return MockVerifier()
        if isinstance(fixture, Mapping):
            return MockVerifier(MockFixture.from_dict(fixture))
        return MockVerifier(MockFixture.load(Path(base_dir) / fixture))
    if kind == "repl":
        command = cfg.get("command")
        if not command:
            raise ValueError("verifier.command is required for kind 'repl'")
        return ReplVerifier(
            command if isinstance(command, list) else command.split(),
            pool_size=int(cfg.get("pool_size", 8)),
            cwd=cfg.get("cwd"),
            header_timeout=float(cfg.get("header_timeout", 600.0)),
            default_timeout=float(cfg.get("timeout", 300.0)),
        )
    raise ValueError(f"unknown verifier kind {kind!r}")
