"""Benchmark loading and metric reports.

Metrics are computed from attempt records only, so a report can be rebuilt
at any time from the attempt store, even while a run is still appending.
"""

from __future__ import annotations

import json
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean, median_low
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from dsprover.core import AttemptRecord, FormalStatement, canonical_json
from dsprover.errors import BenchmarkError

SCHEMA_VERSION = 1
SUBSET_PREFIXES = (("imo", "IMO"), ("aime", "AIME"), ("amc", "AMC"))

# Benchmark record keys understood by default; a config block can remap them.
DEFAULT_FIELDS = {
    "name": "name",
    "header": "header",
    "formal_statement": "formal_statement",
    "informal_statement": "informal_statement",
    "informal_proof": "informal_proof",
    "split": "split",
    "tags": "tags",
}


# ---------------------------------------------------------------- benchmarks


@dataclass(frozen=True)
class BenchmarkSet:
    name: str
    problems: tuple[FormalStatement, ...]
    subsets: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "problems", tuple(self.problems))
        ids = [p.id for p in self.problems]
        if len(set(ids)) != len(ids):
            raise BenchmarkError("problem ids are not unique")
        known = set(ids)
        subsets = {}
        for tag, members in sorted(self.subsets.items()):
            members = frozenset(members)
            if not members <= known:
                raise BenchmarkError(f"subset {tag!r} names unknown problems")
            subsets[tag] = members
        object.__setattr__(self, "subsets", subsets)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.problems]

    def __len__(self) -> int:
        return len(self.problems)


def subset_tag(problem_id: str) -> Optional[str]:
    """Competition tag implied by a miniF2F-style name such as ``imo_1959_p1``."""
    low = problem_id.lower()
    for prefix, tag in SUBSET_PREFIXES:
        if low.startswith(prefix):
            return tag
    return None


def load_benchmark(
    path: Path | str,
    *,
    field_map: Optional[Mapping[str, str]] = None,
    split: Optional[str] = None,
    name: Optional[str] = None,
) -> BenchmarkSet:
    """Read a JSON-lines benchmark file.

    Each line holds ``name``, ``header`` and ``formal_statement``, plus
    optional ``informal_statement``, ``split`` and ``tags``. ``field_map``
    renames keys for files that use other conventions. With ``split`` only
    matching records are kept. Subsets come from explicit tags and from
    competition prefixes in the problem name.
    """
    fields = dict(DEFAULT_FIELDS)
    fields.update(field_map or {})
    p = Path(path)
    if not p.is_file():
        raise BenchmarkError(f"benchmark file {p} not found")
    problems: list[FormalStatement] = []
    subsets: dict[str, set[str]] = {}
    seen: dict[str, int] = {}
    with open(p, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BenchmarkError(f"{p}:{lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise BenchmarkError(f"{p}:{lineno}: record must be a JSON object")
            for key in ("name", "formal_statement"):
                if not isinstance(d.get(fields[key]), str) or not d[fields[key]].strip():
                    raise BenchmarkError(f"{p}:{lineno}: missing or empty field {fields[key]!r}")
            pid = d[fields["name"]]
            if split is not None and d.get(fields["split"]) != split:
                continue
            if pid in seen:
                raise BenchmarkError(f"{p}:{lineno}: duplicate id {pid!r} (first on line {seen[pid]})")
            seen[pid] = lineno
            tags = d.get(fields["tags"]) or []
            if isinstance(tags, str):
                tags = [tags]
            if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
                raise BenchmarkError(f"{p}:{lineno}: tags must be a list of strings")
            try:
                stmt = FormalStatement(
                    id=pid,
                    header=d.get(fields["header"]) or "",
                    statement=d[fields["formal_statement"]],
                    informal_statement=d.get(fields["informal_statement"]),
                    informal_proof=d.get(fields["informal_proof"]),
                    source=d.get(fields["split"]) or "",
                )
            except ValueError as exc:
                raise BenchmarkError(f"{p}:{lineno}: {exc}") from None
            problems.append(stmt)
            implied = subset_tag(pid)
            for tag in set(t.upper() for t in tags) | ({implied} if implied else set()):
                subsets.setdefault(tag, set()).add(pid)
    return BenchmarkSet(name or p.stem, tuple(problems), {k: frozenset(v) for k, v in subsets.items()})


# ---------------------------------------------------------------- solved sets and pass@k


def config_order(records: Iterable[AttemptRecord]) -> list[str]:
    """Config hashes in order of first appearance."""
    return list(OrderedDict((r.config_hash, None) for r in records))


def solved_set(
    records: Iterable[AttemptRecord], config: Optional[str] = None, within: Optional[int] = None
) -> set[str]:
    """Statements with a proved attempt (optionally for one config, among its first ``within`` attempts)."""
    return {
        r.statement_id
        for r in records
        if r.solved
        and (config is None or r.config_hash == config)
        and (within is None or r.k_index < within)
    }


def pass_at_k_curve(
    records: Iterable[AttemptRecord],
    config: Optional[str],
    benchmark: BenchmarkSet | Iterable[str],
    k: Optional[int] = None,
) -> list[int]:
    """Point ``j`` (1-based) counts statements proved by one of attempts ``1..j``.

    Each workflow attempt counts as one sample. ``k`` defaults to the
    largest attempt index seen (at least 1).
    """
    ids = set(benchmark.ids if isinstance(benchmark, BenchmarkSet) else benchmark)
    first: dict[str, int] = {}
    max_k = 0
    for r in records:
        if (config is not None and r.config_hash != config) or r.statement_id not in ids:
            continue
        max_k = max(max_k, r.k_index + 1)
        if r.solved:
            first[r.statement_id] = min(first.get(r.statement_id, r.k_index), r.k_index)
    k = k if k is not None else max(max_k, 1)
    curve = [0] * k
    for idx in first.values():
        if idx < k:
            curve[idx] += 1
    for j in range(1, k):
        curve[j] += curve[j - 1]
    return curve


def accuracy(solved: int, total: int) -> float:
    return solved / total if total else 0.0


# ---------------------------------------------------------------- ensembles


@dataclass(frozen=True)
class StageDelta:
    """One ensemble stage compared with the baseline and with the running union."""

    label: str
    solved: int
    new_vs_baseline: int
    missing_vs_baseline: int
    contribution: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "solved": self.solved,
            "new_vs_baseline": self.new_vs_baseline,
            "missing_vs_baseline": self.missing_vs_baseline,
            "contribution": self.contribution,
        }


@dataclass(frozen=True)
class EnsembleDeltas:
    baseline: int
    stages: tuple[StageDelta, ...]
    accumulative: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline": self.baseline,
            "stages": [s.to_dict() for s in self.stages],
            "accumulative": self.accumulative,
        }


def ensemble_deltas(stage_solved: Sequence[Iterable[str]], labels: Optional[Sequence[str]] = None) -> EnsembleDeltas:
    """Compare every later stage with the first.

    ``new_vs_baseline`` and ``missing_vs_baseline`` are the ``(+x, -y)``
    pair; ``contribution`` is what the stage adds to the union of the stages
    before it, so the baseline count plus all contributions is the
    accumulative count.
    """
    sets = [set(s) for s in stage_solved]
    if not sets:
        return EnsembleDeltas(0, (), 0)
    labels = list(labels) if labels is not None else [str(i + 1) for i in range(len(sets))]
    base = sets[0]
    union = set(base)
    stages = []
    for lab, s in zip(labels[1:], sets[1:]):
        stages.append(StageDelta(lab, len(s), len(s - base), len(base - s), len(s - union)))
        union |= s
    return EnsembleDeltas(len(base), tuple(stages), len(union))


# ---------------------------------------------------------------- sketch quality


def atr_mtr(rates: Sequence[float]) -> tuple[float, float]:
    """Average and (lower) median translation rate; ``(0, 0)`` for no sketches."""
    if not rates:
        return 0.0, 0.0
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"translation rate {r} outside [0, 1]")
    return float(mean(rates)), float(median_low(rates))


def translation_rates(records: Iterable[AttemptRecord], group: Callable[[AttemptRecord], str] = lambda r: r.config.sketch_model) -> dict[str, list[float]]:
    """Per-group translation rates of every record that reached a parsed sketch."""
    out: dict[str, list[float]] = {}
    for r in records:
        if r.sketch is not None and r.sketch.n_original:
            out.setdefault(group(r), []).append(r.sketch.translation_rate)
    return out


# ---------------------------------------------------------------- tokens


@dataclass(frozen=True)
class TokenRow:
    group: str
    passes: int
    avg_answer: float
    avg_thinking: float
    avg_prover: float
    per_model_avg: Mapping[str, float]
    total: int

    @property
    def avg_total(self) -> float:
        return self.avg_answer + self.avg_thinking + self.avg_prover

    def to_dict(self) -> dict[str, Any]:
        return {
            "group": self.group,
            "passes": self.passes,
            "avg_answer": self.avg_answer,
            "avg_thinking": self.avg_thinking,
            "avg_prover": self.avg_prover,
            "per_model_avg": dict(self.per_model_avg),
            "total": self.total,
        }


def _usage_for(record: AttemptRecord, grouping: str):
    if grouping == "draft_model":
        return record.draft.tokens if record.draft is not None else None
    return record.tokens


def _group_key(record: AttemptRecord, grouping: str | Callable[[AttemptRecord], Optional[str]]) -> Optional[str]:
    if callable(grouping):
        return grouping(record)
    if grouping == "config":
        return record.config_hash
    if grouping == "draft_model":
        return record.config.draft_model
    if grouping == "statement":
        return record.statement_id
    if grouping == "all":
        return "all"
    raise ValueError(f"unknown token grouping {grouping!r}")


def token_stats(
    records: Iterable[AttemptRecord], grouping: str | Callable[[AttemptRecord], Optional[str]] = "config"
) -> list[TokenRow]:
    """Per-pass token averages for each group, sorted by group name.

    With ``grouping="draft_model"`` only the draft call of each attempt is
    counted, which gives a reasoning model's average answer and thinking
    tokens. Groups with no records do not appear.
    """
    buckets: dict[str, list] = {}
    for r in records:
        key = _group_key(r, grouping)
        usage = _usage_for(r, grouping if isinstance(grouping, str) else "config")
        if key is None or usage is None:
            continue
        buckets.setdefault(key, []).append(usage)
    rows = []
    for key in sorted(buckets):
        us = buckets[key]
        n = len(us)
        models = sorted({m for u in us for m in u.per_model})
        rows.append(
            TokenRow(
                key,
                n,
                sum(u.answer_tokens for u in us) / n,
                sum(u.thinking_tokens for u in us) / n,
                sum(u.prover_tokens for u in us) / n,
                {m: sum(u.per_model.get(m, 0) for u in us) / n for m in models},
                sum(u.total for u in us),
            )
        )
    return rows


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class ConfigSummary:
    config: str
    attempts: int
    solved: tuple[str, ...]
    curve: tuple[int, ...]
    subset_solved: Mapping[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "attempts": self.attempts,
            "solved": list(self.solved),
            "curve": list(self.curve),
            "subset_solved": dict(self.subset_solved),
        }


@dataclass(frozen=True)
class MetricsReport:
    benchmark: str
    n_problems: int
    n_records: int
    configs: tuple[ConfigSummary, ...]
    union: tuple[str, ...]
    deltas: EnsembleDeltas
    subset_sizes: Mapping[str, int]
    union_subset_solved: Mapping[str, int]
    tokens: tuple[TokenRow, ...]
    draft_tokens: tuple[TokenRow, ...]
    translation: Mapping[str, tuple[float, float, int]]

    def __post_init__(self) -> None:
        for c in self.configs:
            if any(a > b for a, b in zip(c.curve, c.curve[1:])):
                raise ValueError(f"pass@k curve for {c.config} decreases")
            if not set(c.solved) <= set(self.union):
                raise ValueError("union must contain every configuration's solved set")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "benchmark": self.benchmark,
            "n_problems": self.n_problems,
            "n_records": self.n_records,
            "configs": [c.to_dict() for c in self.configs],
            "union": list(self.union),
            "ensemble": self.deltas.to_dict(),
            "subset_sizes": dict(self.subset_sizes),
            "union_subset_solved": dict(self.union_subset_solved),
            "tokens": [t.to_dict() for t in self.tokens],
            "draft_tokens": [t.to_dict() for t in self.draft_tokens],
            "translation": {k: {"atr": v[0], "mtr": v[1], "sketches": v[2]} for k, v in self.translation.items()},
        }


def compute_metrics(
    records: Sequence[AttemptRecord], benchmark: BenchmarkSet, configs: Optional[Sequence[str]] = None
) -> MetricsReport:
    """Everything the report shows. ``configs`` fixes stage order (default: order of first appearance)."""
    ids = set(benchmark.ids)
    records = [r for r in records if r.statement_id in ids]
    order = list(configs) if configs is not None else config_order(records)
    summaries = []
    stage_sets = []
    for c in order:
        recs = [r for r in records if r.config_hash == c]
        solved = solved_set(recs)
        stage_sets.append(solved)
        summaries.append(
            ConfigSummary(
                c,
                len(recs),
                tuple(sorted(solved)),
                tuple(pass_at_k_curve(recs, c, benchmark)),
                {tag: len(solved & members) for tag, members in benchmark.subsets.items()},
            )
        )
    union = set().union(*stage_sets) if stage_sets else set()
    translation = {
        k: (*atr_mtr(v), len(v)) for k, v in sorted(translation_rates(records).items())
    }
    return MetricsReport(
        benchmark=benchmark.name,
        n_problems=len(benchmark),
        n_records=len(records),
        configs=tuple(summaries),
        union=tuple(sorted(union)),
        deltas=ensemble_deltas(stage_sets, order),
        subset_sizes={tag: len(m) for tag, m in benchmark.subsets.items()},
        union_subset_solved={tag: len(union & m) for tag, m in benchmark.subsets.items()},
        tokens=tuple(token_stats(records, "config")),
        draft_tokens=tuple(token_stats(records, "draft_model")),
        translation=translation,
    )


def _pct(num: int, den: int) -> str:
    return f"{100 * accuracy(num, den):.1f}%"


def render_text(m: MetricsReport) -> str:
    """Human-readable report; identical input gives identical bytes."""
    out = [f"benchmark: {m.benchmark} ({m.n_problems} problems)", f"records: {m.n_records}", ""]
    out.append("configurations:")
    if not m.configs:
        out.append("  (none)")
    for c in m.configs:
        k = len(c.curve)
        out.append(
            f"  {c.config}: {len(c.solved)}/{m.n_problems} solved ({_pct(len(c.solved), m.n_problems)}) "
            f"within pass@{k}, {c.attempts} attempts"
        )
    out.append("")
    out.append("ensemble:")
    if m.configs:
        out.append(f"  baseline {m.configs[0].config}: {m.deltas.baseline}")
        for s in m.deltas.stages:
            out.append(f"  {s.label}: (+{s.new_vs_baseline}, -{s.missing_vs_baseline}) -> +{s.contribution}")
    out.append(f"  Total: {m.deltas.accumulative}/{m.n_problems} ({_pct(m.deltas.accumulative, m.n_problems)})")
    if m.subset_sizes:
        out.append("")
        out.append("subsets:")
        for tag in sorted(m.subset_sizes):
            size = m.subset_sizes[tag]
            cells = [f"{c.config} {c.subset_solved.get(tag, 0)}/{size}" for c in m.configs]
            cells.append(f"union {m.union_subset_solved.get(tag, 0)}/{size}")
            out.append(f"  {tag}: " + ", ".join(cells))
    if m.tokens:
        out.append("")
        out.append("tokens per pass (answer / thinking / prover, passes):")
        for t in m.tokens:
            out.append(
                f"  {t.group}: {t.avg_answer:.0f} / {t.avg_thinking:.0f} / {t.avg_prover:.0f}, {t.passes} passes"
            )
    if m.draft_tokens:
        out.append("")
        out.append("draft models (average answer tokens / average thinking tokens):")
        for t in m.draft_tokens:
            out.append(f"  {t.group}: {t.avg_answer:.0f} / {t.avg_thinking:.0f}")
    if m.translation:
        out.append("")
        out.append("sketch translation rate (ATR / MTR):")
        for model, (atr, mtr, n) in m.translation.items():
            out.append(f"  {model}: {100 * atr:.1f}% / {100 * mtr:.1f}% over {n} sketches")
    return "\n".join(out) + "\n"


def emit_report(m: MetricsReport, out_dir: Path | str, *, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.txt`` and ``<stem>.json`` into ``out_dir``."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    txt = d / f"{stem}.txt"
    js = d / f"{stem}.json"
    txt.write_text(render_text(m), encoding="utf-8")
    js.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return txt, js


def report_digest(m: MetricsReport) -> str:
    return canonical_json(m.to_dict())
