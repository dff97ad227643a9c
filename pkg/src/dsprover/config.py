"""Run configuration files (JSON or YAML).

Top-level keys, all optional except ``configs``::

    endpoints:        model id -> {base_url, api_key_env, served_name, sampling,
                                   thinking_markers, logprobs, max_retries, request_timeout}
    configs:          config name -> {draft_model, sketch_model, prover_model,
                                      draft_format, use_informal_proof, sampling}
    plans:            plan name -> {stages: [{config: <name>, k: <int>}], stop_on_success}
    search:           {attempts, width, tree_size, beam, per_call_timeout,
                       subgoal_wall_clock, score_exponent, loop_guard, symbolic_tactics}
    verifier:         {kind: mock | repl, fixture (path or inline mapping) | command,
                       pool_size, timeout, ...}
    parallelism:      {statements, fanout, capacity}
    repair:           {cap, mask_rest_of_block, require_intact_subgoals}
    mode:             live | replay
    deadline_secs:    per-attempt time limit
    transcripts:      replay store for replay mode
    benchmark_fields: key renames for benchmark files
    benchmark_split:  keep only records with this split
    prover_prompt:    format string with a {state} slot
    seeded:           derive explicit sampling seeds (default true)

Relative paths are resolved against the configuration file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from dsprover.core import PhaseConfig
from dsprover.errors import ConfigError
from dsprover.gateway import ModelEndpoint
from dsprover.orchestrator import DEFAULT_CAPACITY, DEFAULT_DEADLINE, EnsemblePlan, EnsembleStage
from dsprover.search import SYMBOLIC_TACTICS, SearchBudget
from dsprover.sketch import DEFAULT_REPAIR_CAP

MODES = ("live", "replay")


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    endpoints: Mapping[str, ModelEndpoint]
    configs: Mapping[str, PhaseConfig]
    plans: Mapping[str, EnsemblePlan]
    budget: SearchBudget = SearchBudget()
    symbolic_tactics: tuple[str, ...] = SYMBOLIC_TACTICS
    verifier: Mapping[str, Any] = field(default_factory=lambda: {"kind": "mock"})
    statements_parallel: int = 1
    fanout: int = 1
    capacity: int = DEFAULT_CAPACITY
    repair_cap: int = DEFAULT_REPAIR_CAP
    mask_rest_of_block: bool = False
    require_intact_subgoals: bool = False
    mode: Optional[str] = None
    deadline_secs: float = DEFAULT_DEADLINE
    transcripts: Optional[Path] = None
    benchmark_fields: Mapping[str, str] = field(default_factory=dict)
    benchmark_split: Optional[str] = None
    prover_prompt: str = "{state}"
    seeded: bool = True

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def plan(self, name: Optional[str], k: Optional[int] = None) -> EnsemblePlan:
        """Look up a plan, or wrap a single named config into one; ``k`` overrides every stage."""
        if name is None:
            if len(self.plans) == 1:
                name = next(iter(self.plans))
            elif "default" in self.plans:
                name = "default"
            elif len(self.configs) == 1:
                name = next(iter(self.configs))
            else:
                raise ConfigError("several plans are configured; choose one with --plan")
        if name in self.plans:
            plan = self.plans[name]
        elif name in self.configs:
            plan = EnsemblePlan((EnsembleStage(self.configs[name], 1),), True, name)
        else:
            raise ConfigError(f"no plan or config named {name!r}")
        if k is not None:
            if k < 1:
                raise ConfigError("--k must be >= 1")
            plan = EnsemblePlan(tuple(EnsembleStage(s.config, k) for s in plan.stages), plan.stop_on_success, plan.name)
        return plan


def _read(path: Path) -> Mapping[str, Any]:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(data: Mapping[str, Any], base_dir: Path | str = ".") -> RunConfig:
    base = Path(base_dir)
    try:
        endpoints = {m: ModelEndpoint.from_dict(m, d or {}) for m, d in (data.get("endpoints") or {}).items()}
        raw_configs = data.get("configs") or {}
        if not raw_configs:
            raise ConfigError("configuration defines no phase configs")
        configs = {}
        for name, d in raw_configs.items():
            d = dict(d)
            d.setdefault("name", name)
            cfg = PhaseConfig.from_dict(d)
            for model in (cfg.draft_model, cfg.sketch_model, cfg.prover_model):
                if model is not None and endpoints and model not in endpoints:
                    raise ConfigError(f"config {name!r} uses model {model!r} with no endpoint")
            configs[name] = cfg
        plans = {}
        for name, d in (data.get("plans") or {}).items():
            stages = []
            for s in d.get("stages") or []:
                if s.get("config") not in configs:
                    raise ConfigError(f"plan {name!r} refers to unknown config {s.get('config')!r}")
                stages.append(EnsembleStage(configs[s["config"]], int(s.get("k", 1))))
            plans[name] = EnsemblePlan(tuple(stages), bool(d.get("stop_on_success", True)), name)
        search = dict(data.get("search") or {})
        tactics = tuple(search.pop("symbolic_tactics", SYMBOLIC_TACTICS))
        budget = SearchBudget.from_dict(search)
        par = data.get("parallelism") or {}
        rep = data.get("repair") or {}
        mode = data.get("mode")
        if mode is not None and mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        transcripts = data.get("transcripts")
        cfg = RunConfig(
            base_dir=base,
            endpoints=endpoints,
            configs=configs,
            plans=plans,
            budget=budget,
            symbolic_tactics=tactics,
            verifier=dict(data.get("verifier") or {"kind": "mock"}),
            statements_parallel=int(par.get("statements", 1)),
            fanout=int(par.get("fanout", 1)),
            capacity=int(par.get("capacity", DEFAULT_CAPACITY)),
            repair_cap=int(rep.get("cap", DEFAULT_REPAIR_CAP)),
            mask_rest_of_block=bool(rep.get("mask_rest_of_block", False)),
            require_intact_subgoals=bool(rep.get("require_intact_subgoals", False)),
            mode=mode,
            deadline_secs=float(data.get("deadline_secs", DEFAULT_DEADLINE)),
            transcripts=(base / transcripts) if transcripts else None,
            benchmark_fields=dict(data.get("benchmark_fields") or {}),
            benchmark_split=data.get("benchmark_split"),
            prover_prompt=str(data.get("prover_prompt", "{state}")),
            seeded=bool(data.get("seeded", True)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    if cfg.fanout < 1 or cfg.statements_parallel < 1 or cfg.capacity < 1:
        raise ConfigError("parallelism values must be >= 1")
    if cfg.deadline_secs <= 0:
        raise ConfigError("deadline_secs must be > 0")
    return cfg


def load_config(path: Path | str) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file {p} not found")
    return parse_config(_read(p), p.parent)
