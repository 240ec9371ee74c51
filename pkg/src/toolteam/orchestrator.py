"""Cooperation paradigms, the active agent pool and the episode runner.

A turn runs observe -> decide -> validate -> execute -> feedback. Common
calls go to the world engine as one serialized batch; cooperative calls
(ACTIVATE / DISCONNECT) only change pool membership. Failed attempts may be
retried within the turn while the team-wide re-plan budget lasts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from . import __version__
from .metrics import StepRecord
from .policy import (
    HistoryEntry,
    Policy,
    PolicyContext,
    PolicyResponse,
    PolicyTransportError,
    Role,
    template_hash,
)
from .tasks import TaskDefinition, is_success
from .tools import (
    ACTIVATE,
    DISCONNECT,
    MISSING,
    TRANSPORT,
    RawResponse,
    Stage,
    ToolKind,
    ToolSpec,
    ValidationOutcome,
    ValidToolCall,
    registry_for,
    validate,
)
from .trace import SCHEMA_VERSION, EpisodeResult, EpisodeTrace, PoolEvent, TurnSnapshot
from .world import ExecResult, ExecStatus, TaskId, Violation, WorldState, advance_turn, apply_batch, feedback, observe


class ParadigmId(str, Enum):
    CENTRALIZED = "CENTRALIZED"
    CENTRALIZED_SELF_ORG = "CENTRALIZED_SELF_ORG"
    DECENTRALIZED = "DECENTRALIZED"
    SELF_ORGANIZATION = "SELF_ORGANIZATION"

    @property
    def agent_as_tool(self) -> bool:
        return self in (ParadigmId.CENTRALIZED_SELF_ORG, ParadigmId.SELF_ORGANIZATION)

    @property
    def centralized(self) -> bool:
        return self in (ParadigmId.CENTRALIZED, ParadigmId.CENTRALIZED_SELF_ORG)

    @property
    def config_name(self) -> str:
        return _CONFIG_NAMES[self]

    @classmethod
    def parse(cls, name: str | ParadigmId) -> ParadigmId:
        if isinstance(name, ParadigmId):
            return name
        for paradigm, alias in _CONFIG_NAMES.items():
            if name in (alias, paradigm.value):
                return paradigm
        raise ValueError(f"unknown paradigm {name!r}; expected one of {sorted(_CONFIG_NAMES.values())}")


_CONFIG_NAMES = {
    ParadigmId.CENTRALIZED: "centralized",
    ParadigmId.CENTRALIZED_SELF_ORG: "centralized-self-org",
    ParadigmId.DECENTRALIZED: "decentralized",
    ParadigmId.SELF_ORGANIZATION: "self-org",
}

ACTIVATED = "ACTIVATED"
DEACTIVATED = "DEACTIVATED"


@dataclass(frozen=True)
class AgentPool:
    """The currently active agents plus the ordered record of membership changes."""

    roster: tuple[str, ...]
    active: frozenset[str]
    history: tuple[PoolEvent, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "active", frozenset(self.active))
        if not self.active:
            raise ValueError("the active pool is never empty")
        if not self.active <= set(self.roster):
            raise ValueError(f"non-roster agents in pool: {sorted(self.active - set(self.roster))}")

    @classmethod
    def start(cls, roster: Sequence[str], members: Sequence[str]) -> AgentPool:
        events = tuple(PoolEvent(0, ACTIVATED, m, None) for m in sorted(members))
        return cls(tuple(roster), frozenset(members), events)

    def sorted_active(self) -> tuple[str, ...]:
        return tuple(sorted(self.active))


def apply_pool_tool(
    pool: AgentPool, actor: str, call: ValidToolCall, turn: int = 0
) -> tuple[AgentPool, ExecResult]:
    """Execute ACTIVATE or DISCONNECT on the pool; the world state is untouched."""
    if not call.kind.cooperative:
        raise ValueError(f"{call.name} is a common tool; route it to the world engine")
    if actor not in pool.active:
        return pool, ExecResult.invalid(Violation.CONFLICT, feedback("actor_inactive", actor=actor, tool=call.name))

    if call.kind is ToolKind.COOPERATIVE_ACTIVATE:
        subject = call.arg("agent")
        if subject not in pool.roster:
            return pool, ExecResult.invalid(Violation.PRECONDITION_FAILED, feedback("not_roster", subject=subject))
        if subject in pool.active:
            return pool, ExecResult(ExecStatus.OK, 0, feedback("activate_redundant", actor=actor, subject=subject))
        after = dataclasses.replace(
            pool, active=pool.active | {subject}, history=pool.history + (PoolEvent(turn, ACTIVATED, subject, actor),)
        )
        return after, ExecResult(ExecStatus.OK, 0, feedback("activate", actor=actor, subject=subject))

    subjects = list(call.arg("agents"))
    label = ", ".join(subjects)
    stray = [s for s in subjects if s not in pool.roster]
    if stray:
        return pool, ExecResult.invalid(Violation.PRECONDITION_FAILED, feedback("not_roster", subject=stray[0]))
    remaining = pool.active - set(subjects)
    if not remaining:
        return pool, ExecResult.invalid(
            Violation.PRECONDITION_FAILED, feedback("disconnect_empty", actor=actor, subjects=label)
        )
    events = tuple(PoolEvent(turn, DEACTIVATED, s, actor) for s in subjects if s in pool.active)
    after = dataclasses.replace(pool, active=remaining, history=pool.history + events)
    return after, ExecResult(ExecStatus.OK, 0, feedback("disconnect", actor=actor, subjects=label))


@dataclass(frozen=True)
class Decision:
    role: Role
    groups: tuple[tuple[str, ...], ...]

    @property
    def invocations(self) -> int:
        return len(self.groups)


def select_actors(paradigm: ParadigmId, pool: AgentPool, roster: Sequence[str] = ()) -> Decision:
    """Who decides this turn: one central invocation, or one per active agent."""
    acting = pool.sorted_active()
    if paradigm.centralized:
        return Decision(Role.CENTRAL, (acting,))
    return Decision(Role.LOCAL, tuple((a,) for a in acting))


MAX_SEED = 2**64


@dataclass(frozen=True)
class EpisodeConfig:
    paradigm: ParadigmId
    task_id: TaskId
    max_turns: int = 10
    replan_budget: int = 5
    episodes: int = 5
    seed: int = 0
    log_transcripts: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "paradigm", ParadigmId.parse(self.paradigm))
        task = self.task_id.upper() if isinstance(self.task_id, str) else self.task_id
        object.__setattr__(self, "task_id", TaskId(task))
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        if self.replan_budget < 0:
            raise ValueError("replan_budget must be nonnegative")
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if not 0 <= self.seed < MAX_SEED:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def for_episode(self, index: int) -> EpisodeConfig:
        return dataclasses.replace(self, seed=episode_seed(self.seed, index), episodes=1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "paradigm": self.paradigm.config_name,
            "task": self.task_id.value,
            "max_turns": self.max_turns,
            "replan_budget": self.replan_budget,
            "episodes": self.episodes,
            "seed": self.seed,
            "log_transcripts": self.log_transcripts,
        }

    def config_hash(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in ("episodes", "seed")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_header(cls, header: Mapping[str, Any]) -> EpisodeConfig:
        return cls(
            paradigm=ParadigmId(header["paradigm"]),
            task_id=TaskId(header["task"]),
            max_turns=header["max_turns"],
            replan_budget=header["replan_budget"],
            episodes=1,
            seed=header["seed"],
            log_transcripts=header.get("log_transcripts", False),
        )


def episode_seed(seed: int, index: int) -> int:
    return seed ^ index


def initial_members(config: EpisodeConfig, roster: Sequence[str]) -> tuple[str, ...]:
    """Full roster, or one agent drawn uniformly from the episode seed in agent-as-tool paradigms."""
    if not config.paradigm.agent_as_tool:
        return tuple(roster)
    rng = random.Random(config.seed)
    return (roster[rng.randrange(len(roster))],)


PolicySet = Policy | Mapping[str, Policy]


def _policy_for(policies: PolicySet, group: tuple[str, ...]) -> Policy:
    if isinstance(policies, Mapping):
        return policies[group[0]]
    return policies


def _describe(policies: PolicySet) -> tuple[str, dict[str, Any]]:
    if isinstance(policies, Mapping):
        first = next(iter(policies.values()))
        return first.model_id, {"kind": "per-agent", "agents": {a: p.describe() for a, p in sorted(policies.items())}}
    return policies.model_id, policies.describe()


@dataclass
class _Attempt:
    raw: RawResponse
    outcome: ValidationOutcome
    result: ExecResult | None = None

    @property
    def failed(self) -> bool:
        return self.outcome.stage is not Stage.VALID or (self.result is not None and not self.result.ok)

    def message(self, agent: str) -> str:
        if self.result is not None:
            return self.result.message
        return f"{agent}'s tool call was rejected ({self.outcome.stage.value}): {self.outcome.detail}"


def _json_safe(value: Any) -> Any:
    try:
        return json.loads(json.dumps(value, sort_keys=True))
    except (TypeError, ValueError):
        return repr(value)


def _tool_label(raw: RawResponse, outcome: ValidationOutcome) -> str:
    if outcome.call is not None:
        return outcome.call.name
    return raw.tool_name if isinstance(raw.tool_name, str) else repr(raw.tool_name)


@dataclass
class _Episode:
    config: EpisodeConfig
    task: TaskDefinition
    policies: PolicySet
    state: WorldState
    pool: AgentPool
    registries: dict[str, tuple[ToolSpec, ...]]
    trace: EpisodeTrace
    histories: dict[str, list[HistoryEntry]] = field(default_factory=dict)
    inbox: dict[str, list[str]] = field(default_factory=dict)
    budget: int = 0
    replans: int = 0
    invocations: int = 0
    transport_failures: int = 0

    def context(self, role: Role, group: tuple[str, ...], turn: int, attempt: int, note: str = "") -> PolicyContext:
        active = self.pool.sorted_active()
        views = [observe(self.state, a, active=active, feedback=self.inbox.get(a, ())) for a in group]
        observation = "\n\n".join(views)
        if note:
            observation += "\nRe-plan: " + note
        history = tuple(h for a in group for h in self.histories[a])
        history = tuple(sorted(history, key=lambda h: h.turn))
        return PolicyContext(
            role=role,
            agents=group,
            observation=observation,
            registries={a: self.registries[a] for a in group},
            history=history,
            turn=turn,
            attempt=attempt,
            task_id=self.task.task_id,
            paradigm=self.config.paradigm,
            active=active,
            pool_history=self.pool.history,
        )

    def invoke(self, ctx: PolicyContext) -> dict[str, RawResponse]:
        """Call the policy for ``ctx.agents``; every agent gets exactly one raw reply."""
        policy = _policy_for(self.policies, ctx.agents)
        self.invocations += 1
        try:
            response: PolicyResponse = policy.decide(ctx)
        except PolicyTransportError:
            self.transport_failures += 1
            return {a: RawResponse.failed(TRANSPORT) for a in ctx.agents}
        if self.config.log_transcripts and response.transcript is not None:
            self.trace.transcripts.append(
                {"turn": ctx.turn, "agents": list(ctx.agents), "attempt": ctx.attempt, **_json_safe(response.transcript)}
            )
        by_target: dict[str, RawResponse] = {}
        for target, raw in response.entries:
            by_target.setdefault(target, raw)
        if ctx.role is Role.LOCAL and len(response.entries) != 1:
            return {ctx.agents[0]: RawResponse.failed(MISSING)}
        return {a: by_target.get(a, RawResponse.failed(MISSING)) for a in ctx.agents}

    def record(self, turn: int, agent: str, attempt: _Attempt, replan: bool) -> None:
        call = attempt.outcome.call
        result = attempt.result
        label = _tool_label(attempt.raw, attempt.outcome)
        params = _json_safe(attempt.raw.raw_params)
        self.trace.steps.append(
            StepRecord(
                turn=turn,
                agent=agent,
                stage=attempt.outcome.stage,
                exec_status=result.status if result is not None else None,
                tool_name_selected=label,
                tool_kind=call.kind if call is not None else None,
                reward=result.reward if result is not None else 0,
                was_replan=replan,
                params=params,
                detail=result.message if result is not None else attempt.outcome.detail,
                violation=result.violation if result is not None else None,
            )
        )
        self.histories[agent].append(
            HistoryEntry(
                turn,
                agent,
                label,
                params,
                attempt.outcome.stage,
                result.status.value if result is not None else None,
                attempt.message(agent),
            )
        )

    def execute_cooperative(self, agent: str, call: ValidToolCall, turn: int) -> ExecResult:
        before = len(self.pool.history)
        self.pool, result = apply_pool_tool(self.pool, agent, call, turn)
        self.trace.pool_events.extend(self.pool.history[before:])
        return result


def _decide_all(ep: _Episode, decision: Decision, turn: int) -> dict[str, RawResponse]:
    contexts = [ep.context(decision.role, group, turn, 0) for group in decision.groups]
    policy = _policy_for(ep.policies, decision.groups[0]) if decision.groups else None
    raws: dict[str, RawResponse] = {}
    if getattr(policy, "concurrent", False) and len(contexts) > 1:
        # Invocations may overlap; results are committed in roster order below.
        with ThreadPoolExecutor(max_workers=len(contexts)) as pool:
            for replies in pool.map(ep.invoke, contexts):
                raws.update(replies)
    else:
        for ctx in contexts:
            raws.update(ep.invoke(ctx))
    return raws


def _run_turn(ep: _Episode, turn: int) -> None:
    acting = ep.pool.sorted_active()
    decision = select_actors(ep.config.paradigm, ep.pool, ep.task.robot_names)
    raws = _decide_all(ep, decision, turn)
    attempts = {a: _Attempt(raws[a], validate(raws[a], ep.registries[a])) for a in acting}

    common = [(a, at.outcome.call) for a, at in attempts.items() if at.outcome.call and not at.outcome.call.kind.cooperative]
    ep.state, results, claimed = apply_batch(ep.state, common)
    for (agent, _), result in zip(common, results):
        attempts[agent].result = result
    for agent in acting:
        call = attempts[agent].outcome.call
        if call is not None and call.kind.cooperative:
            attempts[agent].result = ep.execute_cooperative(agent, call, turn)
    for agent in acting:
        ep.record(turn, agent, attempts[agent], replan=False)

    messages: dict[str, list[str]] = {a: [attempts[a].message(a)] for a in acting}
    for agent in acting:
        current = attempts[agent]
        while current.failed and ep.budget > 0 and agent in ep.pool.active:
            ep.budget -= 1
            ep.replans += 1
            note = current.message(agent)
            role = decision.role
            ctx = ep.context(role, (agent,), turn, ep.replans, note)
            raw = ep.invoke(ctx)[agent]
            current = _Attempt(raw, validate(raw, ep.registries[agent]))
            call = current.outcome.call
            if call is not None and call.kind.cooperative:
                current.result = ep.execute_cooperative(agent, call, turn)
            elif call is not None:
                ep.state, (current.result,), claimed = apply_batch(ep.state, [(agent, call)], claimed)
            ep.record(turn, agent, current, replan=True)
            messages[agent].append(current.message(agent))

    for event in (e for e in ep.pool.history if e.turn == turn and e.actor is not None):
        for who in {event.actor, event.subject}:
            messages.setdefault(who, [])
        messages[event.subject].append(f"{event.subject} was {event.event.lower()} by {event.actor}.")
    ep.inbox = messages
    ep.state = advance_turn(ep.state)
    ep.trace.snapshots.append(TurnSnapshot(turn, ep.state.digest(), acting, ep.pool.sorted_active()))


def run_episode(config: EpisodeConfig, task: TaskDefinition, policies: PolicySet) -> EpisodeTrace:
    """Run one episode to success or the turn limit and return its trace."""
    if task.task_id is not config.task_id:
        raise ValueError(f"config is for {config.task_id.value}, task is {task.task_id.value}")
    roster = task.robot_names
    if isinstance(policies, Mapping):
        if config.paradigm.centralized:
            raise ValueError("centralized paradigms take a single central policy")
        missing = set(roster) - set(policies)
        if missing:
            raise ValueError(f"no policy for {sorted(missing)}")
    pool = AgentPool.start(roster, initial_members(config, roster))
    model, descriptor = _describe(policies)
    header = {
        "schema_version": SCHEMA_VERSION,
        "harness_version": __version__,
        "template_hash": template_hash(),
        "config_hash": config.config_hash(),
        "task": config.task_id.value,
        "paradigm": config.paradigm.value,
        "model": model,
        "policy": descriptor,
        "seed": config.seed,
        "max_turns": config.max_turns,
        "replan_budget": config.replan_budget,
        "log_transcripts": config.log_transcripts,
        "initial_active": sorted(pool.active),
        "initial_state_hash": task.initial_state.digest(),
    }
    trace = EpisodeTrace(header=header, pool_events=list(pool.history))
    ep = _Episode(
        config=config,
        task=task,
        policies=policies,
        state=task.initial_state,
        pool=pool,
        registries={a: registry_for(a, config.paradigm, task) for a in roster},
        trace=trace,
        histories={a: [] for a in roster},
        budget=config.replan_budget,
    )
    win = False
    for turn in range(config.max_turns):
        _run_turn(ep, turn)
        if is_success(ep.state):
            win = True
            break
    trace.result = EpisodeResult(
        win=int(win),
        turns_used=ep.state.turn,
        replans_used=ep.replans,
        invocations=ep.invocations,
        transport_failures=ep.transport_failures,
    )
    return trace


def run_episodes(config: EpisodeConfig, task: TaskDefinition, policy_factory) -> list[EpisodeTrace]:
    """Run ``config.episodes`` independent episodes; episode i uses seed ``seed ^ i``."""
    traces = []
    for i in range(config.episodes):
        cfg = config.for_episode(i)
        traces.append(run_episode(cfg, task, policy_factory(cfg.seed)))
    return traces


__all__ = [
    "ACTIVATE",
    "DISCONNECT",
    "AgentPool",
    "Decision",
    "EpisodeConfig",
    "ParadigmId",
    "apply_pool_tool",
    "episode_seed",
    "initial_members",
    "run_episode",
    "run_episodes",
    "select_actors",
]
