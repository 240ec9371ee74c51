"""Decision policies and prompt rendering.

Three implementations share one interface, ``decide(ctx) -> PolicyResponse``:

* :class:`OraclePolicy` replays the hand-checked per-turn scripts from
  ``fixtures/plans``;
* :class:`RandomPolicy` picks uniformly from the offered tool set, seeded so
  that identical contexts always yield identical replies;
* :class:`RemotePolicy` talks to a chat-completion HTTP endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, Any, Protocol

import httpx

from .tools import (
    ParamType,
    RawResponse,
    Stage,
    ToolSpec,
    parse_central_response,
    parse_response,
)
from .world import TaskId

if TYPE_CHECKING:
    from .orchestrator import ParadigmId
    from .trace import PoolEvent

logger = logging.getLogger(__name__)


class Role(str, Enum):
    CENTRAL = "CENTRAL"
    LOCAL = "LOCAL"


@dataclass(frozen=True)
class HistoryEntry:
    turn: int
    agent: str
    tool: str
    params: Any
    stage: Stage
    exec_status: str | None
    message: str

    def render(self) -> str:
        outcome = self.stage.value if self.exec_status is None else f"{self.stage.value}/{self.exec_status}"
        params = json.dumps(self.params, sort_keys=True, default=repr)
        return f"- turn {self.turn} {self.agent}: {self.tool} {params} -> {outcome}: {self.message}"


@dataclass(frozen=True)
class PolicyContext:
    role: Role
    agents: tuple[str, ...]
    observation: str
    registries: Mapping[str, tuple[ToolSpec, ...]]
    history: tuple[HistoryEntry, ...] = ()
    turn: int = 0
    attempt: int = 0
    task_id: TaskId = TaskId.CABINET
    paradigm: ParadigmId | None = None
    active: tuple[str, ...] = ()
    pool_history: tuple[PoolEvent, ...] = ()

    @property
    def registry(self) -> tuple[ToolSpec, ...]:
        if len(self.agents) != 1:
            raise ValueError("a central context holds one registry per agent")
        return self.registries[self.agents[0]]


@dataclass(frozen=True)
class PolicyResponse:
    entries: tuple[tuple[str, RawResponse], ...]
    transcript: dict[str, Any] | None = None

    @classmethod
    def local(cls, agent: str, raw: RawResponse, transcript: dict[str, Any] | None = None) -> PolicyResponse:
        return cls(((agent, raw),), transcript)


class PolicyTransportError(RuntimeError):
    """The policy could not be reached; the episode records a transport failure."""


class Policy(Protocol):
    model_id: str

    def decide(self, ctx: PolicyContext) -> PolicyResponse: ...

    def describe(self) -> dict[str, Any]: ...


# -- prompt rendering -------------------------------------------------------

TEMPLATE_VERSION = 1

LOCAL_SYSTEM = (
    "You are {agent}, one robot in a team solving the {task} task.\n"
    "{description}\n"
    "Each turn you choose exactly one tool from your tool list.\n"
    'Reply with one JSON object: {{"reasoning": string, "tool": string, "params": object}}.'
)
CENTRAL_SYSTEM = (
    "You coordinate the robots {agents} solving the {task} task.\n"
    "{description}\n"
    "Each turn you choose exactly one tool for every robot listed under Tools, "
    "using only that robot's own tool list.\n"
    "Reply with one JSON object keyed by robot name; each value is "
    '{{"reasoning": string, "tool": string, "params": object}}.'
)
POOL_NOTE = (
    "Only robots in the active pool act. Activating a teammate adds it to the pool; "
    "disconnecting removes robots that are no longer needed."
)
SECTION = "## {title}\n{body}"


def template_hash() -> str:
    material = json.dumps(
        [TEMPLATE_VERSION, LOCAL_SYSTEM, CENTRAL_SYSTEM, POOL_NOTE, SECTION], separators=(",", ":")
    )
    return hashlib.sha256(material.encode()).hexdigest()[:16]


def _task_description(task_id: TaskId) -> str:
    from .tasks import load_task

    return load_task(task_id).description


def render_messages(ctx: PolicyContext) -> list[dict[str, str]]:
    description = _task_description(ctx.task_id)
    if ctx.role is Role.CENTRAL:
        system = CENTRAL_SYSTEM.format(agents=", ".join(ctx.agents), task=ctx.task_id.value, description=description)
    else:
        system = LOCAL_SYSTEM.format(agent=ctx.agents[0], task=ctx.task_id.value, description=description)
    if any(t.kind.cooperative for reg in ctx.registries.values() for t in reg):
        system += "\n" + POOL_NOTE

    tool_blocks = []
    for agent in ctx.agents:
        lines = [f"{agent}:"] + [f"- {t.signature()}" for t in ctx.registries[agent]]
        tool_blocks.append("\n".join(lines))
    history = "\n".join(h.render() for h in ctx.history) or "- none"
    user = "\n\n".join(
        [
            SECTION.format(title="Tools", body="\n".join(tool_blocks)),
            SECTION.format(title="Observation", body=ctx.observation),
            SECTION.format(title="History", body=history),
        ]
    )
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


def render_prompt(ctx: PolicyContext) -> str:
    return "\n\n".join(m["content"] for m in render_messages(ctx))


# -- oracle -----------------------------------------------------------------


@lru_cache(maxsize=None)
def load_plan(task_id: TaskId | str) -> dict[str, Any]:
    name = TaskId(task_id).value.lower()
    text = resources.files("toolteam").joinpath("fixtures", "plans", f"{name}.json").read_text()
    return json.loads(text)


def initial_members(pool_history: Sequence[PoolEvent]) -> tuple[str, ...]:
    """Agents activated by the environment (no actor) when the episode began."""
    return tuple(e.subject for e in pool_history if e.turn == 0 and e.actor is None)


def oracle_script(task_id: TaskId, agent_as_tool: bool, initial: Sequence[str]) -> list[dict[str, Any]]:
    plan = load_plan(task_id)
    script = list(plan["joint_plan"])
    if agent_as_tool and len(initial) == 1:
        script = list(plan["activation_prefix"][initial[0]]) + script
    return script


WAIT_STEP = {"tool": "WAIT", "params": {}}


class OraclePolicy:
    """Replays the fixture plan; self-organizing paradigms get an activation prefix."""

    model_id = "oracle"

    def describe(self) -> dict[str, Any]:
        return {"kind": "oracle"}

    def decide(self, ctx: PolicyContext) -> PolicyResponse:
        agent_as_tool = bool(ctx.paradigm is not None and ctx.paradigm.agent_as_tool)
        script = oracle_script(ctx.task_id, agent_as_tool, initial_members(ctx.pool_history))
        row = script[ctx.turn] if ctx.turn < len(script) else {}
        entries = []
        for agent in ctx.agents:
            step = row.get(agent, WAIT_STEP)
            raw = RawResponse(f"scripted step {ctx.turn}", step["tool"], dict(step["params"]))
            entries.append((agent, raw))
        return PolicyResponse(tuple(entries))


# -- uniform random -----------------------------------------------------------


class RandomPolicy:
    """Uniform choice over the offered tools with parameters drawn from the task vocabulary.

    With probability ``noise`` a reply is corrupted (misspelled tool name or a
    float where a string is expected) to exercise the validation funnel.
    """

    model_id = "random"

    def __init__(self, seed: int = 0, noise: float = 0.1) -> None:
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        self.seed = seed
        self.noise = noise

    def describe(self) -> dict[str, Any]:
        return {"kind": "random", "seed": self.seed, "noise": self.noise}

    def _vocabulary(self, task_id: TaskId) -> list[str]:
        from .tasks import load_task

        task = load_task(task_id)
        return list(task.object_names) + list(task.location_names)

    def _draw(self, rng: random.Random, tool: ToolSpec, vocab: list[str]) -> dict[str, Any]:
        params: dict[str, Any] = {}
        for p in tool.params:
            domain = list(p.domain) if p.domain is not None else vocab
            if p.type in (ParamType.STRING, ParamType.AGENT_NAME):
                params[p.name] = rng.choice(domain)
            else:
                k = rng.randint(1, len(domain))
                params[p.name] = sorted(rng.sample(domain, k))
        return params

    def decide(self, ctx: PolicyContext) -> PolicyResponse:
        vocab = self._vocabulary(ctx.task_id)
        entries = []
        for agent in ctx.agents:
            rng = random.Random(f"{self.seed}:{ctx.turn}:{ctx.attempt}:{agent}")
            tool = rng.choice(ctx.registries[agent])
            name, params = tool.name, self._draw(rng, tool, vocab)
            if rng.random() < self.noise:
                if params and rng.random() < 0.5:
                    params[rng.choice(sorted(params))] = round(rng.uniform(0, 10), 2)
                elif len(name) > 2:
                    i = rng.randrange(len(name) - 1)
                    name = name[:i] + name[i + 1] + name[i] + name[i + 2:]
            entries.append((agent, RawResponse("random choice", name, params)))
        return PolicyResponse(tuple(entries))


# -- remote chat-completion client ---------------------------------------------

ENV_API_BASE = "TOOLTEAM_API_BASE"
ENV_API_KEY = "TOOLTEAM_API_KEY"
ENV_MODEL = "TOOLTEAM_MODEL"


class RemotePolicy:
    """Chat-completion client: POST ``{base}/chat/completions`` with the rendered prompt.

    One automatic retry on transport failure, then :class:`PolicyTransportError`.
    A semaphore caps in-flight requests across concurrent episodes.
    """

    concurrent = True

    def __init__(
        self,
        api_base: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        retries: int = 1,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.api_base = api_base.rstrip("/")
        self.model_id = model
        self.retries = retries
        self._slots = threading.BoundedSemaphore(max_in_flight)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ, **kwargs: Any) -> RemotePolicy:
        try:
            base = environ[ENV_API_BASE]
            model = environ[ENV_MODEL]
        except KeyError as exc:
            raise ValueError(f"environment variable {exc.args[0]} is not set") from None
        return cls(base, model, environ.get(ENV_API_KEY), **kwargs)

    def describe(self) -> dict[str, Any]:
        return {"kind": "remote", "model": self.model_id, "api_base": self.api_base}

    def close(self) -> None:
        self._client.close()

    def _complete(self, body: dict[str, Any]) -> str:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with self._slots:
                    resp = self._client.post(f"{self.api_base}/chat/completions", json=body)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                logger.warning("chat completion attempt %d failed: %s", attempt + 1, exc)
                last = exc
        raise PolicyTransportError(str(last))

    def decide(self, ctx: PolicyContext) -> PolicyResponse:
        body = {"model": self.model_id, "messages": render_messages(ctx)}
        content = self._complete(body)
        transcript = {"request": body, "response": content}
        if ctx.role is Role.CENTRAL:
            parsed = parse_central_response(content, ctx.agents)
            return PolicyResponse(tuple((a, parsed[a]) for a in ctx.agents), transcript)
        return PolicyResponse.local(ctx.agents[0], parse_response(content), transcript)


def policy_from_descriptor(descriptor: Mapping[str, Any]) -> Policy | None:
    """Rebuild a deterministic policy from a trace header; ``None`` if not replayable."""
    kind = descriptor.get("kind")
    if kind == "oracle":
        return OraclePolicy()
    if kind == "random":
        return RandomPolicy(seed=descriptor["seed"], noise=descriptor["noise"])
    return None


def make_policy(kind: str, seed: int = 0, **kwargs: Any) -> Policy:
    if kind == "oracle":
        return OraclePolicy()
    if kind == "random":
        return RandomPolicy(seed=seed, noise=kwargs.get("noise", 0.1))
    if kind == "remote":
        return RemotePolicy.from_env(**{k: v for k, v in kwargs.items() if k != "noise"})
    raise ValueError(f"unknown policy kind {kind!r}")
