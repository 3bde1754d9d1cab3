"""Episode driver: propose, align, execute, reflect, remember.

One :class:`Episode` owns a working memory and an environment and records an
:class:`EpisodeTrace`. Traces are written as JSON lines (a header line, then
one line per step) with screenshots stored as PNG files next to them.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Protocol, Union

from .actions import (
    ActionParseError,
    StepOutput,
    TakeNote,
    Terminate,
    action_from_raw,
    canonical_encode,
    render_call,
)
from .agents import (
    AcaOutput,
    ReplanSignal,
    SraOutput,
    WireFormatError,
    aca_correct,
    apply_correction,
    manager_propose,
    sra_reflect,
    tac_check,
)
from .environment import EnvError, ExecResult, Observation
from .gateway import Backend, GatewayError, ModelCall, ModelConfig
from .imaging import (
    DEFAULT_DIFF_THRESHOLD,
    DEFAULT_MIN_AREA,
    DiffRegion,
    MarkerStyle,
    RasterImage,
    diff_regions,
    render_action_marker,
)
from .memory import (
    HISTORY_WINDOW,
    Reflection,
    StepRecord,
    WorkingMemory,
    WorkingMemoryError,
    new_memory,
)
from .tips import TipBase, default_tip_base, format_tips, load_tip_file, tips_for_task

TRACE_SCHEMA = 1
ROLES = ("manager", "tac", "aca", "sra")

SUCCESS = "terminated-success"
FAILURE = "terminated-failure"
MAX_STEPS = "max-steps"
ABORTED = "aborted-error"
STATUSES = (SUCCESS, FAILURE, MAX_STEPS, ABORTED)

# failures that end an episode cleanly with ABORTED instead of propagating
STEP_ERRORS = (ActionParseError, WireFormatError, GatewayError, EnvError, WorkingMemoryError)


class CorruptTrace(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class Device(Protocol):
    def observe(self) -> Observation: ...

    def execute(self, action) -> ExecResult: ...


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 20
    history_window: int = HISTORY_WINDOW
    diff_threshold: int = DEFAULT_DIFF_THRESHOLD
    diff_min_area: int = DEFAULT_MIN_AREA
    replan_retries: int = 1
    tip_base: Optional[str] = None
    models: Mapping[str, ModelConfig] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.history_window != HISTORY_WINDOW:
            raise ValueError(f"history_window is fixed at {HISTORY_WINDOW}")
        if self.diff_threshold < 0 or self.diff_min_area < 1:
            raise ValueError("diff_threshold must be >= 0 and diff_min_area >= 1")
        if self.replan_retries < 0:
            raise ValueError("replan_retries must be >= 0")
        unknown = set(self.models) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown agent roles {sorted(unknown)}")

    def model_for(self, role: str) -> ModelConfig:
        return self.models.get(role) or ModelConfig()

    def load_tips(self) -> TipBase:
        return load_tip_file(self.tip_base) if self.tip_base else default_tip_base()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodeConfig":
        """Build from a decoded config file.

        ``model`` gives defaults for every role; ``models`` overrides per role.
        """
        known = {"max_steps", "history_window", "diff_threshold", "diff_min_area",
                 "replan_retries", "tip_base", "model", "models"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        default = ModelConfig.from_dict(data.get("model") or {})
        per_role = data.get("models") or {}
        models = {
            role: ModelConfig.from_dict(per_role.get(role) or {}, default) for role in ROLES
        }
        kwargs = {k: data[k] for k in known - {"model", "models"} if k in data}
        return cls(models=models, **kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EpisodeConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        # api keys never leave the process
        return {
            "max_steps": self.max_steps,
            "history_window": self.history_window,
            "diff_threshold": self.diff_threshold,
            "diff_min_area": self.diff_min_area,
            "replan_retries": self.replan_retries,
            "tip_base": self.tip_base,
            "models": {
                role: {k: v for k, v in cfg.__dict__.items() if k != "api_key"}
                for role, cfg in sorted(self.models.items())
            },
        }


@dataclass(frozen=True)
class RoleBackends:
    manager: Backend
    tac: Backend
    aca: Backend
    sra: Backend

    @classmethod
    def shared(cls, backend: Backend) -> "RoleBackends":
        return cls(backend, backend, backend, backend)


# --------------------------------------------------------------------------
# Trace types
# --------------------------------------------------------------------------


@dataclass
class AlignmentAttempt:
    """One manager proposal and what the gate and corrector made of it."""

    proposal: StepOutput
    raw: str
    annotated: RasterImage  # plain screenshot when the action has no marker
    visualized: bool
    consistent: bool
    aca: Optional[AcaOutput] = None

    @property
    def aca_invoked(self) -> bool:
        return self.aca is not None


@dataclass
class StepTrace:
    index: int
    device_time: str = ""
    tip_apps: tuple[str, ...] = ()
    tip_missing: tuple[str, ...] = ()
    attempts: list[AlignmentAttempt] = field(default_factory=list)
    executed: Optional[StepOutput] = None
    replan_exhausted: bool = False
    state_before: Optional[str] = None
    state_after: Optional[str] = None
    before: Optional[RasterImage] = None
    after: Optional[RasterImage] = None
    regions: list[DiffRegion] = field(default_factory=list)
    sra: Optional[SraOutput] = None
    reflection: Optional[Reflection] = None
    calls: list[ModelCall] = field(default_factory=list)
    error: Optional[dict] = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def proposal(self) -> Optional[StepOutput]:
        """The first, pre-alignment proposal."""
        return self.attempts[0].proposal if self.attempts else None

    @property
    def final_attempt(self) -> Optional[AlignmentAttempt]:
        return self.attempts[-1] if self.attempts else None

    @property
    def aca_invoked(self) -> bool:
        return any(a.aca_invoked for a in self.attempts)


@dataclass
class EpisodeTrace:
    task: str
    config: dict
    steps: list[StepTrace] = field(default_factory=list)
    status: Optional[str] = None

    def __post_init__(self):
        if self.status is not None and self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")


# --------------------------------------------------------------------------
# Driving an episode
# --------------------------------------------------------------------------


def _error_record(exc: Exception) -> dict:
    return {
        "type": type(exc).__name__,
        "message": str(exc),
        "raw": getattr(exc, "raw", None),
    }


class Episode:
    def __init__(
        self,
        task: str,
        env: Device,
        backends: RoleBackends,
        config: EpisodeConfig = EpisodeConfig(),
        tip_base: Optional[TipBase] = None,
        style: MarkerStyle = MarkerStyle(),
    ):
        self.task = task
        self.env = env
        self.backends = backends
        self.config = config
        self.tip_base = tip_base if tip_base is not None else config.load_tips()
        self.style = style
        self.memory: WorkingMemory = new_memory()
        self.trace = EpisodeTrace(task, config.to_dict())

    @property
    def done(self) -> bool:
        return self.trace.status is not None

    def _align(self, st: StepTrace, obs: Observation, tips: str) -> StepOutput:
        memory = self.memory
        for retry in range(self.config.replan_retries + 1):
            step, raw = manager_propose(
                self.task, obs, tips, memory, self.backends.manager, st.calls
            )
            marked = render_action_marker(obs.screenshot, step.action, self.style)
            verdict = tac_check(
                self.task, step, marked.image, obs.screenshot, self.backends.tac, st.calls
            )
            attempt = AlignmentAttempt(step, raw, marked.image, marked.visualized, verdict.consistent)
            st.attempts.append(attempt)
            if verdict.consistent:
                return step
            attempt.aca = aca_correct(
                step, marked.image, obs.screenshot, self.backends.aca, st.calls
            )
            fixed = apply_correction(step, attempt.aca)
            if not isinstance(fixed, ReplanSignal):
                return fixed
            # replan: ask again with the corrector's analysis as the latest reflection
            memory = self.memory.set_reflection(Reflection(
                thought=step.thought,
                action=render_call(step.action),
                outcome="REPLAN",
                feedback=fixed.analysis,
            ))
        st.replan_exhausted = True
        return st.attempts[0].proposal

    def run_step(self) -> StepTrace:
        if self.done:
            raise RuntimeError("episode is already finished")
        index = len(self.trace.steps) + 1
        st = StepTrace(index)
        self.trace.steps.append(st)
        clock = time.perf_counter
        t0 = clock()
        try:
            obs = self.env.observe()
            st.before, st.device_time = obs.screenshot, obs.device_time
            selection = tips_for_task(self.tip_base, self.task)
            st.tip_apps = tuple(app for app, _ in selection.per_app)
            st.tip_missing = selection.missing
            t1 = clock()
            executed = self._align(st, obs, format_tips(selection))
            st.executed = executed
            t2 = clock()
            result = self.env.execute(executed.action)
            st.state_before, st.state_after = result.state_before, result.state_after
            t3 = clock()
            record = StepRecord(index, executed.thought, executed.action, executed.action_description)
            if result.terminated:
                self.memory = self.memory.push_step(record)
                self.trace.status = SUCCESS if result.status == "success" else FAILURE
                st.timings = {"observe": t1 - t0, "align": t2 - t1, "execute": t3 - t2}
                return st
            after = self.env.observe()
            st.after = after.screenshot
            st.regions = diff_regions(
                obs.screenshot, after.screenshot,
                self.config.diff_threshold, self.config.diff_min_area,
            )
            st.sra = sra_reflect(
                self.task, record, obs.screenshot, after.screenshot, st.regions,
                self.backends.sra, st.calls, self.style,
            )
            st.reflection = Reflection(
                thought=record.thought,
                action=render_call(record.action),
                outcome=st.sra.outcome,
                feedback=st.sra.error_description,
            )
            memory = self.memory.set_reflection(st.reflection).push_step(record)
            if isinstance(executed.action, TakeNote):
                memory = memory.add_note(executed.action.text)
            self.memory = memory
            t4 = clock()
            st.timings = {"observe": t1 - t0, "align": t2 - t1, "execute": t3 - t2, "reflect": t4 - t3}
        except STEP_ERRORS as exc:
            st.error = _error_record(exc)
            st.timings = {"total": clock() - t0}
            self.trace.status = ABORTED
        if not self.done and index >= self.config.max_steps:
            self.trace.status = MAX_STEPS
        return st

    def run(self) -> EpisodeTrace:
        while not self.done:
            self.run_step()
        return self.trace


def run_episode(
    task: str,
    env: Device,
    backends: Union[RoleBackends, Backend],
    config: EpisodeConfig = EpisodeConfig(),
    tip_base: Optional[TipBase] = None,
    style: MarkerStyle = MarkerStyle(),
) -> EpisodeTrace:
    if not isinstance(backends, RoleBackends):
        backends = RoleBackends.shared(backends)
    return Episode(task, env, backends, config, tip_base, style).run()


# --------------------------------------------------------------------------
# Trace invariants
# --------------------------------------------------------------------------

_HISTORY_LINE_RE = re.compile(r"^Step (\d+): Thought: ", re.MULTILINE)


def _history_section(request_text: str) -> str:
    # the tips may mention the header too, so anchor on the memory section
    end = request_text.rfind("### Memory ###")
    start = request_text.rfind("### History Operations ###", 0, max(end, 0))
    if start < 0 or end < 0:
        return ""
    return request_text[start:end]


def _reflection_section(request_text: str) -> str:
    start = request_text.rfind("### Latest Reflection ###")
    if start < 0:
        return ""
    body = request_text[start + len("### Latest Reflection ###"):]
    end = body.find("###")
    return (body if end < 0 else body[:end]).strip()


def _user_text(call: ModelCall) -> str:
    return "\n".join(text for role, text in call.request if role == "user")


def gate_violations(st: StepTrace, replan_retries: Optional[int] = None) -> list[str]:
    """Check the routing law: the corrector runs exactly when the gate says
    inconsistent, and the executed pair follows from the final verdict."""
    out = []
    for i, a in enumerate(st.attempts):
        if a.aca_invoked == a.consistent:
            out.append(f"step {st.index} attempt {i + 1}: aca_invoked={a.aca_invoked} "
                       f"with consistent={a.consistent}")
        if i < len(st.attempts) - 1 and (a.aca is None or a.aca.correction_type != "REPLAN"):
            out.append(f"step {st.index} attempt {i + 1}: retried without REPLAN")
    if replan_retries is not None and len(st.attempts) > replan_retries + 1:
        out.append(f"step {st.index}: {len(st.attempts)} attempts exceed the retry cap")
    final = st.final_attempt
    if final is None or st.executed is None:
        return out
    if final.consistent:
        expected = final.proposal
    elif final.aca.correction_type == "REPLAN":
        if not st.replan_exhausted:
            out.append(f"step {st.index}: final REPLAN without replan_exhausted")
        expected = st.attempts[0].proposal
    else:
        expected = apply_correction(final.proposal, final.aca)
    if st.executed != expected:
        out.append(f"step {st.index}: executed pair does not follow from the verdict")
    return out


def memory_violations(trace: EpisodeTrace) -> list[str]:
    """Check that each step's first manager prompt shows exactly the executed
    pairs of the previous five steps and the previous step's reflection."""
    out = []
    executed = {st.index: st.executed for st in trace.steps if st.executed is not None}
    prev: Optional[StepTrace] = None
    for st in trace.steps:
        calls = [c for c in st.calls if c.agent == "manager"]
        if not calls:
            prev = st
            continue
        text = _user_text(calls[0])
        section = _history_section(text)
        shown = [int(n) for n in _HISTORY_LINE_RE.findall(section)]
        t = st.index
        expected = list(range(max(1, t - HISTORY_WINDOW), t))
        if shown != expected:
            out.append(f"step {t}: history shows {shown}, expected {expected}")
        for i in expected:
            pair = executed.get(i)
            if pair is None:
                continue
            line = StepRecord(i, pair.thought, pair.action, pair.action_description).render()
            if line not in section:
                out.append(f"step {t}: history line for step {i} differs from executed pair")
        want = prev.reflection.render() if prev is not None and prev.reflection else ""
        if _reflection_section(text) != want.strip():
            out.append(f"step {t}: latest reflection does not render step {t - 1}'s reflection")
        prev = st
    return out


def trace_violations(trace: EpisodeTrace) -> list[str]:
    out = []
    retries = trace.config.get("replan_retries")
    for pos, st in enumerate(trace.steps, start=1):
        if st.index != pos:
            out.append(f"step indices not contiguous at position {pos}")
        out += gate_violations(st, retries)
        if (st.executed is not None and isinstance(st.executed.action, Terminate)
                and pos != len(trace.steps)):
            out.append(f"step {st.index}: terminate is not the final step")
    out += memory_violations(trace)
    return out


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _step_output_to_dict(s: StepOutput) -> dict:
    return {
        "thought": s.thought,
        "description": s.action_description,
        "action": json.loads(canonical_encode(s.action)),
    }


def _step_output_from_dict(d: dict) -> StepOutput:
    a = d["action"]
    return StepOutput(d["thought"], d["description"], action_from_raw(a["name"], a["arguments"]))


def _aca_to_dict(a: AcaOutput) -> dict:
    return {
        "analysis": a.analysis,
        "error_category": a.error_category,
        "correction_type": a.correction_type,
        "corrected_action": json.loads(canonical_encode(a.corrected_action))
        if a.corrected_action is not None else None,
        "confidence": a.confidence,
    }


def _aca_from_dict(d: dict) -> AcaOutput:
    ca = d["corrected_action"]
    action = action_from_raw(ca["name"], ca["arguments"]) if ca is not None else None
    return AcaOutput(d["analysis"], d["error_category"], d["correction_type"], action, d["confidence"])


class _ImageStore:
    """Content-addressed PNG files in a directory beside the trace."""

    def __init__(self, root: Path, subdir: str):
        self.root = root
        self.subdir = subdir
        self._cache: dict[str, RasterImage] = {}

    def put(self, image: Optional[RasterImage]) -> Optional[str]:
        if image is None:
            return None
        rel = f"{self.subdir}/{image.digest()[:16]}.png"
        path = self.root / rel
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            image.save(path)
        return rel

    def get(self, rel: Optional[str]) -> Optional[RasterImage]:
        if rel is None:
            return None
        if rel not in self._cache:
            self._cache[rel] = RasterImage.from_png(self.root / rel)
        return self._cache[rel]


def step_to_dict(st: StepTrace, images: _ImageStore) -> dict:
    return {
        "index": st.index,
        "device_time": st.device_time,
        "tip_apps": list(st.tip_apps),
        "tip_missing": list(st.tip_missing),
        "attempts": [
            {
                "proposal": _step_output_to_dict(a.proposal),
                "raw": a.raw,
                "annotated": images.put(a.annotated),
                "visualized": a.visualized,
                "consistent": a.consistent,
                "aca": _aca_to_dict(a.aca) if a.aca else None,
            }
            for a in st.attempts
        ],
        "executed": _step_output_to_dict(st.executed) if st.executed else None,
        "replan_exhausted": st.replan_exhausted,
        "state_before": st.state_before,
        "state_after": st.state_after,
        "before": images.put(st.before),
        "after": images.put(st.after),
        "regions": [[r.top, r.left, r.bottom, r.right] for r in st.regions],
        "sra": {"outcome": st.sra.outcome, "error_description": st.sra.error_description}
        if st.sra else None,
        "reflection": {
            "thought": st.reflection.thought,
            "action": st.reflection.action,
            "outcome": st.reflection.outcome,
            "feedback": st.reflection.feedback,
        } if st.reflection else None,
        "calls": [c.to_dict() for c in st.calls],
        "error": st.error,
        "timings": st.timings,
    }


def step_from_dict(d: dict, images: _ImageStore) -> StepTrace:
    return StepTrace(
        index=d["index"],
        device_time=d["device_time"],
        tip_apps=tuple(d["tip_apps"]),
        tip_missing=tuple(d["tip_missing"]),
        attempts=[
            AlignmentAttempt(
                proposal=_step_output_from_dict(a["proposal"]),
                raw=a["raw"],
                annotated=images.get(a["annotated"]),
                visualized=a["visualized"],
                consistent=a["consistent"],
                aca=_aca_from_dict(a["aca"]) if a["aca"] else None,
            )
            for a in d["attempts"]
        ],
        executed=_step_output_from_dict(d["executed"]) if d["executed"] else None,
        replan_exhausted=d["replan_exhausted"],
        state_before=d["state_before"],
        state_after=d["state_after"],
        before=images.get(d["before"]),
        after=images.get(d["after"]),
        regions=[DiffRegion(*r) for r in d["regions"]],
        sra=SraOutput(**d["sra"]) if d["sra"] else None,
        reflection=Reflection(**d["reflection"]) if d["reflection"] else None,
        calls=[ModelCall.from_dict(c) for c in d["calls"]],
        error=d["error"],
        timings=d["timings"],
    )


def _header(trace: EpisodeTrace) -> dict:
    return {
        "schema": TRACE_SCHEMA,
        "task": trace.task,
        "config": trace.config,
        "status": trace.status,
        "steps": len(trace.steps),
    }


def write_trace(trace: EpisodeTrace, path: Union[str, Path]) -> Path:
    """Write ``trace`` as JSON lines; PNGs go to ``<stem>_images/`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = _ImageStore(path.parent, f"{path.stem}_images")
    lines = [json.dumps(_header(trace), ensure_ascii=False)]
    lines += [json.dumps(step_to_dict(st, images), ensure_ascii=False) for st in trace.steps]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_trace(path: Union[str, Path]) -> EpisodeTrace:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptTrace(f"cannot read {path}: {exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise CorruptTrace("file does not end with a newline (truncated?)", len(lines))
    if not lines:
        raise CorruptTrace("empty trace file", 1)
    images = _ImageStore(path.parent, f"{path.stem}_images")
    records = []
    for n, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptTrace(f"invalid JSON: {exc.msg}", n) from None
    header = records[0]
    if not isinstance(header, dict) or header.get("schema") != TRACE_SCHEMA:
        raise CorruptTrace(
            f"unsupported trace schema {header.get('schema') if isinstance(header, dict) else None!r}", 1
        )
    try:
        trace = EpisodeTrace(header["task"], header["config"], [], header["status"])
        expected = header["steps"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptTrace(f"bad header: {exc!r}", 1) from None
    for n, rec in enumerate(records[1:], start=2):
        try:
            trace.steps.append(step_from_dict(rec, images))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise CorruptTrace(f"bad step record: {exc!r}", n) from None
    if len(trace.steps) != expected:
        raise CorruptTrace(
            f"header declares {expected} steps, found {len(trace.steps)}", len(lines) + 1
        )
    return trace


def _comparable_lines(trace: EpisodeTrace) -> Iterator[str]:
    yield json.dumps(_header(trace), sort_keys=True)
    for st in trace.steps:
        d = step_to_dict(st, _DigestOnly())
        d.pop("timings")
        yield json.dumps(d, sort_keys=True)


class _DigestOnly(_ImageStore):
    def __init__(self):
        pass

    def put(self, image: Optional[RasterImage]) -> Optional[str]:
        return image.digest() if image is not None else None


def trace_fingerprint(trace: EpisodeTrace) -> str:
    """SHA-256 over everything in a trace except wall-clock timings."""
    h = hashlib.sha256()
    for line in _comparable_lines(trace):
        h.update(line.encode("utf-8") + b"\n")
    return h.hexdigest()


def strip_timings(trace: EpisodeTrace) -> EpisodeTrace:
    return replace(trace, steps=[replace(st, timings={}) for st in trace.steps])
