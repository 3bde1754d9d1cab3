"""Manager, consistency gate, corrector and reflector.

Each role is a prompt builder, one gateway call, and a strict parser. Parsers
either return a typed value or raise a classified :class:`WireFormatError`
(or an :class:`~deliberator.actions.ActionParseError` for action payloads).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from . import prompts
from .actions import (
    Action,
    StepOutput,
    action_space_text,
    is_visualizable,
    parse_call_string,
    parse_step_output,
    render_call,
    tool_schemas,
)
from .environment import Observation
from .gateway import Backend, ChatMessage, ModelCall, Part, complete
from .imaging import DiffRegion, MarkerStyle, RasterImage, diff_flag, draw_boxes
from .memory import StepRecord, WorkingMemory, render_memory_sections


class WireFormatError(ValueError):
    def __init__(self, message: str, raw: Optional[str] = None):
        super().__init__(message)
        self.raw = raw


class MissingVerdict(WireFormatError):
    pass


class AmbiguousVerdict(WireFormatError):
    pass


class MalformedJson(WireFormatError):
    pass


class UnknownCategory(WireFormatError):
    pass


class UnknownCorrectionType(WireFormatError):
    pass


class InconsistentFields(WireFormatError):
    pass


class MissingOutcome(WireFormatError):
    pass


class InvalidOutcomeLetter(WireFormatError):
    pass


ERROR_CATEGORIES = ("CLICK_ERROR", "PLANNING_ERROR", "ACTION_IMPOSSIBILITY_ERROR")
# the corrector prompt names the third category two ways
CATEGORY_ALIASES = {"ACTION_INVALID_ERROR": "ACTION_IMPOSSIBILITY_ERROR"}
CORRECTION_TYPES = ("REPLACE_ACTION", "MODIFY_COORDINATES", "REPLAN")
OUTCOMES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class TacVerdict:
    consistent: bool


@dataclass(frozen=True)
class AcaOutput:
    analysis: str
    error_category: str
    correction_type: str
    corrected_action: Optional[Action]
    confidence: float


@dataclass(frozen=True)
class ReplanSignal:
    analysis: str


@dataclass(frozen=True)
class SraOutput:
    outcome: str
    error_description: Optional[str]

    @property
    def failed(self) -> bool:
        return self.outcome in ("B", "C")


def _with_images(template_text: str, images: Sequence[RasterImage]) -> tuple[Part, ...]:
    chunks = template_text.split(prompts.IMAGE_PLACEHOLDER)
    if len(chunks) != len(images) + 1:
        raise ValueError("image count does not match placeholders")
    parts: list[Part] = []
    for chunk, image in zip(chunks, list(images) + [None]):
        if chunk:
            parts.append(chunk)
        if image is not None:
            parts.append(image)
    return tuple(parts)


def _tools_text() -> str:
    return "\n".join(json.dumps(t, ensure_ascii=False) for t in tool_schemas())


# --------------------------------------------------------------------------
# Manager
# --------------------------------------------------------------------------


def build_manager_messages(
    task: str, observation: Observation, tips: str, memory: WorkingMemory
) -> list[ChatMessage]:
    user = prompts.MANAGER_USER.format(
        retrieval_tips=tips,
        task=task,
        device_time=observation.device_time,
        memory_sections=render_memory_sections(memory).render(),
        resized_width=observation.width,
        resized_height=observation.height,
    )
    return [
        ChatMessage.text("system", prompts.MANAGER_SYSTEM.format(tools=_tools_text())),
        ChatMessage("user", _with_images(user, [observation.screenshot])),
    ]


def manager_propose(
    task: str,
    observation: Observation,
    tips: str,
    memory: WorkingMemory,
    backend: Backend,
    transcript: Optional[list[ModelCall]] = None,
) -> tuple[StepOutput, str]:
    """Ask the manager for the next thought-action pair.

    Returns the parsed step and the raw completion; parse errors carry the
    completion in ``.raw``.
    """
    messages = build_manager_messages(task, observation, tips, memory)
    raw = complete(messages, backend, transcript, agent="manager")
    return parse_step_output(raw), raw


# --------------------------------------------------------------------------
# Thought-action consistency gate
# --------------------------------------------------------------------------

_VERDICT_RE = re.compile(r"<verdict>\s*(.*?)\s*</verdict>", re.DOTALL)


def parse_verdict(text: str) -> TacVerdict:
    values = {v for v in _VERDICT_RE.findall(text) if v in ("0", "1")}
    if not values:
        raise MissingVerdict("no <verdict>0|1</verdict> in completion", text)
    if len(values) > 1:
        raise AmbiguousVerdict("completion contains both verdicts", text)
    return TacVerdict(consistent=values.pop() == "1")


def build_tac_messages(
    task: str, step: StepOutput, annotated: RasterImage, before: RasterImage
) -> list[ChatMessage]:
    user = prompts.TAC_USER.format(
        task=task,
        thought=step.thought,
        action=render_call(step.action),
        description=step.action_description,
    )
    return [
        ChatMessage.text("system", prompts.TAC_SYSTEM.format(action_space=action_space_text())),
        ChatMessage("user", _with_images(user, [before, annotated])),
    ]


def tac_check(
    task: str,
    step: StepOutput,
    annotated: RasterImage,
    before: RasterImage,
    backend: Backend,
    transcript: Optional[list[ModelCall]] = None,
) -> TacVerdict:
    """Gate a proposal. ``annotated`` is the marked screenshot, or the plain
    screenshot for actions that have no visual marker."""
    raw = complete(build_tac_messages(task, step, annotated, before), backend, transcript, agent="tac")
    return parse_verdict(raw)


# --------------------------------------------------------------------------
# Action correction
# --------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```$", re.DOTALL)


def extract_json_object(text: str) -> dict:
    """Decode exactly one JSON object, optionally wrapped in a code fence."""
    body = text.strip()
    m = _FENCE_RE.match(body)
    if m:
        body = m.group(1).strip()
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"not a single JSON object: {exc.msg}", text) from None
    if not isinstance(obj, dict):
        raise MalformedJson(f"expected a JSON object, got {type(obj).__name__}", text)
    return obj


def parse_aca_output(text: str) -> AcaOutput:
    obj = extract_json_object(text)
    for key in ("analysis", "error_category", "correction_type", "corrected_action", "confidence_score"):
        if key not in obj:
            raise MalformedJson(f"missing field {key!r}", text)
    analysis = obj["analysis"]
    if not isinstance(analysis, str):
        raise MalformedJson("analysis must be a string", text)
    category = obj["error_category"]
    category = CATEGORY_ALIASES.get(category, category)
    if category not in ERROR_CATEGORIES:
        raise UnknownCategory(f"unknown error_category {obj['error_category']!r}", text)
    ctype = obj["correction_type"]
    if ctype not in CORRECTION_TYPES:
        raise UnknownCorrectionType(f"unknown correction_type {ctype!r}", text)
    conf = obj["confidence_score"]
    if isinstance(conf, str):
        try:
            conf = float(conf)
        except ValueError:
            raise MalformedJson(f"confidence_score {conf!r} is not a number", text) from None
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
        raise MalformedJson(f"confidence_score must be in [0, 1], got {obj['confidence_score']!r}", text)

    raw_action = obj["corrected_action"]
    if ctype == "REPLAN":
        if raw_action is not None:
            raise InconsistentFields("REPLAN must have a null corrected_action", text)
        action = None
    else:
        if not isinstance(raw_action, str) or not raw_action.strip():
            raise InconsistentFields(f"{ctype} requires a corrected_action string", text)
        action = parse_call_string(raw_action)
        if ctype == "MODIFY_COORDINATES" and not is_visualizable(action):
            raise InconsistentFields("MODIFY_COORDINATES requires a coordinate action", text)
    return AcaOutput(analysis, category, ctype, action, float(conf))


def build_aca_messages(
    step: StepOutput, annotated: RasterImage, before: RasterImage
) -> list[ChatMessage]:
    user = prompts.ACA_USER.format(
        thought=step.thought,
        action=render_call(step.action),
        description=step.action_description,
    )
    return [
        ChatMessage.text("system", prompts.ACA_SYSTEM.format(action_space=action_space_text())),
        ChatMessage("user", _with_images(user, [before, annotated])),
    ]


def aca_correct(
    step: StepOutput,
    annotated: RasterImage,
    before: RasterImage,
    backend: Backend,
    transcript: Optional[list[ModelCall]] = None,
) -> AcaOutput:
    raw = complete(build_aca_messages(step, annotated, before), backend, transcript, agent="aca")
    return parse_aca_output(raw)


def apply_correction(original: StepOutput, out: AcaOutput) -> Union[StepOutput, ReplanSignal]:
    if out.correction_type == "REPLAN":
        return ReplanSignal(out.analysis)
    thought = original.thought
    if out.analysis.strip():
        thought = f"{thought} [Correction: {out.analysis.strip()}]"
    return StepOutput(thought, original.action_description, out.corrected_action)


# --------------------------------------------------------------------------
# Status reflection
# --------------------------------------------------------------------------

_OUTCOME_RE = re.compile(r"^\s*#{3}\s*Outcome\s*#{3}\s*$", re.MULTILINE)
_ERROR_RE = re.compile(r"^\s*#{3}\s*Error Description\s*#{3}\s*$", re.MULTILINE)


def parse_sra_output(text: str) -> SraOutput:
    m = _OUTCOME_RE.search(text)
    if not m:
        raise MissingOutcome("no ### Outcome ### section", text)
    e = _ERROR_RE.search(text, m.end())
    outcome_body = text[m.end(): e.start() if e else len(text)].strip()
    if not outcome_body:
        raise MissingOutcome("empty ### Outcome ### section", text)
    token = re.match(r'["\'*\s]*([A-Za-z]+)', outcome_body)
    letter = token.group(1) if token else outcome_body[:1]
    if letter not in OUTCOMES:
        raise InvalidOutcomeLetter(f"outcome {letter!r} not one of {OUTCOMES}", text)
    desc: Optional[str] = text[e.end():].strip() if e else ""
    if not desc or desc.strip("\"'.").casefold() == "none":
        desc = None
    if letter == "A" and desc is not None:
        raise InconsistentFields("outcome A must have no error description", text)
    if letter in ("B", "C") and desc is None:
        raise InconsistentFields(f"outcome {letter} requires an error description", text)
    return SraOutput(letter, desc)


def build_sra_messages(
    task: str,
    step: StepRecord,
    before: RasterImage,
    after: RasterImage,
    regions: Sequence[DiffRegion],
    style: MarkerStyle = MarkerStyle(),
) -> list[ChatMessage]:
    changed = diff_flag(regions)
    shown_after = draw_boxes(after, regions, style) if changed else after
    user = prompts.SRA_USER.format(
        goal=task,
        sub_goal=step.thought,
        resized_width=after.width,
        resized_height=after.height,
        diff_sentence=prompts.SRA_DIFF_SENTENCE if changed else "",
        action=render_call(step.action),
        action_desc=step.description,
    )
    return [ChatMessage("user", _with_images(user, [before, shown_after]))]


def sra_reflect(
    task: str,
    step: StepRecord,
    before: RasterImage,
    after: RasterImage,
    regions: Sequence[DiffRegion],
    backend: Backend,
    transcript: Optional[list[ModelCall]] = None,
    style: MarkerStyle = MarkerStyle(),
) -> SraOutput:
    raw = complete(
        build_sra_messages(task, step, before, after, regions, style), backend, transcript, agent="sra"
    )
    return parse_sra_output(raw)
