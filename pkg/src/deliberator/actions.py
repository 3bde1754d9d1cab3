"""Action space, wire-format parsing and coordinate scaling.

Coordinates are integers in thousandths of the screen (0-999 on each axis).
Two textual encodings exist:

* the tool-call block the manager emits::

      <tool_call>
      {"name": "click", "arguments": {"coordinate": [450, 300]}}
      </tool_call>

* the call syntax the corrector uses, e.g. ``click(coordinate=[450, 300])``.
"""

from __future__ import annotations

import ast
import enum
import json
import math
import re
from dataclasses import dataclass
from typing import Any, ClassVar, Mapping, Optional

COORD_MAX = 999
DEFAULT_LONG_PRESS_SECONDS = 1.0

SYSTEM_BUTTONS = ("Back", "Home", "Enter")
TERMINATE_STATUSES = ("success", "failure")


class FaultCategory(enum.Enum):
    ACTION_TYPE_ERROR = "ActionTypeError"
    ACTION_PARAMETERS_ERROR = "ActionParametersError"
    INVALID_ACTION = "InvalidAction"


class ActionParseError(ValueError):
    """Base for every action wire-format failure.

    ``raw`` carries the offending model completion when known, so callers can
    attach it to traces.
    """

    fault: ClassVar[Optional[FaultCategory]] = None

    def __init__(self, message: str, raw: Optional[str] = None):
        super().__init__(message)
        self.raw = raw


class MissingToolCall(ActionParseError):
    pass


class MultipleToolCalls(ActionParseError):
    pass


class MalformedBody(ActionParseError):
    pass


class MissingThought(ActionParseError):
    pass


class MalformedCall(ActionParseError):
    pass


class UnknownAction(ActionParseError):
    fault = FaultCategory.INVALID_ACTION


class BadArguments(ActionParseError):
    fault = FaultCategory.ACTION_PARAMETERS_ERROR


@dataclass(frozen=True)
class Coordinate:
    x: int
    y: int

    def __post_init__(self):
        for v in (self.x, self.y):
            if type(v) is not int or not 0 <= v <= COORD_MAX:
                raise BadArguments(f"coordinate component {v!r} outside 0..{COORD_MAX}")

    def as_list(self) -> list[int]:
        return [self.x, self.y]


# --------------------------------------------------------------------------
# Action variants
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    name: ClassVar[str] = ""
    # argument name -> kind; order is the canonical encoding order
    params: ClassVar[tuple[tuple[str, str], ...]] = ()
    optional: ClassVar[frozenset[str]] = frozenset()
    description: ClassVar[str] = ""

    def __post_init__(self):
        for pname, kind in self.params:
            attr = _attr(pname)
            value = getattr(self, attr)
            if kind == "coordinate":
                if not isinstance(value, Coordinate):
                    raise BadArguments(f"{self.name}.{pname} must be a Coordinate")
            else:
                object.__setattr__(self, attr, _check_value(self.name, pname, kind, value))

    def arguments(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for pname, kind in self.params:
            value = getattr(self, _attr(pname))
            out[pname] = value.as_list() if kind == "coordinate" else value
        return out

    @property
    def coordinates(self) -> tuple[Coordinate, ...]:
        return tuple(
            getattr(self, _attr(p)) for p, kind in self.params if kind == "coordinate"
        )


def _attr(param: str) -> str:
    return "end" if param == "coordinate2" else param


@dataclass(frozen=True)
class Key(Action):
    text: str
    name: ClassVar[str] = "key"
    params: ClassVar = (("text", "text"),)
    description: ClassVar[str] = "Performs a key event on the device (e.g., volume up, power)."


@dataclass(frozen=True)
class Click(Action):
    coordinate: Coordinate
    name: ClassVar[str] = "click"
    params: ClassVar = (("coordinate", "coordinate"),)
    description: ClassVar[str] = "Clicks a specific (x, y) coordinate on the screen."


@dataclass(frozen=True)
class LongPress(Action):
    coordinate: Coordinate
    time: float = DEFAULT_LONG_PRESS_SECONDS
    name: ClassVar[str] = "long_press"
    params: ClassVar = (("coordinate", "coordinate"), ("time", "time"))
    optional: ClassVar = frozenset({"time"})
    description: ClassVar[str] = "Long-presses a coordinate for a specified duration."


@dataclass(frozen=True)
class Swipe(Action):
    coordinate: Coordinate
    end: Coordinate
    name: ClassVar[str] = "swipe"
    params: ClassVar = (("coordinate", "coordinate"), ("coordinate2", "coordinate"))
    description: ClassVar[str] = "Swipes from a start coordinate to an end coordinate."


@dataclass(frozen=True)
class Type(Action):
    text: str
    name: ClassVar[str] = "type"
    params: ClassVar = (("text", "text"),)
    description: ClassVar[str] = "Inputs specified text into the active element."


@dataclass(frozen=True)
class ClearText(Action):
    name: ClassVar[str] = "clear_text"
    description: ClassVar[str] = "Clears all text in the active input field."


@dataclass(frozen=True)
class SystemButton(Action):
    button: str
    name: ClassVar[str] = "system_button"
    params: ClassVar = (("button", "button"),)
    description: ClassVar[str] = "Presses a system-level button (e.g., Back, Home)."


@dataclass(frozen=True)
class Open(Action):
    text: str
    name: ClassVar[str] = "open"
    params: ClassVar = (("text", "text"),)
    description: ClassVar[str] = "Opens a specified application."


@dataclass(frozen=True)
class Wait(Action):
    time: float
    name: ClassVar[str] = "wait"
    params: ClassVar = (("time", "time"),)
    description: ClassVar[str] = "Pauses execution for a specified duration."


@dataclass(frozen=True)
class TakeNote(Action):
    text: str
    name: ClassVar[str] = "take_note"
    params: ClassVar = (("text", "text"),)
    description: ClassVar[str] = "Extracts and saves important information for future use."


@dataclass(frozen=True)
class Terminate(Action):
    status: str
    name: ClassVar[str] = "terminate"
    params: ClassVar = (("status", "status"),)
    description: ClassVar[str] = "Terminates the task and reports the final status."


ACTION_TYPES: dict[str, type[Action]] = {
    cls.name: cls
    for cls in (
        Key, Click, LongPress, Swipe, Type, ClearText,
        SystemButton, Open, Wait, TakeNote, Terminate,
    )
}

COORDINATE_ACTIONS = (Click, LongPress, Swipe)


def is_visualizable(action: Action) -> bool:
    return isinstance(action, COORDINATE_ACTIONS)


# --------------------------------------------------------------------------
# Construction and validation
# --------------------------------------------------------------------------


def _check_value(action_name: str, pname: str, kind: str, value: Any) -> Any:
    where = f"{action_name}.{pname}"
    if kind == "coordinate":
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise BadArguments(f"{where} must be a pair [x, y], got {value!r}")
        x, y = value
        return Coordinate(x, y)
    if kind == "time":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadArguments(f"{where} must be a number of seconds, got {value!r}")
        if not math.isfinite(value) or value <= 0:
            raise BadArguments(f"{where} must be positive, got {value!r}")
        return float(value)
    if not isinstance(value, str) or not value.strip():
        raise BadArguments(f"{where} must be a non-empty string, got {value!r}")
    if kind == "button":
        for b in SYSTEM_BUTTONS:
            if value.strip().lower() == b.lower():
                return b
        raise BadArguments(f"{where} must be one of {SYSTEM_BUTTONS}, got {value!r}")
    if kind == "status":
        if value not in TERMINATE_STATUSES:
            raise BadArguments(f"{where} must be one of {TERMINATE_STATUSES}, got {value!r}")
    return value


def action_from_raw(name: Any, arguments: Any) -> Action:
    """Build a validated action from a raw ``(name, arguments)`` pair."""
    if not isinstance(name, str) or name not in ACTION_TYPES:
        raise UnknownAction(f"unknown action {name!r}")
    if not isinstance(arguments, Mapping):
        raise BadArguments(f"arguments of {name} must be an object, got {arguments!r}")
    cls = ACTION_TYPES[name]
    allowed = {p for p, _ in cls.params}
    extra = set(arguments) - allowed
    if extra:
        raise BadArguments(f"{name} got unexpected arguments {sorted(extra)}")
    kwargs = {}
    for pname, kind in cls.params:
        if pname not in arguments:
            if pname in cls.optional:
                continue
            raise BadArguments(f"{name} is missing required argument {pname!r}")
        kwargs[_attr(pname)] = _check_value(name, pname, kind, arguments[pname])
    return cls(**kwargs)


def schema_fault(name: Any, arguments: Any) -> Optional[FaultCategory]:
    """Mechanical fault class of a raw pair, or None when it is well formed.

    Action-type mismatches need semantic judgement and are never reported here.
    """
    try:
        action_from_raw(name, arguments)
    except UnknownAction:
        return FaultCategory.INVALID_ACTION
    except BadArguments:
        return FaultCategory.ACTION_PARAMETERS_ERROR
    return None


# --------------------------------------------------------------------------
# Encodings
# --------------------------------------------------------------------------


def canonical_encode(action: Action) -> str:
    return json.dumps(
        {"name": action.name, "arguments": action.arguments()},
        separators=(",", ":"),
        ensure_ascii=False,
    )


def canonical_decode(text: str) -> Action:
    """Inverse of :func:`canonical_encode`."""
    return action_from_raw(*parse_tool_call(text))


def _call_value(value: Any) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(str(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return json.dumps(value, ensure_ascii=False)


def render_call(action: Action) -> str:
    """Call-syntax rendering, the inverse of :func:`parse_call_string`."""
    args = ", ".join(f"{k}={_call_value(v)}" for k, v in action.arguments().items())
    return f"{action.name}({args})"


def _literal(node: ast.AST) -> Any:
    # bare identifiers are taken as unquoted strings: system_button(button=Back)
    if isinstance(node, ast.Name):
        return node.id
    return ast.literal_eval(node)


def parse_call_string(raw: str) -> Action:
    if not isinstance(raw, str):
        raise MalformedCall(f"expected call string, got {raw!r}")
    text = raw.strip()
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise MalformedCall(f"cannot parse call {raw!r}: {exc.msg}") from None
    call = tree.body
    if not isinstance(call, ast.Call) or not isinstance(call.func, ast.Name):
        raise MalformedCall(f"expected name(arg=value, ...), got {raw!r}")
    name = call.func.id
    if name not in ACTION_TYPES:
        raise UnknownAction(f"unknown action {name!r}")
    params = [p for p, _ in ACTION_TYPES[name].params]
    if len(call.args) > len(params):
        raise BadArguments(f"{name} takes at most {len(params)} arguments")
    args: dict[str, Any] = {}
    try:
        for pname, node in zip(params, call.args):
            args[pname] = _literal(node)
        for kw in call.keywords:
            if kw.arg is None or kw.arg in args:
                raise BadArguments(f"bad or repeated keyword in {raw!r}")
            args[kw.arg] = _literal(kw.value)
    except ValueError:
        raise MalformedCall(f"non-literal argument in {raw!r}") from None
    return action_from_raw(name, args)


# --------------------------------------------------------------------------
# Manager output
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepOutput:
    thought: str
    action_description: str
    action: Action


_TOOL_CALL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_THOUGHT_RE = re.compile(
    r"^\s*Thought:\s*(.*?)\s*(?=^\s*Action:|<tool_call>|\Z)", re.DOTALL | re.MULTILINE
)
_DESCRIPTION_RE = re.compile(r"^\s*Action:\s*(.*?)\s*(?=<tool_call>|\Z)", re.DOTALL | re.MULTILINE)


def parse_tool_call(body: str) -> tuple[Any, Any]:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedBody(f"tool call body is not JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedBody("tool call body must be a JSON object")
    if "name" not in obj or "arguments" not in obj:
        raise MalformedBody("tool call object needs 'name' and 'arguments'")
    return obj["name"], obj["arguments"]


def parse_step_output(raw: str) -> StepOutput:
    blocks = _TOOL_CALL_RE.findall(raw)
    if not blocks:
        raise MissingToolCall("no <tool_call> block in completion", raw)
    if len(blocks) > 1:
        raise MultipleToolCalls(f"{len(blocks)} <tool_call> blocks; exactly one allowed", raw)
    head = raw[: raw.index("<tool_call>")]
    m = _THOUGHT_RE.search(head)
    thought = m.group(1).strip() if m else ""
    if not thought:
        raise MissingThought("completion has no Thought", raw)
    m = _DESCRIPTION_RE.search(head)
    description = m.group(1).strip() if m else ""
    try:
        action = action_from_raw(*parse_tool_call(blocks[0]))
    except ActionParseError as exc:
        exc.raw = raw
        raise
    return StepOutput(thought=thought, action_description=description, action=action)


def format_step_output(step: StepOutput) -> str:
    """Render a step in the manager's response format."""
    return (
        f"Thought: {step.thought}\n"
        f"Action: {step.action_description}\n"
        f"<tool_call>\n{canonical_encode(step.action)}\n</tool_call>"
    )


# --------------------------------------------------------------------------
# Coordinates
# --------------------------------------------------------------------------


def scale_coordinate(c: Coordinate, width: int, height: int) -> tuple[int, int]:
    """Map thousandths to a pixel, sending 0 to 0 and 999 to the last pixel."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")

    def one(v: int, dim: int) -> int:
        # round-half-up of v * (dim - 1) / 999 in exact integer arithmetic
        px = (2 * v * (dim - 1) + COORD_MAX) // (2 * COORD_MAX)
        return min(max(px, 0), dim - 1)

    return one(c.x, width), one(c.y, height)


def tool_schemas() -> list[dict[str, Any]]:
    """Function signatures for every action, as advertised to the models."""
    kinds = {
        "coordinate": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "time": {"type": "number"},
        "text": {"type": "string"},
        "button": {"type": "string", "enum": list(SYSTEM_BUTTONS)},
        "status": {"type": "string", "enum": list(TERMINATE_STATUSES)},
    }
    out = []
    for name, cls in ACTION_TYPES.items():
        props = {p: dict(kinds[k]) for p, k in cls.params}
        out.append({
            "type": "function",
            "function": {
                "name": name,
                "description": cls.description,
                "parameters": {
                    "type": "object",
                    "properties": props,
                    "required": [p for p, _ in cls.params if p not in cls.optional],
                },
            },
        })
    return out


def action_space_text() -> str:
    lines = []
    for name, cls in ACTION_TYPES.items():
        args = ", ".join(p for p, _ in cls.params) or "None"
        lines.append(f"- {name}({args}): {cls.description}")
    return "\n".join(lines)
