"""Device abstraction: a scripted state-machine mock and an adb bridge.

Scenario files are JSON::

    {
      "schema": 1,
      "initial": "list",
      "terminal": ["saved"],
      "states": {
        "list": {
          "screenshot": "list.png",
          "transitions": [
            {"match": {"kind": "click", "region": [820, 880, 980, 960]}, "to": "editor"}
          ]
        },
        ...
      }
    }

Regions are inclusive ``[x0, y0, x1, y1]`` boxes in thousandths. ``text`` in
a matcher is a case-insensitive regular expression that must match the whole
text-like argument; ``direction`` (up/down/left/right) restricts swipes.
Transitions within a state are tried in order unless the state sets
``"ordered": false``, in which case overlapping matchers are rejected.
"""

from __future__ import annotations

import datetime as dt
import json
import re
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .actions import (
    ACTION_TYPES,
    Action,
    ClearText,
    Click,
    Key,
    LongPress,
    Open,
    Swipe,
    SystemButton,
    TakeNote,
    Terminate,
    Type,
    Wait,
    scale_coordinate,
)
from .imaging import RasterImage

SCENARIO_SCHEMA = 1
DEFAULT_START_TIME = dt.datetime(2024, 1, 26, 10, 0, 0)
STEP_SECONDS = 5


class EnvError(RuntimeError):
    pass


class EnvClosed(EnvError):
    pass


class ScenarioError(ValueError):
    pass


class UnknownState(ScenarioError):
    pass


class UnreachableInitial(ScenarioError):
    pass


class OverlappingMatchers(ScenarioError):
    pass


@dataclass(frozen=True)
class Observation:
    screenshot: RasterImage
    device_time: str

    @property
    def width(self) -> int:
        return self.screenshot.width

    @property
    def height(self) -> int:
        return self.screenshot.height


@dataclass(frozen=True)
class ExecResult:
    action: Action
    state_before: str
    state_after: str
    terminated: bool = False
    status: Optional[str] = None

    @property
    def changed(self) -> bool:
        return self.state_before != self.state_after


def _text_of(action: Action) -> Optional[str]:
    for attr in ("text", "button", "status"):
        if hasattr(action, attr):
            return getattr(action, attr)
    return None


def swipe_direction(action: Swipe) -> str:
    dx = action.end.x - action.coordinate.x
    dy = action.end.y - action.coordinate.y
    if abs(dy) >= abs(dx):
        return "up" if dy < 0 else "down"
    return "left" if dx < 0 else "right"


@dataclass(frozen=True)
class ActionMatcher:
    kind: str
    region: Optional[tuple[int, int, int, int]] = None
    text: Optional[str] = None
    direction: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ACTION_TYPES:
            raise ScenarioError(f"unknown action kind {self.kind!r}")
        if self.region is not None:
            x0, y0, x1, y1 = self.region
            if not (0 <= x0 <= x1 <= 999 and 0 <= y0 <= y1 <= 999):
                raise ScenarioError(f"bad region {self.region}")
        if self.direction not in (None, "up", "down", "left", "right"):
            raise ScenarioError(f"bad swipe direction {self.direction!r}")
        if self.text is not None:
            re.compile(self.text)

    def matches(self, action: Action) -> bool:
        if action.name != self.kind:
            return False
        if self.region is not None:
            coords = action.coordinates
            if not coords:
                return False
            c = coords[0]
            x0, y0, x1, y1 = self.region
            if not (x0 <= c.x <= x1 and y0 <= c.y <= y1):
                return False
        if self.text is not None:
            value = _text_of(action)
            if value is None or not re.fullmatch(self.text, value, re.IGNORECASE):
                return False
        if self.direction is not None:
            if not isinstance(action, Swipe) or swipe_direction(action) != self.direction:
                return False
        return True

    def overlaps(self, other: "ActionMatcher") -> bool:
        if self.kind != other.kind:
            return False
        if self.region and other.region:
            a, b = self.region, other.region
            if a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1]:
                return False
        if self.text and other.text and self.text.casefold() != other.text.casefold():
            return False
        if self.direction and other.direction and self.direction != other.direction:
            return False
        return True

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ActionMatcher":
        unknown = set(d) - {"kind", "region", "text", "direction"}
        if unknown:
            raise ScenarioError(f"unknown matcher keys {sorted(unknown)}")
        region = tuple(d["region"]) if d.get("region") is not None else None
        return cls(d["kind"], region, d.get("text"), d.get("direction"))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.region is not None:
            out["region"] = list(self.region)
        if self.text is not None:
            out["text"] = self.text
        if self.direction is not None:
            out["direction"] = self.direction
        return out


@dataclass(frozen=True)
class Transition:
    matcher: ActionMatcher
    target: str


@dataclass(frozen=True)
class State:
    name: str
    screenshot: RasterImage
    transitions: tuple[Transition, ...] = ()
    ordered: bool = True


@dataclass(frozen=True)
class Scenario:
    states: Mapping[str, State]
    initial: str
    terminal: frozenset[str] = frozenset()

    def __post_init__(self):
        validate_scenario(self)


def validate_scenario(s: Scenario) -> None:
    if not s.states or s.initial not in s.states:
        raise UnreachableInitial(f"initial state {s.initial!r} is not declared")
    for name in s.terminal:
        if name not in s.states:
            raise UnknownState(f"terminal state {name!r} is not declared")
    for state in s.states.values():
        for t in state.transitions:
            if t.target not in s.states:
                raise UnknownState(f"{state.name} transitions to undeclared state {t.target!r}")
        if not state.ordered:
            ts = state.transitions
            for i in range(len(ts)):
                for j in range(i + 1, len(ts)):
                    if ts[i].matcher.overlaps(ts[j].matcher):
                        raise OverlappingMatchers(
                            f"state {state.name}: transitions {i} and {j} overlap"
                        )


def load_scenario(
    source: str | Path | Mapping[str, Any],
    base_dir: Optional[str | Path] = None,
    images: Optional[Mapping[str, RasterImage]] = None,
) -> Scenario:
    """Load a scenario from a JSON file path or an already-decoded mapping.

    Screenshot references resolve against ``images`` first, then as PNG paths
    relative to ``base_dir`` (defaulting to the scenario file's directory).
    """
    if isinstance(source, Mapping):
        data = source
    else:
        path = Path(source)
        data = json.loads(path.read_text(encoding="utf-8"))
        base_dir = base_dir or path.parent
    if data.get("schema", SCENARIO_SCHEMA) != SCENARIO_SCHEMA:
        raise ScenarioError(f"unsupported scenario schema {data.get('schema')!r}")
    images = images or {}
    states: dict[str, State] = {}
    try:
        for name, sd in (data.get("states") or {}).items():
            ref = sd["screenshot"]
            if ref in images:
                shot = images[ref]
            else:
                shot = RasterImage.from_png(Path(base_dir or ".") / ref)
            transitions = tuple(
                Transition(ActionMatcher.from_dict(td["match"]), td["to"])
                for td in sd.get("transitions", ())
            )
            states[name] = State(name, shot, transitions, bool(sd.get("ordered", True)))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None
    return Scenario(states, data.get("initial", ""), frozenset(data.get("terminal", ())))


def _format_device_time(t: dt.datetime) -> str:
    return t.strftime("%a %b %d %H:%M:%S UTC %Y")


class MockEnvironment:
    """Deterministic scripted device.

    Actions move the state along the first matching transition; unmatched
    actions leave the screen untouched. ``terminate`` closes the device.
    """

    def __init__(self, scenario: Scenario, start_time: dt.datetime = DEFAULT_START_TIME):
        self.scenario = scenario
        self.state = scenario.initial
        self.start_time = start_time
        self.steps = 0
        self.closed = False
        self.status: Optional[str] = None
        self.history: list[str] = [self.state]

    def _check_open(self):
        if self.closed:
            raise EnvClosed("environment is closed")

    def observe(self) -> Observation:
        self._check_open()
        now = self.start_time + dt.timedelta(seconds=STEP_SECONDS * self.steps)
        return Observation(self.scenario.states[self.state].screenshot, _format_device_time(now))

    def execute(self, action: Action) -> ExecResult:
        self._check_open()
        before = self.state
        self.steps += 1
        if isinstance(action, Terminate):
            self.closed = True
            self.status = action.status
            return ExecResult(action, before, before, terminated=True, status=action.status)
        for t in self.scenario.states[before].transitions:
            if t.matcher.matches(action):
                self.state = t.target
                break
        self.history.append(self.state)
        return ExecResult(action, before, self.state)

    @property
    def goal_reached(self) -> bool:
        return self.state in self.scenario.terminal


# --------------------------------------------------------------------------
# adb bridge
# --------------------------------------------------------------------------

KEYCODES = {
    "back": "KEYCODE_BACK",
    "home": "KEYCODE_HOME",
    "enter": "KEYCODE_ENTER",
    "volume up": "KEYCODE_VOLUME_UP",
    "volume down": "KEYCODE_VOLUME_DOWN",
    "power": "KEYCODE_POWER",
    "menu": "KEYCODE_MENU",
    "delete": "KEYCODE_DEL",
    "tab": "KEYCODE_TAB",
    "space": "KEYCODE_SPACE",
}

# app display name -> package, for `open`
DEFAULT_PACKAGES = {
    "markor": "net.gsantner.markor",
    "pro expense": "com.arduia.expense",
    "retro music": "code.name.monkey.retromusic",
    "simple calendar pro": "com.simplemobiletools.calendar.pro",
    "simple sms messenger": "com.simplemobiletools.smsmessenger",
    "simple gallery pro": "com.simplemobiletools.gallery.pro",
    "simple draw pro": "com.simplemobiletools.draw.pro",
    "settings": "com.android.settings",
    "chrome": "com.android.chrome",
    "contacts": "com.google.android.contacts",
    "clock": "com.google.android.deskclock",
    "camera": "com.android.camera2",
    "files": "com.google.android.documentsui",
    "osmand": "net.osmand",
    "vlc": "org.videolan.vlc",
    "joplin": "net.cozic.joplin",
    "opentracks": "de.dennisguse.opentracks",
    "tasks": "org.tasks",
    "audio recorder": "com.dimowner.audiorecorder",
    "broccoli - recipe app": "com.flauschcode.broccoli",
}

SWIPE_MS = 400
CLEAR_TEXT_DELETES = 80


def _adb_text(text: str) -> str:
    # `input text` treats %s as space; shell metacharacters must be escaped
    escaped = text.replace("%", r"\%").replace(" ", "%s")
    return shlex.quote(escaped)


def adb_commands(
    action: Action,
    width: int,
    height: int,
    packages: Mapping[str, str] = DEFAULT_PACKAGES,
) -> list[list[str]]:
    """``adb shell`` argument lists performing ``action`` on a screen of the given size.

    ``wait``, ``take_note`` and ``terminate`` need no device command.
    """
    if isinstance(action, Click):
        x, y = scale_coordinate(action.coordinate, width, height)
        return [["input", "tap", str(x), str(y)]]
    if isinstance(action, LongPress):
        x, y = scale_coordinate(action.coordinate, width, height)
        ms = str(int(round(action.time * 1000)))
        return [["input", "swipe", str(x), str(y), str(x), str(y), ms]]
    if isinstance(action, Swipe):
        x1, y1 = scale_coordinate(action.coordinate, width, height)
        x2, y2 = scale_coordinate(action.end, width, height)
        return [["input", "swipe", str(x1), str(y1), str(x2), str(y2), str(SWIPE_MS)]]
    if isinstance(action, Type):
        return [["input", "text", _adb_text(action.text)]]
    if isinstance(action, ClearText):
        return [
            ["input", "keyevent", "KEYCODE_MOVE_END"],
            ["input", "keyevent", *(["KEYCODE_DEL"] * CLEAR_TEXT_DELETES)],
        ]
    if isinstance(action, SystemButton):
        return [["input", "keyevent", KEYCODES[action.button.lower()]]]
    if isinstance(action, Key):
        code = KEYCODES.get(action.text.strip().lower())
        if code is None:
            code = action.text.strip().upper().replace(" ", "_")
            if not code.startswith("KEYCODE_"):
                code = "KEYCODE_" + code
        return [["input", "keyevent", code]]
    if isinstance(action, Open):
        pkg = packages.get(action.text.strip().lower())
        if pkg is None:
            raise ValueError(f"no package known for app {action.text!r}")
        return [["monkey", "-p", pkg, "-c", "android.intent.category.LAUNCHER", "1"]]
    if isinstance(action, (Wait, TakeNote, Terminate)):
        return []
    raise TypeError(f"unsupported action {action!r}")


class AdbDevice:
    """Live Android device over adb. Not exercised by the test-suite."""

    def __init__(self, serial: Optional[str] = None, adb: str = "adb",
                 packages: Mapping[str, str] = DEFAULT_PACKAGES, settle_seconds: float = 1.0):
        self.prefix = [adb] + (["-s", serial] if serial else [])
        self.packages = packages
        self.settle_seconds = settle_seconds
        self.closed = False
        self.status: Optional[str] = None
        self._size: Optional[tuple[int, int]] = None

    def _run(self, args: Sequence[str]) -> bytes:
        proc = subprocess.run(self.prefix + list(args), check=True, capture_output=True)
        return proc.stdout

    def observe(self) -> Observation:
        if self.closed:
            raise EnvClosed("device session is closed")
        shot = RasterImage.from_png(self._run(["exec-out", "screencap", "-p"]))
        self._size = (shot.width, shot.height)
        when = self._run(["shell", "date"]).decode().strip()
        return Observation(shot, when)

    def execute(self, action: Action) -> ExecResult:
        if self.closed:
            raise EnvClosed("device session is closed")
        if self._size is None:
            self.observe()
        w, h = self._size
        for cmd in adb_commands(action, w, h, self.packages):
            self._run(["shell", *cmd])
        if isinstance(action, Wait):
            time.sleep(action.time)
        elif isinstance(action, Terminate):
            self.closed = True
            self.status = action.status
            return ExecResult(action, "device", "device", terminated=True, status=action.status)
        time.sleep(self.settle_seconds)
        return ExecResult(action, "device", "device")
