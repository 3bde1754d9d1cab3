"""Synthetic Markor device and scripted model replies.

Used by the test-suite and by ``deliberator demo``: screens are flat-colour
mock-ups drawn with numpy, and the replies cover one full note-creation
episode plus three short episodes exercising each gate route.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .actions import StepOutput, action_from_raw, format_step_output
from .environment import MockEnvironment, Scenario, load_scenario
from .gateway import Backend, Cassette, RecordingBackend, ScriptedBackend
from .imaging import RasterImage
from .orchestrator import EpisodeConfig, EpisodeTrace, run_episode

WIDTH, HEIGHT = 540, 1200

MARKOR_TASK = (
    "Create a new note in Markor named 2023_01_26_wise_yacht.md with the following text: "
    "Ignorance is bliss"
)
OPEN_TASK = "Open the Markor app."


def _canvas(bg) -> np.ndarray:
    arr = np.empty((HEIGHT, WIDTH, 3), dtype=np.uint8)
    arr[:] = bg
    return arr


def _fill(arr, box, color):
    # box in thousandths: x0, y0, x1, y1
    x0, y0, x1, y1 = box
    arr[y0 * HEIGHT // 1000:y1 * HEIGHT // 1000, x0 * WIDTH // 1000:x1 * WIDTH // 1000] = color


def _screens() -> dict[str, RasterImage]:
    home = _canvas((40, 60, 90))
    for i, color in enumerate([(200, 80, 60), (60, 160, 90), (230, 200, 40), (90, 90, 200)]):
        _fill(home, (80 + i * 220, 300, 240 + i * 220, 380), color)  # app icons; Markor first

    listing = _canvas((250, 250, 250))
    _fill(listing, (0, 0, 1000, 80), (30, 110, 200))  # toolbar
    for row in range(3):
        _fill(listing, (40, 120 + row * 90, 960, 190 + row * 90), (225, 225, 225))
    _fill(listing, (850, 880, 960, 960), (240, 90, 60))  # create button

    editor = _canvas((255, 255, 255))
    _fill(editor, (0, 0, 1000, 80), (30, 110, 200))
    _fill(editor, (860, 20, 980, 70), (250, 250, 250))  # save icon
    _fill(editor, (40, 140, 960, 220), (230, 230, 240))  # name field
    _fill(editor, (40, 260, 960, 800), (245, 245, 235))  # body

    saved = listing.copy()
    _fill(saved, (40, 390, 960, 460), (200, 230, 200))  # the new note

    return {k: RasterImage(v) for k, v in
            {"home": home, "list": listing, "editor": editor, "saved": saved}.items()}


SCENARIO_SPEC = {
    "schema": 1,
    "initial": "home",
    "terminal": ["saved"],
    "states": {
        "home": {
            "screenshot": "home.png",
            "transitions": [
                {"match": {"kind": "open", "text": "markor"}, "to": "list"},
                {"match": {"kind": "click", "region": [80, 300, 240, 380]}, "to": "list"},
            ],
        },
        "list": {
            "screenshot": "list.png",
            "transitions": [
                {"match": {"kind": "click", "region": [850, 880, 960, 960]}, "to": "editor"},
            ],
        },
        "editor": {
            "screenshot": "editor.png",
            "transitions": [
                {"match": {"kind": "click", "region": [860, 20, 980, 70]}, "to": "saved"},
                {"match": {"kind": "system_button", "text": "back"}, "to": "list"},
            ],
        },
        "saved": {"screenshot": "saved.png"},
    },
}


def markor_scenario() -> Scenario:
    shots = _screens()
    return load_scenario(SCENARIO_SPEC, images={f"{k}.png": v for k, v in shots.items()})


def write_scenario(directory: Union[str, Path]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, image in _screens().items():
        image.save(d / f"{name}.png")
    path = d / "scenario.json"
    path.write_text(json.dumps(SCENARIO_SPEC, indent=2) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Scripted replies
# --------------------------------------------------------------------------


def manager(thought: str, description: str, name: str, **arguments) -> str:
    return format_step_output(StepOutput(thought, description, action_from_raw(name, arguments)))


def tac(consistent: bool, reason: str = "") -> str:
    reason = reason or ("The action matches the thought." if consistent
                        else "The marked target does not match the thought.")
    return f"{reason}\n<verdict>{1 if consistent else 0}</verdict>"


def aca(analysis: str, category: str, correction: str, action: Optional[str], confidence=0.9) -> str:
    return json.dumps({
        "analysis": analysis,
        "error_category": category,
        "correction_type": correction,
        "corrected_action": action,
        "confidence_score": confidence,
    }, indent=2)


def sra(outcome: str = "A", error: Optional[str] = None) -> str:
    return f"### Outcome ###\n{outcome}\n### Error Description ###\n{error or 'None'}\n"


def markor_replies() -> list[str]:
    """The eight-step note episode; step 2 is caught by the gate and fixed."""
    return [
        manager("I need to open Markor to create a note.", "Open the Markor app.", "open", text="Markor"),
        tac(True), sra("A"),
        manager("Markor is open; I should tap the create button at the bottom right.",
                "Tap the create-new-file button.", "click", coordinate=[500, 920]),
        tac(False, "The red circle sits at the bottom centre, not on the create button."),
        aca("The marker is in empty space; the create button is at the bottom right corner.",
            "CLICK_ERROR", "MODIFY_COORDINATES", "click(coordinate=[905, 920])"),
        sra("A"),
        manager("The editor is open; I need to focus the file name field first.",
                "Tap the file name field.", "click", coordinate=[500, 180]),
        tac(True), sra("A"),
        manager("The name field is focused; type the file name.",
                "Type the file name.", "type", text="2023_01_26_wise_yacht.md"),
        tac(True), sra("A"),
        manager("The name is entered; now focus the note body.",
                "Tap the note body.", "click", coordinate=[500, 500]),
        tac(True), sra("A"),
        manager("The body is focused; type the note text.",
                "Type the note text.", "type", text="Ignorance is bliss"),
        tac(True), sra("A"),
        manager("Name and text are entered; save the note with the save icon.",
                "Tap the save icon at the top right.", "click", coordinate=[920, 45]),
        tac(True), sra("A"),
        manager("The note is saved, so the task is complete.",
                "Finish the task.", "terminate", status="success"),
        tac(True),
    ]


def consistent_replies() -> list[str]:
    return [
        manager("I should open Markor.", "Open Markor.", "open", text="Markor"),
        tac(True), sra("A"),
        manager("Markor is open, the task is done.", "Finish.", "terminate", status="success"),
        tac(True),
    ]


def replace_replies() -> list[str]:
    return [
        manager("I should launch Markor.", "Tap the Markor icon.", "click", coordinate=[500, 600]),
        tac(False, "The marked point is on empty wallpaper."),
        aca("No icon is under the marker; launching the app directly is more reliable.",
            "PLANNING_ERROR", "REPLACE_ACTION", 'open(text="Markor")'),
        sra("A"),
        manager("Markor is open, the task is done.", "Finish.", "terminate", status="success"),
        tac(True),
    ]


def replan_replies() -> list[str]:
    return [
        manager("The task looks finished.", "Finish.", "terminate", status="success"),
        tac(False, "Markor is not open yet; finishing now is premature."),
        aca("The home screen is showing, so the app has not been opened yet.",
            "PLANNING_ERROR", "REPLAN", None),
        manager("Markor is not open yet, so I should open it.", "Open Markor.", "open", text="Markor"),
        tac(True), sra("A"),
        manager("Markor is open, the task is done.", "Finish.", "terminate", status="success"),
        tac(True),
    ]


@dataclass(frozen=True)
class DemoEpisode:
    task: str
    replies: Callable[[], list[str]]


EPISODES = {
    "markor-note": DemoEpisode(MARKOR_TASK, markor_replies),
    "consistent": DemoEpisode(OPEN_TASK, consistent_replies),
    "replace-action": DemoEpisode(OPEN_TASK, replace_replies),
    "replan": DemoEpisode(OPEN_TASK, replan_replies),
}


def run_demo(
    name: str, backend: Optional[Backend] = None, config: EpisodeConfig = EpisodeConfig()
) -> EpisodeTrace:
    ep = EPISODES[name]
    env = MockEnvironment(markor_scenario())
    return run_episode(ep.task, env, backend or ScriptedBackend(ep.replies()), config)


def record_cassette(name: str, config: EpisodeConfig = EpisodeConfig()) -> tuple[Cassette, EpisodeTrace]:
    """Run a demo episode against its scripted replies and capture the cassette."""
    rec = RecordingBackend(ScriptedBackend(EPISODES[name].replies()))
    trace = run_demo(name, rec, config)
    return rec.cassette, trace


def demo_names() -> Sequence[str]:
    return tuple(EPISODES)
