"""Per-episode working memory: a five-step history window, the latest
reflection, and the notes recorded with ``take_note``.

All operations return new :class:`WorkingMemory` values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .actions import Action, render_call

HISTORY_WINDOW = 5


class WorkingMemoryError(ValueError):
    pass


class NonMonotonicIndex(WorkingMemoryError):
    pass


class EmptyNote(WorkingMemoryError):
    pass


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    thought: str
    action: Action
    description: str

    def render(self) -> str:
        return (
            f"Step {self.step_index}: Thought: {self.thought} "
            f"Action: {render_call(self.action)} Description: {self.description}"
        )


@dataclass(frozen=True)
class Reflection:
    """Feedback about the previous operation, shown in the Latest Reflection slot.

    ``outcome`` is the reflector's letter (A-D) or ``"REPLAN"`` when the slot
    carries a corrector's replan analysis within a step.
    """

    thought: str
    action: str
    outcome: str
    feedback: Optional[str] = None

    @property
    def is_failure(self) -> bool:
        return self.outcome in ("B", "C", "REPLAN")

    def render(self) -> str:
        if not self.is_failure:
            return ""
        return (
            f'You previously wanted to perform the operation "{self.thought}" on this page '
            f'and executed the Action "{self.action}". But the reflector find that this '
            "operation may not meet your expectation.\n"
            f"Feedback:{self.feedback or ''}\n"
            " If you think it is reasonable, you need to reflect and revise your operation "
            "this time. If you think the reflector is not correct, you can ignore the feedback."
        )


@dataclass(frozen=True)
class WorkingMemory:
    history: tuple[StepRecord, ...] = ()
    last_reflection: Optional[Reflection] = None
    notes: tuple[str, ...] = ()
    last_index: int = 0

    def push_step(self, record: StepRecord) -> "WorkingMemory":
        if record.step_index != self.last_index + 1:
            raise NonMonotonicIndex(
                f"expected step {self.last_index + 1}, got {record.step_index}"
            )
        history = (self.history + (record,))[-HISTORY_WINDOW:]
        return replace(self, history=history, last_index=record.step_index)

    def set_reflection(self, reflection: Optional[Reflection]) -> "WorkingMemory":
        return replace(self, last_reflection=reflection)

    def add_note(self, text: str) -> "WorkingMemory":
        if not text or not text.strip():
            raise EmptyNote("note text must be non-empty")
        return replace(self, notes=self.notes + (text,))

    @property
    def history_indices(self) -> list[int]:
        return [r.step_index for r in self.history]


def new_memory() -> WorkingMemory:
    return WorkingMemory()


@dataclass(frozen=True)
class MemorySections:
    history: str
    memory: str
    reflection: str

    def render(self) -> str:
        return (
            "### History Operations ###\n"
            "You have done the following operation on the current device:\n"
            f"{self.history}\n\n"
            "### Memory ###\n"
            "During previous operations, you have used the action `take_note` to record "
            "the following contents on the screenshot:\n"
            f"{self.memory}\n\n"
            "### Latest Reflection ###\n"
            f"{self.reflection}"
        )


def render_memory_sections(m: WorkingMemory) -> MemorySections:
    """Bodies of the three memory-backed manager prompt sections."""
    return MemorySections(
        history="\n".join(r.render() for r in m.history),
        memory="\n".join(f"- {n}" for n in m.notes),
        reflection=m.last_reflection.render() if m.last_reflection else "",
    )
