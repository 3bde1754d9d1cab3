"""Consistency-gate training data and evaluation metrics.

* :func:`unroll_trajectories` turns episode traces into per-step samples of
  the raw manager proposal, with a marked screenshot for coordinate actions;
* :func:`filter_samples` applies declared cleaning rules and reports removals;
* :func:`fleiss_kappa` scores annotator agreement;
* :func:`tally_failures` gives the share of each failure label.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .actions import StepOutput, canonical_encode
from .imaging import MarkerStyle, RasterImage, render_action_marker
from .orchestrator import EpisodeTrace


class MissingScreenshot(ValueError):
    pass


class DegenerateAgreement(ValueError):
    pass


class BadRatingMatrix(ValueError):
    pass


@dataclass(frozen=True)
class TacSample:
    sample_id: str
    task: str
    thought: str
    action: Optional[str]  # canonical encoding; None for parse-error steps
    description: str
    original: RasterImage
    marked: Optional[RasterImage]
    parse_error: bool = False
    label: Optional[int] = None

    def record(self, original_ref: str, marked_ref: Optional[str]) -> dict:
        """Annotation record using the guideline document's field names."""
        return {
            "id": self.sample_id,
            "task": self.task,
            "original_screenshot": original_ref,
            "marked_screenshot": marked_ref,
            "ACTION_THOUGHT": self.thought,
            "ACTION": self.action,
            "ACTION_DESCRIPTION": self.description,
            "parse_error": self.parse_error,
            "label": None if self.label is None else {"valid": self.label},
        }


def unroll_trajectories(
    traces: Sequence[EpisodeTrace], style: MarkerStyle = MarkerStyle()
) -> list[TacSample]:
    """One sample per step, built from the first (pre-alignment) proposal."""
    samples = []
    for ti, trace in enumerate(traces):
        for st in trace.steps:
            sid = f"t{ti:04d}-s{st.index:03d}"
            if st.before is None:
                raise MissingScreenshot(f"{sid}: step has no screenshot")
            proposal: Optional[StepOutput] = st.proposal
            if proposal is None:
                samples.append(TacSample(sid, trace.task, "", None, "", st.before, None, parse_error=True))
                continue
            marked = render_action_marker(st.before, proposal.action, style)
            samples.append(TacSample(
                sid,
                trace.task,
                proposal.thought,
                canonical_encode(proposal.action),
                proposal.action_description,
                st.before,
                marked.image if marked.visualized else None,
            ))
    return samples


Rule = Callable[[TacSample, set], bool]


def _dedup(sample: TacSample, seen: set) -> bool:
    key = (sample.thought, sample.action, sample.original.digest())
    if key in seen:
        return True
    seen.add(key)
    return False


RULES: Mapping[str, Rule] = {
    "parse_error": lambda s, _seen: s.parse_error,
    "empty_thought": lambda s, _seen: not s.thought.strip(),
    "dedup": _dedup,
}
DEFAULT_RULES = ("parse_error", "empty_thought", "dedup")


@dataclass(frozen=True)
class FilterReport:
    total: int
    kept: int
    removed: Mapping[str, int]

    def to_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "removed": dict(self.removed)}


def filter_samples(
    samples: Sequence[TacSample], rules: Sequence[str] = DEFAULT_RULES
) -> tuple[list[TacSample], FilterReport]:
    """Drop samples matching any rule, first matching rule takes the blame."""
    unknown = [r for r in rules if r not in RULES]
    if unknown:
        raise ValueError(f"unknown filter rules {unknown}")
    state = {r: set() for r in rules}
    removed = {r: 0 for r in rules}
    kept = []
    for s in samples:
        for r in rules:
            if RULES[r](s, state[r]):
                removed[r] += 1
                break
        else:
            kept.append(s)
    return kept, FilterReport(len(samples), len(kept), removed)


def write_samples(
    samples: Sequence[TacSample], path: Union[str, Path], report: Optional[FilterReport] = None
) -> Path:
    """JSON lines beside an ``<stem>_images/`` directory of PNGs."""
    path = Path(path)
    img_dir = path.parent / f"{path.stem}_images"
    img_dir.mkdir(parents=True, exist_ok=True)

    def put(image: Optional[RasterImage]) -> Optional[str]:
        if image is None:
            return None
        rel = f"{img_dir.name}/{image.digest()[:16]}.png"
        if not (path.parent / rel).exists():
            image.save(path.parent / rel)
        return rel

    lines = [json.dumps(s.record(put(s.original), put(s.marked)), ensure_ascii=False) for s in samples]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if report is not None:
        path.with_suffix(".report.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return path


def relabel(sample: TacSample, valid: int) -> TacSample:
    if valid not in (0, 1):
        raise ValueError("label must be 0 or 1")
    return replace(sample, label=valid)


# --------------------------------------------------------------------------
# Agreement
# --------------------------------------------------------------------------


def _check_matrix(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise BadRatingMatrix("rating matrix must be a non-empty 2-D grid")
    if arr.shape[1] < 2:
        raise BadRatingMatrix("need at least two categories")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise BadRatingMatrix("counts must be integers")
        arr = arr.astype(np.int64)
    if (arr < 0).any():
        raise BadRatingMatrix("counts must be non-negative")
    sums = arr.sum(axis=1)
    if not (sums == sums[0]).all():
        raise BadRatingMatrix("every item needs the same number of raters")
    if sums[0] < 2:
        raise BadRatingMatrix("need at least two raters per item")
    return arr.astype(np.int64)


def fleiss_kappa(m) -> float:
    """Fleiss' kappa for an items x categories matrix of rating counts."""
    arr = _check_matrix(m)
    N = arr.shape[0]
    n = int(arr[0].sum())
    p_j = arr.sum(axis=0) / (N * n)
    P_i = ((arr * arr).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = float((p_j * p_j).sum())
    if P_e == 1.0:
        raise DegenerateAgreement("all ratings fall in one category; kappa is undefined")
    return float((P_bar - P_e) / (1.0 - P_e))


def parse_rating_matrix(text: str) -> list[list[int]]:
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        cells = [c.strip() for c in row]
        if not any(cells):
            continue
        try:
            rows.append([int(c) for c in cells])
        except ValueError:
            raise BadRatingMatrix(f"line {lineno}: non-integer cell in {row!r}") from None
    if not rows:
        raise BadRatingMatrix("empty rating matrix")
    if len({len(r) for r in rows}) != 1:
        raise BadRatingMatrix("rows have different lengths")
    _check_matrix(rows)
    return rows


# --------------------------------------------------------------------------
# Failure taxonomy
# --------------------------------------------------------------------------


class FailureLabel(enum.Enum):
    PLANNING = "Planning"
    NAVIGATION = "Navigation"
    GROUNDING = "Grounding"
    PERCEPTION = "Perception"
    OTHERS = "Others"

    @classmethod
    def parse(cls, text: str) -> "FailureLabel":
        key = text.strip().casefold()
        for label in cls:
            if label.value.casefold() == key:
                return label
        raise ValueError(f"unknown failure label {text!r}")


def tally_failures(
    labels: Iterable[Union[FailureLabel, Iterable[FailureLabel]]]
) -> dict[FailureLabel, float]:
    """Share of each label among all label occurrences.

    Entries may be single labels or per-task collections; a task with several
    labels contributes each of them.
    """
    counts: Counter = Counter()
    for entry in labels:
        if isinstance(entry, FailureLabel):
            counts[entry] += 1
        else:
            counts.update(set(entry))
    total = sum(counts.values())
    if total == 0:
        return {}
    return {label: counts[label] / total for label in FailureLabel if counts[label]}


def parse_label_lines(text: str) -> list[list[FailureLabel]]:
    """One failed task per line, labels separated by commas."""
    tasks = []
    for line in text.splitlines():
        parts = [p for p in (s.strip() for s in line.split(",")) if p]
        if parts:
            tasks.append([FailureLabel.parse(p) for p in parts])
    return tasks
