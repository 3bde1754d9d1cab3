"""App-keyed tip knowledge base and exact per-app retrieval.

File format::

    [General Tips]
    - a tip
    ---
    [Markor Tips]
    - another tip

Only the modules of apps named in the task are ever rendered, so guidance
written for one app cannot leak into a task about another.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

GENERAL_HEADER = "General"

# The standing general section of the tips template, used when a knowledge
# base file does not declare its own [General Tips].
DEFAULT_GENERAL_TIPS = (
    "Must Click the correct text field before use type!",
    "If the task is finished, you should terminate the task in time!",
    "Check the ### History Operations ### If you stuck in an action, you should try "
    "to change the action or the correspoinding parameters.",
    "When you want to paste text, you should use long press and then click paste. "
    "Don't use the clipboard button on the keyboard.",
)

# AndroidWorld app inventory.
KNOWN_APPS = (
    "Simple Calendar Pro", "Settings", "Markor", "Broccoli - Recipe App", "Pro Expense",
    "Simple SMS Messenger", "OpenTracks", "Tasks", "Clock", "Joplin", "Retro Music",
    "Simple Gallery Pro", "Camera", "Chrome", "Contacts", "OsmAnd", "VLC",
    "Audio Recorder", "Files", "Simple Draw Pro",
)

# Alternate spellings a task may use -> canonical app name.
DEFAULT_ALIASES = {
    "SMS Messenger": "Simple SMS Messenger",
    "Simple SMS": "Simple SMS Messenger",
    "Simple Calendar": "Simple Calendar Pro",
    "Broccoli": "Broccoli - Recipe App",
    "Broccoli Recipe": "Broccoli - Recipe App",
    "Simple Gallery": "Simple Gallery Pro",
    "Gallery Pro": "Simple Gallery Pro",
    "Simple Draw": "Simple Draw Pro",
    "Open Tracks": "OpenTracks",
    "Retro Music Player": "Retro Music",
    "Markor app": "Markor",
}


class TipBaseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class DuplicateHeader(TipBaseError):
    pass


class EmptySection(TipBaseError):
    pass


class MalformedBullet(TipBaseError):
    pass


@dataclass(frozen=True)
class TipBase:
    general_tips: tuple[str, ...] = DEFAULT_GENERAL_TIPS
    modules: tuple[tuple[str, tuple[str, ...]], ...] = ()

    @property
    def apps(self) -> list[str]:
        return [name for name, _ in self.modules]

    def tips_for(self, app: str) -> Optional[tuple[str, ...]]:
        key = app.casefold()
        for name, tips in self.modules:
            if name.casefold() == key:
                return tips
        return None


@dataclass(frozen=True)
class TipSelection:
    general: tuple[str, ...]
    per_app: tuple[tuple[str, tuple[str, ...]], ...] = ()
    # requested apps that have no module in the base
    missing: tuple[str, ...] = field(default=())


_HEADER_RE = re.compile(r"^\[(.+?)\s+Tips\]$")


def load_tip_base(source: str) -> TipBase:
    general: Optional[list[str]] = None
    modules: list[tuple[str, list[str]]] = []
    seen: set[str] = set()
    current: Optional[list[str]] = None
    current_name = ""
    header_line = 0

    def close():
        if current is not None and not current:
            raise EmptySection(f"section [{current_name} Tips] has no tips", header_line)

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "---":
            close()
            current = None
            continue
        m = _HEADER_RE.match(line)
        if m:
            close()
            name = m.group(1).strip()
            if name.casefold() in seen:
                raise DuplicateHeader(f"duplicate section [{name} Tips]", lineno)
            seen.add(name.casefold())
            current, current_name, header_line = [], name, lineno
            if name.casefold() == GENERAL_HEADER.casefold():
                general = current
            else:
                modules.append((name, current))
            continue
        if current is None:
            raise MalformedBullet(f"tip outside any [<App> Tips] section: {line!r}", lineno)
        if not line.startswith("- ") or not line[2:].strip():
            raise MalformedBullet(f"expected '- <tip>', got {line!r}", lineno)
        current.append(line[2:].strip())
    close()
    return TipBase(
        general_tips=tuple(general) if general is not None else DEFAULT_GENERAL_TIPS,
        modules=tuple((name, tuple(tips)) for name, tips in modules),
    )


def load_tip_file(path: str | Path) -> TipBase:
    return load_tip_base(Path(path).read_text(encoding="utf-8"))


def default_tip_base() -> TipBase:
    text = resources.files("deliberator").joinpath("data/tips.txt").read_text(encoding="utf-8")
    return load_tip_base(text)


def _section(header: str, tips: Iterable[str]) -> str:
    return "\n".join([f"[{header} Tips]", *(f"- {t}" for t in tips)])


def dump_tip_base(base: TipBase) -> str:
    sections = [_section(GENERAL_HEADER, base.general_tips)] if base.general_tips else []
    sections += [_section(name, tips) for name, tips in base.modules]
    return "\n\n---\n\n".join(sections) + "\n"


def detect_apps(
    task: str,
    known: Sequence[str],
    aliases: Mapping[str, str] = DEFAULT_ALIASES,
) -> list[str]:
    """Known apps named in ``task``, in order of first mention.

    Matching is case-insensitive on word boundaries; longer names win over
    names they contain. Aliases resolve only to apps present in ``known``.
    """
    canonical: dict[str, str] = {}
    for name in known:
        canonical.setdefault(name.casefold(), name)
    for alias, target in aliases.items():
        if target.casefold() in canonical:
            canonical.setdefault(alias.casefold(), canonical[target.casefold()])
    if not canonical:
        return []
    names = sorted(canonical, key=len, reverse=True)
    pattern = re.compile(
        r"(?<!\w)(" + "|".join(re.escape(n) for n in names) + r")(?!\w)", re.IGNORECASE
    )
    found: list[str] = []
    for m in pattern.finditer(task):
        app = canonical[m.group(1).casefold()]
        if app not in found:
            found.append(app)
    return found


def retrieve_tips(base: TipBase, apps: Sequence[str]) -> TipSelection:
    per_app = []
    missing = []
    for app in apps:
        tips = base.tips_for(app)
        if tips is None:
            missing.append(app)
        elif all(app.casefold() != a.casefold() for a, _ in per_app):
            per_app.append((app, tips))
    return TipSelection(general=base.general_tips, per_app=tuple(per_app), missing=tuple(missing))


def format_tips(sel: TipSelection) -> str:
    """Render the tips block injected into the manager prompt."""
    out = _section(GENERAL_HEADER, sel.general)
    if sel.per_app:
        app_sections = "\n\n".join(_section(app, tips) for app, tips in sel.per_app)
        out += "\n\n[Action Tips for app]\n" + app_sections
    return out


def tips_for_task(
    base: TipBase, task: str, known: Sequence[str] = KNOWN_APPS
) -> TipSelection:
    """Detect apps among ``known`` plus the base's own modules and select their tips.

    Apps detected without a module end up in ``missing``.
    """
    names = list(base.apps) + [a for a in known if base.tips_for(a) is None]
    return retrieve_tips(base, detect_apps(task, names))
