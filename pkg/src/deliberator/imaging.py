"""Screenshots, action markers and before/after diff regions.

Images are immutable ``(height, width, 3)`` uint8 arrays wrapped in
:class:`RasterImage`. Markers are rasterized directly from distance fields so
their footprint is exact and symmetric about the target pixel; PNG is only
used at the file boundary.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .actions import Action, Click, LongPress, Swipe, scale_coordinate

RED = (255, 0, 0)
BLUE = (0, 0, 255)
GREEN = (0, 255, 0)

DEFAULT_DIFF_THRESHOLD = 12
DEFAULT_MIN_AREA = 64


class DimensionMismatch(ValueError):
    pass


class OutOfBounds(ValueError):
    pass


class RasterImage:
    """Read-only RGB raster."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.array(pixels, dtype=np.uint8, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected an (H, W, 3) array, got shape {arr.shape}")
        arr.flags.writeable = False
        self._pixels = arr

    @classmethod
    def blank(cls, width: int, height: int, color=(255, 255, 255)) -> "RasterImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = color
        return cls(arr)

    @classmethod
    def from_png(cls, data: bytes | str | Path) -> "RasterImage":
        src = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
        with Image.open(src) as im:
            return cls(np.asarray(im.convert("RGB")))

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self._pixels, "RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_png())

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    def pixel(self, x: int, y: int) -> tuple[int, int, int]:
        return tuple(int(c) for c in self._pixels[y, x])

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.width}x{self.height}:".encode())
        h.update(self._pixels.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self._pixels.shape == other._pixels.shape and bool(
            np.array_equal(self._pixels, other._pixels)
        )

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height}, sha256={self.digest()[:12]})"


@dataclass(frozen=True)
class MarkerStyle:
    click_color: tuple[int, int, int] = RED
    long_press_color: tuple[int, int, int] = BLUE
    swipe_path_color: tuple[int, int, int] = BLUE
    swipe_endpoint_color: tuple[int, int, int] = GREEN
    reflection_box_color: tuple[int, int, int] = RED
    # None means 3% of the shorter image side
    circle_radius: Optional[int] = None
    stroke: int = 3
    # "end" or "start": which swipe terminus carries the green circle
    swipe_circle_at: str = "end"

    def __post_init__(self):
        if self.circle_radius is not None and self.circle_radius <= 0:
            raise ValueError("circle_radius must be positive")
        if self.stroke <= 0:
            raise ValueError("stroke must be positive")
        if self.swipe_circle_at not in ("start", "end"):
            raise ValueError("swipe_circle_at must be 'start' or 'end'")

    def radius_for(self, width: int, height: int) -> int:
        if self.circle_radius is not None:
            return self.circle_radius
        return max(1, round(0.03 * min(width, height)))

    def reach(self, width: int, height: int) -> float:
        """Max distance from a marker's anchor that any marker pixel may lie."""
        return self.radius_for(width, height) + self.stroke / 2


@dataclass(frozen=True)
class AnnotatedImage:
    image: RasterImage
    visualized: bool


@dataclass(frozen=True, order=True)
class DiffRegion:
    top: int
    left: int
    bottom: int
    right: int

    @property
    def area(self) -> int:
        return (self.right - self.left) * (self.bottom - self.top)

    def as_box(self) -> tuple[int, int, int, int]:
        return (self.left, self.top, self.right, self.bottom)

    def __str__(self):
        return f"{self.left} {self.top} {self.right} {self.bottom}"


def _window(cx: float, cy: float, reach: float, width: int, height: int):
    x0 = max(0, int(np.floor(cx - reach)))
    x1 = min(width, int(np.ceil(cx + reach)) + 1)
    y0 = max(0, int(np.floor(cy - reach)))
    y1 = min(height, int(np.ceil(cy + reach)) + 1)
    return x0, x1, y0, y1


def _paint_ring(arr: np.ndarray, cx: int, cy: int, radius: int, stroke: int, color) -> None:
    h, w = arr.shape[:2]
    half = stroke / 2
    x0, x1, y0, y1 = _window(cx, cy, radius + half, w, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx - cx, yy - cy)
    mask = np.abs(d - radius) <= half
    arr[y0:y1, x0:x1][mask] = color


def _paint_segment(arr: np.ndarray, p, q, stroke: int, color) -> None:
    h, w = arr.shape[:2]
    half = stroke / 2
    x0 = max(0, int(np.floor(min(p[0], q[0]) - half)))
    x1 = min(w, int(np.ceil(max(p[0], q[0]) + half)) + 1)
    y0 = max(0, int(np.floor(min(p[1], q[1]) - half)))
    y1 = min(h, int(np.ceil(max(p[1], q[1]) + half)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    px, py = p
    dx, dy = q[0] - px, q[1] - py
    length2 = dx * dx + dy * dy
    if length2 == 0:
        t = np.zeros_like(xx, dtype=float)
    else:
        t = np.clip(((xx - px) * dx + (yy - py) * dy) / length2, 0.0, 1.0)
    d = np.hypot(xx - (px + t * dx), yy - (py + t * dy))
    arr[y0:y1, x0:x1][d <= half] = color


def render_action_marker(
    image: RasterImage, action: Action, style: MarkerStyle = MarkerStyle()
) -> AnnotatedImage:
    """Draw the visual marker for a coordinate-based action on a copy of ``image``.

    Non-coordinate actions come back unchanged with ``visualized=False``.
    """
    if not isinstance(action, (Click, LongPress, Swipe)):
        return AnnotatedImage(image, visualized=False)
    w, h = image.width, image.height
    radius = style.radius_for(w, h)
    arr = image.pixels.copy()
    start = scale_coordinate(action.coordinate, w, h)
    if isinstance(action, Click):
        _paint_ring(arr, *start, radius, style.stroke, style.click_color)
    elif isinstance(action, LongPress):
        _paint_ring(arr, *start, radius, style.stroke, style.long_press_color)
    else:
        end = scale_coordinate(action.end, w, h)
        _paint_segment(arr, start, end, style.stroke, style.swipe_path_color)
        anchor = end if style.swipe_circle_at == "end" else start
        _paint_ring(arr, *anchor, radius, style.stroke, style.swipe_endpoint_color)
    return AnnotatedImage(RasterImage(arr), visualized=True)


def changed_mask(before: RasterImage, after: RasterImage, threshold: int) -> np.ndarray:
    if (before.width, before.height) != (after.width, after.height):
        raise DimensionMismatch(
            f"{before.width}x{before.height} vs {after.width}x{after.height}"
        )
    delta = np.abs(before.pixels.astype(np.int16) - after.pixels.astype(np.int16))
    return delta.max(axis=2) > threshold


def diff_regions(
    before: RasterImage,
    after: RasterImage,
    threshold: int = DEFAULT_DIFF_THRESHOLD,
    min_area: int = DEFAULT_MIN_AREA,
) -> list[DiffRegion]:
    """Bounding boxes of 4-connected changed-pixel components.

    A pixel is changed when its largest per-channel difference exceeds
    ``threshold``; components with fewer than ``min_area`` changed pixels are
    dropped. Boxes are half-open and sorted by (top, left).
    """
    mask = changed_mask(before, after, threshold)
    labels, count = ndimage.label(mask)  # default structure is 4-connected
    if count == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    regions = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[idx] < min_area:
            continue
        rows, cols = sl
        regions.append(DiffRegion(top=rows.start, left=cols.start, bottom=rows.stop, right=cols.stop))
    regions.sort(key=lambda r: (r.top, r.left))
    return regions


def draw_boxes(
    image: RasterImage, regions: Sequence[DiffRegion], style: MarkerStyle = MarkerStyle()
) -> RasterImage:
    """Outline each region in the reflection colour; strokes are clipped at the edges."""
    if not regions:
        return image
    w, h = image.width, image.height
    arr = image.pixels.copy()
    s = style.stroke
    inner = s // 2
    outer = s - inner
    for r in regions:
        if not (0 <= r.left < r.right <= w and 0 <= r.top < r.bottom <= h):
            raise OutOfBounds(f"region {r.as_box()} outside {w}x{h}")
        # the band straddles the box's boundary pixels
        x0, x1 = max(0, r.left - inner), min(w, r.right + inner)
        y0, y1 = max(0, r.top - inner), min(h, r.bottom + inner)
        for ys, ye in ((r.top - inner, r.top + outer), (r.bottom - outer, r.bottom + inner)):
            arr[max(0, ys):min(h, ye), x0:x1] = style.reflection_box_color
        for xs, xe in ((r.left - inner, r.left + outer), (r.right - outer, r.right + inner)):
            arr[y0:y1, max(0, xs):min(w, xe)] = style.reflection_box_color
    return RasterImage(arr)


def diff_flag(regions: Sequence[DiffRegion]) -> bool:
    return len(regions) > 0
