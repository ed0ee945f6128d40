"""Bitmap glyph -> SVG outline: threshold, marching squares, RDP, cubic Bezier fit.

Coordinates are in pixel units with the centre of pixel ``(row, col)`` at
``(x, y) = (col, row)``; y grows downwards. Traced contours are oriented so
the shoelace signed area is positive for outer boundaries and negative for
holes (counterclockwise / clockwise in the usual y-up sense). When emitting
SVG every coordinate is shifted by half a pixel so pixel ``(row, col)`` covers
``[col, col + 1] x [row, row + 1]`` in the document.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import GlyphBitmap
from .errors import DegenerateContour, ValidationError

PIXEL_CENTER_OFFSET = 0.5


@dataclass(frozen=True)
class TraceConfig:
    threshold: float = 0.5
    simplify_tolerance: float = 0.75
    fit_max_error: float = 1.0
    min_contour_area: float = 4.0
    corner_angle: float = 60.0

    def validate(self) -> "TraceConfig":
        if not (0.0 < self.threshold < 1.0):
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        for name in ("simplify_tolerance", "fit_max_error", "min_contour_area", "corner_angle"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        return self


@dataclass(frozen=True, eq=False)
class Contour:
    """Closed polyline; the closing edge from the last point back to the first is implicit."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def signed_area(self) -> float:
        return signed_area(self.points)

    @property
    def orientation(self) -> str:
        return "outer" if self.signed_area > 0 else "hole"


@dataclass(frozen=True, eq=False)
class VectorPath:
    """Chain of cubic Beziers; ``segments[i]`` is ``(control1, control2, end)``."""

    start: np.ndarray
    segments: np.ndarray
    closed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=np.float64).reshape(2))
        object.__setattr__(self, "segments", np.asarray(self.segments, dtype=np.float64).reshape(-1, 3, 2))

    def __len__(self) -> int:
        return len(self.segments)

    def curves(self) -> list[np.ndarray]:
        """Each segment as a ``(4, 2)`` control polygon."""
        out = []
        prev = self.start
        for c1, c2, end in self.segments:
            out.append(np.array([prev, c1, c2, end]))
            prev = end
        return out

    def flatten(self, samples_per_segment: int = 16) -> np.ndarray:
        u = np.linspace(0.0, 1.0, samples_per_segment + 1)[1:]
        pts = [self.start[None]]
        for curve in self.curves():
            pts.append(bezier_point(curve, u))
        return np.concatenate(pts)


def signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# -- threshold and trace --------------------------------------------------------

def binarize(bitmap, threshold: float = 0.5) -> np.ndarray:
    """Ink mask: ``pixel < threshold`` (pixels exactly at the threshold are background)."""
    if not (0.0 < threshold < 1.0):
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    px = bitmap.pixels if isinstance(bitmap, GlyphBitmap) else np.asarray(bitmap, dtype=np.float64)
    return px < threshold


# Corners of a cell in visual clockwise order and the edge that follows each:
# tl -T-> tr -R-> br -B-> bl -L-> tl
_EDGE_MID = {  # offsets of edge midpoints from the cell's top-left sample, in (dx, dy)
    "T": (0.5, 0.0),
    "R": (1.0, 0.5),
    "B": (0.5, 1.0),
    "L": (0.0, 0.5),
}
_EDGES = ("T", "R", "B", "L")


def _cell_segments(corners: tuple[bool, bool, bool, bool]) -> list[tuple[str, str]]:
    """Oriented segments for one cell, ink kept on the left of travel.

    Each edge where clockwise order passes ink -> background starts a segment
    that ends at the next background -> ink edge. In saddle cells this joins
    the diagonal ink corners, i.e. ink is 8-connected.
    """
    exits, entries = [], []
    for i, edge in enumerate(_EDGES):
        a, b = corners[i], corners[(i + 1) % 4]
        if a and not b:
            exits.append(i)
        elif b and not a:
            entries.append(i)
    segs = []
    for i in exits:
        j = next(e for k in range(1, 5) if (e := (i + k) % 4) in entries)
        segs.append((_EDGES[i], _EDGES[j]))
    return segs


_CASES = {
    idx: _cell_segments(tuple(bool(idx >> (3 - k) & 1) for k in range(4))) for idx in range(16)
}


def trace_contours(mask: np.ndarray, min_area: float = 0.0) -> list[Contour]:
    """Marching-squares boundaries of an ink mask on the half-pixel grid.

    Contours with ``|area| < min_area`` are dropped. Output order is
    deterministic (scan order of each contour's first edge).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError("mask must be 2-D")
    P = np.pad(mask, 1, constant_values=False)
    H, W = P.shape
    idx = (P[:-1, :-1].astype(np.uint8) << 3) | (P[:-1, 1:].astype(np.uint8) << 2) \
        | (P[1:, 1:].astype(np.uint8) << 1) | P[1:, :-1].astype(np.uint8)

    # points keyed by doubled integer coordinates of the padded grid
    nxt: dict[tuple[int, int], tuple[int, int]] = {}
    order: list[tuple[int, int]] = []
    rows, cols = np.nonzero((idx != 0) & (idx != 15))
    for r, c in zip(rows.tolist(), cols.tolist()):
        for a, b in _CASES[int(idx[r, c])]:
            ka = (2 * c + int(2 * _EDGE_MID[a][0]), 2 * r + int(2 * _EDGE_MID[a][1]))
            kb = (2 * c + int(2 * _EDGE_MID[b][0]), 2 * r + int(2 * _EDGE_MID[b][1]))
            nxt[ka] = kb
            order.append(ka)

    contours = []
    visited: set[tuple[int, int]] = set()
    for start in order:
        if start in visited:
            continue
        loop = []
        k = start
        while k not in visited:
            visited.add(k)
            loop.append(k)
            k = nxt[k]
        # padded-grid sample (c, r) is original pixel centre (c - 1, r - 1)
        pts = np.array(loop, dtype=np.float64) / 2.0 - 1.0
        if len(pts) >= 3 and abs(signed_area(pts)) >= min_area:
            contours.append(Contour(pts))
    return contours


# -- simplification ---------------------------------------------------------------

def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def rdp_indices(points: np.ndarray, tolerance: float) -> list[int]:
    """Ramer-Douglas-Peucker on an open polyline; returns kept indices (endpoints included)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= 2:
        return list(range(n))
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _point_segment_distance(points[i + 1:j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > tolerance:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return np.flatnonzero(keep).tolist()


def rdp(points: np.ndarray, tolerance: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points[rdp_indices(points, tolerance)]


def simplify_indices(contour: Contour, tolerance: float) -> list[int]:
    """Indices of the contour points kept by closed-loop RDP."""
    if not tolerance > 0:
        raise ValidationError(f"tolerance must be positive, got {tolerance}")
    pts = contour.points
    n = len(pts)
    far = int(np.argmax(np.linalg.norm(pts - pts[0], axis=1)))
    if far == 0:
        return list(range(n))
    first = rdp_indices(pts[: far + 1], tolerance)
    loop = np.concatenate([pts[far:], pts[:1]])
    second = [far + i for i in rdp_indices(loop, tolerance)][1:-1]
    kept = first + second
    if len(kept) < 3:
        return list(range(n))
    return kept


def simplify(contour: Contour, tolerance: float) -> Contour:
    return Contour(contour.points[simplify_indices(contour, tolerance)])


# -- Bezier fitting ---------------------------------------------------------------

def bezier_point(curve: np.ndarray, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = 1.0 - u
    return v ** 3 * curve[0] + 3 * v ** 2 * u * curve[1] + 3 * v * u ** 2 * curve[2] + u ** 3 * curve[3]


def _bezier_d1(curve: np.ndarray, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = 1.0 - u
    return 3 * (v ** 2 * (curve[1] - curve[0]) + 2 * v * u * (curve[2] - curve[1]) + u ** 2 * (curve[3] - curve[2]))


def _bezier_d2(curve: np.ndarray, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)[..., None]
    return 6 * ((1.0 - u) * (curve[2] - 2 * curve[1] + curve[0]) + u * (curve[3] - 2 * curve[2] + curve[1]))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _chord_parameters(points: np.ndarray) -> np.ndarray:
    d = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    return d / d[-1] if d[-1] > 0 else np.linspace(0.0, 1.0, len(points))


def _generate_bezier(points, u, tan_l, tan_r) -> np.ndarray:
    p0, p3 = points[0], points[-1]
    b1 = 3 * (1 - u) ** 2 * u
    b2 = 3 * (1 - u) * u ** 2
    A1 = b1[:, None] * tan_l
    A2 = b2[:, None] * tan_r
    C = np.array([[np.sum(A1 * A1), np.sum(A1 * A2)], [np.sum(A1 * A2), np.sum(A2 * A2)]])
    base = bezier_point(np.array([p0, p0, p3, p3]), u)
    rhs = points - base
    X = np.array([np.sum(A1 * rhs), np.sum(A2 * rhs)])
    det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
    if abs(det) > 1e-12:
        a_l = (X[0] * C[1, 1] - X[1] * C[0, 1]) / det
        a_r = (C[0, 0] * X[1] - C[1, 0] * X[0]) / det
    else:
        a_l = a_r = 0.0
    seg = np.linalg.norm(p3 - p0)
    eps = 1e-6 * seg
    if a_l < eps or a_r < eps:
        # Wu/Barsky heuristic: fall back to thirds of the chord along the tangents
        a_l = a_r = seg / 3.0
    return np.array([p0, p0 + tan_l * a_l, p3 + tan_r * a_r, p3])


def _reparameterize(curve, points, u) -> np.ndarray:
    d = bezier_point(curve, u) - points
    d1 = _bezier_d1(curve, u)
    d2 = _bezier_d2(curve, u)
    num = np.sum(d * d1, axis=1)
    den = np.sum(d1 * d1 + d * d2, axis=1)
    step = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return np.clip(u - step, 0.0, 1.0)


def _max_error(curve, points, u) -> tuple[float, int]:
    d = np.linalg.norm(bezier_point(curve, u) - points, axis=1)
    i = int(np.argmax(d))
    return float(d[i]), i


def _line_curve(p0, p3) -> np.ndarray:
    return np.array([p0, p0 + (p3 - p0) / 3.0, p0 + 2.0 * (p3 - p0) / 3.0, p3])


_NEWTON_ITERATIONS = 20


def _fit_cubic(points: np.ndarray, tan_l: np.ndarray, tan_r: np.ndarray, max_error: float, depth: int = 0) -> list[np.ndarray]:
    n = len(points)
    if n == 2:
        return [_line_curve(points[0], points[1])]
    u = _chord_parameters(points)
    curve = _generate_bezier(points, u, tan_l, tan_r)
    err, split = _max_error(curve, points, u)
    if err <= max_error:
        return [curve]
    # Newton refinement of the parameters is cheap at glyph sizes, so it is
    # tried before every split rather than only when the first fit is close
    for _ in range(_NEWTON_ITERATIONS):
        u = _reparameterize(curve, points, u)
        candidate = _generate_bezier(points, u, tan_l, tan_r)
        cand_err, cand_split = _max_error(candidate, points, u)
        if cand_err >= err:
            break
        curve, err, split = candidate, cand_err, cand_split
        if err <= max_error:
            return [curve]
    line = _line_curve(points[0], points[-1])
    lu = _chord_parameters(points)
    if _max_error(line, points, lu)[0] <= max_error:
        return [line]
    split = min(max(split, 1), n - 2)
    center = _unit(points[split - 1] - points[split + 1])
    if not center.any():
        center = _unit(points[split - 1] - points[split])
    left = _fit_cubic(points[: split + 1], tan_l, center, max_error, depth + 1)
    right = _fit_cubic(points[split:], -center, tan_r, max_error, depth + 1)
    return left + right


def fit_curve(points: np.ndarray, max_error: float) -> list[np.ndarray]:
    """Schneider least-squares fit of an open polyline; returns ``(4, 2)`` control polygons."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise DegenerateContour("need at least two points")
    if not max_error > 0:
        raise ValidationError("max_error must be positive")
    tan_l = _unit(points[1] - points[0])
    tan_r = _unit(points[-2] - points[-1])
    return _fit_cubic(points, tan_l, tan_r, max_error)


def turning_angles(points: np.ndarray) -> np.ndarray:
    """Absolute turning angle in degrees at every vertex of a closed polyline."""
    d_in = points - np.roll(points, 1, axis=0)
    d_out = np.roll(points, -1, axis=0) - points
    cross = d_in[:, 0] * d_out[:, 1] - d_in[:, 1] * d_out[:, 0]
    dot = np.sum(d_in * d_out, axis=1)
    return np.degrees(np.abs(np.arctan2(cross, dot)))


def fit_beziers(
    contour: Contour,
    max_error: float = 1.0,
    corner_angle: float = 60.0,
    corners: Sequence[int] | None = None,
) -> VectorPath:
    """Fit a closed chain of cubic Beziers to every point of ``contour``.

    Vertices turning by more than ``corner_angle`` degrees (or the explicit
    ``corners`` indices) become segment boundaries with independent
    tangents; elsewhere the chain is tangent-continuous at split points.
    """
    pts = contour.points
    n = len(pts)
    if n < 3:
        raise DegenerateContour(f"contour has {n} points, need at least 3")
    if corners is None:
        corners = np.flatnonzero(turning_angles(pts) > corner_angle).tolist()
    corners = sorted(set(int(c) % n for c in corners))

    if not corners:
        loop = np.concatenate([pts, pts[:1]])
        tangent = _unit(pts[1] - pts[-1])
        curves = _fit_cubic(loop, tangent, -tangent, max_error)
    else:
        curves = []
        for a, b in zip(corners, corners[1:] + [corners[0] + n]):
            piece = np.concatenate([pts, pts, pts[:1]])[a : b + 1]
            tan_l = _unit(piece[1] - piece[0])
            tan_r = _unit(piece[-2] - piece[-1])
            curves.extend(_fit_cubic(piece, tan_l, tan_r, max_error))
    start = curves[0][0]
    return VectorPath(start, np.array([c[1:] for c in curves]), closed=True)


# -- SVG --------------------------------------------------------------------------

def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def path_data(paths: Sequence[VectorPath], offset: float = PIXEL_CENTER_OFFSET) -> str:
    parts = []
    for path in paths:
        x, y = path.start + offset
        cmds = [f"M{_fmt(x)} {_fmt(y)}"]
        for seg in path.segments + offset:
            cmds.append("C" + " ".join(f"{_fmt(px)} {_fmt(py)}" for px, py in seg))
        if path.closed:
            cmds.append("Z")
        parts.append(" ".join(cmds))
    return " ".join(parts)


def emit_svg(paths: Sequence[VectorPath], canvas: int, offset: float = PIXEL_CENTER_OFFSET) -> str:
    """Standalone SVG 1.1 document with all contours in one even-odd path."""
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{canvas}" height="{canvas}" '
        f'viewBox="0 0 {canvas} {canvas}">\n'
    )
    body = ""
    if paths:
        body = f'  <path d="{path_data(paths, offset)}" fill="#000000" fill-rule="evenodd"/>\n'
    return head + body + "</svg>\n"


_TOKEN = re.compile(r"[MCZmcz]|-?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_PATH_D = re.compile(r'<path\b[^>]*\bd="([^"]*)"')
_VIEWBOX = re.compile(r'viewBox="\s*[-\d.]+\s+[-\d.]+\s+([\d.]+)\s+([\d.]+)\s*"')


def parse_path_data(d: str, offset: float = PIXEL_CENTER_OFFSET) -> list[VectorPath]:
    """Inverse of :func:`path_data` for the absolute ``M``/``C``/``Z`` subset."""
    tokens = _TOKEN.findall(d)
    leftovers = _TOKEN.sub("", d).replace(",", "").strip()
    if leftovers:
        raise ValidationError(f"unsupported path data: {leftovers[:20]!r}")
    paths = []
    i = 0
    start = None
    segs: list[list[float]] = []

    def take(k):
        nonlocal i
        vals = tokens[i:i + k]
        if len(vals) != k or any(v.isalpha() for v in vals):
            raise ValidationError("truncated path data")
        i += k
        return [float(v) - offset for v in vals]

    def finish(closed):
        nonlocal start, segs
        if start is not None:
            paths.append(VectorPath(np.array(start), np.array(segs).reshape(-1, 3, 2), closed=closed))
        start, segs = None, []

    while i < len(tokens):
        cmd = tokens[i]
        i += 1
        if cmd == "M":
            finish(False)
            start = take(2)
        elif cmd == "C":
            if start is None:
                raise ValidationError("curve before moveto")
            segs.append(take(6))
            while i < len(tokens) and not tokens[i].isalpha():
                segs.append(take(6))
        elif cmd in "Zz":
            finish(True)
        else:
            raise ValidationError(f"unsupported path command {cmd!r}")
    finish(False)
    return paths


def parse_svg(text: str) -> tuple[list[VectorPath], int]:
    """Paths and canvas size of a document written by :func:`emit_svg`."""
    vb = _VIEWBOX.search(text)
    if vb is None:
        raise ValidationError("SVG has no viewBox")
    canvas = int(float(vb.group(1)))
    paths = []
    for d in _PATH_D.findall(text):
        paths.extend(parse_path_data(d))
    return paths, canvas


def rasterize_paths(paths: Sequence[VectorPath], canvas: int, samples_per_segment: int = 16) -> np.ndarray:
    """Even-odd fill evaluated at pixel centres; returns an ink mask."""
    edges = []
    for path in paths:
        poly = path.flatten(samples_per_segment)
        edges.append(np.stack([poly, np.roll(poly, -1, axis=0)], axis=1))
    mask = np.zeros((canvas, canvas), dtype=bool)
    if not edges:
        return mask
    E = np.concatenate(edges)
    (x0, y0), (x1, y1) = E[:, 0].T, E[:, 1].T
    xs = np.arange(canvas, dtype=np.float64)
    for row in range(canvas):
        y = float(row)
        spans = (y0 <= y) != (y1 <= y)
        if not spans.any():
            continue
        t = (y - y0[spans]) / (y1[spans] - y0[spans])
        cross = x0[spans] + t * (x1[spans] - x0[spans])
        mask[row] = ((cross[None, :] > xs[:, None]).sum(axis=1) % 2) == 1
    return mask


# -- pipeline ---------------------------------------------------------------------

def vectorize(bitmap, config: TraceConfig = TraceConfig()) -> list[VectorPath]:
    """Trace, simplify and fit every contour of a glyph.

    Corners are located on the simplified polygon; the curves are fitted to
    the full traced point set, so every traced point lies within
    ``fit_max_error`` of the result.
    """
    config.validate()
    mask = binarize(bitmap, config.threshold)
    paths = []
    for contour in trace_contours(mask, config.min_contour_area):
        kept = simplify_indices(contour, config.simplify_tolerance)
        angles = turning_angles(contour.points[kept])
        corners = [kept[i] for i in np.flatnonzero(angles > config.corner_angle)]
        paths.append(fit_beziers(contour, config.fit_max_error, config.corner_angle, corners=corners))
    return paths


def trace_to_svg(bitmap, config: TraceConfig = TraceConfig()) -> str:
    px = bitmap.pixels if isinstance(bitmap, GlyphBitmap) else np.asarray(bitmap)
    return emit_svg(vectorize(bitmap, config), px.shape[0])


def roundtrip_match(bitmap, config: TraceConfig = TraceConfig()) -> float:
    """Pixel agreement between the binarized glyph and its re-rasterized SVG."""
    svg = trace_to_svg(bitmap, config)
    paths, canvas = parse_svg(svg)
    mask = binarize(bitmap, config.threshold)
    return float((rasterize_paths(paths, canvas) == mask).mean())
