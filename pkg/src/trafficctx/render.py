"""Ego-centric, north-up raster map (TC-Map) rendering.

Everything is drawn in the ego frame: the ego agent sits at the center pixel
and always faces up. Ego-frame coordinates are quantized to a micrometer grid
before rasterization so that a rigidly moved copy of a scenario produces a
byte-identical image.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import png
from .scenario import AgentState, AgentTrack, AgentType, MapFeature, MapKind, Scenario

_QUANT = 1e6  # ego-frame positions rounded to 1e-6 m
_DIR_QUANT = 1e9  # direction vectors rounded to 1e-9

RGBA = tuple[int, int, int, int]


class RenderError(RuntimeError):
    pass


DEFAULT_PALETTE: dict[str, object] = {
    "background": (255, 255, 255, 255),
    "road_edge": (60, 60, 60, 255),
    "lane": (170, 170, 170, 255),
    "crosswalk": (250, 210, 120, 255),
    "ego": (220, 20, 20, 255),
    "ego_trail": (240, 140, 140, 255),
    "neighbor_trail": (160, 200, 240, 255),
    "arrow": (0, 0, 0, 255),
    "label": (0, 0, 0, 255),
    "north": (30, 30, 30, 255),
    # 8 hues, assigned to neighbors by ascending distance to the ego
    "neighbors": (
        (31, 119, 180, 255),
        (44, 160, 44, 255),
        (148, 103, 189, 255),
        (255, 127, 14, 255),
        (23, 190, 207, 255),
        (140, 86, 75, 255),
        (227, 119, 194, 255),
        (188, 189, 34, 255),
    ),
}

DEFAULT_FOOTPRINTS: dict[AgentType, tuple[float, float]] = {
    AgentType.VEHICLE: (4.5, 2.0),
    AgentType.CYCLIST: (1.8, 0.6),
    AgentType.PEDESTRIAN: (0.8, 0.8),
}


@dataclass(frozen=True)
class RenderConfig:
    crop_meters_by_type: dict[AgentType, float] = field(
        default_factory=lambda: {AgentType.VEHICLE: 120.0, AgentType.PEDESTRIAN: 80.0, AgentType.CYCLIST: 60.0}
    )
    resolution: float = 0.25  # meters per pixel
    palette: dict[str, object] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    footprints: dict[AgentType, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_FOOTPRINTS))
    draw_heading_arrows: bool = True
    draw_labels: bool = True
    draw_north_icon: bool = True
    ego_trail: bool = True
    neighbor_trails: bool = False
    label_scale: int = 2
    max_image_side: int = 4096

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        for t, side in self.crop_meters_by_type.items():
            if side <= 0:
                raise ValueError(f"crop side for {t} must be > 0")
        ego = tuple(self.palette["ego"])
        if any(tuple(c) == ego for c in self.palette["neighbors"]):
            raise ValueError("ego color must differ from every neighbor color")

    def crop_side(self, agent_type: AgentType) -> float:
        return float(self.crop_meters_by_type[AgentType(agent_type)])

    def image_side(self, agent_type: AgentType) -> int:
        return int(round(self.crop_side(agent_type) / self.resolution))

    def neighbor_color(self, index: int) -> RGBA:
        cyc = self.palette["neighbors"]
        return tuple(cyc[index % len(cyc)])

    def to_dict(self) -> dict:
        return {
            "crop_meters_by_type": {k.value: v for k, v in self.crop_meters_by_type.items()},
            "resolution": self.resolution,
            "draw_heading_arrows": self.draw_heading_arrows,
            "draw_labels": self.draw_labels,
            "draw_north_icon": self.draw_north_icon,
            "ego_trail": self.ego_trail,
            "neighbor_trails": self.neighbor_trails,
            "max_image_side": self.max_image_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        kw = dict(d)
        if "crop_meters_by_type" in kw:
            base = cls().crop_meters_by_type
            base.update({AgentType(k): float(v) for k, v in kw["crop_meters_by_type"].items()})
            kw["crop_meters_by_type"] = base
        if "palette" in kw:
            pal = dict(DEFAULT_PALETTE)
            for k, v in kw["palette"].items():
                pal[k] = tuple(tuple(c) for c in v) if k == "neighbors" else tuple(v)
            kw["palette"] = pal
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 4) uint8, row-major

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.width == other.width and self.height == other.height and np.array_equal(
            self.pixels, other.pixels
        )

    def pixel(self, col: int, row: int) -> RGBA:
        return tuple(int(v) for v in self.pixels[row, col])

    def to_png(self) -> bytes:
        return png.encode_png(self.pixels)


@dataclass(frozen=True)
class LabelPlacement:
    label: str
    agent_id: str
    row: int
    col: int


@dataclass(frozen=True)
class RenderLayout:
    """What was drawn where; used to cross-check the text prompt against the image."""

    width: int
    height: int
    neighbor_order: tuple[str, ...]
    labels: tuple[LabelPlacement, ...]


# ---------------------------------------------------------------------------
# frames


def _rotation(ego: AgentState) -> tuple[float, float]:
    theta = math.pi / 2 - ego.heading
    return math.cos(theta), math.sin(theta)


def ego_north_transform(p: tuple[float, float] | tuple[float, float, float], ego_pose: AgentState):
    """Map a scenario-frame point (optionally with heading) into the ego frame.

    The ego lands on the origin facing +y ("north"); the map is rigid.
    """
    c, s = _rotation(ego_pose)
    dx, dy = p[0] - ego_pose.x, p[1] - ego_pose.y
    out = (c * dx - s * dy, s * dx + c * dy)
    if len(p) == 3:
        from .scenario import wrap_angle

        return out + (wrap_angle(p[2] + math.pi / 2 - ego_pose.heading),)
    return out


def to_ego_frame(xy: np.ndarray, ego: AgentState) -> np.ndarray:
    """Vectorized, quantized version of :func:`ego_north_transform` for (N, 2) points."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    c, s = _rotation(ego)
    d = xy - np.array([ego.x, ego.y])
    out = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1)
    return np.round(out * _QUANT) / _QUANT


def direction_in_ego_frame(heading: float, ego: AgentState) -> tuple[float, float]:
    c, s = _rotation(ego)
    hx, hy = math.cos(heading), math.sin(heading)
    return (round((c * hx - s * hy) * _DIR_QUANT) / _DIR_QUANT, round((s * hx + c * hy) * _DIR_QUANT) / _DIR_QUANT)


# ---------------------------------------------------------------------------
# cropping


def _inside(p: np.ndarray, half: float) -> bool:
    return bool(abs(p[0]) <= half and abs(p[1]) <= half)


def _clip_segment(a: np.ndarray, b: np.ndarray, half: float) -> tuple[float, float] | None:
    """Liang-Barsky parameters (t0, t1) of the part of segment a->b inside the square."""
    t0, t1 = 0.0, 1.0
    d = b - a
    for pk, qk in ((-d[0], a[0] + half), (d[0], half - a[0]), (-d[1], a[1] + half), (d[1], half - a[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        r = qk / pk
        if pk < 0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return t0, t1


def _clip_polyline(glob: np.ndarray, ego_xy: np.ndarray, half: float) -> list[list[tuple[float, float]]]:
    """Split a polyline into the pieces inside the square; interpolation happens in the global frame."""
    pieces: list[list[tuple[float, float]]] = []
    cur: list[tuple[float, float]] = []

    def gpoint(i: int, t: float) -> tuple[float, float]:
        if t == 0.0:
            return (float(glob[i, 0]), float(glob[i, 1]))
        if t == 1.0:
            return (float(glob[i + 1, 0]), float(glob[i + 1, 1]))
        p = glob[i] + t * (glob[i + 1] - glob[i])
        return (float(p[0]), float(p[1]))

    for i in range(len(glob) - 1):
        r = _clip_segment(ego_xy[i], ego_xy[i + 1], half)
        if r is None:
            if cur:
                pieces.append(cur)
                cur = []
            continue
        t0, t1 = r
        start, end = gpoint(i, t0), gpoint(i, t1)
        if not cur:
            cur = [start]
        elif t0 > 0.0:
            pieces.append(cur)
            cur = [start]
        cur.append(end)
        if t1 < 1.0:
            pieces.append(cur)
            cur = []
    if cur:
        pieces.append(cur)
    return [p for p in pieces if len(p) >= 2]


def _clip_polygon(glob: np.ndarray, ego_xy: np.ndarray, half: float) -> list[tuple[float, float]]:
    """Sutherland-Hodgman against the square, carrying global coordinates along."""
    pts = [(ego_xy[i], glob[i]) for i in range(len(glob))]
    if len(pts) > 1 and np.array_equal(glob[0], glob[-1]):
        pts = pts[:-1]
    for axis, sign in ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)):
        if not pts:
            break
        out = []

        def inside(e):
            return sign * e[axis] <= half

        for k in range(len(pts)):
            (ea, ga), (eb, gb) = pts[k - 1], pts[k]
            ia, ib = inside(ea), inside(eb)
            if ib:
                if not ia:
                    t = (sign * half - ea[axis]) / (eb[axis] - ea[axis])
                    out.append((ea + t * (eb - ea), ga + t * (gb - ga)))
                out.append((eb, gb))
            elif ia:
                t = (sign * half - ea[axis]) / (eb[axis] - ea[axis])
                out.append((ea + t * (eb - ea), ga + t * (gb - ga)))
        pts = out
    if len(pts) < 3:
        return []
    poly = [(float(g[0]), float(g[1])) for _, g in pts]
    return poly + [poly[0]]


def crop_scenario(s: Scenario, cfg: RenderConfig) -> Scenario:
    """Keep agents whose current position lies in the ego window (closed square) and clip the map to it."""
    ego = s.ego
    half = cfg.crop_side(ego.agent_type) / 2.0
    cur = ego.current
    agents = []
    for a in s.agents:
        if a.agent_id == s.ego_agent_id:
            agents.append(a)
            continue
        if not a.current.valid:
            continue
        p = to_ego_frame([(a.current.x, a.current.y)], cur)[0]
        if _inside(p, half):
            agents.append(a)
    feats: list[MapFeature] = []
    for f in s.map:
        glob = np.asarray(f.polyline, dtype=float)
        exy = to_ego_frame(glob, cur)
        if f.kind is MapKind.CROSSWALK:
            poly = _clip_polygon(glob, exy, half)
            if poly:
                feats.append(MapFeature(f.feature_id, f.kind, tuple(poly), f.lane_turn_type, True))
            continue
        pieces = _clip_polyline(glob, exy, half)
        for k, piece in enumerate(pieces):
            fid = f.feature_id if k == 0 else f"{f.feature_id}:{k}"
            feats.append(MapFeature(fid, f.kind, tuple(piece), f.lane_turn_type, False))
    return Scenario(s.scenario_id, tuple(agents), tuple(feats), s.ego_agent_id)


def neighbor_order(s: Scenario, ego: AgentState | None = None) -> list[tuple[AgentTrack, np.ndarray, float]]:
    """Neighbors with a valid current state, ascending by ego distance (ties by agent_id)."""
    ego = ego or s.ego.current
    rows = []
    for a in s.agents:
        if a.agent_id == s.ego_agent_id or not a.current.valid:
            continue
        p = to_ego_frame([(a.current.x, a.current.y)], ego)[0]
        d = round(math.hypot(p[0], p[1]) * _QUANT) / _QUANT
        rows.append((a, p, d))
    rows.sort(key=lambda r: (r[2], r[0].agent_id))
    return rows


# ---------------------------------------------------------------------------
# rasterization primitives (pixel-center sampling)

_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    "N": ("101", "111", "111", "111", "101"),
    "E": ("111", "100", "111", "100", "111"),
}


def glyph_mask(text: str, scale: int = 1) -> np.ndarray:
    """Boolean bitmap of ``text`` in the built-in 3x5 font (1 px spacing)."""
    cols = []
    for i, ch in enumerate(text):
        g = np.array([[c == "1" for c in row] for row in _FONT[ch]], dtype=bool)
        if i:
            cols.append(np.zeros((5, 1), dtype=bool))
        cols.append(g)
    m = np.concatenate(cols, axis=1) if cols else np.zeros((5, 0), dtype=bool)
    return np.kron(m, np.ones((scale, scale), dtype=bool))


class _Canvas:
    def __init__(self, h: int, w: int, background: RGBA):
        self.h, self.w = h, w
        self.px = np.empty((h, w, 4), dtype=np.uint8)
        self.px[:] = np.array(background, dtype=np.uint8)
        self.protected = np.zeros((h, w), dtype=bool)

    def _bbox(self, cols: np.ndarray, rows: np.ndarray, pad: float):
        c0 = max(int(math.floor(cols.min() - pad)), 0)
        c1 = min(int(math.ceil(cols.max() + pad)) + 1, self.w)
        r0 = max(int(math.floor(rows.min() - pad)), 0)
        r1 = min(int(math.ceil(rows.max() + pad)) + 1, self.h)
        return r0, r1, c0, c1

    def _paint(self, r0, c0, mask, color, respect):
        if respect:
            mask = mask & ~self.protected[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]]
        self.px[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]][mask] = color
        return mask

    def polygon(self, rc: np.ndarray, color: RGBA, respect: bool = False) -> np.ndarray | None:
        rows, cols = rc[:, 0], rc[:, 1]
        r0, r1, c0, c1 = self._bbox(cols, rows, 0.0)
        if r0 >= r1 or c0 >= c1:
            return None
        yy, xx = np.mgrid[r0:r1, c0:c1]
        yy = yy + 0.5
        xx = xx + 0.5
        inside = np.zeros(yy.shape, dtype=bool)
        n = len(rc)
        for i in range(n):
            ya, xa = rows[i - 1], cols[i - 1]
            yb, xb = rows[i], cols[i]
            if ya == yb:
                continue
            crosses = (ya > yy) != (yb > yy)
            xint = xa + (yy - ya) * (xb - xa) / (yb - ya)
            inside ^= crosses & (xx < xint)
        mask = self._paint(r0, c0, inside, color, respect)
        full = np.zeros((self.h, self.w), dtype=bool)
        full[r0:r1, c0:c1] = mask
        return full

    def segment(self, a: np.ndarray, b: np.ndarray, half_width: float, color: RGBA, respect: bool = False):
        rows = np.array([a[0], b[0]])
        cols = np.array([a[1], b[1]])
        r0, r1, c0, c1 = self._bbox(cols, rows, half_width + 1)
        if r0 >= r1 or c0 >= c1:
            return
        yy, xx = np.mgrid[r0:r1, c0:c1]
        py = yy + 0.5 - a[0]
        pxx = xx + 0.5 - a[1]
        dy, dx = b[0] - a[0], b[1] - a[1]
        ll = dy * dy + dx * dx
        t = np.clip((py * dy + pxx * dx) / ll, 0.0, 1.0) if ll > 0 else np.zeros_like(py)
        dist2 = (py - t * dy) ** 2 + (pxx - t * dx) ** 2
        self._paint(r0, c0, dist2 <= half_width * half_width, color, respect)

    def polyline(self, rc: np.ndarray, half_width: float, color: RGBA, respect: bool = False):
        for i in range(len(rc) - 1):
            self.segment(rc[i], rc[i + 1], half_width, color, respect)

    def bitmap(self, mask: np.ndarray, row: int, col: int, color: RGBA, respect: bool = True):
        h, w = mask.shape
        r0, c0 = max(row, 0), max(col, 0)
        r1, c1 = min(row + h, self.h), min(col + w, self.w)
        if r0 >= r1 or c0 >= c1:
            return
        sub = mask[r0 - row:r1 - row, c0 - col:c1 - col]
        self._paint(r0, c0, sub, color, respect)


# ---------------------------------------------------------------------------


def _footprint(center: np.ndarray, d: tuple[float, float], length: float, width: float) -> np.ndarray:
    dx, dy = d
    nx, ny = -dy, dx
    hl, hw = length / 2, width / 2
    return np.array(
        [
            (center[0] + hl * dx + hw * nx, center[1] + hl * dy + hw * ny),
            (center[0] + hl * dx - hw * nx, center[1] + hl * dy - hw * ny),
            (center[0] - hl * dx - hw * nx, center[1] - hl * dy - hw * ny),
            (center[0] - hl * dx + hw * nx, center[1] - hl * dy + hw * ny),
        ]
    )


def render_with_layout(s: Scenario, cfg: RenderConfig = RenderConfig()) -> tuple[RasterImage, RenderLayout]:
    """Render the TC-Map and report the neighbor ordering and label placements."""
    ego_track = s.ego
    ego = ego_track.current
    side = cfg.image_side(ego_track.agent_type)
    if side > cfg.max_image_side:
        raise RenderError(f"image side {side}px exceeds maximum {cfg.max_image_side}px")
    if side < 1:
        raise RenderError("image would be empty")
    pal = cfg.palette
    res = cfg.resolution
    cx = side // 2 + 0.5
    cy = side // 2 + 0.5

    def to_px(exy: np.ndarray) -> np.ndarray:
        exy = np.asarray(exy, dtype=float).reshape(-1, 2)
        return np.stack([cy - exy[:, 1] / res, cx + exy[:, 0] / res], axis=1)

    cropped = crop_scenario(s, cfg)
    cv = _Canvas(side, side, tuple(pal["background"]))

    layers = {MapKind.ROAD_EDGE: [], MapKind.LANE_CENTER: [], MapKind.CROSSWALK: []}
    for f in cropped.map:
        layers[f.kind].append(f)
    for f in layers[MapKind.ROAD_EDGE]:
        cv.polyline(to_px(to_ego_frame(f.polyline, ego)), 1.0, tuple(pal["road_edge"]))
    for f in layers[MapKind.LANE_CENTER]:
        cv.polyline(to_px(to_ego_frame(f.polyline, ego)), 0.75, tuple(pal["lane"]))
    for f in layers[MapKind.CROSSWALK]:
        rc = to_px(to_ego_frame(f.polyline, ego))
        cv.polygon(rc, tuple(pal["crosswalk"]))

    order = neighbor_order(cropped, ego)

    def trail(track: AgentTrack, color):
        pts = [(st.x, st.y) for st in track.history if st.valid]
        if len(pts) >= 2:
            cv.polyline(to_px(to_ego_frame(pts, ego)), 0.6, color)

    if cfg.neighbor_trails:
        for a, _, _ in order:
            trail(a, tuple(pal["neighbor_trail"]))
    if cfg.ego_trail:
        trail(ego_track, tuple(pal["ego_trail"]))

    placed = []  # (track, ego-frame center, direction, color index)
    for idx in range(len(order) - 1, -1, -1):  # farthest first, nearest on top
        a, p, _ = order[idx]
        d = direction_in_ego_frame(a.current.heading, ego)
        ln, wd = cfg.footprints[a.agent_type]
        cv.polygon(to_px(_footprint(p, d, ln, wd)), cfg.neighbor_color(idx))
        placed.append((a, p, d, idx))

    ln, wd = cfg.footprints[ego_track.agent_type]
    ego_poly = _footprint(np.zeros(2), (0.0, 1.0), ln, wd)
    mask = cv.polygon(to_px(ego_poly), tuple(pal["ego"]))
    if mask is not None:
        cv.protected |= mask

    if cfg.draw_heading_arrows:
        arrows = [(ego_track, np.zeros(2), (0.0, 1.0))] + [(a, p, d) for a, p, d, _ in placed]
        for a, p, d in arrows:
            ln, _ = cfg.footprints[a.agent_type]
            alen = max(1.5, 0.6 * ln)
            base = p + (ln / 2) * np.asarray(d)
            tip = base + alen * np.asarray(d)
            b_px, t_px = to_px(base)[0], to_px(tip)[0]
            cv.segment(b_px, t_px, 0.8, tuple(pal["arrow"]), respect=True)
            n = np.array([-d[1], d[0]])
            hs = 0.35 * alen
            head = np.array([tip + hs * np.asarray(d), tip + hs * n * 0.8, tip - hs * n * 0.8])
            cv.polygon(to_px(head), tuple(pal["arrow"]), respect=True)

    labels = []
    if cfg.draw_labels:
        for a, p, d, idx in sorted(placed, key=lambda r: r[3]):
            text = str(idx + 1)
            r, c = to_px(p)[0]
            row = int(math.floor(r)) - 6 * cfg.label_scale
            col = int(math.floor(c)) + 3 * cfg.label_scale
            cv.bitmap(glyph_mask(text, cfg.label_scale), row, col, tuple(pal["label"]))
            labels.append(LabelPlacement(text, a.agent_id, row, col))

    if cfg.draw_north_icon and side >= 64:
        col = side - 16
        cv.bitmap(glyph_mask("N", 2), 6, col - 3, tuple(pal["north"]))
        cv.segment(np.array([40.0, col + 0.5]), np.array([22.0, col + 0.5]), 1.0, tuple(pal["north"]), True)
        cv.polygon(np.array([[18.0, col + 0.5], [25.0, col - 4.0], [25.0, col + 5.0]]), tuple(pal["north"]), True)

    img = RasterImage(side, side, cv.px)
    layout = RenderLayout(side, side, tuple(a.agent_id for a, _, _ in order), tuple(labels))
    return img, layout


def render(s: Scenario, cfg: RenderConfig = RenderConfig()) -> RasterImage:
    return render_with_layout(s, cfg)[0]


def write_png(img: RasterImage, path: str | os.PathLike) -> None:
    png.write_png_bytes(img.to_png(), path)


def read_png(path: str | os.PathLike) -> RasterImage:
    with open(path, "rb") as fh:
        px = png.decode_png(fh.read())
    return RasterImage(px.shape[1], px.shape[0], px)


def render_many(scenarios: Iterable[Scenario], cfg: RenderConfig = RenderConfig()) -> list[RasterImage]:
    return [render(s, cfg) for s in scenarios]
