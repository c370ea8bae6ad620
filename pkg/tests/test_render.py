import hashlib
import math
import zlib
from pathlib import Path

import numpy as np
import pytest

from trafficctx.render import (
    DEFAULT_PALETTE,
    RenderConfig,
    RenderError,
    _clip_polyline,
    crop_scenario,
    ego_north_transform,
    read_png,
    render,
    render_with_layout,
    to_ego_frame,
)
from trafficctx.scenario import AgentType, MapFeature, MapKind, transform_scenario
from trafficctx.synth import synth_fixtures, synth_scenario

from conftest import simple_scenario, straight_track

DATA = Path(__file__).parent / "data"
GOLDEN_PIXELS_SHA = "8ba5dec112d53413e27150028c0c07d69e062fcdf166f206bbeee9a0685c7cbc"
GOLDEN_PNG_SHA = "1bbfacff740f6e149d1585215c77b9a8c6389036a4204bcc45a840c798d3129f"
GOLDEN_ZLIB = "1.2.11"


def _golden_scenario():
    s, _ = synth_scenario("golden", "left_turn", np.random.default_rng(42), AgentType.VEHICLE, 1, n_neighbors=5)
    return s


def test_golden_render_pixels():
    img = render(_golden_scenario())
    assert img == read_png(DATA / "golden_left_turn.png")
    assert hashlib.sha256(img.pixels.tobytes()).hexdigest() == GOLDEN_PIXELS_SHA


@pytest.mark.skipif(zlib.ZLIB_VERSION != GOLDEN_ZLIB, reason="PNG bytes depend on the zlib build")
def test_golden_png_bytes():
    assert hashlib.sha256(render(_golden_scenario()).to_png()).hexdigest() == GOLDEN_PNG_SHA


@pytest.mark.parametrize("atype,side", [(AgentType.VEHICLE, 480), (AgentType.PEDESTRIAN, 320), (AgentType.CYCLIST, 240)])
def test_image_size_by_type(atype, side):
    img = render(simple_scenario(agents=[straight_track(agent_type=atype)]))
    assert (img.width, img.height) == (side, side)


def test_ego_color_at_center_for_every_heading():
    ego = tuple(DEFAULT_PALETTE["ego"])
    for h in np.linspace(-math.pi, math.pi, 13):
        img = render(simple_scenario(agents=[straight_track(heading=float(h), start=(31.0, -7.0))]))
        assert img.pixel(img.width // 2, img.height // 2) == ego


def test_ego_north_transform_examples():
    ego = straight_track(heading=0.0).current  # facing east at the origin
    x, y = ego_north_transform((10.0, 0.0), ego)
    assert (round(x, 12), round(y, 12)) == (0.0, 10.0)
    x, y, h = ego_north_transform((0.0, 5.0, 0.0), ego)
    assert (round(x, 12), round(y, 12), round(h, 12)) == (-5.0, 0.0, round(math.pi / 2, 12))


def test_rotation_invariance_byte_identical(rng):
    for s, _ in synth_fixtures(12, seed=11):
        moved = transform_scenario(s, float(rng.uniform(-math.pi, math.pi)), *rng.uniform(-300, 300, 2))
        assert render(s).to_png() == render(moved).to_png()


def test_neighbor_on_boundary_kept_outside_dropped():
    ego = straight_track(heading=math.pi / 2)
    on_edge = straight_track("edge", start=(60.0, 0.0), speed=0.0)
    outside = straight_track("far", start=(60.5, 0.0), speed=0.0)
    cropped = crop_scenario(simple_scenario(agents=[ego, on_edge, outside]), RenderConfig())
    assert [a.agent_id for a in cropped.agents] == ["ego", "edge"]


def test_lane_crossing_window_is_clipped_at_boundary():
    lane = MapFeature("l", MapKind.LANE_CENTER, ((-100.0, 0.0), (100.0, 0.0)))
    cropped = crop_scenario(simple_scenario(agents=[straight_track(heading=math.pi / 2)], features=[lane]),
                            RenderConfig())
    (f,) = cropped.map
    xs = sorted(p[0] for p in f.polyline)
    assert xs[0] == pytest.approx(-60.0) and xs[-1] == pytest.approx(60.0)


def test_clip_matches_dense_sampling(rng):
    # oracle: points sampled along the polyline are inside the square iff they lie on a clipped piece
    half = 10.0
    for _ in range(40):
        pts = rng.uniform(-25, 25, size=(int(rng.integers(2, 6)), 2))
        pieces = _clip_polyline(pts, pts, half)
        for i in range(len(pts) - 1):
            for t in np.linspace(0.0, 1.0, 101):
                q = pts[i] + t * (pts[i + 1] - pts[i])
                inside = abs(q[0]) <= half - 1e-9 and abs(q[1]) <= half - 1e-9
                on_piece = any(_on_polyline(q, np.array(pc)) for pc in pieces)
                if inside:
                    assert on_piece
                if on_piece:
                    assert abs(q[0]) <= half + 1e-9 and abs(q[1]) <= half + 1e-9


def _on_polyline(q, poly, tol=1e-7):
    for a, b in zip(poly[:-1], poly[1:]):
        d = b - a
        ll = d @ d
        t = 0.0 if ll == 0 else np.clip((q - a) @ d / ll, 0, 1)
        if np.linalg.norm(a + t * d - q) <= tol:
            return True
    return False


def test_crosswalk_clipped_polygon_stays_closed():
    poly = ((50.0, -5.0), (70.0, -5.0), (70.0, 5.0), (50.0, 5.0), (50.0, -5.0))
    s = simple_scenario(agents=[straight_track(heading=math.pi / 2)],
                        features=[MapFeature("cw", MapKind.CROSSWALK, poly)])
    (f,) = crop_scenario(s, RenderConfig()).map
    assert f.polyline[0] == f.polyline[-1]
    assert max(p[0] for p in f.polyline) == pytest.approx(60.0)


def test_labels_follow_distance_order():
    ego = straight_track(heading=math.pi / 2)
    near = straight_track("b", start=(5.0, 5.0), speed=0.0)
    far = straight_track("a", start=(-20.0, 20.0), speed=0.0)
    _, layout = render_with_layout(simple_scenario(agents=[ego, far, near]))
    assert layout.neighbor_order == ("b", "a")
    assert [(lb.label, lb.agent_id) for lb in layout.labels] == [("1", "b"), ("2", "a")]


def test_ego_footprint_never_overdrawn():
    # a neighbor parked on top of the ego and labels/arrows nearby must not change the ego pixels
    ego = straight_track(heading=math.pi / 2)
    other = straight_track("x", start=(0.5, 0.5), speed=0.0)
    alone = render(simple_scenario(agents=[ego]))
    crowded = render(simple_scenario(agents=[ego, other]))
    color = np.array(DEFAULT_PALETTE["ego"], dtype=np.uint8)
    mask = np.all(alone.pixels == color, axis=-1)
    assert mask.sum() > 0
    assert np.all(crowded.pixels[mask] == color)


def test_oversized_window_rejected():
    cfg = RenderConfig(resolution=0.01)
    with pytest.raises(RenderError):
        render(simple_scenario(), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(resolution=0)
    pal = dict(DEFAULT_PALETTE)
    pal["neighbors"] = (tuple(pal["ego"]),)
    with pytest.raises(ValueError):
        RenderConfig(palette=pal)


def test_to_ego_frame_is_quantized():
    ego = straight_track(heading=0.3).current
    out = to_ego_frame(np.array([[1.234567891, 2.0]]), ego)
    assert np.allclose(out * 1e6, np.round(out * 1e6), atol=1e-6)
