import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import scene
from solvis import synthgen as sg
from solvis.classifier import read_manifest
from solvis.errors import BadSceneParams
from solvis.labels import Label
from solvis.preprocess import Circle, disk_mask, preprocess_frame
from solvis.raster import read_png


def grid_contrast(s: sg.RenderedScene) -> float:
    """Michelson contrast between off-grid and grid pixels inside the flask."""
    p = s.params
    img = s.check.data[..., 0].astype(np.float64)
    inside = disk_mask(p.width, p.height, replace(p.circle, r=0.95 * p.circle.r))
    lines = sg.grid_lines(p)
    hi, lo = img[inside & ~lines].mean(), img[inside & lines].mean()
    return (hi - lo) / (hi + lo)


# -- labels --------------------------------------------------------------------------

def test_clean_scene_is_pass_with_visible_grid():
    s = scene(sg.SceneParams(seed=41))
    assert s.label is Label.PASS
    assert grid_contrast(s) > 0.6


def test_particles_make_fail2():
    p = sg.SceneParams(particles=sg.ParticleSpec(100), seed=41)
    assert p.label() is Label.FAIL2


def test_turbid_scene_loses_grid_contrast():
    clear = scene(sg.SceneParams(seed=41))
    turbid = scene(sg.SceneParams(turbidity=0.8, seed=41))
    assert turbid.label is Label.FAIL1
    assert grid_contrast(turbid) <= 0.2 * grid_contrast(clear)


@given(st.floats(0, 1), st.integers(0, 300))
def test_label_rule(t, count):
    p = sg.SceneParams(turbidity=t, particles=sg.ParticleSpec(count))
    expected = Label.FAIL1 if t >= 0.35 else (Label.FAIL2 if count > 0 else Label.PASS)
    assert sg.scene_label(p) is expected


@pytest.mark.parametrize("changes", [dict(turbidity=1.5), dict(turbidity=-0.1), dict(vignette=2.0),
                                     dict(noise=-1.0), dict(particles=sg.ParticleSpec(5, 0.5, 2.0)),
                                     dict(particles=sg.ParticleSpec(-1)), dict(circle=Circle(100, 100, 300)),
                                     dict(grid_pitch=3, grid_thickness=3)])
def test_bad_params(changes):
    with pytest.raises(BadSceneParams):
        sg.render_scene(replace(sg.SceneParams(), **changes))


# -- rendering ------------------------------------------------------------------------

def test_render_is_deterministic():
    p = sg.category_preset("B", 7)
    a, b = sg.render_scene(p), sg.render_scene(p)
    assert a.white == b.white and a.check == b.check and a.grid.mask == b.grid.mask
    c = sg.render_scene(replace(p, seed=8))
    assert c.white != a.white


def test_frame_shape():
    s = scene(sg.SceneParams(seed=41))
    assert s.white.data.shape == (1440, 1920, 3) and s.check.data.shape == (1440, 1920, 3)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_haze_mean_equals_turbidity(t):
    p = sg.SceneParams(turbidity=t, seed=3)
    y0, y1, x0, x1 = sg._flask_box(p)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = np.hypot(xx - p.circle.cx, yy - p.circle.cy) <= p.circle.r
    local, _ = sg.haze_layers(p, inside)
    assert local[inside].mean() == pytest.approx(t, abs=1e-5)
    assert np.all(local[~inside] == 0)
    assert 0 <= local.min() and local.max() <= 1


def test_haze_extremes_are_uniform():
    p = sg.SceneParams(turbidity=1.0)
    inside = np.ones((20, 20), dtype=bool)
    local, _ = sg.haze_layers(p, inside)
    assert np.all(local == 1.0)


def test_fewer_particles_are_a_prefix():
    p = sg.SceneParams(particles=sg.ParticleSpec(60, seed=9))
    many = sg.draw_particles(p)
    few = sg.draw_particles(replace(p, particles=replace(p.particles, count=20)))
    assert few == many[:20]
    c = p.circle
    assert all(math.hypot(x - c.cx, y - c.cy) < c.r for x, y, _ in many)


def test_grid_truth_is_inside_roi():
    p = sg.SceneParams(seed=41)
    s = scene(p)
    c = sg.crop_circle(p)
    yy, xx = np.nonzero(s.grid.mask.bits)
    assert np.all(np.hypot(xx - c.cx, yy - c.cy) <= 0.95 * c.r + 1e-9)


# -- presets -------------------------------------------------------------------------

@pytest.mark.parametrize("cat, label", [("A", Label.PASS), ("B", Label.FAIL2), ("C", Label.FAIL2),
                                        ("D", Label.FAIL1)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_presets_have_expected_labels(cat, label, seed):
    assert sg.category_preset(cat, seed).label() is label


@pytest.mark.parametrize("cat", sg.CATEGORIES)
@pytest.mark.parametrize("seed", [3, 4])
def test_presets_are_recoverable(cat, seed):
    p = sg.category_preset(cat, seed)
    s = scene(p)
    roi = preprocess_frame(s.white)
    c = sg.crop_circle(p)
    assert math.hypot(roi.circle.cx - c.cx, roi.circle.cy - c.cy) <= 2
    assert abs(roi.circle.r / 0.95 - c.r) <= 2


def test_unknown_preset():
    with pytest.raises(BadSceneParams):
        sg.category_preset("E")


# -- series --------------------------------------------------------------------------

@pytest.mark.parametrize("schedule", ["linear", "exponential"])
def test_series_runs_down_to_clear(schedule):
    start = sg.category_preset("B", 3)
    start = replace(start, turbidity=0.9)
    series = sg.dissolution_series(start, 28, schedule)
    assert len(series.steps) == 28
    assert series.timestamps[-1] == 135.0
    ts = [p.turbidity for p in series.steps]
    ns = [p.particles.count for p in series.steps]
    assert ts[0] == 0.9 and ns[0] == start.particles.count
    assert all(a >= b for a, b in zip(ts, ts[1:])) and all(a >= b for a, b in zip(ns, ns[1:]))
    assert series.steps[-1].label() is Label.PASS
    assert len({p.seed for p in series.steps}) == 28
    assert len({p.haze_seed for p in series.steps}) == 1


def test_series_rejects_growth():
    a = sg.SceneParams(turbidity=0.2)
    with pytest.raises(BadSceneParams):
        sg.DissolutionSeries((a, replace(a, turbidity=0.3)), (0.0, 5.0))
    with pytest.raises(BadSceneParams):
        sg.dissolution_series(a, 0)


# -- datasets ------------------------------------------------------------------------

def test_dataset_params_mix():
    cases = sg.dataset_params(seed=0)
    assert len(cases) == 153
    counts = {label: sum(c.label is label for c in cases) for label in Label}
    assert counts == {Label.FAIL1: 20, Label.FAIL2: 104, Label.PASS: 29}
    assert all(c.params.label() is c.label for c in cases)
    assert len({c.case_id for c in cases}) == 153


def test_generate_dataset_is_reproducible(tmp_path):
    counts = {Label.PASS: 1, Label.FAIL1: 1, Label.FAIL2: 1}
    sg.generate_dataset(counts, 5, tmp_path / "a")
    sg.generate_dataset(counts, 5, tmp_path / "b")
    rows = read_manifest(tmp_path / "a" / "manifest.csv")
    assert len(rows) == 3
    for row in rows:
        for name in (row.white_png, row.check_png):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        preprocess_frame(read_png(tmp_path / "a" / row.white_png))
        preprocess_frame(read_png(tmp_path / "a" / row.check_png))
    params = {c.case_id: c.params for c in sg.dataset_params(counts, 5)}
    assert all(params[r.case_id].label() is r.label for r in rows)
