"""Parametric flask-scene renderer used as ground truth for the pipeline.

A scene is a flask (dark glass rim around a circular solution region) in
front of a display that shows either plain white or a check grid.  The
solution can be turbid (background blended toward a grainy haze), carry
dark particles, and leave residue on the wall.  The camera adds vignetting
and Gaussian noise.  Everything is a pure function of the parameters and
their seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage, optimize, special

from .classifier import LabeledCase, write_manifest
from .config import DEFAULT_CONFIG, Config
from .errors import BadSceneParams
from .labels import Label
from .preprocess import Circle, disk_mask
from .raster import BinaryMask, Raster, write_png
from .sa import GroundTruthPattern, analytic_grid

# display and optics constants (8-bit intensities as seen by the camera)
WHITE = 245.0
GRID_DARK = 40.0
HAZE = 200.0
RESIDUE = 90.0
RIM = 60.0
RIM_WIDTH = 4.0
FAIL1_TURBIDITY = 0.35
CLOUD_SCALE = 15.0  # px, turbidity patches
GRAIN_SCALE = 2.5  # px, haze texture

CATEGORIES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class ParticleSpec:
    count: int = 0
    r_min: float = 2.0
    r_max: float = 4.0
    intensity: float = 70.0
    placement: str = "uniform"  # uniform | bottom
    seed: int = 0


@dataclass(frozen=True)
class SceneParams:
    width: int = 1920
    height: int = 1440
    circle: Circle = Circle(959.5, 719.5, 390.0)
    turbidity: float = 0.0
    particles: ParticleSpec = ParticleSpec()
    vignette: float = 0.0
    noise: float = 2.0
    grid_pitch: int = 40
    grid_thickness: int = 3
    wall_artifacts: bool = False
    haze_grain: float = 4.0
    haze_patchiness: float = 1.5
    seed: int = 0
    haze_seed: int | None = None

    def validate(self) -> None:
        problems = []
        if not 0.0 <= self.turbidity <= 1.0:
            problems.append(f"turbidity {self.turbidity} outside [0, 1]")
        if self.particles.count < 0:
            problems.append("negative particle count")
        if self.particles.r_min < 1 or self.particles.r_max < self.particles.r_min:
            problems.append("particle radii must satisfy 1 <= r_min <= r_max")
        if self.particles.placement not in ("uniform", "bottom"):
            problems.append(f"unknown placement {self.particles.placement!r}")
        if not 0.0 <= self.vignette <= 1.0:
            problems.append(f"vignette {self.vignette} outside [0, 1]")
        if self.noise < 0 or self.haze_grain < 0 or self.haze_patchiness < 0:
            problems.append("noise and haze grain/patchiness must be non-negative")
        if self.grid_pitch < 2 or not 1 <= self.grid_thickness < self.grid_pitch:
            problems.append("grid needs pitch >= 2 and 1 <= thickness < pitch")
        if self.width < 1 or self.height < 1:
            problems.append("empty frame")
        elif not self.circle.inside(self.width, self.height):
            problems.append(f"flask {self.circle} not inside {self.width}x{self.height} frame")
        if problems:
            raise BadSceneParams("; ".join(problems))

    def label(self) -> Label:
        return scene_label(self)


def scene_label(p: SceneParams) -> Label:
    """Ground-truth label: turbid first, then particles, else clear."""
    if p.turbidity >= FAIL1_TURBIDITY:
        return Label.FAIL1
    if p.particles.count > 0:
        return Label.FAIL2
    return Label.PASS


@dataclass(frozen=True, eq=False)
class RenderedScene:
    white: Raster
    check: Raster
    label: Label
    grid: GroundTruthPattern
    params: SceneParams


# -- drawing helpers ---------------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def draw_particles(p: SceneParams) -> list[tuple[float, float, float]]:
    """Particle (x, y, radius) list; a smaller count is always a prefix."""
    parts = p.particles
    rng = _rng(parts.seed, 1)
    c = p.circle
    reach = 0.85 * c.r
    out = []
    while len(out) < parts.count:
        u, v, rad, keep = rng.random(4)
        rho = reach * math.sqrt(u)
        phi = 2 * math.pi * v
        x = c.cx + rho * math.cos(phi)
        y = c.cy + rho * math.sin(phi)
        if parts.placement == "bottom":
            depth = (y - (c.cy - reach)) / (2 * reach)  # 0 at top, 1 at bottom
            if keep > depth ** 2:
                continue
        out.append((x, y, parts.r_min + rad * (parts.r_max - parts.r_min)))
    return out


def draw_residue(p: SceneParams) -> list[tuple[float, float, float]]:
    rng = _rng(p.seed, 4)
    c = p.circle
    out = []
    for _ in range(int(rng.integers(8, 16))):
        phi = rng.uniform(0.15 * math.pi, 0.85 * math.pi)  # lower half, wall-hugging
        rho = c.r * rng.uniform(0.88, 0.93)
        out.append((c.cx + rho * math.cos(phi), c.cy + rho * math.sin(phi), rng.uniform(3.0, 7.0)))
    return out


def _stamp_disks(canvas: np.ndarray, disks, value: float) -> None:
    h, w = canvas.shape
    for x, y, r in disks:
        x0, x1 = max(int(x - r - 2), 0), min(int(x + r + 3), w)
        y0, y1 = max(int(y - r - 2), 0), min(int(y + r + 3), h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        cover = np.clip(r + 0.5 - np.hypot(xx - x, yy - y), 0.0, 1.0)
        patch = canvas[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] = patch * (1 - cover) + value * cover


def _unit_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Smooth zero-mean, unit-variance noise with correlation length ``sigma``."""
    # broad fields are synthesised coarse and upsampled
    step = max(int(sigma // 3), 1)
    coarse = (-(-shape[0] // step) + 1, -(-shape[1] // step) + 1)
    f = ndimage.gaussian_filter(rng.standard_normal(coarse, dtype=np.float32), sigma / step, mode="wrap")
    if step > 1:
        f = ndimage.zoom(f, step, order=1, grid_mode=False)
    f = f[:shape[0], :shape[1]]
    f -= f.mean()
    return f / (f.std() or 1.0)


def haze_layers(p: SceneParams, inside: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (turbidity, haze intensity) over the flask bounding box.

    Turbidity is zero outside the flask.  Inside, it is a smooth cloud field in logit space, shifted so that
    its mean over the flask equals the scene turbidity.  0 and 1 stay exact.
    """
    seed = p.seed if p.haze_seed is None else p.haze_seed
    t = p.turbidity
    shape = inside.shape
    if t <= 0.0 or t >= 1.0 or p.haze_patchiness == 0:
        local = np.full(shape, t, dtype=np.float32)
    else:
        base = math.log(t / (1 - t)) + p.haze_patchiness * _unit_field(_rng(seed, 3), shape, CLOUD_SCALE)
        cloud = base[inside]
        shift = optimize.brentq(lambda b: special.expit(cloud + b).mean() - t, -30.0, 30.0, xtol=1e-6)
        local = special.expit(base + np.float32(shift)).astype(np.float32)
    haze = HAZE + p.haze_grain * _unit_field(_rng(seed, 5), shape, GRAIN_SCALE)
    return np.where(inside, local, np.float32(0)), haze.astype(np.float32)


@numba.njit(cache=True)
def _finish(img, vignette, noise, sigma, out):
    h, w = img.shape
    for y in range(h):
        for x in range(w):
            v = img[y, x]
            if vignette.shape[0] > 1:
                v *= vignette[y, x]
            if sigma > 0:
                v += sigma * noise[y, x]
            q = np.rint(v)
            q = 0.0 if q < 0 else (255.0 if q > 255 else q)
            out[y, x, 0] = np.uint8(q)
            out[y, x, 1] = np.uint8(q)
            out[y, x, 2] = np.uint8(q)


def grid_lines(p: SceneParams) -> np.ndarray:
    origin = (int(round(p.circle.cx)), int(round(p.circle.cy)))
    return analytic_grid(p.width, p.height, origin, p.grid_pitch, p.grid_thickness).bits


def _flask_box(p: SceneParams) -> tuple[int, int, int, int]:
    c = p.circle
    pad = int(RIM_WIDTH) + 3
    return (max(int(c.cy - c.r) - pad, 0), min(int(c.cy + c.r) + pad + 1, p.height),
            max(int(c.cx - c.r) - pad, 0), min(int(c.cx + c.r) + pad + 1, p.width))


def render_scene(p: SceneParams, config: Config = DEFAULT_CONFIG) -> RenderedScene:
    """Render the white- and check-background captures of one scene.

    The returned ground-truth grid is in center-crop coordinates, limited to
    the solution region the pipeline analyses.
    """
    p.validate()
    y0, y1, x0, x1 = box = _flask_box(p)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.hypot(xx - p.circle.cx, yy - p.circle.cy)
    inside = dist <= p.circle.r
    rim = np.clip(RIM_WIDTH / 2 + 0.5 - np.abs(dist - p.circle.r), 0.0, 1.0).astype(np.float32)
    turb, haze = haze_layers(p, inside) if p.turbidity > 0 else (None, None)
    particles = draw_particles(p)
    residue = draw_residue(p) if p.wall_artifacts else []
    vignette = np.ones((1, 1), dtype=np.float32)
    if p.vignette > 0:
        ry, rx = np.ogrid[0:p.height, 0:p.width]
        fall = ((rx - (p.width - 1) / 2) ** 2 + (ry - (p.height - 1) / 2) ** 2) / (0.5 * min(p.width, p.height)) ** 2
        vignette = (1 - p.vignette * fall).astype(np.float32)

    frames = []
    for stream, background in ((10, np.full((p.height, p.width), WHITE, dtype=np.float32)),
                               (11, np.where(grid_lines(p), GRID_DARK, WHITE).astype(np.float32))):
        img = background
        sub = img[y0:y1, x0:x1]
        if turb is not None:
            sub += turb * (haze - sub)  # turb is 0 outside the flask
        _stamp_disks(img, particles, p.particles.intensity)
        _stamp_disks(img, residue, RESIDUE)
        sub *= 1 - rim
        sub += RIM * rim
        noise = np.zeros((1, 1), dtype=np.float32)
        if p.noise > 0:
            noise = _rng(p.seed, stream).standard_normal((p.height, p.width), dtype=np.float32)
        out = np.empty((p.height, p.width, 3), dtype=np.uint8)
        _finish(img, vignette, noise, np.float32(p.noise), out)
        frames.append(Raster(out))
    return RenderedScene(frames[0], frames[1], scene_label(p), scene_grid(p, config), p)


def scene_grid(p: SceneParams, config: Config = DEFAULT_CONFIG) -> GroundTruthPattern:
    side = config["crop.side"]
    left, top = (p.width - side) // 2, (p.height - side) // 2
    c = crop_circle(p, side)
    origin = (int(round(p.circle.cx)) - left, int(round(p.circle.cy)) - top)
    grid = analytic_grid(side, side, origin, p.grid_pitch, p.grid_thickness)
    roi = disk_mask(side, side, Circle(c.cx, c.cy, c.r * (1 - config["roi.shrink"])))
    return GroundTruthPattern(BinaryMask(grid.bits & roi), "analytic-grid", p.grid_pitch,
                              p.grid_thickness, origin)


def crop_circle(p: SceneParams, side: int = 900) -> Circle:
    """The flask circle in center-crop coordinates."""
    left, top = (p.width - side) // 2, (p.height - side) // 2
    return Circle(p.circle.cx - left, p.circle.cy - top, p.circle.r)


# -- presets and series ------------------------------------------------------------

def jittered_circle(rng: np.random.Generator, width: int = 1920, height: int = 1440,
                    r_range=(340.0, 400.0), max_offset: float = 30.0) -> Circle:
    r = float(rng.uniform(*r_range))
    dx, dy = rng.uniform(-max_offset, max_offset, 2)
    return Circle((width - 1) / 2 + float(dx), (height - 1) / 2 + float(dy), r)


def category_preset(cat: str, seed: int = 0) -> SceneParams:
    """Scene parameters for one of the four dissolution categories.

    A: clear solution.  B: saturated, particles suspended throughout.
    C: undissolved solute settled at the bottom and stuck to the wall.
    D: very low solubility, turbid with floating flecks.
    """
    if cat not in CATEGORIES:
        raise BadSceneParams(f"unknown category {cat!r}")
    rng = _rng(seed, 100 + CATEGORIES.index(cat))
    base = dict(circle=jittered_circle(rng), vignette=float(rng.uniform(0.0, 0.2)),
                noise=float(rng.uniform(1.5, 3.0)), seed=seed)
    if cat == "A":
        return SceneParams(turbidity=float(rng.uniform(0.0, 0.1)), **base)
    if cat == "B":
        parts = ParticleSpec(int(rng.integers(30, 150)), 2.0, 5.0, float(rng.uniform(50, 110)), "uniform", seed)
        return SceneParams(turbidity=float(rng.uniform(0.0, 0.15)), particles=parts, **base)
    if cat == "C":
        parts = ParticleSpec(int(rng.integers(15, 80)), 2.5, 6.0, float(rng.uniform(50, 110)), "bottom", seed)
        return SceneParams(turbidity=float(rng.uniform(0.0, 0.1)), particles=parts,
                           wall_artifacts=True, **base)
    parts = ParticleSpec(int(rng.integers(5, 40)), 1.5, 3.0, float(rng.uniform(80, 130)), "uniform", seed)
    return SceneParams(turbidity=float(rng.uniform(0.88, 0.98)), particles=parts, **base)


@dataclass(frozen=True)
class DissolutionSeries:
    steps: tuple[SceneParams, ...]
    timestamps: tuple[float, ...]

    def __post_init__(self):
        for a, b in zip(self.steps, self.steps[1:]):
            if b.turbidity > a.turbidity or b.particles.count > a.particles.count:
                raise BadSceneParams("dissolution series must not gain turbidity or particles")


def dissolution_series(start: SceneParams, steps: int, schedule: str = "linear",
                       interval_min: float = 5.0) -> DissolutionSeries:
    """Interpolate turbidity and particle count from ``start`` down to zero.

    Step ``steps - 1`` is fully dissolved.  Noise seeds differ per step,
    particle placement does not, so dissolving removes particles.
    """
    if steps < 1:
        raise BadSceneParams("a series needs at least one step")
    if schedule not in ("linear", "exponential"):
        raise BadSceneParams(f"unknown schedule {schedule!r}")
    out = []
    for k in range(steps):
        frac = k / (steps - 1) if steps > 1 else 1.0
        if schedule == "linear":
            remain = 1.0 - frac
        else:
            remain = (math.exp(-4.0 * frac) - math.exp(-4.0)) / (1 - math.exp(-4.0))
        count = int(math.floor(start.particles.count * remain + 1e-9))
        out.append(replace(start, turbidity=start.turbidity * remain,
                           particles=replace(start.particles, count=count),
                           seed=start.seed * 1000 + k,
                           haze_seed=start.seed if start.haze_seed is None else start.haze_seed))
    return DissolutionSeries(tuple(out), tuple(interval_min * k for k in range(steps)))


# -- datasets ------------------------------------------------------------------

@dataclass
class SyntheticCase:
    case_id: str
    params: SceneParams
    scenario: str
    label: Label
    scene: RenderedScene | None = field(default=None, repr=False)

    def labeled(self, config: Config = DEFAULT_CONFIG) -> LabeledCase:
        scene = self.scene or render_scene(self.params, config)
        return LabeledCase(self.case_id, scene.white, scene.check, self.label, self.scenario,
                           truth=scene.grid)


DEFAULT_MIX = {Label.FAIL1: 20, Label.FAIL2: 104, Label.PASS: 29}


def _case_params(label: Label, rng: np.random.Generator, seed: int) -> tuple[str, SceneParams]:
    if label is Label.PASS:
        p = category_preset("A", seed)
        return "A", replace(p, turbidity=float(rng.uniform(0.0, 0.2)))
    if label is Label.FAIL1:
        p = category_preset("D", seed)
        return "D", replace(p, turbidity=float(rng.uniform(0.45, 0.95)))
    cat = "C" if rng.random() < 0.3 else "B"
    p = category_preset(cat, seed)
    return cat, replace(p, turbidity=float(rng.uniform(0.0, 0.2)))


def dataset_params(counts: dict[Label, int] | None = None, seed: int = 0) -> list[SyntheticCase]:
    """Scene parameters for a labelled dataset with the requested class mix."""
    counts = DEFAULT_MIX if counts is None else counts
    rng = _rng(seed, 200)
    cases = []
    for label in (Label.PASS, Label.FAIL1, Label.FAIL2):
        for i in range(counts.get(label, 0)):
            case_seed = seed * 100_000 + len(cases)
            scenario, params = _case_params(label, rng, case_seed)
            assert scene_label(params) is label
            cases.append(SyntheticCase(f"{label.value.lower()}-{i:03d}", params, scenario, label))
    return cases


def iter_scenes(cases, config: Config = DEFAULT_CONFIG):
    """Render cases one at a time, yielding ``(case, scene)``."""
    for case in cases:
        yield case, case.scene or render_scene(case.params, config)


def generate_dataset(counts: dict[Label, int] | None = None, seed: int = 0,
                     out_dir: str | Path | None = None, config: Config = DEFAULT_CONFIG) -> list[SyntheticCase]:
    """Labelled dataset with the requested mix; with ``out_dir`` also write PNGs and a manifest.

    Scenes are rendered while writing and not kept; use ``iter_scenes`` or
    ``SyntheticCase.labeled`` to get pixels back.
    """
    cases = dataset_params(counts, seed)
    if out_dir is None:
        return cases
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for case, scene in iter_scenes(cases, config):
        white = f"images/{case.case_id}_white.png"
        check = f"images/{case.case_id}_check.png"
        write_png(scene.white, out / white)
        write_png(scene.check, out / check)
        rows.append({"case_id": case.case_id, "white_png": white, "check_png": check,
                     "label": case.label.value, "scenario": case.scenario, "augmentation": "identity"})
    write_manifest(out / "manifest.csv", rows)
    return cases


def params_dict(p: SceneParams) -> dict:
    return asdict(p)
