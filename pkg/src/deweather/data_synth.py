"""Procedural time-multiplexed scenes with weather and label inconsistencies.

Each scene is a short fixed-camera sequence. Frames carry a weather overlay
drawn independently per frame; the single clean label is rendered at the
centre timestamp and then perturbed (colour, illumination, jitter, object
relocation) so that it no longer matches the degraded input exactly. The
unperturbed centre render is kept as an aligned oracle for evaluation.

On-disk layout::

    <root>/manifest.csv
    <root>/scenes/<scene_id>/frames/000.png ...
    <root>/scenes/<scene_id>/gt.png
    <root>/scenes/<scene_id>/gt_aligned.png
    <root>/scenes/<scene_id>/scene.json
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

WEATHERS = ("rain", "snow", "fog")
INCONSISTENCIES = ("color_shift", "illumination_shift", "object_motion", "spatial_jitter")
MANIFEST_FIELDS = ("scene_id", "seed", "weather", "inconsistencies", "num_frames", "H", "W")

# rng stream tags; keep stable, dataset bytes depend on them
_LAYOUT, _WEATHER, _LABEL = 0, 1, 2


class SceneSpecError(ValueError):
    pass


class DatasetIOError(OSError):
    def __init__(self, path, cause):
        super().__init__(f"dataset IO failed at {path}: {cause}")
        self.path = Path(path)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    canvas: tuple[int, int]
    num_frames: int = 5
    weather: str = "rain"
    weather_density: float = 0.5
    inconsistency: frozenset = field(default_factory=frozenset)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "inconsistency", frozenset(self.inconsistency))
        self.validate(1)

    @property
    def center(self) -> int:
        return self.num_frames // 2

    def validate(self, multiple: int = 1) -> None:
        h, w = self.canvas
        if h < 16 or w < 16:
            raise SceneSpecError(f"{self.scene_id}: canvas {self.canvas} smaller than 16x16")
        if h % multiple or w % multiple:
            raise SceneSpecError(f"{self.scene_id}: canvas {self.canvas} not divisible by {multiple}")
        if self.num_frames < 1 or self.num_frames % 2 == 0:
            raise SceneSpecError(f"{self.scene_id}: num_frames must be odd and >= 1, got {self.num_frames}")
        if self.weather not in WEATHERS:
            raise SceneSpecError(f"{self.scene_id}: unknown weather {self.weather!r}")
        if not 0.0 <= self.weather_density <= 1.0:
            raise SceneSpecError(f"{self.scene_id}: weather_density outside [0, 1]")
        unknown = set(self.inconsistency) - set(INCONSISTENCIES)
        if unknown:
            raise SceneSpecError(f"{self.scene_id}: unknown inconsistency kinds {sorted(unknown)}")
        if not 0 <= self.rng_seed < 2**64:
            raise SceneSpecError(f"{self.scene_id}: rng_seed must fit in 64 bits")

    def to_json(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["inconsistency"] = sorted(self.inconsistency)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(
            scene_id=d["scene_id"],
            canvas=tuple(d["canvas"]),
            num_frames=int(d["num_frames"]),
            weather=d["weather"],
            weather_density=float(d["weather_density"]),
            inconsistency=frozenset(d["inconsistency"]),
            rng_seed=int(d["rng_seed"]),
        )


@dataclass
class FrameWindow:
    frames: list
    gt_misaligned: np.ndarray
    gt_aligned_oracle: np.ndarray
    timestamps: list

    @property
    def n(self) -> int:
        return len(self.frames) // 2

    @property
    def current(self) -> np.ndarray:
        return self.frames[self.n]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are exact."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# --------------------------------------------------------------------------
# scene rendering


@dataclass(frozen=True)
class _Layout:
    horizon: int
    sky_top: np.ndarray
    sky_bottom: np.ndarray
    ground: np.ndarray
    ground_alt: np.ndarray
    freq: tuple
    phase: tuple
    shapes: tuple  # (kind, y0, x0, h, w, rgb)
    mover: tuple | None  # (y0, x0, h, w, vy, vx, rgb)


def _layout(spec: SceneSpec) -> _Layout:
    rng = _rng(spec.rng_seed, _LAYOUT)
    h, w = spec.canvas
    horizon = int(rng.integers(int(0.3 * h), int(0.5 * h) + 1))
    sky_top = rng.uniform([0.2, 0.35, 0.6], [0.5, 0.6, 0.95])
    sky_bottom = rng.uniform([0.55, 0.6, 0.7], [0.85, 0.85, 0.95])
    ground = rng.uniform(0.15, 0.55, size=3)
    ground_alt = np.clip(ground + rng.uniform(-0.2, 0.2, size=3), 0.05, 0.8)
    freq = tuple(rng.uniform(0.25, 0.9, size=2))
    phase = tuple(rng.uniform(0, 2 * np.pi, size=2))
    shapes = []
    for _ in range(int(rng.integers(2, 5))):
        kind = "rect" if rng.random() < 0.6 else "disc"
        sh = int(rng.integers(max(3, h // 8), max(4, h // 3)))
        sw = int(rng.integers(max(3, w // 8), max(4, w // 3)))
        y0 = int(rng.integers(0, h - sh))
        x0 = int(rng.integers(0, w - sw))
        shapes.append((kind, y0, x0, sh, sw, tuple(rng.uniform(0.05, 0.95, size=3))))
    mover = None
    if "object_motion" in spec.inconsistency:
        mh = int(rng.integers(max(3, h // 6), max(4, h // 4) + 1))
        mw = int(rng.integers(max(3, w // 6), max(4, w // 4) + 1))
        y0 = int(rng.integers(0, h - mh + 1))
        x0 = int(rng.integers(0, w - mw + 1))
        vy = int(rng.integers(-1, 2))
        vx = int(rng.choice([-2, -1, 1, 2]))
        mover = (y0, x0, mh, mw, vy, vx, tuple(rng.uniform(0.05, 0.95, size=3)))
    return _Layout(horizon, sky_top, sky_bottom, ground, ground_alt, freq, phase, tuple(shapes), mover)


def _bounce(p: int, span: int) -> int:
    # triangle wave keeps the mover inside the canvas for any t
    if span <= 0:
        return 0
    p = p % (2 * span)
    return p if p <= span else 2 * span - p


def moving_object_bbox(spec: SceneSpec, t: int):
    """(y0, x0, y1, x1) of the moving object at time t, or None."""
    lay = _layout(spec)
    if lay.mover is None:
        return None
    h, w = spec.canvas
    y0, x0, mh, mw, vy, vx, _ = lay.mover
    dt = t - spec.center
    y = _bounce(y0 + vy * dt, h - mh)
    x = _bounce(x0 + vx * dt, w - mw)
    return y, x, y + mh, x + mw


def render_clean_scene(spec: SceneSpec, t: int) -> np.ndarray:
    """Weather-free render of the scene at time t, H x W x 3 in [0, 1]."""
    if not 0 <= t < spec.num_frames:
        raise ValueError(f"t={t} outside [0, {spec.num_frames})")
    lay = _layout(spec)
    h, w = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    img = np.empty((h, w, 3))
    frac = np.clip(yy / max(lay.horizon, 1), 0, 1)[..., None]
    sky = lay.sky_top * (1 - frac) + lay.sky_bottom * frac
    tex = 0.5 + 0.25 * np.sin(lay.freq[0] * xx + lay.phase[0]) + 0.25 * np.sin(lay.freq[1] * yy + lay.phase[1])
    checker = ((xx // 4 + yy // 4) % 2)[..., None]
    ground = lay.ground * (0.7 + 0.3 * tex[..., None]) * (1 - 0.5 * checker) + lay.ground_alt * 0.5 * checker
    img[:] = np.where(yy[..., None] < lay.horizon, sky, ground)

    for kind, y0, x0, sh, sw, rgb in lay.shapes:
        if kind == "rect":
            img[y0:y0 + sh, x0:x0 + sw] = rgb
            # darker rim gives the object an edge structure
            img[y0:y0 + sh, x0:x0 + 1] = np.asarray(rgb) * 0.6
            img[y0:y0 + 1, x0:x0 + sw] = np.asarray(rgb) * 0.6
        else:
            cy, cx = y0 + sh / 2, x0 + sw / 2
            mask = ((yy + 0.5 - cy) / (sh / 2)) ** 2 + ((xx + 0.5 - cx) / (sw / 2)) ** 2 <= 1
            img[mask] = rgb

    box = moving_object_bbox(spec, t)
    if box is not None:
        y0, x0, y1, x1 = box
        rgb = np.asarray(lay.mover[6])
        img[y0:y1, x0:x1] = rgb
        img[y0 + 1:y1 - 1, x0 + 1:x1 - 1] = np.clip(rgb * 1.3 + 0.1, 0, 1)
    return quantize(img)


# --------------------------------------------------------------------------
# weather


def _draw_streaks(h, w, count, rng):
    mask = np.zeros((h, w))
    angle = rng.uniform(-0.35, 0.35)
    dy, dx = np.cos(angle), np.sin(angle)
    for _ in range(count):
        y, x = rng.uniform(-4, h), rng.uniform(0, w)
        length = rng.uniform(3, 9)
        strength = rng.uniform(0.25, 0.6)
        steps = np.arange(0, length, 0.5)
        ys = np.floor(y + steps * dy).astype(int)
        xs = np.floor(x + steps * dx).astype(int)
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        np.maximum.at(mask, (ys[ok], xs[ok]), strength)
    return mask


def _draw_flakes(h, w, count, rng):
    mask = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.7, 1.8)
        opacity = rng.uniform(0.6, 1.0)
        d = np.hypot(yy - cy, xx - cx)
        mask = np.maximum(mask, opacity * np.clip(1.5 - d / r, 0, 1).clip(0, 1))
    return mask


def apply_weather(img: np.ndarray, weather: str, density: float, rng: np.random.Generator) -> np.ndarray:
    """Overlay rain streaks, snow blobs or haze. density=0 is the identity."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density {density} outside [0, 1]")
    if density == 0:
        return img.copy()
    h, w = img.shape[:2]
    if weather == "rain":
        mask = _draw_streaks(h, w, int(round(density * h * w / 10)), rng)
        out = img + mask[..., None]
    elif weather == "snow":
        mask = _draw_flakes(h, w, int(round(density * h * w / 14)), rng)[..., None]
        out = img * (1 - mask) + mask
    elif weather == "fog":
        yy = np.arange(h)[:, None, None] / max(h - 1, 1)
        alpha = 0.6 * density * (1.0 - 0.3 * yy) * rng.uniform(0.9, 1.0)
        out = img * (1 - alpha) + alpha
    else:
        raise ValueError(f"unknown weather {weather!r}")
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# label inconsistencies


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) pixels, replicating edge pixels."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def _relocate_block(img, rng):
    h, w = img.shape[:2]
    bh, bw = max(2, h // 5), max(2, w // 5)
    y0, x0 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
    for _ in range(32):
        y1, x1 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        if abs(y1 - y0) >= bh or abs(x1 - x0) >= bw:
            break
    out = img.copy()
    src = img[y0:y0 + bh, x0:x0 + bw].copy()
    dst = img[y1:y1 + bh, x1:x1 + bw].copy()
    out[y1:y1 + bh, x1:x1 + bw] = src
    out[y0:y0 + bh, x0:x0 + bw] = dst
    return out


def inject_inconsistency(img: np.ndarray, kinds: Iterable[str], rng: np.random.Generator) -> np.ndarray:
    kinds = set(kinds)
    unknown = kinds - set(INCONSISTENCIES)
    if unknown:
        raise ValueError(f"unknown inconsistency kinds {sorted(unknown)}")
    out = img.copy()
    if "object_motion" in kinds:
        out = _relocate_block(out, rng)
    if "spatial_jitter" in kinds:
        while True:
            dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
            if dy or dx:
                break
        out = shift_image(out, dy, dx)
    if "color_shift" in kinds:
        out = out * rng.uniform(0.85, 1.15, size=3)
    if "illumination_shift" in kinds:
        offset = rng.uniform(0.03, 0.1) * rng.choice([-1.0, 1.0])
        out = out + offset
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# windows and datasets


def generate_window(spec: SceneSpec) -> FrameWindow:
    """All frames of the scene, its misaligned label and the aligned oracle."""
    c = spec.center
    frames = [
        quantize(apply_weather(render_clean_scene(spec, t), spec.weather, spec.weather_density,
                               _rng(spec.rng_seed, _WEATHER, t)))
        for t in range(spec.num_frames)
    ]
    oracle = render_clean_scene(spec, c)
    gt = quantize(inject_inconsistency(oracle, spec.inconsistency, _rng(spec.rng_seed, _LABEL)))
    return FrameWindow(frames, gt, oracle, list(range(spec.num_frames)))


def make_specs(num_scenes: int, seed: int, size=(32, 32), num_frames: int = 5,
               weathers: Sequence[str] = WEATHERS, density: float = 0.5,
               inconsistency: Iterable[str] = INCONSISTENCIES, prefix: str = "scene") -> list[SceneSpec]:
    """Scene specs with per-scene seeds spawned from one base seed; weathers cycle."""
    children = np.random.SeedSequence(seed).generate_state(num_scenes, dtype=np.uint64)
    return [
        SceneSpec(
            scene_id=f"{prefix}{i:03d}",
            canvas=tuple(size),
            num_frames=num_frames,
            weather=weathers[i % len(weathers)],
            weather_density=density,
            inconsistency=frozenset(inconsistency),
            rng_seed=int(children[i]),
        )
        for i in range(num_scenes)
    ]


@dataclass
class DatasetManifest:
    root: Path
    specs: list

    @property
    def scene_ids(self) -> list[str]:
        return [s.scene_id for s in self.specs]


def _save_png(img: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
    except OSError as e:
        raise DatasetIOError(path, e) from e


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def generate_dataset(specs: Sequence[SceneSpec], out_dir, multiple: int = 8) -> DatasetManifest:
    """Render every scene and write the dataset layout under out_dir.

    ``multiple`` is the divisor the canvas must respect downstream
    (2**depth * patch size for the default models).
    """
    root = Path(out_dir)
    ids = [s.scene_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SceneSpecError("duplicate scene ids")
    for spec in specs:
        spec.validate(multiple)

    manifest_path = root / "manifest.csv"
    for spec in specs:
        sdir = root / "scenes" / spec.scene_id
        try:
            (sdir / "frames").mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetIOError(sdir, e) from e
        win = generate_window(spec)
        for t, frame in zip(win.timestamps, win.frames):
            _save_png(frame, sdir / "frames" / f"{t:03d}.png")
        _save_png(win.gt_misaligned, sdir / "gt.png")
        _save_png(win.gt_aligned_oracle, sdir / "gt_aligned.png")
        try:
            (sdir / "scene.json").write_text(json.dumps(spec.to_json(), indent=1, sort_keys=True) + "\n")
        except OSError as e:
            raise DatasetIOError(sdir / "scene.json", e) from e
        log.debug("wrote scene %s", spec.scene_id)

    try:
        with open(manifest_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_FIELDS)
            for s in specs:
                writer.writerow([s.scene_id, s.rng_seed, s.weather, "+".join(sorted(s.inconsistency)),
                                 s.num_frames, s.canvas[0], s.canvas[1]])
    except OSError as e:
        raise DatasetIOError(manifest_path, e) from e
    return DatasetManifest(root, list(specs))


@dataclass
class Scene:
    """A scene loaded back from disk; images are float arrays in [0, 1]."""

    spec: SceneSpec
    frames: np.ndarray  # T x H x W x 3
    gt: np.ndarray
    oracle: np.ndarray

    @property
    def scene_id(self) -> str:
        return self.spec.scene_id

    @property
    def weather(self) -> str:
        return self.spec.weather

    def window(self, center: int, n: int) -> FrameWindow:
        if center - n < 0 or center + n >= len(self.frames):
            raise ValueError(f"window of radius {n} at {center} exceeds {len(self.frames)} frames")
        ts = list(range(center - n, center + n + 1))
        return FrameWindow([self.frames[t] for t in ts], self.gt, self.oracle, ts)


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    with open(root / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    scenes = []
    for row in rows:
        sdir = root / "scenes" / row["scene_id"]
        spec = SceneSpec.from_json(json.loads((sdir / "scene.json").read_text()))
        frames = np.stack([load_png(sdir / "frames" / f"{t:03d}.png") for t in range(spec.num_frames)])
        scenes.append(Scene(spec, frames, load_png(sdir / "gt.png"), load_png(sdir / "gt_aligned.png")))
    return scenes
