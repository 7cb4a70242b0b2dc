"""Deterministic synthetic videos with exact flow and identity-linked boxes.

Sprites are anti-aliased textured shapes translating over a static textured
background. Flows follow the warping convention of :mod:`fgfa.flow`: the flow
from frame ``i`` to frame ``j`` is the displacement ``pos_j - pos_i`` of the
topmost sprite covering each pixel of frame ``i`` and zero on background.
Degradations (blur, occlusion, contrast loss, noise) are applied after the
geometry is captured, so flows and boxes stay exact.

Pixel ``x`` covers ``[x, x + 1)``; its centre is ``x + 0.5``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .tensor import read_tensor, write_tensor

SHAPES = ("disc", "square", "bar")
BAR_ASPECT = 0.45
MOTION_WINDOW = 10


@dataclass
class Sprite:
    class_id: int
    shape: str
    size: float
    position: tuple  # centre (x, y) at frame 0
    velocity: tuple = (0.0, 0.0)  # px / frame
    jitter_amplitude: tuple = (0.0, 0.0)
    jitter_period: float = 8.0
    texture_seed: int = 0
    intensity: float = 0.8

    def extent(self) -> tuple[float, float]:
        if self.shape == "bar":
            return self.size, self.size * BAR_ASPECT
        return self.size, self.size

    def center(self, t: int) -> tuple[float, float]:
        phase = 2 * math.pi * t / self.jitter_period
        x = self.position[0] + self.velocity[0] * t + self.jitter_amplitude[0] * math.sin(phase)
        y = self.position[1] + self.velocity[1] * t + self.jitter_amplitude[1] * math.sin(phase)
        return x, y

    def box(self, t: int) -> tuple[float, float, float, float]:
        cx, cy = self.center(t)
        w, h = self.extent()
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class Degradation:
    defocus_sigma: float = 0.0
    motion_blur_length: float = 0.0
    motion_blur_angle: float = 0.0  # radians
    occlusions: list = field(default_factory=list)  # [x1, y1, x2, y2, value]
    contrast: float = 1.0
    noise_std: float = 0.0

    def is_identity(self) -> bool:
        return (
            self.defocus_sigma == 0 and self.motion_blur_length == 0 and not self.occlusions
            and self.contrast == 1.0 and self.noise_std == 0
        )


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 20
    sprites: list = field(default_factory=list)
    degradations: dict = field(default_factory=dict)  # frame index -> Degradation
    background_level: float = 0.3
    background_texture: float = 0.05
    seed: int = 0

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["degradations"] = {str(k): v for k, v in d["degradations"].items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        sprites = [Sprite(**{**s, "position": tuple(s["position"]), "velocity": tuple(s.get("velocity", (0, 0))),
                             "jitter_amplitude": tuple(s.get("jitter_amplitude", (0, 0)))}) for s in d.pop("sprites", [])]
        degr = {int(k): Degradation(**v) for k, v in d.pop("degradations", {}).items()}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}", key=sorted(unknown)[0])
        return cls(sprites=sprites, degradations=degr, **d)


@dataclass
class GroundTruthTrack:
    track_id: int
    class_id: int
    boxes: list  # per frame [x1, y1, x2, y2] clipped to the canvas, or None
    present: list  # per frame bool

    def frames(self) -> list[int]:
        return [t for t, p in enumerate(self.present) if p]

    def to_json(self) -> dict:
        return {"track_id": self.track_id, "class_id": self.class_id, "boxes": self.boxes, "present": self.present}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthTrack":
        boxes = [None if b is None else tuple(float(v) for v in b) for b in d["boxes"]]
        return cls(int(d["track_id"]), int(d["class_id"]), boxes, [bool(p) for p in d["present"]])


@dataclass
class GeneratedVideo:
    frames: list  # degraded [1,H,W]
    clean_frames: list
    flows: dict  # (t, t+1) and (t+1, t) -> [2,H,W]
    tracks: list
    spec: SceneSpec


# --- rendering ------------------------------------------------------------------


def _grid(spec):
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    return xs + 0.5, ys + 0.5


def _coverage(sprite: Sprite, t: int, xs, ys):
    cx, cy = sprite.center(t)
    dx, dy = xs - cx, ys - cy
    if sprite.shape == "disc":
        r = sprite.size / 2
        return np.clip(r - np.hypot(dx, dy) + 0.5, 0.0, 1.0), dx, dy
    w, h = sprite.extent()
    ax = np.clip(w / 2 - np.abs(dx) + 0.5, 0.0, 1.0)
    ay = np.clip(h / 2 - np.abs(dy) + 0.5, 0.0, 1.0)
    return ax * ay, dx, dy


def _texture(sprite: Sprite, dx, dy):
    rng = np.random.default_rng(sprite.texture_seed)
    fx, fy = rng.uniform(0.08, 0.2, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    return sprite.intensity + 0.12 * np.sin(2 * math.pi * (fx * dx + fy * dy) + phase)


def _background(spec: SceneSpec):
    rng = np.random.default_rng([spec.seed, 7919])
    noise = rng.normal(0.0, 1.0, size=(spec.height, spec.width))
    smooth = ndimage.gaussian_filter(noise, 2.0, mode="wrap")
    smooth /= max(smooth.std(), 1e-12)
    return spec.background_level + spec.background_texture * smooth


def render(spec: SceneSpec, t: int) -> np.ndarray:
    """Clean frame ``t`` as ``[1, H, W]``."""
    xs, ys = _grid(spec)
    img = _background(spec)
    for sprite in spec.sprites:
        alpha, dx, dy = _coverage(sprite, t, xs, ys)
        img = img * (1 - alpha) + alpha * _texture(sprite, dx, dy)
    return img[None]


def pair_flow(spec: SceneSpec, i: int, j: int) -> np.ndarray:
    """Exact flow from frame ``i`` to frame ``j`` (sampled on frame ``i``)."""
    xs, ys = _grid(spec)
    flow = np.zeros((2, spec.height, spec.width))
    for sprite in spec.sprites:  # later sprites are drawn on top
        alpha, _, _ = _coverage(sprite, i, xs, ys)
        on = alpha >= 0.5
        ci, cj = sprite.center(i), sprite.center(j)
        flow[0][on] = cj[0] - ci[0]
        flow[1][on] = cj[1] - ci[1]
    return flow


def _line_kernel(length: float, angle: float) -> np.ndarray:
    r = int(math.ceil(length / 2)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    n = max(int(math.ceil(length * 4)), 2)
    for s in np.linspace(-length / 2, length / 2, n):
        x = r + s * math.cos(angle)
        y = r + s * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        ax, ay = x - x0, y - y0
        k[y0, x0] += (1 - ax) * (1 - ay)
        k[y0, x0 + 1] += ax * (1 - ay)
        k[y0 + 1, x0] += (1 - ax) * ay
        k[y0 + 1, x0 + 1] += ax * ay
    return k / k.sum()


def gaussian_blur(img2d, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(img2d, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(img2d, dtype=np.float64), sigma, mode="nearest", truncate=4.0)


def motion_blur(img2d, length: float, angle: float) -> np.ndarray:
    if length < 0:
        raise ConfigError(f"motion blur length must be >= 0, got {length}")
    if length == 0:
        return np.array(img2d, dtype=np.float64)
    return ndimage.convolve(np.asarray(img2d, dtype=np.float64), _line_kernel(length, angle), mode="nearest")


def degrade(frame, entry: Degradation | None, rng=None) -> np.ndarray:
    """Apply one schedule entry to ``frame [C,H,W]``; identity for an empty entry."""
    frame = np.asarray(frame, dtype=np.float64)
    if entry is None or entry.is_identity():
        return frame.copy()
    if entry.defocus_sigma < 0 or entry.motion_blur_length < 0 or entry.noise_std < 0:
        raise ConfigError("degradation sigma/length/noise must be >= 0")
    out = []
    for ch in frame:
        img = gaussian_blur(ch, entry.defocus_sigma)
        img = motion_blur(img, entry.motion_blur_length, entry.motion_blur_angle)
        h, w = img.shape
        for x1, y1, x2, y2, value in entry.occlusions:
            xa, xb = max(int(round(x1)), 0), min(int(round(x2)), w)
            ya, yb = max(int(round(y1)), 0), min(int(round(y2)), h)
            img[ya:yb, xa:xb] = value
        if entry.contrast != 1.0:
            m = img.mean()
            img = m + entry.contrast * (img - m)
        if entry.noise_std > 0:
            rng = np.random.default_rng(0) if rng is None else rng
            img = img + rng.normal(0.0, entry.noise_std, size=img.shape)
        out.append(img)
    return np.stack(out)


def clip_box(box, w, h):
    x1, y1, x2, y2 = box
    c = (min(max(x1, 0.0), w), min(max(y1, 0.0), h), min(max(x2, 0.0), w), min(max(y2, 0.0), h))
    return c if (c[2] - c[0]) > 0 and (c[3] - c[1]) > 0 else None


def validate_spec(spec: SceneSpec) -> None:
    if spec.num_frames < 1:
        raise ConfigError("scene needs at least one frame", key="num_frames")
    for k, sprite in enumerate(spec.sprites):
        if sprite.shape not in SHAPES:
            raise ConfigError(f"sprite {k}: unknown shape '{sprite.shape}'", key="sprites")
        w, h = sprite.extent()
        if w > spec.width or h > spec.height:
            raise ConfigError(f"sprite {k} ({w}x{h}) is larger than the canvas", key="sprites")
        on = sum(clip_box(sprite.box(t), spec.width, spec.height) is not None for t in range(spec.num_frames))
        if on < 0.8 * spec.num_frames:
            raise ConfigError(f"sprite {k} is on canvas for only {on}/{spec.num_frames} frames", key="sprites")


def tracks_for(spec: SceneSpec) -> list[GroundTruthTrack]:
    tracks = []
    for k, sprite in enumerate(spec.sprites):
        boxes = [clip_box(sprite.box(t), spec.width, spec.height) for t in range(spec.num_frames)]
        tracks.append(GroundTruthTrack(k, sprite.class_id, boxes, [b is not None for b in boxes]))
    return tracks


def generate(spec: SceneSpec) -> GeneratedVideo:
    validate_spec(spec)
    clean = [render(spec, t) for t in range(spec.num_frames)]
    frames = []
    for t, f in enumerate(clean):
        rng = np.random.default_rng([spec.seed, t])
        frames.append(degrade(f, spec.degradations.get(t), rng))
    flows = {}
    for t in range(spec.num_frames - 1):
        flows[(t, t + 1)] = pair_flow(spec, t, t + 1)
        flows[(t + 1, t)] = pair_flow(spec, t + 1, t)
    return GeneratedVideo(frames, clean, flows, tracks_for(spec), spec)


# --- dataset directory ------------------------------------------------------------


def save_dataset(video: GeneratedVideo, out_dir) -> Path:
    """``frames/NNNN.fgt``, ``flows/NNNN_NNNN.fgt``, ``tracks.json``, ``spec.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(video.frames):
        write_tensor(out / "frames" / f"{t:04d}.fgt", f)
    for (i, j), fl in sorted(video.flows.items()):
        write_tensor(out / "flows" / f"{i:04d}_{j:04d}.fgt", fl)
    (out / "tracks.json").write_text(json.dumps([tr.to_json() for tr in video.tracks], indent=1) + "\n")
    (out / "spec.json").write_text(json.dumps(video.spec.to_json(), indent=1, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    """A clip loaded from disk (frames as float64 arrays)."""

    frames: list
    tracks: list
    spec: SceneSpec
    root: Path | None = None

    def adjacent_flow(self, i: int, j: int) -> np.ndarray:
        if abs(i - j) != 1:
            raise ConfigError(f"only adjacent flows are stored, asked for {i}->{j}")
        return read_tensor(self.root / "flows" / f"{i:04d}_{j:04d}.fgt").astype(np.float64)

    def pair_flow(self, i: int, j: int) -> np.ndarray:
        return pair_flow(self.spec, i, j)


def load_dataset(root) -> Dataset:
    root = Path(root)
    spec = SceneSpec.from_json(json.loads((root / "spec.json").read_text()))
    frames = [read_tensor(root / "frames" / f"{t:04d}.fgt").astype(np.float64) for t in range(spec.num_frames)]
    tracks = [GroundTruthTrack.from_json(d) for d in json.loads((root / "tracks.json").read_text())]
    return Dataset(frames, tracks, spec, root)


def dataset_from_video(video: GeneratedVideo) -> Dataset:
    """In-memory dataset; adjacent flows come from the generated dict."""
    ds = Dataset(video.frames, video.tracks, video.spec, None)
    ds.adjacent_flow = lambda i, j: video.flows[(i, j)]  # type: ignore[method-assign]
    return ds


# --- scene families for benchmarks ------------------------------------------------


def box_iou_shift(w: float, h: float, dx: float, dy: float) -> float:
    """IoU between a ``w x h`` box and the same box shifted by ``(dx, dy)``."""
    iw, ih = max(w - abs(dx), 0.0), max(h - abs(dy), 0.0)
    inter = iw * ih
    return inter / (2 * w * h - inter)


def motion_iou_bounds(w, h, v, num_frames, window=MOTION_WINDOW):
    """Min and max per-frame motion IoU of a box translating at ``v`` px/frame."""
    vals = []
    for t in range(num_frames):
        ds = [d for d in range(-window, window + 1) if d != 0 and 0 <= t + d < num_frames]
        if not ds:
            vals.append(1.0)
            continue
        vals.append(sum(box_iou_shift(w, h, v[0] * d, v[1] * d) for d in ds) / len(ds))
    return min(vals), max(vals)


SPEED_BINS = {"slow": (0.9, 1.0), "medium": (0.7, 0.9), "fast": (0.0, 0.7)}


def speed_for_group(group, w, h, num_frames, direction=(1.0, 0.0), margin=0.02, rng=None):
    """Pick a speed along ``direction`` so every frame's motion IoU lands in ``group``.

    Motion IoU decreases monotonically with speed, so each bin maps to a speed
    interval; its ends are found by bisection and a speed is drawn inside it.
    """
    norm = math.hypot(*direction)
    d = (direction[0] / norm, direction[1] / norm)

    def bounds(s):
        return motion_iou_bounds(w, h, (s * d[0], s * d[1]), num_frames)

    def first_speed(pred, a=0.0, b=None):
        # smallest speed where pred flips from False to True
        b = max(w, h) if b is None else b
        for _ in range(50):
            m = (a + b) / 2
            if pred(m):
                b = m
            else:
                a = m
        return b

    slow_min, fast_max = SPEED_BINS["slow"][0], SPEED_BINS["medium"][0]
    if group == "slow":
        lo, hi = 0.0, first_speed(lambda s: bounds(s)[0] <= slow_min + margin)
        lo, hi = 0.2 * hi, 0.8 * hi
    elif group == "medium":
        lo = first_speed(lambda s: bounds(s)[1] < slow_min - margin)
        hi = first_speed(lambda s: bounds(s)[0] <= fast_max + margin)
        if hi <= lo:
            raise ConfigError(f"no speed gives medium motion for a {w:.1f}x{h:.1f} box over {num_frames} frames")
        lo, hi = lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo)
    elif group == "fast":
        lo = first_speed(lambda s: bounds(s)[1] < fast_max - margin)
        lo, hi = 1.3 * lo, 2.0 * lo
    else:
        raise ConfigError(f"unknown motion group '{group}'")
    rng = np.random.default_rng(0) if rng is None else rng
    return float(rng.uniform(lo, hi))


def make_scene(group: str, seed: int, *, height=64, width=64, num_frames=20, num_sprites=2,
               degrade_prob=0.35, num_classes=3, size_range=(12.0, 16.0)) -> SceneSpec:
    """A clip whose sprites all fall in one motion group, with random degradations."""
    if group not in SPEED_BINS:
        raise ConfigError(f"unknown motion group '{group}'")
    rng = np.random.default_rng([seed, 1])
    band_h = height / num_sprites
    sprites = []
    for k in range(num_sprites):
        cls = int(rng.integers(num_classes))
        shape = SHAPES[cls % len(SHAPES)]
        size = float(rng.uniform(*size_range))
        w, h = (size, size * BAR_ASPECT) if shape == "bar" else (size, size)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        slope = float(rng.uniform(-0.15, 0.15))
        speed = speed_for_group(group, w, h, num_frames, direction=(1.0, slope), rng=rng)
        norm = math.hypot(1.0, slope)
        vx, vy = sign * speed / norm, sign * speed * slope / norm
        travel_x, travel_y = vx * (num_frames - 1), vy * (num_frames - 1)
        margin = 1.0
        x_lo = margin + w / 2 - min(travel_x, 0.0)
        x_hi = width - margin - w / 2 - max(travel_x, 0.0)
        if x_hi < x_lo:
            raise ConfigError(f"canvas too small for a '{group}' sprite moving {travel_x:.1f}px")
        y_c = band_h * (k + 0.5)
        y_lo = max(margin + h / 2 - min(travel_y, 0.0), y_c - band_h / 4)
        y_hi = min(height - margin - h / 2 - max(travel_y, 0.0), y_c + band_h / 4)
        sprites.append(
            Sprite(
                class_id=cls, shape=shape, size=size,
                position=(float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, max(y_lo, y_hi)))),
                velocity=(vx, vy), texture_seed=int(rng.integers(1 << 30)),
                intensity=float(rng.uniform(0.7, 0.95)),
            )
        )
    spec = SceneSpec(height=height, width=width, num_frames=num_frames, sprites=sprites, seed=seed)
    spec.degradations = random_degradations(spec, degrade_prob, rng)
    return spec


def random_degradations(spec: SceneSpec, prob: float, rng) -> dict:
    """Per-frame degradations: defocus, motion blur, occluders over sprites, contrast loss."""
    out = {}
    for t in range(spec.num_frames):
        if rng.random() >= prob:
            continue
        kind = int(rng.integers(4))
        entry = Degradation(noise_std=0.02)
        if kind == 0:
            entry.defocus_sigma = float(rng.uniform(2.0, 3.0))
        elif kind == 1:
            entry.motion_blur_length = float(rng.uniform(7.0, 11.0))
            entry.motion_blur_angle = float(rng.uniform(0, math.pi))
        elif kind == 2:
            for sprite in spec.sprites:
                x1, y1, x2, y2 = sprite.box(t)
                pad = 2.0
                entry.occlusions.append([x1 - pad, y1 - pad, x2 + pad, y2 + pad, spec.background_level])
        else:
            entry.contrast = float(rng.uniform(0.15, 0.3))
            entry.defocus_sigma = 1.0
        out[t] = entry
    return out
