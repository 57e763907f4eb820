"""Deterministic generator of angiography-like key frames.

Each frame shows one dark, curved vessel on a speckled background with a
single narrowing (the major stenosis). The narrowing's residual-width ratio
drives latent FFR/iFR values; the class label follows the clinical threshold
rule: positive iff a measured FFR is below 0.80 or a measured iFR is below
0.89. Per-node profiles shift class balance, gray levels, contrast, box
position and vessel sinuosity to create non-IID federations.

All randomness flows through counter-based Philox streams keyed by
(seed, domain, node, sample), so datasets are pure functions of the seed and
samples can be generated in any order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .matching import GroundTruth

__all__ = ["NodeProfile", "KeyFrameSample", "AugmentPolicy", "FederationData",
           "default_profiles", "render_keyframe", "make_federation_data",
           "augment", "identity_policy", "label_from_measurements",
           "flip_horizontal", "flip_vertical", "rotate90", "resize_short",
           "pad_to_canvas", "encode_dataset", "decode_dataset",
           "save_dataset", "load_dataset", "stream"]

FFR_THRESHOLD = 0.80
IFR_THRESHOLD = 0.89

# measurement-availability rates: FFR only / iFR only / both
MEASURE_SPLIT = (0.334, 0.388, 0.278)

_DOMAIN_NODE = 1
_DOMAIN_TEST = 2

MAGIC = b"FKEY"
FORMAT_VERSION = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based RNG stream, a pure function of (seed, key)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key)))


@dataclass(frozen=True)
class NodeProfile:
    """Knobs describing one hospital node's data distribution."""

    node_id: int
    positive_rate: float = 0.405
    intensity_bias: float = 0.0
    contrast_scale: float = 1.0
    position_bias: tuple = (0.5, 0.5)
    curvature_style: float = 0.5
    size_range: tuple = (0.12, 0.20)

    def __post_init__(self):
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ConfigError(f"positive_rate {self.positive_rate} outside [0,1]")
        if self.contrast_scale <= 0.0:
            raise ConfigError(f"contrast_scale {self.contrast_scale} must be > 0")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi <= 0.5:
            raise ConfigError(f"size_range {self.size_range} outside (0, 0.5]")


def default_profiles() -> list:
    """Five hospital profiles with strong distribution shift; the class
    priors average to the pooled positive rate 0.405."""
    rates = (0.10, 0.25, 0.405, 0.55, 0.72)
    biases = (-0.08, -0.04, 0.0, 0.04, 0.08)
    contrasts = (0.85, 1.10, 1.00, 0.90, 1.15)
    positions = ((0.35, 0.35), (0.62, 0.40), (0.50, 0.50), (0.40, 0.62), (0.60, 0.60))
    curvatures = (0.20, 0.50, 0.80, 0.35, 0.65)
    return [NodeProfile(node_id=i, positive_rate=rates[i], intensity_bias=biases[i],
                        contrast_scale=contrasts[i], position_bias=positions[i],
                        curvature_style=curvatures[i])
            for i in range(5)]


@dataclass(frozen=True)
class KeyFrameSample:
    """One key frame: image, single-object ground truth, latent physiology."""

    image: np.ndarray          # [1,H,W] grays in [0,1]
    gt: GroundTruth            # exactly one box/label
    ffr: float
    ifr: float
    ffr_measured: bool
    ifr_measured: bool

    def __post_init__(self):
        if not (self.ffr_measured or self.ifr_measured):
            raise ContractError("at least one of FFR/iFR must be measured")
        if len(self.gt) != 1:
            raise ContractError(f"key frame needs exactly one object, got {len(self.gt)}")

    @property
    def label(self) -> int:
        return int(self.gt.labels[0])


def label_from_measurements(ffr, ifr, ffr_measured, ifr_measured) -> int:
    """The threshold disjunction that defines the severity class."""
    positive = (ffr_measured and ffr < FFR_THRESHOLD) or \
               (ifr_measured and ifr < IFR_THRESHOLD)
    return 1 if positive else 0


def _draw_on_side(rng, base, below, threshold, sigma, tries=64):
    """base + noise, constrained to the requested side of the threshold."""
    for _ in range(tries):
        value = base + rng.normal(0.0, sigma)
        if 0.0 <= value <= 1.0 and (value < threshold) == below:
            return float(value)
    return float(min(max(base, 0.0), 1.0))


def render_keyframe(rng: np.random.Generator, profile: NodeProfile,
                    size: int) -> KeyFrameSample:
    """Render one key frame under the node profile. Deterministic in rng state."""
    if size < 32:
        raise ConfigError(f"frame size must be >= 32, got {size}")

    positive = rng.random() < profile.positive_rate
    u = rng.random()
    if u < MEASURE_SPLIT[0]:
        ffr_m, ifr_m = True, False
    elif u < MEASURE_SPLIT[0] + MEASURE_SPLIT[1]:
        ffr_m, ifr_m = False, True
    else:
        ffr_m, ifr_m = True, True

    # residual-width ratio: severe narrowings keep little of the lumen
    r = rng.uniform(0.10, 0.50) if positive else rng.uniform(0.70, 0.95)
    ffr = _draw_on_side(rng, 0.55 + 0.42 * r, positive, FFR_THRESHOLD, 0.02)
    ifr = _draw_on_side(rng, IFR_THRESHOLD + 0.75 * (ffr - FFR_THRESHOLD),
                        positive, IFR_THRESHOLD, 0.015)

    # vessel geometry
    extent = size * rng.uniform(*profile.size_range)      # stenosis box scale
    sigma_s = extent / 2.4
    w0 = max(0.55 * extent, 3.0)
    cx = np.clip(profile.position_bias[0] + rng.normal(0.0, 0.08), 0.2, 0.8) * size
    cy = np.clip(profile.position_bias[1] + rng.normal(0.0, 0.08), 0.2, 0.8) * size
    theta = rng.uniform(0.0, np.pi)
    direction = np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-direction[1], direction[0]])
    amp = profile.curvature_style * 0.12 * size
    wavenum = (0.5 + profile.curvature_style) * 2.0 * np.pi / size
    phase = rng.uniform(0.0, 2.0 * np.pi)

    ts = np.linspace(-0.75 * size, 0.75 * size, 97)
    sway = amp * (np.sin(wavenum * ts + phase) - np.sin(phase))
    pts = np.array([cx, cy]) + ts[:, None] * direction + sway[:, None] * normal

    wiggle_phase = rng.uniform(0.0, 2.0 * np.pi)
    widths = w0 * (1.0 + 0.22 * np.sin(2.0 * np.pi * ts / (0.8 * size) + wiggle_phase))
    narrowing = 1.0 - (1.0 - r) * np.exp(-ts ** 2 / (2.0 * sigma_s ** 2))
    radius = 0.5 * widths * narrowing

    # rasterize only near the tube's bounding box
    pad = widths.max()
    x_lo = max(int(np.floor(pts[:, 0].min() - pad)), 0)
    x_hi = min(int(np.ceil(pts[:, 0].max() + pad)) + 1, size)
    y_lo = max(int(np.floor(pts[:, 1].min() - pad)), 0)
    y_hi = min(int(np.ceil(pts[:, 1].max() + pad)) + 1, size)
    img = np.full((size, size), 0.78)
    if x_hi > x_lo and y_hi > y_lo:
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)
        d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        coverage = np.clip(radius[None, :] - np.sqrt(d2) + 0.5, 0.0, 1.0).max(axis=1)
        img[y_lo:y_hi, x_lo:x_hi] -= 0.52 * coverage.reshape(y_hi - y_lo, x_hi - x_lo)

    img += rng.normal(0.0, 0.025, (size, size))
    img = 0.5 + (img - 0.5) * profile.contrast_scale + profile.intensity_bias
    img = np.clip(img, 0.0, 1.0)

    # box: tube extent where the narrowing is at least half-effective
    sten = np.abs(ts) <= 1.2 * sigma_s
    px, py = pts[sten, 0], pts[sten, 1]
    pr = radius[sten]
    x1 = max(float((px - pr).min()) - 1.0, 0.0)
    x2 = min(float((px + pr).max()) + 1.0, float(size))
    y1 = max(float((py - pr).min()) - 1.0, 0.0)
    y2 = min(float((py + pr).max()) + 1.0, float(size))
    box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]) / size

    gt = GroundTruth(boxes=[box], labels=[label_from_measurements(ffr, ifr, ffr_m, ifr_m)])
    return KeyFrameSample(image=img[None, :, :], gt=gt, ffr=ffr, ifr=ifr,
                          ffr_measured=ffr_m, ifr_measured=ifr_m)


@dataclass(frozen=True)
class FederationData:
    """Per-node private datasets plus the shared global test set."""

    nodes: tuple      # tuple of tuples of KeyFrameSample
    test: tuple

    def pooled(self) -> tuple:
        return tuple(s for node in self.nodes for s in node)


def make_federation_data(seed: int, profiles, per_node: int, test_size: int,
                         size: int = 64) -> FederationData:
    """Draw each node's dataset under its profile and a mixed global test set.

    Sample j of node i uses the stream (seed, NODE, i, j); test sample j uses
    (seed, TEST, 0, j) and cycles uniformly through the profiles, so no
    stream is ever shared between sets.
    """
    if not profiles:
        raise ConfigError("at least one node profile is required")
    if per_node < 1 or test_size < 1:
        raise ConfigError("per_node and test_size must be >= 1")
    nodes = tuple(
        tuple(render_keyframe(stream(seed, _DOMAIN_NODE, i, j), profile, size)
              for j in range(per_node))
        for i, profile in enumerate(profiles)
    )
    test = tuple(
        render_keyframe(stream(seed, _DOMAIN_TEST, 0, j),
                        profiles[j % len(profiles)], size)
        for j in range(test_size)
    )
    return FederationData(nodes=nodes, test=test)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    """Train-time transform policy.

    ``short``/``long_max`` control the resize (shortest side to ``short``,
    longest capped); ``canvas`` > 0 zero-pads to a square canvas with the
    padding split randomly per axis, shifting the detection area. Paper-parity
    resize constants (512/1333) fit the same fields.
    """

    flip: bool = True
    rot90: bool = True
    short: int = 56
    long_max: int = 160
    canvas: int = 64


def identity_policy(size: int) -> AugmentPolicy:
    return AugmentPolicy(flip=False, rot90=False, short=size,
                         long_max=max(size, 160), canvas=0)


def _with_box(sample: KeyFrameSample, image: np.ndarray, box: np.ndarray) -> KeyFrameSample:
    gt = GroundTruth(boxes=[box], labels=[sample.gt.labels[0]])
    return replace(sample, image=np.ascontiguousarray(image), gt=gt)


def flip_horizontal(sample: KeyFrameSample) -> KeyFrameSample:
    cx, cy, w, h = sample.gt.boxes[0]
    return _with_box(sample, sample.image[:, :, ::-1], np.array([1.0 - cx, cy, w, h]))


def flip_vertical(sample: KeyFrameSample) -> KeyFrameSample:
    cx, cy, w, h = sample.gt.boxes[0]
    return _with_box(sample, sample.image[:, ::-1, :], np.array([cx, 1.0 - cy, w, h]))


def rotate90(sample: KeyFrameSample, k: int) -> KeyFrameSample:
    """k counterclockwise quarter turns (numpy rot90 convention on H,W)."""
    image = sample.image
    box = sample.gt.boxes[0].copy()
    for _ in range(k % 4):
        image = np.rot90(image, 1, axes=(1, 2))
        cx, cy, w, h = box
        box = np.array([cy, 1.0 - cx, h, w])
    return _with_box(sample, image, box)


def _resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    if (out_h, out_w) == (h, w):
        return plane.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
    bot = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_short(sample: KeyFrameSample, short: int, long_max: int) -> KeyFrameSample:
    """Scale so the shortest side is ``short`` (longest capped at ``long_max``).

    The scale is uniform, so normalized box coordinates are unchanged.
    """
    _, h, w = sample.image.shape
    scale = short / min(h, w)
    if max(h, w) * scale > long_max:
        scale = long_max / max(h, w)
    out_h = max(int(round(h * scale)), 1)
    out_w = max(int(round(w * scale)), 1)
    image = _resize_bilinear(sample.image[0], out_h, out_w)[None, :, :]
    return _with_box(sample, image, sample.gt.boxes[0].copy())


def pad_to_canvas(sample: KeyFrameSample, canvas: int, top: int, left: int) -> KeyFrameSample:
    """Zero-pad onto a square canvas with the given top/left offsets."""
    _, h, w = sample.image.shape
    if h + top > canvas or w + left > canvas or top < 0 or left < 0:
        raise ContractError(
            f"cannot place {h}x{w} frame at ({top},{left}) on canvas {canvas}")
    image = np.zeros((1, canvas, canvas))
    image[0, top:top + h, left:left + w] = sample.image[0]
    cx, cy, bw, bh = sample.gt.boxes[0]
    box = np.array([(cx * w + left) / canvas, (cy * h + top) / canvas,
                    bw * w / canvas, bh * h / canvas])
    return _with_box(sample, image, box)


def augment(sample: KeyFrameSample, rng: np.random.Generator,
            policy: AugmentPolicy) -> KeyFrameSample:
    """Random flips and quarter turns, then resize, then padded placement.

    Labels and latent physiology are untouched; the box tracks every
    transform and stays normalized to the final canvas.
    """
    out = sample
    if policy.flip:
        if rng.random() < 0.5:
            out = flip_horizontal(out)
        if rng.random() < 0.5:
            out = flip_vertical(out)
    if policy.rot90:
        out = rotate90(out, int(rng.integers(0, 4)))
    _, h, w = out.image.shape
    if policy.short != min(h, w) or max(h, w) > policy.long_max:
        out = resize_short(out, policy.short, policy.long_max)
    if policy.canvas:
        _, h, w = out.image.shape
        top = int(rng.integers(0, policy.canvas - h + 1))
        left = int(rng.integers(0, policy.canvas - w + 1))
        out = pad_to_canvas(out, policy.canvas, top, left)
    return out


# ---------------------------------------------------------------------------
# dataset container ("FKEY")

def _encode_sample(s: KeyFrameSample) -> bytes:
    c, h, w = s.image.shape
    mask = (1 if s.ffr_measured else 0) | (2 if s.ifr_measured else 0)
    parts = [struct.pack("<III", c, h, w),
             np.ascontiguousarray(s.image, dtype="<f8").tobytes(),
             np.ascontiguousarray(s.gt.boxes[0], dtype="<f8").tobytes(),
             struct.pack("<B", int(s.gt.labels[0])),
             struct.pack("<dd", s.ffr, s.ifr),
             struct.pack("<B", mask)]
    return b"".join(parts)


def encode_dataset(samples) -> bytes:
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(samples))]
    out.extend(_encode_sample(s) for s in samples)
    return b"".join(out)


def decode_dataset(blob: bytes) -> tuple:
    if blob[:4] != MAGIC:
        raise DataError(f"bad dataset magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    off = 10
    samples = []
    for _ in range(count):
        c, h, w = struct.unpack_from("<III", blob, off)
        off += 12
        n = c * h * w
        image = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(c, h, w)
        off += 8 * n
        box = np.frombuffer(blob, dtype="<f8", count=4, offset=off).copy()
        off += 32
        (label,) = struct.unpack_from("<B", blob, off)
        off += 1
        ffr, ifr = struct.unpack_from("<dd", blob, off)
        off += 16
        (mask,) = struct.unpack_from("<B", blob, off)
        off += 1
        samples.append(KeyFrameSample(
            image=image.astype(np.float64), gt=GroundTruth(boxes=[box], labels=[label]),
            ffr=ffr, ifr=ifr, ffr_measured=bool(mask & 1), ifr_measured=bool(mask & 2)))
    if off != len(blob):
        raise DataError(f"{len(blob) - off} trailing bytes in dataset")
    return tuple(samples)


def save_dataset(path, samples) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(samples))


def load_dataset(path) -> tuple:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
