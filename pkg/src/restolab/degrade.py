"""Random-order synthetic degradation pipeline.

Five degradation families (blur, noise, jpeg, motion, rain) are composed
into recipes of 1..max_depth steps, each step drawn with fully resolved
numeric parameters. Everything randomized at apply time (noise fields,
motion trajectories, rain streak positions) comes from the recipe's own
seed, so a stored recipe replays to the byte.

Images are numpy float32 arrays shaped [3, H, W] with values in [0, 1];
every step clips back into that range before the next one runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

KINDS = ("blur", "noise", "jpeg", "motion", "rain")

BLUR_FAMILIES = ("gaussian", "generalized", "plateau")
NOISE_FAMILIES = ("gaussian", "poisson")

# default sampling ranges; overridable per kind through SamplerConfig
DEFAULT_RANGES = {
    "blur": {"kernel_size": (7, 21), "sigma": (0.2, 3.0),
             "shape_generalized": (0.5, 4.0), "shape_plateau": (1.0, 2.0)},
    "noise": {"sigma": (1.0, 30.0), "scale": (0.05, 3.0)},
    "jpeg": {"quality": (30, 95)},
    "motion": {"kernel_size": (5, 31)},
    "rain": {"count": (10, 1000), "length": (10.0, 90.0),
             "alpha": (0.3, 1.3), "angle_deg": (-80.0, 80.0)},
}


@dataclass(frozen=True)
class DegradationStep:
    """One degradation with resolved parameters; see validate_step."""
    kind: str
    params: Mapping[str, object]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @staticmethod
    def from_dict(d: Mapping) -> "DegradationStep":
        step = DegradationStep(kind=str(d["kind"]), params=dict(d["params"]))
        validate_step(step)
        return step


@dataclass(frozen=True)
class DegradationRecipe:
    """An ordered sequence of steps plus the seed for apply-time draws."""
    steps: tuple[DegradationStep, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "steps": [s.to_dict() for s in self.steps]}

    @staticmethod
    def from_dict(d: Mapping) -> "DegradationRecipe":
        steps = tuple(DegradationStep.from_dict(s) for s in d["steps"])
        if not steps:
            raise ValueError("recipe must contain at least one step")
        return DegradationRecipe(steps=steps, seed=int(d["seed"]))


@dataclass(frozen=True)
class SamplerConfig:
    """Controls recipe sampling: depth, allowed kinds, range overrides.

    overrides maps kind -> param -> either a fixed value or a [lo, hi]
    pair replacing the default range. This is how held-out tasks pin a
    narrow band (e.g. noise restricted to one family and sigma window).
    """
    max_depth: int = 6
    kinds: tuple[str, ...] = KINDS
    overrides: Mapping[str, Mapping[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown degradation kinds: {bad}")
        if not self.kinds:
            raise ValueError("at least one kind required")
        for k in self.overrides:
            if k not in KINDS:
                raise ValueError(f"override for unknown kind {k!r}")


# ---------------------------------------------------------------------------
# validation


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got shape {img.shape}")
    if img.dtype not in (np.float32, np.float64):
        raise ValueError(f"image must be float32/float64, got {img.dtype}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < -1e-5 or img.max() > 1.0 + 1e-5:
        raise ValueError("image values must lie in [0, 1]")
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def _req(params: Mapping, key: str, kind: str):
    if key not in params:
        raise ValueError(f"{kind} step missing parameter {key!r}")
    return params[key]


def validate_step(step: DegradationStep) -> None:
    """Raise ValueError unless `step` carries a complete, sane parameter set."""
    p = step.params
    if step.kind == "blur":
        fam = p.get("family")
        if fam not in BLUR_FAMILIES:
            raise ValueError(f"blur family must be one of {BLUR_FAMILIES}, got {fam!r}")
        k = int(_req(p, "kernel_size", "blur"))
        if k < 3 or k % 2 == 0:
            raise ValueError(f"blur kernel_size must be odd and >= 3, got {k}")
        if float(_req(p, "sigma", "blur")) <= 0:
            raise ValueError("blur sigma must be positive")
        if fam != "gaussian" and float(p.get("shape", 0)) <= 0:
            raise ValueError(f"{fam} blur needs positive shape parameter")
    elif step.kind == "noise":
        fam = p.get("family")
        if fam == "gaussian":
            if float(_req(p, "sigma", "noise")) <= 0:
                raise ValueError("noise sigma must be positive")
        elif fam == "poisson":
            if float(_req(p, "scale", "noise")) <= 0:
                raise ValueError("noise scale must be positive")
        else:
            raise ValueError(f"noise family must be one of {NOISE_FAMILIES}, got {fam!r}")
    elif step.kind == "jpeg":
        q = int(_req(p, "quality", "jpeg"))
        if not 1 <= q <= 100:
            raise ValueError(f"jpeg quality must be in [1, 100], got {q}")
    elif step.kind == "motion":
        k = int(_req(p, "kernel_size", "motion"))
        if k < 3 or k % 2 == 0:
            raise ValueError(f"motion kernel_size must be odd and >= 3, got {k}")
    elif step.kind == "rain":
        if int(_req(p, "count", "rain")) < 1:
            raise ValueError("rain count must be >= 1")
        if float(_req(p, "length", "rain")) <= 0:
            raise ValueError("rain length must be positive")
        if float(_req(p, "alpha", "rain")) < 0:
            raise ValueError("rain alpha must be >= 0")
        if abs(float(_req(p, "angle_deg", "rain"))) > 90:
            raise ValueError("rain angle must be within [-90, 90] degrees")
    else:
        raise ValueError(f"unknown degradation kind {step.kind!r}")


# ---------------------------------------------------------------------------
# kernels


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    return _radial_kernel(size, sigma, lambda r2s: np.exp(-r2s))


def generalized_gaussian_kernel(size: int, sigma: float, shape: float) -> np.ndarray:
    return _radial_kernel(size, sigma, lambda r2s: np.exp(-(r2s ** shape)))


def plateau_kernel(size: int, sigma: float, shape: float) -> np.ndarray:
    return _radial_kernel(size, sigma, lambda r2s: 1.0 / (1.0 + r2s ** shape))


def _radial_kernel(size: int, sigma: float, profile) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    k = profile(r2 / (2.0 * sigma * sigma))
    return k / k.sum()


def motion_kernel(size: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize a random curved trajectory into a normalized PSF.

    A heading random walk traces the path; points are splatted with
    bilinear weights, the path is recentred on its centroid so the blur
    has no net shift, and anything wandering off the canvas is dropped.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    n = size * 4
    head = rng.uniform(0.0, 2.0 * np.pi)
    turns = rng.normal(0.0, 0.5, size=n)
    step = (size - 1) / n * rng.uniform(0.5, 1.0)
    pts = np.zeros((n + 1, 2))
    for i in range(n):
        head += turns[i]
        pts[i + 1] = pts[i] + (step * np.cos(head), step * np.sin(head))
    pts -= pts.mean(axis=0)
    c = (size - 1) / 2.0
    k = np.zeros((size, size))
    for y, x in pts + c:
        iy, ix = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - iy, x - ix
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy, xx = iy + dy, ix + dx
                if 0 <= yy < size and 0 <= xx < size:
                    k[yy, xx] += wy * wx
    s = k.sum()
    if s <= 0.0:  # whole path clipped off-canvas; fall back to identity
        k[int(c), int(c)] = 1.0
        s = 1.0
    return k / s


# ---------------------------------------------------------------------------
# jpeg round trip

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

_JPEG_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)


def jpeg_quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Luma and chroma quantization tables for an integer quality setting."""
    q = int(quality)
    if not 1 <= q <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {q}")
    scale = 5000 // q if q < 50 else 200 - 2 * q
    luma = np.clip((_JPEG_LUMA * scale + 50) // 100, 1, 255)
    chroma = np.clip((_JPEG_CHROMA * scale + 50) // 100, 1, 255)
    return luma.astype(np.float64), chroma.astype(np.float64)


def _dct8_matrix() -> np.ndarray:
    i = np.arange(8).reshape(8, 1)
    j = np.arange(8).reshape(1, 8)
    m = np.cos((2 * j + 1) * i * np.pi / 16.0) * 0.5
    m[0, :] = 1.0 / np.sqrt(8.0)
    return m


_DCT8 = _dct8_matrix()


def _blockify(ch: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = ch.shape
    hp = (h + 7) // 8 * 8
    wp = (w + 7) // 8 * 8
    padded = np.pad(ch, ((0, hp - h), (0, wp - w)), mode="edge")
    blocks = padded.reshape(hp // 8, 8, wp // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    return blocks, hp, wp


def _unblockify(blocks: np.ndarray, hp: int, wp: int, h: int, w: int) -> np.ndarray:
    full = blocks.reshape(hp // 8, wp // 8, 8, 8).transpose(0, 2, 1, 3).reshape(hp, wp)
    return full[:h, :w]


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Compress-then-decompress in memory: 4:4:4, 8x8 block DCT, table
    quantization at the given quality. Returns float32 in [0, 1]."""
    img = _check_image(img)
    luma_t, chroma_t = jpeg_quant_tables(quality)
    r, g, b = img[0] * 255.0, img[1] * 255.0, img[2] * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b

    h, w = y.shape
    planes = []
    for ch, table in ((y, luma_t), (cb, chroma_t), (cr, chroma_t)):
        blocks, hp, wp = _blockify(ch - 128.0)
        coef = np.einsum("ij,bjk,lk->bil", _DCT8, blocks, _DCT8)
        coef = np.round(coef / table) * table
        rec = np.einsum("ji,bjk,kl->bil", _DCT8, coef, _DCT8)
        planes.append(_unblockify(rec, hp, wp, h, w) + 128.0)
    y2, cb2, cr2 = planes
    r2 = y2 + 1.402 * (cr2 - 128.0)
    g2 = y2 - 0.344136 * (cb2 - 128.0) - 0.714136 * (cr2 - 128.0)
    b2 = y2 + 1.772 * (cb2 - 128.0)
    out = np.stack([r2, g2, b2]) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# rain


def rain_layer(h: int, w: int, count: int, length: float, angle_deg: float,
               rng: np.random.Generator) -> np.ndarray:
    """Accumulate anti-aliased streaks of random intensity on a zero canvas."""
    ang = np.deg2rad(angle_deg)
    dy, dx = np.cos(ang), np.sin(ang)  # zero degrees falls straight down
    n_samp = max(int(length * 2), 2)
    ts = np.linspace(0.0, length, n_samp)
    count = int(count)
    y0 = rng.uniform(-length, h, size=count)
    x0 = rng.uniform(-length, w, size=count)
    inten = rng.uniform(0.4, 1.0, size=count)
    ys = y0[:, None] + ts[None, :] * dy
    xs = x0[:, None] + ts[None, :] * dx
    iy = np.floor(ys).astype(np.int64)
    ix = np.floor(xs).astype(np.int64)
    fy = ys - iy
    fx = xs - ix
    gain = 0.5 * inten[:, None]
    acc = np.zeros(h * w)
    # four bilinear taps, scatter-added for all streaks at once
    for ddy, wy in ((0, 1.0 - fy), (1, fy)):
        for ddx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = (iy + ddy).ravel()
            xx = (ix + ddx).ravel()
            m = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            acc += np.bincount(yy[m] * w + xx[m],
                               weights=(gain * wy * wx).ravel()[m],
                               minlength=h * w)
    return np.clip(acc.reshape(h, w), 0.0, 1.0)


# ---------------------------------------------------------------------------
# application


def apply_step(img: np.ndarray, step: DegradationStep,
               rng: np.random.Generator) -> np.ndarray:
    """Apply one degradation; deterministic given (img, step, rng state).

    Returns float32 clipped to [0, 1].
    """
    validate_step(step)
    img = _check_image(img)
    p = step.params
    h, w = img.shape[1], img.shape[2]

    if step.kind in ("blur", "motion"):
        k = int(p["kernel_size"])
        if h < k or w < k:
            raise ValueError(f"image {h}x{w} smaller than kernel {k}x{k}")
        if step.kind == "blur":
            fam = p["family"]
            if fam == "gaussian":
                kern = gaussian_kernel(k, float(p["sigma"]))
            elif fam == "generalized":
                kern = generalized_gaussian_kernel(k, float(p["sigma"]), float(p["shape"]))
            else:
                kern = plateau_kernel(k, float(p["sigma"]), float(p["shape"]))
        else:
            kern = motion_kernel(k, rng)
        out = np.stack([ndimage.correlate(img[c], kern, mode="reflect")
                        for c in range(3)])
    elif step.kind == "noise":
        if p["family"] == "gaussian":
            out = img + rng.standard_normal(img.shape) * (float(p["sigma"]) / 255.0)
        else:
            scale = float(p["scale"])
            noisy = rng.poisson(img * 255.0) / 255.0
            out = img + scale * (noisy - img)
    elif step.kind == "jpeg":
        return jpeg_roundtrip(img, int(p["quality"]))
    elif step.kind == "rain":
        layer = rain_layer(h, w, int(p["count"]), float(p["length"]),
                           float(p["angle_deg"]), rng)
        out = img + float(p["alpha"]) * layer[None, :, :]
    else:  # unreachable after validate_step
        raise ValueError(f"unknown degradation kind {step.kind!r}")

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_recipe(img: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    """Run every step in order with a generator seeded by the recipe."""
    if not recipe.steps:
        raise ValueError("recipe must contain at least one step")
    rng = np.random.default_rng(recipe.seed)
    out = np.asarray(img)
    for step in recipe.steps:
        out = apply_step(out, step, rng)
    return out


# ---------------------------------------------------------------------------
# sampling


def _draw_range(rng, rng_or_fixed, integer=False):
    if isinstance(rng_or_fixed, (tuple, list)):
        lo, hi = rng_or_fixed
        if integer:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(float(lo), float(hi)))
    return int(rng_or_fixed) if integer else float(rng_or_fixed)


def _draw_odd(rng, rng_or_fixed) -> int:
    if isinstance(rng_or_fixed, (tuple, list)):
        lo, hi = int(rng_or_fixed[0]), int(rng_or_fixed[1])
        sizes = np.arange(lo + (lo % 2 == 0), hi + 1, 2)
        if sizes.size == 0:
            raise ValueError(f"no odd kernel sizes in [{lo}, {hi}]")
        return int(sizes[rng.integers(sizes.size)])
    return int(rng_or_fixed)


def sample_step(kind: str, rng: np.random.Generator,
                overrides: Mapping[str, object] | None = None) -> DegradationStep:
    """Draw one step of the given kind; overrides replace default ranges."""
    if kind not in KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}")
    ov = dict(overrides or {})
    dfl = DEFAULT_RANGES[kind]
    p: dict[str, object] = {}
    if kind == "blur":
        fam = ov.get("family") or BLUR_FAMILIES[rng.integers(len(BLUR_FAMILIES))]
        if fam not in BLUR_FAMILIES:
            raise ValueError(f"unknown blur family {fam!r}")
        p["family"] = fam
        p["kernel_size"] = _draw_odd(rng, ov.get("kernel_size", dfl["kernel_size"]))
        p["sigma"] = _draw_range(rng, ov.get("sigma", dfl["sigma"]))
        if fam != "gaussian":
            key = f"shape_{fam}"
            p["shape"] = _draw_range(rng, ov.get("shape", dfl[key]))
    elif kind == "noise":
        fam = ov.get("family") or NOISE_FAMILIES[rng.integers(len(NOISE_FAMILIES))]
        if fam not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {fam!r}")
        p["family"] = fam
        if fam == "gaussian":
            p["sigma"] = _draw_range(rng, ov.get("sigma", dfl["sigma"]))
        else:
            p["scale"] = _draw_range(rng, ov.get("scale", dfl["scale"]))
    elif kind == "jpeg":
        p["quality"] = _draw_range(rng, ov.get("quality", dfl["quality"]), integer=True)
    elif kind == "motion":
        p["kernel_size"] = _draw_odd(rng, ov.get("kernel_size", dfl["kernel_size"]))
    elif kind == "rain":
        p["count"] = _draw_range(rng, ov.get("count", dfl["count"]), integer=True)
        p["length"] = _draw_range(rng, ov.get("length", dfl["length"]))
        p["alpha"] = _draw_range(rng, ov.get("alpha", dfl["alpha"]))
        p["angle_deg"] = _draw_range(rng, ov.get("angle_deg", dfl["angle_deg"]))
    step = DegradationStep(kind=kind, params=p)
    validate_step(step)
    return step


def sample_recipe(rng: np.random.Generator,
                  config: SamplerConfig | None = None) -> DegradationRecipe:
    """Draw a recipe: uniform depth in 1..max_depth, kinds uniform with
    replacement, parameters uniform in their (possibly overridden) ranges."""
    config = config or SamplerConfig()
    depth = int(rng.integers(1, config.max_depth + 1))
    steps = []
    for _ in range(depth):
        kind = config.kinds[int(rng.integers(len(config.kinds)))]
        steps.append(sample_step(kind, rng, config.overrides.get(kind)))
    seed = int(rng.integers(0, 2**63))
    return DegradationRecipe(steps=tuple(steps), seed=seed)


def max_sampled_kernel(config: SamplerConfig) -> int:
    """Largest kernel_size this sampler can ever draw; 0 without blur/motion.

    Lets callers that degrade small crops reject a config upfront instead
    of failing at whatever step first draws an oversized kernel.
    """
    top = 0
    for kind in config.kinds:
        if kind not in ("blur", "motion"):
            continue
        bound = (config.overrides.get(kind) or {}).get(
            "kernel_size", DEFAULT_RANGES[kind]["kernel_size"])
        if isinstance(bound, (tuple, list)):
            hi = int(bound[1])
            hi -= hi % 2 == 0          # _draw_odd never exceeds the top odd value
        else:
            hi = int(bound)
        top = max(top, hi)
    return top


def recipe_space_size(num_kinds: int, max_depth: int,
                      include_empty: bool = False) -> int:
    """Count distinct kind sequences of length 1..max_depth (exact int).

    With include_empty the zero-length sequence is counted too, which
    collapses to the geometric closed form (H^(N+1) - 1) / (H - 1).
    """
    if num_kinds < 2:
        raise ValueError("need at least 2 kinds")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    total = sum(num_kinds ** k for k in range(1, max_depth + 1))
    if include_empty:
        total += 1
        assert total == (num_kinds ** (max_depth + 1) - 1) // (num_kinds - 1)
    return total


# ---------------------------------------------------------------------------
# manifests


def write_manifest(records: Sequence[Mapping], path) -> None:
    """One JSON object per line: {"file", "source", "recipe"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
