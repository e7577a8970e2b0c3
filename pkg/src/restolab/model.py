"""Miniature gated U-Net restoration network on named parameter dicts.

The network is a residual encoder/decoder: an intro conv, gated
conv blocks per level with stride-2 conv downsampling, a middle stack,
nearest-upsample plus 1x1 conv decoding with additive encoder skips,
and an end conv whose output is added back onto the input.

Parameters live in flat dicts keyed by layer id. Ids follow
`<stage>.<block>.<role>` with stage one of intro / enc.<level> /
middle / dec.<level> / end, e.g.

    intro.0.conv_weight         enc.1.0.gate.conv_weight
    enc.1.0.norm_gamma          enc.1.down.conv_weight
    middle.1.proj.conv_bias     dec.2.up.conv_weight
    end.0.conv_bias

Roles are conv_weight, conv_bias, norm_gamma, norm_beta. Everything
downstream (attribution, adapter planning, weight decay masks) keys off
these ids, so their layout is part of the package contract.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, conv2d, layer_norm, upsample_nearest2x

LN_EPS = 1e-6

CHECKPOINT_FORMAT = "restolab.checkpoint.v1"

ROLES = ("conv_weight", "conv_bias", "norm_gamma", "norm_beta")


@dataclass(frozen=True)
class ModelSpec:
    """Network sizing. enc_blocks / dec_blocks give per-level block
    counts (level 1 is full resolution); channel width doubles per level."""
    width: int = 8
    enc_blocks: tuple[int, ...] = (1, 1)
    middle_blocks: int = 2
    dec_blocks: tuple[int, ...] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "enc_blocks", tuple(int(b) for b in self.enc_blocks))
        object.__setattr__(self, "dec_blocks", tuple(int(b) for b in self.dec_blocks))
        if self.width < 2 or self.width % 2 != 0:
            raise ValueError("width must be an even integer >= 2")
        if len(self.enc_blocks) != len(self.dec_blocks):
            raise ValueError("enc_blocks and dec_blocks must have equal length")
        if len(self.enc_blocks) == 0:
            raise ValueError("need at least one resolution level")
        if any(b < 1 for b in self.enc_blocks + self.dec_blocks):
            raise ValueError("block counts must be >= 1")
        if self.middle_blocks < 1:
            raise ValueError("middle_blocks must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.enc_blocks)

    def level_channels(self, level: int) -> int:
        return self.width * 2 ** (level - 1)

    @property
    def middle_channels(self) -> int:
        return self.width * 2 ** self.levels

    def to_dict(self) -> dict:
        return {"width": self.width, "enc_blocks": list(self.enc_blocks),
                "middle_blocks": self.middle_blocks, "dec_blocks": list(self.dec_blocks)}

    @staticmethod
    def from_dict(d: Mapping) -> "ModelSpec":
        return ModelSpec(width=int(d["width"]),
                         enc_blocks=tuple(d["enc_blocks"]),
                         middle_blocks=int(d["middle_blocks"]),
                         dec_blocks=tuple(d["dec_blocks"]))


def _block_shapes(prefix: str, c: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.norm_gamma", (c,)),
        (f"{prefix}.norm_beta", (c,)),
        (f"{prefix}.gate.conv_weight", (2 * c, c, 3, 3)),
        (f"{prefix}.gate.conv_bias", (2 * c,)),
        (f"{prefix}.proj.conv_weight", (c, c, 1, 1)),
        (f"{prefix}.proj.conv_bias", (c,)),
    ]


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Layer ids and shapes in forward execution order."""
    out: list[tuple[str, tuple[int, ...]]] = []
    out.append(("intro.0.conv_weight", (spec.width, 3, 3, 3)))
    out.append(("intro.0.conv_bias", (spec.width,)))
    for lvl in range(1, spec.levels + 1):
        c = spec.level_channels(lvl)
        for b in range(spec.enc_blocks[lvl - 1]):
            out.extend(_block_shapes(f"enc.{lvl}.{b}", c))
        out.append((f"enc.{lvl}.down.conv_weight", (2 * c, c, 3, 3)))
        out.append((f"enc.{lvl}.down.conv_bias", (2 * c,)))
    cm = spec.middle_channels
    for b in range(spec.middle_blocks):
        out.extend(_block_shapes(f"middle.{b}", cm))
    for lvl in range(spec.levels, 0, -1):
        c = spec.level_channels(lvl)
        out.append((f"dec.{lvl}.up.conv_weight", (c, 2 * c, 1, 1)))
        out.append((f"dec.{lvl}.up.conv_bias", (c,)))
        for b in range(spec.dec_blocks[lvl - 1]):
            out.extend(_block_shapes(f"dec.{lvl}.{b}", c))
    out.append(("end.0.conv_weight", (3, spec.width, 3, 3)))
    out.append(("end.0.conv_bias", (3,)))
    return dict(out)


def stage_of(layer_id: str) -> str:
    """Map a layer id to its stage label (enc/dec keep their level)."""
    parts = layer_id.split(".")
    if parts[0] in ("enc", "dec"):
        return f"{parts[0]}.{parts[1]}"
    return parts[0]


def role_of(layer_id: str) -> str:
    role = layer_id.rsplit(".", 1)[-1]
    if role not in ROLES:
        raise ValueError(f"layer id {layer_id!r} has unknown role {role!r}")
    return role


def is_conv_weight(layer_id: str) -> bool:
    return layer_id.endswith(".conv_weight")


def stage_names(spec: ModelSpec) -> list[str]:
    """Stages in forward execution order."""
    names = ["intro"]
    names += [f"enc.{l}" for l in range(1, spec.levels + 1)]
    names.append("middle")
    names += [f"dec.{l}" for l in range(spec.levels, 0, -1)]
    names.append("end")
    return names


def stage_partition(spec: ModelSpec) -> dict[str, list[str]]:
    """Group layer ids by stage, preserving forward order."""
    part: dict[str, list[str]] = {s: [] for s in stage_names(spec)}
    for lid in param_shapes(spec):
        part[stage_of(lid)].append(lid)
    return part


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(int(np.prod(a.shape)) for a in params.values()))


@dataclass
class Checkpoint:
    """A model spec, its parameter arrays, and free-form metadata."""
    spec: ModelSpec
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()},
                          dict(self.metadata))


def build_model(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    """Seeded init: conv weights Kaiming-uniform over fan-in, biases and
    norm betas zero, norm gammas one. Same seed, same bytes."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for lid, shape in param_shapes(spec).items():
        role = role_of(lid)
        if role == "conv_weight":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[lid] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif role == "norm_gamma":
            params[lid] = np.ones(shape, dtype=np.float32)
        else:
            params[lid] = np.zeros(shape, dtype=np.float32)
    return Checkpoint(spec, params, {"seed": int(seed), "init": "kaiming_uniform"})


# ---------------------------------------------------------------------------
# forward


def _gated_block(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    y = layer_norm(x, p[f"{prefix}.norm_gamma"], p[f"{prefix}.norm_beta"], eps=LN_EPS)
    y = conv2d(y, p[f"{prefix}.gate.conv_weight"], p[f"{prefix}.gate.conv_bias"], padding=1)
    c = y.shape[1] // 2
    y = y[:, :c] * y[:, c:]
    y = conv2d(y, p[f"{prefix}.proj.conv_weight"], p[f"{prefix}.proj.conv_bias"])
    return x + y


def forward_tensors(spec: ModelSpec, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Autodiff forward pass. x is [N, 3, H, W] with H, W divisible by
    2^levels; output has the same shape (global residual)."""
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"input must be [N, 3, H, W], got {x.shape}")
    div = 2 ** spec.levels
    if x.shape[2] % div or x.shape[3] % div:
        raise ValueError(f"H and W must be divisible by {div}, got {x.shape[2:]}" )
    h = conv2d(x, p["intro.0.conv_weight"], p["intro.0.conv_bias"], padding=1)
    skips: list[Tensor] = []
    for lvl in range(1, spec.levels + 1):
        for b in range(spec.enc_blocks[lvl - 1]):
            h = _gated_block(p, f"enc.{lvl}.{b}", h)
        skips.append(h)
        h = conv2d(h, p[f"enc.{lvl}.down.conv_weight"],
                   p[f"enc.{lvl}.down.conv_bias"], stride=2, padding=1)
    for b in range(spec.middle_blocks):
        h = _gated_block(p, f"middle.{b}", h)
    for lvl in range(spec.levels, 0, -1):
        h = upsample_nearest2x(h)
        h = conv2d(h, p[f"dec.{lvl}.up.conv_weight"], p[f"dec.{lvl}.up.conv_bias"])
        h = h + skips[lvl - 1]
        for b in range(spec.dec_blocks[lvl - 1]):
            h = _gated_block(p, f"dec.{lvl}.{b}", h)
    out = conv2d(h, p["end.0.conv_weight"], p["end.0.conv_bias"], padding=1)
    return x + out


def forward(ckpt: Checkpoint, img: np.ndarray) -> np.ndarray:
    """Inference on one [3, H, W] image or a [N, 3, H, W] batch.

    Returns the raw residual output (not clipped); callers that compute
    metrics clip to [0, 1] themselves.
    """
    arr = np.asarray(img)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    p = {k: Tensor(v.astype(dtype, copy=False)) for k, v in ckpt.params.items()}
    out = forward_tensors(ckpt.spec, p, Tensor(arr.astype(dtype, copy=False)))
    return out.data[0] if single else out.data


def restore(ckpt: Checkpoint, img: np.ndarray) -> np.ndarray:
    """Forward pass clipped to [0, 1] as float32."""
    return np.clip(forward(ckpt, img), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# container io (shared by checkpoints and adapter files)


def write_container(path, format_name: str, spec: ModelSpec, metadata: Mapping,
                    arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    """One JSON header line, then raw little-endian array payloads."""
    seen = set()
    entries = []
    payload = bytearray()
    for name, arr in arrays:
        if name in seen:
            raise ValueError(f"duplicate tensor id {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr.astype(code, copy=False)).tobytes()
        entries.append({"id": name, "dtype": code, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    header = {"format": format_name, "spec": spec.to_dict(),
              "metadata": dict(metadata), "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))


def read_container(path, expect_format: str | None = None):
    """Inverse of write_container: (header dict, spec, arrays by id)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"not a container file: bad header ({e})") from e
        payload = fh.read()
    if expect_format is not None and header.get("format") != expect_format:
        raise ValueError(f"expected format {expect_format!r}, "
                         f"got {header.get('format')!r}")
    spec = ModelSpec.from_dict(header["spec"])
    arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        start, n = int(ent["offset"]), int(ent["nbytes"])
        if start + n > len(payload):
            raise ValueError(f"tensor {ent['id']!r} extends past end of file")
        arr = np.frombuffer(payload[start:start + n], dtype=ent["dtype"])
        arrays[ent["id"]] = arr.reshape(ent["shape"]).astype(ent["dtype"][1:], copy=True)
    return header, spec, arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    shapes = param_shapes(ckpt.spec)
    if set(ckpt.params) != set(shapes):
        raise ValueError("checkpoint params do not match its spec")
    arrays = [(lid, ckpt.params[lid]) for lid in shapes]
    write_container(path, CHECKPOINT_FORMAT, ckpt.spec, ckpt.metadata, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, spec, arrays = read_container(path, expect_format=CHECKPOINT_FORMAT)
    shapes = param_shapes(spec)
    if set(arrays) != set(shapes):
        raise ValueError("checkpoint tensors do not match the declared spec")
    for lid, shape in shapes.items():
        if tuple(arrays[lid].shape) != shape:
            raise ValueError(f"tensor {lid!r} has shape {arrays[lid].shape}, "
                             f"expected {shape}")
    return Checkpoint(spec, arrays, dict(header.get("metadata", {})))


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """sha256 over ids and little-endian bytes in sorted id order."""
    h = hashlib.sha256()
    for lid in sorted(params):
        arr = np.ascontiguousarray(params[lid])
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        h.update(lid.encode("utf-8"))
        h.update(arr.astype(code, copy=False).tobytes())
    return h.hexdigest()
