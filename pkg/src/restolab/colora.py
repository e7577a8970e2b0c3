"""Contribution-weighted low-rank adapters with lossless merging.

Rank planning turns normalized stage attribution scores into per-layer
adapter ranks: a stage scoring above the 0.5 threshold (strictly) keeps
its score scaled by alpha, otherwise by beta, giving a parameter budget
delta = r(d+k)/(d*k) per conv layer that is inverted and rounded to an
integer rank. Conv weights flatten to d = Cout rows and k = Cin*kh*kw
columns, so the update is W0 + reshape(B @ A) with A in [r, k] and B in
[d, r]. B starts at zero: the adapted model equals its base until the
first optimizer step. Bias and normalization vectors are tuned as plain
copies, and the intro/end convs (tiny, excluded from normalization) are
tuned fully.

Merging folds B @ A back into the conv weights, returning an ordinary
checkpoint with identical shapes, so the tuned model runs at exactly
the base model's cost.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (Checkpoint, ModelSpec, is_conv_weight, param_shapes,
                    params_digest, read_container, stage_of, write_container)
from .tensor import Tensor

ADAPTER_FORMAT = "restolab.adapters.v1"

THRESHOLD = 0.5

EXCLUDED_STAGES = ("intro", "end")


def flatten_dims(shape: Sequence[int]) -> tuple[int, int]:
    """Conv weight [Cout, Cin, kh, kw] -> (d, k) = (Cout, Cin*kh*kw)."""
    if len(shape) != 4:
        raise ValueError(f"expected a conv weight shape, got {tuple(shape)}")
    d = int(shape[0])
    k = int(np.prod(shape[1:]))
    return d, k


def delta_of_rank(r: int, d: int, k: int) -> float:
    """Adapter-to-dense parameter ratio r(d+k)/(d*k); may exceed 1 for
    degenerate tiny layers."""
    if r < 1 or d < 1 or k < 1:
        raise ValueError("r, d, k must all be >= 1")
    return r * (d + k) / (d * k)


def rank_of_delta(delta: float, d: int, k: int) -> int:
    """Invert delta_of_rank: round half up, clamp to [1, min(d, k)]."""
    if d < 1 or k < 1:
        raise ValueError("d and k must be >= 1")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    raw = int(np.floor(delta * d * k / (d + k) + 0.5))
    return int(np.clip(raw, 1, min(d, k)))


@dataclass
class RankPlan:
    """Which layers get adapters at which rank, and which are tuned whole."""
    alpha: float
    beta: float
    per_stage_delta: dict[str, float]
    per_layer_rank: dict[str, int]
    tunable_extras: tuple[str, ...]
    full_tune: tuple[str, ...]
    threshold: float = THRESHOLD

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "threshold": self.threshold,
                "per_stage_delta": self.per_stage_delta,
                "per_layer_rank": self.per_layer_rank,
                "tunable_extras": list(self.tunable_extras),
                "full_tune": list(self.full_tune)}

    @staticmethod
    def from_dict(d: Mapping) -> "RankPlan":
        return RankPlan(alpha=float(d["alpha"]), beta=float(d["beta"]),
                        threshold=float(d.get("threshold", THRESHOLD)),
                        per_stage_delta=dict(d["per_stage_delta"]),
                        per_layer_rank={k: int(v) for k, v in d["per_layer_rank"].items()},
                        tunable_extras=tuple(d["tunable_extras"]),
                        full_tune=tuple(d["full_tune"]))


def save_plan(plan: RankPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_plan(path) -> RankPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return RankPlan.from_dict(json.load(fh))


def stage_delta(norm_score: float, alpha: float, beta: float) -> float:
    """Threshold rule: score*alpha above 0.5 (strict), score*beta otherwise."""
    return norm_score * alpha if norm_score > THRESHOLD else norm_score * beta


def plan_ranks(norm_scores: Mapping[str, float], alpha: float, beta: float,
               spec: ModelSpec) -> RankPlan:
    """Build a plan from normalized stage scores.

    Every conv weight in a scored stage gets a rank from that stage's
    delta; bias/gamma/beta everywhere are tunable copies; intro and end
    conv weights (outside normalization) are tuned fully.
    """
    if not norm_scores:
        raise ValueError("norm_scores must be non-empty")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    shapes = param_shapes(spec)
    needed = {stage_of(lid) for lid in shapes} - set(EXCLUDED_STAGES)
    missing = needed - set(norm_scores)
    if missing:
        raise ValueError(
            f"norm_scores missing stages {sorted(missing)}; the scores were "
            f"likely computed against a different model topology")
    for s, v in norm_scores.items():
        if not 0.0 <= float(v) <= 1.0 + 1e-9:
            raise ValueError(f"score for stage {s!r} not normalized: {v}")

    per_stage_delta = {s: stage_delta(float(norm_scores[s]), alpha, beta)
                       for s in sorted(needed)}
    per_layer_rank: dict[str, int] = {}
    extras: list[str] = []
    full: list[str] = []
    for lid, shape in shapes.items():
        stage = stage_of(lid)
        if is_conv_weight(lid):
            if stage in EXCLUDED_STAGES:
                full.append(lid)
            else:
                d, k = flatten_dims(shape)
                per_layer_rank[lid] = rank_of_delta(per_stage_delta[stage], d, k)
        else:
            extras.append(lid)
    return RankPlan(alpha=float(alpha), beta=float(beta),
                    per_stage_delta=per_stage_delta,
                    per_layer_rank=per_layer_rank,
                    tunable_extras=tuple(extras), full_tune=tuple(full))


def fixed_rank_plan(spec: ModelSpec, rank: int) -> RankPlan:
    """Uniform-rank baseline: every conv weight gets min(rank, min(d, k)),
    nothing else trains (no bias/norm updates, no full-tune layers)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    per_layer_rank = {}
    for lid, shape in param_shapes(spec).items():
        if is_conv_weight(lid):
            d, k = flatten_dims(shape)
            per_layer_rank[lid] = min(rank, d, k)
    return RankPlan(alpha=0.0, beta=0.0, per_stage_delta={},
                    per_layer_rank=per_layer_rank,
                    tunable_extras=(), full_tune=())


@dataclass
class AdapterSet:
    """Trainable low-rank factors and copies, pinned to one base model."""
    spec: ModelSpec
    plan: RankPlan
    loras: dict[str, tuple[np.ndarray, np.ndarray]]  # id -> (A [r,k], B [d,r])
    extras: dict[str, np.ndarray]
    full: dict[str, np.ndarray]
    base_digest: str
    metadata: dict = field(default_factory=dict)

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        """Flat optimizer view; lora factors get .lora_A / .lora_B suffixes."""
        out: dict[str, np.ndarray] = {}
        for lid, (a, b) in self.loras.items():
            out[f"{lid}.lora_A"] = a
            out[f"{lid}.lora_B"] = b
        out.update(self.extras)
        out.update(self.full)
        return out

    def replace_arrays(self, arrays: Mapping[str, np.ndarray]) -> "AdapterSet":
        """New AdapterSet with trainable arrays swapped in (post-training)."""
        loras = {lid: (np.asarray(arrays[f"{lid}.lora_A"]),
                       np.asarray(arrays[f"{lid}.lora_B"]))
                 for lid in self.loras}
        extras = {lid: np.asarray(arrays[lid]) for lid in self.extras}
        full = {lid: np.asarray(arrays[lid]) for lid in self.full}
        return AdapterSet(self.spec, self.plan, loras, extras, full,
                          self.base_digest, dict(self.metadata))


def attach(base: Checkpoint, plan: RankPlan, seed: int = 0) -> AdapterSet:
    """Create adapters for a frozen base: A ~ U(-1/sqrt(k), 1/sqrt(k)),
    B = 0, extras and full-tune layers start as copies of the base."""
    shapes = param_shapes(base.spec)
    rng = np.random.default_rng(seed)
    loras: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for lid in shapes:  # canonical order keeps the rng draws reproducible
        if lid not in plan.per_layer_rank:
            continue
        if lid not in base.params:
            raise ValueError(f"plan references unknown layer {lid!r}")
        d, k = flatten_dims(shapes[lid])
        r = int(plan.per_layer_rank[lid])
        if not 1 <= r <= min(d, k):
            raise ValueError(f"rank {r} out of range for {lid!r} (d={d}, k={k})")
        bound = 1.0 / np.sqrt(k)
        a = rng.uniform(-bound, bound, size=(r, k)).astype(np.float32)
        b = np.zeros((d, r), dtype=np.float32)
        loras[lid] = (a, b)
    unknown = [lid for lid in plan.per_layer_rank if lid not in shapes]
    if unknown:
        raise ValueError(f"plan references unknown layers {unknown[:4]}")
    extras = {lid: base.params[lid].copy() for lid in plan.tunable_extras}
    full = {lid: base.params[lid].copy() for lid in plan.full_tune}
    return AdapterSet(base.spec, plan, loras, extras, full,
                      base_digest=params_digest(base.params),
                      metadata={"seed": int(seed)})


def effective_param_tensors(base: Checkpoint, adapters: AdapterSet,
                            leaves: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Assemble per-layer tensors: frozen base constants plus adapter
    expressions wired to the given trainable leaves."""
    if adapters.spec != base.spec:
        raise ValueError("adapter set was built for a different model spec")
    out: dict[str, Tensor] = {}
    for lid, arr in base.params.items():
        if lid in adapters.loras:
            a = leaves[f"{lid}.lora_A"]
            b = leaves[f"{lid}.lora_B"]
            w0 = Tensor(arr.astype(a.data.dtype, copy=False))
            out[lid] = w0 + (b @ a).reshape(arr.shape)
        elif lid in adapters.extras or lid in adapters.full:
            out[lid] = leaves[lid]
        else:
            out[lid] = Tensor(arr)
    return out


def adapted_forward(base: Checkpoint, adapters: AdapterSet,
                    img: np.ndarray) -> np.ndarray:
    """Inference through base + adapters without merging."""
    from .model import forward_tensors
    arr = np.asarray(img)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    leaves = {k: Tensor(v) for k, v in adapters.trainable_arrays().items()}
    params = effective_param_tensors(base, adapters, leaves)
    out = forward_tensors(base.spec, params, Tensor(arr.astype(np.float32, copy=False)))
    return out.data[0] if single else out.data


def merge(base: Checkpoint, adapters: AdapterSet) -> Checkpoint:
    """Fold adapters into a plain checkpoint: W = W0 + reshape(B @ A);
    extras and full-tune layers replace their base arrays."""
    if adapters.spec != base.spec:
        raise ValueError("adapter set was built for a different model spec")
    params: dict[str, np.ndarray] = {}
    for lid, arr in base.params.items():
        if lid in adapters.loras:
            a, b = adapters.loras[lid]
            params[lid] = (arr + (b @ a).reshape(arr.shape)).astype(arr.dtype)
        elif lid in adapters.extras:
            params[lid] = adapters.extras[lid].copy()
        elif lid in adapters.full:
            params[lid] = adapters.full[lid].copy()
        else:
            params[lid] = arr.copy()
    meta = dict(base.metadata)
    meta.update({"merged_from": adapters.base_digest,
                 "plan_alpha": adapters.plan.alpha,
                 "plan_beta": adapters.plan.beta})
    return Checkpoint(base.spec, params, meta)


def tuned_param_count(plan: RankPlan, spec: ModelSpec) -> dict:
    """Trainable parameter budget of a plan over a spec.

    count = sum r*(d+k) over adapted convs + extras sizes + full-tune
    sizes; fraction is relative to the dense model.
    """
    shapes = param_shapes(spec)
    total = sum(int(np.prod(s)) for s in shapes.values())
    count = 0
    for lid, r in plan.per_layer_rank.items():
        if lid not in shapes:
            raise ValueError(f"plan references unknown layer {lid!r}")
        d, k = flatten_dims(shapes[lid])
        count += int(r) * (d + k)
    for lid in tuple(plan.tunable_extras) + tuple(plan.full_tune):
        if lid not in shapes:
            raise ValueError(f"plan references unknown layer {lid!r}")
        count += int(np.prod(shapes[lid]))
    return {"count": int(count), "fraction": count / total}


# ---------------------------------------------------------------------------
# adapter file io


def save_adapters(adapters: AdapterSet, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for lid in sorted(adapters.loras):
        a, b = adapters.loras[lid]
        arrays.append((f"{lid}.lora_A", a))
        arrays.append((f"{lid}.lora_B", b))
    for lid in sorted(adapters.extras):
        arrays.append((lid, adapters.extras[lid]))
    for lid in sorted(adapters.full):
        arrays.append((lid, adapters.full[lid]))
    metadata = dict(adapters.metadata)
    metadata["base_digest"] = adapters.base_digest
    metadata["plan"] = adapters.plan.to_dict()
    write_container(path, ADAPTER_FORMAT, adapters.spec, metadata, arrays)


def load_adapters(path, base: Checkpoint) -> AdapterSet:
    """Read adapters and bind them to `base`, verifying its digest."""
    header, spec, arrays = read_container(path, expect_format=ADAPTER_FORMAT)
    meta = dict(header.get("metadata", {}))
    plan = RankPlan.from_dict(meta.pop("plan"))
    digest = meta.pop("base_digest")
    if spec != base.spec:
        raise ValueError("adapter file was built for a different model spec")
    if digest != params_digest(base.params):
        raise ValueError("adapter file does not match this base checkpoint "
                         "(digest mismatch)")
    loras = {}
    for lid in plan.per_layer_rank:
        loras[lid] = (arrays[f"{lid}.lora_A"], arrays[f"{lid}.lora_B"])
    extras = {lid: arrays[lid] for lid in plan.tunable_extras}
    full = {lid: arrays[lid] for lid in plan.full_tune}
    return AdapterSet(spec, plan, loras, extras, full, digest, meta)
