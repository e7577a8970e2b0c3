"""Layer attribution by path-integrated gradients between two checkpoints.

Walks the straight line in parameter space from a fine-tuned target
model (beta = 0) to its pre-trained baseline (beta = 1), accumulating
loss gradients at M left-endpoint steps. The per-kernel score is the
absolute inner product of the parameter difference with the accumulated
gradient, averaged over steps:

    score = | (1/M) * sum_over_kernel( (theta_ba - theta_ta) * sum_t grad_t ) |

Conv weights score one kernel per output channel; bias and norm vectors
score per element. Layer scores sum their kernels, stage scores average
their member layers, and normalized stage scores divide by the max over
stages excluding intro and end.

All integration runs in float64 regardless of checkpoint dtype: the
Riemann refinement checks need residuals well below float32 noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import Checkpoint, forward_tensors, stage_of
from .tensor import Tensor, backprop, loss_psnr

DEFAULT_STEPS = 100

EXCLUDED_STAGES = ("intro", "end")


@dataclass
class FaigReport:
    """Attribution scores at layer, stage, and normalized-stage level."""
    per_layer: dict[str, float]
    per_stage: dict[str, float]
    normalized: dict[str, float]
    steps: int
    probe: dict = field(default_factory=dict)
    all_zero: bool = False

    def to_dict(self) -> dict:
        return {"per_layer": self.per_layer, "per_stage": self.per_stage,
                "normalized": self.normalized, "steps": self.steps,
                "probe": self.probe, "all_zero": self.all_zero}

    @staticmethod
    def from_dict(d: Mapping) -> "FaigReport":
        return FaigReport(per_layer=dict(d["per_layer"]),
                          per_stage=dict(d["per_stage"]),
                          normalized=dict(d["normalized"]),
                          steps=int(d["steps"]),
                          probe=dict(d.get("probe", {})),
                          all_zero=bool(d.get("all_zero", False)))


def save_report(report: FaigReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_report(path) -> FaigReport:
    with open(path, "r", encoding="utf-8") as fh:
        return FaigReport.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# parameter-space path machinery (generic over named param dicts)


def _check_topology(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    if set(a) != set(b):
        missing = set(a) ^ set(b)
        raise ValueError(f"topology mismatch: differing ids {sorted(missing)[:4]}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"topology mismatch at {k!r}: "
                             f"{a[k].shape} vs {b[k].shape}")


def interpolate(theta_ba: Checkpoint, theta_ta: Checkpoint, beta: float) -> Checkpoint:
    """Point on the target->baseline segment: theta_ta + beta*(theta_ba - theta_ta).

    Endpoints return exact copies of the respective checkpoint.
    """
    if theta_ba.spec != theta_ta.spec:
        raise ValueError("topology mismatch: different model specs")
    _check_topology(theta_ba.params, theta_ta.params)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        params = {k: v.copy() for k, v in theta_ta.params.items()}
    elif beta == 1.0:
        params = {k: v.copy() for k, v in theta_ba.params.items()}
    else:
        params = {k: theta_ta.params[k] + beta * (theta_ba.params[k] - theta_ta.params[k])
                  for k in theta_ta.params}
    return Checkpoint(theta_ta.spec, params, {"beta": float(beta)})


def path_gradient_sums(theta_ba: Mapping[str, np.ndarray],
                       theta_ta: Mapping[str, np.ndarray],
                       loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                       steps: int) -> dict[str, np.ndarray]:
    """Sum of loss gradients at rho(t/steps) for t = 0..steps-1, float64."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_topology(theta_ba, theta_ta)
    ta = {k: np.asarray(v, np.float64) for k, v in theta_ta.items()}
    diff = {k: np.asarray(theta_ba[k], np.float64) - ta[k] for k in ta}
    gsum = {k: np.zeros_like(ta[k]) for k in ta}
    for t in range(steps):
        beta = t / steps
        leaves = {k: Tensor(ta[k] + beta * diff[k], requires_grad=True) for k in ta}
        grads = backprop(loss_fn(leaves), leaves)
        for k in gsum:
            gsum[k] += grads[k]
    return gsum


def signed_attribution_total(theta_ba: Mapping[str, np.ndarray],
                             theta_ta: Mapping[str, np.ndarray],
                             loss_fn, steps: int) -> float:
    """Signed (no abs) sum over all parameters of diff * mean path gradient.

    This is the Riemann approximation of loss(theta_ba) - loss(theta_ta).
    """
    gsum = path_gradient_sums(theta_ba, theta_ta, loss_fn, steps)
    total = 0.0
    for k in gsum:
        diff = np.asarray(theta_ba[k], np.float64) - np.asarray(theta_ta[k], np.float64)
        total += float((diff * gsum[k]).sum())
    return total / steps


def completeness_residual_for(theta_ba, theta_ta, loss_fn, steps: int) -> float:
    """|signed path attribution - (loss(ba) - loss(ta))|; shrinks with steps."""
    approx = signed_attribution_total(theta_ba, theta_ta, loss_fn, steps)
    l_ba = loss_fn({k: Tensor(np.asarray(v, np.float64)) for k, v in theta_ba.items()}).item()
    l_ta = loss_fn({k: Tensor(np.asarray(v, np.float64)) for k, v in theta_ta.items()}).item()
    return abs(approx - (l_ba - l_ta))


# ---------------------------------------------------------------------------
# probe loss over (degraded, clean) pairs


def probe_loss_fn(spec, probe: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Mean of per-image PSNR losses of the restored probe images."""
    if len(probe) == 0:
        raise ValueError("probe set must be non-empty")
    pairs = [(np.asarray(d, np.float64)[None], np.asarray(c, np.float64)[None])
             for d, c in probe]
    inv = 1.0 / len(pairs)

    def loss_fn(params: Mapping[str, Tensor]) -> Tensor:
        total = None
        for deg, clean in pairs:
            li = loss_psnr(forward_tensors(spec, params, Tensor(deg)), Tensor(clean))
            total = li if total is None else total + li
        return total * inv

    return loss_fn


# ---------------------------------------------------------------------------
# scores


def _kernel_scores(layer_id: str, diff: np.ndarray, gsum: np.ndarray,
                   steps: int) -> np.ndarray:
    contrib = diff * gsum / steps
    if layer_id.endswith(".conv_weight"):
        # one kernel per output channel: sum the filter slab before abs
        return np.abs(contrib.reshape(contrib.shape[0], -1).sum(axis=1))
    return np.abs(contrib).reshape(-1)


def per_layer_scores(theta_ba: Mapping[str, np.ndarray],
                     theta_ta: Mapping[str, np.ndarray],
                     loss_fn, steps: int) -> dict[str, float]:
    """Layer score = sum over kernels of the absolute step-averaged
    (difference x path-gradient) inner products. Generic over any
    named-parameter model and scalar loss."""
    gsum = path_gradient_sums(theta_ba, theta_ta, loss_fn, steps)
    out: dict[str, float] = {}
    for lid in theta_ba:
        diff = (np.asarray(theta_ba[lid], np.float64)
                - np.asarray(theta_ta[lid], np.float64))
        out[lid] = float(_kernel_scores(lid, diff, gsum[lid], steps).sum())
    return out


def faig_scores(theta_ba: Checkpoint, theta_ta: Checkpoint,
                probe: Sequence[tuple[np.ndarray, np.ndarray]],
                steps: int = DEFAULT_STEPS,
                probe_note: dict | None = None) -> FaigReport:
    """Per-layer, per-stage, and normalized attribution between checkpoints."""
    if theta_ba.spec != theta_ta.spec:
        raise ValueError("topology mismatch: different model specs")
    _check_topology(theta_ba.params, theta_ta.params)
    loss_fn = probe_loss_fn(theta_ba.spec, probe)
    per_layer = per_layer_scores(theta_ba.params, theta_ta.params, loss_fn, steps)
    per_stage = stage_means(per_layer)
    normalized, all_zero = normalize_stage_scores(per_stage)
    probe_desc = {"count": len(probe), "loss": "psnr"}
    if probe_note:
        probe_desc.update(probe_note)
    return FaigReport(per_layer=per_layer, per_stage=per_stage,
                      normalized=normalized, steps=steps,
                      probe=probe_desc, all_zero=all_zero)


def completeness_residual(theta_ba: Checkpoint, theta_ta: Checkpoint,
                          probe, steps: int = DEFAULT_STEPS) -> float:
    """Checkpoint-level wrapper of completeness_residual_for."""
    if theta_ba.spec != theta_ta.spec:
        raise ValueError("topology mismatch: different model specs")
    loss_fn = probe_loss_fn(theta_ba.spec, probe)
    return completeness_residual_for(theta_ba.params, theta_ta.params, loss_fn, steps)


def stage_means(per_layer: Mapping[str, float]) -> dict[str, float]:
    """Average layer scores within each stage, in first-seen order."""
    sums: dict[str, list[float]] = {}
    for lid, score in per_layer.items():
        sums.setdefault(stage_of(lid), []).append(score)
    return {s: float(np.mean(v)) for s, v in sums.items()}


def normalize_stage_scores(per_stage: Mapping[str, float]) -> tuple[dict[str, float], bool]:
    """Divide non-intro/end stage scores by their max.

    Returns (normalized map over included stages, all_zero flag). When
    every included score is zero the map is returned as zeros and the
    flag is set instead of raising.
    """
    included = {s: float(v) for s, v in per_stage.items() if s not in EXCLUDED_STAGES}
    if not included:
        raise ValueError("no stages to normalize (only intro/end present)")
    if any(v < 0 for v in included.values()):
        raise ValueError("stage scores must be non-negative")
    top = max(included.values())
    if top <= 0.0:
        return {s: 0.0 for s in included}, True
    return {s: v / top for s, v in included.items()}, False


def average_reports(reports: Sequence[FaigReport]) -> FaigReport:
    """Elementwise mean of per-layer scores across tasks, re-aggregated.

    This is how a multi-task attribution profile is produced before rank
    planning: average first, then stage means and normalization.
    """
    if not reports:
        raise ValueError("need at least one report")
    keys = set(reports[0].per_layer)
    for r in reports[1:]:
        if set(r.per_layer) != keys:
            raise ValueError("reports disagree on layer ids")
    per_layer = {k: float(np.mean([r.per_layer[k] for r in reports]))
                 for k in reports[0].per_layer}
    per_stage = stage_means(per_layer)
    normalized, all_zero = normalize_stage_scores(per_stage)
    return FaigReport(per_layer=per_layer, per_stage=per_stage,
                      normalized=normalized, steps=reports[0].steps,
                      probe={"averaged_over": len(reports)}, all_zero=all_zero)
