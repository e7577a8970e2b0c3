"""PSNR metrics (RGB and Y-channel) and paired-directory evaluation."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import colora as _colora
from . import model as _model
from .data import list_pairs, load_image
from .tensor import PSNR_MSE_FLOOR

# BT.601 luma weights for [0,1] RGB
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

DOMAINS = ("rgb", "y")


def psnr(pred: np.ndarray, target: np.ndarray, domain: str = "rgb",
         max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.

    domain "rgb" averages squared error over all channels; "y" converts both
    images to the BT.601 luma plane first. The mean squared error is floored
    at 1e-12 (shared with the training loss), capping the result at
    20*log10(max_val) + 120 dB; identical inputs hit the cap exactly.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    if domain == "y":
        if pred.ndim != 3 or pred.shape[0] != 3:
            raise ValueError(f"Y-domain expects [3, H, W], got {pred.shape}")
        pred = np.tensordot(_LUMA, pred, axes=(0, 0))
        target = np.tensordot(_LUMA, target, axes=(0, 0))
    mse = float(np.mean((pred - target) ** 2))
    return 20.0 * np.log10(max_val) - 10.0 * np.log10(max(mse, PSNR_MSE_FLOOR))


@dataclass
class EvalReport:
    per_image: list[dict]          # {"file", "psnr_rgb", "psnr_y"}
    mean_psnr_rgb: float
    mean_psnr_y: float
    tuned_count: int | None = None
    tuned_fraction: float | None = None
    wall_clock_sec: float = 0.0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "mean_psnr_rgb": self.mean_psnr_rgb,
            "mean_psnr_y": self.mean_psnr_y,
            "tuned_count": self.tuned_count,
            "tuned_fraction": self.tuned_fraction,
            "wall_clock_sec": self.wall_clock_sec,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(per_image=[dict(r) for r in d["per_image"]],
                   mean_psnr_rgb=float(d["mean_psnr_rgb"]),
                   mean_psnr_y=float(d["mean_psnr_y"]),
                   tuned_count=None if d.get("tuned_count") is None else int(d["tuned_count"]),
                   tuned_fraction=None if d.get("tuned_fraction") is None else float(d["tuned_fraction"]),
                   wall_clock_sec=float(d.get("wall_clock_sec", 0.0)),
                   metadata=dict(d.get("metadata", {})))


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


def _tuned_accounting(meta: Mapping) -> tuple[int | None, float | None]:
    count = meta.get("tuned_count")
    frac = meta.get("tuned_fraction")
    return (None if count is None else int(count),
            None if frac is None else float(frac))


def evaluate(ckpt: "_model.Checkpoint", task_dir,
             adapters: "_colora.AdapterSet | None" = None) -> EvalReport:
    """Run the model over every (degraded, clean) pair under task_dir.

    With `adapters`, the forward pass applies them on top of the checkpoint;
    tuned-parameter accounting then comes from the adapter plan, otherwise
    from the checkpoint's training metadata when present.
    """
    pairs = list_pairs(task_dir)
    start = time.perf_counter()
    per_image = []
    for degraded_path, clean_path in pairs:
        degraded = load_image(degraded_path)
        clean = load_image(clean_path)
        if adapters is not None:
            out = _colora.adapted_forward(ckpt, adapters, degraded[None])[0]
            out = np.clip(out, 0.0, 1.0).astype(np.float32)
        else:
            out = _model.restore(ckpt, degraded)
        per_image.append({
            "file": degraded_path.name,
            "psnr_rgb": psnr(out, clean, "rgb"),
            "psnr_y": psnr(out, clean, "y"),
        })
    elapsed = time.perf_counter() - start

    if adapters is not None:
        acct = _colora.tuned_param_count(adapters.plan, ckpt.spec)
        tuned_count, tuned_fraction = acct["count"], acct["fraction"]
    else:
        tuned_count, tuned_fraction = _tuned_accounting(ckpt.metadata)
    return EvalReport(
        per_image=per_image,
        mean_psnr_rgb=float(np.mean([r["psnr_rgb"] for r in per_image])),
        mean_psnr_y=float(np.mean([r["psnr_y"] for r in per_image])),
        tuned_count=tuned_count,
        tuned_fraction=tuned_fraction,
        wall_clock_sec=elapsed,
        metadata={"images": len(per_image), "task_dir": str(task_dir)},
    )
