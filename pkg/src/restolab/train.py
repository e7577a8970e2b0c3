"""Training: cosine schedule, decoupled-decay adaptive-moment updates,
random-order degradation pre-training, and five fine-tuning strategies.
"""
from __future__ import annotations

from typing import Literal, Mapping

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, model_validator

from .colora import (AdapterSet, RankPlan, attach, effective_param_tensors,
                     fixed_rank_plan, plan_ranks, tuned_param_count)
from .data import (augment, crop, list_images, load_image, load_pairs,
                   random_patch_coords, sample_augmentation)
from .degrade import (KINDS, SamplerConfig, apply_recipe, max_sampled_kernel,
                      sample_recipe)
from .faig import FaigReport
from .model import (Checkpoint, ModelSpec, build_model, count_params,
                    forward_tensors, is_conv_weight, param_shapes, params_digest)
from .tensor import Tensor, backprop, loss_l1, loss_psnr, wrap_params

STRATEGIES = ("full", "colora", "lora_fixed", "decoder_only", "bias_norm_only")


def cosine_lr(step: int, total: int, lr_start: float, lr_min: float) -> float:
    """Half-cosine decay from lr_start (step 0) to lr_min (step == total)."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + np.cos(np.pi * step / total))


def decays(param_id: str) -> bool:
    """Weight decay targets conv weights only (low-rank factors of a conv
    weight included); biases, gammas, and betas are exempt."""
    return "conv_weight" in param_id


def init_adam_state(params: Mapping[str, np.ndarray]) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
            "t": 0}


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: dict, lr: float, betas: tuple[float, float] = (0.9, 0.9),
               weight_decay: float = 1e-3, eps: float = 1e-8) -> tuple[dict, dict]:
    """One bias-corrected adaptive-moment update with decoupled weight decay.

    Arrays are updated in place; the (params, state) pair is also returned.
    """
    for k, p in params.items():
        if k not in grads:
            raise ValueError(f"missing gradient for {k!r}")
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient shape {grads[k].shape} != param {p.shape} for {k!r}")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decays(k):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# configuration


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    width: int = 8
    enc_blocks: tuple[int, ...] = (1, 1)
    middle_blocks: int = 2
    dec_blocks: tuple[int, ...] = (1, 1)

    def to_spec(self) -> ModelSpec:
        return ModelSpec(width=self.width, enc_blocks=self.enc_blocks,
                         middle_blocks=self.middle_blocks, dec_blocks=self.dec_blocks)


class TaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kinds: tuple[str, ...] = KINDS
    max_depth: int = 6
    overrides: dict[str, dict] = {}

    def to_sampler(self) -> SamplerConfig:
        return SamplerConfig(max_depth=self.max_depth, kinds=self.kinds,
                             overrides=self.overrides)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    strategy: Literal["full", "colora", "lora_fixed",
                      "decoder_only", "bias_norm_only"] = "full"
    rank: int = 16            # lora_fixed only
    alpha: float = 1.0        # colora threshold scales
    beta: float = 0.2
    steps: int = 500
    batch_size: int = 8
    patch: int = 32
    lr_start: float = 1e-3
    lr_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.9)
    weight_decay: float = 1e-3
    eps: float = 1e-8
    seed: int = 0
    loss: Literal["psnr", "l1"] = "psnr"
    model: ModelConfig = ModelConfig()
    task: TaskConfig = TaskConfig()

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_min > 0:
            raise ValueError("need lr_start >= lr_min > 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if not 0 < self.betas[0] < 1 or not 0 < self.betas[1] < 1:
            raise ValueError("moment betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        spec = self.model.to_spec()
        _check_patch(self.patch, spec)
        self.task.to_sampler()
        return self


def load_train_config(path) -> TrainConfig:
    """Parse a config file: nested key-value sections mirroring TrainConfig."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"config root must be a mapping, got {type(doc).__name__}")
    return TrainConfig(**doc)


def save_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.model_dump(), fh, sort_keys=True)


def _check_patch(patch: int, spec: ModelSpec) -> None:
    div = 2 ** spec.levels
    if patch < div or patch % div:
        raise ValueError(f"patch {patch} must be a positive multiple of the "
                         f"downsampling factor {div}")


def _check_fits(images, patch: int) -> None:
    for img in images:
        if img.shape[1] < patch or img.shape[2] < patch:
            raise ValueError(f"patch {patch} exceeds an image of size "
                             f"{img.shape[1]}x{img.shape[2]}")


def _curve(losses: list[float], keep: int = 128) -> list[float]:
    """Thinned loss history: every k-th value plus the final one."""
    if len(losses) <= keep:
        return list(losses)
    stride = len(losses) // keep
    out = losses[::stride]
    if out[-1] != losses[-1]:
        out.append(losses[-1])
    return out


# ---------------------------------------------------------------------------
# batch assembly


def load_clean_images(clean_dir) -> list[np.ndarray]:
    paths = list_images(clean_dir)
    if not paths:
        raise ValueError(f"no clean images in {clean_dir}")
    return [load_image(p) for p in paths]


def _prod_batch(images: list[np.ndarray], cfg: TrainConfig, sampler: SamplerConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Clean patches plus freshly sampled degradation recipes, one per patch."""
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(0, len(images)))]
        top, left = random_patch_coords(rng, img.shape, cfg.patch)
        flip, turns = sample_augmentation(rng)
        clean = augment(crop(img, top, left, cfg.patch), flip, turns)
        recipe = sample_recipe(rng, sampler)
        xs.append(apply_recipe(clean, recipe))
        ys.append(clean)
    return np.stack(xs), np.stack(ys)


def _pair_batch(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Aligned patches from pre-degraded (input, target) pairs."""
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        degraded, clean = pairs[int(rng.integers(0, len(pairs)))]
        top, left = random_patch_coords(rng, clean.shape, cfg.patch)
        flip, turns = sample_augmentation(rng)
        xs.append(augment(crop(degraded, top, left, cfg.patch), flip, turns))
        ys.append(augment(crop(clean, top, left, cfg.patch), flip, turns))
    return np.stack(xs), np.stack(ys)


def _loss(out: Tensor, target: Tensor, kind: str) -> Tensor:
    return loss_psnr(out, target) if kind == "psnr" else loss_l1(out, target)


# ---------------------------------------------------------------------------
# pre-training


def pretrain(cfg: TrainConfig, clean_dir) -> Checkpoint:
    """Train from scratch on (degraded, clean) pairs synthesized on the fly.

    Every patch of every step gets its own randomly sampled recipe, so the
    network sees the whole degradation space in random order and composition.
    Deterministic for a fixed config and seed.
    """
    spec = cfg.model.to_spec()
    _check_patch(cfg.patch, spec)
    images = load_clean_images(clean_dir)
    _check_fits(images, cfg.patch)
    sampler = cfg.task.to_sampler()
    # recipes apply to patch-sized crops; reject oversized kernels now
    # rather than at whichever step first samples one
    kmax = max_sampled_kernel(sampler)
    if kmax > cfg.patch:
        raise ValueError(
            f"patch {cfg.patch} cannot fit sampled kernels up to {kmax}; "
            f"raise patch or cap kernel_size in the task overrides")
    ckpt = build_model(spec, seed=cfg.seed)
    params = ckpt.params
    state = init_adam_state(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    losses: list[float] = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_min)
        x, y = _prod_batch(images, cfg, sampler, rng)
        leaves = wrap_params(params)
        out = forward_tensors(spec, leaves, Tensor(x))
        loss = _loss(out, Tensor(y), cfg.loss)
        grads = backprop(loss, leaves)
        params, state = adamw_step(params, grads, state, lr, cfg.betas,
                                   cfg.weight_decay, cfg.eps)
        losses.append(float(loss.data))
    total = count_params(params)
    ckpt.metadata.update({
        "phase": "pretrain",
        "steps": cfg.steps,
        "seed": cfg.seed,
        "loss_kind": cfg.loss,
        "first_loss": losses[0],
        "final_loss": losses[-1],
        "loss_curve": _curve(losses),
        "tuned_count": total,
        "tuned_fraction": 1.0,
        "train_config": cfg.model_dump(),
    })
    return ckpt


# ---------------------------------------------------------------------------
# fine-tuning


def trainable_ids_for(strategy: str, spec: ModelSpec) -> tuple[str, ...]:
    """Parameter ids updated by the checkpoint-returning strategies."""
    shapes = param_shapes(spec)
    if strategy == "full":
        return tuple(shapes)
    if strategy == "decoder_only":
        return tuple(lid for lid in shapes
                     if lid.startswith("dec.") or lid.startswith("end."))
    if strategy == "bias_norm_only":
        return tuple(lid for lid in shapes if not is_conv_weight(lid))
    raise ValueError(f"strategy {strategy!r} does not train raw checkpoints")


def finetune(cfg: TrainConfig, base: Checkpoint, task_dir,
             plan: RankPlan | None = None,
             report: FaigReport | None = None) -> Checkpoint | AdapterSet:
    """Adapt a frozen pre-trained model to one task directory.

    full / decoder_only / bias_norm_only update checkpoint parameters in
    place (on a copy) and return a Checkpoint. colora and lora_fixed attach
    low-rank factors and return an AdapterSet; colora requires a RankPlan or
    an attribution report to derive one from.
    """
    if cfg.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg.strategy!r}")
    spec = base.spec
    _check_patch(cfg.patch, spec)
    pairs = load_pairs(task_dir)
    _check_fits([c for _, c in pairs], cfg.patch)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    if cfg.strategy in ("colora", "lora_fixed"):
        if cfg.strategy == "colora":
            if plan is None:
                if report is None:
                    raise ValueError("colora needs a rank plan or an attribution report")
                plan = plan_ranks(report.normalized, cfg.alpha, cfg.beta, spec)
        else:
            plan = fixed_rank_plan(spec, cfg.rank)
        adapters = attach(base, plan, seed=cfg.seed)
        arrays = {k: v.copy() for k, v in adapters.trainable_arrays().items()}
        state = init_adam_state(arrays)
        losses: list[float] = []
        for step in range(cfg.steps):
            lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_min)
            x, y = _pair_batch(pairs, cfg, rng)
            leaves = wrap_params(arrays)
            eff = effective_param_tensors(base, adapters, leaves)
            out = forward_tensors(spec, eff, Tensor(x))
            loss = _loss(out, Tensor(y), cfg.loss)
            grads = backprop(loss, leaves)
            arrays, state = adamw_step(arrays, grads, state, lr, cfg.betas,
                                       cfg.weight_decay, cfg.eps)
            losses.append(float(loss.data))
        tuned = tuned_param_count(plan, spec)
        result = adapters.replace_arrays(arrays)
        result.metadata.update({
            "phase": "finetune",
            "strategy": cfg.strategy,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "loss_kind": cfg.loss,
            "first_loss": losses[0],
            "final_loss": losses[-1],
            "loss_curve": _curve(losses),
            "tuned_count": tuned["count"],
            "tuned_fraction": tuned["fraction"],
        })
        return result

    ids = trainable_ids_for(cfg.strategy, spec)
    id_set = set(ids)
    ckpt = base.copy()
    params = ckpt.params
    train_arrays = {k: params[k] for k in ids}
    state = init_adam_state(train_arrays)
    losses = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_min)
        x, y = _pair_batch(pairs, cfg, rng)
        leaves = {k: Tensor(arr, requires_grad=k in id_set)
                  for k, arr in params.items()}
        out = forward_tensors(spec, leaves, Tensor(x))
        loss = _loss(out, Tensor(y), cfg.loss)
        grads = backprop(loss, {k: leaves[k] for k in ids})
        train_arrays, state = adamw_step(train_arrays, grads, state, lr,
                                         cfg.betas, cfg.weight_decay, cfg.eps)
        losses.append(float(loss.data))
    tuned = sum(int(np.prod(params[k].shape)) for k in ids)
    ckpt.metadata = {
        "phase": "finetune",
        "strategy": cfg.strategy,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "loss_kind": cfg.loss,
        "first_loss": losses[0],
        "final_loss": losses[-1],
        "loss_curve": _curve(losses),
        "tuned_count": tuned,
        "tuned_fraction": tuned / count_params(params),
        "base_digest": params_digest(base.params),
    }
    return ckpt
