"""Request/response bodies for every endpoint.

All paths are server-local: this service is a lab bench for one machine,
not a multi-tenant deployment.
"""
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict

from ..degrade import KINDS
from ..train import ModelConfig, TrainConfig


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(_Body):
    status: str
    version: str


class MakeDataRequest(_Body):
    out_dir: str
    count: int = 16
    size: int = 64
    seed: int = 0
    pairs: bool = False          # clean corpus, or clean+degraded task pairs
    max_depth: int = 6
    kinds: tuple[str, ...] = KINDS
    overrides: dict[str, dict] = {}
    threads: int = 1


class MakeDataResponse(_Body):
    out_dir: str
    images: int
    pairs: bool


class DegradeRequest(_Body):
    input_dir: str
    output_dir: str
    seed: int = 0
    count: int | None = None
    max_depth: int = 6
    kinds: tuple[str, ...] = KINDS
    overrides: dict[str, dict] = {}
    threads: int = 1


class DegradeResponse(_Body):
    output_dir: str
    manifest: str
    written: list[str]


class PretrainRequest(_Body):
    clean_dir: str
    out_checkpoint: str
    config: TrainConfig = TrainConfig()


class PretrainResponse(_Body):
    checkpoint: str
    steps: int
    first_loss: float
    final_loss: float
    params_digest: str


class FinetuneRequest(_Body):
    base_checkpoint: str
    task_dir: str
    out_path: str
    config: TrainConfig = TrainConfig()
    plan_path: str | None = None     # colora: precomputed rank plan
    report_path: str | None = None   # colora: attribution report to plan from


class FinetuneResponse(_Body):
    out_path: str
    artifact: Literal["checkpoint", "adapters"]
    strategy: str
    tuned_count: int
    tuned_fraction: float
    first_loss: float
    final_loss: float


class FaigRequest(_Body):
    baseline_checkpoint: str   # degradation-general reference model
    target_checkpoint: str     # task-adapted model, same topology
    probe_dir: str             # (degraded, clean) pairs the loss is probed on
    steps: int = 100
    out_report: str


class FaigResponse(_Body):
    report: str
    steps: int
    all_zero: bool
    per_stage: dict[str, float]
    normalized: dict[str, float]


class PlanRanksRequest(_Body):
    out_plan: str
    alpha: float = 1.0
    beta: float = 0.2
    report_path: str | None = None        # normalized scores from this report
    scores: dict[str, float] | None = None  # or given inline
    rank: int | None = None               # fixed-rank baseline plan instead
    checkpoint: str | None = None         # topology source, or:
    model: ModelConfig | None = None


class PlanRanksResponse(_Body):
    plan: str
    per_stage_delta: dict[str, float]
    per_layer_rank: dict[str, int]
    tuned_count: int
    tuned_fraction: float


class MergeRequest(_Body):
    base_checkpoint: str
    adapters: str
    out_checkpoint: str


class MergeResponse(_Body):
    checkpoint: str
    params_digest: str


class EvalRequest(_Body):
    checkpoint: str
    task_dir: str
    adapters: str | None = None
    out_report: str | None = None


class EvalResponse(_Body):
    mean_psnr_rgb: float
    mean_psnr_y: float
    images: int
    tuned_count: int | None
    tuned_fraction: float | None
    wall_clock_sec: float
    report_path: str | None
    per_image: list[dict]
