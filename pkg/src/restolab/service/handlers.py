"""One plain function per endpoint. The FastAPI app and the CLI's in-process
mode both call these; only the transport differs."""
from __future__ import annotations

from pathlib import Path

from .. import colora, faig, metrics, model, train
from ..data import degrade_corpus, load_pairs, make_clean_corpus, make_task_pairs
from ..degrade import SamplerConfig
from . import schemas as S


def _parent_ok(path: str) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise ValueError(f"output directory does not exist: {parent}")


def make_data(req: S.MakeDataRequest) -> S.MakeDataResponse:
    if req.pairs:
        cfg = SamplerConfig(max_depth=req.max_depth, kinds=req.kinds,
                            overrides=req.overrides)
        make_task_pairs(req.out_dir, req.count, cfg, size=req.size,
                        seed=req.seed, threads=req.threads)
    else:
        make_clean_corpus(req.out_dir, req.count, size=req.size,
                          seed=req.seed, threads=req.threads)
    return S.MakeDataResponse(out_dir=req.out_dir, images=req.count, pairs=req.pairs)


def degrade(req: S.DegradeRequest) -> S.DegradeResponse:
    cfg = SamplerConfig(max_depth=req.max_depth, kinds=req.kinds,
                        overrides=req.overrides)
    records = degrade_corpus(req.input_dir, req.output_dir, cfg, seed=req.seed,
                             count=req.count, threads=req.threads)
    return S.DegradeResponse(output_dir=req.output_dir,
                             manifest=str(Path(req.output_dir) / "manifest.jsonl"),
                             written=[r["file"] for r in records])


def pretrain(req: S.PretrainRequest) -> S.PretrainResponse:
    _parent_ok(req.out_checkpoint)
    ckpt = train.pretrain(req.config, req.clean_dir)
    model.save_checkpoint(ckpt, req.out_checkpoint)
    return S.PretrainResponse(checkpoint=req.out_checkpoint,
                              steps=req.config.steps,
                              first_loss=ckpt.metadata["first_loss"],
                              final_loss=ckpt.metadata["final_loss"],
                              params_digest=model.params_digest(ckpt.params))


def finetune(req: S.FinetuneRequest) -> S.FinetuneResponse:
    _parent_ok(req.out_path)
    base = model.load_checkpoint(req.base_checkpoint)
    plan = colora.load_plan(req.plan_path) if req.plan_path else None
    report = faig.load_report(req.report_path) if req.report_path else None
    out = train.finetune(req.config, base, req.task_dir, plan=plan, report=report)
    if isinstance(out, colora.AdapterSet):
        colora.save_adapters(out, req.out_path)
        artifact = "adapters"
        meta = out.metadata
    else:
        model.save_checkpoint(out, req.out_path)
        artifact = "checkpoint"
        meta = out.metadata
    return S.FinetuneResponse(out_path=req.out_path, artifact=artifact,
                              strategy=req.config.strategy,
                              tuned_count=meta["tuned_count"],
                              tuned_fraction=meta["tuned_fraction"],
                              first_loss=meta["first_loss"],
                              final_loss=meta["final_loss"])


def faig_scores(req: S.FaigRequest) -> S.FaigResponse:
    _parent_ok(req.out_report)
    baseline = model.load_checkpoint(req.baseline_checkpoint)
    target = model.load_checkpoint(req.target_checkpoint)
    probe = load_pairs(req.probe_dir)
    report = faig.faig_scores(baseline, target, probe, steps=req.steps)
    faig.save_report(report, req.out_report)
    return S.FaigResponse(report=req.out_report, steps=report.steps,
                          all_zero=report.all_zero,
                          per_stage=report.per_stage,
                          normalized=report.normalized)


def _topology(req: S.PlanRanksRequest) -> model.ModelSpec:
    if req.checkpoint is not None:
        return model.load_checkpoint(req.checkpoint).spec
    if req.model is not None:
        return req.model.to_spec()
    raise ValueError("plan-ranks needs either a checkpoint or a model section")


def plan_ranks(req: S.PlanRanksRequest) -> S.PlanRanksResponse:
    _parent_ok(req.out_plan)
    spec = _topology(req)
    if req.rank is not None:
        plan = colora.fixed_rank_plan(spec, req.rank)
    else:
        if req.scores is not None:
            scores = req.scores
        elif req.report_path is not None:
            scores = faig.load_report(req.report_path).normalized
        else:
            raise ValueError("plan-ranks needs scores, a report, or a fixed rank")
        plan = colora.plan_ranks(scores, req.alpha, req.beta, spec)
    colora.save_plan(plan, req.out_plan)
    acct = colora.tuned_param_count(plan, spec)
    return S.PlanRanksResponse(plan=req.out_plan,
                               per_stage_delta=plan.per_stage_delta,
                               per_layer_rank=plan.per_layer_rank,
                               tuned_count=acct["count"],
                               tuned_fraction=acct["fraction"])


def merge(req: S.MergeRequest) -> S.MergeResponse:
    _parent_ok(req.out_checkpoint)
    base = model.load_checkpoint(req.base_checkpoint)
    adapters = colora.load_adapters(req.adapters, base)
    merged = colora.merge(base, adapters)
    model.save_checkpoint(merged, req.out_checkpoint)
    return S.MergeResponse(checkpoint=req.out_checkpoint,
                           params_digest=model.params_digest(merged.params))


def evaluate(req: S.EvalRequest) -> S.EvalResponse:
    ckpt = model.load_checkpoint(req.checkpoint)
    adapters = colora.load_adapters(req.adapters, ckpt) if req.adapters else None
    report = metrics.evaluate(ckpt, req.task_dir, adapters=adapters)
    if req.out_report:
        _parent_ok(req.out_report)
        metrics.save_report(report, req.out_report)
    return S.EvalResponse(mean_psnr_rgb=report.mean_psnr_rgb,
                          mean_psnr_y=report.mean_psnr_y,
                          images=len(report.per_image),
                          tuned_count=report.tuned_count,
                          tuned_fraction=report.tuned_fraction,
                          wall_clock_sec=report.wall_clock_sec,
                          report_path=req.out_report,
                          per_image=report.per_image)
