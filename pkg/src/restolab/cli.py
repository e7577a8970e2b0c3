"""Command-line front end.

By default every subcommand runs in process. With --server URL the same
request body is POSTed to a running service instead, so scripts can move
between local and remote execution without changing shape.

Heavy imports happen inside the dispatch path: thread caps must land in the
environment before the numerical stack loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys


class CliError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="restolab",
        description="Synthetic degradation, restoration training, attribution, "
                    "and low-rank adapter planning.")
    p.add_argument("--config", metavar="FILE",
                   help="training config file (nested key-value sections)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed everywhere it applies")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded everything for bit-stable output")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for data generation (default 1)")
    p.add_argument("--server", metavar="URL", default=None,
                   help="send the request to a running service instead")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    d = sub.add_parser("make-data", help="synthesize a clean corpus or task pairs")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--count", type=int, default=16)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--pairs", action="store_true",
                   help="also degrade, producing clean/ + degraded/ twins")
    d.add_argument("--max-depth", type=int, default=None)
    d.add_argument("--kinds", default=None, help="comma list, e.g. noise,jpeg")

    d = sub.add_parser("degrade", help="degrade an image folder, with manifest")
    d.add_argument("--input-dir", required=True)
    d.add_argument("--output-dir", required=True)
    d.add_argument("--count", type=int, default=None)
    d.add_argument("--max-depth", type=int, default=None)
    d.add_argument("--kinds", default=None, help="comma list, e.g. blur,rain")

    d = sub.add_parser("pretrain", help="train from scratch on synthetic pairs")
    d.add_argument("--clean-dir", required=True)
    d.add_argument("--out", required=True, metavar="CHECKPOINT")
    d.add_argument("--steps", type=int, default=None)

    d = sub.add_parser("finetune", help="adapt a checkpoint to one task")
    d.add_argument("--base", required=True, metavar="CHECKPOINT")
    d.add_argument("--task-dir", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--strategy", default=None,
                   choices=["full", "colora", "lora_fixed", "decoder_only",
                            "bias_norm_only"])
    d.add_argument("--steps", type=int, default=None)
    d.add_argument("--plan", default=None, metavar="FILE")
    d.add_argument("--report", default=None, metavar="FILE")
    d.add_argument("--rank", type=int, default=None)
    d.add_argument("--alpha", type=float, default=None)
    d.add_argument("--beta", type=float, default=None)

    d = sub.add_parser("faig", help="attribute the gap between two checkpoints")
    d.add_argument("--baseline", required=True, metavar="CHECKPOINT")
    d.add_argument("--target", required=True, metavar="CHECKPOINT")
    d.add_argument("--probe-dir", required=True)
    d.add_argument("--steps", type=int, default=100)
    d.add_argument("--out", required=True, metavar="REPORT")

    d = sub.add_parser("plan-ranks", help="derive per-layer adapter ranks")
    d.add_argument("--out", required=True, metavar="PLAN")
    d.add_argument("--report", default=None, metavar="FILE")
    d.add_argument("--scores", default=None, metavar="JSON",
                   help='inline normalized stage scores, e.g. \'{"middle":0.1}\'')
    d.add_argument("--rank", type=int, default=None,
                   help="uniform fixed-rank baseline instead of scores")
    d.add_argument("--alpha", type=float, default=1.0)
    d.add_argument("--beta", type=float, default=0.2)
    d.add_argument("--checkpoint", default=None,
                   help="topology source (otherwise the config's model section)")

    d = sub.add_parser("merge", help="fold adapters into a plain checkpoint")
    d.add_argument("--base", required=True, metavar="CHECKPOINT")
    d.add_argument("--adapters", required=True, metavar="FILE")
    d.add_argument("--out", required=True, metavar="CHECKPOINT")

    d = sub.add_parser("eval", help="PSNR over a paired task directory")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--task-dir", required=True)
    d.add_argument("--adapters", default=None, metavar="FILE")
    d.add_argument("--out", default=None, metavar="REPORT")

    d = sub.add_parser("serve", help="run the HTTP service")
    d.add_argument("--host", default="127.0.0.1")
    d.add_argument("--port", type=int, default=8023)

    return p


def _cap_threads(n: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _load_train_config(args):
    from .train import TrainConfig, load_train_config
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    for field in ("strategy", "steps", "rank", "alpha", "beta"):
        value = getattr(args, field, None)
        if value is not None:
            updates[field] = value
    if updates:
        cfg = TrainConfig(**{**cfg.model_dump(), **updates})
    return cfg


def _task_fields(args, cfg) -> dict:
    out = {"max_depth": cfg.task.max_depth, "kinds": list(cfg.task.kinds),
           "overrides": cfg.task.overrides}
    if getattr(args, "max_depth", None) is not None:
        out["max_depth"] = args.max_depth
    if getattr(args, "kinds", None):
        out["kinds"] = [k.strip() for k in args.kinds.split(",") if k.strip()]
    return out


def _build_request(args) -> tuple[str, dict]:
    cfg = _load_train_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    threads = 1 if args.deterministic else args.threads
    cmd = args.command

    if cmd == "make-data":
        return "/make-data", {"out_dir": args.out_dir, "count": args.count,
                              "size": args.size, "seed": seed,
                              "pairs": args.pairs, "threads": threads,
                              **_task_fields(args, cfg)}
    if cmd == "degrade":
        return "/degrade", {"input_dir": args.input_dir,
                            "output_dir": args.output_dir,
                            "seed": seed, "count": args.count,
                            "threads": threads, **_task_fields(args, cfg)}
    if cmd == "pretrain":
        return "/pretrain", {"clean_dir": args.clean_dir,
                             "out_checkpoint": args.out,
                             "config": cfg.model_dump()}
    if cmd == "finetune":
        return "/finetune", {"base_checkpoint": args.base,
                             "task_dir": args.task_dir,
                             "out_path": args.out,
                             "config": cfg.model_dump(),
                             "plan_path": args.plan,
                             "report_path": args.report}
    if cmd == "faig":
        return "/faig", {"baseline_checkpoint": args.baseline,
                         "target_checkpoint": args.target,
                         "probe_dir": args.probe_dir,
                         "steps": args.steps, "out_report": args.out}
    if cmd == "plan-ranks":
        scores = json.loads(args.scores) if args.scores else None
        return "/plan-ranks", {"out_plan": args.out, "alpha": args.alpha,
                               "beta": args.beta, "report_path": args.report,
                               "scores": scores, "rank": args.rank,
                               "checkpoint": args.checkpoint,
                               "model": cfg.model.model_dump()}
    if cmd == "merge":
        return "/merge", {"base_checkpoint": args.base,
                          "adapters": args.adapters,
                          "out_checkpoint": args.out}
    if cmd == "eval":
        return "/eval", {"checkpoint": args.checkpoint,
                         "task_dir": args.task_dir,
                         "adapters": args.adapters,
                         "out_report": args.out}
    raise CliError(f"unknown command {cmd!r}")


_LOCAL_ROUTES = {
    "/make-data": ("MakeDataRequest", "make_data"),
    "/degrade": ("DegradeRequest", "degrade"),
    "/pretrain": ("PretrainRequest", "pretrain"),
    "/finetune": ("FinetuneRequest", "finetune"),
    "/faig": ("FaigRequest", "faig_scores"),
    "/plan-ranks": ("PlanRanksRequest", "plan_ranks"),
    "/merge": ("MergeRequest", "merge"),
    "/eval": ("EvalRequest", "evaluate"),
}


def _send(path: str, body: dict, server: str | None) -> dict:
    if server:
        import httpx
        url = server.rstrip("/") + path
        try:
            resp = httpx.post(url, json=body, timeout=None)
        except httpx.HTTPError as exc:
            raise CliError(f"cannot reach {url}: {exc}") from exc
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise CliError(f"{path} failed ({resp.status_code}): {detail}")
        return resp.json()
    from .service import handlers
    from .service import schemas
    schema_name, fn_name = _LOCAL_ROUTES[path]
    request = getattr(schemas, schema_name)(**body)
    response = getattr(handlers, fn_name)(request)
    return response.model_dump()


def _serve(args) -> int:
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _cap_threads(1 if args.deterministic else max(1, args.threads))
    try:
        if args.command == "serve":
            return _serve(args)
        path, body = _build_request(args)
        result = _send(path, body, args.server)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    json.dump(result, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
