"""Command-line entry point: ``tomebind generate|analyze|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ToMeError


def _lambda(value: str):
    return "auto" if value == "auto" else float(value)


def _add_generate(sub):
    p = sub.add_parser("generate", help="generate one image")
    p.add_argument("--prompt")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, dest="sampling_steps")
    p.add_argument("--guidance", type=float, dest="guidance_scale")
    p.add_argument("--lambda", type=_lambda, dest="lambda_sem", help='semantic loss weight, or "auto"')
    p.add_argument("--t-opt", type=float, dest="t_opt_fraction", help="fraction of steps that update tokens")
    p.add_argument("--step-size", type=float)
    p.add_argument("--entropy-weight", type=float, help="weight of the entropy loss (0 drops it)")
    p.add_argument("--no-tome", action="store_true", help="disable token merging")
    p.add_argument("--no-ets", action="store_true", help="disable end token substitution")
    p.add_argument("--no-opt", action="store_true", help="disable the token update")
    p.add_argument("--ablation", help="start from a preset: A-F or ours")
    p.add_argument("--dump-attention", action="store_true")
    p.add_argument("--dump-every", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("--save-config", help="write the resolved config here and continue")
    p.add_argument("--model", dest="model_ref", help='"stub" or a diffusers SDXL id/path')
    p.add_argument("--device")
    p.set_defaults(func=cmd_generate)


def resolve_config(args):
    from .optimizer import OptimizerConfig
    from .pipeline import GenerationConfig, ablation

    cfg = GenerationConfig.load(args.config) if args.config else GenerationConfig()
    if args.ablation:
        keep = {k: v for k, v in cfg.to_dict().items() if k not in ("enable_tome", "enable_ets", "label")}
        cfg = ablation(args.ablation, **keep)
    top = {k: getattr(args, k) for k in ("prompt", "seed", "sampling_steps", "guidance_scale", "dump_every",
                                         "output_dir", "model_ref", "device") if getattr(args, k) is not None}
    if args.dump_attention:
        top["dump_attention"] = True
    if args.no_tome:
        top["enable_tome"] = False
    if args.no_ets:
        top["enable_ets"] = False
    opt = {}
    if args.lambda_sem == "auto":
        top["calibrate_lambda"] = True
    elif args.lambda_sem is not None:
        opt["lambda_sem"] = args.lambda_sem
    if args.t_opt_fraction is not None:
        opt["t_opt_fraction"] = args.t_opt_fraction
    if args.step_size is not None:
        opt["step_size"] = args.step_size
    if args.entropy_weight is not None:
        opt["entropy_weight"] = args.entropy_weight
    if args.no_opt:
        opt["enabled"] = False
    optimizer = OptimizerConfig(**{**cfg.optimizer.to_dict(), **opt})
    return replace(cfg, **top, optimizer=optimizer)


def cmd_generate(args):
    from .pipeline import generate

    cfg = resolve_config(args)
    if not cfg.prompt:
        raise SystemExit("a prompt is required (--prompt or config file)")
    if args.save_config:
        cfg.save(args.save_config)
    record = generate(cfg)
    out = {"run_id": record.run_id, "images": record.image_paths, "optimized_steps": record.optimized_steps,
           "aborted": record.optimization_aborted, "timings": record.timings}
    if record.loss_trace:
        out["final_loss"] = record.loss_trace[-1]
    print(json.dumps(out, indent=2))


def _encoder(ref: str, subfolder: str | None):
    from .encoders import ClipTextEncoder, StubTextEncoder

    if ref == "stub" or ref.startswith("stub:"):
        return StubTextEncoder(seed=int(ref.split(":")[1]) if ":" in ref else 0)
    return ClipTextEncoder.from_pretrained(ref, subfolder=subfolder)


def cmd_additivity(args):
    from .evaluation import additivity_report

    quads = [tuple(q.split(",")) for q in args.quad] if args.quad else None
    kw = {"quadruples": quads} if quads else {}
    report = additivity_report(_encoder(args.encoder, args.subfolder), template=args.template, row=args.row,
                               out_dir=args.out, **kw)
    print(json.dumps(report.statistics["cosines"], indent=2))


def cmd_entropy(args):
    from .adapters import load_backend
    from .evaluation import entropy_report
    from .pipeline import ablation, generate

    backend = load_backend(args.model, args.device)
    maps, labels = [], {}
    for seed in range(args.seeds):
        cfg = ablation("A", prompt=args.prompt, seed=seed, sampling_steps=args.steps, output_dir=None,
                       dump_attention=True, model_ref=args.model)
        rec = generate(cfg, backend)
        maps += rec.maps
        labels.update({e["position"]: e["token"] for e in rec.attention})
    report = entropy_report(maps, labels, out_dir=args.out)
    rows = [{"position": p, "token": labels.get(int(p), ""), "entropy": v}
            for p, v in report.statistics["by_position"].items()]
    print(json.dumps(rows, indent=2))


def cmd_coupling(args):
    from .adapters import load_backend
    from .evaluation import HttpDetectorClient, coupling_report

    start, end = (int(x) for x in args.token_span.split(":"))
    detector = HttpDetectorClient(args.detector_url)
    report = coupling_report(args.prompt, (start, end), args.object, range(args.seeds),
                             load_backend(args.model, args.device), detector, threshold=args.threshold,
                             out_dir=args.out)
    print(json.dumps(report.statistics, indent=2))


def cmd_timing(args):
    from .pipeline import RunRecord, format_timing_table, timing_report

    records = []
    for path in args.records:
        p = Path(path)
        records.append(RunRecord.load(p / "record.json" if p.is_dir() else p))
    print(format_timing_table(timing_report(records)))


def cmd_benchmark(args):
    from .evaluation import build_benchmark
    from .evaluation.benchmark import write_benchmark

    pairs = None
    if args.pairs:
        data = json.loads(Path(args.pairs).read_text())
        pairs = data["pairs"] if isinstance(data, dict) else data
    prompts = build_benchmark(pairs)
    if args.out:
        write_benchmark(prompts, args.out)
    for p in prompts:
        print(f"{p.id}\t{p.rendered}")


def cmd_score(args):
    from .evaluation import HttpRubricScorer, ScoringItem, load_rubric, score_images

    items = [ScoringItem(d["prompt_id"], d["image_ref"], d["prompt_text"])
             for d in json.loads(Path(args.manifest).read_text())]
    client = HttpRubricScorer(endpoint=args.endpoint, model=args.scorer_model, key_env=args.key_env)
    records = score_images(items, client, concurrency=args.concurrency, retries=args.retries,
                           rubric=load_rubric(args.rubric))
    payload = [r.to_dict() for r in records]
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    ok = [r.score for r in records if r.ok]
    summary = {"images": len(records), "scored": len(ok), "mean": sum(ok) / len(ok) if ok else None}
    print(json.dumps(summary, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomebind", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)

    an = sub.add_parser("analyze", help="embedding and attention analyses").add_subparsers(dest="kind", required=True)
    p = an.add_parser("additivity", help="word-offset cosine and PCA plot")
    p.add_argument("--encoder", default="stub", help='"stub" or a CLIP text model id/path')
    p.add_argument("--subfolder")
    p.add_argument("--quad", action="append", help="a,b,c,d; compares a-b with c-d")
    p.add_argument("--template", default="a photo of a {word}")
    p.add_argument("--row", choices=["word", "eot"], default="word")
    p.add_argument("--out")
    p.set_defaults(func=cmd_additivity)

    p = an.add_parser("entropy", help="attention entropy by token position")
    p.add_argument("--prompt", required=True)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--model", default="stub")
    p.add_argument("--device")
    p.add_argument("--out")
    p.set_defaults(func=cmd_entropy)

    p = an.add_parser("coupling", help="DetScore for full prompt, single token and end-token block")
    p.add_argument("--prompt", required=True)
    p.add_argument("--token-span", required=True, help="start:end token rows, e.g. 7:8")
    p.add_argument("--object", required=True)
    p.add_argument("--detector-url", required=True)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--model", default="stub")
    p.add_argument("--device")
    p.add_argument("--out")
    p.set_defaults(func=cmd_coupling)

    p = an.add_parser("timing", help="per-phase timing table from run records")
    p.add_argument("records", nargs="+", help="run directories or record.json files")
    p.set_defaults(func=cmd_timing)

    ev = sub.add_parser("eval", help="benchmark and scoring").add_subparsers(dest="kind", required=True)
    p = ev.add_parser("benchmark", help="render the object-binding benchmark prompts")
    p.add_argument("--pairs", help="JSON list of pairs (default: shipped set)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = ev.add_parser("score", help="score images with the rubric scorer")
    p.add_argument("--manifest", required=True, help="JSON list of {prompt_id, image_ref, prompt_text}")
    p.add_argument("--rubric")
    p.add_argument("--endpoint", default="https://api.openai.com/v1/chat/completions")
    p.add_argument("--scorer-model", default="gpt-4o")
    p.add_argument("--key-env", default="OPENAI_API_KEY")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except ToMeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
