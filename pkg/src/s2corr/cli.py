"""Command-line entry point: ``s2corr {refine,gradcheck,train-synth,bench,tile-infer}``.

Exit codes: 0 ok, 1 check failure, 2 input format, 3 shape, 4 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, infer, numerics, refine, synth
from .correlation import DEFAULT_D_F, FeatureGrid, TextEmbeddings
from .numerics import DimensionError, FormatError
from .scan import DEFAULT_GAMMA, DEFAULT_HEADS, DEFAULT_NUM_CHUNKS

EXIT_OK, EXIT_CHECK, EXIT_FORMAT, EXIT_SHAPE, EXIT_USAGE = 0, 1, 2, 3, 4

log = logging.getLogger("s2corr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-f", type=int, default=DEFAULT_D_F, help="correlation embedding dim (default: %(default)s)")
    chunks = g.add_mutually_exclusive_group()
    chunks.add_argument("--chunk-len", type=int, default=None, help="tokens per chunk (default: derived)")
    chunks.add_argument("--num-chunks", type=int, default=None,
                        help=f"total chunks over the grid, L = HW/n (default: {DEFAULT_NUM_CHUNKS})")
    chunks.add_argument("--chunks-per-row", type=int, default=None, help="chunks per grid row, L = W/n (default: unset)")
    g.add_argument("--eta-cross", type=float, default=1.0, help="state scale at row boundaries (default: %(default)s)")
    g.add_argument("--snake", action=argparse.BooleanOptionalAction, default=True,
                   help="alternate row direction")
    g.add_argument("--gamma", type=float, default=DEFAULT_GAMMA, help="geometric decay prior (default: %(default)s)")
    g.add_argument("--heads", type=int, default=DEFAULT_HEADS, help="decay-prior heads K (default: %(default)s)")
    g.add_argument("--blocks", type=int, default=refine.DEFAULT_BLOCKS, help="spatial blocks (default: %(default)s)")


def _add_run_flags(p: argparse.ArgumentParser, threads_default: int | None = 1) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    g.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="compute dtype (default: %(default)s)")
    g.add_argument("--threads", type=int, default=threads_default,
                   help="worker threads (default: %(default)s)" if threads_default else "worker threads (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s2corr", description="Text-image correlation refinement with selective scans.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("refine", help="refine a feature bundle into logits and labels")
    p.add_argument("--bundle", required=True, help="input feature bundle directory")
    p.add_argument("--params", default=None, help="parameter bundle (default: random init from --seed)")
    p.add_argument("--out", required=True, help="output bundle directory")
    _add_model_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scan-draws", type=int, default=20, help="random scan draws (default: %(default)s)")
    p.add_argument("--pipeline-draws", type=int, default=5, help="random pipeline draws (default: %(default)s)")
    p.add_argument("--inject-fault", choices=("sign",), default=None, help=argparse.SUPPRESS)
    _add_run_flags(p)

    p = sub.add_parser("train-synth", help="train on synthetic domain-shifted correlation maps")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--steps", type=int, default=500, help="optimizer steps (default: %(default)s)")
    p.add_argument("--lr", type=float, default=2e-4, help="AdamW learning rate (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="AdamW weight decay (default: %(default)s)")
    p.add_argument("--grid", type=int, default=16, help="square token grid side (default: %(default)s)")
    p.add_argument("--num-classes", type=int, default=8, help="vocabulary size (default: %(default)s)")
    p.add_argument("--feat-dim", type=int, default=16, help="feature dim d (default: %(default)s)")
    p.add_argument("--noise-sigma", type=float, default=0.8, help="Gaussian corruption (default: %(default)s)")
    p.add_argument("--spurious-patches", type=int, default=4, help="wrong-class patches (default: %(default)s)")
    _add_model_flags(p)
    _add_run_flags(p)
    p.set_defaults(d_f=16)

    p = sub.add_parser("bench", help="vocabulary-scaling and chunk-throughput benchmarks")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--kind", choices=("vocab", "chunk"), default="vocab", help="benchmark (default: %(default)s)")
    p.add_argument("--sizes", type=_int_list, default=[32, 64, 128, 256], help="N_C values (default: 32,64,128,256)")
    p.add_argument("--chunk-lens", type=_int_list, default=[4, 8, 16], help="chunk lengths (default: 4,8,16)")
    p.add_argument("--grid", type=int, default=16, help="square token grid side (default: %(default)s)")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions (default: %(default)s)")
    _add_model_flags(p)
    _add_run_flags(p, threads_default=None)
    p.set_defaults(d_f=32)

    p = sub.add_parser("tile-infer", help="sliding-window inference over a large canvas")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bundle", default=None, help="feature bundle covering the whole canvas (default: unset)")
    p.add_argument("--params", default=None, help="parameter bundle (default: random init from --seed)")
    p.add_argument("--stub-constant", type=float, default=None,
                   help="use a constant-logit stub model instead of a bundle (default: unset)")
    p.add_argument("--stub-classes", type=int, default=4, help="classes for the stub (default: %(default)s)")
    p.add_argument("--kernel", type=int, default=448, help="window side in pixels (default: %(default)s)")
    p.add_argument("--overlap", type=float, default=0.333, help="window overlap ratio (default: %(default)s)")
    p.add_argument("--out-res", type=_out_res, default=(448, 896), help="canvas HxW (default: 448x896)")
    _add_model_flags(p)
    _add_run_flags(p)
    return parser


# -- helpers ------------------------------------------------------------------------------------

def _dtype(args) -> type:
    return np.float32 if args.dtype == "f32" else np.float64


def _pipeline_config(args) -> refine.PipelineConfig:
    num_chunks = args.num_chunks
    if args.chunk_len is None and args.chunks_per_row is None and num_chunks is None:
        num_chunks = DEFAULT_NUM_CHUNKS
    return refine.PipelineConfig(
        d_f=args.d_f, heads=args.heads, chunk_len=args.chunk_len, num_chunks=num_chunks,
        chunks_per_row=args.chunks_per_row, eta_cross=args.eta_cross, snake=args.snake,
        gamma=args.gamma, blocks=args.blocks, seed=args.seed,
    )


def load_feature_bundle(path, dtype=np.float64):
    """Read visual/text/domain features; returns (FeatureGrid, TextEmbeddings, DomainTexts)."""
    tensors, data = numerics.load_bundle(path)
    for name in ("visual_features", "text_embeddings"):
        if name not in tensors:
            raise FormatError(f"bundle missing required entry '{name}'")
    names = data.get("class_names")
    if names is None:
        raise FormatError("bundle missing required entry 'class_names'")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError("'class_names' must be a JSON array of strings")
    fv = tensors["visual_features"].astype(dtype)
    ft = tensors["text_embeddings"].astype(dtype)
    if fv.ndim != 2:
        raise DimensionError(f"'visual_features' must be HW x d, got {fv.shape}")
    if ft.ndim != 2:
        raise DimensionError(f"'text_embeddings' must be N_C x d, got {ft.shape}")
    if "grid" in data:
        height, width = (int(v) for v in data["grid"])
    else:
        side = math.isqrt(fv.shape[0])
        if side * side != fv.shape[0]:
            raise FormatError("bundle has no 'grid' entry and visual_features is not square")
        height = width = side
    if height * width != fv.shape[0]:
        raise DimensionError(f"'visual_features' has {fv.shape[0]} rows, grid {height}x{width}")
    if ft.shape[1] != fv.shape[1]:
        raise DimensionError(f"'text_embeddings' dim {ft.shape[1]} != 'visual_features' dim {fv.shape[1]}")
    if len(names) != ft.shape[0]:
        raise DimensionError(f"'class_names' has {len(names)} entries, 'text_embeddings' {ft.shape[0]} rows")
    if "domain_text_embeddings" in tensors:
        dt = tensors["domain_text_embeddings"].astype(dtype)
        if dt.ndim != 2 or dt.shape[1] != fv.shape[1]:
            raise DimensionError(f"'domain_text_embeddings' shape {dt.shape} incompatible with dim {fv.shape[1]}")
    else:
        dt = np.zeros((1, fv.shape[1]), dtype)
    return FeatureGrid(height, width, fv), TextEmbeddings(ft, names), refine.DomainTexts(dt)


def _params_for(args, cfg, d, num_classes, dtype) -> refine.PipelineParams:
    if args.params:
        params, _ = refine.load_pipeline_params(args.params)
        if params.lift.P.shape[1] != num_classes or params.mod.img_proj.shape[1] != d:
            raise DimensionError(f"parameter bundle expects {params.lift.P.shape[1]} classes / "
                                 f"dim {params.mod.img_proj.shape[1]}, features have {num_classes} / {d}")
    else:
        params = refine.PipelineParams.init(cfg, d, num_classes, numerics.derive_rng(args.seed, "params"))
    return gradcheck.cast_params(params, dtype)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


# -- subcommands ------------------------------------------------------------------------------

def cmd_refine(args) -> int:
    dtype = _dtype(args)
    fv, ft, dt = load_feature_bundle(args.bundle, dtype)
    cfg = _pipeline_config(args)
    params = _params_for(args, cfg, fv.dim, ft.num_classes, dtype)
    plan = cfg.plan(fv.height, fv.width)
    print(f"resolved chunk_len={plan.chunk_len}" + (f" (clamped from {plan.requested_len})" if plan.clamped else ""))
    res = refine.forward(fv, ft, dt, params, plan, threads=max(1, args.threads))
    tensors = {
        "logits": res.logits,
        "labels": res.labels.astype(np.float64),
        "corr_initial": res.initial.values,
        "corr_spatial": res.spatial.values,
        "corr_class": res.refined.values,
    }
    numerics.save_bundle(args.out, tensors, {
        "class_names": ft.class_names, "grid": [fv.height, fv.width], "chunk_len": plan.chunk_len,
        "eta_cross": plan.eta_cross, "snake": plan.snake, "seed": args.seed, "dtype": args.dtype,
    })
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = _dtype(args)
    if dtype == np.float32:
        print(f"dtype f32: tolerances relaxed to {gradcheck.F32_TOL:g}")
    results = [
        gradcheck.check_scan(args.scan_draws, args.seed, dtype=dtype, fault=args.inject_fault),
        gradcheck.check_pipeline(args.pipeline_draws, args.seed, dtype=dtype, fault=args.inject_fault),
    ]
    ok = True
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.suite}: max relative error {r.max_rel_error:.3e} (tol {r.tolerance:g}, "
              f"{r.entries} entries, worst {r.worst})")
        for name in r.failures:
            print(f"  failing parameter: {name}")
        ok = ok and r.ok
    return EXIT_OK if ok else EXIT_CHECK


def cmd_train_synth(args) -> int:
    cfg = synth.SynthConfig(height=args.grid, width=args.grid, num_classes=args.num_classes, d=args.feat_dim,
                            d_f=args.d_f, noise_sigma=args.noise_sigma, spurious_patches=args.spurious_patches,
                            seed=args.seed)
    report = synth.train_denoise(cfg, args.steps, lr=args.lr, weight_decay=args.weight_decay,
                                 pipeline=_pipeline_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    body = report.to_dict()
    body.pop("seconds_per_step")
    body["timing"] = {"seconds_per_step": report.seconds_per_step, "machine": synth.machine_fingerprint()}
    _write_json(out / "train_report.json", body)
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(report.losses)]
    (out / "train_loss.csv").write_text("\n".join(lines) + "\n")
    print(f"loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}; raw acc {report.raw_accuracy:.4f}, "
          f"refined acc {report.refined_accuracy_final:.4f}")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_bench(args) -> int:
    if args.kind == "vocab":
        if len(args.sizes) < 3:
            raise UsageError("need >= 3 sizes")
        report = synth.bench_vocab_scaling(args.sizes, args.reps, height=args.grid, width=args.grid,
                                           d_f=args.d_f, seed=args.seed)
    else:
        report = synth.bench_chunk_speed(args.chunk_lens, args.grid, args.grid, d_f=args.d_f, reps=args.reps,
                                         threads=args.threads, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"bench_{args.kind}.json", report.to_dict())
    (out / f"bench_{args.kind}.csv").write_text("\n".join(report.csv_lines()) + "\n")
    for name, slope in report.slopes.items():
        print(f"{name}: log-log slope {slope:.3f}")
    return EXIT_OK


def cmd_tile_infer(args) -> int:
    h, w = args.out_res
    try:
        tcfg = infer.TileConfig(args.kernel, args.overlap, h, w)
    except ValueError as exc:
        raise UsageError(str(exc))
    names: list[str]
    if args.stub_constant is not None:
        n = args.stub_classes
        logits = np.zeros(n)
        logits[0] = args.stub_constant
        names = [f"class_{j}" for j in range(n)]

        def model(y0, x0, k):
            return np.broadcast_to(logits, (k, k, n))
    elif args.bundle:
        dtype = _dtype(args)
        fv, ft, dt = load_feature_bundle(args.bundle, dtype)
        names = ft.class_names
        if h % fv.height or w % fv.width or h // fv.height != w // fv.width:
            raise DimensionError(f"canvas {h}x{w} is not an integer multiple of token grid {fv.height}x{fv.width}")
        patch = h // fv.height
        if args.kernel % patch:
            raise UsageError(f"kernel {args.kernel} is not a multiple of the patch size {patch}")
        kt = args.kernel // patch
        cfg = _pipeline_config(args)
        params = _params_for(args, cfg, fv.dim, ft.num_classes, dtype)
        plan = cfg.plan(kt, kt)
        grid = fv.values.reshape(fv.height, fv.width, fv.dim)

        def model(y0, x0, k):
            # window origins off the patch lattice snap to the nearest token
            ty = min(round(y0 / patch), fv.height - kt)
            tx = min(round(x0 / patch), fv.width - kt)
            win = FeatureGrid(kt, kt, grid[ty : ty + kt, tx : tx + kt].reshape(-1, fv.dim))
            out = refine.forward(win, ft, dt, params, plan, threads=max(1, args.threads)).logits
            return infer.bilinear_upsample(out.reshape(kt, kt, -1), k, k)
    else:
        raise UsageError("tile-infer needs --bundle or --stub-constant")
    pred = infer.tiled_infer(model, tcfg)
    out = Path(args.out)
    numerics.save_bundle(out, {"labels": pred.labels.astype(np.float64), "logits": pred.logits,
                               "coverage": pred.coverage},
                         {"class_names": names, "kernel": args.kernel, "overlap": args.overlap, "out_res": [h, w]})
    counts = np.bincount(pred.labels.reshape(-1), minlength=len(names))
    print("label histogram: " + ", ".join(f"{names[j]}={int(c)}" for j, c in enumerate(counts) if c))
    return EXIT_OK


COMMANDS = {
    "refine": cmd_refine, "gradcheck": cmd_gradcheck, "train-synth": cmd_train_synth,
    "bench": cmd_bench, "tile-infer": cmd_tile_infer,
}


def main(argv=None) -> int:
    level = os.environ.get("S2CORR_LOG", "WARNING").upper()
    logging.basicConfig(level=level if level in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL") else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"s2corr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"s2corr {args.command}: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DimensionError as exc:
        print(f"s2corr {args.command}: shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
