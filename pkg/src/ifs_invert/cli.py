"""Command-line interface: ``ifs-invert <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, chaos_gen, config, eval_harness, imageio, optimizer, pipeline, plotting
from .errors import CodecError, DivergenceError, IFSError
from .ifs_core import dumps_code, load_code, save_code, svd_factors
from .objective import LossWeights
from .splat_render import FULL_VIEW, ViewWindow, attractor_transform, render_eval

logger = logging.getLogger("ifs_invert")

UNDER_BUDGET_MARK = "▲"


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _count(value: str) -> int:
    # accepts 5e6 as well as 5000000
    try:
        n = int(float(value))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _add_render_args(p, size=256):
    p.add_argument("--size", type=int, default=size, help="output side in pixels")
    p.add_argument("--points", type=_count, default=5_000_000, help="in-view point budget")
    p.add_argument("--supersample", type=int, default=8)
    p.add_argument("--time-cap", type=float, default=60.0, help="seconds per view")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-invert", action="store_true", help="write white fractal on black")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ifs-invert", description="Recover iterated-function-system fractal codes from images.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $IFS_INVERT_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("invert", help="fit a fractal code to an image")
    p.add_argument("--input", required=True, help="PNG image (dark fractal on light background)")
    p.add_argument("--out", required=True, help="code file for the best code found")
    p.add_argument("--config", help="key=value config file with [run] and [loss] sections")
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int, help="number of maps")
    p.add_argument("--batch", type=int, dest="B", help="trajectories per iteration")
    p.add_argument("--length", type=int, dest="L", help="steps per trajectory")
    p.add_argument("--warmup", type=int, dest="w", help="discarded steps per trajectory")
    p.add_argument("--canvas", type=int, help="optimisation canvas side (power of two)")
    p.add_argument("--supersample", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-sa", action="store_true", help="pure gradient descent")
    p.add_argument("--no-gradients", action="store_true", help="annealing only, energy = full loss")
    p.add_argument("--noisy-gradients", type=float, metavar="SIGMA", help="add Gaussian noise to gradients")
    p.add_argument("--naive-param", action="store_true", help="unconstrained 6-scalar maps, regulariser x100")
    p.add_argument("--no-multisample", action="store_true", help="render without supersampling")
    p.add_argument("--moments", action="store_true", help="match image moments instead of pixels")
    p.add_argument("--truncate-warmup", action="store_true", help="no parameter gradient from warm-up steps")
    p.add_argument("--block-normalization-grad", action="store_true",
                   help="treat the per-iteration centring transform as a constant in the reverse pass")
    for term in ("mse", "ssim", "lpips", "reg", "mip"):
        p.add_argument(f"--loss-{term}", type=_on_off, metavar="on|off")
    p.add_argument("--no-invert", action="store_true", help="input is a light fractal on a dark background")
    p.add_argument("--no-pad", action="store_true", help="do not re-pad the input")

    p = sub.add_parser("render", help="render a code file")
    p.add_argument("--code", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--view", type=float, nargs=3, metavar=("CX", "CY", "HALF_EXTENT"))
    _add_render_args(p)

    p = sub.add_parser("zoom", help="render a zoomed window of a code file")
    p.add_argument("--code", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--factor", type=float, required=True)
    p.add_argument("--center", type=float, nargs=2, metavar=("CX", "CY"), default=None,
                   help="window centre in normalised coordinates (default: a point on the attractor)")
    _add_render_args(p)

    p = sub.add_parser("eval", help="score recovered codes against ground truth")
    p.add_argument("--gt", required=True, help="directory of ground-truth code files")
    p.add_argument("--recovered", required=True, help="directory of recovered code files (same names)")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--points", type=_count, default=5_000_000)
    p.add_argument("--time-cap", type=float, default=60.0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--supersample", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-suite", help="generate a random test suite")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=1024, help="reference PNG side")
    p.add_argument("--points", type=_count, default=5_000_000)
    p.add_argument("--supersample", type=int, default=1,
                   help="reference supersampling (1 gives binary silhouettes, the inversion input format)")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--warmup", type=int, default=4)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--supersample", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-6, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--out", help="optional per-coordinate CSV")
    return parser


def _resolve_threads(n):
    if n is None and os.environ.get("IFS_INVERT_THREADS"):
        try:
            n = int(os.environ["IFS_INVERT_THREADS"])
        except ValueError:
            raise UsageError("IFS_INVERT_THREADS must be an integer") from None
    return chaos_gen.set_threads(n)


def _existing(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_code_arg(path):
    _existing(path, "code file")
    try:
        return load_code(path)[0]
    except CodecError as exc:
        raise UsageError(str(exc)) from exc


# -- invert ----------------------------------------------------------------------

def resolve_invert_config(args, input_side: int | None = None) -> tuple[optimizer.RunConfig, LossWeights]:
    """Defaults, then the config file, then flags; ablation switches last."""
    run, loss = {}, {}
    if args.config:
        _existing(args.config, "config file")
        run, loss = config.load_config(args.config)
    flags = {"total_iters": args.iters, "seed": args.seed, "m": args.m, "B": args.B, "L": args.L, "w": args.w,
             "canvas": args.canvas, "supersample": args.supersample, "lr": args.lr}
    run.update({k: v for k, v in flags.items() if v is not None})
    if "canvas" not in run and input_side:
        # largest power of two not above the input side
        run["canvas"] = 1 << (int(input_side).bit_length() - 1)
    weights = dataclasses.asdict(LossWeights())
    weights.update(loss)
    if args.no_sa:
        run["hybrid_fraction"] = 0.0
    if args.no_gradients:
        run["use_gradients"] = False
    if args.noisy_gradients is not None:
        if args.noisy_gradients <= 0:
            raise UsageError("--noisy-gradients needs a positive sigma")
        run["grad_noise"] = args.noisy_gradients
        run["hybrid_fraction"] = 0.0
    if args.naive_param:
        run["parameterization"] = "naive"
        weights["reg"] *= 100.0
    if args.no_multisample:
        base = optimizer.RunConfig(**run)
        run["sigma_px"] = base.sigma_px / base.supersample
        run["supersample"] = 1
    if args.moments:
        run["objective"] = "moments"
    if args.truncate_warmup:
        run["truncate_warmup"] = True
    if args.block_normalization_grad:
        run["normalization_grad"] = False
    for term, key in (("mse", "mse"), ("ssim", "ssim"), ("lpips", "lpips"), ("reg", "reg")):
        if getattr(args, f"loss_{term}") is False:
            weights[key] = 0.0
    if args.loss_mip is not None:
        run["mip"] = args.loss_mip
    try:
        return optimizer.RunConfig(**run), LossWeights(**weights)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(optimizer.HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.iteration, repr(r.total), repr(r.mse_ms), repr(r.dssim), repr(r.reg), repr(r.perceptual),
                        repr(r.temperature), "" if r.sa_accepts is None else r.sa_accepts])


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def cmd_invert(args) -> int:
    src = _existing(args.input, "input image")
    try:
        raw = imageio.load_image(src, invert=not args.no_invert)
    except OSError as exc:
        raise UsageError(f"cannot read input image: {exc}") from exc
    cfg, weights = resolve_invert_config(args, raw.shape[0])
    try:
        target = imageio.prepare_target(raw, cfg.canvas, pad=not args.no_pad)
    except ValueError as exc:
        raise UsageError(f"cannot use input image: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    snapshot = config.dump_snapshot(cfg, weights, {"input": str(src), "threads": chaos_gen.set_threads(None)})
    logger.info("resolved config:\n%s", snapshot)
    (out.parent / "run.toml").write_text(snapshot)

    try:
        result = optimizer.run_inversion(target, cfg, weights)
    except DivergenceError as exc:
        dump = _sibling(out, ".divergence.json")
        dump.write_text(json.dumps(exc.dump, indent=2) + "\n")
        raise DivergenceError(f"{exc}; state dumped to {dump}", exc.dump) from exc
    meta = {"best_loss": result.best_loss, "best_iteration": result.best_iteration, "seed": cfg.seed}
    save_code(out, result.best_code, meta)
    save_code(_sibling(out, ".final.json"), result.final_code,
              {"iteration": cfg.total_iters - 1, "seed": cfg.seed})
    _write_history(_sibling(out, ".history.csv"), result.history)
    # same silhouette convention as the inversion input
    rendered = render_eval(result.best_code, size=cfg.canvas, supersample=1, seed=cfg.seed).image
    imageio.save_image(_sibling(out, ".png"), rendered)
    plotting.plot_history(result.history, _sibling(out, ".history.png"))
    plotting.plot_comparison(target, rendered, _sibling(out, ".compare.png"))
    print(f"best loss {result.best_loss:.6g} at iteration {result.best_iteration}; "
          f"{cfg.total_iters} iterations in {result.elapsed:.1f} s -> {out}")
    return 0


# -- render / zoom ----------------------------------------------------------------

def _render_to(code, view: ViewWindow, args, extra_meta=None) -> int:
    res = render_eval(code, view, point_budget=args.points, time_cap=args.time_cap,
                      supersample=args.supersample, size=args.size, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_image(out, res.image, invert=not args.no_invert, bits=args.bits)
    meta = {"view": {"center": list(view.center), "half_extent": view.half_extent, "zoom": view.zoom},
            "points_in_view": res.in_view, "points_generated": res.generated, "under_budget": res.under_budget,
            "foreground_fraction": eval_harness.foreground_fraction(res.image), "seed": args.seed}
    if res.under_budget:
        meta["note"] = f"{UNDER_BUDGET_MARK} under budget: {res.in_view} of {args.points} points"
    meta.update(extra_meta or {})
    _sibling(out, ".json").write_text(json.dumps(meta, indent=2, ensure_ascii=False) + "\n")
    mark = f" {UNDER_BUDGET_MARK}" if res.under_budget else ""
    print(f"{out}: {res.in_view} points in view, foreground {meta['foreground_fraction']:.4f}{mark}")
    return 0


def cmd_render(args) -> int:
    code = _load_code_arg(args.code)
    view = FULL_VIEW
    if args.view:
        try:
            view = ViewWindow(tuple(args.view[:2]), args.view[2])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return _render_to(code, view, args)


def default_zoom_center(code, seed: int = 0) -> tuple[float, float]:
    """A point on the attractor: the normalised fixed point of the first map."""
    _, _, _, M, b = svd_factors(code.params)
    fixed = np.linalg.solve(np.eye(2) - M[0], b[0])
    c = attractor_transform(code, seed).apply(fixed)
    return float(c[0]), float(c[1])


def cmd_zoom(args) -> int:
    if not args.factor > 0:
        raise UsageError("--factor must be positive")
    code = _load_code_arg(args.code)
    center = tuple(args.center) if args.center else default_zoom_center(code, args.seed)
    view = ViewWindow.zoomed(center, args.factor)
    return _render_to(code, view, args, {"factor": args.factor})


# -- eval / gen-suite / gradcheck -------------------------------------------------

def cmd_eval(args) -> int:
    gt_dir = _existing(args.gt, "directory")
    rec_dir = _existing(args.recovered, "directory")
    names = sorted(p.name for p in gt_dir.glob("*.json") if not p.name.endswith(".final.json"))
    if not names:
        raise UsageError(f"no code files in {gt_dir}")
    gts, recs = [], []
    for name in names:
        gts.append(_load_code_arg(gt_dir / name))
        rp = rec_dir / name
        if rp.exists():
            recs.append(_load_code_arg(rp))
        else:
            logger.warning("no recovered code for %s; scoring as empty", name)
            recs.append(None)
    report = eval_harness.evaluate_suite(gts, recs, size=args.size, point_budget=args.points,
                                         time_cap=args.time_cap, supersample=args.supersample, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    plotting.plot_eval_report(report, out.with_suffix(".png"))
    m = report.means()
    print(f"{len(report.rows)} views: F1 {m['f1']:.3f}  IoU {m['iou']:.3f}  PSNR {m['psnr']:.2f}  "
          f"SSIM {m['ssim']:.3f} -> {out}")
    return 0


def cmd_gen_suite(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = eval_harness.gen_random_suite(args.n, args.seed)
    for k, code in enumerate(suite):
        stem = f"fractal_{k:03d}"
        (out / f"{stem}.json").write_text(dumps_code(code, {"suite_seed": args.seed, "index": k}))
        img = render_eval(code, size=args.size, point_budget=args.points, supersample=args.supersample,
                          seed=args.seed).image
        imageio.save_image(out / f"{stem}.png", img)
    print(f"wrote {len(suite)} fractals to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    res = pipeline.gradient_check(m=args.m, B=args.batch, L=args.length, w=args.warmup, size=args.canvas,
                                  supersample=args.supersample, seed=args.seed, h=args.h, tol=args.tol)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coordinate", "analytic", "numeric", "rel_error"])
            for i, (a, n, e) in enumerate(zip(res.analytic.ravel(), res.numeric.ravel(), res.rel_error)):
                w.writerow([i, repr(float(a)), repr(float(n)), repr(float(e))])
    frac = res.pass_fraction
    print(f"{np.count_nonzero(res.rel_error <= args.tol)}/{res.rel_error.size} coordinates within {args.tol:g} "
          f"({100 * frac:.1f}%), max rel error {res.rel_error.max():.3g}, {res.elapsed:.1f} s")
    return 0 if frac >= 0.95 else 2


COMMANDS = {"invert": cmd_invert, "render": cmd_render, "zoom": cmd_zoom, "eval": cmd_eval,
            "gen-suite": cmd_gen_suite, "gradcheck": cmd_gradcheck}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        _resolve_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IFSError, RuntimeError, OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
