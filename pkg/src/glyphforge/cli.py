"""``glyphforge`` command line.

Exit codes: 0 success, 2 invalid input, 3 file or I/O problem, 4 numerical
failure during training or sampling.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint
from .config import PRESETS, RunConfig, resolve_config
from .dataset import (
    GlyphBitmap,
    PairManifest,
    build_manifest,
    parse_codepoint,
    rasterize_glyph,
)
from .denoiser import lookup_style, mix_styles
from .diffusion import VARIANCE_MODES
from .errors import DataIOError, GlyphForgeError, InvalidConfig, ValidationError
from .evaluation import diff_map, match_report, pixel_match, render_grid, step_study
from .sampling import SamplerConfig, sample, sample_many
from .training import network_from_checkpoint, train_loop
from .vectorize import TraceConfig, roundtrip_match, trace_to_svg

log = logging.getLogger("glyphforge")

THREADS_ENV = "GLYPHFORGE_THREADS"
_DEFAULTS = RunConfig()


# -- argument helpers --------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _codepoint(text: str) -> int:
    try:
        return parse_codepoint(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def parse_codepoint_ranges(text: str) -> list[int]:
    """``U+4E00-U+4E63,U+99AC`` style lists."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition("-")
        a = parse_codepoint(lo)
        b = parse_codepoint(hi) if hi else a
        if b < a:
            raise ValidationError(f"empty codepoint range {part!r}")
        out.extend(range(a, b + 1))
    return out


def parse_mix(text: str) -> tuple[list[int], list[float]]:
    """``0:0.5,1:0.5`` into style ids and weights."""
    ids, weights = [], []
    for part in text.split(","):
        sid, sep, w = part.partition(":")
        if not sep:
            raise ValidationError(f"mix entries look like STYLE:WEIGHT, got {part!r}")
        try:
            ids.append(int(sid))
            weights.append(float(w))
        except ValueError:
            raise ValidationError(f"bad mix entry {part!r}") from None
    return ids, weights


def _override(parser, flag: str, default, help: str, **kw):
    """Flag whose absence leaves the config value alone; help shows the preset default."""
    parser.add_argument(flag, default=None, help=f"{help} (default: {default})", **kw)


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="TOML or JSON config file (default: none)")
    p.add_argument("--preset", choices=PRESETS, default=None, help="model/training preset (default: desk)")


def _add_sampler_flags(p):
    s = _DEFAULTS.sampler
    _override(p, "--steps", s.steps, "reverse diffusion steps", type=int)
    _override(p, "--seed", s.seed, "sampling seed", type=int)
    _override(p, "--variance-mode", s.variance_mode, "per-step noise variance", choices=VARIANCE_MODES)
    p.add_argument("--no-clamp", action="store_true", help="do not clamp x0 predictions to [-1, 1] (default: clamp)")
    p.add_argument("--ema", action="store_true", help="use EMA weights when the checkpoint has them (default: off)")


def _add_trace_flags(p):
    t = _DEFAULTS.trace
    _override(p, "--threshold", t.threshold, "ink threshold", type=float)
    _override(p, "--simplify", t.simplify_tolerance, "polygon simplification tolerance in px", type=float)
    _override(p, "--fit-max-error", t.fit_max_error, "maximum curve fit error in px", type=float)
    _override(p, "--min-area", t.min_contour_area, "drop contours smaller than this many px^2", type=float)
    _override(p, "--corner-angle", t.corner_angle, "turning angle in degrees that makes a corner", type=float)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="glyphforge", description="Reference-conditioned diffusion glyph synthesis.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    ds = sub.add_parser("dataset", help="glyph pair datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True, metavar="ACTION")
    b = ds_sub.add_parser("build", help="rasterize reference/target pairs into a manifest")
    b.add_argument("--reference", required=True, help="reference font file (required)")
    b.add_argument("--target", required=True, nargs="+", help="one font file per style (required)")
    b.add_argument("--canvas", type=int, default=32, help="bitmap side in pixels (default: 32)")
    b.add_argument("--codepoints", default=None,
                   help="restrict to e.g. U+4E00-U+4E63,U+99AC (default: all shared codepoints)")
    b.add_argument("--out", required=True, help="output directory (required)")
    b.set_defaults(func=cmd_dataset)

    tr = sub.add_parser("train", help="train the denoiser")
    tr.add_argument("--manifest", default=None, help="manifest.json or its directory (default: from --resume)")
    tr.add_argument("--out", required=True, help="checkpoint directory (required)")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from; its recorded settings become the base layer (default: none)")
    _add_config_flags(tr)
    t = _DEFAULTS.train
    _override(tr, "--epochs", t.epochs, "total epochs", type=int)
    _override(tr, "--batch-size", t.batch_size, "batch size", type=int)
    _override(tr, "--lr", t.learning_rate, "Adam learning rate", type=float)
    _override(tr, "--seed", t.seed, "training seed", type=int)
    _override(tr, "--ema-decay", t.ema_decay, "keep an EMA of the weights with this decay", type=float)
    _override(tr, "--checkpoint-every", t.checkpoint_every, "write epochN.ckpt every N epochs", type=int)
    tr.add_argument("--loss-log", default=None, help="loss CSV path (default: OUT/loss.csv)")
    tr.set_defaults(func=cmd_train)

    sa = sub.add_parser("sample", help="generate glyphs from a checkpoint")
    sa.add_argument("--ckpt", required=True, help="checkpoint file or directory (required)")
    ref = sa.add_mutually_exclusive_group()
    ref.add_argument("--ref-glyph", type=_codepoint, default=None, help="reference codepoint, e.g. U+99AC (default: none)")
    ref.add_argument("--ref-image", default=None, help="reference bitmap PNG (default: none)")
    sa.add_argument("--ref-font", default=None, help="font for --ref-glyph (default: the training reference font)")
    sty = sa.add_mutually_exclusive_group()
    sty.add_argument("--style", type=int, default=None, help="style id (default: 0)")
    sty.add_argument("--mix", default=None, help="weighted style mixture, e.g. 0:0.5,1:0.5 (default: none)")
    _add_config_flags(sa)
    _add_sampler_flags(sa)
    sa.add_argument("-o", "--out", default=None, help="output PNG (required unless --requests)")
    sa.add_argument("--requests", default=None,
                    help="JSON list of {codepoint|ref_image, style|weights, seed, steps, out} (default: none)")
    sa.set_defaults(func=cmd_sample)

    it = sub.add_parser("interpolate", help="sweep a two-style mixture and write a grid")
    it.add_argument("--ckpt", required=True, help="checkpoint file or directory (required)")
    it.add_argument("--ref-glyph", type=_codepoint, action="append", required=True,
                    help="reference codepoint; repeat for more rows (required)")
    it.add_argument("--ref-font", default=None, help="reference font (default: the training reference font)")
    it.add_argument("--styles", type=_int_list, default=[0, 1], help="two style ids (default: 0,1)")
    it.add_argument("--points", type=int, default=5, help="number of mixture weights from 0 to 1 (default: 5)")
    _add_config_flags(it)
    _add_sampler_flags(it)
    it.add_argument("-o", "--out", required=True, help="grid PNG (required)")
    it.set_defaults(func=cmd_interpolate)

    st = sub.add_parser("study", help="sampling studies")
    st_sub = st.add_subparsers(dest="action", required=True, metavar="ACTION")
    ss = st_sub.add_parser("steps", help="match against a long-run baseline per step budget")
    ss.add_argument("--ckpt", required=True, help="checkpoint file or directory (required)")
    ss.add_argument("--steps", type=_int_list, default=[2, 5, 10, 50, 100],
                    help="step budgets (default: 2,5,10,50,100)")
    ss.add_argument("--baseline", type=int, default=None, help="baseline step count (default: min(1000, T))")
    ss.add_argument("--manifest", default=None, help="where references come from (default: the training manifest)")
    ss.add_argument("--glyphs", type=int, default=20, help="number of references (default: 20)")
    ss.add_argument("--style", type=int, default=0, help="style id (default: 0)")
    ss.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    ss.add_argument("--variance-mode", choices=VARIANCE_MODES, default="beta_tilde",
                    help="per-step noise variance (default: beta_tilde)")
    ss.add_argument("--csv", default="study.csv", help="output CSV (default: study.csv)")
    ss.add_argument("--grid", default=None, help="output grid PNG (default: none)")
    ss.set_defaults(func=cmd_study)

    tc = sub.add_parser("trace", help="vectorize bitmaps into SVG")
    tc.add_argument("--in", dest="input", required=True, help="PNG file or directory of PNGs (required)")
    tc.add_argument("-o", "--out", default=None, help="SVG file or directory (default: next to the input)")
    _add_config_flags(tc)
    _add_trace_flags(tc)
    tc.add_argument("--roundtrip-check", action="store_true",
                    help="print pixel_match of the re-rasterized SVG (default: off)")
    tc.set_defaults(func=cmd_trace)

    ev = sub.add_parser("eval", help="compare glyph images")
    ev_sub = ev.add_subparsers(dest="action", required=True, metavar="ACTION")
    m = ev_sub.add_parser("match", help="pixel_match between generated and target PNGs")
    m.add_argument("--generated", required=True, help="PNG file or directory (required)")
    m.add_argument("--target", required=True, help="PNG file or directory with the same names (required)")
    m.add_argument("--csv", default=None, help="per-glyph scores CSV (default: none)")
    m.set_defaults(func=cmd_eval_match)
    d = ev_sub.add_parser("diff", help="absolute difference image of two PNGs")
    d.add_argument("a", help="first PNG")
    d.add_argument("b", help="second PNG")
    d.add_argument("-o", "--out", required=True, help="difference PNG (required)")
    d.set_defaults(func=cmd_eval_diff)
    return parser


# -- shared plumbing ---------------------------------------------------------------

def _sampler_overrides(args) -> dict:
    return {"sampler": {
        "steps": args.steps,
        "seed": args.seed,
        "variance_mode": args.variance_mode,
        "clamp_x0": False if args.no_clamp else None,
    }}


def _load_model(path: str, use_ema: bool = False):
    ckpt = Checkpoint.load(path)
    return ckpt, network_from_checkpoint(ckpt, use_ema=use_ema)


def _reference_font(args_font: str | None, ckpt: Checkpoint) -> str:
    font = args_font or ckpt.meta.get("reference_font_path")
    if not font:
        raise ValidationError("checkpoint does not record a reference font; pass --ref-font")
    return font


def _reference(ckpt: Checkpoint, ref_glyph: int | None, ref_image: str | None, ref_font: str | None) -> GlyphBitmap:
    side = ckpt.denoiser_config.input_side
    if ref_image is not None:
        bmp = GlyphBitmap.load_png(ref_image)
        if bmp.width != side:
            raise ValidationError(f"reference image is {bmp.width}px but the model expects {side}px")
        return bmp
    if ref_glyph is None:
        raise ValidationError("give --ref-glyph or --ref-image")
    return rasterize_glyph(_reference_font(ref_font, ckpt), ref_glyph, side)


def _style(net, style: int | None, mix: str | None) -> torch.Tensor:
    if mix is not None:
        ids, weights = parse_mix(mix)
        return mix_styles([lookup_style(net, i) for i in ids], weights)
    return lookup_style(net, 0 if style is None else style)


def _png_inputs(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() == ".png")
    if not p.exists():
        raise DataIOError(f"no such file: {p}")
    return [p]


# -- commands ------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cps = parse_codepoint_ranges(args.codepoints) if args.codepoints else None
    manifest = build_manifest(args.reference, args.target, args.canvas, args.out, codepoints=cps)
    print(f"wrote {len(manifest)} pairs over {len(manifest.styles)} style(s) to {manifest.root / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    overrides = {"train": {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "ema_decay": args.ema_decay,
        "checkpoint_every": args.checkpoint_every,
    }}
    resume = Checkpoint.load(args.resume) if args.resume else None
    base = None
    if resume is not None:
        # continue with the recorded settings unless the file or a flag says otherwise
        recorded = {k: v for k, v in resume.meta.get("train", {}).items() if k != "loss_log_path"}
        base = {"train": recorded}
    cfg = resolve_config(args.config, args.preset, overrides, base=base)
    manifest_path = args.manifest or (resume.meta.get("manifest_path") if resume else None)
    if manifest_path is None:
        raise ValidationError("give --manifest (or --resume from a checkpoint that records one)")
    manifest = PairManifest.load(manifest_path)
    out = Path(args.out)
    train_cfg = cfg.train
    train_cfg.loss_log_path = args.loss_log or str(out / "loss.csv")
    denoiser = cfg.denoiser
    if denoiser.input_side != manifest.canvas_size or denoiser.num_styles != len(manifest.styles):
        denoiser = replace(denoiser, input_side=manifest.canvas_size, num_styles=len(manifest.styles)).validate()

    ckpt = train_loop(manifest, train_cfg, out_dir=out, denoiser_config=denoiser, resume=resume)
    print(f"trained to epoch {ckpt.epoch} ({ckpt.global_step} steps); checkpoints in {out}")
    return 0


def _one_sample(ckpt, net, cfg: SamplerConfig, ref_glyph, ref_image, ref_font, style, mix, out) -> GlyphBitmap:
    reference = _reference(ckpt, ref_glyph, ref_image, ref_font)
    glyph = sample(net, reference, _style(net, style, mix), cfg, ckpt.schedule,
                   codepoint=ref_glyph if ref_glyph is not None else -1)
    glyph.save_png(out)
    return glyph


def _request_mix(req: dict, num_styles: int) -> str | None:
    """A request's mixture as ``--mix`` text; ``weights`` lists one weight per style id."""
    if "weights" not in req:
        return req.get("mix")
    weights = req["weights"]
    if not isinstance(weights, list) or len(weights) != num_styles:
        raise ValidationError(f"'weights' must list one weight for each of the {num_styles} styles")
    return ",".join(f"{i}:{w}" for i, w in enumerate(weights))


def cmd_sample(args) -> int:
    cfg = resolve_config(args.config, args.preset, _sampler_overrides(args)).sampler
    ckpt, net = _load_model(args.ckpt, args.ema)
    if args.requests is None:
        if args.out is None:
            raise ValidationError("-o/--out is required")
        _one_sample(ckpt, net, cfg, args.ref_glyph, args.ref_image, args.ref_font, args.style, args.mix, args.out)
        print(args.out)
        return 0
    try:
        requests = json.loads(Path(args.requests).read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read {args.requests}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{args.requests} is not valid JSON: {exc}") from exc
    if not isinstance(requests, list):
        raise ValidationError("requests file must hold a JSON list")
    for i, req in enumerate(requests):
        if not isinstance(req, dict) or "out" not in req:
            raise ValidationError(f"request {i} needs an 'out' path")
        req_cfg = SamplerConfig(
            steps=int(req.get("steps", cfg.steps)),
            variance_mode=req.get("variance_mode", cfg.variance_mode),
            clamp_x0=cfg.clamp_x0,
            seed=int(req.get("seed", cfg.seed)),
        ).validate(ckpt.schedule.T)
        glyph = req.get("ref_glyph", req.get("codepoint"))
        _one_sample(ckpt, net, req_cfg, parse_codepoint(str(glyph)) if glyph is not None else None,
                    req.get("ref_image"), req.get("ref_font", args.ref_font), req.get("style"),
                    _request_mix(req, net.config.num_styles), req["out"])
        print(req["out"])
    return 0


def cmd_interpolate(args) -> int:
    cfg = resolve_config(args.config, args.preset, _sampler_overrides(args)).sampler
    if len(args.styles) != 2:
        raise ValidationError("--styles takes exactly two style ids")
    if args.points < 2:
        raise ValidationError("--points must be >= 2")
    ckpt, net = _load_model(args.ckpt, args.ema)
    a, b = (lookup_style(net, s) for s in args.styles)
    font = _reference_font(args.ref_font, ckpt)
    refs = [rasterize_glyph(font, cp, ckpt.denoiser_config.input_side) for cp in args.ref_glyph]
    lambdas = np.linspace(0.0, 1.0, args.points)
    columns = [sample_many(net, refs, mix_styles([a, b], [1.0 - lam, lam]), cfg, ckpt.schedule)
               for lam in lambdas]
    rows = [[ref] + [col[i] for col in columns] for i, ref in enumerate(refs)]
    labels = ["reference"] + [f"lambda={lam:g}" for lam in lambdas]
    render_grid(rows, labels=labels, reference_columns=[0], path=args.out)
    print(args.out)
    return 0


def cmd_study(args) -> int:
    ckpt, net = _load_model(args.ckpt)
    manifest_path = args.manifest or ckpt.meta.get("manifest_path")
    if manifest_path is None:
        raise ValidationError("checkpoint does not record a manifest; pass --manifest")
    manifest = PairManifest.load(manifest_path)
    records = [r for r in manifest.records if r.style_id == args.style][: args.glyphs]
    if not records:
        raise ValidationError(f"manifest has no glyphs for style {args.style}")
    refs = [GlyphBitmap.load_png(manifest.root / r.reference_path, r.codepoint) for r in records]
    rows, _ = step_study(net, refs, lookup_style(net, args.style), args.steps, ckpt.schedule, seed=args.seed,
                         baseline_steps=args.baseline, variance_mode=args.variance_mode,
                         csv_path=args.csv, grid_path=args.grid)
    for r in rows:
        print(f"{r.steps:>5}  pixel_match {r.mean_match:.4f}  mae {r.mean_mae:.4f}")
    return 0


def cmd_trace(args) -> int:
    overrides = {"trace": {
        "threshold": args.threshold,
        "simplify_tolerance": args.simplify,
        "fit_max_error": args.fit_max_error,
        "min_contour_area": args.min_area,
        "corner_angle": args.corner_angle,
    }}
    cfg: TraceConfig = resolve_config(args.config, args.preset, overrides).trace
    src = Path(args.input)
    inputs = _png_inputs(args.input)
    if not src.is_dir() and src.suffix.lower() != ".png":
        raise ValidationError(f"{src} is not a PNG file")
    if src.is_dir():
        out_dir = Path(args.out) if args.out else src
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / (p.stem + ".svg") for p in inputs]
    else:
        targets = [Path(args.out) if args.out else src.with_suffix(".svg")]
    index = {}
    for png, svg in zip(inputs, targets):
        bitmap = GlyphBitmap.load_png(png)
        text = trace_to_svg(bitmap, cfg)
        try:
            svg.write_text(text)
        except OSError as exc:
            raise DataIOError(f"cannot write {svg}: {exc.strerror or exc}") from exc
        entry = {"svg": svg.name}
        if args.roundtrip_check:
            score = roundtrip_match(bitmap, cfg)
            entry["roundtrip_pixel_match"] = round(score, 6)
            print(f"{png.name}: roundtrip pixel_match {score:.4f}")
        index[png.name] = entry
    if src.is_dir():
        index_path = out_dir / "index.json"
        index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        print(f"traced {len(inputs)} image(s) into {out_dir}")
    else:
        print(targets[0])
    return 0


def cmd_eval_match(args) -> int:
    gen = _png_inputs(args.generated)
    if Path(args.target).is_dir():
        tgt = [Path(args.target) / p.name for p in gen]
    else:
        tgt = _png_inputs(args.target)
    if len(gen) != len(tgt):
        raise ValidationError(f"{len(gen)} generated vs {len(tgt)} target images")
    report = match_report([GlyphBitmap.load_png(p) for p in gen], [GlyphBitmap.load_png(p) for p in tgt])
    if args.csv:
        try:
            with open(args.csv, "w") as fh:
                fh.write("name,pixel_match\n")
                for p, s in zip(gen, report.scores):
                    fh.write(f"{p.name},{s:.6f}\n")
        except OSError as exc:
            raise DataIOError(f"cannot write {args.csv}: {exc.strerror or exc}") from exc
    print(f"mean pixel_match {report.mean:.4f} over {report.count} glyph(s)")
    return 0


def cmd_eval_diff(args) -> int:
    a, b = GlyphBitmap.load_png(args.a), GlyphBitmap.load_png(args.b)
    # dark where the images disagree, matching the ink-is-dark convention
    GlyphBitmap(1.0 - diff_map(a, b).pixels).save_png(args.out)
    print(f"pixel_match {pixel_match(a, b):.4f}; wrote {args.out}")
    return 0


# -- entry point ---------------------------------------------------------------------

def _apply_thread_cap() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise InvalidConfig(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise InvalidConfig(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except GlyphForgeError as exc:
        print(f"glyphforge: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"glyphforge: error: {exc}", file=sys.stderr)
        return DataIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
