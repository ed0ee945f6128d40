"""Acceptance criteria, one test each, on the toy corpus at desk scale.

The trained model is shared: one desk-preset run (20 epochs) on the
100-glyph, 2-style toy manifest. Every sampling criterion uses its final
weights.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from conftest import HELD_OUT_CODEPOINTS, TOY_CODEPOINTS, fit_distances

from glyphforge.cli import THREADS_ENV, main
from glyphforge.config import RunConfig
from glyphforge.dataset import GlyphBitmap, build_manifest, rasterize_glyph
from glyphforge.denoiser import DESK_CONFIG, build, lookup_style
from glyphforge.diffusion import make_schedule, p_step, posterior_coefficients, predict_x0_from_eps, q_sample
from glyphforge.evaluation import pixel_match, step_study
from glyphforge.gradcheck import gradient_check
from glyphforge.sampling import SamplerConfig, sample, sample_array, sample_interpolated, sample_many
from glyphforge.training import network_from_checkpoint, read_loss_log, train_loop
from glyphforge.vectorize import (
    Contour,
    TraceConfig,
    bezier_point,
    binarize,
    fit_beziers,
    fit_curve,
    roundtrip_match,
    trace_contours,
    vectorize,
)

SMOKE_EPOCHS = 20
CANVAS = 32


class Oracle:
    """Returns the noise consistent with x_t and the true x0 (carried in the reference slot)."""

    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, x_t, reference, t, style):
        ab = torch.tensor([self.schedule.abar(int(s)) for s in t], dtype=torch.float64).reshape(-1, 1, 1, 1)
        return ((x_t.double() - ab.sqrt() * reference.double()) / (1 - ab).sqrt()).to(x_t.dtype)


@pytest.fixture(scope="module")
def toy(fonts, tmp_path_factory):
    ref, styles = fonts
    root = tmp_path_factory.mktemp("toy")
    manifest = build_manifest(ref, styles, CANVAS, root / "data", codepoints=TOY_CODEPOINTS)
    assert len(manifest) == 200
    stamps = {0: time.perf_counter()}
    cfg = replace(RunConfig.for_preset("desk").train, checkpoint_every=10,
                  loss_log_path=str(root / "ckpt" / "loss.csv"))
    assert cfg.epochs == SMOKE_EPOCHS
    final = train_loop(manifest, cfg, out_dir=root / "ckpt",
                       on_epoch=lambda epoch, loss: stamps.__setitem__(epoch, time.perf_counter()))
    return {
        "manifest": manifest,
        "ckpt_dir": root / "ckpt",
        "final": final,
        "net": network_from_checkpoint(final),
        "smoke_seconds": stamps[SMOKE_EPOCHS] - stamps[0],
        "root": root,
    }


def held_in(manifest, count=20):
    """Spread ``count`` training pairs evenly over codepoints, alternating styles."""
    by_key = {(r.codepoint, r.style_id): r for r in manifest.records}
    cps = TOY_CODEPOINTS[:: len(TOY_CODEPOINTS) // count][:count]
    return [by_key[(cp, i % 2)] for i, cp in enumerate(cps)]


def load(manifest, rel, cp):
    return GlyphBitmap.load_png(manifest.root / rel, cp)


def test_1_diffusion_algebra(acceptance_report):
    start = time.perf_counter()
    sched = make_schedule()
    recurrence = all(sched.abar(t) == sched.abar(t - 1) * float(sched.alpha[t - 1]) for t in range(1, sched.T + 1))

    rng = np.random.default_rng(0)
    round_trip = 0.0
    for t in (1, 2, 10, 250, 500, 999, 1000):
        x0 = rng.uniform(-1, 1, (64, 64))
        eps = rng.standard_normal((64, 64))
        round_trip = max(round_trip, float(np.abs(predict_x0_from_eps(q_sample(x0, t, eps, sched), eps, t, sched)
                                                  - x0).max()))

    n = 100_000
    worst_z = 0.0
    for t in (1, 100, 500, 1000):
        x0 = 0.7
        draws = q_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        ab = sched.abar(t)
        mean, var = math.sqrt(ab) * x0, 1 - ab
        z_mean = abs(draws.mean() - mean) / math.sqrt(var / n)
        z_var = abs(draws.var(ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst_z = max(worst_z, z_mean, z_var)

    degenerate = posterior_coefficients(1, sched) == (1.0, 0.0, 0.0)
    x_t, eps = rng.standard_normal(16), rng.standard_normal(16)
    degenerate &= np.array_equal(p_step(x_t, eps, 1, np.zeros(16), sched),
                                 np.clip(predict_x0_from_eps(x_t, eps, 1, sched), -1, 1))
    elapsed = time.perf_counter() - start

    ok = recurrence and round_trip < 1e-9 and worst_z <= 3 and degenerate and elapsed < 10
    acceptance_report(1, "diffusion algebra", ok,
                      f"recurrence exact={recurrence}, round trip {round_trip:.2e}, worst MC z {worst_z:.2f}, "
                      f"t=1 degenerate={degenerate}, {elapsed:.1f}s")
    assert ok


def test_2_oracle_closure(acceptance_report):
    start = time.perf_counter()
    sched = make_schedule()
    x0 = torch.from_numpy(np.random.default_rng(1).uniform(-1, 1, (4, CANVAS, CANVAS)).astype(np.float32))
    oracle = Oracle(sched)
    out = sample_array(oracle, x0, torch.zeros(4, 8), SamplerConfig(steps=sched.T, seed=5), sched, seeds=[5, 6, 7, 8])
    err = float((out[:, 0] - x0).abs().max())

    # the sampler is exactly the p_step recursion driven by per-item generators
    g = torch.Generator().manual_seed(11)
    ref = x0[:1, None]
    x = torch.randn((1, CANVAS, CANVAS), generator=g)[None]
    for t in range(sched.T, 0, -1):
        noise = torch.randn((1, CANVAS, CANVAS), generator=g)[None] if t > 1 else torch.zeros_like(x)
        x = p_step(x, oracle(x, ref, torch.tensor([t]), None), t, noise, sched)
    iterated = sample_array(oracle, ref, torch.zeros(8), SamplerConfig(steps=sched.T, seed=11), sched)
    matches = torch.equal(iterated, x)
    elapsed = time.perf_counter() - start

    ok = err < 0.05 and matches and elapsed < 30
    acceptance_report(2, "oracle closure", ok, f"max |x0 - sample| {err:.2e}, p_step iteration equal={matches}, "
                                               f"{elapsed:.1f}s")
    assert ok


def test_3_gradient_check(acceptance_report):
    start = time.perf_counter()
    net = build(DESK_CONFIG, seed=0)
    # the zero-initialized output conv would make every upstream gradient vanish
    with torch.random.fork_rng():
        torch.manual_seed(0)
        net.out_conv.reset_parameters()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, CANVAS, CANVAS, generator=g)
    r = torch.randn(1, 1, CANVAS, CANVAS, generator=g)
    res = gradient_check(net, x, r, t=500, style_id=1, fraction=0.01, seed=0)
    elapsed = time.perf_counter() - start

    ok = res.fraction_checked >= 0.01 and res.max_rel_error <= 1e-3 and elapsed < 300
    acceptance_report(3, "gradient check", ok,
                      f"{len(res.names)} of {res.total_params} params ({100 * res.fraction_checked:.2f}%), "
                      f"max rel err {res.max_rel_error:.2e}, {elapsed:.0f}s")
    assert ok


def test_4_smoke_training(toy, acceptance_report):
    rows = read_loss_log(toy["ckpt_dir"] / "loss.csv")
    losses = np.array([r[2] for r in rows])
    initial = losses[0]
    trailing = np.convolve(losses, np.ones(10) / 10, mode="valid")  # trailing[k] ends at step k + 10
    halved = np.flatnonzero(trailing < 0.5 * initial)
    halved_at = int(halved[0]) + 10 if len(halved) else None
    epoch_loss = float(np.mean([r[2] for r in rows if r[0] == SMOKE_EPOCHS]))

    start = time.perf_counter()
    manifest, net, ckpt = toy["manifest"], toy["net"], toy["final"]
    scores = []
    for rec in held_in(manifest):
        ref = load(manifest, rec.reference_path, rec.codepoint)
        glyph = sample(net, ref, lookup_style(net, rec.style_id), SamplerConfig(), ckpt.schedule)
        scores.append(pixel_match(glyph, load(manifest, rec.target_path, rec.codepoint)))
    total = toy["smoke_seconds"] + time.perf_counter() - start

    ok = (halved_at is not None and halved_at <= 500 and epoch_loss < 0.15 and np.mean(scores) >= 0.80
          and total <= 1800)
    acceptance_report(4, "smoke training", ok,
                      f"initial loss {initial:.3f}, 10-step mean below half at step {halved_at}, epoch "
                      f"{SMOKE_EPOCHS} mean loss {epoch_loss:.4f}, pixel_match {np.mean(scores):.3f} on "
                      f"{len(scores)} held-in glyphs, {total:.0f}s")
    assert ok


def test_5_step_study(toy, acceptance_report):
    start = time.perf_counter()
    manifest, net = toy["manifest"], toy["net"]
    budgets = [2, 5, 10, 50, 100]
    results = {}
    for style in (0, 1):
        recs = [r for r in held_in(manifest) if r.style_id == style]
        recs += [r for r in manifest.records if r.style_id == style and r not in recs][: 20 - len(recs)]
        refs = [load(manifest, r.reference_path, r.codepoint) for r in recs]
        rows, _ = step_study(net, refs, lookup_style(net, style), budgets, toy["final"].schedule,
                             baseline_steps=1000, csv_path=toy["root"] / f"study_{style}.csv")
        results[style] = [r.mean_match for r in rows]
    elapsed = time.perf_counter() - start

    monotone = all(all(a <= b for a, b in zip(s, s[1:])) for s in results.values())
    five_vs_hundred = min(s[1] / s[4] for s in results.values())
    ok = monotone and five_vs_hundred >= 0.95 and elapsed < 600
    detail = "; ".join(f"style {k}: " + ", ".join(f"{b}:{m:.4f}" for b, m in zip(budgets, v))
                       for k, v in results.items())
    acceptance_report(5, "step study", ok, f"{detail}; 5/100 ratio {five_vs_hundred:.3f}, {elapsed:.0f}s")
    assert ok


def test_6_sampling_cost_linear(toy, acceptance_report):
    manifest, net = toy["manifest"], toy["net"]
    rec = manifest.records[0]
    ref = load(manifest, rec.reference_path, rec.codepoint)
    style = lookup_style(net, 0)
    budgets = [5, 50, 500]
    sample(net, ref, style, SamplerConfig(steps=5), toy["final"].schedule)  # warm-up
    seconds = []
    for steps in budgets:
        best = math.inf
        for _ in range(3 if steps < 500 else 2):
            t0 = time.perf_counter()
            sample(net, ref, style, SamplerConfig(steps=steps), toy["final"].schedule)
            best = min(best, time.perf_counter() - t0)
        seconds.append(best)
    slope, intercept = np.polyfit(budgets, seconds, 1)
    segments = [(seconds[i + 1] - seconds[i]) / (budgets[i + 1] - budgets[i]) for i in range(2)]
    deviation = max(abs(s / slope - 1) for s in segments)

    ok = slope > 0 and deviation <= 0.20
    acceptance_report(6, "sampling cost linear", ok,
                      "times " + ", ".join(f"{b}:{s:.3f}s" for b, s in zip(budgets, seconds))
                      + f"; fitted {1000 * slope:.2f} ms/step, segment slopes within {100 * deviation:.1f}%")
    assert ok


def test_7_interpolation(toy, acceptance_report):
    manifest, net = toy["manifest"], toy["net"]
    schedule = toy["final"].schedule
    refs = [load(manifest, r.reference_path, r.codepoint) for r in held_in(manifest, 4)]
    cfg = SamplerConfig(seed=3)
    endpoints = True
    for ref in refs:
        for lam in (0.0, 1.0):
            mixed = sample_interpolated(net, ref, [0, 1], [1 - lam, lam], cfg, schedule)
            pure = sample(net, ref, lookup_style(net, int(lam)), cfg, schedule)
            endpoints &= np.array_equal(mixed.pixels, pure.pixels)

    grid = toy["root"] / "interpolation.png"
    args = ["interpolate", "--ckpt", str(toy["ckpt_dir"]), "--points", "5", "--steps", "20", "-o", str(grid)]
    for cp in (0x41, 0x67, 0x52):
        args += ["--ref-glyph", f"U+{cp:04X}"]
    code = main(args)
    from PIL import Image

    with Image.open(grid) as im:
        size, labels = im.size, im.text.get("labels", "")
    cell = CANVAS + 8
    ok = endpoints and code == 0 and size == (6 * cell, 3 * cell) and labels.count("|") == 5
    acceptance_report(7, "interpolation", ok,
                      f"endpoints bitwise={endpoints} over {len(refs)} refs, grid {size[0]}x{size[1]} "
                      f"({labels})")
    assert ok


def test_8_vectorizer(fonts, toy, acceptance_report):
    from scipy import ndimage

    start = time.perf_counter()
    config = TraceConfig()
    topology = 0
    for seed in range(50):
        mask = np.random.default_rng(seed).random((24, 24)) < 0.3 + 0.02 * (seed % 10)
        contours = trace_contours(mask)
        _, n_ink = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        labels, n_bg = ndimage.label(np.pad(~mask, 1, constant_values=True))
        n_holes = n_bg - 1
        topology += (sum(c.orientation == "outer" for c in contours) == n_ink
                     and sum(c.orientation == "hole" for c in contours) == n_holes)

    manifest = toy["manifest"]
    corpus = [load(manifest, r.target_path, r.codepoint) for r in manifest.records]
    corpus += [load(manifest, f"reference/U+{cp:04X}.png", cp) for cp in TOY_CODEPOINTS]
    worst_fit = 0.0
    for glyph in corpus:
        contours = trace_contours(binarize(glyph, config.threshold), config.min_contour_area)
        for contour, path in zip(contours, vectorize(glyph, config)):
            worst_fit = max(worst_fit, float(fit_distances(contour.points, path, limit=config.fit_max_error).max()))
    round_trip = [roundtrip_match(g, config) for g in corpus]

    theta = np.linspace(0, 2 * np.pi, 80, endpoint=False)
    circle = fit_beziers(Contour(np.column_stack([20 + 10 * np.cos(theta), 20 + 10 * np.sin(theta)])), 0.25)
    circle_err = float(np.abs(np.linalg.norm(circle.flatten(64) - 20, axis=1) - 10).max())
    cubic = np.array([[0.0, 0.0], [3.0, 9.0], [8.0, 9.0], [12.0, 1.0]])
    samples = bezier_point(cubic, np.linspace(0, 1, 60))
    fitted = fit_curve(samples, 0.05)
    dense = bezier_point(fitted[0], np.linspace(0, 1, 2000))
    cubic_err = float(max(np.linalg.norm(dense - p, axis=1).min() for p in samples))
    elapsed = time.perf_counter() - start

    ok = (topology == 50 and worst_fit <= config.fit_max_error and min(round_trip) >= 0.93
          and circle_err <= 0.25 and len(fitted) == 1 and cubic_err < 0.05 and elapsed < 60)
    acceptance_report(8, "vectorizer", ok,
                      f"topology {topology}/50, worst fit {worst_fit:.4f}px (limit {config.fit_max_error}), "
                      f"round trip min {min(round_trip):.4f} mean {np.mean(round_trip):.4f} over {len(corpus)} "
                      f"glyphs, circle {circle_err:.3f}, cubic {len(fitted)} seg {cubic_err:.4f}, {elapsed:.1f}s")
    assert ok


def test_9_zero_shot(fonts, toy, acceptance_report):
    ref_font, _ = fonts
    net, schedule = toy["net"], toy["final"].schedule
    assert not set(HELD_OUT_CODEPOINTS) & set(TOY_CODEPOINTS)
    refs = [rasterize_glyph(ref_font, cp, CANVAS) for cp in HELD_OUT_CODEPOINTS]
    cfg = SamplerConfig(seed=0)
    finite = deterministic = True
    ratios = []
    for style in (0, 1):
        first = sample_many(net, refs, lookup_style(net, style), cfg, schedule)
        again = sample_many(net, refs, lookup_style(net, style), cfg, schedule)
        deterministic &= all(a == b for a, b in zip(first, again))
        finite &= all(np.all(np.isfinite(g.pixels)) for g in first)
        ratios += [g.ink_fraction() / r.ink_fraction() for g, r in zip(first, refs)]
    lo, hi = min(ratios), max(ratios)

    ok = finite and deterministic and lo >= 0.3 and hi <= 3.0
    acceptance_report(9, "zero-shot", ok,
                      f"{len(ratios)} samples from {len(refs)} Greek references, finite={finite}, "
                      f"deterministic={deterministic}, ink ratio to reference in [{lo:.2f}, {hi:.2f}] "
                      f"(band [0.3, 3])")
    assert ok


def test_10_determinism(fonts, toy, tmp_path, monkeypatch, acceptance_report):
    monkeypatch.setenv(THREADS_ENV, "1")
    ref, styles = fonts
    ckpt = str(toy["ckpt_dir"])
    data = tmp_path / "data"
    stages = {
        "dataset": (["dataset", "build", "--reference", str(ref), "--target", *map(str, styles), "--canvas", "32",
                     "--codepoints", "U+41-U+5A", "--out", str(data)], [data]),
        "train": (["train", "--manifest", str(data), "--out", str(tmp_path / "ck"), "--epochs", "2",
                   "--checkpoint-every", "1"], [tmp_path / "ck"]),
        "sample": (["sample", "--ckpt", ckpt, "--ref-glyph", "U+4B", "--style", "1", "--steps", "20",
                    "-o", str(tmp_path / "s.png")], [tmp_path / "s.png"]),
        "interpolate": (["interpolate", "--ckpt", ckpt, "--ref-glyph", "U+4B", "--points", "3", "--steps", "10",
                         "-o", str(tmp_path / "grid.png")], [tmp_path / "grid.png"]),
        "study": (["study", "steps", "--ckpt", ckpt, "--steps", "2,5,20", "--baseline", "50", "--glyphs", "4",
                   "--csv", str(tmp_path / "study.csv"), "--grid", str(tmp_path / "study.png")],
                  [tmp_path / "study.csv", tmp_path / "study.png"]),
        "trace": (["trace", "--in", str(data / "style_00"), "-o", str(tmp_path / "svg"), "--roundtrip-check"],
                  [tmp_path / "svg"]),
        "eval": (["eval", "match", "--generated", str(data / "style_00"), "--target", str(data / "style_01"),
                  "--csv", str(tmp_path / "match.csv")], [tmp_path / "match.csv"]),
    }

    def snapshot(paths):
        out = {}
        for p in paths:
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            out.update({str(q): q.read_bytes() for q in files})
        return out

    verdicts = {}
    for name, (args, outputs) in stages.items():
        assert main(args) == 0, name
        first = snapshot(outputs)
        assert main(args) == 0, name
        verdicts[name] = bool(first) and snapshot(outputs) == first
    ok = all(verdicts.values()) and torch.get_num_threads() == 1
    acceptance_report(10, "determinism", ok,
                      ", ".join(f"{k}={'same' if v else 'DIFFERENT'}" for k, v in verdicts.items())
                      + f", threads={torch.get_num_threads()}")
    assert ok
