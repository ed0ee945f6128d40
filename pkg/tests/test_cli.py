import argparse
import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from glyphforge.checkpoint import Checkpoint
from glyphforge.cli import THREADS_ENV, build_parser, parse_codepoint_ranges, parse_mix
from glyphforge.dataset import GlyphBitmap
from glyphforge.errors import ValidationError
from glyphforge.vectorize import parse_svg

SNAPSHOTS = Path(__file__).parent / "snapshots" / "help"
UPDATE_ENV = "GLYPHFORGE_UPDATE_SNAPSHOTS"

COMMANDS = [
    (), ("dataset",), ("dataset", "build"), ("train",), ("sample",), ("interpolate",), ("study",),
    ("study", "steps"), ("trace",), ("eval",), ("eval", "match"), ("eval", "diff"),
]


def leaf_parsers(parser, path=()):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                yield from leaf_parsers(sub, path + (name,))
            return
    yield path, parser


@pytest.fixture(scope="module")
def cli_manifest(fonts, tmp_path_factory):
    from glyphforge.cli import main

    ref, styles = fonts
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["dataset", "build", "--reference", str(ref), "--target", *map(str, styles),
                 "--canvas", "32", "--codepoints", "U+41-U+43,U+61", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def cli_checkpoint(cli_manifest, tmp_path_factory):
    """One epoch on the full 1000-step schedule, for sampling and study commands."""
    from glyphforge.cli import main

    out = tmp_path_factory.mktemp("cli_ckpt")
    assert main(["train", "--manifest", str(cli_manifest), "--out", str(out), "--epochs", "1",
                 "--batch-size", "4"]) == 0
    return out


class TestHelp:
    @pytest.mark.parametrize("command", COMMANDS, ids=lambda c: "-".join(c) or "top")
    def test_snapshot(self, command, capsys, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([*command, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        snap = SNAPSHOTS / (("-".join(command) or "top") + ".txt")
        if os.environ.get(UPDATE_ENV):
            snap.parent.mkdir(parents=True, exist_ok=True)
            snap.write_text(text)
        assert text == snap.read_text()

    def test_every_flag_states_its_default(self):
        for path, parser in leaf_parsers(build_parser()):
            for action in parser._actions:
                if not action.option_strings or action.dest in ("help", "version"):
                    continue
                assert "default" in action.help or "required" in action.help, (path, action.option_strings)

    def test_every_leaf_is_snapshotted(self):
        assert {p for p, _ in leaf_parsers(build_parser())} <= set(COMMANDS)


class TestHelpers:
    def test_codepoint_ranges(self):
        assert parse_codepoint_ranges("U+41-U+43,U+61") == [0x41, 0x42, 0x43, 0x61]
        with pytest.raises(ValidationError):
            parse_codepoint_ranges("U+43-U+41")

    def test_mix(self):
        assert parse_mix("0:0.25,1:0.75") == ([0, 1], [0.25, 0.75])
        with pytest.raises(ValidationError):
            parse_mix("0,1")


class TestDataset:
    def test_build(self, cli_manifest):
        data = json.loads((cli_manifest / "manifest.json").read_text())
        assert len(data["records"]) == 8
        assert (cli_manifest / "style_01" / "U+0061.png").exists()

    def test_idempotent(self, cli, fonts, cli_manifest, tmp_path):
        ref, styles = fonts
        assert cli("dataset", "build", "--reference", ref, "--target", *styles, "--canvas", 32,
                   "--codepoints", "U+41-U+43,U+61", "--out", tmp_path) == 0
        for p in sorted(cli_manifest.rglob("*")):
            if p.is_file():
                assert (tmp_path / p.relative_to(cli_manifest)).read_bytes() == p.read_bytes()

    def test_missing_font(self, cli, fonts, tmp_path, capsys):
        ref, _ = fonts
        missing = tmp_path / "gone.ttf"
        assert cli("dataset", "build", "--reference", ref, "--target", missing, "--out", tmp_path / "o") == 3
        assert str(missing) in capsys.readouterr().err

    def test_bad_canvas(self, cli, fonts, tmp_path):
        ref, styles = fonts
        assert cli("dataset", "build", "--reference", ref, "--target", styles[0], "--canvas", 33,
                   "--out", tmp_path) == 2


class TestTrain:
    def test_outputs(self, cli_checkpoint):
        assert (cli_checkpoint / "latest.ckpt").exists()
        assert (cli_checkpoint / "loss.csv").exists()
        assert Checkpoint.load(cli_checkpoint).epoch == 1

    def test_flags_beat_config_file(self, cli, cli_manifest, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nepochs = 3\nbatch_size = 8\n")
        assert cli("train", "--manifest", cli_manifest, "--out", tmp_path / "ck", "--config", cfg,
                   "--epochs", 1) == 0
        ckpt = Checkpoint.load(tmp_path / "ck")
        assert ckpt.epoch == 1
        assert ckpt.global_step == 1  # 8 pairs in one batch of 8 from the file

    def test_resume(self, cli, cli_manifest, tmp_path):
        # same output directory both times, so the recorded paths agree too
        assert cli("train", "--manifest", cli_manifest, "--out", tmp_path, "--epochs", 2,
                   "--checkpoint-every", 1) == 0
        uninterrupted = (tmp_path / "latest.ckpt").read_bytes()
        # only --epochs is repeated; the rest comes from the checkpoint
        assert cli("train", "--out", tmp_path, "--epochs", 2, "--resume", tmp_path / "epoch1") == 0
        assert (tmp_path / "latest.ckpt").read_bytes() == uninterrupted

    def test_resume_flag_beats_recorded_settings(self, cli, cli_manifest, tmp_path):
        assert cli("train", "--manifest", cli_manifest, "--out", tmp_path, "--epochs", 1, "--lr", 5e-4) == 0
        assert cli("train", "--out", tmp_path, "--epochs", 2, "--resume", tmp_path, "--lr", 2e-4) == 0
        assert Checkpoint.load(tmp_path).meta["train"]["learning_rate"] == 2e-4
        assert cli("train", "--out", tmp_path, "--epochs", 3, "--resume", tmp_path) == 0
        assert Checkpoint.load(tmp_path).meta["train"]["learning_rate"] == 2e-4

    def test_non_finite_loss_exits_4(self, cli, cli_manifest, tmp_path, capsys):
        assert cli("train", "--manifest", cli_manifest, "--out", tmp_path, "--epochs", 30, "--lr", 1e30) == 4
        assert "non-finite" in capsys.readouterr().err

    def test_missing_manifest(self, cli, tmp_path):
        assert cli("train", "--manifest", tmp_path / "none", "--out", tmp_path / "o") == 3


class TestSample:
    def test_single(self, cli, cli_checkpoint, tmp_path):
        out = tmp_path / "g.png"
        assert cli("sample", "--ckpt", cli_checkpoint, "--ref-glyph", "U+42", "--style", 1, "--steps", 5,
                   "--seed", 7, "-o", out) == 0
        assert GlyphBitmap.load_png(out).pixels.shape == (32, 32)

    def test_idempotent(self, cli, cli_checkpoint, tmp_path):
        for name in ("a.png", "b.png"):
            assert cli("sample", "--ckpt", cli_checkpoint, "--ref-glyph", "U+42", "--mix", "0:0.5,1:0.5",
                       "--steps", 4, "--seed", 3, "-o", tmp_path / name) == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_requests_file(self, cli, cli_checkpoint, tmp_path):
        reqs = [{"ref_glyph": "U+41", "style": 0, "steps": 3, "out": str(tmp_path / "r0.png")},
                {"ref_glyph": "U+61", "mix": "0:0.3,1:0.7", "seed": 5, "steps": 3, "out": str(tmp_path / "r1.png")}]
        (tmp_path / "req.json").write_text(json.dumps(reqs))
        assert cli("sample", "--ckpt", cli_checkpoint, "--requests", tmp_path / "req.json") == 0
        assert (tmp_path / "r0.png").exists() and (tmp_path / "r1.png").exists()

    def test_requests_codepoint_and_weights(self, cli, cli_checkpoint, tmp_path):
        reqs = [{"codepoint": "U+61", "weights": [0.3, 0.7], "seed": 5, "steps": 3, "out": str(tmp_path / "w.png")},
                {"ref_glyph": "U+61", "mix": "0:0.3,1:0.7", "seed": 5, "steps": 3, "out": str(tmp_path / "m.png")}]
        (tmp_path / "req.json").write_text(json.dumps(reqs))
        assert cli("sample", "--ckpt", cli_checkpoint, "--requests", tmp_path / "req.json") == 0
        assert (tmp_path / "w.png").read_bytes() == (tmp_path / "m.png").read_bytes()
        (tmp_path / "bad.json").write_text(json.dumps([{"codepoint": "U+61", "weights": [1.0], "out": "x.png"}]))
        assert cli("sample", "--ckpt", cli_checkpoint, "--requests", tmp_path / "bad.json") == 2

    def test_ref_image(self, cli, cli_checkpoint, cli_manifest, tmp_path):
        assert cli("sample", "--ckpt", cli_checkpoint, "--ref-image", cli_manifest / "reference" / "U+0041.png",
                   "--steps", 2, "-o", tmp_path / "g.png") == 0

    def test_zero_steps(self, cli, cli_checkpoint, tmp_path):
        assert cli("sample", "--ckpt", cli_checkpoint, "--ref-glyph", "U+42", "--steps", 0,
                   "-o", tmp_path / "g.png") == 2

    def test_absent_checkpoint(self, cli, tmp_path):
        assert cli("sample", "--ckpt", tmp_path / "nope", "--ref-glyph", "U+42", "-o", tmp_path / "g.png") == 3

    def test_unknown_glyph(self, cli, cli_checkpoint, tmp_path):
        assert cli("sample", "--ckpt", cli_checkpoint, "--ref-glyph", "U+99AC", "-o", tmp_path / "g.png") == 2


def test_interpolate(cli, cli_checkpoint, tmp_path):
    out = tmp_path / "grid.png"
    assert cli("interpolate", "--ckpt", cli_checkpoint, "--ref-glyph", "U+41", "--ref-glyph", "U+61",
               "--points", 5, "--steps", 3, "-o", out) == 0
    with Image.open(out) as im:
        assert im.size == (6 * 40, 2 * 40)
        assert im.text["labels"].split("|")[0] == "reference"


class TestStudy:
    def test_steps_csv(self, cli, cli_checkpoint, tmp_path):
        csv_path, grid = tmp_path / "s.csv", tmp_path / "s.png"
        assert cli("study", "steps", "--ckpt", cli_checkpoint, "--steps", "2,5,10,100,1000", "--glyphs", 2,
                   "--csv", csv_path, "--grid", grid) == 0
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["steps"]) for r in rows] == [2, 5, 10, 100, 1000]
        assert float(rows[-1]["mean_pixel_match"]) == 1.0
        with Image.open(grid) as im:
            assert im.size == (5 * 40, 2 * 40)  # one column per budget

    def test_absent_checkpoint(self, cli, tmp_path):
        assert cli("study", "steps", "--ckpt", tmp_path / "nope", "--csv", tmp_path / "s.csv") == 3


class TestTrace:
    def test_file(self, cli, cli_manifest, tmp_path, capsys):
        out = tmp_path / "g.svg"
        assert cli("trace", "--in", cli_manifest / "style_00" / "U+0042.png", "--threshold", 0.5, "-o", out,
                   "--roundtrip-check") == 0
        assert "roundtrip pixel_match" in capsys.readouterr().out
        paths, canvas = parse_svg(out.read_text())
        assert canvas == 32 and len(paths) >= 2  # B has two counters

    def test_directory(self, cli, cli_manifest, tmp_path):
        for out in ("a", "b"):
            assert cli("trace", "--in", cli_manifest / "reference", "-o", tmp_path / out) == 0
        index = json.loads((tmp_path / "a" / "index.json").read_text())
        assert sorted(index) == ["U+0041.png", "U+0042.png", "U+0043.png", "U+0061.png"]
        for name in ("U+0041.svg", "index.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_non_png(self, cli, tmp_path):
        bad = tmp_path / "g.png"
        bad.write_text("<svg/>")
        assert cli("trace", "--in", bad) == 2
        txt = tmp_path / "g.txt"
        txt.write_text("hello")
        assert cli("trace", "--in", txt) == 2

    def test_bad_threshold(self, cli, cli_manifest, tmp_path):
        assert cli("trace", "--in", cli_manifest / "reference" / "U+0041.png", "--threshold", 1.5,
                   "-o", tmp_path / "g.svg") == 2


class TestEval:
    def test_match(self, cli, cli_manifest, tmp_path, capsys):
        ref = cli_manifest / "reference"
        assert cli("eval", "match", "--generated", ref, "--target", ref, "--csv", tmp_path / "m.csv") == 0
        assert "mean pixel_match 1.0000 over 4" in capsys.readouterr().out
        assert (tmp_path / "m.csv").read_text().splitlines()[1] == "U+0041.png,1.000000"

    def test_diff(self, cli, cli_manifest, tmp_path):
        a = cli_manifest / "style_00" / "U+0041.png"
        b = cli_manifest / "style_01" / "U+0041.png"
        assert cli("eval", "diff", a, b, "-o", tmp_path / "d.png") == 0
        d = GlyphBitmap.load_png(tmp_path / "d.png").pixels
        expected = 1.0 - np.abs(GlyphBitmap.load_png(a).pixels - GlyphBitmap.load_png(b).pixels)
        np.testing.assert_allclose(d, expected, atol=1 / 255)

    def test_missing(self, cli, tmp_path):
        assert cli("eval", "diff", tmp_path / "a.png", tmp_path / "b.png", "-o", tmp_path / "d.png") == 3


class TestThreads:
    def test_cap_applied(self, cli, cli_manifest, monkeypatch, tmp_path):
        monkeypatch.setenv(THREADS_ENV, "2")
        try:
            assert cli("trace", "--in", cli_manifest / "reference" / "U+0041.png", "-o", tmp_path / "g.svg") == 0
            assert torch.get_num_threads() == 2
        finally:
            torch.set_num_threads(1)

    @pytest.mark.parametrize("value", ["0", "many"])
    def test_invalid(self, cli, cli_manifest, monkeypatch, tmp_path, value):
        monkeypatch.setenv(THREADS_ENV, value)
        assert cli("trace", "--in", cli_manifest / "reference" / "U+0041.png", "-o", tmp_path / "g.svg") == 2
