"""Glyph rasterization and reference/target pair manifests.

Bitmaps use 0.0 for ink and 1.0 for background. The diffusion model works on
the normalized form ``v = 1 - 2 * pixel`` so ink maps to +1 and an empty
canvas is the constant -1.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont, UnidentifiedImageError

from .errors import DataIOError, EmptyIntersection, InvalidCanvas, MissingGlyph, ShapeMismatch, ValidationError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def check_canvas(canvas: int) -> int:
    if not isinstance(canvas, (int, np.integer)) or isinstance(canvas, bool) or canvas < 8 or canvas & (canvas - 1):
        raise InvalidCanvas(f"canvas must be a power of two >= 8, got {canvas!r}")
    return int(canvas)


def format_codepoint(cp: int) -> str:
    return f"U+{cp:04X}"


def parse_codepoint(text: str | int) -> int:
    """Accepts ``U+4E00``, ``0x4e00``, ``19968`` or a single character."""
    if isinstance(text, int):
        return text
    s = text.strip()
    if s.upper().startswith("U+"):
        return int(s[2:], 16)
    if s.lower().startswith("0x"):
        return int(s, 16)
    if s.isdigit():
        return int(s)
    if len(s) == 1:
        return ord(s)
    raise ValidationError(f"cannot parse codepoint {text!r}")


@dataclass(frozen=True, eq=False)
class GlyphBitmap:
    """Square grayscale raster of a single glyph, row-major, values in [0, 1]."""

    pixels: np.ndarray
    codepoint: int = -1

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ShapeMismatch(f"glyph bitmaps are square 2-D arrays, got shape {px.shape}")
        if not np.isfinite(px).all() or px.min(initial=0.0) < 0.0 or px.max(initial=1.0) > 1.0:
            raise ValidationError("bitmap pixels must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def ink_fraction(self, threshold: float = 0.5) -> float:
        return float((self.pixels < threshold).mean())

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def save_png(self, path: str | os.PathLike) -> None:
        Image.fromarray(self.to_uint8(), mode="L").save(path, format="PNG")

    @classmethod
    def load_png(cls, path: str | os.PathLike, codepoint: int = -1) -> "GlyphBitmap":
        try:
            with Image.open(path) as im:
                if im.format != "PNG":
                    raise ValidationError(f"{path}: not a PNG image")
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except UnidentifiedImageError as exc:
            raise ValidationError(f"{path}: not a PNG image") from exc
        except OSError as exc:
            raise DataIOError(f"cannot read bitmap {path}: {exc}") from exc
        return cls(arr, codepoint)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, GlyphBitmap)
            and self.codepoint == other.codepoint
            and np.array_equal(self.pixels, other.pixels)
        )


def normalize(bitmap: GlyphBitmap) -> np.ndarray:
    """Bitmap pixels -> data space: ink (0) -> +1, background (1) -> -1."""
    return 1.0 - 2.0 * bitmap.pixels


def denormalize(values, codepoint: int = -1, quantize: bool = True) -> GlyphBitmap:
    """Inverse of :func:`normalize`; values outside [-1, 1] are clipped.

    With ``quantize`` the result is snapped to the 256 levels a PNG can hold.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    px = np.clip((1.0 - values) / 2.0, 0.0, 1.0)
    if quantize:
        px = np.round(px * 255.0) / 255.0
    return GlyphBitmap(px, codepoint)


class Font:
    """An outline font file plus the metrics needed for em-box rendering."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not self.path.is_file():
            raise DataIOError(f"font file not found: {self.path}")
        try:
            tt = TTFont(str(self.path), lazy=True)
            self.cmap = frozenset(tt.getBestCmap() or {})
            self.units_per_em = tt["head"].unitsPerEm
            self.ascent = tt["hhea"].ascent
            self.descent = tt["hhea"].descent
            self.name = tt["name"].getBestFullName() or self.path.stem
            tt.close()
        except Exception as exc:  # fontTools raises a zoo of types on bad input
            raise DataIOError(f"cannot load font {self.path}: {exc}") from exc

    def __repr__(self) -> str:
        return f"Font({str(self.path)!r})"

    def has(self, codepoint: int) -> bool:
        return codepoint in self.cmap

    @property
    def codepoints(self) -> frozenset[int]:
        return self.cmap

    def _pil(self, size: int) -> ImageFont.FreeTypeFont:
        return _load_pil_font(str(self.path), size)


@lru_cache(maxsize=64)
def _load_pil_font(path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(path, size=size)


def as_font(source) -> Font:
    return source if isinstance(source, Font) else Font(source)


def rasterize_glyph(font_source, codepoint: int, canvas: int) -> GlyphBitmap:
    """Render ``codepoint`` anti-aliased, scaled so the em box fills the canvas.

    The advance box is centred horizontally; vertically the em box is split
    at the baseline in the ratio of the font's ascent to descent.
    """
    canvas = check_canvas(canvas)
    font = as_font(font_source)
    if not font.has(codepoint):
        raise MissingGlyph(f"{font.name} has no glyph for {format_codepoint(codepoint)}")
    pil = font._pil(canvas)
    ch = chr(codepoint)
    advance = pil.getlength(ch)
    baseline = canvas * font.ascent / (font.ascent - font.descent)
    image = Image.new("L", (canvas, canvas), 255)
    ImageDraw.Draw(image).text(((canvas - advance) / 2.0, baseline), ch, fill=0, font=pil, anchor="ls")
    return GlyphBitmap(np.asarray(image, dtype=np.float64) / 255.0, codepoint)


@dataclass(frozen=True)
class ManifestRecord:
    codepoint: int
    reference_path: str
    target_path: str
    style_id: int


@dataclass
class PairManifest:
    canvas_size: int
    reference_font_name: str
    styles: list[str]
    records: list[ManifestRecord]
    reference_font_path: str | None = None
    root: Path = field(default_factory=Path.cwd, compare=False)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        check_canvas(self.canvas_size)
        seen = set()
        for rec in self.records:
            if not (0 <= rec.style_id < len(self.styles)):
                raise ValidationError(f"record {rec} has style_id outside [0, {len(self.styles)})")
            key = (rec.codepoint, rec.style_id)
            if key in seen:
                raise ValidationError(f"duplicate record for {format_codepoint(rec.codepoint)}, style {rec.style_id}")
            seen.add(key)

    def to_json(self) -> dict:
        d = {
            "canvas_size": self.canvas_size,
            "reference_font_name": self.reference_font_name,
            "styles": list(self.styles),
            "records": [
                {
                    "codepoint": r.codepoint,
                    "reference_path": r.reference_path,
                    "target_path": r.target_path,
                    "style_id": r.style_id,
                }
                for r in self.records
            ],
        }
        if self.reference_font_path is not None:
            d["reference_font_path"] = self.reference_font_path
        return d

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        text = json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n"
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PairManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed manifest JSON: {exc}") from exc
        try:
            records = [ManifestRecord(int(r["codepoint"]), r["reference_path"], r["target_path"], int(r["style_id"]))
                       for r in data["records"]]
            return cls(
                canvas_size=int(data["canvas_size"]),
                reference_font_name=data["reference_font_name"],
                styles=list(data["styles"]),
                records=records,
                reference_font_path=data.get("reference_font_path"),
                root=path.parent,
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: manifest missing field {exc}") from exc

    def fingerprint(self) -> str:
        """SHA-256 over the manifest JSON and the bytes of every bitmap it names."""
        h = hashlib.sha256()
        h.update(json.dumps(self.to_json(), sort_keys=True).encode())
        for rel in sorted({p for r in self.records for p in (r.reference_path, r.target_path)}):
            try:
                h.update(rel.encode() + b"\0" + (self.root / rel).read_bytes())
            except OSError as exc:
                raise DataIOError(f"cannot read bitmap {self.root / rel}: {exc}") from exc
        return h.hexdigest()


def shared_codepoints(reference: Font, target: Font, restrict: Iterable[int] | None = None) -> list[int]:
    common = reference.codepoints & target.codepoints
    if restrict is not None:
        common &= set(restrict)
    return sorted(common)


def plan_pairs(reference, targets: Sequence, codepoints: Iterable[int] | None = None) -> list[tuple[int, int]]:
    """``(codepoint, style_id)`` for every codepoint shared by the reference and each target."""
    if not targets:
        raise ValidationError("at least one target font is required")
    reference = as_font(reference)
    restrict = None if codepoints is None else set(codepoints)
    pairs = []
    for style_id, target in enumerate(targets):
        target = as_font(target)
        common = shared_codepoints(reference, target, restrict)
        if not common:
            raise EmptyIntersection(f"{target.name} shares no codepoints with {reference.name}")
        pairs.extend((cp, style_id) for cp in common)
    return pairs


def build_manifest(
    reference_font,
    target_fonts: Sequence,
    canvas: int,
    out_dir: str | os.PathLike,
    codepoints: Iterable[int] | None = None,
) -> PairManifest:
    """Rasterize every shared codepoint and write PNGs plus ``manifest.json`` under ``out_dir``.

    ``codepoints`` optionally restricts the intersection to a subset.
    """
    canvas = check_canvas(canvas)
    reference = as_font(reference_font)
    targets = [as_font(t) for t in target_fonts]
    pairs = plan_pairs(reference, targets, codepoints)
    out = Path(out_dir)
    try:
        (out / "reference").mkdir(parents=True, exist_ok=True)
        for i in range(len(targets)):
            (out / f"style_{i:02d}").mkdir(exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out}: {exc}") from exc

    records = []
    written_refs: set[int] = set()
    for cp, style_id in pairs:
        ref_rel = f"reference/{format_codepoint(cp)}.png"
        tgt_rel = f"style_{style_id:02d}/{format_codepoint(cp)}.png"
        try:
            if cp not in written_refs:
                rasterize_glyph(reference, cp, canvas).save_png(out / ref_rel)
                written_refs.add(cp)
            rasterize_glyph(targets[style_id], cp, canvas).save_png(out / tgt_rel)
        except OSError as exc:
            raise DataIOError(f"cannot write bitmap under {out}: {exc}") from exc
        records.append(ManifestRecord(cp, ref_rel, tgt_rel, style_id))
    log.info("built %d pairs over %d styles", len(records), len(targets))

    manifest = PairManifest(
        canvas_size=canvas,
        reference_font_name=reference.name,
        styles=[t.name for t in targets],
        records=records,
        reference_font_path=str(reference.path.resolve()),
        root=out,
    )
    manifest.save()
    return manifest


class PairDataset:
    """All pairs of a manifest decoded into normalized float32 arrays."""

    def __init__(self, manifest: PairManifest):
        if not manifest.records:
            raise ValidationError("manifest has no records")
        S = manifest.canvas_size
        n = len(manifest.records)
        self.manifest = manifest
        self.targets = np.empty((n, 1, S, S), dtype=np.float32)
        self.references = np.empty((n, 1, S, S), dtype=np.float32)
        self.style_ids = np.empty(n, dtype=np.int64)
        self.codepoints = np.empty(n, dtype=np.int64)
        ref_cache: dict[str, np.ndarray] = {}
        for i, rec in enumerate(manifest.records):
            if rec.reference_path not in ref_cache:
                ref_cache[rec.reference_path] = self._load(manifest.root / rec.reference_path, rec.codepoint, S)
            self.references[i, 0] = ref_cache[rec.reference_path]
            self.targets[i, 0] = self._load(manifest.root / rec.target_path, rec.codepoint, S)
            self.style_ids[i] = rec.style_id
            self.codepoints[i] = rec.codepoint

    @staticmethod
    def _load(path: Path, cp: int, side: int) -> np.ndarray:
        bmp = GlyphBitmap.load_png(path, cp)
        if bmp.width != side:
            raise ShapeMismatch(f"{path} is {bmp.width}px, manifest canvas is {side}px")
        return normalize(bmp)

    def __len__(self) -> int:
        return len(self.style_ids)

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """One epoch of ``(x0, reference, style_id)`` batches in a seeded shuffle."""
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        order = np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.targets[idx], self.references[idx], self.style_ids[idx]


def load_batches(manifest: PairManifest, batch_size: int, seed: int):
    return PairDataset(manifest).batches(batch_size, seed)
