"""Single-file checkpoint container.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"GFCKPT\\x00\\x01"
    8       4     format version (uint32, currently 1)
    12      8     metadata length N in bytes (uint64)
    20      N     metadata: UTF-8 JSON, keys sorted, no insignificant whitespace
    20+N    ...   array payload: float32 little-endian, C order, back to back

``metadata["arrays"]`` lists ``{"name", "shape", "offset"}`` for each array,
offsets counted from the start of the payload. Array names are stable:

* ``param/<module path>``  denoiser parameters (torch ``state_dict`` keys)
* ``adam/exp_avg/<module path>`` and ``adam/exp_avg_sq/<module path>``
* ``ema/<module path>``  EMA shadow weights, when EMA is enabled

Derived schedule arrays are never stored, only ``{T, beta_start, beta_end, form}``.
Serialization is a pure function of the content, so load -> save reproduces
the original bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule
from .errors import CheckpointFormatError, DataIOError

MAGIC = b"GFCKPT\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
SUFFIX = ".ckpt"


@dataclass
class Checkpoint:
    denoiser_config: DenoiserConfig
    schedule: NoiseSchedule
    params: dict[str, np.ndarray]
    epoch: int = 0
    global_step: int = 0
    manifest_fingerprint: str = ""
    optimizer: dict = field(default_factory=dict)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"param/{k}", v) for k, v in self.params.items()]
        items += [(f"adam/{k}", v) for k, v in self.optimizer_state.items()]
        if self.ema is not None:
            items += [(f"ema/{k}", v) for k, v in self.ema.items()]
        return items

    def to_bytes(self) -> bytes:
        index = []
        chunks = []
        offset = 0
        for name, arr in self._arrays():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": name, "offset": offset, "shape": list(np.shape(arr))})
            chunks.append(data)
            offset += len(data)
        metadata = {
            "arrays": index,
            "denoiser": self.denoiser_config.to_dict(),
            "schedule": self.schedule.params(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "manifest_fingerprint": self.manifest_fingerprint,
            "optimizer": self.optimizer,
            "ema_enabled": self.ema is not None,
            "meta": self.meta,
        }
        blob = json.dumps(metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        data = self.to_bytes()
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointFormatError("truncated checkpoint header")
        magic, version, n = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointFormatError("not a glyphforge checkpoint (bad magic)")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        start = _HEADER.size
        try:
            meta = json.loads(data[start:start + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint metadata: {exc}") from exc
        payload = memoryview(data)[start + n:]
        params, adam, ema = {}, {}, {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            off = entry["offset"]
            if off + 4 * count > len(payload):
                raise CheckpointFormatError(f"array {entry['name']} runs past end of file")
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            kind, _, name = entry["name"].partition("/")
            {"param": params, "adam": adam, "ema": ema}[kind][name] = arr
        return cls(
            denoiser_config=DenoiserConfig.from_dict(meta["denoiser"]),
            schedule=NoiseSchedule.from_params(meta["schedule"]),
            params=params,
            epoch=meta["epoch"],
            global_step=meta["global_step"],
            manifest_fingerprint=meta["manifest_fingerprint"],
            optimizer=meta["optimizer"],
            optimizer_state=adam,
            ema=ema if meta.get("ema_enabled") else None,
            meta=meta.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        path = resolve_checkpoint_path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)


def resolve_checkpoint_path(path: str | os.PathLike) -> Path:
    """Accept ``ckpt/epoch10``, ``ckpt/epoch10.ckpt`` or a run directory (its latest checkpoint)."""
    path = Path(path)
    if path.is_file():
        return path
    if path.with_name(path.name + SUFFIX).is_file():
        return path.with_name(path.name + SUFFIX)
    if path.is_dir():
        latest = path / ("latest" + SUFFIX)
        if latest.is_file():
            return latest
        found = [(_epoch_number(p), p) for p in path.glob("epoch*" + SUFFIX)]
        found = [item for item in found if item[0] is not None]
        if found:
            return max(found)[1]
    raise DataIOError(f"checkpoint not found: {path}")


def _epoch_number(path: Path) -> int | None:
    digits = path.stem[len("epoch"):]
    return int(digits) if digits.isdigit() else None
