"""Noise-prediction training over glyph pairs, with checkpointing and resume.

Every source of randomness in an epoch (shuffle order, timesteps, noise) is
derived from ``(seed, epoch)``, so resuming from the checkpoint written at
the end of epoch ``e`` continues exactly as an uninterrupted run would.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import SUFFIX, Checkpoint
from .dataset import PairDataset, PairManifest
from .denoiser import DESK_CONFIG, Denoiser, DenoiserConfig, build
from .diffusion import NoiseSchedule, make_schedule
from .errors import DataIOError, FingerprintMismatch, InvalidConfig, NonFiniteLoss, ShapeMismatch, ValidationError

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    ema_decay: float | None = None
    seed: int = 0
    schedule: dict = field(default_factory=lambda: {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    loss_log_path: str | None = None
    checkpoint_every: int = 5
    grad_clip: float | None = 1.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be positive, got {self.learning_rate}")
        if self.ema_decay is not None and not (0.0 < self.ema_decay < 1.0):
            raise InvalidConfig(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.checkpoint_every < 1:
            raise InvalidConfig("checkpoint_every must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidConfig("grad_clip must be positive or None")
        make_schedule(**{k: self.schedule[k] for k in ("T", "beta_start", "beta_end")})
        return self

    def make_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_params(self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_seeds(seed: int, epoch: int) -> tuple[int, int]:
    """Independent (shuffle, noise) seeds for one epoch."""
    a, b = np.random.SeedSequence([int(seed), int(epoch)]).generate_state(2)
    return int(a), int(b)


def make_optimizer(net: Denoiser, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def corrupt(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Batched ``q_sample`` with one timestep per item."""
    ab = torch.from_numpy(np.array(schedule.alpha_bar))[t - 1]
    shape = (-1,) + (1,) * (x0.dim() - 1)
    return (ab.sqrt().reshape(shape) * x0 + (1.0 - ab).sqrt().reshape(shape) * eps).to(x0.dtype)


def _as_batch(batch):
    x0, ref, style_ids = batch
    x0 = torch.as_tensor(np.asarray(x0), dtype=torch.float32)
    ref = torch.as_tensor(np.asarray(ref), dtype=torch.float32)
    style_ids = torch.as_tensor(np.asarray(style_ids), dtype=torch.long).reshape(-1)
    if x0.dim() == 3:
        x0, ref = x0[:, None], ref[:, None]
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    if x0.shape != ref.shape or style_ids.numel() != x0.shape[0]:
        raise ShapeMismatch(f"inconsistent batch shapes {tuple(x0.shape)}, {tuple(ref.shape)}, {tuple(style_ids.shape)}")
    return x0, ref, style_ids


def diffusion_loss(net, batch, schedule: NoiseSchedule, generator: torch.Generator):
    """Mean squared error between predicted and injected noise, plus the draws used."""
    x0, ref, style_ids = _as_batch(batch)
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    x_t = corrupt(x0, t, eps, schedule)
    style = net.style_table(style_ids)
    pred = net(x_t, ref, t, style)
    return F.mse_loss(pred, eps), t, pred


def train_step(
    net: Denoiser,
    batch,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    optimizer: torch.optim.Optimizer,
    grad_clip: float | None = 1.0,
) -> float:
    """One optimizer update; returns the loss measured before the update."""
    net.train()
    loss, t, pred = diffusion_loss(net, batch, schedule, rng)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(
            f"non-finite loss {value} at timesteps {t.tolist()}; "
            f"max |prediction| = {float(pred.detach().abs().nan_to_num(posinf=float('inf')).max()):.4g}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    return value


def ema_update(shadow: Mapping, live: Mapping, decay: float) -> dict:
    """``decay * shadow + (1 - decay) * live`` for every named array."""
    if not (0.0 <= decay <= 1.0):
        raise ValidationError(f"decay must lie in [0, 1], got {decay}")
    if shadow.keys() != live.keys():
        raise ShapeMismatch("shadow and live parameter names differ")
    out = {}
    for name, s in shadow.items():
        v = live[name]
        if tuple(s.shape) != tuple(v.shape):
            raise ShapeMismatch(f"{name}: shadow {tuple(s.shape)} vs live {tuple(v.shape)}")
        out[name] = decay * s + (1.0 - decay) * v
    return out


# -- checkpoint <-> live objects ---------------------------------------------

def export_params(net: Denoiser) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in net.named_parameters()}


def load_params(net: Denoiser, params: Mapping[str, np.ndarray]) -> None:
    own = dict(net.named_parameters())
    if own.keys() != params.keys():
        missing = sorted(own.keys() - params.keys())
        extra = sorted(params.keys() - own.keys())
        raise ValidationError(f"checkpoint parameters do not match network (missing {missing[:3]}, extra {extra[:3]})")
    with torch.no_grad():
        for k, p in own.items():
            if tuple(p.shape) != tuple(params[k].shape):
                raise ShapeMismatch(f"{k}: network {tuple(p.shape)} vs checkpoint {tuple(params[k].shape)}")
            p.copy_(torch.from_numpy(np.asarray(params[k], dtype=np.float32)))


def export_optimizer(net: Denoiser, optimizer: torch.optim.Adam) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    step = 0
    for name, p in net.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        step = int(float(state["step"]))
        arrays[f"exp_avg/{name}"] = state["exp_avg"].detach().numpy().astype(np.float32, copy=True)
        arrays[f"exp_avg_sq/{name}"] = state["exp_avg_sq"].detach().numpy().astype(np.float32, copy=True)
    group = optimizer.param_groups[0]
    info = {"type": "adam", "lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"], "step": step}
    return info, arrays


def load_optimizer(net: Denoiser, optimizer: torch.optim.Adam, info: dict, arrays: Mapping[str, np.ndarray]) -> None:
    for name, p in net.named_parameters():
        key = f"exp_avg/{name}"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(info["step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(arrays[key], dtype=np.float32)),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"exp_avg_sq/{name}"], dtype=np.float32)),
        }


def network_from_checkpoint(ckpt: Checkpoint, use_ema: bool = False) -> Denoiser:
    net = build(ckpt.denoiser_config, seed=0)
    load_params(net, ckpt.ema if use_ema and ckpt.ema is not None else ckpt.params)
    net.eval()
    return net


def denoiser_config_for(manifest: PairManifest, base: DenoiserConfig = DESK_CONFIG) -> DenoiserConfig:
    return replace(base, input_side=manifest.canvas_size, num_styles=len(manifest.styles)).validate()


# -- the loop -------------------------------------------------------------------

class _LossLog:
    def __init__(self, path: str | os.PathLike | None, append: bool):
        self.path = Path(path) if path else None
        if self.path is None:
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append or not self.path.exists():
                self.path.write_text("epoch,step,loss\n")
        except OSError as exc:
            raise DataIOError(f"cannot write loss log {self.path}: {exc}") from exc

    def write(self, rows: list[tuple[int, int, float]]) -> None:
        if self.path is None or not rows:
            return
        try:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerows((e, s, repr(v)) for e, s, v in rows)
        except OSError as exc:
            raise DataIOError(f"cannot append to loss log {self.path}: {exc}") from exc


def read_loss_log(path: str | os.PathLike) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def train_loop(
    manifest: PairManifest,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    denoiser_config: DenoiserConfig | None = None,
    resume: Checkpoint | str | os.PathLike | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Train for ``config.epochs`` epochs and return the final checkpoint.

    Checkpoints ``epoch<N>.ckpt`` are written to ``out_dir`` every
    ``checkpoint_every`` epochs and after the last one (also as ``latest.ckpt``).
    """
    config.validate()
    schedule = config.make_schedule()
    fingerprint = manifest.fingerprint()
    dataset = PairDataset(manifest)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ckpt.manifest_fingerprint != fingerprint:
            raise FingerprintMismatch(
                "manifest content differs from the one this checkpoint was trained on; refusing to resume"
            )
        if ckpt.schedule != schedule:
            raise InvalidConfig(f"schedule {schedule.params()} differs from checkpoint {ckpt.schedule.params()}")
        net_config = ckpt.denoiser_config
        net = build(net_config, seed=config.seed)
        load_params(net, ckpt.params)
        optimizer = make_optimizer(net, config.learning_rate)
        load_optimizer(net, optimizer, ckpt.optimizer, ckpt.optimizer_state)
        ema = {k: torch.from_numpy(v.copy()) for k, v in ckpt.ema.items()} if ckpt.ema is not None else None
        start_epoch, global_step = ckpt.epoch, ckpt.global_step
    else:
        net_config = denoiser_config or denoiser_config_for(manifest)
        if net_config.input_side != manifest.canvas_size or net_config.num_styles != len(manifest.styles):
            raise InvalidConfig("denoiser input side / style count do not match the manifest")
        net = build(net_config, seed=config.seed)
        optimizer = make_optimizer(net, config.learning_rate)
        ema = {k: v.detach().clone() for k, v in net.named_parameters()} if config.ema_decay else None
        start_epoch, global_step = 0, 0

    if config.ema_decay and ema is None:
        ema = {k: v.detach().clone() for k, v in net.named_parameters()}
    loss_log = _LossLog(config.loss_log_path, append=resume is not None)
    out = Path(out_dir) if out_dir is not None else None

    def snapshot(epoch: int) -> Checkpoint:
        info, arrays = export_optimizer(net, optimizer)
        return Checkpoint(
            denoiser_config=net_config,
            schedule=schedule,
            params=export_params(net),
            epoch=epoch,
            global_step=global_step,
            manifest_fingerprint=fingerprint,
            optimizer=info,
            optimizer_state=arrays,
            ema={k: v.numpy().astype(np.float32, copy=True) for k, v in ema.items()} if ema is not None else None,
            meta={
                "train": config.to_dict(),
                "styles": list(manifest.styles),
                "reference_font_name": manifest.reference_font_name,
                "reference_font_path": manifest.reference_font_path,
                "manifest_path": str((manifest.root / "manifest.json").resolve()),
            },
        )

    ckpt = snapshot(start_epoch)
    for epoch in range(start_epoch + 1, config.epochs + 1):
        shuffle_seed, noise_seed = epoch_seeds(config.seed, epoch)
        gen = torch.Generator().manual_seed(noise_seed)
        rows = []
        for batch in dataset.batches(config.batch_size, shuffle_seed):
            global_step += 1
            loss = train_step(net, batch, schedule, gen, optimizer, config.grad_clip)
            rows.append((epoch, global_step, loss))
            if ema is not None:
                with torch.no_grad():
                    live = {k: v.detach() for k, v in net.named_parameters()}
                    ema = ema_update(ema, live, config.ema_decay)
        loss_log.write(rows)
        mean_loss = float(np.mean([r[2] for r in rows]))
        log.info("epoch %d  mean loss %.5f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if out is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            ckpt = snapshot(epoch)
            ckpt.save(out / f"epoch{epoch}{SUFFIX}")
    ckpt = snapshot(config.epochs if config.epochs > start_epoch else start_epoch)
    if out is not None:
        ckpt.save(out / f"latest{SUFFIX}")
    return ckpt
