"""Training regimes: from-scratch pretraining and continual adaptation.

Both regimes share one step anatomy: multi-crop self-distillation views feed
the DINO objective, then a separate pass over the two un-augmented (resized)
chips feeds the cross-sensor alignment loss. A single optimizer step updates
the student and projection heads; the teacher follows by EMA and the center
by a batch-mean EMA. Frozen networks never receive gradients.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import Tensor
from torchvision.transforms import InterpolationMode

from . import data as data_mod
from .backbone import (
    DinoHead,
    ProjectionHead,
    TokenEmbeddings,
    VisionTransformer,
    cosine_schedule,
    ema_update,
    freeze,
)
from .checkpoints import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import PairedSample, PairManifest, SensorChip, resize_image
from .errors import ConfigError, ShapeError, TrainingError
from .losses import (
    ClampStats,
    LossWeights,
    dino_loss,
    dino_sharpen,
    msad_loss,
    msad_probabilities_global,
    msad_probabilities_patchwise,
    smooth_targets,
    update_center,
    xstars_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class ContinualSetup:
    """Frozen domain teacher F plus the sensor roles of the adaptation."""

    domain_teacher_checkpoint: Path
    source_sensor: str
    target_sensor: str

    def __post_init__(self):
        if self.source_sensor == self.target_sensor:
            raise ConfigError("continual source and target sensors must differ")


@dataclass
class DinoState:
    """Mutable training state; the loop is the single writer."""

    student: VisionTransformer
    teacher: VisionTransformer
    student_head: DinoHead
    teacher_head: DinoHead
    center: Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0
    # current schedule values, refreshed by the loop before each step
    lr: float = 0.0
    weight_decay: float = 0.0
    ema_momentum: float = 0.996
    teacher_temp: float = 0.04


@dataclass
class StepResult:
    loss_total: float
    loss_dino: float
    loss_msad: float
    msad_pairs: dict[str, float] = field(default_factory=dict)
    clamp_count: int = 0


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    checkpoints: list[Path]
    final_checkpoint: Path


# ---------------------------------------------------------------------------
# Multi-crop augmentation


def _sample_rng(seed: int, epoch: int, footprint_id: str, stream: int) -> np.random.Generator:
    # per-sample seeding independent of batch composition and worker order
    key = zlib.crc32(footprint_id.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, key, stream]))


def _random_crop_params(side: int, scale: tuple[float, float], rng: np.random.Generator):
    area = side * side
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= side and 0 < h <= side:
            top = int(rng.integers(0, side - h + 1))
            left = int(rng.integers(0, side - w + 1))
            return top, left, h, w
    return 0, 0, side, side  # bounded retries exhausted: fall back to the full image


def _augment_view(image: Tensor, scale: tuple[float, float], side: int, rng: np.random.Generator, *, blur_p: float, solarize_p: float) -> Tensor:
    top, left, h, w = _random_crop_params(image.shape[-1], scale, rng)
    out = TF.resized_crop(
        image, top, left, h, w, [side, side], InterpolationMode.BILINEAR, antialias=True
    )
    if rng.random() < 0.5:
        out = TF.hflip(out)
    if rng.random() < 0.8:
        out = TF.adjust_brightness(out, 1.0 + rng.uniform(-0.4, 0.4))
        out = TF.adjust_contrast(out, 1.0 + rng.uniform(-0.4, 0.4))
        out = TF.adjust_saturation(out, 1.0 + rng.uniform(-0.2, 0.2))
        out = TF.adjust_hue(out, rng.uniform(-0.1, 0.1))
    if rng.random() < 0.2:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if rng.random() < blur_p:
        kernel = max(3, (side // 10) | 1)
        out = TF.gaussian_blur(out, kernel, [rng.uniform(0.1, 2.0)] * 2)
    if solarize_p > 0 and rng.random() < solarize_p:
        out = TF.solarize(out, 0.5)
    return out.clamp_(0.0, 1.0)


def multicrop_augment(
    image: Tensor | np.ndarray, config: TrainConfig, rng: np.random.Generator
) -> tuple[list[Tensor], list[Tensor]]:
    """Two global views plus the configured local views, all at the input side.

    Deterministic for a fixed generator state. Local views are small crops
    resized back up, so every view shares one token grid.
    """
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    image = image.to(torch.float32)
    side = config.input_side
    if image.shape[-1] < side or image.shape[-2] < side:
        raise ShapeError(f"image side {tuple(image.shape[-2:])} below configured side {side}")
    global_views = [
        _augment_view(image, config.global_crop_scale, side, rng, blur_p=1.0, solarize_p=0.0),
        _augment_view(image, config.global_crop_scale, side, rng, blur_p=0.1, solarize_p=0.2),
    ]
    local_views = [
        _augment_view(image, config.local_crop_scale, side, rng, blur_p=0.5, solarize_p=0.0)
        for _ in range(config.local_crops)
    ]
    return global_views, local_views


# ---------------------------------------------------------------------------
# Model construction


def _param_groups(modules: Sequence[torch.nn.Module]):
    decay, no_decay = [], []
    for module in modules:
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            if p.ndim <= 1 or name.endswith("cls_token") or name.endswith("pos_embed"):
                no_decay.append(p)
            else:
                decay.append(p)
    return [
        {"params": decay, "follows_wd_schedule": True},
        {"params": no_decay, "weight_decay": 0.0, "follows_wd_schedule": False},
    ]


def init_state(config: TrainConfig, sensors: Sequence[str]) -> tuple[DinoState, dict[str, ProjectionHead]]:
    """Seeded construction of all networks, the optimizer and the center."""
    torch.manual_seed(config.seed)
    student = VisionTransformer.from_preset(config.preset, config.input_side)
    teacher = VisionTransformer.from_preset(config.preset, config.input_side)
    teacher.load_state_dict(student.state_dict())
    head_kwargs = dict(
        in_dim=student.width,
        out_dim=config.dino_out_dim,
        hidden_dim=config.dino_hidden_dim,
        bottleneck_dim=config.dino_bottleneck_dim,
    )
    student_head = DinoHead(**head_kwargs)
    teacher_head = DinoHead(**head_kwargs)
    teacher_head.load_state_dict(student_head.state_dict())
    freeze(teacher)
    freeze(teacher_head)
    heads = {
        s: ProjectionHead(s, in_dim=student.width, out_dim=config.proj_dim or student.width)
        for s in sensors
    }
    optimizer = torch.optim.AdamW(
        _param_groups([student, student_head, *heads.values()]),
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    center = torch.zeros(config.dino_out_dim)
    state = DinoState(
        student=student,
        teacher=teacher,
        student_head=student_head,
        teacher_head=teacher_head,
        center=center,
        optimizer=optimizer,
        teacher_temp=config.teacher_temp_start,
    )
    return state, heads


# ---------------------------------------------------------------------------
# Shared step internals


def _chips_tensor(samples: Sequence[PairedSample], sensor: str, config: TrainConfig) -> Tensor:
    arrs = []
    for s in samples:
        chip = s.chips[sensor]
        pixels = chip.pixels
        if pixels.shape[0] != config.input_side:
            pixels = resize_image(pixels, config.input_side)
        arrs.append(torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1))
    return torch.stack(arrs).to(torch.float32)


def _build_views(
    samples: Sequence[PairedSample],
    sensors: Sequence[str],
    config: TrainConfig,
    epoch: int,
) -> dict[str, list[Tensor]]:
    """Per sensor: stacked view batches, global views first."""
    views: dict[str, list[Tensor]] = {}
    for s_idx, sensor in enumerate(sensors):
        per_view: list[list[Tensor]] = [[] for _ in range(2 + config.local_crops)]
        for sample in samples:
            chip = sample.chips[sensor]
            pixels = chip.pixels
            if pixels.shape[0] != config.input_side:
                pixels = resize_image(pixels, config.input_side)
            rng = _sample_rng(config.seed, epoch, sample.footprint_id, s_idx)
            g, l = multicrop_augment(pixels, config, rng)
            for i, v in enumerate(g + l):
                per_view[i].append(v)
        views[sensor] = [torch.stack(v) for v in per_view]
    return views


def _dino_losses(
    views: dict[str, list[Tensor]],
    state: DinoState,
    config: TrainConfig,
) -> tuple[Tensor, Tensor]:
    """Mean DINO loss over sensors, plus raw teacher logits for the center update."""
    sensors = list(views)
    n_views = len(next(iter(views.values())))
    all_views = torch.cat([v for s in sensors for v in views[s]])
    student_logits = state.student_head(state.student(all_views).global_token)
    chunks = student_logits.chunk(len(sensors) * n_views)

    global_views = torch.cat([v for s in sensors for v in views[s][:2]])
    with torch.no_grad():
        teacher_logits = state.teacher_head(state.teacher(global_views).global_token)
    t_chunks = teacher_logits.chunk(len(sensors) * 2)

    per_sensor = []
    for i, sensor in enumerate(sensors):
        student_probs = [
            dino_sharpen(chunks[i * n_views + v], config.student_temp) for v in range(n_views)
        ]
        teacher_probs = [
            dino_sharpen(t_chunks[i * 2 + g], state.teacher_temp, center=state.center)
            for g in range(2)
        ]
        per_sensor.append(dino_loss(student_probs, teacher_probs))
    return torch.stack(per_sensor).mean(), teacher_logits


def _msad_from_embeddings(
    embeddings: dict[str, "object"],
    config: TrainConfig,
    clamp_stats: ClampStats,
) -> tuple[Tensor | float, dict[str, float]]:
    """Mean alignment loss over every unordered sensor pair present."""
    sensors = sorted(embeddings)
    pairs = list(combinations(sensors, 2))
    if not pairs:
        return 0.0, {}
    n = embeddings[sensors[0]].global_token.shape[0]
    alpha = config.alpha if config.smoothing else 0.0
    per_pair: dict[str, float] = {}
    terms = []
    for a, b in pairs:
        ta, tb = embeddings[a], embeddings[b]
        if config.patchwise:
            sim = msad_probabilities_patchwise(ta.patch_tokens, tb.patch_tokens, config.msad_tau)
        else:
            sim = msad_probabilities_global(ta.global_token, tb.global_token, config.msad_tau)
        targets = smooth_targets(n, alpha, dtype=sim.pA.dtype)
        term = msad_loss(sim, targets, clamp_stats)
        terms.append(term)
        per_pair[f"{a}|{b}"] = float(term.detach())
    return torch.stack(terms).mean(), per_pair


def pretrain_losses(
    pairs: Sequence[PairedSample],
    state: DinoState,
    heads: dict[str, ProjectionHead],
    config: TrainConfig,
    epoch: int = 0,
) -> tuple[Tensor, Tensor | float, dict[str, float], Tensor, ClampStats]:
    """All per-step losses of the from-scratch regime, without any update."""
    if not pairs:
        raise TrainingError("empty batch")
    sensors = config.sensors or sorted(pairs[0].chips)
    views = _build_views(pairs, sensors, config, epoch)
    dino, teacher_logits = _dino_losses(views, state, config)

    clamp_stats = ClampStats()
    msad: Tensor | float = 0.0
    per_pair: dict[str, float] = {}
    if len(sensors) >= 2:
        base = torch.cat([_chips_tensor(pairs, s, config) for s in sensors])
        # alignment runs on the un-augmented resized chips, as its own pass;
        # with lambda = 0 it is still computed (and logged) but carries no grad
        grad_ctx = torch.no_grad() if config.lambda_ == 0 else contextlib.nullcontext()
        with grad_ctx:
            tokens = state.student(base)
            embeddings = {
                s: heads[s](_slice_tokens(tokens, i, len(pairs))) for i, s in enumerate(sensors)
            }
            msad, per_pair = _msad_from_embeddings(embeddings, config, clamp_stats)
    return dino, msad, per_pair, teacher_logits, clamp_stats


def _slice_tokens(tokens: TokenEmbeddings, index: int, batch: int) -> TokenEmbeddings:
    sl = slice(index * batch, (index + 1) * batch)
    return TokenEmbeddings(
        global_token=tokens.global_token[sl],
        patch_tokens=tokens.patch_tokens[sl],
        grid_shape=tokens.grid_shape,
    )


def _finite(x: Tensor | float) -> bool:
    v = float(x.detach()) if isinstance(x, Tensor) else float(x)
    return math.isfinite(v)


def _apply_update(
    state: DinoState,
    total: Tensor,
    config: TrainConfig,
    teacher_logits: Tensor,
    diagnostics: dict,
) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    if config.clip_grad > 0:
        grad_norm = torch.nn.utils.clip_grad_norm_(params, config.clip_grad)
    else:
        grad_norm = torch.linalg.vector_norm(
            torch.stack([p.grad.norm() for p in params if p.grad is not None])
        )
    diagnostics["grad_norm"] = float(grad_norm)
    if not math.isfinite(float(grad_norm)):
        raise TrainingError("non-finite gradients; aborting step", diagnostics)
    for group in state.optimizer.param_groups:
        group["lr"] = state.lr
        if group.get("follows_wd_schedule"):
            group["weight_decay"] = state.weight_decay
    state.optimizer.step()
    ema_update(state.teacher, state.student, state.ema_momentum)
    ema_update(state.teacher_head, state.student_head, state.ema_momentum)
    state.center = update_center(state.center, teacher_logits, config.center_momentum)
    state.step += 1


def pretrain_step(
    pairs: Sequence[PairedSample],
    state: DinoState,
    heads: dict[str, ProjectionHead],
    config: TrainConfig,
    epoch: int = 0,
) -> StepResult:
    """One optimizer step of the from-scratch regime."""
    dino, msad, per_pair, teacher_logits, clamp_stats = pretrain_losses(
        pairs, state, heads, config, epoch
    )
    return _finish_step(dino, msad, per_pair, teacher_logits, clamp_stats, state, config)


def continual_losses(
    pairs: Sequence[PairedSample],
    setup: ContinualSetup,
    state: DinoState,
    heads: dict[str, ProjectionHead],
    config: TrainConfig,
    domain_teacher: VisionTransformer,
    epoch: int = 0,
) -> tuple[Tensor, Tensor | float, dict[str, float], Tensor, ClampStats]:
    """Per-step losses of the continual regime, without any update.

    Self-distillation runs on the new sensor only; alignment matches the
    student's features against the frozen domain teacher's features of the
    original sensor (roles flip with ``continual_swap_roles``).
    """
    if not pairs:
        raise TrainingError("empty batch")
    src, tgt = setup.source_sensor, setup.target_sensor
    views = _build_views(pairs, [tgt], config, epoch)
    dino, teacher_logits = _dino_losses(views, state, config)

    student_sensor, frozen_sensor = (src, tgt) if config.continual_swap_roles else (tgt, src)
    clamp_stats = ClampStats()
    student_base = _chips_tensor(pairs, student_sensor, config)
    frozen_base = _chips_tensor(pairs, frozen_sensor, config)
    with torch.no_grad():
        frozen_tokens = domain_teacher(frozen_base)
    grad_ctx = torch.no_grad() if config.lambda_ == 0 else contextlib.nullcontext()
    with grad_ctx:
        embeddings = {
            student_sensor: heads[student_sensor](state.student(student_base)),
            frozen_sensor: heads[frozen_sensor](frozen_tokens),
        }
        msad, per_pair = _msad_from_embeddings(embeddings, config, clamp_stats)
    return dino, msad, per_pair, teacher_logits, clamp_stats


def continual_step(
    pairs: Sequence[PairedSample],
    setup: ContinualSetup,
    state: DinoState,
    heads: dict[str, ProjectionHead],
    config: TrainConfig,
    domain_teacher: VisionTransformer,
    epoch: int = 0,
) -> StepResult:
    """One optimizer step of the continual regime; the domain teacher stays frozen."""
    dino, msad, per_pair, teacher_logits, clamp_stats = continual_losses(
        pairs, setup, state, heads, config, domain_teacher, epoch
    )
    weights = LossWeights(config.lambda_)
    total = xstars_loss(dino, msad, weights)
    diagnostics = {
        "loss_dino": float(dino.detach()),
        "loss_msad": float(msad.detach()) if isinstance(msad, Tensor) else float(msad),
        "clamp_count": clamp_stats.count,
        "grad_norm": None,
    }
    if not (_finite(dino) and _finite(msad) and _finite(total)):
        raise TrainingError("non-finite loss; aborting step", diagnostics)
    _apply_update(state, total, config, teacher_logits, diagnostics)
    return StepResult(
        loss_total=float(total.detach()),
        loss_dino=diagnostics["loss_dino"],
        loss_msad=diagnostics["loss_msad"],
        msad_pairs=per_pair,
        clamp_count=clamp_stats.count,
    )


# ---------------------------------------------------------------------------
# The epoch loop


class _ChipCache:
    """Resized chips held in memory so epochs do not re-read PNG files."""

    def __init__(self, manifest: PairManifest, sensors: Sequence[str], fids: Sequence[str], input_side: int):
        self.input_side = input_side
        self.store: dict[tuple[str, str], np.ndarray] = {}
        est = len(fids) * len(sensors) * input_side * input_side * 3 * 4
        self.as_uint8 = est > 2e9
        for fid in fids:
            for sensor in sensors:
                chip = data_mod.load_chip(manifest, fid, sensor)
                pixels = resize_image(chip.pixels, input_side)
                if self.as_uint8:
                    pixels = np.round(pixels * 255.0).astype(np.uint8)
                self.store[(fid, sensor)] = pixels

    def loader(self, manifest: PairManifest, fid: str, sensor: str) -> SensorChip:
        pixels = self.store[(fid, sensor)]
        if self.as_uint8:
            pixels = pixels.astype(np.float32) / 255.0
        return SensorChip(pixels=pixels, sensor_id=sensor, gsd=float("nan"), footprint_id=fid)


def _epoch_batches(n: int, batch_size: int, drop_singletons: bool) -> int:
    full, rem = divmod(n, batch_size)
    if rem == 0:
        return full
    return full if (rem == 1 and drop_singletons) else full + 1


def _resolve_sensors(manifest: PairManifest, config: TrainConfig, mode: str, setup: Optional[ContinualSetup]) -> list[str]:
    if mode == "continual":
        if setup is None:
            raise ConfigError("continual mode requires a ContinualSetup")
        sensors = [setup.source_sensor, setup.target_sensor]
    else:
        sensors = list(config.sensors) or manifest.sensors()
    if not sensors:
        raise ConfigError("no sensors enabled and manifest is empty")
    missing = [s for s in sensors if s not in manifest.sensors()]
    if missing:
        raise ConfigError(
            f"enabled sensors {missing} not present in manifest (has {manifest.sensors()})"
        )
    if not manifest.footprints_with(sensors, split="train"):
        raise ConfigError(f"manifest has no train footprints covering all of {sensors}")
    return sensors


def train(
    manifest: PairManifest,
    config: TrainConfig,
    mode: str = "scratch",
    setup: Optional[ContinualSetup] = None,
    out_dir: str | Path = "runs/run",
    config_hash: str = "",
    resume: Optional[Path] = None,
) -> TrainResult:
    """Run one training job end to end: epochs, schedules, checkpoints, metrics."""
    if mode not in ("scratch", "continual"):
        raise ConfigError(f"mode must be 'scratch' or 'continual', got {mode!r}")
    config.validate()
    sensors = _resolve_sensors(manifest, config, mode, setup)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = config.resolved_epochs(mode)

    domain_teacher = None
    if mode == "continual":
        bundle = load_checkpoint(setup.domain_teacher_checkpoint)
        if bundle.preset_name != config.preset:
            raise ConfigError(
                f"teacher checkpoint preset {bundle.preset_name!r} does not match "
                f"configured preset {config.preset!r}"
            )
        if bundle.input_side != config.input_side:
            raise ConfigError(
                f"teacher checkpoint input side {bundle.input_side} does not match "
                f"configured input side {config.input_side}"
            )
        domain_teacher = freeze(bundle.build_backbone("teacher"))

    state, heads = init_state(config, sensors)
    start_epoch = 0
    if resume is not None:
        start_epoch = _load_resume(resume, state, heads)
    elif mode == "continual":
        # student, DINO teacher and heads start from the frozen domain teacher
        state.student.load_state_dict(domain_teacher.state_dict())
        state.teacher.load_state_dict(domain_teacher.state_dict())
        if bundle.model["dino_out_dim"] == config.dino_out_dim and bundle.model[
            "dino_hidden_dim"
        ] == config.dino_hidden_dim and bundle.model["dino_bottleneck_dim"] == config.dino_bottleneck_dim:
            state.student_head.load_state_dict(bundle.state["teacher_head"])
            state.teacher_head.load_state_dict(bundle.state["teacher_head"])

    drop_singletons = config.smoothing and config.alpha > 0
    fids = manifest.footprints_with(sensors, split="train")
    steps_per_epoch = _epoch_batches(len(fids), config.batch_size, drop_singletons)
    total_steps = max(1, epochs * steps_per_epoch)
    warmup_steps = min(config.warmup_epochs * steps_per_epoch, total_steps // 2)

    cache = _ChipCache(manifest, sensors, fids, config.input_side)
    metrics_path = out_dir / "metrics.jsonl"
    checkpoints: list[Path] = []

    def write_ckpt(tag: str, epoch: int) -> Path:
        path = save_checkpoint(
            out_dir / f"ckpt_{tag}.pt",
            student=state.student,
            teacher=state.teacher,
            student_head=state.student_head,
            teacher_head=state.teacher_head,
            proj_heads=heads,
            center=state.center,
            optimizer=state.optimizer,
            epoch=epoch,
            config=config,
            config_hash=config_hash,
        )
        checkpoints.append(path)
        return path

    if epochs == 0:
        final = write_ckpt("final", 0)
        metrics_path.touch()
        return TrainResult(out_dir, metrics_path, checkpoints, final)

    mode_is_continual = mode == "continual"
    t0 = time.time()
    log_mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    with open(metrics_path, log_mode) as log:
        for epoch in range(start_epoch, epochs):
            # teacher temperature warms up linearly over the first epochs
            w = max(1, config.teacher_temp_warmup_epochs)
            frac = min(1.0, epoch / w)
            state.teacher_temp = (
                config.teacher_temp_start
                + (config.teacher_temp - config.teacher_temp_start) * frac
            )
            batches = data_mod.iterate_pairs(
                manifest,
                sensors,
                config.batch_size,
                seed=int(np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0]),
                split="train",
                drop_singletons=drop_singletons,
                loader=cache.loader,
            )
            for batch in batches:
                step = state.step
                state.lr = cosine_schedule(
                    config.lr, config.min_lr, step, total_steps, warmup_steps
                )
                state.weight_decay = cosine_schedule(
                    config.weight_decay, config.weight_decay_final, step, total_steps
                )
                state.ema_momentum = cosine_schedule(
                    config.ema_momentum, config.ema_momentum_final, step, total_steps
                )
                if mode_is_continual:
                    result = continual_step(
                        batch, setup, state, heads, config, domain_teacher, epoch
                    )
                else:
                    result = pretrain_step(batch, state, heads, config, epoch)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss_total": result.loss_total,
                    "loss_dino": result.loss_dino,
                    "loss_msad": result.loss_msad,
                    "lr": state.lr,
                    "ema_momentum": state.ema_momentum,
                    "clamp_count": result.clamp_count,
                }
                if len(result.msad_pairs) > 1:
                    record["msad_pairs"] = result.msad_pairs
                log.write(json.dumps(record) + "\n")
            log.flush()
            done = epoch + 1
            if done % config.checkpoint_every == 0 and done < epochs:
                write_ckpt(f"epoch{done:04d}", done)
            logger.info(
                "epoch %d/%d done (%.1fs elapsed, loss_total=%.4f)",
                done,
                epochs,
                time.time() - t0,
                result.loss_total,
            )
    final = write_ckpt("final", epochs)
    return TrainResult(out_dir, metrics_path, checkpoints, final)


def _load_resume(path: Path, state: DinoState, heads: dict[str, ProjectionHead]) -> int:
    bundle = load_checkpoint(path)
    state.student.load_state_dict(bundle.state["student"])
    state.teacher.load_state_dict(bundle.state["teacher"])
    state.student_head.load_state_dict(bundle.state["student_head"])
    state.teacher_head.load_state_dict(bundle.state["teacher_head"])
    for sensor, sd in bundle.state["proj_heads"].items():
        if sensor in heads:
            heads[sensor].load_state_dict(sd)
    state.center = bundle.state["center"]
    if bundle.state["optimizer"] is not None:
        state.optimizer.load_state_dict(bundle.state["optimizer"])
    state.step = bundle.epoch * 0  # recomputed below
    return bundle.epoch
