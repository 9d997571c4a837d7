"""Checkpoint serialization: parameter sets plus a JSON metadata sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .backbone import DinoHead, ProjectionHead, VisionTransformer, get_preset
from .config import TrainConfig
from .errors import DataError


def sidecar_path(ckpt_path: str | Path) -> Path:
    return Path(ckpt_path).with_suffix(".meta.json")


@dataclass
class CheckpointBundle:
    """A loaded checkpoint with enough structure to rebuild every network."""

    path: Path
    model: dict  # preset/input_side/head dims/sensors
    state: dict  # raw tensors per network
    epoch: int
    config_hash: str

    @property
    def preset_name(self) -> str:
        return self.model["preset"]

    @property
    def input_side(self) -> int:
        return self.model["input_side"]

    @property
    def sensors(self) -> list[str]:
        return list(self.model["sensors"])

    def build_backbone(self, which: str = "teacher") -> VisionTransformer:
        if which not in ("student", "teacher"):
            raise ValueError(f"which must be 'student' or 'teacher', got {which!r}")
        net = VisionTransformer.from_preset(self.preset_name, self.input_side)
        net.load_state_dict(self.state[which])
        return net

    def build_dino_head(self, which: str = "teacher") -> DinoHead:
        m = self.model
        head = DinoHead(
            in_dim=get_preset(self.preset_name).width,
            out_dim=m["dino_out_dim"],
            hidden_dim=m["dino_hidden_dim"],
            bottleneck_dim=m["dino_bottleneck_dim"],
        )
        head.load_state_dict(self.state[f"{which}_head"])
        return head

    def build_proj_heads(self) -> dict[str, ProjectionHead]:
        width = get_preset(self.preset_name).width
        heads = {}
        for sensor, sd in self.state["proj_heads"].items():
            head = ProjectionHead(sensor, in_dim=width, out_dim=sd["linear.weight"].shape[0])
            head.load_state_dict(sd)
            heads[sensor] = head
        return heads


def save_checkpoint(
    path: str | Path,
    *,
    student: VisionTransformer,
    teacher: VisionTransformer,
    student_head: DinoHead,
    teacher_head: DinoHead,
    proj_heads: dict[str, ProjectionHead],
    center: torch.Tensor,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    config: TrainConfig,
    config_hash: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = {
        "preset": student.preset.name,
        "input_side": student.input_side,
        "dino_out_dim": student_head.out_dim,
        "dino_hidden_dim": student_head.mlp[0].out_features,
        "dino_bottleneck_dim": student_head.mlp[-1].out_features,
        "sensors": sorted(proj_heads),
    }
    payload = {
        "model": model,
        "epoch": epoch,
        "config_hash": config_hash,
        "student": student.state_dict(),
        "teacher": teacher.state_dict(),
        "student_head": student_head.state_dict(),
        "teacher_head": teacher_head.state_dict(),
        "proj_heads": {s: h.state_dict() for s, h in proj_heads.items()},
        "center": center,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)

    meta = {
        "preset": model["preset"],
        "input_side": model["input_side"],
        "epoch": epoch,
        "lambda": config.lambda_,
        "alpha": config.alpha,
        "msad_tau": config.msad_tau,
        "student_temp": config.student_temp,
        "teacher_temp": config.teacher_temp,
        "center_momentum": config.center_momentum,
        "sensors": model["sensors"],
        "config_hash": config_hash,
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    state = {
        k: payload[k]
        for k in ("student", "teacher", "student_head", "teacher_head", "proj_heads", "center", "optimizer")
    }
    return CheckpointBundle(
        path=path,
        model=payload["model"],
        state=state,
        epoch=payload["epoch"],
        config_hash=payload.get("config_hash", ""),
    )
