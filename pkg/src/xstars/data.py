"""Paired multi-sensor corpus handling and the synthetic sensor simulator.

A corpus is a directory with one subdirectory of PNG chips per sensor and a
line-delimited JSON manifest at the root. Each manifest record ties one
geographic footprint to the chip files of every sensor that observed it:

    {"footprint_id": "fp00042", "split": "train",
     "chips": {"spot6": "spot6/fp00042.png", "sentinel2": "sentinel2/fp00042.png"}}

An optional ``labels.json`` sidecar maps footprint ids to class names for
probe-based evaluation; the manifest itself stays label-free.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DataError, ManifestError, ParameterError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
LABELS_NAME = "labels.json"
CORPUS_META_NAME = "corpus_meta.json"


@dataclass(frozen=True)
class SensorProfile:
    """Degradation chain that turns a base footprint into one sensor's chip.

    ``downscale`` is the linear shrink factor relative to the base image;
    color gains/biases are fixed per sensor, the jitters sample per chip.
    """

    sensor_id: str
    gsd: float
    native_chip_side: Optional[int] = None
    downscale: float = 1.0
    blur_sigma: float = 0.0
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_gain_jitter: float = 0.0
    color_bias_jitter: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.gsd <= 0:
            raise ParameterError(f"gsd must be > 0, got {self.gsd}")
        if self.downscale < 1:
            raise ParameterError(f"downscale factor must be >= 1, got {self.downscale}")


# Profiles mirroring the 1.5 : 10 : 30 m/px GSD pattern of common optical sensors.
BUILTIN_PROFILES = {
    "spot6": SensorProfile("spot6", gsd=1.5, native_chip_side=2000, downscale=1.0),
    "sentinel2": SensorProfile(
        "sentinel2",
        gsd=10.0,
        native_chip_side=300,
        downscale=2000 / 300,
        blur_sigma=2.0,
        color_gain=(0.9, 1.05, 1.0),
        color_bias=(0.02, 0.0, -0.02),
        color_gain_jitter=0.05,
        color_bias_jitter=0.02,
        noise_sigma=0.01,
    ),
    "landsat8": SensorProfile(
        "landsat8",
        gsd=30.0,
        native_chip_side=100,
        downscale=20.0,
        blur_sigma=5.0,
        color_gain=(1.05, 0.95, 0.9),
        color_bias=(-0.02, 0.01, 0.02),
        color_gain_jitter=0.05,
        color_bias_jitter=0.02,
        noise_sigma=0.015,
    ),
}
PROFILE_ALIASES = {"s6": "spot6", "s2": "sentinel2", "ls": "landsat8", "l8": "landsat8", "ls8": "landsat8"}


def get_profile(name: str) -> SensorProfile:
    key = PROFILE_ALIASES.get(name, name)
    try:
        return BUILTIN_PROFILES[key]
    except KeyError:
        raise ParameterError(
            f"unknown sensor profile {name!r}; builtins: {sorted(BUILTIN_PROFILES)}"
        ) from None


@dataclass
class SensorChip:
    """One image from one sensor: H x W x 3 float32 pixels in [0, 1]."""

    pixels: np.ndarray
    sensor_id: str
    gsd: float
    footprint_id: str


@dataclass
class PairedSample:
    footprint_id: str
    chips: dict[str, SensorChip]


@dataclass
class ManifestRecord:
    footprint_id: str
    split: str
    chips: dict[str, str]  # sensor_id -> path relative to the manifest directory
    timestamp: Optional[str] = None


@dataclass
class PairManifest:
    root: Path
    records: dict[str, ManifestRecord] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def meta(self) -> dict:
        path = self.root / CORPUS_META_NAME
        if path.exists():
            with open(path) as fh:
                return json.load(fh)
        return {}

    def sensors(self) -> list[str]:
        seen = set()
        for rec in self.records.values():
            seen.update(rec.chips)
        return sorted(seen)

    def available_pairs(self) -> list[tuple[str, str]]:
        """Unordered sensor pairs co-observed on at least one footprint."""
        pairs = set()
        for rec in self.records.values():
            for a, b in combinations(sorted(rec.chips), 2):
                pairs.add((a, b))
        return sorted(pairs)

    def footprints_with(self, sensors: Sequence[str], split: Optional[str] = None) -> list[str]:
        out = []
        for fid in sorted(self.records):
            rec = self.records[fid]
            if split is not None and rec.split != split:
                continue
            if all(s in rec.chips for s in sensors):
                out.append(fid)
        return out

    def chip_path(self, footprint_id: str, sensor_id: str) -> Path:
        return self.root / self.records[footprint_id].chips[sensor_id]


def load_manifest(path: str | Path) -> PairManifest:
    """Parse and validate a line-delimited JSON manifest."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    root = path.parent
    manifest = PairManifest(root=root)
    seen: set[tuple[str, str]] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(raw, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            fid = raw.get("footprint_id")
            if not isinstance(fid, str) or not fid:
                raise ManifestError(f"{path}:{lineno}: missing or invalid footprint_id")
            split = raw.get("split")
            if split not in ("train", "val"):
                raise ManifestError(f"{path}:{lineno}: split must be 'train' or 'val', got {split!r}")
            chips = raw.get("chips")
            if not isinstance(chips, dict) or not chips:
                raise ManifestError(f"{path}:{lineno}: record is missing sensor_id -> chip entries")
            for sensor, rel in chips.items():
                if not isinstance(sensor, str) or not sensor:
                    raise ManifestError(f"{path}:{lineno}: record is missing sensor_id")
                if (fid, sensor) in seen:
                    raise ManifestError(f"{path}:{lineno}: duplicate entry for ({fid}, {sensor})")
                seen.add((fid, sensor))
                if not isinstance(rel, str) or not (root / rel).exists():
                    raise ManifestError(f"{path}:{lineno}: chip file not found: {rel!r}")
            unknown = set(raw) - {"footprint_id", "split", "chips", "timestamp"}
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            prev = manifest.records.get(fid)
            if prev is None:
                manifest.records[fid] = ManifestRecord(
                    footprint_id=fid, split=split, chips=dict(chips), timestamp=raw.get("timestamp")
                )
            else:
                if prev.split != split:
                    raise ManifestError(f"{path}:{lineno}: footprint {fid} has conflicting splits")
                prev.chips.update(chips)
    return manifest


def load_labels(manifest: PairManifest, filename: str = LABELS_NAME) -> Optional[dict[str, str]]:
    path = manifest.root / filename
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


def load_chip(manifest: PairManifest, footprint_id: str, sensor_id: str) -> SensorChip:
    path = manifest.chip_path(footprint_id, sensor_id)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:
        raise DataError(f"failed to read chip for footprint {footprint_id!r} ({path}): {e}") from e
    return SensorChip(pixels=arr, sensor_id=sensor_id, gsd=float("nan"), footprint_id=footprint_id)


def iterate_pairs(
    manifest: PairManifest,
    sensor_pair: Sequence[str],
    batch_size: int,
    seed: int,
    split: Optional[str] = None,
    drop_singletons: bool = False,
    loader=load_chip,
) -> Iterator[list[PairedSample]]:
    """Seeded, shuffled batches of footprint-aligned samples.

    Within a batch, position i holds the same footprint for every requested
    sensor; that positional pairing is what makes the identity targets of the
    alignment loss correct. The final partial batch is kept unless it has a
    single element and ``drop_singletons`` is set (label smoothing needs N >= 2).
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    sensors = list(sensor_pair)
    missing = [s for s in sensors if s not in manifest.sensors()]
    if missing:
        raise ManifestError(f"sensors {missing} not present in manifest (has {manifest.sensors()})")
    fids = manifest.footprints_with(sensors, split=split)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(fids))
    for start in range(0, len(fids), batch_size):
        chunk = [fids[i] for i in order[start : start + batch_size]]
        if len(chunk) == 1 and drop_singletons:
            logger.debug("dropping singleton batch (smoothing needs N >= 2)")
            continue
        batch = []
        for fid in chunk:
            chips = {s: loader(manifest, fid, s) for s in sensors}
            batch.append(PairedSample(footprint_id=fid, chips=chips))
        yield batch


def resize_image(pixels: np.ndarray, side: int) -> np.ndarray:
    """Antialiased bilinear resize of an H x W x 3 array; values stay in [0, 1]."""
    if side <= 0:
        raise ParameterError(f"target side must be > 0, got {side}")
    if pixels.shape[0] == side and pixels.shape[1] == side:
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t.to(torch.float32), size=(side, side), mode="bilinear", antialias=True)
    return out.squeeze(0).permute(1, 2, 0).clamp_(0.0, 1.0).numpy()


def resize_to_input(chip: SensorChip, input_side: int) -> SensorChip:
    pixels = resize_image(chip.pixels, input_side)
    if pixels is chip.pixels:
        return chip
    return SensorChip(
        pixels=pixels, sensor_id=chip.sensor_id, gsd=chip.gsd, footprint_id=chip.footprint_id
    )


def _degrade(base: np.ndarray, profile: SensorProfile, rng: np.random.Generator) -> np.ndarray:
    """Apply one sensor's degradation chain; identity profiles pass pixels through."""
    out = base
    if profile.blur_sigma > 0:
        out = np.stack(
            [gaussian_filter(out[..., c], sigma=profile.blur_sigma, mode="reflect") for c in range(3)],
            axis=-1,
        )
    if profile.downscale > 1:
        side = int(round(base.shape[0] / profile.downscale))
        if side < 2:
            need = int(np.ceil(2 * profile.downscale))
            raise DataError(
                f"base side {base.shape[0]} too small for profile {profile.sensor_id!r}; "
                f"need at least {need}"
            )
        out = resize_image(out, side)
    gains = np.asarray(profile.color_gain, dtype=np.float32)
    biases = np.asarray(profile.color_bias, dtype=np.float32)
    if profile.color_gain_jitter > 0:
        gains = gains * (1.0 + rng.uniform(-profile.color_gain_jitter, profile.color_gain_jitter, 3)).astype(np.float32)
    if profile.color_bias_jitter > 0:
        biases = biases + rng.uniform(-profile.color_bias_jitter, profile.color_bias_jitter, 3).astype(np.float32)
    if not (np.all(gains == 1.0) and np.all(biases == 0.0)):
        out = out * gains + biases
    if profile.noise_sigma > 0:
        out = out + rng.normal(0.0, profile.noise_sigma, out.shape).astype(np.float32)
    if out is not base:
        out = np.clip(out, 0.0, 1.0, out=np.ascontiguousarray(out, dtype=np.float32))
    return out


def synth_sensor_pair(
    base_image: np.ndarray,
    profiles: Sequence[SensorProfile],
    seed: int,
    footprint_id: str = "synthetic",
) -> PairedSample:
    """Fabricate footprint-aligned chips for each profile from one base image."""
    if base_image.ndim != 3 or base_image.shape[-1] != 3:
        raise DataError(f"base image must be H x W x 3, got {base_image.shape}")
    if base_image.shape[0] != base_image.shape[1]:
        raise DataError(f"base image must be square, got {base_image.shape[:2]}")
    base = np.ascontiguousarray(base_image, dtype=np.float32)
    children = np.random.SeedSequence(seed).spawn(len(profiles))
    chips = {}
    for profile, child in zip(profiles, children):
        rng = np.random.default_rng(child)
        pixels = _degrade(base, profile, rng)
        chips[profile.sensor_id] = SensorChip(
            pixels=pixels, sensor_id=profile.sensor_id, gsd=profile.gsd, footprint_id=footprint_id
        )
    return PairedSample(footprint_id=footprint_id, chips=chips)


def _save_png(pixels: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _discover_bases(base_dir: Path) -> list[tuple[Path, Optional[str]]]:
    """Base images, each with a class name when organized in class subdirectories."""
    exts = {".png", ".jpg", ".jpeg"}
    out: list[tuple[Path, Optional[str]]] = []
    for p in sorted(base_dir.rglob("*")):
        if p.suffix.lower() not in exts or not p.is_file():
            continue
        cls = p.parent.name if p.parent != base_dir else None
        out.append((p, cls))
    return out


def build_synth_corpus(
    base_dir: str | Path,
    profiles: Sequence[SensorProfile],
    n_footprints: int,
    out_dir: str | Path,
    crop_side: Optional[int] = None,
    split_ratio: float = 0.8,
    seed: int = 0,
) -> PairManifest:
    """Fabricate a paired corpus: chips per sensor, a manifest, optional labels.

    Base images found in class subdirectories of ``base_dir`` propagate their
    class to a ``labels.json`` sidecar; a flat directory yields no labels.
    Footprints are cropped from the bases in round-robin order and split
    train/val disjointly.
    """
    base_dir = Path(base_dir)
    out_dir = Path(out_dir)
    if not base_dir.is_dir():
        raise DataError(f"base image directory not found: {base_dir}")
    if not 0 < split_ratio <= 1:
        raise ParameterError(f"split_ratio must be in (0, 1], got {split_ratio}")
    candidates = _discover_bases(base_dir)
    bases = []
    for p, cls in candidates:
        try:
            with Image.open(p) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as e:
            warnings.warn(f"skipping unreadable base image {p}: {e}", stacklevel=2)
            continue
        bases.append((p.name, arr, cls))
    if not bases:
        raise DataError(f"no usable base images in {base_dir}")

    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(round(split_ratio * n_footprints))
    order = rng.permutation(n_footprints)
    split_of = {int(order[i]): ("train" if i < n_train else "val") for i in range(n_footprints)}

    records = []
    labels: dict[str, str] = {}
    for i in range(n_footprints):
        name, arr, cls = bases[i % len(bases)]
        side = crop_side or min(arr.shape[0], arr.shape[1])
        if arr.shape[0] < side or arr.shape[1] < side:
            raise DataError(f"base image {name} smaller than crop side {side}")
        top = int(rng.integers(0, arr.shape[0] - side + 1))
        left = int(rng.integers(0, arr.shape[1] - side + 1))
        crop = arr[top : top + side, left : left + side]
        fid = f"fp{i:05d}"
        pair = synth_sensor_pair(crop, profiles, seed=int(rng.integers(0, 2**31)), footprint_id=fid)
        chips = {}
        for sensor_id, chip in pair.chips.items():
            rel = f"{sensor_id}/{fid}.png"
            _save_png(chip.pixels, out_dir / rel)
            chips[sensor_id] = rel
        records.append({"footprint_id": fid, "split": split_of[i], "chips": chips})
        if cls is not None:
            labels[fid] = cls

    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    if labels:
        with open(out_dir / LABELS_NAME, "w") as fh:
            json.dump(labels, fh, indent=0, sort_keys=True)

    settings = {
        "profiles": {p.sensor_id: dataclasses.asdict(p) for p in profiles},
        "n_footprints": n_footprints,
        "crop_side": crop_side,
        "split_ratio": split_ratio,
        "seed": seed,
    }
    blob = json.dumps(settings, sort_keys=True, default=str)
    meta = {
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:12],
        "n_train": sum(1 for r in records if r["split"] == "train"),
        "n_val": sum(1 for r in records if r["split"] == "val"),
        "labeled": bool(labels),
        **settings,
    }
    with open(out_dir / CORPUS_META_NAME, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return load_manifest(out_dir / MANIFEST_NAME)


# ---------------------------------------------------------------------------
# Procedural texture bases: desk-scale stand-in for real footprint imagery.

TEXTURE_CLASSES = (
    "stripes_h",
    "stripes_v",
    "stripes_diag",
    "checker",
    "rings",
    "blobs",
    "gradient",
    "gridlines",
)


def _texture(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    yy = yy / side
    xx = xx / side
    freq = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "stripes_h":
        field = np.sin(2 * np.pi * freq * yy + phase)
    elif kind == "stripes_v":
        field = np.sin(2 * np.pi * freq * xx + phase)
    elif kind == "stripes_diag":
        field = np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2) + phase)
    elif kind == "checker":
        f = rng.uniform(3.0, 5.0)
        field = np.sign(np.sin(2 * np.pi * f * xx + phase) * np.sin(2 * np.pi * f * yy + phase))
    elif kind == "rings":
        cy, cx = rng.uniform(0.3, 0.7, 2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        field = np.sin(2 * np.pi * freq * 1.5 * r + phase)
    elif kind == "blobs":
        noise = rng.normal(size=(side, side))
        field = gaussian_filter(noise, sigma=side / 16.0, mode="wrap")
        field = np.sign(field - np.median(field)) * 0.9
    elif kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        field = 2 * (np.cos(angle) * xx + np.sin(angle) * yy) - 1
    elif kind == "gridlines":
        f = rng.uniform(5.0, 9.0)
        lines = np.maximum(
            np.abs(np.sin(np.pi * f * xx + phase)) > 0.9,
            np.abs(np.sin(np.pi * f * yy + phase)) > 0.9,
        )
        field = np.where(lines, -0.9, 0.8)
    else:
        raise ParameterError(f"unknown texture class {kind!r}")
    lo = rng.uniform(0.05, 0.35, 3)
    hi = rng.uniform(0.6, 0.95, 3)
    img = lo + (hi - lo) * ((field + 1) / 2)[..., None]
    return img.astype(np.float32)


def generate_texture_bases(
    out_dir: str | Path,
    n_classes: int = 8,
    per_class: int = 10,
    side: int = 192,
    seed: int = 0,
) -> list[Path]:
    """Write procedural base images in class subdirectories (ImageFolder layout)."""
    if not 1 <= n_classes <= len(TEXTURE_CLASSES):
        raise ParameterError(f"n_classes must be in [1, {len(TEXTURE_CLASSES)}], got {n_classes}")
    out_dir = Path(out_dir)
    written = []
    rng = np.random.default_rng(seed)
    for cls in TEXTURE_CLASSES[:n_classes]:
        for i in range(per_class):
            img = _texture(cls, side, rng)
            path = out_dir / cls / f"{cls}_{i:04d}.png"
            _save_png(img, path)
            written.append(path)
    return written
