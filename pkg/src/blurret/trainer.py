"""Configuration and the deterministic training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from blurret import dataset_gen
from blurret.dataset_gen import DataConfig
from blurret.errors import ConfigError, TrainingDiverged
from blurret.losses import ArcFaceParams, LossWeights, joint_loss
from blurret.model import (
    BridgeConfig,
    DescriptorModel,
    EncoderConfig,
    config_header,
    save_checkpoint,
    whiten_init,
)
from blurret.sampler import RecordPool, SamplerConfig, epoch_batches

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "L_con", "L_cls", "L_be", "L_loc", "L_joint")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 30
    max_steps: int | None = None
    batch_tuples: int = 32
    tau: float = 0.7
    arcface_margin: float = 0.15
    arcface_scale: float = 30.0
    sharp_only: bool = False
    whiten_cls: bool = False
    loss: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


# flat config key -> (section, attribute); section None means TrainConfig itself
_NESTED = {
    "alpha_cls": ("loss", "alpha_cls"),
    "alpha_be": ("loss", "alpha_be"),
    "alpha_loc": ("loss", "alpha_loc"),
    "radius": ("sampler", "radius"),
    "n_pos": ("sampler", "n_pos"),
    "n_neg": ("sampler", "n_neg"),
    "c_be": ("bridge", "c_be"),
    "c_loc": ("bridge", "c_loc"),
    "c_cls": ("bridge", "c_cls"),
    "dim": ("bridge", "dim"),
    "gem_p": ("bridge", "gem_p"),
    "learn_p": ("bridge", "learn_p"),
    "encoder_channels": ("encoder", "channels"),
    "encoder_stride": ("encoder", "stride"),
    "convs_per_stage": ("encoder", "convs_per_stage"),
    "nonlinearity": ("encoder", "nonlinearity"),
    "disable_norm": ("encoder", "disable_norm"),
}
_TOP = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss", "sampler", "bridge", "encoder"}
_DATA = {f.name for f in dataclasses.fields(DataConfig)}
# keys read by the embed and eval commands
_PIPELINE = {
    "manifest", "checkpoint", "queries", "database", "out",
    "split", "batch_size", "cutoff", "per_bl_matrix", "denominator",
}
CONFIG_KEYS = frozenset(_TOP | set(_NESTED) | _DATA | _PIPELINE | {"config_version", "seed"})

# Training at desk scale (about 1k images, a four-stage encoder trained from
# scratch) needs a larger step than the full-scale default to move at all,
# and about 20 epochs before the blur and box heads help retrieval.
DESK_OVERRIDES = {"lr": 1e-3, "epochs": 20}


def train_config_from_flat(flat):
    top = {k: v for k, v in flat.items() if k in _TOP}
    sections = {"loss": {}, "sampler": {}, "bridge": {}, "encoder": {}}
    for key, (section, attr) in _NESTED.items():
        if key in flat:
            sections[section][attr] = flat[key]
    return TrainConfig(
        **top,
        loss=LossWeights(**sections["loss"]),
        sampler=SamplerConfig(**sections["sampler"]),
        bridge=BridgeConfig(**sections["bridge"]),
        encoder=EncoderConfig(**sections["encoder"]),
    )


def train_config_to_flat(cfg):
    flat = {k: getattr(cfg, k) for k in sorted(_TOP)}
    for key, (section, attr) in _NESTED.items():
        flat[key] = getattr(getattr(cfg, section), attr)
    flat["config_version"] = CONFIG_VERSION
    return flat


def load_config(path):
    """Read a flat JSON config; unknown keys and other versions are errors."""
    try:
        flat = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object")
    if flat.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {flat['config_version']}")
    unknown = set(flat) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return flat


@dataclass
class TrainResult:
    model: DescriptorModel
    arcface: ArcFaceParams
    log_rows: list[dict]
    checkpoint: Path | None
    steps: int


def training_records(manifest, sharp_only=False):
    recs = manifest.split("train")
    if sharp_only:
        recs = [r for r in recs if r.is_sharp]
    return recs


def _write_checkpoint(path, model, arcface, cfg, seed, epoch, label_objects):
    tensors = dict(model.state_dict())
    tensors["arcface.weight"] = arcface.weight
    header = config_header(model)
    header.update(config=train_config_to_flat(cfg), seed=seed, epoch=epoch, label_objects=label_objects)
    save_checkpoint(path, tensors, header)


def train(manifest, cfg, seed, out_dir=None, images=None, on_epoch=None):
    """Minimize the joint loss over BLISS tuples of the training split.

    ``images`` may hold the preloaded ``(n, 3, H, W)`` array of the training
    records; otherwise they are read from the manifest root. Writes
    ``train_log.csv`` and per-epoch checkpoints when ``out_dir`` is given.
    ``on_epoch(epoch, model)`` is called after every epoch.
    """
    records = training_records(manifest, cfg.sharp_only)
    label_objects = sorted({r.object_id for r in records})
    if len(label_objects) < 2:
        raise ConfigError("training split needs at least two objects")
    if images is None:
        images = dataset_gen.load_images(manifest.root, records)
    images = torch.as_tensor(images, dtype=torch.float32)
    label_of = {o: i for i, o in enumerate(label_objects)}
    labels = torch.tensor([label_of[r.object_id] for r in records])
    bs = torch.tensor([r.bs for r in records], dtype=torch.float32)
    bbox = torch.tensor([r.bbox for r in records], dtype=torch.float32)

    torch.manual_seed(seed)
    model = DescriptorModel(cfg.encoder, cfg.bridge)
    arc_weight = torch.nn.Parameter(torch.randn(cfg.bridge.dim, len(label_objects)) * 0.01)
    arcface = ArcFaceParams(arc_weight, cfg.arcface_margin, cfg.arcface_scale)
    if cfg.whiten_cls:
        with torch.no_grad():
            whiten_init(model, model.pooled(images[:512]))
    opt = torch.optim.Adam(
        [*model.parameters(), arc_weight],
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pool = RecordPool(records)
    rows = []
    step = 0
    checkpoint = None
    model.train()
    for epoch in range(cfg.epochs):
        for batch in epoch_batches(pool, cfg.sampler, seed, epoch, cfg.batch_tuples):
            idx = torch.tensor([t.members for t in batch])
            b, t = idx.shape
            flat = idx.reshape(-1)
            outputs = model(images[flat])
            outputs = type(outputs)(*(o.reshape(b, t, *o.shape[1:]) for o in outputs))
            terms = joint_loss(
                outputs, bs[idx], bbox[idx], labels[idx], arcface, cfg.loss,
                n_pos=cfg.sampler.n_pos, tau=cfg.tau,
            )
            values = [float(v.detach()) for v in terms]
            if not all(math.isfinite(v) for v in values):
                _dump_diverged(out, model, arcface, cfg, seed, epoch, step, values, label_objects)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {values}")
            opt.zero_grad()
            terms.joint.backward()
            opt.step()
            step += 1
            rows.append(dict(zip(LOG_COLUMNS, [epoch, step, *values])))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if out is not None:
            checkpoint = out / f"checkpoint_epoch{epoch + 1:03d}.bin"
            _write_checkpoint(checkpoint, model, arcface, cfg, seed, epoch + 1, label_objects)
        log.info("epoch %d done, step %d, L_joint %.4f", epoch + 1, step, rows[-1]["L_joint"])
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
            model.train()
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    if out is not None:
        final = out / "checkpoint.bin"
        final.write_bytes(checkpoint.read_bytes())
        checkpoint = final
        with open(out / "train_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    model.eval()
    return TrainResult(model, arcface, rows, checkpoint, step)


def _dump_diverged(out, model, arcface, cfg, seed, epoch, step, values, label_objects):
    if out is None:
        return
    state = {"epoch": epoch, "step": step, "losses": dict(zip(LOG_COLUMNS[2:], values))}
    (out / "diverged.json").write_text(json.dumps(state, indent=2))
    _write_checkpoint(out / "diverged_checkpoint.bin", model, arcface, cfg, seed, epoch, label_objects)


def smoothed(values, window=20):
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def embed_records(model, root, records, batch_size=256):
    """Descriptor store for ``records``; rows are f32-exact unit vectors."""
    from blurret.retrieval_eval import DescriptorStore

    images = dataset_gen.load_images(root, records)
    desc = model.embed(images, batch_size).astype(np.float32).astype(np.float64)
    return DescriptorStore(
        [r.id for r in records], desc,
        [r.object_id for r in records], [r.bl for r in records],
    )
