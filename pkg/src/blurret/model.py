"""Descriptor network: conv encoder, GeM pooling and the three-head projection."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from blurret.errors import DegenerateDescriptor, DomainError, ShapeError

GEM_EPS = 1e-6


@dataclass
class EncoderConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stride: int = 2
    convs_per_stage: int = 1
    nonlinearity: str = "relu"
    disable_norm: bool = True

    @property
    def out_channels(self):
        return self.channels[-1]

    @property
    def total_stride(self):
        return self.stride ** len(self.channels)


@dataclass
class BridgeConfig:
    c_be: int = 16
    c_loc: int = 16
    c_cls: int = 96
    dim: int = 128
    gem_p: float = 3.0
    learn_p: bool = True

    def __post_init__(self):
        if min(self.c_be, self.c_loc, self.c_cls, self.dim) <= 0:
            raise DomainError("head widths and descriptor dim must be positive")
        if self.gem_p <= 0:
            raise DomainError("GeM power must be positive")


class ModelOutput(NamedTuple):
    descriptor: torch.Tensor
    blur_pred: torch.Tensor
    bbox_pred: torch.Tensor
    f_be: torch.Tensor
    f_loc: torch.Tensor
    f_cls: torch.Tensor


_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "leaky_relu": nn.LeakyReLU}


class Encoder(nn.Module):
    """Stages of a strided conv plus ``convs_per_stage - 1`` stride-1 convs, each
    followed by the nonlinearity; output is C x H/s x W/s."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.nonlinearity]
        layers = []
        c_in = 3
        for c_out in cfg.channels:
            for i in range(cfg.convs_per_stage):
                stride = cfg.stride if i == 0 else 1
                layers.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1))
                if not cfg.disable_norm:
                    layers.append(nn.GroupNorm(min(8, c_out), c_out))
                layers.append(act())
                c_in = c_out
        self.body = nn.Sequential(*layers)
        # without normalization layers the default init shrinks activations
        # stage by stage until every image pools to the same vector
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        s = self.cfg.total_stride
        if x.shape[-1] % s or x.shape[-2] % s:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by stride {s}")
        return self.body(x)


def gem_pool(x, p, eps=GEM_EPS):
    """Generalized mean over the spatial dims of an ``(..., C, U, V)`` map.

    Values are clamped at ``eps`` so the root and its gradient stay finite on
    dead channels.
    """
    if not torch.is_tensor(p):
        p = torch.tensor(float(p), dtype=x.dtype)
    if (p <= 0).any():
        raise DomainError(f"GeM power must be positive, got {p}")
    return x.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class GeM(nn.Module):
    """GeM with ``p = exp(rho)`` so the power stays positive during training."""

    def __init__(self, p=3.0, learnable=True, eps=GEM_EPS):
        super().__init__()
        rho = torch.tensor(math.log(p))
        self.rho = nn.Parameter(rho) if learnable else nn.Parameter(rho, requires_grad=False)
        self.eps = eps

    @property
    def p(self):
        return self.rho.exp()

    def forward(self, x):
        return gem_pool(x, self.p, self.eps)


class Bridge(nn.Module):
    """Three linear heads, concatenated and projected to the descriptor.

    Small sigmoid predictors on top of the blur-estimation and localization
    features give the scalar sharpness and the normalized box.
    """

    def __init__(self, in_channels, cfg: BridgeConfig):
        super().__init__()
        self.cfg = cfg
        self.w_be = nn.Linear(in_channels, cfg.c_be, bias=False)
        self.w_loc = nn.Linear(in_channels, cfg.c_loc, bias=False)
        self.w_cls = nn.Linear(in_channels, cfg.c_cls, bias=False)
        self.w_out = nn.Linear(cfg.c_be + cfg.c_loc + cfg.c_cls, cfg.dim, bias=False)
        self.blur_head = nn.Linear(cfg.c_be, 1)
        self.box_head = nn.Linear(cfg.c_loc, 4)

    def forward(self, f):
        f_be, f_loc, f_cls = self.w_be(f), self.w_loc(f), self.w_cls(f)
        descriptor = self.w_out(torch.cat([f_be, f_loc, f_cls], dim=-1))
        blur_pred = torch.sigmoid(self.blur_head(f_be)).squeeze(-1)
        bbox_pred = torch.sigmoid(self.box_head(f_loc))
        return ModelOutput(descriptor, blur_pred, bbox_pred, f_be, f_loc, f_cls)


def bridge_forward(f, bridge):
    return bridge(f)


class DescriptorModel(nn.Module):
    def __init__(self, encoder_cfg=None, bridge_cfg=None):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.bridge_cfg = bridge_cfg or BridgeConfig()
        self.encoder = Encoder(self.encoder_cfg)
        self.gem = GeM(self.bridge_cfg.gem_p, self.bridge_cfg.learn_p)
        self.bridge = Bridge(self.encoder_cfg.out_channels, self.bridge_cfg)

    def encode(self, images):
        return self.encoder(images)

    def pooled(self, images):
        return self.gem(self.encoder(images))

    def forward(self, images):
        return self.bridge(self.pooled(images))

    @torch.no_grad()
    def embed(self, images, batch_size=256):
        """Unit-norm descriptors for an ``(n, 3, H, W)`` batch, as float64 numpy."""
        was_training = self.training
        self.eval()
        try:
            chunks = []
            for i in range(0, len(images), batch_size):
                x = torch.as_tensor(images[i : i + batch_size], dtype=self.dtype)
                chunks.append(normalize_descriptor(self(x).descriptor))
            return torch.cat(chunks).double().numpy()
        finally:
            self.train(was_training)

    @property
    def dtype(self):
        return next(self.parameters()).dtype


def normalize_descriptor(d, min_norm=1e-12):
    norm = d.norm(dim=-1, keepdim=True)
    if (norm < min_norm).any():
        raise DegenerateDescriptor("descriptor norm below 1e-12")
    return d / norm


def whiten_init(model, pooled_features):
    """Initialize the classification head with PCA whitening of pooled features."""
    f = torch.as_tensor(pooled_features, dtype=torch.float64)
    mu = f.mean(0)
    cov = torch.cov((f - mu).T)
    evals, evecs = torch.linalg.eigh(cov)
    order = torch.argsort(evals, descending=True)[: model.bridge_cfg.c_cls]
    w = (evecs[:, order] / evals[order].clamp(min=1e-9).sqrt()).T
    with torch.no_grad():
        model.bridge.w_cls.weight.copy_(w.to(model.dtype)[: model.bridge.w_cls.weight.shape[0]])


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"BRCKPT01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors, header):
    """Write named tensors as little-endian f32 after a JSON header.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header, then the
    raw tensors in header order.
    """
    meta = dict(header)
    meta["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4").tobytes())


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + n])
    offset = 16 + n
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(t["shape"])
        tensors[t["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    return header, tensors


def model_from_header(header):
    enc = EncoderConfig(**header["encoder"])
    br = BridgeConfig(**header["bridge"])
    return DescriptorModel(enc, br)


def load_model(path):
    """Rebuild the model described by a checkpoint; shapes are checked against its config."""
    header, tensors = read_checkpoint(path)
    model = model_from_header(header)
    expected = model.state_dict()
    for name, ref in expected.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint lacks {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ShapeError(f"{name}: checkpoint {tuple(tensors[name].shape)} vs config {tuple(ref.shape)}")
    model.load_state_dict({k: tensors[k] for k in expected})
    extra = {k: v for k, v in tensors.items() if k not in expected}
    return model, header, extra


def config_header(model):
    return {"encoder": asdict(model.encoder_cfg), "bridge": asdict(model.bridge_cfg)}
