"""Trainable architectures: landmark encoder/graph-decoder, naive UNet, UNet HT.

The landmark model couples a residual conv encoder with a variational latent
and a Chebyshev spectral graph-convolution decoder over the fixed contour
adjacency, emitting one (x, y) pair per node. The pixel models share a
residual UNet trunk and differ only in the output head: a single multiclass
map with background, or one independent sigmoid map per structure.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .anatomy import ContourTopology, LandmarkSet, Structure, topology_from_json, topology_to_json
from .metrics import PixelMode


def _require_square_pow2(size) -> tuple:
    h, w = size
    if h != w or h < 2 or (h & (h - 1)) != 0:
        raise ValueError(f"input_size must be square with power-of-two side, got {size}")
    return (int(h), int(w))


@dataclass(frozen=True)
class LandmarkModelConfig:
    input_size: tuple = (64, 64)
    encoder_channels: tuple = (8, 16, 32, 32, 48)
    latent_dim: int = 32
    chebyshev_order: int = 6
    decoder_channels: tuple = (32, 32, 32, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_size", _require_square_pow2(self.input_size))
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be ≥ 2, got {self.latent_dim}")
        if self.chebyshev_order < 1:
            raise ValueError(f"chebyshev_order must be ≥ 1, got {self.chebyshev_order}")
        if len(self.encoder_channels) != 5:
            raise ValueError("encoder needs exactly 5 stage widths")
        if len(self.decoder_channels) != 5:
            raise ValueError("decoder needs 5 widths: initial node features + 4 graph-conv layers")
        if self.input_size[0] // 32 < 1:
            raise ValueError("input too small for 5 stride-2 stages")


@dataclass(frozen=True)
class PixelModelConfig:
    input_size: tuple = (64, 64)
    channels: tuple = (8, 16, 32, 64)
    mode: PixelMode = PixelMode.MULTICLASS
    num_structures: int = 3
    # per-image zero-mean/unit-variance at the trunk entry; off by default so
    # the plain multiclass baseline consumes raw intensities
    standardize_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_size", _require_square_pow2(self.input_size))
        if len(self.channels) != 4:
            raise ValueError("UNet needs exactly 4 stage widths")
        if self.num_structures < 1:
            raise ValueError("num_structures must be ≥ 1")
        if self.input_size[0] % 8:
            raise ValueError("input size must be divisible by 8 (three downsamplings)")

    @property
    def out_channels(self) -> int:
        if self.mode is PixelMode.MULTICLASS:
            return self.num_structures + 1
        return self.num_structures


@dataclass(frozen=True)
class LatentRecord:
    sample_id: str
    center_id: str
    vector: np.ndarray


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.skip = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.skip(x))


def _standardize(images: torch.Tensor) -> torch.Tensor:
    # zero mean, unit variance per image: global intensity is an acquisition
    # artifact, not anatomy, and must not leak into the features
    mean = images.mean(dim=(-2, -1), keepdim=True)
    std = images.std(dim=(-2, -1), keepdim=True)
    return (images - mean) / (std + 1e-6)


class ChebGraphConv(nn.Module):
    """Spectral graph convolution via the Chebyshev recurrence on a fixed operator."""

    def __init__(self, operator: np.ndarray, fin: int, fout: int, order: int):
        super().__init__()
        if order < 1:
            raise ValueError("chebyshev order must be ≥ 1")
        self.order = order
        op = torch.as_tensor(np.asarray(operator), dtype=torch.float32)
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise ValueError(f"operator must be square, got {tuple(op.shape)}")
        self.register_buffer("op", op)
        self.weight = nn.Parameter(torch.empty(order, fin, fout))
        self.bias = nn.Parameter(torch.zeros(fout))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        # x: (B, D, fin); T_k(op) recurrence, stacked then mixed per order
        terms = [x]
        if self.order > 1:
            terms.append(torch.einsum("ij,bjf->bif", self.op, x))
        for _ in range(2, self.order):
            terms.append(2.0 * torch.einsum("ij,bjf->bif", self.op, terms[-1]) - terms[-2])
        out = torch.zeros(x.shape[0], x.shape[1], self.weight.shape[2], device=x.device, dtype=x.dtype)
        for k, t in enumerate(terms):
            out = out + t @ self.weight[k]
        return out + self.bias


class LandmarkNet(nn.Module):
    def __init__(self, config: LandmarkModelConfig, topology: ContourTopology):
        super().__init__()
        self.config = config
        self.topology = topology
        d = topology.layout.total_nodes
        c = config.encoder_channels
        self.encoder = nn.Sequential(
            ResidualBlock(1, c[0], stride=2),
            ResidualBlock(c[0], c[1], stride=2),
            ResidualBlock(c[1], c[2], stride=2),
            ResidualBlock(c[2], c[3], stride=2),
            ResidualBlock(c[3], c[4], stride=2),
        )
        side = config.input_size[0] // 32
        flat = c[4] * side * side
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)

        w = config.decoder_channels
        self.unpack = nn.Linear(config.latent_dim, d * w[0])
        self.gconvs = nn.ModuleList(
            [
                ChebGraphConv(topology.operator, w[i], w[i + 1], config.chebyshev_order)
                for i in range(4)
            ]
        )
        self.head = nn.Linear(w[4], 2)
        self.act = nn.ReLU(inplace=True)

    def encode(self, images):
        feats = self.encoder(_standardize(images)).flatten(1)
        return self.fc_mu(feats), self.fc_logvar(feats)

    def decode(self, z):
        d = self.topology.layout.total_nodes
        x = self.unpack(z).reshape(z.shape[0], d, -1)
        for gconv in self.gconvs:
            x = self.act(gconv(x))
        return self.head(x)

    def forward(self, images, stochastic: bool = False):
        self._check_size(images)
        mu, logvar = self.encode(images)
        if stochastic:
            z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        else:
            z = mu
        return self.decode(z), mu, logvar

    def _check_size(self, images):
        if tuple(images.shape[-2:]) != self.config.input_size:
            raise ValueError(
                f"image size {tuple(images.shape[-2:])} does not match configured "
                f"{self.config.input_size}"
            )


class UNet(nn.Module):
    def __init__(self, config: PixelModelConfig, structures: tuple = ()):
        super().__init__()
        self.config = config
        if config.mode is PixelMode.MULTILABEL_HT:
            if len(structures) != config.num_structures:
                raise ValueError("HT mode needs one structure tag per output map")
        self.structures = tuple(structures)
        w1, w2, w3, w4 = config.channels
        self.enc1 = ResidualBlock(1, w1)
        self.enc2 = ResidualBlock(w1, w2, stride=2)
        self.enc3 = ResidualBlock(w2, w3, stride=2)
        self.enc4 = ResidualBlock(w3, w4, stride=2)
        self.up3 = nn.ConvTranspose2d(w4, w3, 2, stride=2)
        self.dec3 = ResidualBlock(2 * w3, w3)
        self.up2 = nn.ConvTranspose2d(w3, w2, 2, stride=2)
        self.dec2 = ResidualBlock(2 * w2, w2)
        self.up1 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = ResidualBlock(2 * w1, w1)
        if config.mode is PixelMode.MULTICLASS:
            self.head = nn.Conv2d(w1, config.out_channels, 1)
            self.heads = None
        else:
            self.head = None
            self.heads = nn.ModuleList(
                [nn.Conv2d(w1, 1, 1) for _ in range(config.num_structures)]
            )

    def trunk(self, images):
        self._check_size(images)
        if self.config.standardize_input:
            images = _standardize(images)
        e1 = self.enc1(images)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(torch.cat([self.up3(e4), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return d1, e4

    def forward(self, images):
        feats, _ = self.trunk(images)
        if self.config.mode is PixelMode.MULTICLASS:
            return self.head(feats)  # logits
        return torch.sigmoid(torch.cat([h(feats) for h in self.heads], dim=1))

    def bottleneck(self, images):
        _, e4 = self.trunk(images)
        return e4.mean(dim=(2, 3))

    def _check_size(self, images):
        if tuple(images.shape[-2:]) != self.config.input_size:
            raise ValueError(
                f"image size {tuple(images.shape[-2:])} does not match configured "
                f"{self.config.input_size}"
            )


# ---------------------------------------------------------------------------
# Single-image forward operations
# ---------------------------------------------------------------------------

def _to_batch(image) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a single H×W grayscale image, got shape {tuple(arr.shape)}")
    return arr[None, None]


def landmark_forward(model: LandmarkNet, image, stochastic: bool = False):
    """Predict a LandmarkSet for one image; deterministic when stochastic=False."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            coords, mu, logvar = model(_to_batch(image), stochastic=stochastic)
    finally:
        model.train(was_training)
    out = coords[0].numpy().astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite activations in landmark forward pass")
    return (
        LandmarkSet(layout=model.topology.layout, coords=out),
        mu[0].numpy().copy(),
        logvar[0].numpy().copy(),
    )


def pixel_forward(model: UNet, image) -> np.ndarray:
    """Per-channel score maps: sigmoid probabilities (HT) or logits (multiclass)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            scores = model(_to_batch(image))
    finally:
        model.train(was_training)
    return scores[0].numpy().copy()


def extract_latent(model, record) -> LatentRecord:
    """Latent mean for the landmark model; pooled bottleneck features for UNets."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if isinstance(model, LandmarkNet):
                mu, _ = model.encode(_to_batch(record.image))
                vec = mu[0].numpy().copy()
            else:
                vec = model.bottleneck(_to_batch(record.image))[0].numpy().copy()
    finally:
        model.train(was_training)
    return LatentRecord(
        sample_id=record.sample_id, center_id=record.center_id, vector=vec.astype(np.float64)
    )


# ---------------------------------------------------------------------------
# Checkpoints: npz archive with a JSON config document + named weight arrays
# ---------------------------------------------------------------------------

def _config_doc(model, meta: dict) -> dict:
    if isinstance(model, LandmarkNet):
        cfg = dataclasses.asdict(model.config)
        return {
            "kind": "hybridgnet",
            "config": cfg,
            "topology": json.loads(topology_to_json(model.topology)),
            "meta": meta,
        }
    cfg = dataclasses.asdict(model.config)
    cfg["mode"] = model.config.mode.name
    return {
        "kind": "unet" if model.config.mode is PixelMode.MULTICLASS else "unet_ht",
        "config": cfg,
        "structures": [s.name for s in model.structures],
        "meta": meta,
    }


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    doc = _config_doc(model, dict(meta or {}))
    arrays = {f"w/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    np.savez(path, config_json=np.frombuffer(json.dumps(doc).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild the model from its archive; returns (model, meta dict)."""
    with np.load(path) as archive:
        doc = json.loads(bytes(archive["config_json"]).decode())
        state = {
            key[2:]: torch.as_tensor(archive[key]) for key in archive.files if key.startswith("w/")
        }
    kind = doc["kind"]
    if kind == "hybridgnet":
        cfg = doc["config"]
        config = LandmarkModelConfig(
            input_size=tuple(cfg["input_size"]),
            encoder_channels=tuple(cfg["encoder_channels"]),
            latent_dim=cfg["latent_dim"],
            chebyshev_order=cfg["chebyshev_order"],
            decoder_channels=tuple(cfg["decoder_channels"]),
        )
        topology = topology_from_json(json.dumps(doc["topology"]))
        model = LandmarkNet(config, topology)
    elif kind in ("unet", "unet_ht"):
        cfg = doc["config"]
        config = PixelModelConfig(
            input_size=tuple(cfg["input_size"]),
            channels=tuple(cfg["channels"]),
            mode=PixelMode[cfg["mode"]],
            num_structures=cfg["num_structures"],
            standardize_input=bool(cfg.get("standardize_input", False)),
        )
        structures = tuple(Structure[name] for name in doc.get("structures", []))
        model = UNet(config, structures)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(state)
    model.eval()
    return model, doc.get("meta", {})
