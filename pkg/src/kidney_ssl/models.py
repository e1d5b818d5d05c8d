"""
Dense 3D encoder, its siamese pairing, and the segmentation network.

Encoder: stem conv, then four dense blocks with 2, 2, 4, 8 layers. After each
block a stride-2 3x3x3 conv downsamples and a 1x1x1 conv halves the channels;
the outputs f1..f4 sit at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
Every conv except the stem is preceded by GroupNorm + ReLU.

Segmentation net: the encoder, a four-stage decoder (two 3x3x3 convs and a
2x transpose conv per stage, encoder features concatenated at matching
resolution) and a reconstruction decoder of the same layout without skips.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from ._conv import Conv3d, ConvTranspose3d

CHECKPOINT_VERSION = 1
ENCODER_PREFIX = "encoder."


class ArchitectureError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    block_layer_counts: List[int] = field(default_factory=lambda: [2, 2, 4, 8])
    growth_rate: int = 16
    stem_channels: int = 16
    norm_groups: int = 8
    # widths of decoder stages, deepest first
    decoder_channels: List[int] = field(default_factory=lambda: [64, 32, 16, 8])

    def __post_init__(self):
        self.block_layer_counts = [int(n) for n in self.block_layer_counts]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        if len(self.block_layer_counts) != 4:
            raise ArchitectureError("exactly 4 encoder blocks are required")
        if len(self.decoder_channels) != 4:
            raise ArchitectureError("exactly 4 decoder stages are required")
        if min(self.block_layer_counts) < 1 or self.growth_rate < 1 or self.stem_channels < 1:
            raise ArchitectureError("layer counts and channel widths must be positive")
        self.encoder_channels()  # validates group divisibility

    def groups_for(self, channels: int) -> int:
        g = self.norm_groups if channels >= self.norm_groups else channels
        if channels % g:
            raise ArchitectureError(f"norm_groups={self.norm_groups} does not divide "
                                    f"{channels} channels")
        return g

    def transition_channels(self, channels: int) -> int:
        half = -(-channels // 2)
        if half >= self.norm_groups:
            half = -(-half // self.norm_groups) * self.norm_groups
        return half

    def encoder_channels(self) -> List[tuple]:
        """Per block: (input channels, post-dense channels, output channels)."""
        out, c = [], self.stem_channels
        for n_layers in self.block_layer_counts:
            cin = c
            for _ in range(n_layers):
                self.groups_for(c)
                c += self.growth_rate
            self.groups_for(c)
            t = self.transition_channels(c)
            self.groups_for(t)
            out.append((cin, c, t))
            c = t
        return out

    @property
    def feature_channels(self) -> List[int]:
        return [t for _, _, t in self.encoder_channels()]

    @property
    def embedding_size(self) -> int:
        return self.feature_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ArchitectureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d or {}) - known
        if unknown:
            raise ArchitectureError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**(d or {}))


PRESETS = {
    # roughly what a 11GB GPU allows at 64x112x112 crops
    "paper": dict(growth_rate=16, stem_channels=32, decoder_channels=[128, 64, 32, 16]),
    "desk": dict(growth_rate=16, stem_channels=16, decoder_channels=[64, 32, 16, 8]),
    # the desk layout at half width, for the one-core acceptance runs
    "quick": dict(growth_rate=8, stem_channels=8, decoder_channels=[32, 16, 8, 8]),
    # one norm group: at 16^3 input f4 is a single voxel, so per-channel groups would be empty
    "tiny": dict(block_layer_counts=[1, 1, 1, 1], growth_rate=2, stem_channels=2, norm_groups=1,
                 decoder_channels=[2, 2, 2, 2]),
}


def preset(name: str, **overrides) -> ArchitectureConfig:
    return ArchitectureConfig(**{**PRESETS[name], **overrides})


class NormActConv(nn.Sequential):
    def __init__(self, cfg, cin, cout, kernel_size=3, stride=1):
        super().__init__(
            nn.GroupNorm(cfg.groups_for(cin), cin),
            nn.ReLU(inplace=False),
            Conv3d(cin, cout, kernel_size, stride=stride, padding=kernel_size // 2),
        )


class DenseBlock(nn.Module):
    def __init__(self, cfg, cin, n_layers):
        super().__init__()
        self.layers = nn.ModuleList(
            NormActConv(cfg, cin + i * cfg.growth_rate, cfg.growth_rate) for i in range(n_layers)
        )

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class Transition(nn.Sequential):
    def __init__(self, cfg, cin, cout):
        super().__init__(
            NormActConv(cfg, cin, cin, kernel_size=3, stride=2),
            NormActConv(cfg, cin, cout, kernel_size=1),
        )


class DenseEncoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv3d(1, cfg.stem_channels, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for (cin, cdense, cout), n in zip(cfg.encoder_channels(), cfg.block_layer_counts):
            self.blocks.append(DenseBlock(cfg, cin, n))
            self.transitions.append(Transition(cfg, cdense, cout))

    def forward(self, x):
        """Return ``([f1, f2, f3, f4], embedding)`` for input of shape (N, 1, D, H, W)."""
        check_input_shape(x)
        h = self.stem(x)
        feats = []
        for block, trans in zip(self.blocks, self.transitions):
            h = trans(block(h))
            feats.append(h)
        return feats, h.mean(dim=(2, 3, 4))


class Siamese(nn.Module):
    """Both branches call the very same encoder module."""

    def __init__(self, encoder: DenseEncoder):
        super().__init__()
        self.encoder = encoder

    def forward(self, a, b):
        return self.encoder(a)[1], self.encoder(b)[1]


class DecoderStage(nn.Module):
    def __init__(self, cfg, cin, width, upsample=True):
        super().__init__()
        self.conv1 = NormActConv(cfg, cin, width)
        self.conv2 = NormActConv(cfg, width, width)
        self.up = ConvTranspose3d(width, width, 2) if upsample else None

    def forward(self, x):
        x = self.conv2(self.conv1(x))
        return self.up(x) if self.up is not None else x


class Decoder(nn.Module):
    def __init__(self, cfg, skips: bool):
        super().__init__()
        self.skips = skips
        feat = cfg.feature_channels
        widths = cfg.decoder_channels
        self.stages = nn.ModuleList()
        prev = 0
        for i, width in enumerate(widths):
            level = 3 - i  # f4 feeds the deepest stage
            cin = prev + (feat[level] if (skips or i == 0) else 0)
            self.stages.append(DecoderStage(cfg, cin, width))
            prev = width
        self.width = widths[-1]

    def forward(self, feats, use_skips=True):
        x = None
        for i, stage in enumerate(self.stages):
            level = 3 - i
            if i == 0:
                x = feats[level]
            elif self.skips:
                skip = feats[level] if use_skips else torch.zeros_like(feats[level])
                x = torch.cat([x, skip], dim=1)
            x = stage(x)
        return x


class SegmentationNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = DenseEncoder(cfg)
        self.decoder = Decoder(cfg, skips=True)
        self.seg_head = NormActConv(cfg, self.decoder.width, 1, kernel_size=1)
        self.recon_decoder = Decoder(cfg, skips=False)
        self.recon_head = Conv3d(self.recon_decoder.width, 1, 1)

    def forward(self, x, use_skips=True):
        """Return ``(seg_logits, reconstruction)``, both shaped like ``x``."""
        feats, _ = self.encoder(x)
        seg = self.seg_head(self.decoder(feats, use_skips=use_skips))
        recon = self.recon_head(self.recon_decoder(feats))
        return seg, recon


def check_input_shape(x):
    if x.dim() != 5 or x.shape[1] != 1:
        raise ArchitectureError(f"expected input of shape (N, 1, D, H, W), got {tuple(x.shape)}")
    if any(n % 16 for n in x.shape[2:]):
        raise ArchitectureError(f"spatial dims {tuple(x.shape[2:])} must be divisible by 16")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterStore(OrderedDict):
    """Ordered ``name -> ndarray`` map, tagged with the architecture that produced it."""

    def __init__(self, *args, config: Optional[ArchitectureConfig] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.config = config

    @classmethod
    def from_module(cls, module: nn.Module, config=None) -> "ParameterStore":
        cfg = config if config is not None else getattr(module, "cfg", None)
        return cls(((k, v.detach().cpu().numpy().copy()) for k, v in module.state_dict().items()),
                   config=cfg)

    def subset(self, prefix: str) -> "ParameterStore":
        return ParameterStore(((k, v) for k, v in self.items() if k.startswith(prefix)),
                              config=self.config)

    def copy(self) -> "ParameterStore":
        return ParameterStore(((k, v.copy()) for k, v in self.items()), config=self.config)


def load_into(module: nn.Module, store, strict=True):
    """Copy ``store`` arrays into ``module``; with ``strict=False`` only a subset is required."""
    own = module.state_dict()
    missing = [k for k in own if k not in store]
    unexpected = [k for k in store if k not in own]
    if unexpected or (strict and missing):
        raise ArchitectureError(f"parameter names mismatch: missing={missing[:5]} "
                                f"unexpected={unexpected[:5]}")
    for name, value in store.items():
        if tuple(own[name].shape) != tuple(np.shape(value)):
            raise ArchitectureError(f"shape mismatch for {name}: store {np.shape(value)} "
                                    f"vs model {tuple(own[name].shape)}")
    with torch.no_grad():
        for name, value in store.items():
            own[name].copy_(torch.as_tensor(np.asarray(value)))
    return module


def _init_(module: nn.Module, generator: torch.Generator):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                if isinstance(m, nn.Conv3d):
                    fan_in = m.weight[0].numel()
                else:  # each output voxel sees in_channels * (kernel / stride) taps
                    fan_in = m.in_channels * int(np.prod(m.kernel_size) / np.prod(m.stride))
                std = float(np.sqrt(2.0 / fan_in))
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator,
                                           dtype=torch.float64) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_encoder(config: ArchitectureConfig, seed: Optional[int] = None, dtype=torch.float32):
    enc = DenseEncoder(config).to(dtype)
    if seed is not None:
        _init_(enc, torch.Generator().manual_seed(seed))
    return enc


def build_siamese(encoder: DenseEncoder) -> Siamese:
    return Siamese(encoder)


def build_segmentation_net(config: ArchitectureConfig, encoder_init="random", seed: int = 0,
                           dtype=torch.float32) -> SegmentationNet:
    """
    Build the segmentation network; ``encoder_init`` is ``"random"`` or a
    :class:`ParameterStore` of ``encoder.*`` arrays (e.g. from :func:`transfer_encoder`).
    Non-encoder parameters are always randomly initialised from ``seed``.
    """
    net = SegmentationNet(config).to(dtype)
    _init_(net, torch.Generator().manual_seed(seed))
    if not (isinstance(encoder_init, str) and encoder_init == "random"):
        bad = [k for k in encoder_init if not k.startswith(ENCODER_PREFIX)]
        if bad:
            raise ArchitectureError(f"encoder_init holds non-encoder parameters: {bad[:5]}")
        expected = {k for k in net.state_dict() if k.startswith(ENCODER_PREFIX)}
        if set(encoder_init) != expected:
            raise ArchitectureError("encoder_init names do not match the encoder of this config")
        load_into(net, encoder_init, strict=False)
    return net


def init_random(config: ArchitectureConfig, seed: int, kind: str = "segmentation") -> ParameterStore:
    """Fresh deterministic parameters for a ``"segmentation"`` or ``"siamese"`` network."""
    if kind == "segmentation":
        return ParameterStore.from_module(build_segmentation_net(config, seed=seed), config)
    if kind == "siamese":
        return ParameterStore.from_module(build_siamese(build_encoder(config, seed=seed)), config)
    raise ValueError(f"unknown network kind {kind!r}")


def save_checkpoint(store: ParameterStore, path, kind: str = "", extra: Optional[dict] = None):
    """Write ``store`` as an ``.npz`` archive with an embedded JSON header."""
    if store.config is None:
        raise ArchitectureError("checkpoint needs the ArchitectureConfig of its store")
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "architecture": store.config.to_dict(),
        "names": list(store.keys()),
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"p{i:04d}": np.asarray(v) for i, v in enumerate(store.values())}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = path.with_name(f".{path.name}.tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> dict:
    with np.load(path) as npz:
        return json.loads(npz["__header__"].tobytes().decode())


def load_checkpoint(path, config: Optional[ArchitectureConfig] = None) -> ParameterStore:
    """
    Load a checkpoint; when ``config`` is given it must equal the embedded one.
    """
    try:
        with np.load(path) as npz:
            header = json.loads(npz["__header__"].tobytes().decode())
            values = [npz[f"p{i:04d}"] for i in range(len(header["names"]))]
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ArchitectureError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise ArchitectureError(f"checkpoint version {header.get('version')} "
                                f"!= {CHECKPOINT_VERSION}")
    stored = ArchitectureConfig.from_dict(header["architecture"])
    if config is not None and config != stored:
        raise ArchitectureError(f"checkpoint architecture {stored} does not match {config}")
    return ParameterStore(zip(header["names"], values), config=stored)
