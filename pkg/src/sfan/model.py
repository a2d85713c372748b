"""SFAN forward graph and the U-Net baseline.

The SFAN decoder is the global-context path: encoder features of all levels
pass through semantic attention transmission, get aligned to ``C'`` channels
at level-0 resolution, are concatenated, re-weighted by the global context
vector and turned into class probabilities by a 3x3 + 1x1 head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import nn_core as core
from .nn_core import Conv


@dataclass
class ModelConfig:
    levels: int = 5
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    aligned_channels: int = 64
    num_classes: int = 2
    sat_enabled: bool = True
    gca_enabled: bool = True
    arch: str = "sfan"

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.encoder_channels) != self.levels:
            raise ValueError(f"{len(self.encoder_channels)} encoder widths for {self.levels} levels")
        if self.aligned_channels < 1:
            raise ValueError("aligned_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.arch not in ("sfan", "unet"):
            raise ValueError(f"unknown arch {self.arch!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @classmethod
    def unet(cls, levels: int = 5, base: int = 64, num_classes: int = 2) -> "ModelConfig":
        return cls(levels=levels, encoder_channels=[base * 2 ** i for i in range(levels)],
                   num_classes=num_classes, arch="unet")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def check_spatial(x: torch.Tensor, cfg: ModelConfig) -> None:
    h, w = x.shape[-2:]
    d = cfg.divisor
    if h % d or w % d:
        raise ValueError(f"input {h}x{w} not divisible by 2^(levels-1) = {d}")


class ConvBlock(nn.Module):
    """Two 3x3 conv + ReLU layers."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = Conv(cin, cout, 3)
        self.conv2 = Conv(cout, cout, 3)

    def forward(self, x):
        return core.relu(self.conv2(core.relu(self.conv1(x))))


class Encoder(nn.Module):
    def __init__(self, channels, in_channels=1):
        super().__init__()
        widths = [in_channels] + list(channels)
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = core.maxpool2(x)
            x = block(x)
            feats.append(x)
        return feats


class ChannelAttention(nn.Module):
    """Global pool -> 1x1 conv (squeeze, ReLU) -> 1x1 conv -> sigmoid.

    Shared structure of the semantic attention (SAT) and global context (GCA)
    branches; yields an ``(N, out_channels, 1, 1)`` vector in (0, 1).
    """

    SQUEEZE = 4

    def __init__(self, in_channels, out_channels):
        super().__init__()
        hidden = math.ceil(out_channels / self.SQUEEZE)
        self.squeeze = Conv(in_channels, hidden, 1)
        self.excite = Conv(hidden, out_channels, 1)

    def forward(self, h):
        return core.sigmoid(self.excite(core.relu(self.squeeze(core.global_avg_pool(h)))))


def sat_apply(h: torch.Tensor, v: torch.Tensor | None) -> torch.Tensor:
    """Semantic attention transmission; the top level (``v is None``) passes through."""
    if v is None:
        return h
    return core.mul_broadcast(h, v)


def gca_apply(p: torch.Tensor, g: torch.Tensor | None) -> torch.Tensor:
    if g is None:
        return p
    return core.mul_broadcast(p, g)


class AlignmentBlock(nn.Module):
    def __init__(self, in_channels, aligned_channels):
        super().__init__()
        self.proj = Conv(in_channels, aligned_channels, 1)

    def forward(self, s, target_hw):
        return core.upsample_bilinear(self.proj(s), target_hw)


class SFAN(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        L, cp = cfg.levels, cfg.aligned_channels
        self.encoder = Encoder(ch, in_channels)
        # sat[t] consumes level t+1 and weights level t
        self.sat = nn.ModuleList(ChannelAttention(ch[t + 1], ch[t]) for t in range(L - 1))
        self.align = nn.ModuleList(AlignmentBlock(c, cp) for c in ch)
        self.gca = ChannelAttention(ch[-1], L * cp)
        self.head_conv = Conv(L * cp, cp, 3)
        self.head_out = Conv(cp, cfg.num_classes, 1)

    def encode(self, x):
        check_spatial(x, self.cfg)
        return self.encoder(x)

    def sat_attention(self, feats):
        return [self.sat[t](feats[t + 1]) for t in range(self.cfg.levels - 1)]

    def gca_attention(self, feats):
        return self.gca(feats[-1])

    def build_pyramid(self, s_feats):
        target = s_feats[0].shape[-2:]
        return core.concat_channels([blk(s, target) for blk, s in zip(self.align, s_feats)])

    def head(self, o):
        return core.softmax_channels(self.head_out(core.relu(self.head_conv(o))))

    def forward_with_attention(self, x, sat_vectors=None, gca_vector=None):
        """Run the full graph; ``sat_vectors`` / ``gca_vector`` replace the learned attention.

        Returns ``(probs, V, G)`` where ``V`` lists the per-level vectors used
        (``None`` entries when SAT is disabled) and ``G`` is the global vector
        (or ``None``).
        """
        feats = self.encode(x)
        L = self.cfg.levels
        if sat_vectors is not None:
            vs = list(sat_vectors)
        elif self.cfg.sat_enabled:
            vs = self.sat_attention(feats)
        else:
            vs = [None] * (L - 1)
        s_feats = [sat_apply(feats[t], vs[t]) for t in range(L - 1)] + [sat_apply(feats[-1], None)]
        p = self.build_pyramid(s_feats)
        if gca_vector is not None:
            g = gca_vector
        elif self.cfg.gca_enabled:
            g = self.gca_attention(feats)
        else:
            g = None
        probs = self.head(gca_apply(p, g))
        if probs.shape[-2:] != x.shape[-2:]:
            probs = core.upsample_bilinear(probs, x.shape[-2:])
        return probs, vs, g

    def forward(self, x, sat_vectors=None, gca_vector=None):
        return self.forward_with_attention(x, sat_vectors, gca_vector)[0]


class UNet(nn.Module):
    """Symmetric encoder-decoder baseline with skip concatenation."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        self.encoder = Encoder(ch, in_channels)
        self.decoder = nn.ModuleList(ConvBlock(ch[l] + ch[l + 1], ch[l]) for l in range(cfg.levels - 1))
        self.out = Conv(ch[0], cfg.num_classes, 1)

    def forward(self, x):
        check_spatial(x, self.cfg)
        feats = self.encoder(x)
        y = feats[-1]
        for l in range(self.cfg.levels - 2, -1, -1):
            y = core.upsample_bilinear(y, feats[l].shape[-2:])
            y = self.decoder[l](core.concat_channels([feats[l], y]))
        return core.softmax_channels(self.out(y))


def build_model(cfg: ModelConfig, seed: int | None = 0, std: float = core.INIT_STD) -> nn.Module:
    model = SFAN(cfg) if cfg.arch == "sfan" else UNet(cfg)
    if seed is not None:
        core.init_gaussian_(model, seed, std)
    return model


# ---------------------------------------------------------------------------
# checkpoints: <name>.json manifest + <name>.bin float32 LE payload


def checkpoint_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> Path:
    manifest_path, payload_path = checkpoint_paths(path)
    entries, chunks = [], []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    manifest = {"config": model.cfg.to_dict(), "params": entries}
    if extra:
        manifest.update(extra)
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_checkpoint(path) -> nn.Module:
    manifest_path, payload_path = checkpoint_paths(path)
    manifest = json.loads(manifest_path.read_text())
    model = build_model(ModelConfig.from_dict(manifest["config"]), seed=None)
    payload = payload_path.read_bytes()
    offset = 0
    state = {}
    for entry in manifest["params"]:
        n = math.prod(entry["shape"])
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 4 * n
    if offset != len(payload):
        raise ValueError(f"{payload_path}: payload has {len(payload)} bytes, manifest needs {offset}")
    model.load_state_dict(state)
    model.eval()
    return model
