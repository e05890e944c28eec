"""Generator, PatchGAN discriminator and segmentor networks.

Networks accept images on the [0, 1] convention and remap them to [-1, 1]
internally. The generator maps its tanh output back to [0, 1]; the
discriminator and segmentor return raw logits.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"VXF1"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    depth: int = 4
    norm: str = "instance"
    final_activation: str = "tanh"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.norm != "instance":
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.final_activation not in ("tanh", "none"):
            raise ValueError(f"unsupported final_activation {self.final_activation!r}")


@dataclass(frozen=True)
class PatchDiscConfig:
    in_channels: int = 1
    base_width: int = 64
    n_layers: int = 3
    norm: str = "instance"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.norm != "instance":
            raise ValueError(f"unsupported norm {self.norm!r}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=False, track_running_stats=False)


def _double_conv(cin: int, cout: int, first: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1)]
    if not first:
        layers.append(_norm(cout))
    layers += [nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.ReLU()]
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """U-Net with max-pool downsampling and transposed-convolution upsampling.

    ``forward`` takes a (N, C, H, W) batch in [0, 1]. With ``final_activation
    = "tanh"`` the output is mapped back to [0, 1]; otherwise raw logits are
    returned. ``forward_raw`` exposes the network output before any remap.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        w, d = cfg.base_width, cfg.depth
        widths = [w * 2**k for k in range(d + 1)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for k in range(d):
            self.down.append(_double_conv(cin, widths[k], first=(k == 0)))
            cin = widths[k]
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[d - 1], widths[d])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for k in reversed(range(d)):
            self.up.append(
                nn.Sequential(nn.ConvTranspose2d(widths[k + 1], widths[k], 2, stride=2), _norm(widths[k]), nn.ReLU())
            )
            self.dec.append(_double_conv(2 * widths[k], widths[k]))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)
        init_weights(self)

    def _check_input(self, x: torch.Tensor) -> None:
        f = 2**self.cfg.depth
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} is not divisible by 2**depth = {f}"
            )

    def forward_raw(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        h = x * 2 - 1
        skips = []
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        h = self.head(h)
        if self.cfg.final_activation == "tanh":
            h = torch.tanh(h)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.forward_raw(x)
        if self.cfg.final_activation == "tanh":
            return (h + 1) / 2
        return h


def unet_parameter_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count of :class:`UNet` (weights plus biases)."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    w, d = cfg.base_width, cfg.depth
    widths = [w * 2**k for k in range(d + 1)]
    total = 0
    cin = cfg.in_channels
    for k in range(d):
        total += conv(cin, widths[k], 3) + conv(widths[k], widths[k], 3)
        cin = widths[k]
    total += conv(widths[d - 1], widths[d], 3) + conv(widths[d], widths[d], 3)
    for k in range(d):
        total += conv(widths[k + 1], widths[k], 2)
        total += conv(2 * widths[k], widths[k], 3) + conv(widths[k], widths[k], 3)
    total += conv(widths[0], cfg.out_channels, 1)
    return total


class PatchDiscriminator(nn.Module):
    """PatchGAN: stride-2 4x4 convolutions, then two stride-1 4x4 convolutions.

    With ``n_layers=3`` each output logit sees a 70x70 input window.
    """

    def __init__(self, cfg: PatchDiscConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = [nn.Conv2d(cfg.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, cfg.n_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, stride=2, padding=1), _norm(w * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2**cfg.n_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, stride=1, padding=1), _norm(w * mult), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(w * mult, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        init_weights(self)

    @property
    def receptive_field(self) -> int:
        return patchgan_receptive_field(self.cfg.n_layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rf = self.receptive_field
        if min(x.shape[-2:]) < rf:
            raise ValueError(f"input {tuple(x.shape[-2:])} is smaller than the {rf}px receptive field")
        return self.net(x * 2 - 1)


def patchgan_receptive_field(n_layers: int) -> int:
    # n_layers stride-2 convs, then two stride-1 convs, all with kernel 4
    strides = [2] * n_layers + [1, 1]
    rf = 1
    for s in reversed(strides):
        rf = (rf - 1) * s + 4
    return rf


def patchgan_output_size(size: int, n_layers: int) -> int:
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def build_generator(cfg: UNetConfig | None = None) -> UNet:
    cfg = cfg or UNetConfig(final_activation="tanh")
    if cfg.final_activation != "tanh":
        raise ValueError("generator requires final_activation='tanh'")
    return UNet(cfg)


def build_segmentor(cfg: UNetConfig | None = None) -> UNet:
    cfg = cfg or UNetConfig(final_activation="none")
    if cfg.final_activation != "none":
        raise ValueError("segmentor emits logits; use final_activation='none'")
    return UNet(cfg)


def build_discriminator(cfg: PatchDiscConfig | None = None) -> PatchDiscriminator:
    return PatchDiscriminator(cfg or PatchDiscConfig())


def save_network(path: Path | str, net: nn.Module, extra: dict | None = None) -> None:
    """Write a versioned archive of ``net``'s parameters and its config.

    Layout: ``VXF1`` magic, little-endian uint64 header length, a UTF-8 JSON
    header (config, kind, tensor table), then the raw tensor bytes.
    """
    state = net.state_dict()
    table = []
    blobs = []
    offset = 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": type(net).__name__,
        "config": asdict(net.cfg),
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_network(path: Path | str) -> tuple[nn.Module, dict]:
    """Rebuild a network saved by :func:`save_network`; returns (net, header)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a VXF1 network archive")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    base = 12 + hlen
    kind = header["kind"]
    if kind == "UNet":
        net = UNet(UNetConfig(**header["config"]))
    elif kind == "PatchDiscriminator":
        net = PatchDiscriminator(PatchDiscConfig(**header["config"]))
    else:
        raise ValueError(f"{path}: unknown network kind {kind!r}")
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start : start + entry["nbytes"]], dtype="<" + entry["dtype"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    net.load_state_dict(state)
    return net, header
