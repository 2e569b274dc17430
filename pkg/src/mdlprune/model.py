"""Multi-domain network: frozen shared conv kernels, per-domain channel
switches (binarized with a straight-through backward), per-domain batch norm
and classifier heads."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import RunningStats, Tensor, binarize
from .rng import Rng

__all__ = [
    "ConvSpec",
    "PoolSpec",
    "NetConfig",
    "LayerGeom",
    "net_geometry",
    "default_backbone",
    "MultiDomainNet",
    "masked_conv_forward",
    "SWITCH_INIT",
]

# Paper-following initialization: all switches start slightly above the
# threshold, i.e. every channel active.
SWITCH_INIT = 1e-3


@dataclass
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    masked: bool = True
    kind: str = field(default="conv", init=False)


@dataclass
class PoolSpec:
    size: int = 2
    kind: str = field(default="pool", init=False)


@dataclass
class NetConfig:
    """Backbone topology plus everything needed to size per-domain state."""

    layers: list
    num_domains: int
    class_counts: list[int]
    in_channels: int = 3
    image_size: int = 32
    tau: float = 0.0

    def validate(self):
        if self.num_domains < 1:
            raise ValueError("net.num_domains: must be >= 1")
        if len(self.class_counts) != self.num_domains:
            raise ValueError(
                f"net.class_counts: expected {self.num_domains} entries, "
                f"got {len(self.class_counts)}")
        for i, k in enumerate(self.class_counts):
            if k < 2:
                raise ValueError(f"net.class_counts[{i}]: must be >= 2, got {k}")
        if not self.layers:
            raise ValueError("net.layers: must not be empty")
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if layer.out_channels < 1 or layer.kernel < 1:
                    raise ValueError(f"net.layers[{i}]: bad conv dimensions")
            elif layer.kind == "pool":
                if layer.size < 2:
                    raise ValueError(f"net.layers[{i}]: pool size must be >= 2")
            else:
                raise ValueError(f"net.layers[{i}]: unknown kind {layer.kind!r}")
        net_geometry(self)  # raises if spatial dims collapse
        return self

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if layer.kind == "conv":
                layers.append({
                    "kind": "conv", "out_channels": layer.out_channels,
                    "kernel": layer.kernel, "stride": layer.stride,
                    "padding": layer.padding, "masked": layer.masked,
                })
            else:
                layers.append({"kind": "pool", "size": layer.size})
        return {
            "layers": layers,
            "num_domains": self.num_domains,
            "class_counts": list(self.class_counts),
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        layers = []
        for entry in d["layers"]:
            if entry["kind"] == "conv":
                layers.append(ConvSpec(
                    out_channels=entry["out_channels"], kernel=entry["kernel"],
                    stride=entry["stride"], padding=entry["padding"],
                    masked=entry["masked"]))
            elif entry["kind"] == "pool":
                layers.append(PoolSpec(size=entry["size"]))
            else:
                raise ValueError(f"unknown layer kind {entry['kind']!r}")
        return cls(
            layers=layers, num_domains=d["num_domains"],
            class_counts=list(d["class_counts"]), in_channels=d["in_channels"],
            image_size=d["image_size"], tau=d["tau"]).validate()


@dataclass
class LayerGeom:
    kind: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int
    h_out: int
    w_out: int
    masked: bool
    conv_index: int   # -1 for pools
    masked_index: int  # -1 for unmasked layers


def net_geometry(config: NetConfig) -> list[LayerGeom]:
    """Resolve per-layer channel counts and spatial sizes from the config."""
    c, h, w = config.in_channels, config.image_size, config.image_size
    geoms = []
    conv_i = masked_i = 0
    for layer in config.layers:
        if layer.kind == "conv":
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if ho <= 0 or wo <= 0:
                raise ValueError(f"conv layer {conv_i} collapses spatial dims")
            geoms.append(LayerGeom(
                "conv", c, layer.out_channels, layer.kernel, layer.stride,
                layer.padding, ho, wo, layer.masked, conv_i,
                masked_i if layer.masked else -1))
            if layer.masked:
                masked_i += 1
            conv_i += 1
            c, h, w = layer.out_channels, ho, wo
        else:
            if h % layer.size or w % layer.size:
                raise ValueError(
                    f"pool size {layer.size} does not divide {h}x{w}")
            h, w = h // layer.size, w // layer.size
            geoms.append(LayerGeom(
                "pool", c, c, layer.size, layer.size, 0, h, w, False, -1, -1))
    return geoms


def feature_dim(config: NetConfig) -> int:
    g = net_geometry(config)[-1]
    return g.c_out * g.h_out * g.w_out


def masked_channel_counts(config: NetConfig) -> list[int]:
    """Input-channel count of each masked conv layer, in order."""
    return [g.c_in for g in net_geometry(config) if g.masked]


def total_switches(config: NetConfig) -> int:
    return sum(masked_channel_counts(config))


def default_backbone() -> list:
    """Six masked 3x3 conv layers (32-32-64-64-128-128) with two pools."""
    return [
        ConvSpec(32), ConvSpec(32), PoolSpec(),
        ConvSpec(64), ConvSpec(64), PoolSpec(),
        ConvSpec(128), ConvSpec(128),
    ]


def masked_conv_forward(x: Tensor, kernel: Tensor, mask: Tensor,
                        stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution with input channel c scaled by mask[c].

    By linearity this equals summing the masked per-channel contributions, so
    the switch gradient is the total contribution of that channel.
    """
    if mask.shape != (x.shape[1],):
        raise ValueError(
            f"mask length {mask.shape} does not match input channels {x.shape[1]}")
    return ag.conv2d(channel_mask(x, mask), kernel, stride=stride, padding=padding)


def channel_mask(x: Tensor, mask: Tensor) -> Tensor:
    return ag.channel_scale(x, mask)


class MultiDomainNet:
    """Shared frozen kernels plus per-domain switches, BN sets, and heads.

    Kernels never require grad; training touches only domain-specific state.
    ``freeze_masks`` snaps every switch to its binarized value, after which
    the network serves deterministic eval-mode inference.
    """

    def __init__(self, config: NetConfig, kernels, switches, bn_gamma, bn_beta,
                 bn_stats, heads, frozen: bool = False):
        self.config = config
        self.kernels = kernels            # [conv] Tensor, requires_grad False
        self.switches = switches          # [domain][masked conv] Tensor
        self.bn_gamma = bn_gamma          # [domain][conv] Tensor
        self.bn_beta = bn_beta            # [domain][conv] Tensor
        self.bn_stats = bn_stats          # [domain][conv] RunningStats
        self.heads = heads                # [domain] (w, b) Tensors
        self.frozen = frozen

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: NetConfig, seed: int = 0,
              kernels: Optional[Sequence[np.ndarray]] = None) -> "MultiDomainNet":
        config.validate()
        geoms = [g for g in net_geometry(config) if g.kind == "conv"]
        rng = Rng(seed, 0x6B65726E)  # kernel stream
        kernel_tensors = []
        for i, g in enumerate(geoms):
            if kernels is not None:
                k = np.asarray(kernels[i], dtype=ag.default_dtype())
                if k.shape != (g.c_out, g.c_in, g.kernel, g.kernel):
                    raise ValueError(
                        f"kernel {i} shape {k.shape} != "
                        f"{(g.c_out, g.c_in, g.kernel, g.kernel)}")
                kernel_tensors.append(Tensor(k))
            else:
                fan_in = g.c_in * g.kernel * g.kernel
                k = rng.normals((g.c_out, g.c_in, g.kernel, g.kernel))
                kernel_tensors.append(Tensor(k * np.sqrt(2.0 / fan_in)))
        switches = [
            [Tensor(np.full(g.c_in, SWITCH_INIT), requires_grad=True)
             for g in geoms if g.masked]
            for _ in range(config.num_domains)
        ]
        bn_gamma = [[Tensor(np.ones(g.c_out), requires_grad=True) for g in geoms]
                    for _ in range(config.num_domains)]
        bn_beta = [[Tensor(np.zeros(g.c_out), requires_grad=True) for g in geoms]
                   for _ in range(config.num_domains)]
        bn_stats = [[RunningStats(g.c_out) for g in geoms]
                    for _ in range(config.num_domains)]
        f = feature_dim(config)
        heads = []
        for d in range(config.num_domains):
            hrng = Rng(seed, 0x68656164, d)  # head stream
            w = Tensor(hrng.normals((f, config.class_counts[d])) / np.sqrt(f),
                       requires_grad=True)
            b = Tensor(np.zeros(config.class_counts[d]), requires_grad=True)
            heads.append((w, b))
        return cls(config, kernel_tensors, switches, bn_gamma, bn_beta,
                   bn_stats, heads)

    # -- forward ------------------------------------------------------------

    def _check_domain(self, d: int):
        if not 0 <= d < self.config.num_domains:
            raise ValueError(
                f"unknown domain index {d} (have {self.config.num_domains})")

    def binarized_masks(self, d: int) -> list[Tensor]:
        """Straight-through binarized view of domain d's switches."""
        self._check_domain(d)
        return [binarize(s, self.config.tau) for s in self.switches[d]]

    def forward(self, d: int, x: Tensor, train: bool = False,
                masks: Optional[list[Tensor]] = None) -> Tensor:
        self._check_domain(d)
        if masks is None:
            masks = self.binarized_masks(d)
        out = x
        for geom, layer in zip(net_geometry(self.config), self.config.layers):
            if geom.kind == "pool":
                out = ag.maxpool2d(out, layer.size)
                continue
            ci = geom.conv_index
            if geom.masked:
                out = channel_mask(out, masks[geom.masked_index])
            out = ag.conv2d(out, self.kernels[ci], stride=geom.stride,
                            padding=geom.padding)
            out = ag.batchnorm(out, self.bn_gamma[d][ci], self.bn_beta[d][ci],
                               self.bn_stats[d][ci], train=train)
            out = ag.relu(out)
        out = ag.reshape(out, (out.shape[0], feature_dim(self.config)))
        w, b = self.heads[d]
        return ag.linear(out, w, b)

    def mask_mean(self, d: int, masks: Optional[list[Tensor]] = None,
                  scope: str = "per_layer") -> Tensor:
        """Mean of the binarized switches of domain d.

        ``per_layer`` weighs each layer equally (mean of per-layer means);
        ``global`` averages over the raw switch count.
        """
        if masks is None:
            masks = self.binarized_masks(d)
        if scope == "per_layer":
            acc = ag.tmean(masks[0])
            for m in masks[1:]:
                acc = ag.add(acc, ag.tmean(m))
            return ag.affine(acc, 1.0 / len(masks), 0.0)
        if scope == "global":
            return ag.tmean(ag.concat(masks))
        raise ValueError(f"unknown mask_mean scope {scope!r}")

    # -- state access -------------------------------------------------------

    def head_params(self, d: int) -> list[Tensor]:
        return [self.heads[d][0], self.heads[d][1]]

    def bn_params(self, d: int) -> list[Tensor]:
        return [t for pair in zip(self.bn_gamma[d], self.bn_beta[d]) for t in pair]

    def switch_params(self, d: int) -> list[Tensor]:
        return list(self.switches[d])

    def all_switch_params(self) -> list[Tensor]:
        return [s for per_domain in self.switches for s in per_domain]

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.kernels:
            h.update(str(k.shape).encode())
            h.update(np.ascontiguousarray(k.data).tobytes())
        return h.hexdigest()

    def freeze_masks(self):
        """Snap all switches to exact {0,1}; idempotent."""
        for per_domain in self.switches:
            for s in per_domain:
                s.data = (s.data > self.config.tau).astype(s.dtype)
        self.frozen = True

    def frozen_masks(self, d: int) -> list[np.ndarray]:
        """Binary masks of a frozen network as plain arrays."""
        self._check_domain(d)
        if not self.frozen:
            raise ValueError("masks are not frozen; call freeze_masks() first")
        return [(s.data > self.config.tau).astype(np.uint8)
                for s in self.switches[d]]
