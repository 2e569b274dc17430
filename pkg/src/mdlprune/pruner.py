"""Physical channel pruning against the cross-domain union mask.

A channel survives if at least one domain's frozen mask keeps it; kernel
slices of channels no domain uses are removed along the input-channel axis.
Each conv layer keeps an index table mapping retained positions back to the
original channel indices, because the upstream feature map still carries the
full channel set (only input channels are pruned).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import RunningStats, Tensor
from .model import MultiDomainNet, NetConfig, feature_dim, net_geometry

__all__ = ["DegenerateLayerError", "SparsityReport", "PrunedModel",
           "union_mask", "prune", "pruned_forward", "sparsity",
           "kernel_weight_count"]


class DegenerateLayerError(RuntimeError):
    """Raised when a layer's union mask keeps no channel at all."""


@dataclass
class SparsityReport:
    per_layer: list[float]  # fraction of channels unused by every domain
    mean: float


def _require_frozen(net: MultiDomainNet, what: str):
    if not net.frozen:
        raise ValueError(f"{what} requires frozen masks; call freeze_masks() first")


def union_mask(net: MultiDomainNet) -> list[np.ndarray]:
    """Elementwise OR of all domains' masks, one vector per masked layer."""
    _require_frozen(net, "union_mask")
    per_domain = [net.frozen_masks(d) for d in range(net.config.num_domains)]
    out = []
    for layer in range(len(per_domain[0])):
        u = per_domain[0][layer].copy()
        for d in range(1, len(per_domain)):
            u |= per_domain[d][layer]
        out.append(u)
    return out


def sparsity(net: MultiDomainNet) -> SparsityReport:
    """Per masked layer, the fraction of channels with a zero union bit.

    Note the per-domain average of unused fractions can exceed 1 - budget;
    only the union decides what is prunable.
    """
    fractions = [float(1.0 - u.mean()) for u in union_mask(net)]
    return SparsityReport(fractions, float(np.mean(fractions)))


class PrunedModel:
    """Compacted kernels plus per-layer index tables; immutable after build.

    ``index_tables`` has one sorted int array per conv layer (identity for
    unmasked layers); ``masks`` re-expresses each domain's mask over the
    retained channels so unused-but-retained channels still read as zero.
    """

    def __init__(self, config: NetConfig, kernels, index_tables, masks,
                 bn_gamma, bn_beta, bn_stats, heads):
        self.config = config
        self.kernels = kernels          # [conv] Tensor, input axis compacted
        self.index_tables = index_tables  # [conv] np.int64, sorted
        self.masks = masks              # [domain][masked layer] np.uint8
        self.bn_gamma = bn_gamma
        self.bn_beta = bn_beta
        self.bn_stats = bn_stats
        self.heads = heads

    def retained_counts(self) -> list[int]:
        return [len(t) for t in self.index_tables]


def prune(net: MultiDomainNet) -> PrunedModel:
    """Drop every input channel whose union bit is zero."""
    _require_frozen(net, "prune")
    unions = union_mask(net)
    geoms = [g for g in net_geometry(net.config) if g.kind == "conv"]
    kernels, tables = [], []
    for g in geoms:
        if g.masked:
            u = unions[g.masked_index]
            if int(u.sum()) == 0:
                raise DegenerateLayerError(
                    f"degenerate layer: conv {g.conv_index} keeps no channel "
                    "in any domain")
            idx = np.nonzero(u)[0].astype(np.int64)
        else:
            idx = np.arange(g.c_in, dtype=np.int64)
        kernels.append(Tensor(net.kernels[g.conv_index].data[:, idx].copy()))
        tables.append(idx)
    masks = []
    for d in range(net.config.num_domains):
        own = net.frozen_masks(d)
        masks.append([own[g.masked_index][tables[g.conv_index]].copy()
                      for g in geoms if g.masked])
    bn_gamma = [[Tensor(t.data.copy()) for t in row] for row in net.bn_gamma]
    bn_beta = [[Tensor(t.data.copy()) for t in row] for row in net.bn_beta]
    bn_stats = []
    for row in net.bn_stats:
        copies = []
        for st in row:
            c = RunningStats(len(st.mean))
            c.mean[:] = st.mean
            c.var[:] = st.var
            copies.append(c)
        bn_stats.append(copies)
    heads = [(Tensor(w.data.copy()), Tensor(b.data.copy()))
             for (w, b) in net.heads]
    return PrunedModel(net.config, kernels, tables, masks,
                       bn_gamma, bn_beta, bn_stats, heads)


def pruned_forward(pm: PrunedModel, d: int, x) -> np.ndarray:
    """Eval-mode logits of the pruned model; matches the unpruned network up
    to float reassociation (dropped channels contributed exact zeros)."""
    if not 0 <= d < pm.config.num_domains:
        raise ValueError(f"unknown domain index {d}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    out = Tensor(data)
    for geom, layer in zip(net_geometry(pm.config), pm.config.layers):
        if geom.kind == "pool":
            out = ag.maxpool2d(out, layer.size)
            continue
        ci = geom.conv_index
        gathered = Tensor(out.data[:, pm.index_tables[ci]])
        if geom.masked:
            m = pm.masks[d][geom.masked_index].astype(gathered.dtype)
            gathered = ag.channel_scale(gathered, Tensor(m))
        out = ag.conv2d(gathered, pm.kernels[ci], stride=geom.stride,
                        padding=geom.padding)
        out = ag.batchnorm(out, pm.bn_gamma[d][ci], pm.bn_beta[d][ci],
                           pm.bn_stats[d][ci], train=False)
        out = ag.relu(out)
    flat = ag.reshape(out, (out.shape[0], feature_dim(pm.config)))
    w, b = pm.heads[d]
    return ag.linear(flat, w, b).data


def kernel_weight_count(model) -> int:
    """Total kernel weights, counting compacted shapes for pruned models."""
    return int(sum(k.data.size for k in model.kernels))
