"""Simultaneous multi-domain training.

One round-robin epoch runs a full pass over every domain in a seeded shuffled
order. Each batch optimizes the total objective (cross-entropy of the batch
domain + budget penalties of all domains + the sharing penalty over all
domains' masks), steps the batch domain's classifier/BN with SGD-momentum and
every domain's switches with Adam, then applies the multiplier ascent rule.
Masks are snapped to binary when training finishes.
"""

from __future__ import annotations

import json
import queue
import threading
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, backward, softmax_cross_entropy
from .data import Dataset, augment
from .losses import (BudgetState, ConstraintValues, SharingState, budget_loss,
                     sharing_gap, sharing_loss, total_loss, update_multipliers)
from .model import ConvSpec, MultiDomainNet, NetConfig, total_switches
from .optim import AdamState, SgdState, adam_step, sgd_momentum_step
from .rng import Rng, derive_seed

__all__ = ["TrainConfig", "RunRecord", "TrainerState", "train",
           "round_robin_epoch", "evaluate", "pretrain_backbone"]

_ORDER_TAG = 0x524F4245
_SHUF_TAG = 0x53485546
_AUG_SEED_TAG = 0x41475345


@dataclass
class TrainConfig:
    """Schedule and loss wiring for one training run.

    The defaults are the desk-scale schedule; ``decay_epochs`` holds 0-based
    epoch indices at whose start both learning rates are multiplied by
    ``decay_factor``.
    """

    epochs: int = 20
    batch_size: int = 32
    classifier_lr: float = 1e-3
    mask_lr: float = 1e-4
    decay_epochs: tuple = (15,)
    decay_factor: float = 0.1
    momentum: float = 0.9
    budget: float = 1.0
    sharing: str = "none"
    lambda_ps_mode: str = "learned"
    lambda_ps_value: float = 0.0
    eta_lambda: float = 0.1
    budget_aggregate: str = "sum"
    mask_mean_scope: str = "per_layer"
    seed: int = 0
    prefetch: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("train.epochs: must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size: must be >= 1")
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError(f"train.budget: must be in [0,1], got {self.budget}")
        if self.sharing not in ("none", "intersection", "union", "jaccard"):
            raise ValueError(f"train.sharing: unknown kind {self.sharing!r}")
        if self.lambda_ps_mode not in ("fixed", "learned"):
            raise ValueError(
                f"train.lambda_ps_mode: must be fixed|learned, got {self.lambda_ps_mode!r}")
        if self.lambda_ps_value < 0:
            raise ValueError("train.lambda_ps_value: must be >= 0")
        if self.budget_aggregate not in ("sum", "mean"):
            raise ValueError("train.budget_aggregate: must be sum|mean")
        if self.mask_mean_scope not in ("per_layer", "global"):
            raise ValueError("train.mask_mean_scope: must be per_layer|global")
        decays = tuple(self.decay_epochs)
        if list(decays) != sorted(set(decays)):
            raise ValueError("train.decay_epochs: must be strictly increasing")
        if decays and (decays[0] < 1 or decays[-1] >= max(self.epochs, 1)):
            raise ValueError("train.decay_epochs: must lie inside (0, epochs)")
        if self.prefetch < 0:
            raise ValueError("train.prefetch: must be >= 0")
        return self

    @classmethod
    def paper_schedule(cls, **overrides) -> "TrainConfig":
        """The full-scale schedule: 60 epochs with a x0.1 decay at epoch 45."""
        base = dict(epochs=60, decay_epochs=(45,))
        base.update(overrides)
        return cls(**base).validate()


@dataclass
class RunRecord:
    """Structured trace of one run: one entry per (epoch, domain)."""

    meta: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "meta", **self.meta}, sort_keys=True)]
        for e in self.entries:
            lines.append(json.dumps({"type": "epoch", **e}, sort_keys=True))
        lines.append(json.dumps({"type": "final", **self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        rec = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "meta":
                rec.meta = obj
            elif kind == "epoch":
                rec.entries.append(obj)
            elif kind == "final":
                rec.final = obj
        return rec


class TrainerState:
    """Optimizer slots, multiplier states, and current learning rates."""

    def __init__(self, net: MultiDomainNet, cfg: TrainConfig):
        self.cfg = cfg
        n = net.config.num_domains
        self.classifier_params = [net.head_params(d) + net.bn_params(d)
                                  for d in range(n)]
        self.sgd = [SgdState(self.classifier_params[d]) for d in range(n)]
        self.switch_params = net.all_switch_params()
        self.adam = AdamState(self.switch_params)
        self.budget_states = [
            BudgetState(cfg.budget, ascent_lr=cfg.eta_lambda) for _ in range(n)]
        weight = cfg.lambda_ps_value if cfg.lambda_ps_mode == "fixed" else 0.0
        self.sharing_state = SharingState(
            kind=cfg.sharing, weight=weight, mode=cfg.lambda_ps_mode,
            total_switches=total_switches(net.config), ascent_lr=cfg.eta_lambda)
        self.classifier_lr = cfg.classifier_lr
        self.mask_lr = cfg.mask_lr
        self.epoch = 0
        self._warned_single_domain = False

    def apply_decay(self):
        self.classifier_lr *= self.cfg.decay_factor
        self.mask_lr *= self.cfg.decay_factor


def _batches(ds: Dataset, order: np.ndarray, batch_size: int):
    for start in range(0, len(ds), batch_size):
        sel = order[start:start + batch_size]
        yield ds.images[sel], ds.labels[sel]


def _prefetched(gen, depth: int):
    """Pull batches ahead of the training loop through a bounded FIFO queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        for item in gen:
            q.put(item)
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()


def _grad_arrays(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params]


def _zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.zero_grad()


def _mask_stats(net: MultiDomainNet, scope: str) -> dict:
    """Tape-free snapshot of per-domain mask means and the union fraction."""
    n = net.config.num_domains
    per_domain = []
    union_active = 0
    union_total = 0
    per_layer_union = []
    binaries = [[(s.data > net.config.tau) for s in net.switches[d]]
                for d in range(n)]
    layers = len(binaries[0]) if n else 0
    for layer in range(layers):
        u = binaries[0][layer].copy()
        for d in range(1, n):
            u |= binaries[d][layer]
        per_layer_union.append(float(u.mean()))
        union_active += int(u.sum())
        union_total += u.size
    for d in range(n):
        if scope == "per_layer":
            per_domain.append(float(np.mean([b.mean() for b in binaries[d]])))
        else:
            per_domain.append(float(np.concatenate(binaries[d]).mean()))
    return {
        "mask_means": per_domain,
        "union_fraction": union_active / max(union_total, 1),
        "sparsity": float(np.mean([1.0 - f for f in per_layer_union])) if per_layer_union else 0.0,
    }


def _train_step(net: MultiDomainNet, state: TrainerState, d: int,
                images: np.ndarray, labels: np.ndarray) -> dict:
    cfg = state.cfg
    n = net.config.num_domains
    with Tape() as tape:
        masks_all = [net.binarized_masks(dd) for dd in range(n)]
        logits = net.forward(d, Tensor(images), train=True, masks=masks_all[d])
        ce = softmax_cross_entropy(logits, labels)
        means = [net.mask_mean(dd, masks_all[dd], scope=cfg.mask_mean_scope)
                 for dd in range(n)]
        lb = budget_loss(means[0], state.budget_states[0])
        for dd in range(1, n):
            lb = ag.add(lb, budget_loss(means[dd], state.budget_states[dd]))
        if cfg.budget_aggregate == "mean" and n > 1:
            lb = ag.affine(lb, 1.0 / n, 0.0)
        if state.sharing_state.kind != "none" and n < 2:
            if not state._warned_single_domain:
                warnings.warn("sharing loss needs >= 2 domains; skipping it")
                state._warned_single_domain = True
            lps = Tensor(0.0)
        elif state.sharing_state.kind != "none":
            flat = [ag.concat(masks_all[dd]) for dd in range(n)]
            lps = sharing_loss(flat, state.sharing_state, state.budget_states[0])
        else:
            lps = Tensor(0.0)
        loss = total_loss(ce, lb, lps)
        backward(loss, tape)

    sgd_momentum_step(state.classifier_params[d],
                      _grad_arrays(state.classifier_params[d]),
                      state.sgd[d], state.classifier_lr, cfg.momentum)
    adam_step(state.switch_params, _grad_arrays(state.switch_params),
              state.adam, state.mask_lr)
    _zero_grads(state.classifier_params[d])
    _zero_grads(state.switch_params)

    mean_vals = [float(m.data) for m in means]
    gap = None
    if state.sharing_state.kind != "none" and n >= 2:
        bins = [np.concatenate([(s.data > net.config.tau).astype(np.float64)
                                for s in net.switches[dd]]) for dd in range(n)]
        uni = bins[0].copy()
        inter = bins[0].copy()
        for b in bins[1:]:
            uni = uni + b - uni * b
            inter = inter * b
        gap = sharing_gap(mean_vals, float(uni.sum()), float(inter.sum()),
                          state.sharing_state, cfg.budget,
                          state.sharing_state.total_switches)
    update_multipliers(state.budget_states, state.sharing_state,
                       ConstraintValues([m - cfg.budget for m in mean_vals], gap))

    preds = logits.data.argmax(axis=1)
    return {
        "ce": float(ce.data), "budget": float(lb.data),
        "sharing": float(lps.data), "total": float(loss.data),
        "correct": int((preds == labels).sum()), "count": len(labels),
    }


def round_robin_epoch(net: MultiDomainNet, datasets: Sequence[Dataset],
                      state: TrainerState) -> list[dict]:
    """One full epoch over every domain, in a seeded shuffled domain order."""
    cfg = state.cfg
    n = net.config.num_domains
    if len(datasets) != n:
        raise ValueError(f"expected {n} datasets, got {len(datasets)}")
    for d, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ValueError(f"domain {d}: empty dataset")
    order = Rng(cfg.seed, _ORDER_TAG, state.epoch).permutation(n)
    entries = []
    for d in (int(i) for i in order):
        ds = datasets[d]
        sample_order = Rng(cfg.seed, _SHUF_TAG, state.epoch, d).permutation(len(ds))
        totals = {"ce": 0.0, "budget": 0.0, "sharing": 0.0, "total": 0.0,
                  "correct": 0, "count": 0, "batches": 0}

        def gen():
            for bi, (images, labels) in enumerate(
                    _batches(ds, sample_order, cfg.batch_size)):
                aug_seed = derive_seed(cfg.seed, _AUG_SEED_TAG, state.epoch, d, bi)
                yield augment(images, ds.mirror, ds.crop, aug_seed), labels

        batches = _prefetched(gen(), cfg.prefetch) if cfg.prefetch > 0 else gen()
        for images, labels in batches:
            step = _train_step(net, state, d, images, labels)
            for k in ("ce", "budget", "sharing", "total"):
                totals[k] += step[k]
            totals["correct"] += step["correct"]
            totals["count"] += step["count"]
            totals["batches"] += 1
        stats = _mask_stats(net, cfg.mask_mean_scope)
        b = max(totals["batches"], 1)
        entries.append({
            "epoch": state.epoch, "domain": d,
            "ce": totals["ce"] / b, "budget_loss": totals["budget"] / b,
            "sharing_loss": totals["sharing"] / b, "total": totals["total"] / b,
            "train_acc": totals["correct"] / max(totals["count"], 1),
            "mask_means": stats["mask_means"],
            "union_fraction": stats["union_fraction"],
            "sparsity": stats["sparsity"],
            "multipliers": [bs.multiplier for bs in state.budget_states],
            "sharing_weight": state.sharing_state.weight,
        })
    state.epoch += 1
    return entries


def train(net: MultiDomainNet, datasets: Sequence[Dataset],
          cfg: TrainConfig) -> tuple[MultiDomainNet, RunRecord]:
    """Run the configured number of round-robin epochs, then freeze masks."""
    cfg.validate()
    record = RunRecord(meta={
        "epochs": cfg.epochs, "budget": cfg.budget, "sharing": cfg.sharing,
        "lambda_ps_mode": cfg.lambda_ps_mode, "seed": cfg.seed,
        "num_domains": net.config.num_domains,
        "backbone_checksum": net.backbone_checksum(),
    })
    if cfg.epochs == 0:
        return net, record
    state = TrainerState(net, cfg)
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            state.apply_decay()
        record.entries.extend(round_robin_epoch(net, datasets, state))
    net.freeze_masks()
    stats = _mask_stats(net, cfg.mask_mean_scope)
    record.final = {
        "mask_means": stats["mask_means"],
        "union_fraction": stats["union_fraction"],
        "sparsity": stats["sparsity"],
        "multipliers": [bs.multiplier for bs in state.budget_states],
        "sharing_weight": state.sharing_state.weight,
        "backbone_checksum": net.backbone_checksum(),
    }
    return net, record


def evaluate(net: MultiDomainNet, dataset: Dataset, d: int,
             batch_size: int = 128) -> float:
    """Top-1 accuracy over the dataset in eval mode (single center view)."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = net.forward(d, Tensor(images), train=False)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def pretrain_backbone(config: NetConfig, dataset: Dataset, epochs: int = 5,
                      lr: float = 1e-2, momentum: float = 0.9,
                      seed: int = 0) -> tuple[list[np.ndarray], float]:
    """Train an unmasked single-domain copy of the backbone.

    Returns the learned kernels (they become the frozen shared weights of the
    multi-domain net) and the final train-split accuracy.
    """
    layers = []
    for layer in config.layers:
        if layer.kind == "conv":
            layers.append(ConvSpec(layer.out_channels, layer.kernel,
                                   layer.stride, layer.padding, masked=False))
        else:
            layers.append(layer)
    solo = NetConfig(layers=layers, num_domains=1,
                     class_counts=[dataset.classes],
                     in_channels=config.in_channels,
                     image_size=config.image_size, tau=config.tau)
    net = MultiDomainNet.build(solo, seed=seed)
    for k in net.kernels:
        k.requires_grad = True
    params = list(net.kernels) + net.head_params(0) + net.bn_params(0)
    sgd = SgdState(params)
    for epoch in range(epochs):
        order = Rng(seed, _SHUF_TAG, epoch, 0).permutation(len(dataset))
        for images, labels in _batches(dataset, order, 32):
            with Tape() as tape:
                logits = net.forward(0, Tensor(images), train=True)
                loss = softmax_cross_entropy(logits, labels)
                backward(loss, tape)
            sgd_momentum_step(params, _grad_arrays(params), sgd, lr, momentum)
            _zero_grads(params)
    return [k.data.copy() for k in net.kernels], evaluate(net, dataset, 0)
