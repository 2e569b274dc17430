"""Cost and quality accounting.

MAC counting covers convolutions (per active input channel) and the linear
head; batch norm, activations, and pooling are excluded, matching the common
MAC-counter convention. Parameters are counted in bits: 32 per float weight
(kernels and the four per-channel batch-norm statistics), 1 per mask switch,
classifier heads excluded. The S-score family rewards low error under
configurable per-domain caps; its constants are data, never hard-coded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model import MultiDomainNet, NetConfig, feature_dim, net_geometry
from .pruner import PrunedModel, union_mask

__all__ = [
    "CostReport",
    "count_macs",
    "count_param_bits",
    "backbone_macs",
    "backbone_param_bits",
    "ScoreInputs",
    "s_score",
    "s_o",
    "s_p",
    "s_e",
    "capped_score_inputs",
    "CellCheck",
    "load_table_fixture",
    "check_table_fixture",
    "fixture_path",
    "structural_params_ratio",
]

FLOAT_BITS = 32
SWITCH_BITS = 1
BN_STATS_PER_CHANNEL = 4  # gamma, beta, running mean, running var


@dataclass
class CostReport:
    macs: int
    flops: int
    param_bits: int
    relative_flops: float
    relative_params: float


def _conv_geoms(config: NetConfig):
    return [g for g in net_geometry(config) if g.kind == "conv"]


def _active_counts(model: Union[MultiDomainNet, PrunedModel], mode: str,
                   domain: Optional[int]) -> dict[int, int]:
    """Active input channels per masked layer index, under the given mode."""
    if mode == "none":
        cfg = model.config
        return {g.masked_index: g.c_in for g in _conv_geoms(cfg) if g.masked}
    if mode == "domain":
        if domain is None:
            raise ValueError("per-domain MAC counting needs a domain index")
        if isinstance(model, PrunedModel):
            return {i: int(m.sum()) for i, m in enumerate(model.masks[domain])}
        return {i: int(m.sum()) for i, m in enumerate(model.frozen_masks(domain))}
    if mode == "union":
        if isinstance(model, PrunedModel):
            geoms = _conv_geoms(model.config)
            return {g.masked_index: len(model.index_tables[g.conv_index])
                    for g in geoms if g.masked}
        return {i: int(u.sum()) for i, u in enumerate(union_mask(model))}
    raise ValueError(f"unknown MAC counting mode {mode!r}")


def _head_macs(config: NetConfig) -> int:
    """Mean per-domain head cost; heads are tiny next to the trunk."""
    f = feature_dim(config)
    return int(round(f * float(np.mean(config.class_counts))))


def _trunk_macs(config: NetConfig, active: dict[int, int]) -> int:
    total = 0
    for g in _conv_geoms(config):
        c_in = active.get(g.masked_index, g.c_in) if g.masked else g.c_in
        total += g.h_out * g.w_out * g.c_out * c_in * g.kernel * g.kernel
    return total


def backbone_macs(config: NetConfig) -> int:
    """Cost of the unmasked shared backbone (all channels active)."""
    return _trunk_macs(config, {}) + _head_macs(config)


def backbone_param_bits(config: NetConfig) -> int:
    """Bits of a single-domain backbone: full kernels plus one BN set."""
    kernel_weights = sum(g.c_out * g.c_in * g.kernel * g.kernel
                         for g in _conv_geoms(config))
    bn_channels = sum(g.c_out for g in _conv_geoms(config))
    return FLOAT_BITS * (kernel_weights + BN_STATS_PER_CHANNEL * bn_channels)


def count_param_bits(model: Union[MultiDomainNet, PrunedModel],
                     include_switches: bool = True) -> int:
    """Model size in bits, excluding classifier heads."""
    cfg = model.config
    kernel_weights = sum(k.data.size for k in model.kernels)
    bn_channels = sum(g.c_out for g in _conv_geoms(cfg))
    bits = FLOAT_BITS * (kernel_weights
                         + cfg.num_domains * BN_STATS_PER_CHANNEL * bn_channels)
    if include_switches:
        if isinstance(model, PrunedModel):
            switch_count = sum(len(m) for m in model.masks[0])
        else:
            switch_count = sum(s.data.size for s in model.switches[0])
        bits += SWITCH_BITS * switch_count * cfg.num_domains
    return bits


def count_macs(model: Union[MultiDomainNet, PrunedModel], mode: str = "union",
               domain: Optional[int] = None) -> CostReport:
    """Multiply-accumulate count for one forward pass plus size accounting.

    ``union`` prices the deployed model (channels any domain uses),
    ``domain`` a single domain's masked path, ``none`` the raw backbone.
    Relative figures normalize by the unmasked single-domain backbone.
    """
    cfg = model.config
    macs = _trunk_macs(cfg, _active_counts(model, mode, domain))
    macs += (feature_dim(cfg) * cfg.class_counts[domain] if mode == "domain"
             else _head_macs(cfg))
    param_bits = count_param_bits(model)
    base_macs = backbone_macs(cfg)
    base_bits = backbone_param_bits(cfg)
    return CostReport(
        macs=macs, flops=2 * macs, param_bits=param_bits,
        relative_flops=(2 * macs) / (2 * base_macs),
        relative_params=param_bits / base_bits)


# ---------------------------------------------------------------------------
# score family


@dataclass
class ScoreInputs:
    """Per-domain errors with their caps: error/max-error in [0,1], positive
    exponents and coefficients."""

    errors: Sequence[float]
    max_errors: Sequence[float]
    gammas: Sequence[float]
    alphas: Sequence[float]

    def validate(self):
        n = len(self.errors)
        if not (len(self.max_errors) == len(self.gammas) == len(self.alphas) == n):
            raise ValueError("ScoreInputs fields must have equal lengths")
        for e in self.errors:
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"error out of [0,1]: {e}")
        if any(g <= 0 for g in self.gammas) or any(a <= 0 for a in self.alphas):
            raise ValueError("gammas and alphas must be positive")
        return self


def s_score(si: ScoreInputs) -> float:
    """Sum over domains of alpha * max(0, max_error - error)^gamma."""
    si.validate()
    total = 0.0
    for e, emax, g, a in zip(si.errors, si.max_errors, si.gammas, si.alphas):
        total += a * max(0.0, emax - e) ** g
    return total


def s_o(s: float, o_rel: float) -> float:
    if o_rel <= 0:
        raise ValueError(f"relative operation count must be positive, got {o_rel}")
    return s / o_rel


def s_p(s: float, p_rel: float) -> float:
    if p_rel <= 0:
        raise ValueError(f"relative parameter count must be positive, got {p_rel}")
    return s / p_rel


def s_e(so: float, sp: float, so_base: float, sp_base: float) -> float:
    if so_base <= 0 or sp_base <= 0:
        raise ValueError("baseline scores must be positive")
    return (so * sp) / (so_base * sp_base)


def capped_score_inputs(baseline_errors: Sequence[float], gamma: float = 2.0,
                        cap: float = 1000.0) -> Callable[[Sequence[float]], ScoreInputs]:
    """Decathlon-style convention: max error is twice the baseline error and
    each domain contributes at most ``cap`` points at zero error."""
    max_errors = [2.0 * e for e in baseline_errors]
    gammas = [gamma] * len(baseline_errors)
    alphas = [cap / (emax ** gamma) for emax in max_errors]

    def make(errors: Sequence[float]) -> ScoreInputs:
        return ScoreInputs(list(errors), list(max_errors), list(gammas),
                           list(alphas)).validate()

    return make


# ---------------------------------------------------------------------------
# published-table fixtures


@dataclass
class CellCheck:
    row: str
    cell: str
    computed: float
    published: float
    tolerance: float

    @property
    def delta(self) -> float:
        return self.computed - self.published

    @property
    def ok(self) -> bool:
        return abs(self.delta) <= self.tolerance


def fixture_path(name: str) -> str:
    """Resolve a packaged fixture by short name ('decathlon', 'i2s', 'wrn')."""
    files = {"decathlon": "decathlon_scores.json",
             "i2s": "imagenet_to_sketch_scores.json",
             "wrn": "wrn28_layers.json"}
    if name not in files:
        raise ValueError(f"unknown fixture {name!r}; expected one of {sorted(files)}")
    return str(resources.files("mdlprune.fixtures").joinpath(files[name]))


def load_table_fixture(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        fix = json.load(fh)
    for key in ("rows", "baseline_row"):
        if key not in fix:
            raise ValueError(f"fixture missing {key!r}")
    return fix


def check_table_fixture(fix: dict) -> list[CellCheck]:
    """Recompute every derived cell of a published table.

    S_O and S_P are recomputed from each row's (S, FLOP, Params) at a +-1
    tolerance. S_E is recomputed from its defining inputs, the row's S_O and
    S_P cells against the baseline row's, at +-0.01: the published tables
    derive S_E from the rounded S_O/S_P columns, so recomputing it from raw
    S/FLOP/Params drifts past the tolerance on rows whose S_O cell itself
    differs by one unit. Every delta is returned; nothing is absorbed.
    """
    rows = {r["name"]: r for r in fix["rows"]}
    base = rows[fix["baseline_row"]]
    so_tol = float(fix.get("so_sp_tolerance", 1.0))
    se_tol = float(fix.get("se_tolerance", 0.01))
    checks = []
    for r in fix["rows"]:
        checks.append(CellCheck(r["name"], "s_o", s_o(r["s"], r["flops_rel"]),
                                r["s_o"], so_tol))
        checks.append(CellCheck(r["name"], "s_p", s_p(r["s"], r["params_rel"]),
                                r["s_p"], so_tol))
        checks.append(CellCheck(
            r["name"], "s_e",
            s_e(r["s_o"], r["s_p"], base["s_o"], base["s_p"]),
            r["s_e"], se_tol))
    recompute = fix.get("s_recompute")
    if recompute:
        base_err_row = rows[recompute["max_error_row"]]
        baseline_errors = [1.0 - a / 100.0 for a in base_err_row["accuracy"]]
        make = capped_score_inputs(baseline_errors,
                                   gamma=recompute.get("gamma", 2.0),
                                   cap=recompute.get("cap", 1000.0))
        for name in recompute["rows"]:
            row = rows[name]
            errors = [1.0 - a / 100.0 for a in row["accuracy"]]
            checks.append(CellCheck(
                name, "s_from_accuracies", s_score(make(errors)), row["s"],
                recompute.get("tolerance", 5.0)))
    return checks


def structural_params_ratio(layers: Sequence[dict], bn_channels: Sequence[int],
                            num_domains: int) -> float:
    """Parameter-bit ratio of a switch-adapted model over its backbone, from a
    structural layer listing (same accounting as count_param_bits)."""
    kernel_weights = sum(l["c_in"] * l["c_out"] * l["k"] * l["k"] for l in layers)
    bn_bits = FLOAT_BITS * BN_STATS_PER_CHANNEL * sum(bn_channels)
    switches = sum(l["c_in"] for l in layers)
    backbone = FLOAT_BITS * kernel_weights + bn_bits
    model = (FLOAT_BITS * kernel_weights + num_domains * bn_bits
             + SWITCH_BITS * switches * num_domains)
    return model / backbone
