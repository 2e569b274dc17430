"""Command-line front door: train, prune, eval, report, gradcheck, sweep.

Exit codes: 0 success, 2 config error, 3 state error, 4 integrity error,
5 acceptance/check failure. Every command validates its inputs fully before
touching the filesystem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck as gc
from . import metrics
from .autograd import Tensor
from .config import ConfigError, ExperimentConfig, default_experiment
from .data import concat_datasets, generate_domain
from .model import MultiDomainNet
from .pruner import DegenerateLayerError, prune, pruned_forward, sparsity
from .trainer import evaluate, pretrain_backbone, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_INTEGRITY = 4
EXIT_CHECK = 5


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = default_experiment()
    cfg.apply_overrides(
        budget=getattr(args, "budget", None),
        sharing=getattr(args, "sharing", None),
        lambda_ps=getattr(args, "lambda_ps_mode", None),
        seed=getattr(args, "seed", None),
        epochs=getattr(args, "epochs", None))
    return cfg


def _build_and_train(cfg: ExperimentConfig, quiet: bool = False):
    """Generate data, provision the backbone, train, and evaluate."""
    splits = [generate_domain(spec) for spec in cfg.domains]
    if cfg.backbone.init == "pretrain":
        pre = concat_datasets([generate_domain(s)["train"]
                               for s in cfg.backbone.pretrain_domains])
        kernels, pre_acc = pretrain_backbone(
            cfg.net, pre, epochs=cfg.backbone.pretrain_epochs,
            lr=cfg.backbone.pretrain_lr, seed=cfg.train.seed)
        if not quiet:
            print(f"pretrained backbone: train acc {pre_acc:.3f}")
    else:
        kernels = None
    net = MultiDomainNet.build(cfg.net, seed=cfg.train.seed, kernels=kernels)
    net, record = train(net, [s["train"] for s in splits], cfg.train)
    accs = [evaluate(net, splits[d]["test"], d)
            for d in range(cfg.net.num_domains)]
    record.final["accuracies"] = accs
    if net.frozen:
        # deployed cost: union-mask MACs, pruned-model parameter bits
        cost = metrics.count_macs(net, mode="union")
        record.final["relative_flops"] = cost.relative_flops
        try:
            pruned_cost = metrics.count_macs(prune(net), mode="union")
            record.final["relative_params"] = pruned_cost.relative_params
        except DegenerateLayerError:
            record.final["relative_params"] = cost.relative_params
    record.meta["config"] = cfg.to_dict()
    return net, record, accs


def _write_run(net, record, cfg: ExperimentConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(record.to_jsonl())
    ckpt_path = os.path.join(out_dir, "checkpoint.mdlp")
    ckpt.save_checkpoint(net, ckpt_path, meta={
        "domains": [d.to_dict() for d in cfg.domains],
        "config": cfg.to_dict(),
    })
    return ckpt_path, log_path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    net, record, accs = _build_and_train(cfg)
    ckpt_path, log_path = _write_run(net, record, cfg, args.out)
    mean_acc = float(np.mean(accs)) if accs else 0.0
    print(f"trained {cfg.net.num_domains} domains, budget {cfg.train.budget}, "
          f"sharing {cfg.train.sharing}")
    for d, a in enumerate(accs):
        print(f"  domain {d}: test acc {a:.3f}")
    print(f"  mean acc {mean_acc:.3f}  sparsity {record.final['sparsity']:.3f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_prune(args) -> int:
    net, meta = ckpt.load_checkpoint(args.checkpoint)
    if not isinstance(net, MultiDomainNet):
        print("error: checkpoint already holds a pruned model", file=sys.stderr)
        return EXIT_STATE
    if not net.frozen:
        print("error: masks are not frozen; train to completion first",
              file=sys.stderr)
        return EXIT_STATE
    report = sparsity(net)
    pm = prune(net)
    before = metrics.count_macs(net, mode="union")
    after = metrics.count_macs(pm, mode="union")
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".",
                                   "pruned.mdlp")
    ckpt.save_checkpoint(pm, out, meta=meta)
    print(f"sparsity per layer: {[round(f, 4) for f in report.per_layer]}")
    print(f"mean sparsity: {report.mean:.4f}")
    print(f"union MACs: {before.macs} -> {after.macs}")
    print(f"param bits: {before.param_bits} -> {after.param_bits} "
          f"(relative {after.relative_params:.4f})")
    print(f"pruned checkpoint: {out}")
    return EXIT_OK


def _rebuild_test_sets(meta: dict):
    from .data import DomainSpec
    specs = [DomainSpec.from_dict(d) for d in meta["domains"]]
    return [generate_domain(s)["test"] for s in specs]


def cmd_eval(args) -> int:
    model, meta = ckpt.load_checkpoint(args.checkpoint)
    tests = _rebuild_test_sets(meta)
    domains = (range(len(tests)) if args.domain == "all"
               else [int(args.domain)])
    for d in domains:
        if not 0 <= d < len(tests):
            print(f"error: unknown domain {d}", file=sys.stderr)
            return EXIT_CONFIG
    pm = None
    if args.pruned:
        pm, _ = ckpt.load_checkpoint(args.pruned)
        if isinstance(model, MultiDomainNet):
            for d in domains:
                x = tests[d].images[:16]
                ref = model.forward(d, Tensor(x)).data
                got = pruned_forward(pm, d, x)
                if not np.allclose(ref, got, atol=1e-5):
                    print(f"error: pruned logits diverge on domain {d}",
                          file=sys.stderr)
                    return EXIT_CHECK
    accs = []
    for d in domains:
        if pm is not None:
            correct = 0
            for start in range(0, len(tests[d]), 128):
                batch = tests[d].images[start:start + 128]
                labels = tests[d].labels[start:start + 128]
                correct += int((pruned_forward(pm, d, batch).argmax(axis=1)
                                == labels).sum())
            acc = correct / len(tests[d])
        else:
            acc = evaluate(model, tests[d], d)
        accs.append(acc)
        print(f"domain {d}: accuracy {acc:.4f}")
    print(f"mean accuracy: {float(np.mean(accs)):.4f}")
    return EXIT_OK


def _fixture_paths(arg: str) -> list[str]:
    if arg == "all":
        return [metrics.fixture_path("decathlon"), metrics.fixture_path("i2s")]
    if arg in ("decathlon", "i2s"):
        return [metrics.fixture_path(arg)]
    return [arg]


def cmd_report(args) -> int:
    failed = False
    if args.fixtures:
        for path in _fixture_paths(args.fixtures):
            fix = metrics.load_table_fixture(path)
            checks = metrics.check_table_fixture(fix)
            bad = [c for c in checks if not c.ok]
            print(f"fixture {fix['table']}: {len(checks)} cells, "
                  f"{len(checks) - len(bad)} ok, {len(bad)} failed")
            if args.verbose or bad:
                for c in checks:
                    if args.verbose or not c.ok:
                        mark = "ok " if c.ok else "FAIL"
                        print(f"  [{mark}] {c.row:14s} {c.cell:18s} "
                              f"computed {c.computed:10.3f} published "
                              f"{c.published:10.3f} delta {c.delta:+.4f}")
            failed = failed or bool(bad)
    rows = []
    for path in args.logs or []:
        with open(path, "r", encoding="utf-8") as fh:
            from .trainer import RunRecord
            rec = RunRecord.from_jsonl(fh.read())
        final = rec.final
        accs = final.get("accuracies", [])
        rows.append({
            "run": os.path.basename(os.path.dirname(path)) or path,
            "budget": rec.meta.get("budget"),
            "sharing": rec.meta.get("sharing"),
            "flops_rel": final.get("relative_flops"),
            "params_rel": final.get("relative_params"),
            "sparsity": final.get("sparsity"),
            "mean_acc": float(np.mean(accs)) if accs else None,
        })
    if rows:
        hdr = f"{'run':24s} {'budget':>6s} {'sharing':>12s} {'FLOP':>7s} " \
              f"{'Params':>7s} {'sparsity':>8s} {'acc':>6s}"
        print(hdr)
        for r in rows:
            print(f"{r['run']:24s} {r['budget']:>6.2f} {r['sharing']:>12s} "
                  f"{r['flops_rel']:>7.3f} {r['params_rel']:>7.3f} "
                  f"{r['sparsity']:>8.3f} {r['mean_acc']:>6.3f}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_all(float64=args.f64)
    worst_fail = False
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        note = f"  ({r.note})" if r.note else ""
        print(f"[{mark}] {r.name:28s} max rel err {r.max_rel_error:.3e} "
              f"(tol {r.tolerance:.0e}){note}")
        worst_fail = worst_fail or not r.passed
    return EXIT_CHECK if worst_fail else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    budgets = [float(b) for b in args.budgets.split(",")]
    for b in budgets:
        if not 0.0 <= b <= 1.0:
            raise ConfigError(f"--budgets: {b} outside [0,1]")
    rows = []
    for b in budgets:
        run_cfg = _load_config(args)
        run_cfg.train.budget = b
        run_cfg.validate()
        net, record, accs = _build_and_train(run_cfg, quiet=True)
        out_dir = os.path.join(args.out, f"budget_{b:.2f}")
        _write_run(net, record, run_cfg, out_dir)
        rows.append((b, record.final["relative_flops"],
                     record.final["relative_params"],
                     record.final["sparsity"], float(np.mean(accs))))
    print(f"{'budget':>6s} {'FLOP':>7s} {'Params':>7s} {'sparsity':>8s} {'acc':>6s}")
    for b, fl, pr, sp, acc in rows:
        print(f"{b:>6.2f} {fl:>7.3f} {pr:>7.3f} {sp:>8.3f} {acc:>6.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mdlprune",
        description="Budget-aware multi-domain channel pruning")
    sub = p.add_subparsers(dest="command", required=True)

    def add_overrides(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--budget", type=float, help="budget override in [0,1]")
        sp.add_argument("--sharing",
                        choices=["intersection", "union", "jaccard", "none"])
        sp.add_argument("--lambda-ps-mode", dest="lambda_ps_mode",
                        help="learned or fixed:<value>")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("train", help="train a multi-domain model")
    add_overrides(sp)
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="prune a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--domain", default="all")
    sp.add_argument("--pruned", help="pruned checkpoint to verify and evaluate")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="tabulate runs and check fixtures")
    sp.add_argument("--logs", nargs="*", help="train_log.jsonl paths")
    sp.add_argument("--fixtures",
                    help="fixture file, or builtin name: decathlon|i2s|all")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--f64", action="store_true",
                    help="run in float64 with the tight tolerance")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="train a budget sweep")
    add_overrides(sp)
    sp.add_argument("--budgets", default="1.0,0.75,0.5,0.25")
    sp.add_argument("--out", default="runs/sweep")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DegenerateLayerError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
