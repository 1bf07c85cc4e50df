"""Command-line entry point.

Subcommands: gen-data, pretrain, learn-static, eval, tta, ablate, topk-sweep,
fed, comm-report, gradcheck. Each takes --config (JSON) with flag overrides
and writes its artifacts under the configured output directory. Exit codes:
0 success, 2 configuration/usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import experiments as xp
from . import fedsim
from . import memory as mem
from . import metrics
from . import synthdata as sd
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigInvalid, SegmemError

CHECKPOINT_NAME = "checkpoint.json"
BANK_NAME = "static_bank.json"


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["output_dir"] = args.out
    if getattr(args, "supervision", None) is not None:
        updates["supervision_fraction"] = args.supervision
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(cfg: ExperimentConfig) -> bb.ModelParams:
    return xp.load_frozen(_out_dir(cfg) / CHECKPOINT_NAME)


def _static_entries(cfg: ExperimentConfig) -> list[mem.MemoryEntry]:
    bank = mem.load_bank(_out_dir(cfg) / BANK_NAME)
    return bank.static_entries


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    splits = xp.build_splits(cfg)
    sd.dump_jsonl(splits.pretrain_base, out / "pretrain_base.jsonl")
    sd.dump_jsonl(splits.adapt_train, out / "adapt_train.jsonl")
    sd.dump_jsonl(splits.adapt_val, out / "adapt_val.jsonl")
    sd.dump_jsonl(splits.adapt_test, out / "adapt_test.jsonl")
    sd.dump_jsonl(splits.shifted_test, out / "shifted_test.jsonl")
    for i, shard in enumerate(splits.federated_shards):
        sd.dump_jsonl(shard, out / f"shard_{i}.jsonl")
    print(f"wrote corpus splits to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    splits = xp.build_splits(cfg)
    params = xp.pretrain_backbone(cfg, splits)
    bb.save_checkpoint(params, out / CHECKPOINT_NAME)
    print(f"wrote frozen checkpoint ({params.param_count()} params) to {out / CHECKPOINT_NAME}")
    return 0


def cmd_learn_static(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    train = xp.subsample(splits.adapt_train, cfg.supervision_fraction, cfg.seed)
    result = mem.learn_static(
        params, train, cfg.static.n_entries, cfg.static.optim(), cfg.seed, steps=cfg.static.steps
    )
    bank = xp.bank_with_static(result.entries, cfg.working.capacity_b)
    mem.save_bank(bank, out / BANK_NAME)
    xp.write_csv(
        out / "static_curve.csv",
        ["step", "loss"],
        [[i, v] for i, v in enumerate(result.curve)],
        cfg,
        cfg.seed,
    )
    print(f"learned {len(result.entries)} static entries -> {out / BANK_NAME}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    entries = _static_entries(cfg)
    records = xp.evaluate_entries(params, entries, splits.adapt_test)
    xp.write_csv(
        out / "eval.csv",
        ["sample_id", "dice", "hd95"],
        [[r.sample_id, r.dice, r.hd95] for r in records],
        cfg,
        cfg.seed,
    )
    print(f"mean dice {xp.mean_dice(records):.4f} over {len(records)} samples")
    return 0


def cmd_tta(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    records = xp.run_tta(cfg, params, _static_entries(cfg), splits.shifted_test)
    xp.write_csv(
        out / "tta.csv",
        ["index", "s_star", "mode", "k", "dice", "action", "alpha"],
        xp.tta_rows(records),
        cfg,
        cfg.seed,
    )
    mean = float(np.mean([r.dice for r in records]))
    print(f"tta mean dice {mean:.4f} over {len(records)} samples")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    arms = xp.run_ablation(cfg, params, _static_entries(cfg), splits.shifted_test)
    rows = [
        [arm, cfg.seed, float(np.mean([r.dice for r in records]))]
        for arm, records in arms.items()
    ]
    xp.write_csv(out / "ablation.csv", ["arm", "seed", "dice"], rows, cfg, cfg.seed)
    for arm, seed, d in rows:
        print(f"{arm}: dice {d:.4f}")
    return 0


def cmd_topk_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    in_stream = sd.generate(
        sd.TaskSpec(cfg.data.adapt_task), cfg.data.base_domain, cfg.data.n_shifted, cfg.seed * 1000 + 700
    )
    rows = xp.run_topk_sweep(cfg, params, _static_entries(cfg), in_stream, splits.shifted_test)
    xp.write_csv(out / "topk.csv", ["k", "domain", "seed", "dice"], rows, cfg, cfg.seed)
    for k, domain, seed, d in rows:
        print(f"k={k} {domain}: dice {d:.4f}")
    return 0


def cmd_fed(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    params = _checkpoint(cfg)
    splits = xp.build_splits(cfg)
    reports, entries = xp.run_fed(cfg, params, splits)
    xp.write_csv(
        out / "fed.csv",
        ["round", "client", "dice", "bytes_up", "bytes_down", "cumulative_bytes"],
        xp.fed_rows(reports),
        cfg,
        cfg.seed,
    )
    bank = xp.bank_with_static(entries, cfg.working.capacity_b)
    mem.save_bank(bank, out / "fed_bank.json")
    print(f"final global dice {reports[-1].global_dice:.4f} after {len(reports)} rounds")
    return 0


def cmd_comm_report(args) -> int:
    report = fedsim.comm_report(args.memory_params, args.backbone_params, args.bytes_per_param)
    print(json.dumps(dataclasses.asdict(report), indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .experiments import gradcheck_report

    seed = args.seed if args.seed is not None else 0
    report = gradcheck_report(seed)
    worst = 0.0
    for name, err in report.items():
        print(f"{name}: max_rel_err {err:.3e}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (threshold 1e-4)")
    return 0 if worst <= 1e-4 else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segmem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--supervision", type=float, default=None)

    for name, fn in [
        ("gen-data", cmd_gen_data),
        ("pretrain", cmd_pretrain),
        ("learn-static", cmd_learn_static),
        ("eval", cmd_eval),
        ("tta", cmd_tta),
        ("ablate", cmd_ablate),
        ("topk-sweep", cmd_topk_sweep),
        ("fed", cmd_fed),
    ]:
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("comm-report")
    p.add_argument("--memory-params", type=int, required=True)
    p.add_argument("--backbone-params", type=int, required=True)
    p.add_argument("--bytes-per-param", type=int, default=4)
    p.set_defaults(fn=cmd_comm_report)

    p = sub.add_parser("gradcheck")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the contract
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SegmemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
