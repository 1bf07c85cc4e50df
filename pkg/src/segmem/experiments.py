"""Experiment drivers: supervision sweep, TTA streams, ablations, top-k
sweep, federated runs, and the CSV conventions they share.

Every CSV gets a header row and a trailing comment line recording the config
hash and seed, so output files are self-describing and reproducible runs are
byte-comparable.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import controller as ctl
from . import fedsim
from . import memory as mem
from . import metrics
from . import synthdata as sd
from .config import ExperimentConfig, config_hash
from .errors import MissingCheckpoint


def write_csv(path: str | Path, header: list[str], rows: list[list], cfg: ExperimentConfig, seed: int) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else f"{v:.12g}" if isinstance(v, float) else str(v) for v in row))
    lines.append(f"# config_hash={config_hash(cfg)} seed={seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def build_splits(cfg: ExperimentConfig) -> sd.Splits:
    return sd.make_splits(cfg.data, cfg.seed)


def pretrain_backbone(cfg: ExperimentConfig, splits: sd.Splits) -> bb.ModelParams:
    params = bb.ModelParams.initialize(cfg.model_init_seed)
    params, _ = bb.pretrain(params, splits.pretrain_base, cfg.pretrain)
    return params


def load_frozen(path: str | Path) -> bb.ModelParams:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    params = bb.load_checkpoint(path)
    if not params.frozen:
        params.freeze()
    return params


def evaluate_entries(params: bb.ModelParams, entries: list[mem.MemoryEntry], samples) -> list[metrics.EvalRecord]:
    tokens = [e.token for e in entries]
    out = []
    for rec in samples:
        probs, _ = bb.predict(params, rec.image, tokens)
        pred = metrics.binarize(probs)
        out.append(metrics.EvalRecord(rec.sample_id, metrics.dice(pred, rec.mask), metrics.hd95(pred, rec.mask)))
    return out


def mean_dice(records: list[metrics.EvalRecord]) -> float:
    return float(np.mean([r.dice for r in records]))


def subsample(samples: list, fraction: float, seed: int) -> list:
    if fraction >= 1.0:
        return list(samples)
    rng = np.random.default_rng(seed)
    n = int(round(fraction * len(samples)))
    picks = sorted(rng.choice(len(samples), size=max(1, n), replace=False))
    return [samples[i] for i in picks]


def bank_with_static(entries: list[mem.MemoryEntry], capacity: int) -> mem.MemoryBank:
    bank = mem.MemoryBank(capacity_b=capacity)
    bank.add_static(entries)
    return bank


# --- experiment runners ---


def run_supervision_experiment(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    splits: sd.Splits,
    fractions: list[float] | None = None,
    seeds: list[int] | None = None,
) -> list[list]:
    """Rows (fraction, seed, dice, hd95): static memory learned on a seeded
    subsample of adapt_train, scored on adapt_test."""
    fractions = fractions or [cfg.supervision_fraction]
    seeds = seeds or [cfg.seed]
    rows = []
    for fraction in fractions:
        for seed in seeds:
            train = subsample(splits.adapt_train, fraction, seed)
            result = mem.learn_static(
                params, train, cfg.static.n_entries, cfg.static.optim(), seed, steps=cfg.static.steps
            )
            records = evaluate_entries(params, result.entries, splits.adapt_test)
            rows.append([
                fraction,
                seed,
                mean_dice(records),
                float(np.mean([r.hd95 for r in records])),
            ])
    return rows


def _stream_records(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    bank: mem.MemoryBank,
    stream,
    updates_enabled: bool,
) -> list[ctl.TtaRecord]:
    records, _ = ctl.tta_stream(
        params, bank, stream, sd.oracle_correct, cfg.controller, cfg.working,
        updates_enabled=updates_enabled,
    )
    return records


def run_tta(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    static_entries: list[mem.MemoryEntry],
    stream,
    updates_enabled: bool = True,
) -> list[ctl.TtaRecord]:
    bank = bank_with_static([_clone_entry(e) for e in static_entries], cfg.working.capacity_b)
    return _stream_records(cfg, params, bank, stream, updates_enabled)


def _clone_entry(e: mem.MemoryEntry) -> mem.MemoryEntry:
    return mem.MemoryEntry(
        token=e.token.copy(), embedding=e.embedding.copy(), kind=e.kind,
        source_id=e.source_id, hits=e.hits, last_used=e.last_used, ema_count=e.ema_count,
    )


ABLATION_ARMS = ("static+wm", "static-only", "wm-only")


def run_ablation(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    static_entries: list[mem.MemoryEntry],
    stream,
) -> dict[str, list[ctl.TtaRecord]]:
    """Three arms over the identical stream: full system, frozen bank, and
    working memory with a single random-pair filler standing in for static."""
    filler = mem.random_pair_entry(params, seed=0, source_id="wm-only-filler")
    arms = {
        "static+wm": ([_clone_entry(e) for e in static_entries], True),
        "static-only": ([_clone_entry(e) for e in static_entries], False),
        "wm-only": ([filler], True),
    }
    out = {}
    for name, (entries, updates) in arms.items():
        bank = bank_with_static(entries, cfg.working.capacity_b)
        out[name] = _stream_records(cfg, params, bank, stream, updates)
    return out


def run_topk_sweep(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    static_entries: list[mem.MemoryEntry],
    in_stream,
    shifted_stream,
    ks: list[int] | None = None,
) -> list[list]:
    """Rows (k, domain, seed, dice) for in-domain and shifted TTA streams."""
    ks = list(ks or cfg.topk_values)
    rows = []
    for k in ks:
        k_cfg = replace(cfg.controller, k_min=k, k_max=k)
        for domain, stream in (("in-domain", in_stream), ("shifted", shifted_stream)):
            bank = bank_with_static([_clone_entry(e) for e in static_entries], cfg.working.capacity_b)
            records, _ = ctl.tta_stream(
                params, bank, stream, sd.oracle_correct, k_cfg, cfg.working, updates_enabled=True
            )
            rows.append([k, domain, cfg.seed, float(np.mean([r.dice for r in records]))])
    return rows


def tta_rows(records: list[ctl.TtaRecord]) -> list[list]:
    return [
        [r.index, r.s_star, r.mode, r.k_working, r.dice, r.action, r.alpha]
        for r in records
    ]


def run_fed(
    cfg: ExperimentConfig,
    params: bb.ModelParams,
    splits: sd.Splits,
) -> tuple[list[fedsim.RoundReport], list[mem.MemoryEntry]]:
    clients = fedsim.make_clients(splits.federated_shards, cfg.seed)
    pooled = [rec for c in clients for rec in c.shard]
    init = mem.init_pseudo_obs(pooled, cfg.static.n_entries, cfg.seed)
    return fedsim.fed_run(
        clients, cfg.fed.rounds, cfg.fed.local_steps, params, cfg.fed.optim(), init
    )


def fed_rows(reports: list[fedsim.RoundReport]) -> list[list]:
    rows = []
    cumulative = 0
    for rep in reports:
        cumulative += rep.bytes_up + rep.bytes_down
        for client_id, d in sorted(rep.per_client_dice.items()):
            rows.append([rep.round_index, client_id, d, rep.bytes_up, rep.bytes_down, cumulative])
        rows.append([rep.round_index, "GLOBAL", rep.global_dice, rep.bytes_up, rep.bytes_down, cumulative])
    return rows


def gradcheck_report(seed: int = 0) -> dict[str, float]:
    """Finite-difference error per op plus the end-to-end loss gradient with
    respect to a pseudo-observation; the acceptance gate for autodiff."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}

    def check(name, f, x):
        report[name] = ad.grad_check(f, x)

    m, n = 5, 4
    a = rng.normal(size=(m, n))
    b = rng.normal(size=(n, m))
    w = rng.normal(size=(m, n))

    def rand_like(tape, shape):
        return tape.leaf(np.random.default_rng(seed + 1).normal(size=shape))

    check("matmul", lambda x: ad.sum_all(ad.mul_elem(x @ x.tape.leaf(b), rand_like(x.tape, (m, m)))), a)
    check("add", lambda x: ad.sum_all(ad.mul_elem(x + x.tape.leaf(w), rand_like(x.tape, (m, n)))), a)
    check("sub", lambda x: ad.sum_all(ad.mul_elem(x - x.tape.leaf(w), rand_like(x.tape, (m, n)))), a)
    check("mul_elem", lambda x: ad.sum_all(ad.mul_elem(x * x.tape.leaf(w), rand_like(x.tape, (m, n)))), a)
    check("div_elem", lambda x: ad.sum_all(ad.mul_elem(ad.div_elem(x, x.tape.leaf(np.abs(w) + 1.0)), rand_like(x.tape, (m, n)))), a)
    check("scale", lambda x: ad.sum_all(ad.mul_elem(ad.scale(x, -1.7), rand_like(x.tape, (m, n)))), a)
    check("relu", lambda x: ad.sum_all(ad.mul_elem(ad.relu(x), rand_like(x.tape, (m, n)))), a)
    check("sigmoid", lambda x: ad.sum_all(ad.mul_elem(ad.sigmoid(x), rand_like(x.tape, (m, n)))), a)
    check("log", lambda x: ad.sum_all(ad.mul_elem(ad.log(x), rand_like(x.tape, (m, n)))), np.abs(a) + 0.5)
    check("softmax_rows", lambda x: ad.sum_all(ad.mul_elem(ad.softmax_rows(x), rand_like(x.tape, (m, n)))), a)
    check("mean_all", lambda x: ad.mean_all(x), a)
    check("sum_all", lambda x: ad.sum_all(x), a)
    check("concat_rows", lambda x: ad.sum_all(ad.mul_elem(ad.concat_rows([x, x.tape.leaf(w)]), rand_like(x.tape, (2 * m, n)))), a)
    check("slice_rows", lambda x: ad.sum_all(ad.mul_elem(ad.slice_rows(x, 1, 4), rand_like(x.tape, (3, n)))), a)
    check("transpose2d", lambda x: ad.sum_all(ad.mul_elem(ad.transpose2d(x), rand_like(x.tape, (n, m)))), a)
    check("reshape", lambda x: ad.sum_all(ad.mul_elem(ad.reshape(x, (n, m)), rand_like(x.tape, (n, m)))), a)
    check("broadcast_add_row", lambda x: ad.sum_all(ad.mul_elem(ad.broadcast_add_row(x, x.tape.leaf(w[:1])), rand_like(x.tape, (m, n)))), a)
    check("patchify2d", lambda x: ad.sum_all(ad.mul_elem(ad.patchify2d(x, 4), rand_like(x.tape, (64, 16)))), rng.normal(size=(32, 32)))
    check("unpatchify2d", lambda x: ad.sum_all(ad.mul_elem(ad.unpatchify2d(x, 4, 32, 32), rand_like(x.tape, (32, 32)))), rng.normal(size=(64, 16)))

    report["end_to_end"] = end_to_end_gradcheck(seed)
    return report


def gradcheck_params(seed: int) -> bb.ModelParams:
    """Weights at a trained-like scale. The init distribution is far too
    small for finite differences to see the memory pathway (five weight
    factors deep), so the autodiff check runs at a generic healthy point."""
    params = bb.ModelParams.initialize(seed)
    for name, arr in params.named_arrays():
        if not name.endswith("_b"):
            params.arrays[name] = arr * 3.0
    return params.freeze()


def end_to_end_gradcheck(seed: int, eps: float = 1e-4) -> float:
    """FD check of d(loss)/d(pseudo-observation) through the memory encoder
    and the conditioned backbone.

    The step defaults to 1e-4: at 1e-5 the f64 rounding floor of the loss
    (~ulp/2eps) swamps coordinates whose gradient cancels to ~1e-9, while
    steps above 1e-4 start crossing relu kinks. 1e-4 certifies both regimes.
    """
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    params = gradcheck_params(seed)
    query = rng.uniform(0.0, 1.0, (bb.IMAGE_SIZE, bb.IMAGE_SIZE))
    gt = (rng.uniform(size=(bb.IMAGE_SIZE, bb.IMAGE_SIZE)) < 0.3).astype(np.float64)
    z0 = np.concatenate([
        rng.normal(size=(bb.IMAGE_SIZE * bb.IMAGE_SIZE,)),
        rng.normal(size=(bb.IMAGE_SIZE * bb.IMAGE_SIZE,)),
    ])

    def f(z):
        tape = z.tape
        w = {name: tape.leaf(arr) for name, arr in params.named_arrays()}
        flat = ad.reshape(z, (2 * bb.IMAGE_SIZE, bb.IMAGE_SIZE))
        img = ad.slice_rows(flat, 0, bb.IMAGE_SIZE)
        logits = ad.slice_rows(flat, bb.IMAGE_SIZE, 2 * bb.IMAGE_SIZE)
        token = bb.encode_memory_t(tape, w, img, ad.sigmoid(logits))
        out_logits, obj, _ = bb.segment_t(tape, w, tape.leaf(query), [token])
        return bb.loss_t(tape, out_logits, obj, gt)

    return ad.grad_check(f, z0, eps=eps)
