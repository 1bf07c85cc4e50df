"""Routing policy over memories plus the test-time adaptation loop.

The controller scores each query against static prototypes. Close queries run
with a minimal working-memory contribution and sparse correction probes;
distant ones get the full top-k working retrieval and a probe on every
sample. When no static memory exists the query falls back to few-shot
conditioning (exclusive of working memory).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import memory as mem
from .errors import EmptyStream, NoMemoryAvailable
from .metrics import binarize, dice

MODE_STATIC = "static"
MODE_FEWSHOT = "fewshot"
MODE_STATIC_WORKING = "static+working"


@dataclass(frozen=True)
class ControllerConfig:
    tau_route: float = 0.80
    k_min: int = 1
    k_max: int = 8
    probe_period_similar: int = 4
    probe_period_dissimilar: int = 1

    def __post_init__(self):
        if self.k_min > self.k_max:
            raise ValueError("k_min must not exceed k_max")
        if self.probe_period_similar < 1 or self.probe_period_dissimilar < 1:
            raise ValueError("probe periods must be >= 1")


@dataclass(frozen=True)
class RoutePlan:
    mode: str
    k_working: int
    probe_this_sample: bool
    prototype_similarity: float


@dataclass(frozen=True)
class ConditioningReport:
    entry_ids: tuple[int, ...]
    mode: str


@dataclass(frozen=True)
class TtaRecord:
    index: int
    s_star: float
    mode: str
    k_working: int
    dice: float
    action: str
    alpha: float | None


def route(
    bank: mem.MemoryBank,
    query_embedding: np.ndarray,
    support_available: bool,
    cfg: ControllerConfig,
    stream_index: int = 0,
) -> RoutePlan:
    """Pure function of (static embeddings, query, flags, cfg, stream index)."""
    s_star = bank.max_static_similarity(query_embedding)
    if not bank.static_entries:
        if support_available:
            return RoutePlan(MODE_FEWSHOT, 0, False, s_star)
        raise NoMemoryAvailable("no static entries and no support set")
    if s_star >= cfg.tau_route:
        k, period = cfg.k_min, cfg.probe_period_similar
    else:
        k, period = cfg.k_max, cfg.probe_period_dissimilar
    return RoutePlan(MODE_STATIC_WORKING, k, stream_index % period == 0, s_star)


def infer(
    params: bb.ModelParams,
    bank: mem.MemoryBank,
    image: np.ndarray,
    plan: RoutePlan,
) -> tuple[np.ndarray, float, ConditioningReport]:
    """Condition the backbone per the plan; returns sigmoid outputs and the
    ids of the entries used."""
    if plan.mode == MODE_FEWSHOT:
        chosen = list(bank.fewshot_entries)
    else:
        chosen = list(bank.static_entries)
        if plan.mode == MODE_STATIC_WORKING and plan.k_working > 0 and bank.working_entries:
            _, query = bb.encode_image(params, image)
            chosen += mem.retrieve(bank, query, plan.k_working, kinds=(mem.KIND_WORKING,))
    probs, obj_prob = bb.predict(params, image, [e.token for e in chosen])
    report = ConditioningReport(tuple(e.entry_id for e in chosen), plan.mode)
    return probs, obj_prob, report


def tta_stream(
    params: bb.ModelParams,
    bank: mem.MemoryBank,
    stream,
    oracle,
    cfg: ControllerConfig,
    wm_cfg: mem.WorkingMemoryConfig,
    updates_enabled: bool = True,
) -> tuple[list[TtaRecord], mem.MemoryBank]:
    """Sequential inference over a stream with periodic correction probes.

    For every sample: route, infer, score against ground truth; on probed
    samples feed the oracle's correction to the working buffer. Disabling
    updates turns this into pure streaming evaluation.
    """
    stream = list(stream)
    if not stream:
        raise EmptyStream("tta_stream requires a nonempty stream")
    records = []
    for index, sample in enumerate(stream):
        _, query = bb.encode_image(params, sample.image)
        plan = route(bank, query, support_available=False, cfg=cfg, stream_index=index)
        probs, _, _ = infer(params, bank, sample.image, plan)
        d = dice(binarize(probs), sample.mask)
        action_name, alpha = "none", None
        if updates_enabled and plan.probe_this_sample:
            action = mem.working_update(bank, params, sample.image, probs, oracle(sample), wm_cfg)
            if isinstance(action, mem.Skipped):
                action_name = "skipped"
            elif isinstance(action, mem.Added):
                action_name = "added"
            else:
                action_name = "merged"
                alpha = action.alpha
        records.append(
            TtaRecord(index, plan.prototype_similarity, plan.mode, plan.k_working, d, action_name, alpha)
        )
    return records, bank
