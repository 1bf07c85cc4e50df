"""Simulated federated averaging over static-memory pseudo-observations.

Clients never exchange raw pixels: the aggregation interface only admits
pseudo-observations. Every round the server broadcasts the global ones, each
client runs local optimization steps against its shard, and the server takes
the sample-count-weighted mean index by index (which requires the shared
round-0 initialization). Communication is accounted per round at the f32
wire size even though local math is f64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import memory as mem
from .errors import NotFrozen, ShapeMismatch, ZeroParams
from .metrics import binarize, dice
from .optim import OptimConfig

BYTES_PER_PARAM = 4


@dataclass
class ClientState:
    client_id: str
    shard: list
    val_shard: list
    local_pseudo_obs: list[mem.PseudoObservation]
    n_samples: int
    rng_seed: int


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    per_client_dice: dict[str, float]
    global_dice: float
    bytes_up: int
    bytes_down: int


@dataclass(frozen=True)
class CommReport:
    payload_params_memory: int
    payload_params_backbone: int
    bytes_per_param: int
    reduction_ratio: float
    reduction_percent: float


def comm_report(memory_params: int, backbone_params: int, bytes_per_param: int = BYTES_PER_PARAM) -> CommReport:
    """Per-round payload comparison: ratio to 1 decimal, percent to 2."""
    if memory_params <= 0 or backbone_params <= 0 or bytes_per_param <= 0:
        raise ZeroParams("all parameter counts must be positive")
    ratio = backbone_params / memory_params
    percent = 100.0 * (1.0 - memory_params / backbone_params)
    return CommReport(
        payload_params_memory=memory_params,
        payload_params_backbone=backbone_params,
        bytes_per_param=bytes_per_param,
        reduction_ratio=round(ratio, 1),
        reduction_percent=round(percent, 2),
    )


def make_clients(
    shards: list[list],
    seed: int,
    val_fraction: float = 0.2,
) -> list[ClientState]:
    """Split each shard into local train/val parts and wrap as client states."""
    clients = []
    for c, shard in enumerate(shards):
        n_val = max(1, int(round(len(shard) * val_fraction)))
        train = shard[:-n_val]
        val = shard[-n_val:]
        clients.append(
            ClientState(
                client_id=f"site-{c}",
                shard=train,
                val_shard=val,
                local_pseudo_obs=[],
                n_samples=len(train),
                rng_seed=seed * 100 + c,
            )
        )
    return clients


def _mean_dice(params: bb.ModelParams, tokens: list[np.ndarray], samples) -> float:
    scores = []
    for rec in samples:
        probs, _ = bb.predict(params, rec.image, tokens)
        scores.append(dice(binarize(probs), rec.mask))
    return float(np.mean(scores))


def _aggregate(per_client: list[list[mem.PseudoObservation]], weights: np.ndarray) -> list[mem.PseudoObservation]:
    n = len(per_client[0])
    out = []
    for i in range(n):
        image = np.zeros_like(per_client[0][i].image)
        logits = np.zeros_like(per_client[0][i].mask_logits)
        for w, obs in zip(weights, per_client):
            image = image + w * obs[i].image
            logits = logits + w * obs[i].mask_logits
        out.append(mem.PseudoObservation(image, logits))
    return out


def fed_run(
    clients: list[ClientState],
    rounds: int,
    local_steps: int,
    params: bb.ModelParams,
    optim_cfg: OptimConfig,
    init_obs: list[mem.PseudoObservation],
) -> tuple[list[RoundReport], list[mem.MemoryEntry]]:
    """FedAvg over pseudo-observations with full synchronous participation.

    Returns per-round reports (per-client and pooled validation Dice plus
    byte accounting) and the final global entries. Deterministic given
    seeds; clients are always aggregated in index order.
    """
    if not params.frozen:
        raise NotFrozen("federated memory learning requires frozen weights")
    if not clients:
        raise ValueError("at least one client required")
    n_entries = len(init_obs)
    shapes = {(z.image.shape, z.mask_logits.shape) for z in init_obs}
    if len(shapes) != 1:
        raise ShapeMismatch("pseudo-observations must share one shape")

    weights = np.array([c.n_samples for c in clients], dtype=np.float64)
    weights = weights / weights.sum()
    payload_elems = n_entries * 2 * bb.IMAGE_SIZE * bb.IMAGE_SIZE
    round_bytes = len(clients) * payload_elems * BYTES_PER_PARAM

    global_obs = [z.copy() for z in init_obs]
    reports = []
    for r in range(rounds):
        per_client = []
        for c in clients:
            local = [z.copy() for z in global_obs]
            c.local_pseudo_obs, _ = mem.optimize_pseudo_obs(
                params, c.shard, local, local_steps, optim_cfg, seed=c.rng_seed * 10_000 + r
            )
            per_client.append(c.local_pseudo_obs)
        global_obs = _aggregate(per_client, weights)

        tokens = [
            bb.encode_memory(params, z.image, z.mask_probs()) for z in global_obs
        ]
        per_client_dice = {c.client_id: _mean_dice(params, tokens, c.val_shard) for c in clients}
        pooled = [rec for c in clients for rec in c.val_shard]
        reports.append(
            RoundReport(
                round_index=r,
                per_client_dice=per_client_dice,
                global_dice=_mean_dice(params, tokens, pooled),
                bytes_up=round_bytes,
                bytes_down=round_bytes,
            )
        )

    return reports, mem.entries_from_pseudo_obs(params, global_obs)
