"""Frozen toy segmentation backbone and its memory encoder.

One self-attention block encodes 4x4 patches of a 32x32 image into 64 tokens.
Conditioning happens through a single-head cross-attention over memory tokens,
followed by the MLP and a per-token decode head that unpatchifies to 32x32
mask logits plus a pooled objectness logit. The MLP sits after the memory
injection on purpose: conditioning must be able to switch per-pixel decode
behaviour (foreground polarity / intensity levels), and a linear decode after
a residual add cannot do that.

All adaptation elsewhere treats these weights as immutable; `freeze` makes
the arrays read-only and any later training attempt an error.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, stable_sigmoid
from .errors import (
    ArchMismatch,
    BadMagic,
    CorruptEntry,
    EmptyMemory,
    FrozenViolation,
    RangeViolation,
    ShapeMismatch,
    VersionMismatch,
)
from .optim import AdamW, OptimConfig

IMAGE_SIZE = 32
PATCH_SIZE = 4
GRID = IMAGE_SIZE // PATCH_SIZE
NUM_TOKENS = GRID * GRID
DIM = 32
MLP_HIDDEN = 64
PATCH_PIXELS = PATCH_SIZE * PATCH_SIZE

ARCH = {
    "image_size": IMAGE_SIZE,
    "patch_size": PATCH_SIZE,
    "num_tokens": NUM_TOKENS,
    "embed_dim": DIM,
    "mlp_hidden": MLP_HIDDEN,
}

WEIGHTS_MAGIC = "MEMSEG-W"
WEIGHTS_VERSION = 1

# (name, shape); fixed order defines checkpoints, checksums and optimizer slots.
_ARRAY_SPECS = [
    ("patch_w", (PATCH_PIXELS, DIM)),
    ("patch_b", (1, DIM)),
    ("pos", (NUM_TOKENS, DIM)),
    ("sa_wq", (DIM, DIM)),
    ("sa_wk", (DIM, DIM)),
    ("sa_wv", (DIM, DIM)),
    ("sa_wo", (DIM, DIM)),
    ("mlp_w1", (DIM, MLP_HIDDEN)),
    ("mlp_b1", (1, MLP_HIDDEN)),
    ("mlp_w2", (MLP_HIDDEN, DIM)),
    ("mlp_b2", (1, DIM)),
    ("mem_patch_w", (2 * PATCH_PIXELS, DIM)),
    ("mem_patch_b", (1, DIM)),
    ("mem_proj", (DIM, DIM)),
    ("ca_wq", (DIM, DIM)),
    ("ca_wk", (DIM, DIM)),
    ("ca_wv", (DIM, DIM)),
    ("ca_wo", (DIM, DIM)),
    ("dec_w", (DIM, PATCH_PIXELS)),
    ("dec_b", (1, PATCH_PIXELS)),
    ("obj_w", (DIM, 1)),
    ("obj_b", (1, 1)),
]

ARRAY_NAMES = tuple(name for name, _ in _ARRAY_SPECS)

OBJ_LOSS_WEIGHT = 0.3
DICE_SMOOTH = 1.0


@dataclass
class ModelParams:
    """Backbone weights plus the memory-encoder weights."""

    arrays: dict[str, np.ndarray]
    init_seed: int
    frozen: bool = False

    @classmethod
    def initialize(cls, init_seed: int) -> "ModelParams":
        # weight variance 0.02/sqrt(d); the smaller reading (std) leaves the
        # decode pathway below the relu noise floor and never trains
        rng = np.random.default_rng(init_seed)
        std = math.sqrt(0.02 / math.sqrt(DIM))
        arrays = {}
        for name, shape in _ARRAY_SPECS:
            if name.endswith("_b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, std, shape)
        # start mask logits near the foreground base rate so the first
        # descent direction is per-pixel evidence, not the all-foreground
        # constant (which saturates and stalls)
        arrays["dec_b"] = arrays["dec_b"] - 2.0
        return cls(arrays=arrays, init_seed=init_seed)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.arrays[name]) for name in ARRAY_NAMES]

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def freeze(self) -> "ModelParams":
        for _, arr in self.named_arrays():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def replace_arrays(self, new_arrays: list[np.ndarray]) -> None:
        if self.frozen:
            raise FrozenViolation("cannot assign weights to a frozen model")
        for name, arr in zip(ARRAY_NAMES, new_arrays):
            self.arrays[name] = arr

    def copy_unfrozen(self) -> "ModelParams":
        return ModelParams(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            init_seed=self.init_seed,
            frozen=False,
        )


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    doc = {
        "magic": WEIGHTS_MAGIC,
        "version": WEIGHTS_VERSION,
        "arch": ARCH,
        "init_seed": params.init_seed,
        "frozen": params.frozen,
        "arrays": {name: arr.tolist() for name, arr in params.named_arrays()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != WEIGHTS_MAGIC:
        raise BadMagic(f"expected magic {WEIGHTS_MAGIC!r}, got {doc.get('magic')!r}")
    if doc.get("version") != WEIGHTS_VERSION:
        raise VersionMismatch(f"unsupported weights version {doc.get('version')!r}")
    if doc.get("arch") != ARCH:
        raise ArchMismatch(f"architecture constants differ: {doc.get('arch')}")
    arrays = {}
    raw = doc.get("arrays", {})
    for name, shape in _ARRAY_SPECS:
        if name not in raw:
            raise CorruptEntry(f"missing array {name!r}")
        arr = np.asarray(raw[name], dtype=np.float64)
        if arr.shape != shape:
            raise CorruptEntry(f"array {name!r} has shape {arr.shape}, want {shape}")
        arrays[name] = arr
    params = ModelParams(arrays=arrays, init_seed=int(doc.get("init_seed", 0)))
    if doc.get("frozen", False):
        params.freeze()
    return params


# --- differentiable forward pieces ---


def _leaves(tape: Tape, params: ModelParams) -> dict[str, Tensor]:
    return {name: tape.leaf(arr) for name, arr in params.named_arrays()}


def _row_mean(tape: Tape, x: Tensor) -> Tensor:
    n = x.shape[0]
    ones = tape.leaf(np.full((1, n), 1.0 / n))
    return ones @ x


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatch(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {image.shape}")
    return image


def encoder_tokens_t(tape: Tape, w: dict[str, Tensor], image_t: Tensor) -> Tensor:
    """Patch embed + positions + one self-attention block -> 64x32 tokens."""
    patches = ad.patchify2d(image_t, PATCH_SIZE)
    emb = ad.broadcast_add_row(patches @ w["patch_w"], w["patch_b"])
    t0 = ad.relu(emb + w["pos"])
    q = t0 @ w["sa_wq"]
    k = t0 @ w["sa_wk"]
    v = t0 @ w["sa_wv"]
    att = ad.softmax_rows(ad.scale(q @ ad.transpose2d(k), 1.0 / math.sqrt(DIM)))
    return t0 + (att @ v) @ w["sa_wo"]


def semantic_embedding_of_tokens(tokens: np.ndarray) -> np.ndarray:
    """Mean over tokens, L2-normalized. Used for retrieval and routing."""
    pooled = tokens.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    return pooled / max(norm, 1e-12)


def encode_image(params: ModelParams, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (tokens 64x32, unit semantic embedding in R^32).

    Accepts values outside [0,1] on purpose: learned pseudo-images are
    unconstrained and share this code path.
    """
    image = _check_image(image)
    tape = Tape()
    tokens = encoder_tokens_t(tape, _leaves(tape, params), tape.leaf(image))
    return tokens.data, semantic_embedding_of_tokens(tokens.data)


def encode_memory_t(tape: Tape, w: dict[str, Tensor], image_t: Tensor, probs_t: Tensor) -> Tensor:
    """Differentiable memory encoding of an (image, mask_probs) pair -> 1x32 token."""
    img_patches = ad.patchify2d(image_t, PATCH_SIZE)
    prob_patches = ad.patchify2d(probs_t, PATCH_SIZE)
    # column-concat the two channels per patch: 64 x 32
    stacked = ad.transpose2d(ad.concat_rows([ad.transpose2d(img_patches), ad.transpose2d(prob_patches)]))
    emb = ad.broadcast_add_row(stacked @ w["mem_patch_w"], w["mem_patch_b"])
    hidden = ad.relu(emb + w["pos"])
    return _row_mean(tape, hidden) @ w["mem_proj"]


def encode_memory(params: ModelParams, image: np.ndarray, mask_probs: np.ndarray) -> np.ndarray:
    """Single memory token in R^32 for one observation pair."""
    image = _check_image(image)
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    if mask_probs.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatch(f"mask_probs must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {mask_probs.shape}")
    if mask_probs.min() < -1e-9 or mask_probs.max() > 1.0 + 1e-9:
        raise RangeViolation("mask_probs outside [0, 1]")
    tape = Tape()
    token = encode_memory_t(tape, _leaves(tape, params), tape.leaf(image), tape.leaf(mask_probs))
    return token.data.reshape(DIM)


def _canonical_row_order(rows: list[np.ndarray]) -> list[int]:
    # total order on token values; makes attention output independent of the
    # caller's list order down to the exact f64 summation sequence
    keyed = sorted(range(len(rows)), key=lambda i: tuple(rows[i].reshape(-1)))
    return keyed


def _stack_memories_t(mem_rows: list[Tensor]) -> Tensor:
    order = _canonical_row_order([t.data for t in mem_rows])
    if len(mem_rows) == 1:
        return mem_rows[0]
    return ad.concat_rows([mem_rows[i] for i in order])


def conditioned_tokens_t(
    tape: Tape, w: dict[str, Tensor], tokens_t: Tensor, mem_rows: list[Tensor]
) -> tuple[Tensor, Tensor]:
    """Cross-attention over memory, residual, MLP. Returns (tokens, attention)."""
    mem = _stack_memories_t(mem_rows)
    q = tokens_t @ w["ca_wq"]
    k = mem @ w["ca_wk"]
    v = mem @ w["ca_wv"]
    att = ad.softmax_rows(ad.scale(q @ ad.transpose2d(k), 1.0 / math.sqrt(DIM)))
    mixed = tokens_t + (att @ v) @ w["ca_wo"]
    hidden = ad.relu(ad.broadcast_add_row(mixed @ w["mlp_w1"], w["mlp_b1"]))
    out = mixed + ad.broadcast_add_row(hidden @ w["mlp_w2"], w["mlp_b2"])
    return out, att


def segment_t(
    tape: Tape, w: dict[str, Tensor], image_t: Tensor, mem_rows: list[Tensor]
) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable segmentation. Returns (mask_logits 32x32, obj_logit (), attention)."""
    if not mem_rows:
        raise EmptyMemory("segment requires at least one memory token")
    tokens = encoder_tokens_t(tape, w, image_t)
    cond, att = conditioned_tokens_t(tape, w, tokens, mem_rows)
    patch_logits = ad.broadcast_add_row(cond @ w["dec_w"], w["dec_b"])
    logits = ad.unpatchify2d(patch_logits, PATCH_SIZE, IMAGE_SIZE, IMAGE_SIZE)
    pooled = _row_mean(tape, cond)
    obj = ad.reshape(ad.broadcast_add_row(pooled @ w["obj_w"], w["obj_b"]), ())
    return logits, obj, att


def _memory_rows(tape: Tape, memory_tokens) -> list[Tensor]:
    rows = []
    for tok in memory_tokens:
        tok = np.asarray(tok, dtype=np.float64).reshape(1, -1)
        if tok.shape != (1, DIM):
            raise ShapeMismatch(f"memory token must have {DIM} entries, got {tok.size}")
        rows.append(tape.leaf(tok))
    return rows


def segment(params: ModelParams, image: np.ndarray, memory_tokens) -> tuple[np.ndarray, float]:
    """Mask logits (32x32) and objectness logit for one image under conditioning."""
    image = _check_image(image)
    tape = Tape()
    rows = _memory_rows(tape, memory_tokens)
    if not rows:
        raise EmptyMemory("segment requires a nonempty memory list")
    logits, obj, _ = segment_t(tape, _leaves(tape, params), tape.leaf(image), rows)
    return logits.data, obj.item()


def cross_attention_weights(params: ModelParams, image: np.ndarray, memory_tokens) -> np.ndarray:
    """Attention matrix (64 x n_memories) in canonical memory order; test hook."""
    image = _check_image(image)
    tape = Tape()
    rows = _memory_rows(tape, memory_tokens)
    if not rows:
        raise EmptyMemory("segment requires a nonempty memory list")
    _, _, att = segment_t(tape, _leaves(tape, params), tape.leaf(image), rows)
    return att.data


def loss_t(tape: Tape, logits_t: Tensor, obj_t: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Soft Dice (smoothing 1.0) plus 0.3 * objectness BCE, as a tape scalar."""
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if gt_mask.shape != logits_t.shape:
        raise ShapeMismatch(f"gt mask {gt_mask.shape} vs logits {logits_t.shape}")
    gt = tape.leaf(gt_mask)
    probs = ad.sigmoid(logits_t)
    inter = ad.sum_all(probs * gt)
    denom = ad.sum_all(probs) + ad.sum_all(gt) + tape.const(DICE_SMOOTH)
    dice_score = ad.div_elem(ad.scale(inter, 2.0) + tape.const(DICE_SMOOTH), denom)
    dice_loss = tape.const(1.0) - dice_score
    presence = 1.0 if gt_mask.sum() > 0 else 0.0
    # BCE with the presence label known up front: -log sigmoid(z) when the
    # object is present, -log sigmoid(-z) otherwise.
    z = obj_t if presence == 1.0 else ad.scale(obj_t, -1.0)
    obj_bce = ad.scale(ad.log(ad.sigmoid(z)), -1.0)
    return dice_loss + ad.scale(obj_bce, OBJ_LOSS_WEIGHT)


def loss(mask_logits: np.ndarray, obj_logit: float, gt_mask: np.ndarray) -> float:
    tape = Tape()
    logits_t = tape.leaf(np.asarray(mask_logits, dtype=np.float64))
    obj_t = tape.leaf(np.float64(obj_logit))
    return loss_t(tape, logits_t, obj_t, gt_mask).item()


def predict(params: ModelParams, image: np.ndarray, memory_tokens) -> tuple[np.ndarray, float]:
    """Sigmoid outputs: (mask probabilities, objectness probability)."""
    logits, obj = segment(params, image, memory_tokens)
    return stable_sigmoid(logits), float(stable_sigmoid(np.float64(obj)))


# --- episodic pretraining ---


@dataclass(frozen=True)
class PretrainConfig:
    # lr below the optimizer default used elsewhere: at 3e-3 the memory
    # pathway amplifies into the all-foreground dice basin and saturates
    # before per-pixel features form
    epochs: int = 520
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    support_min: int = 1
    support_max: int = 3
    # episode mix beyond plain matched-support episodes: supports entirely
    # off-domain with the query's own mask as target (trains the query-side
    # fallback for mismatched memory), noise-pair supports with an empty
    # target (trains the decode to abstain under uninformative conditioning
    # instead of guessing a polarity), and episodes that hide one noise pair
    # among valid supports (a polluted memory set also abstains).
    # The non-matched episode kinds only start after matched_phase of the
    # run: conditioning must become the primary policy before the fallback
    # exists, or the fallback wins the race and the memory read never forms.
    p_mismatched: float = 0.12
    p_noise: float = 0.08
    p_polluted: float = 0.05
    p_mixed: float = 0.0
    matched_phase: float = 0.6
    # soft-dice keeps rewarding harder outputs until sigmoid gradients
    # underflow, which would freeze every later pseudo-observation
    # optimization; a small pull on the logit scale keeps them alive
    logit_penalty: float = 1e-5
    seed: int = 0


def _group_samples(samples) -> dict[tuple[str, str], list[int]]:
    groups: dict[tuple[str, str], list[int]] = {}
    for i, rec in enumerate(samples):
        groups.setdefault((rec.task_id, rec.domain_id), []).append(i)
    return groups


def _episode_loss_t(tape, w, samples, rng, groups, group_keys, cfg: PretrainConfig,
                    matched_only: bool) -> Tensor:
    key = group_keys[rng.integers(len(group_keys))]
    pool = groups[key]
    n_support = int(rng.integers(cfg.support_min, cfg.support_max + 1))
    picks = rng.choice(len(pool), size=min(n_support + 1, len(pool)), replace=False)
    query = samples[pool[picks[0]]]
    support = [samples[pool[i]] for i in picks[1:]]
    if not support:
        support = [query]

    roll = 1.0 if matched_only else rng.uniform()
    other_keys = [k for k in group_keys if k[1] != key[1]]
    target = query.mask
    # textured cells never serve as fallback-training queries; the query-side
    # fallback should stay weak on cluttered appearances so that conditioning
    # still matters there
    fallback_ok = "stripes" not in key[1]

    def off_domain_pair():
        dk = other_keys[rng.integers(len(other_keys))]
        return samples[groups[dk][rng.integers(len(groups[dk]))]]

    side = query.image.shape[0]

    def noise_row():
        img = rng.uniform(0.0, 1.0, (side, side))
        probs = rng.uniform(0.0, 1.0, (side, side))
        return encode_memory_t(tape, w, tape.leaf(img), tape.leaf(probs))

    p1 = cfg.p_noise
    p2 = p1 + cfg.p_polluted
    p3 = p2 + cfg.p_mismatched
    p4 = p3 + cfg.p_mixed
    if roll < p1:
        # uninformative conditioning: the correct response is no output
        mem_rows = [noise_row() for _ in range(len(support))]
        target = np.zeros_like(query.mask)
    elif roll < p2:
        # a noise pair hidden among valid supports also voids the memory
        mem_rows = [
            encode_memory_t(tape, w, tape.leaf(s.image), tape.leaf(s.mask)) for s in support
        ]
        mem_rows.append(noise_row())
        target = np.zeros_like(query.mask)
    else:
        if other_keys and fallback_ok and roll < p3:
            # memory from the wrong appearance domain; the target is still
            # the query's own mask, which trains a query-side fallback
            support = [off_domain_pair() for _ in range(len(support))]
        elif other_keys and roll < p4:
            # off-domain distractors among the matched supports train the
            # attention to select memories by appearance
            support = support + [off_domain_pair()]
        mem_rows = [
            encode_memory_t(tape, w, tape.leaf(s.image), tape.leaf(s.mask)) for s in support
        ]

    logits, obj, _ = segment_t(tape, w, tape.leaf(query.image), mem_rows)
    episode = loss_t(tape, logits, obj, target)
    if cfg.logit_penalty > 0.0:
        reg = ad.mean_all(logits * logits) + obj * obj
        episode = episode + ad.scale(reg, cfg.logit_penalty)
    return episode


def pretrain(params: ModelParams, samples, cfg: PretrainConfig) -> tuple[ModelParams, list[float]]:
    """Train backbone + memory encoder on base-task episodes, then freeze.

    Each episode conditions a query on memory encodings of same-task,
    same-domain support pairs (plus off-domain distractors) and minimizes the
    segmentation loss on the query. Deterministic in (params, samples, cfg).
    """
    if params.frozen:
        raise FrozenViolation("pretrain requires unfrozen parameters")
    if not samples:
        raise ValueError("pretrain requires a nonempty sample stream")

    groups = _group_samples(samples)
    group_keys = sorted(groups.keys())
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(OptimConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    steps_per_epoch = max(1, len(samples) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    curve: list[float] = []

    for step in range(total_steps):
        matched_only = step < cfg.matched_phase * total_steps
        tape = Tape()
        w = _leaves(tape, params)
        total = _episode_loss_t(tape, w, samples, rng, groups, group_keys, cfg, matched_only)
        for _ in range(cfg.batch_size - 1):
            total = total + _episode_loss_t(tape, w, samples, rng, groups, group_keys, cfg, matched_only)
        total = ad.scale(total, 1.0 / cfg.batch_size)
        grads = tape.backward(total)
        arrays = [arr for _, arr in params.named_arrays()]
        gs = [grads[w[name].node_id].data for name in ARRAY_NAMES]
        params.replace_arrays(opt.step(arrays, gs))
        curve.append(total.item())

    return params.freeze(), curve
