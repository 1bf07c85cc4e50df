"""Memory space: learned static entries, few-shot entries, and the gated
test-time working buffer, plus similarity retrieval and JSON persistence.

Every token stored here is the image of some (image, mask_probs) pair under
the frozen memory encoder; the only constructors go through encode_memory,
which keeps learned and accumulated memories on the encoder's output
manifold. Static entries are learned by optimizing pseudo-observation pairs
through the frozen encoder, never by optimizing tokens directly.

Banks are single-writer; concurrent readers are safe between update calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tape, stable_sigmoid
from .errors import (
    BadMagic,
    CorruptEntry,
    EmptySupport,
    FrozenViolation,
    InsufficientData,
    NotFrozen,
    RangeViolation,
    VersionMismatch,
)
from .metrics import binarize, dice
from .optim import AdamW, OptimConfig

BANK_MAGIC = "MEMSEG-B"
BANK_VERSION = 1

KIND_STATIC = "static"
KIND_FEWSHOT = "fewshot"
KIND_WORKING = "working"
KINDS = (KIND_STATIC, KIND_FEWSHOT, KIND_WORKING)


@dataclass
class PseudoObservation:
    """Learnable (image, mask-logit) pair; the encoder always sees
    sigmoid(mask_logits), so the mask channel stays in [0, 1]."""

    image: np.ndarray
    mask_logits: np.ndarray

    def mask_probs(self) -> np.ndarray:
        return stable_sigmoid(self.mask_logits)

    def copy(self) -> "PseudoObservation":
        return PseudoObservation(self.image.copy(), self.mask_logits.copy())

    @property
    def n_params(self) -> int:
        return self.image.size + self.mask_logits.size


@dataclass
class MemoryEntry:
    token: np.ndarray
    embedding: np.ndarray
    kind: str
    source_id: str
    entry_id: int = -1
    hits: int = 0
    last_used: int = 0
    ema_count: int = 0

    def persisted_tuple(self):
        return (
            self.kind,
            self.source_id,
            tuple(self.token.tolist()),
            tuple(self.embedding.tolist()),
            self.hits,
            self.last_used,
            self.ema_count,
        )


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / max(n, 1e-12)


def make_entry(params: bb.ModelParams, image: np.ndarray, mask_probs: np.ndarray,
               kind: str, source_id: str) -> MemoryEntry:
    """The sole constructor for fresh entries: token via the memory encoder,
    embedding via the image encoder."""
    token = bb.encode_memory(params, image, mask_probs)
    _, embedding = bb.encode_image(params, image)
    return MemoryEntry(token=token, embedding=embedding, kind=kind, source_id=source_id)


def random_pair_entry(params: bb.ModelParams, seed: int, source_id: str = "random-pair",
                      kind: str = KIND_STATIC) -> MemoryEntry:
    """Uninformative but on-manifold entry: the encoding of a uniform-noise
    observation pair. Used as the random-memory baseline and as the filler
    that keeps conditioning nonempty in working-memory-only runs."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, (bb.IMAGE_SIZE, bb.IMAGE_SIZE))
    probs = rng.uniform(0.0, 1.0, (bb.IMAGE_SIZE, bb.IMAGE_SIZE))
    return make_entry(params, image, probs, kind, source_id)


class MemoryBank:
    """Static, few-shot and working entries with a bounded working buffer."""

    def __init__(self, capacity_b: int = 32):
        if capacity_b < 1:
            raise ValueError("capacity_b must be >= 1")
        self.static_entries: list[MemoryEntry] = []
        self.fewshot_entries: list[MemoryEntry] = []
        self.working_entries: list[MemoryEntry] = []
        self.capacity_b = capacity_b
        self.tick = 0
        self._next_id = 0

    def _admit(self, entry: MemoryEntry) -> MemoryEntry:
        entry.entry_id = self._next_id
        self._next_id += 1
        entry.last_used = self.tick
        return entry

    def add_static(self, entries: list[MemoryEntry]) -> None:
        for e in entries:
            if e.kind != KIND_STATIC:
                raise ValueError(f"expected static entry, got {e.kind}")
            self.static_entries.append(self._admit(e))

    def add_fewshot(self, entries: list[MemoryEntry]) -> None:
        for e in entries:
            if e.kind != KIND_FEWSHOT:
                raise ValueError(f"expected fewshot entry, got {e.kind}")
            self.fewshot_entries.append(self._admit(e))

    def entries(self, kinds=None) -> list[MemoryEntry]:
        out = []
        for e in self.static_entries + self.fewshot_entries + self.working_entries:
            if kinds is None or e.kind in kinds:
                out.append(e)
        return out

    def max_static_similarity(self, query_embedding: np.ndarray) -> float:
        if not self.static_entries:
            return float("-inf")
        return max(float(np.dot(e.embedding, query_embedding)) for e in self.static_entries)

    def __eq__(self, other) -> bool:
        # persisted-state equality; the tick counter is runtime-only
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return self.capacity_b == other.capacity_b and [
            e.persisted_tuple() for e in self.entries()
        ] == [e.persisted_tuple() for e in other.entries()]


@dataclass(frozen=True)
class WorkingMemoryConfig:
    tau_dice: float = 0.85
    tau_sim: float = 0.90
    alpha0: float = 0.5
    capacity_b: int = 32
    k_default: int = 4

    def __post_init__(self):
        if not 0.0 < self.tau_dice < 1.0:
            raise ValueError("tau_dice must lie in (0, 1)")
        if not -1.0 < self.tau_sim < 1.0:
            raise ValueError("tau_sim must lie in (-1, 1)")
        if not 0.0 < self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in (0, 1]")
        if self.capacity_b < 1 or self.k_default < 1:
            raise ValueError("capacity_b and k_default must be >= 1")


@dataclass(frozen=True)
class Skipped:
    dice: float


@dataclass(frozen=True)
class Added:
    entry_id: int


@dataclass(frozen=True)
class Merged:
    entry_id: int
    alpha: float


UpdateAction = Skipped | Added | Merged


def retrieve(bank: MemoryBank, query_embedding: np.ndarray, k: int, kinds=None) -> list[MemoryEntry]:
    """Top-k entries by cosine to the query embedding, descending; ties go to
    the earlier-inserted entry. Bumps hits/last_used on everything returned."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query_embedding, dtype=np.float64)
    candidates = bank.entries(kinds)
    # embeddings are unit vectors, so the dot product is the cosine;
    # python sort is stable, so equal scores keep insertion order
    ranked = sorted(candidates, key=lambda e: -float(np.dot(e.embedding, query)))
    chosen = ranked[:k]
    bank.tick += 1
    for e in chosen:
        e.hits += 1
        e.last_used = bank.tick
    return chosen


def working_update(
    bank: MemoryBank,
    params: bb.ModelParams,
    image: np.ndarray,
    predicted_mask_probs: np.ndarray,
    corrected_mask: np.ndarray,
    cfg: WorkingMemoryConfig,
) -> UpdateAction:
    """Gated delta update of the working buffer from one corrected sample.

    Skips when the prediction already agrees with the correction; otherwise
    encodes the corrected pair and either appends it (novel appearance,
    evicting the least recently used entry at capacity) or folds it into the
    most similar entry with an EMA whose weight is gated by similarity and by
    the size of the correction.
    """
    predicted_mask_probs = np.asarray(predicted_mask_probs, dtype=np.float64)
    if predicted_mask_probs.min() < 0.0 or predicted_mask_probs.max() > 1.0:
        raise RangeViolation("predicted_mask_probs outside [0, 1]")
    corrected = np.asarray(corrected_mask, dtype=np.float64)
    if not np.all((corrected == 0.0) | (corrected == 1.0)):
        raise RangeViolation("corrected mask must be binary")

    d = dice(binarize(predicted_mask_probs), corrected)
    if d >= cfg.tau_dice:
        return Skipped(dice=d)

    candidate = make_entry(params, image, corrected, KIND_WORKING, source_id="working")
    sims = [float(np.dot(e.embedding, candidate.embedding)) for e in bank.working_entries]
    s_star = max(sims) if sims else float("-inf")
    bank.tick += 1

    if s_star < cfg.tau_sim:
        if len(bank.working_entries) >= cfg.capacity_b:
            lru = min(range(len(bank.working_entries)), key=lambda i: bank.working_entries[i].last_used)
            bank.working_entries.pop(lru)
        bank.working_entries.append(bank._admit(candidate))
        return Added(entry_id=candidate.entry_id)

    j = int(np.argmax(sims))
    target = bank.working_entries[j]
    conf = min(max(1.0 - d, 0.0), 1.0)
    alpha = cfg.alpha0 * s_star * conf
    target.token = (1.0 - alpha) * target.token + alpha * candidate.token
    target.embedding = _unit((1.0 - alpha) * target.embedding + alpha * candidate.embedding)
    target.ema_count += 1
    target.last_used = bank.tick
    return Merged(entry_id=target.entry_id, alpha=alpha)


# --- static memory via pseudo-observation optimization ---


@dataclass(frozen=True)
class StaticLearnResult:
    entries: list[MemoryEntry]
    pseudo_obs: list[PseudoObservation]
    curve: list[float]


def _clamped_logit(mask: np.ndarray) -> np.ndarray:
    p = np.clip(mask, 1e-3, 1.0 - 1e-3)
    return np.log(p / (1.0 - p))


def init_pseudo_obs(dataset, n: int, seed: int) -> list[PseudoObservation]:
    """Seed pseudo-observations from n distinct samples of the dataset."""
    if len(dataset) < n:
        raise InsufficientData(f"{len(dataset)} samples for {n} pseudo-observations")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset), size=n, replace=False)
    return [
        PseudoObservation(dataset[i].image.copy(), _clamped_logit(dataset[i].mask))
        for i in picks
    ]


def _batch_loss_t(tape, w, obs_leaves, batch):
    mem_rows = [
        bb.encode_memory_t(tape, w, img_t, ad.sigmoid(logit_t))
        for img_t, logit_t in obs_leaves
    ]
    total = None
    for rec in batch:
        logits, obj, _ = bb.segment_t(tape, w, tape.leaf(rec.image), mem_rows)
        term = bb.loss_t(tape, logits, obj, rec.mask)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(batch))


def optimize_pseudo_obs(
    params: bb.ModelParams,
    dataset,
    obs: list[PseudoObservation],
    steps: int,
    optim_cfg: OptimConfig,
    seed: int,
) -> tuple[list[PseudoObservation], list[float]]:
    """Minibatch descent on the segmentation loss w.r.t. pseudo-observations
    only; backbone and encoder weights are read, never written."""
    if not params.frozen:
        raise NotFrozen("pseudo-observation optimization requires frozen weights")
    before = params.checksum()
    rng = np.random.default_rng(seed)
    opt = AdamW(optim_cfg)
    obs = [z.copy() for z in obs]
    curve: list[float] = []

    for _ in range(steps):
        if optim_cfg.batch_size >= len(dataset):
            batch = list(dataset)
        else:
            picks = rng.choice(len(dataset), size=optim_cfg.batch_size, replace=False)
            batch = [dataset[i] for i in picks]
        tape = Tape()
        w = {name: tape.leaf(arr) for name, arr in params.named_arrays()}
        obs_leaves = [(tape.leaf(z.image), tape.leaf(z.mask_logits)) for z in obs]
        total = _batch_loss_t(tape, w, obs_leaves, batch)
        grads = tape.backward(total)
        flat_params: list[np.ndarray] = []
        flat_grads: list[np.ndarray] = []
        for (img_t, logit_t), z in zip(obs_leaves, obs):
            flat_params.extend([z.image, z.mask_logits])
            flat_grads.extend([grads[img_t.node_id].data, grads[logit_t.node_id].data])
        stepped = opt.step(flat_params, flat_grads)
        obs = [
            PseudoObservation(stepped[2 * i], stepped[2 * i + 1]) for i in range(len(obs))
        ]
        curve.append(total.item())

    if params.checksum() != before:
        raise FrozenViolation("model weights changed during static-memory learning")
    return obs, curve


def entries_from_pseudo_obs(params: bb.ModelParams, obs: list[PseudoObservation]) -> list[MemoryEntry]:
    entries = []
    for i, z in enumerate(obs):
        token = bb.encode_memory(params, z.image, z.mask_probs())
        _, embedding = bb.encode_image(params, z.image)
        entries.append(
            MemoryEntry(token=token, embedding=embedding, kind=KIND_STATIC, source_id=f"static-{i}")
        )
    return entries


def learn_static(
    params: bb.ModelParams,
    dataset,
    n: int,
    optim_cfg: OptimConfig,
    seed: int,
    steps: int = 300,
    init: list[PseudoObservation] | None = None,
) -> StaticLearnResult:
    """Learn n static memory entries on a labeled dataset (frozen weights).

    Pseudo-observations start from a seeded draw of real pairs (mask logits
    via a clamped logit transform) unless an explicit init is given; tokens
    are re-encoded through the memory encoder at every step.
    """
    if not params.frozen:
        raise NotFrozen("learn_static requires frozen weights")
    if not dataset:
        raise InsufficientData("empty dataset")
    if n < 1:
        raise ValueError("n must be >= 1")
    obs = init if init is not None else init_pseudo_obs(dataset, n, seed)
    obs, curve = optimize_pseudo_obs(params, dataset, obs, steps, optim_cfg, seed)
    return StaticLearnResult(entries_from_pseudo_obs(params, obs), obs, curve)


def encode_fewshot(params: bb.ModelParams, support) -> list[MemoryEntry]:
    """Non-parametric entries: one memory encoding per support pair."""
    support = list(support)
    if not support:
        raise EmptySupport("at least one support pair required")
    return [
        make_entry(params, rec.image, rec.mask, KIND_FEWSHOT, source_id=f"support-{rec.sample_id}")
        for rec in support
    ]


# --- persistence ---


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    doc = {
        "magic": BANK_MAGIC,
        "version": BANK_VERSION,
        "capacity_B": bank.capacity_b,
        "entries": [
            {
                "kind": e.kind,
                "source_id": e.source_id,
                "token": e.token.tolist(),
                "embedding": e.embedding.tolist(),
                "hits": e.hits,
                "last_used": e.last_used,
                "ema_count": e.ema_count,
            }
            for e in bank.entries()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_bank(path: str | Path) -> MemoryBank:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != BANK_MAGIC:
        raise BadMagic(f"expected magic {BANK_MAGIC!r}, got {doc.get('magic')!r}")
    if doc.get("version") != BANK_VERSION:
        raise VersionMismatch(f"unsupported bank version {doc.get('version')!r}")
    bank = MemoryBank(capacity_b=int(doc.get("capacity_B", 32)))
    max_tick = 0
    for raw in doc.get("entries", []):
        try:
            kind = raw["kind"]
            token = np.asarray(raw["token"], dtype=np.float64)
            embedding = np.asarray(raw["embedding"], dtype=np.float64)
            entry = MemoryEntry(
                token=token,
                embedding=embedding,
                kind=kind,
                source_id=str(raw["source_id"]),
                hits=int(raw["hits"]),
                last_used=int(raw["last_used"]),
                ema_count=int(raw["ema_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptEntry(f"malformed entry: {exc}") from exc
        if kind not in KINDS:
            raise CorruptEntry(f"unknown entry kind {kind!r}")
        if token.shape != (bb.DIM,) or embedding.shape != (bb.DIM,):
            raise CorruptEntry(f"entry vectors must have length {bb.DIM}")
        entry.entry_id = bank._next_id
        bank._next_id += 1
        max_tick = max(max_tick, entry.last_used)
        if kind == KIND_STATIC:
            bank.static_entries.append(entry)
        elif kind == KIND_FEWSHOT:
            bank.fewshot_entries.append(entry)
        else:
            bank.working_entries.append(entry)
    if len(bank.working_entries) > bank.capacity_b:
        raise CorruptEntry("working entries exceed capacity_B")
    bank.tick = max_tick
    return bank
