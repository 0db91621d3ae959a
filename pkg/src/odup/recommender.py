"""Minimal model-agnostic session recommender.

The model owns a |V| x d item embedding table. A session prefix is encoded
either as the mean of its item embeddings ("mean_pool") or as
g * x_last + (1 - g) * mean with a learned scalar gate ("last_gated").
Scores are plain dot products against every item row; training minimizes
softmax cross-entropy of the next-item label plus L2 on the table, with
hand-rolled gradients and Adam.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, TrainingDiverged
from .numkit import Adam, Rng, log_softmax, sigmoid

ENCODER_KINDS = ("mean_pool", "last_gated")

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 30
    batch: int = 100
    l2: float = 1e-5
    seed: int = 0
    freeze_gate: bool = False

    def __post_init__(self):
        if not 0 <= self.lr <= 1:
            raise ValueError("lr must lie in [0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass
class RecModel:
    embeddings: np.ndarray          # (|V|, d) float64
    encoder_kind: str = "mean_pool"
    gate_raw: float = 0.0           # gate = sigmoid(gate_raw)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1 or self.embeddings.shape[1] < 2:
            raise ValueError("embedding table must be |V| x d with |V| >= 1, d >= 2")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embedding table must be finite")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}")

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def gate(self) -> float:
        return float(sigmoid(np.float64(self.gate_raw)))


def init_model(vocab_size: int, d: int, rng: Rng, encoder_kind: str = "mean_pool") -> RecModel:
    """Uniform(-0.1, 0.1) initialization for the table and gate."""
    table = rng.uniform((vocab_size, d)) * 0.2 - 0.1
    gate_raw = float(rng.uniform() * 0.2 - 0.1)
    return RecModel(table, encoder_kind, gate_raw)


def encode_session(model: RecModel, prefix) -> np.ndarray:
    idx = np.asarray(prefix, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("empty session prefix")
    if idx.min() < 0 or idx.max() >= model.vocab_size:
        raise ValueError("prefix item index out of range")
    mean = model.embeddings[idx].mean(axis=0)
    if model.encoder_kind == "mean_pool":
        return mean
    g = model.gate
    return g * model.embeddings[idx[-1]] + (1.0 - g) * mean


def score_all(model_or_table, s: np.ndarray) -> np.ndarray:
    table = model_or_table.embeddings if isinstance(model_or_table, RecModel) else np.asarray(model_or_table)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (table.shape[1],):
        raise ValueError("session embedding dimension mismatch")
    return table @ s


class PackedPairs:
    """Padded prefix arrays for vectorized batching: ``pad`` is (P, Lmax)
    with zeros past each prefix length, ``flat``/``rows`` scatter the
    per-pair encoder gradient back onto item rows."""

    def __init__(self, pairs):
        self.n = len(pairs)
        self.lens = np.array([len(p) for p, _ in pairs], dtype=np.intp)
        lmax = int(self.lens.max())
        self.pad = np.zeros((self.n, lmax), dtype=np.intp)
        mask = np.zeros((self.n, lmax), dtype=bool)
        for j, (p, _) in enumerate(pairs):
            self.pad[j, : len(p)] = p
            mask[j, : len(p)] = True
        self.mask = mask
        self.last = np.array([p[-1] for p, _ in pairs], dtype=np.intp)
        self.labels = np.array([l for _, l in pairs], dtype=np.intp)

    def select(self, idx) -> "PackedPairs":
        out = object.__new__(PackedPairs)
        out.n = len(idx)
        out.lens = self.lens[idx]
        lmax = int(out.lens.max())
        out.pad = self.pad[idx][:, :lmax]
        out.mask = self.mask[idx][:, :lmax]
        out.last = self.last[idx]
        out.labels = self.labels[idx]
        return out


def _encode_batch(table, gate_value, encoder_kind, batch: PackedPairs):
    gathered = table[batch.pad] * batch.mask[:, :, None]
    means = gathered.sum(axis=1) / batch.lens[:, None]
    if encoder_kind == "last_gated":
        return gate_value * table[batch.last] + (1.0 - gate_value) * means, means
    return means, means


def _loss_and_grads(table, gate_raw, encoder_kind, batch: PackedPairs, l2, want_gate_grad):
    """Mean softmax cross-entropy over the batch plus l2 * ||X||^2.

    Returns (loss, dX, dgate_raw). Pure in its inputs; used by train() and
    by the finite-difference gradient tests.
    """
    B = batch.n
    gated = encoder_kind == "last_gated"
    g = float(sigmoid(np.float64(gate_raw))) if gated else 0.0
    S, means = _encode_batch(table, g, encoder_kind, batch)
    Y = S @ table.T
    logp = log_softmax(Y, axis=-1)
    rows = np.arange(B)
    ce = -logp[rows, batch.labels]
    loss = float(ce.mean() + l2 * np.sum(table * table))

    DY = np.exp(logp)
    DY[rows, batch.labels] -= 1.0
    DY /= B
    dX = DY.T @ S
    DS = DY @ table
    # scatter the mean-path gradient: each prefix occurrence of item v gets
    # (1-g) * DS_j / len_j (g = 0 for mean_pool)
    per_slot = ((1.0 - g) if gated else 1.0) * DS / batch.lens[:, None]
    flat_items = batch.pad[batch.mask]
    flat_rows = np.repeat(np.arange(B), batch.lens)
    np.add.at(dX, flat_items, per_slot[flat_rows])
    dgate_raw = 0.0
    if gated:
        np.add.at(dX, batch.last, g * DS)
        if want_gate_grad:
            dgate = float(np.sum(DS * (table[batch.last] - means)))
            dgate_raw = dgate * g * (1.0 - g)
    dX += 2.0 * l2 * table
    return loss, dX, dgate_raw


def train(model: RecModel, dataset, cfg: TrainConfig) -> list[float]:
    """Mini-batch Adam on the cross-entropy objective; returns the per-epoch
    mean training loss. Raises TrainingDiverged if the loss goes non-finite.
    """
    if not dataset.pairs:
        raise DataError("cannot train on an empty dataset")
    packed = PackedPairs(dataset.pairs)
    if packed.labels.max() >= model.vocab_size or packed.pad.max() >= model.vocab_size:
        raise DataError("dataset item outside the model vocabulary")
    rng = Rng(cfg.seed).child("rec-shuffle")
    table = model.embeddings
    gate = np.array([model.gate_raw], dtype=np.float64)
    train_gate = model.encoder_kind == "last_gated" and not cfg.freeze_gate
    adam = Adam(cfg.lr)
    losses: list[float] = []
    n = packed.n
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch):
            sub = packed.select(order[lo: lo + cfg.batch])
            loss, dX, dg = _loss_and_grads(
                table, gate[0], model.encoder_kind, sub, cfg.l2, train_gate
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"recommender loss became non-finite ({loss})")
            adam.step([table, gate], [dX, np.array([dg])])
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    model.gate_raw = float(gate[0])
    return losses


def _eval_parts(model_or_table, encoder_kind, gate):
    if isinstance(model_or_table, RecModel):
        m = model_or_table
        return m.embeddings, m.encoder_kind, m.gate
    table = np.asarray(model_or_table, dtype=np.float64)
    return table, encoder_kind or "mean_pool", 0.5 if gate is None else float(gate)


def evaluate(model_or_table, dataset, k: int, *, encoder_kind: str | None = None,
             gate: float | None = None, chunk: int = 512) -> tuple[float, float]:
    """(Prec@K, NDCG@K) over the dataset.

    Prec@K is the hit rate of the single next-item label inside the top-K
    list (descending score, ties to the lower item index); the NDCG@K
    contribution of a hit at rank r is 1/log2(r + 1). Accepts a RecModel or
    a bare embedding table (device-side evaluation) plus encoder settings.
    """
    table, kind, g = _eval_parts(model_or_table, encoder_kind, gate)
    vocab = table.shape[0]
    if not 1 <= k <= vocab:
        raise ValueError(f"K must lie in [1, {vocab}]")
    if not dataset.pairs:
        raise DataError("cannot evaluate on an empty dataset")
    packed = PackedPairs(dataset.pairs)
    idx = np.arange(vocab)
    hits = []
    gains = []
    for lo in range(0, packed.n, chunk):
        sub = packed.select(np.arange(lo, min(lo + chunk, packed.n)))
        S, _ = _encode_batch(table, g, kind, sub)
        scores = S @ table.T
        label_scores = scores[np.arange(sub.n), sub.labels]
        greater = (scores > label_scores[:, None]).sum(axis=1)
        ties_before = ((scores == label_scores[:, None]) & (idx[None, :] < sub.labels[:, None])).sum(axis=1)
        rank = 1 + greater + ties_before
        hit = rank <= k
        hits.append(hit.astype(np.float64))
        gains.append(np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0))
    hits = np.concatenate(hits)
    gains = np.concatenate(gains)
    return float(hits.mean()), float(gains.mean())


def save_checkpoint(path, table: np.ndarray) -> None:
    """Table checkpoint: u8 version, u32 rows, u32 cols, row-major float32
    little-endian data, trailing u32 CRC-32 over all preceding bytes.
    """
    table = np.asarray(table)
    body = struct.pack("<BII", CHECKPOINT_VERSION, table.shape[0], table.shape[1])
    body += table.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 13:
        raise DataError(f"{path}: truncated checkpoint")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DataError(f"{path}: checkpoint CRC mismatch")
    version, rows, cols = struct.unpack_from("<BII", body, 0)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    data = np.frombuffer(body, "<f4", rows * cols, 9)
    if 9 + 4 * rows * cols != len(body):
        raise DataError(f"{path}: checkpoint size mismatch")
    return data.reshape(rows, cols).astype(np.float64)
