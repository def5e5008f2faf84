"""Memory bank of (hidden state, next-step target) pairs and exact kNN.

The bank is harvested from a frozen population model over the training
set: every supervised step contributes one entry, so the bank holds
sum over sequences of (T - 1) rows.  Retrieval is an exact linear scan
by squared L2 distance (squared: monotone in L2, cheaper, and the
reported distances are documented as squared) using a bounded heap;
ties are broken by insertion order.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, VersionError
from .events import EventSequence
from .model import ModelState, head_forward, unroll

BANK_MAGIC = b"EVSQBNK1"
BANK_VERSION = 1


@dataclass
class MemoryBank:
    """keys: (n, hidden_dim) hidden states; values: (n, n_target) binary
    next-step labels; provenance: (patient_id, step) per entry."""

    keys: np.ndarray
    values: np.ndarray
    provenance: list[tuple[str, int]]

    def __len__(self) -> int:
        return self.keys.shape[0]


@dataclass
class Neighborhood:
    """kNN result: row indices into the bank, squared L2 distances
    (non-decreasing), and the corresponding keys/values."""

    indices: np.ndarray
    distances: np.ndarray
    keys: np.ndarray
    values: np.ndarray


def build_memory(model: ModelState, train_data: list[EventSequence]) -> MemoryBank:
    """Hidden state after reading window t paired with the step t+1 target,
    for every supervised step of every training sequence."""
    keys, values, provenance = [], [], []
    for seq in train_data:
        n_sup = len(seq) - 1
        if n_sup < 1:
            continue
        states = unroll(model, seq.inputs[:n_sup])
        keys.append(states)
        values.append(seq.targets)
        provenance.extend((seq.patient_id, t + 1) for t in range(n_sup))
    if not keys:
        return MemoryBank(
            np.zeros((0, model.config.hidden_dim)),
            np.zeros((0, model.config.n_target)),
            [],
        )
    return MemoryBank(np.vstack(keys), np.vstack(values), provenance)


def knn(bank: MemoryBank, query: np.ndarray, k: int) -> Neighborhood:
    """Exact k nearest entries to `query`; if the bank holds fewer than k
    entries, all of them are returned."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(bank)
    if n == 0:
        raise ValueError("memory bank is empty")
    query = np.asarray(query, dtype=np.float64)
    diff = bank.keys - query
    dists = np.einsum("ij,ij->i", diff, diff)
    # (distance, insertion index) pairs make the heap's tie-break explicit.
    picked = heapq.nsmallest(min(k, n), zip(dists.tolist(), range(n)))
    indices = np.array([i for _, i in picked], dtype=np.int64)
    return Neighborhood(
        indices=indices,
        distances=np.array([d for d, _ in picked]),
        keys=bank.keys[indices],
        values=bank.values[indices],
    )


def subpop_head_loss(model: ModelState, neighborhood: Neighborhood) -> float:
    """Summed BCE of the model's output head applied to retrieved hidden
    states against their stored next-step labels."""
    from .model import bce_components

    preds = head_forward(model, neighborhood.keys)
    return float(np.sum(bce_components(neighborhood.values, preds)))


def save_bank(bank: MemoryBank, path) -> None:
    """Versioned binary container: header, keys as little-endian float64,
    values as packed bits, provenance as length-prefixed UTF-8."""
    n, h = bank.keys.shape
    n_target = bank.values.shape[1]
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<I", BANK_VERSION))
        fh.write(struct.pack("<3Q", n, h, n_target))
        fh.write(bank.keys.astype("<f8").tobytes())
        fh.write(np.packbits(bank.values.astype(bool).ravel()).tobytes())
        for pid, step in bank.provenance:
            encoded = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", step))


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise VersionError(f"{path}: not a memory bank file (bad magic)")
    off = len(BANK_MAGIC)
    try:
        (version,) = struct.unpack_from("<I", raw, off)
        off += 4
        if version != BANK_VERSION:
            raise VersionError(f"{path}: unsupported bank format version {version}")
        n, h, n_target = struct.unpack_from("<3Q", raw, off)
        off += 24
        end = off + 8 * n * h
        if end > len(raw):
            raise FormatError(f"{path}: truncated bank file")
        keys = np.frombuffer(raw[off:end], dtype="<f8").reshape(n, h).copy()
        off = end
        n_bits = n * n_target
        n_bytes = (n_bits + 7) // 8
        end = off + n_bytes
        if end > len(raw):
            raise FormatError(f"{path}: truncated bank file")
        bits = np.unpackbits(
            np.frombuffer(raw[off:end], dtype=np.uint8), count=n_bits
        )
        values = bits.reshape(n, n_target).astype(np.float64)
        off = end
        provenance = []
        for _ in range(n):
            (plen,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + plen + 8 > len(raw):
                raise FormatError(f"{path}: truncated bank file")
            pid = raw[off : off + plen].decode("utf-8")
            off += plen
            (step,) = struct.unpack_from("<Q", raw, off)
            off += 8
            provenance.append((pid, int(step)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated bank file") from exc
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in bank file")
    return MemoryBank(keys, values, provenance)
