"""Event sequences: windowing, synthetic populations, splits and file I/O.

Dataset file (JSON lines)::

    line 1  {"format_version": 1, "vocab": {...}, "vocab_hash": "...",
             "W": 24.0, "seed": 7, "split_ratio": 0.8}
    line k  {"id": "s00012", "split": "train", "windows": [[0, 4], [], [3]]}

Each window is the sorted list of event indices whose bit is set. The last
(possibly partial) window of a stream is kept. ``split`` is ``train`` or
``test``; it may be omitted for unsplit collections.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng, seed_split

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class EventVocabulary:
    input_names: tuple
    target_indices: tuple

    def __post_init__(self):
        names = tuple(self.input_names)
        targets = tuple(int(i) for i in self.target_indices)
        object.__setattr__(self, "input_names", names)
        object.__setattr__(self, "target_indices", targets)
        if len(set(names)) != len(names):
            raise ValueError("event names must be unique")
        if not targets:
            raise ValueError("target set must be non-empty")
        if list(targets) != sorted(set(targets)) or targets[0] < 0 or targets[-1] >= len(names):
            raise ValueError("target indices must be sorted, unique and inside the vocabulary")

    @classmethod
    def default(cls, n_events: int) -> "EventVocabulary":
        return cls(tuple(f"e{j:03d}" for j in range(n_events)), tuple(range(n_events)))

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_targets(self) -> int:
        return len(self.target_indices)

    @property
    def target_names(self) -> list:
        return [self.input_names[j] for j in self.target_indices]

    def to_json(self) -> dict:
        return {"input_names": list(self.input_names),
                "target_indices": list(self.target_indices)}

    @classmethod
    def from_json(cls, obj: dict) -> "EventVocabulary":
        return cls(tuple(obj["input_names"]), tuple(obj["target_indices"]))

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


@dataclass
class RawStream:
    admission_id: str
    events: list  # (hours since admission, event index)


@dataclass
class WindowedSequence:
    admission_id: str
    windows: np.ndarray  # (T, |E|) uint8

    def __len__(self):
        return len(self.windows)

    def __eq__(self, other):
        return (isinstance(other, WindowedSequence) and self.admission_id == other.admission_id
                and self.windows.shape == other.windows.shape
                and bool(np.array_equal(self.windows, other.windows)))


@dataclass
class DatasetSplit:
    train: list
    test: list
    ratio: float = 0.8
    seed: int = 0


def window_segment(stream: RawStream, W: float, vocab: EventVocabulary) -> WindowedSequence:
    """Aggregate timestamped events into binary windows ``[iW, (i+1)W)``."""
    if not W > 0:
        raise ValueError(f"window length must be positive, got {W}")
    E = vocab.n_inputs
    if not stream.events:
        return WindowedSequence(stream.admission_id, np.zeros((0, E), dtype=np.uint8))
    times = np.array([float(t) for t, _ in stream.events])
    idx = np.array([int(j) for _, j in stream.events])
    if np.any(~np.isfinite(times)) or np.any(times < 0):
        raise ValueError(f"{stream.admission_id}: timestamps must be finite and >= 0")
    bad = (idx < 0) | (idx >= E)
    if np.any(bad):
        raise ValueError(f"{stream.admission_id}: event index {int(idx[bad][0])} "
                         f"outside vocabulary of size {E}")
    win = np.floor(times / W).astype(np.int64)
    out = np.zeros((int(win.max()) + 1, E), dtype=np.uint8)
    out[win, idx] = 1
    return WindowedSequence(stream.admission_id, out)


# -- synthetic population --------------------------------------------------

@dataclass
class SyntheticWorld:
    """K latent subpopulations, each a first-order logistic Markov chain.

    ``A`` is ``(K, E, E)``, ``b`` and ``rho`` are ``(K, E)``, ``pi`` is ``(K,)``.
    ``labels`` maps sequence ids to their latent subpopulation once data has
    been generated; it is reference data for the oracle only.
    """
    A: np.ndarray
    b: np.ndarray
    pi: np.ndarray
    rho: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        K, E, _ = self.A.shape
        if K < 1 or self.b.shape != (K, E) or self.rho.shape != (K, E) or self.pi.shape != (K,):
            raise ValueError("inconsistent SyntheticWorld shapes")
        if abs(self.pi.sum() - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise ValueError("mixing weights must lie on the simplex")
        for a in (self.A, self.b, self.rho):
            if not np.all(np.isfinite(a)):
                raise ValueError("SyntheticWorld tensors must be finite")

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def n_events(self) -> int:
        return self.A.shape[1]

    def to_json(self) -> dict:
        return {"K": self.K, "n_events": self.n_events, "A": self.A.tolist(),
                "b": self.b.tolist(), "pi": self.pi.tolist(), "rho": self.rho.tolist(),
                "labels": dict(sorted(self.labels.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticWorld":
        return cls(np.array(obj["A"], dtype=np.float64), np.array(obj["b"], dtype=np.float64),
                   np.array(obj["pi"], dtype=np.float64), np.array(obj["rho"], dtype=np.float64),
                   {k: int(v) for k, v in obj.get("labels", {}).items()})


WORLD_STYLES = ("markers", "plain")


def make_world(K: int, n_events: int, seed: int, *, style: str = "markers",
               rank: int = 30, strength: float = 4.0, base_rate: tuple = (-4.0, -2.0),
               shift: float = 1.0, marker_on: float = 3.0, marker_off: float = -5.0,
               pi=None) -> SyntheticWorld:
    """Random heterogeneous world.

    Every subpopulation shares baseline log-odds drawn from ``base_rate``,
    adds its own offsets (scale ``shift``) and its own dense low-rank
    transition matrix ``strength * U V^T`` (``rank`` factors).

    ``style="markers"`` reserves events ``0..K-1`` as subpopulation markers:
    marker ``k`` fires with log-odds ``marker_on`` in every window of a
    subpopulation-``k`` sequence and ``marker_off`` otherwise, independent of
    the history. This keeps the latent label recoverable from the data, so
    the gap between a fitted model and the oracle measures modelling error
    rather than irreducible label uncertainty. ``style="plain"`` has no
    markers. ``K == 1`` gives a homogeneous population.
    """
    if K < 1 or n_events < 1:
        raise ValueError("need K >= 1 and at least one event type")
    if style not in WORLD_STYLES:
        raise ValueError(f"unknown world style {style!r}")
    n_mark = K if style == "markers" and K > 1 else 0
    if n_mark > n_events:
        raise ValueError("markers world needs at least K event types")
    rank = max(1, min(rank, n_events))
    rng = Rng(seed)
    shared = rng.uniform(base_rate[0], base_rate[1], n_events)
    A = np.zeros((K, n_events, n_events))
    b = np.zeros((K, n_events))
    scale = strength * math.sqrt(5.0 / (rank * n_events))
    for k in range(K):
        U, V = rng.normal((n_events, rank)), rng.normal((n_events, rank))
        A[k] = scale * (U @ V.T)
        b[k] = shared + shift * rng.normal(n_events)
        if n_mark:
            A[k, :n_mark] = 0.0
            b[k, :n_mark] = marker_off
            b[k, k] = marker_on
    rho = 1.0 / (1.0 + np.exp(-b))
    weights = np.full(K, 1.0 / K) if pi is None else np.asarray(pi, dtype=np.float64)
    return SyntheticWorld(A, b, weights, rho)


def generate_synthetic(world: SyntheticWorld, n_sequences: int, length_range: tuple,
                       seed: int, id_prefix: str = "s"):
    """Sample sequences; returns ``(sequences, labels)``.

    Sequence ``i`` draws from its own stream ``seed_split(seed, i)`` so any
    subset can be regenerated independently.
    """
    lo, hi = length_range
    if lo < 2 or hi < lo:
        raise ValueError(f"length range must satisfy 2 <= min <= max, got {length_range}")
    E = world.n_events
    width = len(str(max(n_sequences - 1, 0)))
    seqs, labels = [], []
    for i in range(n_sequences):
        rng = Rng(seed_split(seed, i))
        k = rng.categorical(world.pi)
        T = rng.integers(lo, hi)
        u = rng.random((T, E))
        y = np.zeros((T, E), dtype=np.uint8)
        y[0] = u[0] < world.rho[k]
        Ak, bk = world.A[k], world.b[k]
        for t in range(T - 1):
            rate = 1.0 / (1.0 + np.exp(-(Ak @ y[t] + bk)))
            y[t + 1] = u[t + 1] < rate
        seqs.append(WindowedSequence(f"{id_prefix}{i:0{width}d}", y))
        labels.append(k)
    return seqs, labels


def oracle_predict(world: SyntheticWorld, k: int, y_t) -> np.ndarray:
    """Exact next-window event probabilities for subpopulation ``k``."""
    if not 0 <= k < world.K:
        raise ValueError(f"subpopulation {k} outside 0..{world.K - 1}")
    active = np.flatnonzero(np.asarray(y_t))
    logit = world.b[k].copy()
    for j in active:
        logit += world.A[k][:, j]
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    e = np.exp(logit[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def oracle_sequence(world: SyntheticWorld, k: int, windows: np.ndarray) -> np.ndarray:
    """Oracle predictions for steps ``1..T-1`` of one sequence, ``(T-1, |E|)``."""
    return np.stack([oracle_predict(world, k, y) for y in windows[:-1]])


# -- splits ----------------------------------------------------------------

def _split_point(n: int, frac: float) -> int:
    return int(math.floor(n * frac + 1e-9))


def split_train_test(sequences: list, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stable shuffle then cut at ``floor(N * ratio)``, keeping at least one test item."""
    n = len(sequences)
    if n < 2:
        raise ValueError("need at least two sequences to split")
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    order = Rng(seed_split(seed, 0x5EED)).permutation(n)
    cut = min(max(_split_point(n, ratio), 1), n - 1)
    return DatasetSplit([sequences[i] for i in order[:cut]],
                        [sequences[i] for i in order[cut:]], ratio, seed)


def split_validation(sequences: list, fraction: float = 0.1, seed: int = 0):
    """Hold out the last ``fraction`` of a stable shuffle. Returns ``(train, val)``."""
    if not 0 < fraction < 1:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(sequences)
    if n < 2:
        raise ValueError("need at least two sequences to carve out a validation set")
    order = Rng(seed_split(seed, 0x7A1)).permutation(n)
    n_val = min(max(_split_point(n, fraction), 1), n - 1)
    return ([sequences[i] for i in order[:n - n_val]],
            [sequences[i] for i in order[n - n_val:]])


def occurrence_counts(sequences: list, n_events: int):
    counts = np.zeros(n_events, dtype=np.int64)
    total = 0
    for s in sequences:
        counts += s.windows.sum(axis=0, dtype=np.int64)
        total += len(s)
    return counts, total


# -- file I/O --------------------------------------------------------------

def save_dataset(path, split: DatasetSplit | None, vocab: EventVocabulary, W: float = 24.0,
                 sequences: list | None = None) -> None:
    """Write a split (or a bare list of ``sequences``) as JSON lines."""
    header = {"format_version": FORMAT_VERSION, "vocab": vocab.to_json(),
              "vocab_hash": vocab.hash(), "W": float(W),
              "seed": None if split is None else split.seed,
              "split_ratio": None if split is None else split.ratio}
    lines = [canonical_json(header)]
    groups = [(None, sequences or [])] if split is None else [("train", split.train),
                                                              ("test", split.test)]
    for tag, seqs in groups:
        for s in seqs:
            rec = {"id": s.admission_id,
                   "windows": [np.flatnonzero(w).tolist() for w in s.windows]}
            if tag is not None:
                rec["split"] = tag
            lines.append(canonical_json(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, vocab: EventVocabulary | None = None):
    """Read a dataset file. Returns ``(DatasetSplit, EventVocabulary, header)``.

    Records without a ``split`` tag land in ``train``. If ``vocab`` is given
    its hash must match the file's.
    """
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
        file_vocab = EventVocabulary.from_json(header["vocab"])
        version = header["format_version"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc})") from None
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: line 1: unsupported format_version {version}")
    if header.get("vocab_hash", file_vocab.hash()) != file_vocab.hash():
        raise DatasetFormatError(f"{path}: line 1: vocab_hash does not match embedded vocabulary")
    if vocab is not None and vocab.hash() != file_vocab.hash():
        raise DatasetFormatError(f"{path}: vocabulary hash mismatch "
                                 f"({file_vocab.hash()[:12]} != {vocab.hash()[:12]})")
    E = file_vocab.n_inputs
    train, test = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            windows = np.zeros((len(rec["windows"]), E), dtype=np.uint8)
            for t, bits in enumerate(rec["windows"]):
                if any((not isinstance(j, int)) or j < 0 or j >= E for j in bits):
                    raise ValueError("event index outside vocabulary")
                windows[t, bits] = 1
            seq = WindowedSequence(str(rec["id"]), windows)
            tag = rec.get("split", "train")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc})") from None
        if tag not in ("train", "test"):
            raise DatasetFormatError(f"{path}: line {lineno}: unknown split {tag!r}")
        (train if tag == "train" else test).append(seq)
    ids = [s.admission_id for s in train + test]
    if len(set(ids)) != len(ids):
        raise DatasetFormatError(f"{path}: duplicate sequence ids")
    ratio = header.get("split_ratio")
    split = DatasetSplit(train, test, 0.8 if ratio is None else ratio, header.get("seed") or 0)
    return split, file_vocab, header


# -- batching --------------------------------------------------------------

@dataclass
class Batch:
    """Right-padded tensors for a group of sequences.

    ``X`` ``(T, B, |E|)`` holds inputs ``y_1..y_{T-1}``, ``Y`` ``(T, B, |E'|)``
    the targets ``y_2..y_T``. ``weights`` ``(T, B)`` is ``1 / (B * steps_b)``
    on real steps and zero on padding, so a weighted sum of per-step losses
    is the batch mean of per-sequence mean losses.
    """
    X: np.ndarray
    Y: np.ndarray
    weights: np.ndarray
    steps: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.weights > 0


def make_batch(sequences: list, target_indices) -> Batch:
    if not sequences:
        raise ValueError("empty batch")
    steps = np.array([len(s) - 1 for s in sequences])
    if np.any(steps < 1):
        raise ValueError("every sequence needs at least two windows")
    T, B = int(steps.max()), len(sequences)
    E = sequences[0].windows.shape[1]
    tgt = np.asarray(target_indices)
    X = np.zeros((T, B, E))
    Y = np.zeros((T, B, len(tgt)))
    weights = np.zeros((T, B))
    for i, s in enumerate(sequences):
        n = steps[i]
        X[:n, i] = s.windows[:-1]
        Y[:n, i] = s.windows[1:, tgt]
        weights[:n, i] = 1.0 / (B * n)
    return Batch(X, Y, weights, steps)
