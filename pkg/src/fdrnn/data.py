"""Piano-roll datasets: loading, binarisation, chunking and minibatching.

A dataset file is one JSON document::

    {"name": "...", "dims": 88, "pitch_offset": 21,
     "splits": {"train": [seq, ...], "valid": [...], "test": [...]}}

where a sequence is a list of time steps and a time step is a (possibly
empty) list of active MIDI pitch numbers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test")
DEFAULT_DIMS = 88
DEFAULT_OFFSET = 21
CHUNK_LEN = 100


class DatasetError(ValueError):
    pass


@dataclass
class PianoRollDataset:
    name: str
    splits: dict
    dims: int = DEFAULT_DIMS
    pitch_offset: int = DEFAULT_OFFSET

    def __post_init__(self):
        validate(self)

    def binary(self, split: str) -> list[np.ndarray]:
        """All sequences of ``split`` as ``(T, dims)`` 0/1 float arrays."""
        return [to_binary(seq, self.dims, self.pitch_offset) for seq in self.splits[split]]

    def sizes(self) -> dict:
        return {s: len(self.splits[s]) for s in SPLITS}

    def to_dict(self) -> dict:
        return {"name": self.name, "dims": self.dims, "pitch_offset": self.pitch_offset,
                "splits": {s: self.splits[s] for s in SPLITS}}


def validate(ds: PianoRollDataset) -> None:
    if ds.dims < 1:
        raise DatasetError(f"dims must be positive, got {ds.dims}")
    for split in SPLITS:
        if split not in ds.splits:
            raise DatasetError(f"missing split {split!r}")
        seqs = ds.splits[split]
        if not seqs:
            raise DatasetError(f"split {split!r} is empty")
        for i, seq in enumerate(seqs):
            if len(seq) < 1:
                raise DatasetError(f"splits.{split}[{i}]: empty sequence")
            for t, step in enumerate(seq):
                for q in step:
                    if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
                        raise DatasetError(f"splits.{split}[{i}][{t}]: pitch {q!r} is not an integer")
                    if not 0 <= q - ds.pitch_offset < ds.dims:
                        raise DatasetError(
                            f"splits.{split}[{i}][{t}]: pitch {q} outside "
                            f"[{ds.pitch_offset}, {ds.pitch_offset + ds.dims})")


def dataset_from_dict(d: dict) -> PianoRollDataset:
    try:
        return PianoRollDataset(
            name=str(d.get("name", "")),
            splits={s: d["splits"][s] for s in SPLITS},
            dims=int(d.get("dims", DEFAULT_DIMS)),
            pitch_offset=int(d.get("pitch_offset", DEFAULT_OFFSET)),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed dataset: {exc!r}") from exc


def load_dataset(path) -> PianoRollDataset:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise DatasetError(f"{path}: top level must be an object")
    return dataset_from_dict(d)


def save_dataset(ds: PianoRollDataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(ds.to_dict(), fh, separators=(",", ":"))


def to_binary(seq, dims: int = DEFAULT_DIMS, offset: int = DEFAULT_OFFSET) -> np.ndarray:
    out = np.zeros((len(seq), dims))
    for t, step in enumerate(seq):
        for q in step:
            if not 0 <= q - offset < dims:
                raise DatasetError(f"time step {t}: pitch {q} out of range")
            out[t, q - offset] = 1.0
    return out


@dataclass
class ChunkedBatch:
    """Fixed-length chunks; ``origins[i] = (sequence index, start, valid length)``."""

    data: np.ndarray
    origins: list = field(default_factory=list)

    def __len__(self):
        return self.data.shape[0]

    def valid_mask(self) -> np.ndarray:
        """``(N, chunk_len)`` flags, False on zero-prepended padding rows."""
        n, L = self.data.shape[:2]
        mask = np.zeros((n, L), dtype=bool)
        for i, (_, _, valid) in enumerate(self.origins):
            mask[i, L - valid:] = True
        return mask


def chunk_split(sequences, chunk_len: int = CHUNK_LEN) -> ChunkedBatch:
    """Cut every sequence into consecutive ``chunk_len`` pieces.

    A final piece shorter than ``chunk_len`` gets zero rows prepended.
    """
    if chunk_len < 2:
        raise ValueError("chunk_len must be at least 2")
    pieces, origins = [], []
    for i, seq in enumerate(sequences):
        seq = np.asarray(seq)
        for start in range(0, len(seq), chunk_len):
            part = seq[start:start + chunk_len]
            pad = chunk_len - len(part)
            if pad:
                part = np.concatenate([np.zeros((pad, seq.shape[1]), dtype=seq.dtype), part])
            pieces.append(part)
            origins.append((i, start, chunk_len - pad))
    if not pieces:
        raise ValueError("no sequences to chunk")
    return ChunkedBatch(np.stack(pieces), origins)


def unchunk(chunks: ChunkedBatch, n_sequences: int) -> list[np.ndarray]:
    """Inverse of :func:`chunk_split`: strip padding and concatenate."""
    parts: list[list] = [[] for _ in range(n_sequences)]
    L = chunks.data.shape[1]
    for piece, (i, start, valid) in zip(chunks.data, chunks.origins):
        parts[i].append((start, piece[L - valid:]))
    return [np.concatenate([p for _, p in sorted(ps, key=lambda s: s[0])]) for ps in parts]


def minibatches(n_items: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index arrays covering ``range(n_items)`` once."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def note_frequencies(sequences) -> np.ndarray:
    stacked = np.concatenate([np.asarray(s) for s in sequences])
    return stacked.mean(axis=0)


def marginal_baseline_nll(train_sequences, eval_sequences, eps: float = 1e-6) -> float:
    """Per-step NLL of predicting each note with its training-set frequency.

    Scored the same way as a model: every step after the first of each
    sequence, averaged within a sequence and then over sequences.
    """
    q = np.clip(note_frequencies(train_sequences), eps, 1.0 - eps)
    vals = []
    for x in eval_sequences:
        x = np.asarray(x)[1:]
        if len(x) == 0:
            continue
        ll = x * np.log(q) + (1.0 - x) * np.log1p(-q)
        vals.append(-ll.sum(axis=1).mean())
    return float(np.mean(vals))


# -- synthetic surrogate ---------------------------------------------------------

_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_PROGRESSIONS = ((0, 3, 4, 0), (0, 5, 3, 4), (0, 4, 5, 3, 4, 0), (0, 1, 4, 0), (5, 3, 4, 0))
_VOICE_RANGES = ((40, 55), (48, 64), (55, 70), (60, 79))


def _chord_pitches(key: int, degree: int) -> set:
    return {(key + _MAJOR[(degree + k) % 7]) % 12 for k in (0, 2, 4)}


def _voice(prev: int, classes: set, lo: int, hi: int, rng) -> int:
    options = [q for q in range(lo, hi + 1) if q % 12 in classes]
    dist = np.array([abs(q - prev) for q in options], dtype=float)
    w = np.exp(-dist / 2.0)
    return int(options[rng.choice(len(options), p=w / w.sum())])


def synthetic_chorales(seed: int = 0, n_train: int = 60, n_valid: int = 12, n_test: int = 12,
                       min_len: int = 40, max_len: int = 140) -> PianoRollDataset:
    """Four-voice chorale-like piano rolls with held chords and smooth voice leading.

    A small stand-in with the same file schema and statistics in the same
    spirit as real chorale data (about four active notes, strong step-to-step
    persistence), used for desk-scale training checks.
    """
    rng = np.random.default_rng(seed)

    def one_sequence():
        key = int(rng.integers(0, 12))
        length = int(rng.integers(min_len, max_len + 1))
        voices = [int(rng.integers(lo, hi + 1)) for lo, hi in _VOICE_RANGES]
        seq = []
        while len(seq) < length:
            prog = _PROGRESSIONS[int(rng.integers(len(_PROGRESSIONS)))]
            for degree in prog:
                classes = _chord_pitches(key, degree)
                voices = [_voice(v, classes, lo, hi, rng) for v, (lo, hi) in zip(voices, _VOICE_RANGES)]
                hold = int(rng.choice([1, 2, 2, 4]))
                seq.extend([sorted(set(voices))] * hold)
        return [list(s) for s in seq[:length]]

    splits = {name: [one_sequence() for _ in range(n)]
              for name, n in (("train", n_train), ("valid", n_valid), ("test", n_test))}
    return PianoRollDataset(name=f"synthetic-chorales-{seed}", splits=splits)


def n_chunks(length: int, chunk_len: int = CHUNK_LEN) -> int:
    return math.ceil(length / chunk_len)
