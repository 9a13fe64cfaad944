"""Triage record model and dataset preparation.

Covers imputation/encoding, stratified splitting, SMOTE oversampling of
the minority class and class-weight computation.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .text import UNK, tokenize

CONDITIONS = ("pneumonia", "uti")
GENDERS = ("U", "M", "F")

CONTINUOUS_FEATURES = (
    "age_months",
    "weight_kg",
    "systolic_bp",
    "diastolic_bp",
    "resp_rate",
    "temp_c",
    "pulse",
)
CATEGORICAL_FEATURES = (
    "ctas",
    "arrival_method",
    "arrival_hour",
    "arrival_weekday",
    "arrival_month",
    "gender",
)
# Categoricals whose domain is closed; their vocabulary is the full domain.
FIXED_DOMAINS = {
    "ctas": (1, 2, 3, 4, 5),
    "arrival_hour": tuple(range(24)),
    "arrival_weekday": tuple(range(7)),
    "arrival_month": tuple(range(1, 13)),
    "gender": GENDERS,
}
OOV = "<OOV>"
STD_FLOOR = 1e-6

RECORD_FIELDS = (
    "notes",
    "medications",
    "symptoms",
    *CONTINUOUS_FEATURES,
    *CATEGORICAL_FEATURES,
)


@dataclass(frozen=True)
class TriageRecord:
    """One patient presentation at triage. Missing vitals are ``None``."""

    notes: str
    medications: tuple[str, ...]
    symptoms: tuple[str, ...]
    age_months: float
    weight_kg: float | None
    systolic_bp: float | None
    diastolic_bp: float | None
    resp_rate: float | None
    temp_c: float | None
    pulse: float | None
    ctas: int
    arrival_method: str | None
    arrival_hour: int
    arrival_weekday: int
    arrival_month: int
    gender: str

    def __post_init__(self):
        object.__setattr__(self, "medications", tuple(self.medications))
        object.__setattr__(self, "symptoms", tuple(self.symptoms))
        if self.ctas not in FIXED_DOMAINS["ctas"]:
            raise ValueError(f"ctas must be in 1..5, got {self.ctas!r}")
        if not 0 <= self.arrival_hour <= 23:
            raise ValueError(f"arrival_hour out of range: {self.arrival_hour!r}")
        if not 0 <= self.arrival_weekday <= 6:
            raise ValueError(f"arrival_weekday out of range: {self.arrival_weekday!r}")
        if not 1 <= self.arrival_month <= 12:
            raise ValueError(f"arrival_month out of range: {self.arrival_month!r}")
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if self.age_months is None or not math.isfinite(self.age_months) or self.age_months < 0:
            raise ValueError(f"age_months must be a non-negative number, got {self.age_months!r}")
        for name in CONTINUOUS_FEATURES[1:]:
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name} must be finite or missing, got {value!r}")
        if self.weight_kg is not None and self.weight_kg <= 0:
            raise ValueError(f"weight_kg must be positive, got {self.weight_kg!r}")

    def text_tokens(self) -> list[str]:
        toks = tokenize(self.notes)
        for item in self.medications:
            toks.extend(tokenize(item))
        for item in self.symptoms:
            toks.extend(tokenize(item))
        return toks

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in RECORD_FIELDS}
        d["medications"] = list(self.medications)
        d["symptoms"] = list(self.symptoms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TriageRecord:
        missing = [name for name in RECORD_FIELDS if name not in d]
        if missing:
            raise ValueError(f"record is missing fields: {', '.join(missing)}")
        return cls(**{name: d[name] for name in RECORD_FIELDS})


@dataclass(frozen=True)
class LabeledRecord:
    record: TriageRecord
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Dataset:
    """Labeled records for a single binary condition model."""

    condition: str
    records: tuple[LabeledRecord, ...]

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset(self.condition, tuple(self.records[i] for i in indices))

    def class_counts(self) -> tuple[int, int]:
        """Return ``(n_pos, n_neg)``."""
        n_pos = sum(r.label for r in self.records)
        return n_pos, len(self.records) - n_pos


def write_dataset(path, ds: Dataset) -> None:
    lines = []
    for lr in ds.records:
        d = lr.record.to_dict()
        d["label"] = lr.label
        lines.append(json.dumps(d, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_dataset(path, condition: str) -> Dataset:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                label = d.pop("label")
                records.append(LabeledRecord(TriageRecord.from_dict(d), int(label)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(condition, tuple(records))


def read_records(path) -> list[TriageRecord]:
    """Records from a dataset file; a ``label`` field, if present, is ignored."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                d.pop("label", None)
                records.append(TriageRecord.from_dict(d))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class EncoderSpec:
    """Preprocessing state fitted on the training split."""

    continuous_means: dict[str, float]
    continuous_stds: dict[str, float]
    categorical_modes: dict[str, object]
    categorical_vocabs: dict[str, tuple]
    token_vocab: tuple[str, ...]
    note_length: int

    @property
    def numeric_width(self) -> int:
        return len(CONTINUOUS_FEATURES) + sum(len(v) for v in self.categorical_vocabs.values())

    @property
    def n_continuous(self) -> int:
        return len(CONTINUOUS_FEATURES)

    @property
    def vocab_size(self) -> int:
        return len(self.token_vocab)

    def numeric_names(self) -> list[str]:
        names = list(CONTINUOUS_FEATURES)
        for feat in CATEGORICAL_FEATURES:
            names.extend(f"{feat}={v}" for v in self.categorical_vocabs[feat])
        return names

    def to_dict(self) -> dict:
        return {
            "continuous_means": dict(self.continuous_means),
            "continuous_stds": dict(self.continuous_stds),
            "categorical_modes": dict(self.categorical_modes),
            "categorical_vocabs": {k: list(v) for k, v in self.categorical_vocabs.items()},
            "token_vocab": list(self.token_vocab),
            "note_length": self.note_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncoderSpec:
        return cls(
            continuous_means={k: float(v) for k, v in d["continuous_means"].items()},
            continuous_stds={k: float(v) for k, v in d["continuous_stds"].items()},
            categorical_modes=dict(d["categorical_modes"]),
            categorical_vocabs={k: tuple(v) for k, v in d["categorical_vocabs"].items()},
            token_vocab=tuple(d["token_vocab"]),
            note_length=int(d["note_length"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> EncoderSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FeatureVector:
    numeric: np.ndarray
    tokens: np.ndarray


def _mode(values: Sequence):
    counts = Counter(values)
    # ties broken by first occurrence
    best = max(counts.values())
    for v in values:
        if counts[v] == best:
            return v


def fit_encoder(train: Dataset, L: int) -> EncoderSpec:
    if len(train) == 0:
        raise ValueError("cannot fit encoder on an empty dataset")
    if L < 1:
        raise ValueError(f"note length must be >= 1, got {L}")
    recs = [lr.record for lr in train.records]

    means, stds = {}, {}
    for name in CONTINUOUS_FEATURES:
        vals = np.array([getattr(r, name) for r in recs if getattr(r, name) is not None], dtype=float)
        if vals.size == 0:
            raise ValueError(f"feature has no observed values: {name}")
        means[name] = float(vals.mean())
        stds[name] = max(float(vals.std()), STD_FLOOR)

    modes, vocabs = {}, {}
    for name in CATEGORICAL_FEATURES:
        vals = [getattr(r, name) for r in recs if getattr(r, name) is not None]
        if not vals:
            raise ValueError(f"feature has no observed values: {name}")
        modes[name] = _mode(vals)
        if name in FIXED_DOMAINS:
            vocabs[name] = FIXED_DOMAINS[name]
        else:
            vocabs[name] = tuple(sorted(set(vals))) + (OOV,)

    counts = Counter()
    for r in recs:
        counts.update(r.text_tokens())
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return EncoderSpec(means, stds, modes, vocabs, (UNK, *ordered), L)


class _EncoderTables:
    """Lookup tables derived from an EncoderSpec, for fast bulk encoding."""

    def __init__(self, spec: EncoderSpec):
        self.token_index = {t: i for i, t in enumerate(spec.token_vocab)}
        self.offsets = {}
        self.cat_index = {}
        pos = len(CONTINUOUS_FEATURES)
        for feat in CATEGORICAL_FEATURES:
            vocab = spec.categorical_vocabs[feat]
            self.offsets[feat] = pos
            self.cat_index[feat] = {v: i for i, v in enumerate(vocab)}
            pos += len(vocab)


_TABLE_CACHE: dict[int, tuple[EncoderSpec, _EncoderTables]] = {}


def _tables(spec: EncoderSpec) -> _EncoderTables:
    hit = _TABLE_CACHE.get(id(spec))
    if hit is not None and hit[0] is spec:
        return hit[1]
    tables = _EncoderTables(spec)
    _TABLE_CACHE.clear()
    _TABLE_CACHE[id(spec)] = (spec, tables)
    return tables


def _encode_into(record: TriageRecord, spec: EncoderSpec, tables: _EncoderTables, numeric, tokens):
    for j, name in enumerate(CONTINUOUS_FEATURES):
        value = getattr(record, name)
        if value is None:
            value = spec.continuous_means[name]
        numeric[j] = (value - spec.continuous_means[name]) / spec.continuous_stds[name]
    for feat in CATEGORICAL_FEATURES:
        value = getattr(record, feat)
        if value is None:
            value = spec.categorical_modes[feat]
        index = tables.cat_index[feat]
        slot = index.get(value)
        if slot is None:
            # closed domains never reach here; open ones route to the OOV bucket
            slot = index.get(OOV, index.get(spec.categorical_modes[feat]))
        numeric[tables.offsets[feat] + slot] = 1.0
    idx = [tables.token_index.get(t, 0) for t in record.text_tokens()[: spec.note_length]]
    tokens[: len(idx)] = idx


def encode(record: TriageRecord, spec: EncoderSpec) -> FeatureVector:
    numeric = np.zeros(spec.numeric_width)
    tokens = np.zeros(spec.note_length, dtype=np.int64)
    _encode_into(record, spec, _tables(spec), numeric, tokens)
    return FeatureVector(numeric, tokens)


def encode_records(records: Sequence[TriageRecord], spec: EncoderSpec) -> tuple[np.ndarray, np.ndarray]:
    """Encode unlabeled records; returns ``(numeric, tokens)`` arrays."""
    n = len(records)
    numeric = np.zeros((n, spec.numeric_width))
    tokens = np.zeros((n, spec.note_length), dtype=np.int64)
    tables = _tables(spec)
    for i, rec in enumerate(records):
        _encode_into(rec, spec, tables, numeric[i], tokens[i])
    return numeric, tokens


def encode_dataset(ds: Dataset, spec: EncoderSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode every record; returns ``(numeric, tokens, labels)`` arrays."""
    numeric, tokens = encode_records([lr.record for lr in ds.records], spec)
    return numeric, tokens, ds.labels


# --------------------------------------------------------------------------
# splitting, oversampling, weighting


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``total`` items by ``ratios``; leftover goes to the largest fractional parts."""
    exact = [total * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(ds: Dataset, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> tuple[Dataset, ...]:
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    labels = ds.labels
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for cls in (1, 0):
        members = np.flatnonzero(labels == cls)
        if 0 < members.size < len(ratios):
            raise ValueError(
                f"class {cls} has {members.size} members, fewer than the {len(ratios)} splits"
            )
        members = members[rng.permutation(members.size)]
        start = 0
        for part, count in zip(parts, largest_remainder(members.size, ratios)):
            part.extend(members[start : start + count].tolist())
            start += count
    empty = [i for i, (p, r) in enumerate(zip(parts, ratios)) if r > 0 and not p]
    if empty:
        raise ValueError(f"{len(ds)} records are too few: split {empty[0]} would be empty")
    return tuple(ds.subset(sorted(p)) for p in parts)


def smote(
    numeric: np.ndarray,
    tokens: np.ndarray,
    labels: np.ndarray,
    n_continuous: int,
    target_ratio: float = 1.0,
    k: int = 15,
    seed: int = 0,
    return_parents: bool = False,
):
    """Oversample the minority class with SMOTE.

    Synthetic rows interpolate the first ``n_continuous`` numeric columns
    between a random minority sample and one of its ``k`` nearest minority
    neighbours. One-hot columns and token sequences are copied from the base
    sample. Synthetic rows are appended after the originals.

    With ``return_parents`` the ``(base, neighbour)`` row indices of each
    synthetic sample are returned as a fourth element.
    """
    labels = np.asarray(labels)
    if not 0 < target_ratio <= 1:
        raise ValueError(f"target_ratio must be in (0, 1], got {target_ratio}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    minority_label = 1 if n_pos <= n_neg else 0
    minority = np.flatnonzero(labels == minority_label)
    n_min, n_maj = minority.size, labels.size - minority.size
    if n_min < 2:
        raise ValueError("SMOTE requires >=2 minority samples")

    n_new = max(0, round(target_ratio * n_maj) - n_min)
    if n_new == 0:
        out = (numeric.copy(), tokens.copy(), labels.copy())
        return out + (np.zeros((0, 2), dtype=np.int64),) if return_parents else out

    k = min(k, n_min - 1)
    cont = numeric[minority, :n_continuous]
    sq = np.sum(cont**2, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * cont @ cont.T
    np.fill_diagonal(dist, np.inf)
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :k]

    rng = np.random.default_rng(seed)
    base = rng.integers(0, n_min, size=n_new)
    pick = rng.integers(0, k, size=n_new)
    u = rng.random(n_new)
    nbr = neighbours[base, pick]

    x = numeric[minority[base]]
    synth = x.copy()
    x_cont = x[:, :n_continuous]
    synth[:, :n_continuous] = x_cont + u[:, None] * (numeric[minority[nbr], :n_continuous] - x_cont)

    out = (
        np.concatenate([numeric, synth]),
        np.concatenate([tokens, tokens[minority[base]]]),
        np.concatenate([labels, np.full(n_new, minority_label, dtype=labels.dtype)]),
    )
    if return_parents:
        return out + (np.stack([minority[base], minority[nbr]], axis=1),)
    return out


def class_weights(train: Dataset) -> tuple[float, float]:
    """Positive-class weight ``N_neg / N_pos``; the negative weight is 1."""
    n_pos, n_neg = train.class_counts()
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"both classes must be present (n_pos={n_pos}, n_neg={n_neg})")
    return n_neg / n_pos, 1.0
