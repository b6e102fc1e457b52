"""Field schemas, row encoding and day-based splitting for Avazu-style click logs.

Categorical cells are mapped with a seeded 64-bit hash into a fixed number of
buckets per field; slot 0 of every categorical field is reserved for
out-of-vocabulary (empty) cells. Numeric fields own a single slot whose value
carries the parsed number.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import _binary
from .errors import ConfigError, ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)

CATEGORICAL = "categorical"
NUMERIC = "numeric"

DEFAULT_LABEL = "click"
DEFAULT_IGNORE = ("id",)
AVAZU_DAY_SLICE = (0, 6)  # `hour` is YYMMDDHH

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    cardinality: int
    index_base: int

    @property
    def slots(self) -> int:
        return 1 if self.kind == NUMERIC else self.cardinality


@dataclass(frozen=True)
class FieldSchema:
    """Ordered feature groups and their position in the global feature space."""

    fields: tuple
    label_column: str = DEFAULT_LABEL
    hash_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) < 2:
            raise SchemaError(f"need at least 2 fields for pairwise interactions, got {len(self.fields)}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        base = 0
        for spec in self.fields:
            if spec.kind not in (CATEGORICAL, NUMERIC):
                raise SchemaError(f"field {spec.name!r}: unknown kind {spec.kind!r}")
            if spec.kind == CATEGORICAL and spec.cardinality < 2:
                raise SchemaError(f"field {spec.name!r}: categorical cardinality must be >= 2 "
                                  f"(slot 0 is out-of-vocabulary), got {spec.cardinality}")
            if spec.index_base != base:
                raise SchemaError(f"field {spec.name!r}: index_base {spec.index_base} != prefix sum {base}")
            base += spec.slots

    @classmethod
    def build(cls, specs, label_column=DEFAULT_LABEL, hash_seed=0):
        """Build from ``(name, kind, cardinality)`` triples, computing index bases."""
        fields, base = [], 0
        for name, kind, card in specs:
            card = 1 if kind == NUMERIC else int(card)
            fields.append(FieldSpec(name, kind, card, base))
            base += card
        return cls(tuple(fields), label_column, hash_seed)

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def num_features(self) -> int:
        last = self.fields[-1]
        return last.index_base + last.slots

    @property
    def names(self):
        return [f.name for f in self.fields]

    def field_of_feature(self) -> np.ndarray:
        """Array mapping each global feature index to its field position."""
        out = np.empty(self.num_features, dtype=np.int64)
        for t, spec in enumerate(self.fields):
            out[spec.index_base:spec.index_base + spec.slots] = t
        return out

    def to_dict(self) -> dict:
        return {
            "label_column": self.label_column,
            "hash_seed": self.hash_seed,
            "fields": [[f.name, f.kind, f.cardinality] for f in self.fields],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FieldSchema":
        return cls.build([tuple(x) for x in d["fields"]], d.get("label_column", DEFAULT_LABEL),
                         d.get("hash_seed", 0))


class Slot(NamedTuple):
    feature_index: int
    value: float


@dataclass(frozen=True)
class EncodedExample:
    label: int
    slots: tuple


def infer_schema(header: Sequence[str], kind_hints: Mapping[str, str] | None = None,
                 hash_buckets: Mapping[str, int] | int = 1000, *, label_column=DEFAULT_LABEL,
                 ignore_columns: Iterable[str] = DEFAULT_IGNORE, hash_seed=0) -> FieldSchema:
    """One field per feature column of ``header``.

    Columns default to categorical; ``kind_hints`` marks numeric ones.
    Categorical cardinality is ``buckets + 1`` because slot 0 is out-of-vocabulary.
    """
    header = list(header)
    if len(set(header)) != len(header):
        dupes = sorted({c for c in header if header.count(c) > 1})
        raise SchemaError(f"duplicate column names: {dupes}")
    kind_hints = dict(kind_hints or {})
    ignore = set(ignore_columns) | {label_column}
    columns = [c for c in header if c not in ignore]
    if len(columns) < 2:
        raise SchemaError(f"need at least 2 feature columns, got {columns}")
    unknown = set(kind_hints) - set(columns)
    if unknown:
        raise SchemaError(f"kind hints for unknown columns: {sorted(unknown)}")
    specs = []
    for col in columns:
        kind = kind_hints.get(col, CATEGORICAL)
        if kind == NUMERIC:
            specs.append((col, NUMERIC, 1))
            continue
        buckets = hash_buckets if isinstance(hash_buckets, int) else hash_buckets.get(col)
        if buckets is None:
            raise SchemaError(f"no hash bucket count for column {col!r}")
        if buckets < 1:
            raise SchemaError(f"column {col!r}: hash_buckets must be positive, got {buckets}")
        specs.append((col, kind, buckets + 1))
    return FieldSchema.build(specs, label_column, hash_seed)


def stable_hash(value: str, seed: int = 0) -> int:
    """Seeded 64-bit BLAKE2b hash of a UTF-8 string; identical on every platform."""
    salt = int(seed).to_bytes(16, "little", signed=False)
    digest = hashlib.blake2b(value.encode("utf-8"), digest_size=8, salt=salt).digest()
    return int.from_bytes(digest, "little")


def categorical_slot(schema: FieldSchema, spec: FieldSpec, cell: str) -> int:
    cell = cell.strip()
    if not cell:
        return spec.index_base
    return spec.index_base + 1 + stable_hash(cell, schema.hash_seed) % (spec.cardinality - 1)


def encode_features(schema: FieldSchema, raw: Mapping[str, str]):
    """Per-field ``(feature_index, value)`` pairs for one raw row (label ignored)."""
    slots = []
    for spec in schema.fields:
        try:
            cell = raw[spec.name]
        except KeyError:
            raise ParseError(f"missing column {spec.name!r}") from None
        if cell is None:
            cell = ""
        if spec.kind == NUMERIC:
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(f"column {spec.name!r}: cannot parse {cell!r} as a number") from None
            if not np.isfinite(value):
                raise ParseError(f"column {spec.name!r}: non-finite value {cell!r}")
            slots.append(Slot(spec.index_base, value))
        else:
            slots.append(Slot(categorical_slot(schema, spec, cell), 1.0))
    return tuple(slots)


def parse_label(cell) -> int:
    cell = (cell or "").strip()
    if cell in ("0", "1"):
        return int(cell)
    raise ParseError(f"label must be 0 or 1, got {cell!r}")


def encode_row(schema: FieldSchema, raw: Mapping[str, str]) -> EncodedExample:
    if schema.label_column not in raw:
        raise ParseError(f"missing label column {schema.label_column!r}")
    return EncodedExample(parse_label(raw[schema.label_column]), encode_features(schema, raw))


@dataclass
class Dataset:
    """Encoded examples stored column-wise.

    ``indices`` and ``values`` are ``[N, f]``; ``labels`` is ``[N]`` int8.
    """

    schema: FieldSchema
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    source: str = ""
    split: str = ""
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        n, f = len(self.labels), self.schema.num_fields
        if self.indices.shape != (n, f) or self.values.shape != (n, f):
            raise SchemaError(f"indices {self.indices.shape} / values {self.values.shape} "
                              f"do not match {n} examples x {f} fields")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> EncodedExample:
        return EncodedExample(int(self.labels[i]),
                              tuple(Slot(int(j), float(v)) for j, v in zip(self.indices[i], self.values[i])))

    def __iter__(self) -> Iterator[EncodedExample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def take(self, rows, split=None) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.schema, self.indices[rows], self.values[rows], self.labels[rows],
                       self.source, split or self.split)

    def validate(self):
        """Raise SchemaError unless every slot lies inside its field's range."""
        for t, spec in enumerate(self.schema.fields):
            col = self.indices[:, t]
            bad = (col < spec.index_base) | (col >= spec.index_base + spec.slots)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise SchemaError(f"row {row}: field {spec.name!r} index {col[row]} out of range")
            if spec.kind == CATEGORICAL and not np.all(self.values[:, t] == 1.0):
                raise SchemaError(f"field {spec.name!r}: categorical values must be 1.0")

    @classmethod
    def from_examples(cls, schema, examples: Iterable[EncodedExample], source="", split="", rejected=0):
        examples = list(examples)
        f = schema.num_fields
        idx = np.array([[s.feature_index for s in ex.slots] for ex in examples], dtype=np.int64).reshape(-1, f)
        val = np.array([[s.value for s in ex.slots] for ex in examples], dtype=np.float64).reshape(-1, f)
        lab = np.array([ex.label for ex in examples], dtype=np.int8)
        return cls(schema, idx, val, lab, source, split, rejected)


def encode_rows(schema: FieldSchema, rows: Iterable[Mapping[str, str]], source="", split="") -> Dataset:
    """Encode a row stream; malformed rows are rejected and counted, never imputed."""
    examples, rejected = [], 0
    for lineno, raw in enumerate(rows):
        try:
            examples.append(encode_row(schema, raw))
        except ParseError as exc:
            rejected += 1
            log.debug("rejected row %d: %s", lineno, exc)
    if rejected:
        log.warning("%s: rejected %d malformed rows", source or "rows", rejected)
    return Dataset.from_examples(schema, examples, source, split, rejected)


def read_csv(path) -> Iterator[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        yield from csv.DictReader(fh)


def read_header(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise SchemaError(f"{path}: empty file or missing header")
    return header


def subsample(rows: Iterable, rate: float, seed=0) -> Iterator:
    """Keep each row independently with probability ``rate``."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"subsample rate must be in (0, 1], got {rate}")
    if rate == 1.0:
        yield from rows
        return
    rng = np.random.default_rng(seed)
    for row in rows:
        if rng.random() < rate:
            yield row


def split_by_day(rows: Iterable[Mapping[str, str]], schema: FieldSchema, day_column="hour",
                 last_day_val_fraction=0.5, seed=0, day_slice=AVAZU_DAY_SLICE, source=""):
    """Non-final days become training data; the final day is divided between
    validation and test by a seeded permutation.

    Returns ``(train, validation, test)``. Rows whose day cannot be read or
    that fail encoding are rejected and counted on the training set.
    """
    if not 0.0 <= last_day_val_fraction <= 1.0:
        raise ConfigError(f"last_day_val_fraction must be in [0, 1], got {last_day_val_fraction}")
    start, stop = day_slice
    by_day: dict = {}
    rejected = 0
    for raw in rows:
        day = (raw.get(day_column) or "").strip()[start:stop]
        if len(day) != stop - start:
            rejected += 1
            continue
        try:
            ex = encode_row(schema, raw)
        except ParseError:
            rejected += 1
            continue
        by_day.setdefault(day, []).append(ex)
    days = sorted(by_day)
    if len(days) < 2:
        raise SplitError(f"need at least 2 distinct days to split, found {len(days)}")
    train = [ex for d in days[:-1] for ex in by_day[d]]
    last = by_day[days[-1]]
    order = np.random.default_rng(seed).permutation(len(last))
    n_val = int(round(last_day_val_fraction * len(last)))
    val = [last[i] for i in np.sort(order[:n_val])]
    test = [last[i] for i in np.sort(order[n_val:])]
    if rejected:
        log.warning("%s: rejected %d rows during split", source or "rows", rejected)
    out = (Dataset.from_examples(schema, train, source, "train", rejected),
           Dataset.from_examples(schema, val, source, "validation"),
           Dataset.from_examples(schema, test, source, "test"))
    out[0].meta["days"] = days[:-1]
    out[1].meta["days"] = out[2].meta["days"] = days[-1:]
    return out


# -- encoded-dataset cache ---------------------------------------------------

DATA_MAGIC = b"FNFMDATA"
DATA_VERSION = 1


def save_dataset(ds: Dataset, path):
    w = _binary.Writer()
    w.json(ds.schema.to_dict())
    w.text(ds.source)
    w.text(ds.split)
    w.pack("QQ", len(ds), ds.rejected)
    w.raw(ds.indices.astype("<i8").tobytes())
    w.raw(ds.values.astype("<f8").tobytes())
    w.raw(ds.labels.astype("i1").tobytes())
    _binary.atomic_write(path, _binary.frame(DATA_MAGIC, DATA_VERSION, w.getvalue()))


def load_dataset(path) -> Dataset:
    body = _binary.unframe(Path(path).read_bytes(), DATA_MAGIC, DATA_VERSION, path)
    r = _binary.Reader(body, path)
    schema = FieldSchema.from_dict(r.json())
    source, split = r.text(), r.text()
    n, rejected = r.unpack("QQ")
    f = schema.num_fields
    idx = np.frombuffer(r.raw(8 * n * f), dtype="<i8").reshape(n, f)
    val = np.frombuffer(r.raw(8 * n * f), dtype="<f8").reshape(n, f)
    lab = np.frombuffer(r.raw(n), dtype="i1")
    ds = Dataset(schema, idx.astype(np.int64), val.astype(np.float64), lab.astype(np.int8),
                 source, split, rejected)
    ds.validate()
    return ds
