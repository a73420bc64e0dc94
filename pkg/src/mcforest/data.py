"""Dataset model, schema-driven CSV ingestion and the honest half-split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ImportError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class DataError(ValueError):
    """Raised for malformed input data or schema violations."""


class UnseenCategoryError(DataError):
    """An unordered feature carries a label that was not seen at training time."""


ORDERED = "ordered"
UNORDERED = "unordered"


@dataclass
class FeatureMeta:
    name: str
    kind: str = ORDERED
    categories: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (ORDERED, UNORDERED):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")

    @property
    def is_unordered(self) -> bool:
        return self.kind == UNORDERED

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "categories": list(self.categories)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMeta":
        return cls(d["name"], d["kind"], list(d.get("categories", [])))


@dataclass
class Schema:
    """Column roles of a data file.

    ``n_treatments`` may be ``None``, in which case it is inferred as
    ``max(treatment) + 1`` at load time.
    """

    outcome: str
    treatment: str
    features: list
    n_treatments: Optional[int] = None
    groups: list = field(default_factory=list)

    @classmethod
    def from_file(cls, path) -> "Schema":
        """Read a TOML schema file.

        Example::

            outcome = "y"
            treatment = "d"
            treatments = 2
            groups = ["female"]

            [features]
            age = "ordered"
            sector = "unordered"
        """
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise DataError(f"schema {path}: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "Schema":
        try:
            outcome = raw["outcome"]
            treatment = raw["treatment"]
            feats = raw["features"]
        except KeyError as exc:
            raise DataError(f"schema is missing key {exc.args[0]!r}") from None
        features = []
        for name, spec in feats.items():
            if isinstance(spec, str):
                features.append(FeatureMeta(name, spec))
            else:
                features.append(FeatureMeta(name, spec.get("kind", ORDERED), list(spec.get("categories", []))))
        names = [f.name for f in features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        return cls(outcome, treatment, features, raw.get("treatments"), list(raw.get("groups", [])))


@dataclass
class Sample:
    """Observations ``(y, d, x)`` plus optional group labels ``z``.

    Unordered features are stored in ``x`` as dense category indices
    (floats), in the order given by ``features[u].categories``.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    features: list
    n_treatments: int
    z: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        self.d = np.ascontiguousarray(self.d, dtype=np.int64)
        self.x = np.ascontiguousarray(np.atleast_2d(self.x), dtype=np.float64)
        if self.x.shape[0] != self.y.shape[0] and self.y.shape[0] > 0:
            self.x = self.x.reshape(self.y.shape[0], -1)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def kinds(self) -> np.ndarray:
        return np.array([1 if f.is_unordered else 0 for f in self.features], dtype=np.int8)

    @property
    def n_categories(self) -> np.ndarray:
        return np.array([len(f.categories) if f.is_unordered else 0 for f in self.features], dtype=np.int64)

    def validate(self, min_rows_per_arm: int = 1) -> "Sample":
        M = self.n_treatments
        if self.y.shape[0] != self.d.shape[0] or self.x.shape[0] != self.y.shape[0]:
            raise DataError("y, d and x must have the same number of rows")
        if self.x.shape[1] != len(self.features):
            raise DataError("x has %d columns but %d features are declared" % (self.x.shape[1], len(self.features)))
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise DataError("missing or non-finite values")
        if self.d.size and (self.d.min() < 0 or self.d.max() >= M):
            raise DataError("treatment out of range")
        counts = np.bincount(self.d, minlength=M)
        absent = [m for m in range(M) if counts[m] < min_rows_per_arm]
        if absent:
            raise DataError(f"treatment arm(s) {absent} absent from the data")
        for u, f in enumerate(self.features):
            if f.is_unordered:
                if len(f.categories) < 2:
                    raise DataError(f"unordered feature {f.name!r} needs at least 2 categories")
                col = self.x[:, u]
                if np.any(col != np.floor(col)) or col.min() < 0 or col.max() >= len(f.categories):
                    raise DataError(f"feature {f.name!r}: bad category index")
        return self

    def take(self, idx) -> "Sample":
        idx = np.asarray(idx, dtype=np.int64)
        return Sample(self.y[idx], self.d[idx], self.x[idx], self.features, self.n_treatments,
                      {k: v[idx] for k, v in self.z.items()})

    def with_outcome(self, y) -> "Sample":
        return Sample(np.asarray(y, dtype=np.float64), self.d, self.x, self.features, self.n_treatments, self.z)

    def canonical_order(self) -> np.ndarray:
        """Row permutation that depends only on row contents, not on input order."""
        keys = [self.y, self.d] + [self.x[:, u] for u in range(self.p - 1, -1, -1)]
        return np.lexsort(keys)

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.d, minlength=self.n_treatments)


@dataclass(frozen=True)
class SplitAssignment:
    indices_A: np.ndarray
    indices_B: np.ndarray
    seed: int


def _parse_float(text: str, row: int, col: str) -> float:
    if text is None or text.strip() == "":
        raise DataError(f"row {row}, column {col!r}: empty cell")
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema: Schema, prediction: bool = False) -> Sample:
    """Read a CSV file with a header row into a validated :class:`Sample`.

    Row numbers in error messages are 1-based data rows (the header is row 0).
    Unordered categories are indexed by first appearance unless the schema
    already fixes the encoding, in which case unknown labels are rejected.

    With ``prediction=True`` the outcome and treatment columns are optional
    (missing outcomes read as 0, missing treatments as -1) and arms need not
    all be present.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        has_y = schema.outcome in header or not prediction
        has_d = schema.treatment in header or not prediction
        needed = ([schema.outcome] if has_y else []) + ([schema.treatment] if has_d else [])
        needed += [f.name for f in schema.features] + list(schema.groups)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        features = [FeatureMeta(f.name, f.kind, list(f.categories)) for f in schema.features]
        fixed = [bool(f.categories) for f in features]
        lookup = [{lab: i for i, lab in enumerate(f.categories)} for f in features]
        ys, ds, xs = [], [], []
        zs = {g: [] for g in schema.groups}
        for row, rec in enumerate(reader, start=1):
            ys.append(_parse_float(rec[schema.outcome], row, schema.outcome) if has_y else 0.0)
            dval = _parse_float(rec[schema.treatment], row, schema.treatment) if has_d else -1.0
            if dval != int(dval):
                raise DataError(f"row {row}, column {schema.treatment!r}: treatment must be an integer")
            if has_d and schema.n_treatments is not None and not 0 <= dval < schema.n_treatments:
                raise DataError(f"row {row}: treatment out of range ({int(dval)} not in 0..{schema.n_treatments - 1})")
            ds.append(int(dval))
            xrow = []
            for u, f in enumerate(features):
                cell = rec[f.name]
                if f.is_unordered:
                    if cell is None or cell.strip() == "":
                        raise DataError(f"row {row}, column {f.name!r}: empty cell")
                    code = lookup[u].get(cell)
                    if code is None:
                        if fixed[u]:
                            raise UnseenCategoryError(f"row {row}, column {f.name!r}: unseen category {cell!r}")
                        code = len(f.categories)
                        f.categories.append(cell)
                        lookup[u][cell] = code
                    xrow.append(float(code))
                else:
                    xrow.append(_parse_float(cell, row, f.name))
            xs.append(xrow)
            for g in schema.groups:
                cell = rec[g]
                if cell is None or cell.strip() == "":
                    raise DataError(f"row {row}, column {g!r}: empty cell")
                zs[g].append(cell)
    if not ys:
        raise DataError(f"{path}: no data rows")
    M = schema.n_treatments if schema.n_treatments is not None else max(ds) + 1
    if prediction:
        x = np.array(xs, dtype=np.float64).reshape(len(ys), len(features))
        if not np.all(np.isfinite(x)):
            raise DataError("missing or non-finite values")
        return Sample(np.array(ys), np.array(ds), x, features, int(M), {g: np.array(v) for g, v in zs.items()})
    if min(ds) < 0:
        raise DataError("treatment out of range (negative value)")
    x = np.array(xs, dtype=np.float64).reshape(len(ys), len(features))
    sample = Sample(np.array(ys), np.array(ds), x, features, int(M), {g: np.array(v) for g, v in zs.items()})
    counts = sample.arm_counts()
    absent = [m for m in range(M) if counts[m] == 0]
    if absent:
        raise DataError(f"treatment arm(s) {absent} absent from the data")
    if sample.n < 2 * M:
        raise DataError(f"need at least {2 * M} rows for {M} treatments, got {sample.n}")
    return sample.validate()


def write_csv(sample: Sample, path, schema: Schema) -> None:
    """Write ``sample`` in the layout expected by :func:`load_csv` under ``schema``."""
    cols = [schema.outcome, schema.treatment] + [f.name for f in sample.features] + list(schema.groups)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(sample.n):
            rec = [repr(float(sample.y[i])), str(int(sample.d[i]))]
            for u, f in enumerate(sample.features):
                v = sample.x[i, u]
                rec.append(f.categories[int(v)] if f.is_unordered else repr(float(v)))
            rec.extend(str(sample.z[g][i]) for g in schema.groups)
            w.writerow(rec)


def encode_rows(raw: Sequence[Sequence], features: list) -> np.ndarray:
    """Encode raw feature rows (labels for unordered features) with a fixed encoding."""
    out = np.empty((len(raw), len(features)), dtype=np.float64)
    lookups = [{lab: i for i, lab in enumerate(f.categories)} if f.is_unordered else None for f in features]
    for i, rec in enumerate(raw):
        for u, f in enumerate(features):
            if f.is_unordered:
                code = lookups[u].get(rec[u] if isinstance(rec[u], str) else str(rec[u]))
                if code is None:
                    raise UnseenCategoryError(f"feature {f.name!r}: unseen category {rec[u]!r}")
                out[i, u] = code
            else:
                out[i, u] = float(rec[u])
    return out


def check_encoded(x: np.ndarray, features: list) -> np.ndarray:
    """Validate an already-encoded feature matrix against a fixed encoding."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != len(features):
        raise DataError(f"expected {len(features)} features, got {x.shape[1]}")
    for u, f in enumerate(features):
        if f.is_unordered:
            col = x[:, u]
            bad = (col < 0) | (col >= len(f.categories)) | (col != np.floor(col))
            if np.any(bad):
                raise UnseenCategoryError(f"feature {f.name!r}: unseen category code {col[bad][0]!r}")
    return x


def split_halves(sample: Sample, seed: int) -> SplitAssignment:
    """Random treatment-stratified split into a tree-building half A and an honest half B.

    Arms with an odd number of rows alternate which half receives the extra
    row, so ``|A|`` and ``|B|`` differ by at most one. The draw consumes rows
    in content order, so permuting the input rows permutes the result.
    """
    counts = sample.arm_counts()
    if np.any(counts < 2):
        bad = [m for m in range(sample.n_treatments) if counts[m] < 2]
        raise DataError(f"treatment arm(s) {bad} have fewer than 2 rows; cannot populate both halves")
    rng = np.random.default_rng(seed)
    order = sample.canonical_order()
    d_sorted = sample.d[order]
    a_parts, b_parts = [], []
    extra_to_a = True
    for m in range(sample.n_treatments):
        rows = order[d_sorted == m]
        rows = rows[rng.permutation(rows.size)]
        h = rows.size // 2
        if rows.size % 2:
            h += int(extra_to_a)
            extra_to_a = not extra_to_a
        a_parts.append(rows[:h])
        b_parts.append(rows[h:])
    A = np.sort(np.concatenate(a_parts))
    B = np.sort(np.concatenate(b_parts))
    return SplitAssignment(A, B, int(seed))
