"""Dataset ingestion, per-feature statistics, and encoding.

Instances live in two representations: human units (dicts of feature name to
value) and dense numeric vectors fed to the model and optimizer. The encoding
puts all continuous features first, min-max scaled to [0, 1], followed by a
one-hot (or relaxed score) block per categorical feature.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

NEGATIVE = "negative"
POSITIVE = "positive"


class DataError(ValueError):
    """Raised for schema violations, bad rows, or malformed inputs."""


@dataclass(frozen=True)
class FeatureSpec:
    """Per-feature schema: declared domain plus stats derived from data.

    Continuous features carry (min, max, precision_unit, mad); categorical
    features carry an ordered category list and optional per-category counts.
    min/max are authoritative for the domain: rows outside fail at load.
    """

    name: str
    kind: str
    min: float | None = None
    max: float | None = None
    precision_unit: float | None = None
    mad: float | None = None
    categories: tuple[str, ...] | None = None
    category_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if self.min is None or self.max is None or self.precision_unit is None:
                raise DataError(f"{self.name}: continuous feature needs min/max/precision_unit")
            if self.categories is not None:
                raise DataError(f"{self.name}: continuous feature cannot have categories")
            if not self.min < self.max:
                raise DataError(f"{self.name}: min must be < max")
            if not 0 < self.precision_unit <= self.max - self.min:
                raise DataError(f"{self.name}: precision_unit must be in (0, range]")
            if self.mad is not None and self.mad < 0:
                raise DataError(f"{self.name}: mad must be >= 0")
        elif self.kind == CATEGORICAL:
            if not self.categories or len(self.categories) < 2:
                raise DataError(f"{self.name}: categorical feature needs >= 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise DataError(f"{self.name}: duplicate categories")
            if self.min is not None or self.max is not None or self.precision_unit is not None:
                raise DataError(f"{self.name}: categorical feature cannot have min/max/precision")
        else:
            raise DataError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def range(self) -> float:
        return self.max - self.min

    def mad_weight(self) -> float:
        # 1/(1+MAD); a constant column (MAD = 0) simply gets weight 1.
        return 1.0 / (1.0 + (self.mad or 0.0))

    def to_dict(self) -> dict:
        if self.kind == CONTINUOUS:
            return {
                "name": self.name, "kind": self.kind, "min": self.min, "max": self.max,
                "precision_unit": self.precision_unit, "mad": self.mad,
            }
        return {
            "name": self.name, "kind": self.kind, "categories": list(self.categories),
            "category_counts": list(self.category_counts) if self.category_counts else None,
        }


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    label_name: str
    positive_class: str
    negative_class: str | None = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in schema")

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise DataError(f"unknown feature {name!r}")

    def to_dict(self) -> dict:
        return {
            "features": [f.to_dict() for f in self.features],
            "label": {
                "name": self.label_name,
                "positive": self.positive_class,
                "negative": self.negative_class,
            },
        }

    def fingerprint(self) -> str:
        """Stable hash of the declared schema, used to pair models with datasets."""
        decl = []
        for f in self.features:
            if f.kind == CONTINUOUS:
                decl.append([f.name, f.kind, f.min, f.max, f.precision_unit])
            else:
                decl.append([f.name, f.kind, list(f.categories)])
        blob = json.dumps({"features": decl, "label": self.label_name,
                           "positive": self.positive_class}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EncodingLayout:
    """Maps features to slices of the dense vector.

    Continuous features occupy single leading positions in schema order;
    each categorical feature then owns a contiguous block, one slot per
    category.
    """

    continuous: tuple[str, ...]
    categorical: tuple[str, ...]
    slices: dict = field(hash=False)
    width: int

    @staticmethod
    def for_schema(schema: Schema) -> "EncodingLayout":
        cont = tuple(f.name for f in schema.features if f.kind == CONTINUOUS)
        cat = tuple(f.name for f in schema.features if f.kind == CATEGORICAL)
        slices = {}
        for i, name in enumerate(cont):
            slices[name] = slice(i, i + 1)
        offset = len(cont)
        for name in cat:
            n = len(schema.feature(name).categories)
            slices[name] = slice(offset, offset + n)
            offset += n
        return EncodingLayout(cont, cat, slices, offset)


@dataclass(frozen=True)
class Dataset:
    schema: Schema
    rows: tuple[dict, ...]
    labels: tuple[int, ...]  # 0 = negative class, 1 = positive class
    name: str = "dataset"

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise DataError("rows and labels length mismatch")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def layout(self) -> EncodingLayout:
        return EncodingLayout.for_schema(self.schema)


def compute_mad(values) -> float:
    """Median absolute deviation around the interpolated median.

    The outer median (of the absolute deviations) takes the lower middle
    value for even counts; the center uses the ordinary interpolated median.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DataError("compute_mad: empty input")
    center = float(np.median(arr))
    devs = np.sort(np.abs(arr - center))
    return float(devs[(devs.size - 1) // 2])


def load_schema(path) -> Schema:
    """Read the schema JSON document (declared domains, no stats yet)."""
    with open(path) as fh:
        doc = json.load(fh)
    feats = []
    for fd in doc["features"]:
        if fd["kind"] == CONTINUOUS:
            feats.append(FeatureSpec(
                name=fd["name"], kind=CONTINUOUS, min=float(fd["min"]),
                max=float(fd["max"]), precision_unit=float(fd["precision_unit"])))
        else:
            feats.append(FeatureSpec(
                name=fd["name"], kind=CATEGORICAL,
                categories=tuple(str(c) for c in fd["categories"])))
    label = doc["label"]
    return Schema(tuple(feats), label["name"], str(label["positive"]),
                  str(label["negative"]) if label.get("negative") is not None else None)


def load_dataset(csv_path, schema_path, name: str | None = None) -> Dataset:
    """Load a CSV against its schema, computing per-feature stats.

    Rows violating the schema are rejected with their index reported.
    Derived stats (MAD, category counts) are recomputed from the rows, so
    reloading the same file always yields identical FeatureSpecs.
    """
    schema = load_schema(schema_path)
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for fname in schema.feature_names + [schema.label_name]:
            if fname not in header:
                raise DataError(f"missing column {fname!r} in {csv_path}")
        rows: list[dict] = []
        raw_labels: list[str] = []
        for idx, rec in enumerate(reader):
            row = {}
            for spec in schema.features:
                raw = rec[spec.name]
                if spec.kind == CONTINUOUS:
                    try:
                        v = float(raw)
                    except (TypeError, ValueError):
                        raise DataError(f"row {idx}: unparseable numeric {raw!r} for {spec.name}")
                    if math.isnan(v) or math.isinf(v):
                        raise DataError(f"row {idx}: non-finite value for {spec.name}")
                    if not spec.min <= v <= spec.max:
                        raise DataError(
                            f"row {idx}: {spec.name}={v} outside declared domain "
                            f"[{spec.min}, {spec.max}]")
                    row[spec.name] = v
                else:
                    if raw not in spec.categories:
                        raise DataError(f"row {idx}: unknown category {raw!r} for {spec.name}")
                    row[spec.name] = raw
            rows.append(row)
            raw_labels.append(rec[schema.label_name])
    if not rows:
        raise DataError(f"empty dataset: {csv_path}")

    classes = sorted(set(raw_labels))
    if schema.positive_class not in classes:
        raise DataError(f"positive class {schema.positive_class!r} absent from label column")
    negatives = [c for c in classes if c != schema.positive_class]
    if len(negatives) != 1:
        raise DataError(f"expected exactly 2 label classes, got {classes}")
    negative_class = schema.negative_class or negatives[0]
    labels = tuple(1 if lab == schema.positive_class else 0 for lab in raw_labels)

    feats = []
    for spec in schema.features:
        if spec.kind == CONTINUOUS:
            vals = [r[spec.name] for r in rows]
            feats.append(FeatureSpec(
                name=spec.name, kind=CONTINUOUS, min=spec.min, max=spec.max,
                precision_unit=spec.precision_unit, mad=compute_mad(vals)))
        else:
            counts = tuple(sum(1 for r in rows if r[spec.name] == c) for c in spec.categories)
            feats.append(FeatureSpec(
                name=spec.name, kind=CATEGORICAL, categories=spec.categories,
                category_counts=counts))
    final = Schema(tuple(feats), schema.label_name, schema.positive_class, negative_class)
    return Dataset(final, tuple(rows), labels, name or Path(csv_path).stem)


def validate_instance(instance: dict, schema: Schema) -> None:
    for spec in schema.features:
        if spec.name not in instance:
            raise DataError(f"missing feature {spec.name!r}")
        v = instance[spec.name]
        if spec.kind == CONTINUOUS:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise DataError(f"{spec.name}: expected a number, got {v!r}")
            if math.isnan(v) or math.isinf(v) or not spec.min <= v <= spec.max:
                raise DataError(f"{spec.name}={v} outside domain [{spec.min}, {spec.max}]")
        else:
            if v not in spec.categories:
                raise DataError(f"{spec.name}: unknown category {v!r}")


def encode(instance: dict, schema: Schema, layout: EncodingLayout | None = None) -> np.ndarray:
    """Instance in human units -> dense vector (continuous scaled, one-hots)."""
    validate_instance(instance, schema)
    layout = layout or EncodingLayout.for_schema(schema)
    vec = np.zeros(layout.width)
    for name in layout.continuous:
        spec = schema.feature(name)
        vec[layout.slices[name].start] = (instance[name] - spec.min) / spec.range
    for name in layout.categorical:
        spec = schema.feature(name)
        block = layout.slices[name]
        vec[block.start + spec.categories.index(instance[name])] = 1.0
    return vec


def encode_matrix(rows, schema: Schema, layout: EncodingLayout | None = None) -> np.ndarray:
    layout = layout or EncodingLayout.for_schema(schema)
    return np.stack([encode(r, schema, layout) for r in rows])


def snap_to_grid(value: float, spec: FeatureSpec, tie_away_from: float | None = None) -> float:
    """Round to the nearest precision_unit multiple anchored at the domain min.

    Exact half-unit ties round away from `tie_away_from` when given, else up.
    The result is clamped into [min, max].
    """
    k = (value - spec.min) / spec.precision_unit
    lo = math.floor(k)
    frac = k - lo
    if abs(frac - 0.5) < 1e-9:
        if tie_away_from is not None and value < tie_away_from:
            n = lo
        else:
            n = lo + 1
    else:
        n = lo + 1 if frac > 0.5 else lo
    snapped = spec.min + n * spec.precision_unit
    return min(max(snapped, spec.min), spec.max)


def decode(vec: np.ndarray, schema: Schema, layout: EncodingLayout | None = None) -> dict:
    """Dense vector -> instance. Continuous values snap to the precision grid;
    categorical blocks take the argmax (ties to the lowest category index)."""
    layout = layout or EncodingLayout.for_schema(schema)
    out = {}
    for name in layout.continuous:
        spec = schema.feature(name)
        raw = spec.min + float(vec[layout.slices[name].start]) * spec.range
        out[name] = snap_to_grid(raw, spec)
    for name in layout.categorical:
        spec = schema.feature(name)
        block = vec[layout.slices[name]]
        out[name] = spec.categories[int(np.argmax(block))]
    return out


@dataclass(frozen=True)
class Histogram:
    """Equal-width bins over the declared [min, max]; convention [lo, hi)
    with the final bin closed. Categorical features get one bin per category."""

    counts: tuple[int, ...]
    edges: tuple[float, ...] | None = None
    categories: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        d = {"counts": list(self.counts)}
        if self.edges is not None:
            d["edges"] = list(self.edges)
        if self.categories is not None:
            d["categories"] = list(self.categories)
        return d


def bin_edges(spec: FeatureSpec, bin_count: int) -> tuple[float, ...]:
    return tuple(spec.min + spec.range * i / bin_count for i in range(bin_count + 1))


def bin_index(value: float, spec: FeatureSpec, bin_count: int) -> int:
    """Bin of a continuous value under the [lo, hi) / last-closed convention."""
    idx = int(math.floor((value - spec.min) / spec.range * bin_count))
    return min(max(idx, 0), bin_count - 1)


def bin_feature(values, spec: FeatureSpec, bin_count: int = 10) -> Histogram:
    if spec.kind == CATEGORICAL:
        counts = [0] * len(spec.categories)
        for v in values:
            counts[spec.categories.index(v)] += 1
        return Histogram(tuple(counts), categories=spec.categories)
    if bin_count < 1:
        raise DataError("bin_count must be >= 1")
    counts = [0] * bin_count
    for v in values:
        counts[bin_index(v, spec, bin_count)] += 1
    return Histogram(tuple(counts), edges=bin_edges(spec, bin_count))
