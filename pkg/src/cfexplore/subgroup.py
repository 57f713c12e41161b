"""Subgroups, r-counterfactuals, and split-quality analytics.

A subgroup is a conjunction of per-feature ranges asserting a uniform model
prediction inside it. To probe whether the assertion is robust, one feature
at a time is relaxed to its full domain while every other feature is held
inside its subgroup range, and a counterfactual is sought for every member
(the r-counterfactual group for that feature). Valid counterfactuals whose
relaxed feature stays inside the subgroup range are witnesses against the
assertion; if no group has any, the assertion is supported.

Continuous subgroup ranges are half-open [lo, hi), closed at the domain
maximum, mirroring the histogram bin convention so range handles and bins
always agree.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

import numpy as np

from .data import (CATEGORICAL, CONTINUOUS, NEGATIVE, POSITIVE, DataError, Dataset,
                   EncodingLayout, FeatureSpec, Schema, bin_edges, bin_feature,
                   bin_index, encode_matrix)
from .engine import CfCandidate, CfConfig, CfConstraints, CfJob, CfSet, generate_cf_sets
from .model import MlpModel, classify, forward_batch


class SubgroupError(ValueError):
    """Raised for bad ranges or operations on unknown subgroups."""


# ---------------------------------------------------------------------------
# ranges and membership


def canonical_ranges(ranges: dict, schema: Schema) -> dict:
    """Validate and normalize a ranges request: {feature: {"lo","hi"} or
    {"categories": [...]}}. Unlisted features are unconstrained."""
    if ranges is None:
        ranges = {}
    out = {}
    for name, rule in ranges.items():
        spec = schema.feature(name)
        if spec.kind == CONTINUOUS:
            if not isinstance(rule, dict) or "lo" not in rule or "hi" not in rule:
                raise SubgroupError(f"{name}: continuous range needs lo/hi")
            lo, hi = float(rule["lo"]), float(rule["hi"])
            if not (spec.min <= lo <= hi <= spec.max):
                raise SubgroupError(f"{name}: [{lo}, {hi}] outside domain")
            out[name] = {"lo": lo, "hi": hi}
        else:
            cats = rule.get("categories") if isinstance(rule, dict) else None
            if not cats:
                raise SubgroupError(f"{name}: empty category subset")
            for c in cats:
                if c not in spec.categories:
                    raise SubgroupError(f"{name}: unknown category {c!r}")
            out[name] = {"categories": [c for c in spec.categories if c in set(cats)]}
    return out


def value_in_range(value, spec: FeatureSpec, rule: dict | None) -> bool:
    if rule is None:
        return True
    if spec.kind == CONTINUOUS:
        hi_closed = rule["hi"] >= spec.max
        if hi_closed:
            return rule["lo"] <= value <= rule["hi"]
        return rule["lo"] <= value < rule["hi"]
    return value in set(rule["categories"])


def row_in_ranges(row: dict, ranges: dict, schema: Schema) -> bool:
    return all(value_in_range(row[name], schema.feature(name), rule)
               for name, rule in ranges.items())


@dataclass(frozen=True)
class Subgroup:
    id: str
    name: str
    ranges: dict
    member_indices: tuple[int, ...]
    prediction_summary: dict
    parent_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id, "name": self.name, "parent_id": self.parent_id,
            "ranges": self.ranges, "member_count": len(self.member_indices),
            "member_indices": list(self.member_indices),
            "prediction_summary": self.prediction_summary,
        }


def prediction_summary(indices, predictions, labels) -> dict:
    pred = [predictions[i] for i in indices]
    lab = [labels[i] for i in indices]
    out = {
        "total": len(pred),
        "predicted": {
            NEGATIVE: sum(1 for p in pred if p == NEGATIVE),
            POSITIVE: sum(1 for p in pred if p == POSITIVE),
        },
        # rows whose prediction disagrees with the recorded label, keyed by
        # the predicted class (the hatched area of the stacked bar)
        "mispredicted": {
            NEGATIVE: sum(1 for p, l in zip(pred, lab) if p == NEGATIVE and l == 1),
            POSITIVE: sum(1 for p, l in zip(pred, lab) if p == POSITIVE and l == 0),
        },
    }
    return out


class SubgroupRegistry:
    """Owns the dataset/model pair and the immutable subgroup versions.

    Refinement never mutates: it creates a child linked to its parent, so the
    exploration history stays recoverable. Create/refine/copy/delete are
    serialized by a lock; reads are safe anywhere.
    """

    def __init__(self, dataset: Dataset, model: MlpModel, bin_count: int = 10):
        self.dataset = dataset
        self.model = model
        self.schema = dataset.schema
        self.layout = EncodingLayout.for_schema(self.schema)
        self.bin_count = bin_count
        self.encoded = encode_matrix(dataset.rows, self.schema, self.layout)
        self.probabilities = forward_batch(model, self.encoded)
        self.predictions = [classify(p) for p in self.probabilities]
        self._lock = threading.Lock()
        self._store: dict[str, Subgroup] = {}
        self._counter = itertools.count(1)

    # -- lifecycle ---------------------------------------------------------

    def _membership(self, ranges: dict) -> tuple[int, ...]:
        return tuple(i for i, row in enumerate(self.dataset.rows)
                     if row_in_ranges(row, ranges, self.schema))

    def _new(self, ranges: dict, name: str | None, parent_id: str | None) -> Subgroup:
        ranges = canonical_ranges(ranges, self.schema)
        members = self._membership(ranges)
        sid = f"sg-{next(self._counter)}"
        sg = Subgroup(
            id=sid, name=name or sid, ranges=ranges, member_indices=members,
            prediction_summary=prediction_summary(members, self.predictions,
                                                  self.dataset.labels),
            parent_id=parent_id)
        self._store[sid] = sg
        return sg

    def create(self, ranges: dict, name: str | None = None) -> Subgroup:
        with self._lock:
            return self._new(ranges, name, None)

    def refine(self, subgroup_id: str, ranges: dict, name: str | None = None) -> Subgroup:
        with self._lock:
            parent = self._get(subgroup_id)
            return self._new(ranges, name or parent.name, parent.id)

    def copy(self, subgroup_id: str) -> Subgroup:
        with self._lock:
            src = self._get(subgroup_id)
            return self._new(src.ranges, f"{src.name} (copy)", src.id)

    def delete(self, subgroup_id: str) -> None:
        with self._lock:
            self._get(subgroup_id)
            del self._store[subgroup_id]

    def _get(self, subgroup_id: str) -> Subgroup:
        if subgroup_id not in self._store:
            raise SubgroupError(f"unknown subgroup {subgroup_id!r}")
        return self._store[subgroup_id]

    def get(self, subgroup_id: str) -> Subgroup:
        with self._lock:
            return self._get(subgroup_id)

    def list(self) -> list[Subgroup]:
        with self._lock:
            return list(self._store.values())


def define_subgroup(registry: SubgroupRegistry, ranges: dict,
                    name: str | None = None) -> Subgroup:
    return registry.create(ranges, name)


def refine_subgroup(registry: SubgroupRegistry, subgroup_id: str, ranges: dict,
                    name: str | None = None) -> Subgroup:
    return registry.refine(subgroup_id, ranges, name)


# ---------------------------------------------------------------------------
# impurity analytics


def gini_impurity(labels) -> float:
    """1 - sum of squared class proportions; the empty set scores 0."""
    labels = list(labels)
    if not labels:
        return 0.0
    n = len(labels)
    counts = {}
    for l in labels:
        counts[l] = counts.get(l, 0) + 1
    return 1.0 - sum((c / n) ** 2 for c in counts.values())


def split_gain(values, labels, threshold=None, category=None) -> float:
    """Purity score of a split: 1 - (N_l/N) * gini(left) - (N_r/N) * gini(right).

    Continuous splits send value <= threshold left; categorical one-vs-rest
    splits send value == category left.
    """
    n = len(values)
    if n == 0:
        raise DataError("split_gain: empty data")
    if threshold is not None:
        left = [l for v, l in zip(values, labels) if v <= threshold]
        right = [l for v, l in zip(values, labels) if v > threshold]
    else:
        left = [l for v, l in zip(values, labels) if v == category]
        right = [l for v, l in zip(values, labels) if v != category]
    return 1.0 - (len(left) / n) * gini_impurity(left) \
               - (len(right) / n) * gini_impurity(right)


@dataclass(frozen=True)
class ImpurityProfile:
    split_points: tuple  # thresholds (continuous) or categories
    gains: tuple[float, ...]
    range_gini: float

    def to_dict(self) -> dict:
        return {"split_points": list(self.split_points), "gains": list(self.gains),
                "range_gini": self.range_gini}


def information_gain_profile(spec: FeatureSpec, values, labels,
                             bin_count: int = 10,
                             current_range: dict | None = None) -> ImpurityProfile:
    """Split-quality profile over the combined original + counterfactual data.

    Candidate split points are the interior histogram bin edges (continuous)
    or each category one-vs-rest. The range box intensity is the Gini
    impurity of the points inside the current range.
    """
    values = list(values)
    labels = list(labels)
    if not values:
        raise DataError("information_gain_profile: empty data")
    if spec.kind == CONTINUOUS:
        pts = bin_edges(spec, bin_count)[1:-1]
        gains = tuple(split_gain(values, labels, threshold=t) for t in pts)
    else:
        pts = spec.categories
        gains = tuple(split_gain(values, labels, category=c) for c in pts)
    inside = [l for v, l in zip(values, labels)
              if value_in_range(v, spec, current_range)]
    return ImpurityProfile(tuple(pts), gains, gini_impurity(inside))


# ---------------------------------------------------------------------------
# r-counterfactual groups


@dataclass(frozen=True)
class FlowLink:
    source_bin: int
    target_bin: int
    count: int

    def to_dict(self) -> dict:
        return {"source": self.source_bin, "target": self.target_bin, "count": self.count}


def flow_links(member_values, cf_values, valid_flags, spec: FeatureSpec,
               bin_count: int = 10) -> list[FlowLink]:
    """Origin-bin to counterfactual-bin links, valid pairs only."""
    counts: dict[tuple[int, int], int] = {}
    for ov, cv, ok in zip(member_values, cf_values, valid_flags):
        if not ok:
            continue
        if spec.kind == CONTINUOUS:
            key = (bin_index(ov, spec, bin_count), bin_index(cv, spec, bin_count))
        else:
            key = (spec.categories.index(ov), spec.categories.index(cv))
        counts[key] = counts.get(key, 0) + 1
    return [FlowLink(s, t, c) for (s, t), c in sorted(counts.items())]


@dataclass(frozen=True)
class RcfGroup:
    subgroup_id: str
    feature: str
    member_indices: tuple[int, ...]
    candidates: tuple[CfCandidate, ...]
    member_predictions: tuple[str, ...]
    inside_flags: tuple[bool, ...]
    origin_hist: dict
    cf_hist: dict
    flows: tuple[FlowLink, ...]
    inside_count: int
    outside_count: int
    invalid_count: int
    impurity: ImpurityProfile
    config_hash: str

    def inside_witnesses(self) -> list[dict]:
        """Valid counterfactuals whose relaxed feature stayed inside the range."""
        return [{"member_index": idx, "candidate": cand.to_dict()}
                for idx, cand, inside in zip(self.member_indices, self.candidates,
                                             self.inside_flags)
                if inside]

    def to_dict(self) -> dict:
        return {
            "subgroup_id": self.subgroup_id,
            "feature": self.feature,
            "member_indices": list(self.member_indices),
            "candidates": [c.to_dict() for c in self.candidates],
            "member_predictions": list(self.member_predictions),
            "summary": {
                "origin_hist": self.origin_hist,
                "cf_hist": self.cf_hist,
                "flows": [f.to_dict() for f in self.flows],
                "inside_count": self.inside_count,
                "outside_count": self.outside_count,
                "invalid_count": self.invalid_count,
                "impurity": self.impurity.to_dict(),
            },
            "config_hash": self.config_hash,
        }


def _class_histograms(spec, bin_count, origin_pairs, cf_pairs, invalid_pairs):
    """Stacked per-bin counts. origin/cf pairs are (value, class); invalid
    members stack grey bars at their origin value's bin."""
    def empty():
        n = bin_count if spec.kind == CONTINUOUS else len(spec.categories)
        return {NEGATIVE: [0] * n, POSITIVE: [0] * n, "invalid": [0] * n}

    def at(value):
        if spec.kind == CONTINUOUS:
            return bin_index(value, spec, bin_count)
        return spec.categories.index(value)

    origin = empty()
    for v, cls in origin_pairs:
        origin[cls][at(v)] += 1
    cf = empty()
    for v, cls in cf_pairs:
        cf[cls][at(v)] += 1
    for v in invalid_pairs:
        cf["invalid"][at(v)] += 1
    base = bin_feature([], spec, bin_count).to_dict()
    origin_hist = {**base, "counts": origin}
    cf_hist = {**base, "counts": cf}
    return origin_hist, cf_hist


def generate_rcf(registry: SubgroupRegistry, subgroup: Subgroup, feature: str,
                 config: CfConfig, batch_size: int = 256,
                 n_per_member: int = 1) -> RcfGroup:
    """One counterfactual per member with only `feature` free to leave the
    subgroup box. Members are processed in minibatches; per-member noise is
    keyed by (config.seed, dataset row index), so the output is independent
    of batch_size. Each member's target class is the flip of its prediction.
    """
    schema = registry.schema
    spec = schema.feature(feature)
    if not subgroup.member_indices:
        raise SubgroupError("empty subgroup")
    rules = {}
    for name, rule in subgroup.ranges.items():
        if name == feature:
            continue  # relaxed feature: full domain
        rules[name] = dict(rule)
    constraints = CfConstraints.from_dict(rules, schema)

    jobs = []
    for idx in subgroup.member_indices:
        target = NEGATIVE if registry.predictions[idx] == POSITIVE else POSITIVE
        cfg = CfConfig(**{**config.to_dict(),
                          "k_cfs": n_per_member, "target_class": target})
        jobs.append(CfJob(origin=dict(registry.dataset.rows[idx]),
                          constraints=constraints, config=cfg,
                          seed_key=(config.seed, idx)))
    sets = generate_cf_sets(schema, registry.model, jobs, batch_size=batch_size)

    members = subgroup.member_indices
    candidates = tuple(s.candidates[0] for s in sets)
    member_pred = tuple(registry.predictions[i] for i in members)
    range_rule = subgroup.ranges.get(feature)

    inside_flags = []
    for cand in candidates:
        inside_flags.append(bool(cand.valid) and
                            value_in_range(cand.instance[feature], spec, range_rule))
    inside = sum(inside_flags)
    invalid = sum(1 for c in candidates if not c.valid)
    outside = len(candidates) - inside - invalid

    origin_pairs = [(registry.dataset.rows[i][feature], registry.predictions[i])
                    for i in members]
    cf_pairs = [(c.instance[feature], classify(c.probability))
                for c in candidates if c.valid]
    invalid_origin_vals = [registry.dataset.rows[i][feature]
                           for i, c in zip(members, candidates) if not c.valid]
    origin_hist, cf_hist = _class_histograms(
        spec, registry.bin_count, origin_pairs, cf_pairs, invalid_origin_vals)

    flows = flow_links([registry.dataset.rows[i][feature] for i in members],
                       [c.instance[feature] for c in candidates],
                       [c.valid for c in candidates], spec, registry.bin_count)

    combined_vals = [v for v, _ in origin_pairs] + [v for v, _ in cf_pairs]
    combined_labels = [cls for _, cls in origin_pairs] + [cls for _, cls in cf_pairs]
    impurity = information_gain_profile(spec, combined_vals, combined_labels,
                                        registry.bin_count, range_rule)

    return RcfGroup(
        subgroup_id=subgroup.id, feature=feature, member_indices=members,
        candidates=candidates, member_predictions=member_pred,
        inside_flags=tuple(inside_flags),
        origin_hist=origin_hist, cf_hist=cf_hist, flows=tuple(flows),
        inside_count=inside, outside_count=outside, invalid_count=invalid,
        impurity=impurity, config_hash=config.content_hash())


def hypothesis_support(groups) -> dict:
    """Supported iff no r-counterfactual group found a valid counterfactual
    whose relaxed feature stayed inside its subgroup range; otherwise the
    witnesses are returned per feature."""
    witnesses = {}
    for g in groups:
        if g.inside_count > 0:
            witnesses[g.feature] = g.inside_witnesses()
    return {"supported": not witnesses, "witnesses": witnesses}
