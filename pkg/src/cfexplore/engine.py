"""Counterfactual generation: constrained SGD, sparsity, precision refinement.

For one instance the engine produces k candidate examples in three phases:

1. raw: joint SGD over all k candidates on
       total = validity + lambda_dist * proximity + lambda_div * diversity
   with validity a zero-margin ranking loss on the predicted probability,
   proximity a MAD-weighted Manhattan/overlap distance to the origin, and
   diversity the (negated, mean-scaled) pairwise distance among candidates.
   Immutable features are held by gradient masking; every `clip_interval`
   iterations values are projected back into their allowed ranges.
2. sparsify: per candidate, keep the top-m features by normalized change
   magnitude, reset the rest to the origin, and re-run the SGD with only the
   kept features free.
3. precision: snap continuous values to their precision grid, harden
   categorical blocks, then repair validity by single-feature unit steps in
   the direction of steepest normalized descent.

Everything is a pure function of (inputs, seed). Candidate rows are updated
with row-local operations only, so results are bit-identical regardless of
how jobs are batched together.

Categorical relaxation: inside the optimizer a categorical feature is a real
score block renormalized onto the allowed-category simplex at clip steps.
The differentiable surrogate for the overlap metric is half the L1 distance
between blocks, which equals (1 - score of the original category) against a
hard one-hot and recovers the 0/1 overlap at vertices. Reported distances
always use the hard metric.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (CATEGORICAL, CONTINUOUS, NEGATIVE, POSITIVE, DataError,
                   EncodingLayout, FeatureSpec, Schema, encode, validate_instance)
from .model import MlpModel, classify, forward_and_input_gradient_batch, forward_batch

INIT_NOISE = 0.05  # uniform init jitter per candidate, in scaled units


class ConstraintError(ValueError):
    """Raised for inconsistent constraint specifications."""


# ---------------------------------------------------------------------------
# configuration and constraints


@dataclass(frozen=True)
class CfConfig:
    """Knobs for one generation run. `None` for max_changed_features,
    posthoc_epsilon, or posthoc_max_steps means "resolve from context"
    (all features / learning_rate / feature count respectively)."""

    k_cfs: int = 5
    max_changed_features: int | None = None
    lambda_dist: float = 0.5
    lambda_div: float = 1.0
    target_class: str | None = None  # None: flip the model's prediction
    learning_rate: float = 0.05
    max_iters: int = 500
    clip_interval: int = 50
    posthoc_epsilon: float | None = None
    posthoc_max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.k_cfs < 1:
            raise ConstraintError("k_cfs must be >= 1")
        if self.max_changed_features is not None and self.max_changed_features < 1:
            raise ConstraintError("max_changed_features must be >= 1")
        if self.lambda_dist < 0 or self.lambda_div < 0:
            raise ConstraintError("lambda weights must be >= 0")
        if self.learning_rate <= 0 or self.max_iters < 1 or self.clip_interval < 1:
            raise ConstraintError("learning_rate/max_iters/clip_interval must be positive")
        if self.posthoc_epsilon is not None and self.posthoc_epsilon <= 0:
            raise ConstraintError("posthoc_epsilon must be > 0")
        if self.posthoc_max_steps is not None and self.posthoc_max_steps < 1:
            raise ConstraintError("posthoc_max_steps must be >= 1")
        if self.target_class not in (None, NEGATIVE, POSITIVE):
            raise ConstraintError(f"target_class must be {NEGATIVE!r} or {POSITIVE!r}")
        if self.seed < 0:
            raise ConstraintError("seed must be >= 0")

    @property
    def epsilon(self) -> float:
        return self.posthoc_epsilon if self.posthoc_epsilon is not None else self.learning_rate

    def to_dict(self) -> dict:
        return {
            "k_cfs": self.k_cfs, "max_changed_features": self.max_changed_features,
            "lambda_dist": self.lambda_dist, "lambda_div": self.lambda_div,
            "target_class": self.target_class, "learning_rate": self.learning_rate,
            "max_iters": self.max_iters, "clip_interval": self.clip_interval,
            "posthoc_epsilon": self.posthoc_epsilon,
            "posthoc_max_steps": self.posthoc_max_steps, "seed": self.seed,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @staticmethod
    def from_dict(d: dict) -> "CfConfig":
        known = {f for f in CfConfig.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConstraintError(f"unknown config fields: {sorted(bad)}")
        return CfConfig(**d)


@dataclass(frozen=True)
class CfConstraints:
    """Per-feature mutability and allowed ranges.

    rules maps feature name to one of
      {"lock": true}                    hold at the origin value
      {"lo": a, "hi": b}                continuous range, a <= b, within domain
      {"categories": [...]}             non-empty allowed category subset
    Features without a rule may move anywhere in their domain.
    """

    rules: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(rules: dict, schema: Schema) -> "CfConstraints":
        checked = {}
        for name, rule in (rules or {}).items():
            spec = schema.feature(name)  # raises for unknown feature
            if not isinstance(rule, dict):
                raise ConstraintError(f"{name}: rule must be an object")
            if rule.get("lock"):
                checked[name] = {"lock": True}
            elif spec.kind == CONTINUOUS:
                if "lo" not in rule or "hi" not in rule:
                    raise ConstraintError(f"{name}: continuous rule needs lo/hi")
                lo, hi = float(rule["lo"]), float(rule["hi"])
                if not (spec.min <= lo <= hi <= spec.max):
                    raise ConstraintError(
                        f"{name}: range [{lo}, {hi}] not inside domain "
                        f"[{spec.min}, {spec.max}]")
                checked[name] = {"lo": lo, "hi": hi}
            else:
                cats = rule.get("categories")
                if not cats:
                    raise ConstraintError(f"{name}: allowed category subset is empty")
                for c in cats:
                    if c not in spec.categories:
                        raise ConstraintError(f"{name}: unknown category {c!r}")
                checked[name] = {"categories": [c for c in spec.categories if c in set(cats)]}
        return CfConstraints(checked)

    def to_dict(self) -> dict:
        return dict(self.rules)

    def content_hash(self) -> str:
        blob = json.dumps(self.rules, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CfCandidate:
    instance: dict
    valid: bool
    probability: float
    changed: dict  # feature -> (from, to)
    distance_to_origin: float

    def to_dict(self) -> dict:
        return {
            "values": dict(self.instance), "valid": self.valid,
            "probability": self.probability,
            "changed": [{"feature": f, "from": a, "to": b}
                        for f, (a, b) in self.changed.items()],
            "distance": self.distance_to_origin,
        }


@dataclass(frozen=True)
class CfSet:
    origin: dict
    origin_probability: float
    target_class: str
    candidates: tuple[CfCandidate, ...]
    config: CfConfig
    diagnostics: dict

    @property
    def valid_candidates(self) -> list[CfCandidate]:
        return [c for c in self.candidates if c.valid]

    def to_dict(self) -> dict:
        return {
            "origin": dict(self.origin),
            "origin_probability": self.origin_probability,
            "target_class": self.target_class,
            "candidates": [c.to_dict() for c in self.candidates],
            "config": self.config.to_dict(),
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class CfJob:
    """One generation request: origin instance, constraints, config.

    seed_key feeds the per-job noise stream; batch runners derive it from
    (config.seed, row index) so results never depend on batch composition.
    """

    origin: dict
    constraints: CfConstraints
    config: CfConfig
    seed_key: tuple[int, ...] | None = None

    def noise_key(self) -> list[int]:
        return list(self.seed_key) if self.seed_key is not None else [self.config.seed]


# ---------------------------------------------------------------------------
# loss terms (spec-level, also used for reporting)


def validity_loss(y_pred: float, target: int) -> float:
    """Zero-margin ranking loss max(0, -target * (y_pred - 0.5)), target +-1."""
    return max(0.0, -target * (y_pred - 0.5))


def distance(c_vec, x_vec, schema: Schema, layout: EncodingLayout | None = None) -> float:
    """MAD-weighted Manhattan/overlap distance between two encoded vectors.

    Continuous: |delta| / ((1 + MAD) * range) in original units, which on
    min-max scaled values is |delta_scaled| / (1 + MAD). Categorical: 0/1 on
    the hard (argmax) categories.
    """
    layout = layout or EncodingLayout.for_schema(schema)
    c_vec = np.asarray(c_vec, dtype=float)
    x_vec = np.asarray(x_vec, dtype=float)
    if c_vec.shape != x_vec.shape or c_vec.shape != (layout.width,):
        raise DataError("distance: layout mismatch")
    total = 0.0
    for name in layout.continuous:
        spec = schema.feature(name)
        i = layout.slices[name].start
        total += abs(c_vec[i] - x_vec[i]) * spec.mad_weight()
    for name in layout.categorical:
        block = layout.slices[name]
        if int(np.argmax(c_vec[block])) != int(np.argmax(x_vec[block])):
            total += 1.0
    return total


def diversity_loss(candidates, schema: Schema, layout: EncodingLayout | None = None) -> float:
    """-(1/k) * sum_{i} sum_{j>=i} dist(c_i, c_j); the self pairs add 0."""
    layout = layout or EncodingLayout.for_schema(schema)
    cands = [np.asarray(c, dtype=float) for c in candidates]
    if not cands:
        raise DataError("diversity_loss: empty candidate list")
    k = len(cands)
    total = 0.0
    for i in range(k):
        for j in range(i, k):
            total += distance(cands[i], cands[j], schema, layout)
    return -total / k


def instance_distance(c: dict, x: dict, schema: Schema) -> float:
    """Hard distance between instances in human units (same metric)."""
    total = 0.0
    for spec in schema.features:
        if spec.kind == CONTINUOUS:
            total += abs(c[spec.name] - x[spec.name]) / ((1.0 + (spec.mad or 0.0)) * spec.range)
        elif c[spec.name] != x[spec.name]:
            total += 1.0
    return total


# ---------------------------------------------------------------------------
# encoded-space plumbing


def _dist_weights(schema: Schema, layout: EncodingLayout) -> np.ndarray:
    """Per-dimension surrogate distance weights (continuous 1/(1+MAD),
    categorical score dims 0.5 for the half-L1 relaxation)."""
    w = np.zeros(layout.width)
    for name in layout.continuous:
        w[layout.slices[name].start] = schema.feature(name).mad_weight()
    for name in layout.categorical:
        w[layout.slices[name]] = 0.5
    return w


@dataclass
class _Bounds:
    """Per-row encoded-space constraint state."""

    lo: np.ndarray        # (R, D)
    hi: np.ndarray        # (R, D)
    allowed: np.ndarray   # (R, D) bool; categorical score permitted to be > 0
    fallback: np.ndarray  # (R, D) block reset target when a block clips to zero
    mask: np.ndarray      # (R, D) float; 1 where the optimizer may move


def _bounds_for_rows(schema, layout, constraints_list, origin_vecs, origins) -> _Bounds:
    rows = len(constraints_list)
    D = layout.width
    lo = np.zeros((rows, D))
    hi = np.ones((rows, D))
    allowed = np.ones((rows, D), dtype=bool)
    fallback = np.zeros((rows, D))
    mask = np.ones((rows, D))
    for r, (cons, xvec, xinst) in enumerate(zip(constraints_list, origin_vecs, origins)):
        for spec in schema.features:
            rule = cons.rules.get(spec.name, {})
            sl = layout.slices[spec.name]
            if spec.kind == CONTINUOUS:
                i = sl.start
                if rule.get("lock"):
                    lo[r, i] = hi[r, i] = xvec[i]
                elif "lo" in rule:
                    lo[r, i] = (rule["lo"] - spec.min) / spec.range
                    hi[r, i] = (rule["hi"] - spec.min) / spec.range
                if lo[r, i] >= hi[r, i]:
                    mask[r, i] = 0.0
            else:
                if rule.get("lock"):
                    cats = [xinst[spec.name]]
                elif "categories" in rule:
                    cats = rule["categories"]
                else:
                    cats = list(spec.categories)
                ok = np.array([c in set(cats) for c in spec.categories])
                allowed[r, sl] = ok
                if xinst[spec.name] in set(cats):
                    fallback[r, sl] = xvec[sl]
                else:
                    fallback[r, sl] = ok / ok.sum()
                if ok.sum() < 2:
                    mask[r, sl] = 0.0
    return _Bounds(lo, hi, allowed, fallback, mask)


def _clip_rows(Z: np.ndarray, b: _Bounds, layout: EncodingLayout) -> np.ndarray:
    """Project candidates onto the feasible set: clamp continuous dims to
    their ranges and renormalize categorical blocks onto the allowed simplex."""
    Z = np.clip(Z, b.lo, b.hi)
    for name in layout.categorical:
        sl = layout.slices[name]
        blk = Z[:, sl] * b.allowed[:, sl]
        s = blk.sum(axis=1)
        dead = s <= 1e-12
        safe = np.where(dead, 1.0, s)
        blk = blk / safe[:, None]
        if dead.any():
            blk[dead] = b.fallback[dead][:, sl]
        Z[:, sl] = blk
    return Z


def _loss_gradient(model, Z, X, targets, dist_w, lam1, lam2, groups):
    """Gradient of the total loss w.r.t. each candidate row. Returns (p, g)."""
    p, dz = forward_and_input_gradient_batch(model, Z)
    wrong = (targets * (p - 0.5)) < 0.0  # zero margin: boundary itself costs 0
    g = np.where(wrong, -targets, 0.0)[:, None] * dz
    if lam1 > 0:
        g = g + lam1 * dist_w * np.sign(Z - X)
    if lam2 > 0 and groups is not None:
        for s, e in groups:
            k = e - s
            if k < 2:
                continue
            zg = Z[s:e]
            pair = np.sign(zg[:, None, :] - zg[None, :, :]).sum(axis=1)
            g[s:e] = g[s:e] - (lam2 / k) * dist_w * pair
    return p, g


def _sgd(model, Z, X, targets, bounds, layout, dist_w, cfg: CfConfig, groups):
    Z = _clip_rows(Z.copy(), bounds, layout)
    just_clipped = True
    for it in range(cfg.max_iters):
        _, g = _loss_gradient(model, Z, X, targets, dist_w,
                              cfg.lambda_dist, cfg.lambda_div, groups)
        Z = Z - cfg.learning_rate * (bounds.mask * g)
        just_clipped = False
        if (it + 1) % cfg.clip_interval == 0:
            Z = _clip_rows(Z, bounds, layout)
            just_clipped = True
    if not just_clipped:
        Z = _clip_rows(Z, bounds, layout)
    return Z


def change_magnitudes(z_row, x_row, schema: Schema, layout: EncodingLayout) -> np.ndarray:
    """Per-feature normalized change size used for the sparsity ranking:
    |delta|/((1+MAD)*range) for continuous (computed on scaled values),
    half-L1 surrogate for categorical blocks."""
    mags = np.zeros(len(schema.features))
    for fi, spec in enumerate(schema.features):
        sl = layout.slices[spec.name]
        if spec.kind == CONTINUOUS:
            mags[fi] = abs(z_row[sl.start] - x_row[sl.start]) * spec.mad_weight()
        else:
            mags[fi] = 0.5 * np.abs(z_row[sl] - x_row[sl]).sum()
    return mags


def top_k_features(mags: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest strictly-positive magnitudes; ties keep the
    lowest feature index."""
    order = np.argsort(-mags, kind="stable")
    return [int(i) for i in order[:k] if mags[i] > 0.0]


def _snap_array(vals, spec: FeatureSpec, origin_vals):
    """Vectorized snap_to_grid with ties rounding away from the origin."""
    k = (vals - spec.min) / spec.precision_unit
    lo = np.floor(k)
    frac = k - lo
    tie = np.abs(frac - 0.5) < 1e-9
    up = np.where(tie, vals >= origin_vals, frac > 0.5)
    n = lo + up
    return np.clip(spec.min + n * spec.precision_unit, spec.min, spec.max)


# ---------------------------------------------------------------------------
# batched pipeline


class _Batch:
    """Working state for a batch of jobs (one group of rows per job)."""

    def __init__(self, schema: Schema, model: MlpModel, jobs: list[CfJob]):
        self.schema, self.model, self.jobs = schema, model, jobs
        self.layout = EncodingLayout.for_schema(schema)
        self.dist_w = _dist_weights(schema, self.layout)
        cfg0 = jobs[0].config
        for j in jobs[1:]:
            a, b = j.config.to_dict(), cfg0.to_dict()
            for key in ("lambda_dist", "lambda_div", "learning_rate", "max_iters",
                        "clip_interval", "posthoc_epsilon", "posthoc_max_steps",
                        "max_changed_features"):
                if a[key] != b[key]:
                    raise ConstraintError("jobs batched together must share optimizer settings")
        self.cfg = cfg0

        groups, origins, origin_vecs, cons_list, targets = [], [], [], [], []
        noise_rows = []
        self._meta: list[dict] = []
        row = 0
        for job in jobs:
            validate_instance(job.origin, schema)
            k = job.config.k_cfs
            xvec = encode(job.origin, schema, self.layout)
            p0 = float(forward_batch(model, xvec[None, :])[0])
            predicted = classify(p0)
            tclass = job.config.target_class or (
                NEGATIVE if predicted == POSITIVE else POSITIVE)
            if tclass == predicted:
                warnings.warn(
                    f"target class {tclass!r} equals the current prediction", stacklevel=3)
            rng = np.random.default_rng(np.random.SeedSequence(job.noise_key()))
            noise_rows.append(rng.uniform(-INIT_NOISE, INIT_NOISE, size=(k, self.layout.width)))
            groups.append((row, row + k))
            row += k
            for _ in range(k):
                origins.append(job.origin)
                origin_vecs.append(xvec)
                cons_list.append(job.constraints)
                targets.append(1.0 if tclass == POSITIVE else -1.0)
            self._meta.append({"origin_probability": p0, "target_class": tclass})

        self.groups = groups
        self.X = np.stack(origin_vecs)
        self.noise = np.concatenate(noise_rows, axis=0)
        self.targets = np.array(targets)
        self.bounds = _bounds_for_rows(schema, self.layout, cons_list, origin_vecs, origins)
        self.origins = origins
        self.Z_raw: np.ndarray | None = None
        self.Z_sparse: np.ndarray | None = None
        self.sparse_rerun = 0

    # phase 1 -------------------------------------------------------------
    def run_raw(self):
        Z0 = self.X + self.noise * self.bounds.mask
        self.Z_raw = _sgd(self.model, Z0, self.X, self.targets, self.bounds,
                          self.layout, self.dist_w, self.cfg, self.groups)
        return self.Z_raw

    # phase 2 -------------------------------------------------------------
    def run_sparsify(self):
        n_feat = len(self.schema.features)
        budget = self.cfg.max_changed_features or n_feat
        R = self.Z_raw.shape[0]
        pin_bounds = _Bounds(self.bounds.lo.copy(), self.bounds.hi.copy(),
                             self.bounds.allowed.copy(), self.bounds.fallback.copy(),
                             self.bounds.mask.copy())
        rerun = np.zeros(R, dtype=bool)
        for r in range(R):
            mags = change_magnitudes(self.Z_raw[r], self.X[r], self.schema, self.layout)
            keep = set(top_k_features(mags, budget))
            for fi, spec in enumerate(self.schema.features):
                if fi in keep:
                    continue
                sl = self.layout.slices[spec.name]
                if spec.kind == CONTINUOUS:
                    pin_bounds.lo[r, sl.start] = pin_bounds.hi[r, sl.start] = self.X[r, sl.start]
                else:
                    onehot = self.X[r, sl] > 0.5
                    pin_bounds.allowed[r, sl] = onehot
                    pin_bounds.fallback[r, sl] = self.X[r, sl]
                pin_bounds.mask[r, sl] = 0.0
            # unchanged pin set == raw mask: the re-run would replay the raw
            # SGD bit for bit, so reuse the raw rows
            rerun[r] = not np.array_equal(pin_bounds.mask[r], self.bounds.mask[r])
        Z = self.Z_raw.copy()
        if rerun.any():
            idx = np.flatnonzero(rerun)
            sub = _Bounds(pin_bounds.lo[idx], pin_bounds.hi[idx],
                          pin_bounds.allowed[idx], pin_bounds.fallback[idx],
                          pin_bounds.mask[idx])
            # diversity still couples candidates of one job; build subgroup map
            sub_groups = []
            pos_of = {int(row): i for i, row in enumerate(idx)}
            for s, e in self.groups:
                members = [pos_of[r] for r in range(s, e) if r in pos_of]
                if members:
                    sub_groups.append((min(members), max(members) + 1))
            Z0 = self.X[idx] + self.noise[idx] * sub.mask
            Z[idx] = _sgd(self.model, Z0, self.X[idx], self.targets[idx], sub,
                          self.layout, self.dist_w, self.cfg, sub_groups)
        self.sparse_rerun = int(rerun.sum())
        self.pin_bounds = pin_bounds
        self.Z_sparse = Z
        return Z

    # phase 3 + 4 ----------------------------------------------------------
    def run_project_and_refine(self):
        insts, Zp = _project_rows(self.Z_sparse, self.X, self.origins,
                                  self.schema, self.layout, self.pin_bounds)
        final, Zf, valid, probs, steps = _posthoc_rows(
            self.model, self.schema, self.layout, insts, Zp, self.origins, self.X,
            self.targets, self.pin_bounds, self.dist_w, self.cfg)
        self.final_instances, self.Z_final = final, Zf
        self.valid, self.probs, self.steps = valid, probs, steps

    def assemble(self) -> list[CfSet]:
        out = []
        for (s, e), job, meta in zip(self.groups, self.jobs, self._meta):
            cands, diags = [], []
            for r in range(s, e):
                inst = self.final_instances[r]
                changed = {}
                for spec in self.schema.features:
                    a, b = job.origin[spec.name], inst[spec.name]
                    if a != b:
                        changed[spec.name] = (a, b)
                cands.append(CfCandidate(
                    instance=inst, valid=bool(self.valid[r]),
                    probability=float(self.probs[r]), changed=changed,
                    distance_to_origin=instance_distance(inst, job.origin, self.schema)))
                diags.append({
                    "validity_loss": validity_loss(float(self.probs[r]),
                                                   int(self.targets[r])),
                    "distance_loss": cands[-1].distance_to_origin,
                    "iterations": {"raw": self.cfg.max_iters,
                                   "sparsify": self.cfg.max_iters,
                                   "posthoc_steps": int(self.steps[r])},
                })
            div = diversity_loss([self.Z_final[r] for r in range(s, e)],
                                 self.schema, self.layout)
            out.append(CfSet(
                origin=dict(job.origin),
                origin_probability=meta["origin_probability"],
                target_class=meta["target_class"],
                candidates=tuple(cands), config=job.config,
                diagnostics={"per_candidate": diags, "diversity_loss": div,
                             "sparsify_reruns": self.sparse_rerun}))
        return out


def _project_rows(Z, X, origins, schema, layout, bounds: _Bounds):
    """Phase 3: snap to precision grids / harden categories, keeping bitwise
    equality with the origin for untouched dims, and re-clamp into ranges."""
    R = Z.shape[0]
    insts = [dict() for _ in range(R)]
    Zp = Z.copy()
    for spec in schema.features:
        sl = layout.slices[spec.name]
        if spec.kind == CONTINUOUS:
            i = sl.start
            ox = np.array([origins[r][spec.name] for r in range(R)])
            raw = spec.min + Z[:, i] * spec.range
            snapped = _snap_array(raw, spec, ox)
            lo_u = spec.min + bounds.lo[:, i] * spec.range
            hi_u = spec.min + bounds.hi[:, i] * spec.range
            snapped = np.minimum(np.maximum(snapped, lo_u), hi_u)
            same = Z[:, i] == X[:, i]
            vals = np.where(same, ox, snapped)
            for r in range(R):
                insts[r][spec.name] = float(vals[r])
            Zp[:, i] = (vals - spec.min) / spec.range
        else:
            blk = Z[:, sl]
            idx = np.argmax(blk, axis=1)
            hard = np.zeros_like(blk)
            hard[np.arange(R), idx] = 1.0
            for r in range(R):
                insts[r][spec.name] = spec.categories[int(idx[r])]
            Zp[:, sl] = hard
    return insts, Zp


def _posthoc_rows(model, schema, layout, insts, Zp, origins, X, targets,
                  bounds: _Bounds, dist_w, cfg: CfConfig):
    """Phase 4: single-feature unit steps toward validity.

    At each step the candidate moves the one applicable feature with the
    largest normalized loss gradient (continuous: |g|/(1+MAD) in scaled
    coordinates; categorical: first-order descent potential of the best
    allowed switch), by max(precision_unit, epsilon * |g| * range) toward
    descent, re-snapped and re-clamped. A feature is applicable when the
    move actually lands on a different value.
    """
    R = Zp.shape[0]
    Z = Zp.copy()
    insts = [dict(d) for d in insts]
    max_steps = cfg.posthoc_max_steps or len(schema.features)
    steps = np.zeros(R, dtype=int)
    p = forward_batch(model, Z)
    valid = (p >= 0.5) == (targets > 0)
    active = ~valid
    while active.any():
        idx = np.flatnonzero(active)
        _, g = _loss_gradient(model, Z[idx], X[idx], targets[idx], dist_w,
                              cfg.lambda_dist, 0.0, None)
        n_act = len(idx)
        n_feat = len(schema.features)
        score = np.full((n_act, n_feat), -np.inf)
        dest_cont = {}
        dest_cat = {}
        for fi, spec in enumerate(schema.features):
            sl = layout.slices[spec.name]
            mutable = bounds.mask[idx, sl.start] > 0 if spec.kind == CONTINUOUS \
                else bounds.mask[idx, sl].max(axis=1) > 0
            if spec.kind == CONTINUOUS:
                i = sl.start
                gd = g[:, i]
                cur = np.array([insts[r][spec.name] for r in idx])
                ox = np.array([origins[r][spec.name] for r in idx])
                step = np.maximum(spec.precision_unit, cfg.epsilon * np.abs(gd) * spec.range)
                moved = cur - np.sign(gd) * step
                snapped = _snap_array(moved, spec, ox)
                lo_u = spec.min + bounds.lo[idx, i] * spec.range
                hi_u = spec.min + bounds.hi[idx, i] * spec.range
                snapped = np.minimum(np.maximum(snapped, lo_u), hi_u)
                ok = mutable & (np.sign(gd) != 0) & (snapped != cur)
                score[ok, fi] = np.abs(gd[ok]) * spec.mad_weight()
                dest_cont[fi] = snapped
            else:
                gb = g[:, sl]
                cur_idx = np.argmax(Z[idx][:, sl], axis=1)
                g_cur = gb[np.arange(n_act), cur_idx]
                gb_allowed = np.where(bounds.allowed[idx, sl], gb, np.inf)
                best = np.argmin(gb_allowed, axis=1)
                potential = g_cur - gb_allowed[np.arange(n_act), best]
                ok = mutable & (best != cur_idx) & (potential > 0)
                score[ok, fi] = potential[ok]
                dest_cat[fi] = best
        pick = np.argmax(score, axis=1)
        movable = np.isfinite(score[np.arange(n_act), pick])
        stepped_rows = []
        for a, r in enumerate(idx):
            if not movable[a]:
                active[r] = False  # nothing applicable: stays invalid
                continue
            fi = int(pick[a])
            spec = schema.features[fi]
            sl = layout.slices[spec.name]
            if spec.kind == CONTINUOUS:
                v = float(dest_cont[fi][a])
                insts[r][spec.name] = v
                Z[r, sl.start] = (v - spec.min) / spec.range
            else:
                ci = int(dest_cat[fi][a])
                insts[r][spec.name] = spec.categories[ci]
                blk = np.zeros(sl.stop - sl.start)
                blk[ci] = 1.0
                Z[r, sl] = blk
            steps[r] += 1
            stepped_rows.append(r)
        if stepped_rows:
            sr = np.array(stepped_rows)
            p[sr] = forward_batch(model, Z[sr])
            now_valid = (p[sr] >= 0.5) == (targets[sr] > 0)
            valid[sr] = now_valid
            active[sr] &= ~now_valid
            active[sr] &= steps[sr] < max_steps
    return insts, Z, valid, p, steps


# ---------------------------------------------------------------------------
# public operations


def generate_cf_sets(schema: Schema, model: MlpModel, jobs: list[CfJob],
                     batch_size: int = 256) -> list[CfSet]:
    """Run the full three-phase pipeline for many jobs, chunked so that at
    most ~batch_size candidate rows are optimized together. Results are
    independent of batch_size."""
    if not jobs:
        return []
    out: list[CfSet] = []
    chunk: list[CfJob] = []
    rows = 0
    def flush():
        nonlocal chunk, rows
        if chunk:
            b = _Batch(schema, model, chunk)
            b.run_raw()
            b.run_sparsify()
            b.run_project_and_refine()
            out.extend(b.assemble())
            chunk, rows = [], 0
    for job in jobs:
        if chunk and rows + job.config.k_cfs > batch_size:
            flush()
        chunk.append(job)
        rows += job.config.k_cfs
    flush()
    return out


def generate_cfs(x: dict, constraints: CfConstraints, config: CfConfig,
                 model: MlpModel, schema: Schema) -> CfSet:
    """Generate k counterfactual candidates for one instance."""
    return generate_cf_sets(schema, model, [CfJob(x, constraints, config)])[0]


def generate_raw(x: dict, constraints: CfConstraints, config: CfConfig,
                 model: MlpModel, schema: Schema) -> np.ndarray:
    """Phase 1 only: the (k_cfs, width) encoded candidates after constrained SGD."""
    b = _Batch(schema, model, [CfJob(x, constraints, config)])
    return b.run_raw().copy()


def sparsify(x: dict, raw_candidates: np.ndarray, constraints: CfConstraints,
             config: CfConfig, model: MlpModel, schema: Schema) -> np.ndarray:
    """Phase 2 only: top-k feature masks from the raw candidates, then the
    constrained re-optimization with all other features reset to the origin."""
    b = _Batch(schema, model, [CfJob(x, constraints, config)])
    b.Z_raw = np.asarray(raw_candidates, dtype=float).copy()
    return b.run_sparsify().copy()


def project_to_precision(vec, schema: Schema, origin: dict | None = None) -> dict:
    """Snap an encoded vector to a schema-valid instance: continuous values to
    the nearest precision_unit multiple (ties away from the origin when given),
    categorical blocks to their argmax category."""
    layout = EncodingLayout.for_schema(schema)
    vec = np.asarray(vec, dtype=float)
    out = {}
    from .data import snap_to_grid
    for name in layout.continuous:
        spec = schema.feature(name)
        raw = spec.min + float(vec[layout.slices[name].start]) * spec.range
        tie = origin[name] if origin is not None else None
        out[name] = snap_to_grid(raw, spec, tie_away_from=tie)
    for name in layout.categorical:
        spec = schema.feature(name)
        out[name] = spec.categories[int(np.argmax(vec[layout.slices[name]]))]
    return out


def posthoc_refine(c_tilde: dict, x: dict, constraints: CfConstraints,
                   config: CfConfig, model: MlpModel, schema: Schema) -> CfCandidate:
    """Phase 3's repair loop for one precision-projected candidate."""
    layout = EncodingLayout.for_schema(schema)
    validate_instance(c_tilde, schema)
    b = _Batch(schema, model, [CfJob(x, constraints, replace(config, k_cfs=1))])
    b.pin_bounds = b.bounds
    zp = encode(c_tilde, schema, layout)
    final, zf, valid, probs, steps = _posthoc_rows(
        model, schema, layout, [dict(c_tilde)], zp[None, :], b.origins, b.X,
        b.targets, b.bounds, b.dist_w, config)
    inst = final[0]
    changed = {f.name: (x[f.name], inst[f.name])
               for f in schema.features if x[f.name] != inst[f.name]}
    return CfCandidate(instance=inst, valid=bool(valid[0]), probability=float(probs[0]),
                       changed=changed,
                       distance_to_origin=instance_distance(inst, x, schema))
