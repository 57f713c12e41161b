"""Two-hidden-layer MLP binary classifier with analytic input gradients.

All matrix products go through a non-BLAS einsum so that each output row is
a pure function of the corresponding input row: results are bit-identical
whether a row is evaluated alone or inside any batch. The counterfactual
pipeline's batching-invariance guarantees rest on this.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, EncodingLayout, Schema, encode_matrix, NEGATIVE, POSITIVE

THRESHOLD = 0.5


class ModelError(ValueError):
    """Raised for shape mismatches and corrupt weight files."""


def matmul_rows(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (B, D) @ (D, H) without BLAS; per-row results independent of B.
    return np.einsum("bd,dh->bh", x, w, optimize=False)


def matmul_rows_T(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (B, H) @ (D, H)^T without BLAS.
    return np.einsum("bh,dh->bd", x, w, optimize=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class MlpModel:
    """Immutable weights for input -> h1 -> h2 -> output(1), ReLU hidden,
    sigmoid output. Bound to a schema via its fingerprint."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    schema_fingerprint: str = ""

    def __post_init__(self):
        d, h1 = self.w1.shape
        if self.b1.shape != (h1,):
            raise ModelError("b1 shape mismatch")
        if self.w2.shape[0] != h1 or self.b2.shape != (self.w2.shape[1],):
            raise ModelError("layer-2 shape mismatch")
        h2 = self.w2.shape[1]
        if self.w3.shape != (h2, 1) or self.b3.shape != (1,):
            raise ModelError("output layer must have dimension 1")

    @property
    def input_width(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, int]:
        return self.w1.shape[1], self.w2.shape[1]


def _forward_full(model: MlpModel, z: np.ndarray):
    h1 = matmul_rows(z, model.w1) + model.b1
    a1 = np.maximum(h1, 0.0)
    h2 = matmul_rows(a1, model.w2) + model.b2
    a2 = np.maximum(h2, 0.0)
    o = matmul_rows(a2, model.w3) + model.b3
    p = sigmoid(o[:, 0])
    return p, h1, a1, h2, a2, o


def forward_batch(model: MlpModel, z: np.ndarray) -> np.ndarray:
    """Probabilities for a (B, D) batch of encoded vectors."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != model.input_width:
        raise ModelError(f"expected (B, {model.input_width}) input, got {z.shape}")
    return _forward_full(model, z)[0]


def forward(model: MlpModel, vec: np.ndarray) -> float:
    """Probability of the positive class for one encoded vector."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (model.input_width,):
        raise ModelError(f"expected length-{model.input_width} vector, got {vec.shape}")
    return float(forward_batch(model, vec[None, :])[0])


def forward_and_input_gradient_batch(model: MlpModel, z: np.ndarray, upstream=None):
    """(probabilities, d(prob)/d(input) scaled by upstream) for a batch.

    ReLU uses subgradient 0 at exactly-zero pre-activations.
    """
    z = np.asarray(z, dtype=float)
    p, h1, a1, h2, a2, o = _forward_full(model, z)
    dp = p * (1.0 - p)
    if upstream is not None:
        dp = dp * np.asarray(upstream, dtype=float)
    d2 = np.einsum("b,ho->bh", dp, model.w3, optimize=False) * (h2 > 0)
    d1 = matmul_rows_T(d2, model.w2) * (h1 > 0)
    dz = matmul_rows_T(d1, model.w1)
    return p, dz


def input_gradient(model: MlpModel, vec: np.ndarray, upstream: float = 1.0) -> np.ndarray:
    """d(probability)/d(vec) times a scalar upstream factor."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (model.input_width,):
        raise ModelError(f"expected length-{model.input_width} vector, got {vec.shape}")
    _, dz = forward_and_input_gradient_batch(model, vec[None, :], np.array([upstream]))
    return dz[0]


def classify(probability: float) -> str:
    # Tie at exactly 0.5 counts as positive.
    return POSITIVE if probability >= THRESHOLD else NEGATIVE


def prediction(model: MlpModel, vec: np.ndarray) -> dict:
    p = forward(model, vec)
    return {"probability": p, "class": classify(p), "threshold": THRESHOLD}


def save_model(model: MlpModel, path) -> None:
    doc = {
        "architecture": {
            "input": model.input_width,
            "hidden": list(model.hidden_sizes),
            "output": 1,
            "hidden_activation": "relu",
            "output_activation": "sigmoid",
        },
        "schema_fingerprint": model.schema_fingerprint,
        "weights": {
            "w1": model.w1.tolist(), "b1": model.b1.tolist(),
            "w2": model.w2.tolist(), "b2": model.b2.tolist(),
            "w3": model.w3.tolist(), "b3": model.b3.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path, schema: Schema | None = None) -> MlpModel:
    """Load weights, verifying the architecture chain and, when a schema is
    given, the encoded width and fingerprint."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
        arch = doc["architecture"]
        w = doc["weights"]
        model = MlpModel(
            w1=np.array(w["w1"], dtype=float), b1=np.array(w["b1"], dtype=float),
            w2=np.array(w["w2"], dtype=float), b2=np.array(w["b2"], dtype=float),
            w3=np.array(w["w3"], dtype=float), b3=np.array(w["b3"], dtype=float),
            schema_fingerprint=doc.get("schema_fingerprint", ""),
        )
    except (KeyError, json.JSONDecodeError, TypeError) as exc:
        raise ModelError(f"corrupt model file {path}: {exc}") from exc
    if model.input_width != arch["input"] or list(model.hidden_sizes) != list(arch["hidden"]):
        raise ModelError(f"{path}: architecture descriptor does not match weight shapes")
    if schema is not None:
        width = EncodingLayout.for_schema(schema).width
        if model.input_width != width:
            raise ModelError(
                f"{path}: model input width {model.input_width} != encoded width {width}")
        if model.schema_fingerprint and model.schema_fingerprint != schema.fingerprint():
            raise ModelError(f"{path}: schema fingerprint mismatch")
    return model


def _init_weights(rng: np.random.Generator, d_in: int, hidden: tuple[int, int]):
    h1, h2 = hidden
    def glorot(n_in, n_out):
        s = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-s, s, size=(n_in, n_out))
    return [glorot(d_in, h1), np.zeros(h1), glorot(h1, h2), np.zeros(h2),
            glorot(h2, 1), np.zeros(1)]


def train_baseline(dataset: Dataset, hidden: tuple[int, int] = (16, 16),
                   epochs: int = 200, lr: float = 0.01, seed: int = 0,
                   split_fraction: float = 0.8, batch_size: int = 32):
    """Train a fixture model with minibatch Adam on cross-entropy.

    Deterministic given the seed (seeded split, init, and shuffles).
    Returns (model, {"train_acc": ..., "test_acc": ...}).
    """
    schema = dataset.schema
    x = encode_matrix(dataset.rows, schema)
    y = np.array(dataset.labels, dtype=float)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    perm = rng.permutation(len(y))
    n_train = int(round(split_fraction * len(y)))
    if n_train == 0 or n_train == len(y):
        raise ModelError("degenerate split: empty train or test set")
    tr, te = perm[:n_train], perm[n_train:]
    x_tr, y_tr, x_te, y_te = x[tr], y[tr], x[te], y[te]

    params = _init_weights(rng, x.shape[1], hidden)
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    for _ in range(epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            w1, b1, w2, b2, w3, b3 = params
            h1 = matmul_rows(xb, w1) + b1
            a1 = np.maximum(h1, 0.0)
            h2 = matmul_rows(a1, w2) + b2
            a2 = np.maximum(h2, 0.0)
            o = (matmul_rows(a2, w3) + b3)[:, 0]
            p = sigmoid(o)
            # dBCE/do = p - y, averaged over the batch
            go = (p - yb) / len(yb)
            d3 = go[:, None]
            g_w3 = np.einsum("bh,bo->ho", a2, d3, optimize=False)
            g_b3 = d3.sum(axis=0)
            d2 = np.einsum("bo,ho->bh", d3, w3, optimize=False) * (h2 > 0)
            g_w2 = np.einsum("bh,bk->hk", a1, d2, optimize=False)
            g_b2 = d2.sum(axis=0)
            d1 = matmul_rows_T(d2, w2) * (h1 > 0)
            g_w1 = np.einsum("bd,bh->dh", xb, d1, optimize=False)
            g_b1 = d1.sum(axis=0)
            grads = [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]
            t += 1
            for i, g in enumerate(grads):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                mhat = m[i] / (1 - beta1 ** t)
                vhat = v[i] / (1 - beta2 ** t)
                params[i] = params[i] - lr * mhat / (np.sqrt(vhat) + eps)

    model = MlpModel(*params, schema_fingerprint=schema.fingerprint())
    def acc(xs, ys):
        preds = forward_batch(model, xs) >= THRESHOLD
        return float(np.mean(preds == (ys == 1.0)))
    return model, {"train_acc": acc(x_tr, y_tr), "test_acc": acc(x_te, y_te)}
