"""Shape/texture bias on cue-conflict stimuli, proxy A-distance and accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import numcore as nc
from .network import ModelBundle, predict
from .numcore import Tensor


@dataclass
class BiasReport:
    shape_accuracy: float
    texture_accuracy: float
    shape_bias: Optional[float]
    texture_bias: Optional[float]
    n_shape_correct: int
    n_texture_correct: int
    n_neither: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiscrepancyReport:
    d_A: float
    error: float
    fold_errors: list
    n_train: int
    n_test: int
    folds: int
    weight_decay: float

    def to_dict(self) -> dict:
        return asdict(self)


Predictor = Union[ModelBundle, Callable[[np.ndarray], np.ndarray]]


def _predict(model: Predictor, images: np.ndarray) -> np.ndarray:
    if isinstance(model, ModelBundle):
        return predict(model, images)
    return np.asarray(model(images))


def bias_from_predictions(pred, content_labels, style_labels) -> BiasReport:
    pred, content, style = (np.asarray(a) for a in (pred, content_labels, style_labels))
    n = len(pred)
    if n == 0:
        raise ValueError("empty stimulus set")
    if np.any(content == style):
        raise ValueError("cue-conflict stimuli need content_label != style_label")
    n_shape = int(np.sum(pred == content))
    n_tex = int(np.sum(pred == style))
    matched = n_shape + n_tex
    shape_bias = n_shape / matched if matched else None
    return BiasReport(n_shape / n, n_tex / n, shape_bias,
                      None if shape_bias is None else n_tex / matched,
                      n_shape, n_tex, n - matched, n)


def bias_metrics(model: Predictor, stimuli) -> BiasReport:
    """Count predictions matching the shape cue, the texture cue, or neither.

    ``model`` is a trained bundle (evaluated through inference) or any callable
    mapping images to class indices.
    """
    if len(stimuli) == 0:
        raise ValueError("empty stimulus set")
    pred = _predict(model, stimuli.images)
    return bias_from_predictions(pred, stimuli.content_labels, stimuli.style_labels)


def cross_domain_accuracy(model: Predictor, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of test-time predictions."""
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(_predict(model, images) == np.asarray(labels)))


def penultimate_features(model: ModelBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled content-head activations that feed the final linear layer."""
    out = []
    with nc.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size], dtype=model.dtype)
            out.append(model.content_head.features(model.features(x)).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.content_head.feature_dim))


# linear probe ---------------------------------------------------------------------------

def fit_linear_classifier(x: np.ndarray, y: np.ndarray, num_classes: int, weight_decay: float = 1e-3,
                          iters: int = 300, lr: float = 0.5, momentum: float = 0.9):
    """Softmax regression trained by full-batch gradient descent from zero init.

    Features are standardized with the training mean/std. Returns a predict
    function mapping raw features to class indices.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    with nc.precision(np.float64):
        xs = Tensor((x - mu) / sd)
        yoh = np.zeros((len(y), num_classes))
        yoh[np.arange(len(y)), y] = 1.0
        W = Tensor(np.zeros((num_classes, x.shape[1])), requires_grad=True)
        b = Tensor(np.zeros(num_classes), requires_grad=True)
        opt = nc.SGD([W, b], lr=lr, momentum=momentum)
        for _ in range(iters):
            logp = nc.log_softmax(nc.linear(xs, W, b), axis=1)
            loss = -nc.mean(nc.sum(logp * yoh, axis=1)) + 0.5 * weight_decay * nc.sum(nc.square(W))
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
    Wd, bd = W.data.copy(), b.data.copy()

    def classify(feats: np.ndarray) -> np.ndarray:
        z = ((np.asarray(feats, dtype=np.float64) - mu) / sd) @ Wd.T + bd
        return np.argmax(z, axis=1)

    return classify


def _fold_split(n: int, seed: int, fold: int) -> tuple[np.ndarray, np.ndarray]:
    # keyed on (seed, fold, n) only, so both argument orders share the split
    perm = np.random.default_rng([seed, fold, n]).permutation(n)
    half = n // 2
    return perm[:half], perm[half:]


def proxy_a_distance(features_a: np.ndarray, features_b: np.ndarray, seed: int = 0, folds: int = 5,
                     weight_decay: float = 1e-3, iters: int = 300) -> DiscrepancyReport:
    """``2 (1 - err)`` for a linear probe separating the two feature sets.

    Each fold subsamples both sets to the same size, trains on a random half
    of each and measures the error on the other half; the error is averaged
    over folds.
    """
    a, b = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each feature set needs at least two vectors")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    m = min(len(a), len(b))
    errors = []
    n_train = n_test = 0
    for f in range(folds):
        sets = []
        for x in (a, b):
            keep = np.random.default_rng([seed, f, len(x), m]).permutation(len(x))[:m] if len(x) > m \
                else np.arange(m)
            sets.append(x[np.sort(keep)])
        tr, te = _fold_split(m, seed, f)
        xtr = np.concatenate([sets[0][tr], sets[1][tr]])
        ytr = np.concatenate([np.zeros(len(tr), int), np.ones(len(tr), int)])
        xte = np.concatenate([sets[0][te], sets[1][te]])
        yte = np.concatenate([np.zeros(len(te), int), np.ones(len(te), int)])
        clf = fit_linear_classifier(xtr, ytr, 2, weight_decay=weight_decay, iters=iters)
        errors.append(float(np.mean(clf(xte) != yte)))
        n_train, n_test = len(xtr), len(xte)
    err = float(np.mean(errors))
    return DiscrepancyReport(d_A_from_error(err), err, errors, n_train, n_test, folds, weight_decay)


def d_A_from_error(error: float) -> float:
    return 2.0 * (1.0 - error)


def source_target_discrepancy(model: ModelBundle, source_images: np.ndarray, target_images: np.ndarray,
                              seed: int = 0, max_per_domain: Optional[int] = 600) -> DiscrepancyReport:
    """Proxy A-distance between penultimate features of two image sets."""
    def cap(x):
        if max_per_domain is None or len(x) <= max_per_domain:
            return x
        idx = np.sort(np.random.default_rng([seed, len(x)]).permutation(len(x))[:max_per_domain])
        return x[idx]

    fa = penultimate_features(model, cap(source_images))
    fb = penultimate_features(model, cap(target_images))
    return proxy_a_distance(fb, fa, seed=seed)
