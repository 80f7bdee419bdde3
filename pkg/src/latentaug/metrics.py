"""Representation quality metrics and evaluation helpers.

Alignment: mean squared Euclidean distance between L2-normalized features
of same-class pairs — small means class-mates sit together.

Uniformity: log of the mean Gaussian potential exp(-2 * squared distance)
over all distinct pairs — more negative means the cloud spreads further
over the sphere.

Both are exact up to a pair budget and fall back to seeded pair sampling
beyond it; for small inputs they match a brute-force double loop to 1e-12,
which the tests check against an independently written oracle.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from .errors import (
    BatchTooSmallError,
    ConfigurationError,
    MetricUndefinedError,
    ValidationError,
)
from .model import classify, encode, inference_forward
from .tensor import Tensor

PAIR_CAP = 1_000_000


def _normalize_rows(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"metrics expect [N, d] features, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("cannot L2-normalize a zero feature row")
    return x / norms


def alignment(
    features: np.ndarray,
    classes: np.ndarray,
    pair_cap: int = PAIR_CAP,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean squared distance over unordered same-class pairs of the
    normalized features.  Exact when the pair count fits the cap; beyond it,
    a seeded generator must be supplied for pair subsampling."""
    x = _normalize_rows(features)
    y = np.asarray(classes)
    if y.shape != (x.shape[0],):
        raise ValidationError(f"classes shape {y.shape} does not match {x.shape[0]} rows")
    labels = np.unique(y)
    groups = [np.flatnonzero(y == c) for c in labels]
    pair_counts = np.array([g.size * (g.size - 1) // 2 for g in groups], dtype=np.int64)
    total_pairs = int(pair_counts.sum())
    if total_pairs == 0:
        raise MetricUndefinedError("alignment needs at least one same-class pair")
    if total_pairs <= pair_cap:
        # ||a - b||^2 = 2 - 2 <a, b> on the unit sphere
        acc = 0.0
        for g in groups:
            if g.size < 2:
                continue
            gram = x[g] @ x[g].T
            upper = np.triu_indices(g.size, k=1)
            acc += float(np.sum(2.0 - 2.0 * gram[upper]))
        return acc / total_pairs
    if rng is None:
        raise ConfigurationError(
            f"{total_pairs} same-class pairs exceed the cap of {pair_cap}; "
            "pass a seeded generator for subsampling"
        )
    probs = pair_counts / total_pairs
    picks = rng.choice(len(groups), size=pair_cap, p=probs)
    acc = 0.0
    for gi in picks:
        g = groups[gi]
        i, j = rng.choice(g.size, size=2, replace=False)
        d = x[g[i]] - x[g[j]]
        acc += float(d @ d)
    return acc / pair_cap


def uniformity(features: np.ndarray) -> float:
    """log mean over unordered distinct pairs of exp(-2 * squared distance),
    on normalized features.  Needs at least two rows."""
    x = _normalize_rows(features)
    if x.shape[0] < 2:
        raise MetricUndefinedError("uniformity needs at least two feature rows")
    sq = pdist(x, metric="sqeuclidean")
    return float(np.log(np.mean(np.exp(-2.0 * sq))))


def accuracy(predictions: np.ndarray, classes: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    classes = np.asarray(classes)
    if predictions.shape != classes.shape:
        raise ValidationError(f"prediction shape {predictions.shape} != labels {classes.shape}")
    if predictions.size == 0:
        raise MetricUndefinedError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predictions == classes))


def eval_batches(n: int, batch_rows: int) -> list[np.ndarray]:
    """Consecutive index chunks; a trailing chunk of one row is folded into
    its predecessor so batch-mixing operators always see >= 2 rows."""
    if batch_rows < 2:
        raise ConfigurationError(f"evaluation batches need >= 2 rows, got {batch_rows}")
    if n < 2:
        raise BatchTooSmallError(f"cannot evaluate batch operators on {n} rows")
    bounds = list(range(0, n, batch_rows))
    chunks = [np.arange(lo, min(lo + batch_rows, n)) for lo in bounds]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def accuracy_suite(
    bundle,
    features: np.ndarray,
    classes: np.ndarray,
    batch_rows: int,
    hub,
) -> dict[str, float]:
    """Clean / degraded / restored accuracy.

    Dropout is off — eval mode — but the operators' other stochastic
    elements (subset draws, additive noise) stay live, replayed from the
    given hub so the numbers are deterministic.  Degraded and restored
    views are scored by the head that trains them."""
    from .degrade_restore import degrade, restore  # local import avoids a cycle

    clean_preds = inference_forward(bundle, Tensor(features))
    aug_head = bundle.augmented_view_head()
    degraded_preds = np.empty(len(classes), dtype=np.int64)
    restored_preds = np.empty(len(classes), dtype=np.int64)
    for ci, idx in enumerate(eval_batches(len(classes), batch_rows)):
        z = encode(bundle.encoder, Tensor(features[idx]))
        z_d = degrade(bundle.degrader, z, False, hub.child("eval_degrade", ci))
        z_r = restore(bundle.restorer, z_d, z, False, hub.child("eval_restore", ci))
        degraded_preds[idx] = np.argmax(classify(aug_head, z_d).data, axis=1)
        restored_preds[idx] = np.argmax(classify(aug_head, z_r).data, axis=1)
    return {
        "clean": accuracy(clean_preds, classes),
        "degraded": accuracy(degraded_preds, classes),
        "restored": accuracy(restored_preds, classes),
    }


def nearest_neighbors(
    queries: np.ndarray,
    bank: np.ndarray,
    k: int,
    query_ids: np.ndarray | None = None,
    bank_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """The k bank rows closest (Euclidean) to each query row.

    Distance ties break toward the lower bank index.  When both id arrays
    are given, a bank row sharing its id with the query is excluded — that
    is how a query avoids retrieving itself from its own bank.  k beyond
    the available bank rows is a range error.
    """
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(bank, dtype=np.float64)
    if q.ndim != 2 or b.ndim != 2 or q.shape[1] != b.shape[1]:
        raise ValidationError(f"query/bank shapes incompatible: {q.shape} vs {b.shape}")
    exclude_self = query_ids is not None and bank_ids is not None
    min_available = b.shape[0] - (1 if exclude_self else 0)
    if not (1 <= k <= min_available):
        raise ConfigurationError(
            f"k={k} out of range: bank offers {min_available} candidate rows"
        )
    d2 = (
        np.sum(q * q, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (q @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    if exclude_self:
        same = np.asarray(query_ids)[:, None] == np.asarray(bank_ids)[None, :]
        d2[same] = np.inf
    order = np.lexsort((np.broadcast_to(np.arange(b.shape[0]), d2.shape), d2), axis=1)
    idx = order[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return idx, dist
