"""Differentiable span selection over a temporal feature matrix.

Each span owns a start and an end attention vector. Softmax over the frames
gives start/end distributions; a prefix sum of the start distribution and a
suffix sum of the end distribution multiply elementwise into per-frame span
weights, which are normalized, used to pool the feature matrix into one
vector per span, scored by a shared weight vector, and summed into a sigmoid
classification. A generalized Jensen-Shannon penalty across the per-span
weight profiles discourages overlapping spans.

Frame indices here are 0-based positions within the generated horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError
from .rng import SplitMix64


class SpanParams:
    """Trainable weights of the span head: per-span (w_p, w_q) plus shared w_z."""

    def __init__(self, feature_dim: int, n_spans: int = 3, eps: float = 1e-8,
                 rng: SplitMix64 | None = None, init_scale: float = 0.1):
        if n_spans < 1:
            raise DomainError(f"need at least one span, got {n_spans}")
        rng = rng or SplitMix64(0)
        self.feature_dim = feature_dim
        self.n_spans = n_spans
        self.eps = eps

        def vec(name):
            vals = [rng.uniform(-init_scale, init_scale) for _ in range(feature_dim)]
            return Tensor(np.array(vals), requires_grad=True, name=name)

        self.w_p = [vec(f"span.w_p.{s}") for s in range(n_spans)]
        self.w_q = [vec(f"span.w_q.{s}") for s in range(n_spans)]
        self.w_z = vec("span.w_z")

    def parameters(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.w_p + self.w_q}
        out[self.w_z.name] = self.w_z
        return out


@dataclass
class SpanRecord:
    """Everything computed for one span; tensors stay on the tape."""

    p_tilde: Tensor
    q_tilde: Tensor
    p: Tensor
    q: Tensor
    r_tilde: Tensor
    r: Tensor
    m: Tensor
    z: Tensor


@dataclass
class SpanResult:
    """Full output of the span head for one sample."""

    spans: list[SpanRecord]
    logit: Tensor
    y_hat: Tensor
    penalty: Tensor


def span_distributions(features: Tensor, w_p: Tensor, w_q: Tensor) -> tuple[Tensor, Tensor]:
    """Start/end probability over frames: softmax of F^T w."""
    if features.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got {features.shape}")
    d, t = features.shape
    if w_p.shape != (d,) or w_q.shape != (d,):
        raise ShapeError(f"attention vectors must be ({d},), got {w_p.shape} and {w_q.shape}")
    ft = ad.transpose2d(features)
    p_tilde = ad.softmax(ad.reshape(ad.matmul(ft, ad.reshape(w_p, (d, 1))), (t,)))
    q_tilde = ad.softmax(ad.reshape(ad.matmul(ft, ad.reshape(w_q, (d, 1))), (t,)))
    return p_tilde, q_tilde


def span_weights(p_tilde: Tensor, q_tilde: Tensor, eps: float = 1e-8) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Prefix/suffix mass and normalized per-frame span weights.

    p[t] is the probability the span has started by frame t, q[t] that it has
    not yet ended; their product peaks inside the span. q is realized as
    reverse(cumsum(reverse(q_tilde))) so p and q align elementwise.
    """
    if p_tilde.shape != q_tilde.shape or p_tilde.ndim != 1:
        raise ShapeError(f"span_weights: got shapes {p_tilde.shape} and {q_tilde.shape}")
    if np.min(p_tilde.data) < 0 or np.min(q_tilde.data) < 0:
        raise DomainError("span_weights: negative input probabilities")
    p = ad.cumsum(p_tilde)
    q = ad.reverse(ad.cumsum(ad.reverse(q_tilde)))
    r_tilde = ad.mul(p, q)
    denom = ad.add(ad.sum_all(r_tilde), Tensor(eps))
    r = ad.div(r_tilde, denom)
    return p, q, r_tilde, r


def span_representation(features: Tensor, r: Tensor) -> Tensor:
    """Weight the feature columns by r and sum over time.

    With sum(r) ~= 1 this is the weighted temporal mean of the features.
    """
    d, t = features.shape
    if r.shape != (t,):
        raise ShapeError(f"span weights length {r.shape} does not match {t} frames")
    return ad.reshape(ad.matmul(features, ad.reshape(r, (t, 1))), (d,))


def classify(ms: list[Tensor], w_z: Tensor) -> tuple[list[Tensor], Tensor]:
    """Score each span with the shared w_z, sum, and squash to a probability."""
    if not ms:
        raise ShapeError("classify needs at least one span representation")
    zs = [ad.dot(m, w_z) for m in ms]
    logit = zs[0]
    for z in zs[1:]:
        logit = ad.add(logit, z)
    return zs, ad.sigmoid(logit)


def conciseness_penalty(rs: list[Tensor]) -> Tensor:
    """Generalized JS divergence across span-weight profiles (0 for one span).

    Each profile is renormalized to sum exactly 1 before the divergence, since
    the eps in span_weights leaves sums slightly below 1.
    """
    if len(rs) < 2:
        return Tensor(0.0)
    normed = [ad.div(r, ad.sum_all(r)) for r in rs]
    return ad.generalized_jsd(normed)


def run_span_head(features: Tensor, params: SpanParams) -> SpanResult:
    """Apply the full span head to a feature matrix."""
    spans = []
    for s in range(params.n_spans):
        p_tilde, q_tilde = span_distributions(features, params.w_p[s], params.w_q[s])
        p, q, r_tilde, r = span_weights(p_tilde, q_tilde, params.eps)
        m = span_representation(features, r)
        spans.append(SpanRecord(p_tilde, q_tilde, p, q, r_tilde, r, m, None))
    zs = [ad.dot(rec.m, params.w_z) for rec in spans]
    logit = zs[0]
    for z in zs[1:]:
        logit = ad.add(logit, z)
    y_hat = ad.sigmoid(logit)
    for rec, z in zip(spans, zs):
        rec.z = z
    penalty = conciseness_penalty([rec.r for rec in spans])
    return SpanResult(spans=spans, logit=logit, y_hat=y_hat, penalty=penalty)


def threshold_profile(n: int) -> np.ndarray:
    """Span weights induced by exactly uniform start/end attention.

    Used as the salience baseline: a frame is salient only if its learned
    weight exceeds this profile. Palindromic, sums to 1, peaks at the center.
    """
    if n < 1:
        raise DomainError(f"threshold profile needs n >= 1, got {n}")
    p = np.cumsum(np.full(n, 1.0 / n))
    q = p[::-1]
    rt = p * q
    return rt / rt.sum()


def select_salient_frames(r, profile: np.ndarray) -> list[int]:
    """Frames whose span weight strictly exceeds the uniform-attention profile."""
    rv = r.data if isinstance(r, Tensor) else np.asarray(r)
    if rv.shape != profile.shape:
        raise ShapeError(f"select_salient_frames: {rv.shape} vs profile {profile.shape}")
    return [int(i) for i in np.flatnonzero(rv > profile)]
