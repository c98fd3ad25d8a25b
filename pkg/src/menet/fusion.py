"""Bottleneck cross-attention fusion of the two modality streams.

Feature maps are flattened to tokens (one per spatial position, channels as
the embedding). Each modality derives Q and K from itself but contributes
its V to the other stream's attention, and the two attended maps are
concatenated along channels.
"""

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class AttentionProjection:
    """Bias-free square projections for one modality; d_k = D."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape[0] != w.shape[1]:
                raise T.ShapeError(f"projection must be square, got {w.shape}")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[0]


@dataclass
class FusedFeatures:
    """Channel-concatenated attended maps: 2C x H x W for C-channel inputs."""
    y: Tensor


def tokenize(x: Tensor) -> Tensor:
    """C x H x W map to H*W x C token rows (row-major spatial order)."""
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)), (1, 0))


def detokenize(tokens: Tensor, shape) -> Tensor:
    """Inverse of tokenize for the given C x H x W shape."""
    c, h, w = shape
    return T.reshape(T.transpose(tokens, (1, 0)), (c, h, w))


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V; every attention row sums to 1."""
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise T.ShapeError(f"token shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    d_k = q.shape[1]
    scores = T.matmul(q, T.transpose(k, (1, 0))) * (1.0 / d_k ** 0.5)
    return T.matmul(T.softmax(scores, axis=-1), v)


def cross_fuse(pair, proj_t1: AttentionProjection, proj_fa: AttentionProjection) -> FusedFeatures:
    """Swapped-value fusion: FA's own attention weights read T1w values and
    vice versa; results are reshaped back and stacked along channels."""
    shape = pair.t1w.shape
    tok_t1 = tokenize(pair.t1w)
    tok_fa = tokenize(pair.fa)

    q_fa = T.matmul(tok_fa, proj_fa.w_q)
    k_fa = T.matmul(tok_fa, proj_fa.w_k)
    v_fa = T.matmul(tok_fa, proj_fa.w_v)
    q_t1 = T.matmul(tok_t1, proj_t1.w_q)
    k_t1 = T.matmul(tok_t1, proj_t1.w_k)
    v_t1 = T.matmul(tok_t1, proj_t1.w_v)

    attended_t1w = cross_attention(q_fa, k_fa, v_t1)
    attended_fa = cross_attention(q_t1, k_t1, v_fa)
    y = T.concat([detokenize(attended_t1w, shape), detokenize(attended_fa, shape)], axis=0)
    return FusedFeatures(y=y)
