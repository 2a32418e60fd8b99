"""Exact causal RoPE attention and four approximate mechanisms.

Every kernel maps per-head projections Q, K, V of shape [..., S, d_k] to
output embeddings of the same shape (leading dims are independent
batch/head slots). Rotary angles use the scaling vector resolved by the
caller; kinds that rewrite per-pair relative positions (lm_infinite,
self_extend) go through a pairwise-rotation score path instead of
rotating Q and K by absolute position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import (
    DTYPE, Tensor, ShapeError, as_tensor, concat, matmul, mul,
    pairwise_rotated_scores, reduce_sum, reshape, softmax_rows, swap_last,
)
from .rope import FrequencyBasis, FrequencyScaling, apply_rope, frequency_basis

ATTENTION_KINDS = ("exact", "lm_infinite", "self_extend", "landmark", "blockwise_shifted")


@dataclass
class AttentionSpec:
    kind: str = "exact"
    C: int = 0            # pretrain context (clamp bound for lm_infinite)
    G: int = 10           # global-memory size
    M: int = 0            # local / neighbor window
    N: int = 1            # group size (self_extend)
    B: int = 0            # block / chunk size
    top_n: int = 1        # retrieved chunk count (landmark)
    causal: bool = True
    exact_at_inference: bool = True  # blockwise approximation is train-time only

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; "
                             f"expected one of {ATTENTION_KINDS}")
        if self.kind == "lm_infinite" and (self.G < 0 or self.M < 0):
            raise ValueError("lm_infinite needs G, M >= 0")
        if self.kind == "self_extend" and (self.N < 1 or self.M < 0):
            raise ValueError("self_extend needs N >= 1 and M >= 0")
        if self.kind in ("landmark", "blockwise_shifted") and self.B < 1:
            raise ValueError(f"{self.kind} needs a positive block size B")
        if self.kind == "landmark" and self.top_n < 1:
            raise ValueError("landmark needs top_n >= 1")

    def max_seq_len(self) -> Optional[int]:
        """Hard addressable limit, or None when unbounded."""
        if self.kind == "self_extend":
            return (self.C - self.M) * self.N + self.M
        return None


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> tuple[int, int]:
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2:
        raise ShapeError(f"attention operands need rank >= 2, got {q.shape}")
    s, d_k = q.shape[-2], q.shape[-1]
    if s == 0:
        raise ShapeError("attention over an empty sequence")
    if d_k % 2:
        raise ShapeError(f"head dim must be even, got {d_k}")
    return s, d_k


def _rates(d_k: int, scaling: Optional[FrequencyScaling],
           basis: Optional[FrequencyBasis]) -> np.ndarray:
    basis = basis if basis is not None else frequency_basis(d_k)
    if basis.d_k != d_k:
        raise ShapeError(f"basis head dim {basis.d_k} != operand head dim {d_k}")
    return basis.theta if scaling is None else scaling.alpha * basis.theta


def causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))


# -- exact ------------------------------------------------------------------


def attend_exact(q, k, v, scaling: Optional[FrequencyScaling] = None, *,
                 basis: Optional[FrequencyBasis] = None) -> Tensor:
    """softmax(QK^T / sqrt(d_k)) V with rotary positions and a causal mask."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, d_k = _check_qkv(q, k, v)
    basis = basis if basis is not None else frequency_basis(d_k)
    positions = np.arange(s)
    qr = apply_rope(q, positions, basis, scaling)
    kr = apply_rope(k, positions, basis, scaling)
    scores = mul(matmul(qr, swap_last(kr)), 1.0 / math.sqrt(d_k))
    probs = softmax_rows(scores, mask=causal_mask(s))
    return matmul(probs, v)


# -- LM-Infinite ------------------------------------------------------------


def lm_infinite_relpos(n: int, m: int, C: int) -> int:
    """Distance between query n and key m, clamped at the pretrain context."""
    if n < m:
        raise ValueError(f"query position {n} precedes key position {m}")
    return min(n - m, C)


def lm_infinite_mask(C_prime: int, G: int, M: int) -> np.ndarray:
    """(i, j) attendable iff j <= i and (j < G or i - j < M)."""
    if G < 0 or M < 0:
        raise ValueError("G and M must be nonnegative")
    i = np.arange(C_prime)[:, None]
    j = np.arange(C_prime)[None, :]
    return (j <= i) & ((j < G) | (i - j < M))


def attend_lm_infinite(q, k, v, spec: AttentionSpec,
                       scaling: Optional[FrequencyScaling] = None, *,
                       basis: Optional[FrequencyBasis] = None) -> Tensor:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, d_k = _check_qkv(q, k, v)
    rates = _rates(d_k, scaling, basis)
    i = np.arange(s)[:, None]
    j = np.arange(s)[None, :]
    rel = np.minimum(i - j, spec.C)
    angles = -rel[:, :, None] * rates
    scores = mul(pairwise_rotated_scores(q, k, angles), 1.0 / math.sqrt(d_k))
    probs = softmax_rows(scores, mask=lm_infinite_mask(s, spec.G, spec.M))
    return matmul(probs, v)


# -- Self-Extend ------------------------------------------------------------


def self_extend_relpos(delta, M: int, N: int):
    """Remap distance delta: identity within the neighbor window M, grouped
    (floor division by N) beyond it."""
    if N < 1:
        raise ValueError(f"group size must be >= 1, got {N}")
    delta_arr = np.asarray(delta)
    if (delta_arr < 0).any():
        raise ValueError("relative distance must be nonnegative")
    grouped = M + delta_arr // N - M // N
    out = np.where(delta_arr <= M, delta_arr, grouped)
    return int(out) if out.ndim == 0 else out


def self_extend_max_len(C: int, M: int, N: int) -> int:
    return (C - M) * N + M


def attend_self_extend(q, k, v, spec: AttentionSpec,
                       scaling: Optional[FrequencyScaling] = None, *,
                       basis: Optional[FrequencyBasis] = None) -> Tensor:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, d_k = _check_qkv(q, k, v)
    limit = self_extend_max_len(spec.C, spec.M, spec.N)
    if s > limit:
        raise ValueError(f"sequence length {s} exceeds self_extend limit "
                         f"(C-M)*N+M = {limit}")
    rates = _rates(d_k, scaling, basis)
    i = np.arange(s)[:, None]
    j = np.arange(s)[None, :]
    delta = np.maximum(i - j, 0)  # above-diagonal pairs are masked anyway
    rel = self_extend_relpos(delta, spec.M, spec.N)
    angles = -rel[:, :, None] * rates
    scores = mul(pairwise_rotated_scores(q, k, angles), 1.0 / math.sqrt(d_k))
    probs = softmax_rows(scores, mask=causal_mask(s))
    return matmul(probs, v)


# -- blockwise (shifted) ----------------------------------------------------


def blockwise_mask(s: int, B: int, shifted: bool) -> np.ndarray:
    """Causal mask restricted to blocks of size B; shifted variant offsets
    block boundaries by B/2 (the first half-block attends within itself)."""
    offset = B // 2 if shifted else 0
    block = (np.arange(s) + offset) // B
    same = block[:, None] == block[None, :]
    return same & causal_mask(s)


def attend_blockwise_shifted(q, k, v, spec: AttentionSpec, shifted: bool = False,
                             scaling: Optional[FrequencyScaling] = None, *,
                             basis: Optional[FrequencyBasis] = None) -> Tensor:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, d_k = _check_qkv(q, k, v)
    if s % spec.B:
        raise ShapeError(f"block size {spec.B} does not divide sequence length {s}")
    basis = basis if basis is not None else frequency_basis(d_k)
    positions = np.arange(s)
    qr = apply_rope(q, positions, basis, scaling)
    kr = apply_rope(k, positions, basis, scaling)
    scores = mul(matmul(qr, swap_last(kr)), 1.0 / math.sqrt(d_k))
    probs = softmax_rows(scores, mask=blockwise_mask(s, spec.B, shifted))
    return matmul(probs, v)


# -- landmark ---------------------------------------------------------------


def landmark_stage1(q, landmarks, *, block_size: int) -> Tensor:
    """Chunk-level attention: row-stochastic weights of each query over the
    chunks whose span has started at or before it."""
    q, landmarks = as_tensor(q), as_tensor(landmarks)
    d_k = q.shape[-1]
    s = q.shape[-2]
    n_chunks = landmarks.shape[-2]
    if block_size < 1 or n_chunks * block_size < s:
        raise ShapeError(f"{n_chunks} chunks of {block_size} cannot cover {s} queries")
    lt = swap_last(landmarks) if landmarks.ndim > 2 else transpose_2d(landmarks)
    scores = mul(matmul(q, lt), 1.0 / math.sqrt(d_k))
    visible = np.arange(n_chunks)[None, :] <= (np.arange(s) // block_size)[:, None]
    return softmax_rows(scores, mask=visible)


def transpose_2d(t: Tensor) -> Tensor:
    return swap_last(t)


def landmark_select_topn(weights, top_n: int) -> np.ndarray:
    """Indices of the top_n largest weights, ties broken toward the more
    recent (higher-index) chunk. Returns sorted indices."""
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    w = np.asarray(weights, dtype=DTYPE)
    if w.ndim != 1:
        raise ShapeError(f"expected a weight row, got shape {w.shape}")
    nc = w.shape[0]
    rev = w[::-1]
    order_rev = np.argsort(-rev, axis=-1, kind="stable")
    chosen = (nc - 1 - order_rev)[: min(top_n, nc)]
    return np.sort(chosen)


def _topn_mask(a1_probs: np.ndarray, top_n: int) -> np.ndarray:
    """Vectorized per-row top-n selection with recency tie-break."""
    nc = a1_probs.shape[-1]
    keep = min(top_n, nc)
    rev = a1_probs[..., ::-1]
    order_rev = np.argsort(-rev, axis=-1, kind="stable")[..., :keep]
    chosen = nc - 1 - order_rev
    mask = np.zeros(a1_probs.shape, dtype=DTYPE)
    np.put_along_axis(mask, chosen, 1.0, axis=-1)
    return mask


def landmark_chunk_means(k: Tensor, block_size: int,
                         real_len: Optional[int] = None) -> Tensor:
    """Per-chunk mean of key rows, averaging only real (unpadded) tokens."""
    k = as_tensor(k)
    s = k.shape[-2]
    if s % block_size:
        raise ShapeError(f"chunk size {block_size} does not divide length {s}")
    real_len = s if real_len is None else real_len
    n_chunks = s // block_size
    avg = np.zeros((n_chunks, s), dtype=DTYPE)
    for c in range(n_chunks):
        lo, hi = c * block_size, min((c + 1) * block_size, real_len)
        if hi > lo:
            avg[c, lo:hi] = 1.0 / (hi - lo)
    return matmul(Tensor(avg), k) if k.ndim == 2 else matmul(
        reshape(Tensor(np.broadcast_to(avg, k.shape[:-2] + avg.shape).copy()),
                k.shape[:-2] + avg.shape), k)


def attend_landmark(q, k, v, spec: AttentionSpec,
                    scaling: Optional[FrequencyScaling] = None, *,
                    basis: Optional[FrequencyBasis] = None,
                    landmarks: Optional[Tensor] = None) -> Tensor:
    """Two-stage attention: chunk softmax over landmark vectors selects the
    top_n chunks per query; chunk-local attention outputs are mixed by the
    selected chunk weights renormalized to sum to one."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, d_k = _check_qkv(q, k, v)
    B = spec.B
    if s % B:
        raise ShapeError(f"chunk size {B} does not divide sequence length {s}")
    n_chunks = s // B
    lead = q.shape[:-2]
    n = int(np.prod(lead)) if lead else 1
    q3 = reshape(q, (n, s, d_k))
    k3 = reshape(k, (n, s, d_k))
    v3 = reshape(v, (n, s, d_k))

    basis = basis if basis is not None else frequency_basis(d_k)
    positions = np.arange(s)
    qr = apply_rope(q3, positions, basis, scaling)
    kr = apply_rope(k3, positions, basis, scaling)

    if landmarks is None:
        lmk = landmark_chunk_means(kr, B)          # [n, nc, d_k]
    else:
        lmk = as_tensor(landmarks)
    a1 = landmark_stage1(qr, lmk, block_size=B)    # [n, s, nc]

    sel = _topn_mask(a1.data, spec.top_n)
    w_sel = mul(a1, sel)
    w = mul(w_sel, 1.0 / np.maximum(
        reduce_sum(w_sel, axis=-1, keepdims=True).data, 1e-300))

    scores = mul(matmul(qr, swap_last(kr)), 1.0 / math.sqrt(d_k))
    scores_c = reshape(scores, (n, s, n_chunks, B))
    i = np.arange(s)
    key_idx = (np.arange(n_chunks)[:, None] * B + np.arange(B)[None, :])
    causal = key_idx[None, :, :] <= i[:, None, None]          # [s, nc, B]
    chunk_visible = np.arange(n_chunks)[None, :] <= (i // B)[:, None]
    dummy = (~chunk_visible)[:, :, None] & (np.arange(B)[None, None, :] == 0)
    a2 = softmax_rows(scores_c, mask=causal | dummy)          # [n, s, nc, B]

    eff = mul(a2, reshape(w, (n, s, n_chunks, 1)))
    out = matmul(reshape(eff, (n, s, s)), v3)
    return reshape(out, lead + (s, d_k)) if lead else reshape(out, (s, d_k))


# -- dispatch + padding -----------------------------------------------------


def _pad_to_multiple(t: Tensor, s: int, b: int) -> Tensor:
    pad = (-s) % b
    if pad == 0:
        return t
    zeros = Tensor(np.zeros(t.shape[:-2] + (pad, t.shape[-1]), dtype=DTYPE))
    return concat([t, zeros], axis=-2)


def _slice_rows(t: Tensor, s: int) -> Tensor:
    if t.shape[-2] == s:
        return t
    picker = np.zeros((s, t.shape[-2]), dtype=DTYPE)
    picker[np.arange(s), np.arange(s)] = 1.0
    return matmul(Tensor(np.broadcast_to(picker, t.shape[:-2] + picker.shape).copy()
                         if t.ndim > 2 else picker), t)


def attend(q, k, v, spec: AttentionSpec,
           scaling: Optional[FrequencyScaling] = None, *,
           basis: Optional[FrequencyBasis] = None,
           train: bool = False, shifted: bool = False,
           landmarks: Optional[Tensor] = None) -> Tensor:
    """Uniform entry point. Block/chunk kinds pad the sequence to a multiple
    of B with masked-out pad tokens and slice the output back."""
    kind = spec.kind
    if kind == "blockwise_shifted" and not train and spec.exact_at_inference:
        kind = "exact"
    if kind == "exact":
        return attend_exact(q, k, v, scaling, basis=basis)
    if kind == "lm_infinite":
        return attend_lm_infinite(q, k, v, spec, scaling, basis=basis)
    if kind == "self_extend":
        return attend_self_extend(q, k, v, spec, scaling, basis=basis)

    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    s, _ = _check_qkv(q, k, v)
    qp = _pad_to_multiple(q, s, spec.B)
    kp = _pad_to_multiple(k, s, spec.B)
    vp = _pad_to_multiple(v, s, spec.B)
    if kind == "blockwise_shifted":
        out = attend_blockwise_shifted(qp, kp, vp, spec, shifted, scaling, basis=basis)
    else:
        out = attend_landmark(qp, kp, vp, spec, scaling, basis=basis, landmarks=landmarks)
    return _slice_rows(out, s)


# -- cost model -------------------------------------------------------------


def attention_flops(spec: AttentionSpec, C_prime: int, d_k: int) -> int:
    """Multiply-accumulates of the score computation (d_k MACs per scored
    query-key pair; landmark counts both stages, B keys per selected chunk)."""
    s = C_prime
    i = np.arange(s, dtype=np.int64)
    if spec.kind in ("exact", "self_extend"):
        pairs = int((i + 1).sum())
    elif spec.kind == "lm_infinite":
        g, m = spec.G, spec.M
        global_part = np.minimum(g, i + 1)
        local_part = np.minimum(m, i + 1)
        lo = np.maximum(0, i - m + 1)
        overlap = np.maximum(0, np.minimum(g, i + 1) - lo)
        pairs = int((global_part + local_part - overlap).sum())
    elif spec.kind == "blockwise_shifted":
        if s % spec.B:
            raise ShapeError(f"block size {spec.B} does not divide {s}")
        n_blocks = s // spec.B
        pairs = n_blocks * spec.B * (spec.B + 1) // 2
    elif spec.kind == "landmark":
        if s % spec.B:
            raise ShapeError(f"chunk size {spec.B} does not divide {s}")
        visible_chunks = i // spec.B + 1
        stage1 = int(visible_chunks.sum())
        stage2 = int((np.minimum(spec.top_n, visible_chunks) * spec.B).sum())
        pairs = stage1 + stage2
    else:  # pragma: no cover
        raise ValueError(f"unknown kind {spec.kind}")
    return pairs * d_k


__all__ = [
    "ATTENTION_KINDS", "AttentionSpec", "causal_mask", "attend_exact",
    "lm_infinite_relpos", "lm_infinite_mask", "attend_lm_infinite",
    "self_extend_relpos", "self_extend_max_len", "attend_self_extend",
    "blockwise_mask", "attend_blockwise_shifted", "landmark_stage1",
    "landmark_select_topn", "landmark_chunk_means", "attend_landmark",
    "attend", "attention_flops",
]
