"""Global shared attention (GSA) block.

One attention + MLP parameter bundle is invoked at several depths. Each
invocation reads the concatenation ``[x_l, x_0]`` of the current residual
stream and the post-embedding activations, so queries, keys and values live
at width ``2 * d_model``; the attention output projection brings the width
back to ``d_model`` before the MLP. A per-site, unshared linear map writes
the result into the residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

__all__ = ["GsaParams", "KVCache", "causal_attention", "gsa_forward", "rope_tables"]


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float32):
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1).astype(dtype)
    return cos, sin


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(g):
    h = g.shape[-1] // 2
    return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)


def _split_heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, T, W = a.shape
    return np.swapaxes(a.reshape(*lead, T, n_heads, W // n_heads), -2, -3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    a = np.swapaxes(a, -2, -3)
    *lead, T, H, hd = a.shape
    return a.reshape(*lead, T, H * hd)


def causal_attention(q, k, v, n_heads: int, *, offset: int = 0, rope: bool = False) -> Tensor:
    """Multi-head causal softmax attention.

    ``q`` is (..., Tq, W); ``k`` and ``v`` are (..., Tk, W) with
    ``Tk = offset + Tq``: query ``i`` sits at absolute position ``offset + i``
    and sees keys ``0 .. offset + i``.
    """
    q, k, v = tn._prep("causal_attention", q, k, v)
    W = q.shape[-1]
    if k.shape != v.shape or k.shape[-1] != W or k.shape[:-2] != q.shape[:-2]:
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if W % n_heads:
        raise ShapeError(f"causal_attention: width {W} not divisible by {n_heads} heads")
    Tq, Tk = q.shape[-2], k.shape[-2]
    if Tk != offset + Tq:
        raise ShapeError(f"causal_attention: {Tk} keys for {Tq} queries at offset {offset}")
    hd = W // n_heads
    scale = 1.0 / math.sqrt(hd)
    qh = _split_heads(q.data, n_heads)
    kh = _split_heads(k.data, n_heads)
    vh = _split_heads(v.data, n_heads)
    if rope:
        if hd % 2:
            raise ShapeError("causal_attention: rope needs an even head dimension")
        cq, sq = rope_tables(np.arange(offset, offset + Tq), hd, dtype=q.dtype)
        ck, sk = rope_tables(np.arange(Tk), hd, dtype=k.dtype)
        qr = qh * cq + _rotate_half(qh) * sq
        kr = kh * ck + _rotate_half(kh) * sk
    else:
        qr, kr = qh, kh
    s = (qr @ np.swapaxes(kr, -1, -2)) * scale
    mask = np.arange(Tk)[None, :] > (offset + np.arange(Tq))[:, None]
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = _merge_heads(p @ vh)

    def bw(g):
        gh = _split_heads(g, n_heads)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kr
        gk = np.swapaxes(gs, -1, -2) @ qr
        if rope:
            gq = gq * cq + _rotate_half_t(gq * sq)
            gk = gk * ck + _rotate_half_t(gk * sk)
        return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)

    return tn._make("causal_attention", out.astype(q.dtype, copy=False), (q, k, v), bw)


class KVCache:
    """Post-projection keys and values for one GSA site, preallocated to ``capacity``."""

    def __init__(self, capacity: int, width: int, batch_shape: tuple = (), dtype=np.float32):
        self.capacity = capacity
        self.k = np.zeros(batch_shape + (capacity, width), dtype=dtype)
        self.v = np.zeros(batch_shape + (capacity, width), dtype=dtype)
        self.length = 0

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        n = k_new.shape[-2]
        if self.length + n > self.capacity:
            raise OverflowError(f"KV cache overflow: {self.length} + {n} > capacity {self.capacity}")
        self.k[..., self.length:self.length + n, :] = k_new
        self.v[..., self.length:self.length + n, :] = v_new
        self.length += n

    def keys(self) -> np.ndarray:
        return self.k[..., :self.length, :]

    def values(self) -> np.ndarray:
        return self.v[..., :self.length, :]

    @property
    def nbytes_used(self) -> int:
        per_pos = self.k.nbytes // self.capacity
        return 2 * per_pos * self.length


@dataclass
class GsaParams:
    norm_in: Tensor     # (2d,)
    qkv_proj: Tensor    # (2d, 6d)
    attn_out: Tensor    # (2d, d)
    norm_mlp: Tensor    # (d,)
    mlp_in: Tensor      # (d, hidden)
    mlp_out: Tensor     # (hidden, d)
    n_heads: int = 4
    rope: bool = False
    eps: float = 1e-5

    @property
    def d_model(self) -> int:
        return self.attn_out.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "norm_in": self.norm_in,
            "qkv_proj": self.qkv_proj,
            "attn_out": self.attn_out,
            "norm_mlp": self.norm_mlp,
            "mlp_in": self.mlp_in,
            "mlp_out": self.mlp_out,
        }

    @classmethod
    def init(cls, d_model: int, mlp_hidden: int, n_heads: int, rng: np.random.Generator,
             *, dtype=np.float32, rope: bool = False, eps: float = 1e-5) -> GsaParams:
        w = 2 * d_model
        if w % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide 2*d_model={w}")

        def lin(fan_in, fan_out):
            return tn.parameter((rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(dtype))

        return cls(
            norm_in=tn.parameter(np.ones(w, dtype=dtype)),
            qkv_proj=lin(w, 3 * w),
            attn_out=lin(w, d_model),
            norm_mlp=tn.parameter(np.ones(d_model, dtype=dtype)),
            mlp_in=lin(d_model, mlp_hidden),
            mlp_out=lin(mlp_hidden, d_model),
            n_heads=n_heads,
            rope=rope,
            eps=eps,
        )


def gsa_forward(shared: GsaParams, sites, site: int, x_l, x_0, cache: KVCache | None = None) -> Tensor:
    """``Lin_site(MLP(Norm(Attn(Norm([x_l, x_0])))))``.

    ``sites`` is the list of per-site (d, d) projections. With a ``cache``,
    the new positions' keys/values are appended and attention spans every
    cached position.
    """
    if not 0 <= site < len(sites):
        raise IndexError(f"gsa_forward: site {site} out of range for {len(sites)} sites")
    x_l, x_0 = tn.as_tensor(x_l), tn.as_tensor(x_0)
    if x_l.shape != x_0.shape:
        raise ShapeError(f"gsa_forward: x_l {x_l.shape} and x_0 {x_0.shape} differ")
    w = 2 * shared.d_model
    h = tn.rmsnorm(tn.concat([x_l, x_0]), shared.norm_in, shared.eps)
    q, k, v = tn.split(tn.matmul(h, shared.qkv_proj), [w, w, w])
    offset = 0
    if cache is not None:
        offset = cache.length
        cache.append(k.data, v.data)
        k, v = Tensor(cache.keys()), Tensor(cache.values())
    a = causal_attention(q, k, v, shared.n_heads, offset=offset, rope=shared.rope)
    a = tn.rmsnorm(tn.matmul(a, shared.attn_out), shared.norm_mlp, shared.eps)
    m = tn.matmul(tn.gelu(tn.matmul(a, shared.mlp_in)), shared.mlp_out)
    return tn.matmul(m, sites[site])
