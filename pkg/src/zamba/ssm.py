"""Selective state-space (Mamba) block.

Core recurrence, per channel ``d`` and state slot ``n``::

    h[t] = exp(A * delta[t]) * h[t-1] + delta[t] * B[t] * x[t]
    y[t] = C[t] . h[t]

With ``input_discretization="none"`` the input term is ``B[t] * x[t]``.

The recurrence ``h[t] = a[t] * h[t-1] + b[t]`` is a first-order linear scan.
It is evaluated either left to right or as a work-efficient associative scan
over the pairs ``(a, b)`` with combiner
``(a1, b1) o (a2, b2) = (a1 * a2, a2 * b1 + b2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

__all__ = [
    "NonPositiveDeltaError",
    "MambaParams",
    "SsmState",
    "linear_scan_sequential",
    "linear_scan_parallel",
    "selective_scan_sequential",
    "selective_scan_parallel",
    "selective_scan",
    "mamba_block_forward",
    "mamba_step",
]

INPUT_DISCRETIZATIONS = ("euler", "none")
SCAN_MODES = ("parallel", "sequential", "fused")


# --------------------------------------------------------------------------
# linear scan kernels on arrays shaped (..., T, D, N)


def linear_scan_sequential(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """All states of ``h[t] = a[t] * h[t-1] + b[t]`` by a left-to-right loop."""
    T = a.shape[-3]
    h = np.empty_like(b)
    prev = np.zeros_like(b[..., 0, :, :]) if h0 is None else h0
    for t in range(T):
        prev = a[..., t, :, :] * prev + b[..., t, :, :]
        h[..., t, :, :] = prev
    return h


def linear_scan_parallel(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """All states of ``h[t] = a[t] * h[t-1] + b[t]`` by an up-sweep/down-sweep scan.

    The time axis is padded to a power of two with identity pairs (1, 0).
    """
    T = a.shape[-3]
    n = 1 << max(T - 1, 0).bit_length()
    at = np.moveaxis(a, -3, 0)
    bt = np.moveaxis(b, -3, 0)
    A = np.ones((n,) + at.shape[1:], dtype=a.dtype)
    Bc = np.zeros((n,) + bt.shape[1:], dtype=b.dtype)
    A[:T] = at
    Bc[:T] = bt

    d = 1
    while d < n:
        r = slice(2 * d - 1, n, 2 * d)
        l = slice(d - 1, n, 2 * d)
        Bc[r] = A[r] * Bc[l] + Bc[r]
        A[r] = A[l] * A[r]
        d *= 2

    A[n - 1] = 1
    Bc[n - 1] = 0
    d = n // 2
    while d >= 1:
        r = slice(2 * d - 1, n, 2 * d)
        l = slice(d - 1, n, 2 * d)
        la = A[l].copy()
        lb = Bc[l].copy()
        A[l] = A[r]
        Bc[l] = Bc[r]
        Bc[r] = la * Bc[r] + lb
        A[r] = A[r] * la
        d //= 2

    # exclusive prefix -> inclusive prefix
    inc_a = A[:T] * at
    inc_b = at * Bc[:T] + bt
    h = inc_b if h0 is None else inc_a * h0[None] + inc_b
    return np.ascontiguousarray(np.moveaxis(h, 0, -3))


_KERNELS = {"sequential": linear_scan_sequential, "parallel": linear_scan_parallel}


# --------------------------------------------------------------------------
# selective scan on arrays


class NonPositiveDeltaError(ValueError):
    """A step size that is zero or negative; inside a model this means softplus underflowed."""


def _validate_scan(delta, A, B, C, x, h0):
    if delta.shape != x.shape:
        raise ShapeError(f"selective_scan: delta {delta.shape} vs x {x.shape}")
    if delta.ndim < 2 or delta.shape[-2] < 1:
        raise ShapeError(f"selective_scan: need (..., T, D) inputs, got {delta.shape}")
    D = delta.shape[-1]
    if A.ndim != 2 or A.shape[0] != D:
        raise ShapeError(f"selective_scan: A {A.shape} vs channels {D}")
    want = delta.shape[:-1] + (A.shape[1],)
    if B.shape != want or C.shape != want:
        raise ShapeError(f"selective_scan: B {B.shape} / C {C.shape}, expected {want}")
    if h0 is not None and h0.shape != delta.shape[:-2] + A.shape:
        raise ShapeError(f"selective_scan: h0 {h0.shape}, expected {delta.shape[:-2] + A.shape}")
    if not np.all(np.isfinite(delta)):
        raise FloatingPointError("selective_scan: non-finite delta")
    if not np.all(delta > 0):
        raise NonPositiveDeltaError("selective_scan: delta must be strictly positive")


def _discretize(delta, A, B, x, input_discretization):
    if input_discretization not in INPUT_DISCRETIZATIONS:
        raise ValueError(f"unknown input_discretization {input_discretization!r}")
    a = np.exp(delta[..., None] * A)
    u = delta * x if input_discretization == "euler" else x
    b = u[..., None] * B[..., None, :]
    return a, u, b


def _readout(h, C):
    return (h @ C[..., None])[..., 0]


def _selective_scan_np(delta, A, B, C, x, h0, input_discretization, mode):
    delta, A, B, C, x = (np.asarray(v) for v in (delta, A, B, C, x))
    h0 = None if h0 is None else np.asarray(h0)
    _validate_scan(delta, A, B, C, x, h0)
    a, _, b = _discretize(delta, A, B, x, input_discretization)
    h = _KERNELS[mode](a, b, h0)
    return _readout(h, C), h[..., -1, :, :].copy()


def selective_scan_sequential(delta, A, B, C, x, h0=None, input_discretization: str = "euler"):
    """Selective scan unrolled left to right.

    Shapes: ``delta, x`` (..., T, D); ``A`` (D, N); ``B, C`` (..., T, N);
    ``h0`` (..., D, N). Returns ``(y, h_final)``.
    """
    return _selective_scan_np(delta, A, B, C, x, h0, input_discretization, "sequential")


def selective_scan_parallel(delta, A, B, C, x, h0=None, input_discretization: str = "euler"):
    """Selective scan via the associative (Blelloch) scan; same contract as the sequential form."""
    return _selective_scan_np(delta, A, B, C, x, h0, input_discretization, "parallel")


def selective_scan(delta, A, B, C, x, h0: np.ndarray | None = None, *,
                   mode: str = "parallel", input_discretization: str = "euler"):
    """Differentiable selective scan on tensors; returns ``(y, h_final)``.

    ``h_final`` is a plain array (state is carried, not differentiated).
    The backward pass runs the adjoint recurrence
    ``g[t] = a[t+1] * g[t+1] + gy[t] C[t]`` through the same scan kernel.
    """
    delta, A, B, C, x = tn._prep("selective_scan", delta, A, B, C, x)
    if mode not in SCAN_MODES:
        raise ValueError(f"unknown scan mode {mode!r}")
    dd, Ad, Bd, Cd, xd = delta.data, A.data, B.data, C.data, x.data
    _validate_scan(dd, Ad, Bd, Cd, xd, h0)
    if mode == "fused":
        return _selective_scan_fused(delta, A, B, C, x, h0, input_discretization)
    kernel = _KERNELS[mode]
    a, u, b = _discretize(dd, Ad, Bd, xd, input_discretization)
    h = kernel(a, b, h0)
    y = _readout(h, Cd)
    h_final = h[..., -1, :, :].copy()
    lead = tuple(range(dd.ndim - 2))

    def bw(gy):
        c = gy[..., None] * Cd[..., None, :]
        a_next = np.concatenate([a[..., 1:, :, :], np.ones_like(a[..., :1, :, :])], axis=-3)
        g = np.flip(kernel(np.flip(a_next, -3), np.flip(c, -3)), -3)
        if h0 is None:
            h_prev = np.concatenate([np.zeros_like(h[..., :1, :, :]), h[..., :-1, :, :]], axis=-3)
        else:
            h_prev = np.concatenate([h0[..., None, :, :].astype(h.dtype), h[..., :-1, :, :]], axis=-3)
        ga_a = g * h_prev * a
        gdelta = (ga_a * Ad).sum(-1)
        gA = (ga_a * dd[..., None]).sum(axis=lead + (dd.ndim - 2,))
        gu = (g @ Bd[..., None])[..., 0]
        gB = (np.swapaxes(g, -1, -2) @ u[..., None])[..., 0]
        gC = (np.swapaxes(h, -1, -2) @ gy[..., None])[..., 0]
        if input_discretization == "euler":
            gdelta = gdelta + gu * xd
            gx = gu * dd
        else:
            gx = gu
        return gdelta, gA, gB, gC, gx

    return tn._make("selective_scan", y, (delta, A, B, C, x), bw), h_final


def _selective_scan_fused(delta, A, B, C, x, h0, input_discretization):
    from ._kernels import scan_bwd, scan_fwd

    if input_discretization not in INPUT_DISCRETIZATIONS:
        raise ValueError(f"unknown input_discretization {input_discretization!r}")
    dd, Ad, Bd, Cd, xd = delta.data, A.data, B.data, C.data, x.data
    dt = dd.dtype
    lead = dd.shape[:-2]
    T, D = dd.shape[-2:]
    N = Ad.shape[1]

    def flat(v, tail):
        return np.ascontiguousarray(v.reshape((-1,) + tail), dtype=dt)

    u = dd * xd if input_discretization == "euler" else xd
    d2, u2 = flat(dd, (T, D)), flat(u, (T, D))
    A2 = np.ascontiguousarray(Ad, dtype=dt)
    B2, C2 = flat(Bd, (T, N)), flat(Cd, (T, N))
    h02 = np.zeros((d2.shape[0], D, N), dtype=dt) if h0 is None else flat(np.asarray(h0), (D, N))
    a2 = np.exp(d2[..., None] * A2)
    y2, h_all = scan_fwd(a2, B2, C2, u2, h02)
    h_final = h_all[:, -1].reshape(lead + (D, N)).copy()

    def bw(gy):
        gd, gA, gB, gC, gu = scan_bwd(flat(gy, (T, D)), a2, d2, A2, B2, C2, u2, h02, h_all)
        gd, gB, gC, gu = (g.reshape(lead + g.shape[1:]) for g in (gd, gB, gC, gu))
        if input_discretization == "euler":
            return gd + gu * xd, gA, gB, gC, gu * dd
        return gd, gA, gB, gC, gu

    y = y2.reshape(lead + (T, D))
    return tn._make("selective_scan", y, (delta, A, B, C, x), bw), h_final


# --------------------------------------------------------------------------
# block parameters and state


@dataclass
class SsmState:
    """Recurrent state of one Mamba block.

    ``h`` is (..., d_inner, d_state); ``conv_tail`` is (..., d_inner, d_conv-1)
    holding the most recent pre-convolution inputs, oldest first.
    """

    h: np.ndarray
    conv_tail: np.ndarray

    @classmethod
    def zeros(cls, params: MambaParams, batch_shape: tuple = (), dtype=np.float32) -> SsmState:
        return cls(
            h=np.zeros(batch_shape + (params.d_inner, params.d_state), dtype=dtype),
            conv_tail=np.zeros(batch_shape + (params.d_inner, params.d_conv - 1), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv_tail.nbytes

    def copy(self) -> SsmState:
        return SsmState(self.h.copy(), self.conv_tail.copy())


@dataclass
class MambaParams:
    in_proj: Tensor
    conv_kernel: Tensor
    x_proj: Tensor
    dt_proj_w: Tensor
    dt_proj_b: Tensor
    A_log: Tensor
    D_skip: Tensor | None
    out_proj: Tensor
    input_discretization: str = field(default="euler", metadata={"static": True})
    scan_mode: str = field(default="parallel", metadata={"static": True})

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.in_proj.shape[1] // 2

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def d_conv(self) -> int:
        return self.conv_kernel.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj_w.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            if f.metadata.get("static"):
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator, *, d_state: int = 16, d_conv: int = 4,
             expand: int = 2, dt_rank: int | None = None, dtype=np.float32,
             use_d_skip: bool = True, out_scale: float = 1.0,
             dt_min: float = 1e-3, dt_max: float = 1e-1, **static) -> MambaParams:
        """Standard Mamba initialisation (S4D-real ``A``, log-uniform ``dt``)."""
        E = expand * d_model
        R = dt_rank if dt_rank is not None else math.ceil(d_model / 16)

        def lin(fan_in, fan_out, scale=1.0):
            return (rng.standard_normal((fan_in, fan_out)) * scale / math.sqrt(fan_in)).astype(dtype)

        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=E))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (E, 1)))
        return cls(
            in_proj=tn.parameter(lin(d_model, 2 * E)),
            conv_kernel=tn.parameter(rng.uniform(-1, 1, (E, d_conv)).astype(dtype) / math.sqrt(d_conv)),
            x_proj=tn.parameter(lin(E, R + 2 * d_state)),
            dt_proj_w=tn.parameter(rng.uniform(-1, 1, (R, E)).astype(dtype) / math.sqrt(R)),
            dt_proj_b=tn.parameter(dt_bias.astype(dtype)),
            A_log=tn.parameter(a_log.astype(dtype)),
            D_skip=tn.parameter(np.ones(E, dtype=dtype)) if use_d_skip else None,
            out_proj=tn.parameter(lin(E, d_model, out_scale)),
            **static,
        )


# --------------------------------------------------------------------------
# forward (sequence) and step (single token)


def mamba_block_forward(params: MambaParams, x, state: SsmState | None = None,
                        return_state: bool = False):
    """Mamba block over a sequence ``x`` of shape (..., T, d_model).

    in_proj -> (conv1d -> SiLU -> selective scan [+ D skip]) * SiLU(gate) -> out_proj.
    When ``state`` is given the convolution and scan continue from it. With
    ``return_state`` the final :class:`SsmState` is returned as well.
    """
    x = tn.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != params.d_model:
        raise ShapeError(f"mamba_block_forward: input {x.shape}, expected (..., T, {params.d_model})")
    E, N, R = params.d_inner, params.d_state, params.dt_rank
    xi, z = tn.split(tn.matmul(x, params.in_proj), [E, E])
    history = None if state is None else np.swapaxes(state.conv_tail, -1, -2)
    u = tn.silu(tn.conv1d_causal(xi, params.conv_kernel, history=history))
    dt_raw, Bm, Cm = tn.split(tn.matmul(u, params.x_proj), [R, N, N])
    delta = tn.softplus(tn.add(tn.matmul(dt_raw, params.dt_proj_w), params.dt_proj_b))
    A = tn.neg(tn.exp(params.A_log))
    y, h_final = selective_scan(delta, A, Bm, Cm, u, None if state is None else state.h,
                                mode=params.scan_mode,
                                input_discretization=params.input_discretization)
    if params.D_skip is not None:
        y = tn.add(y, tn.mul(u, params.D_skip))
    out = tn.matmul(tn.mul(y, tn.silu(z)), params.out_proj)
    if not return_state:
        return out
    k = params.d_conv
    lead = xi.shape[:-2]
    prev = np.zeros(lead + (k - 1, E), dtype=xi.dtype) if history is None else history
    full = np.concatenate([prev.astype(xi.dtype), xi.data], axis=-2)
    tail = np.swapaxes(full[..., full.shape[-2] - (k - 1):, :], -1, -2).copy()
    return out, SsmState(h=h_final, conv_tail=tail)


def _silu_np(v):
    return v * (0.5 * (1.0 + np.tanh(0.5 * v)))


def mamba_step(params: MambaParams, state: SsmState, x_t) -> tuple[SsmState, np.ndarray]:
    """Advance one token in recurrent mode; ``x_t`` is (..., d_model)."""
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    E, N, R, k = params.d_inner, params.d_state, params.dt_rank, params.d_conv
    if x_t.shape[-1] != params.d_model:
        raise ShapeError(f"mamba_step: input {x_t.shape}, expected (..., {params.d_model})")
    if state.h.shape != x_t.shape[:-1] + (E, N) or state.conv_tail.shape != x_t.shape[:-1] + (E, k - 1):
        raise ShapeError(f"mamba_step: state h {state.h.shape} / tail {state.conv_tail.shape} "
                         f"do not match block (d_inner={E}, d_state={N}, d_conv={k})")
    xz = x_t @ params.in_proj.data
    xi, z = xz[..., :E], xz[..., E:]
    window = np.concatenate([state.conv_tail, xi[..., None]], axis=-1)
    u = _silu_np((window * params.conv_kernel.data).sum(-1))
    dbc = u @ params.x_proj.data
    dt_raw, Bt, Ct = dbc[..., :R], dbc[..., R:R + N], dbc[..., R + N:]
    delta = np.logaddexp(0, dt_raw @ params.dt_proj_w.data + params.dt_proj_b.data).astype(u.dtype)
    A = -np.exp(params.A_log.data)
    a = np.exp(delta[..., None] * A)
    inp = delta * u if params.input_discretization == "euler" else u
    h = a * state.h + inp[..., None] * Bt[..., None, :]
    y = (h @ Ct[..., None])[..., 0]
    if params.D_skip is not None:
        y = y + u * params.D_skip.data
    out = (y * _silu_np(z)) @ params.out_proj.data
    return SsmState(h=h, conv_tail=window[..., 1:].copy()), out
