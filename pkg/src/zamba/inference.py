"""Recurrent-mode generation and analytic memory accounting.

Mamba blocks carry a fixed-size :class:`SsmState`; only GSA sites keep a KV
cache. Keys and values are cached after the shared projection, so the
``x_0`` history never has to be stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .attention import KVCache, gsa_forward
from .model import Model, ZambaConfig, _check_tokens
from .ssm import SsmState, mamba_block_forward, mamba_step

__all__ = [
    "GenState",
    "prefill",
    "advance",
    "step_decode",
    "greedy",
    "TemperatureSampler",
    "generate",
    "MemoryReport",
    "memory_report",
]


@dataclass
class GenState:
    ssm: list[SsmState]
    kv: list[KVCache]
    position: int = 0
    last_logits: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, model: Model, capacity: int | None = None, batch_shape: tuple = ()) -> GenState:
        cfg = model.config
        cap = cfg.context_length if capacity is None else capacity
        dt = cfg.dtype
        return cls(
            ssm=[SsmState.zeros(layer, batch_shape, dt) for layer in model.layers],
            kv=[KVCache(cap, 2 * cfg.d_model, batch_shape, dt) for _ in model.sites],
        )

    @property
    def capacity(self) -> int | None:
        return self.kv[0].capacity if self.kv else None

    @property
    def ssm_bytes(self) -> int:
        return sum(s.nbytes for s in self.ssm)

    @property
    def kv_bytes(self) -> int:
        return sum(c.nbytes_used for c in self.kv)


def _rmsnorm_np(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * w


def prefill(model: Model, prompt, capacity: int | None = None) -> tuple[GenState, np.ndarray]:
    """Run the prompt through the model in one pass, returning the decode state and
    the logits at the final position."""
    prompt = _check_tokens(model, prompt)
    cap = model.config.context_length if capacity is None else capacity
    if prompt.shape[-1] > cap:
        raise ValueError(f"prompt of {prompt.shape[-1]} tokens exceeds cache capacity {cap}")
    state = GenState.fresh(model, cap, prompt.shape[:-1])
    eps = model.config.norm_eps
    with tn.no_grad():
        x = tn.embedding(prompt, model.embed)
        x0 = x
        for i, layer in enumerate(model.layers):
            inp = x
            site = model.site_of_layer.get(i)
            if site is not None:
                inp = tn.add(x, gsa_forward(model.gsa, model.sites, site, x, x0, cache=state.kv[site]))
            out, state.ssm[i] = mamba_block_forward(layer, tn.rmsnorm(inp, model.norms[i], eps),
                                                    return_state=True)
            x = tn.add(x, out)
        last = _rmsnorm_np(x.data[..., -1, :], model.final_norm.data, eps)
    logits = last @ model.head_weight().data
    state.position = prompt.shape[-1]
    state.last_logits = logits
    return state, logits


def advance(model: Model, state: GenState, token) -> np.ndarray:
    """Feed one token (scalar or batch), updating ``state`` in place; returns next-token logits."""
    token = np.asarray(token)
    V = model.config.vocab_size
    if token.dtype.kind not in "iu" or np.any(token < 0) or np.any(token >= V):
        raise ValueError(f"token must be an integer id in [0, {V})")
    if state.capacity is not None and state.position >= state.capacity:
        raise OverflowError(f"decode position {state.position} reaches cache capacity {state.capacity}")
    eps = model.config.norm_eps
    x = model.embed.data[token]
    x0 = x
    with tn.no_grad():
        for i, layer in enumerate(model.layers):
            inp = x
            site = model.site_of_layer.get(i)
            if site is not None:
                y = gsa_forward(model.gsa, model.sites, site, x[..., None, :], x0[..., None, :],
                                cache=state.kv[site])
                inp = x + y.data[..., 0, :]
            state.ssm[i], out = mamba_step(layer, state.ssm[i], _rmsnorm_np(inp, model.norms[i].data, eps))
            x = x + out
    logits = _rmsnorm_np(x, model.final_norm.data, eps) @ model.head_weight().data
    state.position += 1
    state.last_logits = logits
    return logits


def greedy(logits: np.ndarray) -> np.ndarray | int:
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


class TemperatureSampler:
    """Sample from ``softmax(logits / temperature)`` with a seeded generator."""

    def __init__(self, temperature: float = 1.0, seed: int = 0):
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)

    def __call__(self, logits: np.ndarray):
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = self.rng.random(p.shape[:-1] + (1,))
        out = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        return int(out) if np.ndim(out) == 0 else out


def step_decode(model: Model, state: GenState, token, sampler: Callable = greedy):
    """Advance by ``token`` and pick the next one; returns ``(state, next_token)``."""
    logits = advance(model, state, token)
    return state, sampler(logits)


def _top5(logits: np.ndarray) -> list[list]:
    idx = np.argsort(-logits, kind="stable")[:5]
    return [[int(i), float(logits[i])] for i in idx]


def generate(model: Model, prompt: Sequence[int], n: int, sampler: Callable = greedy,
             trace_path=None) -> list[int]:
    """Continue a 1-d ``prompt`` by ``n`` tokens in recurrent mode."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError("prompt must be a non-empty 1-d token sequence")
    if n < 0:
        raise ValueError("n must be non-negative")
    total = prompt.size + n
    if total > model.config.context_length:
        raise ValueError(f"prompt + continuation ({total}) exceeds context_length "
                         f"{model.config.context_length}")
    state, logits = prefill(model, prompt)
    out: list[int] = []
    trace = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for j in range(n):
            tok = int(sampler(logits))
            if trace:
                trace.write(json.dumps({"position": int(prompt.size + j), "token": tok,
                                        "logit_top5": _top5(logits)}) + "\n")
            out.append(tok)
            if j + 1 < n:
                logits = advance(model, state, tok)
    finally:
        if trace:
            trace.close()
    return out


@dataclass(frozen=True)
class MemoryReport:
    seq_len: int
    bytes_per_scalar: int
    n_sites: int
    ssm_state_bytes: int
    kv_bytes: int
    baseline_kv_bytes: int

    @property
    def kv_ratio(self) -> float:
        return self.kv_bytes / self.baseline_kv_bytes if self.baseline_kv_bytes else float("nan")

    def to_dict(self) -> dict:
        return {"seq_len": self.seq_len, "bytes_per_scalar": self.bytes_per_scalar,
                "n_sites": self.n_sites, "ssm_state_bytes": self.ssm_state_bytes,
                "kv_bytes": self.kv_bytes, "baseline_kv_bytes": self.baseline_kv_bytes,
                "kv_ratio": None if self.baseline_kv_bytes == 0 else self.kv_ratio}


def memory_report(config: ZambaConfig, seq_len: int, bytes_per_scalar: int = 2) -> MemoryReport:
    """Closed-form decode memory: constant SSM state, KV only at GSA sites, and the KV
    footprint of a full transformer with the same layer count for comparison."""
    if seq_len < 0:
        raise ValueError("seq_len must be non-negative")
    L, E, d = config.n_layers, config.d_inner, config.d_model
    S = config.n_sites
    b = bytes_per_scalar
    return MemoryReport(
        seq_len=seq_len,
        bytes_per_scalar=b,
        n_sites=S,
        ssm_state_bytes=L * E * config.d_state * b + L * E * (config.d_conv - 1) * b,
        kv_bytes=S * 2 * (2 * d) * seq_len * b,
        baseline_kv_bytes=L * 2 * d * seq_len * b,
    )
