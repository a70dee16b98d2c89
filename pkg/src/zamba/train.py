"""Training: AdamW with global-norm clipping, mixed-source sampling, phase loops."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as tn
from .model import Model, forward, save_checkpoint
from .ssm import NonPositiveDeltaError
from .tensor import Tensor

__all__ = [
    "NumericalError",
    "OptimizerState",
    "adamw_step",
    "train_step",
    "mix_sampler",
    "MixedBatchSampler",
    "evaluate",
    "run_phase",
    "PhaseResult",
]

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Loss or gradient became non-finite; the step was not applied."""


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    last_grad_norm: float = float("nan")
    no_decay: frozenset = field(default_factory=frozenset)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> OptimizerState:
        # norms, biases, A_log and D skip are not decayed
        no_decay = frozenset(k for k, p in params.items() if p.ndim < 2 or k.endswith("A_log"))
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            no_decay=no_decay,
            **hyper,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "grad_clip": self.grad_clip}

    @classmethod
    def from_arrays(cls, params: dict[str, Tensor], arrays: dict[str, np.ndarray], hyper: dict) -> OptimizerState:
        state = cls.for_params(params, **{k: v for k, v in hyper.items() if k != "step"})
        state.step = int(hyper.get("step", 0))
        for k, p in params.items():
            state.m[k] = arrays[f"opt.m.{k}"].astype(p.dtype)
            state.v[k] = arrays[f"opt.v.{k}"].astype(p.dtype)
        return state


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               eta: float) -> float:
    """Clip ``grads`` to ``state.grad_clip`` global norm, then one decoupled AdamW update.

    Returns the pre-clip global gradient norm.
    """
    norm = global_norm(grads.values())
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm at step {state.step}")
    scale = state.grad_clip / norm if state.grad_clip and norm > state.grad_clip else 1.0
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for k, p in params.items():
        g = grads[k] * scale if scale != 1.0 else grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if k not in state.no_decay and state.weight_decay:
            p.data *= 1 - eta * state.weight_decay
        p.data -= eta * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.last_grad_norm = norm
    return norm


def compute_loss(model: Model, batch: np.ndarray) -> Tensor:
    batch = np.asarray(batch)
    logits = forward(model, batch[..., :-1])
    return tn.cross_entropy(logits, batch[..., 1:])


def train_step(model: Model, batch: np.ndarray, opt_state: OptimizerState, eta: float) -> float:
    """One optimisation step on ``batch`` (B, T+1); returns the pre-update loss."""
    model.zero_grad()
    try:
        loss = compute_loss(model, batch)
    except (FloatingPointError, NonPositiveDeltaError) as exc:
        raise NumericalError(f"non-finite activations at step {opt_state.step}: {exc}") from exc
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss at step {opt_state.step}")
    tn.backward(loss)
    params = model.named_parameters()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    adamw_step(params, grads, opt_state, eta)
    model.zero_grad()
    return value


# --------------------------------------------------------------------------
# data mixing


def _normalized(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"source weights must be positive and finite, got {list(weights)}")
    return w / w.sum()


def _choose(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), len(probs) - 1))


def mix_sampler(sources: Sequence[tuple[Iterable, float]], seed: int) -> Iterator:
    """Yield items drawn from source ``i`` with probability ``weight_i``.

    An exhausted source is dropped with a warning and the remaining weights
    are renormalised.
    """
    streams = [iter(s) for s, _ in sources]
    weights = list(_normalized([w for _, w in sources]))
    active = list(range(len(streams)))
    rng = np.random.default_rng(seed)
    while active:
        probs = np.asarray([weights[i] for i in active])
        i = active[_choose(rng, probs / probs.sum())]
        try:
            yield next(streams[i])
        except StopIteration:
            active.remove(i)
            if active:
                warnings.warn(f"mix_sampler: source {i} exhausted; renormalising remaining weights",
                              RuntimeWarning, stacklevel=2)


class MixedBatchSampler:
    """Random ``seq_len + 1`` windows from weighted token arrays.

    Each batch is a pure function of ``(seed, step)`` so a resumed run sees
    exactly the batches it would have seen.
    """

    def __init__(self, sources: Sequence[tuple[np.ndarray, float]], batch_size: int, seq_len: int,
                 seed: int = 0):
        self.arrays = [np.asarray(a) for a, _ in sources]
        self.probs = _normalized([w for _, w in sources])
        for a in self.arrays:
            if len(a) < seq_len + 2:
                raise ValueError(f"source of {len(a)} tokens too short for seq_len {seq_len}")
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, step])
        which = np.array([_choose(rng, self.probs) for _ in range(self.batch_size)])
        rows = []
        for i in which:
            a = self.arrays[i]
            off = int(rng.integers(0, len(a) - self.seq_len - 1))
            rows.append(a[off:off + self.seq_len + 1])
        return np.stack(rows).astype(np.int64), which


def evaluate(model: Model, tokens: np.ndarray, seq_len: int, max_windows: int = 64,
             batch_size: int = 16) -> float:
    """Mean loss over the first ``max_windows`` non-overlapping windows of ``tokens``."""
    tokens = np.asarray(tokens)
    n = min(max_windows, (len(tokens) - 1) // seq_len)
    if n < 1:
        raise ValueError("evaluation split shorter than one window")
    windows = np.stack([tokens[i * seq_len:i * seq_len + seq_len + 1] for i in range(n)]).astype(np.int64)
    total = 0.0
    with tn.no_grad():
        for i in range(0, n, batch_size):
            chunk = windows[i:i + batch_size]
            total += float(compute_loss(model, chunk).data) * len(chunk)
    return total / n


# --------------------------------------------------------------------------
# phase loop


@dataclass
class PhaseResult:
    losses: list[float]
    opt_state: OptimizerState
    tokens_seen: int
    step: int


def run_phase(model: Model, schedule: Callable[[float], float], sampler: MixedBatchSampler,
              steps: int, *, phase: str = "phase1", opt_state: OptimizerState | None = None,
              start_step: int = 0, tokens_seen: int = 0, metrics_path=None, checkpoint_dir=None,
              checkpoint_interval: int = 2500, optimizer_hyper: dict | None = None,
              run_meta: dict | None = None) -> PhaseResult:
    """Train ``steps`` steps (from ``start_step``), logging JSON lines and writing ZMB1 checkpoints."""
    params = model.named_parameters()
    if opt_state is None:
        opt_state = OptimizerState.for_params(params, **(optimizer_hyper or {}))
    losses = []
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        for t in range(start_step, steps):
            eta = schedule(t)
            batch, _ = sampler.batch(t)
            loss = train_step(model, batch, opt_state, eta)
            tokens_seen += batch.shape[0] * (batch.shape[1] - 1)
            losses.append(loss)
            if metrics:
                metrics.write(json.dumps({"step": t, "phase": phase, "lr": eta, "loss": loss,
                                          "grad_norm": opt_state.last_grad_norm,
                                          "tokens_seen": tokens_seen}) + "\n")
                metrics.flush()
            done = t + 1
            if ckpt_dir and (done % checkpoint_interval == 0 or done == steps):
                meta = {"phase": phase, "step": done, "tokens_seen": tokens_seen,
                        "optimizer": opt_state.hyper(), **(run_meta or {})}
                save_checkpoint(ckpt_dir / f"{phase}_step{done:07d}.zmb", model,
                                extra=opt_state.to_arrays(), meta=meta)
                log.info("checkpoint %s step %d loss %.4f", phase, done, loss)
    finally:
        if metrics:
            metrics.close()
    return PhaseResult(losses=losses, opt_state=opt_state, tokens_seen=tokens_seen, step=steps)
