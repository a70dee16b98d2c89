"""Hybrid model: Mamba backbone with one globally shared attention block.

Layer recursion for blocks ``l = 0 .. L-1``::

    x_{l+1} = x_l + Mamba_l(Norm_l(x_l + y_l))

where ``y_l`` is the shared attention block's output at GSA sites and zero
elsewhere. ``x_0`` (the post-embedding activations) feeds every GSA site.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as tn
from .attention import GsaParams, gsa_forward
from .ssm import INPUT_DISCRETIZATIONS, SCAN_MODES, MambaParams, mamba_block_forward
from .tensor import Tensor

__all__ = [
    "ZambaConfig",
    "Model",
    "ConfigError",
    "gsa_sites",
    "build",
    "forward",
    "count_params",
    "param_count_formula",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"ZMB1"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ZambaConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 12
    gsa_period: int = 3
    d_state: int = 16
    d_conv: int = 4
    n_heads: int = 4
    expand_factor: int = 2
    dt_rank: int | None = None
    mlp_hidden: int | None = None
    context_length: int = 256
    seed: int = 0
    precision: str = "fp32"
    input_discretization: str = "euler"
    rope: bool = False
    sites_from_zero: bool = False
    tie_embeddings: bool = False
    use_d_skip: bool = True
    scan_mode: str = "fused"
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_model / 16)
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "gsa_period", "d_state", "d_conv",
                     "n_heads", "expand_factor", "dt_rank", "mlp_hidden", "context_length"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if (2 * self.d_model) % self.n_heads:
            raise ConfigError("n_heads", f"must divide 2*d_model={2 * self.d_model}")
        if self.precision not in ("fp32", "fp64"):
            raise ConfigError("precision", f"must be 'fp32' or 'fp64', got {self.precision!r}")
        if self.input_discretization not in INPUT_DISCRETIZATIONS:
            raise ConfigError("input_discretization", f"must be one of {INPUT_DISCRETIZATIONS}")
        if self.scan_mode not in SCAN_MODES:
            raise ConfigError("scan_mode", f"must be one of {SCAN_MODES}")
        if self.rope and ((2 * self.d_model) // self.n_heads) % 2:
            raise ConfigError("rope", "needs an even attention head dimension")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps", "must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand_factor * self.d_model

    @property
    def n_sites(self) -> int:
        return len(gsa_sites(self.n_layers, self.gsa_period, self.sites_from_zero))

    @property
    def dtype(self):
        return np.float64 if self.precision == "fp64" else np.float32

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ZambaConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        return cls(**d)

    def replace(self, **changes) -> ZambaConfig:
        return dataclasses.replace(self, **changes)


def gsa_sites(n_layers: int, period: int, from_zero: bool = False) -> list[int]:
    """1-based indices of the Mamba blocks preceded by a GSA invocation.

    Default placement is ``N, 2N, ..., floor(L/N) * N``; ``from_zero`` shifts
    it to ``1, N+1, ...`` with the same count. ``L < N`` gives no sites.
    """
    if n_layers < 1 or period < 1:
        raise ValueError(f"need n_layers >= 1 and period >= 1, got ({n_layers}, {period})")
    count = n_layers // period
    first = 1 if from_zero else period
    return [first + i * period for i in range(count)]


@dataclass
class Model:
    config: ZambaConfig
    embed: Tensor
    norms: list[Tensor]
    layers: list[MambaParams]
    gsa: GsaParams | None
    sites: list[Tensor]
    final_norm: Tensor
    head: Tensor | None
    site_of_layer: dict[int, int] = field(default_factory=dict)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, (norm, layer) in enumerate(zip(self.norms, self.layers)):
            out[f"layers.{i}.norm"] = norm
            for k, v in layer.named_parameters().items():
                out[f"layers.{i}.{k}"] = v
        if self.gsa is not None:
            for k, v in self.gsa.named_parameters().items():
                out[f"gsa.{k}"] = v
        for j, s in enumerate(self.sites):
            out[f"sites.{j}"] = s
        out["final_norm"] = self.final_norm
        if self.head is not None:
            out["head"] = self.head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def head_weight(self) -> Tensor:
        return self.head if self.head is not None else tn.swapaxes(self.embed, 0, 1)

    def forward(self, tokens) -> Tensor:
        return forward(self, tokens)


def build(config: ZambaConfig, seed: int | None = None) -> Model:
    """Deterministically initialise a model; the same seed gives bit-identical weights."""
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dt = config.dtype
    d, L = config.d_model, config.n_layers
    embed = tn.parameter(rng.standard_normal((config.vocab_size, d)).astype(dt))
    norms, layers = [], []
    for _ in range(L):
        norms.append(tn.parameter(np.ones(d, dtype=dt)))
        layers.append(MambaParams.init(
            d, rng, d_state=config.d_state, d_conv=config.d_conv, expand=config.expand_factor,
            dt_rank=config.dt_rank, dtype=dt, use_d_skip=config.use_d_skip,
            out_scale=1.0 / math.sqrt(2 * L),
            input_discretization=config.input_discretization, scan_mode=config.scan_mode,
        ))
    site_blocks = gsa_sites(L, config.gsa_period, config.sites_from_zero)
    gsa = None
    sites: list[Tensor] = []
    if site_blocks:
        gsa = GsaParams.init(d, config.mlp_hidden, config.n_heads, rng, dtype=dt,
                             rope=config.rope, eps=config.norm_eps)
        for _ in site_blocks:
            w = rng.standard_normal((d, d)) / math.sqrt(d) / math.sqrt(2 * len(site_blocks))
            sites.append(tn.parameter(w.astype(dt)))
    head = None
    if not config.tie_embeddings:
        head = tn.parameter((0.1 * rng.standard_normal((d, config.vocab_size)) / math.sqrt(d)).astype(dt))
    return Model(
        config=config,
        embed=embed,
        norms=norms,
        layers=layers,
        gsa=gsa,
        sites=sites,
        final_norm=tn.parameter(np.ones(d, dtype=dt)),
        head=head,
        site_of_layer={blk - 1: j for j, blk in enumerate(site_blocks)},
    )


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise TypeError("tokens must be integers")
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise ValueError(f"tokens must be (T,) or (B, T) with T >= 1, got {tokens.shape}")
    V = model.config.vocab_size
    if tokens.min() < 0 or tokens.max() >= V:
        raise ValueError(f"token id out of vocabulary range [0, {V})")
    if tokens.shape[-1] > model.config.context_length:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds context_length "
                         f"{model.config.context_length}")
    return tokens


def forward(model: Model, tokens) -> Tensor:
    """Next-token logits of shape (..., T, vocab) for integer ``tokens`` (T,) or (B, T)."""
    tokens = _check_tokens(model, tokens)
    eps = model.config.norm_eps
    x = tn.embedding(tokens, model.embed)
    x0 = x
    for i, layer in enumerate(model.layers):
        inp = x
        site = model.site_of_layer.get(i)
        if site is not None:
            inp = tn.add(x, gsa_forward(model.gsa, model.sites, site, x, x0))
        x = tn.add(x, mamba_block_forward(layer, tn.rmsnorm(inp, model.norms[i], eps)))
    x = tn.rmsnorm(x, model.final_norm, eps)
    return tn.matmul(x, model.head_weight())


def count_params(model: Model) -> tuple[int, float]:
    """Total stored parameters and the fraction held by the shared attention block."""
    named = model.named_parameters()
    total = sum(p.size for p in named.values())
    shared = sum(p.size for k, p in named.items() if k.startswith("gsa."))
    return total, (shared / total if total else 0.0)


def param_count_formula(config: ZambaConfig) -> dict[str, int]:
    """Closed-form parameter count broken down by component."""
    d, V, L = config.d_model, config.vocab_size, config.n_layers
    E, N, R, k, H = config.d_inner, config.d_state, config.dt_rank, config.d_conv, config.mlp_hidden
    S = config.n_sites
    mamba = (d                      # pre-norm
             + d * 2 * E            # in_proj
             + E * k                # conv
             + E * (R + 2 * N)      # x_proj
             + R * E + E            # dt_proj + bias
             + E * N                # A_log
             + (E if config.use_d_skip else 0)
             + E * d)               # out_proj
    gsa = 0
    if S:
        gsa = 2 * d + (2 * d) * (6 * d) + (2 * d) * d + d + d * H + H * d
    parts = {
        "embedding": V * d,
        "mamba": L * mamba,
        "gsa_shared": gsa,
        "site_projections": S * d * d,
        "final_norm": d,
        "head": 0 if config.tie_embeddings else d * V,
    }
    parts["total"] = sum(parts.values())
    return parts


# --------------------------------------------------------------------------
# checkpoint format
#
# "ZMB1" | u32 version | u32 len + UTF-8 JSON {config, meta} | u32 n_tensors |
# per tensor: u32 name_len + UTF-8 name | u32 rank | u32 extents... | f32 LE data


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def save_checkpoint(path, model: Model, extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, Any] | None = None) -> None:
    """Write ``model`` (and optional extra named arrays) in ZMB1 format."""
    tensors = {k: v.data for k, v in model.named_parameters().items()}
    for k, v in (extra or {}).items():
        if k in tensors:
            raise ValueError(f"extra tensor name collides with parameter: {k}")
        tensors[k] = np.asarray(v)
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Raw read: header record and every named array."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a ZMB1 checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            n = int(np.prod(shape)) if rank else 1
            arrays[name] = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").reshape(shape).copy()
    return header, arrays


def load_checkpoint(path, expect: ZambaConfig | None = None):
    """Rebuild a model from a ZMB1 file; returns ``(model, meta, extra_arrays)``.

    With ``expect`` the stored architecture must match it; a mismatch raises
    :class:`ConfigError` listing the differing fields.
    """
    header, arrays = read_checkpoint(path)
    config = ZambaConfig.from_dict(header["config"])
    if expect is not None:
        diff = architecture_diff(config, expect)
        if diff:
            raise ConfigError(diff[0], "checkpoint/config architecture mismatch: " + ", ".join(
                f"{k} ({getattr(config, k)!r} != {getattr(expect, k)!r})" for k in diff))
    model = build(config)
    named = model.named_parameters()
    for name, p in named.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        arr = arrays.pop(name)
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(config.dtype)
    return model, header.get("meta", {}), arrays


ARCH_FIELDS = ("vocab_size", "d_model", "n_layers", "gsa_period", "d_state", "d_conv", "n_heads",
               "expand_factor", "dt_rank", "mlp_hidden", "input_discretization", "rope",
               "sites_from_zero", "tie_embeddings", "use_d_skip")


def architecture_diff(a: ZambaConfig, b: ZambaConfig) -> list[str]:
    return [f for f in ARCH_FIELDS if getattr(a, f) != getattr(b, f)]
