"""Command-line entry point: ``zamba {prep,train,anneal,schedule,generate,memstat}``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical abort.
Flag defaults can be set through environment variables prefixed ``ZAMBA_``
(``ZAMBA_CONFIG``, ``ZAMBA_SEED``, ``ZAMBA_OUT``, ``ZAMBA_THREADS``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import corpus, data
from .inference import TemperatureSampler, generate, greedy, memory_report
from .model import CheckpointError, ConfigError, ZambaConfig, build, load_checkpoint
from .schedule import AnnealSchedule, Phase1Schedule
from .train import MixedBatchSampler, NumericalError, OptimizerState, evaluate, run_phase

log = logging.getLogger("zamba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "ZAMBA_"


def _from_dict(cls, section: str, d: dict[str, Any] | None):
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError(section, "must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown config key")
    return cls(**d)


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 256
    checkpoint_interval: int = 2500
    eta_max: float = 1.5e-4
    eta_min: float = 7.5e-5
    warmup_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    val_fraction: float = 0.05

    def optimizer(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "grad_clip": self.grad_clip}


@dataclass
class AnnealSettings:
    steps: int = 500
    eta0: float = 1.1e-4
    etaT: float = 1e-7
    gamma: float = 0.25
    rewarmup_steps: int | None = None
    replay_fraction: float = 0.6
    synthetic_chars: int = 200_000


@dataclass
class DataSettings:
    # token sources for phase 1: [{"path": text file, "weight": w}]; empty -> bundled corpus
    sources: list = field(default_factory=list)
    # plain-text anneal split; null -> synthetic templated prose
    anneal_path: str | None = None


@dataclass
class PrepSettings:
    query_only: list = field(default_factory=lambda: ["refinedweb"])
    minhash_seed: int = 1


@dataclass
class RunConfig:
    model: ZambaConfig = field(default_factory=ZambaConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    anneal: AnnealSettings = field(default_factory=AnnealSettings)
    data: DataSettings = field(default_factory=DataSettings)
    prep: PrepSettings = field(default_factory=PrepSettings)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a mapping")
        unknown = sorted(set(d) - {"model", "train", "anneal", "data", "prep"})
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        model = d.get("model") or {}
        known = {f.name for f in dataclasses.fields(ZambaConfig)}
        bad = sorted(set(model) - known)
        if bad:
            raise ConfigError(f"model.{bad[0]}", "unknown config key")
        try:
            return cls(
                model=ZambaConfig(**model),
                train=_from_dict(TrainSettings, "train", d.get("train")),
                anneal=_from_dict(AnnealSettings, "anneal", d.get("anneal")),
                data=_from_dict(DataSettings, "data", d.get("data")),
                prep=_from_dict(PrepSettings, "prep", d.get("prep")),
            )
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train),
                "anneal": dataclasses.asdict(self.anneal), "data": dataclasses.asdict(self.data),
                "prep": dataclasses.asdict(self.prep)}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise corpus.DataError(f"cannot read {path}: {exc}") from exc


def _phase1_tokens(cfg: RunConfig) -> tuple[list[tuple[np.ndarray, float]], np.ndarray]:
    """Training sources with weights, plus a validation split taken from each source's tail."""
    if cfg.data.sources:
        raw = []
        for i, src in enumerate(cfg.data.sources):
            if not isinstance(src, dict) or set(src) - {"path", "weight"} or "path" not in src:
                raise ConfigError(f"data.sources[{i}]", "expected {path, weight}")
            raw.append((corpus.byte_tokenize(_read_text(src["path"]), specials=False),
                        float(src.get("weight", 1.0))))
    else:
        raw = [(data.bundled_tokens(), 1.0)]
    train, val = [], []
    for toks, w in raw:
        tr, va = data.split_tokens(toks, cfg.train.val_fraction)
        train.append((tr, w))
        val.append(va)
    return train, np.concatenate(val)


def _anneal_tokens(cfg: RunConfig) -> np.ndarray:
    if cfg.data.anneal_path:
        return corpus.byte_tokenize(_read_text(cfg.data.anneal_path), specials=False)
    return data.synthetic_tokens(cfg.anneal.synthetic_chars, seed=cfg.model.seed)


def _write_effective(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def _load_for(cfg: RunConfig | None, path):
    try:
        return load_checkpoint(path, expect=cfg.model if cfg else None)
    except (OSError, CheckpointError) as exc:
        raise corpus.DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _log_summary(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands


def cmd_prep(args, cfg: RunConfig) -> int:
    query_only = set(cfg.prep.query_only) | set(args.query_only or [])
    corpora = [(str(p), corpus.read_jsonl(p)) for p in args.inputs]
    records, report = corpus.dedup_corpora(corpora, query_only=query_only, seed=cfg.prep.minhash_seed)
    out = Path(args.out)
    _write_effective(out, cfg)
    corpus.write_jsonl(out / "prepped.jsonl", (r.to_json() for r in records))
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    _log_summary(report.to_json())
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _write_effective(out, cfg)
    t = cfg.train
    sources, val = _phase1_tokens(cfg)
    sampler = MixedBatchSampler(sources, t.batch_size, t.seq_len, seed=cfg.model.seed)
    schedule = Phase1Schedule(t.steps, t.eta_max, t.eta_min, t.warmup_fraction)
    start, tokens_seen, opt = 0, 0, None
    if args.from_checkpoint:
        model, meta, extra = _load_for(cfg, args.from_checkpoint)
        if meta.get("phase") != "phase1":
            raise ConfigError("--from-checkpoint", "train resumes only from a phase1 checkpoint")
        start, tokens_seen = int(meta["step"]), int(meta["tokens_seen"])
        opt = OptimizerState.from_arrays(model.named_parameters(), extra, meta["optimizer"])
    else:
        model = build(cfg.model)
    result = run_phase(model, schedule, sampler, t.steps, phase="phase1", opt_state=opt,
                       start_step=start, tokens_seen=tokens_seen,
                       metrics_path=out / "metrics.jsonl", checkpoint_dir=out / "checkpoints",
                       checkpoint_interval=t.checkpoint_interval, optimizer_hyper=t.optimizer())
    _log_summary({"phase": "phase1", "steps": t.steps, "start_step": start,
                  "first_loss": result.losses[0] if result.losses else None,
                  "final_loss": result.losses[-1] if result.losses else None,
                  "val_loss": evaluate(model, val, t.seq_len),
                  "checkpoint": str(out / "checkpoints" / f"phase1_step{t.steps:07d}.zmb")})
    return EXIT_OK


def cmd_anneal(args, cfg: RunConfig) -> int:
    if not args.from_checkpoint:
        raise UsageError("anneal requires --from-checkpoint (a phase1 or anneal checkpoint)")
    out = Path(args.out)
    _write_effective(out, cfg)
    a, t = cfg.anneal, cfg.train
    if not 0 < a.replay_fraction < 1:
        raise ConfigError("anneal.replay_fraction", "must lie in (0, 1)")
    model, meta, extra = _load_for(cfg, args.from_checkpoint)
    sources, _ = _phase1_tokens(cfg)
    replay = np.concatenate([s for s, _ in sources])
    anneal_train, anneal_val = data.split_tokens(_anneal_tokens(cfg), t.val_fraction)
    sampler = MixedBatchSampler([(replay, a.replay_fraction), (anneal_train, 1 - a.replay_fraction)],
                                t.batch_size, t.seq_len, seed=cfg.model.seed + 1)
    schedule = AnnealSchedule(a.steps, a.eta0, a.etaT, a.gamma, a.rewarmup_steps)
    if meta.get("phase") == "anneal":
        start, tokens_seen = int(meta["step"]), int(meta["tokens_seen"])
        opt = OptimizerState.from_arrays(model.named_parameters(), extra, meta["optimizer"])
    else:
        # new phase: fresh moments and step counter, schedule restarts from 0
        start, tokens_seen, opt = 0, int(meta.get("tokens_seen", 0)), None
    result = run_phase(model, schedule, sampler, a.steps, phase="anneal", opt_state=opt,
                       start_step=start, tokens_seen=tokens_seen,
                       metrics_path=out / "metrics.jsonl", checkpoint_dir=out / "checkpoints",
                       checkpoint_interval=t.checkpoint_interval, optimizer_hyper=t.optimizer())
    _log_summary({"phase": "anneal", "steps": a.steps, "start_step": start,
                  "final_loss": result.losses[-1] if result.losses else None,
                  "anneal_val_loss": evaluate(model, anneal_val, t.seq_len),
                  "checkpoint": str(out / "checkpoints" / f"anneal_step{a.steps:07d}.zmb")})
    return EXIT_OK


def cmd_schedule(args, cfg: RunConfig) -> int:
    if args.phase == "phase1":
        t = cfg.train
        sched = Phase1Schedule(t.steps, t.eta_max, t.eta_min, t.warmup_fraction)
        summary = {"phase": "phase1", "total_steps": t.steps, "warmup_steps": sched.warmup_steps,
                   "start": sched(0), "peak": sched(sched.warmup_steps),
                   "midpoint": sched(t.steps / 2), "end": sched(t.steps)}
    else:
        a = cfg.anneal
        sched = AnnealSchedule(a.steps, a.eta0, a.etaT, a.gamma, a.rewarmup_steps)
        summary = {"phase": "anneal", "total_steps": a.steps, "rewarmup_steps": sched.rewarmup_steps,
                   "A": sched.A, "B": sched.B, "decay_start": sched.decay(0),
                   "decay_midpoint": sched.decay(sched.decay_steps / 2),
                   "end": sched(a.steps)}
    if args.dump:
        total = sched.total_steps
        lines = ["step\tlr"] + [f"{s}\t{sched(s):.9e}" for s in range(total + 1)]
        text = "\n".join(lines) + "\n"
        if args.dump == "-":
            sys.stdout.write(text)
            return EXIT_OK
        Path(args.dump).write_text(text)
    _log_summary(summary)
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    if not args.from_checkpoint:
        raise UsageError("generate requires --from-checkpoint")
    if not args.prompt:
        raise UsageError("prompt must be non-empty")
    model, _, _ = _load_for(None, args.from_checkpoint)
    sampler = greedy if args.temperature == 0 else TemperatureSampler(args.temperature, args.seed or 0)
    ids = generate(model, corpus.byte_tokenize(args.prompt, specials=False), args.n, sampler,
                   trace_path=args.trace)
    sys.stdout.write(corpus.detokenize(ids) + "\n")
    return EXIT_OK


def cmd_memstat(args, cfg: RunConfig) -> int:
    rep = memory_report(cfg.model, args.seq_len, args.bytes_per_scalar)
    _log_summary(rep.to_dict())
    return EXIT_OK


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "anneal": cmd_anneal, "schedule": cmd_schedule,
            "generate": cmd_generate, "memstat": cmd_memstat}


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"), help="JSON run config (env ZAMBA_CONFIG)")
    common.add_argument("--seed", type=int, default=_env("SEED"), help="overrides model.seed (env ZAMBA_SEED)")
    common.add_argument("--out", default=_env("OUT", "zamba_out"), help="output directory (env ZAMBA_OUT)")
    common.add_argument("--threads", type=int, default=_env("THREADS", 1),
                        help="BLAS threads; 1 keeps runs bit-reproducible (env ZAMBA_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="zamba", description="Train, anneal and sample a hybrid Mamba/shared-attention model.",
        epilog="exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numerical abort")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prep", parents=[common], help="filter and dedup JSONL corpora")
    sp.add_argument("inputs", nargs="*", help="JSONL files {id, source, text}, in insertion order")
    sp.add_argument("--query-only", action="append", metavar="SOURCE",
                    help="source tag checked against the index but never inserted (repeatable)")

    sp = sub.add_parser("train", parents=[common], help="phase-1 pretraining")
    sp.add_argument("--from-checkpoint", help="resume from a phase1 checkpoint")

    sp = sub.add_parser("anneal", parents=[common], help="annealing phase with replay")
    sp.add_argument("--from-checkpoint", help="phase1 checkpoint to anneal (required)")

    sp = sub.add_parser("schedule", parents=[common], help="inspect learning-rate schedules")
    sp.add_argument("--phase", choices=["phase1", "anneal"], default="phase1")
    sp.add_argument("--dump", metavar="PATH", help="write the per-step table ('-' for stdout)")

    sp = sub.add_parser("generate", parents=[common], help="generate text from a checkpoint")
    sp.add_argument("--from-checkpoint", help="model checkpoint (required)")
    sp.add_argument("--prompt", default="")
    sp.add_argument("-n", type=int, default=64, help="tokens to generate")
    sp.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    sp.add_argument("--trace", help="write {position, token, logit_top5} lines here")

    sp = sub.add_parser("memstat", parents=[common], help="decode memory report")
    sp.add_argument("--seq-len", type=int, default=4096)
    sp.add_argument("--bytes-per-scalar", type=int, default=2)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.model = cfg.model.replace(seed=int(args.seed))
        with threadpool_limits(limits=int(args.threads)):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"zamba {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except corpus.DataError as exc:
        print(f"zamba {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"zamba {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
