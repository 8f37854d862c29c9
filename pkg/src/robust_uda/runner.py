"""Config-driven experiment runner: builds data, runs schemes, writes metrics.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Every
default is written back out to ``run_meta.txt`` so a run can be repeated from
that file alone.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import ATTACK_NAMES, AttackBudget, named_attack
from .augment import GridShape, RmaConfig
from .core import ACTIVATIONS, Arch, Model, rng_for
from .data import DomainPair, gen_gaussian_shift, gen_grid_shift, gen_two_moons_shift, load_dataset
from .errors import ConfigError, ValidationError
from .evaluate import MetricsRecord, evaluate_model, write_metrics_csv
from .selftrain import (
    META_MODES,
    TARGET_MODES,
    SelfTrainConfig,
    run_at_uda,
    run_source_only_at,
    run_srouda,
    run_uda,
    run_uda_at,
)
from .uda import MddConfig

log = logging.getLogger(__name__)

SCHEMES = ("uda", "source-at", "at-uda", "uda-at", "srouda")
DATASETS = ("two_moons", "gaussian", "grid", "file")
PIXEL_EPSILON = 8 / 255


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _names(v: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in v.split(",") if p.strip())


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none", "auto") else float(v)


# key -> (attribute, parser)
_KEYS = {
    "dataset": ("dataset", str),
    "data.n": ("n", int),
    "data.rotation": ("rotation", float),
    "data.noise": ("noise", float),
    "data.dim": ("dim", int),
    "data.mean_shift": ("mean_shift", float),
    "data.style_shift": ("style_shift", float),
    "data.grid": ("grid", _ints),
    "data.path": ("data_path", str),
    "model.hidden": ("hidden", _ints),
    "model.activation": ("activation", str),
    "scheme": ("scheme", str),
    "seeds": ("seeds", _ints),
    "out": ("out", str),
    "attack.epsilon": ("epsilon", _opt_float),
    "attack.alpha": ("alpha", _opt_float),
    "attack.train_steps": ("train_steps", int),
    "attack.eval": ("attacks", _names),
    "mdd.gamma": ("gamma", float),
    "mdd.eta": ("eta", float),
    "mdd.soft_targets": ("mdd_soft", _bool),
    "mdd.eta_warmup": ("eta_warmup", _bool),
    "pretrain.epochs": ("pretrain_epochs", int),
    "pretrain.lr": ("pretrain_lr", float),
    "pretrain.momentum": ("pretrain_momentum", float),
    "pretrain.batch_size": ("pretrain_batch_size", int),
    "rma.enabled": ("rma_enabled", _bool),
    "rma.mask_ratio": ("mask_ratio", float),
    "selftrain.epochs": ("st_epochs", int),
    "selftrain.batch_size": ("st_batch_size", int),
    "selftrain.lr": ("st_lr", float),
    "selftrain.meta_lr": ("meta_lr", float),
    "selftrain.meta_mode": ("meta_mode", str),
    "selftrain.target_mode": ("target_mode", str),
    "selftrain.teacher_period": ("teacher_period", int),
    "selftrain.augment": ("augment", _bool),
    "source_at.epochs": ("source_at_epochs", int),
    "eval.every": ("eval_every", int),
}


@dataclass
class RunConfig:
    dataset: str = "two_moons"
    n: int = 2000
    rotation: float = 45.0
    noise: float = 0.1
    dim: int = 2
    mean_shift: float = 2.0
    style_shift: float = 0.3
    grid: tuple[int, ...] = (8, 8, 1)
    data_path: str = ""
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    scheme: str = "srouda"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    # in units of the dataset's input scale; None picks 8/255 for pixels, 0.1 otherwise
    epsilon: float | None = None
    alpha: float | None = None
    train_steps: int = 10
    attacks: tuple[str, ...] = ("pgd20", "fgsm", "cwinf")
    gamma: float = 4.0
    eta: float = 0.1
    mdd_soft: bool = False
    eta_warmup: bool = True
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.004
    pretrain_momentum: float = 0.0
    pretrain_batch_size: int = 32
    rma_enabled: bool = True
    mask_ratio: float = 0.25
    st_epochs: int = 10
    st_batch_size: int = 64
    st_lr: float = 0.0015
    meta_lr: float = 0.001
    meta_mode: str = "unrolled"
    target_mode: str = "soft"
    teacher_period: int = 1
    augment: bool = False
    source_at_epochs: int | None = None
    eval_every: int = 1

    def validate(self) -> "RunConfig":
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.dataset == "file" and not self.data_path:
            raise ConfigError("dataset = file needs data.path")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [a for a in self.attacks if a not in ATTACK_NAMES]
        if bad:
            raise ConfigError(f"unknown attack(s) {bad}; expected names from {ATTACK_NAMES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.meta_mode not in META_MODES or self.target_mode not in TARGET_MODES:
            raise ConfigError("invalid selftrain.meta_mode or selftrain.target_mode")
        if len(self.grid) != 3:
            raise ConfigError("data.grid must be h,w,c")
        if self.eval_every < 1:
            raise ConfigError("eval.every must be >= 1")
        return self

    def resolved_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return PIXEL_EPSILON if self.dataset == "grid" else 0.1

    def to_text(self) -> str:
        """Every key with its effective value, in config-file syntax."""
        lines = []
        for key, (attr, _) in _KEYS.items():
            v = getattr(self, attr)
            if attr == "epsilon":
                v = self.resolved_epsilon()
            elif attr == "alpha" and v is None:
                v = self.resolved_epsilon() / 4
            elif attr == "source_at_epochs" and v is None:
                v = self.pretrain_epochs + self.st_epochs
            if isinstance(v, tuple):
                v = ",".join(str(p) for p in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = replace(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parse = _KEYS[key]
        try:
            setattr(cfg, attr, parse(value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------- building blocks

def build_data(cfg: RunConfig, seed: int) -> DomainPair:
    rng = rng_for(seed, "data")
    try:
        if cfg.dataset == "two_moons":
            return gen_two_moons_shift(cfg.n, cfg.rotation, cfg.noise, rng)
        if cfg.dataset == "gaussian":
            return gen_gaussian_shift(cfg.n, cfg.dim, cfg.mean_shift, rng)
        if cfg.dataset == "grid":
            return gen_grid_shift(cfg.n, GridShape(*cfg.grid), cfg.style_shift, rng)
        return load_dataset(cfg.data_path)
    except ValidationError as exc:
        raise ConfigError(f"dataset: {exc}") from None


def build_arch(cfg: RunConfig, pair: DomainPair) -> Arch:
    return Arch(pair.dim, cfg.hidden, pair.n_classes, cfg.activation)


def build_mdd(cfg: RunConfig) -> MddConfig:
    return MddConfig(
        gamma=cfg.gamma,
        eta=cfg.eta,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        momentum=cfg.pretrain_momentum,
        batch_size=cfg.pretrain_batch_size,
        soft_targets=cfg.mdd_soft,
        eta_warmup=cfg.eta_warmup,
        rma=RmaConfig(mask_ratio=cfg.mask_ratio, enabled=cfg.rma_enabled),
    )


def _raw_eps(cfg: RunConfig, pair: DomainPair):
    eps = cfg.resolved_epsilon() * pair.input_scale
    alpha = None if cfg.alpha is None else cfg.alpha * pair.input_scale
    return eps, alpha


def build_selftrain(cfg: RunConfig, pair: DomainPair) -> SelfTrainConfig:
    eps, alpha = _raw_eps(cfg, pair)
    budget = AttackBudget(eps, alpha=alpha, k_max=cfg.train_steps, clip_range=pair.clip_range)
    return SelfTrainConfig(
        epochs=cfg.st_epochs,
        batch_size=cfg.st_batch_size,
        lr=cfg.st_lr,
        meta_lr=cfg.meta_lr,
        budget=budget,
        meta_mode=cfg.meta_mode,
        target_mode=cfg.target_mode,
        teacher_period=cfg.teacher_period,
        augment=cfg.augment,
    )


def eval_attacks(cfg: RunConfig, pair: DomainPair, names=None) -> dict[str, AttackBudget]:
    eps, alpha = _raw_eps(cfg, pair)
    return {name: named_attack(name, eps, alpha, pair.clip_range) for name in (names or cfg.attacks)}


# ---------------------------------------------------------------- running

@dataclass
class SeedResult:
    scheme: str
    seed: int
    records: list[MetricsRecord]
    final: dict[str, float]
    model: Model = field(repr=False)


class _Recorder:
    """Collects per-epoch metrics on the held-out target split."""

    def __init__(self, cfg, pair, scheme, attacks, last_epoch):
        self.cfg, self.pair, self.scheme = cfg, pair, scheme
        self.attacks = attacks
        self.last_epoch = last_epoch
        self.records = []

    def record(self, epoch, model, teacher=None, at_loss=math.nan, meta_loss=math.nan):
        if epoch % self.cfg.eval_every and epoch not in (0, self.last_epoch):
            return
        self.records.append(
            evaluate_model(
                model,
                self.pair.eval_x,
                self.pair.eval_y,
                self.attacks,
                epoch=epoch,
                scheme=self.scheme,
                teacher=teacher,
                at_loss=at_loss,
                meta_loss=meta_loss,
            )
        )

    def model_hook(self, epoch, model):
        self.record(epoch, model)

    def selftrain_hook(self, epoch, student, teacher, at_loss, meta_loss):
        self.record(epoch, student, teacher, at_loss, meta_loss)


def run_scheme(cfg: RunConfig, scheme: str, seed: int, pair: DomainPair | None = None, teacher: Model | None = None):
    """Run one scheme for one seed; returns a :class:`SeedResult`.

    ``teacher`` lets callers share one pre-trained source model between the
    schemes that start from it.
    """
    pair = pair if pair is not None else build_data(cfg, seed)
    arch = build_arch(cfg, pair)
    mdd = build_mdd(cfg)
    st = build_selftrain(cfg, pair)
    attacks = eval_attacks(cfg, pair)

    if scheme == "uda":
        rec = _Recorder(cfg, pair, scheme, attacks, mdd.epochs)
        if teacher is None:
            model = run_uda(pair, arch, mdd, seed, rec.model_hook)
        else:
            model = teacher
            rec.record(mdd.epochs, model)
    elif scheme == "source-at":
        epochs = cfg.source_at_epochs or (cfg.pretrain_epochs + cfg.st_epochs)
        rec = _Recorder(cfg, pair, scheme, attacks, epochs)
        model = run_source_only_at(pair, arch, st, seed, epochs, rec.model_hook)
    elif scheme == "at-uda":
        rec = _Recorder(cfg, pair, scheme, attacks, mdd.epochs)
        model = run_at_uda(pair, arch, mdd, st, seed, rec.model_hook)
    elif scheme in ("uda-at", "srouda"):
        if teacher is None:
            teacher = run_uda(pair, arch, mdd, seed)
        rec = _Recorder(cfg, pair, scheme, attacks, st.epochs)
        rec.record(0, teacher, teacher)
        runner = run_srouda if scheme == "srouda" else run_uda_at
        model, _ = runner(pair, arch, mdd, st, seed, teacher=teacher, on_epoch=rec.selftrain_hook)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")

    return _seed_result(scheme, seed, rec.records, model)


def _seed_result(scheme, seed, records, model) -> SeedResult:
    last = records[-1]
    final = {"clean_acc": last.clean_acc, "pseudo_acc": last.pseudo_acc, "feature_distance": last.feature_distance}
    final.update({f"robust_{k}": v for k, v in last.robust_acc.items()})
    return SeedResult(scheme, seed, records, final, model)


def summarize(results: list[SeedResult]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation of each final metric over seeds."""
    keys = list(results[0].final)
    out = {}
    for k in keys:
        vals = np.array([r.final[k] for r in results], dtype=np.float64)
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[k] = (float(vals.mean()), sd)
    return out


def _write_summary(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "sd"])
        for k, (m, s) in summary.items():
            w.writerow([k, f"{m:.6f}", f"{s:.6f}"])


def _write_meta(cfg: RunConfig, out: Path, extra: dict | None = None):
    text = cfg.to_text()
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in extra.items())
    (out / "run_meta.txt").write_text(text)


def _scheme_outputs(cfg, out: Path, scheme, results):
    sdir = out / scheme
    for r in results:
        d = sdir / f"seed_{r.seed}"
        d.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(r.records, d / "metrics.csv")
    summary = summarize(results)
    _write_summary(summary, sdir / "summary.csv")
    return summary


def _prepare_out(cfg) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from None
    return out


def _data_meta(cfg, seed):
    pair = build_data(cfg, seed)
    eps, alpha = _raw_eps(cfg, pair)
    return {
        "input_scale": repr(pair.input_scale),
        "epsilon_raw": repr(eps),
        "alpha_raw": repr(alpha if alpha is not None else eps / 4),
    }


def run_experiment(cfg: RunConfig):
    """Run ``cfg.scheme`` for every seed and write metrics, summary and metadata.

    Returns ``(summary, results)``.
    """
    cfg.validate()
    out = _prepare_out(cfg)
    results = [run_scheme(cfg, cfg.scheme, seed) for seed in cfg.seeds]
    summary = _scheme_outputs(cfg, out, cfg.scheme, results)
    _write_meta(cfg, out, _data_meta(cfg, cfg.seeds[0]))
    return summary, results


def compare_schemes(cfg: RunConfig, schemes=SCHEMES):
    """Run every scheme on identical data and seeds; writes ``comparison.csv``.

    uda, uda-at and srouda share one pre-trained source model per seed.
    Returns ``(table, results_by_scheme)``.
    """
    cfg.validate()
    out = _prepare_out(cfg)
    by_scheme = {s: [] for s in schemes}
    for seed in cfg.seeds:
        pair = build_data(cfg, seed)
        arch = build_arch(cfg, pair)
        shared = None
        if any(s in ("uda", "uda-at", "srouda") for s in schemes):
            rec = _Recorder(cfg, pair, "uda", eval_attacks(cfg, pair), cfg.pretrain_epochs)
            shared = run_uda(pair, arch, build_mdd(cfg), seed, rec.model_hook)
        for s in schemes:
            if s == "uda":
                by_scheme[s].append(_seed_result(s, seed, rec.records, shared))
            else:
                by_scheme[s].append(run_scheme(cfg, s, seed, pair=pair, teacher=shared))
            log.info("seed %d scheme %s: %s", seed, s, by_scheme[s][-1].final)

    table = {}
    for s in schemes:
        summary = _scheme_outputs(cfg, out, s, by_scheme[s])
        table[s] = summary
    header = ["scheme", "clean"] + [f"robust_{a}" for a in cfg.attacks]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in schemes:
            row = [s, f"{table[s]['clean_acc'][0]:.4f}"]
            row += [f"{table[s][f'robust_{a}'][0]:.4f}" for a in cfg.attacks]
            w.writerow(row)
    _write_meta(cfg, out, {**_data_meta(cfg, cfg.seeds[0]), "schemes": ",".join(schemes)})
    return table, by_scheme
