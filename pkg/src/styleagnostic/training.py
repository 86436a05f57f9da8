"""Losses and the per-iteration optimization schedule.

Each iteration runs three separate minimizations on one shared feature pass:

1. content loss on style-randomized features, updating the feature
   extractor and the content head;
2. style loss on content-randomized (detached) features, updating only the
   style head;
3. adversarial loss (cross-entropy of the style head's prediction against
   the uniform distribution), updating only the feature extractor's
   normalization scale/shift parameters.

Unlabeled batches add a prediction-consistency term to step 1 and their own
adversarial term to step 3.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import numcore as nc
from .network import ModelBundle
from .numcore import SGD, Tape, Tensor, backward, cosine_lr
from .stylestats import EPS_STATS, batch_shuffle, content_randomize, style_randomize

VARIANTS = ("full", "no_CBL", "no_ASBL", "baseline")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "StepReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lambda_adv: float = 0.1
    lambda_unl: float = 0.01
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    total_iters: int = 600
    seed: int = 0
    use_sr: bool = True
    train_style: bool = True
    eps_stats: float = EPS_STATS
    trace_every: int = 50
    check_partition: bool = False

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_unl < 0:
            raise ValueError("lambda_adv and lambda_unl must be non-negative")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "TrainConfig":
        """Config for one of the component ablations.

        ``no_CBL`` passes features through unrandomized, ``no_ASBL`` drops the
        style head and the adversarial term, ``baseline`` drops both.
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        cfg = cls(**kw)
        if variant in ("no_CBL", "baseline"):
            cfg = replace(cfg, use_sr=False)
        if variant in ("no_ASBL", "baseline"):
            cfg = replace(cfg, lambda_adv=0.0, train_style=False)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    iteration: int
    lr: float
    loss_c: float = float("nan")
    loss_s: Optional[float] = None
    loss_adv: Optional[float] = None
    loss_unl: Optional[float] = None
    acc_c: Optional[float] = None
    grad_norms: dict = field(default_factory=dict)
    changed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("changed")
        return d


# losses ---------------------------------------------------------------------

def _check_one_hot(y: np.ndarray, logp: Tensor) -> None:
    if y.shape != logp.shape:
        raise ValueError(f"labels shape {y.shape} != predictions shape {logp.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")


def content_loss(logp_c: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    y = np.asarray(y, dtype=logp_c.dtype)
    _check_one_hot(y, logp_c)
    return -nc.mean(nc.sum(logp_c * y, axis=1))


def style_loss(logp_s: Tensor, y) -> Tensor:
    """Same cross-entropy as :func:`content_loss`, applied to the style head."""
    return content_loss(logp_s, y)


def adversarial_loss(logp_s: Tensor, lambda_adv: float) -> Tensor:
    """``lambda_adv`` times the cross-entropy between the uniform distribution and ``exp(logp_s)``.

    Bounded below by ``lambda_adv * ln K``, attained at a uniform prediction.
    """
    k = logp_s.shape[1]
    return -lambda_adv * nc.mean(nc.sum(logp_s, axis=1) * (1.0 / k))


def consistency_from_logp(logp_sr: Tensor, logp_plain: Tensor, lambda_unl: float) -> Tensor:
    """``lambda_unl`` times the mean squared distance between probability vectors."""
    diff = nc.exp(logp_sr) - nc.exp(logp_plain)
    return lambda_unl * nc.mean(nc.sum(nc.square(diff), axis=1))


def consistency_loss(model: ModelBundle, x_unl: Tensor, perm, alpha, lambda_unl: float,
                     eps_stats: float = EPS_STATS, z: Optional[Tensor] = None) -> Tensor:
    """Disagreement between predictions with and without style randomization.

    ``perm`` picks each sample's partner within ``x_unl``; pass ``z`` to reuse
    already computed features.
    """
    if z is None:
        z = model.features(nc.as_tensor(x_unl))
    z_prime = nc.take(z, perm, axis=0)
    logp_sr = model.content_head(style_randomize(z, z_prime, alpha, eps_stats))
    logp_plain = model.content_head(z)
    return consistency_from_logp(logp_sr, logp_plain, lambda_unl)


def one_hot(labels, k: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((len(labels), k), dtype=dtype or nc.default_dtype())
    out[np.arange(len(labels)), labels] = 1
    return out


# step ---------------------------------------------------------------------------

def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def _snapshot(model: ModelBundle) -> dict[str, bytes]:
    return {name: p.data.tobytes() for name, p in model.named_parameters()}


def _changed(model: ModelBundle, before: dict[str, bytes]) -> set[str]:
    return {name for name, p in model.named_parameters() if p.data.tobytes() != before[name]}


class Trainer:
    """Holds the model, optimizer state and random streams for one run.

    Batch sampling and feature randomization use separate streams so a
    variant that skips randomization sees the same batches.
    """

    def __init__(self, model: ModelBundle, config: TrainConfig):
        self.model = model
        self.config = config
        groups = model.param_groups
        self.groups = groups
        self.content_params = groups["f_all"] + groups["c_all"]
        self.opt_content = SGD(self.content_params, config.lr, config.momentum, config.weight_decay)
        self.opt_style = SGD(groups["s_all"], config.lr, config.momentum, config.weight_decay)
        self.opt_adv = SGD(groups["f_affine"], config.lr, config.momentum, 0.0)
        data_ss, rand_ss, unl_ss = np.random.SeedSequence(config.seed).spawn(3)
        self.data_rng = np.random.default_rng(data_ss)
        self.rand_rng = np.random.default_rng(rand_ss)
        self.unl_rng = np.random.default_rng(unl_ss)
        self.iteration = 0
        self.affine_names = {p.name for p in groups["f_affine"]}
        self.group_names = {k: {p.name for p in v} for k, v in groups.items()}

    @property
    def uses_style_head(self) -> bool:
        return self.config.train_style or self.config.lambda_adv > 0

    def _randomize(self, z: Tensor, rng):
        n = z.shape[0]
        z_prime, perm = batch_shuffle(z, rng)
        alpha = rng.uniform(0.0, 1.0, size=n)
        return z_prime, perm, alpha

    def step(self, x: np.ndarray, y: np.ndarray, x_unl: Optional[np.ndarray] = None) -> StepReport:
        cfg, model = self.config, self.model
        dtype = model.dtype
        lr = cosine_lr(cfg.lr, self.iteration, cfg.total_iters)
        report = StepReport(self.iteration, lr)
        Y = one_hot(y, model.config.num_classes, dtype) if np.ndim(y) == 1 else np.asarray(y, dtype=dtype)
        use_unl = x_unl is not None and cfg.lambda_unl > 0
        use_unl_adv = x_unl is not None and cfg.lambda_adv > 0
        check = cfg.check_partition

        try:
            with Tape() as tape:
                z = model.features(Tensor(x, dtype=dtype))
                z_prime, _, alpha = self._randomize(z, self.rand_rng)
                z_c = style_randomize(z, z_prime, alpha, cfg.eps_stats) if cfg.use_sr else z
                logp_c = model.content_head(z_c)
                l_c = content_loss(logp_c, Y)
                report.loss_c = l_c.item()
                report.acc_c = float(np.mean(np.argmax(logp_c.data, 1) == np.argmax(Y, 1)))
                total = l_c
                if use_unl or use_unl_adv:
                    z_u = model.features(Tensor(x_unl, dtype=dtype))
                    z_u_prime, perm_u, alpha_u = self._randomize(z_u, self.unl_rng)
                if use_unl:
                    l_unl = consistency_loss(model, None, perm_u, alpha_u, cfg.lambda_unl, cfg.eps_stats, z=z_u)
                    report.loss_unl = l_unl.item()
                    total = total + l_unl

                # 1. content-biased update of G_f and G_c
                before = _snapshot(model) if check else None
                self.opt_content.zero_grad()
                backward(total, tape, wrt=self.content_params)
                report.grad_norms["content"] = _grad_norm(self.content_params)
                self.opt_content.step(lr)
                if check:
                    report.changed["content"] = _changed(model, before)

                # 2. style-biased update of G_s on detached features
                if cfg.train_style:
                    z_s = content_randomize(z.detach(), z_prime.detach(), cfg.eps_stats)
                    l_s = style_loss(model.style_head(z_s), Y)
                    report.loss_s = l_s.item()
                    before = _snapshot(model) if check else None
                    self.opt_style.zero_grad()
                    backward(l_s, tape, wrt=self.groups["s_all"])
                    report.grad_norms["style"] = _grad_norm(self.groups["s_all"])
                    self.opt_style.step(lr)
                    if check:
                        report.changed["style"] = _changed(model, before)

                # 3. adversarial update of G_f's affine parameters only
                if cfg.lambda_adv > 0:
                    l_adv = adversarial_loss(model.style_head(content_randomize(z, z_prime, cfg.eps_stats)),
                                             cfg.lambda_adv)
                    if use_unl_adv:
                        l_adv = l_adv + adversarial_loss(
                            model.style_head(content_randomize(z_u, z_u_prime, cfg.eps_stats)), cfg.lambda_adv)
                    report.loss_adv = l_adv.item()
                    before = _snapshot(model) if check else None
                    affine = self.groups["f_affine"]
                    self.opt_adv.zero_grad()
                    backward(l_adv, tape, wrt=affine)
                    report.grad_norms["adversarial"] = _grad_norm(affine)
                    self.opt_adv.step(lr)
                    if check:
                        report.changed["adversarial"] = _changed(model, before)
        except nc.NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {self.iteration}: {exc}", report) from exc

        for name in ("loss_c", "loss_s", "loss_adv", "loss_unl"):
            v = getattr(report, name)
            if v is not None and not math.isfinite(v):
                raise TrainingDiverged(f"iteration {self.iteration}: {name} is {v}", report)
        self.iteration += 1
        return report


def train_step(trainer: Trainer, x, y, x_unl=None) -> StepReport:
    return trainer.step(x, y, x_unl)


class BatchSampler:
    """Epoch-wise shuffled minibatches drawn with the given generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("dataset is empty")
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class TrainResult:
    model: ModelBundle
    trace: list
    reports: list


def train(model: ModelBundle, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          unlabeled: Optional[np.ndarray] = None, trace_path=None,
          callback: Optional[Callable[[Trainer, StepReport], Optional[dict]]] = None,
          keep_reports: bool = False) -> TrainResult:
    """Run ``config.total_iters`` steps with cosine learning-rate decay.

    Every ``trace_every`` iterations (and at the last one) a record is added
    to the trace and, if ``trace_path`` is set, appended to it as one JSON
    line. ``callback`` may return extra fields for that record.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    trainer = Trainer(model, config)
    sampler = BatchSampler(len(images), config.batch_size, trainer.data_rng)
    unl_sampler = BatchSampler(len(unlabeled), config.batch_size, trainer.unl_rng) if unlabeled is not None else None
    trace, reports = [], []
    fh = open(trace_path, "a", encoding="utf-8") if trace_path else None
    try:
        for it in range(config.total_iters):
            idx = sampler.next()
            x_unl = unlabeled[unl_sampler.next()] if unl_sampler is not None else None
            report = trainer.step(images[idx], labels[idx], x_unl)
            if keep_reports:
                reports.append(report)
            last = it == config.total_iters - 1
            if config.trace_every and (it % config.trace_every == 0 or last):
                record = report.to_dict()
                if callback is not None:
                    record.update(callback(trainer, report) or {})
                trace.append(record)
                if fh is not None:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, trace, reports)
