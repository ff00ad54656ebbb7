"""Normal, MAT, TRADES and SEP training on top of the autodiff engine."""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attack import Objective, PgdConfig, pgd_attack
from .data import Dataset
from .explain import ExplMethod, explanation_loss, normalize_attribution, raw_attribution
from .nn import ModelSpec, ParamSet, accuracy, build_model, cross_entropy, kl_divergence, model_forward
from .seeding import rng_for, subseed

log = logging.getLogger(__name__)


class Regime(str, enum.Enum):
    NORMAL = "Normal"
    MAT = "MAT"
    TRADES = "TRADES"
    SEP = "SEP"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.NORMAL
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    alpha: float = 1.0  # TRADES weight
    lam: float = 0.0  # SEP weight, may be negative
    sigma_zeta: float = 1.0
    zeta_per_image: bool = True
    pgd: PgdConfig = field(default_factory=PgdConfig)
    expl_method: ExplMethod = field(default_factory=ExplMethod)
    seed: int = 0
    holdout_fraction: float = 0.1
    pgd_warmup_epochs: int = 0  # ramp the PGD budget linearly over this many epochs (0: off)
    flatness_chunk: int = 0  # SEP: images per flatness-gradient pass, bounds peak memory (0: whole batch)

    def __post_init__(self):
        if not isinstance(self.regime, Regime):
            object.__setattr__(self, "regime", Regime(self.regime))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.sigma_zeta <= 0:
            raise ValueError("sigma_zeta must be > 0")
        if self.pgd_warmup_epochs < 0:
            raise ValueError("pgd_warmup_epochs must be >= 0")
        if self.flatness_chunk < 0:
            raise ValueError("flatness_chunk must be >= 0")

    def epoch_pgd(self, epoch: int) -> PgdConfig:
        """PGD config for a 0-based epoch: epsilon * (epoch + 1) / (warmup + 1) until the ramp ends."""
        if self.pgd_warmup_epochs == 0 or epoch >= self.pgd_warmup_epochs:
            return self.pgd
        frac = (epoch + 1) / (self.pgd_warmup_epochs + 1)
        step = None if self.pgd.step_size is None else self.pgd.step_size * frac
        return replace(self.pgd, epsilon=self.pgd.epsilon * frac, step_size=step)

    @property
    def label(self) -> str:
        """Report method name: Normal, MAT, TRADES, SEP_pos, SEP_neg."""
        if self.regime is Regime.SEP:
            if self.lam > 0:
                return "SEP_pos"
            if self.lam < 0:
                return "SEP_neg"
            return "SEP_zero"
        return self.regime.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        d["pgd"]["objective"] = self.pgd.objective.value
        d["expl_method"] = {"kind": self.expl_method.kind.value, "ig_steps": self.expl_method.ig_steps}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["pgd"] = PgdConfig(**d["pgd"])
        d["expl_method"] = ExplMethod(**d["expl_method"])
        return cls(**d)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    aux_loss: float
    clean_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "cls_loss", "aux_loss", "clean_acc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.cls_loss), repr(r.aux_loss), repr(r.clean_acc)])
        return buf.getvalue()


class Adam:
    """Adam over a dict of numpy arrays, updated in place."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# losses


def trades_loss(spec: ModelSpec, params, batch, labels, alpha: float, pgd: PgdConfig,
                rng: np.random.Generator | None = None, attack_params=None):
    """Clean cross-entropy plus alpha * KL(f(x) || f(x_adv)); returns (loss, kl) Vars.

    ``attack_params`` are the (constant) weights the inner maximisation runs against.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    logits = model_forward(spec, params, batch)
    ce = cross_entropy(logits, labels)
    if alpha == 0:
        return ce, ad.Var(0.0)
    pgd = replace(pgd, objective=Objective.KL_FROM_CLEAN)
    x_adv = pgd_attack(spec, attack_params if attack_params is not None else params, batch, labels, pgd, rng)
    kl = kl_divergence(logits, model_forward(spec, params, x_adv))
    return ad.add(ce, ad.scale(kl, alpha)), kl


def flatness_loss(spec: ModelSpec, params, batch: np.ndarray, zeta: np.ndarray, method: ExplMethod,
                  classes=None):
    """Explanation loss between I(x + zeta) and I(x), both scored at the clean prediction.

    x + zeta is not clipped to [0, 1].
    """
    batch = np.asarray(batch, dtype=np.float64)
    if classes is None:
        with ad.no_grad():
            classes = model_forward(spec, params, batch).value.argmax(axis=1)

    def maps(x):
        raw = raw_attribution(method, spec, params, ad.Var(x, requires_grad=True), classes, True)
        return normalize_attribution(raw)

    return explanation_loss(maps(batch + zeta), maps(batch))


def sample_zeta(rng: np.random.Generator, shape, sigma: float, per_image: bool = True) -> np.ndarray:
    if per_image:
        return sigma * rng.standard_normal(shape)
    return np.broadcast_to(sigma * rng.standard_normal((1,) + tuple(shape[1:])), shape).copy()


def sep_loss(spec: ModelSpec, params, batch, labels, lam: float, sigma_zeta: float, method: ExplMethod,
             pgd: PgdConfig, rng_pgd=None, rng_zeta=None, zeta=None, attack_params=None,
             zeta_per_image: bool = True):
    """Cross-entropy on PGD examples plus lam * flatness loss; returns (loss, ce, lf).

    ``zeta`` overrides the Gaussian draw (pass zeros to switch the noise off).
    """
    if sigma_zeta <= 0:
        raise ValueError("sigma_zeta must be > 0")
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    consts = attack_params if attack_params is not None else params
    if zeta is None and lam != 0:
        zeta = sample_zeta(rng_zeta, batch.shape, sigma_zeta, zeta_per_image)
    x_adv = pgd_attack(spec, consts, batch, labels, replace(pgd, objective=Objective.CROSS_ENTROPY), rng_pgd)
    ce = cross_entropy(model_forward(spec, params, x_adv), labels)
    if lam == 0:
        return ce, ce, ad.Var(0.0)
    lf = flatness_loss(spec, params, batch, zeta, method)
    return ad.add(ce, ad.scale(lf, lam)), ce, lf


# ---------------------------------------------------------------------------
# training loop


def batch_loss(spec: ModelSpec, pvars: dict, consts: ParamSet, xb, yb, cfg: TrainConfig, rngs: dict):
    """(total, classification term, auxiliary term) for one batch under cfg.regime."""
    if cfg.regime is Regime.NORMAL:
        ce = cross_entropy(model_forward(spec, pvars, xb), yb)
        return ce, ce, 0.0
    if cfg.regime is Regime.MAT:
        x_adv = pgd_attack(spec, consts, xb, yb, replace(cfg.pgd, objective=Objective.CROSS_ENTROPY),
                           rngs["pgd"])
        ce = cross_entropy(model_forward(spec, pvars, x_adv), yb)
        return ce, ce, 0.0
    if cfg.regime is Regime.TRADES:
        total, kl = trades_loss(spec, pvars, xb, yb, cfg.alpha, cfg.pgd, rngs["pgd"], attack_params=consts)
        return total, ad.sub(total, ad.scale(kl, cfg.alpha)), float(kl.value)
    total, ce, lf = sep_loss(spec, pvars, xb, yb, cfg.lam, cfg.sigma_zeta, cfg.expl_method, cfg.pgd,
                             rngs["pgd"], rngs["zeta"], attack_params=consts,
                             zeta_per_image=cfg.zeta_per_image)
    return total, ce, float(lf.value)


def _sep_chunked_step(spec: ModelSpec, pvars: dict, consts: ParamSet, xb, yb, cfg: TrainConfig, rngs: dict):
    """SEP batch loss with the flatness gradient accumulated over image chunks.

    The flatness term is a mean over equally sized maps, so the chunk losses
    weighted by chunk_size / batch_size sum to the whole-batch loss. Draws the
    same zeta and PGD start as ``sep_loss``. Returns (total, ce, lf, grads).
    """
    zeta = sample_zeta(rngs["zeta"], xb.shape, cfg.sigma_zeta, cfg.zeta_per_image)
    x_adv = pgd_attack(spec, consts, xb, yb, replace(cfg.pgd, objective=Objective.CROSS_ENTROPY), rngs["pgd"])
    ce = cross_entropy(model_forward(spec, pvars, x_adv), yb)
    wrt = list(pvars.values())
    grads = [np.array(g) for g in ad.grad(ce, wrt)]
    n = len(xb)
    lf_terms = []
    for s in range(0, n, cfg.flatness_chunk):
        e = min(s + cfg.flatness_chunk, n)
        w = (e - s) / n
        lf = flatness_loss(spec, pvars, xb[s:e], zeta[s:e], cfg.expl_method)
        for acc, g in zip(grads, ad.grad(lf, wrt)):
            acc += (cfg.lam * w) * g
        lf_terms.append(w * float(lf.value))
    lf_value = math.fsum(lf_terms)
    ce_value = float(ce.value)
    return ce_value + cfg.lam * lf_value, ce_value, lf_value, grads


def train(spec: ModelSpec, dataset: Dataset, cfg: TrainConfig, callback=None,
          params: ParamSet | None = None):
    """Train from a seeded initialisation; returns (ParamSet, TrainHistory)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    train_set, held = dataset.holdout_split(cfg.holdout_fraction)
    if len(train_set) == 0:
        train_set = dataset
    params = params.copy() if params is not None else build_model(spec, subseed(cfg.seed, "init"))
    rngs = {name: rng_for(cfg.seed, name) for name in ("shuffle", "pgd", "zeta")}
    opt = Adam(params.arrays, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
    history = TrainHistory()
    n = len(train_set)
    chunked = cfg.regime is Regime.SEP and cfg.lam != 0 and cfg.flatness_chunk > 0

    for epoch in range(cfg.epochs):
        ecfg = replace(cfg, pgd=cfg.epoch_pgd(epoch), pgd_warmup_epochs=0) if cfg.pgd_warmup_epochs else cfg
        order = rngs["shuffle"].permutation(n)
        cls_sum = aux_sum = 0.0
        nb = 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            xb, yb = train_set.images[idx], train_set.labels[idx]
            pvars = params.as_vars(requires_grad=True)
            if chunked and len(xb) > cfg.flatness_chunk:
                value, cls_value, aux, grads = _sep_chunked_step(spec, pvars, params, xb, yb, ecfg, rngs)
            else:
                total, cls_term, aux = batch_loss(spec, pvars, params, xb, yb, ecfg, rngs)
                value, cls_value = float(total.value), float(cls_term.value)
                grads = None
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            if grads is None:
                grads = ad.grad(total, list(pvars.values()))
            opt.step(dict(zip(pvars.keys(), grads)))
            cls_sum += cls_value
            aux_sum += aux
            nb += 1
        acc = accuracy(spec, params, held.images, held.labels) if len(held) else float("nan")
        rec = EpochRecord(epoch, cls_sum / nb, aux_sum / nb, acc)
        history.records.append(rec)
        log.info("epoch %d %s cls=%.4f aux=%.3g acc=%.3f", epoch, cfg.label, rec.cls_loss, rec.aux_loss, acc)
        if callback is not None:
            callback(epoch, params.copy(), rec)
    return params, history
