"""PGD classification attacks and the targeted explanation-manipulation attack."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .explain import ExplMethod, explanation_loss_per_sample, saliency_maps
from .nn import ModelSpec, cross_entropy, cross_entropy_per_sample, kl_divergence, model_forward

RGB_EPSILON = 8 / 255
GRAY_EPSILON = 0.3


class Objective(str, enum.Enum):
    CROSS_ENTROPY = "CrossEntropy"
    KL_FROM_CLEAN = "KLFromClean"


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = GRAY_EPSILON
    steps: int = 10
    step_size: float | None = None  # None -> 2.5 * epsilon / steps
    random_start: bool = True
    objective: Objective = Objective.CROSS_ENTROPY

    def __post_init__(self):
        if not isinstance(self.objective, Objective):
            object.__setattr__(self, "objective", Objective(self.objective))
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError("epsilon and steps must be nonnegative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)

    @classmethod
    def for_channels(cls, channels: int, **kw) -> "PgdConfig":
        return cls(epsilon=GRAY_EPSILON if channels == 1 else RGB_EPSILON, **kw)


def project(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball around x0 intersected with the [0, 1] box.

    The result satisfies |x - x0| <= epsilon as evaluated in floating point: pixels whose
    rounded bound lands one ulp outside are stepped back toward x0.
    """
    x = np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)
    for _ in range(4):
        over = x - x0 > epsilon
        under = x0 - x > epsilon
        if not (over.any() or under.any()):
            break
        x[over] = np.nextafter(x[over], -np.inf)
        x[under] = np.nextafter(x[under], np.inf)
    return x


def pgd_ascent(loss_fn: Callable[[Var], Var], x0: np.ndarray, cfg: PgdConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent on ``loss_fn`` with projection after every step."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x = project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg.epsilon)
    for _ in range(cfg.steps):
        with ad.grad_mode(True):  # callers may hold no_grad; the ascent still needs input gradients
            xv = Var(x, requires_grad=True)
            (g,) = ad.grad(loss_fn(xv), [xv])
        x = project(x + cfg.alpha * np.sign(g), x0, cfg.epsilon)
    return x


def pgd_attack(spec: ModelSpec, params, batch: np.ndarray, labels, cfg: PgdConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """L-inf PGD against cross-entropy or against KL from the clean prediction."""
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.objective is Objective.KL_FROM_CLEAN:
        if cfg.steps > 0 and cfg.epsilon > 0 and not cfg.random_start:
            # the KL objective has zero gradient at the clean point
            raise ValueError("KLFromClean objective requires random_start")
        with ad.no_grad():
            clean = model_forward(spec, params, batch).value

        def loss_fn(x):
            return kl_divergence(Var(clean), model_forward(spec, params, x))
    else:
        labels = np.asarray(labels)

        def loss_fn(x):
            return cross_entropy(model_forward(spec, params, x), labels)

    return pgd_ascent(loss_fn, batch, cfg, rng)


def adversarial_accuracy(spec: ModelSpec, params, images, labels, cfg: PgdConfig,
                         rng: np.random.Generator | None = None, batch_size: int = 64) -> float:
    labels = np.asarray(labels)
    if len(images) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(images), batch_size):
        xb, yb = images[s : s + batch_size], labels[s : s + batch_size]
        adv = pgd_attack(spec, params, xb, yb, cfg, rng)
        with ad.no_grad():
            correct += int(np.sum(model_forward(spec, params, adv).value.argmax(axis=1) == yb))
    return correct / len(images)


# ---------------------------------------------------------------------------
# explanation attack


@dataclass(frozen=True)
class ExplAttackConfig:
    epsilon: float = GRAY_EPSILON
    iterations: int = 200
    learning_rate: float | None = None  # None -> 1e-2 * epsilon
    gamma_c: float | None = None  # None -> 1e-2 * initial L_e / initial CE, per pair
    step_rule: str = "sign"  # "sign" (lr * sign(grad)) or "gradient" (lr * grad)

    def __post_init__(self):
        if self.step_rule not in ("sign", "gradient"):
            raise ValueError("step_rule must be 'sign' or 'gradient'")
        if self.epsilon < 0 or self.iterations < 0:
            raise ValueError("epsilon and iterations must be nonnegative")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.gamma_c is not None and self.gamma_c < 0:
            raise ValueError("gamma_c must be nonnegative")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else 1e-2 * self.epsilon


@dataclass
class ExplAttackResult:
    adversarial: np.ndarray
    loss_at_start: float
    loss_at_end: float
    prediction_preserved: bool
    iterations_run: int
    trace: list = field(default_factory=list)  # (iteration, L_e, CE, preserved)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "expl_loss", "ce", "preserved"])
        for row in self.trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), int(row[3])])
        return buf.getvalue()


class AttackDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite explanation attack loss at iteration {iteration}")


def _attack_objective(method, spec, params, x: Var, targets, classes):
    maps = saliency_maps(method, spec, params, x, classes=classes, differentiable=True)
    le = explanation_loss_per_sample(maps, targets)
    logits = model_forward(spec, params, x)
    ce = cross_entropy_per_sample(logits, classes)
    return le, ce, logits.value.argmax(axis=1)


def explanation_attack_batch(spec: ModelSpec, params, victims: np.ndarray, target_maps: np.ndarray,
                             method: ExplMethod, cfg: ExplAttackConfig,
                             record_trace: bool = False) -> list[ExplAttackResult]:
    """Run independent explanation attacks on a batch of (victim, target map) pairs.

    The objective is summed over pairs, which leaves each pair's gradient
    untouched because samples do not interact in the model.
    """
    victims = np.asarray(victims, dtype=np.float64)
    targets = np.asarray(target_maps, dtype=np.float64)
    n = victims.shape[0]
    with ad.no_grad():
        classes = model_forward(spec, params, victims).value.argmax(axis=1)

    best_x = victims.copy()
    best_le = np.full(n, np.inf)
    best_pres = np.zeros(n, dtype=bool)
    any_x = victims.copy()
    any_le = np.full(n, np.inf)
    start = np.zeros(n)
    gamma = None
    traces = [[] for _ in range(n)]
    x = victims.copy()

    for it in range(cfg.iterations + 1):
        final = it == cfg.iterations
        xv = Var(x, requires_grad=not final)
        with ad.grad_mode(not final):  # independent of any caller's no_grad
            le, ce, pred = _attack_objective(method, spec, params, xv, targets, classes)
        le_v, ce_v = le.value.copy(), ce.value.copy()
        if not (np.all(np.isfinite(le_v)) and np.all(np.isfinite(ce_v))):
            raise AttackDivergedError(it)
        preserved = pred == classes
        if it == 0:
            start = le_v.copy()
            if cfg.gamma_c is None:
                gamma = 1e-2 * le_v / np.maximum(ce_v, 1e-12)
            else:
                gamma = np.full(n, float(cfg.gamma_c))

        better = preserved & (le_v < best_le)
        best_le[better] = le_v[better]
        best_x[better] = x[better]
        best_pres |= better
        better_any = le_v < any_le
        any_le[better_any] = le_v[better_any]
        any_x[better_any] = x[better_any]
        if record_trace:
            for i in range(n):
                traces[i].append((it, float(le_v[i]), float(ce_v[i]), bool(preserved[i])))
        if final:
            break

        with ad.grad_mode(True):
            total = ad.sum_(ad.add(le, ad.mul(Var(gamma), ce)))
            (g,) = ad.grad(total, [xv])
        # L_e is ~1e-6 in magnitude, so raw gradient steps barely move; the signed rule is the default
        step = np.sign(g) if cfg.step_rule == "sign" else g
        x = project(x - cfg.lr * step, victims, cfg.epsilon)

    results = []
    for i in range(n):
        if best_pres[i]:
            adv, end, ok = best_x[i], best_le[i], True
        else:
            adv, end, ok = any_x[i], any_le[i], False
        results.append(ExplAttackResult(adv.copy(), float(start[i]), float(end), ok,
                                        cfg.iterations, traces[i]))
    return results


def explanation_attack(spec: ModelSpec, params, victim: np.ndarray, target_map, method: ExplMethod,
                       cfg: ExplAttackConfig, record_trace: bool = False) -> ExplAttackResult:
    """Targeted white-box attack pulling I(victim + delta) towards ``target_map``."""
    tm = getattr(target_map, "values", target_map)
    return explanation_attack_batch(spec, params, np.asarray(victim)[None], np.asarray(tm)[None],
                                    method, cfg, record_trace)[0]
