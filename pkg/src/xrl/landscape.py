"""Input loss-landscape probes along random Gaussian directions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .evaluate import PairSet, fmean, pair_distances
from .explain import ExplMethod, saliency_maps
from .nn import ModelSpec, cross_entropy, cross_entropy_per_sample, model_forward
from .seeding import rng_for

DEFAULT_GAMMAS = tuple(np.linspace(0.0, 1.0, 21).tolist())


@dataclass
class LandscapeCurve:
    gammas: list
    means: list
    std_devs: list
    kind: str  # "Explanation" or "Classification"
    seed: int = 0
    num_directions: int = 1
    model_digest: str = ""
    samples: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ValueError("gammas must be strictly increasing")

    def rise(self, gamma: float) -> float:
        """mean(gamma) - mean(0)."""
        return self.means[self.gammas.index(gamma)] - self.means[self.gammas.index(0.0)]

    def normalized(self) -> list:
        base = self.means[self.gammas.index(0.0)]
        return [m / base for m in self.means]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gamma", "mean", "std", "kind", "model_digest"])
        for g, m, s in zip(self.gammas, self.means, self.std_devs):
            w.writerow([repr(float(g)), repr(float(m)), repr(float(s)), self.kind, self.model_digest])
        return buf.getvalue()


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    flat = [float(v) for v in np.ravel(values)]
    mu = math.fsum(flat) / len(flat)
    var = math.fsum((v - mu) ** 2 for v in flat) / len(flat)
    return mu, math.sqrt(var)


def _check_gammas(gammas, num_directions):
    gammas = [float(g) for g in gammas]
    if 0.0 not in gammas:
        raise ValueError("gammas must include 0")
    if num_directions < 1:
        raise ValueError("num_directions must be >= 1")
    return gammas


def probe_explanation_landscape(spec: ModelSpec, params, pairset: PairSet, method: ExplMethod,
                                gammas=DEFAULT_GAMMAS, num_directions: int = 5, seed: int = 0,
                                pairs: np.ndarray | None = None) -> LandscapeCurve:
    """Mean and spread of L_e(I(x_v + gamma d), I(x_t)) over pairs and direction draws.

    x_v + gamma d is not clipped; at gamma = 0 no noise is applied.
    """
    gammas = _check_gammas(gammas, num_directions)
    pairs = pairset.pairs if pairs is None else pairs
    rng = rng_for(seed, "direction")
    base_maps = saliency_maps(method, spec, params, pairset.images)
    targets = base_maps[pairs[:, 1]]
    victims = pairset.images[pairs[:, 0]]
    dirs = rng.standard_normal((num_directions,) + victims.shape)

    means, stds = [], []
    for g in gammas:
        if g == 0.0:
            # no draw is used at gamma = 0; same aggregation as expl_at_start
            vals = pair_distances(base_maps, pairs)
            means.append(fmean(vals))
            stds.append(_mean_std(vals)[1])
            continue
        vals = []
        for j in range(num_directions):
            d = saliency_maps(method, spec, params, victims + g * dirs[j], check_range=False) - targets
            vals.append((d * d).mean(axis=(1, 2)))
        vals = np.concatenate(vals)
        m, s = _mean_std(vals)
        means.append(m)
        stds.append(s)
    return LandscapeCurve(gammas, means, stds, "Explanation", seed, num_directions,
                          getattr(params, "spec_digest", ""), len(pairs))


def probe_classification_landscape(spec: ModelSpec, params, batch: np.ndarray, labels, gammas=DEFAULT_GAMMAS,
                                   num_directions: int = 5, seed: int = 0) -> LandscapeCurve:
    """Cross-entropy along random Gaussian input directions; gamma = 0 is the clean loss."""
    gammas = _check_gammas(gammas, num_directions)
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    rng = rng_for(seed, "direction")
    dirs = rng.standard_normal((num_directions,) + batch.shape)

    means, stds = [], []
    with ad.no_grad():
        for g in gammas:
            if g == 0.0:
                logits = model_forward(spec, params, batch)
                per = cross_entropy_per_sample(logits, labels).value
                means.append(float(cross_entropy(logits, labels).value))
                stds.append(float(per.std()))
                continue
            vals = np.concatenate([
                cross_entropy_per_sample(model_forward(spec, params, batch + g * dirs[j]), labels).value
                for j in range(num_directions)
            ])
            m, s = _mean_std(vals)
            means.append(m)
            stds.append(s)
    return LandscapeCurve(gammas, means, stds, "Classification", seed, num_directions,
                          getattr(params, "spec_digest", ""), len(batch))
