"""Cluster-based victim/target pair selection and the four robustness metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attack import ExplAttackConfig, PgdConfig, adversarial_accuracy, explanation_attack_batch
from .data import Dataset
from .explain import DegenerateSaliencyError, ExplMethod, saliency_maps
from .nn import ModelSpec, accuracy, model_forward

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "expl_at_start", "expl_at_end", "clean_acc", "adv_acc"]


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("XRL_THREADS", "1")))
    except ValueError:
        return 1


def extract_features(spec: ModelSpec, params, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer activations (the input of the final linear layer), one row per image."""
    rows = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            _, feats = model_forward(spec, params, images[s : s + batch_size], return_features=True)
            rows.append(feats.value.reshape(feats.shape[0], -1))
    return np.concatenate(rows) if rows else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return np.array(centers)


def kmeans(features: np.ndarray, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start; empty clusters take the farthest point."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}] (number of points)")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new_assign = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                dist = d[np.arange(n), assign]
                far = int(np.argmax(dist))
                centroids[j] = x[far]
                assign[far] = j
                d[far] = 0.0
    d = _sq_dists(x, centroids)
    inertia = float(d[np.arange(n), assign].sum())
    return KMeansResult(assign, centroids, inertia, history, it)


def inertia(features: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    diff = features - centroids[assignments]
    return float((diff * diff).sum())


# ---------------------------------------------------------------------------
# pair selection


@dataclass
class PairSet:
    indices: np.ndarray  # positions in the source split
    images: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray
    pairs: np.ndarray  # [P, 2] (victim, target) positions into ``images``
    model_digest: str = ""
    k: int = 0
    per_cluster: int = 0
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.images)

    def intra_mask(self) -> np.ndarray:
        return self.clusters[self.pairs[:, 0]] == self.clusters[self.pairs[:, 1]]

    def to_json(self) -> str:
        return json.dumps({
            "indices": self.indices.tolist(),
            "labels": self.labels.tolist(),
            "clusters": self.clusters.tolist(),
            "pairs": self.pairs.tolist(),
            "model_digest": self.model_digest,
            "k": self.k,
            "per_cluster": self.per_cluster,
            "seed": self.seed,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str, split: Dataset) -> "PairSet":
        d = json.loads(text)
        idx = np.asarray(d["indices"], dtype=int)
        return cls(idx, split.images[idx], np.asarray(d["labels"]), np.asarray(d["clusters"]),
                   np.asarray(d["pairs"], dtype=int).reshape(-1, 2), d["model_digest"], d["k"],
                   d["per_cluster"], d["seed"])


def ordered_pairs(n: int) -> np.ndarray:
    v, t = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = v != t
    return np.stack([v[keep], t[keep]], axis=1)


def select_pairs(split: Dataset, spec: ModelSpec, params, k: int = 10, per_cluster: int = 3,
                 seed: int = 0) -> PairSet:
    """Cluster penultimate features, keep the ``per_cluster`` images nearest each centroid."""
    if len(split) < k * per_cluster:
        raise ValueError(f"split has {len(split)} images, need at least k*per_cluster={k * per_cluster}")
    feats = extract_features(spec, params, split.images)
    km = kmeans(feats, k, seed)
    chosen, cluster_ids = [], []
    for j in range(k):
        members = np.flatnonzero(km.assignments == j)
        if len(members) < per_cluster:
            raise ValueError(
                f"cluster {j} has only {len(members)} members; use per_cluster <= {len(members)}")
        dist = ((feats[members] - km.centroids[j]) ** 2).sum(axis=1)
        order = np.lexsort((members, dist))  # distance, then lowest index
        chosen.extend(members[order[:per_cluster]].tolist())
        cluster_ids.extend([j] * per_cluster)
    idx = np.asarray(chosen, dtype=int)
    return PairSet(idx, split.images[idx], split.labels[idx], np.asarray(cluster_ids), ordered_pairs(len(idx)),
                   params.spec_digest if hasattr(params, "spec_digest") else "", k, per_cluster, seed)


def pair_distances(maps: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Explanation loss of every (victim, target) pair given one map per image."""
    d = maps[pairs[:, 0]] - maps[pairs[:, 1]]
    return (d * d).mean(axis=(1, 2))


def fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


# ---------------------------------------------------------------------------
# robustness report


@dataclass
class PairRecord:
    victim: int
    target: int
    intra: bool
    loss_at_start: float
    loss_at_end: float
    prediction_preserved: bool


@dataclass
class EvalReport:
    method: str
    expl_at_start: float
    expl_at_end: float
    clean_acc: float
    adv_acc: float
    records: list = field(default_factory=list)
    failures: int = 0
    config_digest: str = ""

    def row(self) -> list:
        return [self.method, repr(self.expl_at_start), repr(self.expl_at_end), repr(self.clean_acc),
                repr(self.adv_acc)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow(self.row())
        return buf.getvalue()

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["victim", "target", "intra", "loss_at_start", "loss_at_end", "preserved"])
        for r in self.records:
            w.writerow([r.victim, r.target, int(r.intra), repr(r.loss_at_start), repr(r.loss_at_end),
                        int(r.prediction_preserved)])
        return buf.getvalue()


def explanation_at_start(spec, params, pairset: PairSet, method: ExplMethod) -> np.ndarray:
    maps = saliency_maps(method, spec, params, pairset.images)
    return pair_distances(maps, pairset.pairs)


def attack_pairs(spec, params, pairset: PairSet, method: ExplMethod, cfg: ExplAttackConfig,
                 chunk: int = 64, pairs: np.ndarray | None = None):
    """Explanation attacks for every pair; returns (records, failure count)."""
    pairs = pairset.pairs if pairs is None else pairs
    maps = saliency_maps(method, spec, params, pairset.images)
    intra = pairset.clusters[pairs[:, 0]] == pairset.clusters[pairs[:, 1]]
    chunks = [np.arange(s, min(s + chunk, len(pairs))) for s in range(0, len(pairs), chunk)]

    def run(ids):
        victims = pairset.images[pairs[ids, 0]]
        targets = maps[pairs[ids, 1]]
        try:
            return ids, explanation_attack_batch(spec, params, victims, targets, method, cfg)
        except DegenerateSaliencyError:
            # fall back to one pair at a time so one bad pair does not sink the chunk
            out = []
            for i in ids:
                try:
                    out.append(explanation_attack_batch(spec, params, pairset.images[pairs[i, 0]][None],
                                                        maps[pairs[i, 1]][None], method, cfg)[0])
                except DegenerateSaliencyError:
                    out.append(None)
            return ids, out

    workers = max_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(run, chunks))
    else:
        done = [run(c) for c in chunks]

    records, failures = [], 0
    for ids, results in done:
        for i, res in zip(ids, results):
            if res is None:
                failures += 1
                continue
            records.append(PairRecord(int(pairs[i, 0]), int(pairs[i, 1]), bool(intra[i]),
                                      res.loss_at_start, res.loss_at_end, res.prediction_preserved))
    return records, failures


def evaluate_robustness(spec: ModelSpec, params, pairset: PairSet, test: Dataset, method: ExplMethod,
                        pgd: PgdConfig, expl_cfg: ExplAttackConfig, label: str = "",
                        seed: int = 0, attack_chunk: int = 64, with_attack: bool = True) -> EvalReport:
    """Expl at start/end over the pair set; clean and PGD accuracy over the test split."""
    from .seeding import rng_for

    clean = accuracy(spec, params, test.images, test.labels)
    adv = adversarial_accuracy(spec, params, test.images, test.labels, pgd, rng_for(seed, "eval_pgd"))
    if with_attack:
        records, failures = attack_pairs(spec, params, pairset, method, expl_cfg, attack_chunk)
        start = fmean(r.loss_at_start for r in records)
        end = fmean(r.loss_at_end for r in records)
    else:
        starts = explanation_at_start(spec, params, pairset, method)
        intra = pairset.intra_mask()
        records = [PairRecord(int(v), int(t), bool(m), float(s), float("nan"), True)
                   for (v, t), m, s in zip(pairset.pairs, intra, starts)]
        failures = 0
        start = fmean(starts)
        end = float("nan")
    if failures:
        log.warning("%d pair attacks failed and were excluded", failures)
    return EvalReport(label, start, end, clean, adv, records, failures)


def read_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        missing = [c for c in REPORT_COLUMNS if c not in r]
        if missing:
            raise ValueError(f"report CSV missing columns {missing}")
    return rows
