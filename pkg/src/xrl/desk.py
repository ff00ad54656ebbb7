"""Desk-scale regime comparison: ConvNet on an MNIST subset, shared pair set, cached checkpoints.

Used by the acceptance suite and ``scripts/run_desk_experiment.py``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attack import ExplAttackConfig, PgdConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset
from .evaluate import EvalReport, PairSet, evaluate_robustness, select_pairs
from .explain import ExplMethod
from .landscape import LandscapeCurve, probe_classification_landscape, probe_explanation_landscape
from .nn import ModelSpec, convnet_spec
from .seeding import subseed
from .train import TrainConfig, train

log = logging.getLogger("xrl.desk")

DATA_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist5k"
REGIMES = ("Normal", "MAT", "SEP_pos", "SEP_neg")


@dataclass(frozen=True)
class DeskConfig:
    data_dir: str = str(DATA_DIR)
    train_size: int = 2000
    test_size: int = 500
    epochs: int = 5
    batch_size: int = 64
    beta: float = 10.0
    learning_rate: float = 0.003
    epsilon: float = 0.3
    pgd_steps: int = 10
    pgd_warmup_epochs: int = 4
    flatness_chunk: int = 16  # whole-batch SEP graphs exceed 5 GB on the 28x28 ConvNet
    attack_chunk: int = 8  # pairs per batched explanation attack; peak memory grows ~100 MB per pair
    seed: int = 0
    k: int = 10
    per_cluster: int = 3
    attack_iterations: int = 20
    method: str = "GradientTimesInput"
    lam_pos: float = 5e4
    lam_neg: float = -3e3

    @property
    def digest(self) -> str:
        d = asdict(self)
        d.pop("data_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def spec(self) -> ModelSpec:
        return convnet_spec((1, 28, 28), 10, beta=self.beta)

    def pgd(self) -> PgdConfig:
        return PgdConfig(epsilon=self.epsilon, steps=self.pgd_steps)

    def expl_method(self) -> ExplMethod:
        return ExplMethod(self.method)

    def lam_for(self, label: str) -> tuple[str, float]:
        return {"Normal": ("Normal", 0.0), "MAT": ("MAT", 0.0), "SEP_pos": ("SEP", self.lam_pos),
                "SEP_neg": ("SEP", self.lam_neg)}[label]

    def train_config(self, regime: str, lam: float = 0.0) -> TrainConfig:
        adversarial = regime != "Normal"
        return TrainConfig(regime=regime, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, lam=lam, pgd=self.pgd(),
                           expl_method=self.expl_method(), seed=self.seed,
                           pgd_warmup_epochs=self.pgd_warmup_epochs if adversarial else 0,
                           flatness_chunk=self.flatness_chunk if regime == "SEP" else 0)


def default_cache_dir() -> Path:
    return Path(os.environ.get("XRL_DESK_CACHE", Path(__file__).resolve().parents[2] / ".cache" / "desk"))


def load_desk_data(cfg: DeskConfig) -> tuple[Dataset, Dataset]:
    d = Path(cfg.data_dir)
    train_ds = load_dataset("idx", (d / "train-images-idx3-ubyte.gz", d / "train-labels-idx1-ubyte.gz"),
                            cfg.train_size, "train")
    test_ds = load_dataset("idx", (d / "t10k-images-idx3-ubyte.gz", d / "t10k-labels-idx1-ubyte.gz"),
                           cfg.test_size, "test")
    return train_ds, test_ds


@dataclass
class DeskRun:
    """Lazily trains (or loads cached) models and evaluates them on one shared pair set."""

    cfg: DeskConfig = field(default_factory=DeskConfig)
    cache_dir: Path | None = None
    _data: tuple | None = None
    _models: dict = field(default_factory=dict)
    _histories: dict = field(default_factory=dict)
    _pairset: PairSet | None = None

    @property
    def train_ds(self) -> Dataset:
        if self._data is None:
            self._data = load_desk_data(self.cfg)
        return self._data[0]

    @property
    def test_ds(self) -> Dataset:
        self.train_ds
        return self._data[1]

    def _cache_path(self, tcfg: TrainConfig) -> Path | None:
        if self.cache_dir is None:
            return None
        key = f"{self.cfg.spec().digest[:12]}-{tcfg.digest}-n{self.cfg.train_size}"
        return Path(self.cache_dir) / f"{key}.json"

    def model_for(self, regime: str, lam: float = 0.0):
        """ParamSet for (regime, lam); trained once, then served from memory or the on-disk cache."""
        tcfg = self.cfg.train_config(regime, lam)
        if tcfg.digest in self._models:
            return self._models[tcfg.digest]
        spec = self.cfg.spec()
        path = self._cache_path(tcfg)
        if path is not None and path.exists():
            params, _, stored = load_checkpoint(path, spec)
            if stored != tcfg:
                raise ValueError(f"cached checkpoint {path} holds a different training config")
            hist = path.with_suffix(".history.csv")
            self._histories[tcfg.digest] = hist.read_text() if hist.exists() else ""
        else:
            log.info("training %s (lambda=%g)", regime, lam)
            params, history = train(spec, self.train_ds, tcfg)
            self._histories[tcfg.digest] = history.to_csv()
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(params, spec, tcfg, path)
                path.with_suffix(".history.csv").write_text(history.to_csv())
        self._models[tcfg.digest] = params
        return params

    def model(self, label: str):
        return self.model_for(*self.cfg.lam_for(label))

    def history_csv(self, label: str) -> str:
        self.model(label)
        return self._histories[self.cfg.train_config(*self.cfg.lam_for(label)).digest]

    def pairset(self, per_cluster: int | None = None) -> PairSet:
        """Pairs chosen with the Normal model's features, shared by every regime."""
        if per_cluster is not None and per_cluster != self.cfg.per_cluster:
            return select_pairs(self.test_ds, self.cfg.spec(), self.model("Normal"), self.cfg.k, per_cluster,
                                subseed(self.cfg.seed, "kmeans"))
        if self._pairset is None:
            self._pairset = select_pairs(self.test_ds, self.cfg.spec(), self.model("Normal"), self.cfg.k,
                                         self.cfg.per_cluster, subseed(self.cfg.seed, "kmeans"))
        return self._pairset

    def evaluate(self, regime: str, lam: float = 0.0, label: str = "", with_attack: bool = True) -> EvalReport:
        params = self.model_for(regime, lam)
        attack = ExplAttackConfig(epsilon=self.cfg.epsilon, iterations=self.cfg.attack_iterations)
        return evaluate_robustness(self.cfg.spec(), params, self.pairset(), self.test_ds, self.cfg.expl_method(),
                                   self.cfg.pgd(), attack, label or regime, self.cfg.seed,
                                   attack_chunk=self.cfg.attack_chunk, with_attack=with_attack)

    def report(self, label: str, with_attack: bool = True) -> EvalReport:
        regime, lam = self.cfg.lam_for(label)
        return self.evaluate(regime, lam, label, with_attack)

    def classification_landscape(self, label: str, gammas, num_directions: int = 5,
                                 samples: int = 200) -> LandscapeCurve:
        test = self.test_ds.head(samples)
        return probe_classification_landscape(self.cfg.spec(), self.model(label), test.images, test.labels,
                                              gammas, num_directions, self.cfg.seed)

    def explanation_landscape(self, label: str, gammas, num_directions: int = 2) -> LandscapeCurve:
        return probe_explanation_landscape(self.cfg.spec(), self.model(label), self.pairset(),
                                           self.cfg.expl_method(), gammas, num_directions, self.cfg.seed)


def report_rows(reports: list[EvalReport]) -> str:
    """Reports merged into one CSV in regime order."""
    from .cli import merge_reports

    return merge_reports([r.to_csv() for r in reports])
