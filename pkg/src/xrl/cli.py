"""Command-line entry point: xrl <subcommand> --config run.toml [--seed N] [--out DIR] [--key.name VALUE]."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .attack import adversarial_accuracy
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import SCHEMA, ConfigError, RunConfig, parse_value
from .data import Dataset, load_dataset, synth_blobs
from .evaluate import (REPORT_COLUMNS, PairSet, attack_pairs, evaluate_robustness, read_report_csv,
                       select_pairs)
from .landscape import probe_classification_landscape, probe_explanation_landscape
from .nn import accuracy
from .seeding import rng_for, subseed
from .train import train

log = logging.getLogger("xrl")

COMMANDS = ("train", "attack-cls", "attack-expl", "cluster-pairs", "eval", "landscape", "report")
REPORT_ORDER = ("Normal", "MAT", "TRADES", "SEP_pos", "SEP_neg", "SEP_zero")

USAGE = f"""usage: xrl {{{','.join(COMMANDS)}}} [--config PATH] [--seed N] [--out DIR] [--section.key VALUE ...]

subcommands:
  train          train a model; writes checkpoint.json and history.csv
  attack-cls     PGD adversarial accuracy; writes attack_cls.csv
  attack-expl    explanation attack on every pair; writes attack_expl.csv
  cluster-pairs  k-means pair selection; writes pairs.json
  eval           robustness metrics; writes eval.csv
  landscape      loss-landscape curve; writes landscape_<kind>.csv
  report         merge eval CSVs (report.inputs) into report.csv
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bind_values(tokens: list[str]) -> list[str]:
    """Join ``--key value`` into ``--key=value`` so values such as -3e3 are not read as flags."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.startswith("--") and "=" not in tok and i + 1 < len(tokens):
            out.append(f"{tok}={tokens[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def parse_args(argv: list[str]) -> tuple[str, RunConfig]:
    if not argv or argv[0] not in COMMANDS:
        raise UsageError(f"unknown or missing subcommand {argv[0] if argv else ''!r}")
    cmd, rest = argv[0], argv[1:]
    p = _Parser(prog=f"xrl {cmd}", add_help=False)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    for key in SCHEMA:
        if key not in ("seed", "out"):
            p.add_argument(f"--{key}", dest=key)
    ns = p.parse_args(_bind_values(rest))
    cfg = RunConfig()
    if ns.config:
        try:
            text = Path(ns.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
        cfg = RunConfig.from_toml(text)
    overrides = {k: parse_value(v) for k, v in vars(ns).items() if k in SCHEMA and k not in ("seed", "out")
                 and v is not None}
    if ns.seed is not None:
        overrides["seed"] = ns.seed
    if ns.out is not None:
        overrides["out"] = ns.out
    return cmd, cfg.with_overrides(overrides)


# ---------------------------------------------------------------------------
# data and model plumbing


def load_split(cfg: RunConfig, split: str) -> Dataset:
    fmt = cfg["data.format"]
    limit = cfg[f"data.{split}_limit"]
    k = cfg["data.num_classes"]
    if fmt == "synth":
        per = cfg["data.synth_per_class"] if split == "train" else cfg["data.synth_test_per_class"]
        seed = subseed(cfg["seed"], "data") + (0 if split == "train" else 1)
        ds = synth_blobs(k, per, cfg["data.synth_side"], cfg["data.synth_noise"], seed,
                         cfg["data.synth_channels"])
        ds = Dataset(ds.images, ds.labels, k, split, ds.source)
        return ds.head(limit) if limit else ds
    if fmt == "idx":
        cfg.require(f"data.{split}_images", f"data.{split}_labels")
        return load_dataset("idx", (cfg[f"data.{split}_images"], cfg[f"data.{split}_labels"]), limit, split, k)
    if fmt == "cifar":
        cfg.require(f"data.cifar_{split}")
        return load_dataset("cifar", cfg[f"data.cifar_{split}"], limit, split, k)
    raise ConfigError(f"data.format must be idx, cifar or synth, got {fmt!r}")


def load_model(cfg: RunConfig):
    cfg.require("model.checkpoint")
    expected = None
    if cfg.model_keys_set():
        c = cfg.channels()
        side = {"cifar": 32, "idx": 28}.get(cfg["data.format"], cfg["data.synth_side"])
        expected = cfg.model_spec((c, side, side))
    return load_checkpoint(cfg["model.checkpoint"], expected)


def load_pairset(cfg: RunConfig, spec, params, test: Dataset) -> PairSet:
    if cfg["eval.pairset"]:
        ps = PairSet.from_json(Path(cfg["eval.pairset"]).read_text(), test)
        if ps.model_digest and ps.model_digest != params.spec_digest:
            raise CheckpointError(f"pair set was selected with model {ps.model_digest}, "
                                  f"checkpoint is {params.spec_digest}", "spec_digest")
        return ps
    return select_pairs(test, spec, params, cfg["eval.k"], cfg["eval.per_cluster"], subseed(cfg["seed"], "kmeans"))


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _label(cfg: RunConfig, train_cfg) -> str:
    if cfg["eval.label"]:
        return cfg["eval.label"]
    return train_cfg.label if train_cfg is not None else "model"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig) -> None:
    cfg.require("train.regime")
    data = load_split(cfg, "train")
    tcfg = cfg.train_config()
    spec = cfg.model_spec(data.image_shape)
    params, history = train(spec, data, tcfg)
    out = out_dir(cfg)
    save_checkpoint(params, spec, tcfg, out / "checkpoint.json")
    (out / "history.csv").write_text(history.to_csv())
    log.info("wrote %s (train config digest %s)", out / "checkpoint.json", tcfg.digest)


def cmd_attack_cls(cfg: RunConfig) -> None:
    params, spec, tcfg = load_model(cfg)
    test = load_split(cfg, "test")
    pgd = cfg.pgd()
    clean = accuracy(spec, params, test.images, test.labels)
    adv = adversarial_accuracy(spec, params, test.images, test.labels, pgd, rng_for(cfg["seed"], "eval_pgd"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "epsilon", "steps", "step_size", "clean_acc", "adv_acc"])
    w.writerow([_label(cfg, tcfg), repr(pgd.epsilon), pgd.steps, repr(pgd.alpha), repr(clean), repr(adv)])
    (out_dir(cfg) / "attack_cls.csv").write_text(buf.getvalue())


def cmd_attack_expl(cfg: RunConfig) -> None:
    params, spec, _ = load_model(cfg)
    test = load_split(cfg, "test")
    ps = load_pairset(cfg, spec, params, test)
    records, failures = attack_pairs(spec, params, ps, cfg.expl_method(), cfg.expl_attack(), cfg["attack.chunk"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["victim", "target", "intra", "loss_at_start", "loss_at_end", "preserved"])
    for r in records:
        w.writerow([r.victim, r.target, int(r.intra), repr(r.loss_at_start), repr(r.loss_at_end),
                    int(r.prediction_preserved)])
    (out_dir(cfg) / "attack_expl.csv").write_text(buf.getvalue())
    if failures:
        log.warning("%d pairs had degenerate saliency and were skipped", failures)


def cmd_cluster_pairs(cfg: RunConfig) -> None:
    params, spec, _ = load_model(cfg)
    test = load_split(cfg, "test")
    ps = select_pairs(test, spec, params, cfg["eval.k"], cfg["eval.per_cluster"], subseed(cfg["seed"], "kmeans"))
    (out_dir(cfg) / "pairs.json").write_text(ps.to_json() + "\n")


def cmd_eval(cfg: RunConfig) -> None:
    params, spec, tcfg = load_model(cfg)
    test = load_split(cfg, "test")
    ps = load_pairset(cfg, spec, params, test)
    report = evaluate_robustness(spec, params, ps, test, cfg.expl_method(), cfg.pgd(), cfg.expl_attack(),
                                 _label(cfg, tcfg), cfg["seed"], cfg["attack.chunk"], cfg["eval.with_attack"])
    out = out_dir(cfg)
    (out / "eval.csv").write_text(report.to_csv())
    (out / "eval_pairs.csv").write_text(report.pairs_csv())


def cmd_landscape(cfg: RunConfig) -> None:
    params, spec, _ = load_model(cfg)
    test = load_split(cfg, "test")
    kind = cfg["landscape.kind"].lower()
    gammas = [float(g) for g in cfg["landscape.gammas"]]
    nd = cfg["landscape.num_directions"]
    if kind == "explanation":
        ps = load_pairset(cfg, spec, params, test)
        curve = probe_explanation_landscape(spec, params, ps, cfg.expl_method(), gammas, nd, cfg["seed"])
    elif kind == "classification":
        sub = test.head(min(len(test), cfg["landscape.samples"]))
        curve = probe_classification_landscape(spec, params, sub.images, sub.labels, gammas, nd, cfg["seed"])
    else:
        raise ConfigError(f"landscape.kind must be Explanation or Classification, got {cfg['landscape.kind']!r}")
    (out_dir(cfg) / f"landscape_{curve.kind.lower()}.csv").write_text(curve.to_csv())


def merge_reports(texts: list[str]) -> str:
    """One row per method, ordered Normal, MAT, SEP_pos, SEP_neg (others after, by name)."""
    rows = []
    for t in texts:
        rows.extend(read_report_csv(t))
    rank = {name: i for i, name in enumerate(REPORT_ORDER)}
    rows.sort(key=lambda r: (rank.get(r["method"], len(rank)), r["method"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def cmd_report(cfg: RunConfig) -> None:
    cfg.require("report.inputs")
    texts = [Path(p).read_text() for p in cfg["report.inputs"]]
    (out_dir(cfg) / "report.csv").write_text(merge_reports(texts))


HANDLERS = {
    "train": cmd_train,
    "attack-cls": cmd_attack_cls,
    "attack-expl": cmd_attack_expl,
    "cluster-pairs": cmd_cluster_pairs,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "report": cmd_report,
}


def run_command(argv: list[str]) -> int:
    """0 on success, 1 on usage error, 2 on runtime failure."""
    try:
        cmd, cfg = parse_args(list(argv))
    except (UsageError, ConfigError) as e:
        print(f"error: {e}\n\n{USAGE}", file=sys.stderr)
        return 1
    try:
        HANDLERS[cmd](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures surface as exit 2 with the reason
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
