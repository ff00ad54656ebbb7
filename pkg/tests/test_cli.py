import json

import pytest

from xrl.checkpoint import load_checkpoint
from xrl.cli import REPORT_ORDER, merge_reports, parse_args, run_command
from xrl.config import ConfigError, RunConfig
from xrl.evaluate import REPORT_COLUMNS, read_report_csv
from xrl.train import TrainConfig

SYNTH = """
seed = 3
[data]
format = "synth"
num_classes = 3
synth_side = 8
synth_per_class = 10
synth_test_per_class = 6
[model]
arch = "mlp"
hidden = 8
beta = 2.0
[train]
epochs = 2
batch_size = 10
learning_rate = 0.01
[pgd]
epsilon = 0.1
steps = 2
[attack]
iterations = 3
[eval]
k = 2
per_cluster = 2
[landscape]
gammas = [0.0, 0.5]
num_directions = 1
samples = 6
"""


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SYNTH)

    def _run(cmd, out, *extra):
        return run_command([cmd, "--config", str(cfg), "--out", str(tmp_path / out), *extra])

    return _run


@pytest.fixture
def trained(run, tmp_path):
    assert run("train", "m") == 0
    return str(tmp_path / "m" / "checkpoint.json")


def test_train_writes_checkpoint_and_history(trained, tmp_path):
    assert (tmp_path / "m" / "history.csv").read_text().startswith("epoch,cls_loss,aux_loss,clean_acc\n")
    _, spec, cfg = load_checkpoint(trained)
    assert cfg.epochs == 2 and spec.num_classes == 3


def test_sep_lambda_reaches_checkpoint_digest(run, tmp_path):
    assert run("train", "sep", "--train.regime", "SEP", "--train.lambda", "50000") == 0
    _, _, cfg = load_checkpoint(tmp_path / "sep" / "checkpoint.json")
    assert cfg.lam == 5e4 and cfg.label == "SEP_pos"
    doc = json.loads((tmp_path / "sep" / "checkpoint.json").read_text())
    assert doc["train_config_digest"] == cfg.digest
    assert cfg.digest != TrainConfig.from_dict({**cfg.to_dict(), "lam": 0.0}).digest


def test_zero_budget_eval_is_identity(run, trained, tmp_path):
    code = run("eval", "e0", "--model.checkpoint", trained, "--pgd.epsilon", "0.0", "--attack.epsilon", "0.0")
    assert code == 0
    (row,) = read_report_csv((tmp_path / "e0" / "eval.csv").read_text())
    assert list(row) == REPORT_COLUMNS
    assert row["expl_at_end"] == row["expl_at_start"]
    assert row["adv_acc"] == row["clean_acc"]


def test_every_subcommand_is_byte_reproducible(run, trained, tmp_path):
    outputs = {
        "attack-cls": ["attack_cls.csv"],
        "attack-expl": ["attack_expl.csv"],
        "cluster-pairs": ["pairs.json"],
        "eval": ["eval.csv", "eval_pairs.csv"],
        "landscape": ["landscape_explanation.csv"],
    }
    for cmd, files in outputs.items():
        for out in ("a", "b"):
            assert run(cmd, f"{cmd}_{out}", "--model.checkpoint", trained) == 0, cmd
        for f in files:
            a = (tmp_path / f"{cmd}_a" / f).read_bytes()
            assert a and a == (tmp_path / f"{cmd}_b" / f).read_bytes(), f
    assert run("train", "m2") == 0
    assert (tmp_path / "m2" / "checkpoint.json").read_bytes() == (tmp_path / "m" / "checkpoint.json").read_bytes()
    assert (tmp_path / "m2" / "history.csv").read_bytes() == (tmp_path / "m" / "history.csv").read_bytes()


def test_classification_landscape_and_saved_pairset(run, trained, tmp_path):
    assert run("landscape", "lc", "--model.checkpoint", trained, "--landscape.kind", "Classification") == 0
    assert (tmp_path / "lc" / "landscape_classification.csv").read_text().count("\n") == 3
    assert run("cluster-pairs", "cp", "--model.checkpoint", trained) == 0
    pairs = str(tmp_path / "cp" / "pairs.json")
    assert run("eval", "ep", "--model.checkpoint", trained, "--eval.pairset", pairs) == 0
    assert run("eval", "en", "--model.checkpoint", trained) == 0
    assert (tmp_path / "ep" / "eval.csv").read_bytes() == (tmp_path / "en" / "eval.csv").read_bytes()


def test_report_orders_regimes(tmp_path):
    header = ",".join(REPORT_COLUMNS)
    texts = [f"{header}\n{m},1.0,0.5,0.9,0.1\n" for m in ("SEP_neg", "Custom", "SEP_pos", "Normal", "MAT")]
    rows = read_report_csv(merge_reports(texts))
    assert [r["method"] for r in rows] == ["Normal", "MAT", "SEP_pos", "SEP_neg", "Custom"]
    assert REPORT_ORDER[:2] == ("Normal", "MAT")
    paths = []
    for i, t in enumerate(texts):
        p = tmp_path / f"r{i}.csv"
        p.write_text(t)
        paths.append(str(p))
    cfg = tmp_path / "rep.toml"
    cfg.write_text(f"[report]\ninputs = {json.dumps(paths)}\n")
    assert run_command(["report", "--config", str(cfg), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.csv").read_text() == merge_reports(texts)


def test_spec_mismatch_is_runtime_failure(run, trained, capsys):
    assert run("eval", "bad", "--model.checkpoint", trained, "--model.hidden", "9") == 2
    assert "spec_digest" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert run_command(["fly"]) == 1
    assert "usage: xrl" in capsys.readouterr().err
    assert run_command([]) == 1


def test_unknown_flag_is_usage_error(run):
    assert run("train", "x", "--train.nonsense", "1") == 1


def test_missing_required_key_is_named(tmp_path, capsys):
    assert run_command(["eval", "--out", str(tmp_path)]) == 1
    assert "model.checkpoint" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.lamda"):
        RunConfig.from_toml("[train]\nlamda = 5.0\n")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlamda = 5.0\n")
    assert run_command(["train", "--config", str(bad)]) == 1


def test_ill_typed_value_rejected():
    with pytest.raises(ConfigError, match="train.epochs"):
        RunConfig.from_toml('[train]\nepochs = "many"\n')


def test_overrides_parse_toml_literals():
    _, cfg = parse_args(["train", "--train.lambda", "-3e3", "--pgd.random_start", "false", "--seed", "7",
                         "--landscape.gammas", "[0, 0.25]", "--train.regime", "SEP"])
    assert cfg["train.lambda"] == -3000.0 and cfg["pgd.random_start"] is False
    assert cfg["seed"] == 7 and cfg["landscape.gammas"] == [0, 0.25]
    tc = cfg.train_config()
    assert tc.label == "SEP_neg" and tc.seed == 7


def test_default_budget_follows_channels():
    assert RunConfig().pgd().epsilon == 0.3
    assert RunConfig.from_mapping({"data.format": "cifar"}).pgd().epsilon == pytest.approx(8 / 255)
    assert RunConfig.from_mapping({"pgd.epsilon": 0.1}).expl_attack().epsilon == 0.1


def test_warmup_key_reaches_train_config():
    cfg = RunConfig.from_mapping({"train.pgd_warmup_epochs": 2})
    assert cfg.train_config().pgd_warmup_epochs == 2
