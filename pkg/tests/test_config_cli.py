import json

import pytest

from monovl import cli
from monovl import config as CF
from monovl.exceptions import ConfigError

TINY = """
[run]
seed = 3
variant = EVIP_PP
train_samples = 40
heldout_samples = 6
pretrain_steps = 3
eval_samples = 3
max_new_tokens = 8

[model]
d_model = 16
n_heads = 2
ffn_hidden = 32
patch_dim = 16

[stage S1.1]
steps = 2
batch_size = 2
[stage S1.2]
steps = 2
batch_size = 2
[stage S1.3]
steps = 2
batch_size = 2
[stage S2]
steps = 2
batch_size = 2

[bench]
seq_lens = 64
repeats = 10
warmup = 3
linear_dims = 32, 64
mlp_dims = 32, 64
block_size = 16
model_mixes = 768:256
model_repeats = 10
decode_tokens = 1
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def test_parse_values():
    cfg = CF.parse_config(TINY)
    assert cfg.seed == 3 and cfg.variant == "EVIP_PP"
    assert cfg.stages["S2"] == {"steps": 2, "batch_size": 2}
    assert cfg.bench["model_mixes"] == [(768, 256)]
    assert cfg.model_config().attention_experts


def test_variant_sets_attention_experts_default():
    assert not CF.parse_config("[run]\nvariant = EVIP\n").model_config().attention_experts
    cfg = CF.parse_config("[run]\nvariant = EVIP\n[model]\nattention_experts = true\n")
    assert cfg.model_config().attention_experts


@pytest.mark.parametrize("text,needle", [
    ("[run]\nsed = 1\n", ":2: unknown key 'sed'"),
    ("[run]\nseed = x\n", ":2: bad value for 'seed'"),
    ("[runn]\nseed = 1\n", ":1: unknown section"),
    ("seed = 1\n", ":1: key outside any section"),
    ("[run]\nseed 1\n", ":2: expected 'key = value'"),
    ("[run]\nseed = 1\nseed = 2\n", ":3: duplicate key"),
    ("[stage S3]\nsteps = 1\n", "unknown stage"),
    ("[run]\nvariant = EVIP3\n", "variant must be"),
    ("[run]\nstrategy = fast\n", "strategy must be"),
    ("[model]\nd_model = 10\nn_heads = 4\n", "invalid [model]"),
])
def test_strict_errors(text, needle):
    with pytest.raises(ConfigError) as err:
        CF.parse_config(text, "c.cfg")
    assert needle in str(err.value)


def test_errors_are_collected():
    with pytest.raises(ConfigError) as err:
        CF.parse_config("[run]\na = 1\nb = 2\n", "c.cfg")
    assert "c.cfg:2" in str(err.value) and "c.cfg:3" in str(err.value)


def test_render_round_trip():
    cfg = CF.parse_config(TINY)
    again = CF.parse_config(CF.render_config(cfg))
    assert again.model == cfg.model and again.stages == cfg.stages and again.bench == cfg.bench
    assert again.seed == cfg.seed


def test_curriculum_include(tmp_path):
    (tmp_path / "stages.cfg").write_text("[stage S2]\nsteps = 9\n")
    (tmp_path / "main.cfg").write_text("[run]\ncurriculum = stages.cfg\n")
    assert CF.load_config(str(tmp_path / "main.cfg")).stages["S2"]["steps"] == 9


def test_output_dir_precedence(monkeypatch):
    cfg = CF.parse_config("[run]\nout = from_file\n")
    monkeypatch.delenv(CF.ENV_OUT, raising=False)
    assert cfg.output_dir() == "from_file"
    monkeypatch.setenv(CF.ENV_OUT, "from_env")
    assert cfg.output_dir() == "from_env"
    assert cfg.output_dir("from_flag") == "from_flag"


def test_train_artifacts_and_determinism(cfg_file, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", cfg_file, "--out", str(a)]) == 0
    assert cli.main(["train", "--config", cfg_file, "--out", str(b), "--threads", "1"]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == ["freeze_audit.json", "loss.csv", "stage-S0.ckpt", "stage00-S1.1.ckpt",
                     "stage01-S1.2.ckpt", "stage02-S1.3.ckpt", "stage03-S2.ckpt",
                     "train_summary.json"]
    assert (a / "loss.csv").read_text() == (b / "loss.csv").read_text()
    audit = json.loads((a / "freeze_audit.json").read_text())
    assert [x["stage"] for x in audit] == ["S0", "S1.1", "S1.2", "S1.3", "S2"]
    assert all(x["frozen_unchanged"] for x in audit)
    rows = (a / "loss.csv").read_text().splitlines()
    assert rows[0] == "stage,variant,step,lr,loss" and len(rows) == 1 + 3 + 4 * 2

    # eval is deterministic
    capsys.readouterr()
    ckpt = str(a / "stage03-S2.ckpt")
    assert cli.main(["eval", ckpt, "--config", cfg_file]) == 0
    first = json.loads(capsys.readouterr().out)
    assert cli.main(["eval", ckpt, "--config", cfg_file]) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert set(first) >= {"exact_match", "token_loss", "n"} and first["n"] == 3

    # resume after S1.2 replays the last two stages
    c = tmp_path / "c"
    assert cli.main(["train", "--config", cfg_file, "--out", str(c),
                     "--resume", str(a / "stage01-S1.2.ckpt")]) == 0
    assert (c / "stage03-S2.ckpt").read_bytes() == (a / "stage03-S2.ckpt").read_bytes()

    # inspect names the damaged blob
    assert cli.main(["inspect", ckpt]) == 0
    assert "all" in capsys.readouterr().out
    data = bytearray((a / "stage03-S2.ckpt").read_bytes())
    data[-3] ^= 0x10
    (a / "stage03-S2.ckpt").write_bytes(bytes(data))
    assert cli.main(["inspect", ckpt]) == 1
    assert "CHECKSUM FAILED: head.weight" in capsys.readouterr().out


def test_eval_refuses_mismatched_config(cfg_file, tmp_path, capsys):
    from monovl import model as M
    from monovl.checkpoint import save_checkpoint

    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, M.ModelState(M.ModelConfig(d_model=32)), "S2", 3)
    assert cli.main(["eval", path, "--config", cfg_file]) == 2
    err = capsys.readouterr().err
    assert "config file model" in err and "checkpoint model" in err


def test_unknown_key_exits_without_artifacts(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nsed = 1\n")
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(bad), "--out", str(out)]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    assert not out.exists()


def test_data_command_and_env_out(tmp_path, monkeypatch):
    monkeypatch.setenv("MONOVL_OUT_DIR", str(tmp_path / "shards"))
    assert cli.main(["data", "--samples", "5", "--shard-size", "2"]) == 0
    assert sorted(p.name for p in (tmp_path / "shards").iterdir()) == [
        "manifest.json", "shard-00000.bin", "shard-00001.bin", "shard-00002.bin"]


def test_train_from_shards(cfg_file, tmp_path):
    assert cli.main(["data", "--samples", "12", "--out", str(tmp_path / "d")]) == 0
    text = open(cfg_file).read().replace("[run]\n", f"[run]\ndataset = {tmp_path / 'd'}\n")
    cfg = tmp_path / "shards.cfg"
    cfg.write_text(text)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0


def test_bench_outputs(cfg_file, tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--config", cfg_file, "--out", str(out)]) == 0
    op = (out / "op_latency.csv").read_text().splitlines()
    assert op[0] == "strategy,kind,seq_len,layout,median_us,p10,p90,speedup_vs_reference"
    assert len(op) == 1 + 2 * 2 * 3
    model = (out / "model_latency.csv").read_text().splitlines()
    assert model[0].startswith("strategy,image_tokens,text_tokens,total_tokens,ttft_median_ms")
    assert len(model) == 3
    assert json.loads((out / "bench.json").read_text())["machine"]["cpu_count"] >= 1
