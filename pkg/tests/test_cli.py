import json

import numpy as np
import pytest
import yaml

from comprepr.cli import ExperimentConfig, loads_config, main
from comprepr.data import load_dataset
from comprepr.errors import ContractError
from comprepr.trainer import init_state, load_arrays

SMALL_DATA = "--k 10 --a-per-cat 3 --n-base 6 --n-novel 5 --per-cat 30 --novel-per-cat 20 --d-in 12 --r-nuisance 2".split()
SMALL_NET = "--hidden-dim 16 --embedding-dim 8 --batch-size 32".split()


def run(*argv):
    return main([str(a) for a in argv])


def records(path):
    lines = [json.loads(line) for line in open(path)]
    return lines[0], lines[1:]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.txt"
    assert run("gen-data", "--out", path, "--seed", 3, *SMALL_DATA) == 0
    return path


@pytest.fixture(scope="module")
def small_ckpt(small_data, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    argv = ["train", "--data", small_data, "--out", path, "--variant", "soft", "--orth-beta", "0.001"]
    assert run(*argv, "--epochs-pretrain", 3, "--epochs-finetune", 3, *SMALL_NET) == 0
    return path


class TestGenData:
    def test_defaults(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "d.txt") == 0
        ds = load_dataset(tmp_path / "d.txt")
        assert len(ds.base_categories) == 40 and len(ds.novel_categories) == 20
        assert "40 base + 20 novel" in capsys.readouterr().out

    def test_seed_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--seed", 7, *SMALL_DATA) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_env_seed_and_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COMPREPR_SEED", "7")
        run("gen-data", "--out", tmp_path / "env", *SMALL_DATA)
        run("gen-data", "--out", tmp_path / "flag", "--seed", 7, *SMALL_DATA)
        run("gen-data", "--out", tmp_path / "other", "--seed", 8, *SMALL_DATA)
        assert (tmp_path / "env").read_bytes() == (tmp_path / "flag").read_bytes()
        assert (tmp_path / "env").read_bytes() != (tmp_path / "other").read_bytes()

    def test_infeasible(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "x", "--k", 5, "--a-per-cat", 6) == 2
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COMPREPR_SEED", "abc")
        assert run("gen-data", "--out", tmp_path / "x") == 2


class TestTrain:
    def test_none_has_zero_comp(self, small_data, tmp_path):
        ck = tmp_path / "m"
        assert run("train", "--data", small_data, "--out", ck, "--variant", "none", "--epochs-pretrain", 2, "--epochs-finetune", 2, *SMALL_NET) == 0
        head, rows = records(str(ck) + ".record.jsonl")
        epochs = [r for r in rows if "epoch" in r]
        assert len(epochs) == 4 and all(r["loss_comp"] == 0 for r in epochs)
        assert head["config"]["loss"]["variant"] == "none"
        assert rows[-1]["config_hash"] == head["config_hash"]

    def test_soft_orth_records_orth(self, small_ckpt):
        head, rows = records(str(small_ckpt) + ".record.jsonl")
        finetune = [r for r in rows if "epoch" in r and r["epoch"] >= 3]
        assert all(r["loss_orth"] > 0 for r in finetune)
        assert head["config"]["loss"]["beta"] == 0.001

    def test_zero_epochs_writes_init(self, small_data, tmp_path):
        ck = tmp_path / "m"
        assert run("train", "--data", small_data, "--out", ck, "--epochs-pretrain", 0, "--epochs-finetune", 0, "--seed", 4, *SMALL_NET) == 0
        cfg = ExperimentConfig(seed=4).run_config(hidden_dim=16, embedding_dim=8, batch_size=32)
        fresh = init_state(cfg, load_dataset(small_data))
        arrays = load_arrays(ck)
        assert arrays["encoder.0.weight"].tobytes() == fresh.theta.layers[0][0].data.tobytes()

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 4

    def test_deep_layers_flag(self, small_data, tmp_path):
        ck = tmp_path / "m"
        argv = ["train", "--data", small_data, "--out", ck, "--variant", "hard", "--deep-layers", "0,1"]
        assert run(*argv, "--epochs-pretrain", 1, "--epochs-finetune", 1, *SMALL_NET) == 0
        assert {"eta.0", "eta.1", "eta.last"} <= set(load_arrays(ck))


class TestEval:
    def test_record_counts(self, small_data, small_ckpt, tmp_path):
        out = tmp_path / "e.jsonl"
        argv = ["eval", "--data", small_data, "--checkpoint", small_ckpt, "--out", out, "--n-shot", "1,2,5", "--trials", 2]
        assert run(*argv, "--heads", "cosine,linear", "--baseline", "prototypical") == 0
        head, rows = records(out)
        by_method = {}
        for r in rows:
            by_method.setdefault(r["method"], []).append(r)
        assert {m: len(v) for m, v in by_method.items()} == {"cosine": 6, "linear": 6, "prototypical": 6}
        assert all(r["top1_mean"] <= r["top5_mean"] for r in rows)
        assert all(r["variant"] == "soft" and r["config_hash"] == head["config_hash"] for r in rows)
        assert head["config"]["eval"]["n_shots"] == [1, 2, 5]

    def test_bitwise_reproducible(self, small_data, small_ckpt, tmp_path):
        for name in ("a", "b"):
            argv = ["eval", "--data", small_data, "--checkpoint", small_ckpt, "--out", tmp_path / name, "--n-shot", 1]
            assert run(*argv, "--trials", 2, "--augment") == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        _, rows = records(tmp_path / "a")
        assert rows[0]["method"] == "cosine_aug"

    def test_missing_checkpoint(self, small_data, tmp_path):
        assert run("eval", "--data", small_data, "--checkpoint", tmp_path / "none", "--out", tmp_path / "e") == 4
        assert not (tmp_path / "e").exists()

    def test_corrupt_checkpoint(self, small_data, small_ckpt, tmp_path):
        bad = tmp_path / "bad.ckpt"
        blob = bytearray(small_ckpt.read_bytes())
        blob[40] ^= 1
        bad.write_bytes(bytes(blob))
        assert run("eval", "--data", small_data, "--checkpoint", bad, "--out", tmp_path / "e") == 4

    def test_too_many_shots(self, small_data, small_ckpt, tmp_path):
        assert run("eval", "--data", small_data, "--checkpoint", small_ckpt, "--out", tmp_path / "e", "--n-shot", 19) == 2


@pytest.fixture(scope="module")
def paired(small_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("tre")
    out = {}
    for variant, ep in (("none", 10), ("hard", 10), ("init", 0)):
        ck = root / variant
        v = "none" if variant == "init" else variant
        argv = ["train", "--data", small_data, "--out", ck, "--variant", v, "--epochs-pretrain", ep, "--epochs-finetune", ep]
        assert run(*argv, *SMALL_NET) == 0
        assert run("tre", "--data", small_data, "--checkpoint", ck, "--out", root / (variant + ".tre")) == 0
        out[variant] = records(root / (variant + ".tre"))[1][0]["heldout_distance"]
    return out


class TestTre:
    def test_hard_below_baseline(self, paired):
        assert paired["hard"] < paired["none"]

    def test_random_init_above_hard(self, paired):
        assert paired["init"] > 2 * paired["hard"]

    def test_deterministic(self, small_data, small_ckpt, capsys):
        run("tre", "--data", small_data, "--checkpoint", small_ckpt, "--iters", 50)
        first = capsys.readouterr().out
        run("tre", "--data", small_data, "--checkpoint", small_ckpt, "--iters", 50)
        assert capsys.readouterr().out == first


class TestAblate:
    def base_argv(self, data, out):
        return ["ablate-attrs", "--data", data, "--out", out, "--epochs-pretrain", 1, "--epochs-finetune", 1, "--trials", 2, *SMALL_NET]

    def test_single_fraction(self, small_data, tmp_path):
        assert run(*self.base_argv(small_data, tmp_path / "a"), "--fractions", "1.0", "--seeds", "0") == 0
        _, rows = records(tmp_path / "a")
        assert len(rows) == 1 and rows[0]["n_attributes"] == 10 and rows[0]["seed_count"] == 1

    def test_rows_per_fraction_and_jobs(self, small_data, tmp_path):
        argv = self.base_argv(small_data, tmp_path / "a") + ["--fractions", "1,0.5,0.2", "--seeds", "0,1"]
        assert run(*argv) == 0
        argv[4] = tmp_path / "b"
        assert run(*argv, "--jobs", 2) == 0
        _, rows = records(tmp_path / "a")
        assert [r["fraction"] for r in rows] == [1.0, 0.5, 0.2]
        assert [r["n_attributes"] for r in rows] == [10, 5, 2]
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_zero_fraction_rejected(self, small_data, tmp_path):
        assert run(*self.base_argv(small_data, tmp_path / "a"), "--fractions", "0") == 2


class TestGradcheck:
    def test_stock_build_passes(self, capsys):
        assert run("gradcheck", "--seeds", 2) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 13 and all(line.startswith("PASS") for line in lines[:-1])

    def test_corrupted_gradient_is_named(self, capsys):
        assert run("gradcheck", "--seeds", 1, "--corrupt", "head.weight") == 1
        out = capsys.readouterr().out
        assert "FAIL" in out and "head.weight[" in out


class TestConfig:
    def test_roundtrip_fixed_point(self):
        cfg = loads_config("seed: 3\nloss: {variant: soft, beta: 0.002, deep_layers: [1, 0]}\neval: {n_shots: [1, 5]}\n")
        text = cfg.dumps()
        again = loads_config(text)
        assert again == cfg and again.dumps() == text
        assert again.loss.deep_layers == frozenset({0, 1})

    def test_defaults_materialized(self):
        doc = yaml.safe_load(ExperimentConfig().dumps())
        assert doc["data"]["k"] == 30 and doc["train"]["epochs_pretrain"] == 60 and doc["seed"] == 0

    @pytest.mark.parametrize("text", ["bogus: 1\n", "loss: {lambda: 2}\n", "train: {head: mlp}\n", "seed: x\n", "- 1\n"])
    def test_rejects(self, text):
        with pytest.raises(ContractError):
            loads_config(text)

    def test_unknown_key_exit_code(self, tmp_path):
        (tmp_path / "c.yaml").write_text("data: {kk: 3}\n")
        assert run("gen-data", "--config", tmp_path / "c.yaml", "--out", tmp_path / "d") == 2

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 5\ndata: {k: 10, a_per_cat: 3, n_base: 4, n_novel: 2, d_in: 12}\n")
        run("gen-data", "--config", tmp_path / "c.yaml", "--out", tmp_path / "a", "--n-base", 5)
        ds = load_dataset(tmp_path / "a")
        assert len(ds.base_categories) == 5 and ds.k == 10

    def test_file_seed_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COMPREPR_SEED", "9")
        (tmp_path / "c.yaml").write_text("seed: 5\n")
        run("gen-data", "--config", tmp_path / "c.yaml", "--out", tmp_path / "a", *SMALL_DATA)
        run("gen-data", "--out", tmp_path / "b", "--seed", 5, *SMALL_DATA)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_hash_tracks_content(self):
        a, b = ExperimentConfig(), ExperimentConfig(seed=1)
        assert a.config_hash() == ExperimentConfig().config_hash() != b.config_hash()
        assert len(np.unique([a.config_hash(), b.config_hash()])) == 2
