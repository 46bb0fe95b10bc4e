"""Command-line surface: exit codes, artifacts, determinism, config
precedence."""

import hashlib
import json
import os

import numpy as np
import pytest

from lmr_cbt.cli import main


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    rc = main(["synth", "--profile", "tiny", "--seed", "7", "--out", out,
               "--n-train", "24", "--n-val", "10", "--n-test", "10"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--profile", "tiny", "--data", tiny_data, "--out", out,
               "--epochs", "2", "--seed", "1"])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_files_and_summary(self, tiny_data):
        for name in ("train.mmds", "val.mmds", "test.mmds", "summary.jsonl"):
            assert os.path.exists(os.path.join(tiny_data, name))
        records = read_jsonl(os.path.join(tiny_data, "summary.jsonl"))
        kinds = {r.get("kind") for r in records}
        assert {"config", "split", "lengths", "labels", "signal"} <= kinds
        config = records[0]
        assert config["kind"] == "config" and config["run.seed"] == "7"

    def test_rerun_identical_hashes(self, tiny_data, tmp_path):
        again = str(tmp_path / "again")
        rc = main(["synth", "--profile", "tiny", "--seed", "7", "--out", again,
                   "--n-train", "24", "--n-val", "10", "--n-test", "10"])
        assert rc == 0
        for name in ("train.mmds", "val.mmds", "test.mmds", "summary.jsonl"):
            assert file_hash(os.path.join(again, name)) == file_hash(
                os.path.join(tiny_data, name)), name

    def test_invalid_spec_exits_2(self, tmp_path):
        rc = main(["synth", "--profile", "tiny", "--n-train", "0",
                   "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_unknown_profile_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--profile", "bogus", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts(self, tiny_run):
        assert os.path.exists(os.path.join(tiny_run, "checkpoint.lmrc"))
        records = read_jsonl(os.path.join(tiny_run, "metrics.jsonl"))
        assert records[0]["event"] == "header"
        assert records[0]["config"]["run.profile"] == "tiny"
        assert any(r["event"] == "epoch" and "wall_s" in r for r in records)
        with open(os.path.join(tiny_run, "checkpoint.lmrc"), "rb") as fh:
            assert fh.read(4) == b"LMRC"

    def test_missing_data_no_partial_outputs(self, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train", "--profile", "tiny", "--data", str(tmp_path / "absent"),
                   "--out", out])
        assert rc == 3
        assert not os.path.exists(out)

    def test_dim_mismatch_exits_3(self, tiny_data, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train", "--profile", "tiny", "--data", tiny_data,
                   "--out", out, "--d-l", "9", "--epochs", "1"])
        assert rc == 3

    def test_fusion_target_flag(self, tiny_data, tmp_path):
        out = str(tmp_path / "runv")
        rc = main(["train", "--profile", "tiny", "--data", tiny_data, "--out", out,
                   "--epochs", "1", "--fusion-target", "V"])
        assert rc == 0
        records = read_jsonl(os.path.join(out, "metrics.jsonl"))
        assert records[0]["config"]["model.fusion_target"] == "vis"

    def test_numeric_abort_exits_4(self, tiny_data, tmp_path, monkeypatch):
        import lmr_cbt.cli as cli_mod
        from lmr_cbt.errors import TrainAbortError

        def exploding(*args, **kwargs):
            raise TrainAbortError("non-finite loss at epoch 0 batch 1",
                                  epoch=0, batch=1)

        monkeypatch.setattr(cli_mod, "train", exploding)
        rc = main(["train", "--profile", "tiny", "--data", tiny_data,
                   "--out", str(tmp_path / "boom"), "--epochs", "1"])
        assert rc == 4

    def test_determinism_byte_identical_artifacts(self, tiny_data, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            rc = main(["train", "--profile", "tiny", "--data", tiny_data,
                       "--out", out, "--epochs", "2", "--seed", "9",
                       "--clock", "fixed"])
            assert rc == 0
            outs.append(out)
        assert file_hash(os.path.join(outs[0], "checkpoint.lmrc")) == \
            file_hash(os.path.join(outs[1], "checkpoint.lmrc"))
        assert file_hash(os.path.join(outs[0], "metrics.jsonl")) == \
            file_hash(os.path.join(outs[1], "metrics.jsonl"))


class TestEval:
    def test_json_and_text_carry_identical_values(self, tiny_data, tiny_run, capsys):
        ckpt = os.path.join(tiny_run, "checkpoint.lmrc")
        data = os.path.join(tiny_data, "test.mmds")
        assert main(["eval", "--checkpoint", ckpt, "--data", data,
                     "--format", "json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert main(["eval", "--checkpoint", ckpt, "--data", data,
                     "--format", "text"]) == 0
        text = capsys.readouterr().out
        flat = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(" = ")
            flat[key] = eval(value)   # values are printed with repr
        for key in ("acc2", "acc7", "f1", "mae", "loss", "count"):
            assert flat[key] == payload[key], key

    def test_train_split_metrics_reproduced_exactly(self, tiny_data, tiny_run, capsys):
        records = read_jsonl(os.path.join(tiny_run, "metrics.jsonl"))
        best = [r for r in records if r["event"] == "best"][-1]
        assert main(["eval", "--checkpoint", os.path.join(tiny_run, "checkpoint.lmrc"),
                     "--data", os.path.join(tiny_data, "train.mmds"),
                     "--format", "json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        for key, value in best["train"].items():
            if key == "task":
                continue
            assert payload[key] == value, key

    def test_missing_checkpoint_exits_3(self, tiny_data):
        rc = main(["eval", "--checkpoint", "/nonexistent/ck.lmrc",
                   "--data", os.path.join(tiny_data, "test.mmds")])
        assert rc == 3

    def test_corrupted_magic_exits_3(self, tiny_run, tiny_data, tmp_path):
        broken = str(tmp_path / "broken.lmrc")
        with open(os.path.join(tiny_run, "checkpoint.lmrc"), "rb") as fh:
            raw = fh.read()
        with open(broken, "wb") as fh:
            fh.write(b"XXXX" + raw[4:])
        rc = main(["eval", "--checkpoint", broken,
                   "--data", os.path.join(tiny_data, "test.mmds")])
        assert rc == 3

    def test_report_file_written(self, tiny_data, tiny_run, tmp_path, capsys):
        report = str(tmp_path / "report.json")
        assert main(["eval", "--checkpoint", os.path.join(tiny_run, "checkpoint.lmrc"),
                     "--data", os.path.join(tiny_data, "val.mmds"),
                     "--format", "json", "--out", report]) == 0
        capsys.readouterr()
        payload = json.loads(open(report).read())
        assert payload["config"]["run.profile"] == "tiny"
        assert payload["format_version"] == 1


class TestGradcheckCommand:
    def test_ops_scope_passes(self, capsys):
        assert main(["gradcheck", "ops"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_injected_backward_bug_caught(self, capsys, monkeypatch):
        import lmr_cbt.tensor as tensor_mod
        real_tanh = tensor_mod.tanh

        def sabotaged(x):
            out = np.tanh(x.data)
            # sign-flipped backward rule
            return tensor_mod._record("tanh", (x,), out,
                                      lambda g: (-g * (1.0 - out * out),))

        monkeypatch.setattr(tensor_mod, "tanh", sabotaged)
        rc = main(["gradcheck", "ops"])
        assert rc == 5
        out = capsys.readouterr().out
        assert any("FAIL" in line and "tanh" in line for line in out.splitlines())


class TestParams:
    def test_mosei_ledger(self, capsys):
        assert main(["params", "--profile", "mosei"]) == 0
        out = capsys.readouterr().out
        assert "published claim for profile 'mosei': 0.41M" in out
        total_line = [l for l in out.splitlines() if l.startswith("total")][0]
        total = int(total_line.split()[1])
        assert 300_000 <= total <= 520_000

    def test_subtotals_sum_to_total(self, capsys):
        assert main(["params", "--profile", "tiny"]) == 0
        out = capsys.readouterr().out
        rows = [l for l in out.splitlines()
                if l and not l.startswith(("subtotal", "total", "-", "published"))]
        per_path = sum(int(l.split()[-1]) for l in rows)
        subtotal = sum(int(l.split()[-1]) for l in out.splitlines()
                       if l.startswith("subtotal"))
        total = int([l for l in out.splitlines() if l.startswith("total")][0].split()[1])
        assert per_path == subtotal == total

    def test_deterministic(self, capsys):
        main(["params", "--profile", "mosi"])
        first = capsys.readouterr().out
        main(["params", "--profile", "mosi"])
        assert capsys.readouterr().out == first


class TestConfigResolution:
    def test_file_overrides_profile_and_flag_overrides_file(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("model.d_f=12\nmodel.h=3\n")
        assert main(["params", "--profile", "tiny", "--config", str(cfg_file)]) == 0
        out = capsys.readouterr().out
        assert "(12, 12)" in out     # attention projections at width 12
        assert main(["params", "--profile", "tiny", "--config", str(cfg_file),
                     "--d-f", "16", "--heads", "4"]) == 0
        out = capsys.readouterr().out
        assert "(16, 16)" in out

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("model.bogus=1\n")
        assert main(["params", "--profile", "tiny", "--config", str(cfg_file)]) == 2

    def test_incomplete_model_config_exits_2(self):
        assert main(["params", "--d-f", "8"]) == 2


class TestProfiles:
    """The real-dataset profiles bind the published hyperparameter rows."""

    EXPECTED = {
        "mosei": dict(d_f=40, h=8, depth=5, k_v=3, k_a=3, d_out=1,
                      lr=1e-3, batch_size=32, epochs=120),
        "mosi": dict(d_f=30, h=10, depth=4, k_v=3, k_a=1, d_out=1,
                     lr=2e-3, batch_size=8, epochs=100),
        "iemocap": dict(d_f=40, h=5, depth=5, k_v=3, k_a=5, d_out=4,
                        lr=1e-3, batch_size=32, epochs=60),
    }

    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_profile_rows(self, name):
        from lmr_cbt.profiles import get_profile
        profile = get_profile(name)
        expected = self.EXPECTED[name]
        for key in ("d_f", "h", "depth", "k_v", "k_a", "d_out"):
            assert profile["model"][key] == expected[key], key
        for key in ("lr", "batch_size", "epochs"):
            assert profile["train"][key] == expected[key], key
        assert (profile["model"]["d_l"], profile["model"]["d_v"],
                profile["model"]["d_a"]) == (300, 35, 74)

    def test_task_binding(self):
        from lmr_cbt.profiles import get_profile
        assert get_profile("iemocap")["model"]["task"] == "multilabel-4"
        assert get_profile("mosei")["model"]["task"] == "sentiment-scalar"
        assert get_profile("mosi")["model"]["task"] == "sentiment-scalar"


class TestAblateCommand:
    def test_tiny_sweep_artifacts(self, tmp_path):
        out = str(tmp_path / "ablate")
        rc = main(["ablate", "--profile", "tiny", "--seed", "3",
                   "--n-train", "10", "--n-val", "6", "--n-test", "6",
                   "--len-l", "3,5", "--len-v", "3,5", "--len-a", "3,5",
                   "--epochs", "1", "--seeds", "1,2", "--out", out])
        assert rc == 0
        table = open(os.path.join(out, "table.txt")).read()
        for label in ("Conv1D text", "BiLSTM text", "[V, L]->A", "[L, A]->V", "[V, A]->L"):
            assert label in table
        assert "# model.d_f=8" in table
        run = json.loads(open(os.path.join(out, "run.json")).read())
        assert run["seeds"] == [1, 2]
        assert len(run["rows"]) == 5
        fusion_params = {r["variant"]: r["params"] for r in run["rows"]
                         if r["variant"].startswith("fuse")}
        assert len(set(fusion_params.values())) == 1
        for variant in ("text-conv1d", "text-bilstm", "fuse-to-A", "fuse-to-V", "fuse-to-L"):
            assert os.path.exists(os.path.join(out, f"variant-{variant}.json"))

    def test_parallel_workers_match_sequential(self, tmp_path, monkeypatch):
        args = ["ablate", "--profile", "tiny", "--seed", "3",
                "--n-train", "8", "--n-val", "6", "--n-test", "6",
                "--len-l", "3,4", "--len-v", "3,4", "--len-a", "3,4",
                "--epochs", "1", "--seeds", "1"]
        seq_out = str(tmp_path / "seq")
        assert main(args + ["--out", seq_out]) == 0
        par_out = str(tmp_path / "par")
        monkeypatch.setenv("LMRCBT_THREADS", "2")
        assert main(args + ["--out", par_out]) == 0
        seq = json.loads(open(os.path.join(seq_out, "run.json")).read())
        par = json.loads(open(os.path.join(par_out, "run.json")).read())
        assert seq["rows"] == par["rows"]
