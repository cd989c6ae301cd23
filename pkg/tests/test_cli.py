import json

import pytest
from openpyxl import load_workbook

from mobe.cli import run
from mobe.manifest import manifest_path, read_manifest
from mobe.model_store import load_model


def _summary(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "planted.json"
    path.write_text(json.dumps({
        "layers": 2, "experts": 6, "hidden": 8, "intermediate": 5, "top_k": 2,
        "mode": "planted", "m": 2, "seed": 7,
    }))
    return path


@pytest.fixture
def generated(tmp_path, config_file, capsys):
    out = tmp_path / "model.moew"
    assert run(["generate", "--config", str(config_file), "--out", str(out)]) == 0
    capsys.readouterr()
    return out


class TestGenerate:

    def test_planted_writes_truth_and_manifest(self, tmp_path, config_file, capsys):
        out = tmp_path / "m.moew"
        assert run(["generate", "--config", str(config_file), "--out", str(out)]) == 0
        summary = _summary(capsys)
        assert summary["mode"] == "planted"
        assert load_model(out).config.experts == 6
        assert load_model(summary["truth"]).spec.basis_count == 2
        manifest = read_manifest(manifest_path(out))
        assert manifest.command == "generate"
        assert manifest.seeds == {"seed": 7}

    def test_flags_override_config(self, tmp_path, config_file):
        out = tmp_path / "g.moew"
        assert run(["generate", "--config", str(config_file), "--mode", "gaussian", "--experts", "4",
                    "--out", str(out)]) == 0
        assert load_model(out).config.experts == 4

    def test_missing_dimensions(self, tmp_path):
        assert run(["generate", "--out", str(tmp_path / "x.moew")]) == 1

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"layers": 1, "colour": "red"}))
        assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "x.moew")]) == 1

    @pytest.mark.parametrize("key, value", [("experts", "4"), ("hidden", 8.5), ("top_k", True), ("layers", [1])])
    def test_badly_typed_config_value(self, tmp_path, capsys, key, value):
        values = {"layers": 1, "experts": 4, "hidden": 8, "intermediate": 5, "top_k": 2}
        values[key] = value
        bad = tmp_path / "typed.json"
        bad.write_text(json.dumps(values))
        assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "x.moew")]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("error: ") and repr(key) in err[-1]

    def test_integer_accepted_for_float_field(self, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"layers": 1, "experts": 4, "hidden": 8, "intermediate": 5, "top_k": 2, "std": 1}))
        assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "g.moew")]) == 0


class TestCompress:

    def test_mobe(self, tmp_path, generated, capsys):
        out = tmp_path / "c.mobe"
        code = run(["compress", "--in", str(generated), "--method", "mobe", "--m", "2", "--steps", "20",
                    "--jobs", "1", "--out", str(out)])
        assert code == 0
        summary = _summary(capsys)
        assert len(summary["tasks"]) == 4
        assert load_model(out).spec.basis_count == 2
        trace = (tmp_path / "c.mobe.trace.csv").read_text().splitlines()
        assert trace[0] == "layer,type,step,loss"
        assert len(trace) == 1 + 4 * 20
        assert manifest_path(out).exists()

    def test_m_must_be_below_n(self, tmp_path, generated):
        out = tmp_path / "c.mobe"
        assert run(["compress", "--in", str(generated), "--m", "6", "--steps", "5", "--out", str(out)]) == 1
        assert not out.exists()

    def test_divergence_exit_code_removes_output(self, tmp_path, generated):
        cfg = tmp_path / "diverge.json"
        cfg.write_text(json.dumps({"m": 2, "steps": 20, "lr": 1000.0, "divergence_patience": 1}))
        out = tmp_path / "c.mobe"
        assert run(["compress", "--in", str(generated), "--config", str(cfg), "--jobs", "1",
                    "--out", str(out)]) == 3
        assert not out.exists()

    @pytest.mark.parametrize("method", ["svd", "molae", "d2moe"])
    def test_baselines(self, tmp_path, generated, capsys, method):
        out = tmp_path / f"{method}.mobe"
        assert run(["compress", "--in", str(generated), "--method", method, "--m", "2", "--rank", "2",
                    "--out", str(out)]) == 0
        assert _summary(capsys)["method"] == method
        assert load_model(out).method.value == method

    def test_equal_budget(self, tmp_path, generated, capsys):
        out = tmp_path / "svd.mobe"
        assert run(["compress", "--in", str(generated), "--method", "svd", "--m", "2", "--equal-budget",
                    "--out", str(out)]) == 0
        # n p r + m r d = 6*5*5 + 2*5*8 = 230 over 6*(5+8) per rank
        assert _summary(capsys)["rank"] == 3

    def test_missing_input(self, tmp_path):
        assert run(["compress", "--in", str(tmp_path / "none.moew"), "--m", "2",
                    "--out", str(tmp_path / "c.mobe")]) == 2

    def test_unknown_flag(self, tmp_path, generated):
        assert run(["compress", "--in", str(generated), "--bogus", "--out", str(tmp_path / "c.mobe")]) == 1


class TestVerify:

    def test_identical_models(self, generated, capsys):
        assert run(["verify", "--original", str(generated), "--compressed", str(generated), "--tokens", "16"]) == 0
        summary = _summary(capsys)
        assert summary["max_abs"] == 0.0
        assert summary["relative"] == 0.0

    def test_planted_truth_within_tolerance(self, tmp_path, generated, capsys):
        truth = tmp_path / "model.moew.truth"
        assert run(["verify", "--original", str(generated), "--compressed", str(truth), "--tokens", "64"]) == 0
        summary = _summary(capsys)
        assert summary["factorized_vs_materialized_max_abs"] < 1e-5

    def test_poor_compression_fails(self, tmp_path, generated, capsys):
        out = tmp_path / "svd.mobe"
        assert run(["compress", "--in", str(generated), "--method", "svd", "--rank", "1", "--out", str(out)]) == 0
        assert run(["verify", "--original", str(generated), "--compressed", str(out), "--tokens", "16"]) == 3
        assert _summary(capsys)["within_tolerance"] is False

    def test_saved_tokens_round_trip(self, tmp_path, generated, capsys):
        tokens = tmp_path / "tokens.bin"
        args = ["verify", "--original", str(generated), "--compressed", str(generated)]
        assert run(args + ["--tokens", "8", "--save-tokens", str(tokens)]) == 0
        assert run(args + ["--token-file", str(tokens)]) == 0
        assert _summary(capsys)["tokens"] == 8


class TestReports:

    def test_report_tables(self, tmp_path, generated, capsys):
        truth = tmp_path / "model.moew.truth"
        svd = tmp_path / "svd.mobe"
        assert run(["compress", "--in", str(generated), "--method", "svd", "--rank", "1", "--out", str(svd)]) == 0
        out, xlsx = tmp_path / "mse.csv", tmp_path / "report.xlsx"
        assert run(["report", "--original", str(generated), "--variants", str(truth), "--variants", str(svd),
                    "--out", str(out), "--xlsx", str(xlsx)]) == 0
        summary = _summary(capsys)
        assert summary["frob_sq_by_method"]["mobe"] < summary["frob_sq_by_method"]["svd"]
        assert out.read_text().splitlines()[0] == "layer,type,method,mse,frob_sq"
        params = (tmp_path / "mse.csv.params.csv").read_text().splitlines()
        assert params[0] == "method,total,activated,gamma"
        assert len(params) == 4
        workbook = load_workbook(xlsx)
        assert workbook.sheetnames == ["mse", "params"]
        assert workbook["mse"]["A1"].font.bold

    def test_analyze_rank(self, tmp_path, generated, capsys):
        out = tmp_path / "rank.csv"
        assert run(["analyze-rank", "--in", str(generated), "--out", str(out)]) == 0
        summary = _summary(capsys)
        assert summary["rows"] == 4
        assert summary["svd_threshold"] == pytest.approx(40 / 13)

    def test_stats_table(self, tmp_path, generated, capsys):
        out = tmp_path / "stats.csv"
        assert run(["stats", "--in", str(generated), "--out", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "layer\ttype\tmu\tsigma\tmu_omission_cost"
        assert len(lines) == 1 + 4 + 2
        assert out.read_text().splitlines()[0] == "layer,type,mu,sigma,mu_omission_cost"


class TestReplay:

    def test_reproduces_outputs(self, tmp_path, generated, capsys):
        out = tmp_path / "c.mobe"
        assert run(["compress", "--in", str(generated), "--m", "2", "--steps", "10", "--jobs", "1",
                    "--out", str(out)]) == 0
        first = out.read_bytes()
        out.unlink()
        assert run(["replay", "--manifest", str(manifest_path(out))]) == 0
        assert out.read_bytes() == first

    def test_missing_manifest(self, tmp_path):
        assert run(["replay", "--manifest", str(tmp_path / "none.json")]) == 2
