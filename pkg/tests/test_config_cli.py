import json
import re

import pytest

from levyhjb import cli
from levyhjb.config import DEFAULT_CONFIG_TEXT, ConfigError, default_config, load_config, parse_config
from levyhjb.spectral import build_trilinear_tensor, build_basis, export_snapshot
from levyhjb.validation import FULL


def edit(text, **changes):
    for key, val in changes.items():
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {val}", text, flags=re.M)
        assert n == 1, key
    return text


SMALL = edit(DEFAULT_CONFIG_TEXT, n_mc=300, n_cloud=20, n_slices=10, n_eval=2000)


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfig:
    def test_default(self):
        cfg = default_config()
        assert cfg.m == 4 and cfg.hjb.R == 0.5 and cfg.integrator.dt == 1e-3
        assert list(cfg.x0) == [0.6, -0.5, 0.4, 0.3]
        assert cfg.warnings == ()

    @pytest.mark.parametrize("section,key", [("basis", "m"), ("noise", "eps"), ("integrator", "dt"),
                                             ("seeds", "master")])
    def test_missing_required_named(self, section, key):
        text = re.sub(rf"^{key} = .*\n", "", DEFAULT_CONFIG_TEXT, flags=re.M)
        with pytest.raises(ConfigError) as info:
            parse_config(text, env={})
        assert info.value.field == f"{section}.{key}"

    def test_unknown_key_line(self):
        text = DEFAULT_CONFIG_TEXT.replace("eps = 1.5", "eps = 1.5\nepsilon = 2")
        with pytest.raises(ConfigError) as info:
            parse_config(text, env={})
        assert info.value.field == "noise.epsilon"
        assert text.splitlines()[info.value.line - 1] == "epsilon = 2"

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config(DEFAULT_CONFIG_TEXT + "\n[extras]\nfoo = 1\n", env={})

    def test_bad_value_and_schema(self):
        with pytest.raises(ConfigError) as info:
            parse_config(edit(DEFAULT_CONFIG_TEXT, dt="fast"), env={})
        assert info.value.field == "integrator.dt" and info.value.line
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config(edit(DEFAULT_CONFIG_TEXT, schema_version=2), env={})
        with pytest.raises(ConfigError, match="x0"):
            parse_config(edit(DEFAULT_CONFIG_TEXT, m=8, x0="1, 2, 3, 4, 5, 6, 7, 8, 9"), env={})

    def test_short_x0_is_padded(self):
        cfg = parse_config(edit(DEFAULT_CONFIG_TEXT, m=8), env={})
        assert list(cfg.x0[4:]) == [0.0] * 4

    def test_env_overrides(self):
        cfg = parse_config(DEFAULT_CONFIG_TEXT, env={"LEVYHJB_SEED": "11", "LEVYHJB_WORKERS": "3"})
        assert cfg.seed == 11 and cfg.output.workers == 3
        assert cfg.with_overrides(seed=12).seed == 12
        with pytest.raises(ConfigError, match="LEVYHJB_SEED"):
            parse_config(DEFAULT_CONFIG_TEXT, env={"LEVYHJB_SEED": "x"})

    def test_fingerprint_ignores_seed_and_workers(self):
        cfg = default_config()
        assert cfg.fingerprint == cfg.with_overrides(seed=1, workers=4, out="elsewhere").fingerprint
        assert cfg.fingerprint != parse_config(edit(DEFAULT_CONFIG_TEXT, R=0.4), env={}).fingerprint

    def test_regime_warning_recorded(self):
        cfg = parse_config(edit(DEFAULT_CONFIG_TEXT, eps=2.0), env={})
        assert len(cfg.warnings) == 1 and "eps" in cfg.warnings[0]

    def test_hjb_chain_reported(self):
        with pytest.raises(ConfigError) as info:
            parse_config(edit(DEFAULT_CONFIG_TEXT, alpha=0.1), env={})
        assert info.value.field == "hjb"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.ini")


class TestCli:
    def test_usage_errors_exit_1(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            cli.main([])
        assert info.value.code == 1

    def test_bad_config_exit_1(self, capsys, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text(DEFAULT_CONFIG_TEXT.replace("m = 4", "m = 4\nmm = 1"))
        code, _, err = run(capsys, "simulate", "--config", p, "--out", tmp_path)
        assert code == 1 and "basis.mm" in err and "line" in err

    def test_report_without_outputs(self, capsys, tmp_path):
        code, _, err = run(capsys, "report", "--out", tmp_path / "empty")
        assert code == 1 and "no outputs" in err

    def test_simulate_byte_identical(self, capsys, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(capsys, "simulate", "--paths", 100, "--seed", 7, "--out", a)[0] == 0
        assert run(capsys, "simulate", "--paths", 100, "--seed", 7, "--out", b, "--workers", 4)[0] == 0
        for name in ("summary.csv", "summary.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        run(capsys, "simulate", "--paths", 100, "--seed", 8, "--out", tmp_path / "c")
        assert (tmp_path / "c" / "summary.csv").read_bytes() != (a / "summary.csv").read_bytes()

    def test_simulate_dump_and_rate_zero(self, capsys, tmp_path):
        p = tmp_path / "quiet.ini"
        p.write_text(edit(DEFAULT_CONFIG_TEXT, jump_rate=0.0))
        code, out, _ = run(capsys, "simulate", "--config", p, "--paths", 20, "--dump", 2, "--out", tmp_path)
        assert code == 0 and "0 jump events" in out
        assert json.loads((tmp_path / "summary.json").read_text())["total_jump_events"] == 0
        assert (tmp_path / "path_00001.csv").exists() and not (tmp_path / "path_00002.csv").exists()

    def test_solve_evaluate_report(self, capsys, tmp_path, small):
        code, out, _ = run(capsys, "solve", "--config", small, "--out", tmp_path)
        assert code == 0 and out.startswith("converged: ")
        rep = json.loads((tmp_path / "solve_report.json").read_text())
        assert rep["converged"] and rep["fingerprint"] == load_config(small).fingerprint
        code, out, _ = run(capsys, "evaluate", "--config", small, "--out", tmp_path)
        assert code == 0 and "feedback - zero" in out
        ev = json.loads((tmp_path / "evaluate.json").read_text())
        assert [r["policy"] for r in ev["rows"]] == ["zero", "random", "feedback"]
        code, out, _ = run(capsys, "report", "--config", small, "--out", tmp_path)
        assert code == 0 and out.rstrip().endswith("sources: evaluate, solve_report")
        assert (tmp_path / "plot.gp").read_text().startswith("# gnuplot")

    def test_r0_converges_in_one(self, capsys, tmp_path):
        p = tmp_path / "r0.ini"
        p.write_text(edit(SMALL, R=0.0))
        code, out, _ = run(capsys, "solve", "--config", p, "--out", tmp_path)
        assert code == 0 and out.splitlines()[0] == "converged: 1"

    def test_value_file_checks(self, capsys, tmp_path, small):
        assert run(capsys, "solve", "--config", small, "--out", tmp_path)[0] == 0
        other = tmp_path / "other.ini"
        other.write_text(edit(SMALL, R=0.4))
        code, _, err = run(capsys, "evaluate", "--config", other, "--out", tmp_path, "--policy", "zero")
        assert code == 1 and "fingerprint" in err
        vf = tmp_path / "value.json"
        data = json.loads(vf.read_text())
        data["coeffs"][2][0] *= 1.0001
        vf.write_text(json.dumps(data))
        code, _, err = run(capsys, "evaluate", "--config", small, "--out", tmp_path, "--policy", "zero")
        assert code == 1 and "checksum" in err.lower()

    def test_rank_deficient_exit_2(self, capsys, tmp_path):
        p = tmp_path / "energy.ini"
        p.write_text(edit(SMALL, features="energy"))
        code, _, err = run(capsys, "solve", "--config", p, "--out", tmp_path)
        assert code == 2 and "energy" in err

    def test_validate_fast(self, capsys, tmp_path):
        code, out, _ = run(capsys, "validate", "--out", tmp_path)
        assert code == 0 and "FAIL" not in out
        rep = json.loads((tmp_path / "validation.json").read_text())
        assert rep["passed"] and len(rep["checks"]) == 12

    def test_full_level_size(self):
        assert len(FULL) >= 12

    def test_tampered_tensor_exit_3(self, capsys, tmp_path):
        snap = export_snapshot(build_trilinear_tensor(build_basis(4)))
        snap["tensor_entries"].append([0, 1, 2, 0.25])
        p = tmp_path / "bad_tensor.json"
        p.write_text(json.dumps(snap))
        code, _, err = run(capsys, "validate", "--tensor", p, "--out", tmp_path)
        assert code == 3 and "FAIL tensor_antisymmetry" in err

    def test_tensor_wrong_m_exit_1(self, capsys, tmp_path):
        p = tmp_path / "t8.json"
        p.write_text(json.dumps(export_snapshot(build_trilinear_tensor(build_basis(8)))))
        assert run(capsys, "validate", "--tensor", p, "--out", tmp_path)[0] == 1
