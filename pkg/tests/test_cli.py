import csv
import json
from pathlib import Path

import pytest

from ew2d import desk
from ew2d.cli import ExperimentConfig, build_parser, main
from ew2d.errors import ConfigurationError

from acceptance_cache import CACHE_DIR

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
QUICK = str(CONFIGS / "quick.toml")


def test_config_files_parse():
    lin = ExperimentConfig.from_toml(CONFIGS / "desk_linear.toml")
    assert lin == ExperimentConfig(out="out/linear", tolerances={"route_agreement": 5e-3})
    sat = ExperimentConfig.from_toml(CONFIGS / "desk_saturating.toml")
    assert sat.beta == 0.5 and sat.sigma == {"label": "saturating"}
    assert sat.solver_config(0.1).fingerprint() == desk.desk_config("saturating", 0.1).fingerprint()


def test_flags_override_file():
    args = build_parser().parse_args(["simulate", "--config", QUICK, "--beta", "0.3",
                                      "--eps", "0.2,0.4", "--seed", "9", "--replicas", "150"])
    cfg = ExperimentConfig.from_toml(args.config).override(args)
    assert (cfg.beta, cfg.epsilons, cfg.seed, cfg.replicas) == (0.3, [0.2, 0.4], 9, 150)


@pytest.mark.parametrize("patch", [
    {"n": 100}, {"beta": 0.0}, {"replicas": 50}, {"times": [0.1]},
    {"times": [0.25, 0.125]}, {"sigma": {"label": "cubic"}}, {"jobs": 0},
    {"eps": [0.1]},   # under-resolved on the quick grid
])
def test_validation_rejects(patch):
    base = {"beta": 0.5, "sigma": "saturating", "eps": [0.2], "T": 0.25,
            "times": [0.125, 0.25], "replicas": 100,
            "grid": {"L": 3.2, "n": 64, "dt": 1 / 256}}
    grid_keys = {"n"}
    for k, v in patch.items():
        if k in grid_keys:
            base["grid"][k] = v
        else:
            base[k] = v
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(base).validate()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"betta": 1.0})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"grid": {"spacing": 0.1}})


def test_supercritical_warning():
    w = ExperimentConfig(beta=2.6).validate(simulate=False)
    assert any("not subcritical" in x for x in w)


# --- limit -----------------------------------------------------------------------

def test_limit_linear(tmp_path, capsys):
    assert main(["limit", "--beta", "1", "--sigma", "linear", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "limit.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["route"] for r in rows] == ["pde", "fbsde"]
    for r in rows:
        assert float(r["nu_eff"]) == pytest.approx(1.0905, abs=5e-4)
    assert "disagreement" in capsys.readouterr().out


def test_limit_beta_zero_is_config_error(tmp_path):
    assert main(["limit", "--beta", "0", "--out", str(tmp_path)]) == 2


def test_limit_cfl_override(tmp_path, capsys):
    assert main(["limit", "--beta", "1", "--dq", "0.1", "--out", str(tmp_path)]) == 2
    assert "CFL bound" in capsys.readouterr().err


def test_limit_route_disagreement_exit(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('beta = 0.5\nsigma = "saturating"\n[tolerances]\nroute_agreement = 0.0\n')
    assert main(["limit", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_missing_config_file(tmp_path):
    assert main(["limit", "--config", str(tmp_path / "nope.toml")]) == 2


# --- simulate / report -----------------------------------------------------------

@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    assert main(["simulate", "--config", QUICK, "--out", str(out), "--jobs", "1"]) == 0
    return out


def test_simulate_writes_report_and_samples(quick_run):
    assert sorted(p.name for p in quick_run.iterdir()) == ["report_eps0.2.json",
                                                           "samples_eps0.2.csv"]
    rep = json.loads((quick_run / "report_eps0.2.json").read_text())
    assert rep["schema"] == "ew2d-report/1" and len(rep["X"]) == 100


def test_simulate_is_reproducible(quick_run, tmp_path):
    from ew2d.stats import EnsembleReport
    assert main(["simulate", "--config", QUICK, "--out", str(tmp_path), "--jobs", "2"]) == 0
    a = EnsembleReport.load(quick_run / "report_eps0.2.json")
    b = EnsembleReport.load(tmp_path / "report_eps0.2.json")
    assert a.numeric_payload() == b.numeric_payload()
    assert ((quick_run / "samples_eps0.2.csv").read_bytes()
            == (tmp_path / "samples_eps0.2.csv").read_bytes())


def test_simulate_bad_grid(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(Path(QUICK).read_text().replace("n = 64", "n = 96"))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_simulate_blow_up_exit(tmp_path):
    import numpy as np
    cfg = tmp_path / "c.toml"
    cfg.write_text(Path(QUICK).read_text().replace("beta = 0.5", "beta = 1e300")
                   .replace('"saturating"', '"linear"'))
    args = ["simulate", "--config", str(cfg), "--out", str(tmp_path)]
    # the limit solve for such a beta fails first: a numerical failure either way
    with np.errstate(all="ignore"):
        assert main(args) == 3


def test_report_single(quick_run, tmp_path, capsys):
    assert main(["report", str(quick_run / "report_eps0.2.json"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["eps", "empirical_var", "sigma_gT", "ratio", "ks_p_value"]
    assert len(rows) == 2 and float(rows[1][0]) == 0.2
    dat = (tmp_path / "summary.dat").read_text().splitlines()
    assert dat[0].startswith("#") and len(dat[1].split()) == 5


def test_report_corrupted(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["report", str(bad), "--out", str(tmp_path)]) == 2


def test_report_schema_mismatch(quick_run, tmp_path):
    d = json.loads((quick_run / "report_eps0.2.json").read_text())
    d["schema"] = "ew2d-report/0"
    p = tmp_path / "old.json"
    p.write_text(json.dumps(d))
    assert main(["report", str(p), "--out", str(tmp_path)]) == 2


@pytest.mark.acceptance
def test_default_desk_simulate(tmp_path):
    """Default desk-scale config: three reports, exit 0, ratio trending to 1.
    Replica chunks are shared with the acceptance ensembles."""
    assert main(["simulate", "--out", str(tmp_path / "sim"), "--cache", str(CACHE_DIR)]) == 0
    reports = sorted((tmp_path / "sim").glob("report_eps*.json"))
    assert len(reports) == 3
    assert main(["report", *map(str, reports), "--out", str(tmp_path / "tab")]) == 0
    with open(tmp_path / "tab" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["eps"]) for r in rows] == [0.4, 0.2, 0.1]
    dev = [abs(float(r["ratio"]) - 1) for r in rows]
    assert dev[-1] < dev[0]


@pytest.mark.slow
def test_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 9 and "[FAIL]" not in out
