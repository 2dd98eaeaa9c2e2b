import json
from pathlib import Path

import numpy as np
import pytest

from rome import cli
from rome import defense as dfn
from rome import experiments as ex

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny_synthetic.json"


# ---------------------------------------------------------------- config

def test_shipped_configs_load():
    for path in (ROOT / "configs").glob("*.json"):
        cfg = ex.ExperimentConfig.load(path)
        assert cfg.N == len(cfg.psr_db)


@pytest.mark.parametrize("bad", [
    {"psr_db": [2.0, 2.0, 3.0, 4.0]},
    {"psr_db": [4.0, 3.0]},
    {"psr_db": [1.0, 2.0], "N": 3},
    {"seed": -1},
    {"case": "average"},
    {"eval_psr_db": []},
    {"wiring": {"nonsense": 1}},
    {"unknown_key": 1},
    {"train": {"epochs": 3}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict(bad)


def test_config_round_trip():
    cfg = ex.ExperimentConfig.load(TINY)
    assert ex.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_case_wiring_override():
    cfg = ex.ExperimentConfig.from_dict({"case": "ideal", "wiring": {"levels": "grid"}})
    assert cfg.case_wiring.levels == "grid"
    assert cfg.case_wiring.eval_attack == ex.WIRING["ideal"].eval_attack


# ---------------------------------------------------------------- metric table

def test_metric_table_csv_round_trip(tmp_path):
    t = ex.MetricTable()
    t.add("general", "clean", 13.0, "G0", 0.95, 500)
    t.add("general", 6.0, 13.0, "ROME", 0.5, 500)
    t.write(tmp_path / "m.csv")
    back = ex.MetricTable.read(tmp_path / "m.csv")
    assert back.to_csv() == t.to_csv()
    assert back.get("ROME", 6.0) == 0.5
    assert t.to_csv().splitlines()[0] == ",".join(ex.METRIC_FIELDS)


def test_metric_table_rejects_bad_rows():
    t = ex.MetricTable()
    with pytest.raises(ValueError):
        t.add("general", 1.0, 13.0, "G0", 1.5, 10)
    with pytest.raises(ValueError):
        t.add("general", 1.0, 13.0, "G0", 0.5, 0)


# ---------------------------------------------------------------- eye-diagram property checks

def ideal_eye(levels, eps):
    """Piecewise-linear detector output that hands over between levels at each boundary."""
    b = np.asarray(levels.boundaries)
    N = levels.N
    knots = np.concatenate([[0.0], b])
    pd = np.zeros((len(eps), N))
    for j, e in enumerate(eps):
        if e <= 0:
            pd[j, 0] = 1.0
            continue
        i = min(int(np.searchsorted(knots, e) - 1), N - 1)
        lo = knots[i]
        hi = knots[i + 1] if i + 1 < len(knots) else knots[i] * 2
        mid = (lo + hi) / 2
        if e <= mid and i > 0:
            w = 0.5 + 0.5 * (e - lo) / (mid - lo)
            pd[j, i], pd[j, i - 1] = w, 1 - w
        elif e > mid and i < N - 1:
            w = 0.5 + 0.5 * (hi - e) / (hi - mid)
            pd[j, i], pd[j, i + 1] = w, 1 - w
        else:
            pd[j, i] = 1.0
    return pd


def test_ideal_eye_passes_all_properties():
    levels = dfn.PowerLevelSet((1.0, 2.0, 3.0, 4.0))
    eps = np.linspace(0, 5, 101)
    report = ex.check_eye_properties(ex.EyeTable(eps, ideal_eye(levels, eps), 100), levels)
    for key in ("row_sums", "concavity", "dominance", "boundaries"):
        assert report[key]["pass"], (key, report[key])


def test_uniform_eye_fails_dominance():
    levels = dfn.PowerLevelSet((1.0, 2.0, 3.0, 4.0))
    eps = np.linspace(0, 5, 101)
    report = ex.check_eye_properties(ex.EyeTable(eps, np.full((101, 4), 0.25), 100), levels)
    assert report["row_sums"]["pass"]
    assert not report["dominance"]["pass"]


def test_coarse_eye_grid_rejected():
    levels = dfn.PowerLevelSet((1.0, 2.0, 3.0, 4.0))
    eps = np.linspace(0, 5, 6)
    with pytest.raises(ValueError):
        ex.check_eye_properties(ex.EyeTable(eps, np.full((6, 4), 0.25), 100), levels)


def test_empty_eye_grid_rejected():
    with pytest.raises(ValueError):
        ex.eye_diagram(None, None, [], np.zeros((2, 4)), np.zeros(2, int), None, None)


# ---------------------------------------------------------------- attack spec

def test_attack_spec_parse(tmp_path):
    s = ex.AttackSpec.parse('{"type": "pgd", "psr_db": 6, "steps": 3}')
    assert s.psr_db == [6.0] and s.steps == 3
    f = tmp_path / "a.json"
    f.write_text('{"type": "fgsm"}')
    assert ex.AttackSpec.parse(str(f)).type == "fgsm"
    with pytest.raises(ex.ConfigError):
        ex.AttackSpec.parse('{"type": "cw"}')
    with pytest.raises(ex.ConfigError):
        ex.AttackSpec.parse('{"type": "pgd", "budget": 1}')


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert cli.main(["train", "--config", str(TINY), "--out", str(out)]) == 0
    return out


def test_cli_train_writes_checkpoints(trained_dir):
    assert (trained_dir / "checkpoints" / "bundle" / "manifest.json").exists()
    assert (trained_dir / "checkpoints" / "apg.npz").exists()
    echo = json.loads((trained_dir / "config.json").read_text())
    assert "resolved" in echo


def test_cli_attack_eval(trained_dir, capsys):
    spec = '{"type": "gaussian", "psr_db": [6.0, 10.0]}'
    assert cli.main(["attack-eval", "--config", str(TINY), "--out", str(trained_dir),
                     "--attack", spec]) == 0
    table = ex.MetricTable.read(trained_dir / "metrics.csv")
    assert table.psr_points() == ["clean", 6.0, 10.0]
    assert table.models() == ["G0", "G1", "G2", "G3", "ROME"]


def test_cli_verify_and_eye(trained_dir):
    assert cli.main(["verify", "--config", str(TINY), "--out", str(trained_dir)]) == 0
    lines = (trained_dir / "verify.csv").read_text().splitlines()
    assert lines[0].startswith("model,rho,p,B_0")
    assert any(line.startswith("ROME,") for line in lines[1:])
    assert cli.main(["eye", "--config", str(TINY), "--out", str(trained_dir)]) == 0
    assert (trained_dir / "eye.csv").exists()


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"psr_db": [3, 1]}')
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_cli_requires_checkpoints(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["verify", "--config", str(TINY), "--out", str(tmp_path)])
