import csv
import json

import pytest

from clonesim.cli import main
from clonesim.detector import VERDICT_COLUMNS
from clonesim.eviction import MonitoringSet
from clonesim.experiment import METRIC_COLUMNS


def test_build_eviction(tmp_path, capsys):
    out = tmp_path / "ms.json"
    assert main(["build-eviction", "--channel", "7", "--out", str(out)]) == 0
    assert "16 distinct" in capsys.readouterr().out
    ms = MonitoringSet.load(out)
    assert ms.channel == 7 and len(ms.sets) == 16


def test_verify_linearity_exit_codes(capsys):
    assert main(["verify-linearity"]) == 0
    frames = ",".join(str(i) for i in [1, 0] + list(range(2, 32)))
    assert main(["verify-linearity", "--frames", frames]) == 1
    assert "counterexample" in capsys.readouterr().out


def test_search_nonlinear(tmp_path):
    out = tmp_path / "sols.json"
    assert main(["search-nonlinear", "--limit", "3", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["count"] == 3 and all(len(m) == 32 for m in data["mappings"])


def test_search_evasion(tmp_path):
    out = tmp_path / "ev.json"
    assert main(["search-nonlinear", "--evasion", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["evaded"] is True


def test_detect_writes_verdicts(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"detector": {"m": 12, "w": 192}, "seeds": [0, 1]}))
    out = tmp_path / "v.csv"
    assert main(["detect", "--config", str(cfg), "--clones", "1", "--passes", "3",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert tuple(rows[0]) == VERDICT_COLUMNS
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert any(r["verdict"] == "CloneDetected" for r in rows)


def test_detect_rejects_unknown_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    with pytest.raises(SystemExit):
        main(["detect", "--config", str(cfg)])


@pytest.mark.parametrize("scenario", ["bisgx", "fim", "forkvs", "bug"])
def test_attack(scenario, tmp_path):
    out = tmp_path / "a.json"
    assert main(["attack", scenario, "--with-detector", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["forked"] is False


def test_sweep(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"w": [64], "trials": 1, "observations": 512}))
    assert main(["sweep", "--spec", str(spec), "--out-dir", str(tmp_path / "o"),
                 "--verdicts"]) == 0
    with open(tmp_path / "o" / "metrics.csv") as fh:
        assert tuple(next(csv.reader(fh))) == METRIC_COLUMNS
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert len(man["outputs"]) == 2


def test_estimate_clones(capsys):
    assert main(["estimate-clones", "--others", "2"]) == 0
    assert capsys.readouterr().out.strip().endswith("other instances: 2")
