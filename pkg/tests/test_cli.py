import json
from pathlib import Path

import numpy as np
import pytest

from spillnet.cli import main
from spillnet.config import load_config
from spillnet.core import InputError

TINY_CONFIG = """
[dgp]
n_units = 80
grid = [32, 32, 8]
config = "NoSpillovers"
seed = 77

[mc]
configs = ["NoSpillovers"]
estimators = ["twfe", "did"]
replications = 2
base_seed = 77
n_workers = 1

[fk]
config = "NoSpillovers"
posterior = "point"
distances = [-20.0, 10.0, 60.0]
t = 4.0
dt = 0.1
paths = 8
draws = 4
seed = 77
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


def _tree_bytes(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_meta.json":
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_config_defaults_and_unknown_keys(tmp_path):
    cfg = load_config(Path("configs/paper.toml"))
    assert cfg.plan.replications == 1000
    assert cfg.settings.n_units == 500
    bad = tmp_path / "bad.toml"
    bad.write_text("[dgp]\nn_units = 10\nwhat = 1\n")
    with pytest.raises(InputError, match="unknown keys"):
        load_config(bad)
    worse = tmp_path / "worse.toml"
    worse.write_text("[nope]\nx = 1\n")
    with pytest.raises(InputError, match="unknown config sections"):
        load_config(worse)


def test_malformed_config_exits_2_without_outputs(tmp_path):
    bad = tmp_path / "broken.toml"
    bad.write_text("[dgp\nn_units = ")
    out = tmp_path / "out"
    rc = main(["simulate", "--config", str(bad), "--out", str(out)])
    assert rc == 2
    assert not out.exists()


def test_simulate_writes_dataset(tiny_config, tmp_path):
    out = tmp_path / "data"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(out)]) == 0
    lines = (out / "units.csv").read_text().strip().splitlines()
    assert len(lines) == 81  # header + one row per unit
    assert (out / "network.csv").exists()
    assert (out / "truth.csv").exists()
    assert (out / "meta.json").exists()


def test_simulate_idempotent_byte_for_byte(tiny_config, tmp_path):
    out1 = tmp_path / "d1"
    out2 = tmp_path / "d2"
    main(["simulate", "--config", str(tiny_config), "--out", str(out1)])
    main(["simulate", "--config", str(tiny_config), "--out", str(out2)])
    assert _tree_bytes(out1) == _tree_bytes(out2)


def test_estimate_reports(tiny_config, tmp_path):
    data = tmp_path / "data"
    main(["simulate", "--config", str(tiny_config), "--out", str(data)])
    out = tmp_path / "reports.json"
    rc = main(["estimate", "--data", str(data), "--estimators", "twfe,did", "--out", str(out)])
    assert rc == 0
    reports = json.loads(out.read_text())
    assert [r["estimator"] for r in reports] == ["twfe", "did"]
    assert all("direct" in r["estimates"] for r in reports)


def test_estimate_unknown_estimator_exits_2(tiny_config, tmp_path, capsys):
    data = tmp_path / "data"
    main(["simulate", "--config", str(tiny_config), "--out", str(data)])
    rc = main(["estimate", "--data", str(data), "--estimators", "twfe,bogus"])
    assert rc == 2
    assert "twfe" in capsys.readouterr().err  # lists the valid names


def test_estimate_missing_network_exits_2(tiny_config, tmp_path, capsys):
    data = tmp_path / "data"
    main(["simulate", "--config", str(tiny_config), "--out", str(data)])
    (data / "lagged_network.csv").unlink()
    rc = main(["estimate", "--data", str(data), "--estimators", "network_iv"])
    assert rc == 2
    assert "lagged" in capsys.readouterr().err


def test_estimate_numerical_failure_exits_3(tiny_config, tmp_path):
    data = tmp_path / "data"
    main(["simulate", "--config", str(tiny_config), "--out", str(data)])
    # zero out the source column: the dose-response estimator cannot run
    units = (data / "units.csv").read_text().splitlines()
    header = units[0].split(",")
    idx = header.index("source")
    rows = [units[0]]
    for line in units[1:]:
        parts = line.split(",")
        parts[idx] = "0"
        rows.append(",".join(parts))
    (data / "units.csv").write_text("\n".join(rows) + "\n")
    rc = main(["estimate", "--data", str(data), "--estimators", "gps"])
    assert rc == 3


def test_mc_outputs_and_idempotence(tiny_config, tmp_path):
    out1 = tmp_path / "mc1"
    out2 = tmp_path / "mc2"
    assert main(["mc", "--config", str(tiny_config), "--out", str(out1)]) == 0
    assert main(["mc", "--config", str(tiny_config), "--out", str(out2)]) == 0
    for name in ("mc_records.csv", "mc_summary.csv", "mc_summary.png"):
        assert (out1 / name).exists()
    assert not (out1 / "mc_records.partial.csv").exists()
    assert _tree_bytes(out1) == _tree_bytes(out2)
    summary = (out1 / "mc_summary.csv").read_text().strip().splitlines()
    assert len(summary) == 1 + 1 * 2 * 2  # header + configs x estimators x targets


def test_mc_resume_matches_fresh_run(tiny_config, tmp_path):
    import shutil

    full = tmp_path / "full"
    main(["mc", "--config", str(tiny_config), "--out", str(full)])
    # emulate an interrupted run: partial log carries the first replication
    resumed = tmp_path / "resumed"
    resumed.mkdir()
    records = (full / "mc_records.csv").read_text().splitlines()
    keep = [records[0]] + [r for r in records[1:] if r.split(",")[1] == "0"]
    (resumed / "mc_records.partial.csv").write_text("\n".join(keep) + "\n")
    main(["mc", "--config", str(tiny_config), "--out", str(resumed)])
    assert (resumed / "mc_records.csv").read_bytes() == (full / "mc_records.csv").read_bytes()


def test_fk_outputs_profile_and_decomposition(tiny_config, tmp_path):
    out = tmp_path / "fk"
    assert main(["fk", "--config", str(tiny_config), "--out", str(out)]) == 0
    profile = (out / "profile.csv").read_text().strip().splitlines()
    assert profile[0] == "distance,mean,lo68,hi68,lo95,hi95"
    rows = {float(r.split(",")[0]): float(r.split(",")[1]) for r in profile[1:]}
    # no-spillover world: flat on the treated side, zero beyond the border
    # (treated level at t=4 is 0.46 * (1 - e^-1) ~ 0.29)
    assert rows[-20.0] > 0.25
    assert abs(rows[10.0]) < 1e-9
    assert abs(rows[60.0]) < 1e-9
    assert (out / "uncertainty.csv").exists()
    assert (out / "profile.png").exists()
    assert (out / "uncertainty.png").exists()


def test_mc_event_study_emission(tmp_path):
    cfg = tmp_path / "es.toml"
    cfg.write_text(
        TINY_CONFIG
        + "\nevent_study = true\nevent_study_replications = 2\nevent_study_kappa = 0.3\n"
    )
    # the extra keys belong in [mc]; splice them there instead
    text = cfg.read_text().replace(
        "[mc]",
        "[mc]\nevent_study = true\nevent_study_replications = 2\nevent_study_kappa = 0.3",
        1,
    ).rsplit("\nevent_study = true\nevent_study_replications = 2\nevent_study_kappa = 0.3\n", 1)[0]
    cfg.write_text(text)
    out = tmp_path / "mc"
    assert main(["mc", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "event_study.csv").read_text().strip().splitlines()
    assert lines[0].startswith("panel,horizon,true_effect")
    assert {row.split(",")[0] for row in lines[1:]} == {"A", "B"}
    assert (out / "event_study_panel_a.png").exists()
    assert (out / "event_study_panel_b.png").exists()


def test_seed_override_changes_outputs(tiny_config, tmp_path):
    d1 = tmp_path / "s1"
    d2 = tmp_path / "s2"
    main(["simulate", "--config", str(tiny_config), "--out", str(d1), "--seed", "1"])
    main(["simulate", "--config", str(tiny_config), "--out", str(d2), "--seed", "2"])
    assert (d1 / "units.csv").read_bytes() != (d2 / "units.csv").read_bytes()
