import csv
import json

import numpy as np
import pytest

from mesotraffic.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, speed_map_pgm
from mesotraffic.harness.experiments import format_scenario, signalized
from mesotraffic.model import LatticeConfig


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "scenario.txt"
    path.write_text(format_scenario(signalized(length_m=300, red=30, green=30, cycles=2)))
    return path


def simulate(tmp_path, scenario, name="sim", seed=3):
    out = tmp_path / name
    assert main(["simulate", "--config", str(scenario), "--seed", str(seed), "--out", str(out)]) == EXIT_OK
    return out


def test_simulate_outputs_are_deterministic(tmp_path, scenario):
    a = simulate(tmp_path, scenario, "a")
    b = simulate(tmp_path, scenario, "b")
    for name in ("trajectories.csv", "speedmap.csv", "speedmap.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seeds"] == {"simulation": 3}
    assert manifest["command"] == "simulate"


def test_zero_step_run_writes_header_only(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("K = 0\n")
    out = simulate(tmp_path, path)
    assert (out / "trajectories.csv").read_text() == "k,veh_id,cell,speed_cells\n"


def test_estimate_with_full_penetration_is_exact(tmp_path, scenario):
    sim = simulate(tmp_path, scenario)
    out = tmp_path / "est"
    code = main(["estimate", "--truth", str(sim / "trajectories.csv"), "--config", str(scenario),
                 "--penetration", "1.0", "--out", str(out), "--marginals"])
    assert code == EXIT_OK
    with open(out / "metrics.csv") as fh:
        row = list(csv.DictReader(fh))[0]
    assert {k: float(v) for k, v in row.items()} == {
        "eps_sigma_rel": 0.0, "rmse_kmh": 0.0, "eps_rho": 0.0, "mape_travel_time": 0.0}
    assert (out / "estimate_trajectories.csv").read_bytes() == (sim / "trajectories.csv").read_bytes()
    assert (out / "marginals.csv").exists() and (out / "observations.csv").exists()


def test_evaluate_and_fd(tmp_path, scenario):
    sim = simulate(tmp_path, scenario)
    traj = str(sim / "trajectories.csv")
    assert main(["evaluate", "--truth", traj, "--estimate", traj, "--config", str(scenario),
                 "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert "eps_sigma_rel = 0.0" in (tmp_path / "ev" / "metrics.txt").read_text()
    assert main(["fd", "--trajectories", traj, "--config", str(scenario), "--box-cells", "20",
                 "--box-steps", "20", "--out", str(tmp_path / "fd")]) == EXIT_OK
    lines = (tmp_path / "fd" / "fd.csv").read_text().splitlines()
    assert lines[0] == "first_cell,first_step,density_veh_km,flow_veh_h,speed_kmh" and len(lines) > 1


def test_sweep_outputs(tmp_path, scenario):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(scenario), "--rates", "0.2,0.5", "--reps", "2", "--out", str(out)])
    assert code == EXIT_OK
    with open(out / "distributions.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert (out / "summary.csv").read_text().startswith("rate,eps_sigma_rel_mean")
    assert (out / "mape_histogram.csv").exists()


def test_exit_codes(tmp_path, scenario):
    assert main(["estimate", "--truth", str(tmp_path / "missing.csv"), "--penetration", "0.1",
                 "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["simulate", "--config", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    bad = tmp_path / "bad.txt"
    bad.write_text("theta0 = -3\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "z")]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["estimate", "--truth", "t.csv", "--penetration", "1.5", "--out", str(tmp_path)])


def test_pgm_layout():
    grid = np.array([[-1, 0], [1, 4]])
    data = speed_map_pgm(grid, LatticeConfig(L=2))
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [255, 0, 96, 176]
