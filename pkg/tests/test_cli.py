import json

import numpy as np
import pytest

from gatefam import artifacts as art
from gatefam.cli import EXIT_CONVERGENCE, EXIT_MISSING, EXIT_OK, EXIT_VALIDATION, main
from gatefam.config import ConfigError, config_hash, stage_seed, validate
from gatefam.network import InterpolatorNetwork
from gatefam.quantum import single_qubit_system
from gatefam.report import decomposition_schedule, speedup
from gatefam.trajectory import AugmentedTrajectory

SMALL = {
    "family": "RZ",
    "T": 20,
    "dt": 0.4,
    "grid": [3],
    "network": {"hidden": [16, 16], "readout_gain": 0.5},
    "pretrain": {"max_iters": 300},
    "training": {"epoch_samples": 20, "batch_size": 10, "max_epochs": 1, "learning_rate": 1e-4},
    "evaluation": {"n_random": 20, "grid": 8},
    "calibration": {"n_points": 2, "max_iters": 50},
    "mintime": {"targets": ["RX90"], "T": 15, "dt_init": 0.3, "fidelity": 0.999},
    "report": {"direct_duration": 3.0},
}


def write_cfg(tmp_path, **over):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(over)
    cfg["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


# -- config ---------------------------------------------------------------------


@pytest.mark.parametrize("raw,where", [
    ({"family": "RZ", "tyme": 3}, "<root>"),
    ({"family": "RZ", "solver": {"reg_wieght": 1.0}}, "solver"),
    ({"family": "RZ", "training": {"batch_size": 0}}, "training/batch_size"),
    ({"family": "RZ", "grid": [1]}, "grid/0"),
    ({"family": "FOO"}, "family"),
    ({"family": "U2", "solver": {"init": "random"}}, "solver/init"),
])
def test_schema_rejection_names_path(raw, where):
    with pytest.raises(ConfigError) as exc:
        validate(raw)
    assert str(exc.value).startswith(where + ":")


def test_semantic_validation():
    with pytest.raises(ConfigError, match="system/qubits"):
        validate({"family": "CNOT", "system": {"qubits": 1}})
    with pytest.raises(ConfigError, match="grid"):
        validate({"family": "U2", "grid": [11]})
    with pytest.raises(ConfigError, match="divisible"):
        validate({"family": "RZ", "training": {"epoch_samples": 55}})
    cfg = validate({"family": "U2"})
    assert cfg["grid"] == [11, 11] and cfg["system"]["qubits"] == 1 and cfg["T"] == 51


def test_config_hash_and_seeds():
    a = validate({"family": "RZ"})
    b = validate({"family": "RZ", "training": {"max_epochs": 3}})
    assert config_hash(a) != config_hash(b)
    assert config_hash(a, ["solver", "T"]) == config_hash(b, ["solver", "T"])
    assert stage_seed(0, "train") == stage_seed(0, "train")
    assert len({stage_seed(0, s) for s in ("train", "pretrain", "transfer")}) == 3
    assert stage_seed(0, "train") != stage_seed(1, "train")


# -- artifacts -------------------------------------------------------------------


def test_pulse_csv_round_trip(tmp_path, rng):
    s = single_qubit_system()
    tr = AugmentedTrajectory.from_accel(s, rng.uniform(-1, 1, (2, 12)), rng.uniform(0.1, 0.3, 12))
    path = tmp_path / "p.csv"
    art.atomic_write(path, art.pulse_csv(tr, s.channel_names))
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["knot", "dt", "X_a", "X_da", "X_dda", "Y_a", "Y_da", "Y_dda"]
    dt, ctrl, vel, accel = art.read_pulse_csv(path)
    assert np.array_equal(dt, tr.dt) and np.array_equal(ctrl, tr.ctrl)
    assert np.array_equal(vel, tr.vel) and np.array_equal(accel, tr.accel)


def test_json_round_trip_and_errors(tmp_path):
    prov = art.provenance("abc", 7, "stage")
    payload = {"x": np.array([[1.5, 2.0]]), "n": np.int64(3), "flag": True, "v": 0.1 + 2e-17}
    path = tmp_path / "a.json"
    art.write_json(path, "report", payload, prov)
    doc = art.read_json(path, "report")
    assert doc["payload"] == {"x": [[1.5, 2.0]], "n": 3, "flag": True, "v": 0.1 + 2e-17}
    assert doc["schema_version"] == art.SCHEMA_VERSION and doc["provenance"]["seed"] == 7
    with pytest.raises(art.ArtifactError):
        art.read_json(path, "weights")
    with pytest.raises(art.ArtifactError):
        art.check_provenance(doc, "def", path)
    with pytest.raises(FileNotFoundError):
        art.read_json(tmp_path / "missing.json")


def test_heatmap_round_trip(tmp_path, rng):
    params = rng.uniform(0, 6, (10, 2))
    inf = rng.uniform(0, 1e-3, 10)
    path = tmp_path / "h.csv"
    art.atomic_write(path, art.heatmap_csv(params, inf))
    p2, i2 = art.read_heatmap_csv(path)
    assert np.array_equal(p2, params) and np.array_equal(i2, inf)


def test_weights_round_trip_bit_exact(tmp_path):
    net = InterpolatorNetwork.for_family(__import__("gatefam").gate_family("U2"), single_qubit_system(), 10,
                                         hidden=(8,), seed=4)
    path = tmp_path / "w.json"
    art.write_json(path, "weights", net.to_dict())
    back = InterpolatorNetwork.from_dict(art.read_json(path, "weights")["payload"])
    assert all(np.array_equal(a, b) for a, b in zip(net.parameters(), back.parameters()))


# -- report ----------------------------------------------------------------------


def test_report_examples():
    rep = speedup(5.95, 5.0, 10.0)
    assert np.isclose(rep["schedule_min"], 27.85) and np.isclose(rep["schedule_max"], 32.85)
    assert np.isclose(rep["ratio_min"], 2.785) and np.isclose(rep["ratio_max"], 3.285)
    lo, hi = decomposition_schedule(5.95, 5.0)
    assert np.isclose(speedup(5.95, 5.0, lo)["ratio_min"], 1.0)
    scaled = speedup(5.95 * 3.7, 5.0 * 3.7, 10.0 * 3.7)
    assert np.isclose(scaled["ratio_min"], rep["ratio_min"]) and np.isclose(scaled["ratio_max"], rep["ratio_max"])
    with pytest.raises(ValueError):
        speedup(5.95, 5.0, 0.0)


# -- command line ----------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"family": "RZ", "bogus": 1}))
    assert main(["train", "--config", str(bad)]) == EXIT_VALIDATION
    assert "bogus" in capsys.readouterr().err
    cfg = write_cfg(tmp_path)
    assert main(["evaluate", "--config", cfg]) == EXIT_MISSING
    assert main(["report", "--config", cfg]) == EXIT_MISSING
    assert main(["pretrain", "--config", cfg]) == EXIT_MISSING
    cfg = write_cfg(tmp_path, solver={"max_outer": 1, "max_inner": 1, "kkt_tol": 1e-14})
    assert main(["synthesize", "--config", cfg]) == EXIT_CONVERGENCE
    diag = art.read_json(tmp_path / "run" / "diagnostics.json", "diagnostics")
    assert diag["payload"]["status"] == "nonconverged"


def test_cli_pipeline(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "run"
    assert main(["synthesize", "--config", cfg]) == EXIT_OK
    idx = art.read_json(out / "pulses" / "index.json", "pulses")["payload"]
    assert len(idx["files"]) == 3 and min(idx["fidelities"]) >= 0.9999
    assert main(["pretrain", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg, "--weights", str(out / "pretrained.json")]) == EXIT_OK
    hist = art.read_json(out / "history.json", "history")["payload"]
    assert hist["initialization"] == "pretrained" and len(hist["test_fidelity"]) == 1
    assert main(["evaluate", "--config", cfg]) == EXIT_OK
    ev = art.read_json(out / "evaluation.json", "heatmap")["payload"]
    params, inf = art.read_heatmap_csv(out / "heatmap.csv")
    assert len(inf) == 20 and np.isclose(ev["mean_infidelity"], inf.mean())
    # evaluating twice from the same seed reproduces the summary exactly
    assert main(["evaluate", "--config", cfg]) == EXIT_OK
    assert art.read_json(out / "evaluation.json", "heatmap")["payload"] == ev
    assert main(["calibrate", "--config", cfg]) == EXIT_OK
    cal = art.read_json(out / "calibration.json", "calibration")["payload"]
    assert abs(cal["exact_correction_infidelity"] - cal["undistorted_infidelity"]) < 1e-10
    # weights from another architecture are rejected
    (tmp_path / "x").mkdir()
    other = write_cfg(tmp_path / "x", network={"hidden": [8], "readout_gain": 0.5})
    assert main(["evaluate", "--config", other, "--weights", str(out / "trained.json")]) == EXIT_MISSING


def test_cli_train_zero_epochs_passthrough(tmp_path):
    cfg = write_cfg(tmp_path, training={"max_epochs": 0, "epoch_samples": 20, "batch_size": 10})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg]) == EXIT_OK
    hist = art.read_json(out / "history.json", "history")["payload"]
    assert hist["test_fidelity"] == [] and hist["epochs_to_threshold"] is None
    assert main(["train", "--config", cfg, "--weights", str(out / "trained.json")]) == EXIT_OK
    a = art.read_json(out / "trained.json", "weights")["payload"]
    net = InterpolatorNetwork.from_dict(a)
    assert net.frozen_hash()


def test_cli_mintime_and_report(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "run"
    code = main(["mintime", "--config", cfg])
    assert code in (EXIT_OK, EXIT_CONVERGENCE)
    m = art.read_json(out / "mintime_RX90.json", "mintime")["payload"]
    assert m["fidelity"] >= 0.999 - 1e-6 and m["duration"] < 15 * 0.3
    # the report needs a CNOT artifact too
    assert main(["report", "--config", cfg]) == EXIT_MISSING
    art.write_json(out / "mintime_CNOT.json", "mintime", {"duration": 5.95},
                   art.read_json(out / "mintime_RX90.json")["provenance"])
    assert main(["report", "--config", cfg]) == EXIT_OK
    rep = art.read_json(out / "report.json", "report")["payload"]
    assert np.isclose(rep["schedule_min"], 3 * 5.95 + 2 * m["duration"])
    assert (out / "report.txt").read_text().count("\n") == 5
