import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from collabvio import cli, harness
from collabvio.comms import REQUEST_SIZE, LinkModel, ProtocolNode, naive_broadcast_step, serialize
from collabvio.harness import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    NEES_BAND,
    ConfigError,
    RunConfig,
    bandwidth_report,
    compute_ate,
    compute_nees,
    run,
)
from collabvio.sim import Scenario, builtin_scenario, export_truth_csv, generate_truth
from conftest import random_message

GOLDEN = Path(__file__).parent / "golden" / "report_schema.json"


def pinned_scenario(name="overlap_square", duration=2.0):
    d = builtin_scenario(name).to_dict()
    d["duration"] = duration
    return Scenario.from_dict(d)


def schema_of(obj):
    if isinstance(obj, dict):
        return {k: schema_of(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [schema_of(obj[0])] if obj else []
    return type(obj).__name__


@pytest.fixture(scope="module")
def collab_report():
    return run(RunConfig(pinned_scenario(), mode="collaborative"))


# ---------------------------------------------------------------------------
# metrics


def test_ate_identity_and_offset(rng):
    t = np.arange(50) / 30
    p = rng.normal(size=(50, 3))
    assert compute_ate(t, p, t, p)[0] == 0.0
    rmse, err = compute_ate(t, p + [1.0, 0, 0], t, p)
    assert rmse == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(err, 1.0)
    assert compute_ate(t, p + [1.0, 0, 0], t, p, alignment="se3")[0] <= 1e-9


def test_ate_se3_absorbs_rigid_motion(rng):
    t = np.arange(40) / 30
    p = rng.normal(size=(40, 3))
    R = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    assert compute_ate(t, p @ R.T + [2, 0, -1], t, p, alignment="se3")[0] <= 1e-9
    assert compute_ate(t, p @ R.T, t, p)[0] > 0.1


def test_ate_association():
    t = np.arange(10) / 30
    p = np.zeros((10, 3))
    rmse, err = compute_ate(t + 5e-4, p, t, p)
    assert len(err) == 10 and rmse == 0.0
    with pytest.raises(ValueError):
        compute_ate(t + 1.0, p, t, p)
    with pytest.raises(ValueError):
        compute_ate(t, p, t, p, alignment="sim3")


def test_nees_zero_error():
    p = np.ones((5, 3))
    series, avg, inside = compute_nees(p, p, [np.eye(3)] * 5)
    np.testing.assert_array_equal(series, 0.0)
    assert avg == 0.0 and inside == 0.0


def test_nees_sampled_from_covariance(rng):
    A = rng.normal(size=(3, 3))
    P = A @ A.T + 0.1 * np.eye(3)
    e = rng.multivariate_normal(np.zeros(3), P, size=10**4)
    _, avg, inside = compute_nees(e, np.zeros_like(e), [P] * len(e))
    assert abs(avg - 3) < 0.1
    assert inside == pytest.approx(0.95, abs=0.01)
    _, avg_over, _ = compute_nees(e, np.zeros_like(e), [0.01 * P] * len(e))
    assert avg_over == pytest.approx(100 * avg, rel=1e-9)
    assert abs(avg_over - 300) < 10


def test_nees_skips_singular_ticks():
    e = np.ones((3, 3))
    series, avg, _ = compute_nees(e, np.zeros_like(e), [np.eye(3), np.zeros((3, 3)), np.eye(3)])
    assert np.isnan(series[1]) and avg == pytest.approx(3.0)


def test_nees_band():
    assert NEES_BAND == pytest.approx((0.2157952, 9.3484036), abs=1e-6)


# ---------------------------------------------------------------------------
# bandwidth


def _report(bw, scenario="s", seed=0):
    return {"scenario": scenario, "seed": seed, "bandwidth": bw}


def test_bandwidth_formatting():
    proto = _report({"request": {"count": 1, "bytes": 1083}})
    naive = _report({"message": {"count": 1, "bytes": 10000}})
    out = bandwidth_report(proto, naive)
    assert out["reduction_pct"] == "89.17%"
    assert out["protocol_bytes"] == 1083 and out["naive_bytes"] == 10000


def test_bandwidth_mismatch_rejected():
    with pytest.raises(ValueError):
        bandwidth_report(_report({}, "a"), _report({}, "b"))
    with pytest.raises(ValueError):
        bandwidth_report(_report({}, seed=1), _report({}, seed=2))


def test_naive_twenty_seconds_at_thirty_hertz(rng):
    msg = random_message(rng, M=8, N=10, track_lens=(5,) * 40)
    S = len(serialize(msg))
    nodes = [ProtocolNode(a, [0, 1]) for a in (0, 1)]
    naive = LinkModel([0, 1])
    proto = LinkModel([0, 1])
    for k in range(20 * 30):
        for n in nodes:
            for r, m in naive_broadcast_step(n, k / 30, msg):
                naive.send(k / 30, n.agent_id, r, "message", serialize(m))
            proto.send(k / 30, n.agent_id, 1 - n.agent_id, "request", b"\x00" * REQUEST_SIZE)
    assert naive.bytes_by_type()["message"] == {"count": 2 * 600, "bytes": 2 * 600 * S}
    out = bandwidth_report(_report(proto.bytes_by_type()), _report(naive.bytes_by_type()))
    assert out["reduction"] > 0.9


# ---------------------------------------------------------------------------
# runs


def test_config_validation():
    for bad in ({"mode": "swarm"}, {"matching": "psychic"}, {"alignment": "sim3"}):
        with pytest.raises(ConfigError):
            RunConfig(pinned_scenario(), **bad)


def test_request_count_arithmetic(collab_report):
    U, rate, dur = 2, 30, 2.0
    assert collab_report.data["bandwidth"]["request"]["count"] == U * (U - 1) * rate * dur
    assert collab_report.data["bandwidth"]["request"]["bytes"] == U * (U - 1) * rate * dur * REQUEST_SIZE
    assert collab_report.data["frames"] == rate * dur


def test_independent_sends_nothing():
    rep = run(RunConfig(pinned_scenario(duration=0.5), mode="independent"))
    assert rep.data["bandwidth"] == {} and rep.exit_code == EXIT_OK


def test_report_schema_golden(collab_report):
    assert schema_of(json.loads(collab_report.to_json())) == json.loads(GOLDEN.read_text())


def test_run_is_deterministic(collab_report):
    again = run(RunConfig(pinned_scenario(), mode="collaborative"))
    assert again.to_json() == collab_report.to_json()


def test_divergence_exit_code(monkeypatch):
    monkeypatch.setattr(harness, "DIVERGENCE_LIMIT", -1.0)
    rep = run(RunConfig(pinned_scenario(duration=0.5), mode="independent"))
    assert rep.exit_code == EXIT_DIVERGED and rep.data["status"] == "diverged"
    assert rep.data["frames"] == 1


def test_covariance_failure_is_divergence(monkeypatch):
    def boom(self, *a):
        raise harness.CovarianceError("not PSD")

    monkeypatch.setattr(harness.Agent, "vision_step", boom)
    rep = run(RunConfig(pinned_scenario(duration=0.5), mode="independent"))
    assert rep.exit_code == EXIT_DIVERGED and rep.data["frames"] == 0


# ---------------------------------------------------------------------------
# CLI


def test_cli_run_writes_outputs(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(pinned_scenario(duration=1.0).to_dict()))
    out = tmp_path / "out"
    code = cli.main(["run", "--scenario", str(scen), "--mode", "collaborative", "--out", str(out)])
    assert code == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    report = json.loads((out / "report.json").read_text())
    assert printed == report
    with open(out / "bytes.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == report["bandwidth"]["request"]["count"]
    assert {f.name for f in out.iterdir()} >= {"report.json", "timings.json", "bytes.csv", "trajectory_agent0.csv"}

    # the ate subcommand reproduces the report's figure from the CSV outputs
    _, truths = generate_truth(pinned_scenario(duration=1.0))
    export_truth_csv(truths[0], tmp_path / "truth.csv")
    assert cli.main(["ate", "--estimate", str(out / "trajectory_agent0.csv"), "--truth", str(tmp_path / "truth.csv")]) == 0
    ate = json.loads(capsys.readouterr().out)
    assert ate["ate_rmse"] == pytest.approx(report["agents"][0]["ate_rmse"], rel=1e-9)

    bw_path = tmp_path / "naive.json"
    bw_path.write_text(json.dumps({**report, "bandwidth": {"message": {"count": 1, "bytes": 10**9}}}))
    assert cli.main(["bandwidth", "--protocol", str(out / "report.json"), "--naive", str(bw_path)]) == 0
    assert json.loads(capsys.readouterr().out)["reduction"] > 0.99


def test_cli_vocab_train(tmp_path, capsys):
    path = tmp_path / "vocab.bin"
    assert cli.main(["vocab-train", "--scenario", "parallel", "--out", str(path)]) == 0
    assert path.stat().st_size == 8 + 20 + 2048
    assert json.loads(capsys.readouterr().out)["words"] == 64


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "no_such_scenario"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "name": "x", "agents": [], "duration": 1.0}')
    assert cli.main(["run", "--scenario", str(bad)]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--scenario", "parallel", "--mode", "swarm"])
    assert exc.value.code == EXIT_CONFIG


def test_console_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "collabvio", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "vocab-train" in out.stdout
