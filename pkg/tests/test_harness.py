import json
import math
import os

import numpy as np
import pytest

from kac_contact.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, EXIT_VERDICT, main
from kac_contact.config import DEFAULTS, load_config, make_profile, validate_config
from kac_contact.errors import ConfigurationError, ValidationError
from kac_contact.lattice import build_lattice
from kac_contact.micro import read_snapshot
from kac_contact.report import content_hash, emit_report, load_report
from kac_contact.studies import (
    initial_blocks,
    jackknife_cov,
    run_correlation_study,
    run_gamma_ladder,
    run_xi_ladder,
    simulate_blocks,
    single_run,
    xi_system,
)


def _cfg(config_dir, name, **over):
    return load_config(os.path.join(config_dir, f"{name}.json")).with_overrides(**over)


# ---------------------------------------------------------------------------
# configuration


def test_minimal_config_gets_defaults():
    cfg = validate_config({})
    assert cfg.raw == validate_config(DEFAULTS).raw
    assert cfg.gamma == 2.0 ** -8 and cfg.delta == 2.0 ** -6 and cfg.xi == 0.25
    assert cfg.times()[-1] == 1.0 and len(cfg.times()) == 65
    merged = validate_config({"cluster": {"a": 0.5}})
    assert merged.cluster["a"] == 0.5 and merged.cluster["epsilon"] == 0.1


@pytest.mark.parametrize("raw, field", [
    ({"n1": "0.3"}, "n1"),
    ({"n1": 0.3}, "n1"),
    ({"n2": True}, "n2"),
    ({"gamma": 0.01}, "gamma"),
    ({"d": 4}, "d"),
    ({"model": "voter"}, "model"),
    ({"lambda_star": -1.0}, "lambda_star"),
    ({"kernel": {"kind": "gaussian", "R": 0.2}}, "kernel.kind"),
    ({"kernel": {"kind": "uniform"}}, "kernel.R"),
    ({"rho0": {"profile": "bump", "base": 0.0}}, "rho0"),
    ({"rho0": {"profile": "constant", "levels": [0.5, 0.4]}}, "rho0.levels"),
    ({"grid_n": 48}, "grid_n"),
    ({"output_times": [0.5, 0.2]}, "output_times"),
    ({"output_times": [2.0]}, "output_times"),
    ({"model": "recovery", "k": 3, "recovery_rates": [0.1]}, "recovery_rates"),
    ({"model": "ei"}, "ei.lambda2"),
    ({"model": "general", "general": {"states": 1}}, "general.states"),
    ({"study": "gamma_ladder"}, "ladder"),
    ({"study": "gamma_ladder", "ladder": [8, 6]}, "ladder"),
    ({"study": "xi_ladder", "ladder": [1, 2.5]}, "ladder"),
    ({"study": "correlation", "ladder": [4, 6], "probes": [{"block": 0, "level": 1, "time": 0.5}]}, "probes"),
    ({"study": "correlation", "ladder": [4, 6],
      "probes": [{"block": 0, "level": 1, "time": 0.5}, {"block": 0, "level": 1, "time": 1.5}]}, "probes"),
    ({"study": "correlation", "ladder": [4, 6],
      "probes": [{"block": 0, "level": 1, "time": 0.5}, {"block": 9, "level": 1, "time": 0.5}]}, "probes"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ValidationError) as exc:
        validate_config(raw)
    assert exc.value.field == field


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError) as exc:
        load_config(bad)
    assert exc.value.field == "<file>"
    with pytest.raises(ValidationError):
        validate_config([1, 2])


def test_profiles_are_densities():
    r = np.random.default_rng(0).random((50, 2))
    for spec in ("uniform", {"profile": "bump"}, {"profile": "two-phase"},
                 {"profile": "constant", "levels": [0.2, 0.3, 0.5]}):
        rho = make_profile(spec, 2, 1)(r)
        assert rho.shape == (50, 3) and np.allclose(rho.sum(axis=1), 1.0) and rho.min() > 0


def test_shipped_configs_validate(config_dir):
    names = sorted(f for f in os.listdir(config_dir) if f.endswith(".json"))
    assert len(names) >= 8
    for name in names:
        load_config(os.path.join(config_dir, name))


# ---------------------------------------------------------------------------
# reports and reproducibility


def test_report_round_trip(tmp_path, config_dir):
    rep = run_xi_ladder(_cfg(config_dir, "xi_ladder"))
    csv_path, json_path = emit_report(rep, tmp_path)
    back = load_report(json_path)
    assert type(back) is type(rep)
    assert back.rows == rep.rows and back.verdict == rep.verdict and back.config == rep.config
    assert back.errors == rep.errors
    with open(json_path) as fh:
        summary = json.load(fh)
    assert summary["content_hash"] == content_hash(rep.config) and len(summary["content_hash"]) == 64
    assert "line" in summary["verdict"]
    with open(csv_path) as fh:
        assert fh.readline().strip().split(",") == ["n3", "xi", "sup_error", "max_se"]


def test_content_hash_tracks_inputs():
    a = validate_config({}).raw
    b = validate_config({"seed": 1}).raw
    assert content_hash(a) == content_hash(dict(a)) != content_hash(b)


def test_outputs_do_not_depend_on_threads(tmp_path, config_dir):
    cfg = _cfg(config_dir, "gamma_ladder_quick")
    paths = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        paths.append(emit_report(run_gamma_ladder(cfg, threads=threads), out)[0])
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_single_replica_is_deterministic(config_dir):
    cfg = _cfg(config_dir, "single_run", replicas=1, seed=3)
    assert single_run(cfg).rows == single_run(cfg).rows
    assert single_run(cfg.with_overrides(seed=4)).rows != single_run(cfg).rows


def test_replica_streams_are_independent(config_dir):
    cfg = _cfg(config_dir, "single_run", replicas=4, n1=6)
    v, *_ = simulate_blocks(cfg, cfg.n1)
    assert len({v[r].tobytes() for r in range(4)}) == 4


# ---------------------------------------------------------------------------
# studies


def test_gamma_ladder_report_fields(config_dir):
    rep = run_gamma_ladder(_cfg(config_dir, "gamma_ladder_quick"))
    assert [r["n1"] for r in rep.rows] == [4, 6]
    for r in rep.rows:
        assert r["sup_error"] >= 0 and r["max_se"] > 0 and r["replicas"] == 20
        assert r["sup_error"] == max(r["error_level_0"], r["error_level_1"])
    assert rep.verdict["line"].startswith("VERDICT")


def test_few_replicas_raise_the_precision_flag(config_dir):
    rep = run_gamma_ladder(_cfg(config_dir, "gamma_ladder_quick", replicas=3))
    assert rep.verdict["precision_warning"] and "[few replicas]" in rep.verdict["line"]


def test_pure_death_ladder_within_three_standard_errors(config_dir):
    cfg = _cfg(config_dir, "pure_death")
    for rung, n1 in enumerate(cfg.ladder_values()):
        v, times, lat, part = simulate_blocks(cfg, n1, rung, times=np.array([0.0, 1.0]))
        # every top-level site dies independently at rate one
        exact = initial_blocks(cfg, cfg.n3, lat)[:, 1] * math.exp(-1.0)
        assert np.allclose(xi_system(cfg, cfg.n3, np.array([0.0, 1.0]), lat)[-1][:, 1], exact, atol=1e-10)
        top = v[:, -1, 1, :]
        se = top.std(axis=0, ddof=1) / math.sqrt(cfg.replicas)
        assert np.all(np.abs(top.mean(axis=0) - exact) < 3 * se), (n1, top.mean(axis=0), exact, se)


def test_xi_ladder_decreases(config_dir):
    rep = run_xi_ladder(_cfg(config_dir, "xi_ladder"))
    assert rep.monotone and rep.passed and not rep.verdict["exact"]


def test_xi_ladder_exact_for_block_constant_kernel(config_dir):
    rep = run_xi_ladder(_cfg(config_dir, "xi_ladder_block_constant"))
    assert max(rep.errors) <= 1e-12 and rep.verdict["exact"] and rep.passed


def test_xi_ladder_rejects_coarse_grid(config_dir):
    with pytest.raises(ConfigurationError):
        run_xi_ladder(_cfg(config_dir, "xi_ladder", grid_n=8))


def test_jackknife_matches_sample_covariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=400)
    y = 0.5 * x + rng.normal(size=400)
    c, se = jackknife_cov(x, y)
    assert c == pytest.approx(np.cov(x, y)[0, 1], rel=1e-12)
    loo = np.array([np.cov(np.delete(x, i), np.delete(y, i))[0, 1] for i in range(400)])
    assert se == pytest.approx(math.sqrt(399 / 400 * ((loo - loo.mean()) ** 2).sum()), rel=1e-9)
    # normal-theory standard error of a covariance
    assert se == pytest.approx(math.sqrt((1.25 + 0.25) / 400), rel=0.2)


def test_same_probe_twice_has_unit_correlation(config_dir):
    probe = {"block": 1, "level": 1, "time": 1.0}
    cfg = _cfg(config_dir, "correlation", probes=[probe, probe], replicas=30, ladder=[4, 6])
    rep = run_correlation_study(cfg)
    assert all(r["corr"] == pytest.approx(1.0, abs=1e-12) for r in rep.rows)


def test_variance_scales_like_one_over_block_size(config_dir):
    rep = run_correlation_study(_cfg(config_dir, "correlation"))
    assert abs(rep.verdict["variance_slope"] + 1) <= 0.3
    w = rep.extra["deterministic_values"]
    for r in rep.rows:
        assert r["marginal_error"] < 4 * r["marginal_se"]
    assert len(w) == 2


def test_cluster_probe_regressions(cluster_probe_run):
    rep, stats, _ = cluster_probe_run
    assert abs(rep.verdict["slope_ge3"] - 2) <= 0.5
    assert len(stats) == len(rep.rows) == 5
    for r in rep.rows:
        assert abs(r["empty_z"]) <= 3
        assert r["truncated_mass"] == 0.0


# ---------------------------------------------------------------------------
# command line


def test_cli_run_writes_outputs(tmp_path, config_dir, capsys):
    code = main(["run", os.path.join(config_dir, "xi_ladder.json"), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert (tmp_path / "xi_ladder_rungs.csv").exists() and (tmp_path / "xi_ladder_summary.json").exists()
    assert out.strip().splitlines()[-1].startswith("VERDICT")


def test_cli_verdict_failure_exit_code(tmp_path, config_dir):
    cfg = json.load(open(os.path.join(config_dir, "gamma_ladder_quick.json")))
    cfg["thresholds"] = {"final_error": 1e-4}
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path), "--out", str(tmp_path)]) == EXIT_VERDICT


def test_cli_validation_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n1": "0.3"}))
    assert main(["validate", str(path)]) == EXIT_VALIDATION
    assert "(field: n1)" in capsys.readouterr().err
    assert main(["run", str(path), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_cli_numerical_exit_code(tmp_path, config_dir, capsys):
    cfg = json.load(open(os.path.join(config_dir, "xi_ladder.json")))
    cfg.update(lambda_star=60.0, dt=0.5)
    path = tmp_path / "stiff.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path), "--out", str(tmp_path)]) == EXIT_NUMERICAL
    assert "numerical error" in capsys.readouterr().err


def test_cli_overrides_and_snapshots(tmp_path, config_dir, capsys):
    code = main(["run", os.path.join(config_dir, "single_run.json"), "--out", str(tmp_path),
                 "--replicas", "2", "--seed", "5", "--snapshots"])
    assert code in (EXIT_OK, EXIT_VERDICT)
    summary = json.load(open(tmp_path / "single_run_summary.json"))
    assert summary["config"]["replicas"] == 2 and summary["config"]["seed"] == 5
    snap = tmp_path / "snapshots" / "replica0_n1_8.txt"
    assert snap.read_text().splitlines()[0] == "t=1.0 k=1 sites=256"
    assert read_snapshot(snap, build_lattice(1, 1, 8)).t == 1.0


def test_cli_cluster_probe_writes_cluster_csv(tmp_path, config_dir):
    cfg = json.load(open(os.path.join(config_dir, "cluster_probe.json")))
    cfg.update(n1=6, ladder=[4, 5], cluster={"windows": 100})
    path = tmp_path / "small.json"
    path.write_text(json.dumps(cfg))
    code = main(["run", str(path), "--out", str(tmp_path)])
    assert code in (EXIT_OK, EXIT_VERDICT)
    assert (tmp_path / "cluster_probe_clusters.csv").exists()


def test_cli_fixed_point(capsys):
    assert main(["fixed-point", "--k", "2", "--lambda", "4"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[-3:] == ["rho[0] = 0.25", "rho[1] = 0.25", "rho[2] = 0.5"]
    assert main(["fixed-point", "--k", "2", "--lambda", "1.5"]) == EXIT_OK
    assert "nontrivial = false" in capsys.readouterr().out
    assert main(["fixed-point", "--k", "0", "--lambda", "1"]) == EXIT_VALIDATION
