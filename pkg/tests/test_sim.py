import csv
import math

import numpy as np
import pytest
from scipy.special import expit, logit

import msmic.sim as sim
from msmic import ConfigError, NonConvergenceError, OutcomeMarginalFamily
from msmic.errors import ExperimentError
from msmic.pipeline import FitRecipe
from msmic.sim import (
    DGPSpec,
    ac2_dgp,
    aic_dgp,
    generate,
    mc_bias,
    mc_risk,
    run_replications,
    selection_experiment,
    summarize,
)

IPW_KNOWN = FitRecipe("IPW-known")


def test_generate_is_deterministic():
    dgp = ac2_dgp()
    a, b = generate(dgp, 500, 123), generate(dgp, 500, 123)
    assert a == b
    assert not generate(dgp, 500, 124) == a


def test_only_assigned_arm_outcome_is_stored():
    dgp = ac2_dgp()
    data = generate(dgp, 10, 1)
    assert data.y.shape == (10,)
    assert data.regressor_names == ("1", "arm2")
    np.testing.assert_array_equal(data.x_obs[:, 1], data.arm)


def test_arm_share_matches_propensity():
    dgp = DGPSpec(alpha0=[[logit(0.3), 0.0]], arm_coef=[[0.0], [0.0]],
                  confounding=[[0.0], [0.0]])
    data = generate(dgp, 1_000_000, 5)
    assert abs(data.t[:, 0].mean() - 0.3) <= 0.0014


def test_assignment_calibrated_by_decile():
    dgp = ac2_dgp()
    data = generate(dgp, 1_000_000, 6)
    z = data.z[:, 0]
    e1 = expit(0.3 + 0.8 * z)
    edges = np.quantile(z, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, 9)
    for b in range(10):
        m = bins == b
        sd = math.sqrt(np.sum(e1[m] * (1 - e1[m]))) / m.sum()
        assert abs(data.t[m, 0].mean() - e1[m].mean()) <= 3 * sd


def test_positivity_enforced():
    with pytest.raises(ConfigError, match="positivity"):
        DGPSpec(alpha0=[[0.0, 5.0]], arm_coef=[[0.0], [0.0]], confounding=[[1.0], [1.0]])


def test_truth_helpers():
    dgp = ac2_dgp(theta=(0.5, 1.5))
    np.testing.assert_allclose(dgp.true_theta(), [0.5, 1.0])
    np.testing.assert_allclose(dgp.marginal_variance(), [1.64, 1.64])
    with pytest.raises(ConfigError):
        sim.cb_dgp().true_theta()


def test_risk_matches_gaussian_entropy():
    N, M = 1000, 400
    dgp = aic_dgp()
    recipe = FitRecipe("IPW-known", family=OutcomeMarginalFamily("gaussian"))
    risk = mc_risk(dgp, recipe, N, M, seed=8, n_ref=20_000)
    p = 2
    expect = N * (math.log(2 * math.pi) + 1) + p * N / (N - p - 1)
    assert abs(risk.mean - expect) <= 3 * risk.se


def test_overfitting_does_not_lower_risk():
    dgp = aic_dgp(coef=(1.0, 0.5, 0.0))
    kw = dict(N=200, M=300, seed=9, n_ref=20_000)
    true = mc_risk(dgp, IPW_KNOWN.with_columns((0, 1)), **kw)
    over = mc_risk(dgp, IPW_KNOWN.with_columns((0, 1, 2)), **kw)
    assert over.mean >= true.mean - 3 * math.hypot(true.se, over.se)


def test_standard_error_scales_with_replications():
    dgp = aic_dgp()
    small = mc_risk(dgp, IPW_KNOWN, 300, 200, seed=10, n_ref=20_000)
    large = mc_risk(dgp, IPW_KNOWN, 300, 800, seed=11, n_ref=20_000)
    assert large.se / small.se == pytest.approx(0.5, rel=0.2)


def test_parallel_runs_match_serial():
    dgp = ac2_dgp()
    recipe = FitRecipe("IPW-unknown")
    kw = dict(N=300, M=24, seed=12, n_ref=20_000)
    serial = run_replications(dgp, recipe, **kw)
    threaded = run_replications(dgp, recipe, n_jobs=3, **kw)
    a, b = summarize(serial, "IPWIC2", 300, 12), summarize(threaded, "IPWIC2", 300, 12)
    assert a.bias == pytest.approx(b.bias, rel=1e-10)
    assert a.penalty == pytest.approx(b.penalty, rel=1e-10)
    assert [r.optimism for r in serial] == [r.optimism for r in threaded]


def _flaky_fit(every):
    real = sim.fit_model
    calls = {"n": 0}

    def fit(data, recipe, alpha_known=None):
        if data.N < 10_000:
            calls["n"] += 1
            if calls["n"] % every == 0:
                raise NonConvergenceError("forced failure")
        return real(data, recipe, alpha_known)

    return fit


def test_failures_are_counted(monkeypatch):
    monkeypatch.setattr(sim, "fit_model", _flaky_fit(25))
    report = mc_bias(aic_dgp(), IPW_KNOWN, 200, 50, seed=13, n_ref=20_000)
    assert report.failures == 2 and report.M == 48


def test_too_many_failures_abort(monkeypatch):
    monkeypatch.setattr(sim, "fit_model", _flaky_fit(5))
    with pytest.raises(ExperimentError, match="10 of 50"):
        mc_bias(aic_dgp(), IPW_KNOWN, 200, 50, seed=13, n_ref=20_000)


def test_bias_report_fields():
    report = mc_bias(ac2_dgp(), FitRecipe("DR"), 300, 20, seed=14, n_ref=20_000)
    assert report.criterion == "DRIC"
    assert report.bias_se > 0 and np.isfinite(report.z_score)
    assert set(report.extras) >= {"D2", "D3", "penalty:QICW", "penalty:DRIC"}
    row = report.row()
    assert row["seed"] == 14 and row["M"] == 20


def test_bias_rejects_unknown_criterion():
    with pytest.raises(ConfigError):
        mc_bias(ac2_dgp(), FitRecipe("DR"), 300, 5, seed=1, criterion="IPWIC2")
    with pytest.raises(ConfigError):
        run_replications(ac2_dgp(), FitRecipe("DR"), 300, 1, seed=1)


def test_single_candidate_always_selected():
    table = selection_experiment(ac2_dgp(), FitRecipe("IPW-unknown"), [(0, 1)], None, 300, 10, 3)
    assert table.frequency("IPWIC2", "1+arm2") == 1.0
    assert table.frequency("QICW", "1+arm2") == 1.0


@pytest.mark.slow
def test_true_structure_selected_most_often():
    dgp = sim.ac2_dgp_with_v()
    cands = [(0,), (0, 1), (0, 1, 2)]
    table = selection_experiment(dgp, FitRecipe("IPW-unknown"), cands, ["IPWIC2"], 2000, 500, 15)
    freq = [table.frequency("IPWIC2", c) for c in table.candidates]
    assert int(np.argmax(freq)) == 1, dict(zip(table.candidates, freq))


def test_rows_written_with_exact_floats(tmp_path):
    reps = run_replications(aic_dgp(), IPW_KNOWN, 100, 3, seed=2, n_ref=10_000)
    path = sim.write_rows(tmp_path / "reps.csv", sim.replication_rows(reps))
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["optimism"]) for r in rows] == [r.optimism for r in reps]
