import csv

import numpy as np
import pytest
import yaml

from msmic import ConfigError, IngestionError, TargetPopulation, fit_propensity, qicw, solve_ipw
from msmic.cli import (
    EXIT_CONFIG,
    EXIT_FIT,
    EXIT_INGEST,
    EXIT_OK,
    MAX_CANDIDATES,
    TEMPLATE,
    Schema,
    enumerate_candidates,
    frame_schema,
    ingest,
    load_config,
    main,
    parse_config,
    run_select,
    write_frame,
)
from msmic.model import OutcomeMarginalFamily
from msmic.sim import ac2_dgp, generate


def _write(path, rows):
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return path


def _config(tmp_path, **raw):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


DGP = {"alpha0": [[0.3, 0.8]], "arm_coef": [[0.5, 0.0], [1.5, 0.0]],
       "confounding": [[0.8], [0.8]]}


# --------------------------------------------------------------------------- #
# Ingestion
# --------------------------------------------------------------------------- #


def test_arm_column_to_one_hot(tmp_path):
    path = _write(tmp_path / "d.csv", [["y", "arm", "z"], [1.0, 1, 0.1], [2.0, 2, 0.2],
                                       [3.0, 1, 0.3]])
    frame = ingest(path, Schema(confounders=("z",)))
    np.testing.assert_array_equal(frame.t, [[1, 0], [0, 1], [1, 0]])
    assert frame.regressor_names == ("1",)


def test_double_assignment_cites_row(tmp_path):
    rows = [["y", "t1", "t2", "z"]] + [[0.0, 1, 0, 0.0], [0.0, 0, 1, 0.0]] * 3
    rows.append([0.0, 1, 1, 0.0])
    path = _write(tmp_path / "d.csv", rows)
    with pytest.raises(IngestionError, match="row 7") as info:
        ingest(path, Schema(arm=None, assignment=("t1", "t2"), confounders=("z",)))
    assert info.value.row == 7


def test_missing_column_and_empty_arm(tmp_path):
    path = _write(tmp_path / "d.csv", [["y", "arm"], [1.0, 1], [2.0, 1]])
    with pytest.raises(IngestionError, match="missing columns"):
        ingest(path, Schema(confounders=("z",)))
    one_arm = _write(tmp_path / "e.csv", [["y", "t1", "t2"], [1.0, 1, 0]])
    with pytest.raises(IngestionError, match="arm 2 has no records"):
        ingest(one_arm, Schema(arm=None, assignment=("t1", "t2")))


def test_non_numeric_value_cites_row(tmp_path):
    path = _write(tmp_path / "d.csv", [["y", "arm"], [1.0, 1], ["abc", 2]])
    with pytest.raises(IngestionError, match="row 2"):
        ingest(path, Schema())


def test_round_trip(tmp_path):
    frame = generate(ac2_dgp(), 250, 4)
    path = write_frame(frame, tmp_path / "frame.csv")
    back = ingest(path, frame_schema(frame))
    assert back == frame


def test_shared_regressors_with_arm_dummies(tmp_path):
    path = _write(tmp_path / "d.csv", [["y", "arm", "v", "z"], [1.0, 1, 0.5, 0.0],
                                       [2.0, 2, -0.5, 1.0]])
    frame = ingest(path, Schema(regressors=("v",), arm_indicators=True, confounders=("z",)))
    assert frame.regressor_names == ("1", "arm2", "v")
    np.testing.assert_array_equal(frame.x[0], [[1, 0, 0.5], [1, 1, 0.5]])


def test_schema_roles_disjoint():
    with pytest.raises(ConfigError):
        Schema(regressors=("z",), confounders=("z",))


# --------------------------------------------------------------------------- #
# Config
# --------------------------------------------------------------------------- #


def test_template_parses_to_defaults(tmp_path):
    raw = yaml.safe_load(TEMPLATE)
    raw["input"]["data"] = "d.csv"
    cfg = parse_config(raw, tmp_path)
    assert cfg.recipe.estimator == "IPW-unknown" and cfg.seed == raw["seed"]
    assert cfg.data == tmp_path / "d.csv"


def test_target_length_checked_before_fitting(tmp_path):
    path = _config(tmp_path, input={"dgp": DGP}, target=[1, 1, 1])
    with pytest.raises(ConfigError, match="3 entries but there are 2 arms"):
        load_config(path)
    assert main(["select", str(path)]) == EXIT_CONFIG


def test_target_length_checked_against_ingested_arms(tmp_path, monkeypatch):
    import msmic.cli as cli

    data = write_frame(generate(ac2_dgp(), 50, 1), tmp_path / "d.csv")
    cfg = parse_config({"input": {"data": str(data)}, "target": [1, 1, 1],
                        "schema": {"confounders": ["z1"]}}, tmp_path)
    monkeypatch.setattr(cli, "fit_model", lambda *a, **k: pytest.fail("fitted"))
    with pytest.raises(ConfigError):
        run_select(cfg)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_config(_config(tmp_path, input={"dgp": DGP}, colour="blue"))
    with pytest.raises(ConfigError):
        load_config(_config(tmp_path, input={"dgp": DGP}, estimator="DR",
                            criteria=["IPWIC2"]))


# --------------------------------------------------------------------------- #
# Candidates
# --------------------------------------------------------------------------- #


def test_candidate_enumeration():
    names = ["1", "a", "b", "c"]
    cands = enumerate_candidates(names, "all_subsets", 2, ["1"])
    assert cands == [(0,), (0, 1), (0, 2), (0, 3)]
    assert enumerate_candidates(names, "explicit", explicit=[["b", "1"]]) == [(0, 2)]
    with pytest.raises(ConfigError):
        enumerate_candidates(names, "explicit", explicit=[["d"]])


def test_candidate_cap():
    names = [f"x{j}" for j in range(13)]
    with pytest.raises(ConfigError, match=str(MAX_CANDIDATES)):
        enumerate_candidates(names, "all_subsets", 13, [])
    assert len(enumerate_candidates(names[:12], "all_subsets", 12, [])) == 2**12 - 1


# --------------------------------------------------------------------------- #
# Selection
# --------------------------------------------------------------------------- #


def test_single_candidate_matches_direct_call(tmp_path):
    raw = {"input": {"dgp": DGP, "n": 400}, "criteria": ["QICW"], "seed": 5,
           "candidates": {"rule": "explicit", "explicit": [["1", "arm2"]]}}
    cfg = parse_config(raw, tmp_path)
    res = run_select(cfg)
    frame = generate(cfg.dgp, 400, 5).select_x([0, 1])
    fam = OutcomeMarginalFamily("gaussian", 2)
    d = TargetPopulation([1, 1])
    alpha = fit_propensity(frame).params
    theta = solve_ipw(frame, alpha, d, fam).params
    direct = qicw(frame, theta, alpha, d, fam)
    (row,) = res.rows
    assert row["value"] == direct.value and row["fit_term"] == direct.fit_term
    assert row["argmin"] and row["seed"] == 5


def test_nested_candidates_ranked(tmp_path):
    raw = {"input": {"dgp": DGP, "n": 2000}, "seed": 6,
           "candidates": {"rule": "explicit", "explicit": [["1", "arm2"], ["1", "arm2", "v1"]]}}
    res = run_select(parse_config(raw, tmp_path))
    for kind in ("QICW", "IPWIC2", "OBS-WEIGHT-IC"):
        rows = [r for r in res.rows if r["criterion"] == kind]
        assert [r["candidate_id"] for r in rows] == [0, 1]
        best = min(rows, key=lambda r: r["value"])
        assert best["argmin"] and sum(r["argmin"] for r in rows) == 1
        assert res.argmin[kind] == best["candidate"]


def test_parallel_select_is_identical(tmp_path):
    raw = {"input": {"dgp": DGP, "n": 500}, "seed": 2, "candidates": {"max_size": 4}}
    serial = run_select(parse_config(raw, tmp_path))
    threaded = run_select(parse_config({**raw, "n_jobs": 3}, tmp_path))
    assert serial.rows == threaded.rows


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


def test_init_writes_template(tmp_path, capsys):
    path = tmp_path / "msmic.yaml"
    assert main(["init", str(path)]) == EXIT_OK
    assert path.read_text() == TEMPLATE
    assert main(["init", str(path)]) == EXIT_CONFIG
    assert main(["init", str(path), "--force"]) == EXIT_OK


def test_select_writes_reports(tmp_path, capsys):
    path = _config(tmp_path, input={"dgp": DGP, "n": 500}, seed=9,
                   candidates={"max_size": 2}, output="out")
    assert main(["select", str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed: 9" in out and "argmin IPWIC2" in out
    with (tmp_path / "out" / "select.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["criterion"] for r in rows} == {"QICW", "IPWIC2", "OBS-WEIGHT-IC"}
    assert (tmp_path / "out" / "select.txt").read_text().startswith("seed: 9")


def test_exit_codes(tmp_path):
    bad = _write(tmp_path / "bad.csv", [["y", "arm"], [1.0, 1], [2.0, 3]])
    assert main(["ingest-check", str(_config(tmp_path, input={"data": str(bad)}))]) == EXIT_INGEST
    dup = _write(tmp_path / "dup.csv", [["y", "arm", "a", "b"]]
                 + [[float(i), 1 + i % 2, float(i), float(i)] for i in range(20)])
    cfg = _config(tmp_path, input={"data": str(dup)}, schema={"regressors": ["a", "b"]},
                  candidates={"rule": "explicit", "explicit": [["1", "a", "b"]]})
    assert main(["select", str(cfg), "-o", str(tmp_path / "o")]) == EXIT_FIT
    assert main(["simulate", str(cfg)]) == EXIT_CONFIG


def test_bias_match_smoke(tmp_path, capsys):
    path = _config(tmp_path, input={"dgp": DGP, "n": 200}, estimator="DR",
                   simulation={"reference_n": 20000},
                   candidates={"rule": "explicit", "explicit": [["1", "arm2"]]})
    assert main(["bias-match", str(path), "-M", "5", "-o", str(tmp_path / "b")]) == EXIT_OK
    with (tmp_path / "b" / "bias.csv").open() as fh:
        kinds = [r["criterion"] for r in csv.DictReader(fh)]
    assert kinds == ["QICW", "DRIC"]
