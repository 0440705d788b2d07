"""CLI tests: config parsing and round-trips, exit codes, output file
schemas, seed handling, and byte-level determinism of reruns."""

import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbma.cli import RunConfig, UsageError, main, parse_config
from bbma.experiments import experiment_kesten, verify_samplers
from bbma.model import ModelParams, OffspringLaw
from bbma.oracles import expected_count

SUPER = ["--c", "1", "--r", "1.5", "--offspring", "dyadic"]


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_parse_config_basic():
    text = """
    # supercritical reference run
    c = 1.0
    r = 1.5          # branch rate
    offspring = dyadic
    horizon = 10
    set = 0,1
    set = 1,inf
    seed = 7
    """
    d = parse_config(text)
    cfg = RunConfig(**d)
    assert (cfg.c, cfg.r, cfg.offspring) == (1.0, 1.5, "dyadic")
    assert cfg.horizon == 10.0
    assert cfg.sets == ("0,1", "1,inf")
    assert cfg.seed == 7
    assert cfg.x0 == 1.0 and cfg.out == "." and cfg.format == "csv"


def test_parse_config_later_lines_override_but_sets_accumulate():
    d = parse_config("c=1\nc=2\nset=0,1\nset=2,inf\n")
    assert d["c"] == 2.0
    assert d["sets"] == ("0,1", "2,inf")


def test_parse_config_pmf_offspring():
    d = parse_config("c=1\nr=1.2\noffspring=pmf:0.2,0,0.8\n")
    p = RunConfig(**d).params()
    assert p.offspring.mu1 == pytest.approx(1.6, rel=1e-15)


@pytest.mark.parametrize("text, match", [
    ("granularity=5", r"line 1: unknown key 'granularity'"),
    ("c=fast", r"key 'c': expected a number, got 'fast'"),
    ("replicates=1.5", r"key 'replicates': expected an integer"),
    ("horizon=inf", r"key 'horizon': value must be finite"),
    ("just a line", r"line 1: expected key=value"),
    ("set=3,2", r"line 1: bad interval set '3,2'"),
    ("offspring=pmf:0.2,0.9", r"bad offspring"),
    ("format=yaml", r"must be 'csv' or 'jsonl'"),
    ("census_grid=1,x", r"key 'census_grid': expected comma-separated numbers"),
])
def test_parse_config_error_messages_name_the_problem(text, match):
    with pytest.raises(UsageError, match=match):
        parse_config(text)


def test_config_round_trip_exact():
    cfg = RunConfig(
        c=1.0, r=0.6, offspring="pmf:0.2,0,0.8", x0=1 / 3, horizon=7.25,
        census_grid=(1.0, 2.0, 3.5), replicates=50, seed=9, truncation_M=2.5,
        sets=("0,1", "1,inf"), out="runs", format="jsonl", threads=2,
        c_grid=(0.5, 1.0), r_grid=(0.3, 1.5), k_max=20, delta=0.5,
    )
    assert RunConfig(**parse_config(cfg.to_text())) == cfg


@given(
    c=st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
    r=st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
    x0=st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
    horizon=st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
    seed=st.integers(min_value=0, max_value=2**62),
    replicates=st.none() | st.integers(min_value=1, max_value=10**6),
    truncation_M=st.none() | st.floats(min_value=0.1, max_value=50, allow_nan=False),
    sets=st.lists(st.sampled_from(["0,1", "1,inf", "0.5,2;3,inf"]),
                  max_size=2, unique=True),
    fmt=st.sampled_from(["csv", "jsonl"]),
)
@settings(max_examples=60, deadline=None)
def test_config_round_trip_property(c, r, x0, horizon, seed, replicates,
                                    truncation_M, sets, fmt):
    # %.17g must reproduce every float bit-for-bit through the file format
    cfg = RunConfig(c=c, r=r, offspring="dyadic", x0=x0, horizon=horizon,
                    seed=seed, replicates=replicates, truncation_M=truncation_M,
                    sets=tuple(sets), format=fmt)
    assert RunConfig(**parse_config(cfg.to_text())) == cfg


def test_census_grid_defaults():
    base = dict(c=1.0, r=0.6, offspring="dyadic")
    assert RunConfig(**base).grid() == [2.5, 5.0, 7.5, 10.0]
    assert RunConfig(**base, census_dt=4.0).grid() == [4.0, 8.0, 10.0]
    assert RunConfig(**base, census_dt=2.5).grid() == [2.5, 5.0, 7.5, 10.0]
    assert RunConfig(**base, census_grid=(1.0, 9.0)).grid() == [1.0, 9.0]
    with pytest.raises(UsageError, match="census_dt must be positive"):
        RunConfig(**base, census_dt=-1.0).grid()


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_missing_required_options_exit_1(capsys):
    assert main(["simulate"]) == 1
    err = capsys.readouterr().err
    assert "missing required option(s): --c, --r, --offspring" in err


def test_unknown_flag_exit_1(capsys):
    assert main(["simulate", *SUPER, "--granularity", "5"]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_command_exit_1(capsys):
    assert main(["frobnicate"]) == 1


def test_bad_config_file_exit_1(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("c=1\nr=0.6\noffspring=dyadic\nwindow=3\n")
    assert main(["simulate", "--config", str(cfgfile), "--out", str(tmp_path)]) == 1
    assert "unknown key 'window'" in capsys.readouterr().err


def test_missing_config_file_exit_1(capsys):
    assert main(["simulate", "--config", "/no/such/file.cfg"]) == 1
    assert "cannot read config file" in capsys.readouterr().err


def test_unwritable_out_exit_1(tmp_path, capsys):
    blocker = tmp_path / "occupied"
    blocker.write_text("")
    rc = main(["moments", "--c", "1", "--r", "0.6", "--offspring", "dyadic",
               "--out", str(blocker)])
    assert rc == 1
    assert "cannot write to output directory" in capsys.readouterr().err


def test_contract_failure_exit_2(tmp_path):
    # horizon 1 leaves the supercritical cell without a meaningful survival
    # test, so the phase contract fails without any statistical noise
    rc = main(["phase", *SUPER, "--horizon", "1", "--replicates", "10",
               "--seed", "5", "--out", str(tmp_path)])
    assert rc == 2
    cells = [json.loads(line) for line in _read(str(tmp_path / "report.jsonl")).splitlines()]
    assert cells[0]["feasible"] is False


def test_bbm_seed_env_must_be_integer(monkeypatch, capsys):
    monkeypatch.setenv("BBM_SEED", "soon")
    assert main(["moments", "--c", "1", "--r", "0.6", "--offspring", "dyadic"]) == 1
    assert "BBM_SEED must be an integer" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# subcommand outputs
# ---------------------------------------------------------------------------


def test_simulate_files_and_headers(tmp_path):
    out = tmp_path / "run"
    rc = main(["simulate", *SUPER, "--horizon", "2", "--census-dt", "1",
               "--replicates", "5", "--seed", "42",
               "--set", "0,1", "--set", "1,inf", "--out", str(out)])
    assert rc == 0
    cen = _read(str(out / "censuses.csv")).splitlines()
    assert cen[0] == "replicate,time,alive,absorbed,count_B1,count_B2,D,D_trunc"
    assert len(cen) == 1 + 5 * 2  # header + replicates x census times
    summ = _read(str(out / "summary.csv")).splitlines()
    assert summ[0] == ("time,n,surviving_fraction,mean_alive,se_alive,"
                       "mean_D,se_D,mean_D_trunc,mean_absorbed")
    records = [json.loads(line) for line in _read(str(out / "report.jsonl")).splitlines()]
    assert len(records) == 5
    field_names = set(RunConfig.__dataclass_fields__)
    for rec in records:
        assert set(rec["config"]) == field_names  # full self-describing echo
        assert rec["status"] in ("ok", "population_cap_exceeded")
        assert rec["counters"]["created"] == (
            rec["counters"]["alive_final"] + rec["counters"]["absorbed"]
            + rec["counters"]["died_childless"] + rec["counters"]["branched"])


def test_simulate_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "rerun"
    args = ["simulate", *SUPER, "--horizon", "2", "--census-dt", "1",
            "--replicates", "5", "--seed", "42", "--set", "0,1", "--out", str(out)]
    assert main(args) == 0
    first = {name: _read(str(out / name))
             for name in ("censuses.csv", "summary.csv", "report.jsonl")}
    assert main(args) == 0
    for name, text in first.items():
        assert _read(str(out / name)) == text


def test_jsonl_format_skips_censuses(tmp_path):
    out = tmp_path / "nojson"
    rc = main(["simulate", *SUPER, "--horizon", "2", "--replicates", "3",
               "--format", "jsonl", "--out", str(out)])
    assert rc == 0
    assert not (out / "censuses.csv").exists()
    assert (out / "summary.csv").exists() and (out / "report.jsonl").exists()


def test_bbm_seed_env_overrides_flag(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", *SUPER, "--horizon", "2", "--replicates", "5"]
    monkeypatch.setenv("BBM_SEED", "42")
    assert main([*args, "--seed", "0", "--out", str(a)]) == 0
    monkeypatch.delenv("BBM_SEED")
    assert main([*args, "--seed", "42", "--out", str(b)]) == 0
    assert _read(str(a / "censuses.csv")) == _read(str(b / "censuses.csv"))
    assert _read(str(a / "summary.csv")) == _read(str(b / "summary.csv"))


def test_flags_override_config_file(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("c=1\nr=0.6\noffspring=dyadic\nhorizon=1\nseed=1\n")
    out = tmp_path / "m"
    rc = main(["moments", "--config", str(cfgfile), "--seed", "7", "--out", str(out)])
    assert rc == 0
    rec = json.loads(_read(str(out / "report.jsonl")))
    assert rec["config"]["seed"] == 7
    assert rec["config"]["horizon"] == 1.0


def test_moments_emits_exact_oracle_values(tmp_path):
    out = tmp_path / "mom"
    rc = main(["moments", "--c", "1", "--r", "0.6", "--offspring", "dyadic",
               "--horizon", "1", "--out", str(out)])
    assert rc == 0
    rows = dict(line.split(",") for line in _read(str(out / "summary.csv")).splitlines()[1:])
    params = ModelParams(c=1.0, r=0.6, offspring=OffspringLaw.dyadic())
    from bbma.model import IntervalSet
    want = expected_count(1.0, 1.0, IntervalSet.positive_axis(), params)
    assert float(rows["expected_count"]) == want  # %.17g is lossless
    assert float(rows["expected_count"]) == pytest.approx(0.6047575833832470, rel=1e-10)
    assert abs(float(rows["mean_one_check"]) - 1.0) <= 1e-8
    assert rows["regime"] == "supercritical"


def test_schedule_outputs_frozen_first_row(tmp_path):
    out = tmp_path / "sch"
    rc = main(["schedule", "--c", "1", "--r", "1.5", "--offspring", "dyadic",
               "--k-max", "10", "--out", str(out)])
    assert rc == 0
    lines = _read(str(out / "summary.csv")).splitlines()
    assert lines[0] == "k,t_k,s_k,M_k,t3_partial_sum"
    assert len(lines) == 1 + 9
    k, t, s, M, _ = lines[1].split(",")
    assert (int(k), float(t), float(s), float(M)) == (
        2, 0.25643596187264656, 0.23083509858308343, 0.6931471805599453)
    rec = json.loads(_read(str(out / "report.jsonl")))
    assert rec["gap_turnover_k"] >= 2


def test_verify_command_passes_and_reports_suites(tmp_path):
    out = tmp_path / "ver"
    rc = main(["verify", *SUPER, "--replicates", "20000", "--seed", "5",
               "--out", str(out)])
    assert rc == 0
    lines = _read(str(out / "summary.csv")).splitlines()
    assert lines[0] == "suite,ok,pvalue,statistic,n"
    suites = {line.split(",")[0]: line.split(",")[1] for line in lines[1:]}
    assert suites == {"hitting_time_ks": "true", "killed_position_ks": "true",
                      "survival_binomial": "true", "branching_stats": "true"}


def test_kesten_command_matches_direct_experiment(tmp_path):
    out = tmp_path / "kes"
    rc = main(["kesten", *SUPER, "--horizon", "6", "--replicates", "40",
               "--seed", "13", "--set", "0,1", "--out", str(out)])
    params = ModelParams(c=1.0, r=1.5, offspring=OffspringLaw.dyadic())
    rep = experiment_kesten(params, 1.0, ["0,1"], 6.0, 40, 13)
    assert rc == (0 if rep.passed else 2)
    lines = _read(str(out / "summary.csv")).splitlines()
    assert lines[0] == ("time,set,surviving_fraction,mean_abs_gap,se_abs_gap,"
                        "n_survivors,median_abs_gap,mean_R_minus_pred_all,"
                        "se_R_minus_pred_all")
    # emitted aggregates must match the library report bit-for-bit; the set
    # column "0,1" itself contains a comma, so parse with the csv module
    final = next(csv.reader([lines[-1]]))
    assert final[1] == "0,1"
    agg = rep.aggregates["per_census"][-1]["sets"]["0,1"]
    assert float(final[3]) == agg["mean_abs_gap"]["value"]
    assert float(final[6]) == agg["median_abs_gap"]["value"]
    cen = _read(str(out / "censuses.csv")).splitlines()
    assert cen[0] == "replicate,time,alive,absorbed,count_B1,D,D_trunc"


def test_phase_command_grid_flags(tmp_path):
    out = tmp_path / "ph"
    rc = main(["phase", *SUPER, "--c-grid", "1", "--r-grid", "0.3,1.5",
               "--horizon", "40", "--replicates", "25", "--seed", "17",
               "--out", str(out)])
    assert rc == 0
    lines = _read(str(out / "summary.csv")).splitlines()
    assert lines[0] == "c,r,regime,horizon,n,survived,frequency,binomial_p,ok"
    assert len(lines) == 3
    regimes = [line.split(",")[2] for line in lines[1:]]
    assert regimes == ["subcritical", "L2-supercritical"]
