import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesilc.adapt import ModelBelief
from bayesilc.experiment import (CSV_HEADER, ConfigError, ExperimentManifest, LogRow, RunLog, build_problem,
                                 compare_laws, emit_csv, format_summary, identification_error_norm, monotone,
                                 read_csv, run_experiment)
from bayesilc.ltv import LtvModel

SMALL = dict(n_steps=20, iterations=3, reps=2, seed=1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(7, 500), alpha=st.floats(0, 1e4, allow_nan=False), law=st.sampled_from(
    ["bayes_cautious", "recursive_plain", "batch_pinv", "pd_type"]), rate=st.floats(1e-3, 1.0),
    forget=st.floats(1e-3, 1.0), filt=st.booleans(), seed=st.integers(0, 2 ** 32),
    laws=st.lists(st.sampled_from(["bayes_cautious", "pd_type"]), max_size=2))
def test_manifest_round_trip(n, alpha, law, rate, forget, filt, seed, laws):
    m = ExperimentManifest(n_steps=n, alpha=alpha, law=law, rate=rate, forget=forget, filter_enabled=filt,
                           seed=seed, laws=tuple(laws), out_dir="some/dir")
    assert ExperimentManifest.from_ini(m.to_ini()) == m


def test_manifest_file_round_trip(tmp_path):
    m = ExperimentManifest(family="two-link-arm", state_dim=4, input_dim=2, adaptation="link-params")
    m.save(tmp_path / "m.ini")
    assert ExperimentManifest.load(tmp_path / "m.ini") == m


@pytest.mark.parametrize("text", [
    "[plant]\nfamily = cube\n",
    "[plant]\nn_steps = three\n",
    "[plant]\ncolour = red\n",
    "[extras]\nx = 1\n",
    "[law]\nrate = 2.0\n",
    "[filter]\nfilter_enabled = maybe\n",
    "[adaptation]\nadaptation = link-params\n",
])
def test_manifest_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentManifest.from_ini(text)


def test_arm_dimensions_enforced():
    with pytest.raises(ConfigError):
        ExperimentManifest(family="two-link-arm")


def test_zero_iterations_gives_initial_row_only():
    log = run_experiment(ExperimentManifest(**{**SMALL, "iterations": 0, "reps": 1}))
    assert [(r.rep, r.iteration) for r in log.rows] == [(0, 0)]


def test_exact_model_one_shot():
    # alpha = 0 makes the nominal model exact; R is negligible so the update is the exact inverse
    m = ExperimentManifest(n_steps=30, alpha=0.0, noise_sd=0.0, filter_enabled=False, iterations=1, reps=1,
                           r_scale=1e-12)
    rows = run_experiment(m).rows
    assert rows[0].cost > 0.1
    assert rows[1].cost < 1e-6


def test_identification_error_examples():
    rng = np.random.default_rng(0)
    model = LtvModel.from_arrays(rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 1)))
    assert identification_error_norm(model, model) == 0.0
    a = model.a_mats.copy()
    a[2, 1, 0] += 0.37
    assert identification_error_norm(LtvModel.from_arrays(a, model.b_mats), model) == pytest.approx(0.37)
    belief = ModelBelief.from_model(LtvModel.from_arrays(a + 1, model.b_mats - 2), 1.0)
    brute = np.sqrt(np.sum((a + 1 - model.a_mats) ** 2) + np.sum(4.0 * np.ones_like(model.b_mats)))
    assert identification_error_norm(belief, model) == pytest.approx(brute)
    assert np.isnan(identification_error_norm(model, None))


def _row(rep, k, cost=0.5):
    return LogRow(rep, k, cost, 0.1234567890123456, float("nan"), False, 1.5)


def test_csv_empty_log_is_header_only():
    buf = io.StringIO()
    emit_csv(RunLog([]), buf)
    assert buf.getvalue() == ",".join(CSV_HEADER) + "\n"


def test_csv_round_trip_at_twelve_digits(tmp_path):
    rows = [_row(0, 0, 1 / 3), _row(0, 1, float("inf")), LogRow(1, 0, 2e-9, np.nan, 0.25, True, 0.0)]
    emit_csv(RunLog(rows), tmp_path / "r.csv")
    back = read_csv(tmp_path / "r.csv").rows
    assert back[0].cost == float(f"{1 / 3:.12g}")
    assert back[1].cost == float("inf")
    assert back[2].diverged and back[2].final_cost == 0.25
    again = io.StringIO()
    emit_csv(RunLog(back), again)
    assert again.getvalue() == (tmp_path / "r.csv").read_text()


def test_csv_row_count():
    rows = [_row(r, k) for r in range(10) for k in range(11)]
    buf = io.StringIO()
    emit_csv(RunLog(rows), buf)
    lines = buf.getvalue().split("\n")
    assert lines[-1] == "" and len(lines) - 1 == 111


def test_csv_rejects_foreign_header():
    with pytest.raises(ConfigError):
        read_csv(io.StringIO("a,b\n1,2\n"))


def test_row_count_and_iteration_order():
    m = ExperimentManifest(**SMALL)
    log = run_experiment(m)
    for rep in range(m.reps):
        its = [r.iteration for r in log.for_rep(rep)]
        assert its == list(range(len(its)))
    completed = {rep: len(log.for_rep(rep)) for rep in range(m.reps)}
    assert len(log.rows) == sum(completed.values())
    assert all(v == m.iterations + 1 for v in completed.values() if not log.for_rep(0)[-1].diverged)


def test_epsilon_termination():
    m = ExperimentManifest(n_steps=30, alpha=0.0, noise_sd=0.0, filter_enabled=False, iterations=5, reps=1,
                           r_scale=1e-12, epsilon=1e-3)
    rows = run_experiment(m).rows
    assert rows[-1].cost < 1e-3
    assert all(r.cost >= 1e-3 for r in rows[:-1])
    assert len(rows) < 6


def test_deterministic_modulo_wall_time():
    m = ExperimentManifest(**{**SMALL, "law": "bayes_cautious", "adaptation": "lbr-discrete"})
    a, b = run_experiment(m), run_experiment(m)
    strip = [[(r.rep, r.iteration, r.cost, r.ident_err, r.diverged) for r in x.rows] for x in (a, b)]
    assert strip[0] == strip[1]


def test_workers_match_serial():
    m = ExperimentManifest(**SMALL)
    serial = [(r.rep, r.iteration, r.cost) for r in run_experiment(m).rows]
    pooled = [(r.rep, r.iteration, r.cost) for r in run_experiment(m, workers=2).rows]
    assert serial == pooled


def test_laws_share_plants_per_seed():
    m = ExperimentManifest(**SMALL)
    a = build_problem(m, 1)
    b = build_problem(m.replace(law="batch_pinv"), 1)
    assert np.array_equal(a.trajectory.refs, b.trajectory.refs)
    assert np.array_equal(a.nominal_model.a_mats, b.nominal_model.a_mats)


def test_compare_single_law_matches_run():
    m = ExperimentManifest(**SMALL)
    summary = compare_laws(m, ["recursive_plain"])
    costs = np.array(run_experiment(m).costs(m.reps))
    assert np.allclose(summary["recursive_plain"].mean, costs.mean(axis=0))


def test_compare_identical_laws_give_identical_columns():
    m = ExperimentManifest(**SMALL)
    summary = compare_laws(m, ["pd_type", "pd_type", "recursive_plain"])
    assert set(summary) == {"pd_type", "recursive_plain"}
    twice = compare_laws(m, ["pd_type"])
    assert np.array_equal(summary["pd_type"].mean, twice["pd_type"].mean)
    text = format_summary(summary)
    assert text.splitlines()[0] == "iter,pd_type_mean,pd_type_sd,recursive_plain_mean,recursive_plain_sd"
    assert text.splitlines()[-1].startswith("monotone_fraction,")


@pytest.mark.parametrize("law", ["bayes_cautious", "batch_pinv", "pd_type"])
def test_every_law_runs(law):
    log = run_experiment(ExperimentManifest(**{**SMALL, "law": law, "p_gain": 0.1}))
    assert len(log.rows) >= SMALL["reps"]


@pytest.mark.parametrize("kw", [
    dict(family="gp-oracle", n_steps=10, gp_rollouts=2, law="bayes_cautious", adaptation="lbr-discrete",
         prior_source="plant"),
    dict(family="two-link-arm", state_dim=4, input_dim=2, n_steps=40, law="bayes_cautious",
         adaptation="lbr-continuous", r_scale=1e-2),
    dict(family="two-link-arm", state_dim=4, input_dim=2, n_steps=40, law="bayes_cautious",
         adaptation="link-params", link_samples=10, r_scale=1e-2),
])
def test_families_and_adaptations_run(kw):
    m = ExperimentManifest(**{**SMALL, "iterations": 2, "reps": 1, **kw})
    log = run_experiment(m)
    assert log.rows[0].iteration == 0
    if m.family == "two-link-arm":
        assert np.isfinite(log.rows[0].final_cost)


def test_monotone_helper():
    assert monotone([3, 2, 2, 1])
    assert not monotone([3, 2, 2.5])
    assert monotone([3, 2, 2.05], slack=0.1)
    assert not monotone([3, np.inf])
    assert monotone([1, 5, 4], start=1)
