import numpy as np
import pytest
from hypothesis import given, strategies as st

from semcomm import channel as ch
from semcomm import evaluation as ev
from semcomm import semantics
from semcomm import training as T
from semcomm.errors import ConfigurationError

SEEDS = {"data": 0, "init": 3, "policy": 0, "channel": 0}


@pytest.fixture(scope="module")
def trained():
    src = semantics.GmSourceSpec(n_agents=2)
    ds = semantics.gm_dataset(src, 2000, np.random.default_rng(0))
    arch = T.Architecture(2, 2, 4, n_tx=4, n_feat=16, n_rx=16)
    st_ = T.train_model_aware(T.init_state(arch, SEEDS), ds, T.Schedule(n_epochs=20, batch_size=100),
                              ch.ChannelConfig())
    return src, ds, st_


def test_default_grid_spans_training_range():
    assert ev.DEFAULT_SNR_GRID == (-4.0, -2.0, 0.0, 2.0, 4.0, 6.0)


def test_untrained_decoder_is_at_chance():
    # K=10 with overwhelming within-class noise: the observation carries no label information
    src = semantics.GmSourceSpec(n_class=10, obs_dim=4, n_agents=2, class_std=1e4)
    arch = T.Architecture(2, 2, 10, n_tx=4, n_feat=16, n_rx=16)
    state = T.init_state(arch, SEEDS)
    row = ev.evaluate_point(state.enc, state.dec, src, 6.0, 10_000, np.random.default_rng(1))
    assert abs(row.error_rate - 0.9) < 0.02
    assert row.ce_loss > np.log(10) - 0.5


def test_sweep_sorted_bounded_deterministic(trained):
    src, _, state = trained
    grid = [6.0, -4.0, 2.0, 0.0]
    a = ev.sweep_snr(state, src, grid, 3000, np.random.default_rng(4))
    b = ev.sweep_snr(state, src, grid, 3000, np.random.default_rng(4))
    assert [r.snr_db for r in a.rows] == sorted(grid)
    assert a.rows == b.rows
    assert all(0.0 <= r.error_rate <= 1.0 and r.n_eval_samples == 3000 for r in a.rows)
    # more SNR, fewer mistakes, for a trained system
    assert a.at(6.0).error_rate < a.at(-4.0).error_rate
    with pytest.raises(KeyError):
        a.at(1.0)


def test_infinite_snr_matches_noiseless_classifier(trained):
    src, _, state = trained
    a = ev.evaluate_point(state.enc, state.dec, src, float("inf"), 5000, np.random.default_rng(2))
    joint = semantics.sample_joint(src, 5000, np.random.default_rng(2))
    from semcomm import receiver as rx, transmitter as tx
    probs = rx.decode(state.dec, tx.transmitter_forward(state.enc, joint.parts).x_bar)
    assert a.error_rate == np.mean(rx.classify(probs) != joint.labels)


def test_n_eval_must_be_positive(trained):
    src, _, state = trained
    with pytest.raises(ConfigurationError):
        ev.sweep_snr(state, src, [0.0], 0)
    with pytest.raises(ConfigurationError):
        ev.evaluate_point(state.enc, state.dec, src, 0.0, 0, np.random.default_rng(0))


def test_dataset_source_and_bad_source(trained):
    _, ds, state = trained
    row = ev.evaluate_point(state.enc, state.dec, ds, 6.0, 500, np.random.default_rng(0))
    assert row.n_eval_samples == 500
    big = ev.draw_eval(ds, 5000, np.random.default_rng(0))
    assert big.labels.shape == (5000,)
    with pytest.raises(ConfigurationError):
        ev.draw_eval([1, 2], 3, np.random.default_rng(0))


def test_chunked_evaluation_counts_every_sample(trained, monkeypatch):
    src, _, state = trained
    monkeypatch.setattr(ev, "EVAL_CHUNK", 700)
    row = ev.evaluate_point(state.enc, state.dec, src, 0.0, 2500, np.random.default_rng(0))
    assert row.n_eval_samples == 2500 and 0 <= row.error_rate <= 1


def test_ce_lower_bounded_by_bayes(trained):
    src, _, state = trained
    orc = ev.bayes_oracle(src, 100_000, np.random.default_rng(7))
    for snr in (float("inf"), 6.0, -4.0):
        row = ev.evaluate_point(state.enc, state.dec, src, snr, 20_000, np.random.default_rng(8))
        assert row.ce_loss >= orc["ce_loss"] - 3 * orc["ce_se"]


def test_bayes_oracle_matches_closed_form_two_class():
    # one bit on a 1-d line: error = Phi(-1/std)
    from scipy.stats import norm
    src = semantics.GmSourceSpec(n_class=2, obs_dim=1, n_agents=1, class_std=0.8)
    orc = ev.bayes_oracle(src, 400_000, np.random.default_rng(0))
    p = norm.cdf(-1 / 0.8)
    assert abs(orc["error_rate"] - p) < 4 * np.sqrt(p * (1 - p) / 400_000)
    exact = ev.bayes_oracle(semantics.GmSourceSpec(n_class=2, obs_dim=1, n_agents=1, class_std=0.0), 10,
                            np.random.default_rng(0))
    assert exact["error_rate"] == 0 and exact["ce_loss"] == 0


def _trace(losses, start=1.0):
    return [(start + i, "x", c) for i, c in enumerate(losses)]


@given(st.lists(st.lists(st.floats(0, 10), min_size=3, max_size=3), min_size=1, max_size=5))
def test_trace_band_contains_mean(rows):
    tr = ev.ConvergenceTrace.from_traces([_trace(r) for r in rows])
    assert np.all(tr.min <= tr.mean + 1e-12) and np.all(tr.mean <= tr.max + 1e-12)


def test_trace_truncates_to_common_length_and_checks_grid():
    tr = ev.ConvergenceTrace.from_traces([_trace([3, 2, 1]), _trace([3, 2])])
    assert tr.losses.shape == (2, 2)
    with pytest.raises(ConfigurationError):
        ev.ConvergenceTrace.from_traces([_trace([1, 2]), _trace([1, 2], start=0.5)])


def test_first_crossing_uses_mean():
    tr = ev.ConvergenceTrace.from_traces([_trace([3, 1, 1]), _trace([3, 3, 1])])
    assert tr.first_crossing(1.5) == 3.0
    assert tr.first_crossing(2.0) == 2.0
    assert tr.first_crossing(0.5) is None


def test_compare_ratio_and_lower_bound():
    a = ev.ConvergenceTrace.from_traces([_trace([3, 1, 1, 1])])
    b = ev.ConvergenceTrace.from_traces([_trace([3, 3, 3, 1])])
    c = ev.compare_traces(a, b, 1.5)
    assert (c.epoch_a, c.epoch_b, c.ratio, c.lower_bound) == (2.0, 4.0, 2.0, False)
    never = ev.ConvergenceTrace.from_traces([_trace([3, 3, 3, 3])])
    c = ev.compare_traces(a, never, 1.5)
    assert c.lower_bound and c.epoch_b is None and c.ratio == 2.0
    c = ev.compare_traces(never, a, 1.5)
    assert c.ratio is None and not c.lower_bound


def test_self_comparison_ratio_near_one(trained):
    src, ds, _ = trained
    arch = T.Architecture(2, 2, 4, n_tx=4, n_feat=16, n_rx=16)

    def run(r):
        seeds = {"data": r, "init": 10 + r, "policy": r, "channel": 20 + r}
        return T.train_model_aware(T.init_state(arch, seeds), ds, T.Schedule(n_epochs=25, batch_size=100),
                                   ch.ChannelConfig()).trace

    threshold = 0.8
    first = ev.convergence_compare(run, run, 3, threshold)
    assert first.ratio == 1.0
    # same configuration, disjoint seeds
    other = ev.convergence_compare(run, lambda r: run(r + 5), 3, threshold)
    assert 0.8 <= other.ratio <= 1.25
    with pytest.raises(ConfigurationError):
        ev.convergence_compare(run, run, 0, 1.0)


def test_trace_csv(tmp_path):
    tr = ev.ConvergenceTrace.from_traces([_trace([3, 1]), _trace([2, 1])])
    tr.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["epoch,run,ce_loss", "1.0,0,3.0", "2.0,0,1.0", "1.0,1,2.0", "2.0,1,1.0"]


def test_sweep_csv(tmp_path, trained):
    src, _, state = trained
    res = ev.sweep_snr(state, src, [0.0, 2.0], 100, np.random.default_rng(0))
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "snr_db,error_rate,ce_loss,n_eval_samples" and len(lines) == 3
    assert lines[1].startswith("0.0,") and lines[1].endswith(",100")


def test_moment_merge_matches_numpy():
    rows = np.random.default_rng(0).standard_normal((1000, 3)) * [1, 2, 3] + 5
    acc = None
    for block in np.array_split(rows, 7):
        acc = ev._combine(acc, block)
    n, mean, m2 = acc
    np.testing.assert_allclose(mean, rows.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(m2 / (n - 1), rows.var(axis=0, ddof=1), rtol=1e-10)


def test_variance_probe(trained, tmp_path):
    src, _, state = trained
    res = ev.variance_probe(state.enc, state.dec, src, ["spg", "reparam", "reinforce_channel"], [0.05, 0.15], 2000,
                            ch.ChannelConfig(), np.random.default_rng(0))
    assert [(r.estimator, r.sigma_pi2) for r in res.rows] == [
        ("spg", 0.05), ("spg", 0.15), ("reparam", 0.05), ("reparam", 0.15), ("reinforce_channel", 0.0)]
    assert all(r.grad_var_trace >= 0 and not r.degenerate for r in res.rows)
    assert res.trace("reparam", 0.15) < res.trace("spg", 0.15)
    res.to_csv(tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "estimator,sigma_pi2,grad_var_trace,n_samples"
    with pytest.raises(KeyError):
        res.trace("spg", 0.5)


def test_variance_probe_single_sample_is_degenerate(trained):
    src, _, state = trained
    res = ev.variance_probe(state.enc, state.dec, src, ["spg", "decoder_supervised"], [0.15], 1, ch.ChannelConfig(),
                            np.random.default_rng(0))
    assert all(r.degenerate and r.grad_var_trace == 0.0 and r.n_samples == 1 for r in res.rows)


def test_unknown_estimator(trained):
    src, _, state = trained
    with pytest.raises(ConfigurationError):
        ev.estimator_moments("magic", state.enc, state.dec, src, 0.1, ch.ChannelConfig(), 10, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        ev.estimator_moments("spg", state.enc, state.dec, src, 0.1, ch.ChannelConfig(), 0, np.random.default_rng(0))
