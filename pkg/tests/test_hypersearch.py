import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinodal_kbnn.hypersearch import (
    Candidate,
    SearchConfig,
    SearchError,
    SearchSpace,
    enumerate_candidates,
    kfold_split,
    read_log,
    run_search,
    variable_count,
    write_log,
)

TINY = SearchSpace(n_hl=(1,), n_npl=(2, 4))


def test_tiny_space_counts():
    got = enumerate_candidates(TINY, 1000)
    assert [v for _, v in got] == [15, 29]
    # the same space over six inputs
    six = SearchSpace(n_hl=(1,), n_npl=(2, 4), input_shape=(6,))
    assert [v for _, v in enumerate_candidates(six, 1000)] == [17, 33]


def test_dataset_size_filter():
    assert [v for _, v in enumerate_candidates(TINY, 20)] == [15]
    six = SearchSpace(n_hl=(1,), n_npl=(2, 4), input_shape=(6,))
    assert [v for _, v in enumerate_candidates(six, 20)] == [17]
    with pytest.raises(SearchError):
        enumerate_candidates(TINY, 10)


def test_variable_count_matches_known_nets():
    assert variable_count(Candidate("dense", 1, 76), (5,)) == 533
    assert variable_count(Candidate("dense", 6, 46), (5,)) == 11133


def test_conv_candidates_are_counted():
    space = SearchSpace(kind="conv", n_hl=(1, 2), n_fpl=(2, 3), input_shape=(9, 9, 1))
    got = enumerate_candidates(space, 10**6)
    vs = [v for _, v in got]
    assert vs == sorted(vs) and len(got) == 4
    net = got[0][0].build((9, 9, 1))
    assert net.count_variables() == got[0][1]


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 200), st.integers(2, 5), st.integers(0, 10**6))
def test_kfold_partition(n, K, seed):
    folds = kfold_split(n, K, seed)
    allidx = np.concatenate(folds)
    assert len(folds) == K
    assert np.array_equal(np.sort(allidx), np.arange(n))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_too_small():
    with pytest.raises(SearchError):
        kfold_split(3, 5, 0)


def _fake_trainer(cand, x_tr, y_tr, x_val, y_val, seed):
    # deterministic bowl in log-size with a little fold noise
    v = variable_count(cand, (5,))
    return (math.log(v) - math.log(400)) ** 2 + 1e-3 * (seed % 7)


def _data(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 5)), rng.standard_normal(n)


def test_single_candidate_space():
    x, y = _data(50)
    space = SearchSpace(n_hl=(1,), n_npl=(2,))
    res = run_search(space, x, y, SearchConfig(stages=2, samples_per_stage=5), trainer=_fake_trainer)
    assert res.best.candidate == Candidate("dense", 1, 2)
    assert res.trials[1].cached and res.trials[1].fold_losses == res.trials[0].fold_losses


def test_search_properties_with_fake_trainer():
    x, y = _data()
    space = SearchSpace(n_hl=(1, 2, 3), n_npl=tuple(range(2, 41, 2)))
    res = run_search(space, x, y, SearchConfig(stages=3, samples_per_stage=12), trainer=_fake_trainer)
    ok = [t for t in res.trials if t.status == "ok"]
    assert res.best.mean_loss == min(t.mean_loss for t in ok)
    for (lo0, hi0), (lo1, hi1) in zip(res.bounds, res.bounds[1:]):
        assert lo0 <= lo1 <= hi1 <= hi0
    for t in res.trials:
        assert len(t.fold_losses) == 5
    assert abs(math.log(res.best.v_total) - math.log(400)) < 0.5


def test_failed_trials_are_logged(tmp_path):
    x, y = _data(100)

    def flaky(cand, *a):
        if cand.width == 4:
            raise RuntimeError("boom")
        if cand.width == 6:
            return float("nan")
        return 1.0 / cand.width

    space = SearchSpace(n_hl=(1,), n_npl=(2, 4, 6, 8))
    res = run_search(space, x, y, SearchConfig(stages=1, samples_per_stage=4), trainer=flaky)
    status = {t.candidate.width: t.status for t in res.trials}
    assert status[4] == "failed: RuntimeError" and status[6] == "failed: FloatingPointError"
    assert res.best.candidate.width == 8
    rows = read_log(write_log(res, tmp_path / "log.csv"))
    assert [r["status"] for r in rows] == [t.status for t in res.trials]
    assert float(rows[-1]["mean_loss"]) == res.trials[-1].mean_loss


def test_all_failed_raises():
    x, y = _data(50)

    def broken(*a):
        raise ValueError

    with pytest.raises(SearchError):
        run_search(TINY, x, y, SearchConfig(stages=1, samples_per_stage=2), trainer=broken)


def test_config_validation():
    with pytest.raises(SearchError):
        SearchConfig(top_fraction=0)
    with pytest.raises(SearchError):
        SearchConfig(K=1)
    with pytest.raises(SearchError):
        SearchSpace(kind="tree")


def test_default_trainer_and_workers_agree(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((60, 5))
    y = np.tanh(x[:, 0]) + 0.5 * x[:, 1]
    cfg = SearchConfig(stages=2, samples_per_stage=2, K=3, epochs_per_trial=15, seed=4)
    a = run_search(TINY, x, y, cfg)
    b = run_search(TINY, x, y, cfg, workers=2)
    assert write_log(a, tmp_path / "a.csv").read_bytes() == write_log(b, tmp_path / "b.csv").read_bytes()
