import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coded_cache.predictor import assign_clusters, init_centers_kmeanspp, normalize_window
from coded_cache.trace import (
    DemandTrace,
    TraceParseError,
    allocate_to_users,
    load_per_user,
    load_trace,
    save_trace,
    synth_trace,
    top_f_filter,
)

counts = st.lists(st.lists(st.integers(0, 50), min_size=3, max_size=3), min_size=1, max_size=6)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_dense_and_missing_pairs(tmp_path):
    p = write(tmp_path / "t.csv", "slot,file_id,count\n0,7,3\n1,2,5\n1,7,1\n")
    tr = load_trace(p)
    assert (tr.slots, tr.files) == (2, 2)
    np.testing.assert_array_equal(tr.file_ids, [2, 7])
    np.testing.assert_array_equal(tr.aggregate, [[0, 3], [5, 1]])


def test_load_full_size_trace(tmp_path):
    rng = np.random.default_rng(0)
    agg = rng.integers(0, 20, (600, 50))
    save_trace(DemandTrace(agg), tmp_path / "t.csv")
    tr = load_trace(tmp_path / "t.csv")
    assert (tr.slots, tr.files) == (600, 50)


def test_empty_body_gives_empty_trace(tmp_path):
    assert load_trace(write(tmp_path / "a.csv", "slot,file_id,count\n")).slots == 0
    assert load_trace(write(tmp_path / "b.csv", "")).slots == 0


@pytest.mark.parametrize(
    "body, line",
    [
        ("slot,file_id,count\n0,1,-1\n", "line 2"),
        ("slot,file_id,count\n0,1,2\n0,x,2\n", "line 3"),
        ("slot,file_id,count\n0,1\n", "line 2"),
        ("slot,file,count\n0,1,1\n", "line 1"),
    ],
)
def test_parse_errors_name_the_line(tmp_path, body, line):
    with pytest.raises(TraceParseError, match=line):
        load_trace(write(tmp_path / "bad.csv", body))


def test_non_contiguous_slots_rejected(tmp_path):
    with pytest.raises(TraceParseError, match="contiguous"):
        load_trace(write(tmp_path / "gap.csv", "slot,file_id,count\n0,1,1\n2,1,1\n"))


@settings(max_examples=30, deadline=None)
@given(counts, st.integers(1, 4), st.integers(0, 1000))
def test_save_load_round_trip(tmp_path_factory, rows, n_users, seed):
    d = tmp_path_factory.mktemp("rt")
    tr = allocate_to_users(DemandTrace(np.array(rows)), n_users, seed)
    save_trace(tr, d / "agg.csv", d / "users.csv")
    back = load_per_user(d / "users.csv", load_trace(d / "agg.csv"), n_users)
    np.testing.assert_array_equal(back.aggregate, tr.aggregate)
    np.testing.assert_array_equal(back.per_user, tr.per_user)
    assert b"\r\n" not in (d / "agg.csv").read_bytes()


def test_top_f_tie_break_prefers_smaller_id():
    agg = np.array([[5, 9, 9, 1]])
    tr = top_f_filter(DemandTrace(agg, file_ids=np.array([10, 11, 12, 13])), 2)
    np.testing.assert_array_equal(tr.file_ids, [11, 12])
    one = top_f_filter(DemandTrace(np.array([[1, 7, 3]])), 1)
    np.testing.assert_array_equal(one.file_ids, [1])


def test_top_f_identity_and_errors():
    tr = DemandTrace(np.array([[1, 2, 3]]))
    np.testing.assert_array_equal(top_f_filter(tr, 3).aggregate, tr.aggregate)
    with pytest.raises(ValueError):
        top_f_filter(tr, 4)


def test_allocation_single_user_gets_everything():
    tr = allocate_to_users(DemandTrace(np.array([[10]])), 1, 0)
    assert tr.per_user[0, 0, 0] == 10


@given(counts, st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_allocation_conserves_counts(rows, k, seed):
    tr = allocate_to_users(DemandTrace(np.array(rows)), k, seed)
    np.testing.assert_array_equal(tr.per_user.sum(axis=1), tr.aggregate)
    assert tr.per_user.min() >= 0


def test_allocation_is_balanced_for_two_users():
    tr = allocate_to_users(DemandTrace(np.array([[10000]])), 2, 4)
    assert 4000 <= tr.per_user[0, 0, 0] <= 6000


def test_allocation_rejects_no_users():
    with pytest.raises(ValueError):
        allocate_to_users(DemandTrace(np.array([[1]])), 0)


def test_inconsistent_per_user_rejected():
    with pytest.raises(ValueError):
        DemandTrace(np.array([[3]]), per_user=np.array([[[1], [1]]]))
    with pytest.raises(ValueError):
        DemandTrace(np.array([[-1]]))


# ------------------------------------------------------------------ synthetic


def test_synth_shapes_and_determinism():
    a = synth_trace(20, 100, 5, 3, rng_seed=9)
    b = synth_trace(20, 100, 5, 3, rng_seed=9)
    c = synth_trace(20, 100, 5, 3, rng_seed=10)
    assert a.aggregate.shape == (100, 20) and a.per_user.shape == (100, 5, 20)
    np.testing.assert_array_equal(a.per_user, b.per_user)
    assert not np.array_equal(a.aggregate, c.aggregate)


def test_synth_noise_free_is_periodic():
    tr = synth_trace(12, 96, 3, 2, period=24, noise_level=0.0, rng_seed=1)
    np.testing.assert_array_equal(tr.aggregate[24:], tr.aggregate[:-24])


def test_synth_late_releases_start_from_zero():
    tr = synth_trace(40, 300, 4, 4, release_fraction=0.5, rng_seed=2)
    first = np.argmax(tr.aggregate > 0, axis=0)
    late = first >= 30
    assert late.sum() >= 15
    for f in np.flatnonzero(late):
        assert tr.aggregate[: first[f], f].sum() == 0


def window_correlation(trace, i, j, rho=12):
    """Correlation of the stacked normalised windows of two files, live slots only."""
    agg = trace.aggregate.astype(float)
    wins = sliding_window_view(agg, rho, axis=0)  # (slots, files, rho)
    norm, _ = normalize_window(wins)
    live = (wins[:, i].min(axis=1) > 0) & (wins[:, j].min(axis=1) > 0)
    return np.corrcoef(norm[live, i].ravel(), norm[live, j].ravel())[0, 1]


def test_synth_same_pattern_files_are_correlated():
    tr = synth_trace(50, 600, 20, 4, period=24, noise_level=0.1, rng_seed=0, switch_every=0.0)
    pairs = [(i, j) for i in range(50) for j in range(i + 1, 50) if tr.patterns[i] == tr.patterns[j]]
    assert min(window_correlation(tr, i, j) for i, j in pairs) > 0.8


def test_synth_switching_changes_profiles_but_not_without_it():
    kw = dict(noise_level=0.0, release_fraction=0.0, rng_seed=3)
    still = synth_trace(8, 240, 2, 2, switch_every=0.0, **kw)
    # noise-free traces ignore switching, so both are the same periodic trace
    np.testing.assert_array_equal(still.aggregate, synth_trace(8, 240, 2, 2, switch_every=20.0, **kw).aggregate)
    a = synth_trace(8, 600, 2, 2, switch_every=50.0, drift=0.0, release_fraction=0.0, rng_seed=3)
    b = synth_trace(8, 600, 2, 2, switch_every=0.0, drift=0.0, release_fraction=0.0, rng_seed=3)
    # same first slots, different later ones once files have moved
    first = slice(0, 10)
    assert np.abs(a.aggregate[first] - b.aggregate[first]).sum() < np.abs(a.aggregate[-100:] - b.aggregate[-100:]).sum()


def test_synth_single_pattern_forms_one_cluster():
    tr = synth_trace(10, 60, 2, 1, rng_seed=4, release_fraction=0.0)
    norm, _ = normalize_window(tr.aggregate[20:32].T)
    model = init_centers_kmeanspp(norm, 1, rng_seed=0)
    assert set(assign_clusters(model, norm)) == {0}


def test_synth_rejects_too_many_patterns():
    with pytest.raises(ValueError):
        synth_trace(3, 10, 1, 4)
