import numpy as np
import pytest

from safe_lyapunov.lyapunov import STRICT_MARGIN, ConfidenceTable
from safe_lyapunov.safe_sets import (
    ActionGrid,
    NoSafeSampleError,
    PairSet,
    dec_set_direct,
    dec_set_lipschitz,
    restrict_actions,
    safe_set_direct,
    safe_set_lipschitz,
    select_sample,
)


def full_table(n_states, n_actions, s0=None, v=None, l_dv_tau=0.0):
    t = ConfidenceTable(1)
    S, A = np.meshgrid(np.arange(n_states), np.arange(n_actions), indexing="ij")
    S, A = S.ravel(), A.ravel()
    mask = np.zeros(len(S), bool) if s0 is None else s0.contains(S, A)
    vs = None if v is None else np.asarray(v)[S]
    rows = t.track(S, A, np.zeros((len(S), 1)), mask, vs, l_dv_tau)
    return t, S, A, rows


# -- PairSet ----------------------------------------------------------------


def test_pairset_algebra():
    a = PairSet([0, 1, 1], [2, 0, 0], 3)
    b = PairSet([1, 2], [0, 1], 3)
    assert len(a) == 2
    assert (1, 0) in a and (2, 1) not in a
    assert list(a) == [(0, 2), (1, 0)]
    assert a.union(b) == PairSet([0, 1, 2], [2, 0, 1], 3)
    assert a.difference(b) == PairSet([0], [2], 3)
    assert PairSet([1], [0], 3).issubset(a)
    assert PairSet.empty(3).issubset(a)
    np.testing.assert_array_equal(a.contains([0, 0], [2, 1]), [True, False])


def test_action_grid_validation():
    g = ActionGrid.uniform(-1, 1, 5)
    assert len(g) == 5
    with pytest.raises(ValueError):
        ActionGrid(np.array([[2.0]]), np.array([-1.0]), np.array([1.0]))


# -- direct sets ------------------------------------------------------------


def test_untracked_intervals_leave_only_initial_pairs():
    v = np.array([0.0, 0.1, 0.4, 0.9])
    s0 = PairSet([1, 2], [0, 1], 2)
    t, *_ = full_table(4, 2, s0, v, l_dv_tau=0.05)
    assert dec_set_direct(t, v, 0.5, 0.1, 2) == s0


def test_upper_bounds_above_v_give_initial_pairs_only():
    v = np.array([0.0, 0.1, 0.4, 0.9])
    s0 = PairSet([1], [0], 2)
    t, S, A, rows = full_table(4, 2, s0, v, l_dv_tau=0.01)
    free = ~s0.contains(S, A)
    t.intersect(rows[free], v[S[free]], v[S[free]] + 1.0)
    assert dec_set_direct(t, v, 0.1, 0.1, 2) == s0


def test_dec_set_direct_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 1, 30)
    t, S, A, rows = full_table(30, 4)
    t.intersect(rows, -np.ones(len(rows)), rng.uniform(-0.2, 1.2, len(rows)))
    L = rng.uniform(0.5, 2.0, 30)
    D = dec_set_direct(t, v, L, 0.05, 4)
    expected = {(s, a) for s, a, r in zip(S, A, rows) if t.upper[r] - v[s] < -L[s] * 0.05 - STRICT_MARGIN}
    assert set(D) == expected


def test_safe_set_direct_examples():
    v = np.array([0.0, 0.1, 0.4, 0.9])
    s0 = PairSet([1], [0], 2)
    t, S, A, rows = full_table(4, 2)
    t.intersect(rows, v[S] - 0.1, v[S])  # identity-like dynamics: u_n = v(x)
    assert safe_set_direct(0.0, t, v, s0) == s0.union(PairSet([0, 0], [0, 1], 2))
    got = safe_set_direct(0.4, t, v, s0)
    assert set(got) == {(s, a) for s, a in zip(S, A) if v[s] <= 0.4}


def test_safe_set_direct_matches_filter():
    rng = np.random.default_rng(1)
    v = rng.uniform(0, 1, 25)
    t, S, A, rows = full_table(25, 3)
    t.intersect(rows, -np.ones(len(rows)), rng.uniform(0, 1, len(rows)))
    s0 = PairSet([0], [0], 3)
    got = safe_set_direct(0.5, t, v, s0)
    expected = {(s, a) for s, a, r in zip(S, A, rows) if v[s] <= 0.5 and t.upper[r] <= 0.5} | {(0, 0)}
    assert set(got) == expected


# -- Lipschitz-propagated sets ----------------------------------------------


def line_instance(n=11, m=3):
    X = np.linspace(0, 1, n)[:, None]
    acts = ActionGrid.uniform(-0.5, 0.5, m)
    return X, acts


def test_dec_lipschitz_ball_radius():
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    seed = (5, 1)
    L_dv, tau = 1.0, 0.02
    r = t.row(*seed)
    t.intersect([r], [-1.0], [v[5] - 0.3])  # margin m = 0.3
    D = dec_set_lipschitz(PairSet([5], [1], 3), t, v, L_dv, tau, X, acts)
    radius = 0.3 / L_dv - tau
    coords = np.hstack([X[S], acts.actions[A]])
    d = np.abs(coords - coords[r]).sum(axis=1)
    expected = {(s, a) for s, a, di in zip(S, A, d) if L_dv * di < L_dv * radius - STRICT_MARGIN}
    assert set(D) == expected
    assert seed in D and len(D) > 1


def test_dec_lipschitz_huge_constant_gives_no_generalization():
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    t.intersect(rows, v[S] - 2, v[S] - 0.5)
    seeds = PairSet([3, 7], [0, 2], 3)
    assert dec_set_lipschitz(seeds, t, v, 1e9, 0.0, X, acts) == seeds


def test_dec_lipschitz_contains_initial_pairs():
    X, acts = line_instance()
    v = X[:, 0] ** 2
    s0 = PairSet([1, 2, 3], [1, 1, 1], 3)
    L_dv, tau = 0.5, 0.01
    t, *_ = full_table(len(X), len(acts), s0, v, L_dv * tau)
    assert s0.issubset(dec_set_lipschitz(s0, t, v, L_dv, tau, X, acts))


def test_safe_lipschitz_zero_slack_admits_seed_only():
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    t.intersect([t.row(4, 1)], [0.0], [0.5])
    S_n = safe_set_lipschitz(PairSet([4], [1], 3), t, 0.5, 1.0, 1.0, X, acts, v)
    assert S_n == PairSet([4], [1], 3)


def test_safe_lipschitz_neighbourhood():
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    r = t.row(2, 1)
    t.intersect([r], [0.0], [0.1])
    c, L_v, L_f = 0.5, 2.0, 1.0
    S_n = safe_set_lipschitz(PairSet([2], [1], 3), t, c, L_v, L_f, X, acts, v)
    coords = np.hstack([X[S], acts.actions[A]])
    d = np.abs(coords - coords[r]).sum(axis=1)
    radius = (c - 0.1) / (L_v * L_f)
    expected = {(s, a) for s, a, di in zip(S, A, d) if di <= radius and v[s] <= c}
    assert set(S_n) == expected


def test_safe_lipschitz_contains_previous_set():
    rng = np.random.default_rng(2)
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    t.intersect(rows, -np.ones(len(rows)), rng.uniform(0, 0.4, len(rows)))
    c = 0.49
    inside = np.flatnonzero((v[S] <= c) & (t.upper[rows] <= c))
    prev = PairSet(S[inside], A[inside], 3)
    assert prev.issubset(safe_set_lipschitz(prev, t, c, 1.0, 1.0, X, acts, v))


def test_lipschitz_and_direct_agree_on_seeds():
    # at distance zero both constructions evaluate the same inequality
    rng = np.random.default_rng(3)
    X, acts = line_instance()
    v = X[:, 0] ** 2
    t, S, A, rows = full_table(len(X), len(acts))
    t.intersect(rows, -np.ones(len(rows)), rng.uniform(-0.3, 1.0, len(rows)))
    everything = PairSet(S, A, 3)
    L_dv, tau = 1e6, 1e-9
    direct = dec_set_direct(t, v, L_dv, tau, 3)
    lip = dec_set_lipschitz(everything, t, v, L_dv, tau, X, acts)
    assert lip == direct


# -- sampling ---------------------------------------------------------------


def test_select_sample_widest():
    t, S, A, rows = full_table(2, 1)
    t.intersect(rows, [0.0, 0.0], [0.5, 0.7])
    assert select_sample(PairSet([0, 1], [0, 0], 1), t) == ((1, 0), pytest.approx(0.7))


def test_select_sample_tie_break():
    t, S, A, rows = full_table(3, 2)
    t.intersect(rows, np.zeros(6), np.ones(6))
    pair, w = select_sample(PairSet([2, 1, 2], [1, 1, 0], 2), t)
    assert pair == (1, 1) and w == 1.0


def test_select_sample_matches_exhaustive():
    rng = np.random.default_rng(4)
    t, S, A, rows = full_table(40, 3)
    t.intersect(rows, -rng.uniform(0, 1, len(rows)), rng.uniform(0, 1, len(rows)))
    pick = rng.random(len(S)) < 0.3
    Sn = PairSet(S[pick], A[pick], 3)
    pair, w = select_sample(Sn, t)
    widths = {(s, a): t.width([t.row(s, a)])[0] for s, a in Sn}
    best = max(widths.values())
    assert w == best
    assert pair == min(p for p, wi in widths.items() if wi == best)


def test_select_sample_empty():
    with pytest.raises(NoSafeSampleError):
        select_sample(PairSet.empty(2), ConfidenceTable(1))


# -- action restriction -----------------------------------------------------


def test_restrict_wide_window_is_full_grid():
    g = ActionGrid.uniform(-1, 1, 5)
    mask, fb = restrict_actions(g, [0.3], 2.0)
    assert mask.all() and not fb.any()


def test_restrict_one_sided_at_edge():
    g = ActionGrid.uniform(-1, 1, 5)
    mask, _ = restrict_actions(g, [1.0], 0.6)
    np.testing.assert_array_equal(mask[0], [False, False, False, True, True])


def test_restrict_narrow_window():
    g = ActionGrid.uniform(-1, 1, 5)
    mask, fb = restrict_actions(g, [0.0], 0.1)
    np.testing.assert_array_equal(mask[0], [False, False, True, False, False])
    assert not fb.any()


def test_restrict_fallback_to_nearest():
    g = ActionGrid.uniform(-1, 1, 5)
    mask, fb = restrict_actions(g, [0.2], 0.1)
    np.testing.assert_array_equal(mask[0], [False, False, True, False, False])
    assert fb[0]
    with pytest.raises(ValueError):
        restrict_actions(g, [0.0], 0.0)
