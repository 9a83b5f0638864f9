import numpy as np
import pytest

from balancelab.analysis import (
    TRIAL_TICKS, TrialRecord, eigh_symmetric, mean_trajectory, metric_ef,
    metric_ez, pca_project, rms_step_change, second_overshoot_ratio,
)


def make_trial(z_x, tensions=None, condition="c"):
    n = TRIAL_TICKS
    states = np.zeros((n, 6))
    states[:, 0] = z_x
    if tensions is not None:
        states[:, 2:4] = tensions
    return TrialRecord(condition=condition, t=np.arange(n) * 0.2,
                       states=states, controls=np.zeros(n))


class TestMetricEz:
    def test_zero_trajectories(self):
        assert metric_ez([make_trial(np.zeros(TRIAL_TICKS))]) == 0.0

    def test_constant_after_offset_removal(self):
        # z jumps to 0.1 after the first tick: 29 ticks contribute 0.1 each
        z = np.full(TRIAL_TICKS, 0.1)
        z[0] = 0.0
        assert metric_ez([make_trial(z)]) == pytest.approx(2.9)

    def test_spec_flat_case(self):
        # z identically 0.1 relative to its own start is identically zero;
        # shift the origin instead: z = start + 0.1 from tick 0 onward
        z = 0.25 + np.zeros(TRIAL_TICKS)
        z[1:] += 0.1
        # offset-removed |z| = 0.1 for 29 ticks
        assert metric_ez([make_trial(z)]) == pytest.approx(2.9)

    def test_offset_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=TRIAL_TICKS)
        a = metric_ez([make_trial(z)])
        b = metric_ez([make_trial(z + 0.7)])
        assert a == pytest.approx(b, abs=1e-12)

    def test_average_across_trials(self):
        z1 = np.zeros(TRIAL_TICKS)
        z2 = np.zeros(TRIAL_TICKS)
        z2[1:] = 0.2
        got = metric_ez([make_trial(z1), make_trial(z2)])
        assert got == pytest.approx(0.5 * (0.0 + 29 * 0.2))

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            TrialRecord("c", np.zeros(10), np.zeros((10, 6)), np.zeros(10))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metric_ez([])


class TestMetricEf:
    def test_constant_tensions_zero(self):
        tr = make_trial(np.zeros(TRIAL_TICKS), tensions=np.full((TRIAL_TICKS, 2), 7.0))
        assert metric_ef(tr) == 0.0

    def test_alternating_single_muscle(self):
        # one muscle flipping 0/1 each tick: every ||df|| = 1 -> RMS 1
        f = np.zeros((TRIAL_TICKS, 2))
        f[::2, 0] = 1.0
        tr = make_trial(np.zeros(TRIAL_TICKS), tensions=f)
        assert metric_ef(tr) == pytest.approx(1.0)

    def test_rms_hand_case(self):
        # steps of norm 3 and 4 -> sqrt((9 + 16) / 2)
        series = np.array([[0.0], [3.0], [7.0]])
        assert rms_step_change(series) == pytest.approx(np.sqrt(12.5))


class TestSecondOvershoot:
    def test_monotone_decay_has_none(self):
        z = np.exp(-np.linspace(0, 5, TRIAL_TICKS))
        assert second_overshoot_ratio(z) == 0.0

    def test_damped_oscillation(self):
        t = np.linspace(0, 3, TRIAL_TICKS)
        z = np.exp(-t) * np.cos(4 * t)
        ratio = second_overshoot_ratio(z)
        assert 0.0 < ratio < 1.0

    def test_mean_trajectory_offsets(self):
        trials = [make_trial(np.linspace(0.5, 1.0, TRIAL_TICKS)),
                  make_trial(np.linspace(-0.5, 0.0, TRIAL_TICKS))]
        mt = mean_trajectory(trials)
        assert mt[0] == 0.0
        assert mt[-1] == pytest.approx(0.5)


class TestPca:
    def test_collinear_points_second_axis_zero(self):
        pts = np.outer(np.arange(5, dtype=float), [1.0, 2.0])
        coords, _ = pca_project(pts)
        np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-10)

    def test_2d_input_preserves_distances(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(8, 2))
        coords, _ = pca_project(pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d1 = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-10)

    def test_known_triangle(self):
        # 3-4-5 right triangle; distances computed by hand
        pts = np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]])
        coords, _ = pca_project(pts)
        d = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        assert d[0, 1] == pytest.approx(3.0, abs=1e-10)
        assert d[1, 2] == pytest.approx(4.0, abs=1e-10)
        assert d[0, 2] == pytest.approx(5.0, abs=1e-10)

    def test_rank_zero_set_maps_to_origin(self):
        pts = np.ones((4, 3))
        coords, _ = pca_project(pts)
        np.testing.assert_array_equal(coords, np.zeros((4, 2)))

    def test_sign_convention(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(10, 4))
        _, comps = pca_project(pts)
        for k in range(comps.shape[1]):
            lead = np.argmax(np.abs(comps[:, k]))
            assert comps[lead, k] > 0

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            pca_project(np.zeros((1, 2)))


class TestEigh:
    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_matches_numpy_linalg(self, n):
        # numpy's eigh is the independent oracle for the in-house solver
        rng = np.random.default_rng(n)
        m = rng.normal(size=(n, n))
        a = (m + m.T) / 2
        w, v = eigh_symmetric(a)
        w_np, _ = np.linalg.eigh(a)
        np.testing.assert_allclose(w, w_np, atol=1e-9)
        # eigenvector property: A v = w v
        for k in range(n):
            np.testing.assert_allclose(a @ v[:, k], w[k] * v[:, k], atol=1e-8)
