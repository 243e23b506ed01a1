"""Contact matrices from static positions and random-walk traces."""

import numpy as np
import pytest

from d2dcache import (
    ContactMatrix,
    MobilityConfig,
    MobilityError,
    contacts_from_trajectory,
    load_contacts,
    random_walk_contacts,
    save_contacts,
    simulate_random_walk,
    static_contacts,
)


class TestContactMatrix:
    def test_fields_and_size(self):
        cm = ContactMatrix(np.eye(3), 30.0)
        assert cm.K == 3
        assert cm.r_c == 30.0

    def test_rejects_non_square(self):
        with pytest.raises(MobilityError, match="square"):
            ContactMatrix(np.ones((2, 3)), 1.0)

    def test_rejects_asymmetric(self):
        a = np.eye(2)
        a[0, 1] = 0.5
        with pytest.raises(MobilityError, match="symmetric"):
            ContactMatrix(a, 1.0)

    def test_rejects_out_of_range(self):
        a = np.eye(2)
        a[0, 1] = a[1, 0] = 1.5
        with pytest.raises(MobilityError, match=r"\[0, 1\]"):
            ContactMatrix(a, 1.0)

    def test_rejects_bad_diagonal(self):
        with pytest.raises(MobilityError, match="diagonal"):
            ContactMatrix(np.zeros((2, 2)), 1.0)

    def test_array_is_immutable(self):
        cm = ContactMatrix(np.eye(2), 1.0)
        with pytest.raises(ValueError):
            cm.a[0, 1] = 1.0


class TestStaticContacts:
    def test_hand_geometry(self):
        # three collinear users spaced exactly r_c apart: adjacent pairs
        # touch (boundary is inclusive), the outer pair does not
        pos = [[0.0, 0.0], [30.0, 0.0], [60.0, 0.0]]
        cm = static_contacts(pos, 30.0)
        expected = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
        assert np.array_equal(cm.a, expected)

    def test_just_outside_radius(self):
        cm = static_contacts([[0.0, 0.0], [30.0 + 1e-9, 0.0]], 30.0)
        assert cm.a[0, 1] == 0.0

    def test_coincident_users(self):
        cm = static_contacts([[5.0, 5.0], [5.0, 5.0]], 0.0)
        assert cm.a[0, 1] == 1.0

    def test_symmetric_and_unit_diagonal(self, gen):
        pos = gen.uniform(0.0, 100.0, (12, 2))
        cm = static_contacts(pos, 20.0)
        assert np.array_equal(cm.a, cm.a.T)
        assert np.all(np.diag(cm.a) == 1.0)
        assert set(np.unique(cm.a)) <= {0.0, 1.0}

    def test_rejects_bad_shape(self):
        with pytest.raises(MobilityError, match=r"\(K, 2\)"):
            static_contacts([[1.0, 2.0, 3.0]], 10.0)

    def test_rejects_negative_radius(self):
        with pytest.raises(MobilityError, match="nonnegative"):
            static_contacts([[0.0, 0.0]], -1.0)


class TestMobilityConfig:
    def test_sample_count(self):
        assert MobilityConfig(period=7200.0, time_step=1.0).samples == 7200
        assert MobilityConfig(period=10.0, leg_duration=5.0, time_step=2.5).samples == 4

    @pytest.mark.parametrize("kwargs, msg", [
        (dict(area_side=0.0), "area side"),
        (dict(v_max=-1.0), "v_max"),
        (dict(period=0.0), "positive"),
        (dict(leg_duration=-3.0), "positive"),
        (dict(time_step=0.0), "positive"),
        (dict(period=50.0, leg_duration=60.0), "leg duration"),
        (dict(leg_duration=2.0, time_step=3.0), "time step"),
    ])
    def test_rejects_bad_parameters(self, kwargs, msg):
        with pytest.raises(MobilityError, match=msg):
            MobilityConfig(**kwargs)


class TestRandomWalk:
    CFG = MobilityConfig(area_side=200.0, v_max=3.0, period=60.0,
                         leg_duration=10.0, time_step=2.0, seed=11)

    def test_shape_and_bounds(self):
        traj = simulate_random_walk(self.CFG, 7)
        assert traj.shape == (self.CFG.samples, 7, 2)
        assert traj.min() >= 0.0
        assert traj.max() <= self.CFG.area_side

    def test_deterministic(self):
        a = simulate_random_walk(self.CFG, 5)
        b = simulate_random_walk(self.CFG, 5)
        assert np.array_equal(a, b)

    def test_seed_changes_trajectory(self):
        a = simulate_random_walk(self.CFG, 5)
        other = MobilityConfig(**{**self.CFG.__dict__, "seed": 12})
        assert not np.array_equal(a, simulate_random_walk(other, 5))

    def test_first_sample_is_start(self):
        # at t = 0 nobody has moved yet, so sample 0 gives the initial drop
        traj = simulate_random_walk(self.CFG, 4)
        frozen = MobilityConfig(**{**self.CFG.__dict__, "v_max": 0.0})
        still = simulate_random_walk(frozen, 4)
        assert np.array_equal(traj[0], still[0])

    def test_zero_speed_matches_static(self):
        cfg = MobilityConfig(area_side=150.0, v_max=0.0, period=40.0,
                             leg_duration=8.0, time_step=4.0, seed=3)
        traj = simulate_random_walk(cfg, 6)
        assert np.array_equal(traj.min(axis=0), traj.max(axis=0))
        walked = random_walk_contacts(cfg, 6, 25.0)
        static = static_contacts(traj[0], 25.0)
        assert np.array_equal(walked.a, static.a)

    def test_displacement_bounded_by_speed(self):
        # between consecutive samples nobody travels farther than
        # v_max * time_step (reflection only shortens displacements)
        traj = simulate_random_walk(self.CFG, 9)
        step = np.sqrt(((traj[1:] - traj[:-1]) ** 2).sum(axis=2))
        assert step.max() <= self.CFG.v_max * self.CFG.time_step + 1e-9

    def test_rejects_zero_users(self):
        with pytest.raises(MobilityError, match="user"):
            simulate_random_walk(self.CFG, 0)


class TestContactsFromTrajectory:
    def test_hand_fraction(self):
        # user 1 is inside the radius at samples 0 and 2 only -> 2/4
        traj = np.zeros((4, 2, 2))
        traj[:, 1, 0] = [10.0, 50.0, 20.0, 70.0]
        cm = contacts_from_trajectory(traj, 30.0)
        assert cm.a[0, 1] == 0.5
        assert cm.a[1, 0] == 0.5
        assert np.all(np.diag(cm.a) == 1.0)

    def test_matches_per_sample_rescan(self, gen):
        traj = gen.uniform(0.0, 60.0, (7, 4, 2))
        r_c = 25.0
        cm = contacts_from_trajectory(traj, r_c)
        for k in range(4):
            for m in range(4):
                if k == m:
                    continue
                hits = sum(
                    float(np.hypot(*(traj[s, k] - traj[s, m])) <= r_c)
                    for s in range(7)
                )
                assert cm.a[k, m] == pytest.approx(hits / 7.0, abs=1e-12)

    def test_entries_are_sample_fractions(self, gen):
        traj = gen.uniform(0.0, 80.0, (12, 5, 2))
        cm = contacts_from_trajectory(traj, 30.0)
        scaled = cm.a * 12
        off = ~np.eye(5, dtype=bool)
        assert np.abs(scaled[off] - np.round(scaled[off])).max() < 1e-9

    def test_boundary_distance_counts(self):
        traj = np.zeros((1, 2, 2))
        traj[0, 1, 0] = 30.0
        assert contacts_from_trajectory(traj, 30.0).a[0, 1] == 1.0

    def test_rejects_bad_shape(self):
        with pytest.raises(MobilityError, match="samples"):
            contacts_from_trajectory(np.zeros((4, 2)), 10.0)

    def test_chunking_agrees_with_single_pass(self, gen):
        # large-K path splits samples into chunks; result must not depend on it
        traj = gen.uniform(0.0, 40.0, (50, 3, 2))
        whole = contacts_from_trajectory(traj, 15.0)
        parts = [contacts_from_trajectory(traj[i:i + 10], 15.0).a for i in range(0, 50, 10)]
        stacked = sum(p * 10 for p in parts) / 50.0
        off = ~np.eye(3, dtype=bool)
        assert np.abs(whole.a[off] - sum(p * 10 for p in parts)[off] / 50.0).max() < 1e-12
        assert np.abs(whole.a[off] - stacked[off]).max() < 1e-12


class TestSerialization:
    def test_round_trip(self, tmp_path, gen):
        cfg = MobilityConfig(area_side=100.0, v_max=2.0, period=20.0,
                             leg_duration=5.0, time_step=1.0, seed=9)
        cm = random_walk_contacts(cfg, 5, 18.0)
        save_contacts(cm, tmp_path / "contacts", period=cfg.period,
                      v_max=cfg.v_max, seed=cfg.seed)
        loaded, sidecar = load_contacts(tmp_path / "contacts")
        assert np.array_equal(loaded.a, cm.a)
        assert loaded.r_c == 18.0
        assert sidecar["T_p"] == 20.0
        assert sidecar["v_max"] == 2.0
        assert sidecar["seed"] == 9

    def test_save_reports_paths(self, tmp_path):
        cm = ContactMatrix(np.eye(2), 5.0)
        csv_path, json_path = save_contacts(cm, tmp_path / "c")
        assert csv_path.exists() and json_path.exists()
