import numpy as np
import pytest

from crnsim.markov import MarkovChain, stationary_distribution
from crnsim.scenario import (
    COORD_TURN,
    FAMILY_SEPARATION,
    MOTION_STATES,
    SIGNAL_TYPES,
    DegenerateScenario,
    Region,
    ScenarioConfig,
    TargetFamily,
    chain_from_stationary,
    default_family,
    sample_ppp,
    spawn_scenario,
)


def total_variation(a, b):
    return 0.5 * np.sum(np.abs(np.asarray(a) - np.asarray(b)))


class TestRegion:
    def test_area(self):
        assert Region(10, 10).area_km2 == 100.0
        assert Region(2.5, 4.0).area_km2 == 10.0

    @pytest.mark.parametrize("w,h", [(0, 10), (10, -1)])
    def test_rejects_degenerate(self, w, h):
        with pytest.raises(ValueError):
            Region(w, h)


class TestSamplePpp:
    def test_zero_density_empty(self):
        pts = sample_ppp(0.0, Region(), np.random.default_rng(0))
        assert pts.shape == (0, 2)

    def test_mean_count(self):
        rng = np.random.default_rng(42)
        counts = [len(sample_ppp(0.2, Region(), rng)) for _ in range(10_000)]
        assert np.mean(counts) == pytest.approx(20.0, abs=0.5)

    def test_poisson_variance(self):
        rng = np.random.default_rng(7)
        counts = [len(sample_ppp(0.3, Region(), rng)) for _ in range(10_000)]
        assert np.var(counts) == pytest.approx(30.0, abs=2.0)

    def test_points_uniform_in_region(self):
        rng = np.random.default_rng(3)
        region = Region(4, 8)
        pts = np.vstack([sample_ppp(1.0, region, rng) for _ in range(200)])
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= region.width_m)
        assert np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= region.height_m)
        # uniformity: mean near center, both axes
        assert np.mean(pts[:, 0]) == pytest.approx(region.width_m / 2, rel=0.05)
        assert np.mean(pts[:, 1]) == pytest.approx(region.height_m / 2, rel=0.05)

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError):
            sample_ppp(-0.1, Region(), np.random.default_rng(0))


class TestChainFromStationary:
    def test_recovers_requested_stationary(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pi = rng.dirichlet(np.ones(rng.integers(2, 6)) * 2 + 0.5)
            chain = chain_from_stationary(pi, persistence=0.3)
            assert stationary_distribution(chain) == pytest.approx(pi, abs=1e-12)

    def test_diagonal_structure(self):
        chain = chain_from_stationary([0.5, 0.3, 0.2], persistence=0.4)
        expected_diag = 1 - 0.4 * (1 - np.array([0.5, 0.3, 0.2]))
        assert np.diag(chain.transition) == pytest.approx(expected_diag)

    def test_rejects_bad_persistence(self):
        with pytest.raises(ValueError):
            chain_from_stationary([0.5, 0.5], persistence=0.0)
        with pytest.raises(ValueError):
            chain_from_stationary([0.5, 0.5], persistence=1.2)

    def test_rejects_zero_mass_state(self):
        with pytest.raises(ValueError):
            chain_from_stationary([1.0, 0.0], persistence=0.5)


class TestDefaultFamily:
    def test_three_classes(self):
        family = default_family()
        assert len(family.classes) == 3
        assert family.motion_state_count == len(MOTION_STATES)
        assert family.signal_state_count == len(SIGNAL_TYPES)

    def test_balloon_is_nearly_static(self):
        family = default_family()
        balloon = next(c for c in family.classes if c.name == "Balloon")
        pi = stationary_distribution(balloon.motion_chain)
        assert pi[0] >= 0.9

    def test_pairwise_separation(self):
        family = default_family()
        for i, a in enumerate(family.classes):
            for b in family.classes[i + 1:]:
                dists = [
                    total_variation(da, db)
                    for da, db in zip(
                        a.parameter_distributions(), b.parameter_distributions()
                    )
                ]
                assert max(dists) > FAMILY_SEPARATION

    def test_duty_cycles(self):
        family = default_family()
        duty = {
            c.name: stationary_distribution(c.tx_chain)[0] for c in family.classes
        }
        assert duty["UAV"] == pytest.approx(0.9, abs=1e-9)
        assert duty["GeneralAviation"] == pytest.approx(0.5, abs=1e-9)
        assert duty["Balloon"] == pytest.approx(0.3, abs=1e-9)

    def test_rejects_duplicate_classes(self):
        import dataclasses

        family = default_family()
        clone = dataclasses.replace(family.classes[0], class_id=99)
        with pytest.raises(ValueError, match="equal in state distribution"):
            TargetFamily(classes=(family.classes[0], clone))

    def test_rejects_wrong_state_count(self):
        family = default_family()
        bad = default_family().classes[0]
        object.__setattr__(
            bad, "motion_chain", MarkovChain(np.array([[0.5, 0.5], [0.5, 0.5]]))
        )
        with pytest.raises(ValueError, match="motion state count"):
            TargetFamily(classes=(bad, family.classes[1]))


class TestSpawnScenario:
    def test_zero_target_density_degenerate(self):
        cfg = ScenarioConfig(target_density_per_km2=0.0)
        with pytest.raises(DegenerateScenario):
            spawn_scenario(cfg, np.random.default_rng(0))

    def test_expected_counts_table(self):
        cfg = ScenarioConfig()
        rng = np.random.default_rng(5)
        n_nodes, n_targets = [], []
        for _ in range(1500):
            try:
                nodes, targets = spawn_scenario(cfg, rng)
            except DegenerateScenario:
                continue
            n_nodes.append(len(nodes))
            n_targets.append(len(targets))
        # P(zero draw) is e-20 / e-30, negligible truncation bias
        assert np.mean(n_nodes) == pytest.approx(20.0, abs=0.5)
        assert np.mean(n_targets) == pytest.approx(30.0, abs=0.6)

    def test_entities_inside_region(self):
        cfg = ScenarioConfig()
        rng = np.random.default_rng(1)
        nodes, targets = spawn_scenario(cfg, rng)
        for node in nodes:
            assert 0 <= node.position[0] <= cfg.region.width_m
            assert 0 <= node.position[1] <= cfg.region.height_m
            assert node.position[2] == 0.0
            assert node.radar_range_m == 4000.0
        for t in targets:
            assert 0 <= t.position[0] <= cfg.region.width_m
            assert 0 <= t.position[1] <= cfg.region.height_m

    def test_spawn_respects_class_limits(self):
        cfg = ScenarioConfig()
        rng = np.random.default_rng(2)
        nodes, targets = spawn_scenario(cfg, rng)
        by_id = {c.class_id: c for c in cfg.family.classes}
        for t in targets:
            cls = by_id[t.class_id]
            lo, hi = cls.altitude_range_m
            assert lo <= t.position[2] <= hi
            speed = np.linalg.norm(t.velocity)
            slo, shi = cls.speed_range_mps
            assert slo - 1e-9 <= speed <= shi + 1e-9
            assert t.velocity[2] == 0.0
            if t.motion_state == COORD_TURN:
                assert cls.turn_rate_range_radps[0] <= abs(t.turn_rate_radps)
            else:
                assert t.turn_rate_radps == 0.0

    def test_stationary_initialization_of_motion_states(self):
        # single-class family so every target is a UAV
        uav = default_family().classes[0]
        cfg = ScenarioConfig(
            family=TargetFamily(classes=(uav,)), target_density_per_km2=1.0
        )
        rng = np.random.default_rng(9)
        states = []
        while len(states) < 10_000:
            _, targets = spawn_scenario(cfg, rng)
            states.extend(t.motion_state for t in targets)
        freq = np.bincount(states, minlength=3) / len(states)
        assert freq == pytest.approx(
            stationary_distribution(uav.motion_chain), abs=0.02
        )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScenarioConfig(node_density_per_km2=-1.0)
        with pytest.raises(ValueError):
            ScenarioConfig(radar_range_km=0.0)
