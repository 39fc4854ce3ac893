"""Attack driver behavior on analytically solvable models.

The 1-D two-class line model (boundary at x = 0.5) makes success and
failure decidable by hand, so most contracts here are checked against
closed-form geometry rather than other attack code.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mora import attacks as atk
from mora import autodiff as ad
from mora import objectives as obj
from mora.attacks import AttackConfig
from mora.errors import CleanMisclassifiedError, ConfigError, ContractViolation
from mora.models import Ensemble

from helpers import fixed_logit_model, random_ensemble


def line_ensemble(mode="logits", boundaries=(0.5,), vote_tau=0.1):
    """Ensemble of shifted 1-D line models, one per decision boundary."""
    models = tuple(
        fixed_logit_model([[1.0], [-1.0]], [0.5 - c, 1.0 - (0.5 - c)]) for c in boundaries
    )
    return Ensemble(models, mode, vote_tau)


def cheap_cfg(**kw):
    base = dict(epsilon=0.2, iterations=30, seed=7)
    base.update(kw)
    return AttackConfig(**base)


class TestProject:
    def test_ball_clamp(self):
        out = atk.project(np.array([0.95]), np.array([0.5]), 0.1)
        assert out[0] == pytest.approx(0.6, abs=1e-15)

    def test_box_clamp(self):
        out = atk.project(np.array([-0.2]), np.array([0.05]), 0.1)
        assert out[0] == 0.0

    def test_identity_on_feasible(self):
        v = np.array([0.45, 0.52])
        x = np.array([0.5, 0.5])
        assert np.array_equal(atk.project(v, x, 0.1), v)

    @given(
        st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=5),
        st.lists(st.floats(-3, 3, allow_nan=False), min_size=5, max_size=5),
        st.floats(0, 0.5, allow_nan=False),
    )
    @settings(deadline=None, max_examples=100)
    def test_feasible_and_idempotent(self, xs, vs, eps):
        x = np.asarray(xs)
        v = np.asarray(vs)[: x.shape[0]]
        out = atk.project(v, x, eps)
        assert np.max(np.abs(out - x)) <= eps + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(atk.project(out, x, eps), out)


class TestRandomInit:
    def test_epsilon_zero_returns_x_exactly(self):
        x = np.array([0.3, 0.7])
        out = atk.random_init(x, 0.0, np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_always_feasible(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            x = rng.uniform(0, 1, 3)
            out = atk.random_init(x, 0.25, rng)
            assert np.max(np.abs(out - x)) <= 0.25 + 1e-12
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_seed(self):
        x = np.array([0.4, 0.6, 0.1])
        a = atk.random_init(x, 0.1, np.random.default_rng(99))
        b = atk.random_init(x, 0.1, np.random.default_rng(99))
        assert np.array_equal(a, b)


class TestCosineStep:
    def test_endpoints(self):
        assert atk.cosine_step(0, 100, 0.01) == pytest.approx(0.02, abs=1e-15)
        assert atk.cosine_step(50, 100, 0.01) == pytest.approx(0.01, rel=1e-12)
        assert atk.cosine_step(99, 100, 0.01) == pytest.approx(
            0.01 * (1 + math.cos(0.99 * math.pi)), rel=1e-12
        )
        assert atk.cosine_step(99, 100, 0.01) == pytest.approx(4.93e-6, rel=1e-2)

    def test_monotone_non_increasing(self):
        steps = [atk.cosine_step(i, 64, 0.3) for i in range(64)]
        assert all(a >= b for a, b in zip(steps, steps[1:]))

    def test_range_check(self):
        with pytest.raises(ContractViolation):
            atk.cosine_step(100, 100, 0.01)
        with pytest.raises(ContractViolation):
            atk.cosine_step(-1, 100, 0.01)


class TestAttackConfig:
    def test_defaults_resolve(self):
        cfg = AttackConfig(epsilon=0.12)
        assert cfg.resolved_step() == pytest.approx(0.03)
        assert cfg.resolved_tau("softmax") == 5.0
        assert cfg.resolved_tau("voting") == 10.0
        assert cfg.resolved_tau("logits") == 1.0
        assert cfg.beta_schedule == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_explicit_overrides(self):
        cfg = AttackConfig(epsilon=0.1, attack_tau=2.5, pgd_step=0.02)
        assert cfg.resolved_tau("softmax") == 2.5
        assert cfg.resolved_step() == 0.02

    def test_epsilon_zero_allowed(self):
        AttackConfig(epsilon=0.0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epsilon": -0.1},
            {"epsilon": 0.1, "iterations": 0},
            {"epsilon": 0.1, "nu": 1.5},
            {"epsilon": 0.1, "attack_tau": 0.0},
            {"epsilon": 0.1, "beta_schedule": ()},
            {"epsilon": 0.1, "beta_schedule": (0.0, 1.2)},
            {"epsilon": 0.1, "per_beta_iterations": 0},
            {"epsilon": 0.1, "mt_iterations_per_target": 0},
            {"epsilon": 0.1, "restarts": 0},
            {"epsilon": 0.1, "pgd_step": 0.0},
            {"epsilon": 0.1, "mt_targets": "some"},
            {"epsilon": 0.1, "mt_targets": (1.5,)},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)


class TestMoraAttackAnalytic:
    def test_reaches_the_boundary_when_in_range(self):
        ens = line_ensemble()
        res = atk.mora_attack(ens, np.array([0.6]), 0, 0.5, cheap_cfg())
        assert res.success
        assert res.adversarial_example[0] < 0.5
        assert abs(res.adversarial_example[0] - 0.6) <= 0.2 + 1e-9

    def test_fails_when_ball_too_small(self):
        ens = line_ensemble()
        res = atk.mora_attack(ens, np.array([0.6]), 0, 0.5, cheap_cfg(epsilon=0.05))
        assert not res.success
        assert res.iterations_used == 30
        assert len(res.trace) == 30

    def test_rejects_clean_misclassified(self):
        ens = line_ensemble()
        with pytest.raises(CleanMisclassifiedError):
            atk.mora_attack(ens, np.array([0.3]), 0, 0.5, cheap_cfg())

    def test_rejects_input_outside_box(self):
        ens = line_ensemble()
        with pytest.raises(ContractViolation):
            atk.mora_attack(ens, np.array([1.3]), 0, 0.5, cheap_cfg())

    def test_trace_iterations_strictly_increasing(self):
        ens = line_ensemble()
        res = atk.mora_attack(ens, np.array([0.6]), 0, 0.5, cheap_cfg(epsilon=0.05))
        its = [t.iteration for t in res.trace]
        assert its == sorted(set(its))
        assert [t.step_size for t in res.trace] == [
            atk.cosine_step(i, 30, 0.05) for i in range(30)
        ]

    def test_success_invariant_on_random_ensembles(self):
        rng = np.random.default_rng(5)
        for mode in ("softmax", "voting", "logits"):
            for trial in range(6):
                ens = random_ensemble(np.random.default_rng(100 + trial), mode=mode)
                x = rng.uniform(0.1, 0.9, 2)
                y = ens.hard_decision(x)
                cfg = cheap_cfg(epsilon=0.15, iterations=20, debug=True)
                res = atk.mora_attack(ens, x, y, 0.5, cfg, np.random.default_rng(trial))
                if res.success:
                    assert ens.hard_decision(res.adversarial_example, true_label=y) != y
                assert np.max(np.abs(res.adversarial_example - x)) <= 0.15 + 1e-9
                assert res.adversarial_example.min() >= 0.0
                assert res.adversarial_example.max() <= 1.0
                assert 0 <= res.sub_fooled <= ens.num_models


class TestEarlyStop:
    def test_adversarial_start_uses_zero_iterations(self):
        ens = line_ensemble()
        res = atk.drive_attack(
            ens,
            np.array([0.6]),
            0,
            cheap_cfg(),
            np.random.default_rng(0),
            lambda zs, ze: obj.sce(ze, 0),
            iterations=25,
            start=np.array([0.42]),
        )
        assert res.success
        assert res.iterations_used == 0
        assert res.trace == ()

    def test_voting_surrogate_disagreement_keeps_iterating(self):
        # between the two boundaries the votes tie and the defender wins,
        # while the softened margin is already <= 0: no early return
        ens = line_ensemble(mode="voting", boundaries=(0.45, 0.55))
        x = np.array([0.5])
        assert ens.hard_decision(x, true_label=0) == 0
        z_e = ens.forward_ensemble(x)
        assert obj.dl_value(z_e, 0) <= 0.0
        res = atk.mora_attack(ens, x, 0, 0.5, cheap_cfg(epsilon=0.001, iterations=15))
        assert not res.success
        assert res.iterations_used == 15


class TestMomentum:
    def test_nu_one_equals_plain_cosine_descent(self):
        ens = random_ensemble(np.random.default_rng(3), mode="softmax")
        x = np.array([0.5, 0.5])
        y = ens.hard_decision(x)
        builder = lambda zs, ze: obj.sce(ze, y)
        shared = dict(iterations=12, start=np.array([0.52, 0.48]))
        a = atk.drive_attack(
            ens, x, y, cheap_cfg(nu=1.0), np.random.default_rng(0), builder,
            momentum=True, **shared,
        )
        b = atk.drive_attack(
            ens, x, y, cheap_cfg(nu=1.0), np.random.default_rng(0), builder,
            momentum=False, cosine=True, **shared,
        )
        assert np.array_equal(a.adversarial_example, b.adversarial_example)

    def test_positive_loss_scaling_is_bit_identical(self):
        ens = random_ensemble(np.random.default_rng(4), mode="softmax")
        x = np.array([0.41, 0.63])
        y = ens.hard_decision(x)
        base = lambda zs, ze: obj.sce(ze, y)
        scaled = lambda zs, ze: ad.scale(3.7, obj.sce(ze, y))
        shared = dict(iterations=15, start=np.array([0.45, 0.6]))
        a = atk.drive_attack(ens, x, y, cheap_cfg(), np.random.default_rng(0), base, **shared)
        b = atk.drive_attack(ens, x, y, cheap_cfg(), np.random.default_rng(0), scaled, **shared)
        assert np.array_equal(a.adversarial_example, b.adversarial_example)
        assert a.iterations_used == b.iterations_used

    def test_literal_momentum_init_changes_trajectory(self):
        # with the literal zero momentum init the first candidate is pulled
        # toward the origin before projection; in 2-D with mixed gradient
        # signs the trajectories separate while staying feasible
        ens = random_ensemble(np.random.default_rng(12), mode="softmax")
        x = np.array([0.5, 0.5])
        y = ens.hard_decision(x)
        cfg = cheap_cfg(epsilon=0.2)
        lit = cheap_cfg(epsilon=0.2, literal_momentum_init=True)
        a = atk.drive_attack(
            ens, x, y, cfg, np.random.default_rng(1),
            lambda zs, ze: obj.sce(ze, y), iterations=2, early_stop=False, start=x,
        )
        b = atk.drive_attack(
            ens, x, y, lit, np.random.default_rng(1),
            lambda zs, ze: obj.sce(ze, y), iterations=2, early_stop=False, start=x,
        )
        assert not np.array_equal(a.adversarial_example, b.adversarial_example)
        assert np.max(np.abs(b.adversarial_example - x)) <= 0.2 + 1e-9


class TestNoReweigh:
    def test_logits_mode_bit_identical(self):
        ens = random_ensemble(np.random.default_rng(6), mode="logits")
        x = np.array([0.55, 0.45])
        y = ens.hard_decision(x)
        cfg = cheap_cfg(epsilon=0.1, iterations=20)
        a = atk.mora_attack(ens, x, y, 0.5, cfg, np.random.default_rng(2))
        b = atk.mora_attack(ens, x, y, 0.5, cfg, np.random.default_rng(2), no_reweigh=True)
        assert np.array_equal(a.adversarial_example, b.adversarial_example)
        assert a.success == b.success
        assert a.iterations_used == b.iterations_used

    def test_single_model_identical_in_all_modes(self):
        for mode in ("softmax", "voting", "logits"):
            ens = random_ensemble(np.random.default_rng(8), m=1, mode=mode)
            x = np.array([0.52, 0.51])
            y = ens.hard_decision(x)
            cfg = cheap_cfg(epsilon=0.08, iterations=15)
            a = atk.mora_attack(ens, x, y, 1.0, cfg, np.random.default_rng(3))
            b = atk.mora_attack(ens, x, y, 1.0, cfg, np.random.default_rng(3), no_reweigh=True)
            assert np.allclose(a.adversarial_example, b.adversarial_example, atol=1e-12)
            assert a.success == b.success


class TestMoraSweep:
    def test_stops_at_first_success(self):
        ens = line_ensemble()
        cfg = cheap_cfg(per_beta_iterations=20)
        res = atk.mora_sweep(ens, np.array([0.6]), 0, cfg)
        assert res.success
        assert res.iterations_used < 5 * 20

    def test_failure_consumes_full_budget(self):
        ens = line_ensemble()
        cfg = cheap_cfg(epsilon=0.05, per_beta_iterations=8, beta_schedule=(0.0, 0.5, 1.0))
        res = atk.mora_sweep(ens, np.array([0.6]), 0, cfg)
        assert not res.success
        assert res.iterations_used == 3 * 8
        its = [t.iteration for t in res.trace]
        assert its == list(range(3 * 8))


class TestMoraMt:
    def test_untargeted_success_skips_targets(self):
        ens = line_ensemble()
        cfg = cheap_cfg(per_beta_iterations=20)
        res = atk.mora_mt(ens, np.array([0.6]), 0, cfg)
        assert res.success
        assert res.iterations_used <= 5 * 20

    def test_two_class_failure_budget_counts_one_target(self):
        ens = line_ensemble()
        cfg = cheap_cfg(
            epsilon=0.05,
            beta_schedule=(0.0, 1.0),
            per_beta_iterations=10,
            mt_iterations_per_target=7,
        )
        res = atk.mora_mt(ens, np.array([0.6]), 0, cfg)
        assert not res.success
        assert res.iterations_used == 2 * 10 + 1 * 7

    def test_mt_targets_none_matches_sweep_budget(self):
        ens = line_ensemble()
        cfg = cheap_cfg(
            epsilon=0.05, beta_schedule=(0.0, 1.0), per_beta_iterations=10, mt_targets="none"
        )
        res = atk.mora_mt(ens, np.array([0.6]), 0, cfg)
        assert not res.success
        assert res.iterations_used == 2 * 10

    def test_targeted_run_with_an_ally_succeeds(self):
        # sub-model A predicts the target everywhere the init can land, so
        # the targeted loss is live and amplifies A until the formed
        # decision flips; the ball still reaches past the 0.5 boundary
        ens = line_ensemble(mode="logits", boundaries=(0.55, 0.45))
        x = np.array([0.52])
        assert ens.hard_decision(x, true_label=0) == 0
        cfg = cheap_cfg(epsilon=0.025, iterations=40)
        res = atk.mora_attack(ens, x, 0, 0.5, cfg, np.random.default_rng(4), target=1)
        assert res.success
        assert ens.hard_decision(res.adversarial_example, true_label=0) == 1

    def test_targeted_stall_without_allies_leaves_start(self):
        ens = line_ensemble()
        cfg = cheap_cfg(epsilon=0.02, iterations=10)
        res = atk.drive_attack(
            ens,
            np.array([0.6]),
            0,
            cfg,
            np.random.default_rng(0),
            lambda zs, ze: obj.mora_loss(
                zs,
                ze,
                obj.ObjectiveContext(
                    true_label=0, mode="logits", attack_tau=1.0, beta=0.5,
                    num_models=1, target=1,
                ),
            ),
            iterations=10,
            direction=-1.0,
            start=np.array([0.6]),
        )
        assert not res.success
        assert np.array_equal(res.adversarial_example, np.array([0.6]))


class TestBaselines:
    def test_pgd_succeeds_on_single_model(self):
        ens = line_ensemble()
        res = atk.pgd_attack(ens, np.array([0.6]), 0, cheap_cfg(iterations=25))
        assert res.success
        assert res.adversarial_example[0] < 0.5

    def test_pgd_epsilon_zero_always_fails(self):
        ens = line_ensemble()
        cfg = cheap_cfg(epsilon=0.0, iterations=5, restarts=2)
        res = atk.pgd_attack(ens, np.array([0.6]), 0, cfg)
        assert not res.success
        assert res.iterations_used == 2 * 5
        assert np.array_equal(res.adversarial_example, np.array([0.6]))

    def test_restart_determinism(self):
        ens = random_ensemble(np.random.default_rng(9), mode="softmax")
        x = np.array([0.48, 0.52])
        y = ens.hard_decision(x)
        cfg = cheap_cfg(epsilon=0.06, iterations=10, restarts=3, seed=21)
        a = atk.pgd_attack(ens, x, y, cfg)
        b = atk.pgd_attack(ens, x, y, cfg)
        assert np.array_equal(a.adversarial_example, b.adversarial_example)
        assert a.iterations_used == b.iterations_used

    def test_restart_failure_budget(self):
        ens = line_ensemble()
        cfg = cheap_cfg(epsilon=0.05, iterations=6, restarts=4)
        res = atk.pgd_attack(ens, np.array([0.6]), 0, cfg)
        assert not res.success
        assert res.iterations_used == 4 * 6

    def test_cw_succeeds_on_single_model(self):
        ens = line_ensemble()
        res = atk.cw_attack(ens, np.array([0.6]), 0, cheap_cfg(iterations=25))
        assert res.success

    def test_nll_objective_on_probability_forming(self):
        ens = line_ensemble(mode="softmax")
        res = atk.pgd_attack(
            ens, np.array([0.6]), 0, cheap_cfg(iterations=25), objective="nll"
        )
        assert res.success

    def test_nll_falls_back_to_sce_under_logits(self):
        ens = random_ensemble(np.random.default_rng(10), mode="logits")
        x = np.array([0.5, 0.5])
        y = ens.hard_decision(x)
        cfg = cheap_cfg(epsilon=0.04, iterations=8, restarts=2)
        a = atk.pgd_attack(ens, x, y, cfg, objective="nll")
        b = atk.pgd_attack(ens, x, y, cfg, objective="sce")
        assert np.array_equal(a.adversarial_example, b.adversarial_example)

    def test_unknown_objective_rejected(self):
        ens = line_ensemble()
        with pytest.raises(ConfigError):
            atk.pgd_attack(ens, np.array([0.6]), 0, cheap_cfg(), objective="dlr")
