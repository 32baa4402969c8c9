import shutil
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from core.env import ArmEnv, EnvConfig, RandomizationCfg
from core.errors import ArgumentError, ConfigurationError, DimensionError
from core.distill import (
    ABLATION_VARIANTS,
    DistillCfg,
    EpisodeLog,
    EsCfg,
    FlowPolicy,
    ReplayBuffer,
    ResidualPolicy,
    ablation_study,
    build_experts,
    collect_rollouts,
    dagger_train,
    episode_horizon,
    es_refine,
    evaluate_policy,
    init_student,
    load_cfg,
    load_residual,
    refine_fitness,
    residual_compose,
    run_episode,
    save_residual,
)
from core.flow import SamplerCfg, VelocityFieldNet
from core.metrics import check_termination, success_rate
from core.motion import SynthMotionSpec, synth_motion


def sine(amp: float, freq: float, duration: float = 2.0):
    return synth_motion(
        SynthMotionSpec(n_joints=2, duration=duration, fps=50, amplitudes=[amp, amp], frequencies=[freq, freq])
    )


def tiny_net(env: ArmEnv, seed: int = 0, hidden=(16,)) -> VelocityFieldNet:
    return VelocityFieldNet.init(env.action_dim, env.obs_dim, np.random.default_rng(seed), hidden=hidden)


class TestResidual(TestCase):
    """Сложение с остаточной политикой."""

    def test_compose(self):
        """0.2 + 0.1 при bound 0.2 - 0.3, больший остаток обрезается."""

        np.testing.assert_allclose(residual_compose([0.2], [0.1], 0.2), [0.3])
        np.testing.assert_allclose(residual_compose([0.2, -1.0], [5.0, -5.0], 0.2), [0.4, -1.2])
        with self.assertRaises(DimensionError):
            residual_compose([0.2, 0.1], [0.1], 0.2)
        with self.assertRaises(ArgumentError):
            residual_compose([0.2], [0.1], -1.0)

    def test_zero_init(self):
        """Новая остаточная политика ничего не добавляет."""

        env = ArmEnv(EnvConfig())
        obs = env.reset(sine(0.3, 0.25), np.random.default_rng(0))
        residual = ResidualPolicy.init(2, np.random.default_rng(1))
        a_flow = np.array([0.5, -0.7])
        np.testing.assert_array_equal(residual.compose(obs, a_flow), a_flow)

    def test_zero_bound(self):
        """bound = 0: оценка совпадает с базовой политикой."""

        env = ArmEnv(EnvConfig())
        net = tiny_net(env)
        residual = ResidualPolicy.init(2, np.random.default_rng(1), bound=0.0)
        mlp = residual.mlp
        mlp.set_flat(np.random.default_rng(2).standard_normal(mlp.n_params))
        motions = {"slow": sine(0.3, 0.25, duration=1.0)}
        base = evaluate_policy(net, env, motions, n_rollouts=2)
        with_res = evaluate_policy(net, env, motions, n_rollouts=2, residual=residual)
        self.assertEqual(base.as_dict(), with_res.as_dict())

    def test_checkpoint(self):
        """Остаточная политика переживает запись и чтение."""

        tmp = Path(tempfile.mkdtemp())
        try:
            residual = ResidualPolicy.init(2, np.random.default_rng(3), hidden=(8,), bound=0.3)
            residual.mlp.set_flat(np.random.default_rng(4).standard_normal(residual.mlp.n_params))
            loaded = load_residual(save_residual(residual, tmp / "residual.json"))
            np.testing.assert_array_equal(loaded.mlp.get_flat(), residual.mlp.get_flat())
            self.assertEqual((loaded.action_dim, loaded.bound), (2, 0.3))
        finally:
            shutil.rmtree(tmp)


class TestEpisodes(TestCase):
    """Эпизоды, буфер и журнал."""

    def test_buffer(self):
        """Пустой буфер нельзя сэмплировать."""

        buffer = ReplayBuffer()
        with self.assertRaises(ArgumentError):
            buffer.as_batch()
        buffer.add(np.zeros(3), "a", np.ones(2))
        self.assertEqual(len(buffer.sample(np.random.default_rng(0), 5)), 5)
        buffer.clear()
        self.assertEqual(len(buffer), 0)

    def test_rollouts_fill(self):
        """В буфер попадает ровно steps записей, даже со сбросами."""

        env = ArmEnv(EnvConfig(episode_len=10))
        motion = sine(0.3, 0.25)
        experts = build_experts({"m": motion})
        buffer = ReplayBuffer()
        resets = collect_rollouts(
            env, "m", motion, experts["m"], FlowPolicy(tiny_net(env)), buffer, 25, np.random.default_rng(0)
        )
        self.assertEqual(len(buffer), 25)
        self.assertGreaterEqual(resets, 2)
        self.assertEqual(set(buffer.motion_ids), {"m"})
        self.assertEqual(buffer.as_batch().observations.shape, (25, env.obs_dim))

    def test_termination_consistency(self):
        """
        100 эпизодов: досрочное завершение ровно на первом шаге, где сработал
        критерий, и доля успехов совпадает с пересчётом по журналу.
        """

        env = ArmEnv(EnvConfig())
        motions = [sine(1.5, 2.0), sine(0.3, 0.25)]
        experts = build_experts({"fast": motions[0], "slow": motions[1]})
        episodes, recomputed = [], []
        for seed in range(100):
            motion = motions[seed % 2]
            policy = experts["slow"] if seed % 4 == 1 else FlowPolicy(tiny_net(env, seed))
            mode = "aggressive" if seed % 3 == 0 else "base"
            episode = run_episode(env, motion, policy, seed, mode=mode, horizon=episode_horizon(env, motion))
            flags = [
                check_termination(z, o, env.thresholds, relaxed=mode == "aggressive")
                for z, o in zip(episode.z_errors, episode.orientation_errors)
            ]
            self.assertEqual(flags[-1], episode.terminated_early)
            self.assertFalse(any(flags[:-1]))
            if not episode.terminated_early:
                self.assertEqual(episode.steps, motion.n_frames)
            episodes.append(episode)
            recomputed.append(not any(flags))
        self.assertEqual(success_rate(episodes), float(np.mean(recomputed)))

    def test_full_clip_steps(self):
        """Клип 10 с при 50 fps - эпизод из 500 шагов."""

        env = ArmEnv(EnvConfig())
        motion = sine(0.3, 0.25, duration=10.0)
        self.assertEqual(episode_horizon(env, motion), 500)
        expert = build_experts({"m": motion})["m"]
        episode = run_episode(env, motion, expert, seed=0, horizon=episode_horizon(env, motion))
        self.assertEqual(episode.steps, 500)
        self.assertFalse(episode.terminated_early)
        self.assertEqual(episode_horizon(ArmEnv(EnvConfig(episode_len=100)), motion), 100)

    def test_score(self):
        """Штраф за каждый непройденный шаг."""

        episode = EpisodeLog(motion_id="m", rewards=[-0.5, -0.5], terminated_early=True, horizon=10)
        self.assertEqual(episode.score(), -1.0)
        self.assertEqual(episode.score(0.5), -5.0)
        episode.terminated_early = False
        self.assertEqual(episode.score(0.5), -1.0)


class TestEvaluate(TestCase):
    """Оценка политик."""

    def test_experts_succeed(self):
        """Эксперты на медленных движениях проходят все эпизоды."""

        env = ArmEnv(EnvConfig())
        motions = {"a": sine(0.3, 0.25), "b": sine(0.2, 0.5)}
        report = evaluate_policy(build_experts(motions), env, motions, n_rollouts=2)
        self.assertEqual(report.aggregate.success, 1.0)
        self.assertEqual(set(report.per_motion), {"a", "b"})
        self.assertLess(report.aggregate.mpjpe_mm, 50.0)

    def test_untrained_fails(self):
        """Необученная сеть на быстром размашистом движении падает."""

        env = ArmEnv(EnvConfig())
        motions = {"fast": sine(1.5, 2.0)}
        report = evaluate_policy(tiny_net(env), env, motions, n_rollouts=3)
        self.assertEqual(report.aggregate.success, 0.0)

    def test_missing_policy(self):
        env = ArmEnv(EnvConfig())
        motions = {"a": sine(0.3, 0.25, duration=1.0)}
        with self.assertRaises(ConfigurationError):
            evaluate_policy(build_experts({"b": motions["a"]}), env, motions, n_rollouts=1)


class TestDagger(TestCase):
    """Дистилляция DAgger."""

    def setUp(self) -> None:
        """Рука без рандомизации и одно медленное движение."""

        self.env = ArmEnv(EnvConfig(randomization=RandomizationCfg.none()))
        self.motions = {"slow": sine(0.3, 0.25)}
        self.experts = build_experts(self.motions)
        return super().setUp()

    def test_zero_iterations(self):
        """Ноль итераций - сеть не меняется."""

        cfg = DistillCfg(iterations=0, hidden=(16,))
        net = init_student(self.env, cfg)
        trained, history = dagger_train(self.env, self.experts, self.motions, net, cfg)
        self.assertEqual(history, [])
        np.testing.assert_array_equal(trained.mlp.get_flat(), net.mlp.get_flat())

    def test_missing_expert(self):
        cfg = DistillCfg(iterations=1, hidden=(16,))
        with self.assertRaises(ConfigurationError):
            dagger_train(self.env, {}, self.motions, init_student(self.env, cfg), cfg)

    def test_wrong_net(self):
        """Сеть не под размерности среды."""

        net = VelocityFieldNet.init(2, 5, np.random.default_rng(0), hidden=(4,))
        with self.assertRaises(ConfigurationError):
            dagger_train(self.env, self.experts, self.motions, net, DistillCfg(iterations=1))

    def test_loss_goes_down(self):
        """Потери последней итерации меньше первой, колбэк зовётся на каждой."""

        cfg = DistillCfg(
            iterations=4, episodes=1, rollout_steps=100, grad_steps=150,
            batch_size=64, lr=3e-3, hidden=(32, 32), seed=1,
        )
        calls = []
        net = init_student(self.env, cfg)
        trained, history = dagger_train(
            self.env, self.experts, self.motions, net, cfg,
            on_iteration=lambda i, n, loss: calls.append(i),
        )
        self.assertEqual(calls, [1, 2, 3, 4])
        self.assertLess(history[-1], history[0])
        self.assertFalse(np.array_equal(trained.mlp.get_flat(), net.mlp.get_flat()))

    def test_deterministic(self):
        """Одинаковое зерно - одинаковые потери."""

        cfg = DistillCfg(iterations=1, episodes=1, rollout_steps=20, grad_steps=5, batch_size=8, hidden=(8,))
        runs = [
            dagger_train(self.env, self.experts, self.motions, init_student(self.env, cfg), cfg)[1]
            for _ in range(2)
        ]
        self.assertEqual(runs[0], runs[1])

    def test_bad_cfg(self):
        with self.assertRaises(ConfigurationError):
            load_cfg(DistillCfg, {"iterations": -1}, "train")


class TestDistillEfficacy(TestCase):
    """Единая политика на двух синусоидах против необученной сети и экспертов."""

    def test_two_sines(self):
        """Ошибка ученика меньше 20% необученной и меньше двух ошибок эксперта."""

        env = ArmEnv(EnvConfig())
        motions = {"slow": sine(0.3, 0.25, duration=10.0), "mid": sine(0.4, 0.5, duration=10.0)}
        experts = build_experts(motions)
        cfg = DistillCfg(
            iterations=12, episodes=2, rollout_steps=250, grad_steps=200,
            batch_size=128, lr=2e-3, hidden=(64, 64), seed=0,
        )
        untrained = init_student(env, cfg)
        trained, _ = dagger_train(env, experts, motions, untrained, cfg)
        sampler = SamplerCfg(steps=5)

        def joint_error(policy, name: str) -> float:
            motion = motions[name]
            return float(np.mean([
                run_episode(env, motion, policy, seed, horizon=episode_horizon(env, motion)).tracking_error
                for seed in range(3)
            ]))

        for name in motions:
            student = joint_error(FlowPolicy(trained, sampler), name)
            self.assertLess(student, 0.2 * joint_error(FlowPolicy(untrained, sampler), name), name)
            self.assertLess(student, 2.0 * joint_error(experts[name], name), name)


class TestRefine(TestCase):
    """Доводка остаточной политики эволюционной стратегией."""

    def setUp(self) -> None:
        """Рука с урезанными приводами и коротким горизонтом."""

        self.env = ArmEnv(EnvConfig(envelope_scale=0.7))
        self.motions = {"m": sine(0.6, 0.75)}
        self.net = tiny_net(self.env, seed=5)
        self.residual = ResidualPolicy.init(2, np.random.default_rng(6), hidden=(8,))
        return super().setUp()

    def test_monotone(self):
        """Лучший счёт не убывает, итог не хуже базовой политики."""

        cfg = EsCfg(population=3, generations=3, eval_seeds=(0, 1), horizon=30, sigma=0.1)
        best, history = es_refine(self.net, self.residual, self.env, self.motions, cfg)
        self.assertEqual(len(history), 4)
        self.assertTrue(all(b >= a for a, b in zip(history, history[1:])))
        base = refine_fitness(self.net, None, self.env, self.motions, cfg)
        self.assertAlmostEqual(history[0], base, delta=1e-12)
        self.assertGreaterEqual(refine_fitness(self.net, best, self.env, self.motions, cfg), base)

    def test_paired_episodes(self):
        """Огибающая урезана на 30%: доводка не хуже базы на 10 парных эпизодах."""

        cfg = EsCfg(
            population=3, generations=3, eval_seeds=tuple(range(10)),
            horizon=50, sigma=0.1, termination_cost=0.0,
        )
        best, history = es_refine(self.net, self.residual, self.env, self.motions, cfg)
        self.assertTrue(all(b >= a for a, b in zip(history, history[1:])))
        motion = self.motions["m"]

        def mean_reward(residual) -> float:
            return float(np.mean([
                run_episode(self.env, motion, FlowPolicy(self.net, residual=residual), seed, "aggressive", 50).total_reward
                for seed in range(10)
            ]))

        self.assertGreaterEqual(mean_reward(best), mean_reward(None))

    def test_ablation(self):
        """Полный вариант на полной среде не хуже базовой политики."""

        cfg = EsCfg(population=2, generations=2, eval_seeds=(0, 1), horizon=30, sigma=0.1)
        motions = {"m": sine(0.6, 0.75, duration=1.0)}
        results = ablation_study(
            self.net, self.env.cfg, motions, cfg, n_rollouts=1, variants=("full", "none")
        )
        self.assertEqual(list(results), ["base_policy", "full", "none"])
        self.assertGreaterEqual(results["full"].fitness, results["base_policy"].fitness)
        self.assertEqual(set(results["none"].as_dict()), {"variant", "fitness", "motions", "aggregate"})
        self.assertEqual(set(ABLATION_VARIANTS), {"full", "no_actuator_model", "no_power_penalty", "no_aggressive", "none"})
        with self.assertRaises(ConfigurationError):
            ablation_study(self.net, self.env.cfg, motions, cfg, variants=("no_friction",))

    def test_empty_population(self):
        """lambda = 0: политика не меняется."""

        cfg = EsCfg(population=0, generations=2, eval_seeds=(0,), horizon=10)
        best, history = es_refine(self.net, self.residual, self.env, self.motions, cfg)
        np.testing.assert_array_equal(best.mlp.get_flat(), self.residual.mlp.get_flat())
        self.assertEqual(len(set(history)), 1)

    def test_zero_generations(self):
        """Ноль поколений - остаточная политика как при инициализации."""

        cfg = EsCfg(generations=0, eval_seeds=(0,), horizon=10)
        best, history = es_refine(self.net, self.residual, self.env, self.motions, cfg)
        np.testing.assert_array_equal(best.mlp.get_flat(), self.residual.mlp.get_flat())
        self.assertEqual(len(history), 1)

    def test_no_motions(self):
        with self.assertRaises(ConfigurationError):
            es_refine(self.net, self.residual, self.env, {}, EsCfg())

    def test_sampler(self):
        """Политика на готовой сети с заданным числом шагов Эйлера."""

        policy = FlowPolicy(self.net, SamplerCfg(steps=1), self.residual)
        episode = run_episode(self.env, self.motions["m"], policy, seed=0, horizon=5)
        self.assertLessEqual(episode.steps, 5)
        self.assertEqual(len(episode.q), episode.steps + 1)
