"""Командная строка: анализ движений, приводы, обучение, оценка, доводка."""


import json
import logging
import sys
from pathlib import Path
from typing import Any

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from core.actuation import (
    ActuatorParams,
    clip_torque,
    envelope_limit,
    friction_torque,
    joint_power,
    load_actuator_catalog,
)
from core.distill import (
    DistillCfg,
    EsCfg,
    ResidualPolicy,
    ablation_study,
    build_experts,
    dagger_train,
    es_refine,
    evaluate_policy,
    init_student,
    load_cfg,
    load_residual,
    save_residual,
)
from core.env import ArmEnv, EnvConfig, load_env_config
from core.errors import CheckpointError, ConfigurationError
from core.flow import SamplerCfg, load_policy, save_policy
from core.metrics import DEFAULT_H_AIR, SCORE_NAMES, complexity_scores
from core.motion import MotionClip, SynthMotionSpec, load_motion, save_motion, synth_motion
from core.settings import ACTUATORS, DEFAULT_SEED
from core.storage import read_json, write_csv, write_json


log = logging.getLogger(__name__)

# Коды выхода
EXIT_USAGE: int = 1
EXIT_RUNTIME: int = 2


def fmt(value: float) -> str:
    """Числа в выводе - 6 значащих цифр."""

    return f"{value:.6g}"


def rounded(value: float) -> float:
    return float(fmt(value))


def rounded_report(payload: dict) -> dict:
    """Все числа отчёта оценки до 6 значащих цифр."""

    out = dict(payload)
    out["motions"] = {
        name: {k: rounded(v) for k, v in values.items()} for name, values in payload["motions"].items()
    }
    out["aggregate"] = {k: rounded(v) for k, v in payload["aggregate"].items()}
    if "fitness" in out:
        out["fitness"] = rounded(out["fitness"])
    return out


OVERRIDE_PREFIXES: tuple[str, ...] = ("env", "train", "refine")


class CliConfig(BaseModel):
    """Общие параметры запуска: подкоманда, зерно, переопределения конфигов."""

    model_config = ConfigDict(frozen=True)

    command: str | None = None
    seed: int = DEFAULT_SEED
    quiet: bool = False
    out: str | None = None
    catalog: str | None = None
    overrides: tuple[str, ...] = ()

    @field_validator("overrides")
    @classmethod
    def check_overrides(cls, items: tuple[str, ...]) -> tuple[str, ...]:
        for item in items:
            key = item.split("=", 1)[0].strip()
            if "=" not in item or key.split(".")[0] not in OVERRIDE_PREFIXES or "." not in key:
                raise ValueError(
                    f"{item}: ожидается ключ=значение с префиксом {', '.join(OVERRIDE_PREFIXES)}"
                )
        return items


class MotionCli(click.Group):
    """Группа команд с контрактом кодов выхода 0 / 1 / 2."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("Прервано.", err=True)
            sys.exit(EXIT_RUNTIME)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except ValueError as e:
            log.exception("Ошибка конфигурации.", exc_info=False, extra={"Exception": e})
            click.echo(f"Ошибка: {e}", err=True)
            sys.exit(EXIT_USAGE)
        except (RuntimeError, OSError) as e:
            log.exception("Ошибка выполнения.", exc_info=False, extra={"Exception": e})
            click.echo(f"Сбой: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        sys.exit(rv if isinstance(rv, int) else 0)


def parse_override(item: str) -> tuple[list[str], Any]:
    """a.b=value -> (['a', 'b'], value), значение как JSON или строка."""

    if "=" not in item:
        raise ConfigurationError(f"Переопределение {item} должно иметь вид ключ=значение")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: tuple[str, ...], prefix: str) -> dict:
    """Применяем --set prefix.a.b=value к словарю конфигурации."""

    for item in overrides:
        path, value = parse_override(item)
        if path[0] != prefix:
            continue
        node = raw
        for part in path[1:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"{item}: {part} не объект")
        if len(path) < 2:
            raise ConfigurationError(f"{item}: не указан ключ")
        node[path[-1]] = value
    return raw


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: конфигурация должна быть объектом")
    return raw


def motion_files(path: str) -> list[Path]:
    """Один файл или все *.json каталога по имени."""

    source = Path(path)
    files = sorted(source.glob("*.json")) if source.is_dir() else [source]
    if not files:
        raise ConfigurationError(f"{path}: нет файлов движений")
    return files


def load_motions(path: str) -> dict[str, MotionClip]:
    return {file.stem: load_motion(file) for file in motion_files(path)}


def actuator_catalog(ctx: click.Context) -> dict[str, ActuatorParams]:
    """Встроенный каталог или файл из --catalog."""

    return ACTUATORS if ctx.obj.catalog is None else load_actuator_catalog(ctx.obj.catalog)


def output_path(ctx: click.Context, out: str | None) -> str:
    """--out подкоманды, иначе общий --out."""

    path = out if out is not None else ctx.obj.out
    if path is None:
        raise ConfigurationError("Нужен --out")
    return path


def build_env(ctx: click.Context, env_path: str | None) -> tuple[ArmEnv, EnvConfig]:
    raw = apply_overrides(read_config(env_path), ctx.obj.overrides, "env")
    cfg = load_env_config(raw)
    return ArmEnv(cfg, actuator_catalog(ctx)), cfg


def check_motions(env: ArmEnv, motions: dict[str, MotionClip]) -> None:
    """Все движения должны подходить руке до начала работы."""

    for name, motion in motions.items():
        if motion.n_joints != env.n_joints:
            raise ConfigurationError(
                f"{name}: {motion.n_joints} суставов, у руки {env.n_joints}"
            )
        if not np.isclose(motion.dt, env.cfg.dt, rtol=0.0, atol=1e-9):
            raise ConfigurationError(f"{name}: fps {motion.fps} не совпадает с шагом среды")


@click.group(cls=MotionCli)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True, help="Зерно генераторов.")
@click.option("--quiet", is_flag=True, help="Только предупреждения и ошибки в логе.")
@click.option("--out", type=click.Path(), default=None, help="Выход по умолчанию для подкоманды.")
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON каталог приводов.")
@click.option("--set", "overrides", multiple=True, help="Переопределение env.a.b=value, train.x=..., refine.x=...")
@click.pass_context
def cli(
    ctx: click.Context, seed: int, quiet: bool, out: str | None, catalog: str | None, overrides: tuple[str, ...]
) -> None:
    """Инструменты трекинга движений для игрушечной руки."""

    if quiet:
        logging.getLogger().setLevel(logging.WARNING)
    ctx.obj = CliConfig(
        command=ctx.invoked_subcommand, seed=seed, quiet=quiet,
        out=out, catalog=catalog, overrides=overrides,
    )
    log.debug("Запуск", extra={"command": ctx.obj.command, "seed": seed})


@cli.command()
@click.argument("motions_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--h-air", type=float, default=DEFAULT_H_AIR, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def analyze(ctx: click.Context, motions_dir: str, h_air: float, out: str | None) -> None:
    """Метрики сложности всех движений каталога."""

    out = output_path(ctx, out)
    files = sorted(Path(motions_dir).glob("*.json"))
    report, failed = [], 0
    for file in files:
        try:
            scores = complexity_scores(load_motion(file), h_air=h_air)
        except (ValueError, OSError) as e:
            failed += 1
            log.warning("Пропускаем %s: %s", file.name, e)
            continue
        report.append(
            {
                "motion": file.stem,
                "raw": {k: rounded(v) for k, v in scores.raw().items()},
                "scores": [rounded(v) for v in scores.s],
            }
        )
    if not report:
        raise RuntimeError(f"{motions_dir}: не прочитано ни одного движения")
    write_json(out, report)
    click.echo(f"motions {len(report)} failed {failed}")
    for entry in report:
        scores = " ".join(f"{n} {fmt(v)}" for n, v in zip(SCORE_NAMES, entry["scores"]))
        click.echo(f"{entry['motion']} {scores}")


@cli.command()
@click.argument("name")
@click.option("--v", "velocity", type=float, default=0.0, show_default=True, help="Скорость сустава, рад/с.")
@click.option("--tau", type=float, default=0.0, show_default=True, help="Командный момент, Н м.")
@click.option("--sweep", is_flag=True, help="CSV по сетке скоростей от 0 до 1.1 v_x2.")
@click.option("--points", type=click.IntRange(min=2), default=23, show_default=True)
@click.pass_context
def actuator(ctx: click.Context, name: str, velocity: float, tau: float, sweep: bool, points: int) -> None:
    """Огибающая, трение и мощность привода в точке или по сетке."""

    models = actuator_catalog(ctx)
    if name not in models:
        raise ConfigurationError(f"Неизвестный привод {name}, доступны: {', '.join(sorted(models))}")
    params = models[name]
    header = ("v", "limit", "clipped", "friction", "applied", "power")
    grid = np.linspace(0.0, 1.1 * params.v_x2, points) if sweep else np.array([velocity])
    if sweep:
        click.echo(",".join(header))
    for v in grid:
        limit = float(envelope_limit(v, tau, params))
        clipped = float(clip_torque(tau, v, params))
        friction = float(friction_torque(v, params))
        applied = clipped - friction
        power = float(joint_power(applied, v))
        row = (float(v), limit, clipped, friction, applied, power)
        if sweep:
            click.echo(",".join(fmt(x) for x in row))
        else:
            for key, value in zip(header, row):
                click.echo(f"{key:<9}{fmt(value)}")


@cli.command()
@click.option("--env", "env_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--motions", "motions_path", type=click.Path(exists=True), required=True)
@click.option("--cfg", "cfg_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def train(ctx: click.Context, env_path, motions_path, cfg_path, out) -> None:
    """DAgger дистилляция экспертов в единую политику."""

    out_dir = Path(output_path(ctx, out))
    env, env_cfg = build_env(ctx, env_path)
    raw = read_config(cfg_path)
    raw.setdefault("seed", ctx.obj.seed)
    cfg: DistillCfg = load_cfg(DistillCfg, apply_overrides(raw, ctx.obj.overrides, "train"), "train")
    motions = load_motions(motions_path)
    check_motions(env, motions)
    write_json(
        out_dir / "config.json",
        {"env": env_cfg.model_dump(mode="json"), "train": cfg.model_dump(mode="json"), "motions": list(motions)},
    )

    def on_iteration(iteration: int, net, loss: float) -> None:
        if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            save_policy(net, out_dir / f"policy_{iteration:04d}.json")

    net, history = dagger_train(
        env, build_experts(motions), motions, init_student(env, cfg), cfg, on_iteration
    )
    save_policy(net, out_dir / "policy.json")
    write_csv(out_dir / "loss.csv", ("iteration", "value"), ((i + 1, rounded(v)) for i, v in enumerate(history)))
    click.echo(f"final_loss {fmt(history[-1]) if history else 'nan'}")


@cli.command(name="eval")
@click.option("--policy", "policy_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--residual", "residual_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--expert", is_flag=True, help="Оценить привилегированных экспертов вместо политики.")
@click.option("--env", "env_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--motions", "motions_path", type=click.Path(exists=True), required=True)
@click.option("--rollouts", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=5, show_default=True, help="Шаги Эйлера.")
@click.option("--mode", type=click.Choice(["base", "aggressive"]), default="base", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def evaluate(ctx: click.Context, policy_path, residual_path, expert, env_path, motions_path, rollouts, steps, mode, out) -> None:
    """Метрики трекинга по n эпизодам на клип."""

    out = output_path(ctx, out)
    env, _ = build_env(ctx, env_path)
    motions = load_motions(motions_path)
    check_motions(env, motions)
    if expert:
        policy = build_experts(motions)
        residual = None
    elif policy_path is None:
        raise ConfigurationError("Нужен --policy или --expert")
    else:
        policy = load_policy(policy_path)
        if policy.obs_dim != env.obs_dim or policy.action_dim != env.action_dim:
            raise CheckpointError(
                f"{policy_path}: сеть ({policy.obs_dim}, {policy.action_dim}) "
                f"не подходит среде ({env.obs_dim}, {env.action_dim})"
            )
        residual = load_residual(residual_path) if residual_path else None
        if residual is not None and residual.action_dim != env.action_dim:
            raise CheckpointError(f"{residual_path}: остаточная политика не подходит среде")
    report = evaluate_policy(
        policy, env, motions, n_rollouts=rollouts, residual=residual,
        sampler=SamplerCfg(steps=steps, seed=ctx.obj.seed), seed=ctx.obj.seed, mode=mode,
    )
    write_json(out, rounded_report(report.as_dict()))
    for name, metrics in report.per_motion.items():
        click.echo(
            f"{name} mpjpe {fmt(metrics.mpjpe_mm)} dvel {fmt(metrics.dvel)} "
            f"dacc {fmt(metrics.dacc)} success {fmt(metrics.success)}"
        )
    click.echo(f"success {fmt(report.aggregate.success)}")


@cli.command()
@click.option("--policy", "policy_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--env", "env_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--motions", "motions_path", type=click.Path(exists=True), required=True)
@click.option("--cfg", "cfg_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--ablate", is_flag=True, help="Сравнить доводку без модели привода, штрафа мощности и агрессивной рандомизации.")
@click.option("--rollouts", type=click.IntRange(min=1), default=10, show_default=True, help="Эпизодов на клип при --ablate.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def refine(ctx: click.Context, policy_path, env_path, motions_path, cfg_path, ablate, rollouts, out) -> None:
    """Доводка остаточной политики эволюционной стратегией."""

    out_dir = Path(output_path(ctx, out))
    env, env_cfg = build_env(ctx, env_path)
    raw = read_config(cfg_path)
    raw.setdefault("seed", ctx.obj.seed)
    cfg: EsCfg = load_cfg(EsCfg, apply_overrides(raw, ctx.obj.overrides, "refine"), "refine")
    motions = load_motions(motions_path)
    check_motions(env, motions)
    base = load_policy(policy_path)
    if base.obs_dim != env.obs_dim or base.action_dim != env.action_dim:
        raise ConfigurationError(f"{policy_path}: сеть не подходит среде")
    write_json(
        out_dir / "config.json",
        {"env": env_cfg.model_dump(mode="json"), "refine": cfg.model_dump(mode="json"), "motions": list(motions)},
    )
    if ablate:
        results = ablation_study(
            base, env_cfg, motions, cfg, n_rollouts=rollouts, seed=ctx.obj.seed,
            catalog=actuator_catalog(ctx), sampler=SamplerCfg(seed=ctx.obj.seed),
        )
        write_json(out_dir / "ablation.json", [rounded_report(r.as_dict()) for r in results.values()])
        for name, result in results.items():
            agg = result.report.aggregate
            click.echo(
                f"{name} fitness {fmt(result.fitness)} success {fmt(agg.success)} mpjpe {fmt(agg.mpjpe_mm)}"
            )
        return
    residual = ResidualPolicy.init(env.n_joints, np.random.default_rng(cfg.seed), cfg.hidden, cfg.bound)
    best, history = es_refine(base, residual, env, motions, cfg)
    save_residual(best, out_dir / "residual.json")
    write_csv(out_dir / "reward.csv", ("generation", "best"), ((i, rounded(v)) for i, v in enumerate(history)))
    click.echo(f"base {fmt(history[0])} best {fmt(history[-1])}")


@cli.command()
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--joints", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--duration", type=float, default=10.0, show_default=True, help="с")
@click.option("--fps", type=float, default=50.0, show_default=True)
@click.option("--freq", type=float, multiple=True, default=(0.25,), show_default=True, help="Гц, одно значение на все суставы или по суставу.")
@click.option("--amp", type=float, multiple=True, default=(0.3,), show_default=True, help="рад")
@click.option("--phase", type=float, multiple=True, default=(), help="рад")
@click.option("--link-length", type=float, multiple=True, default=(), help="м")
@click.pass_context
def synth(ctx: click.Context, out, joints, duration, fps, freq, amp, phase, link_length) -> None:
    """Синусоидальное референсное движение."""

    out = output_path(ctx, out)

    def per_joint(values: tuple[float, ...]) -> list[float] | None:
        if not values:
            return None
        return list(values) * joints if len(values) == 1 else list(values)

    try:
        spec = SynthMotionSpec(
            n_joints=joints, duration=duration, fps=fps,
            amplitudes=per_joint(amp), frequencies=per_joint(freq),
            phases=per_joint(phase), link_lengths=per_joint(link_length),
        )
    except ValueError as e:
        raise ConfigurationError(f"Параметры движения: {e}") from e
    clip = synth_motion(spec)
    save_motion(clip, out)
    click.echo(f"frames {clip.n_frames} joints {clip.n_joints}")


if __name__ == "__main__":
    log.info("Поехали")
    cli()
