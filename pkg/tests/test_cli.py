import json
import shutil
import tempfile
from pathlib import Path
from unittest import TestCase

from click.testing import CliRunner

from core.settings import ACTUATORS
from main import cli


def values(output: str) -> dict[str, float]:
    """Строки 'ключ значение' в словарь."""

    result = {}
    for line in output.splitlines():
        key, value = line.split()
        result[key] = float(value)
    return result


class CliCase(TestCase):
    """Временный каталог и раннер."""

    def setUp(self) -> None:
        self.tmp = Path(tempfile.mkdtemp())
        self.runner = CliRunner()
        return super().setUp()

    def tearDown(self) -> None:
        shutil.rmtree(self.tmp)
        return super().tearDown()

    def invoke(self, *args: str):
        return self.runner.invoke(cli, [str(a) for a in args])

    def synth(self, path: Path, *args: str) -> Path:
        result = self.invoke("synth", "--out", path, *args)
        self.assertEqual(result.exit_code, 0, result.output)
        return path


class TestActuator(CliCase):
    """Команда actuator."""

    def test_point(self):
        """7520-22.5 на 18.6 рад/с ограничивает 200 Н м до 55.5."""

        result = self.invoke("actuator", "7520-22.5", "--v", "18.6", "--tau", "200")
        self.assertEqual(result.exit_code, 0, result.output)
        row = values(result.output)
        self.assertAlmostEqual(row["limit"], 55.5)
        self.assertAlmostEqual(row["clipped"], 55.5)
        self.assertLess(row["applied"], 55.5)

    def test_standstill(self):
        """В нуле скорости трения нет."""

        row = values(self.invoke("actuator", "7520-22.5", "--tau", "50").output)
        self.assertEqual(row["friction"], 0.0)
        self.assertEqual(row["applied"], 50.0)
        self.assertEqual(row["power"], 0.0)

    def test_sweep(self):
        """CSV с заголовком, огибающая по сетке не растёт."""

        result = self.invoke("actuator", "5020-16", "--tau", "100", "--sweep", "--points", "12")
        self.assertEqual(result.exit_code, 0, result.output)
        lines = result.output.splitlines()
        self.assertEqual(lines[0], "v,limit,clipped,friction,applied,power")
        self.assertEqual(len(lines), 13)
        limits = [float(line.split(",")[1]) for line in lines[1:]]
        self.assertTrue(all(b <= a for a, b in zip(limits[1:], limits[2:])))
        self.assertEqual(limits[-1], 0.0)

    def test_unknown(self):
        """Неизвестный привод - код 1."""

        result = self.invoke("actuator", "9999")
        self.assertEqual(result.exit_code, 1)

    def test_repeat(self):
        """Повторный запуск печатает то же самое."""

        args = ("actuator", "7520-14.3", "--tau", "80", "--sweep")
        self.assertEqual(self.invoke(*args).output, self.invoke(*args).output)

    def test_catalog(self):
        """Общий --catalog заменяет встроенный каталог."""

        path = self.tmp / "catalog.json"
        path.write_text(json.dumps({"slow-motor": ACTUATORS["5020-16"].model_dump()}), encoding="utf-8")
        result = self.invoke("--catalog", path, "actuator", "slow-motor", "--tau", "50")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(values(result.output)["applied"], 50.0)
        self.assertEqual(self.invoke("--catalog", path, "actuator", "5020-16").exit_code, 1)


class TestAnalyze(CliCase):
    """Команды synth и analyze."""

    def test_report(self):
        """Три клипа, повторный запуск даёт тот же файл."""

        motions = self.tmp / "motions"
        self.synth(motions / "a.json", "--amp", "0")
        self.synth(motions / "b.json", "--amp", "0.8", "--freq", "1.0")
        self.synth(motions / "c.json", "--joints", "2", "--amp", "0.1", "--amp", "0.5", "--freq", "0.5", "--freq", "2")
        first = self.invoke("analyze", motions, "--out", self.tmp / "one.json")
        self.assertEqual(first.exit_code, 0, first.output)
        self.assertTrue(first.output.startswith("motions 3 failed 0"))
        second = self.invoke("analyze", motions, "--out", self.tmp / "two.json")
        self.assertEqual(
            (self.tmp / "one.json").read_bytes(), (self.tmp / "two.json").read_bytes()
        )
        report = json.loads((self.tmp / "one.json").read_text(encoding="utf-8"))
        self.assertEqual([r["motion"] for r in report], ["a", "b", "c"])
        for entry in report:
            self.assertEqual(len(entry["scores"]), 6)
            self.assertTrue(all(0.0 <= s <= 1.0 for s in entry["scores"]))
        self.assertEqual(report[0]["scores"], [0.0] * 6)
        self.assertEqual(second.output, first.output)

    def test_broken_file(self):
        """Битый файл пропускается, все битые - код 2."""

        motions = self.tmp / "motions"
        self.synth(motions / "a.json")
        (motions / "broken.json").write_text("{}", encoding="utf-8")
        result = self.invoke("analyze", motions, "--out", self.tmp / "r.json")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("motions 1 failed 1", result.output)
        (motions / "a.json").unlink()
        result = self.invoke("analyze", motions, "--out", self.tmp / "r.json")
        self.assertEqual(result.exit_code, 2)

    def test_global_out(self):
        """--out группы подходит любой подкоманде, без --out - код 1."""

        path = self.tmp / "g.json"
        result = self.invoke("--out", path, "synth", "--duration", "1")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue(path.exists())
        self.assertEqual(self.invoke("synth").exit_code, 1)

    def test_bad_synth(self):
        """Неверное число амплитуд - код 1."""

        result = self.invoke("synth", "--out", self.tmp / "x.json", "--joints", "3", "--amp", "0.1", "--amp", "0.2")
        self.assertEqual(result.exit_code, 1)


class TestPipeline(CliCase):
    """Обучение, оценка и доводка на крошечных настройках."""

    train_cfg = {
        "iterations": 2, "episodes": 1, "rollout_steps": 20, "grad_steps": 5,
        "batch_size": 16, "hidden": [8], "checkpoint_every": 1,
    }
    refine_cfg = {
        "population": 1, "generations": 1, "eval_seeds": [0], "horizon": 10, "hidden": [4],
    }

    def setUp(self) -> None:
        """Два коротких движения и конфиги."""

        super().setUp()
        self.motions = self.tmp / "motions"
        self.synth(self.motions / "slow.json", "--duration", "2")
        self.synth(self.motions / "fast.json", "--duration", "2", "--freq", "1.0", "--amp", "0.6")
        self.train_path = self.tmp / "train.json"
        self.train_path.write_text(json.dumps(self.train_cfg), encoding="utf-8")
        self.refine_path = self.tmp / "refine.json"
        self.refine_path.write_text(json.dumps(self.refine_cfg), encoding="utf-8")

    def train(self, out: Path):
        return self.invoke("--seed", "3", "train", "--motions", self.motions, "--cfg", self.train_path, "--out", out)

    def test_train_eval_refine(self):
        """Весь путь от обучения до доводки."""

        run = self.tmp / "run"
        result = self.train(run)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("final_loss", result.output)
        for name in ("config.json", "policy.json", "policy_0001.json", "policy_0002.json", "loss.csv"):
            self.assertTrue((run / name).exists(), name)
        self.assertEqual((run / "loss.csv").read_text(encoding="utf-8").splitlines()[0], "iteration,value")

        result = self.invoke(
            "eval", "--policy", run / "policy.json", "--motions", self.motions,
            "--rollouts", "1", "--out", self.tmp / "eval.json",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads((self.tmp / "eval.json").read_text(encoding="utf-8"))
        self.assertEqual(set(report["motions"]), {"fast", "slow"})
        self.assertIn("success", report["aggregate"])

        refined = self.tmp / "refined"
        result = self.invoke(
            "refine", "--policy", run / "policy.json", "--motions", self.motions,
            "--cfg", self.refine_path, "--out", refined,
        )
        self.assertEqual(result.exit_code, 0, result.output)
        base, best = result.output.split()[1], result.output.split()[3]
        self.assertGreaterEqual(float(best), float(base))
        self.assertTrue((refined / "residual.json").exists())

        result = self.invoke(
            "eval", "--policy", run / "policy.json", "--residual", refined / "residual.json",
            "--motions", self.motions, "--rollouts", "1", "--out", self.tmp / "eval_res.json",
        )
        self.assertEqual(result.exit_code, 0, result.output)

    def test_deterministic(self):
        """Одинаковое зерно - побайтно одинаковые политика, оценка и доводка."""

        outputs = {}
        for run in ("a", "b"):
            root = self.tmp / run
            self.assertEqual(self.train(root).exit_code, 0)
            evaluation = self.invoke(
                "--seed", "3", "eval", "--policy", root / "policy.json", "--motions", self.motions,
                "--rollouts", "2", "--out", root / "eval.json",
            )
            refined = self.invoke(
                "--seed", "3", "refine", "--policy", root / "policy.json", "--motions", self.motions,
                "--cfg", self.refine_path, "--out", root / "refined",
            )
            self.assertEqual(refined.exit_code, 0, refined.output)
            outputs[run] = (evaluation.output, refined.output)
        self.assertEqual(outputs["a"], outputs["b"])
        for name in ("policy.json", "loss.csv", "eval.json", "refined/residual.json", "refined/reward.csv"):
            self.assertEqual((self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes(), name)

    def test_ablate(self):
        """refine --ablate: база и пять вариантов в ablation.json."""

        run = self.tmp / "run"
        self.assertEqual(self.train(run).exit_code, 0)
        result = self.invoke(
            "refine", "--ablate", "--rollouts", "1", "--policy", run / "policy.json",
            "--motions", self.motions / "slow.json", "--cfg", self.refine_path, "--out", self.tmp / "ablation",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads((self.tmp / "ablation" / "ablation.json").read_text(encoding="utf-8"))
        self.assertEqual(
            [entry["variant"] for entry in report],
            ["base_policy", "full", "no_actuator_model", "no_power_penalty", "no_aggressive", "none"],
        )
        self.assertEqual(len(result.output.splitlines()), 6)

    def test_catalog_env(self):
        """Каталог без нужного привода ломает и обучение - код 1."""

        path = self.tmp / "catalog.json"
        path.write_text(json.dumps({"other": ACTUATORS["5020-16"].model_dump()}), encoding="utf-8")
        result = self.invoke(
            "--catalog", path, "train", "--motions", self.motions, "--cfg", self.train_path, "--out", self.tmp / "x",
        )
        self.assertEqual(result.exit_code, 1)
        result = self.invoke(
            "--catalog", path, "--set", "env.actuators=\"other\"", "train", "--motions", self.motions,
            "--cfg", self.train_path, "--out", self.tmp / "y",
        )
        self.assertEqual(result.exit_code, 0, result.output)

    def test_expert_eval(self):
        """Эксперты проходят медленные движения."""

        result = self.invoke(
            "eval", "--expert", "--motions", self.motions / "slow.json",
            "--rollouts", "2", "--out", self.tmp / "expert.json",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue(result.output.rstrip().endswith("success 1"))

    def test_dimension_mismatch(self):
        """Политика под другую историю - код 1."""

        run = self.tmp / "run"
        self.assertEqual(self.train(run).exit_code, 0)
        result = self.invoke(
            "--set", "env.history_len=3", "eval", "--policy", run / "policy.json",
            "--motions", self.motions, "--rollouts", "1", "--out", self.tmp / "e.json",
        )
        self.assertEqual(result.exit_code, 1)

    def test_bad_set(self):
        """Переопределение без известного префикса - код 1."""

        result = self.invoke("--set", "model.x=1", "eval", "--expert", "--motions", self.motions, "--out", self.tmp / "e.json")
        self.assertEqual(result.exit_code, 1)

    def test_no_policy(self):
        result = self.invoke("eval", "--motions", self.motions, "--out", self.tmp / "e.json")
        self.assertEqual(result.exit_code, 1)

    def test_bad_override(self):
        """Неверное значение переопределения - код 1."""

        result = self.invoke(
            "--set", "train.iterations=-1", "train", "--motions", self.motions, "--out", self.tmp / "x",
        )
        self.assertEqual(result.exit_code, 1)
