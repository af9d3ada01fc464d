import csv
import shutil
import subprocess

import numpy as np
import pytest

from ldpem import mechanisms as M
from ldpem.cli import main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "source = binomial\nspace_size = 20\nmechanism = krr\nepsilons = 1.0, 2.0\n"
        "n = 3000\nrepetitions = 2\nestimators = em, invp\nmetrics = tv\nseed = 4\n"
    )
    return path


class TestExperiment:
    def test_writes_csv(self, config, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["experiment", "--config", str(config), "--out", str(out)]) == 0
        files = sorted(out.glob("results-*.csv"))
        assert len(files) == 1
        rows = list(csv.reader(open(files[0])))
        assert rows[0] == ["epsilon", "repetition", "estimator", "metric", "value"]
        assert len(rows) == 1 + 2 * 2 * 2
        assert "epsilon=1 em" in capsys.readouterr().out

    def test_seed_override_changes_output(self, config, tmp_path):
        main(["experiment", "--config", str(config), "--out", str(tmp_path / "a")])
        main(["experiment", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "5"])
        a = next((tmp_path / "a").glob("results-*.csv"))
        b = next((tmp_path / "b").glob("results-*.csv"))
        assert a.name != b.name and a.read_text() != b.read_text()

    def test_dump_mechanism_and_heatmap(self, config, tmp_path):
        dump = tmp_path / "mech.csv"
        rc = main(["experiment", "--config", str(config), "--out", str(tmp_path / "o"),
                   "--format", "csv,heatmap-svg", "--dump-mechanism", str(dump)])
        assert rc == 0
        np.testing.assert_allclose(M.Mechanism.from_csv(dump).probs, M.krr(20, 1.0).probs)
        assert list((tmp_path / "o").glob("heatmap-*.svg"))

    def test_recorded_errors_exit_nonzero(self, tmp_path):
        path = tmp_path / "amb.cfg"
        path.write_text("source = custom\nweights = 1 1 2\nmechanism = ambiguous3\nn = 100\n")
        assert main(["experiment", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("n = 0\n")
        assert main(["experiment", "--config", str(path)]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["experiment", "--config", str(tmp_path / "none.cfg")]) == 1


class TestEstimate:
    def test_em_to_stdout(self, tmp_path, capsys):
        obs = tmp_path / "z.txt"
        obs.write_text("0 1 1 2\n")
        rc = main(["estimate", "--mechanism", "krr", "--space-size", "3", "--epsilon", "0.6931471805599453",
                   "--observations", str(obs), "--delta", "1e-14"])
        assert rc == 0
        rows = list(csv.reader(capsys.readouterr().out.splitlines()))
        est = np.array([float(r[1]) for r in rows[1:]])
        np.testing.assert_allclose(est, [0, 1, 0], atol=2e-4)

    def test_inversion_and_trace(self, tmp_path):
        obs = tmp_path / "z.txt"
        obs.write_text("0\n1\n1\n2\n")
        out = tmp_path / "o"
        assert main(["estimate", "--mechanism", "krr", "--space-size", "3", "--epsilon", "0.6931471805599453",
                     "--observations", str(obs), "--estimator", "invn", "--out", str(out)]) == 0
        rows = list(csv.reader(open(out / "estimate.csv")))
        np.testing.assert_allclose([float(r[1]) for r in rows[1:]], [0, 1, 0], atol=1e-12)
        assert main(["estimate", "--mechanism", "krr", "--space-size", "3",
                     "--observations", str(obs), "--out", str(out)]) == 0
        assert (out / "em_trace.csv").exists()

    def test_rappor_bits(self, tmp_path, capsys):
        obs = tmp_path / "b.txt"
        obs.write_text("0 1 0\n0 1 0\n1 1 0\n0 1 1\n")
        assert main(["estimate", "--mechanism", "rappor", "--epsilon", "4",
                     "--observations", str(obs)]) == 0
        est = [float(r.split(",")[1]) for r in capsys.readouterr().out.splitlines()[1:]]
        assert int(np.argmax(est)) == 1

    def test_singular_inversion_fails(self, tmp_path, capsys):
        obs = tmp_path / "z.txt"
        obs.write_text("0 1 2")
        assert main(["estimate", "--mechanism", "ambiguous3", "--observations", str(obs),
                     "--estimator", "invp"]) == 1
        assert "condition number" in capsys.readouterr().err

    def test_mechanism_from_csv(self, tmp_path, capsys):
        table = tmp_path / "m.csv"
        M.truncated_geometric(0, 3, 1.0).to_csv(table)
        obs = tmp_path / "z.txt"
        obs.write_text("0 0 1 3")
        assert main(["estimate", "--mechanism", str(table), "--observations", str(obs),
                     "--estimator", "invp"]) == 0

    def test_space_size_required(self, tmp_path):
        obs = tmp_path / "z.txt"
        obs.write_text("0")
        assert main(["estimate", "--mechanism", "krr", "--observations", str(obs)]) == 1


class TestOtherCommands:
    def test_counterexamples_report(self, capsys):
        rc = main(["counterexamples"])
        out = capsys.readouterr().out
        assert out.count("PASS") + out.count("FAIL") == 4
        assert rc == (0 if "FAIL" not in out else 1)

    def test_uniqueness(self, capsys):
        assert main(["uniqueness", "--mechanism", "ambiguous3"]) == 0
        assert "unique: false" in capsys.readouterr().out
        assert main(["uniqueness", "--mechanism", "truncated_geometric", "--space-size", "6"]) == 0
        assert "unique: true" in capsys.readouterr().out

    def test_uniqueness_with_observations(self, tmp_path, capsys):
        obs = tmp_path / "z.txt"
        obs.write_text("1 1 1")
        assert main(["uniqueness", "--mechanism", "krr", "--space-size", "3", "--observations", str(obs)]) == 0
        assert "unique: false" in capsys.readouterr().out

    def test_surface(self, tmp_path):
        obs = tmp_path / "z.txt"
        obs.write_text("0 1 1 2")
        rc = main(["surface", "--mechanism", "krr", "--space-size", "3", "--epsilon", "0.6931471805599453",
                   "--observations", str(obs), "--resolution", "11", "--out", str(tmp_path)])
        assert rc == 0
        rows = list(csv.reader(open(tmp_path / "surface.csv")))
        assert len(rows) == 1 + 66
        best = max(rows[1:], key=lambda r: float(r[2]))
        assert (float(best[0]), float(best[1])) == (0.0, 0.0)

    def test_surface_needs_three_inputs(self, tmp_path):
        assert main(["surface", "--mechanism", "krr", "--space-size", "4", "--out", str(tmp_path)]) == 1

    @pytest.mark.skipif(shutil.which("ldpem") is None, reason="console script not installed")
    def test_console_script(self):
        res = subprocess.run(["ldpem", "uniqueness", "--mechanism", "ambiguous3"], capture_output=True, text=True)
        assert res.returncode == 0 and "rank: 2" in res.stdout
        res = subprocess.run(["ldpem", "bogus"], capture_output=True, text=True)
        assert res.returncode != 0
