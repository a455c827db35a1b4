import csv
import json
import os
import subprocess
import sys

import pytest

from fedetf.cli import CSV_HEADER, compare_configs, main, run_config
from fedetf.config import FedConfig, parse_config
from fedetf.errors import ConfigError

BASE = """\
scene: synthetic4-6-2
samples_per_class: 10
input_dim: 4
hidden_dims: [8]
feature_dim: 4
lr: 0.002
sample_fraction: 0.5
"""


@pytest.fixture
def config_file(tmp_path):
    def _make(rounds=3, extra="", name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(BASE + f"rounds: {rounds}\noutput_dir: {tmp_path / 'out'}\n" + extra)
        return path
    return _make


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRun:
    def test_three_rounds_three_rows(self, config_file, tmp_path):
        assert main(["run", "--config", str(config_file())]) == 0
        rows = read_rows(tmp_path / "out" / "metrics.csv")
        assert tuple(rows[0]) == CSV_HEADER
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        assert all(len(r) == 5 for r in rows)
        assert all(len(r[1].split(";")) == 3 for r in rows[1:])

    def test_manifest_contents(self, config_file, tmp_path):
        main(["run", "--config", str(config_file()), "--set", "gmv_alpha=0.75"])
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["status"] == "complete"
        assert manifest["overrides"] == {"gmv_alpha": 0.75}
        assert manifest["config"]["gmv_alpha"] == 0.75
        assert manifest["seed"] == 0 and manifest["code_version"]
        assert manifest["rounds_completed"] == 3
        assert 0.0 <= manifest["final_trailing_mean"] <= 1.0

    def test_manifest_round_trip(self, config_file, tmp_path):
        original = parse_config(config_file(), ["gmv_alpha=0.75"], env={})
        run_config(original)
        again = parse_config(tmp_path / "out" / "manifest.json", env={})
        assert again == original

    def test_rerun_from_manifest_reproduces_accuracy(self, config_file, tmp_path):
        main(["run", "--config", str(config_file())])
        first = [r[3] for r in read_rows(tmp_path / "out" / "metrics.csv")]
        os.replace(tmp_path / "out" / "manifest.json", tmp_path / "manifest.json")
        main(["run", "--config", str(tmp_path / "manifest.json")])
        assert [r[3] for r in read_rows(tmp_path / "out" / "metrics.csv")] == first

    def test_interrupted_run_keeps_complete_prefix(self, config_file, tmp_path, monkeypatch):
        import fedetf.cli as cli

        real_step = cli.Experiment.step

        def step(self):
            if self.round == 2:
                raise KeyboardInterrupt
            return real_step(self)

        monkeypatch.setattr(cli.Experiment, "step", step)
        assert main(["run", "--config", str(config_file(rounds=5))]) == 130
        rows = read_rows(tmp_path / "out" / "metrics.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert all(len(r) == 5 and all(r) for r in rows)
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["status"] == "failed" and manifest["rounds_completed"] == 2

    def test_unwritable_output_fails_before_compute(self, config_file, tmp_path, monkeypatch, capsys):
        import fedetf.cli as cli

        blocker = tmp_path / "file"
        blocker.write_text("")
        monkeypatch.setattr(cli, "load_datasets", lambda cfg: pytest.fail("computed before checking output"))
        code = main(["run", "--config", str(config_file()), "--set", f"output_dir={blocker / 'sub'}"])
        assert code == 2
        assert "output_dir" in capsys.readouterr().err

    def test_checkpoints_written(self, config_file, tmp_path):
        main(["run", "--config", str(config_file(rounds=4)), "--set", "checkpoint_every=2"])
        names = sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir())
        assert names == ["round_00002.npz", "round_00004.npz"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_training_error_gives_nonzero_exit(self, config_file):
        code = main(["run", "--config", str(config_file()), "--set", "lr=1e6", "--set", "etf_scale=1e150"])
        assert code == 4


class TestValidate:
    def test_ok(self, config_file, capsys):
        assert main(["validate", "--config", str(config_file())]) == 0
        assert capsys.readouterr().out.startswith("ok")

    def test_lists_every_problem(self, config_file, capsys):
        code = main(["validate", "--config", str(config_file()), "--set", "lr=-1", "--set", "colour=red"])
        assert code == 2
        err = capsys.readouterr().err
        assert "colour" in err and "lr" in err

    def test_missing_file(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "nope.yaml")]) == 2


class TestCompare:
    def cfg(self, **kw):
        base = dict(num_classes=4, num_clients=6, classes_per_client=2, samples_per_class=10, rounds=3,
                    input_dim=4, hidden_dims=[8], feature_dim=4, lr=0.002, sample_fraction=0.5)
        base.update(kw)
        return FedConfig(**base).validate()

    def test_identical_configs_zero_difference(self):
        summary = compare_configs(self.cfg(), self.cfg(), trials=2)
        assert abs(summary["mean_difference"]) <= 1e-12
        assert [r["seed"] for r in summary["per_seed"]] == [0, 1]

    def test_single_trial_has_no_spread(self):
        summary = compare_configs(self.cfg(), self.cfg(mode="baseline"), trials=1)
        assert "std_difference" not in summary and len(summary["per_seed"]) == 1

    def test_refuses_non_axis_difference(self):
        with pytest.raises(ConfigError, match="lr"):
            compare_configs(self.cfg(), self.cfg(lr=0.01), trials=1)

    def test_cli_output(self, config_file, capsys):
        a = config_file()
        b = config_file(extra="mode: baseline\n", name="b.yaml")
        assert main(["compare", "--a", str(a), "--b", str(b), "--trials", "2"]) == 0
        out = capsys.readouterr().out
        assert "seed 0" in out and "seed 1" in out and "std" in out


def test_module_entry_point(config_file):
    proc = subprocess.run([sys.executable, "-m", "fedetf", "validate", "--config", str(config_file())],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
