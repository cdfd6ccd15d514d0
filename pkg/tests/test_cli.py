import json
import subprocess
import sys

import pytest

from klg.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_MISSING,
    SUBCOMMANDS,
    load_config,
    main,
    parse_config,
    sha256_file,
)
from klg.errors import ConfigError
from klg.metrics import read_csv

PATHS = {"corpus": "corpus", "topk": "topk", "checkpoints": "ckpt", "reports": "reports"}
FAST = {
    "paths": PATHS,
    "corpus": {"sizes": [300, 80, 80]},
    "model": {"hidden": 8},
    "training": {"epochs": 2, "base_epochs": 2},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def run_all(cfg_path, out=None, seed=None):
    extra = (["--out", str(out)] if out else []) + (["--seed", str(seed)] if seed is not None else [])
    codes = [main([sub, "--config", str(cfg_path), *extra]) for sub in SUBCOMMANDS]
    return codes


class TestLoadConfig:
    def test_minimal_has_defaults(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.json", {"paths": PATHS}))
        t = cfg.training
        assert (t.tau, t.alpha, t.recall_threshold, t.gamma) == (0.05, 0.9, 0.99, 0.9)
        assert cfg.method == "klg" and cfg.model.heads == 4 and cfg.corpus.sizes == [4000, 1000, 1000]
        assert cfg.corpus.zipf_exponent == 1.2 and t.batch_size == 16 and t.learning_rate == 0.1

    def test_tau_zero(self):
        with pytest.raises(ConfigError, match="training.tau"):
            parse_config({"paths": PATHS, "training": {"tau": 0}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="foo"):
            parse_config({"paths": PATHS, "foo": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="training.lr"):
            parse_config({"paths": PATHS, "training": {"lr": 0.1}})

    def test_missing_paths(self):
        with pytest.raises(ConfigError, match="paths"):
            parse_config({})

    def test_missing_path_entry(self):
        with pytest.raises(ConfigError, match="paths.reports"):
            parse_config({"paths": {k: v for k, v in PATHS.items() if k != "reports"}})

    def test_overlapping_paths(self):
        with pytest.raises(ConfigError, match="overlap"):
            parse_config({"paths": {**PATHS, "reports": "corpus/reports"}})

    @pytest.mark.parametrize(
        "section, key, value",
        [
            (None, "method", "svm"),
            ("training", "alpha", 2.0),
            ("training", "epochs", "3"),
            ("model", "heads", 5),
            ("model", "sigma", "relu"),
            ("corpus", "n_labels", 12),
            ("training", "normalize", 1),
        ],
    )
    def test_invalid_values_name_field(self, section, key, value):
        raw = {"paths": PATHS}
        if section:
            raw[section] = {key: value}
        else:
            raw[key] = value
        with pytest.raises(ConfigError, match=(f"{section}.{key}" if section else key)):
            parse_config(raw)

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "c.json")


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {"paths": PATHS, "training": {"tau": -1}})
        assert main(["gen-data", "--config", str(path)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "training.tau" in err and err.count("\n") == 1

    def test_eval_before_train_klg(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", FAST)
        assert main(["gen-data", "--config", str(path)]) == 0
        assert main(["eval", "--config", str(path)]) == EXIT_MISSING
        assert "train-klg" in capsys.readouterr().err

    @pytest.mark.parametrize("stage, producer", [("train-base", "gen-data"), ("gen-topk", "gen-data")])
    def test_missing_upstream(self, tmp_path, capsys, stage, producer):
        path = write_config(tmp_path / "c.json", FAST)
        assert main([stage, "--config", str(path)]) == EXIT_MISSING
        assert producer in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(FAST))
        cfg["training"]["learning_rate"] = float("inf")
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["gen-data", "--config", str(path)]) == 0
        assert main(["train-base", "--config", str(path)]) == EXIT_DIVERGED
        assert "non-finite loss" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"paths": PATHS, "training": {"tau": 0}})
        proc = subprocess.run([sys.executable, "-m", "klg", "gen-data", "--config", str(path)], capture_output=True)
        assert proc.returncode == EXIT_CONFIG


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    path = write_config(root / "c.json", FAST)
    return root, run_all(path)


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        root, codes = pipeline
        assert codes == [0] * 6
        report = json.loads((root / "reports" / "report.json").read_text())
        assert report["method"] == "klg" and 0 <= report["metrics"]["micro_f1"] <= 1

    def test_manifest_digests(self, pipeline):
        root, _ = pipeline
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["seed"] == 0 and set(manifest["stages"]) == set(SUBCOMMANDS)
        for stage in manifest["stages"].values():
            for rel, digest in {**stage["inputs"], **stage["outputs"]}.items():
                assert sha256_file(root / rel) == digest
        assert "topk/k.json" in manifest["stages"]["train-klg"]["inputs"]

    def test_csv_outputs(self, pipeline):
        root, _ = pipeline
        columns, rows = read_csv(root / "reports" / "recall_curve.csv")
        assert columns == ["k", "recall"] and len(rows) == 21 and float(rows[-1][1]) == 1.0
        columns, rows = read_csv(root / "reports" / "weight_norms.csv")
        assert columns == ["label", "norm", "train_support"] and len(rows) == 20
        supports = [int(r[2]) for r in rows]
        assert supports == sorted(supports, reverse=True)

    def test_epoch_logs(self, pipeline):
        root, _ = pipeline
        for name in ("train-base.jsonl", "train-klg.jsonl"):
            lines = (root / "reports" / name).read_text().splitlines()
            assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
            assert set(json.loads(lines[0])) == {"epoch", "train_loss", "dev_micro_f1"}

    def test_byte_identical_rerun(self, pipeline, tmp_path):
        root, _ = pipeline
        path = write_config(tmp_path / "c.json", FAST)
        assert run_all(path) == [0] * 6
        for rel in ("reports/report.json", "ckpt/base.ckpt", "ckpt/model.ckpt", "manifest.json", "topk/test.jsonl"):
            assert (tmp_path / rel).read_bytes() == (root / rel).read_bytes(), rel

    def test_seed_override_and_out(self, tmp_path):
        path = write_config(tmp_path / "c.json", FAST)
        out = tmp_path / "elsewhere"
        assert main(["gen-data", "--config", str(path), "--seed", "9", "--out", str(out)]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 9
        assert json.loads((out / "corpus" / "meta.json").read_text())["seed"] == 9
        assert not (tmp_path / "corpus").exists()


@pytest.mark.parametrize("method", ["base", "base-ls", "base-prompt", "klg-no-ds"])
def test_methods(tmp_path, method):
    path = write_config(tmp_path / "c.json", {**FAST, "method": method})
    assert run_all(path) == [0] * 6
    report = json.loads((tmp_path / "reports" / "report.json").read_text())
    assert report["method"] == method
