"""Command-line surface: happy paths in-process, exit-code contract."""

import json
import subprocess
import sys

import numpy as np
import pytest

from menet import cli
from menet import data as D


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, split, config and a one-epoch training run, via the CLI."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "ds"
    assert cli.main(["gen-data", "--out", str(data), "--cases", "10",
                     "--size", "16", "--seed", "4"]) == 0
    assert cli.main(["split", "--data", str(data), "--ratio", "8:1:1",
                     "--seed", "4"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "epochs": 1, "batch_size": 2, "learning_rate": 0.001,
        "weight_decay": 0.00001, "seed": 0, "slices_per_epoch": 4,
        "model": {"levels": 2, "base_channels": 2, "height": 16, "width": 16}}))
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(run)]) == 0
    return {"root": root, "data": data, "cfg": cfg, "run": run}


class TestHappyPaths:
    def test_dataset_and_split_on_disk(self, workspace):
        data = workspace["data"]
        assert D.list_cases(data) == [f"case{i:03d}" for i in range(10)]
        spec = D.load_split(data / "split.json")
        assert (len(spec.train), len(spec.val), len(spec.test)) == (8, 1, 1)

    def test_train_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint.mnck").is_file()
        assert (run / "record.json").is_file()

    def test_eval_writes_report(self, workspace, tmp_path):
        report = tmp_path / "report.json"
        rc = cli.main(["eval", "--checkpoint", str(workspace["run"] / "checkpoint.mnck"),
                       "--data", str(workspace["data"]), "--split", "test",
                       "--out", str(report)])
        assert rc == 0
        payload = json.loads(report.read_text())
        assert payload["split"] == "test"
        assert set(payload["mean"]) == {"dsc", "ravd", "hd", "assd"}

    def test_predict_then_metrics(self, workspace, tmp_path, capsys):
        case_dir = workspace["data"] / "case000"
        mask = tmp_path / "mask.mvol"
        assert cli.main(["predict", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mnck"),
                         "--case", str(case_dir), "--out", str(mask)]) == 0
        vol = D.read_mvol(mask)
        gt = D.read_mvol(case_dir / "label.mvol")
        assert vol.voxels.shape == gt.voxels.shape
        assert vol.voxels.dtype == np.uint8

        assert cli.main(["metrics", "--pred", str(mask),
                         "--gt", str(case_dir / "label.mvol")]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert [line.split()[0] for line in out[-4:]] == ["dsc", "ravd", "hd", "assd"]

    def test_predict_without_label_file(self, workspace, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        src = workspace["data"] / "case001"
        for name in ("t1w.mvol", "fa.mvol"):
            (bare / name).write_bytes((src / name).read_bytes())
        mask = tmp_path / "m.mvol"
        assert cli.main(["predict", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mnck"),
                         "--case", str(bare), "--out", str(mask)]) == 0
        assert mask.is_file()

    def test_gradcheck_single_op(self, workspace):
        assert cli.main(["gradcheck", "--op", "sigmoid"]) == 0

    def test_ablate_tiny(self, workspace, tmp_path):
        rc = cli.main(["ablate", "--config", str(workspace["cfg"]),
                       "--data", str(workspace["data"]), "--seeds", "1",
                       "--out", str(tmp_path)])
        assert rc == 0
        csv = (tmp_path / "ablation.csv").read_text().splitlines()
        assert csv[0] == "model,seed,dsc,ravd,hd,assd"
        assert len(csv) == 3


class TestExitCodes:
    def test_unknown_command_is_usage(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["not-a-command"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_required_flag_is_usage(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--config", "x.json"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_bad_ratio_is_usage(self, workspace):
        with pytest.raises(SystemExit) as exc:
            cli.main(["split", "--data", str(workspace["data"]), "--ratio", "8:2"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_checkpoint_is_data_error(self, workspace):
        rc = cli.main(["eval", "--checkpoint", "/no/such.mnck",
                       "--data", str(workspace["data"])])
        assert rc == cli.EXIT_DATA

    def test_corrupt_mvol_is_data_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.mvol"
        bad.write_bytes(b"JUNKJUNKJUNK")
        gt = workspace["data"] / "case000" / "label.mvol"
        assert cli.main(["metrics", "--pred", str(bad), "--gt", str(gt)]) == cli.EXIT_DATA

    def test_shape_mismatch_is_data_error(self, workspace, tmp_path):
        small = tmp_path / "small.mvol"
        D.write_mvol(D.Volume(np.zeros((2, 2, 2), dtype=np.uint8)), small)
        gt = workspace["data"] / "case000" / "label.mvol"
        assert cli.main(["metrics", "--pred", str(small), "--gt", str(gt)]) == cli.EXIT_DATA

    def test_unknown_gradcheck_op_is_data_error(self):
        assert cli.main(["gradcheck", "--op", "bogus"]) == cli.EXIT_DATA

    def test_invalid_config_is_data_error(self, workspace, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        rc = cli.main(["train", "--config", str(cfg),
                       "--data", str(workspace["data"]), "--out", str(tmp_path / "r")])
        assert rc == cli.EXIT_DATA

    def test_console_script_usage_exit(self):
        proc = subprocess.run([sys.executable, "-m", "menet.cli", "definitely-wrong"],
                              capture_output=True, text=True)
        assert proc.returncode == cli.EXIT_USAGE
        assert "invalid choice" in proc.stderr
