import csv
import json

import pytest

from finegrain.cli import build_parser, config_from_args, main

TINY = ["--epochs", "1", "--finetune-epochs", "1", "--loc-epochs", "1", "--channels", "4", "8",
        "--embedding-dim", "16", "--test-per-class", "2", "--loc-channels", "4", "4",
        "--loc-input", "32", "--data-samples-per-class", "3", "--data-image-size", "32",
        "--data-min-object", "8", "--data-max-object", "16"]


class TestParsing:
    @pytest.mark.parametrize("cmd", ["train", "ablate", "run"])
    def test_seed_is_mandatory(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--out", "x"])
        assert exc.value.code == 2
        assert "--seed" in capsys.readouterr().err

    def test_flags_map_onto_config(self):
        args = build_parser().parse_args(
            ["train", "--out", "x", "--seed", "7", "--pooling", "gap", "--no-weighted-finetune",
             "--lam", "0.5", "--channels", "4", "8", "--loc-input", "64", "--data-noise", "0.2"])
        cfg = config_from_args(args)
        assert (cfg.seed, cfg.pooling, cfg.weighted_finetune, cfg.lam) == (7, "gap", False, 0.5)
        assert cfg.channels == (4, 8) and cfg.dataset.noise == 0.2

    def test_config_file_then_flags(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"lr": 0.01, "tau": 0.2, "dataset": {"num_classes": 3}}))
        args = build_parser().parse_args(["train", "--out", "x", "--seed", "1",
                                          "--config", str(path), "--lr", "0.02"])
        cfg = config_from_args(args)
        assert (cfg.lr, cfg.tau, cfg.dataset.num_classes) == (0.02, 0.2, 3)

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--seed", "0", "--tau", "1.5"])
        assert code == 2
        assert "tau" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "gkmp_weighted" in out


def test_gen_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)] + TINY) == 0
    train = json.loads((tmp_path / "train" / "index.json").read_text())
    test = json.loads((tmp_path / "test" / "index.json").read_text())
    assert len(train["samples"]) == 15 and len(test["samples"]) == 10


def test_train_then_localize_then_eval(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--seed", "3"] + TINY) == 0
    ckpt = tmp_path / "checkpoint.npz"
    assert ckpt.exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--boxes", "localizer"]) == 2
    assert main(["train-loc", "--checkpoint", str(ckpt)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--boxes", "truth"]) == 0
    truth = json.loads(capsys.readouterr().out)
    assert truth["loc_accuracy"] == 1.0
    assert main(["gen-data", "--out", str(tmp_path / "data")] + TINY) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "data" / "test")]) == 0
    from_disk = json.loads(capsys.readouterr().out)
    assert from_disk["n"] == 10


def test_ablate_single_cell(tmp_path):
    code = main(["ablate", "--out", str(tmp_path), "--seed", "0", "--poolings", "gkmp",
                 "--embedding-losses", "within", "--localizer-modes", "off",
                 "--weighted-modes", "on"] + TINY)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 1
    assert rows[0]["status"] == "ok" and rows[0]["embedding_loss"] == "within"
    assert rows[0]["weighted_finetune"] == "True" and rows[0]["localizer"] == "False"
    assert json.loads((tmp_path / "ablation.json").read_text())[0]["k"] == 4
