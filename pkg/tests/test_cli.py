import json

import numpy as np
import pytest

from svmix import checks, cli, formats
from svmix import selector as selector_mod

TINY = ["--set", "num_classes=2", "--set", "samples_per_class=4", "--set", "val_per_class=4",
        "--set", "frames=4", "--set", "height=16", "--set", "width=16", "--set", "widths=[3, 4]",
        "--set", "d_k=4", "--epochs", "1"]


def test_run_writes_into_env_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SVMIX_OUT", str(tmp_path))
    assert cli.main(["run", "--arm", "mixup", "--seed", "3"] + TINY) == 0
    (run_dir,) = list(tmp_path.iterdir())
    assert run_dir.name.startswith("mixup-s3-")
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["widths"] == [3, 4] and cfg["arm"] == "mixup"
    assert "final val_acc" in capsys.readouterr().out


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"omega": 3.0, "seed": 1}))
    args = cli.make_parser().parse_args(["run", "--config", str(path), "--seed", "7", "--set", "momentum=0.5"])
    cfg = cli.build_config(args)
    assert (cfg.omega, cfg.seed, cfg.momentum) == (3.0, 7, 0.5)


def test_invalid_config_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--switch-prob", "1.5", "--out", str(tmp_path / "r")]) == 2
    assert "switch_prob" in capsys.readouterr().err
    assert cli.main(["run", "--set", "no_such_key=1"]) == 2
    assert cli.main(["run", "--set", "noequals"]) == 2


def test_missing_and_corrupt_files_exit_3(tmp_path, capsys):
    assert cli.main(["inspect", str(tmp_path / "absent.mask")]) == 3
    path = tmp_path / "bad.mask"
    formats.save_mask_dump(path, np.zeros((1, 2, 2, 2)), [0.5], "spatial")
    path.write_bytes(path.read_bytes()[:-1])
    assert cli.main(["inspect", str(path)]) == 3
    assert "byte offset" in capsys.readouterr().err


def test_contract_violation_exits_1(tmp_path, monkeypatch):
    from svmix import experiment
    from svmix.trainer import NonFiniteLoss

    def boom(*a, **k):
        raise NonFiniteLoss("non-finite loss at step 0", None)

    monkeypatch.setattr(experiment, "train", boom)
    assert cli.main(["run", "--out", str(tmp_path / "r")] + TINY) == 1


def test_inspect_prints_summary_and_image(tmp_path, capsys):
    path = tmp_path / "m.mask"
    formats.save_mask_dump(path, np.full((1, 2, 3, 3), 0.35), [0.35], "spatial", 4)
    assert cli.main(["inspect", str(path), "--images", str(tmp_path / "img")]) == 0
    out = capsys.readouterr().out
    assert "lambda 0.35" in out and (tmp_path / "img" / "m.pgm").exists()


def test_ablate_small_matrix(tmp_path, capsys):
    matrix = tmp_path / "m.json"
    matrix.write_text(json.dumps({"cells": {"none": {"arm": "none"}, "mixup": {"arm": "mixup"}}}))
    code = cli.main(["ablate", "--matrix-file", str(matrix), "--seeds", "0", "1", "--out", str(tmp_path / "a")] + TINY)
    assert code == 0
    table = (tmp_path / "a" / "table.tsv").read_text().splitlines()
    assert len(table) == 3 and table[1].startswith("none\t2\t0")


def test_generate_data_is_a_reusable_cache(tmp_path):
    out = tmp_path / "d.bin"
    assert cli.main(["generate-data", "--out", str(out)] + TINY) == 0
    first = out.read_bytes()
    assert cli.main(["generate-data", "--out", str(out)] + TINY) == 0
    assert out.read_bytes() == first


def test_selftest_subset_passes(capsys):
    assert cli.main(["selftest", "--only", "attention", "switching", "ema"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3 and "3/3 checks passed" in out


def test_selftest_reports_a_sign_flipped_selector(monkeypatch, capsys):
    monkeypatch.setattr(selector_mod, "_invert", lambda s: s - 1.0)
    assert cli.main(["selftest", "--only", "masks"]) == 1
    assert "[FAIL]" in capsys.readouterr().out


def test_selftest_rejects_unknown_check():
    assert cli.main(["selftest", "--only", "nonsense"]) == 2


def test_every_check_is_reachable_from_selftest():
    assert set(checks.QUICK) <= set(checks.CHECKS)
    assert {"pull", "trend"} <= set(checks.CHECKS) - set(checks.QUICK)


def test_parser_requires_a_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
