import numpy as np
import pytest

from svmix import experiment, formats
from svmix.config import ExperimentConfig
from svmix.errors import ConfigError, FormatError
from svmix.recognizer import Recognizer, evaluate
from svmix.data import generate
from svmix.trainer import NonFiniteLoss

TINY = dict(num_classes=2, samples_per_class=4, val_per_class=4, frames=4, height=16, width=16,
            widths=(3, 4), strides=(2, 2), d_k=4, batch_size=4, epochs=2, head_init="he")


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def test_run_writes_all_artifacts(tmp_path):
    cfg = tiny(dump_masks_every=1)
    rec = experiment.run(cfg, tmp_path / "r")
    out = tmp_path / "r"
    for name in ("config.json", "metrics.tsv", "student.ckpt", "teacher.ckpt", "selector.ckpt", "record.json"):
        assert (out / name).exists(), name
    assert len(list((out / "masks").glob("*.mask"))) == 4
    back = experiment.RunRecord.load(out / "record.json")
    assert back.config_hash == cfg.config_hash() and back.final_val_acc == rec.final_val_acc
    rows = experiment.read_metrics(out / "metrics.tsv")
    assert [r["record"] for r in rows].count("epoch") == 3
    assert [r["record"] for r in rows].count("step") == 4


def test_checkpoint_reproduces_reported_accuracy(tmp_path):
    cfg = tiny(arm="none", epochs=3)
    rec = experiment.run(cfg, tmp_path / "r")
    model = Recognizer.create(cfg.recognizer_config(), np.random.default_rng(99))
    model.load_state_dict(formats.load_checkpoint(tmp_path / "r" / "student.ckpt"))
    _, val = generate(cfg.dataset_spec())
    assert evaluate(model, val) == rec.final_val_acc


def test_rerun_gives_identical_metrics(tmp_path):
    cfg = tiny()
    experiment.run(cfg, tmp_path / "a")
    experiment.run(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.tsv").read_text() == (tmp_path / "b" / "metrics.tsv").read_text()


def test_augmentation_arm_does_not_touch_the_data():
    a = experiment.run(tiny(arm="none", seed=2))
    b = experiment.run(tiny(arm="mixup", seed=2))
    assert a.data_digest == b.data_digest


def test_full_arm_alternates_kinds_at_the_switch_rate(tmp_path):
    experiment.run(tiny(epochs=100), tmp_path / "r")
    kinds = [r["kind"] for r in experiment.read_metrics(tmp_path / "r" / "metrics.tsv") if r["record"] == "step"]
    frac = kinds.count("temporal") / len(kinds)
    assert set(kinds) == {"temporal", "spatial"}
    assert abs(frac - 0.5) < 4 * np.sqrt(0.25 / len(kinds))


def test_data_cache_is_used(tmp_path):
    cfg = tiny(arm="none")
    cache = tmp_path / "data.bin"
    a = experiment.run(cfg, data_cache=cache)
    assert cache.exists()
    b = experiment.run(cfg, data_cache=cache)
    assert a.data_digest == b.data_digest and a.to_json().split('"wall_time"')[0] == b.to_json().split('"wall_time"')[0]


# -- ablation ----------------------------------------------------------------

def test_module_matrix_bookkeeping(tmp_path):
    matrix = experiment.MatrixSpec.named("modules", seeds=(0, 1, 2, 3, 4))
    res = experiment.ablate(tiny(epochs=1), matrix, tmp_path)
    assert sum(len(v) for v in res.records.values()) == 20
    lines = res.table().strip().splitlines()
    assert len(lines) == 5 and lines[0].startswith("cell")
    assert (tmp_path / "table.tsv").read_text() == res.table()
    assert res.cell("full").mean == pytest.approx(np.mean([r.final_val_acc for r in res.records["full"]]))


def test_failed_cells_are_recorded_and_the_sweep_continues(tmp_path, monkeypatch):
    real = experiment.train

    def flaky(config, data, **kw):
        if config.arm == "mixup":
            raise NonFiniteLoss("non-finite loss at step 0", None)
        return real(config, data, **kw)

    monkeypatch.setattr(experiment, "train", flaky)
    matrix = experiment.MatrixSpec({"ok": {"arm": "none"}, "diverges": {"arm": "mixup"}}, seeds=(0, 1))
    res = experiment.ablate(tiny(epochs=2), matrix, tmp_path)
    assert len(res.cell("ok").accuracies) == 2 and not res.cell("ok").failures
    bad = res.cell("diverges")
    assert len(bad.failures) == 2 and "NonFiniteLoss" in bad.failures[0]
    assert all(r.status == "failed" for r in res.records["diverges"])
    assert (tmp_path / "diverges" / "seed-0" / "record.json").exists()


def test_invalid_cell_fails_before_training():
    matrix = experiment.MatrixSpec({"good": {"arm": "none"}, "bad": {"switch_prob": 2.0}}, seeds=(0,))
    with pytest.raises(ConfigError) as err:
        experiment.ablate(tiny(), matrix)
    assert err.value.key == "switch_prob"


def test_alpha_matrix_covers_the_sweep_grid():
    cells = experiment.MATRICES["alpha"]
    assert [c["alpha_spatial"] for c in cells.values()] == [0.2, 0.5, 0.8, 1.0, 2.0, 3.0]


def test_matrix_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"cells": {"a": {"arm": "none"}}, "seeds": [3], "base": {"epochs": 1}}')
    m = experiment.MatrixSpec.load(path)
    configs = m.configs(tiny())
    assert configs["a"][0].seed == 3 and configs["a"][0].epochs == 1
    path.write_text('{"cells": {}, "extra": 1}')
    with pytest.raises(ConfigError):
        experiment.MatrixSpec.load(path)


# -- inspection ---------------------------------------------------------------

def test_temporal_dump_reports_zero_spread(tmp_path):
    w = np.repeat(np.repeat(np.array([[0.2, 0.4, 0.9]])[:, :, None, None], 4, 2), 4, 3)
    path = tmp_path / "t.mask"
    formats.save_mask_dump(path, w, [0.5], "temporal", 3)
    s = experiment.inspect(path)
    assert s.within_frame_spread == [0.0]
    assert s.frame_means[0] == pytest.approx([0.2, 0.4, 0.9], abs=1e-15)
    assert any("within-frame spread 0" in line for line in s.lines())


def test_dump_header_echoes_lambda(tmp_path):
    path = tmp_path / "s.mask"
    formats.save_mask_dump(path, np.full((1, 2, 2, 2), 0.35), [0.35], "spatial")
    s = experiment.inspect(path)
    assert s.lambdas == [0.35] and "lambda 0.35" in s.lines()[1]


def test_dump_values_match_the_in_memory_mask(tmp_path):
    cfg = tiny(dump_masks_every=1, epochs=1)
    state_masks = []
    from svmix import trainer

    orig = trainer.train_step

    def spy(state, batch):
        rep = orig(state, batch)
        state_masks.append(state.last_mask.weights.data.copy())
        return rep

    trainer.train_step = spy
    try:
        experiment.run(cfg, tmp_path / "r")
    finally:
        trainer.train_step = orig
    dump = formats.load_mask_dump(tmp_path / "r" / "masks" / "step-000000.mask")
    assert np.max(np.abs(dump.weights - state_masks[0])) <= 1e-12


def test_images_are_written(tmp_path):
    path = tmp_path / "s.mask"
    formats.save_mask_dump(path, np.random.default_rng(0).random((2, 3, 4, 5)), [0.3, 0.6], "spatial")
    experiment.inspect(path, tmp_path / "img")
    raw = (tmp_path / "img" / "s.pgm").read_bytes()
    assert raw.startswith(b"P5\n17 9\n255\n")
    assert len(raw) == len(b"P5\n17 9\n255\n") + 17 * 9


def test_corrupt_dump(tmp_path):
    path = tmp_path / "bad.mask"
    formats.save_mask_dump(path, np.zeros((1, 2, 2, 2)), [0.5], "spatial")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError) as err:
        experiment.inspect(path)
    assert err.value.offset is not None
