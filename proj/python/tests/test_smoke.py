import numpy as np
import pytest

import einmemo


def test_param_count_table():
    counts = [einmemo.param_count(p, 112, 224) for p in (5, 10, 15, 20, 25, 30)]
    assert counts == [9780, 18960, 27540, 35520, 42900, 49680]
    with pytest.raises(einmemo.UsageError):
        einmemo.param_count(60, 112, 224)


def test_geometry_and_metrics():
    idx = einmemo.masked_token_indices(14)
    assert len(idx) == 49 and min(idx) == 7 * 14 + 7
    rng = np.random.default_rng(0)
    a, b, q = (rng.random((3, 111, 111)) for _ in range(3))
    canvas = einmemo.compose_canvas(a, b, q)
    assert canvas.shape == (3, 224, 224)
    np.testing.assert_array_equal(canvas[:, 113:, :111], q)
    left = np.zeros((4, 4), np.uint8)
    left[:, :2] = 1
    assert einmemo.iou(left, np.ones((4, 4), np.uint8)) == pytest.approx(0.5)
    assert einmemo.binarize(np.full((3, 2, 2), 0.5)).sum() == 4


def test_dataset_and_errors(tmp_path):
    train, test = einmemo.synth_task(seed=3, categories=2, per_class=4, test_per_class=2)
    assert len(train) == 8 and len(test) == 4
    assert train.image(0).shape == (3, 111, 111)
    assert set(np.unique(train.mask(0))) <= {0, 1}
    einmemo.write_dataset(train, test, tmp_path / "ds")
    back = einmemo.load_pairs(tmp_path / "ds", tmp_path / "ds" / "manifest.tsv", "test")
    assert len(back) == 4
    with pytest.raises(einmemo.DataError):
        einmemo.load_pairs(tmp_path / "missing", tmp_path / "missing" / "manifest.tsv")


def test_tiny_pipeline(tmp_path):
    train, test = einmemo.synth_task(seed=0, categories=2, per_class=5, test_per_class=4)
    cfg = einmemo.default_toy_config()
    cfg.update(tokenizer_epochs=2, tokenizer_patches_per_epoch=4000, predictor_epochs=1, max_reconstruction_mae=1.0)
    model = einmemo.train_toy_frozen(train, cfg)
    digest = model.digest
    prompt, history = einmemo.train_prompt(train, model, {"epochs": 2, "batch_size": 4})
    assert model.digest == digest
    assert prompt.param_count == 27540 and len(history) == 2
    zeros = einmemo.init_prompt("IL", 15)
    base = einmemo.eval_icl(test, train, model)
    zero = einmemo.eval_icl(test, train, model, zeros)
    assert base["mean"] == zero["mean"]
    assert len(base["queries"]) == len(test)
    prompt.save(tmp_path / "p.bin")
    assert einmemo.BorderPrompt.load(tmp_path / "p.bin").checksum == prompt.checksum
    model.save(tmp_path / "model")
    assert einmemo.ToyModel.load(tmp_path / "model").digest == digest
