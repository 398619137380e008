import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from dsrdiff.config import preset
from dsrdiff.data import DatasetSplit, synthetic_split
from dsrdiff.evaluation import (EvaluationError, MetricsRecord, error_map_levels, evaluate,
                                evaluate_bicubic, profile, render_error_map, render_split, rmse,
                                run_ablation, variant_config, write_metrics_csv)
from dsrdiff.model import DSRDiff


def rmse_loop(gt, sr, protocol):
    gt, sr = np.asarray(gt, np.float64), np.asarray(sr, np.float64)
    lo, hi = gt.min(), gt.max()
    total = 0.0
    for a, b in zip(gt.flat, sr.flat):
        if protocol == "cm":
            d = (a - b) * 100.0
        else:
            d = (a - lo) / (hi - lo) * 255.0 - (b - lo) / (hi - lo) * 255.0
        total += d * d
    return math.sqrt(total / gt.size)


def test_rmse_worked_examples():
    gt = np.full((4, 4), 2.0)
    assert rmse(gt, gt + 0.01, "cm") == pytest.approx(1.0, abs=1e-12)
    gt = np.array([[0.0, 1.0], [2.0, 3.0]])
    # GT range 3 -> one unit of error is 85 grey levels
    assert rmse(gt, gt + 1.0, "range255") == pytest.approx(85.0, abs=1e-12)
    assert rmse(gt, gt, "cm") == 0 and rmse(gt, gt, "range255") == 0
    with pytest.raises(ValueError):
        rmse(gt, gt[:1], "cm")
    with pytest.raises(ValueError):
        rmse(gt, gt, "psnr")


def test_rmse_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = rng.integers(2, 12, size=2)
        gt = rng.random((h, w)) * 5 + 0.5
        sr = gt + rng.normal(0, 0.1, (h, w))
        for protocol in ("cm", "range255"):
            assert abs(rmse(gt, sr, protocol) - rmse_loop(gt, sr, protocol)) < 1e-9


def test_rmse_crop():
    gt = np.zeros((6, 6))
    sr = gt.copy()
    sr[0, :] = 1.0
    assert rmse(gt, sr, "normalized", crop=1) == 0
    assert rmse(gt, sr, "normalized") > 0


finite = arrays(np.float64, (5, 4), elements=st.floats(0.1, 10, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(finite, finite)
def test_rmse_symmetry_and_positivity(a, b):
    assert rmse(a, b, "cm") == pytest.approx(rmse(b, a, "cm"), rel=1e-12)
    assert rmse(a, b, "cm") >= 0
    assert (rmse(a, b, "cm") == 0) == np.array_equal(a, b)


def test_range255_is_asymmetric():
    gt = np.array([[0.0, 1.0], [2.0, 3.0]])
    sr = np.array([[0.0, 2.0], [4.0, 6.0]])
    assert rmse(gt, sr, "range255") != pytest.approx(rmse(sr, gt, "range255"))


def test_metrics_record_invariants():
    MetricsRecord("nyu_test", 4, [1.0, 3.0], 2.0, "cm")
    with pytest.raises(ValueError):
        MetricsRecord("middlebury", 4, [1.0], 1.0, "cm")
    with pytest.raises(ValueError):
        MetricsRecord("nyu_test", 4, [1.0], 1.0, "range255")
    with pytest.raises(ValueError):
        MetricsRecord("middlebury", 4, [1.0, 3.0], 2.5, "range255")
    assert set(MetricsRecord("lu", 8, [2.0], 2.0, "range255").row()) == {
        "dataset", "scale", "variant", "protocol", "avg_rmse", "n_images",
        "param_count", "ms_per_image", "seed"}


def test_error_map_levels():
    assert np.count_nonzero(error_map_levels(np.zeros((8, 8)))) == 0
    single = np.zeros((8, 8))
    single[3, 4] = 0.5
    lv = error_map_levels(single)
    # p99 of a single spike is below the spike, so it saturates; everything else stays black
    assert lv[3, 4] == 255 and np.count_nonzero(lv) == 1
    ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
    ref = np.percentile(ramp, 99)
    expected = np.clip(np.rint(ramp / ref * 255.0), 0, 255).astype(np.uint8)
    assert np.array_equal(error_map_levels(ramp), expected)
    assert error_map_levels(-ramp).tolist() == expected.tolist()


def test_render_error_map(tmp_path):
    gt = np.linspace(0, 1, 16).reshape(4, 4)
    err, sr = render_error_map(gt, gt, tmp_path / "x" / "a_err.png")
    assert sr.name == "a_sr.png"
    img = np.array(Image.open(err))
    assert img.dtype == np.uint8 and img.shape == (4, 4) and img.max() == 0
    sr_img = np.array(Image.open(sr))
    assert sr_img[0, 0] == 0 and sr_img[-1, -1] == 255
    big, _ = render_error_map(gt, gt + 0.1, tmp_path / "b_err.png", zoom=3)
    assert np.array(Image.open(big)).shape == (12, 12)
    with pytest.raises(ValueError):
        render_error_map(gt, gt[:2], tmp_path / "c_err.png")


@pytest.fixture(scope="module")
def small_model():
    model_cfg, _ = preset("toy")
    torch.manual_seed(0)
    return DSRDiff(model_cfg)


def test_evaluate_contract(small_model, toy_data):
    rec = evaluate(small_model, toy_data, protocol="normalized", source="grn", seed=3)
    assert rec.unit == "normalized" and len(rec.per_image_rmse) == 4
    assert rec.diffusion_calls == 4  # one reverse chain per image
    again = evaluate(small_model, toy_data, protocol="normalized", source="grn", seed=3)
    assert rec.per_image_rmse == again.per_image_rmse
    oracle = evaluate(small_model, toy_data, protocol="normalized", source="ggn")
    assert oracle.diffusion_calls == 0
    # aggregation ignores evaluation order
    rev = DatasetSplit(list(toy_data)[::-1], toy_data.name, toy_data.seed)
    assert evaluate(small_model, rev, protocol="normalized", source="ggn").avg_rmse == pytest.approx(oracle.avg_rmse, abs=1e-12)
    with pytest.raises(EvaluationError, match="empty split"):
        evaluate(small_model, DatasetSplit([], "synthetic", 0))
    with pytest.raises(EvaluationError):
        evaluate(small_model, synthetic_split(1, 32, 2, seed=0))


def test_evaluate_param_count_by_source(small_model, toy_data, toy_configs):
    grn = evaluate(small_model, toy_data, protocol="normalized", source="grn")
    ggn = evaluate(small_model, toy_data, protocol="normalized", source="ggn")
    assert grn.param_count == sum(p.numel() for m in (small_model.dsrn, small_model.grn) for p in m.parameters())
    assert ggn.param_count == sum(p.numel() for m in (small_model.dsrn, small_model.ggn) for p in m.parameters())
    with pytest.raises(ValueError, match="without guidance"):
        evaluate(small_model, toy_data, protocol="normalized", source="none")
    torch.manual_seed(0)
    blind = DSRDiff(variant_config("M-1", toy_configs[0]))
    rec = evaluate(blind, toy_data, protocol="normalized", source="grn")
    assert rec.diffusion_calls == 0 and rec.param_count < grn.param_count


def test_bicubic_baseline(toy_data):
    rec = evaluate_bicubic(toy_data)
    assert rec.unit == "range255" and rec.variant == "bicubic"
    assert rec.avg_rmse > 0
    with pytest.raises(EvaluationError):
        evaluate_bicubic(DatasetSplit([], "nyu_test", 0))


def test_render_split(tmp_path, small_model, toy_data):
    written = render_split(small_model, toy_data, tmp_path, source="ggn")
    assert len(written) == 4
    for err, sr in written:
        assert err.parent == tmp_path / "synthetic" and err.exists() and sr.exists()


def test_profile(small_model):
    n, ms = profile(small_model, (32, 32), runs=20, warmup=1)
    assert n == sum(p.numel() for m in (small_model.dsrn, small_model.grn) for p in m.parameters())
    assert ms > 0
    with pytest.raises(ValueError):
        profile(small_model, (30, 32))


def test_profile_median_is_stable(small_model):
    _, a = profile(small_model, (64, 64), runs=20, warmup=2)
    _, b = profile(small_model, (64, 64), runs=20, warmup=2)
    assert abs(a - b) / min(a, b) < 0.2


def test_profile_time_grows_with_size(small_model):
    _, small = profile(small_model, (16, 16), runs=20, warmup=1)
    _, large = profile(small_model, (128, 128), runs=20, warmup=1)
    assert large > small


def test_variant_config(toy_configs):
    base, _ = toy_configs
    assert not variant_config("M-1", base).use_guidance
    assert variant_config("M-2", base).compress == "global"
    assert variant_config("M-4", base).fusion == "concat"
    assert variant_config("M-5", base) == base == variant_config("M-3", base)
    with pytest.raises(ValueError):
        variant_config("M-9", base)


def test_metrics_csv(tmp_path):
    path = write_metrics_csv(tmp_path / "m.csv", [MetricsRecord("lu", 8, [2.0], 2.0, "range255")])
    rows = list(csv.DictReader(open(path)))
    assert rows[0]["avg_rmse"] == "2.0" and rows[0]["n_images"] == "1"


def test_run_ablation_plumbing(tmp_path, toy_data):
    model_cfg, cfg = preset("toy", epochs=3, loss_switch_epoch=2)
    records = run_ablation(["M-3", "M-5"], toy_data, cfg, model_cfg, protocol="normalized",
                           csv_path=tmp_path / "a.csv")
    assert [r.variant for r in records] == ["M-3", "M-5"]
    m3, m5 = records
    assert m3.diffusion_calls == 0 and m5.diffusion_calls > 0
    assert len(list(csv.DictReader(open(tmp_path / "a.csv")))) == 2
    with pytest.raises(ValueError):
        run_ablation(["M-7"], toy_data, cfg, model_cfg)
