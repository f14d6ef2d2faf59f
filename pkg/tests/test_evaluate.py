import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatstego import synthetic, train
from splatstego.errors import InvalidParameterError, ShapeMismatchError
from splatstego.evaluate import (
    PSNR_CAP,
    MetricsReport,
    auc_bruteforce,
    chi_square_score,
    detector_score,
    evaluate,
    prune_random,
    prune_sequential,
    psnr,
    quantize,
    roc_curve,
    sample_pairs_score,
    wrong_decoder_test,
    write_summary,
)
from splatstego.scene import GaussianCloud, logit
from splatstego.train import TrainConfig, init_model

from conftest import random_cloud


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros(3), np.zeros(4))


def with_opacities(values):
    n = len(values)
    c = random_cloud(0, n=n, M=2)
    c.opacity_logits = logit(np.asarray(values, dtype=float))
    return c


def test_sequential_prune_keeps_most_opaque():
    c = with_opacities([0.1, 0.9, 0.2, 0.8])
    out = prune_sequential(c, 0.5)
    np.testing.assert_allclose(out.opacities, [0.9, 0.8])
    np.testing.assert_array_equal(out.means, c.means[[1, 3]])


def test_sequential_prune_ties_by_index():
    c = with_opacities([0.5, 0.5, 0.5, 0.5])
    np.testing.assert_array_equal(prune_sequential(c, 0.5).means, c.means[[2, 3]])


def test_prune_ratio_zero_is_identity():
    c = random_cloud(1, n=37)
    for out in (prune_sequential(c, 0.0), prune_random(c, 0.0, seed=3), prune_sequential(c, 0.02)):
        for k in c.params():
            assert out.params()[k].tobytes() == c.params()[k].tobytes()


@pytest.mark.parametrize("ratio", [0.05, 0.1, 0.15, 0.25, 0.9])
def test_prune_counts(ratio):
    c = random_cloud(2, n=203)
    k = int(np.floor(ratio * 203))
    assert len(prune_sequential(c, ratio)) == 203 - k
    r = prune_random(c, ratio, seed=1)
    assert len(r) == 203 - k
    assert len(np.unique(r.means[:, 0])) == 203 - k


def test_prune_random_seeded():
    c = random_cloud(3, n=100)
    a, b = prune_random(c, 0.3, seed=5), prune_random(c, 0.3, seed=5)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.means.tobytes() != prune_random(c, 0.3, seed=6).means.tobytes()


@pytest.mark.parametrize("ratio", [-0.1, 1.0])
def test_prune_rejects_bad_ratio(ratio):
    with pytest.raises(InvalidParameterError):
        prune_sequential(random_cloud(0, n=4), ratio)


def test_roc_separable_and_identical():
    assert roc_curve([1.0] * 5, [0.0] * 7).auc == 1.0
    s = [0.3, 0.1, 0.3, 0.7]
    assert roc_curve(s, list(reversed(s))).auc == 0.5


def test_roc_worked_example():
    assert roc_curve([0.9, 0.4], [0.5, 0.1]).auc == 0.75


def test_roc_rejects_empty():
    with pytest.raises(InvalidParameterError):
        roc_curve([], [0.1])


score_lists = st.lists(st.integers(0, 12).map(lambda k: k / 12.0), min_size=1, max_size=50)


@given(score_lists, score_lists)
@settings(max_examples=300, deadline=None)
def test_roc_auc_exact_against_pair_counting(pos, neg):
    rep = roc_curve(pos, neg)
    assert rep.auc == auc_bruteforce(pos, neg)
    assert (rep.fpr[0], rep.tpr[0]) == (0.0, 0.0)
    assert (rep.fpr[-1], rep.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(rep.fpr) >= 0) and np.all(np.diff(rep.tpr) >= 0)
    assert 0.0 <= rep.auc <= 1.0


def test_roc_csv(tmp_path):
    rep = roc_curve([0.9, 0.4], [0.5, 0.1])
    rep.write_csv(tmp_path / "roc.csv")
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["threshold", "fpr", "tpr"] and len(rows) == 1 + len(rep.fpr)


def natural_image(seed=0, size=64):
    return synthetic.message_image(size, seed)


def test_randomised_lsb_plane_scores_high_on_chi_square():
    rng = np.random.default_rng(0)
    q = quantize(natural_image())
    stego = (q & ~1) | rng.integers(0, 2, q.shape)
    assert chi_square_score(stego) > 0.9


def test_sample_pairs_tracks_embedding_rate():
    rng = np.random.default_rng(1)
    q = quantize(natural_image(2))
    for rate in (0.0, 0.25, 0.5):
        flip = rng.uniform(size=q.shape) < rate / 2
        assert abs(sample_pairs_score(np.where(flip, q ^ 1, q)) - rate) < 0.1


def test_constant_image_is_well_defined():
    for v in (0.0, 0.5, 1.0):
        s = detector_score(np.full((16, 16, 3), v))
        assert np.isfinite(s) and 0.0 <= s <= 1.0


@given(st.integers(0, 10000))
@settings(max_examples=30, deadline=None)
def test_detector_is_pure_and_bounded(seed):
    img = np.random.default_rng(seed).uniform(size=(12, 12, 3))
    s = detector_score(img)
    assert 0.0 <= s <= 1.0
    assert s == detector_score(img.copy())


def test_metrics_report_means():
    rep = MetricsReport(views=[3, 4], psnr_s=[20.0, 30.0], ssim_s=[0.5, 0.7], message_views=[3, 4],
                        psnr_m=[10.0, 14.0], ssim_m=[0.1, 0.3], psnr_m_streams=[[9.0, 11.0], [13.0, 15.0]],
                        seconds=[0.1, 0.3])
    s = rep.summary()
    assert s["psnr_s"] == 25.0 and s["psnr_m"] == 12.0 and s["ssim_s"] == pytest.approx(0.6)
    assert s["psnr_m_streams"] == [11.0, 13.0]
    assert "seconds_per_view" not in s
    assert rep.timings()["seconds_per_view"] == pytest.approx(0.2)


@pytest.fixture(scope="module")
def tiny():
    ds = synthetic.make_dataset("scene", n_views=8, size=16, seed=0)
    model = init_model(ds, TrainConfig(decoder_width=8, decoder_depth=3))
    return model, ds


def test_ground_truth_predictions_hit_the_cap(tiny, monkeypatch):
    model, ds = tiny
    lookup = {id(c): i for i, c in enumerate(ds.cameras)}
    monkeypatch.setattr(train, "predict_view",
                        lambda m, cam, iteration=None: (ds.images[lookup[id(cam)]], [ds.hidden[lookup[id(cam)]][0]]))
    rep = evaluate(model, ds, views=range(8))
    assert rep.psnr_s == [PSNR_CAP] * 8 and rep.ssim_s == [1.0] * 8
    assert rep.mean_psnr_m == PSNR_CAP and rep.mean_ssim_m == 1.0


def test_evaluate_csv_and_summary(tiny, tmp_path):
    model, ds = tiny
    rep = evaluate(model, ds)
    assert rep.views == [7]
    rep.write_csv(tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 1
    assert float(rows[0]["psnr_s"]) == pytest.approx(rep.psnr_s[0], abs=1e-6)
    write_summary(tmp_path / "s.json", rep.summary())
    assert json.loads((tmp_path / "s.json").read_text())["n_views"] == 1


def test_wrong_decoder_same_weights_is_identical(tiny):
    model, ds = tiny
    trained, rand = wrong_decoder_test(model, ds, random_decoder=model.D_m.copy())
    assert trained == rand


def test_wrong_decoder_outputs_are_images(tiny):
    model, ds = tiny
    from splatstego.nn import make_stack
    from splatstego.rasterizer import rasterize_forward

    D = make_stack(16, 3, seed=123)
    F, _ = rasterize_forward(model.cloud, ds.cameras[0])
    out = D.forward(F)
    assert np.all((out >= 0) & (out <= 1))
    trained, rand = wrong_decoder_test(model, ds, seed=4)
    assert np.isfinite(trained) and np.isfinite(rand)
