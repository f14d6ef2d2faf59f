import numpy as np
import pytest

from splatstego import synthetic
from splatstego.camera import Camera
from splatstego.errors import InvalidParameterError, ShapeMismatchError, TrainingAbort
from splatstego.rasterizer import rasterize_rgb
from splatstego.nn import loss_rgb
from splatstego.scene import logit
from splatstego.train import (
    Adam,
    DensityStats,
    PairedDataset,
    TrainConfig,
    adaptive_density_control,
    fit,
    init_model,
    predict_view,
    rtws_finetune,
    train_step,
)

SMALL = dict(decoder_width=8, decoder_depth=3, log_interval=0, max_gaussians=600)


@pytest.fixture(scope="module")
def scene_data():
    return synthetic.make_dataset("scene", n_views=8, size=16, seed=0, n_hidden=2)


@pytest.fixture(scope="module")
def image_data():
    return synthetic.make_dataset("image", n_views=8, size=16, seed=0, designated_view=2)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.mark.parametrize("kw", [
    {"lam": -0.1}, {"beta": 1.5}, {"gamma": -0.01}, {"iterations": -1},
    {"mode": "nope"}, {"M": 0}, {"L": 2}, {"background": "grey"}, {"threads": 0},
])
def test_config_invariants(kw):
    with pytest.raises(InvalidParameterError):
        TrainConfig(**kw)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = TrainConfig(mode="hider-multi", L=3, lam=0.1)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidParameterError):
        TrainConfig.from_dict({"lambda": 0.5})


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.M, cfg.beta, cfg.gamma, cfg.lam) == (16, 0.2, 0.2, 0.5)


def test_dataset_validation(scene_data):
    cams, imgs = scene_data.cameras, scene_data.images
    with pytest.raises(ShapeMismatchError):
        PairedDataset(cams, imgs[:-1])
    with pytest.raises(ShapeMismatchError):
        PairedDataset(cams, imgs, hidden=scene_data.hidden[:-1])
    with pytest.raises(ShapeMismatchError):
        PairedDataset(cams, [np.zeros((8, 8, 3))] * len(cams))
    with pytest.raises(InvalidParameterError):
        PairedDataset(cams, imgs, hidden_image=imgs[0])
    with pytest.raises(InvalidParameterError):
        PairedDataset([], [])


def test_holdout_split():
    cams = synthetic.arc_cameras(16, 8)
    ds = PairedDataset(cams, [np.zeros((8, 8, 3))] * 16)
    train, test = ds.split(0.125)
    assert train == list(range(14)) and test == [14, 15]
    ds4 = PairedDataset(cams[:4], [np.zeros((8, 8, 3))] * 4)
    assert ds4.split(0.125) == ([0, 1, 2, 3], [0, 1, 2, 3])


def test_adam_matches_closed_form_first_step():
    opt = Adam()
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -0.1, 0.0])
    opt.step("p", p, g, 0.01)
    np.testing.assert_allclose(p, [0.99, -1.99, 3.0], atol=1e-12)
    opt.step("p", p, None, 0.01)
    np.testing.assert_allclose(p, [0.99, -1.99, 3.0], atol=1e-12)


def test_adam_remap_rows():
    opt = Adam()
    p = np.arange(6.0).reshape(3, 2)
    opt.step("p", p, np.ones((3, 2)), 0.1)
    opt.remap_rows(["p"], [2, -1, 0, 0])
    assert opt.m["p"].shape == (4, 2)
    assert not np.any(opt.m["p"][1])
    np.testing.assert_array_equal(opt.m["p"][0], opt.m["p"][2])


def one_gaussian_data(mode_channels=3):
    cam = Camera(8, 8, 10.0, 10.0, 3.5, 3.5, np.eye(4))
    target = np.zeros((8, 8, 3))
    target[2:6, 2:6] = [0.9, 0.3, 0.1]
    seed = np.array([[0.0, 0.0, 2.0, 0.5, 0.5, 0.5], [0.3, 0.2, 2.2, 0.5, 0.5, 0.5]])
    return PairedDataset([cam], [target], hidden=[[target[::-1].copy()]], seed_points=seed[:1])


@pytest.mark.parametrize("mode", ["hider", "baseline-3dgs", "baseline-sh", "baseline-decoder"])
def test_single_step_decreases_total_loss(mode):
    ds = one_gaussian_data()
    lrs = dict(lr_position=1e-5, lr_position_final=1e-5, lr_feature=1e-4, lr_opacity=1e-4,
               lr_scale=1e-4, lr_rotation=1e-4, lr_decoder=1e-5)
    model = init_model(ds, small_config(mode=mode, iterations=10, **lrs))
    model.cloud.log_scales[:] = np.log(0.3)
    model.cloud.opacity_logits[:] = logit(0.7)
    before = train_step(model, ds, 0).total
    after = train_step(model, ds, 0).total
    assert after < before


def test_lambda_zero_leaves_message_decoder_untouched(scene_data):
    model = init_model(scene_data, small_config(lam=0.0, iterations=5))
    w = [x.copy() for x in model.D_m.weights]
    for v in range(3):
        train_step(model, scene_data, v)
    assert all(np.array_equal(a, b) for a, b in zip(w, model.D_m.weights))


def test_image_mode_message_only_on_designated_view(image_data):
    cfg = small_config(mode="hider-image", lam=0.1, iterations=5)
    model = init_model(image_data, cfg)
    w = [x.copy() for x in model.D_m.weights]
    report = train_step(model, image_data, 0)
    assert report.mes == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(w, model.D_m.weights))
    report = train_step(model, image_data, image_data.designated_view)
    assert report.mes > 0
    assert not np.array_equal(w[0], model.D_m.weights[0])


def test_baseline_3dgs_has_no_decoders_and_rgb_loss(scene_data):
    model = init_model(scene_data, small_config(mode="baseline-3dgs"))
    assert model.D_s is None and model.D_m is None
    img, _ = rasterize_rgb(model.cloud, scene_data.cameras[1], active_sh_degree=0)
    expected = loss_rgb(img, scene_data.images[1], 0.2)[0]
    rep = train_step(model, scene_data, 1)
    assert rep.rgb == pytest.approx(expected, rel=1e-12)
    assert rep.total == rep.rgb


def test_multi_mode_streams(scene_data):
    model = init_model(scene_data, small_config(mode="hider-multi", L=2))
    assert model.D_m.out_channels == 6
    rep = train_step(model, scene_data, 0)
    assert set(rep.parts) >= {"mes_0", "mes_1"}
    I, Ms = predict_view(model, scene_data.cameras[0])
    assert I.shape == (16, 16, 3) and len(Ms) == 2


def test_non_finite_loss_aborts(scene_data):
    bad = PairedDataset(scene_data.cameras, [np.full((16, 16, 3), np.nan)] * 8,
                        hidden=scene_data.hidden, seed_points=scene_data.seed_points)
    model = init_model(bad, small_config())
    with pytest.raises(TrainingAbort) as info:
        train_step(model, bad, 3)
    assert info.value.view == 3 and info.value.term == "l_rgb"


def _stats(n, value):
    return DensityStats(np.full(n, value), np.ones(n), np.ones((n, 3)))


def test_density_control_noop_when_quiet(scene_data):
    model = init_model(scene_data, small_config())
    cloud = model.cloud
    new, _, counts = adaptive_density_control(cloud, _stats(len(cloud), 0.0), model.config)
    assert len(new) == len(cloud) and counts["cloned"] == counts["split"] == counts["pruned"] == 0
    for k in cloud.params():
        assert np.array_equal(new.params()[k], cloud.params()[k])


def test_density_control_prunes_transparent(scene_data):
    model = init_model(scene_data, small_config())
    cloud = model.cloud.copy()
    cloud.opacity_logits[5] = -50.0
    new, _, counts = adaptive_density_control(cloud, _stats(len(cloud), 0.0), model.config)
    assert counts["pruned"] == 1 and len(new) == len(cloud) - 1


def test_density_control_count_arithmetic(scene_data):
    rng = np.random.default_rng(0)
    base = init_model(scene_data, small_config(max_gaussians=10**6))
    for trial in range(10):
        cloud = base.cloud.copy()
        n = len(cloud)
        cloud.log_scales += rng.normal(0, 1.0, cloud.log_scales.shape)
        cloud.opacity_logits = rng.normal(-2, 2.5, n)
        stats = DensityStats(rng.exponential(2e-4, n), rng.integers(0, 3, n).astype(float),
                             rng.normal(size=(n, 3)))
        opt = Adam()
        opt.step("cloud.means", cloud.means.copy(), np.ones((n, 3)), 0.1)
        new, new_stats, c = adaptive_density_control(cloud, stats, base.config, trial, opt, trial)
        assert n - c["pruned"] + c["cloned"] + c["split"] == len(new)
        assert c["cloned"] + c["split"] > 0
        assert opt.m["cloud.means"].shape == new.means.shape
        assert len(new_stats.count) == len(new)
        new.check_finite()
        assert np.all(new.scales > 0) and np.all(np.isfinite(new.opacities))


def test_density_control_respects_cap(scene_data):
    model = init_model(scene_data, small_config(max_gaussians=600))
    cloud = model.cloud
    n = len(cloud)
    new, _, _ = adaptive_density_control(cloud, _stats(n, 1.0), model.config.replace(max_gaussians=n + 7))
    assert len(new) <= n + 7


def test_split_children_shrink(scene_data):
    cfg = small_config()
    cloud = init_model(scene_data, cfg).cloud.subset(np.arange(3))
    cloud.log_scales[:] = np.log(10.0)
    new, _, c = adaptive_density_control(cloud, _stats(3, 1.0), cfg)
    assert c["split"] == 3 and len(new) == 6
    np.testing.assert_allclose(new.scales, 10.0 / 1.6)


def test_fit_is_deterministic_and_logs(tmp_path, scene_data):
    cfg = small_config(mode="baseline-3dgs", iterations=12, log_interval=4)
    a = fit(scene_data, cfg, log_path=tmp_path / "h.csv")
    b = fit(scene_data, cfg)
    np.testing.assert_array_equal([r["l_rgb"] for r in a.history], [r["l_rgb"] for r in b.history])
    assert a.cloud.means.tobytes() == b.cloud.means.tobytes()
    assert [r["iteration"] for r in a.history] == [0, 4, 8, 12]
    header = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert header == "iteration,l_rgb,l_mes,psnr_s,psnr_m,n_gaussians"
    assert all(r["seconds"] >= 0 for r in a.history)


def test_fit_thread_count_does_not_change_result(scene_data):
    cfg = small_config(iterations=6)
    a = fit(scene_data, cfg).cloud
    b = fit(scene_data, cfg.replace(threads=4)).cloud
    for k in a.params():
        assert a.params()[k].tobytes() == b.params()[k].tobytes()


def test_fit_short_run_improves(scene_data):
    res = fit(scene_data, small_config(iterations=60, log_interval=0))
    first, last = res.history[0], res.history[-1]
    assert last["psnr_s"] > first["psnr_s"] and last["psnr_m"] > first["psnr_m"]


def test_rtws_zero_iterations_keeps_cloud(scene_data):
    model = init_model(scene_data, small_config())
    W = synthetic.watermark_image(16)
    res = rtws_finetune(model, scene_data, W, model.config.replace(rtws_iterations=0, rtws_pretrain_iterations=2))
    for k in model.cloud.params():
        assert res.cloud.params()[k].tobytes() == model.cloud.params()[k].tobytes()


def test_rtws_freezes_geometry(scene_data):
    model = fit(scene_data, small_config(iterations=5)).model
    before = model.cloud.copy()
    cfg = model.config.replace(rtws_iterations=6, rtws_pretrain_iterations=3)
    res = rtws_finetune(model, scene_data, synthetic.watermark_image(16), cfg)
    for k in ("means", "quats", "log_scales", "opacity_logits"):
        assert res.cloud.params()[k].tobytes() == before.params()[k].tobytes()
    assert not np.array_equal(res.cloud.features, before.features)
    # the caller's cloud is not modified in place
    assert model.cloud.features.tobytes() == before.features.tobytes()


def test_rtws_rejects_baseline_models(scene_data):
    model = init_model(scene_data, small_config(mode="baseline-3dgs"))
    with pytest.raises(InvalidParameterError):
        rtws_finetune(model, scene_data, synthetic.watermark_image(16))
