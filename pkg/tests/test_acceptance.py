"""Acceptance criteria 1-11, one test each.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL/SKIP line per
criterion is printed in the terminal summary. Criterion 9 trains the default
network for about two hours and only runs with BANDROUTE_RUN_SLOW=1. Set
BANDROUTE_DESK_CHECKPOINT to a checkpoint produced by

    bandroute synth --out eog.eds --kind eog --snr-grid -7..2 --seed 0
    bandroute train --data eog.eds --out model.brn --dtype float32 --seed 0

to score that checkpoint instead of training again.
"""
import math
import os
import time

import numpy as np
import pytest

from _toy import overfit_run
from bandroute import cli
from bandroute.checkpoint import load_checkpoint, load_model, save_checkpoint
from bandroute.data import (
    SurrogateConfig,
    augment_snr_grid,
    pairs_to_arrays,
    read_dataset,
    snr_rms_db,
    split,
    standardize,
    synth_surrogate,
    write_dataset,
)
from bandroute.layers import (
    GRU,
    DepthwisePointwise,
    Inception1D,
    MultiHeadSelfAttention,
    film_modulate,
    mhsa_over_bands,
)
from bandroute.metrics import cc, rms, rrmse_s, rrmse_t, snr_imp
from bandroute.model import Ablation, BandRouteNet, ModelConfig, count_params, expected_param_count
from bandroute.spectral import BandSpec, band_decompose, fft, naive_dft
from bandroute.tensor import PRIMITIVES, Tensor, apply_primitive, grad_check
from bandroute.train import OptimState, TrainConfig, adamw_step, evaluate, fit, mse_loss
from test_tensor import _cases


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def project(y, seed):
    return (y * Tensor(np.random.default_rng(seed).standard_normal(y.shape))).sum()


@pytest.mark.criterion(1, "gradient correctness")
def test_criterion_01_gradients(request):
    worst_prim = 0.0
    for seed in range(5):
        cases = _cases(np.random.default_rng(seed))
        for op in PRIMITIVES:
            arrays, attrs = cases[op]
            xs = [Tensor(a, requires_grad=True) for a in arrays]
            rep = grad_check(lambda *xs: project(apply_primitive(op, list(xs), attrs), seed), xs, eps=1e-5)
            assert rep.passed(1e-4), (op, seed, rep.max_rel_err)
            worst_prim = max(worst_prim, rep.max_rel_err)

        rng = np.random.default_rng(seed)
        modules = [
            (Inception1D(4, 8, rng), (2, 4, 8)),
            (GRU(3, 4, rng), (1, 3, 5)),
            (DepthwisePointwise(3, rng), (2, 3, 7)),
        ]
        for mod, shape in modules:
            x = Tensor(rng.standard_normal(shape), requires_grad=True)
            rep = grad_check(lambda *_: project(mod(x), seed), [x] + mod.parameters(), eps=1e-5)
            assert rep.passed(1e-4), (type(mod).__name__, rep.max_rel_err)
            worst_prim = max(worst_prim, rep.max_rel_err)
        attn = MultiHeadSelfAttention(8, 2, rng)
        z = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        # the key bias cannot change a softmax over keys; its gradient is exactly zero
        params = [p for p in attn.parameters() if p is not attn.k.bias]
        rep = grad_check(lambda *_: project(mhsa_over_bands(z, attn), seed), [z] + params, eps=1e-5)
        assert rep.passed(1e-4), rep.max_rel_err
        u, tau, psi = (Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True) for _ in range(3))
        rep = grad_check(lambda *_: project(film_modulate(u, tau, psi), seed), [u, tau, psi], eps=1e-5)
        assert rep.passed(1e-4)

    worst_model = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        net = BandRouteNet(ModelConfig.toy(channels=8, T=32, seed=seed))
        assert net.config.K == 3
        x = rng.standard_normal((2, 1, 32))
        y = rng.standard_normal((2, 1, 32))
        rep = grad_check(lambda *_: mse_loss(net(x)[0], y), net.parameters(), eps=1e-5, n_samples=20, seed=seed)
        assert rep.passed(1e-3), (seed, rep.max_rel_err)
        worst_model = max(worst_model, rep.max_rel_err)
    detail(request, f"layers max rel err {worst_prim:.1e}, toy model {worst_model:.1e}")


@pytest.mark.criterion(2, "perfect reconstruction and FFT oracle")
def test_criterion_02_reconstruction(request):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1000, 512)) * rng.lognormal(0, 2, (1000, 1))
    bands = band_decompose(x, BandSpec(sample_rate_hz=256.0, segment_length=512))
    rel = np.abs(bands.sum(axis=1) - x).max(axis=1) / np.abs(x).max(axis=1)
    assert rel.max() <= 1e-9
    worst_fft = 0.0
    for T in (2, 16, 128, 512):
        s = rng.standard_normal((10, T))
        ref = naive_dft(s)
        err = np.abs(fft(s) - ref).max() / np.abs(ref).max()
        assert err <= 1e-9
        worst_fft = max(worst_fft, err)
    detail(request, f"reconstruction {rel.max():.1e}, fft {worst_fft:.1e}")


@pytest.mark.criterion(3, "routing and ablation identities")
def test_criterion_03_routing_identities():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 1, 32))
    net = BandRouteNet(ModelConfig.toy())
    fb = net.fullband_condition(x)
    xk = rng.standard_normal((2, 1, 32))
    for k in range(3):
        g0 = net.band_adapter(xk, k, fb.tau, fb.psi, force_gate=0.0)
        g1 = net.band_adapter(xk, k, fb.tau, fb.psi, force_gate=1.0)
        assert np.array_equal(g0.z.data, g0.e.data)
        assert np.array_equal(g1.z.data, g1.f.data)

    u = Tensor(rng.standard_normal((2, 8, 32)))
    zero = Tensor(np.zeros((2, 8, 32)))
    assert np.array_equal(film_modulate(u, zero, zero).data, u.data)

    def ablated(name):
        return BandRouteNet(ModelConfig.toy(ablation=Ablation.from_names([name])))

    y, diag, lat, _, _ = ablated("no_fullband")(x, return_latents=True)
    assert np.array_equal(y.data, diag.y_band)
    assert np.array_equal(lat.e.data, lat.u_tilde.data)
    _, _, lat, _, _ = ablated("route_all_one")(x, return_latents=True)
    assert np.array_equal(lat.z.data, lat.f.data)
    _, _, _, Z, Zp = ablated("no_cross_band")(x, return_latents=True)
    assert np.array_equal(Zp.data, Z.data)
    _, _, lat, _, _ = ablated("no_band_embedding")(x, return_latents=True)
    assert np.array_equal(lat.u_tilde.data, lat.u.data)


@pytest.mark.criterion(4, "final fusion identity")
def test_criterion_04_final_fusion(request):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        net = BandRouteNet(ModelConfig.toy(seed=seed))
        y, diag = net(rng.standard_normal((3, 1, 32)) * 3)
        resid = y.data - diag.band_outputs.sum(axis=1, keepdims=True) - diag.lambda_gate * diag.d_f
        worst = max(worst, np.abs(resid).max())
    assert worst <= 1e-10
    detail(request, f"max deviation {worst:.1e}")


@pytest.mark.criterion(5, "data protocol fidelity")
def test_criterion_05_data_protocol(request):
    clean, eog, emg = synth_surrogate(SurrogateConfig(n_clean=40, n_eog=40, n_emg=60))
    worst = 0.0
    for kind in ("eog", "emg"):
        for p in augment_snr_grid(clean, eog, emg, grid=range(-7, 3), kind=kind):
            worst = max(worst, abs(snr_rms_db(p.clean, p.noisy - p.clean) - p.snr_db))
            s = standardize(p)
            assert abs(np.std(s.noisy) - 1.0) <= 1e-9
    assert worst <= 1e-9
    for n, sizes in ((100, (80, 10, 10)), (101, (81, 10, 10)), (2000, (1600, 200, 200)), (5598, (4478, 560, 560))):
        sp = split(n, (8, 1, 1), seed=0)
        assert sp.sizes() == sizes
        assert np.array_equal(np.sort(np.concatenate([sp.train, sp.val, sp.test])), np.arange(n))
    detail(request, f"max SNR error {worst:.1e} dB")


@pytest.mark.criterion(6, "metric oracles")
def test_criterion_06_metrics():
    rng = np.random.default_rng(6)
    y = rng.standard_normal(512)
    assert abs(rms([3.0, 4.0]) - math.sqrt(12.5)) <= 1e-12
    assert rms(np.full(7, -1.5)) == 1.5 and rms(np.zeros(3)) == 0.0
    assert rrmse_t(y, y) == 0.0
    assert rrmse_t(np.zeros_like(y), y) == 1.0
    assert abs(rrmse_t(2 * y, y) - 1.0) <= 1e-15
    assert rrmse_s(y, y) == 0.0 and rrmse_s(-y, y) == 0.0
    assert rrmse_s(np.zeros_like(y), y) == 1.0
    assert abs(cc(y, y) - 1.0) <= 1e-15 and abs(cc(-y, y) + 1.0) <= 1e-15
    assert abs(cc(2 * y + 5, y) - 1.0) <= 1e-12
    r = rng.standard_normal(512)
    assert snr_imp(y, y + r, y + r) == 0.0
    assert abs(snr_imp(y, y + r, y + r / math.sqrt(2)) - 10 * math.log10(2)) <= 1e-9
    assert abs(snr_imp(y, y + r, y + r * math.sqrt(2)) + 10 * math.log10(2)) <= 1e-9


@pytest.mark.criterion(7, "optimizer trace")
def test_criterion_07_adamw(request):
    p = {"theta": np.array([1.0])}
    adamw_step(p, {"theta": np.array([1.0])}, OptimState(), TrainConfig(lr=1e-3, weight_decay=1e-4))
    hand = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 1e-4 * 1.0
    assert abs(p["theta"][0] - hand) <= 1e-12

    grads = [1.0, -0.5, 2.0, 0.25]
    ours, st = [], OptimState()
    q = {"theta": np.array([0.7])}
    for g in grads:
        adamw_step(q, {"theta": np.array([g])}, st, TrainConfig(lr=1e-2, weight_decay=0.0))
        ours.append(float(q["theta"][0]))
    theta, m, v, adam = 0.7, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + (1 - 0.9) * g
        v = 0.999 * v + (1 - 0.999) * (g * g)
        theta = theta - 1e-2 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam.append(theta)
    assert ours == adam
    detail(request, f"theta' = {p['theta'][0]:.10f}")


@pytest.mark.criterion(8, "overfit sanity")
def test_criterion_08_overfit(request):
    res, mse, seconds = overfit_run()
    detail(request, f"train MSE {mse:.2e} after {len(res.history)} epochs in {seconds:.0f} s")
    assert len(res.history) <= 200
    assert mse < 1e-3
    assert seconds < 60


@pytest.mark.slow
@pytest.mark.criterion(9, "desk-scale denoising efficacy")
def test_criterion_09_desk_scale(request, tmp_path):
    # identical to `bandroute synth --kind eog --snr-grid -7..2 --seed 0`
    clean, eog, _ = synth_surrogate(SurrogateConfig(seed=0))
    write_dataset(augment_snr_grid(clean, eog, grid=range(-7, 3), kind="eog", seed=0), tmp_path / "eog.eds")
    pairs = [standardize(p) for p in read_dataset(tmp_path / "eog.eds")]
    assert len(pairs) == 2000
    sp = split(len(pairs), (8, 1, 1), seed=0)
    subset = lambda idx: pairs_to_arrays([pairs[i] for i in idx])
    test_set = subset(sp.test)

    cfg = ModelConfig(dtype="float32", seed=0)
    untrained = evaluate(BandRouteNet(cfg), test_set).overall

    ckpt = os.environ.get("BANDROUTE_DESK_CHECKPOINT")
    if ckpt:
        model = load_model(ckpt)
        assert model.config == cfg
        minutes = None
    else:
        model = BandRouteNet(cfg)
        t0 = time.perf_counter()
        fit(model, subset(sp.train), subset(sp.val), TrainConfig(epochs=15, seed=0))
        minutes = (time.perf_counter() - t0) / 60
    trained = evaluate(model, test_set).overall
    detail(
        request,
        f"test SNR_imp {trained['snr_imp']:.2f} dB, CC {trained['cc']:.3f} vs untrained {untrained['cc']:.3f}"
        + (f", {minutes:.0f} min" if minutes is not None else ", reused checkpoint"),
    )
    assert trained["snr_imp"] >= 3.0
    assert trained["cc"] > untrained["cc"]
    if minutes is not None:
        assert minutes <= 120


@pytest.mark.criterion(10, "parameter budget")
def test_criterion_10_parameter_budget(request):
    cfg = ModelConfig()
    n = count_params(BandRouteNet(cfg))
    detail(request, f"{n} parameters")
    assert n == expected_param_count(cfg)
    assert 150_000 <= n <= 300_000


@pytest.mark.criterion(11, "serialization")
def test_criterion_11_serialization(tmp_path):
    cfg = ModelConfig.toy(dtype="float32")
    net = BandRouteNet(cfg)
    save_checkpoint(net, cfg, tmp_path / "m.brn")
    params, cfg2, _ = load_checkpoint(tmp_path / "m.brn")
    assert cfg2 == cfg
    assert all(params[n].tobytes() == a.tobytes() for n, a in net.state_dict().items())
    save_checkpoint(params, cfg2, tmp_path / "m2.brn")
    assert (tmp_path / "m.brn").read_bytes() == (tmp_path / "m2.brn").read_bytes()

    clean, eog, _ = synth_surrogate(SurrogateConfig(n_clean=3, n_eog=3, n_emg=1, segment_length=32))
    write_dataset(augment_snr_grid(clean, eog, grid=[-1, 0]), tmp_path / "d.eds")
    write_dataset(read_dataset(tmp_path / "d.eds"), tmp_path / "d2.eds")
    assert (tmp_path / "d.eds").read_bytes() == (tmp_path / "d2.eds").read_bytes()

    for name, magic in (("m.brn", b"BRNX"), ("d.eds", b"EDSX")):
        blob = bytearray((tmp_path / name).read_bytes())
        blob[:4] = magic
        (tmp_path / f"bad_{name}").write_bytes(bytes(blob))
    out = tmp_path / "r.csv"
    assert cli.main(["eval", "--ckpt", str(tmp_path / "bad_m.brn"), "--data", str(tmp_path / "d.eds"),
                     "--out", str(out)]) == 3
    assert cli.main(["denoise", "--ckpt", str(tmp_path / "m.brn"), "--in", str(tmp_path / "bad_d.eds"),
                     "--out", str(out)]) == 3
    assert not out.exists()
