import numpy as np
import pytest

from mhc_hsi import numerics as nx
from mhc_hsi.dataio import SplitSpec, stratified_split, synth_cube
from mhc_hsi.exceptions import ConfigError, ContractError, DivergenceError, FormatError
from mhc_hsi.model import (
    MHCNetwork, ModelConfig, band_statistics, export_hres_maps, forward, gradient_check, hres_tensor,
    load_checkpoint, masked_cross_entropy, predict_logits, save_checkpoint, train,
)

SMALL = dict(hidden_dim=8, blocks=2, groups=2, state_size=2)


@pytest.fixture(scope="module")
def cube():
    return synth_cube(6, 6, 3, 12, seed=2)


def network(cube, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    return MHCNetwork(cfg, cube.wavelengths, cube.n_classes, *band_statistics(cube.reflectance))


def test_config_validation():
    with pytest.raises(ConfigError, match=r"rho must be in \(0,1\]"):
        ModelConfig(rho=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(n_streams=4)
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=16, groups=3)
    with pytest.raises(ConfigError):
        ModelConfig(stream_mode="bogus")
    assert ModelConfig(stream_mode="duplicate", n_streams=2).n_streams == 2


def test_logits_shape(cube):
    with nx.no_grad():
        assert forward(cube, network(cube)).shape == (36, 3)


def test_constant_cube_unselected_pixels_agree(cube):
    net = network(cube, rho=0.25)
    flat = np.broadcast_to(cube.reflectance[0, 0], cube.shape).copy()
    net._pos_cache[(6, 6)] = np.zeros((36, 8))
    logits = predict_logits(net, flat)
    # equal scores everywhere: clusters take pixels 0..k-1, the rest see identical inputs
    k = max(1, int(0.25 * 36))
    np.testing.assert_array_equal(logits[k:], np.broadcast_to(logits[k], logits[k:].shape))


def test_zero_head_gives_log_k(cube):
    net = network(cube)
    net.head_w.data[:] = 0.0
    loss = masked_cross_entropy(net(cube.reflectance), cube.labels, cube.labels > 0)
    assert abs(loss.item() - np.log(3)) < 1e-12


def test_masked_cross_entropy_cases(rng):
    labels = np.array([2, 0, 1])
    mask = np.array([True, False, False])
    big = nx.Tensor(np.array([[0.0, 800.0], [0.0, 0.0], [0.0, 0.0]]))
    assert masked_cross_entropy(big, labels, mask).item() < 1e-12
    assert abs(masked_cross_entropy(nx.Tensor(np.zeros((4, 16))), [1, 5, 9, 16], np.ones(4, bool)).item()
               - np.log(16)) < 1e-12
    z = rng.normal(size=(5, 4))
    y = np.array([1, 4, 0, 2, 3])
    m = y > 0
    ref = np.mean([np.log(np.exp(z[i]).sum()) - z[i, y[i] - 1] for i in np.flatnonzero(m)])
    assert abs(masked_cross_entropy(nx.Tensor(z), y, m).item() - ref) < 1e-12
    with pytest.raises(ContractError):
        masked_cross_entropy(nx.Tensor(z), y, np.zeros(5, bool))
    with pytest.raises(ContractError):
        masked_cross_entropy(nx.Tensor(z), y, np.ones(5, bool))


def test_reaches_full_train_accuracy_quickly():
    data = synth_cube(12, 12, 5, 20, seed=1)
    train_mask, _ = stratified_split(data.labels, SplitSpec(0.1, seed=0))

    class Reached(Exception):
        pass

    def stop(row):
        if row["train_oa"] >= 99.0:
            raise Reached(row["step"])

    with pytest.raises(Reached) as info:
        train(data, train_mask, ModelConfig(steps=500), callback=stop)
    assert info.value.args[0] < 500


def test_zero_learning_rate_is_a_no_op(cube):
    net = network(cube, lr=0.0, steps=3)
    before = {k: p.data.copy() for k, p in net.named_parameters().items()}
    train(cube, cube.labels > 0, net.config, network=net)
    for k, p in net.named_parameters().items():
        assert p.data.tobytes() == before[k].tobytes(), k


def test_same_seed_same_history(cube):
    cfg = ModelConfig(**SMALL, steps=4, seed=11)
    _, h1 = train(cube, cube.labels > 0, cfg)
    _, h2 = train(cube, cube.labels > 0, cfg)
    assert h1 == h2
    _, h3 = train(cube, cube.labels > 0, ModelConfig(**SMALL, steps=4, seed=12))
    assert h3[-1]["loss"] != h1[-1]["loss"]


def test_divergence_reports_step_and_gradient(cube):
    net = network(cube, steps=2)
    net.head_b.data[0] = np.nan
    with pytest.raises(DivergenceError, match="step 0") as info:
        train(cube, cube.labels > 0, net.config, network=net)
    assert info.value.step == 0


def test_gradient_check_small_model(cube):
    net = network(cube, stream_mode="duplicate", n_streams=2, blocks=1)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data = np.asarray(p.data + 0.1 * rng.normal(size=p.shape))
    report = gradient_check(net, cube.reflectance, cube.labels, cube.labels > 0, entries=2)
    assert report["max_rel_err"] < 1e-4
    assert set(report["per_param"]) == set(net.named_parameters())


# residual-map export ---------------------------------------------------------


def test_untrained_maps_are_constant_and_complete(cube):
    net = network(cube)
    maps = export_hres_maps(net, cube, 1, "ffn")
    assert len(maps) == 25
    assert "VIS_to_FULL" in maps and "FULL_to_VIS" in maps
    for m in maps.values():
        assert m.shape == (6, 6)
        assert m.max() - m.min() < 1e-6
        assert np.all((m > 0) & (m <= 1))


def test_map_naming_follows_source_to_destination(cube):
    net = network(cube, stream_mode="duplicate", n_streams=2)
    for p in net.parameters():
        p.data = np.asarray(p.data + 0.5 * np.random.default_rng(1).normal(size=p.shape))
    res = hres_tensor(net, cube.reflectance, 0, "cgm")
    maps = export_hres_maps(net, cube, 0, "cgm")
    # entry (i, j) mixes input stream j into output stream i
    np.testing.assert_array_equal(maps["DUP1_to_FULL"].reshape(-1), res[:, 0, 1])
    np.testing.assert_array_equal(maps["FULL_to_DUP1"].reshape(-1), res[:, 1, 0])


def test_bad_layer_or_sublayer(cube):
    net = network(cube)
    with pytest.raises(ConfigError):
        export_hres_maps(net, cube, 2)
    with pytest.raises(ConfigError):
        export_hres_maps(net, cube, 0, "attn")


# checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(cube, tmp_path):
    net, _ = train(cube, cube.labels > 0, ModelConfig(**SMALL, steps=2))
    path = tmp_path / "m.mhc"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.config == net.config and back.stream_names == net.stream_names
    for (k, a), (k2, b) in zip(net.named_parameters().items(), back.named_parameters().items()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(predict_logits(back, cube.reflectance), predict_logits(net, cube.reflectance))
    save_checkpoint(back, tmp_path / "again.mhc")
    assert (tmp_path / "again.mhc").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(cube, tmp_path):
    net = network(cube)
    path = tmp_path / "m.mhc"
    save_checkpoint(net, path)
    buf = path.read_bytes()
    (tmp_path / "t.mhc").write_bytes(buf[:-5])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(tmp_path / "t.mhc")
    (tmp_path / "x.mhc").write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "x.mhc")
    (tmp_path / "p.mhc").write_bytes(buf + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "p.mhc")


def test_cube_must_match_bands(cube):
    with pytest.raises(ConfigError):
        network(cube)(np.zeros((2, 2, 5)))
