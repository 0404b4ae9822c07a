import numpy as np
import pytest

from sfuda3d.exceptions import ChecksumError, DimensionError, FormatError, ParameterError
from sfuda3d.model import (
    Architecture,
    build_model,
    classify,
    file_hash,
    forward,
    latent,
    latent_points,
    load_checkpoint,
    predict_labels,
    predict_proba_patches,
    save_checkpoint,
    sliding_window_proba,
    sliding_window_predict,
)
from sfuda3d.numerics import Tensor, backward, cross_entropy, float64_mode


def small_model(seed=0):
    return build_model(num_classes=3, seed=seed, widths=(2, 3, 4), dilations=(1, 2))


def test_parameter_count_and_layer_order():
    arch = Architecture()
    assert arch.parameter_count() == 140459
    names = [name for name, *_ in arch.layers()]
    assert names[0] == "enc.l1a" and names[-1] == "cls.logits"
    assert build_model().flat_parameters().size == 140459


def test_build_is_deterministic():
    assert build_model(seed=3).parameter_hash() == build_model(seed=3).parameter_hash()
    assert build_model(seed=3).parameter_hash() != build_model(seed=4).parameter_hash()


def test_shapes():
    m = build_model()
    x = np.random.default_rng(0).normal(size=(32, 32, 32)).astype(np.float32)
    z = latent(m, x)
    assert z.shape == (1, 5, 32, 32, 32)
    p = classify(m, z)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, rtol=1e-5)
    assert latent_points(m, x).shape == (32 ** 3, 5)


def test_input_validation():
    m = small_model()
    with pytest.raises(DimensionError):
        forward(m, np.zeros((2, 1, 10, 8, 8), np.float32))
    with pytest.raises(ParameterError):
        build_model(num_classes=1)


def test_predict_labels_ties_to_lowest():
    prob = np.full((1, 3, 2, 2, 2), 1 / 3)
    assert not predict_labels(prob).any()


def test_full_model_gradient_float64():
    rng = np.random.default_rng(0)
    with float64_mode():
        m = small_model().astype(np.float64)
        x = rng.normal(size=(1, 1, 8, 8, 8))
        y = rng.integers(0, 3, (1, 8, 8, 8))

        def loss_value():
            return cross_entropy(forward(m, Tensor(x)), y).item()

        backward(cross_entropy(forward(m, Tensor(x)), y))
        for name in ("enc.l1a.w", "aspp.dil2.w", "aspp.pool.b", "dec.up1.w", "cls.logits.w"):
            t = m.params[name]
            entries = [tuple(rng.integers(0, s) for s in t.shape) for _ in range(3)]
            num = []
            for e in entries:
                old = t.data[e]
                t.data[e] = old + 1e-5
                up = loss_value()
                t.data[e] = old - 1e-5
                dn = loss_value()
                t.data[e] = old
                num.append((up - dn) / 2e-5)
            ana = np.array([t.grad[e] for e in entries])
            assert np.abs(ana - num).max() <= 1e-6 * max(np.abs(num).max(), 1e-3), name


def test_sliding_window_single_window_equals_patch_prediction():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(32, 32, 32)).astype(np.float32)
    np.testing.assert_allclose(sliding_window_proba(m, x, 32, 8), predict_proba_patches(m, x)[0], rtol=1e-6)


def test_sliding_window_averages_overlaps():
    m = small_model()
    x = np.random.default_rng(2).normal(size=(40, 32, 32)).astype(np.float32)
    prob = sliding_window_proba(m, x, 32, 8)
    p0 = predict_proba_patches(m, x[0:32])[0]
    p1 = predict_proba_patches(m, x[8:40])[0]
    np.testing.assert_allclose(prob[:, :8], p0[:, :8], rtol=1e-6)
    np.testing.assert_allclose(prob[:, 8:32], (p0[:, 8:] + p1[:, :24]) / 2, rtol=1e-5)
    assert sliding_window_predict(m, x, 32, 8).shape == x.shape


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build_model(seed=5)
    m.metadata["note"] = "x"
    save_checkpoint(m, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.parameter_hash() == m.parameter_hash()
    assert back.metadata == {"note": "x"}
    assert back.arch == m.arch
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert file_hash(tmp_path / "a.ckpt") == file_hash(tmp_path / "b.ckpt")


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(small_model(), tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[-20] ^= 0x10
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:30]))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_copy_is_independent():
    m = small_model()
    c = m.copy()
    c.params["cls.logits.b"].data += 1
    assert m.parameter_hash() != c.parameter_hash()


def test_set_trainable_prefixes():
    m = small_model()
    m.set_trainable(("enc.",))
    assert all(t.requires_grad == n.startswith("enc.") for n, t in m.params.items())
    ids = {id(t) for t in m.encoder_decoder_parameters()}
    assert ids == {id(t) for n, t in m.params.items() if not n.startswith("cls.")}
