import struct

import numpy as np
import pytest

from gradcheck import relative_error
from lesionseg import losses
from lesionseg import tensor as T
from lesionseg.errors import DimensionError, FormatError
from lesionseg.segnet import ModelConfig, init_model, load_model, save_model
from lesionseg.tensor import DiffTensor

# Hand count for base 8, depth 3, cascade, 1 input channel (weights + biases):
#   enc0.conv1 1->8: 72+8 = 80     enc0.conv2 8->8: 576+8 = 584
#   enc1, enc2: two 8->8 convs each = 4 * 584
#   bottleneck 8->8: 584
#   three fuse convs 16->8: 3 * (1152+8) = 3480
#   head 8->1 (1x1): 8+1 = 9
#   stage1 = 80 + 6*584 + 3480 + 9 = 7073
#   stage2 differs only in enc0.conv1 (2->8: 144+8 = 152), so 7073 + 72 = 7145
DEFAULT_PARAM_COUNT = 14218


def small_config(**kw):
    return ModelConfig(**{"base_channels": 4, "depth": 2, **kw})


def test_default_parameter_count():
    assert init_model(ModelConfig()).param_count() == DEFAULT_PARAM_COUNT


def test_same_seed_identical():
    a, b = init_model(ModelConfig(seed=7)), init_model(ModelConfig(seed=7))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_different_seed_differs():
    a, b = init_model(ModelConfig(seed=7)), init_model(ModelConfig(seed=8))
    assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_biases_start_at_zero():
    model = init_model(ModelConfig())
    assert all(not v.data.any() for k, v in model.params.items() if k.endswith(".bias"))


@pytest.mark.parametrize("cascade", [True, False])
def test_output_shape_and_range(cascade):
    model = init_model(small_config(cascade=cascade, seed=3))
    x = np.random.default_rng(0).random((3, 1, 16, 8))
    out = model.predict(x)
    assert out.shape == (3, 1, 16, 8)
    assert np.all((out > 0.0) & (out < 1.0))


def test_cascade_feeds_image_and_first_map_to_second_stage():
    model = init_model(small_config())
    assert model.params["stage2.enc0.conv1.weight"].shape[1] == 2
    assert model.params["stage1.enc0.conv1.weight"].shape[1] == 1


def test_predict_is_repeatable():
    model = init_model(small_config())
    x = np.random.default_rng(1).random((2, 1, 8, 8))
    assert model.predict(x).tobytes() == model.predict(x).tobytes()


def test_indivisible_size():
    model = init_model(small_config())
    with pytest.raises(DimensionError):
        model.predict(np.zeros((1, 1, 10, 8)))


def test_wrong_channel_count():
    with pytest.raises(DimensionError):
        init_model(small_config()).predict(np.zeros((1, 2, 8, 8)))


def test_every_parameter_gets_finite_gradient():
    model = init_model(small_config(seed=5))
    rng = np.random.default_rng(2)
    x = rng.random((2, 1, 8, 8))
    y = (rng.random((2, 1, 8, 8)) < 0.3).astype(float)
    y[:, 0, 0, 0] = 1
    T.backward(losses.combined_loss(model(DiffTensor(x)), y, (1.0, 1.0)))
    for name, p in model.params.items():
        assert np.all(np.isfinite(p.grad)), name
    assert any(p.grad.any() for p in model.params.values())


def test_probed_conv_weight_matches_finite_differences():
    model = init_model(ModelConfig(base_channels=4, depth=2, seed=11))
    rng = np.random.default_rng(3)
    x = rng.random((1, 1, 16, 16))
    y = np.zeros((1, 1, 16, 16))
    y[0, 0, 4:10, 5:12] = 1.0
    name = "stage1.enc1.conv2.weight"

    def loss_value():
        return losses.combined_loss(model.forward(DiffTensor(x)), y, (1.0, 1.0)).item()

    T.backward(losses.combined_loss(model(DiffTensor(x)), y, (1.0, 1.0)))
    analytic = model.params[name].grad.copy()
    w = model.params[name].data
    numeric = np.zeros_like(w)
    h = 1e-6
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + h
        up = loss_value()
        w[idx] = orig - h
        down = loss_value()
        w[idx] = orig
        numeric[idx] = (up - down) / (2 * h)
    assert relative_error(analytic, numeric) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    model = init_model(small_config(seed=9))
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    for k in model.params:
        assert loaded.params[k].data.tobytes() == model.params[k].data.tobytes()
    x = np.random.default_rng(4).random((2, 1, 8, 8))
    assert loaded.predict(x).tobytes() == model.predict(x).tobytes()


def test_checkpoint_size_for_defaults(tmp_path):
    model = init_model(ModelConfig())
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    names = list(model.params)
    # magic + version + config block + record count, then per record the name and shape header
    header = 4 + 4 + struct.calcsize("<IIBIQ") + 4
    header += sum(4 + len(n.encode()) + 4 + 4 * 4 for n in names)
    assert path.stat().st_size == DEFAULT_PARAM_COUNT * 8 + header


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(init_model(small_config()), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_model(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(init_model(small_config()), path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_model(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_model(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(init_model(small_config()), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_model(path)
