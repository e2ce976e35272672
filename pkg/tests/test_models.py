import numpy as np
import pytest

from nnmamba import models
from nnmamba.errors import ConfigError, DimensionError
from nnmamba.models import ModelConfig, build_model, mamba_layers, mamba_placement
from nnmamba.tensor import Tensor, backward, no_grad
from nnmamba.tensor import sum as tsum


def cfg(task, **kw):
    return ModelConfig(task, **kw)


def test_seg_placement_and_shape():
    m = build_model(cfg("seg", num_classes=3))
    assert mamba_placement(m) == ["stage0", "stage1", "stage2", "stage3"]
    out = m(Tensor(np.zeros((1, 1, 32, 32, 32), dtype=np.float32)))
    assert out.shape == (1, 3, 32, 32, 32)


def test_landmark_placement_and_shape():
    m = build_model(cfg("landmark"))
    assert mamba_placement(m) == ["stage0"]
    out = m(Tensor(np.zeros((1, 1, 32, 32, 32), dtype=np.float32)))
    assert out.shape == (1, 6, 32, 32, 32)


def test_cls_placement_and_shape():
    m = build_model(cfg("cls", num_classes=2))
    assert mamba_placement(m) == ["after_stem"]
    out = m(Tensor(np.zeros((2, 1, 32, 32, 32), dtype=np.float32)))
    assert out.shape == (2, 2)


def test_ablation_flag_removes_every_ssm_layer():
    for task in ("seg", "cls", "landmark"):
        assert mamba_layers(build_model(cfg(task, use_mamba=False))) == []


def test_landmark_vs_seg_parameter_difference():
    seg = build_model(cfg("seg", num_classes=6))
    lmk = build_model(cfg("landmark", num_landmarks=6))
    extra = sum(layer.parameter_count() for name, layer in mamba_layers(seg) if not name.startswith("encoder.0"))
    assert seg.parameter_count() - lmk.parameter_count() == extra


def test_parameter_count_by_hand():
    m = build_model(cfg("cls", num_classes=2, stage_channels=[4, 8], state_size=2, input_spatial=(8, 8, 8)))
    conv = lambda i, o, k=3: o * i * k**3  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    E = 8
    mamba = 4 * 2 * E + (E * 2 + E * 2 + E * 2 + E * E + E + E) + E * 4
    expected = (
        conv(1, 4) + bn(4)
        + mamba
        + conv(4, 4) + bn(4) + conv(4, 4) + bn(4)
        + conv(4, 8) + bn(8) + conv(8, 8) + bn(8) + conv(4, 8, 1) + bn(8)
        + 8 * 2 + 2
    )
    assert models.parameter_count(m) == expected == 3910


@pytest.mark.parametrize("size", [16, 32, 48, 64])
def test_shapes_across_input_sizes(size):
    shape = (1, 1, size, size, size)
    with no_grad():
        for task, expect in (("seg", (1, 4) + shape[2:]), ("landmark", (1, 6) + shape[2:]), ("cls", (1, 2))):
            c = cfg(task, num_classes=4 if task == "seg" else 2, input_spatial=(size,) * 3,
                    stage_channels=[4, 8, 8, 16])
            m = build_model(c).eval()
            assert m(Tensor(np.zeros(shape, dtype=np.float32))).shape == expect


def test_indivisible_extent_is_config_error():
    m = build_model(cfg("seg"))
    with pytest.raises(ConfigError):
        m(Tensor(np.zeros((1, 1, 20, 32, 32), dtype=np.float32)))
    with pytest.raises(ConfigError):
        cfg("seg", input_spatial=(20, 32, 32)).validate()


def test_wrong_input_channels():
    with pytest.raises(DimensionError):
        build_model(cfg("cls"))(Tensor(np.zeros((1, 2, 16, 16, 16), dtype=np.float32)))


def test_unknown_task():
    with pytest.raises(ConfigError):
        ModelConfig("detection")


def test_seg_forward_backward_all_grads_finite():
    m = build_model(cfg("seg"), seed=1)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 32, 32)).astype(np.float32))
    params = m.parameters()
    backward(tsum(m(x) * 0.01), params)
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name
        assert np.all(np.isfinite(p.grad)), name


def test_save_load_roundtrip_bit_exact(tmp_path):
    c = cfg("cls", stage_channels=[4, 8], input_spatial=(16, 16, 16))
    m = build_model(c, seed=3)
    m.train()
    m(Tensor(np.random.default_rng(1).normal(size=(2, 1, 16, 16, 16)).astype(np.float32)))  # move BN stats
    path = tmp_path / "m.nmb"
    models.save_model(path, m)
    m2 = models.load_model(path, c)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 1, 16, 16, 16)).astype(np.float32))
    m.eval()
    m2.eval()
    with no_grad():
        np.testing.assert_array_equal(m(x).data, m2(x).data)
        np.testing.assert_array_equal(m(x).data, m(x).data)


def test_config_json_roundtrip():
    c = cfg("landmark", stage_channels=[8, 16, 32], input_spatial=(16, 16, 16))
    assert ModelConfig.from_json(c.to_json()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"task": "seg", "widths": [1]})


def test_shared_building_blocks():
    seg, lmk = build_model(cfg("seg")), build_model(cfg("landmark"))
    cls = build_model(cfg("cls"))
    assert type(seg.stem) is type(lmk.stem) is type(cls.stem)
    assert type(seg.encoder[1].res) is type(cls.stages[1])
