import numpy as np
import pytest

from nnmamba import blocks
from nnmamba import functional as F
from nnmamba.blocks import ResBlock, ResMambaBlock
from nnmamba.errors import DimensionError
from nnmamba.module import BatchNorm3d
from nnmamba.tensor import Tensor, no_grad


def loop_conv3d(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation with seven nested loops."""
    N, C, D, H, W = x.shape
    Fo, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    Do = (D + 2 * padding - k) // stride + 1
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((N, Fo, Do, Ho, Wo))
    for n in range(N):
        for f in range(Fo):
            for i in range(Do):
                for j in range(Ho):
                    for l in range(Wo):
                        acc = 0.0
                        for c in range(C):
                            patch = xp[n, c, i * stride:i * stride + k, j * stride:j * stride + k,
                                       l * stride:l * stride + k]
                            acc += np.sum(patch * w[f, c])
                        out[n, f, i, j, l] = acc + (b[f] if b is not None else 0.0)
    return out


def test_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 4, 3))
    out = F.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding,bias", [(1, 1, False), (2, 1, True), (1, 0, True), (2, 0, False)])
def test_conv_matches_loop_oracle(stride, padding, bias):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 1, 4, 4, 4))
    w = rng.normal(size=(3, 1, 3, 3, 3))
    b = rng.normal(size=3) if bias else None
    got = F.conv3d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, loop_conv3d(x, w, b, stride, padding), rtol=1e-6, atol=1e-12)


def test_conv_multichannel_matches_oracle():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(1, 3, 5, 6, 4)), rng.normal(size=(2, 3, 3, 3, 3))
    np.testing.assert_allclose(F.conv3d(Tensor(x), Tensor(w), padding=1).data, loop_conv3d(x, w, padding=1),
                               rtol=1e-10, atol=1e-12)


def test_conv_output_shape_stride2():
    out = F.conv3d(Tensor(np.zeros((1, 1, 8, 8, 8))), Tensor(np.zeros((2, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, 4, 4, 4)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))


def test_conv_float32_output():
    x = Tensor(np.ones((1, 2, 4, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((1, 2, 3, 3, 3), dtype=np.float32))
    assert F.conv3d(x, w, padding=1).dtype == np.float32


def test_bn_eval_identity():
    bn = BatchNorm3d(2, dtype=np.float64).eval()
    x = np.random.default_rng(1).normal(size=(2, 2, 3, 3, 3))
    np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-14)


def test_bn_train_statistics():
    bn = BatchNorm3d(3, dtype=np.float64)
    bn.gamma.data = np.array([1.0, 2.0, 0.5])
    bn.beta.data = np.array([0.0, -1.0, 3.0])
    x = np.random.default_rng(2).normal(2.0, 3.0, size=(4, 3, 4, 4, 4))
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), bn.beta.data, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), bn.gamma.data**2, rtol=1e-4)


def test_bn_running_mean_momentum():
    bn = BatchNorm3d(1, dtype=np.float64)
    bn(Tensor(np.ones((2, 1, 2, 2, 2))))
    assert bn.running_mean[0] == pytest.approx(0.1)
    assert bn.running_var[0] == pytest.approx(0.9)


def test_bn_single_value_batch_is_finite():
    bn = BatchNorm3d(1, dtype=np.float64)
    y = bn(Tensor(np.full((1, 1, 1, 1, 1), 5.0)))
    assert np.all(np.isfinite(y.data))


def test_bn_eval_is_affine():
    bn = BatchNorm3d(2, dtype=np.float64)
    bn.running_mean[:] = [0.5, -1.0]
    bn.running_var[:] = [2.0, 0.3]
    bn.eval()
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 1, 2, 2, 2, 2))
    f = lambda v: bn(Tensor(v)).data  # noqa: E731
    np.testing.assert_allclose(f(a + b) - f(b), f(a) - f(np.zeros_like(a)), atol=1e-12)


def test_batchnorm3d_mode_flag():
    bn = BatchNorm3d(1, dtype=np.float64)
    x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
    blocks.batchnorm3d(x, bn, "eval")
    assert bn.running_mean[0] == 0.0
    with pytest.raises(ValueError):
        blocks.batchnorm3d(x, bn, "test")


def test_res_block_zero_kernels_is_relu():
    rng = np.random.default_rng(4)
    blk = ResBlock(3, 3, rng, dtype=np.float64)
    blk.conv1.weight.data[...] = 0
    blk.conv2.weight.data[...] = 0
    x = rng.normal(size=(2, 3, 4, 4, 4))
    np.testing.assert_array_equal(blk(Tensor(x)).data, np.maximum(x, 0))


def test_res_block_zero_second_conv_reduces_to_relu_projection():
    rng = np.random.default_rng(5)
    blk = ResBlock(2, 4, rng, stride=2, dtype=np.float64)
    blk.conv2.weight.data[...] = 0
    x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
    np.testing.assert_array_equal(blk(x).data, np.maximum(blk.shortcut(x).data, 0))


def test_res_block_strided_shape():
    blk = ResBlock(32, 64, np.random.default_rng(6), stride=2)
    out = blk(Tensor(np.zeros((1, 32, 16, 16, 16), dtype=np.float32)))
    assert out.shape == (1, 64, 8, 8, 8)
    assert blk.proj is not None
    assert ResBlock(8, 8, np.random.default_rng(0)).proj is None


def test_res_mamba_zero_init_equals_res_block():
    rng = np.random.default_rng(7)
    blk = ResMambaBlock(2, 2, rng, state_size=3, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    blk.eval()
    with no_grad():
        np.testing.assert_array_equal(blk(x).data, blk.res(x).data)


def test_res_mamba_branch_is_causal():
    rng = np.random.default_rng(8)
    blk = ResMambaBlock(2, 2, rng, state_size=3, dtype=np.float64)
    blk.mamba.out_proj.weight.data = rng.normal(size=blk.mamba.out_proj.weight.shape)
    blk.eval()
    r = Tensor(rng.normal(size=(1, 2, 2, 2, 3)))
    r2 = Tensor(r.data.copy())
    r2.data[0, :, 1, 1, 2] += 1.0  # last voxel
    with no_grad():
        y, y2 = blk.mamba(r).data.reshape(2, -1), blk.mamba(r2).data.reshape(2, -1)
    np.testing.assert_array_equal(y[:, :-1], y2[:, :-1])


def test_blocks_are_batch_independent_in_eval():
    rng = np.random.default_rng(9)
    blk = ResBlock(2, 3, rng, stride=2, dtype=np.float64).eval()
    x = rng.normal(size=(3, 2, 4, 4, 4))
    with no_grad():
        y = blk(Tensor(x)).data
        y_perm = blk(Tensor(x[[1, 2, 0]])).data
    np.testing.assert_array_equal(y_perm, y[[1, 2, 0]])


def test_upsample_constant():
    x = np.full((1, 2, 3, 2, 4), 1.5)
    np.testing.assert_allclose(F.upsample_trilinear(Tensor(x)).data, 1.5, rtol=0, atol=1e-15)


def test_upsample_matches_half_pixel_interpolation():
    a = np.array([0.0, 1.0, 4.0])
    x = np.broadcast_to(a[None, None, :, None, None], (1, 1, 3, 1, 1)).copy()
    # source coordinate (i + 0.5) / 2 - 0.5, clamped at the borders
    expected = [0.0, 0.25, 0.75, 1.75, 3.25, 4.0]
    np.testing.assert_allclose(F.upsample_trilinear(Tensor(x)).data[0, 0, :, 0, 0], expected)


def test_maxpool_picks_block_max_and_first_tie():
    x = np.arange(64.0).reshape(1, 1, 4, 4, 4)
    out = F.max_pool3d(Tensor(x), 2).data
    np.testing.assert_array_equal(out[0, 0], x[0, 0, 1::2, 1::2, 1::2])
    t = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    from nnmamba.tensor import backward, sum as tsum
    backward(tsum(F.max_pool3d(t, 2)))
    assert t.grad[0, 0, 0, 0, 0] == 1.0 and t.grad.sum() == 1.0


def test_downsample_upsample_smooth_sphere():
    g = np.indices((16, 16, 16)).astype(float)
    r = np.sqrt(((g - 7.5) ** 2).sum(axis=0))
    vol = np.exp(-(r**2) / (2 * 5.0**2))[None, None]
    coarse = vol.reshape(1, 1, 8, 2, 8, 2, 8, 2).mean(axis=(3, 5, 7))
    up = F.upsample_trilinear(Tensor(coarse)).data
    assert np.abs(up - vol).max() < 0.1 * (vol.max() - vol.min())
