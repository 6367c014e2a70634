import numpy as np
import pytest

from gradcheck import LAYER_TOLERANCE, GradientChecker
from layers import (
    FULL_MASK, BatchNorm, Concat, Conv1x1, DownSamp, Dropout, FullyConnected, GlobalAvgPool,
    KernelMask, MeshConv, MeshConvTranspose, MeshTensor, ReLU,
)
from mesh import level_stats
from operators import operator_set_at_level
from utils import NumericalError

IDENTITY_ONLY = KernelMask(True, False, False, False)


def _tensor(rng, batch, channels, level):
    return MeshTensor(rng.standard_normal((batch, channels, level_stats(level).n_v)), level)


def _dense_meshconv(conv, x):
    dense = [m.toarray() for m in operator_set_at_level(conv.level).matrices(conv.mask)]
    weight, bias = conv.params['weight'], conv.params['bias']
    out = np.zeros((x.shape[0], conv.out_channels, x.shape[2]))
    for b in range(x.shape[0]):
        for o in range(conv.out_channels):
            out[b, o] = bias[o]
            for i in range(conv.in_channels):
                for slot, matrix in enumerate(dense):
                    out[b, o] += weight[o, i, slot] * (matrix @ x[b, i])
    return out


def test_identity_kernel_is_exact():
    rng = np.random.default_rng(0)
    conv = MeshConv(3, 3, 2, IDENTITY_ONLY, rng)
    conv.params['weight'][:, :, 0] = np.eye(3)
    x = _tensor(rng, 2, 3, 2)
    np.testing.assert_array_equal(conv.forward(x).data, x.data)


def test_constant_input_sees_only_identity_and_bias():
    rng = np.random.default_rng(1)
    conv = MeshConv(2, 4, 3, FULL_MASK, rng)
    conv.params['bias'][:] = rng.standard_normal(4)
    constants = np.array([0.7, -1.3])
    x = MeshTensor(np.broadcast_to(constants[None, :, None], (1, 2, 642)).copy(), 3)
    expected = conv.params['bias'] + conv.params['weight'][:, :, 0] @ constants
    np.testing.assert_allclose(conv.forward(x).data[0], np.repeat(expected[:, None], 642, axis=1), atol=1e-9)


def test_meshconv_matches_dense_oracle():
    rng = np.random.default_rng(2)
    masks = [FULL_MASK, KernelMask.parse('Ilap'), KernelMask.parse('Ixy'), KernelMask.parse('y')]
    for draw in range(100):
        mask = masks[draw % len(masks)]
        in_channels, out_channels = rng.integers(1, 4, size=2)
        conv = MeshConv(int(in_channels), int(out_channels), 2, mask, rng)
        conv.params['bias'][:] = rng.standard_normal(out_channels)
        x = _tensor(rng, 2, int(in_channels), 2)
        np.testing.assert_allclose(conv.forward(x).data, _dense_meshconv(conv, x.data), rtol=0, atol=1e-10)


def test_masked_kernel_equals_full_kernel_with_zero_laplacian_weight():
    rng = np.random.default_rng(3)
    masked = MeshConv(3, 5, 2, KernelMask.parse('Ixy'), rng)
    full = MeshConv(3, 5, 2, FULL_MASK, rng)
    full.params['weight'][:, :, :3] = masked.params['weight']
    full.params['weight'][:, :, 3] = 0.0
    x = _tensor(rng, 2, 3, 2)
    np.testing.assert_array_equal(masked.forward(x).data, full.forward(x).data)


def test_meshconv_commutes_with_batch_and_channel_permutation():
    rng = np.random.default_rng(4)
    conv = MeshConv(4, 3, 2, FULL_MASK, rng)
    x = _tensor(rng, 3, 4, 2)
    out = conv.forward(x).data

    batch_order = np.array([2, 0, 1])
    np.testing.assert_allclose(conv.forward(x.with_data(x.data[batch_order])).data, out[batch_order], atol=1e-12)

    channel_order = np.array([3, 1, 0, 2])
    permuted = MeshConv(4, 3, 2, FULL_MASK, rng)
    permuted.params['weight'][...] = conv.params['weight'][:, channel_order, :]
    shuffled = x.with_data(x.data[:, channel_order, :])
    np.testing.assert_allclose(permuted.forward(shuffled).data, out, atol=1e-12)


def test_zero_upstream_gradient_gives_zero_gradients():
    rng = np.random.default_rng(5)
    conv = MeshConv(2, 3, 2, FULL_MASK, rng)
    x = _tensor(rng, 2, 2, 2)
    conv.forward(x)
    grad_input = conv.backward(np.zeros((2, 3, 162)))
    assert not grad_input.any()
    for _, _, grad in conv.parameters():
        assert not grad.any()


def test_parameter_count_per_mask():
    assert MeshConv(5, 7, 1).num_parameters() == 4 * 5 * 7 + 7
    assert MeshConv(5, 7, 1, KernelMask.parse('Ilap')).num_parameters() == 2 * 5 * 7 + 7


def test_meshconv_rejects_wrong_level_and_channels():
    rng = np.random.default_rng(6)
    conv = MeshConv(2, 2, 2, rng=rng)
    with pytest.raises(ValueError):
        conv.forward(_tensor(rng, 1, 2, 1))
    with pytest.raises(ValueError):
        conv.forward(_tensor(rng, 1, 3, 2))


@pytest.fixture(scope="module")
def check_results():
    return {r.name: r for r in GradientChecker(level=2, width=3, seed=0, verbose=False).run()}


@pytest.mark.parametrize("name", [
    'MeshConv', 'MeshConvTranspose', 'DownSamp', 'Conv1x1', 'BatchNorm(train)', 'BatchNorm(eval)',
    'ReLU', 'Dropout', 'GlobalAvgPool', 'FullyConnected', 'Classifier', 'Segmenter',
])
def test_backward_matches_finite_differences(check_results, name):
    result = check_results[name]
    assert result.passed, result.line()


def test_checker_catches_sign_flip():
    checker = GradientChecker(level=2, width=2, seed=1, verbose=False, inject_sign_flip=True)
    results = {r.name: r for r in checker.run()}
    assert not results['MeshConv'].passed
    assert not results['MeshConvTranspose'].passed
    assert results['ReLU'].passed


def test_single_layer_check_with_masked_kernel():
    checker = GradientChecker(level=1, width=2, seed=2, verbose=False)
    layer = MeshConv(2, 3, 1, KernelMask.parse('ylap'), np.random.default_rng(0))
    result = checker.check_layer('masked', layer, checker._mesh_input(2))
    assert result.max_relative_error <= LAYER_TOLERANCE


def test_transpose_with_identity_kernel_zero_pads():
    rng = np.random.default_rng(7)
    up = MeshConvTranspose(2, 2, 2, IDENTITY_ONLY, rng)
    up.params['weight'][:, :, 0] = np.eye(2)
    x = _tensor(rng, 1, 2, 1)
    out = up.forward(x)
    assert out.level == 2
    np.testing.assert_array_equal(out.data[:, :, :42], x.data)
    assert not out.data[:, :, 42:].any()
    np.testing.assert_array_equal(DownSamp().forward(out).data, x.data)


def test_transpose_matches_dense_oracle_on_padded_input():
    rng = np.random.default_rng(8)
    up = MeshConvTranspose(2, 3, 2, FULL_MASK, rng)
    x = _tensor(rng, 2, 2, 1)
    padded = np.zeros((2, 2, 162))
    padded[:, :, :42] = x.data
    np.testing.assert_allclose(up.forward(x).data, _dense_meshconv(up, padded), atol=1e-10)
    with pytest.raises(ValueError):
        up.forward(_tensor(rng, 2, 2, 2))


def test_downsamp_keeps_nested_prefix():
    rng = np.random.default_rng(9)
    x = _tensor(rng, 2, 3, 3)
    down = DownSamp()
    out = down.forward(x)
    assert out.level == 2
    np.testing.assert_array_equal(out.data, x.data[:, :, :162])
    grad = down.backward(np.ones((2, 3, 162)))
    assert grad.shape == (2, 3, 642)
    assert grad[:, :, :162].all() and not grad[:, :, 162:].any()
    with pytest.raises(ValueError):
        down.forward(_tensor(rng, 1, 1, 0))


def test_conv1x1_identity_and_vertex_permutation():
    rng = np.random.default_rng(10)
    conv = Conv1x1(3, 3, rng)
    conv.params['weight'][...] = np.eye(3)
    x = _tensor(rng, 2, 3, 1)
    np.testing.assert_array_equal(conv.forward(x).data, x.data)

    conv = Conv1x1(3, 4, rng)
    order = rng.permutation(42)
    out = conv.forward(x).data
    np.testing.assert_allclose(conv.forward(x.with_data(x.data[:, :, order])).data, out[:, :, order], atol=1e-12)


def test_batchnorm_training_normalises_per_channel():
    rng = np.random.default_rng(11)
    x = MeshTensor(10.0 * rng.standard_normal((4, 3, 162)) + 5.0, 2)
    out = BatchNorm(3).forward(x, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-6)


def test_batchnorm_running_statistics():
    rng = np.random.default_rng(12)
    data = rng.standard_normal((2, 2, 42)) * 3.0 + 1.0
    norm = BatchNorm(2)
    norm.forward(MeshTensor(data, 1), training=True)
    count = 2 * 42
    np.testing.assert_allclose(norm.running_mean, 0.1 * data.mean(axis=(0, 2)))
    unbiased = data.var(axis=(0, 2)) * count / (count - 1)
    np.testing.assert_allclose(norm.running_var, 0.9 + 0.1 * unbiased)
    assert set(norm.buffers()) == {'running_mean', 'running_var'}


def test_batchnorm_eval_with_fresh_statistics_is_near_identity():
    rng = np.random.default_rng(13)
    x = _tensor(rng, 2, 3, 1)
    np.testing.assert_allclose(BatchNorm(3).forward(x).data, x.data, rtol=1e-5)


def test_batchnorm_needs_two_values_in_training():
    with pytest.raises(ValueError):
        BatchNorm(4).forward(np.ones((1, 4)), training=True)
    with pytest.raises(ValueError):
        BatchNorm(4).forward(np.ones((2, 3)), training=True)


def test_relu():
    x = MeshTensor(np.array([[[-1.0, 0.0, 2.0] + [0.5] * 9]]), 0)
    relu = ReLU()
    out = relu.forward(x).data
    np.testing.assert_array_equal(out[0, 0, :3], [0.0, 0.0, 2.0])
    grad = relu.backward(np.ones_like(out))
    np.testing.assert_array_equal(grad[0, 0, :3], [0.0, 0.0, 1.0])


def test_dropout():
    rng = np.random.default_rng(14)
    x = MeshTensor(np.ones((4, 8, 642)), 3)
    dropout = Dropout(0.5)
    assert dropout.forward(x) is x
    with pytest.raises(ValueError):
        dropout.forward(x, training=True)

    dropout.rng = rng
    out = dropout.forward(x, training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(np.mean(out == 0.0) - 0.5) < 0.02
    np.testing.assert_array_equal(dropout.backward(np.ones_like(out)), out)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_global_average_pool():
    rng = np.random.default_rng(15)
    x = _tensor(rng, 2, 3, 1)
    pool = GlobalAvgPool()
    np.testing.assert_allclose(pool.forward(x), x.data.mean(axis=2))
    grad = pool.backward(np.ones((2, 3)))
    np.testing.assert_allclose(grad, 1.0 / 42)


def test_fully_connected_shapes():
    rng = np.random.default_rng(16)
    fc = FullyConnected(3, 5, rng)
    assert fc.forward(rng.standard_normal((4, 3))).shape == (4, 5)
    assert fc.num_parameters() == 20
    with pytest.raises(ValueError):
        fc.forward(rng.standard_normal((4, 2)))


def test_concat_splits_gradient():
    rng = np.random.default_rng(17)
    a, b = _tensor(rng, 2, 2, 1), _tensor(rng, 2, 3, 1)
    concat = Concat()
    out = concat.forward([a, b])
    assert out.channels == 5
    grad_a, grad_b = concat.backward(out.data)
    np.testing.assert_array_equal(grad_a, a.data)
    np.testing.assert_array_equal(grad_b, b.data)
    with pytest.raises(ValueError):
        concat.forward([a, _tensor(rng, 2, 2, 2)])


@pytest.mark.parametrize("text,flags,label", [
    ('Ixylap', (True, True, True, True), 'I + d/dx + d/dy + lap'),
    ('Ilap', (True, False, False, True), 'I + lap'),
    ('Iylap', (True, False, True, True), 'I + d/dy + lap'),
    ('x', (False, True, False, False), 'd/dx'),
])
def test_kernel_mask_parse(text, flags, label):
    mask = KernelMask.parse(text)
    assert mask.flags() == flags
    assert mask.label() == label
    assert mask.token() == text


@pytest.mark.parametrize("text", ['', 'Iz', 'laplace', 'grad'])
def test_kernel_mask_rejects_bad_tokens(text):
    with pytest.raises(ValueError):
        KernelMask.parse(text)


def test_kernel_mask_needs_an_operator():
    with pytest.raises(ValueError):
        KernelMask(False, False, False, False)


def test_mesh_tensor_validation():
    with pytest.raises(ValueError):
        MeshTensor(np.zeros((2, 12)), 0)
    with pytest.raises(ValueError):
        MeshTensor(np.zeros((1, 1, 13)), 0)
    bad = np.zeros((1, 1, 12))
    bad[0, 0, 3] = np.nan
    with pytest.raises(NumericalError):
        MeshTensor(bad, 0)
