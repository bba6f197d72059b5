import numpy as np
import pytest

from helpers import conv2d_reference, shift_image
from ssemreg import ndgrad as ng
from ssemreg.ndgrad import Tensor, backward, grad_check, tensor


def leaf64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), (), None, op="leaf")


# ---------------------------------------------------------------------------
# arithmetic


def test_sum_sq_value():
    assert ng.sum_sq(tensor([3.0, 4.0])).item() == 25.0


def test_add_zero_is_identity():
    x = tensor([[1.0, -2.0], [0.5, 3.0]])
    out = ng.add(x, 0.0)
    np.testing.assert_array_equal(out.data, x.data)


def test_elementwise_shape_mismatch_raises():
    a = tensor(np.zeros((2, 3)))
    b = tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="shape mismatch"):
        ng.add(a, b)
    with pytest.raises(ValueError, match="shape mismatch"):
        ng.mul(a, b)


def test_sum_sq_vjp_is_2x():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 5))
    rep = grad_check(lambda leaf: ng.sum_sq(leaf), x0)
    assert rep.passed, rep
    x = tensor(x0)
    g = backward(ng.sum_sq(x), [x])[x]
    np.testing.assert_allclose(g, 2.0 * x.data, rtol=1e-6)


def test_non_finite_leaf_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        tensor([1.0, np.nan])


# ---------------------------------------------------------------------------
# relu


def test_relu_values():
    out = ng.relu(tensor([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.0])


def test_relu_all_negative_zero_output_and_grad():
    x = tensor([-1.0, -5.0, -0.25])
    out = ng.relu(x)
    loss = ng.sum_sq(out)
    g = backward(loss, [x])[x]
    np.testing.assert_array_equal(out.data, np.zeros(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_relu_vjp_away_from_zero():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(6, 6))
    x0[np.abs(x0) < 0.05] = 0.5  # keep the probe away from the kink
    rep = grad_check(lambda leaf: ng.sum_sq(ng.relu(leaf)), x0)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# conv2d / transposed_conv2d


def test_conv_1x1_identity():
    rng = np.random.default_rng(0)
    x = tensor(rng.random((2, 1, 5, 7)).astype(np.float32))
    k = tensor(np.ones((1, 1, 1, 1), np.float32))
    out = ng.conv2d(x, k, 1, "same")
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_3x3_ones_constant_interior():
    c = 0.7
    x = tensor(np.full((1, 1, 6, 6), c, np.float32))
    k = tensor(np.ones((1, 1, 3, 3), np.float32))
    out = ng.conv2d(x, k, 1, "same").data[0, 0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 9 * c, rtol=1e-6)
    assert out[0, 0] == pytest.approx(4 * c, rel=1e-6)  # corner sees a 2x2 patch


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid"), (3, "valid")])
def test_conv_forward_matches_reference(stride, padding):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 9, 11))
    k = rng.normal(size=(4, 3, 3, 3))
    out = ng.conv2d(tensor(x, dtype=np.float64), tensor(k, dtype=np.float64), stride, padding)
    np.testing.assert_allclose(out.data, conv2d_reference(x, k, stride, padding), rtol=1e-10)


def test_conv_vjp_finite_differences():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 3, 8, 8))
    k0 = rng.normal(size=(4, 3, 3, 3))
    rep_x = grad_check(
        lambda leaf: ng.sum_sq(ng.conv2d(leaf, leaf64(k0), 1, "same")), x0, sample=60
    )
    rep_k = grad_check(
        lambda leaf: ng.sum_sq(ng.conv2d(leaf64(x0), leaf, 2, "same")), k0, sample=60
    )
    assert rep_x.passed and rep_x.max_rel_error <= 1e-4, rep_x
    assert rep_k.passed and rep_k.max_rel_error <= 1e-4, rep_k


def test_conv_rejects_bad_input():
    x = tensor(np.zeros((1, 2, 4, 4)))
    k = tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ValueError, match="channel mismatch"):
        ng.conv2d(x, k)
    bad = Tensor(np.full((1, 2, 4, 4), np.nan, np.float32), (), None)
    with pytest.raises(ValueError, match="non-finite"):
        ng.conv2d(bad, tensor(np.zeros((3, 2, 3, 3))))
    with pytest.raises(ValueError, match="larger than input"):
        ng.conv2d(x, tensor(np.zeros((1, 2, 5, 5))), 1, "valid")


def test_transposed_conv_1x1_scaling():
    rng = np.random.default_rng(1)
    x = tensor(rng.random((1, 1, 4, 4)).astype(np.float32))
    k = tensor(np.full((1, 1, 1, 1), 2.5, np.float32))
    out = ng.transposed_conv2d(x, k, 1, "same")
    np.testing.assert_allclose(out.data, 2.5 * x.data, rtol=1e-6)


# exact-fit extents: H = n*stride for 'same', H = (n-1)*stride + kh for 'valid',
# so the transposed output matches the conv input shape
@pytest.mark.parametrize("stride,padding,hw", [(1, "same", (8, 6)), (2, "same", (8, 10)), (1, "valid", (7, 7)), (2, "valid", (9, 7))])
def test_adjoint_identity(stride, padding, hw):
    rng = np.random.default_rng(21)
    h, w = hw
    x = rng.normal(size=(2, 3, h, w))
    k = rng.normal(size=(4, 3, 3, 3))
    y = ng.conv2d(leaf64(x), leaf64(k), stride, padding).data
    probe = rng.normal(size=y.shape)
    back = ng.transposed_conv2d(leaf64(probe), leaf64(k), stride, padding).data
    lhs = np.sum(y * probe)
    rhs = np.sum(x * back)
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs))


def test_transposed_conv_vjp_finite_differences():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(1, 4, 5, 5))
    k0 = rng.normal(size=(4, 2, 3, 3))
    rep_x = grad_check(lambda leaf: ng.sum_sq(ng.transposed_conv2d(leaf, leaf64(k0), 2, "same")), x0, sample=50)
    rep_k = grad_check(lambda leaf: ng.sum_sq(ng.transposed_conv2d(leaf64(x0), leaf, 2, "valid")), k0, sample=50)
    assert rep_x.passed, rep_x
    assert rep_k.passed, rep_k


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x = tensor(rng.random((2, 3, 12, 12)).astype(np.float32))
    k = tensor(rng.normal(size=(4, 3, 5, 5)).astype(np.float32))
    a = ng.conv2d(x, k, 2, "same").data
    b = ng.conv2d(x, k, 2, "same").data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# grid_sample


def identity_coords(h, w):
    coords = np.empty((h, w, 2), dtype=np.float32)
    coords[..., 0] = np.arange(h, dtype=np.float32)[:, None]
    coords[..., 1] = np.arange(w, dtype=np.float32)[None, :]
    return coords


def test_grid_sample_identity_bit_exact():
    rng = np.random.default_rng(2)
    img = rng.random((3, 6, 7)).astype(np.float32)
    out = ng.grid_sample(tensor(img), tensor(identity_coords(6, 7)))
    assert out.data.tobytes() == img.tobytes()


def test_grid_sample_integer_shift_matches_index_shift():
    rng = np.random.default_rng(6)
    img = rng.random((5, 8)).astype(np.float32)
    coords = identity_coords(5, 8)
    coords[..., 1] += 1.0
    out = ng.grid_sample(tensor(img), tensor(coords)).data
    np.testing.assert_allclose(out, shift_image(img, 0, 1), atol=1e-7)
    assert np.all(out[:, -1] == 0)


def test_grid_sample_midpoint():
    img = tensor(np.array([[3.0, 7.0]], np.float32))
    coords = tensor(np.array([[[0.0, 0.5]]], np.float32))
    out = ng.grid_sample(img, coords)
    assert out.item() == pytest.approx(5.0)


def test_grid_sample_rejects_non_finite_coords():
    img = tensor(np.zeros((4, 4)))
    coords = Tensor(np.full((2, 2, 2), np.inf), (), None)
    with pytest.raises(ValueError, match="non-finite"):
        ng.grid_sample(img, coords)


def test_grid_sample_vjp_both_inputs():
    rng = np.random.default_rng(13)
    img = rng.random((2, 6, 6))
    coords = np.stack(
        (rng.uniform(0.3, 4.4, (5, 5)), rng.uniform(0.3, 4.4, (5, 5))), axis=-1
    )  # fractional, interior: away from lattice kinks and the border
    rep_img = grad_check(lambda leaf: ng.sum_sq(ng.grid_sample(leaf, leaf64(coords))), img)
    rep_crd = grad_check(lambda leaf: ng.sum_sq(ng.grid_sample(leaf64(img), leaf)), coords, eps=1e-4)
    assert rep_img.passed, rep_img
    assert rep_crd.passed, rep_crd


# ---------------------------------------------------------------------------
# bilinear_resize


def test_resize_identity():
    rng = np.random.default_rng(8)
    img = rng.random((5, 9)).astype(np.float32)
    out = ng.bilinear_resize(tensor(img), (5, 9))
    assert out.data.tobytes() == img.tobytes()


def test_resize_constant_stays_constant():
    img = tensor(np.full((4, 6), 0.37, np.float32))
    for size in [(3, 3), (9, 13), (1, 5), (17, 2)]:
        out = ng.bilinear_resize(img, size)
        np.testing.assert_allclose(out.data, 0.37, rtol=1e-6)


def test_resize_2x2_to_3x3_center():
    img = tensor(np.array([[0.0, 2.0], [2.0, 4.0]], np.float32))
    out = ng.bilinear_resize(img, (3, 3))
    assert out.data[1, 1] == pytest.approx(2.0)


def test_resize_rejects_zero_extent():
    with pytest.raises(ValueError, match=">= 1"):
        ng.bilinear_resize(tensor(np.zeros((4, 4))), (0, 3))


def test_resize_vjp():
    rng = np.random.default_rng(14)
    img = rng.random((5, 6))
    rep = grad_check(lambda leaf: ng.sum_sq(ng.bilinear_resize(leaf, (9, 4))), img)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# spatial_gradient


def test_spatial_gradient_constant_is_zero():
    dr, dc = ng.spatial_gradient(tensor(np.full((4, 5), 3.3, np.float32)))
    np.testing.assert_allclose(dr.data, 0, atol=1e-7)
    np.testing.assert_allclose(dc.data, 0, atol=1e-7)


def test_spatial_gradient_column_ramp():
    s = 0.75
    ramp = np.tile(s * np.arange(6, dtype=np.float32), (4, 1))
    dr, dc = ng.spatial_gradient(tensor(ramp))
    np.testing.assert_allclose(dc.data[:, :-1], s, rtol=1e-6)
    np.testing.assert_array_equal(dc.data[:, -1], np.zeros(4))
    np.testing.assert_allclose(dr.data, 0, atol=1e-7)


def test_spatial_gradient_rejects_degenerate():
    with pytest.raises(ValueError, match=">= 2"):
        ng.spatial_gradient(tensor(np.zeros((1, 5))))


def test_spatial_gradient_vjp():
    rng = np.random.default_rng(15)
    f0 = rng.normal(size=(5, 6))

    def build(leaf):
        dr, dc = ng.spatial_gradient(leaf)
        return ng.add(ng.sum_sq(dr), ng.sum_sq(dc))

    rep = grad_check(build, f0)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# structural ops


def test_take_channel_and_stack_last_roundtrip():
    rng = np.random.default_rng(16)
    x = tensor(rng.random((3, 4, 2)).astype(np.float32))
    a = ng.take_channel(x, 0)
    b = ng.take_channel(x, 1)
    back = ng.stack_last(a, b)
    np.testing.assert_array_equal(back.data, x.data)

    def build(leaf):
        return ng.sum_sq(ng.stack_last(ng.take_channel(leaf, 1), ng.take_channel(leaf, 0)))

    rep = grad_check(build, x.data)
    assert rep.passed, rep


def test_apply_matrix_matches_matmul_and_grad():
    rng = np.random.default_rng(17)
    m = rng.normal(size=(8, 6))
    x0 = rng.normal(size=(2, 3))
    out = ng.apply_matrix(m, leaf64(x0), (4, 2))
    np.testing.assert_allclose(out.data, (m @ x0.ravel()).reshape(4, 2), rtol=1e-12)
    rep = grad_check(lambda leaf: ng.sum_sq(ng.apply_matrix(m, leaf, (8,))), x0)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# backward


def test_backward_simple_gradient():
    x = tensor([1.0, -2.0, 0.5])
    g = backward(ng.sum_sq(x), [x])[x]
    np.testing.assert_allclose(g, 2 * x.data, rtol=1e-6)


def test_backward_unused_leaf_gets_zero():
    x = tensor([1.0, 2.0])
    y = tensor([[3.0]])
    g = backward(ng.sum_sq(x), [x, y])
    np.testing.assert_array_equal(g[y], np.zeros((1, 1)))


def test_backward_requires_scalar_loss():
    x = tensor([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(ng.add(x, x), [x])


def test_backward_fanout_sums_path_gradients():
    # z = x + x has two paths; d/dx sum_sq(z) = 2 * z * 2 = 8x
    x = tensor([1.5, -0.5, 2.0])
    g = backward(ng.sum_sq(ng.add(x, x)), [x])[x]
    np.testing.assert_allclose(g, 8 * x.data, rtol=1e-6)


def test_backward_composite_conv_relu_sumsq():
    rng = np.random.default_rng(18)
    x0 = rng.normal(size=(1, 2, 6, 6)) + 0.3
    k0 = rng.normal(size=(3, 2, 3, 3))

    def build(leaf):
        return ng.sum_sq(ng.relu(ng.conv2d(leaf, leaf64(k0), 2, "same")))

    rep = grad_check(build, x0, sample=40)
    assert rep.passed and rep.max_rel_error <= 1e-4, rep


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_linear_graph_near_machine_precision():
    rng = np.random.default_rng(19)
    rep = grad_check(lambda leaf: ng.sum_sq(leaf), rng.normal(size=(3, 3)))
    assert rep.max_rel_error < 1e-9


def test_grad_check_detects_corrupted_vjp():
    def build(leaf):
        # scale op with a deliberately sign-flipped vjp
        bad = Tensor(leaf.data * 2.0, (leaf,), lambda g, need: (-2.0 * g,), op="bad_scale")
        return ng.sum_sq(bad)

    rep = grad_check(build, np.array([1.0, 2.0, 3.0]))
    assert rep.max_rel_error >= 0.5
    assert not rep.passed
