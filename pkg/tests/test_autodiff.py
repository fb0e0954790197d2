import numpy as np
import pytest

from softrecon import autodiff as ad
from softrecon.autodiff import (
    Tensor, apply, backward, constant, parameter, grad_check, grid_sample,
    precision, scatter_add, take, ShapeError,
)


def test_mul_square_gradient():
    x = parameter(3.0)
    y = apply("mul", [x, x])
    backward(y)
    assert y.data == 9.0
    assert x.grad == pytest.approx(6.0)


def test_matmul_identity():
    m = parameter(np.arange(4.0).reshape(2, 2))
    eye = constant(np.eye(2))
    out = apply("matmul", [eye, m])
    assert np.allclose(out.data, m.data)
    backward(out.sum())
    assert np.allclose(m.grad, np.ones((2, 2)))


def test_conv2d_1x1_scale():
    img = parameter(np.random.default_rng(0).uniform(size=(1, 5, 5, 1)))
    k = constant(np.full((1, 1, 1, 1), 2.0))
    out = apply("conv2d", [img, k], stride=1, padding=0)
    assert np.allclose(out.data, 2.0 * img.data)


def test_backward_sum_and_mean():
    x = parameter(np.random.default_rng(1).normal(size=(3, 4)))
    backward(x.sum())
    assert np.allclose(x.grad, 1.0)
    y = parameter(np.random.default_rng(2).normal(size=(3, 4)))
    backward(y.mean())
    assert np.allclose(y.grad, 1.0 / 12.0)


def test_independent_tapes():
    x1 = parameter(2.0)
    x2 = parameter(2.0)
    backward(apply("mul", [x1, x1]))
    backward(apply("mul", [x2, constant(5.0)]))
    assert x1.grad == pytest.approx(4.0)
    assert x2.grad == pytest.approx(5.0)


def test_non_scalar_root_rejected():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x + 1.0)


def test_fanout_gradients_add():
    # node consumed by k ops receives the sum of k contributions
    x = parameter(1.5)
    y = x * x + x * 3.0 + x / 2.0
    backward(y)
    assert x.grad == pytest.approx(2 * 1.5 + 3.0 + 0.5)
    # against a manually split computation
    x1, x2, x3 = parameter(1.5), parameter(1.5), parameter(1.5)
    backward(x1 * x1)
    backward(x2 * 3.0)
    backward(x3 / 2.0)
    assert x.grad == pytest.approx(float(x1.grad + x2.grad + x3.grad))


def test_shape_error_names_op():
    a = parameter(np.ones((2, 3)))
    b = parameter(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="matmul"):
        apply("matmul", [a, b])
    with pytest.raises(ShapeError, match="add"):
        apply("add", [a, parameter(np.ones((3, 2)))])


def test_replay_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = parameter(rng.normal(size=(4, 4)).astype(np.float32))
        y = ((x.tanh() * 2.0 + x.sigmoid()).exp().sum())
        backward(y)
        return y.data.copy(), x.grad.copy()
    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


# -- grid_sample -------------------------------------------------------------

def test_grid_sample_pixel_center():
    m = parameter(np.arange(12.0).reshape(3, 4, 1))
    # (-1,-1) is the top-left pixel center; (1,1) the bottom-right
    coords = constant(np.array([[-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]))
    out = grid_sample(m, coords)
    assert np.allclose(out.data[:, 0], [0.0, 11.0, 8.0])


def test_grid_sample_midpoint():
    m = parameter(np.array([[[0.0], [1.0]]]))  # 1x2 map
    coords = constant(np.array([[0.0, -1.0]]))
    out = grid_sample(m, coords)
    assert out.data[0, 0] == pytest.approx(0.5)


def test_grid_sample_border_clamp():
    m = parameter(np.arange(4.0).reshape(2, 2, 1))
    coords = constant(np.array([[-3.0, -3.0], [5.0, 5.0]]))
    out = grid_sample(m, coords)
    assert np.allclose(out.data[:, 0], [0.0, 3.0])


def test_grid_sample_coord_gradient_matches_fd():
    # smooth 8x8 map, interior coords; central differences at 1e-4 relative
    with precision("float64"):
        rng = np.random.default_rng(3)
        ii, jj = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
        smooth = np.sin(ii / 3.0) + np.cos(jj / 2.5)
        m = constant(smooth[:, :, None])
        pts = rng.uniform(-0.8, 0.8, size=(6, 2))
        coords = parameter(pts)
        w = constant(rng.normal(size=(6, 1)))

        def f():
            return (grid_sample(m, coords) * w).sum()

        report = grad_check(f, {"coords": coords}, eps=1e-6)
        assert report.max_rel_error < 1e-4


def test_grid_sample_map_gradient():
    with precision("float64"):
        rng = np.random.default_rng(4)
        m = parameter(rng.uniform(size=(5, 5, 2)))
        coords = constant(rng.uniform(-0.9, 0.9, size=(7, 2)))
        w = constant(rng.normal(size=(7, 2)))

        def f():
            return (grid_sample(m, coords) * w).sum()

        assert grad_check(f, {"m": m}, eps=1e-6).max_rel_error < 1e-5


def test_grid_sample_batched():
    maps = parameter(np.stack([np.full((3, 3, 1), 1.0), np.full((3, 3, 1), 5.0)]))
    coords = constant(np.zeros((4, 2)))
    out = grid_sample(maps, coords, bidx=np.array([0, 1, 0, 1]))
    assert np.allclose(out.data[:, 0], [1.0, 5.0, 1.0, 5.0])
    backward(out.sum())
    assert maps.grad.sum() == pytest.approx(4.0)


# -- grad_check harness -------------------------------------------------------

def test_grad_check_square():
    with precision("float64"):
        x = parameter(3.0)

        def f():
            return x * x

        report = grad_check(f, {"x": x})
        assert report.max_rel_error < 1e-6
        assert report.params[0].analytic == pytest.approx(6.0)


def test_grad_check_flags_discontinuity():
    x = parameter(np.array([0.0, 1.0]))

    def f():
        # hard jump driven by the forward value: grad check must flag coord 0
        jump = 0.0 if x.data[0] <= 0 else 100.0
        return x.sum() + constant(jump)

    report = grad_check(f, {"x": x}, eps=1e-3)
    assert report.params[0].max_rel_error > 0.9
    assert report.params[0].worst_coord == (0,)


def test_grad_check_flags_nonfinite():
    x = parameter(np.array([1e-9]))

    def f():
        return x.log().sum()

    report = grad_check(f, {"x": x}, eps=1e-3)  # crosses zero: log(<0) is nan
    assert report.nonfinite and report.nonfinite[0][1] == (0,)


# -- every op kind matches finite differences ---------------------------------

def _unary(kind, **attrs):
    def build(t):
        return apply(kind, [t], **attrs)
    return build


def _binary(kind):
    def build(t, u):
        return apply(kind, [t, u])
    return build


UNARY_CASES = [
    ("negate", _unary("negate"), (-2.0, 2.0)),
    ("relu", _unary("relu"), (0.2, 2.0)),          # away from the kink
    ("tanh", _unary("tanh"), (-2.0, 2.0)),
    ("sigmoid", _unary("sigmoid"), (-3.0, 3.0)),
    ("exp", _unary("exp"), (-1.0, 1.0)),
    ("log", _unary("log"), (0.5, 3.0)),
    ("sqrt", _unary("sqrt"), (0.5, 3.0)),
    ("sin", _unary("sin"), (-2.0, 2.0)),
    ("cos", _unary("cos"), (-2.0, 2.0)),
    ("abs", _unary("abs"), (0.3, 2.0)),            # away from the kink
    ("clamp", _unary("clamp", lo=-0.4, hi=0.4), (-0.35, 0.35)),
]


@pytest.mark.parametrize("name,build,rng_range", UNARY_CASES)
@pytest.mark.parametrize("seed", range(10))
def test_unary_ops_match_fd(name, build, rng_range, seed):
    with precision("float64"):
        rng = np.random.default_rng(seed)
        x = parameter(rng.uniform(*rng_range, size=(3, 4)))
        w = constant(rng.normal(size=(3, 4)))

        def f():
            return (build(x) * w).sum()

        assert grad_check(f, {"x": x}, eps=1e-6).max_rel_error < 1e-3, name


BINARY_CASES = [
    ("add", _binary("add")), ("sub", _binary("sub")), ("mul", _binary("mul")),
    ("div", _binary("div")), ("maximum", _binary("maximum")),
    ("minimum", _binary("minimum")),
]


@pytest.mark.parametrize("name,build", BINARY_CASES)
@pytest.mark.parametrize("seed", range(10))
def test_binary_ops_match_fd(name, build, seed):
    with precision("float64"):
        rng = np.random.default_rng(100 + seed)
        a = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        # keep the two operands separated so max/min ties cannot occur
        b = parameter(rng.uniform(2.5, 4.0, size=(3, 4)))
        w = constant(rng.normal(size=(3, 4)))

        def f():
            return (build(a, b) * w).sum()

        report = grad_check(f, {"a": a, "b": b}, eps=1e-6)
        assert report.max_rel_error < 1e-3, name


@pytest.mark.parametrize("seed", range(10))
def test_structural_ops_match_fd(seed):
    with precision("float64"):
        rng = np.random.default_rng(200 + seed)
        x = parameter(rng.normal(size=(2, 6)))
        w1 = constant(rng.normal(size=(2, 3, 2)))
        w2 = constant(rng.normal(size=(4, 6)))
        other = constant(rng.normal(size=(2, 6)))

        def f():
            r = x.reshape(2, 3, 2) * w1
            c = apply("concat", [x, other], axis=0)
            s = x[0:1, 2:5]
            t = take(x.reshape(12), np.array([0, 3, 3, 7]))
            sc = scatter_add(t, np.array([0, 1, 1, 2]), 4)
            b = x.broadcast_to((3, 2, 6))
            return (r.sum() + (c * w2).sum() + s.sum()
                    + sc.sum() + b.mean() + x.transpose().sum())

        assert grad_check(f, {"x": x}, eps=1e-6).max_rel_error < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_matmul_conv_match_fd(seed):
    with precision("float64"):
        rng = np.random.default_rng(300 + seed)
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.normal(size=(4, 2)))
        img = parameter(rng.normal(size=(1, 6, 6, 2)))
        k = parameter(rng.normal(size=(3, 3, 2, 3)) * 0.5)

        def f():
            y = apply("matmul", [a, b])
            c = apply("conv2d", [img, k], stride=2, padding=1)
            return y.sum() + (c * c).sum()

        report = grad_check(f, {"a": a, "b": b, "img": img, "k": k}, eps=1e-6)
        assert report.max_rel_error < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_softmax_cross_entropy_matches_fd(seed):
    with precision("float64"):
        rng = np.random.default_rng(400 + seed)
        logits = parameter(rng.normal(size=(5, 7)))
        labels = rng.integers(0, 7, size=5)

        def f():
            return apply("softmax_cross_entropy", [logits], labels=labels).sum()

        assert grad_check(f, {"logits": logits}, eps=1e-6).max_rel_error < 1e-3


def test_softmax_cross_entropy_value():
    logits = constant(np.zeros((2, 42)))
    out = apply("softmax_cross_entropy", [logits], labels=np.array([0, 41]))
    assert np.allclose(out.data, np.log(42.0))


def test_broadcast_binary_grad():
    a = parameter(np.ones((3, 1)))
    b = parameter(np.ones((1, 4)))
    backward((a * b).sum())
    assert np.allclose(a.grad, 4.0)
    assert np.allclose(b.grad, 3.0)
