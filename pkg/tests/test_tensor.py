import numpy as np
import pytest

from fssd import tensor as T
from fssd.tensor import ShapeError, Tensor
from helpers import PRIMITIVES, check_primitive


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    worst = 0.0
    for _ in range(50):
        op, arrays = PRIMITIVES[name](rng)
        worst = max(worst, check_primitive(op, arrays, rng))
    assert worst <= 1.0, f"{name}: error/tolerance ratio {worst:.3g}"


def test_matmul_identity(rng):
    A = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_relu_definition():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 2))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 2).data, [[[[5.0, 7.0], [13.0, 15.0]]]])


def test_l2_norm_examples(rng):
    assert T.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    for n in (1, 4, 17):
        assert T.l2_norm(Tensor(np.zeros(n))).item() == 0.0
    v = rng.standard_normal(10)
    oracle = sum(float(a) ** 2 for a in v) ** 0.5
    assert abs(T.l2_norm(Tensor(v)).item() - oracle) <= 1e-12 * oracle


def test_l2_norm_gradient_at_zero_is_zero():
    v = Tensor(np.zeros(3), requires_grad=True)
    np.testing.assert_array_equal(T.gradient(T.l2_norm(v), [v])[v], np.zeros(3))


def test_gradient_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    g = T.gradient(T.sum(T.mul(x, x)), [x])[x]
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_input_gradient_of_linear_map(rng):
    w = rng.standard_normal(5)
    x = Tensor(rng.standard_normal((1, 5)), requires_grad=True)
    out = T.sum(T.matmul(x, Tensor(w[:, None])))
    np.testing.assert_array_equal(T.gradient(out, [x])[x], w[None, :])


def test_small_net_gradients_match_finite_differences(rng):
    # five parameters: a 2x2 weight and one shared bias
    x = rng.standard_normal((3, 2))
    labels = np.array([0, 1, 1])

    def composite(w1, b):
        h = T.relu(T.matmul(Tensor(x), w1))
        z = T.add_bias(h, T.reshape(T.matmul(b, Tensor(np.ones((1, 2)))), (2,)))
        return T.cross_entropy(z, labels)

    for _ in range(10):
        w1 = rng.standard_normal((2, 2))
        b = rng.standard_normal((1, 1))
        assert check_primitive(composite, [w1, b], rng) <= 1.0


def test_gradient_linear_in_seed(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    out = T.l2_norm(T.relu(x))
    g1 = T.gradient(out, [x])[x]
    g3 = T.gradient(out, [x], seed=3.0)[x]
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-15)


def test_unused_leaf_gets_zero_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([[5.0]], requires_grad=True)
    g = T.gradient(T.sum(a), [a, b])
    np.testing.assert_array_equal(g[b], np.zeros((1, 1)))


def test_gradient_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.gradient(T.relu(x), [x])
    y = T.relu(x)
    with pytest.raises(ValueError, match="not a differentiable leaf"):
        T.gradient(T.sum(y), [y])
    with pytest.raises(ValueError, match="not a differentiable leaf"):
        T.gradient(T.sum(x), [Tensor([1.0])])


@pytest.mark.parametrize("op, a, b", [
    (T.add, (2, 3), (3, 2)),
    (T.matmul, (2, 3), (2, 3)),
    (T.mul, (4,), (5,)),
])
def test_shape_mismatch_names_both_shapes(op, a, b):
    with pytest.raises(ShapeError) as err:
        op(Tensor(np.ones(a)), Tensor(np.ones(b)))
    assert str(a) in str(err.value) and str(b) in str(err.value)


def test_graph_is_topological_and_visits_once(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = T.relu(x)
    out = T.sum(T.mul(h, h))  # h used twice
    graph = T.trace(out)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    assert len(pos) == len(graph.nodes)
    for node in graph.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert graph.leaves == [x]


def test_forward_does_not_touch_leaves(rng):
    data = rng.standard_normal((3, 3))
    x = Tensor(data, requires_grad=True)
    T.gradient(T.sum(T.softmax(T.matmul(x, x))), [x])
    np.testing.assert_array_equal(x.data, data)
    assert not x.data.flags.writeable


def test_backward_accumulates(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    T.sum(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_finite_outputs_on_extreme_logits():
    z = Tensor([[1000.0, -1000.0, 0.0]])
    assert np.all(np.isfinite(T.log_softmax(z).data))
    assert np.all(np.isfinite(T.softmax(z).data))
    assert np.isfinite(T.cross_entropy(z, [1]).item())
