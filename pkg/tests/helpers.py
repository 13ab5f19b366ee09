"""Oracles shared by several test modules."""

import math

import numpy as np

from fssd import tensor as T
from fssd.models import FeatureModel
from fssd.tensor import Tensor


def numeric_grad(f, arrays, index, h=1e-6):
    """Central finite difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][i] += h
        minus[index][i] -= h
        out[i] = (f(*plus) - f(*minus)) / (2 * h)
    return out


def check_primitive(op, arrays, rng, rel=1e-3, floor=1e-6):
    """Compare autodiff and finite differences for a random projection of ``op``'s output.

    Returns the worst ratio of error to tolerance over all inputs; <= 1 passes.
    """
    probe = {}

    def scalar_numpy(*arrs):
        out = op(*[Tensor(a) for a in arrs]).data
        if "r" not in probe:
            probe["r"] = rng.standard_normal(out.shape)
        return float(np.sum(out * probe["r"]))

    scalar_numpy(*arrays)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    loss = T.sum(T.mul(out, Tensor(probe["r"])))
    grads = T.gradient(loss, leaves)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        num = numeric_grad(scalar_numpy, arrays, k)
        err = np.abs(grads[leaf] - num)
        tol = np.maximum(rel * np.abs(num), floor)
        worst = max(worst, float(np.max(err / tol)))
    return worst


def brute_auroc(pos, neg):
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def sweep_thresholds(pos, neg):
    """(threshold, tp, fp) for every distinct score, highest first, by explicit counting."""
    out = []
    for t in sorted(set(pos) | set(neg), reverse=True):
        out.append((t, sum(p >= t for p in pos), sum(q >= t for q in neg)))
    return out


def brute_auprc(pos, neg):
    terms, prev_recall = [], 0.0
    for _, tp, fp in sweep_thresholds(pos, neg):
        recall = tp / len(pos)
        terms.append((recall - prev_recall) * (tp / (tp + fp)))
        prev_recall = recall
    return math.fsum(terms)


def brute_fpr80(pos, neg, target=0.8):
    for _, tp, fp in sweep_thresholds(pos, neg):
        if tp >= target * len(pos) - 1e-12:
            return fp / len(neg)
    raise AssertionError("unreachable")


def zero_information_scores(rng, n=100):
    """Two-column scores whose second column carries no label information.

    Every row appears once with +v and once with -v in the second column, so
    the likelihood is symmetric under flipping that column's weight and the
    regularised optimum puts it at zero.
    """
    a, b, v = rng.normal(1, 1, n), rng.normal(-1, 1, n), rng.normal(0, 1, n)
    s_in = np.r_[np.c_[a, v], np.c_[a, -v]]
    s_ood = np.r_[np.c_[b, v], np.c_[b, -v]]
    return s_in, s_ood


class IdentityModel(FeatureModel):
    """Feature extractor whose single tap is the input itself; logits are the input too."""

    def __init__(self, dim, tap_names=("id",)):
        self.params = {}
        self.tap_names = list(tap_names)
        self.input_shape = (dim,)
        self.num_classes = dim

    def forward(self, x, params=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        return {t: x for t in self.tap_names}, x


class ConstantModel(FeatureModel):
    def __init__(self, value, dim=3):
        self.params = {}
        self.tap_names = ["c"]
        self.input_shape = (dim,)
        self.value = np.asarray(value, dtype=np.float64)

    def forward(self, x, params=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        f = Tensor(np.tile(self.value, (x.shape[0], 1)))
        return {"c": f}, f


class LinearModel(FeatureModel):
    """F(x) = x W with parameters W (d_in, d_out); one tap and logits equal to the feature."""

    def __init__(self, W):
        self.params = {"W": np.asarray(W, dtype=np.float64)}
        self.tap_names = ["lin"]
        self.input_shape = (self.params["W"].shape[0],)
        self.num_classes = self.params["W"].shape[1]

    def forward(self, x, params=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        f = T.matmul(x, p["W"])
        return {"lin": f}, f


def stand_in_images(n_shapes, n_strokes, rng):
    """28x28 stand-ins for two image populations: filled rectangles and thin strokes."""
    out = np.zeros((n_shapes + n_strokes, 1, 28, 28))
    for i in range(n_shapes):
        r0, c0 = rng.integers(2, 10, 2)
        r1, c1 = rng.integers(18, 26, 2)
        out[i, 0, r0:r1, c0:c1] = rng.uniform(0.4, 1.0)
    for i in range(n_shapes, n_shapes + n_strokes):
        for _ in range(3):
            r, c = rng.integers(4, 24, 2)
            if rng.random() < 0.5:
                out[i, 0, r, max(c - 8, 0):c + 8] = 1.0
            else:
                out[i, 0, max(r - 8, 0):r + 8, c] = 1.0
    return out


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)


def _conv_case(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 4))
    x = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((o, c, k, k))
    return (lambda a, b: T.conv2d(a, b, stride=stride, padding=pad)), [x, w]


def _pool_case(rng):
    k = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    h = int(rng.integers(k, k + 4))
    x = rng.permutation(np.linspace(-1, 1, 2 * 2 * h * h)).reshape(2, 2, h, h)
    return (lambda a: T.maxpool2d(a, k, stride)), [x]


def _pick_case(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    idx = rng.integers(0, c, size=n)
    return (lambda a: T.pick(a, idx)), [rng.standard_normal((n, c))]


def _ce_case(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=n)
    return (lambda a: T.cross_entropy(a, labels)), [3 * rng.standard_normal((n, c))]


def _shape(rng, ndim=2):
    return tuple(int(v) for v in rng.integers(1, 5, size=ndim))


def _binary(op, ndim=2):
    def case(rng):
        s = _shape(rng, ndim)
        return op, [rng.standard_normal(s), rng.standard_normal(s)]
    return case


def _unary(op, ndim=2, scale=1.0):
    return lambda rng: (op, [scale * rng.standard_normal(_shape(rng, ndim))])


def _matmul_case(rng):
    a, b, c = _shape(rng, 3)
    return T.matmul, [rng.standard_normal((a, b)), rng.standard_normal((b, c))]


def _bias_case(ndim):
    def case(rng):
        s = _shape(rng, ndim)
        return T.add_bias, [rng.standard_normal(s), rng.standard_normal(s[1])]
    return case


def _scale_case(rng):
    c = float(rng.normal())
    return (lambda a: T.scale(a, c)), [rng.standard_normal(_shape(rng))]


def _axis_case(reduce, ndim):
    def case(rng):
        ax = int(rng.integers(0, ndim))
        return (lambda a: reduce(a, axis=ax)), [rng.standard_normal(_shape(rng, ndim))]
    return case


# name -> rng -> (op, list of input arrays)
PRIMITIVES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul, 3),
    "scale": _scale_case,
    "relu": lambda rng: (T.relu, [_away_from_zero(rng, _shape(rng, 3))]),
    "sum": _unary(T.sum, 3),
    "sum_axis": _axis_case(T.sum, 3),
    "mean_axis": _axis_case(T.mean, 2),
    "l2_norm": _unary(T.l2_norm),
    "l2_norm_rows": _axis_case(T.l2_norm, 2),
    "global_avg_pool": _unary(T.global_avg_pool, 4),
    "reshape": lambda rng: ((lambda a: T.reshape(a, (-1,))), [rng.standard_normal(_shape(rng, 3))]),
    "flatten": _unary(T.flatten, 4),
    "pick": _pick_case,
    "matmul": _matmul_case,
    "add_bias": _bias_case(2),
    "add_bias_4d": _bias_case(4),
    "conv2d": _conv_case,
    "maxpool2d": _pool_case,
    "log_softmax": _unary(T.log_softmax, 2, 2.0),
    "softmax": _unary(T.softmax, 2, 2.0),
    "cross_entropy": _ce_case,
}
