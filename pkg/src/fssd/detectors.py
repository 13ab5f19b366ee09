"""OoD detectors: FSSD (with layer ensemble and input pre-processing) and the
Base / ODIN / Mahalanobis baselines.

Every detector maps a batch of inputs to one score per sample, larger
meaning more in-distribution.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from fssd import tensor as T
from fssd.checkpoint import CheckpointError, decode_arrays, decode_kv, encode_arrays, encode_kv, read_container, write_container
from fssd.data import uniform_noise_batch
from fssd.ensemble import C_GRID, fit_ensemble_weights
from fssd.metrics import auroc
from fssd.models import forward_features, forward_logits, tap_dims
from fssd.tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

EPS_GRID = tuple(round(0.01 * i, 2) for i in range(21))
TEMPERATURE_GRID = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_NOISE_COUNT = 1000
BATCH = 256


class NotFittedError(RuntimeError):
    pass


# ---------------------------------------------------------------- shared helpers

def _input_gradient(model, x, score_fn):
    """d(sum of per-sample scores)/dx; samples do not interact, so row i is d score_i / d x_i."""
    out = np.empty_like(x)
    for start in range(0, len(x), BATCH):
        xt = Tensor(x[start:start + BATCH], requires_grad=True)
        feats, logits = model.forward(xt)
        total = T.sum(score_fn(feats, logits))
        out[start:start + BATCH] = T.gradient(total, [xt])[xt]
    return out


def _step(x, direction, epsilon):
    if epsilon == 0:
        return x.copy()
    return np.clip(x + epsilon * direction, 0.0, 1.0)


def _fssd_tensor(feats, tap, fss):
    f = feats[tap]
    if f.shape[1] != fss.shape[0]:
        raise ShapeError(f"tap {tap}: feature dimension {f.shape[1]} does not match FSS dimension {fss.shape[0]}")
    return T.l2_norm(T.add_bias(f, -fss), axis=1)


def _as_batch(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- FSSD

def estimate_fss(model, S=DEFAULT_NOISE_COUNT, input_shape=None, seed=0):
    """Mean feature of ``S`` uniform-noise inputs at every tap (one shared noise batch)."""
    noise = uniform_noise_batch(S, input_shape or model.input_shape, seed)
    return {tap: f.mean(axis=0) for tap, f in forward_features(model, noise).items()}


def fssd_layer(model, tap, x, fss):
    """Per-sample Euclidean distance between the tapped feature and the FSS."""
    fss = np.asarray(fss, dtype=np.float64)
    f = forward_features(model, _as_batch(x))[tap]
    if f.shape[1] != fss.shape[0]:
        raise ShapeError(f"tap {tap}: feature dimension {f.shape[1]} does not match FSS dimension {fss.shape[0]}")
    return np.linalg.norm(f - fss, axis=1)


def fssd_input_gradient(model, x, tap, fss):
    """Row i is d FSSD(x_i) / d x_i at ``tap``."""
    fss = np.asarray(fss, dtype=np.float64)
    return _input_gradient(model, _as_batch(x), lambda feats, _: _fssd_tensor(feats, tap, fss))


@dataclass
class FSSDetector:
    taps: list
    fss: dict
    alpha: np.ndarray = None
    bias: float = 0.0
    epsilon: float = 0.0
    noise_count: int = DEFAULT_NOISE_COUNT
    mode: str = "layer"  # "layer": perturb per tap; "ensemble": one perturbation from the weighted score
    val_mean: float = 0.0
    val_std: float = 1.0
    name: str = "FSSD"

    def __post_init__(self):
        if self.mode not in ("layer", "ensemble"):
            raise ValueError(f"mode must be 'layer' or 'ensemble', got {self.mode!r}")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64)
            if self.alpha.shape != (len(self.taps),):
                raise ValueError(f"alpha has {self.alpha.size} entries for {len(self.taps)} taps")

    @property
    def weights(self):
        if self.alpha is None:
            return np.full(len(self.taps), 1.0 / len(self.taps))
        return self.alpha

    def check_fitted(self, model=None):
        if not self.fss or any(t not in self.fss for t in self.taps):
            raise NotFittedError("FSS vectors have not been estimated for every tap")
        if model is not None:
            missing = [t for t in self.taps if t not in model.tap_names]
            if missing:
                raise ShapeError(f"model has no taps {missing}")
            dims = tap_dims(model) if hasattr(model, "config") else {}
            for t in self.taps:
                if t in dims and self.fss[t].shape != (dims[t],):
                    raise ShapeError(f"tap {t}: FSS has shape {self.fss[t].shape}, model features have {dims[t]} dims")

    def layer_gradient_sign(self, model, x, tap):
        return np.sign(fssd_input_gradient(model, x, tap, self.fss[tap]))

    def ensemble_gradient_sign(self, model, x):
        w = self.weights

        def score(feats, _):
            total = None
            for a, tap in zip(w, self.taps):
                term = T.scale(_fssd_tensor(feats, tap, self.fss[tap]), a)
                total = term if total is None else T.add(total, term)
            return total

        return np.sign(_input_gradient(model, x, score))

    def layer_scores(self, model, x, perturb=True, epsilon=None):
        """(n, K) matrix of per-tap FSSDs after input pre-processing."""
        self.check_fitted(model)
        x = _as_batch(x)
        eps = self.epsilon if epsilon is None else epsilon
        if not perturb:
            feats = forward_features(model, x)
            return np.stack([np.linalg.norm(feats[t] - self.fss[t], axis=1) for t in self.taps], axis=1)
        cols = []
        shared = _step(x, self.ensemble_gradient_sign(model, x), eps) if self.mode == "ensemble" and eps else None
        for tap in self.taps:
            if self.mode == "layer":
                xt = _step(x, self.layer_gradient_sign(model, x, tap), eps) if eps else x
            else:
                xt = shared if shared is not None else x
            f = forward_features(model, xt)[tap]
            cols.append(np.linalg.norm(f - self.fss[tap], axis=1))
        return np.stack(cols, axis=1)

    def score(self, model, x, perturb=True):
        return self.layer_scores(model, x, perturb=perturb) @ self.weights + self.bias

    def to_state(self):
        kv = {"kind": "fssd", "name": self.name, "taps": ",".join(self.taps), "bias": repr(self.bias),
              "epsilon": repr(self.epsilon), "noise_count": str(self.noise_count), "mode": self.mode,
              "val_mean": repr(self.val_mean), "val_std": repr(self.val_std),
              "has_alpha": "1" if self.alpha is not None else "0"}
        arrays = {f"fss/{t}": self.fss[t] for t in self.taps}
        if self.alpha is not None:
            arrays["alpha"] = self.alpha
        return kv, arrays

    @classmethod
    def from_state(cls, kv, arrays):
        taps = kv["taps"].split(",")
        return cls(taps=taps, fss={t: arrays[f"fss/{t}"] for t in taps},
                   alpha=arrays["alpha"] if kv["has_alpha"] == "1" else None, bias=float(kv["bias"]),
                   epsilon=float(kv["epsilon"]), noise_count=int(kv["noise_count"]), mode=kv["mode"],
                   val_mean=float(kv["val_mean"]), val_std=float(kv["val_std"]), name=kv["name"])


def perturb_input(model, detector, x, epsilon, tap=None):
    """x + epsilon * sign(grad_x FSSD), clipped to [0, 1].

    With ``tap`` the gradient is of that layer's FSSD; otherwise of the
    weighted ensemble score.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    detector.check_fitted(model)
    x = _as_batch(x)
    if epsilon == 0:
        return x.copy()
    sign = detector.layer_gradient_sign(model, x, tap) if tap is not None else detector.ensemble_gradient_sign(model, x)
    return _step(x, sign, epsilon)


def fssd_ensem_score(detector, model, x, perturb=True):
    return detector.score(model, x, perturb=perturb)


def _select(candidates):
    """Pick the candidate with the best validation AUROC; ties keep the earliest (smallest epsilon)."""
    best = max(range(len(candidates)), key=lambda i: (candidates[i][0], -i))
    return candidates[best]


def fit_fssd(model, val_in, val_ood, eps_grid=EPS_GRID, noise_count=DEFAULT_NOISE_COUNT, seed=0,
             mode="layer", c_grid=C_GRID, taps=None):
    """Estimate the FSS, then choose epsilon and the layer weights on validation data."""
    taps = list(taps or model.tap_names)
    fss = estimate_fss(model, noise_count, seed=seed)
    det = FSSDetector(taps=taps, fss={t: fss[t] for t in taps}, noise_count=noise_count, mode=mode)
    xi, xo = _as_batch(val_in), _as_batch(val_ood)
    if mode == "layer":
        signs = {t: (det.layer_gradient_sign(model, xi, t), det.layer_gradient_sign(model, xo, t)) for t in taps}
    else:
        signs = None
    candidates = []
    for eps in eps_grid:
        if mode == "layer":
            def cols(x, side):
                return np.stack([
                    np.linalg.norm(forward_features(model, _step(x, signs[t][side], eps))[t] - det.fss[t], axis=1)
                    for t in taps], axis=1)
            S_in, S_ood = cols(xi, 0), cols(xo, 1)
        else:
            # the shared perturbation follows the uniformly weighted score while alpha is unknown
            det.alpha, det.epsilon = None, eps
            S_in, S_ood = det.layer_scores(model, xi), det.layer_scores(model, xo)
        alpha, bias = fit_ensemble_weights(S_in, S_ood, c_grid=c_grid, seed=seed)
        candidates.append((auroc(S_in @ alpha, S_ood @ alpha), eps, alpha, bias, S_in, S_ood))
    val_auc, eps, alpha, bias, S_in, S_ood = _select(candidates)
    det.epsilon, det.alpha, det.bias = float(eps), alpha, bias
    val = np.r_[S_in @ alpha + bias, S_ood @ alpha + bias]
    det.val_mean, det.val_std = float(val.mean()), float(val.std() or 1.0)
    log.info("FSSD: epsilon=%.2f alpha=%s val AUROC=%.4f", eps, np.round(alpha, 4), val_auc)
    return det


# ---------------------------------------------------------------- Base / ODIN

def _max_softmax(logits, temperature=1.0):
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).max(axis=1)


def base_score(model, x):
    return _max_softmax(forward_logits(model, _as_batch(x)))


def odin_gradient_sign(model, x, temperature):
    def score(_, logits):
        # argmax is held fixed; sign(grad log p) == sign(grad p)
        idx = np.argmax(logits.data, axis=1)
        return T.pick(T.log_softmax(T.scale(logits, 1.0 / temperature)), idx)

    return np.sign(_input_gradient(model, x, score))


def odin_score(model, x, temperature=1000.0, epsilon=0.0):
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    x = _as_batch(x)
    xt = _step(x, odin_gradient_sign(model, x, temperature), epsilon) if epsilon else x
    return _max_softmax(forward_logits(model, xt), temperature)


@dataclass
class BaseDetector:
    name: str = "Base"

    def score(self, model, x):
        return base_score(model, x)

    def to_state(self):
        return {"kind": "base", "name": self.name}, {}

    @classmethod
    def from_state(cls, kv, arrays):
        return cls(name=kv["name"])


@dataclass
class OdinDetector:
    temperature: float = 1000.0
    epsilon: float = 0.0
    name: str = "ODIN"

    def score(self, model, x):
        return odin_score(model, x, self.temperature, self.epsilon)

    def to_state(self):
        return {"kind": "odin", "name": self.name, "temperature": repr(self.temperature),
                "epsilon": repr(self.epsilon)}, {}

    @classmethod
    def from_state(cls, kv, arrays):
        return cls(float(kv["temperature"]), float(kv["epsilon"]), kv["name"])


def fit_odin(model, val_in, val_ood, temperatures=TEMPERATURE_GRID, eps_grid=EPS_GRID):
    xi, xo = _as_batch(val_in), _as_batch(val_ood)
    candidates = []
    for temp in temperatures:
        si, so = odin_gradient_sign(model, xi, temp), odin_gradient_sign(model, xo, temp)
        for eps in eps_grid:
            a = auroc(_max_softmax(forward_logits(model, _step(xi, si, eps)), temp),
                      _max_softmax(forward_logits(model, _step(xo, so, eps)), temp))
            candidates.append((a, temp, eps))
    a, temp, eps = _select(candidates)
    log.info("ODIN: T=%g epsilon=%.2f val AUROC=%.4f", temp, eps, a)
    return OdinDetector(temperature=float(temp), epsilon=float(eps))


# ---------------------------------------------------------------- Mahalanobis

@dataclass
class MahaDetector:
    taps: list
    class_means: dict
    precision: dict
    alpha: np.ndarray = None
    bias: float = 0.0
    epsilon: float = 0.0
    name: str = "Maha"
    jitter: dict = field(default_factory=dict)

    @property
    def weights(self):
        return np.full(len(self.taps), 1.0 / len(self.taps)) if self.alpha is None else self.alpha

    def _layer_tensor(self, feats, tap):
        f = feats[tap].data
        mu, P = self.class_means[tap], self.precision[tap]
        nearest = np.argmin(_sq_mahalanobis(f, mu, P), axis=1)
        d = T.sub(feats[tap], Tensor(mu[nearest]))
        return T.scale(T.sum(T.mul(T.matmul(d, Tensor(P)), d), axis=1), -1.0)

    def layer_gradient_sign(self, model, x, tap):
        return np.sign(_input_gradient(model, x, lambda feats, _: self._layer_tensor(feats, tap)))

    def layer_scores(self, model, x, perturb=True, epsilon=None):
        x = _as_batch(x)
        eps = self.epsilon if epsilon is None else epsilon
        cols = []
        base_feats = None
        for tap in self.taps:
            if perturb and eps:
                f = forward_features(model, _step(x, self.layer_gradient_sign(model, x, tap), eps))[tap]
            else:
                if base_feats is None:
                    base_feats = forward_features(model, x)
                f = base_feats[tap]
            cols.append(maha_layer_score(f, self.class_means[tap], self.precision[tap]))
        return np.stack(cols, axis=1)

    def score(self, model, x, perturb=True):
        return self.layer_scores(model, x, perturb=perturb) @ self.weights + self.bias

    def to_state(self):
        kv = {"kind": "maha", "name": self.name, "taps": ",".join(self.taps), "bias": repr(self.bias),
              "epsilon": repr(self.epsilon), "has_alpha": "1" if self.alpha is not None else "0"}
        arrays = {}
        for t in self.taps:
            arrays[f"mean/{t}"] = self.class_means[t]
            arrays[f"precision/{t}"] = self.precision[t]
        if self.alpha is not None:
            arrays["alpha"] = self.alpha
        return kv, arrays

    @classmethod
    def from_state(cls, kv, arrays):
        taps = kv["taps"].split(",")
        return cls(taps=taps, class_means={t: arrays[f"mean/{t}"] for t in taps},
                   precision={t: arrays[f"precision/{t}"] for t in taps},
                   alpha=arrays["alpha"] if kv["has_alpha"] == "1" else None,
                   bias=float(kv["bias"]), epsilon=float(kv["epsilon"]), name=kv["name"])


def _sq_mahalanobis(f, means, precision):
    """(n, C) squared Mahalanobis distances of feature rows to every class mean."""
    d = f[:, None, :] - means[None, :, :]
    return np.einsum("ncd,de,nce->nc", d, precision, d)


def maha_layer_score(f, means, precision):
    return -np.min(_sq_mahalanobis(np.atleast_2d(f), np.atleast_2d(means), precision), axis=1)


def tied_covariance(features, labels, num_classes=None):
    """Class means and the pooled within-class covariance (divided by the total count)."""
    classes = np.unique(labels) if num_classes is None else np.arange(num_classes)
    means = []
    centered = np.empty_like(features)
    for c in classes:
        m = labels == c
        if m.sum() < 2:
            raise ValueError(f"class {c} has {int(m.sum())} samples; need at least 2")
        means.append(features[m].mean(axis=0))
        centered[m] = features[m] - means[-1]
    return np.array(means), centered.T @ centered / len(features)


def invert_covariance(cov, jitter=1e-6, max_jitter=1e-2):
    d = cov.shape[0]
    while jitter <= max_jitter * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10
            continue
        Linv = np.linalg.solve(L, np.eye(d))
        P = Linv.T @ Linv
        return 0.5 * (P + P.T), jitter
    raise np.linalg.LinAlgError(f"covariance is singular even with jitter {max_jitter}")


def maha_fit(model, train_data, taps=None, jitter=1e-6):
    taps = list(taps or model.tap_names)
    feats = forward_features(model, train_data.inputs)
    means, prec, used = {}, {}, {}
    for t in taps:
        mu, cov = tied_covariance(feats[t], train_data.labels, model.num_classes)
        means[t] = mu
        prec[t], used[t] = invert_covariance(cov, jitter)
    return MahaDetector(taps=taps, class_means=means, precision=prec, jitter=used)


def maha_score(detector, model, x, perturb=True):
    return detector.score(model, x, perturb=perturb)


def fit_maha(model, train_data, val_in, val_ood, eps_grid=EPS_GRID, c_grid=C_GRID, seed=0, taps=None):
    det = maha_fit(model, train_data, taps)
    xi, xo = _as_batch(val_in), _as_batch(val_ood)
    signs = {t: (det.layer_gradient_sign(model, xi, t), det.layer_gradient_sign(model, xo, t)) for t in det.taps}
    candidates = []
    for eps in eps_grid:
        def cols(x, side):
            return np.stack([
                maha_layer_score(forward_features(model, _step(x, signs[t][side], eps))[t],
                                 det.class_means[t], det.precision[t])
                for t in det.taps], axis=1)
        S_in, S_ood = cols(xi, 0), cols(xo, 1)
        alpha, bias = fit_ensemble_weights(S_in, S_ood, c_grid=c_grid, seed=seed)
        candidates.append((auroc(S_in @ alpha, S_ood @ alpha), eps, alpha, bias))
    a, eps, alpha, bias = _select(candidates)
    det.epsilon, det.alpha, det.bias = float(eps), alpha, bias
    log.info("Maha: epsilon=%.2f val AUROC=%.4f", eps, a)
    return det


# ---------------------------------------------------------------- network ensembles

def multi_net_score(members, x):
    """Mean over (FSSDetector, model) pairs of validation-standardised FSSD-Ensem scores."""
    if not members:
        raise ValueError("multi_net_score needs at least one (detector, model) pair")
    total = 0.0
    for det, model in members:
        total = total + (det.score(model, x) - det.val_mean) / det.val_std
    return total / len(members)


# ---------------------------------------------------------------- persistence

_KINDS = {"fssd": FSSDetector, "maha": MahaDetector, "odin": OdinDetector, "base": BaseDetector}


def save_detectors(path, detectors):
    sections = []
    for det in detectors:
        kv, arrays = det.to_state()
        kv_blob = encode_kv(kv)
        sections.append(("DETC", len(kv_blob).to_bytes(4, "little") + kv_blob + encode_arrays(arrays)))
    write_container(path, sections)


def load_detectors(path):
    out = []
    for tag, payload in read_container(path):
        if tag != "DETC":
            continue
        n = int.from_bytes(payload[:4], "little")
        if len(payload) < 4 + n:
            raise CheckpointError(f"{path}: DETC section of {len(payload)} bytes is shorter than its header says")
        kv = decode_kv(payload[4:4 + n])
        if kv.get("kind") not in _KINDS:
            raise CheckpointError(f"{path}: unknown detector kind {kv.get('kind')!r}")
        arrays = decode_arrays(payload[4 + n:])
        out.append(_KINDS[kv["kind"]].from_state(kv, arrays))
    return out


def write_scores_csv(path, rows):
    """rows: iterable of (sample_id, method, layer, score)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "method", "layer", "score"])
        for sid, method, layer, score in rows:
            w.writerow([sid, method, layer, repr(float(score))])
