"""Training-dynamics probe: feature trajectories, moving speed, the
empirical tangent kernel, and feature movement versus FSSD.
"""

import csv
from dataclasses import dataclass

import numpy as np

from fssd import tensor as T
from fssd.models import forward_features
from fssd.tensor import Tensor


@dataclass
class Trajectory:
    sample_id: int
    tap: str
    steps: np.ndarray      # (n_steps,)
    features: np.ndarray   # (n_steps, d)

    def displacement(self):
        return float(np.linalg.norm(self.features[-1] - self.features[0]))

    def path_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.features, axis=0), axis=1)))


def _check_checkpoints(checkpoints):
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    cfg = checkpoints[0].config
    for c in checkpoints[1:]:
        if c.config != cfg:
            raise ValueError(f"checkpoint at step {c.step} was built from a different config")
    steps = np.array([c.step for c in checkpoints])
    if steps[0] != 0 or np.any(np.diff(steps) <= 0):
        raise ValueError(f"checkpoint steps must start at 0 and strictly increase, got {steps.tolist()}")
    return steps


def feature_trajectory(checkpoints, tap, x):
    """One Trajectory per row of ``x``, following ``tap`` across the snapshots."""
    steps = _check_checkpoints(checkpoints)
    x = np.asarray(x, dtype=np.float64)
    per_step = np.stack([forward_features(c.to_model(), x)[tap] for c in checkpoints])  # (steps, n, d)
    return [Trajectory(i, tap, steps, per_step[:, i, :]) for i in range(len(x))]


def cross_entropy_loss(model, params, batch):
    x, y = batch
    _, logits = model.forward(Tensor(x), params)
    return T.cross_entropy(logits, y)


def parameter_gradient(model, batch, loss_fn=cross_entropy_loss):
    params = model.param_tensors()
    loss = loss_fn(model, params, batch)
    grads = T.gradient(loss, list(params.values()))
    return {name: grads[t] for name, t in params.items()}


def moving_speed(model, train_batch, x, tap, loss_fn=cross_entropy_loss):
    """Norm of dF(x)/dt under gradient flow on ``train_batch``, per row of ``x``.

    The directional derivative of the tapped feature along -dL/dtheta is taken
    by central differences with step 1e-4 / max(1, ||g||).
    """
    g = parameter_gradient(model, train_batch, loss_fn)
    g_norm = float(np.sqrt(sum(np.sum(v * v) for v in g.values())))
    if not np.isfinite(g_norm):
        raise ValueError("parameter gradient is not finite")
    eta = 1e-4 / max(1.0, g_norm)
    x = np.asarray(x, dtype=np.float64)
    minus = {k: Tensor(v - eta * g[k]) for k, v in model.params.items()}
    plus = {k: Tensor(v + eta * g[k]) for k, v in model.params.items()}
    f_minus = model.forward(Tensor(x), minus)[0][tap].data
    f_plus = model.forward(Tensor(x), plus)[0][tap].data
    # moving along -g: (F(theta - eta g) - F(theta + eta g)) / (2 eta)
    return np.linalg.norm((f_minus - f_plus) / (2 * eta), axis=1)


def feature_jacobian(model, x, tap):
    """(d_k, n_params) Jacobian of the tapped feature of a single input."""
    params = model.param_tensors()
    names = list(params)
    feats, _ = model.forward(Tensor(np.asarray(x, dtype=np.float64)[None]), params)
    f = feats[tap]
    rows = []
    for i in range(f.shape[1]):
        gi = T.gradient(T.pick(f, [i]), [params[n] for n in names])
        rows.append(np.concatenate([gi[params[n]].ravel() for n in names]))
    return np.array(rows)


def empirical_ntk(model, x, x_prime, tap):
    """Trace of the feature tangent kernel: sum_i <dF_i(x)/dtheta, dF_i(x')/dtheta>."""
    return float(np.sum(feature_jacobian(model, x, tap) * feature_jacobian(model, x_prime, tap)))


def ntk_gram(model, xs, tap):
    jac = [feature_jacobian(model, x, tap) for x in xs]
    n = len(jac)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            K[i, j] = K[j, i] = np.sum(jac[i] * jac[j])
    return K


def movement_vs_fssd(checkpoints, fss, samples, tap):
    """Rows (sample, fssd, movement, |fssd - movement|) with features from the last snapshot.

    ``fss`` is either one vector or one row per sample.
    """
    _check_checkpoints(checkpoints)
    samples = np.asarray(samples, dtype=np.float64)
    f0 = forward_features(checkpoints[0].to_model(), samples)[tap]
    fT = forward_features(checkpoints[-1].to_model(), samples)[tap]
    fssd = np.linalg.norm(fT - np.asarray(fss, dtype=np.float64), axis=1)
    movement = np.linalg.norm(fT - f0, axis=1)
    return [(i, float(a), float(b), float(abs(a - b))) for i, (a, b) in enumerate(zip(fssd, movement))]


def pca_2d(features):
    """Project rows onto their first two principal components (sign fixed by the largest loading)."""
    X = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    proj = X @ (comps * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def write_trajectories_csv(trajectories, path, population=None):
    steps = trajectories[0].steps
    stacked = np.concatenate([t.features for t in trajectories])  # samples-major
    proj = pca_2d(stacked).reshape(len(trajectories), len(steps), 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sample", "population", "pc1", "pc2"])
        for s_idx, step in enumerate(steps):
            for t_idx, traj in enumerate(trajectories):
                pop = population[t_idx] if population is not None else ""
                w.writerow([int(step), traj.sample_id, pop, repr(float(proj[t_idx, s_idx, 0])),
                            repr(float(proj[t_idx, s_idx, 1]))])


def write_rows_csv(header, rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
