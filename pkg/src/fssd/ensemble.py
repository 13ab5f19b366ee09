"""Layer-ensemble weights from L2-regularised logistic regression.

In-distribution rows are the positive class. Columns are standardised
before fitting and the weights are mapped back to raw-score coordinates,
so ``scores @ alpha + bias`` is the fitted log-odds.
"""

import warnings

import numpy as np

C_GRID = (0.01, 0.1, 1.0, 10.0)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def fit_logistic(X, y, C, tol=1e-12, max_iter=100):
    """Newton's method on sum(logloss) + ||w||^2 / (2C); the intercept is unpenalised.

    Returns (w, b).
    """
    n, k = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(k + 1)
    reg = np.r_[np.full(k, 1.0 / C), 0.0]

    def objective(t):
        z = A @ t
        return float(np.sum(_log1pexp(z) - y * z) + 0.5 * np.sum(reg * t * t))

    f = objective(theta)
    for _ in range(max_iter):
        p = _sigmoid(A @ theta)
        grad = A.T @ (p - y) + reg * theta
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(reg)
        H[-1, -1] += 1e-12
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f + 1e-4 * t * -(grad @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f_old, f = cand, f, fc
        if np.max(np.abs(t * step)) < tol or abs(f_old - f) <= tol * max(1.0, abs(f)):
            break
    return theta[:-1], float(theta[-1])


def _stratified_folds(y, n_folds, rng):
    folds = np.empty(len(y), dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


def _mean_logloss(X, y, w, b):
    z = X @ w + b
    return float(np.mean(_log1pexp(z) - y * z))


def fit_ensemble_weights(val_scores_in, val_scores_ood, c_grid=C_GRID, n_folds=5, seed=0):
    """Fit (alpha, bias) on per-layer validation scores.

    The L2 strength is chosen by ``n_folds``-fold cross-validated log-loss
    over ``c_grid`` (inverse regularisation strengths), then the model is
    refit on all rows. Zero-variance columns get weight 0.
    """
    S_in = np.atleast_2d(np.asarray(val_scores_in, dtype=np.float64))
    S_ood = np.atleast_2d(np.asarray(val_scores_ood, dtype=np.float64))
    if S_in.ndim != 2 or S_in.shape[0] == 0 or S_ood.shape[0] == 0 or S_in.shape[1] != S_ood.shape[1]:
        raise ValueError(f"score matrices must be nonempty with equal column counts, got {S_in.shape} and {S_ood.shape}")
    X = np.vstack([S_in, S_ood])
    y = np.r_[np.ones(len(S_in)), np.zeros(len(S_ood))]
    k = X.shape[1]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    if not live.all():
        warnings.warn(f"columns {np.flatnonzero(~live).tolist()} have zero variance; their weights are set to 0",
                      stacklevel=2)
    alpha = np.zeros(k)
    if not live.any():
        return alpha, 0.0
    Z = (X[:, live] - mu[live]) / sd[live]

    folds = n_folds if min(len(S_in), len(S_ood)) >= n_folds else 0
    best_c = c_grid[-1]
    if folds and len(c_grid) > 1:
        fold_of = _stratified_folds(y, n_folds, np.random.default_rng(seed))
        losses = []
        for C in c_grid:
            total = 0.0
            for f in range(n_folds):
                tr, te = fold_of != f, fold_of == f
                w, b = fit_logistic(Z[tr], y[tr], C)
                total += _mean_logloss(Z[te], y[te], w, b)
            losses.append(total / n_folds)
        best_c = c_grid[int(np.argmin(losses))]
    w, b = fit_logistic(Z, y, best_c)
    alpha[live] = w / sd[live]
    bias = b - float(np.sum(w * mu[live] / sd[live]))
    return alpha, bias
