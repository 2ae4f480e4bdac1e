"""Independent reference implementations used by several test modules."""

import numpy as np


def grid_oracle(X, y, C, points=21, rounds=40):
    """Zooming grid search over (w, b); the objective is convex, so shrinking around the best cell converges."""
    n, d = X.shape
    bound = np.sqrt(2 * C * n)  # 0.5|w|^2 <= f(0) = C n
    radius = np.full(d + 1, bound)
    radius[-1] = 1 + bound * np.abs(X).sum(axis=1).max()
    center = np.zeros(d + 1)
    best = C * n  # the zero model
    for _ in range(rounds):
        axes = [np.linspace(c - r, c + r, points) for c, r in zip(center, radius)]
        theta = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d + 1)
        h = np.maximum(0.0, 1 - y[None, :] * (theta[:, :d] @ X.T + theta[:, d:]))
        f = 0.5 * np.sum(theta[:, :d] ** 2, axis=1) + C * np.sum(h * h, axis=1)
        i = int(np.argmin(f))
        if f[i] <= best:
            best, center = float(f[i]), theta[i]
        radius = radius * 0.5
    return best
