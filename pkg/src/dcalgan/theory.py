"""Exact checks of the GAN equilibrium identities on finite discrete distributions.

For a fixed generator the best discriminator is ``D* = p_data / (p_data + p_g)``
and the value of the game at that discriminator is ``2 * JSD(p_data, p_g) - ln 4``.
Everything here uses the natural logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

LN2 = math.log(2.0)
LN4 = math.log(4.0)
SUM_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ConfigError("a distribution is a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ConfigError("probabilities must be finite and non-negative")
        if abs(math.fsum(p) - 1.0) > SUM_TOL:
            raise ConfigError(f"probabilities sum to {math.fsum(p)!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, weights) -> DiscreteDistribution:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / math.fsum(w))

    @classmethod
    def uniform(cls, n: int) -> DiscreteDistribution:
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.probs.size


def _aligned(p: DiscreteDistribution, q: DiscreteDistribution) -> tuple[np.ndarray, np.ndarray]:
    if len(p) != len(q):
        raise ConfigError(f"supports differ in size: {len(p)} vs {len(q)}")
    return p.probs, q.probs


def _xlogy_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``a * ln(a / b)`` with ``0 * anything = 0``; ``a > 0, b = 0`` gives ``+inf``."""
    out = np.zeros_like(a)
    pos = a > 0
    with np.errstate(divide="ignore"):
        out[pos] = a[pos] * (np.log(a[pos]) - np.log(b[pos]))
    return out


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """KL(p || q); ``math.inf`` when p is not absolutely continuous w.r.t. q."""
    a, b = _aligned(p, q)
    if np.any((a > 0) & (b == 0)):
        return math.inf
    return math.fsum(_xlogy_ratio(a, b))


def js_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    a, b = _aligned(p, q)
    m = 0.5 * (a + b)
    # the symmetric sum keeps js(p, q) == js(q, p) bit for bit
    return 0.5 * math.fsum(np.concatenate([_xlogy_ratio(a, m), _xlogy_ratio(b, m)]))


@dataclass(frozen=True)
class OptimalDiscriminator:
    values: np.ndarray  # NaN at excluded points
    excluded: tuple[int, ...] = field(default=())


def optimal_discriminator(p_data: DiscreteDistribution, p_g: DiscreteDistribution) -> OptimalDiscriminator:
    """Pointwise best response; points where both densities vanish are excluded (NaN)."""
    a, b = _aligned(p_data, p_g)
    denom = a + b
    excluded = tuple(int(i) for i in np.flatnonzero(denom == 0))
    values = np.full_like(a, np.nan)
    ok = denom > 0
    values[ok] = a[ok] / denom[ok]
    return OptimalDiscriminator(values, excluded)


def value_at_optimum(p_data: DiscreteDistribution, p_g: DiscreteDistribution) -> float:
    """``sum p_data ln D* + sum p_g ln(1 - D*)``, evaluated directly from ``D*``."""
    a, b = _aligned(p_data, p_g)
    d = optimal_discriminator(p_data, p_g).values
    terms = []
    ra, rb = a > 0, b > 0
    terms.append(a[ra] * np.log(d[ra]))
    # 1 - D* computed as p_g / (p_data + p_g) to avoid cancellation
    terms.append(b[rb] * np.log(b[rb] / (a[rb] + b[rb])))
    return math.fsum(np.concatenate(terms))


def value_via_jsd(p_data: DiscreteDistribution, p_g: DiscreteDistribution) -> float:
    return 2.0 * js_divergence(p_data, p_g) - LN4


def total_variation(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    a, b = _aligned(p, q)
    return 0.5 * math.fsum(np.abs(a - b))


# -- a toy minimax game --------------------------------------------------------


@dataclass
class ToyTrajectory:
    p_g: list[np.ndarray]
    values: list[float]
    final_tv: float
    diverged: bool = False


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def minimax_toy(p_data: DiscreteDistribution, steps: int, lr: float) -> ToyTrajectory:
    """Alternate the closed-form best-response D with a gradient step on G's softmax logits.

    Against ``D*`` the generator minimizes ``sum_i p_g,i ln(1 - D*_i)``; the
    envelope theorem makes its gradient with respect to ``p_g`` equal to
    ``ln(1 - D*)``, which is chained through the softmax Jacobian.
    """
    if steps < 0 or not lr > 0:
        raise ConfigError("steps must be >= 0 and lr > 0")
    a = p_data.probs
    logits = np.zeros(len(p_data))
    history, values = [], []
    diverged = False
    for t in range(steps + 1):
        p = _softmax(logits)
        dist = DiscreteDistribution(p / math.fsum(p))
        history.append(dist.probs.copy())
        values.append(value_at_optimum(p_data, dist))
        if t == steps:
            break
        with np.errstate(divide="ignore"):
            g_p = np.log(p / (a + p))
        grad = p * (g_p - np.dot(p, g_p))
        logits = logits - lr * grad
        if not np.all(np.isfinite(logits)):
            diverged = True
            break
    return ToyTrajectory(history, values, total_variation(p_data, DiscreteDistribution(history[-1])), diverged)


# -- the identity table --------------------------------------------------------


@dataclass(frozen=True)
class IdentityRow:
    pair_id: int
    jsd: float
    direct: float
    via_jsd: float

    @property
    def delta(self) -> float:
        return abs(self.direct - self.via_jsd)


def random_pair(rng: np.random.Generator, size: int) -> tuple[DiscreteDistribution, DiscreteDistribution]:
    """Two random distributions; some draws zero out entries to exercise disjoint supports."""
    pair = []
    for _ in range(2):
        w = rng.exponential(size=size)
        if rng.random() < 0.3:
            w[rng.random(size) < 0.3] = 0.0
            if w.sum() == 0:
                w[rng.integers(size)] = 1.0
        pair.append(DiscreteDistribution.normalized(w))
    return pair[0], pair[1]


def shipped_pairs() -> list[tuple[DiscreteDistribution, DiscreteDistribution]]:
    D = DiscreteDistribution
    return [
        (D(np.array([0.5, 0.5])), D(np.array([0.5, 0.5]))),
        (D(np.array([1.0, 0.0])), D(np.array([0.0, 1.0]))),
        (D(np.array([0.5, 0.5])), D(np.array([0.25, 0.75]))),
        (D(np.array([0.7, 0.3])), D(np.array([0.5, 0.5]))),
        (D(np.array([0.6, 0.2, 0.2])), D(np.array([0.2, 0.2, 0.6]))),
        (D.uniform(4), D(np.array([0.4, 0.3, 0.2, 0.1]))),
    ]


def identity_table(pairs=None, n_random: int = 0, seed: int = 0,
                   size_range: tuple[int, int] = (2, 64)) -> list[IdentityRow]:
    pairs = list(shipped_pairs() if pairs is None else pairs)
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        pairs.append(random_pair(rng, int(rng.integers(size_range[0], size_range[1] + 1))))
    rows = []
    for i, (p, q) in enumerate(pairs):
        direct = value_at_optimum(p, q)
        via = value_via_jsd(p, q)
        if not (math.isfinite(direct) and math.isfinite(via)):
            raise NumericError(f"pair {i}: non-finite game value")
        rows.append(IdentityRow(i, js_divergence(p, q), direct, via))
    return rows


def format_table(rows: list[IdentityRow]) -> str:
    lines = [f"{'pair':>5}  {'JSD':>22}  {'V direct':>22}  {'2*JSD-ln4':>22}  {'|delta|':>10}"]
    for r in rows:
        lines.append(f"{r.pair_id:>5}  {r.jsd:>22.17g}  {r.direct:>22.17g}  {r.via_jsd:>22.17g}  {r.delta:>10.3g}")
    return "\n".join(lines)
