"""Generators with logarithmic growth in z and their regularity checks.

A generator is evaluated as ``phi(t, prefix, y, z)`` with ``y`` of shape
``(M,)`` and ``z`` of shape ``(M, d)``; ``prefix`` may be ``None`` for
generators that do not depend on the path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .paths import Prefix, TimeGrid

Array = np.ndarray

__all__ = [
    "log_growth",
    "GrowthEnvelope",
    "TruncationSchedule",
    "GeneratorSpec",
    "MollifierParams",
    "zero_generator",
    "constant_generator",
    "linear_z_generator",
    "abs_z_generator",
    "linear_y_generator",
    "example1_generator",
    "example2_generator",
    "check_local_z_regularity",
    "check_h4_monotonicity",
    "check_envelope",
    "mollify",
    "rho_N",
    "check_lemma31",
]


def log_growth(s):
    """``s * sqrt(|ln s|)``, extended by 0 at ``s = 0``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("log_growth is defined for s >= 0 only")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(s_arr > 0, s_arr * np.sqrt(np.abs(np.log(np.where(s_arr > 0, s_arr, 1.0)))), 0.0)
    return float(out) if out.ndim == 0 else out


def _zero_eta(t, prefix):
    return 0.0


@dataclass
class GrowthEnvelope:
    """Bound ``|phi| <= eta_t + c0 * log_growth(|z|)``.

    ``alpha`` in ``[0, 2)`` fixes the integrability exponent
    ``alpha_bar = min(2, 2 / alpha)`` of the generator along solutions.
    """

    eta: Callable[[float, Optional[Prefix]], Array] = _zero_eta
    c0: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.c0 < 0:
            raise ValueError("c0 must be nonnegative")
        if not 0 <= self.alpha < 2:
            raise ValueError("alpha must lie in [0, 2)")

    @property
    def alpha_bar(self) -> float:
        return 2.0 if self.alpha == 0 else min(2.0, 2.0 / self.alpha)

    def bound(self, t, prefix, z) -> Array:
        return np.abs(self.eta(t, prefix)) + self.c0 * log_growth(np.linalg.norm(z, axis=-1))


@dataclass
class TruncationSchedule:
    """Local monotonicity data: ``A_N``, exponent ``r``, constant ``M2``, process ``v``."""

    A: Callable[[int], float]
    r: float = 1.0
    M2: Optional[float] = None
    v: Optional[Callable[[float, Optional[Prefix]], Array]] = None
    q_prime: Optional[float] = None

    def check(self, Ns: Sequence[int]) -> None:
        """Raise unless ``1 < A_N <= N^r`` and ``A_N`` is nondecreasing over ``Ns``."""
        prev = -np.inf
        for N in sorted(Ns):
            a = self.A(N)
            if not (1 < a <= N**self.r):
                raise ValueError(f"A_N={a} at N={N} violates 1 < A_N <= N^{self.r}")
            if a < prev:
                raise ValueError(f"A_N decreases at N={N}")
            prev = a


@dataclass
class GeneratorSpec:
    """A generator together with its growth envelope and regularity data.

    ``y_dependent`` and ``path_dependent`` are structural hints: a generator
    declared independent of ``y`` is never handed a meaningful ``y``, which
    lets mollification skip the ``y`` convolution.
    """

    func: Callable[[float, Optional[Prefix], Array, Array], Array]
    envelope: GrowthEnvelope = field(default_factory=GrowthEnvelope)
    schedule: Optional[TruncationSchedule] = None
    lipschitz: bool = False
    lipschitz_constant: Optional[float] = None
    name: str = "generator"
    y_dependent: bool = True
    path_dependent: bool = False

    def evaluate(self, t: float, prefix: Optional[Prefix], y, z) -> Array:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if z.ndim == y.ndim:
            z = z[..., None]
        out = np.asarray(self.func(t, prefix, y, z), dtype=float)
        return np.broadcast_to(out, y.shape) if out.shape != y.shape else out

    __call__ = evaluate


def _a_n_identity(N):
    return float(N)


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec(lambda t, p, y, z: np.zeros_like(y), GrowthEnvelope(c0=0.0),
                         TruncationSchedule(_a_n_identity, M2=0.0), True, 0.0, "zero",
                         y_dependent=False)


def constant_generator(c: float) -> GeneratorSpec:
    return GeneratorSpec(lambda t, p, y, z: np.full_like(y, c), GrowthEnvelope(lambda t, p: abs(c), 0.0),
                         TruncationSchedule(_a_n_identity, M2=0.0), True, 0.0, f"constant({c})",
                         y_dependent=False)


def linear_z_generator(k: float = 1.0) -> GeneratorSpec:
    """``phi = k * z_1``; globally Lipschitz but only of log growth up to a constant."""
    return GeneratorSpec(lambda t, p, y, z: k * z[..., 0],
                         GrowthEnvelope(lambda t, p: abs(k) * math.exp(k * k), 1.0),
                         None, True, abs(k), f"linear_z({k})", y_dependent=False)


def abs_z_generator(k: float = 1.0) -> GeneratorSpec:
    """``phi = k |z|``; envelope from ``k s <= k e^{k^2} + s sqrt(ln s)``."""
    return GeneratorSpec(lambda t, p, y, z: k * np.linalg.norm(z, axis=-1),
                         GrowthEnvelope(lambda t, p: abs(k) * math.exp(k * k), 1.0),
                         None, True, abs(k), f"abs_z({k})", y_dependent=False)


def linear_y_generator(k: float = -1.0) -> GeneratorSpec:
    """``phi = k y``; used for sign checks, it is not of bounded growth in y."""
    return GeneratorSpec(lambda t, p, y, z: k * y, GrowthEnvelope(c0=0.0),
                         TruncationSchedule(_a_n_identity, M2=max(k, 0.0)), True, abs(k),
                         f"linear_y({k})")


def _example1_profile(eps: float):
    lo, hi = 1.0 - eps, 1.0 + eps
    a0 = lo * math.sqrt(-math.log(lo))
    a1 = hi * math.sqrt(math.log(hi))
    m0 = math.sqrt(-math.log(lo)) - 1.0 / (2.0 * math.sqrt(-math.log(lo)))
    m1 = math.sqrt(math.log(hi)) + 1.0 / (2.0 * math.sqrt(math.log(hi)))
    width = hi - lo

    def profile(s: Array) -> Array:
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        inner = s < lo
        outer = s > hi
        band = ~(inner | outer)
        si = s[inner]
        with np.errstate(divide="ignore", invalid="ignore"):
            out[inner] = np.where(si > 0, si * np.sqrt(-np.log(np.where(si > 0, si, 0.5))), 0.0)
        so = s[outer]
        out[outer] = so * np.sqrt(np.log(so))
        u = (s[band] - lo) / width
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        out[band] = h00 * a0 + h10 * width * m0 + h01 * a1 + h11 * width * m1
        return out

    return profile


def example1_generator(eps: float = 0.1) -> GeneratorSpec:
    """``phi(z) = |z| sqrt(-ln|z|)`` below ``1 - eps``, ``|z| sqrt(ln|z|)`` above ``1 + eps``.

    On the band ``[1 - eps, 1 + eps]`` the two branches are joined by the cubic
    Hermite interpolant of their values and one-sided slopes, which makes
    ``phi`` C^1 away from 0. The growth envelope uses ``c0 = 1`` and a
    constant ``eta`` equal to the maximum of ``phi`` on the band, where
    ``log_growth`` itself vanishes at ``|z| = 1``.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    profile = _example1_profile(eps)
    band = np.linspace(1 - eps, 1 + eps, 20001)
    eta = float(np.max(profile(band) - log_growth(band))) * (1 + 1e-9) + 1e-12
    return GeneratorSpec(lambda t, p, y, z: profile(np.linalg.norm(z, axis=-1)),
                         GrowthEnvelope(lambda t, p: eta, 1.0, 1.0),
                         TruncationSchedule(_a_n_identity, r=1.0),
                         name=f"example1({eps})", y_dependent=False)


def example2_generator(kappa: float = 1.0, C: Callable[[float, Optional[Prefix]], Array] | float = 0.0
                       ) -> GeneratorSpec:
    """Stochastic-monotone generator ``kappa |z| sqrt(C_t + |ln|z||) - y / (1 + |y|)``.

    ``C`` is a nonnegative coefficient process, either a constant or a
    function of the path prefix (for instance ``|x_t|``). Since
    ``s sqrt(C) <= sqrt(C) e^C + s sqrt(ln s)``, the envelope holds with
    ``c0 = 2 kappa`` and ``eta = kappa sqrt(C) e^C + 1``; ``v = e^C``.
    """
    coef = C if callable(C) else (lambda t, p, _c=float(C): _c)

    def func(t, p, y, z):
        s = np.linalg.norm(z, axis=-1)
        c = np.asarray(coef(t, p), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(s > 0, s * np.sqrt(c + np.abs(np.log(np.where(s > 0, s, 1.0)))), 0.0)
        return kappa * g - y / (1.0 + np.abs(y))

    def eta(t, p):
        c = np.asarray(coef(t, p), dtype=float)
        return kappa * np.sqrt(c) * np.exp(c) + 1.0

    return GeneratorSpec(func, GrowthEnvelope(eta, 2.0 * kappa, 1.0),
                         TruncationSchedule(_a_n_identity, r=1.0, v=lambda t, p: np.exp(coef(t, p))),
                         name=f"example2({kappa})", path_dependent=callable(C))


# --------------------------------------------------------------------------
# sampled regularity checks


def _mixed_scalars(rng: np.random.Generator, n: int, N: float) -> Array:
    """Points of ``[-N, N]`` mixing uniform, log-uniform and near-zero draws."""
    k = n // 3
    uni = rng.uniform(-N, N, n - 2 * k)
    logu = np.exp(rng.uniform(math.log(1e-9), math.log(N), k)) * rng.choice([-1.0, 1.0], k)
    near0 = rng.uniform(-10.0 / N, 10.0 / N, k)
    out = np.concatenate([uni, logu, near0])
    rng.shuffle(out)
    return out


def _partners(rng: np.random.Generator, a: Array, N: float) -> Array:
    """Second points: half independent, half at log-uniform distance from ``a``."""
    n = a.size
    far = _mixed_scalars(rng, n, N)
    delta = np.exp(rng.uniform(math.log(1e-9), math.log(2 * N), n)) * rng.choice([-1.0, 1.0], n)
    near = np.clip(a + delta, -N, N)
    return np.where(rng.random(n) < 0.5, far, near)


def check_local_z_regularity(spec: GeneratorSpec, N: int, samples: int = 10**6, seed: int = 0,
                             t: float = 0.0, chunk: int = 250_000):
    """Empirical constant ``c`` in ``|phi(z)-phi(z')| <= c (sqrt(ln N)|z-z'| + ln N / N)``.

    Scalar ``z`` (``d = 1``), ``y = 0``. Returns ``(c, (z, z'))``.
    """
    if N < 3:
        raise ValueError("N must be >= 3")
    rng = np.random.default_rng(seed)
    lnN = math.log(N)
    best, witness = 0.0, (0.0, 0.0)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        z = _mixed_scalars(rng, n, N)
        z2 = _partners(rng, z, N)
        y = np.zeros(n)
        diff = np.abs(spec(t, None, y, z[:, None]) - spec(t, None, y, z2[:, None]))
        ratio = diff / (math.sqrt(lnN) * np.abs(z - z2) + lnN / N)
        j = int(np.argmax(ratio))
        if ratio[j] > best:
            best, witness = float(ratio[j]), (float(z[j]), float(z2[j]))
        done += n
    return best, witness


def check_h4_monotonicity(spec: GeneratorSpec, N: int, samples: int = 10**6, seed: int = 0,
                          t: float = 0.0, chunk: int = 250_000):
    """Smallest sampled ``M2`` in the local monotonicity bound at level ``N``.

    The bound is ``(y-y')(phi(y,z)-phi(y',z')) <= M2 [|dy|^2 ln A_N
    + |dy||dz| sqrt(ln A_N) + ln A_N / A_N]`` over ``|y|,|y'|,|z|,|z'| <= N``.
    Returns ``(M2, (y, y', z, z'))``.
    """
    if spec.schedule is None:
        raise ValueError("generator has no truncation schedule")
    A = spec.schedule.A(N)
    lnA = math.log(A)
    rng = np.random.default_rng(seed)
    best, witness = 0.0, (0.0, 0.0, 0.0, 0.0)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        y = _mixed_scalars(rng, n, N)
        y2 = _partners(rng, y, N)
        z = _mixed_scalars(rng, n, N)
        z2 = _partners(rng, z, N)
        dy = y - y2
        lhs = dy * (spec(t, None, y, z[:, None]) - spec(t, None, y2, z2[:, None]))
        rhs = dy**2 * lnA + np.abs(dy) * np.abs(z - z2) * math.sqrt(lnA) + lnA / A
        ratio = lhs / rhs
        j = int(np.argmax(ratio))
        if ratio[j] > best:
            best, witness = float(ratio[j]), (float(y[j]), float(y2[j]), float(z[j]), float(z2[j]))
        done += n
    return best, witness


def check_envelope(spec: GeneratorSpec, samples: int = 10**6, seed: int = 0, radius: float = 1e6,
                   t: float = 0.0, prefix: Optional[Prefix] = None) -> float:
    """Largest sampled excess ``|phi| - (eta + c0 log_growth(|z|))``; ``<= 0`` means it holds."""
    rng = np.random.default_rng(seed)
    y = _mixed_scalars(rng, samples, radius)
    z = _mixed_scalars(rng, samples, radius)
    val = np.abs(spec(t, prefix, y, z[:, None]))
    return float(np.max(val - spec.envelope.bound(t, prefix, z[:, None])))


# --------------------------------------------------------------------------
# mollified Lipschitz approximations


def _bump(v: Array) -> Array:
    out = np.zeros_like(v)
    inside = np.abs(v) < 1
    out[inside] = np.exp(-1.0 / (1.0 - v[inside] ** 2))
    return out


_BUMP_AT_ZERO_OVER_MASS = None


def _bump_peak_ratio() -> float:
    """``k(0) / int k`` for the unit bump, used in the Lipschitz bound."""
    global _BUMP_AT_ZERO_OVER_MASS
    if _BUMP_AT_ZERO_OVER_MASS is None:
        from scipy.integrate import quad

        mass = quad(lambda v: math.exp(-1.0 / (1.0 - v * v)), -1, 1)[0]
        _BUMP_AT_ZERO_OVER_MASS = math.exp(-1.0) / mass
    return _BUMP_AT_ZERO_OVER_MASS


def smooth_cutoff(r: Array, n: float) -> Array:
    """1 on ``r <= n``, 0 on ``r >= n + 1``, smoothstep in between."""
    s = np.clip(r - n, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


@dataclass
class MollifierParams:
    """Index ``n``, bandwidth index ``q(n) >= n + n^alpha`` and quadrature size."""

    n: int
    q: Optional[int] = None
    nodes: int = 33
    alpha: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("mollifier index n must be >= 1")
        q_min = math.ceil(self.n + self.n**self.alpha)
        if self.q is None:
            self.q = q_min
        elif self.q < q_min:
            raise ValueError(f"bandwidth index q={self.q} below n + n^alpha = {q_min}")
        if self.nodes < 5:
            raise ValueError(f"quadrature with {self.nodes} nodes is too coarse for a bump kernel")

    @property
    def bandwidth(self) -> float:
        return 1.0 / self.q

    def quadrature(self) -> tuple[Array, Array]:
        """Offsets and normalised weights of the 1-D kernel rule."""
        v, w = np.polynomial.legendre.leggauss(self.nodes)
        w = w * _bump(v)
        keep = w > 0
        v, w = v[keep], w[keep]
        return v * self.bandwidth, w / w.sum()


def mollify(spec: GeneratorSpec, params: MollifierParams, sup_estimate: Optional[float] = None
            ) -> GeneratorSpec:
    """Bounded Lipschitz approximation ``(phi * alpha_q) psi_n`` of a generator.

    The convolution runs over ``(y, z)`` with a product bump kernel of
    bandwidth ``1/q`` evaluated by Gauss-Legendre quadrature; generators
    declared independent of ``y`` are convolved in ``z`` only, which gives
    the same value since the ``y`` weights sum to one. ``psi_n`` is a
    smoothstep radial cutoff on the shell ``n <= |(y, z)| <= n + 1``.
    Only scalar ``z`` is supported.
    """
    n = params.n
    offsets, weights = params.quadrature()
    base = spec

    def func(t, prefix, y, z):
        if z.shape[-1] != 1:
            raise ValueError("mollification is implemented for scalar z only")
        zs = z[..., 0]
        radius = np.hypot(y, zs)
        cut = smooth_cutoff(radius, n)
        out = np.zeros_like(y)
        live = cut > 0
        if not np.any(live):
            return out
        yl, zl = y[live], zs[live]
        pre = _restrict(prefix, live)
        acc = np.zeros_like(yl)
        if base.y_dependent:
            for dy, wy in zip(offsets, weights):
                for dz, wz in zip(offsets, weights):
                    acc += (wy * wz) * base.func(t, pre, yl - dy, (zl - dz)[:, None])
        else:
            for dz, wz in zip(offsets, weights):
                acc += wz * base.func(t, pre, yl, (zl - dz)[:, None])
        out[live] = acc * cut[live]
        return out

    if sup_estimate is None:
        s = np.linspace(-(n + 2), n + 2, 801)
        yy, zz = np.meshgrid(s, s)
        sup_estimate = float(np.max(np.abs(spec(0.0, None, yy.ravel(), zz.ravel()[:, None])))) \
            if not spec.path_dependent else None
    lip = None
    if sup_estimate is not None:
        kernel_grad = 2.0 * params.q * _bump_peak_ratio()
        lip = sup_estimate * (math.sqrt(2.0) * kernel_grad + 1.5)
    return replace(spec, func=func, lipschitz=True, lipschitz_constant=lip,
                   name=f"{spec.name}_n{n}")


def _restrict(prefix: Optional[Prefix], mask: Array) -> Optional[Prefix]:
    if prefix is None:
        return None
    return Prefix(prefix.i, prefix.t, prefix.x[mask], prefix.sup[mask])


def rho_N(phi: GeneratorSpec, phi2: GeneratorSpec, N: float, resolution: int = 201,
          grid: TimeGrid = TimeGrid(1.0, 1), bundle=None) -> float:
    """``E int_0^T sup_{|y|,|z| <= N} |phi - phi2| ds`` on a (y, z) grid.

    Left-point time quadrature on ``grid``; the expectation is the average
    over ``bundle`` paths when the generators depend on the path, otherwise
    the generators are evaluated with ``prefix=None``.
    """
    if N <= 0:
        raise ValueError("rho_N needs N > 0")
    s = np.linspace(-N, N, resolution)
    yy, zz = (a.ravel() for a in np.meshgrid(s, s))
    total = 0.0
    for i in range(grid.N):
        t = grid.t(i)
        if bundle is None:
            diff = np.abs(phi(t, None, yy, zz[:, None]) - phi2(t, None, yy, zz[:, None]))
            total += float(np.max(diff)) * grid.dt
        else:
            pre = bundle.prefix(i)
            sups = np.empty(bundle.n_paths)
            for m in range(bundle.n_paths):
                pm = Prefix(i, t, np.repeat(pre.x[m:m + 1], yy.size, axis=0),
                            np.repeat(pre.sup[m:m + 1], yy.size))
                sups[m] = np.max(np.abs(phi(t, pm, yy, zz[:, None]) - phi2(t, pm, yy, zz[:, None])))
            total += float(np.mean(sups)) * grid.dt
    return total


def check_lemma31(C1: float, y_range=(math.e**2, 1e6), z_range=(1e-6, 1e6), resolution: int = 200):
    """Smallest ``C2 >= 0`` with ``C1 |y| log_growth(|z|) <= |z|^2/2 + C2 ln|y| |y|^2`` on a grid.

    Both ranges are covered by logarithmic grids of ``resolution`` points.
    Returns ``(C2, (y, z))`` where the witness attains the maximum.
    """
    if C1 <= 0:
        raise ValueError("C1 must be positive")
    if y_range[0] <= 1:
        raise ValueError("y-range must stay above 1 so that ln|y| > 0")
    y = np.geomspace(y_range[0], y_range[1], resolution)
    z = np.geomspace(z_range[0], z_range[1], resolution)
    Y, Zg = np.meshgrid(y, z, indexing="ij")
    need = (C1 * Y * log_growth(Zg) - 0.5 * Zg**2) / (np.log(Y) * Y**2)
    j = np.unravel_index(int(np.argmax(need)), need.shape)
    return max(0.0, float(need[j])), (float(Y[j]), float(Zg[j]))
