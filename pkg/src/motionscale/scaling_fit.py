"""Iso-FLOP banding, curve fits with covariance, error bands and allocation."""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .records import RunRecord

# Comparison constants shown next to fitted values in reports.
REFERENCE = {
    "n_opt_exponent": (0.63, 0.08),
    "d_opt_exponent": (0.44, 0.06),
    "observed_per_demonstrated": {"observed": 10.0, "demonstrated": (2.0, 3.0)},
}

FORMS = ("parabola-logx", "power", "power+const", "chinchilla-surface")
_NAMES = {
    "parabola-logx": ("a", "log_x_opt", "L_opt"),
    "power": ("a", "b"),
    "power+const": ("a", "b", "c"),
    "chinchilla-surface": ("E", "A", "alpha", "B", "beta"),
}


class DegenerateFit(ValueError):
    """A fit with no usable optimum (or an unidentifiable design)."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class FitResult:
    form: str
    params: np.ndarray
    covariance: np.ndarray
    residual_variance: float
    n: int
    converged: bool = True
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form}")
        self.params = np.asarray(self.params, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if not np.isfinite(self.params).all():
            raise ValueError("non-finite fit parameters")

    @property
    def names(self):
        return _NAMES[self.form]

    def __getitem__(self, name):
        return float(self.params[self.names.index(name)])

    def stderr(self, name):
        i = self.names.index(name)
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))

    def predict(self, x, y=None):
        x = np.asarray(x, dtype=np.float64)
        p = self.params
        if self.form == "parabola-logx":
            return p[0] * (np.log(x) - p[1]) ** 2 + p[2]
        if self.form == "power":
            return p[0] * x ** p[1]
        if self.form == "power+const":
            return p[0] * x ** p[1] + p[2]
        return surface(p, x, np.asarray(y, dtype=np.float64))

    def to_dict(self):
        return {
            "form": self.form,
            "params": dict(zip(self.names, map(float, self.params))),
            "covariance": self.covariance.tolist(),
            "residual_variance": self.residual_variance,
            "n": self.n,
            "converged": self.converged,
            "flags": list(self.flags),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        names = _NAMES[d["form"]]
        return cls(d["form"], [d["params"][k] for k in names], d["covariance"], d["residual_variance"], d["n"],
                   d.get("converged", True), list(d.get("flags", [])), dict(d.get("meta", {})))


# --------------------------------------------------------------------------
# damped Gauss-Newton
# --------------------------------------------------------------------------


@dataclass
class LMResult:
    params: np.ndarray
    ssr: float
    jac: np.ndarray
    converged: bool
    iterations: int


def levenberg_marquardt(resid, jac, p0, max_iter=200, rtol=1e-10, lam=1e-3, factor=10.0):
    """Minimize ``sum(resid(p)**2)`` with multiplicative damping updates."""
    p = np.asarray(p0, dtype=np.float64).copy()
    r = resid(p)
    ssr = float(r @ r)
    scale0 = max(ssr, 1e-300)
    for it in range(1, max_iter + 1):
        J = jac(p)
        g = J.T @ r
        H = J.T @ J
        if ssr <= 1e-28 * scale0 or not np.any(g):
            return LMResult(p, ssr, J, True, it)
        improved = False
        while lam < 1e20:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= factor
                continue
            cand = p + step
            rc = resid(cand)
            sc = float(rc @ rc)
            if np.isfinite(sc) and sc < ssr:
                rel = (ssr - sc) / ssr
                small_step = np.all(np.abs(step) <= 1e-14 * (np.abs(p) + 1e-14))
                p, r, ssr = cand, rc, sc
                lam = max(lam / factor, 1e-15)
                improved = True
                if rel < rtol or small_step:
                    return LMResult(p, ssr, jac(p), True, it)
                break
            lam *= factor
        if not improved:
            # no descent direction at any damping: stationary to working precision
            return LMResult(p, ssr, J, True, it)
    return LMResult(p, ssr, jac(p), False, max_iter)


def _covariance(J, ssr, n, k, sigma=None):
    dof = n - k
    s2 = ssr / dof if dof > 0 else 0.0
    if sigma is not None:
        # known measurement noise: absolute rather than residual-scaled covariance
        s2 = float(sigma) ** 2
    JTJ = J.T @ J
    try:
        inv = np.linalg.inv(JTJ)
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(JTJ)
    cov = s2 * inv
    return 0.5 * (cov + cov.T), s2


# --------------------------------------------------------------------------
# parabola in log x
# --------------------------------------------------------------------------


def _sorted_xy(x, y, w=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    o = np.lexsort((y, x))
    if w is None:
        return x[o], y[o], None
    return x[o], y[o], np.asarray(w, dtype=np.float64)[o]


def fit_parabola(x, y, sigma=None) -> FitResult:
    """Fit ``L(x) = a (log x - log x_opt)^2 + L_opt``.

    Solved as linear least squares in ``z = log x`` then reparameterized; the
    coefficient covariance is pushed through the reparameterization Jacobian.
    Raises :class:`DegenerateFit` when ``a <= 0``. A vertex outside the data
    range adds an ``"edge"`` flag. ``sigma``, when given, is a known per-point
    noise level used in place of the residual variance for the covariance.
    """
    x, y, _ = _sorted_xy(x, y)
    if len(x) < 3 or len(np.unique(x)) < 3:
        raise ValueError("need at least 3 distinct x")
    if (x <= 0).any():
        raise ValueError("x must be positive")
    z = np.log(x)
    zc = z.mean()
    u = z - zc
    X = np.stack([np.ones_like(u), u, u * u], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = X @ coef - y
    ssr = float(r @ r)
    cov_c, _ = _covariance(X, ssr, len(x), 3, sigma)
    s2 = ssr / (len(x) - 3) if len(x) > 3 else 0.0
    c0, c1, c2 = coef
    if not c2 > 0:
        res = FitResult("parabola-logx", [c2, zc, c0], cov_c, s2, len(x), True, ["degenerate"])
        raise DegenerateFit(f"no interior minimum (a={c2:.3g})", res)
    uo = -c1 / (2 * c2)
    params = np.array([c2, zc + uo, c0 - c1 * c1 / (4 * c2)])
    Jr = np.array([
        [0.0, 0.0, 1.0],
        [0.0, -1.0 / (2 * c2), c1 / (2 * c2 * c2)],
        [1.0, -c1 / (2 * c2), c1 * c1 / (4 * c2 * c2)],
    ])
    cov = Jr @ cov_c @ Jr.T
    flags = [] if z[0] <= params[1] <= z[-1] else ["edge"]
    return FitResult("parabola-logx", params, 0.5 * (cov + cov.T), s2, len(x), True, flags,
                     {"x_range": [float(x[0]), float(x[-1])]})


# --------------------------------------------------------------------------
# power laws
# --------------------------------------------------------------------------


def fit_power(x, y, with_constant=False, weights=None, max_iter=200) -> FitResult:
    """Fit ``a x^b`` (or ``a x^b + c``) by damped Gauss-Newton from a log-log start.

    ``x`` is scaled by its geometric mean during the solve; parameters and
    covariance are mapped back. ``weights`` are per-point ``1/sigma^2``.
    """
    x, y, w = _sorted_xy(x, y, weights)
    k = 3 if with_constant else 2
    if len(x) < k + (1 if with_constant else 1):
        raise ValueError(f"need at least {k + 1 if with_constant else 3} points")
    if (x <= 0).any():
        raise ValueError("x must be positive")
    sw = np.ones_like(y) if w is None else np.sqrt(w)
    g = math.exp(np.log(x).mean())
    xs = x / g
    lx = np.log(xs)
    c0 = 0.9 * y.min() if with_constant else 0.0
    shifted = y - c0
    if (shifted > 0).all():
        b0, la0 = np.polyfit(lx, np.log(shifted), 1)
        a0 = math.exp(la0)
    elif (shifted < 0).all():
        b0, la0 = np.polyfit(lx, np.log(-shifted), 1)
        a0 = -math.exp(la0)
    else:
        a0, b0 = float(shifted.mean()) or 1.0, 0.0
    p0 = [a0, b0, c0] if with_constant else [a0, b0]

    def model(p):
        f = p[0] * xs ** p[1]
        return f + p[2] if with_constant else f

    def resid(p):
        return sw * (model(p) - y)

    def jac(p):
        xb = xs ** p[1]
        cols = [xb, p[0] * xb * lx]
        if with_constant:
            cols.append(np.ones_like(xs))
        return sw[:, None] * np.stack(cols, axis=1)

    lm = levenberg_marquardt(resid, jac, p0, max_iter=max_iter)
    cov_s, s2 = _covariance(lm.jac, lm.ssr, len(x), k)
    a_s, b = lm.params[0], lm.params[1]
    a = a_s * g ** (-b)
    T = np.eye(k)
    T[0, 0] = g ** (-b)
    T[0, 1] = -a * math.log(g)
    params = lm.params.copy()
    params[0] = a
    cov = T @ cov_s @ T.T
    form = "power+const" if with_constant else "power"
    flags = [] if lm.converged else ["unconverged"]
    return FitResult(form, params, 0.5 * (cov + cov.T), s2, len(x), lm.converged, flags,
                     {"ssr": lm.ssr, "x_range": [float(x[0]), float(x[-1])],
                      "y_range": [float(y.min()), float(y.max())], "iterations": lm.iterations})


def ssr(fit: FitResult, x, y, weights=None) -> float:
    r = fit.predict(x) - np.asarray(y, dtype=np.float64)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=np.float64)
    return float((w * r * r).sum())


# --------------------------------------------------------------------------
# error propagation
# --------------------------------------------------------------------------


def partials(fit: FitResult, x):
    """``[len(x), 3]`` partials of f with respect to (a, b, c)."""
    x = np.asarray(x, dtype=np.float64)
    p = fit.params
    if fit.form == "parabola-logx":
        d = np.log(x) - p[1]
        return np.stack([d * d, -2 * p[0] * d, np.ones_like(x)], axis=1)
    if fit.form in ("power", "power+const"):
        xb = x ** p[1]
        return np.stack([xb, p[0] * xb * np.log(x), np.ones_like(x)], axis=1)
    raise ValueError(f"no band propagation for form {fit.form}")


def _cov3(fit: FitResult):
    c = np.zeros((3, 3))
    k = fit.covariance.shape[0]
    c[:k, :k] = fit.covariance
    return c


def check_psd(cov, tol=1e-10):
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, atol=tol * max(1.0, np.abs(cov).max())):
        raise ValueError("covariance is not symmetric")
    ev = np.linalg.eigvalsh(cov) if cov.size else np.zeros(0)
    if ev.size and ev.min() < -tol * max(1.0, np.abs(ev).max()):
        raise ValueError("covariance is not positive semidefinite")


def propagate_band(fit: FitResult, x):
    """First-order propagated standard deviation of the fitted curve at ``x``.

    Written out as the six distinct terms: three variances and three
    covariance cross terms.
    """
    check_psd(fit.covariance)
    P = partials(fit, x)
    S = _cov3(fit)
    fa, fb, fc = P[:, 0], P[:, 1], P[:, 2]
    var = (
        fa * fa * S[0, 0]
        + fb * fb * S[1, 1]
        + fc * fc * S[2, 2]
        + 2 * fa * fb * S[0, 1]
        + 2 * fa * fc * S[0, 2]
        + 2 * fb * fc * S[1, 2]
    )
    return np.sqrt(np.maximum(var, 0.0))


def band(fit: FitResult, x, k=3.0):
    """``(f, f - k sigma, f + k sigma)`` on grid ``x``."""
    f = fit.predict(x)
    s = propagate_band(fit, x)
    return f, f - k * s, f + k * s


def band_table(fit: FitResult, x, k=3.0):
    """Rows ``(x, fit, lo, hi)`` for plot-data CSVs."""
    f, lo, hi = band(fit, x, k)
    return np.stack([np.asarray(x, dtype=np.float64), f, lo, hi], axis=1)


# --------------------------------------------------------------------------
# iso-FLOP bands and optimal scaling
# --------------------------------------------------------------------------


@dataclass
class Bands:
    bands: dict  # budget -> [RunRecord]
    unassigned: list
    empty: list


def band_runs(records, budgets, rel_tol=0.05) -> Bands:
    """Assign each record to the nearest budget in log C if within ``log(1 + rel_tol)``."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    budgets = sorted(float(b) for b in budgets)
    lb = np.log(budgets)
    lim = math.log1p(rel_tol)
    out = {b: [] for b in budgets}
    unassigned = []
    for r in records:
        d = np.abs(math.log(r.C) - lb)
        i = int(np.argmin(d))
        if d[i] <= lim + 1e-12:
            out[budgets[i]].append(r)
        else:
            unassigned.append(r)
    return Bands(out, unassigned, [b for b in budgets if not out[b]])


@dataclass
class BandOptimum:
    budget: float
    n_opt: float
    n_log_sigma: float
    d_opt: float
    d_log_sigma: float
    l_opt: float
    l_sigma: float


@dataclass
class ScalingResult:
    optima: list
    n_fit: FitResult
    d_fit: FitResult
    l_fit: FitResult | None
    l_fit_const: FitResult | None
    excluded: list
    reference: dict = field(default_factory=lambda: dict(REFERENCE))

    def to_dict(self):
        return {
            "optima": [o.__dict__ for o in self.optima],
            "n_fit": self.n_fit.to_dict(),
            "d_fit": self.d_fit.to_dict(),
            "l_fit": self.l_fit.to_dict() if self.l_fit else None,
            "l_fit_const": self.l_fit_const.to_dict() if self.l_fit_const else None,
            "excluded": self.excluded,
            "reference": self.reference,
        }


def _band_weights(values, log_sigmas):
    s = np.asarray(values) * np.asarray(log_sigmas)
    floor = 1e-9 * np.abs(values).max()
    return 1.0 / np.maximum(s, floor) ** 2


def band_optimum(budget, recs):
    """Parabola vertices in N and in D for one band; raises DegenerateFit."""
    N = np.array([r.N for r in recs], dtype=np.float64)
    D = np.array([r.D for r in recs], dtype=np.float64)
    L = np.array([r.eval_loss for r in recs], dtype=np.float64)
    fn = fit_parabola(N, L)
    fd = fit_parabola(D, L)
    for f, what in ((fn, "N"), (fd, "D")):
        if "edge" in f.flags:
            raise DegenerateFit(f"band {budget:.3g}: {what} minimum at band edge", f)
    return BandOptimum(float(budget), math.exp(fn["log_x_opt"]), fn.stderr("log_x_opt"),
                       math.exp(fd["log_x_opt"]), fd.stderr("log_x_opt"), fn["L_opt"], fn.stderr("L_opt"))


def optimal_scaling(bands) -> ScalingResult:
    """Per-band optima then weighted ``a C^b`` fits for N_opt, D_opt and L_opt."""
    groups = bands.bands if isinstance(bands, Bands) else bands
    optima, excluded = [], []
    for budget in sorted(groups):
        recs = groups[budget]
        try:
            optima.append(band_optimum(budget, recs))
        except (DegenerateFit, ValueError) as exc:
            excluded.append({"budget": float(budget), "reason": str(exc)})
    if len(optima) < 3:
        raise DegenerateFit(f"need >= 3 usable bands, have {len(optima)}")
    C = np.array([o.budget for o in optima])
    N = np.array([o.n_opt for o in optima])
    D = np.array([o.d_opt for o in optima])
    L = np.array([o.l_opt for o in optima])
    n_fit = fit_power(C, N, weights=_band_weights(N, [o.n_log_sigma for o in optima]))
    d_fit = fit_power(C, D, weights=_band_weights(D, [o.d_log_sigma for o in optima]))
    lw = _band_weights(np.ones_like(L), [o.l_sigma for o in optima])
    l_fit = fit_power(C, L, weights=lw)
    l_const = fit_power(C, L, with_constant=True, weights=lw) if len(optima) >= 4 else None
    return ScalingResult(optima, n_fit, d_fit, l_fit, l_const, excluded)


# --------------------------------------------------------------------------
# L(N, D) surface
# --------------------------------------------------------------------------


def surface(p, N, D):
    E, A, alpha, B, beta = p
    return E + A / N**alpha + B / D**beta


def fit_surface(records=None, N=None, D=None, L=None, max_iter=200) -> FitResult:
    """Fit ``E + A/N^alpha + B/D^beta`` with a multi-start damped Gauss-Newton."""
    if records is not None:
        N = [r.N for r in records]
        D = [r.D for r in records]
        L = [r.eval_loss for r in records]
    N, D, L = (np.asarray(v, dtype=np.float64) for v in (N, D, L))
    o = np.lexsort((L, D, N))
    N, D, L = N[o], D[o], L[o]
    if len(L) < 8:
        raise ValueError("need at least 8 records")
    if len(np.unique(N)) < 3 or len(np.unique(D)) < 3:
        raise DegenerateFit("rank-deficient design: need >= 3 distinct N and D")
    gN, gD = math.exp(np.log(N).mean()), math.exp(np.log(D).mean())
    n, d = N / gN, D / gD
    ln, ld = np.log(n), np.log(d)

    def resid(p):
        return p[0] + p[1] * n ** -p[2] + p[3] * d ** -p[4] - L

    def jac(p):
        na, db = n ** -p[2], d ** -p[4]
        return np.stack([np.ones_like(n), na, -p[1] * na * ln, db, -p[3] * db * ld], axis=1)

    best = None
    for alpha in (0.2, 0.5, 1.0):
        for beta in (0.2, 0.5, 1.0):
            for E0 in (0.0, 0.5 * L.min()):
                X = np.stack([n**-alpha, d**-beta], axis=1)
                (A0, B0), *_ = np.linalg.lstsq(X, L - E0, rcond=None)
                lm = levenberg_marquardt(resid, jac, [E0, A0, alpha, B0, beta], max_iter=max_iter)
                if best is None or lm.ssr < best.ssr - 1e-15 * max(best.ssr, 1e-300):
                    best = lm
    cov_s, s2 = _covariance(best.jac, best.ssr, len(L), 5)
    E, As, alpha, Bs, beta = best.params
    A = As * gN**alpha
    B = Bs * gD**beta
    T = np.eye(5)
    T[1, 1], T[1, 2] = gN**alpha, A * math.log(gN)
    T[3, 3], T[3, 4] = gD**beta, B * math.log(gD)
    cov = T @ cov_s @ T.T
    flags = [] if best.converged else ["unconverged"]
    return FitResult("chinchilla-surface", [E, A, alpha, B, beta], 0.5 * (cov + cov.T), s2, len(L),
                     best.converged, flags, {"ssr": best.ssr})


def golden_section(f, lo, hi, tol=1e-10, max_iter=500):
    """Minimizer of a unimodal ``f`` on ``[lo, hi]``."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def optimal_allocation(fit: FitResult, budget, flops_per_example, n_min=1.0, n_max=None):
    """``(N_opt, D_opt)`` minimizing the fitted surface on the iso-FLOP curve.

    ``flops_per_example`` maps N to forward FLOPs per example for the shape
    family, so ``D = budget / flops_per_example(N)``.
    """
    if fit.form != "chinchilla-surface":
        raise ValueError("needs a surface fit")
    if flops_per_example(n_min) > budget:
        raise ValueError("budget below the smallest feasible model")
    if n_max is None:
        hi = n_min
        while flops_per_example(hi * 2) <= budget and hi < 1e30:
            hi *= 2
        n_max = hi * 2
    lo_l, hi_l = math.log(n_min), math.log(n_max)

    def obj(logn):
        Nv = math.exp(logn)
        Dv = budget / flops_per_example(Nv)
        return float(surface(fit.params, Nv, Dv))

    ln = golden_section(obj, lo_l, hi_l)
    Nv = math.exp(ln)
    return Nv, budget / flops_per_example(Nv)


# --------------------------------------------------------------------------
# iso-loss data equivalence
# --------------------------------------------------------------------------


@dataclass
class IsoLoss:
    loss: np.ndarray
    ratio: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    reference: dict = field(default_factory=lambda: dict(REFERENCE["observed_per_demonstrated"]))


def _invert(fit: FitResult, L):
    a, b, c = fit.params
    u = (L - c) / a
    m = u ** (1.0 / b)
    # gradient of log m with respect to (a, b, c)
    g = np.stack([-1.0 / (a * b) * np.ones_like(L), -np.log(u) / b**2, -1.0 / (b * (L - c))], axis=1)
    var = np.einsum("ni,ij,nj->n", g, _cov3(fit), g)
    return m, np.maximum(var, 0.0)


def _loss_span(fit):
    if "x_range" in fit.meta:
        ends = fit.predict(np.asarray(fit.meta["x_range"]))
        return float(ends.min()), float(ends.max())
    return -math.inf, math.inf


def iso_loss_equivalence(fit_without_av: FitResult, fit_with_av: FitResult, loss_range=None, num=50, k=3.0):
    """Observed miles over demonstrated miles needed to reach each loss.

    Both inputs are ``power+const`` fits of loss against training miles. The
    loss grid is limited to the range both fits cover (and above both
    asymptotes). Bands are ``k`` sigma in log space, fits treated independent.
    """
    for f in (fit_without_av, fit_with_av):
        if f.form != "power+const":
            raise ValueError("iso-loss needs power+const fits")
    lo1, hi1 = _loss_span(fit_without_av)
    lo2, hi2 = _loss_span(fit_with_av)
    lo, hi = max(lo1, lo2), min(hi1, hi2)
    if loss_range is not None:
        lo, hi = max(lo, loss_range[0]), min(hi, loss_range[1])
    floor = max(fit_without_av["c"], fit_with_av["c"])
    lo = max(lo, floor + 1e-9 * max(1.0, abs(floor)))
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError("empty common loss range")
    L = np.linspace(lo, hi, num)
    m_obs, v_obs = _invert(fit_without_av, L)
    m_dem, v_dem = _invert(fit_with_av, L)
    ratio = m_obs / m_dem
    s = np.sqrt(v_obs + v_dem)
    return IsoLoss(L, ratio, ratio * np.exp(-k * s), ratio * np.exp(k * s))


# --------------------------------------------------------------------------
# records IO
# --------------------------------------------------------------------------


def load_records(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                d = json.loads(line)
                out.append(RunRecord.from_dict(d.get("record", d)))
    return out


__all__ = [
    "RunRecord", "FitResult", "DegenerateFit", "REFERENCE", "levenberg_marquardt", "fit_parabola", "fit_power",
    "propagate_band", "band", "band_table", "band_runs", "Bands", "optimal_scaling", "ScalingResult", "fit_surface",
    "surface", "optimal_allocation", "golden_section", "iso_loss_equivalence", "IsoLoss", "load_records", "ssr",
    "partials", "check_psd", "band_optimum", "BandOptimum",
]
