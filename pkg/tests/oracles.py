"""Independent reference values used by the test suite.

Nothing here touches the kwl discretization: the interval problems are
solved by ODE shooting with adaptive integration.
"""
import math

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq


def _shoot(s, a0, p, xi_max):
    """Integrate v'' = a0 v - |v|^{p-2} v from v(0)=s, v'(0)=0 to the first zero.

    Extra states accumulate int v'^2, int v^2 and int |v|^p.
    """
    def rhs(_, y):
        v, dv = y[0], y[1]
        return [dv, a0 * v - abs(v) ** (p - 2) * v, dv * dv, v * v, abs(v) ** p]

    def hit(_, y):
        return y[0]
    hit.terminal = True
    hit.direction = -1
    sol = solve_ivp(rhs, (0.0, xi_max), [s, 0.0, 0.0, 0.0, 0.0], events=hit,
                    rtol=1e-12, atol=1e-14, method="DOP853")
    if sol.t_events[0].size == 0:
        return math.inf, None
    return float(sol.t_events[0][0]), sol.y_events[0][0]


def _amplitude_for_zero(target, a0, p):
    """Initial height whose positive profile first vanishes at ``target``."""
    lo, hi = 1e-3, 1.0
    while _shoot(hi, a0, p, 50 * target)[0] > target:
        lo, hi = hi, 2 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _shoot(mid, a0, p, 50 * target)[0] > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


def kirchhoff_interval_energy(halfwidth, a0, alpha, p):
    """Energy of the positive solution of
    ``-(alpha int u'^2 + 1) u'' + a0 u = |u|^{p-2} u`` on ``(-r, r)``, zero at both ends.

    With ``c`` the Kirchhoff coefficient, ``u(x) = v(x / sqrt(c))`` where
    ``v`` solves the local problem on ``(-r/sqrt(c), r/sqrt(c))``.
    """
    def integrals(c):
        X = halfwidth / math.sqrt(c)
        s = _amplitude_for_zero(X, a0, p)
        _, y = _shoot(s, a0, p, 50 * X)
        dv2, v2, vp = 2 * y[2], 2 * y[3], 2 * y[4]
        # back to x: dx = sqrt(c) dxi, u' = v'/sqrt(c)
        rc = math.sqrt(c)
        return dv2 / rc, v2 * rc, vp * rc

    c = brentq(lambda c: c - 1.0 - alpha * integrals(c)[0], 1.0, 1.0 + 1e3 * max(alpha, 1e-3) + 10,
               xtol=1e-14, rtol=1e-14)
    I, L2, Lp = integrals(c)
    return 0.25 * alpha * I * I + 0.5 * (I + a0 * L2) - Lp / p


def soliton_sobolev_constant(p):
    """Best ``H^1(R) -> L^p`` constant from the explicit sech ground state."""
    w = lambda x: ((p / 2.0) / np.cosh((p - 2.0) * x / 2.0) ** 2) ** (1.0 / (p - 2.0))
    # the profile is below 1e-30 well before x = 80
    Lp = 2 * quad(lambda x: w(x) ** p, 0, 80.0, limit=200)[0]
    # the ground state satisfies ||w||_H1^2 = ||w||_p^p
    return Lp ** (1.0 - 2.0 / p)
