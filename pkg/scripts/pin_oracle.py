"""Regenerate the pinned reference cost v*(-1) for the built-in example.

Two independent routes are evaluated and must agree:

* quadrature of -v'(x) over [-1, 0] on the left cell plus the closed-form
  right-cell value (sqrt(3) - 1) at x = 0;
* closed-loop integration of the analytic feedback, accumulating the running
  cost, split at the cell boundary x = 0.

The printed value is frozen in ``tests/conftest.py`` as ``ORACLE_COST_M1``.
"""

import numpy as np
from scipy.integrate import quad, solve_ivp

C = np.sqrt(3.0) - 1.0


def neg_slope_left(x):
    return 2.0 * np.sqrt((x + 1.0) ** 2 + 2.0 * (x - 1.0) ** 2) - 2.0 * (x + 1.0)


def feedback(x):
    if x >= 0.0:
        return (1.0 - np.sqrt(3.0)) * (x - 1.0)
    return -x - 1.0 + np.sqrt(2.0 * (x - 1.0) ** 2 + (x + 1.0) ** 2)


def rhs(t, z):
    x = z[0]
    u = feedback(x)
    fx = (-x + 1.0 + u) if x >= 0.0 else (x + 1.0 + u)
    return [fx, 2.0 * (x - 1.0) ** 2 + u**2]


def main():
    integral, _ = quad(neg_slope_left, -1.0, 0.0, epsabs=1e-14, epsrel=1e-14)
    by_quadrature = C + integral

    def crossing(t, z):
        return z[0]

    crossing.terminal = True
    left = solve_ivp(rhs, (0.0, 50.0), [-1.0, 0.0], method="DOP853",
                     rtol=1e-13, atol=1e-15, events=crossing)
    right = solve_ivp(rhs, (left.t[-1], left.t[-1] + 40.0), [0.0, left.y[1, -1]],
                      method="DOP853", rtol=1e-13, atol=1e-15)
    by_integration = right.y[1, -1]

    print(f"quadrature : {by_quadrature:.15f}")
    print(f"integration: {by_integration:.15f}")
    assert abs(by_quadrature - by_integration) < 1e-10


if __name__ == "__main__":
    main()
