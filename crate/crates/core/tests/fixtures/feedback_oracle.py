"""Independent evaluation of the mean-variance feedback law at t = 0.

Integrates the gain equations with an adaptive 8th-order scheme (scipy DOP853)
and writes the result next to this script. Regenerate with
    python3 feedback_oracle.py
"""
import json
import pathlib

import numpy as np
from scipy.integrate import solve_ivp

rho, c, sigma, lam, a, m0, theta, T = 0.2, 0.1, 0.3, 0.05, 1.0, 1.0, 0.5, 1.0
y0 = -1.5
ybar = lambda t: y0 + 0.3 * t  # linear, so node interpolation is exact
G = sigma**2
kappa_a = 2 * c + rho**2 / G
kappa_b = c + rho**2 / G
opts = dict(method="DOP853", rtol=1e-13, atol=1e-15, dense_output=True)

A = solve_ivp(lambda t, v: [-kappa_a * v[0]], (T, 0.0), [theta], **opts).sol


def psi_phi_rhs(t, v):
    psi, phi = v
    return [rho**2 * psi**2 - 2 * lam * G * A(t)[0] * psi, (rho * psi - lam) * phi]


PP = solve_ivp(psi_phi_rhs, (0.0, T), [theta, 1 - theta * (y0 - a)], **opts).sol


def b_rhs(t, v):
    psi, phi = PP(t)
    return [-(kappa_b * v[0] + c * (psi * ybar(t) + phi))]


B = solve_ivp(b_rhs, (T, 0.0), [1 - theta * (y0 + a)], **opts).sol

a0, b0 = A(0.0)[0], B(0.0)[0]
psi0, phi0 = PP(0.0)
u0 = -(rho * (a0 * m0 + b0) + rho * (psi0 * y0 + phi0)) / (a0 * G)
out = {
    "y0": y0,
    "ybar_slope": 0.3,
    "A0": a0,
    "B0": b0,
    "psiT": PP(T)[0],
    "phiT": PP(T)[1],
    "u0": u0,
}
path = pathlib.Path(__file__).with_name("feedback_oracle.json")
path.write_text(json.dumps(out, indent=2) + "\n")
print(json.dumps(out, indent=2))
