"""Closed-form benchmark solution on the unit cube centred at the origin.

The benchmark couples a potential u with two carrier densities p and n
through

    -Lap(u) - (p - n)                          = F1
    dp/dt - div(grad(p) + c * p * grad(u))     = F2
    dn/dt - div(grad(n) - c * n * grad(u))     = F3

on Omega = [-1/2, 1/2]^3 with c = 0.179, Dirichlet data and sources taken
from the exact fields

    u = (1 - exp(-t)) * cos(pi x) cos(pi y) cos(pi z)
    p = 3 pi^2 sin(t)  * (1 + cos(pi x) cos(pi y) cos(pi z) / 2)
    n = 3 pi^2 sin(2t) * (1 - cos(pi x) cos(pi y) cos(pi z) / 2)

and p = n = 0 at t = 0.  The source expressions below are hand-derived; a
finite-difference residual test guards the derivation.  Note the asymmetry
of the model: the potential equation couples with unit charges while the
fluxes drift with +-c.
"""

from __future__ import annotations

import numpy as np

from .assembly import SchemeConfig
from .quadrature import rule_for_order

__all__ = [
    "C_DRIFT",
    "exact_eval",
    "source_terms",
    "error_norms",
    "scheme_config",
    "transient_problem",
]

C_DRIFT = 0.179
_3PI2 = 3.0 * np.pi**2

FIELDS = ("u", "p", "n")


def _as_points(x):
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError("points must have three coordinates")
    return pts, single


def _cosprod(pts):
    return np.cos(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1]) * np.cos(np.pi * pts[:, 2])


def _grad_cosprod(pts):
    cx, cy, cz = (np.cos(np.pi * pts[:, d]) for d in range(3))
    sx, sy, sz = (np.sin(np.pi * pts[:, d]) for d in range(3))
    return -np.pi * np.stack((sx * cy * cz, cx * sy * cz, cx * cy * sz), axis=1)


def exact_eval(field: str, x, t: float):
    """Value, gradient and time derivative of one exact field.

    Accepts a single point (3,) or a batch (Q, 3); returns arrays of
    matching leading shape.
    """
    if field not in FIELDS:
        raise ValueError(f"unknown field {field!r}, expected one of {FIELDS}")
    pts, single = _as_points(x)
    c = _cosprod(pts)
    gc = _grad_cosprod(pts)
    if field == "u":
        amp = 1.0 - np.exp(-t)
        val = amp * c
        grad = amp * gc
        dt = np.exp(-t) * c
    elif field == "p":
        val = _3PI2 * np.sin(t) * (1.0 + 0.5 * c)
        grad = 0.5 * _3PI2 * np.sin(t) * gc
        dt = _3PI2 * np.cos(t) * (1.0 + 0.5 * c)
    else:
        val = _3PI2 * np.sin(2.0 * t) * (1.0 - 0.5 * c)
        grad = -0.5 * _3PI2 * np.sin(2.0 * t) * gc
        dt = 2.0 * _3PI2 * np.cos(2.0 * t) * (1.0 - 0.5 * c)
    if single:
        return float(val[0]), grad[0], float(dt[0])
    return val, grad, dt


def source_terms(x, t: float):
    """Right-hand sides (F1, F2, F3) evaluated pointwise.

    Uses Lap(cos cos cos) = -3 pi^2 cos cos cos and the product rule
    div(v grad u) = grad v . grad u + v Lap u on the closed forms above.
    """
    pts, single = _as_points(x)
    c = _cosprod(pts)
    gc = _grad_cosprod(pts)
    gc2 = np.einsum("qd,qd->q", gc, gc)
    amp = 1.0 - np.exp(-t)
    st, s2t = np.sin(t), np.sin(2.0 * t)
    ct, c2t = np.cos(t), np.cos(2.0 * t)

    p_val = _3PI2 * st * (1.0 + 0.5 * c)
    n_val = _3PI2 * s2t * (1.0 - 0.5 * c)

    # -Lap(u) = 3 pi^2 amp * c
    f1 = _3PI2 * amp * c - (p_val - n_val)

    # F2 = dp/dt - Lap(p) - c_drift * (grad p . grad u + p Lap u)
    lap_p = -0.5 * _3PI2 * st * _3PI2 * c
    gradp_gradu = 0.5 * _3PI2 * st * amp * gc2
    p_lap_u = p_val * (-_3PI2 * amp * c)
    f2 = _3PI2 * ct * (1.0 + 0.5 * c) - lap_p - C_DRIFT * (gradp_gradu + p_lap_u)

    # F3 = dn/dt - Lap(n) + c_drift * (grad n . grad u + n Lap u)
    lap_n = 0.5 * _3PI2 * s2t * _3PI2 * c
    gradn_gradu = -0.5 * _3PI2 * s2t * amp * gc2
    n_lap_u = n_val * (-_3PI2 * amp * c)
    f3 = 2.0 * _3PI2 * c2t * (1.0 - 0.5 * c) - lap_n + C_DRIFT * (gradn_gradu + n_lap_u)

    if single:
        return float(f1[0]), float(f2[0]), float(f3[0])
    return f1, f2, f3


def error_norms(mesh, dofs, field: str, t: float, order: int = 5):
    """L2 and H1-seminorm errors of a nodal vector against an exact field.

    Per-element quadrature of the stated order (default degree 5, enough for
    the degree-4 products that arise from P1 differences).
    """
    dofs = np.asarray(dofs, dtype=float)
    if dofs.shape != (mesh.n_nodes,):
        raise ValueError("dof vector does not match the mesh")
    pts, wts = rule_for_order(order)
    corners = mesh.nodes[mesh.tets]
    phys = np.einsum("qk,mkd->mqd", pts, corners)
    flat = phys.reshape(-1, 3)
    exact_val, exact_grad, _ = exact_eval(field, flat, t)
    exact_val = exact_val.reshape(phys.shape[:2])
    exact_grad = exact_grad.reshape(phys.shape[0], phys.shape[1], 3)

    local = dofs[mesh.tets]                                    # (M, 4)
    uh = local @ pts.T                                         # (M, Q)
    geo = mesh.geometry
    guh = np.einsum("mk,mkd->md", local, geo.grad_lambda)      # (M, 3)

    dv = uh - exact_val
    l2sq = float(np.einsum("m,mq,q->", geo.volumes, dv * dv, wts))
    dg = guh[:, None, :] - exact_grad
    h1sq = float(np.einsum("m,mq,q->", geo.volumes, np.einsum("mqd,mqd->mq", dg, dg), wts))
    return np.sqrt(max(l2sq, 0.0)), np.sqrt(max(h1sq, 0.0))


def scheme_config(scheme: str = "fem", **overrides) -> SchemeConfig:
    """Scheme configuration for the benchmark: unit charges, +-c drift."""
    kwargs = dict(
        scheme=scheme,
        charges=(1.0, -1.0),
        drift=(C_DRIFT, -C_DRIFT),
    )
    kwargs.update(overrides)
    return SchemeConfig(**kwargs)


def transient_problem(T: float, tau: float, **overrides):
    """TransientConfig wired to the benchmark's data.

    Boundary data comes from the exact traces, sources from the derived
    right-hand sides and both carriers start at zero.
    """
    from .timestepper import TransientConfig

    kwargs = dict(
        T=T,
        tau=tau,
        initial_p1=lambda pts: np.zeros(len(pts)),
        initial_p2=lambda pts: np.zeros(len(pts)),
        g_u=lambda pts, t: exact_eval("u", pts, t)[0],
        g_p1=lambda pts, t: exact_eval("p", pts, t)[0],
        g_p2=lambda pts, t: exact_eval("n", pts, t)[0],
        f=lambda pts, t: source_terms(pts, t)[0],
        F1=lambda pts, t: source_terms(pts, t)[1],
        F2=lambda pts, t: source_terms(pts, t)[2],
    )
    kwargs.update(overrides)
    return TransientConfig(**kwargs)
