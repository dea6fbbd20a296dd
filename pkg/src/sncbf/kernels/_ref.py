"""Pure-numpy q-evaluation kernel (fallback backend).

Accumulations run in a fixed index order (feature ascending, hidden unit
ascending) so results are bitwise independent of how the caller chunks the
batch. The compiled backend mirrors the same order.
"""
from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def q_batch(theta0, b0, theta1, b1, sigma_sq, X, FX, GX, mask_s, mask_u,
            delta, gamma, margin, u_lo, u_hi):
    """Evaluate q1/q2/q3 on a batch of states under the zero-reference filter.

    X, FX: (B, n); GX: (B, n, m); mask_s/mask_u: (B,) booleans selecting which
    rows contribute q1/q2. The constraint a + b'u >= margin is resolved in
    closed form with u_ref = 0; rows where no input can help (b = 0 or the
    box-clamped input still violates) evaluate q3 at u = 0 and are flagged.

    Returns (q1, q2, q3, h, a, u, infeasible); q1/q2 are -inf off their masks.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    p, n = theta0.shape
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    m = GX.shape[2]

    A = np.tile(np.asarray(b0, dtype=np.float64), (B, 1))
    for k in range(n):
        A += X[:, k, None] * theta0[:, k]

    phi = np.where(A > 30.0, A, 0.0) + np.log1p(np.exp(np.where(A > 30.0, -A, A)))
    phi1 = 0.5 * (1.0 + np.tanh(0.5 * A))
    phi2 = phi1 * (1.0 - phi1)

    h = np.full(B, float(b1))
    for j in range(p):
        h += theta1[j] * phi[:, j]

    jac = np.zeros((B, n))
    for k in range(n):
        col = jac[:, k]
        for j in range(p):
            col += (theta1[j] * theta0[j, k]) * phi1[:, j]

    s = np.zeros(p)
    for k in range(n):
        s += sigma_sq[k] * theta0[:, k] ** 2
    ht = np.zeros(B)
    for j in range(p):
        ht += (theta1[j] * s[j]) * phi2[:, j]

    a = np.zeros(B)
    for k in range(n):
        a += jac[:, k] * FX[:, k]
    a += 0.5 * ht
    a += gamma * h

    bvec = np.zeros((B, m))
    for mm in range(m):
        col = bvec[:, mm]
        for k in range(n):
            col += jac[:, k] * GX[:, k, mm]

    slack = a - margin
    bb = np.zeros(B)
    for mm in range(m):
        bb += bvec[:, mm] ** 2
    active = slack < 0.0
    solvable = active & (bb > 0.0)
    infeasible = active & (bb == 0.0)
    scale = np.where(solvable, -slack / np.where(bb > 0.0, bb, 1.0), 0.0)
    u = bvec * scale[:, None]
    u = np.where(solvable[:, None], np.clip(u, u_lo, u_hi), u)
    bu = np.zeros(B)
    for mm in range(m):
        bu += bvec[:, mm] * u[:, mm]
    clamp_violation = solvable & (a + bu - margin < -1e-9)
    infeasible = infeasible | clamp_violation
    u[infeasible] = 0.0
    bu = np.where(infeasible, 0.0, bu)

    q3 = -(a + bu)
    q1 = np.where(mask_s, -h, -np.inf)
    q2 = np.where(mask_u, h + delta, -np.inf)
    return q1, q2, q3, h, a, u, infeasible
