"""Hot loops of the exploitation part.

Every scenario branch of the exploitation part is, for affine modes at a
fixed parameter mean, a linear system ``x+ = A x + B u`` tracked with a
quadratic cost. :func:`rollout_cost_grad` evaluates all branches at once and
returns per-branch costs together with the adjoint gradient with respect to
the branch input sequences.

Two implementations exist with identical contracts: a numba kernel and a
vectorised numpy fallback. The active one is chosen at import time from
``DUALMPC_DISABLE_JIT`` (see :mod:`dualmpc._accel`).
"""

import numpy as np

from ._accel import USE_JIT, njit


def rollout_cost_grad_numpy(A, B, x0, U, ref, Q, R, QN, w):
    """Batched linear rollouts with quadratic tracking cost.

    Args:
        A: ``(nb, n, n)`` per-branch state matrices.
        B: ``(nb, n, m)`` per-branch input matrices.
        x0: ``(nb, n)`` initial states (stage ``T`` of the tree).
        U: ``(nb, H, m)`` input sequences; ``U[:, 0]`` acts on ``x0``.
        ref: ``(H + 1, n)`` reference for predicted steps ``0..H``.
        Q, R, QN: stage state, stage input and terminal weights.
        w: ``(nb,)`` branch weights used for the gradient.

    Returns:
        ``(costs, dU)`` with ``costs[b]`` the unweighted cost
        ``sum_{k=1}^{H-1} l(x_k, u_k) + l_N(x_H)`` of branch ``b`` and
        ``dU = d(sum_b w_b costs_b) / dU``. The input cost of ``U[:, 0]`` is
        not included (it belongs to the stage-``T`` cost of the tree node).
    """
    nb, H, m = U.shape
    n = x0.shape[1]
    X = np.empty((nb, H + 1, n))
    X[:, 0] = x0
    for k in range(H):
        X[:, k + 1] = np.einsum("bij,bj->bi", A, X[:, k]) + np.einsum("bij,bj->bi", B, U[:, k])
    E = X - ref[None, :, :]
    EQ = E[:, 1:H] @ Q
    UR = U[:, 1:H] @ R
    costs = (EQ * E[:, 1:H]).sum(axis=(1, 2)) + (UR * U[:, 1:H]).sum(axis=(1, 2))
    eN = E[:, H]
    costs = costs + np.einsum("bi,ij,bj->b", eN, QN, eN)

    dU = np.empty_like(U)
    lam = 2.0 * eN @ QN.T
    Bt = np.transpose(B, (0, 2, 1))
    At = np.transpose(A, (0, 2, 1))
    for k in range(H - 1, 0, -1):
        dU[:, k] = 2.0 * U[:, k] @ R.T + np.einsum("bij,bj->bi", Bt, lam)
        lam = 2.0 * E[:, k] @ Q.T + np.einsum("bij,bj->bi", At, lam)
    dU[:, 0] = np.einsum("bij,bj->bi", Bt, lam)
    dU *= w[:, None, None]
    return costs, dU


@njit
def rollout_cost_grad_jit(A, B, x0, U, ref, Q, R, QN, w):
    nb, H, m = U.shape
    n = x0.shape[1]
    costs = np.zeros(nb)
    dU = np.zeros_like(U)
    X = np.empty((H + 1, n))
    E = np.empty((H + 1, n))
    lam = np.empty(n)
    nxt = np.empty(n)
    for b in range(nb):
        for i in range(n):
            X[0, i] = x0[b, i]
        for k in range(H):
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += A[b, i, j] * X[k, j]
                for j in range(m):
                    s += B[b, i, j] * U[b, k, j]
                X[k + 1, i] = s
        for k in range(H + 1):
            for i in range(n):
                E[k, i] = X[k, i] - ref[k, i]
        c = 0.0
        for k in range(1, H):
            for i in range(n):
                for j in range(n):
                    c += E[k, i] * Q[i, j] * E[k, j]
            for i in range(m):
                for j in range(m):
                    c += U[b, k, i] * R[i, j] * U[b, k, j]
        for i in range(n):
            for j in range(n):
                c += E[H, i] * QN[i, j] * E[H, j]
        costs[b] = c

        wb = w[b]
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += QN[i, j] * E[H, j]
            lam[i] = 2.0 * s
        for k in range(H - 1, -1, -1):
            for i in range(m):
                s = 0.0
                for j in range(n):
                    s += B[b, j, i] * lam[j]
                if k > 0:
                    for j in range(m):
                        s += 2.0 * R[i, j] * U[b, k, j]
                dU[b, k, i] = wb * s
            if k > 0:
                for i in range(n):
                    s = 0.0
                    for j in range(n):
                        s += A[b, j, i] * lam[j] + 2.0 * Q[i, j] * E[k, j]
                    nxt[i] = s
                for i in range(n):
                    lam[i] = nxt[i]
    return costs, dU


def rollout_cost_grad(A, B, x0, U, ref, Q, R, QN, w):
    """Dispatch to the numba kernel or the numpy fallback."""
    if USE_JIT:
        return rollout_cost_grad_jit(A, B, x0, U, ref, Q, R, QN, w)
    return rollout_cost_grad_numpy(A, B, x0, U, ref, Q, R, QN, w)


def condense_numpy(A, B, x0, ref, Q, R, QN):
    """Quadratic form of each branch cost in its input sequence.

    For branch ``b`` the cost of :func:`rollout_cost_grad_numpy` equals
    ``U^T H_b U / 2 + l_b^T U + c_b`` with ``U`` the flattened ``(H, m)``
    input sequence, where ``H`` is ``ref.shape[0] - 1``.

    Returns:
        ``(Hs, ls, cs)`` of shapes ``(nb, H m, H m)``, ``(nb, H m)``, ``(nb,)``.
    """
    nb, n, m = B.shape
    H = ref.shape[0] - 1
    Qbar = np.zeros((H * n, H * n))
    for k in range(H):
        Qbar[k * n : (k + 1) * n, k * n : (k + 1) * n] = QN if k == H - 1 else Q
    Rbar = np.zeros((H * m, H * m))
    for k in range(1, H):
        Rbar[k * m : (k + 1) * m, k * m : (k + 1) * m] = R
    r = ref[1:].ravel()
    Hs = np.empty((nb, H * m, H * m))
    ls = np.empty((nb, H * m))
    cs = np.empty(nb)
    for b in range(nb):
        powers = [np.eye(n)]
        for _ in range(H):
            powers.append(A[b] @ powers[-1])
        markov = [P @ B[b] for P in powers[:H]]
        G = np.zeros((H * n, H * m))
        for k in range(1, H + 1):
            for i in range(k):
                G[(k - 1) * n : k * n, i * m : (i + 1) * m] = markov[k - 1 - i]
        e = np.concatenate([P @ x0[b] for P in powers[1:]]) - r
        QG = Qbar @ G
        Hs[b] = 2.0 * (G.T @ QG + Rbar)
        ls[b] = 2.0 * (QG.T @ e)
        cs[b] = e @ Qbar @ e
    return Hs, ls, cs


@njit
def condense_jit(A, B, x0, ref, Q, R, QN):
    nb, n, m = B.shape
    H = ref.shape[0] - 1
    Hs = np.zeros((nb, H * m, H * m))
    ls = np.zeros((nb, H * m))
    cs = np.zeros(nb)
    markov = np.empty((H, n, m))
    QM = np.empty((H, n, m))  # Q @ markov[p]
    QNM = np.empty((H, n, m))
    free = np.empty((H + 1, n))  # unforced response minus reference
    We = np.empty(n)
    x = np.empty(n)
    nxt = np.empty(n)
    for b in range(nb):
        for i in range(n):
            for j in range(m):
                markov[0, i, j] = B[b, i, j]
        for p in range(1, H):
            for i in range(n):
                for j in range(m):
                    s = 0.0
                    for q in range(n):
                        s += A[b, i, q] * markov[p - 1, q, j]
                    markov[p, i, j] = s
        for p in range(H):
            for i in range(n):
                for j in range(m):
                    s = 0.0
                    t = 0.0
                    for q in range(n):
                        s += Q[i, q] * markov[p, q, j]
                        t += QN[i, q] * markov[p, q, j]
                    QM[p, i, j] = s
                    QNM[p, i, j] = t
        for i in range(n):
            x[i] = x0[b, i]
        for k in range(1, H + 1):
            for i in range(n):
                s = 0.0
                for q in range(n):
                    s += A[b, i, q] * x[q]
                nxt[i] = s
            for i in range(n):
                x[i] = nxt[i]
                free[k, i] = x[i] - ref[k, i]
        c = 0.0
        for k in range(1, H + 1):
            W = QN if k == H else Q
            WM = QNM if k == H else QM
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += W[i, j] * free[k, j]
                We[i] = s
                c += free[k, i] * s
            # input ii reaches x_k through markov[k - 1 - ii]
            for ii in range(k):
                pi = k - 1 - ii
                for a in range(m):
                    s = 0.0
                    for i in range(n):
                        s += markov[pi, i, a] * We[i]
                    ls[b, ii * m + a] += 2.0 * s
                for jj in range(ii + 1):
                    pj = k - 1 - jj
                    for a in range(m):
                        for d in range(m):
                            s = 0.0
                            for i in range(n):
                                s += markov[pi, i, a] * WM[pj, i, d]
                            Hs[b, ii * m + a, jj * m + d] += 2.0 * s
        for ii in range(H):
            for jj in range(ii):
                for a in range(m):
                    for d in range(m):
                        Hs[b, jj * m + d, ii * m + a] = Hs[b, ii * m + a, jj * m + d]
        for k in range(1, H):
            for a in range(m):
                for d in range(m):
                    Hs[b, k * m + a, k * m + d] += 2.0 * R[a, d]
        cs[b] = c
    return Hs, ls, cs


def condense(A, B, x0, ref, Q, R, QN):
    """Dispatch to the numba kernel or the numpy fallback."""
    if USE_JIT:
        return condense_jit(A, B, x0, ref, Q, R, QN)
    return condense_numpy(A, B, x0, ref, Q, R, QN)
