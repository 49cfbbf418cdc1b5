"""Bijections between unconstrained sampler coordinates and constrained
model quantities.

Positive scalars use log/exp (Jacobian handled inline by the model).  The
correlation-matrix Cholesky factor uses row-wise canonical partial
correlations through tanh: free parameters ``y[j,k]`` (1 <= k < j) map to

    w[j,k] = tanh(y[j,k])
    L[j,k] = w[j,k] * sqrt(1 - sum_{m<k} L[j,m]^2)
    L[j,j] = sqrt(1 - sum_{m<j} L[j,m]^2)

which is exactly the stick-breaking construction on the rows; every valid
correlation Cholesky factor is reached exactly once.
"""

from __future__ import annotations

import numpy as np


def corr_free_size(J):
    return J * (J - 1) // 2


def corr_chol_forward(y, J):
    """Map free parameters to the correlation Cholesky factor.

    Parameters
    ----------
    y : (J*(J-1)/2,) array, row-major strict lower triangle order
    J : matrix dimension

    Returns
    -------
    L : (J, J) lower-triangular factor with unit-norm rows
    W : (J, J) array of tanh values in the strict lower triangle (cached
        for the backward pass)
    """
    L = np.zeros((J, J))
    W = np.zeros((J, J))
    L[0, 0] = 1.0
    pos = 0
    for j in range(1, J):
        rem = 1.0
        for k in range(j):
            w = np.tanh(y[pos])
            pos += 1
            W[j, k] = w
            L[j, k] = w * np.sqrt(rem)
            rem *= 1.0 - w * w
        L[j, j] = np.sqrt(rem)
    return L, W


def corr_chol_logdet_terms(W, J, eta=1.0):
    """Combined log density of the LKJ prior *in the unconstrained
    coordinates*: LKJ(eta) on L plus the log-Jacobian of the transform.

    Collecting coefficients, the whole thing is

        sum_{j>k} (J - k + 2 eta - 2) / 2 * log(1 - w[j,k]^2)

    with k the 0-indexed column.  Returns (value, gradient wrt y) where the
    gradient uses d log(1-w^2)/dy = -2 w.
    """
    val = 0.0
    grads = []
    for j in range(1, J):
        for k in range(j):
            w = W[j, k]
            coef = 0.5 * (J - k + 2.0 * eta - 2.0)
            val += coef * np.log1p(-w * w)
            grads.append(-2.0 * coef * w)
    return val, np.asarray(grads)


def corr_chol_backward(Lbar, L, W, J):
    """Backpropagate sensitivities of L to the free parameters y.

    Row j of L depends only on that row's free parameters; with prefix
    products ``p_k = prod_{m<k}(1 - w_m^2)``:

        dL[j,k]/dy[j,t] = -L[j,k] w_t            (t < k, via sqrt(p_k), times (1-w_t^2) tanh')
        dL[j,k]/dy[j,k] = sqrt(p_k) (1 - w_k^2)
        dL[j,j]/dy[j,t] = -L[j,j] w_t
    """
    ybar = np.zeros(corr_free_size(J))
    pos = 0
    for j in range(1, J):
        rem = 1.0
        sqrt_p = np.empty(j)
        for k in range(j):
            sqrt_p[k] = np.sqrt(rem)
            rem *= 1.0 - W[j, k] * W[j, k]
        # suffix sums of Lbar[j,k] * L[j,k] over k = t+1 .. j (incl. diagonal)
        prods = Lbar[j, : j + 1] * L[j, : j + 1]
        suffix = np.cumsum(prods[::-1])[::-1]
        for t in range(j):
            w = W[j, t]
            ybar[pos] = Lbar[j, t] * sqrt_p[t] * (1.0 - w * w) - w * suffix[t + 1]
            pos += 1
    return ybar
