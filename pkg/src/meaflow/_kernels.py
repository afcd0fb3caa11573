"""Compiled inner loops for the deconvolution forward-backward flow.

The deconvolution feature map only has frequencies ``|k| <= K``, so the
embedded signal, the loss and the per-particle velocities are all computed
from ``K + 1`` complex Fourier coefficients instead of the full grid.  The
loss uses Parseval's identity on the uniform grid and is exact up to
rounding.
"""
from __future__ import annotations

import numba as nb
import numpy as np

TWO_PI = 2.0 * np.pi


@nb.njit(cache=True)
def _phase_one(theta, j, order, cr, ci):
    # cr[k, j] + i ci[k, j] = exp(2 pi i k theta_j), built by repeated rotation
    c = np.cos(TWO_PI * theta[j])
    s = np.sin(TWO_PI * theta[j])
    cr[0, j] = 1.0
    ci[0, j] = 0.0
    for k in range(1, order + 1):
        cr[k, j] = cr[k - 1, j] * c - ci[k - 1, j] * s
        ci[k, j] = cr[k - 1, j] * s + ci[k - 1, j] * c


@nb.njit(cache=True)
def _phases(theta, order, cr, ci):
    for j in range(theta.shape[0]):
        _phase_one(theta, j, order, cr, ci)


@nb.njit(cache=True)
def _residual(w, q, cr, ci, yr, yi, order, rr, ri):
    # r_k = sum_j q_j w_j exp(-2 pi i k theta_j) - y_hat_k
    m = w.shape[0]
    for k in range(order + 1):
        a = 0.0
        b = 0.0
        for j in range(m):
            a += q[j] * w[j] * cr[k, j]
            b -= q[j] * w[j] * ci[k, j]
        rr[k] = a - yr[k]
        ri[k] = b - yi[k]


@nb.njit(cache=True)
def _energy(w, q, rr, ri, order, rest, lam, reg_weight):
    sq = rr[0] * rr[0] + ri[0] * ri[0]
    for k in range(1, order + 1):
        sq += 2.0 * (rr[k] * rr[k] + ri[k] * ri[k])
    reg = 0.0
    for j in range(w.shape[0]):
        reg += q[j] * abs(w[j])
    return (sq + rest) / (2.0 * lam) + reg_weight * reg


@nb.njit(cache=True)
def deconv_smooth_velocity(w, theta, q, yr, yi, lam, order):
    """Loss-part velocity ``(v_w, v_theta)`` for every particle."""
    m = w.shape[0]
    cr = np.empty((order + 1, m))
    ci = np.empty((order + 1, m))
    rr = np.empty(order + 1)
    ri = np.empty(order + 1)
    _phases(theta, order, cr, ci)
    _residual(w, q, cr, ci, yr, yi, order, rr, ri)
    out = np.empty((m, 2))
    for j in range(m):
        g = rr[0]
        dg = 0.0
        for k in range(1, order + 1):
            re = rr[k] * cr[k, j] - ri[k] * ci[k, j]
            im = rr[k] * ci[k, j] + ri[k] * cr[k, j]
            g += 2.0 * re
            dg -= 2.0 * TWO_PI * k * im
        out[j, 0] = -g / lam
        out[j, 1] = -w[j] * dg / lam
    return out


@nb.njit(cache=True)
def deconv_energy(w, theta, q, yr, yi, rest, lam, reg_weight, order):
    m = w.shape[0]
    cr = np.empty((order + 1, m))
    ci = np.empty((order + 1, m))
    rr = np.empty(order + 1)
    ri = np.empty(order + 1)
    _phases(theta, order, cr, ci)
    _residual(w, q, cr, ci, yr, yi, order, rr, ri)
    return _energy(w, q, rr, ri, order, rest, lam, reg_weight)


STATUS_RUNNING = 0
STATUS_DIVERGED = 1
STATUS_CONVERGED = 2
STATUS_INCREASE = 3


@nb.njit(cache=True)
def deconv_fb_chunk(w, theta, q, yr, yi, rest, lam, reg_weight, dt, order, nsteps, tol,
                    w_prev, theta_prev, e_prev, slack):
    """Run up to ``nsteps`` forward-backward steps in place.

    Returns ``(energy, msv, done, status)``: per-step energy and mean squared
    min-norm velocity, both measured at the state *before* each step, the
    number of completed steps, and a status code.  The loop stops without
    moving when the energy is not finite (diverged) or when the mean squared
    velocity is at most ``tol`` (converged).

    ``w_prev``/``theta_prev`` hold the state before the most recent step and
    ``e_prev`` its energy (``nan`` if unknown).  When ``slack >= 0`` and a
    state's energy exceeds ``e_prev + slack * (1 + |e_prev|)``, the positions
    are restored from the backup and ``done`` counts that step as undone
    (it can be ``-1`` when the offending step belonged to the previous chunk).
    """
    m = w.shape[0]
    cr = np.empty((order + 1, m))
    ci = np.empty((order + 1, m))
    rr = np.empty(order + 1)
    ri = np.empty(order + 1)
    vw = np.empty(m)
    vth = np.empty(m)
    energy = np.empty(nsteps)
    msv = np.empty(nsteps)
    thresh = dt * reg_weight
    # phases only change for particles that moved; zero-weight particles do not
    _phases(theta, order, cr, ci)
    for s in range(nsteps):
        _residual(w, q, cr, ci, yr, yi, order, rr, ri)
        e = _energy(w, q, rr, ri, order, rest, lam, reg_weight)
        if slack >= 0.0 and np.isfinite(e_prev) and not e <= e_prev + slack * (1.0 + abs(e_prev)):
            for j in range(m):
                w[j] = w_prev[j]
                theta[j] = theta_prev[j]
            return energy, msv, s - 1, STATUS_INCREASE
        energy[s] = e
        if not np.isfinite(e):
            msv[s] = np.nan
            return energy, msv, s, STATUS_DIVERGED
        acc = 0.0
        for j in range(m):
            g = rr[0]
            dg = 0.0
            for k in range(1, order + 1):
                re = rr[k] * cr[k, j] - ri[k] * ci[k, j]
                im = rr[k] * ci[k, j] + ri[k] * cr[k, j]
                g += 2.0 * re
                dg -= 2.0 * TWO_PI * k * im
            vw[j] = -g / lam
            vth[j] = -w[j] * dg / lam
            if w[j] != 0.0:
                cw = vw[j] - reg_weight * np.sign(w[j])
            else:
                cw = vw[j] - min(reg_weight, max(-reg_weight, vw[j]))
            acc += cw * cw + vth[j] * vth[j]
        msv[s] = acc / m
        if msv[s] <= tol:
            return energy, msv, s, STATUS_CONVERGED
        e_prev = e
        for j in range(m):
            w_prev[j] = w[j]
            theta_prev[j] = theta[j]
            wn = w[j] + dt * vw[j]
            mag = abs(wn) - thresh
            w[j] = np.sign(wn) * mag if mag > 0.0 else 0.0
            if vth[j] != 0.0:
                theta[j] = theta[j] + dt * vth[j]
                _phase_one(theta, j, order, cr, ci)
    return energy, msv, nsteps, STATUS_RUNNING
