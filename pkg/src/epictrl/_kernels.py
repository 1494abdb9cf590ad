"""Compiled inner loops for the yearly compartment update and the rate inversion.

Layout of one block's infected array is ``(care_stage, disease_stage)`` = (4, 5).
Care stages: 0 Unaware, 1 AwareNoART, 2 ARTNoVLS, 3 ARTVLS.
"""
import numpy as np
from numba import njit

UNAWARE, AWARE, ART_NOVLS, ART_VLS = 0, 1, 2, 3
N_CARE, N_DISEASE = 4, 5


@njit(cache=True)
def integrate_block(s0, x0, d0, lam, prep_factor, prep_pool, maturation,
                    bg_mort, stage_mort, progression, delta, gamma, rho, link,
                    targeting, n_sub, xout):
    """Forward-Euler integration of one block over one year.

    ``lam`` is held fixed for the year. Returns
    ``(s, dead, infections, tests, care_py, prep_py, ok)``; ``xout`` receives the
    infected array. ``ok`` is False if any compartment went negative.
    """
    dt = 1.0 / n_sub
    for c in range(N_CARE):
        for d in range(N_DISEASE):
            xout[c, d] = x0[c, d]
    s = s0
    dead = d0
    infections = 0.0
    tests = 0.0
    care_py = 0.0
    prep_py = 0.0
    ok = True
    dx = np.zeros((N_CARE, N_DISEASE))
    for _ in range(n_sub):
        new_inf = lam * prep_factor * s * dt
        s_death = bg_mort * s * dt
        unaware = 0.0
        in_care = 0.0
        for d in range(N_DISEASE):
            unaware += xout[UNAWARE, d]
            in_care += xout[ART_NOVLS, d] + xout[ART_VLS, d]
        for c in range(N_CARE):
            for d in range(N_DISEASE):
                dx[c, d] = 0.0
        diagnosed = 0.0
        for d in range(N_DISEASE):
            mort = (bg_mort + stage_mort[d]) * dt
            for c in range(N_CARE):
                x = xout[c, d]
                out = x * mort
                dx[c, d] -= out
                dead += out
                if d < N_DISEASE - 1:
                    p = x * progression[d] * dt
                    dx[c, d] -= p
                    dx[c, d + 1] += p
            dg = xout[UNAWARE, d] * delta[d] * dt
            dx[UNAWARE, d] -= dg
            dx[AWARE, d] += (1.0 - link) * dg
            dx[ART_NOVLS, d] += link * dg
            diagnosed += dg
            enter = xout[AWARE, d] * gamma[d] * dt
            dx[AWARE, d] -= enter
            dx[ART_NOVLS, d] += enter
            suppress = xout[ART_NOVLS, d] * gamma[d] * dt
            drop2 = xout[ART_NOVLS, d] * rho[d] * dt
            dx[ART_NOVLS, d] -= suppress + drop2
            dx[ART_VLS, d] += suppress
            drop3 = xout[ART_VLS, d] * rho[d] * dt
            dx[ART_VLS, d] -= drop3
            dx[AWARE, d] += drop2 + drop3
        dx[UNAWARE, 0] += new_inf

        if diagnosed > 0.0:
            positivity = targeting * unaware / (unaware + s)
            if positivity > 1.0:
                positivity = 1.0
            tests += diagnosed / positivity
        care_py += in_care * dt
        prep_py += prep_pool * s * dt
        infections += new_inf

        s = s + maturation * dt - new_inf - s_death
        dead += s_death
        if s < 0.0:
            ok = False
        for c in range(N_CARE):
            for d in range(N_DISEASE):
                xout[c, d] += dx[c, d]
                if xout[c, d] < 0.0:
                    ok = False
    return s, dead, infections, tests, care_py, prep_py, ok


@njit(cache=True)
def advance_all(S, X, D, lam, prep_factor, prep_pool, maturation, bg_mort,
                stage_mort, progression, delta, gamma, rho, link, targeting,
                n_sub):
    """Integrate every block for one year. Blocks are independent given ``lam``."""
    nj, nk = S.shape
    S1 = np.empty_like(S)
    X1 = np.empty_like(X)
    D1 = np.empty_like(D)
    tallies = np.zeros((nj, nk, 4))
    ok = np.ones((nj, nk), dtype=np.bool_)
    xout = np.empty((N_CARE, N_DISEASE))
    for j in range(nj):
        for k in range(nk):
            s, dead, inf, tst, care, prep, good = integrate_block(
                S[j, k], X[j, k], D[j, k], lam[j, k], prep_factor[j, k],
                prep_pool[j, k], maturation[j, k], bg_mort, stage_mort,
                progression, delta[j, k], gamma[j, k], rho[j, k], link,
                targeting, n_sub, xout)
            S1[j, k] = s
            D1[j, k] = dead
            for c in range(N_CARE):
                for d in range(N_DISEASE):
                    X1[j, k, c, d] = xout[c, d]
            tallies[j, k, 0] = inf
            tallies[j, k, 1] = tst
            tallies[j, k, 2] = care
            tallies[j, k, 3] = prep
            ok[j, k] = good
    return S1, X1, D1, tallies, ok


@njit(cache=True)
def _stage_sums(xout):
    unaware = 0.0
    art = 0.0
    total = 0.0
    for d in range(N_DISEASE):
        unaware += xout[UNAWARE, d]
        art += xout[ART_NOVLS, d] + xout[ART_VLS, d]
        for c in range(N_CARE):
            total += xout[c, d]
    return unaware, art, total


@njit(cache=True)
def invert_block(s0, x0, d0, lam, prep_factor, prep_pool, maturation, bg_mort,
                 stage_mort, progression, delta0, gamma0, rho0, link, targeting,
                 n_sub, a_u, a_art, m_cap, r_cap, tol, max_iter):
    """Bisection for the diagnostic multiplier, then the retention multiplier.

    The diagnostic multiplier ``m`` scales every stage's diagnostic rate. The
    retention multiplier ``r`` scales care entry by ``r`` and dropout by ``1/r``.
    Both are searched on ``[1, cap]``. Returns ``(m, r, sat_u, sat_art)``.
    """
    xout = np.empty((N_CARE, N_DISEASE))
    delta = np.empty(N_DISEASE)
    gamma = np.empty(N_DISEASE)
    rho = np.empty(N_DISEASE)

    integrate_block(s0, x0, d0, lam, prep_factor, prep_pool, maturation,
                    bg_mort, stage_mort, progression, delta0, gamma0, rho0,
                    link, targeting, n_sub, xout)
    u_base, art_base, pwh = _stage_sums(xout)
    abs_tol = tol * pwh

    m = 1.0
    sat_u = False
    if a_u > 0.0:
        if pwh <= 0.0:
            m = m_cap
            sat_u = True
        else:
            target = u_base - a_u * pwh
            for d in range(N_DISEASE):
                delta[d] = delta0[d] * m_cap
            integrate_block(s0, x0, d0, lam, prep_factor, prep_pool,
                            maturation, bg_mort, stage_mort, progression,
                            delta, gamma0, rho0, link, targeting, n_sub, xout)
            u_cap, _, _ = _stage_sums(xout)
            if u_cap - target > abs_tol:
                m = m_cap
                sat_u = True
            else:
                lo = 1.0
                hi = m_cap
                for _ in range(max_iter):
                    m = 0.5 * (lo + hi)
                    for d in range(N_DISEASE):
                        delta[d] = delta0[d] * m
                    integrate_block(s0, x0, d0, lam, prep_factor, prep_pool,
                                    maturation, bg_mort, stage_mort,
                                    progression, delta, gamma0, rho0, link,
                                    targeting, n_sub, xout)
                    u, _, _ = _stage_sums(xout)
                    f = u - target
                    if abs(f) <= abs_tol:
                        break
                    if f > 0.0:
                        lo = m
                    else:
                        hi = m
    for d in range(N_DISEASE):
        delta[d] = delta0[d] * m

    r = 1.0
    sat_art = False
    if a_art > 0.0:
        if pwh <= 0.0:
            r = r_cap
            sat_art = True
        else:
            integrate_block(s0, x0, d0, lam, prep_factor, prep_pool,
                            maturation, bg_mort, stage_mort, progression,
                            delta, gamma0, rho0, link, targeting, n_sub, xout)
            _, art_ref, _ = _stage_sums(xout)
            target = art_ref + a_art * pwh
            for d in range(N_DISEASE):
                gamma[d] = gamma0[d] * r_cap
                rho[d] = rho0[d] / r_cap
            integrate_block(s0, x0, d0, lam, prep_factor, prep_pool,
                            maturation, bg_mort, stage_mort, progression,
                            delta, gamma, rho, link, targeting, n_sub, xout)
            _, art_cap, _ = _stage_sums(xout)
            if target - art_cap > abs_tol:
                r = r_cap
                sat_art = True
            else:
                lo = 1.0
                hi = r_cap
                for _ in range(max_iter):
                    r = 0.5 * (lo + hi)
                    for d in range(N_DISEASE):
                        gamma[d] = gamma0[d] * r
                        rho[d] = rho0[d] / r
                    integrate_block(s0, x0, d0, lam, prep_factor, prep_pool,
                                    maturation, bg_mort, stage_mort,
                                    progression, delta, gamma, rho, link,
                                    targeting, n_sub, xout)
                    _, art, _ = _stage_sums(xout)
                    g = target - art
                    if abs(g) <= abs_tol:
                        break
                    if g > 0.0:
                        lo = r
                    else:
                        hi = r
    return m, r, sat_u, sat_art


@njit(cache=True)
def invert_all(S, X, D, lam, prep_factor, prep_pool, maturation, bg_mort,
               stage_mort, progression, delta0, gamma0, rho0, link, targeting,
               n_sub, a_u, a_art, m_cap, r_cap, tol, max_iter):
    nj, nk = S.shape
    mult = np.ones((nj, nk, 2))
    sat = np.zeros((nj, nk, 2), dtype=np.bool_)
    for j in range(nj):
        for k in range(nk):
            m, r, su, sa = invert_block(
                S[j, k], X[j, k], D[j, k], lam[j, k], prep_factor[j, k],
                prep_pool[j, k], maturation[j, k], bg_mort, stage_mort,
                progression, delta0[j, k], gamma0[j, k], rho0[j, k], link,
                targeting, n_sub, a_u[j, k], a_art[j, k], m_cap[j, k],
                r_cap[j, k], tol, max_iter)
            mult[j, k, 0] = m
            mult[j, k, 1] = r
            sat[j, k, 0] = su
            sat[j, k, 1] = sa
    return mult, sat
