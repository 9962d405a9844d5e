"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

Solves   min 1/2 x'Hx + g'x   s.t.  Gx <= h,  lb <= x <= ub
with H positive definite (the caller regularizes). Box bounds are handled
separately from general rows so they only contribute diagonal terms to the
reduced Newton system. The solver drives the worst complementarity product
below tol and returns its best iterate if progress stalls first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky


@dataclass
class QpResult:
    x: np.ndarray
    z_ineq: np.ndarray      # multipliers of Gx <= h
    z_lb: np.ndarray        # multipliers of x >= lb (full length, 0 where lb = -inf)
    z_ub: np.ndarray        # multipliers of x <= ub
    status: str             # optimal | stalled | infeasible
    iterations: int
    gap: float              # worst complementarity product, scaled
    primal_residual: float
    dual_residual: float


def _positive_part_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] keeping v + alpha*dv >= 0 (v > 0 elementwise)."""
    if len(v) == 0:
        return 1.0
    worst = np.max(-dv / v)
    return 1.0 if worst <= 1.0 else float(1.0 / worst)


def solve_qp(H: np.ndarray, g: np.ndarray,
             G: np.ndarray | None = None, h: np.ndarray | None = None,
             lb: np.ndarray | None = None, ub: np.ndarray | None = None,
             x0: np.ndarray | None = None,
             max_iter: int = 60, tol: float = 1e-10) -> QpResult:
    n = len(g)
    if G is None or len(G) == 0:
        G = np.zeros((0, n))
        h = np.zeros(0)
    m = len(h)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)
    il, iu = np.where(has_lb)[0], np.where(has_ub)[0]
    nl, nu = len(il), len(iu)

    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(h).max(initial=0.0))

    if m + nl + nu == 0:
        x = np.linalg.solve(H, -g)
        return QpResult(x, np.zeros(0), np.zeros(n), np.zeros(n), "optimal", 0,
                        0.0, 0.0, 0.0)

    # Strictly interior start for x relative to its boxes.
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    both = has_lb & has_ub
    x[both] = np.clip(x[both], lb[both] + 1e-9, ub[both] - 1e-9)
    mid = both & (ub - lb < 4e-9)
    x[mid] = 0.5 * (lb[mid] + ub[mid])
    only_l = has_lb & ~has_ub
    x[only_l] = np.maximum(x[only_l], lb[only_l] + 1e-9)
    only_u = has_ub & ~has_lb
    x[only_u] = np.minimum(x[only_u], ub[only_u] - 1e-9)

    sg = np.maximum(h - G @ x, 0.01 * (1.0 + np.abs(h)))
    sl = np.maximum(x[il] - lb[il], 0.01 * (1.0 + np.abs(lb[il])))
    su = np.maximum(ub[iu] - x[iu], 0.01 * (1.0 + np.abs(ub[iu])))
    zg = np.ones(m)
    zl = np.ones(nl)
    zu = np.ones(nu)

    def residuals(x, sg, sl, su, zg, zl, zu):
        zl_full = np.zeros(n)
        zl_full[il] = zl
        zu_full = np.zeros(n)
        zu_full[iu] = zu
        rd = H @ x + g + G.T @ zg - zl_full + zu_full
        rp_g = G @ x + sg - h
        rp_l = sl - (x[il] - lb[il])
        rp_u = x[iu] + su - ub[iu]
        comp = max((sg * zg).max(initial=0.0), (sl * zl).max(initial=0.0),
                   (su * zu).max(initial=0.0))
        rp = max(np.abs(rp_g).max(initial=0.0), np.abs(rp_l).max(initial=0.0),
                 np.abs(rp_u).max(initial=0.0))
        return rd, rp_g, rp_l, rp_u, comp, rp, np.abs(rd).max()

    best = None
    best_err = np.inf
    status = "stalled"
    it = 0
    diverged = False
    n_compl = m + nl + nu
    err_hist: list[float] = []
    comp = rp_norm = rd_norm = np.inf
    for it in range(1, max_iter + 1):
        rd, rp_g, rp_l, rp_u, comp, rp_norm, rd_norm = residuals(x, sg, sl, su, zg, zl, zu)
        err = max(comp, rp_norm, rd_norm)
        if err < best_err:
            best_err = err
            best = (x.copy(), sg.copy(), sl.copy(), su.copy(), zg.copy(), zl.copy(), zu.copy())
        if comp <= tol * scale and rp_norm <= tol * scale and rd_norm <= tol * scale:
            status = "optimal"
            break
        mu = (sg @ zg + sl @ zl + su @ zu) / n_compl
        err_hist.append(best_err)
        if len(err_hist) > 6 and best_err > 0.9 * err_hist[-7]:
            break
        if max(zg.max(initial=0.0), zl.max(initial=0.0), zu.max(initial=0.0)) > 1e14:
            diverged = True
            break
        if mu < 1e-11 * scale and rp_norm > 1e-5 * scale:
            diverged = True
            break
        dg = zg / sg
        dl = zl / sl
        du_ = zu / su
        M = H + (G.T * dg) @ G
        M[il, il] += dl
        M[iu, iu] += du_
        try:
            c_factor = cholesky(M, lower=True, check_finite=False, overwrite_a=True)
        except np.linalg.LinAlgError:
            break

        def solve_newton(rc_g, rc_l, rc_u):
            rhs = -rd - G.T @ (dg * rp_g) + G.T @ (rc_g / sg)
            tmp = np.zeros(n)
            tmp[il] = dl * rp_l - rc_l / sl
            rhs += tmp
            tmp = np.zeros(n)
            tmp[iu] = du_ * rp_u - rc_u / su
            rhs -= tmp
            dx = cho_solve((c_factor, True), rhs, check_finite=False)
            dsg = -rp_g - G @ dx
            dzg = -(rc_g + zg * dsg) / sg
            dsl = dx[il] - rp_l
            dzl = -(rc_l + zl * dsl) / sl
            dsu = -rp_u - dx[iu]
            dzu = -(rc_u + zu * dsu) / su
            return dx, dsg, dzg, dsl, dzl, dsu, dzu

        # Affine predictor
        aff = solve_newton(sg * zg, sl * zl, su * zu)
        dx_a, dsg_a, dzg_a, dsl_a, dzl_a, dsu_a, dzu_a = aff
        ap = min(_positive_part_step(sg, dsg_a), _positive_part_step(sl, dsl_a),
                 _positive_part_step(su, dsu_a))
        ad = min(_positive_part_step(zg, dzg_a), _positive_part_step(zl, dzl_a),
                 _positive_part_step(zu, dzu_a))
        mu_aff = ((sg + ap * dsg_a) @ (zg + ad * dzg_a)
                  + (sl + ap * dsl_a) @ (zl + ad * dzl_a)
                  + (su + ap * dsu_a) @ (zu + ad * dzu_a)) / n_compl
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # Corrector with centering
        mu_t = sigma * mu
        dx, dsg, dzg, dsl, dzl, dsu, dzu = solve_newton(
            sg * zg + dsg_a * dzg_a - mu_t,
            sl * zl + dsl_a * dzl_a - mu_t,
            su * zu + dsu_a * dzu_a - mu_t)
        ap = min(_positive_part_step(sg, dsg), _positive_part_step(sl, dsl),
                 _positive_part_step(su, dsu))
        ad = min(_positive_part_step(zg, dzg), _positive_part_step(zl, dzl),
                 _positive_part_step(zu, dzu))
        frac = max(0.99, 1.0 - mu)
        ap, ad = min(1.0, frac * ap), min(1.0, frac * ad)
        if max(ap, ad) < 1e-13:
            break

        x = x + ap * dx
        sg, sl, su = sg + ap * dsg, sl + ap * dsl, su + ap * dsu
        zg, zl, zu = zg + ad * dzg, zl + ad * dzl, zu + ad * dzu

    if best is not None and status != "optimal":
        x, sg, sl, su, zg, zl, zu = best
        _, _, _, _, comp, rp_norm, rd_norm = residuals(x, sg, sl, su, zg, zl, zu)
        status = "infeasible" if (diverged and rp_norm > 1e-6 * scale) else "stalled"

    zl_full = np.zeros(n)
    zl_full[il] = zl
    zu_full = np.zeros(n)
    zu_full[iu] = zu
    return QpResult(x, zg, zl_full, zu_full, status, it, float(comp),
                    float(rp_norm), float(rd_norm))
