"""Primal-dual interior-point solver for the planning NLP.

Inequalities c(x) <= 0 receive slacks (c(x) + s = 0, s >= 0), bounds and
slacks receive log barriers, and the symmetric reduced KKT system is
factorized sparsely (scipy SuperLU) each iteration. Primal regularization
delta*I on the Hessian block is escalated whenever the factorization fails,
the direction shows clearly negative curvature, or the line search cannot
make progress. Fixed variables (equal bounds) are pinned and eliminated from
the linear algebra; constraint rows whose variables are all pinned are
checked for feasibility once and skipped.

A monotone Fiacco-McCormick barrier schedule with a fraction-to-boundary
rule and an l1-penalty line search drives the iterates. The objective is
scaled once from its initial gradient so tolerances behave uniformly across
the curtailment (MW) and expected-cost (EUR/h) objectives.

The solver is deterministic: identical problems and settings produce
bit-identical iteration traces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .formulation import NlpProblem, eval_objective

STATUS_OPTIMAL = "optimal"
STATUS_ITERATION_LIMIT = "iteration_limit"
STATUS_INFEASIBLE = "infeasible"
STATUS_NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverSettings:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iter: int = 500
    init_mode: str = "flat"             # "flat" | "warm"
    mu_init: float = 0.1
    kappa_mu: float = 0.2               # linear barrier reduction factor
    theta_mu: float = 1.5               # superlinear barrier reduction exponent
    kappa_eps: float = 10.0             # barrier subproblem tolerance multiple
    tau_min: float = 0.99               # fraction-to-boundary floor
    interior_margin: float = 1e-2       # initial push into the interior
    reg_init: float = 1e-8              # Hessian regularization schedule
    reg_growth: float = 10.0
    reg_max: float = 1e2                # must exceed barrier curvature of flat directions
    dual_reg: float = 1e-8              # constraint-block regularization
    obj_scale_ref: float = 100.0        # target magnitude of the scaled gradient
    tiebreak: float = 1e-4              # internal anchor cost on investment/flex
                                        # variables (scaled units); breaks flat
                                        # optima, reported objectives unaffected
    max_backtracks: int = 20
    max_stalls: int = 10

    def key(self) -> dict:
        """Stable dict of the fields that affect results (for manifests)."""
        return {
            "kkt_tol": self.kkt_tol, "feas_tol": self.feas_tol, "max_iter": self.max_iter,
            "mu_init": self.mu_init, "kappa_mu": self.kappa_mu, "theta_mu": self.theta_mu,
            "kappa_eps": self.kappa_eps, "tau_min": self.tau_min,
            "interior_margin": self.interior_margin, "reg_init": self.reg_init,
            "reg_growth": self.reg_growth, "reg_max": self.reg_max, "dual_reg": self.dual_reg,
            "obj_scale_ref": self.obj_scale_ref, "max_backtracks": self.max_backtracks,
            "max_stalls": self.max_stalls, "tiebreak": self.tiebreak,
        }


@dataclass
class SolveResult:
    status: str
    objective: float
    x: np.ndarray
    mult_eq: np.ndarray
    mult_ineq: np.ndarray
    z_lower: np.ndarray      # full-size, zero where no finite lower bound
    z_upper: np.ndarray
    kkt: dict
    iterations: int
    wall_time: float
    objective_scale: float
    trace: list[dict] = field(default_factory=list)

    @property
    def is_optimal(self) -> bool:
        return self.status == STATUS_OPTIMAL


@dataclass
class InitialPoint:
    x: np.ndarray
    mult_eq: np.ndarray | None = None
    mult_ineq: np.ndarray | None = None
    z_lower: np.ndarray | None = None
    z_upper: np.ndarray | None = None


def flat_start(problem: NlpProblem, margin: float = 1e-2) -> np.ndarray:
    """Flat start: v = 1+j0, generators at dispatch midpoints, all activity
    variables at zero, then pushed strictly inside their bounds."""
    lay = problem.layout
    x = np.zeros(problem.n_var)
    for s in range(lay.ns):
        for k in range(lay.nk):
            bs = lay.block_start(s, k)
            x[bs + lay.oe: bs + lay.oe + lay.nb] = 1.0
            for g in range(lay.ng):
                ipg, iqg = lay.pg(s, k, g), lay.qg(s, k, g)
                x[ipg] = 0.5 * (problem.lb[ipg] + problem.ub[ipg])
                x[iqg] = 0.5 * (problem.lb[iqg] + problem.ub[iqg])
    return _push_interior(x, problem.lb, problem.ub, margin)


def _push_interior(x: np.ndarray, lb: np.ndarray, ub: np.ndarray, margin: float) -> np.ndarray:
    x = x.copy()
    pinned = ub - lb <= 0
    span = ub - lb
    m = np.where(np.isfinite(span), margin * np.minimum(1.0, 0.45 * span), margin)
    lo = np.where(np.isfinite(lb), lb + m, -np.inf)
    hi = np.where(np.isfinite(ub), ub - m, np.inf)
    x = np.clip(x, lo, hi)
    x[pinned] = lb[pinned]
    return x


def warm_start_from(result: SolveResult, problem: NlpProblem) -> InitialPoint:
    """Reuse a previous solution as the starting point of a related problem.

    The primal point is clipped into the new bounds (so removed investment
    options collapse to zero; an unchanged problem reproduces the point
    exactly); duals are carried over where dimensions match. The solver
    itself pushes the point strictly inside the bounds when it starts.
    """
    if result.x.shape != (problem.n_var,):
        raise ValueError(
            f"layout mismatch: result has {result.x.shape[0]} variables, "
            f"problem has {problem.n_var}")
    x = np.clip(result.x, problem.lb, problem.ub)
    ip = InitialPoint(x=x)
    if result.mult_eq.shape == (problem.m_eq,):
        ip.mult_eq = result.mult_eq.copy()
    if result.mult_ineq.shape == (problem.m_ineq,):
        ip.mult_ineq = result.mult_ineq.copy()
    if result.z_lower.shape == (problem.n_var,):
        ip.z_lower = result.z_lower.copy()
        ip.z_upper = result.z_upper.copy()
    return ip


class _Work:
    """Per-solve constant structure: pinned/free split, live rows, barriers."""

    def __init__(self, problem: NlpProblem):
        lb, ub = problem.lb, problem.ub
        self.pinned = (ub - lb) <= 0
        self.free = ~self.pinned
        self.free_idx = np.where(self.free)[0]
        self.nf = self.free_idx.size
        self.lbf = lb[self.free_idx]
        self.ubf = ub[self.free_idx]
        self.ilb = np.where(np.isfinite(self.lbf))[0]
        self.iub = np.where(np.isfinite(self.ubf))[0]

        def live_mask(block):
            live = np.zeros(block.m, dtype=bool)
            lin = block.lin.tocoo()
            np.logical_or.at(live, lin.row, self.free[lin.col])
            if len(block.q_row):
                np.logical_or.at(live, block.q_row,
                                 self.free[block.q_i] | self.free[block.q_j])
            return live

        self.eq_live = live_mask(problem.eq)
        self.in_live = live_mask(problem.ineq)
        self.ieq = np.where(self.eq_live)[0]
        self.iin = np.where(self.in_live)[0]
        self.m_eq = self.ieq.size
        self.m_in = self.iin.size
        self.all_eq_live = bool(self.eq_live.all())
        self.all_in_live = bool(self.in_live.all())

    def reduce_jac(self, J, live_idx, all_live):
        J = J if all_live else J[live_idx]
        return J[:, self.free_idx].tocsr()


def solve(problem: NlpProblem, settings: SolverSettings = SolverSettings(),
          start: InitialPoint | None = None) -> SolveResult:
    """Solve to local optimality with certified KKT residuals.

    Returns STATUS_OPTIMAL only when the scaled stationarity and
    complementarity residuals are <= kkt_tol and the unscaled constraint
    violation is <= feas_tol (p.u.).
    """
    t_start = time.perf_counter()
    w = _Work(problem)
    lb, ub = problem.lb, problem.ub

    if start is None and settings.init_mode == "flat":
        x = flat_start(problem, settings.interior_margin)
    elif start is not None:
        x = _push_interior(start.x, lb, ub, settings.interior_margin)
    else:
        raise ValueError("init_mode='warm' requires an explicit start point")

    # rows without free variables are constant: feasible or hopeless
    c_eq0 = problem.eq.values(x)
    c_in0 = problem.ineq.values(x)
    dead_viol = max(np.abs(c_eq0[~w.eq_live]).max(initial=0.0),
                    c_in0[~w.in_live].max(initial=0.0))
    zeros = lambda k: np.zeros(k)
    if dead_viol > settings.feas_tol:
        return _finalize(problem, settings, w, x, zeros(w.m_eq), zeros(w.m_in),
                         np.ones(w.m_in), zeros(w.ilb.size), zeros(w.iub.size),
                         np.ones(w.m_in), 1.0, _Tie(problem, 0.0),
                         STATUS_INFEASIBLE, 0, [], t_start)

    mu = settings.mu_init
    _, g0 = eval_objective(problem, x)
    g0n = float(np.abs(g0[w.free_idx]).max(initial=0.0))
    sigma = settings.obj_scale_ref / max(settings.obj_scale_ref, g0n)
    tie = _Tie(problem, settings.tiebreak)

    s = np.maximum(-c_in0[w.iin], settings.interior_margin)
    lam = zeros(w.m_eq)          # equality multipliers (free sign)
    wv = mu / s                  # slack bound duals (> 0)
    nu = wv.copy()               # inequality-row multipliers (free sign, start consistent)
    sl = x[w.free_idx][w.ilb] - w.lbf[w.ilb]
    su = w.ubf[w.iub] - x[w.free_idx][w.iub]
    zl = mu / sl
    zu = mu / su
    if start is not None:
        if start.mult_eq is not None:
            lam = start.mult_eq[w.ieq].copy()
        if start.mult_ineq is not None:
            nu = start.mult_ineq[w.iin].copy()
            wv = np.clip(nu, 1e-8, 1e8)
        if start.z_lower is not None:
            zl = np.clip(start.z_lower[w.free_idx][w.ilb], 1e-8, 1e8)
            zu = np.clip(start.z_upper[w.free_idx][w.iub], 1e-8, 1e8)

    mu_min = settings.kkt_tol / 10.0
    rho = 10.0
    delta_last = 0.0
    stalls = 0
    trace: list[dict] = []
    status = STATUS_ITERATION_LIMIT
    it = 0

    for it in range(1, settings.max_iter + 1):
        ev = _evaluate(problem, w, sigma, x, s, lam, nu, wv, zl, zu, tie)

        if ev.err_stat <= settings.kkt_tol and ev.err_compl0 <= settings.kkt_tol \
                and ev.viol <= settings.feas_tol:
            status = STATUS_OPTIMAL
            trace.append({"iter": it, "objective": ev.f_val, "mu": mu, "stat": ev.err_stat,
                          "viol": ev.viol, "compl": ev.err_compl0, "alpha": 0.0, "delta": 0.0})
            break

        # monotone barrier update once the subproblem is solved well enough
        while mu > mu_min and ev.barrier_error(mu) <= settings.kappa_eps * mu:
            mu = max(mu_min, min(settings.kappa_mu * mu, mu ** settings.theta_mu))
        tau = max(settings.tau_min, 1.0 - mu)

        lam_full = _scatter(problem.m_eq, w.ieq, lam)
        nu_full = _scatter(problem.m_ineq, w.iin, nu)
        W = problem.lagrangian_hessian(sigma, lam_full, nu_full).tocsr()
        W = (W[w.free_idx][:, w.free_idx] + sp.diags(tie.quad[w.free_idx])).tocsc()
        sigma_x = _scatter(w.nf, w.ilb, zl / ev.sl) + _scatter(w.nf, w.iub, zu / ev.su)
        d3 = s / wv

        rhs1 = -(ev.r_d + _scatter(w.nf, w.ilb, zl - mu / ev.sl)
                 - _scatter(w.nf, w.iub, zu - mu / ev.su))
        rhs2 = -ev.r_eq
        rhs3 = -ev.r_in + d3 * (nu - mu / s)
        rhs = np.concatenate([rhs1, rhs2, rhs3])

        # direction with regularization safeguard; a rejected or micro-sized
        # step escalates delta and recomputes within the same outer iteration
        delta = 0.0 if delta_last == 0.0 else max(settings.reg_init, delta_last / 3.0)
        best = None
        step = None
        while True:
            step = _direction(problem, w, settings, W, sigma_x, delta,
                              ev.J_eq, ev.J_in, rhs, d3, s, wv, nu, mu,
                              ev.sl, ev.su, zl, zu)
            if step is not None:
                dx, dlam, dnu, ds, dwv, dzl, dzu, curv_ok = step
                if curv_ok:
                    alpha, alpha_z, alpha_max, accepted, rho = _accept_step(
                        problem, settings, w, ev, x, s, lam, nu, wv, zl, zu,
                        sigma, mu, rho, tau, step, tie)
                    if accepted and (best is None or alpha > best[0]):
                        best = (alpha, alpha_z, step)
                    if accepted and alpha >= 1e-3 * max(alpha_max, 1e-12):
                        break
            if delta == 0.0:
                delta = settings.reg_init
            else:
                delta *= settings.reg_growth
            if delta > settings.reg_max:
                break

        if best is not None:
            alpha, alpha_z, step = best
            dx, dlam, dnu, ds, dwv, dzl, dzu, _ = step
            stalls = 0
        else:
            if step is None:
                status = STATUS_NUMERICAL_FAILURE
                break
            # cap reached: take a short fraction-to-boundary step as a last resort
            dx, dlam, dnu, ds, dwv, dzl, dzu, _ = step
            alpha = 0.1 * _fraction_to_boundary(tau, ev.sl, dx[w.ilb], ev.su,
                                                -dx[w.iub], s, ds)
            alpha_z = 0.1 * _fraction_to_boundary(tau, wv, dwv, zl, dzl, zu, dzu)
            stalls += 1
            if stalls >= settings.max_stalls:
                status = STATUS_NUMERICAL_FAILURE
                break
        delta_last = min(delta, settings.reg_max)

        x[w.free_idx] = x[w.free_idx] + alpha * dx
        s = s + alpha * ds
        lam = lam + alpha * dlam
        nu = nu + alpha * dnu
        wv = np.maximum(wv + alpha_z * dwv, 1e-16)
        zl = np.maximum(zl + alpha_z * dzl, 1e-16)
        zu = np.maximum(zu + alpha_z * dzu, 1e-16)

        # keep positive duals compatible with the barrier parameter
        kap = 1e10
        xf = x[w.free_idx]
        sl = xf[w.ilb] - w.lbf[w.ilb]
        su = w.ubf[w.iub] - xf[w.iub]
        zl = np.clip(zl, mu / (kap * sl), kap * mu / sl)
        zu = np.clip(zu, mu / (kap * su), kap * mu / su)
        wv = np.clip(wv, mu / (kap * s), kap * mu / s)

        trace.append({"iter": it, "objective": ev.f_val, "mu": mu, "stat": ev.err_stat,
                      "viol": ev.viol, "compl": ev.err_compl0, "alpha": alpha, "delta": delta})

    return _finalize(problem, settings, w, x, lam, nu, wv, zl, zu, s,
                     sigma, tie, status, it, trace, t_start)


class _Eval:
    """Residuals, Jacobians and error measures at one primal-dual point."""

    def __init__(self, problem, w, sigma, x, s, lam, nu, wv, zl, zu, tie):
        xf = x[w.free_idx]
        self.c_eq = problem.eq.values(x)
        self.c_in = problem.ineq.values(x)
        self.r_eq = self.c_eq[w.ieq]
        self.r_in = self.c_in[w.iin] + s
        self.f_val, self.g_full = eval_objective(problem, x)
        self.g_solver = sigma * self.g_full + tie.grad(x)
        self.f_solver = sigma * self.f_val + tie.value(x)
        self.J_eq = w.reduce_jac(problem.eq.jacobian(x), w.ieq, w.all_eq_live)
        self.J_in = w.reduce_jac(problem.ineq.jacobian(x), w.iin, w.all_in_live)
        self.r_d = (self.g_solver[w.free_idx] + self.J_eq.T @ lam
                    + self.J_in.T @ nu - _scatter(w.nf, w.ilb, zl)
                    + _scatter(w.nf, w.iub, zu))
        self.r_s = nu - wv
        self.sl = xf[w.ilb] - w.lbf[w.ilb]
        self.su = w.ubf[w.iub] - xf[w.iub]
        self.compl_all = np.concatenate([s * wv, self.sl * zl, self.su * zu])

        n_dual = w.m_eq + 2 * w.m_in + w.ilb.size + w.iub.size
        sum_dual = float(np.abs(lam).sum() + np.abs(nu).sum() + wv.sum()
                         + zl.sum() + zu.sum())
        self.s_d = max(100.0, sum_dual / max(1, n_dual)) / 100.0
        self.s_c = max(100.0, float(wv.sum() + zl.sum() + zu.sum())
                       / max(1, w.m_in + w.ilb.size + w.iub.size)) / 100.0
        self.err_stat = max(float(np.abs(self.r_d).max(initial=0.0)),
                            float(np.abs(self.r_s).max(initial=0.0))) / self.s_d
        self.viol = max(float(np.abs(self.c_eq).max(initial=0.0)),
                        float(self.c_in.max(initial=0.0)), 0.0)
        self.err_compl0 = float(self.compl_all.max(initial=0.0)) / self.s_c

    def barrier_error(self, mu: float) -> float:
        return max(self.err_stat,
                   float(np.abs(self.r_eq).max(initial=0.0)),
                   float(np.abs(self.r_in).max(initial=0.0)),
                   float(np.abs(self.compl_all - mu).max(initial=0.0)) / self.s_c)


def _evaluate(problem, w, sigma, x, s, lam, nu, wv, zl, zu, tie) -> _Eval:
    return _Eval(problem, w, sigma, x, s, lam, nu, wv, zl, zu, tie)


class _Tie:
    """Tiny anchor costs that make flat optima unique inside the solver.

    Investment capacities, flexibility activations, generator dispatch and
    RES curtailment can be exactly flat at an optimum (the curtailment
    objective prices none of them, and split directions between parallel
    devices are flat under both objectives). A linear anchor pulls the
    investment/flex group to its lower bound and a quadratic anchor adds the
    curvature that bounds Newton steps along split directions. Magnitudes are
    chosen so reported objectives move by amounts far below all tolerances;
    KKT residuals are certified for the anchored problem.
    """

    def __init__(self, problem, tiebreak: float):
        lay = problem.layout
        n = problem.n_var
        self.lin = np.zeros(n)
        self.quad = np.zeros(n)
        if tiebreak == 0.0:
            return
        first = [lay.li(l) for l in range(lay.nl)] + [lay.fi(f) for f in range(lay.nf)]
        self.lin[first] = tiebreak
        self.quad[first] = tiebreak
        for si in range(lay.ns):
            for ki in range(lay.nk):
                bs = lay.block_start(si, ki)
                self.lin[bs + lay.opup: bs + lay.opup + 4 * lay.nf] = tiebreak
                self.quad[bs + lay.opup: bs + lay.opup + 4 * lay.nf] = tiebreak
                self.quad[bs + lay.opg: bs + lay.opg + 2 * lay.ng] = tiebreak
                self.quad[bs + lay.orc: bs + lay.orc + lay.nb] = tiebreak

    def value(self, x) -> float:
        return float(self.lin @ x + 0.5 * (self.quad @ (x * x)))

    def grad(self, x) -> np.ndarray:
        return self.lin + self.quad * x


def _direction(problem, w, settings, W, sigma_x, delta, J_eq, J_in, rhs,
               d3, s, wv, nu, mu, sl, su, zl, zu):
    """Factor the reduced KKT system and recover the full direction.

    Returns None when the factorization fails; curv_ok is False when the
    direction shows clearly negative curvature in the primal block (the
    inertia proxy used to trigger regularization).
    """
    K = sp.bmat([
        [W + sp.diags(sigma_x + delta), J_eq.T, J_in.T],
        [J_eq, -settings.dual_reg * sp.eye(w.m_eq), None],
        [J_in, None, -sp.diags(d3 + settings.dual_reg)],
    ], format="csc")
    try:
        sol = splu(K).solve(rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    dx = sol[:w.nf]
    dlam = sol[w.nf:w.nf + w.m_eq]
    dnu = sol[w.nf + w.m_eq:]
    curv = float(dx @ (W @ dx) + (sigma_x + delta) @ (dx * dx))
    curv_ok = curv >= -1e-8 * max(1.0, float(dx @ dx))
    ds = d3 * (mu / s - nu - dnu)
    dwv = dnu + nu - wv
    dzl = -(zl - mu / sl) - (zl / sl) * dx[w.ilb]
    dzu = -(zu - mu / su) + (zu / su) * dx[w.iub]
    return dx, dlam, dnu, ds, dwv, dzl, dzu, curv_ok


def _accept_step(problem, settings, w, ev, x, s, lam, nu, wv, zl, zu,
                 sigma, mu, rho, tau, step, tie):
    """Step acceptance: full-step KKT-error decrease, else merit backtracking.

    The KKT fast path keeps the endgame quadratic (centering steps may
    slightly increase the l1 merit, which would otherwise force crawling
    steps); the merit search provides global progress far from a solution.
    """
    dx, dlam, dnu, ds, dwv, dzl, dzu, _ = step
    alpha_max = _fraction_to_boundary(tau, ev.sl, dx[w.ilb], ev.su, -dx[w.iub], s, ds)
    alpha_z = _fraction_to_boundary(tau, wv, dwv, zl, dzl, zu, dzu)

    def trial(alpha):
        x_t = x.copy()
        x_t[w.free_idx] = x[w.free_idx] + alpha * dx
        return x_t, s + alpha * ds

    # fast path: primal-dual error decrease at the full step
    x_t, s_t = trial(alpha_max)
    ev_t = _evaluate(problem, w, sigma, x_t, s_t,
                     lam + alpha_max * dlam, nu + alpha_max * dnu,
                     np.maximum(wv + alpha_z * dwv, 1e-16),
                     np.maximum(zl + alpha_z * dzl, 1e-16),
                     np.maximum(zu + alpha_z * dzu, 1e-16), tie)
    if ev_t.barrier_error(mu) <= (1.0 - 1e-4 * alpha_max) * ev.barrier_error(mu):
        return alpha_max, alpha_z, alpha_max, True, rho

    # merit backtracking
    theta0 = float(np.abs(ev.r_eq).sum() + np.abs(ev.r_in).sum())
    bar_dir = (float(ev.g_solver[w.free_idx] @ dx)
               - mu * float(np.sum(dx[w.ilb] / ev.sl))
               + mu * float(np.sum(dx[w.iub] / ev.su))
               - mu * float(np.sum(ds / s)))
    if theta0 > 1e-12:
        rho_req = bar_dir / (0.7 * theta0)
        if rho_req > rho:
            rho = min(1.1 * rho_req, 1e8)
    dphi = bar_dir - rho * theta0
    phi0 = (ev.f_solver
            - mu * (np.log(ev.sl).sum() + np.log(ev.su).sum() + np.log(s).sum())
            + rho * theta0)
    noise = 1e-11 * max(1.0, abs(phi0))

    alpha = alpha_max
    for _ in range(settings.max_backtracks):
        x_t, s_t = trial(alpha)
        f_t, _ = eval_objective(problem, x_t)
        xf_t = x_t[w.free_idx]
        sl_t = xf_t[w.ilb] - w.lbf[w.ilb]
        su_t = w.ubf[w.iub] - xf_t[w.iub]
        bar = np.log(sl_t).sum() + np.log(su_t).sum() + np.log(s_t).sum()
        ce = problem.eq.values(x_t)[w.ieq]
        ci = problem.ineq.values(x_t)[w.iin] + s_t
        phi = (sigma * f_t + tie.value(x_t) - mu * bar
               + rho * float(np.abs(ce).sum() + np.abs(ci).sum()))
        if phi <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + noise:
            return alpha, alpha_z, alpha_max, True, rho
        alpha *= 0.5
    return alpha, alpha_z, alpha_max, False, rho


def _scatter(n: int, idx: np.ndarray, vals) -> np.ndarray:
    out = np.zeros(n)
    out[idx] = vals
    return out


def _fraction_to_boundary(tau: float, *pairs_flat) -> float:
    """Largest alpha <= 1 keeping every (value, step) pair above (1-tau)*value."""
    alpha = 1.0
    for i in range(0, len(pairs_flat), 2):
        val, step = pairs_flat[i], pairs_flat[i + 1]
        neg = step < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(tau * val[neg] / -step[neg])))
    return alpha


def _finalize(problem, settings, w, x, lam, nu, wv, zl, zu, s,
              sigma, tie, status, iterations, trace, t_start):
    c_eq = problem.eq.values(x)
    c_in = problem.ineq.values(x)
    f_val, g_full = eval_objective(problem, x)

    lam_full = _scatter(problem.m_eq, w.ieq, lam)
    nu_full = _scatter(problem.m_ineq, w.iin, nu)
    zl_var = np.zeros(problem.n_var)
    zu_var = np.zeros(problem.n_var)
    zl_var[w.free_idx[w.ilb]] = zl
    zu_var[w.free_idx[w.iub]] = zu

    J_eq = w.reduce_jac(problem.eq.jacobian(x), w.ieq, w.all_eq_live)
    J_in = w.reduce_jac(problem.ineq.jacobian(x), w.iin, w.all_in_live)
    r_d = ((sigma * g_full + tie.grad(x))[w.free_idx] + J_eq.T @ lam + J_in.T @ nu
           - zl_var[w.free_idx] + zu_var[w.free_idx])
    xf = x[w.free_idx]
    sl = xf[w.ilb] - w.lbf[w.ilb]
    su = w.ubf[w.iub] - xf[w.iub]
    compl = np.concatenate([s * wv, sl * zl, su * zu])
    n_dual = len(lam) + 2 * len(nu) + len(zl) + len(zu)
    s_d = max(100.0, (np.abs(lam).sum() + np.abs(nu).sum() + wv.sum()
                      + zl.sum() + zu.sum()) / max(1, n_dual)) / 100.0
    s_c = max(100.0, float(wv.sum() + zl.sum() + zu.sum())
              / max(1, len(wv) + len(zl) + len(zu))) / 100.0
    kkt = {
        "stationarity": max(float(np.abs(r_d).max(initial=0.0)),
                            float(np.abs(nu - wv).max(initial=0.0))) / s_d,
        "feasibility": max(float(np.abs(c_eq).max(initial=0.0)),
                           float(c_in.max(initial=0.0)), 0.0),
        "complementarity": float(compl.max(initial=0.0)) / s_c,
    }
    if status == STATUS_OPTIMAL:
        ok = (kkt["stationarity"] <= settings.kkt_tol
              and kkt["complementarity"] <= settings.kkt_tol
              and kkt["feasibility"] <= settings.feas_tol)
        if not ok:  # pragma: no cover - guards against bookkeeping drift
            status = STATUS_NUMERICAL_FAILURE
    return SolveResult(
        status=status, objective=f_val, x=x,
        mult_eq=lam_full, mult_ineq=nu_full, z_lower=zl_var, z_upper=zu_var,
        kkt=kkt, iterations=iterations, wall_time=time.perf_counter() - t_start,
        objective_scale=sigma, trace=trace,
    )


# ---------------------------------------------------------------------------
# solution reporting helpers

def balance_residuals(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """Recomputed active/reactive power-balance residuals (p.u.) at a point."""
    vals = problem.eq.values(np.asarray(x, dtype=float))
    idx = [i for i, name in enumerate(problem.eq.names) if name.startswith("bal")]
    return vals[idx]


def thermal_slack(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """(s_max + LI)^2 - p^2 - q^2 per in-service branch end (>= 0 when feasible)."""
    vals = problem.ineq.values(np.asarray(x, dtype=float))
    idx = [i for i, name in enumerate(problem.ineq.names) if name.startswith("thermal")]
    return -vals[idx]


def summarize_solution(problem: NlpProblem, result: SolveResult) -> dict:
    """Human-oriented summary: investments in SI units, curtailment per (s, k)."""
    case = problem.case
    lay = problem.layout
    base = case.base_mva
    x = result.x
    li = {case.lines[l].id: float(x[lay.li(l)] * base) for l in range(lay.nl)}
    fi = {case.flex_providers[f].id: float(x[lay.fi(f)] * base) for f in range(lay.nf)}
    per_state = []
    for si, scn in enumerate(case.scenarios):
        for ki, st in enumerate(case.states):
            bs = lay.block_start(si, ki)
            lc = float(np.sum(x[bs + lay.olc: bs + lay.olc + lay.nb]) * base)
            rc = float(np.sum(x[bs + lay.orc: bs + lay.orc + lay.nb]) * base)
            per_state.append({"scenario": scn.id, "state": st.k,
                              "lc_mw": lc, "rc_mw": rc})
    return {
        "status": result.status,
        "objective": result.objective,
        "objective_kind": problem.objective.tag,
        "line_reinforcement_mva": li,
        "flex_capacity_mw": fi,
        "curtailment": per_state,
        "kkt": result.kkt,
        "iterations": result.iterations,
    }
