//! Entropic optimal transport.
//!
//! Solves `min <C, P> + eps * sum P (log P - 1)` over couplings with
//! marginals `mu` (rows) and `nu` (columns). The solver keeps the dual
//! potentials `f`, `g` in the log domain and runs ordinary Sinkhorn scaling on
//! a kernel `exp((f_u + g_v - C_uv) / eps)` that is rebuilt whenever the
//! scaling vectors drift too far from one, so small `eps` never underflows.

use crate::cost::CostMatrix;
use crate::error::{shape_mismatch, Error, Result};

/// Scaling vectors are absorbed into the potentials once `|ln a|` exceeds this.
const ABSORB_LOG_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub cost: CostMatrix,
    pub eps_reg: f64,
}

impl TransportProblem {
    /// Validates marginal lengths, signs and unit mass (within 1e-9).
    pub fn new(mu: Vec<f64>, nu: Vec<f64>, cost: CostMatrix, eps_reg: f64) -> Result<Self> {
        let n = cost.n();
        if mu.len() != n || nu.len() != n {
            return Err(shape_mismatch(
                format!("{n}x{n} cost"),
                format!("marginals of length {} and {}", mu.len(), nu.len()),
            ));
        }
        for (name, m) in [("mu", &mu), ("nu", &nu)] {
            if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NonFinite(format!("{name} has negative or non-finite entries")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} sums to {s}, expected 1")));
            }
        }
        if !(eps_reg > 0.0) || !eps_reg.is_finite() {
            return Err(Error::Config(format!("eps_reg must be positive, got {eps_reg}")));
        }
        Ok(TransportProblem { mu, nu, cost, eps_reg })
    }

    pub fn n(&self) -> usize {
        self.cost.n()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Marginal tolerance (L1).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Coupling plus the dual potentials that generate it.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// Row-major `n x n` coupling.
    pub plan: Vec<f64>,
    pub dual_f: Vec<f64>,
    pub dual_g: Vec<f64>,
    pub iterations: usize,
    /// Largest of the row and column L1 marginal violations.
    pub marginal_err: f64,
    pub converged: bool,
    pub eps_reg: f64,
}

impl SinkhornResult {
    pub fn n(&self) -> usize {
        self.dual_f.len()
    }

    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                marginal_err: self.marginal_err,
            })
        }
    }
}

fn lse(mut it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = it.by_ref().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

fn log_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exact log-domain half steps: `f` then `g`.
fn log_domain_sweep(prob: &TransportProblem, log_mu: &[f64], log_nu: &[f64], f: &mut [f64], g: &mut [f64]) {
    let n = prob.n();
    let eps = prob.eps_reg;
    let c = prob.cost.data();
    for u in 0..n {
        if log_mu[u] == f64::NEG_INFINITY {
            f[u] = f64::NEG_INFINITY;
            continue;
        }
        let row = &c[u * n..(u + 1) * n];
        let l = lse(g.iter().zip(row).map(|(gv, cuv)| (gv - cuv) / eps));
        f[u] = eps * (log_mu[u] - l);
    }
    for v in 0..n {
        if log_nu[v] == f64::NEG_INFINITY {
            g[v] = f64::NEG_INFINITY;
            continue;
        }
        let l = lse((0..n).map(|u| (f[u] - c[u * n + v]) / eps));
        g[v] = eps * (log_nu[v] - l);
    }
}

fn gibbs(prob: &TransportProblem, f: &[f64], g: &[f64], out: &mut [f64]) {
    let n = prob.n();
    let eps = prob.eps_reg;
    let c = prob.cost.data();
    for u in 0..n {
        let fu = f[u];
        let row = &c[u * n..(u + 1) * n];
        let dst = &mut out[u * n..(u + 1) * n];
        if fu == f64::NEG_INFINITY {
            dst.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        for v in 0..n {
            let gv = g[v];
            dst[v] = if gv == f64::NEG_INFINITY {
                0.0
            } else {
                ((fu + gv - row[v]) / eps).exp()
            };
        }
    }
}

fn marginal_errors(plan: &[f64], mu: &[f64], nu: &[f64]) -> f64 {
    let n = mu.len();
    let mut col = vec![0.0; n];
    let mut row_err = 0.0;
    for u in 0..n {
        let r = &plan[u * n..(u + 1) * n];
        let mut s = 0.0;
        for v in 0..n {
            s += r[v];
            col[v] += r[v];
        }
        row_err += (s - mu[u]).abs();
    }
    let col_err: f64 = col.iter().zip(nu).map(|(c, t)| (c - t).abs()).sum();
    row_err.max(col_err)
}

/// Sinkhorn from cold potentials.
pub fn sinkhorn(prob: &TransportProblem, tol: f64, max_iter: usize) -> Result<SinkhornResult> {
    sinkhorn_warm(prob, SolverOptions { tol, max_iter }, None)
}

/// Sinkhorn starting from the given `(f, g)` potentials, if any.
///
/// A result that misses `tol` within `max_iter` is still returned with
/// `converged = false`; callers decide whether that is fatal.
pub fn sinkhorn_warm(
    prob: &TransportProblem,
    opts: SolverOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<SinkhornResult> {
    let n = prob.n();
    if prob.cost.data().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let eps = prob.eps_reg;
    let log_mu: Vec<f64> = prob.mu.iter().map(|&m| log_or_neg_inf(m)).collect();
    let log_nu: Vec<f64> = prob.nu.iter().map(|&m| log_or_neg_inf(m)).collect();

    let (mut f, mut g) = match warm {
        Some((wf, wg)) if wf.len() == n && wg.len() == n && wf.iter().chain(wg).all(|x| x.is_finite()) => {
            (wf.to_vec(), wg.to_vec())
        }
        _ => (vec![0.0; n], vec![0.0; n]),
    };

    let mut kernel = vec![0.0; n * n];
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; n];
    let mut kb = vec![0.0; n];
    let mut kta = vec![0.0; n];
    let mut iterations = 0usize;
    let mut converged = false;

    'outer: while iterations < opts.max_iter {
        log_domain_sweep(prob, &log_mu, &log_nu, &mut f, &mut g);
        iterations += 1;
        gibbs(prob, &f, &g, &mut kernel);
        a.iter_mut().for_each(|x| *x = 1.0);
        b.iter_mut().for_each(|x| *x = 1.0);

        loop {
            // Columns are exact after the sweep / previous b update; check rows.
            for u in 0..n {
                let row = &kernel[u * n..(u + 1) * n];
                kb[u] = row.iter().zip(&b).map(|(k, bv)| k * bv).sum();
            }
            let row_err: f64 = (0..n).map(|u| (a[u] * kb[u] - prob.mu[u]).abs()).sum();
            if row_err <= opts.tol {
                converged = true;
                break 'outer;
            }
            if iterations >= opts.max_iter {
                break 'outer;
            }

            let mut ok = true;
            let new_a: Vec<f64> = (0..n)
                .map(|u| {
                    if prob.mu[u] == 0.0 {
                        0.0
                    } else {
                        let x = prob.mu[u] / kb[u];
                        if !x.is_finite() || x.ln().abs() > ABSORB_LOG_BOUND {
                            ok = false;
                        }
                        x
                    }
                })
                .collect();
            if !ok {
                absorb(&mut f, &mut g, &mut a, &mut b, eps);
                continue 'outer;
            }
            a = new_a;

            kta.iter_mut().for_each(|x| *x = 0.0);
            for u in 0..n {
                let au = a[u];
                if au == 0.0 {
                    continue;
                }
                let row = &kernel[u * n..(u + 1) * n];
                for (acc, k) in kta.iter_mut().zip(row) {
                    *acc += au * k;
                }
            }
            let new_b: Vec<f64> = (0..n)
                .map(|v| {
                    if prob.nu[v] == 0.0 {
                        0.0
                    } else {
                        let x = prob.nu[v] / kta[v];
                        if !x.is_finite() || x.ln().abs() > ABSORB_LOG_BOUND {
                            ok = false;
                        }
                        x
                    }
                })
                .collect();
            iterations += 1;
            if !ok {
                absorb(&mut f, &mut g, &mut a, &mut b, eps);
                continue 'outer;
            }
            b = new_b;
        }
    }
    absorb(&mut f, &mut g, &mut a, &mut b, eps);
    gibbs(prob, &f, &g, &mut kernel);
    let marginal_err = marginal_errors(&kernel, &prob.mu, &prob.nu);
    if kernel.iter().any(|p| !p.is_finite()) || f.iter().chain(&g).any(|x| x.is_nan()) {
        return Err(Error::NonFinite("transport plan".into()));
    }
    Ok(SinkhornResult {
        plan: kernel,
        dual_f: f,
        dual_g: g,
        iterations,
        marginal_err,
        converged: converged || marginal_err <= opts.tol,
        eps_reg: eps,
    })
}

fn absorb(f: &mut [f64], g: &mut [f64], a: &mut [f64], b: &mut [f64], eps: f64) {
    for (fu, au) in f.iter_mut().zip(a.iter_mut()) {
        *fu += eps * log_or_neg_inf(*au);
        *au = 1.0;
    }
    for (gv, bv) in g.iter_mut().zip(b.iter_mut()) {
        *gv += eps * log_or_neg_inf(*bv);
        *bv = 1.0;
    }
}

/// `<plan, cost>`.
pub fn transport_loss(plan: &[f64], cost: &CostMatrix) -> Result<f64> {
    if plan.len() != cost.data().len() {
        return Err(shape_mismatch(
            format!("plan with {} entries", plan.len()),
            format!("{0}x{0} cost", cost.n()),
        ));
    }
    Ok(plan.iter().zip(cost.data()).map(|(p, c)| p * c).sum())
}

/// Projects an approximate plan onto the couplings of `mu` and `nu`.
///
/// Rows and then columns are scaled down to their targets, and the leftover
/// mass is added back as a rank-one correction. The result meets both
/// marginals up to round-off and moves at most twice the input marginal
/// error, so its cost is a feasible upper bound on the exact OT value.
pub fn round_to_marginals(plan: &[f64], mu: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    let n = mu.len();
    if nu.len() != n || plan.len() != n * n {
        return Err(shape_mismatch(
            format!("plan with {} entries", plan.len()),
            format!("marginals of length {} and {}", n, nu.len()),
        ));
    }
    let mut out = plan.to_vec();
    for (u, row) in out.chunks_mut(n).enumerate() {
        let s: f64 = row.iter().sum();
        if s > mu[u] {
            let k = mu[u] / s;
            row.iter_mut().for_each(|x| *x *= k);
        }
    }
    for v in 0..n {
        let s: f64 = (0..n).map(|u| out[u * n + v]).sum();
        if s > nu[v] {
            let k = nu[v] / s;
            (0..n).for_each(|u| out[u * n + v] *= k);
        }
    }
    // Deficits are nonnegative up to round-off.
    let row_def: Vec<f64> = out
        .chunks(n)
        .zip(mu)
        .map(|(r, m)| (m - r.iter().sum::<f64>()).max(0.0))
        .collect();
    let col_def: Vec<f64> = (0..n)
        .map(|v| (nu[v] - (0..n).map(|u| out[u * n + v]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = col_def.iter().sum();
    if total > 0.0 {
        for u in 0..n {
            for v in 0..n {
                out[u * n + v] += row_def[u] * col_def[v] / total;
            }
        }
    }
    Ok(out)
}

/// Entropic objective `<P, C> + eps * sum P (log P - 1)` at the returned plan.
///
/// This is the value whose first variation in `mu` is the source potential.
pub fn regularized_cost(result: &SinkhornResult, cost: &CostMatrix) -> Result<f64> {
    let linear = transport_loss(&result.plan, cost)?;
    let entropic: f64 = result
        .plan
        .iter()
        .map(|&p| if p > 0.0 { p * (p.ln() - 1.0) } else { 0.0 })
        .sum();
    Ok(linear + result.eps_reg * entropic)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Gradient of the entropic objective with respect to the source marginal,
/// restricted to the simplex tangent space (zero mean).
pub fn grad_loss_wrt_source(result: &SinkhornResult) -> Result<Vec<f64>> {
    result.ensure_converged()?;
    if result.dual_f.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("source potential (zero marginal entry)".into()));
    }
    Ok(centered(&result.dual_f))
}

/// Same as [`grad_loss_wrt_source`] for the target marginal.
pub fn grad_loss_wrt_target(result: &SinkhornResult) -> Result<Vec<f64>> {
    result.ensure_converged()?;
    if result.dual_g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("target potential (zero marginal entry)".into()));
    }
    Ok(centered(&result.dual_g))
}

/// Envelope derivative: `dL/dC_uv = P_uv`.
pub fn grad_loss_wrt_cost(result: &SinkhornResult) -> Result<Vec<f64>> {
    result.ensure_converged()?;
    Ok(result.plan.clone())
}

/// Exact uniform-marginal OT value via exhaustive permutation search (n <= 8).
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<f64> {
    let n = cost.n();
    if n > 8 {
        return Err(Error::TooLarge(n));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(u, &v)| cost.get(u, v)).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut k = 0;
    while k < n {
        if c[k] < k {
            if k % 2 == 0 {
                perm.swap(0, k);
            } else {
                perm.swap(c[k], k);
            }
            best = best.min(eval(&perm));
            c[k] += 1;
            k = 0;
        } else {
            c[k] = 0;
            k += 1;
        }
    }
    Ok(best / n as f64)
}
