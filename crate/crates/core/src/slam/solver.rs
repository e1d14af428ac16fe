use serde::{Deserialize, Serialize};

use super::graph::{whiten, FactorGraph, RMAX, VMAX};
use super::{SlamError, VariableId};

/// Symmetric positive definite matrix stored as its lower band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    /// Entry `(i, j)`, `i - bw <= j <= i`, lives at `(i + 1) * bw + j`.
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bw: bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        (i + 1) * self.bw + j
    }

    /// Entry `(i, j)` of the symmetric matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the lower entry `(i, j)`, `j <= i`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }
}

/// Lower Cholesky factor with the same band as the factored matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    l: BandedMatrix,
}

/// Zero or tiny pivot at `index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotFailure {
    pub index: usize,
}

impl BandedCholesky {
    /// Factors `a + diag(extra)`. A pivot below `rel_tol` times its diagonal
    /// entry fails.
    pub fn factor(a: &BandedMatrix, extra: Option<&[f64]>, rel_tol: f64) -> Result<Self, PivotFailure> {
        let n = a.n;
        let b = a.bw;
        let mut l = a.clone();
        if let Some(e) = extra {
            for (i, v) in e.iter().enumerate() {
                let k = l.idx(i, i);
                l.data[k] += v;
            }
        }
        let d = &mut l.data;
        for j in 0..n {
            let j0 = j.saturating_sub(b);
            let rj = (j + 1) * b;
            let s: f64 = d[rj + j0..rj + j].iter().map(|x| x * x).sum();
            let ajj = d[rj + j];
            let pivot = ajj - s;
            if !(pivot > rel_tol * ajj.abs() && pivot.is_finite() && ajj > 0.0) {
                return Err(PivotFailure { index: j });
            }
            let djj = pivot.sqrt();
            d[rj + j] = djj;
            for i in j + 1..=(j + b).min(n - 1) {
                let ri = (i + 1) * b;
                let k0 = i.saturating_sub(b);
                let mut dot = 0.0;
                for k in k0.max(j0)..j {
                    dot += d[ri + k] * d[rj + k];
                }
                d[ri + j] = (d[ri + j] - dot) / djj;
            }
        }
        Ok(Self { l })
    }

    /// Solves `L L^T x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.l.n;
        let b = self.l.bw;
        let d = &self.l.data;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let ri = (i + 1) * b;
            let mut s = y[i];
            for k in i.saturating_sub(b)..i {
                s -= d[ri + k] * y[k];
            }
            y[i] = s / d[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..=(i + b).min(n - 1) {
                s -= d[(k + 1) * b + i] * y[k];
            }
            y[i] = s / d[(i + 1) * b + i];
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    /// Relative pivot threshold of the undamped rank check.
    pub singular_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            initial_lambda: 1e-4,
            singular_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub converged: bool,
}

struct Layout {
    /// Tangent offset per variable slot.
    offset: Vec<usize>,
    n: usize,
    bandwidth: usize,
}

fn layout(graph: &FactorGraph) -> Layout {
    let ids = graph.variables();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&s| ids[s]);
    let mut offset = vec![0; ids.len()];
    let mut n = 0;
    for &s in &order {
        offset[s] = n;
        n += ids[s].kind.dim();
    }
    let mut bandwidth = 0;
    for f in graph.factors() {
        let slots = graph.factor_slots(f);
        let lo = slots.iter().map(|&s| offset[s]).min().unwrap_or(0);
        let hi = slots.iter().map(|&s| offset[s] + ids[s].kind.dim() - 1).max().unwrap_or(0);
        bandwidth = bandwidth.max(hi - lo);
    }
    for id in ids {
        bandwidth = bandwidth.max(id.kind.dim() - 1);
    }
    Layout { offset, n, bandwidth }
}

/// Gauss-Newton normal equations `H = J^T J`, `g = J^T r` and the cost.
fn normal_equations(graph: &FactorGraph, values: &[f64], lay: &Layout) -> (BandedMatrix, Vec<f64>, f64) {
    let mut h = BandedMatrix::zeros(lay.n, lay.bandwidth);
    let mut g = vec![0.0; lay.n];
    let mut cost = 0.0;
    let ids = graph.variables();
    for f in graph.factors() {
        let lin = graph.linearize(f, values, true);
        let rd = f.kind.residual_dim();
        let rw = whiten(f, &lin.r);
        cost += rw[..rd].iter().map(|x| x * x).sum::<f64>();
        let slots = graph.factor_slots(f);
        // Whitened Jacobian columns: jw[block][col][row].
        let mut jw = [[[0.0; RMAX]; VMAX]; 4];
        for (b, &s) in slots.iter().enumerate() {
            for c in 0..ids[s].kind.dim() {
                let mut col = [0.0; RMAX];
                for r in 0..rd {
                    col[r] = lin.jac[b][r * VMAX + c];
                }
                jw[b][c] = whiten(f, &col);
            }
        }
        for (a, &sa) in slots.iter().enumerate() {
            let da = ids[sa].kind.dim();
            let oa = lay.offset[sa];
            for p in 0..da {
                g[oa + p] += (0..rd).map(|r| jw[a][p][r] * rw[r]).sum::<f64>();
            }
            for (b, &sb) in slots.iter().enumerate() {
                let ob = lay.offset[sb];
                if ob > oa {
                    continue;
                }
                let db = ids[sb].kind.dim();
                for p in 0..da {
                    for q in 0..db {
                        if oa + p < ob + q {
                            continue;
                        }
                        let v: f64 = (0..rd).map(|r| jw[a][p][r] * jw[b][q][r]).sum();
                        h.add_lower(oa + p, ob + q, v);
                    }
                }
            }
        }
    }
    (h, g, cost)
}

fn singular_variable(graph: &FactorGraph, lay: &Layout, index: usize) -> VariableId {
    let ids = graph.variables();
    (0..ids.len())
        .find(|&s| index >= lay.offset[s] && index < lay.offset[s] + ids[s].kind.dim())
        .map(|s| graph.slot_id(s))
        .expect("pivot index lies inside some variable")
}

/// Levenberg-Marquardt on the whitened residuals with damping
/// `H + lambda diag(H)`. Only non-increasing steps are accepted.
pub fn solve(graph: &mut FactorGraph, settings: &SolverSettings) -> Result<SolveDiagnostics, SlamError> {
    let lay = layout(graph);
    let mut values = graph.values().to_vec();
    if lay.n == 0 {
        return Ok(SolveDiagnostics {
            iterations: 0,
            accepted: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
            cost_history: vec![0.0],
            converged: true,
        });
    }
    let (mut h, mut g, mut cost) = normal_equations(graph, &values, &lay);
    if !cost.is_finite() {
        return Err(SlamError::NonFinite("initial cost"));
    }
    if let Err(p) = BandedCholesky::factor(&h, None, settings.singular_tolerance) {
        return Err(SlamError::Singular {
            variable: singular_variable(graph, &lay, p.index),
        });
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = settings.initial_lambda;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut converged = false;
    while iterations < settings.max_iterations {
        iterations += 1;
        let damp: Vec<f64> = h.diagonal().iter().map(|d| lambda * d).collect();
        let chol = match BandedCholesky::factor(&h, Some(&damp), 0.0) {
            Ok(c) => c,
            Err(_) => {
                lambda *= 10.0;
                continue;
            }
        };
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let delta = chol.solve(&neg_g);
        let step_norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !step_norm.is_finite() {
            return Err(SlamError::NonFinite("solver step"));
        }
        let small = step_norm < settings.step_tolerance;
        let candidate = graph.retract(&values, &delta, &lay.offset);
        let new_cost = graph.cost_at(&candidate);
        if small {
            // Converged; keep the last increment only if it does not hurt.
            if new_cost.is_finite() && new_cost <= cost {
                values = candidate;
                cost = new_cost;
                accepted += 1;
                history.push(cost);
            }
            converged = true;
            break;
        }
        if new_cost.is_finite() && new_cost <= cost {
            values = candidate;
            accepted += 1;
            lambda = (lambda / 10.0).max(1e-12);
            let (h2, g2, c2) = normal_equations(graph, &values, &lay);
            h = h2;
            g = g2;
            cost = c2;
            history.push(cost);
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
                break;
            }
        }
    }
    graph.set_values(values);
    Ok(SolveDiagnostics {
        iterations,
        accepted,
        initial_cost,
        final_cost: cost,
        cost_history: history,
        converged,
    })
}
