//! Least-change weight perturbation onto the certified set
//!
//! ```text
//! min sum_i |W_i - Wbar_i|_F^2   s.t.   M_L(W, lambda) >= 0,  lambda_i >= 0
//! ```
//!
//! The constraint is non-convex in `W` (the `p_i W_i^T W_i` blocks), so two
//! local strategies are offered. Neither claims global optimality.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::certkit::search::{coordinate_search, verify_from, Evaluator};
use crate::certkit::{
    build_ml, check_negative_definite, relaxed_indices_from, slope_constants, Certificate,
    Multipliers, PBlocks, QsrFamily, SearchConfig, DEFAULT_PSD_TOL,
};
use crate::error::{Error, Result};
use crate::matkit::{min_eig, sym_eig, DenseMatrix};
use crate::neuralfield::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Penalised subgradient descent on the exact constraint.
    EigPenalty,
    /// Alternating projection on the constraint without the `W^T W` terms.
    ConservativeLmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub rho_initial: f64,
    pub rho_growth: f64,
    pub max_rounds: usize,
    pub initial_step: f64,
    pub backtrack: f64,
    /// Inner iterations per penalty round (or projection sweeps).
    pub max_iterations: usize,
    pub psd_tol: f64,
    pub stagnation_tol: f64,
    /// Target `min_eig(M_L) >= margin` inside the penalty, so that the
    /// penalised optimum lands on the feasible side.
    pub margin: f64,
    /// Seeds the direction used when the merit gradient vanishes at an
    /// infeasible point.
    pub seed: u64,
    pub search: SearchConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: SolverMode::EigPenalty,
            rho_initial: 10.0,
            rho_growth: 10.0,
            max_rounds: 10,
            initial_step: 1e-2,
            backtrack: 0.5,
            max_iterations: 200,
            psd_tol: DEFAULT_PSD_TOL,
            stagnation_tol: 1e-9,
            margin: 1e-7,
            seed: 0,
            search: SearchConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho_initial > 0.0
            && self.rho_growth > 1.0
            && self.max_rounds > 0
            && self.initial_step > 0.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.max_iterations > 0
            && self.psd_tol >= 0.0
            && self.stagnation_tol >= 0.0
            && self.margin >= 0.0
            && self.rho_initial.is_finite()
            && self.rho_growth.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid solver config {self:?}")))
        }
    }
}

/// One solver-trace row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gap: f64,
    pub norm: f64,
    pub rho: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["iteration", "gap", "norm", "rho"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PerturbResult {
    pub net: Mlp,
    pub certificate: Certificate,
    pub perturbation_norm: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

/// All weight entries, layer by layer, each row-major. Biases excluded.
pub fn flatten_weights(net: &Mlp) -> Vec<f64> {
    net.weights().flat_map(|w| w.as_slice().iter().copied()).collect()
}

/// Inverse of [`flatten_weights`] on `net`'s shapes; biases are kept.
pub fn unflatten_weights(net: &Mlp, flat: &[f64]) -> Result<Mlp> {
    let total: usize = net.weights().map(|w| w.rows() * w.cols()).sum();
    if flat.len() != total {
        return Err(Error::contract(format!(
            "{} values for {total} weight entries",
            flat.len()
        )));
    }
    let mut at = 0;
    let weights = net
        .weights()
        .map(|w| {
            let n = w.rows() * w.cols();
            let m = DenseMatrix::from_row_major(w.rows(), w.cols(), flat[at..at + n].to_vec());
            at += n;
            m
        })
        .collect::<Result<Vec<_>>>()?;
    net.with_weights(weights)
}

/// `max(0, -min_eig(M_L))`; in family mode evaluated at `eps = delta = 0`,
/// the best admissible point.
pub fn feasibility_gap(
    net: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    mult: &Multipliers,
    n_y: usize,
) -> Result<f64> {
    let n0 = net.input_dim();
    let qsr = family.resolve(n_y, n0 - n_y, 0.0, 0.0)?;
    let ml = build_ml(net, &PBlocks::dissipativity(&qsr, p22)?, mult)?;
    Ok((-min_eig(&ml)?).max(0.0))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact constraint at fixed multipliers, with `min_eig` and its
/// (sub)gradient in flattened-weight layout.
struct Constraint<'a> {
    template: &'a Mlp,
    pb: PBlocks,
}

impl Constraint<'_> {
    fn min_eig(&self, flat: &[f64], lambdas: &[f64]) -> f64 {
        unflatten_weights(self.template, flat)
            .and_then(|net| build_ml(&net, &self.pb, &Multipliers::new(lambdas.to_vec())))
            .and_then(|m| min_eig(&m))
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn decompose(&self, flat: &[f64], lambdas: &[f64]) -> Result<(Mlp, crate::matkit::SymEigResult)> {
        let net = unflatten_weights(self.template, flat)?;
        let ml = build_ml(&net, &self.pb, &Multipliers::new(lambdas.to_vec()))?;
        let eig = sym_eig(&ml)?;
        Ok((net, eig))
    }

    /// `d min_eig / d W_i = lambda_i (2 p_i W_i v_{i-1} v_{i-1}^T - 2 m_i v_i v_{i-1}^T)`,
    /// averaged over eigenvectors within `1e-10` of the minimum.
    fn min_eig_grad(&self, flat: &[f64], lambdas: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (net, eig) = self.decompose(flat, lambdas)?;
        let lo = eig.values[0];
        let ties = eig.values.iter().take_while(|v| **v - lo <= 1e-10).count();
        let terms: Vec<(f64, Vec<f64>)> =
            (0..ties).map(|j| (1.0 / ties as f64, eig.vector(j))).collect();
        Ok((lo, eigen_weight_grad(&net, lambdas, &terms)))
    }

    /// Spectral penalty `sum_j max(0, margin - lambda_j)^2`, the squared
    /// distance from `M_L - margin I` to the PSD cone. It agrees with
    /// `max(0, margin - min_eig)^2` whenever a single eigenvalue is below
    /// the margin and, unlike it, stays differentiable where eigenvalues
    /// coalesce. Returns `(min_eig, penalty, gradient)`.
    fn spectral_penalty(&self, flat: &[f64], lambdas: &[f64], margin: f64) -> Result<(f64, f64, Vec<f64>)> {
        let (net, eig) = self.decompose(flat, lambdas)?;
        let mut pen = 0.0;
        let mut terms = Vec::new();
        for (j, &v) in eig.values.iter().enumerate() {
            let short = margin - v;
            if short <= 0.0 {
                break;
            }
            pen += short * short;
            terms.push((-2.0 * short, eig.vector(j)));
        }
        Ok((eig.values[0], pen, eigen_weight_grad(&net, lambdas, &terms)))
    }

    fn penalty_value(&self, flat: &[f64], lambdas: &[f64], margin: f64) -> (f64, f64) {
        match self.decompose(flat, lambdas) {
            Ok((_, eig)) => {
                let pen = eig.values.iter().map(|v| (margin - v).max(0.0).powi(2)).sum();
                (eig.values[0], pen)
            }
            Err(_) => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

/// `sum_k c_k d(v_k^T M_L v_k)/dW` in flattened-weight layout.
fn eigen_weight_grad(net: &Mlp, lambdas: &[f64], terms: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let offs = crate::certkit::block_offsets(&net.layer_dims());
    let mut grad = vec![0.0; net.weights().map(|w| w.rows() * w.cols()).sum()];
    for (coef, v) in terms {
        let mut at = 0;
        for (i, layer) in net.layers().iter().enumerate() {
            let (p, m) = slope_constants(&layer.activation);
            let w = &layer.weight;
            let vin = &v[offs[i]..offs[i + 1]];
            let vout = &v[offs[i + 1]..offs[i + 2]];
            let wv = w.mat_vec(vin);
            let li = coef * lambdas[i];
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    grad[at + r * w.cols() + c] += li * (2.0 * p * wv[r] - 2.0 * m * vout[r]) * vin[c];
                }
            }
            at += w.rows() * w.cols();
        }
    }
    grad
}

/// Moves the baseline weights onto the certified set and returns the
/// closest feasible iterate found. Biases are never touched.
///
/// Errors with [`Error::SolverFailure`] when no feasible point is reached.
pub fn perturb(
    baseline: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    cfg: &SolverConfig,
) -> Result<PerturbResult> {
    perturb_traced(baseline, family, p22, cfg).0
}

/// [`perturb`] that also hands back the solver trace on failure.
pub fn perturb_traced(
    baseline: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    cfg: &SolverConfig,
) -> (Result<PerturbResult>, Vec<TraceRow>) {
    let mut trace = Vec::new();
    let r = run(baseline, family, p22, cfg, &mut trace);
    (r, trace)
}

fn run(
    baseline: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    cfg: &SolverConfig,
    trace: &mut Vec<TraceRow>,
) -> Result<PerturbResult> {
    cfg.validate()?;
    check_negative_definite(p22)?;
    let (n_y, n_u) = cfg.search.split(baseline.input_dim())?;
    let qsr0 = family.resolve(n_y, n_u, 0.0, 0.0)?;
    let pb = PBlocks::dissipativity(&qsr0, p22)?;

    let init = if family.is_family() {
        relaxed_indices_from(baseline, p22, &cfg.search, &vec![1.0; baseline.num_layers()])
            .map(|r| r.multipliers.lambdas)
            .unwrap_or_else(|_| vec![1.0; baseline.num_layers()])
    } else {
        vec![1.0; baseline.num_layers()]
    };

    let start = verify_from(baseline, family, p22, &cfg.search, &init)?;
    trace.push(TraceRow {
        iteration: 0,
        gap: (-start.min_eig_ml).max(0.0),
        norm: 0.0,
        rho: 0.0,
    });
    if start.feasible && start.eps.is_none_or(|e| e >= 0.0) {
        info!("baseline already certified");
        return Ok(PerturbResult {
            net: baseline.clone(),
            certificate: start,
            perturbation_norm: 0.0,
            iterations: 0,
            trace: trace.clone(),
        });
    }

    let wbar = flatten_weights(baseline);
    let con = Constraint {
        template: baseline,
        pb,
    };
    let lambdas = start.multipliers.lambdas.clone();
    let outcome = match cfg.mode {
        SolverMode::EigPenalty => eig_penalty(&con, &wbar, lambdas, cfg, n_y, n_u, family, p22, trace)?,
        SolverMode::ConservativeLmi => {
            conservative(&con, &wbar, lambdas, cfg, trace)?
        }
    };
    let iterations = trace.last().map(|r| r.iteration).unwrap_or(0);
    match outcome {
        Outcome::Feasible(flat, lambdas) => {
            let net = unflatten_weights(baseline, &flat)?;
            let certificate = verify_from(&net, family, p22, &cfg.search, &lambdas)?;
            if !certificate.feasible {
                return Err(Error::SolverFailure {
                    best_min_eig: certificate.min_eig_ml,
                    iterations,
                });
            }
            Ok(PerturbResult {
                perturbation_norm: distance(&flat, &wbar),
                net,
                certificate,
                iterations,
                trace: trace.clone(),
            })
        }
        Outcome::Failed(best_min_eig) => Err(Error::SolverFailure {
            best_min_eig,
            iterations,
        }),
    }
}

enum Outcome {
    Feasible(Vec<f64>, Vec<f64>),
    Failed(f64),
}

/// Multiplier refresh at fixed weights (family mode at `eps = delta = 0`).
#[allow(clippy::too_many_arguments)]
fn refresh_multipliers(
    flat: &[f64],
    lambdas: &[f64],
    con: &Constraint,
    cfg: &SolverConfig,
    n_y: usize,
    n_u: usize,
    family: &QsrFamily,
    p22: &DenseMatrix,
) -> Result<(Vec<f64>, f64)> {
    let net = unflatten_weights(con.template, flat)?;
    let ev = Evaluator::new(&net, family, p22, n_y, n_u)?;
    let (l, score) = coordinate_search(lambdas, &cfg.search, |l| ev.min_eig(l, 0.0, 0.0));
    Ok((l, score))
}

struct Best {
    norm: f64,
    flat: Vec<f64>,
    lambdas: Vec<f64>,
}

fn offer(best: &mut Option<Best>, flat: &[f64], lambdas: &[f64], wbar: &[f64]) {
    let norm = distance(flat, wbar);
    if best.as_ref().is_none_or(|b| norm < b.norm) {
        *best = Some(Best {
            norm,
            flat: flat.to_vec(),
            lambdas: lambdas.to_vec(),
        });
    }
}

/// Restoration only starts from iterates this close to the certified set.
const RESTORE_GAP: f64 = 1e-3;

#[allow(clippy::too_many_arguments)]
fn eig_penalty(
    con: &Constraint,
    wbar: &[f64],
    mut lambdas: Vec<f64>,
    cfg: &SolverConfig,
    n_y: usize,
    n_u: usize,
    family: &QsrFamily,
    p22: &DenseMatrix,
    trace: &mut Vec<TraceRow>,
) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = wbar.to_vec();
    let mut rho = cfg.rho_initial;
    let mut best: Option<Best> = None;
    let mut best_me = f64::NEG_INFINITY;
    let mut iteration = 0usize;
    let mut prev_gap = f64::INFINITY;

    let dist2 = |w: &[f64]| -> f64 { w.iter().zip(wbar).map(|(a, b)| (a - b) * (a - b)).sum() };

    for round in 0..cfg.max_rounds {
        let mut step = cfg.initial_step;
        for _ in 0..cfg.max_iterations {
            iteration += 1;
            let (_, pen, dpen) = con.spectral_penalty(&w, &lambdas, cfg.margin)?;
            let f0 = dist2(&w) + rho * pen;
            let mut grad: Vec<f64> = w
                .iter()
                .zip(wbar)
                .zip(&dpen)
                .map(|((a, b), d)| 2.0 * (a - b) + rho * d)
                .collect();
            let mut gnorm2: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm2 == 0.0 && pen > 0.0 {
                grad = (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                gnorm2 = grad.iter().map(|g| g * g).sum();
            }
            if gnorm2 == 0.0 {
                break;
            }
            // Armijo backtracking
            let mut s = step;
            let mut accepted = None;
            while s > 1e-16 {
                let cand: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - s * g).collect();
                let (me_c, pen_c) = con.penalty_value(&cand, &lambdas, cfg.margin);
                let f1 = dist2(&cand) + rho * pen_c;
                if f1 <= f0 - 1e-4 * s * gnorm2 {
                    accepted = Some((cand, me_c, f1));
                    break;
                }
                s *= cfg.backtrack;
            }
            let Some((cand, me_c, f1)) = accepted else {
                break;
            };
            w = cand;
            step = (s * 2.0).min(1.0);
            best_me = best_me.max(me_c);
            if me_c >= -cfg.psd_tol {
                offer(&mut best, &w, &lambdas, wbar);
            }
            trace.push(TraceRow {
                iteration,
                gap: (-me_c).max(0.0),
                norm: distance(&w, wbar),
                rho,
            });
            if f0 - f1 <= cfg.stagnation_tol * f0.max(1e-300) {
                break;
            }
        }

        let (l, me) = refresh_multipliers(&w, &lambdas, con, cfg, n_y, n_u, family, p22)?;
        lambdas = l;
        best_me = best_me.max(me);
        if me >= -cfg.psd_tol {
            offer(&mut best, &w, &lambdas, wbar);
        } else if -me <= RESTORE_GAP {
            let (wr, me_r) = restore(con, &w, &lambdas, cfg)?;
            best_me = best_me.max(me_r);
            if me_r >= -cfg.psd_tol {
                offer(&mut best, &wr, &lambdas, wbar);
            }
        }
        let gap = (-me).max(0.0);
        debug!(round, rho, gap, norm = distance(&w, wbar), "penalty round");
        if best.is_some() {
            break;
        }
        if prev_gap - gap < cfg.stagnation_tol {
            info!(round, gap, "penalty solver stagnated");
            break;
        }
        prev_gap = gap;
        rho *= cfg.rho_growth;
    }

    Ok(match best {
        Some(b) => Outcome::Feasible(b.flat, b.lambdas),
        None => Outcome::Failed(best_me),
    })
}

/// Newton-type ascent on `min_eig` alone, started from a near-feasible
/// penalty iterate: `w += (margin - me) / |g|^2 g`, halved until `me` rises.
/// The penalty iterate itself is left untouched.
fn restore(con: &Constraint, w: &[f64], lambdas: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, f64)> {
    let mut w = w.to_vec();
    let (mut me, mut g) = con.min_eig_grad(&w, lambdas)?;
    for _ in 0..30 {
        if me >= cfg.margin {
            break;
        }
        let g2: f64 = g.iter().map(|x| x * x).sum();
        if g2 == 0.0 {
            break;
        }
        let scale = (cfg.margin - me) / g2;
        let mut s = 1.0;
        let mut moved = false;
        while s > 1e-6 {
            let cand: Vec<f64> = w.iter().zip(&g).map(|(a, d)| a + s * scale * d).collect();
            let me_c = con.min_eig(&cand, lambdas);
            if me_c > me {
                w = cand;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
        (me, g) = con.min_eig_grad(&w, lambdas)?;
    }
    Ok((w, me))
}

/// `M_L` without the `lambda_i p_i W_i^T W_i` blocks. Affine in `W`.
fn conservative_matrix(net: &Mlp, pb: &PBlocks, lambdas: &[f64]) -> Result<DenseMatrix> {
    let mut m = build_ml(net, pb, &Multipliers::new(lambdas.to_vec()))?;
    let offs = crate::certkit::block_offsets(&net.layer_dims());
    for (i, layer) in net.layers().iter().enumerate() {
        let (p, _) = slope_constants(&layer.activation);
        if p != 0.0 {
            m.add_block(offs[i], offs[i], &layer.weight.gram().scale(-lambdas[i] * p));
        }
    }
    Ok(m)
}

fn conservative(
    con: &Constraint,
    wbar: &[f64],
    mut lambdas: Vec<f64>,
    cfg: &SolverConfig,
    trace: &mut Vec<TraceRow>,
) -> Result<Outcome> {
    let mut net = con.template.clone();
    let mut best: Option<Best> = None;
    let mut best_me = f64::NEG_INFINITY;
    let mut iteration = 0usize;
    let mut prev_gap = f64::INFINITY;
    let target = cfg.margin.max(cfg.psd_tol);

    for round in 0..cfg.max_rounds {
        for _ in 0..cfg.max_iterations {
            iteration += 1;
            let x = conservative_matrix(&net, &con.pb, &lambdas)?;
            let eig = sym_eig(&x)?;
            if eig.values[0] >= 0.0 {
                break;
            }
            // project onto {X >= target}
            let n = x.rows();
            let mut proj = DenseMatrix::zeros(n, n);
            for (j, &val) in eig.values.iter().enumerate() {
                let v = eig.vector(j);
                let c = val.max(target);
                for r in 0..n {
                    for s in 0..n {
                        proj.add_at(r, s, c * v[r] * v[s]);
                    }
                }
            }
            // back onto the affine set: read W_i off the coupling blocks
            let offs = crate::certkit::block_offsets(&net.layer_dims());
            let mut weights = Vec::with_capacity(net.num_layers());
            for (i, layer) in net.layers().iter().enumerate() {
                let (_, m) = slope_constants(&layer.activation);
                let coef = lambdas[i] * m;
                let w = &layer.weight;
                if coef == 0.0 {
                    weights.push(w.clone());
                    continue;
                }
                let (r_in, r_out) = (offs[i], offs[i + 1]);
                let lower = proj.block(r_out, r_in, w.rows(), w.cols());
                let upper = proj.block(r_in, r_out, w.cols(), w.rows()).transpose();
                weights.push(lower.add(&upper)?.scale(-0.5 / coef));
            }
            net = net.with_weights(weights)?;
            let flat = flatten_weights(&net);
            let me_c = min_eig(&conservative_matrix(&net, &con.pb, &lambdas)?)?;
            trace.push(TraceRow {
                iteration,
                gap: (-me_c).max(0.0),
                norm: distance(&flat, wbar),
                rho: 0.0,
            });
        }
        let flat = flatten_weights(&net);
        let cons_net = net.clone();
        let ev_me = |l: &[f64]| {
            conservative_matrix(&cons_net, &con.pb, l)
                .and_then(|m| min_eig(&m))
                .unwrap_or(f64::NEG_INFINITY)
        };
        let (l, me_cons) = coordinate_search(&lambdas, &cfg.search, ev_me);
        lambdas = l;
        let me_true = con.min_eig(&flat, &lambdas);
        best_me = best_me.max(me_true);
        if me_cons >= -cfg.psd_tol || me_true >= -cfg.psd_tol {
            offer(&mut best, &flat, &lambdas, wbar);
            break;
        }
        let gap = (-me_cons).max(0.0);
        debug!(round, gap, "conservative round");
        if prev_gap - gap < cfg.stagnation_tol {
            break;
        }
        prev_gap = gap;
    }
    Ok(match best {
        Some(b) => Outcome::Feasible(b.flat, b.lambdas),
        None => Outcome::Failed(best_me),
    })
}
