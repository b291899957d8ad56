//! Multiplier search for the certificate.
//!
//! At fixed weights `M_L` is affine in `(lambda_1 .. lambda_l, eps, delta)`,
//! so its minimum eigenvalue is jointly concave in them. Along any single
//! coordinate a golden-section search is therefore exact up to its bracket.

use serde::{Deserialize, Serialize};

use super::{
    build_ml, check_negative_definite, Certificate, Multipliers, PBlocks, QsrFamily,
    DEFAULT_PSD_TOL,
};
use crate::error::{Error, Result};
use crate::matkit::{min_eig, DenseMatrix};
use crate::neuralfield::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub psd_tol: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Log-spaced grid points per multiplier axis (zero is always added).
    pub grid_points: usize,
    pub golden_iters: usize,
    pub bisection_iters: usize,
    /// Coordinate-search passes over all axes.
    pub cycles: usize,
    /// Size of the `y` block of `z = [y; u]`; `None` splits `n_0` in half.
    pub n_y: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            psd_tol: DEFAULT_PSD_TOL,
            lambda_min: 1e-2,
            lambda_max: 1e3,
            grid_points: 16,
            golden_iters: 40,
            bisection_iters: 50,
            cycles: 3,
            n_y: None,
        }
    }
}

impl SearchConfig {
    pub fn split(&self, n0: usize) -> Result<(usize, usize)> {
        let ny = self.n_y.unwrap_or(n0 / 2);
        if ny == 0 || ny >= n0 {
            return Err(Error::contract(format!("cannot split n0 = {n0} with n_y = {ny}")));
        }
        Ok((ny, n0 - ny))
    }

    fn grid(&self) -> Vec<f64> {
        let n = self.grid_points.max(2);
        let (lo, hi) = (self.lambda_min.ln(), self.lambda_max.ln());
        let mut g = vec![0.0];
        g.extend((0..n).map(|k| (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp()));
        g
    }
}

/// Precomputed pieces of `M_L` at fixed weights:
/// `M_L = base + sum_i lambda_i L_i - eps E_y - delta E_u`.
pub(crate) struct Evaluator {
    base: DenseMatrix,
    layers: Vec<DenseMatrix>,
    n_y: usize,
    n_u: usize,
    family: bool,
}

impl Evaluator {
    pub(crate) fn new(
        net: &Mlp,
        family: &QsrFamily,
        p22: &DenseMatrix,
        n_y: usize,
        n_u: usize,
    ) -> Result<Self> {
        let qsr = family.resolve(n_y, n_u, 0.0, 0.0)?;
        let pb = PBlocks::dissipativity(&qsr, p22)?;
        let l = net.num_layers();
        let base = build_ml(net, &pb, &Multipliers::uniform(l, 0.0))?;
        let layers = (0..l)
            .map(|i| {
                let mut unit = vec![0.0; l];
                unit[i] = 1.0;
                super::build_st(net, &Multipliers::new(unit))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            layers,
            n_y,
            n_u,
            family: family.is_family(),
        })
    }

    pub(crate) fn matrix(&self, lambdas: &[f64], eps: f64, delta: f64) -> DenseMatrix {
        let mut m = self.base.clone();
        for (li, term) in lambdas.iter().zip(&self.layers) {
            if *li != 0.0 {
                m.axpy(*li, term);
            }
        }
        if self.family {
            for k in 0..self.n_y {
                m.add_at(k, k, -eps);
            }
            for k in self.n_y..self.n_y + self.n_u {
                m.add_at(k, k, -delta);
            }
        }
        m
    }

    pub(crate) fn min_eig(&self, lambdas: &[f64], eps: f64, delta: f64) -> f64 {
        min_eig(&self.matrix(lambdas, eps, delta)).unwrap_or(f64::NEG_INFINITY)
    }
}

fn golden_max(mut a: f64, mut b: f64, iters: usize, f: &mut impl FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Coordinate ascent on the multipliers: grid scan per axis, then a
/// golden-section refinement between the neighbouring grid points. Ties keep
/// the earlier (smaller) candidate.
pub(crate) fn coordinate_search(
    init: &[f64],
    cfg: &SearchConfig,
    mut score: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let grid = cfg.grid();
    let mut cur = init.to_vec();
    let mut best = score(&cur);
    for _ in 0..cfg.cycles.max(1) {
        let before = best;
        for axis in 0..cur.len() {
            let mut pick = (best, cur[axis]);
            let mut x = cur.clone();
            for g in &grid {
                x[axis] = *g;
                let v = score(&x);
                if v > pick.0 {
                    pick = (v, *g);
                }
            }
            cur[axis] = pick.1;
            best = pick.0;

            let pos = grid.partition_point(|g| *g < cur[axis]);
            let lo = if pos == 0 { 0.0 } else { grid[pos - 1] };
            let hi = grid.get(pos + 1).copied().unwrap_or(cfg.lambda_max);
            if hi > lo {
                let mut x = cur.clone();
                let (arg, val) = golden_max(lo, hi, cfg.golden_iters, &mut |t| {
                    x[axis] = t;
                    score(&x)
                });
                if val > best {
                    best = val;
                    cur[axis] = arg;
                }
            }
        }
        if best - before <= 1e-12 * best.abs().max(1.0) {
            break;
        }
    }
    (cur, best)
}

/// Smallest `r` in `[-1e6, 1e6]` with `f(r) >= thr` for non-decreasing `f`;
/// `+inf` when even `f(1e6)` misses.
fn threshold_crossing(f: &mut impl FnMut(f64) -> f64, thr: f64, iters: usize) -> f64 {
    const LIMIT: f64 = 1e6;
    let (mut lo, mut hi);
    if f(0.0) >= thr {
        hi = 0.0;
        lo = -1.0;
        while f(lo) >= thr {
            hi = lo;
            lo *= 2.0;
            if lo < -LIMIT {
                return -LIMIT;
            }
        }
    } else {
        lo = 0.0;
        hi = 1.0;
        while f(hi) < thr {
            lo = hi;
            hi *= 2.0;
            if hi > LIMIT {
                return f64::INFINITY;
            }
        }
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= thr {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Searches the multipliers (and in family mode `eps`, `delta`) for the
/// largest minimum eigenvalue of `M_L`.
///
/// In family mode `min_eig(M_L)` is non-increasing in `eps` and `delta`, so
/// the best value over `eps, delta >= 0` sits at `(0, 0)`; the multipliers are
/// chosen there. When that point is feasible, `eps = delta = t` is then raised
/// by bisection to the largest `t` that keeps `min_eig >= 0`.
pub fn verify(
    net: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    cfg: &SearchConfig,
) -> Result<Certificate> {
    verify_from(net, family, p22, cfg, &vec![1.0; net.num_layers()])
}

/// [`verify`] with a warm start for the multipliers.
pub fn verify_from(
    net: &Mlp,
    family: &QsrFamily,
    p22: &DenseMatrix,
    cfg: &SearchConfig,
    init: &[f64],
) -> Result<Certificate> {
    check_negative_definite(p22)?;
    let (n_y, n_u) = cfg.split(net.input_dim())?;
    if p22.rows() != net.input_dim() {
        return Err(Error::contract("P22 size must equal the network output size"));
    }
    if init.len() != net.num_layers() {
        return Err(Error::contract("warm start has the wrong number of multipliers"));
    }
    let ev = Evaluator::new(net, family, p22, n_y, n_u)?;
    let (lambdas, score) = coordinate_search(init, cfg, |l| ev.min_eig(l, 0.0, 0.0));

    let (eps, delta) = if family.is_family() {
        let t = if score >= 0.0 {
            // largest t with min_eig >= 0, i.e. smallest -t crossing upward
            let s = threshold_crossing(&mut |r| ev.min_eig(&lambdas, -r, -r), 0.0, cfg.bisection_iters);
            if s.is_finite() { (-s).max(0.0) } else { 0.0 }
        } else {
            0.0
        };
        (Some(t), Some(t))
    } else {
        (None, None)
    };

    let qsr = family.resolve(n_y, n_u, eps.unwrap_or(0.0), delta.unwrap_or(0.0))?;
    let multipliers = Multipliers::new(lambdas);
    let ml = build_ml(net, &PBlocks::dissipativity(&qsr, p22)?, &multipliers)?;
    let min_eig_ml = min_eig(&ml)?;
    Ok(Certificate {
        feasible: min_eig_ml >= -cfg.psd_tol,
        qsr,
        p22: p22.clone(),
        multipliers,
        eps,
        delta,
        min_eig_ml,
        psd_tol: cfg.psd_tol,
    })
}

/// Recomputes `min_eig(M_L)` from a certificate's own data.
pub fn reverify(net: &Mlp, cert: &Certificate) -> Result<f64> {
    let pb = PBlocks::dissipativity(&cert.qsr, &cert.p22)?;
    min_eig(&build_ml(net, &pb, &cert.multipliers)?)
}

/// `min_eig(M_L)` at the given supply rate and multipliers.
pub fn feasibility_margin(
    net: &Mlp,
    qsr: &super::QsrSpec,
    p22: &DenseMatrix,
    mult: &Multipliers,
) -> Result<f64> {
    min_eig(&build_ml(net, &PBlocks::dissipativity(qsr, p22)?, mult)?)
}

/// Best strict-passivity indices under the relaxed certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedIndices {
    pub eps: f64,
    pub delta: f64,
    /// `max(-eps, 0) + max(-delta, 0)`: how far the indices fall short of
    /// the non-negative orthant. Zero when the net is certified.
    pub objective: f64,
    pub min_eig_ml: f64,
    pub multipliers: Multipliers,
}

impl RelaxedIndices {
    pub fn certified(&self) -> bool {
        self.eps >= 0.0 && self.delta >= 0.0
    }
}

pub(crate) fn violation(eps: f64, delta: f64) -> f64 {
    (-eps).max(0.0) + (-delta).max(0.0)
}

/// Sign-unconstrained `(eps, delta)` of the strict-passivity family with
/// `M_L >= -psd_tol` and the smallest shortfall
/// `max(-eps, 0) + max(-delta, 0)`; ties go to the larger `min_eig(M_L)`,
/// which makes a certified net report `(0, 0)`.
pub fn relaxed_indices(net: &Mlp, p22: &DenseMatrix, cfg: &SearchConfig) -> Result<RelaxedIndices> {
    relaxed_indices_from(net, p22, cfg, &vec![1.0; net.num_layers()])
}

pub fn relaxed_indices_from(
    net: &Mlp,
    p22: &DenseMatrix,
    cfg: &SearchConfig,
    init: &[f64],
) -> Result<RelaxedIndices> {
    check_negative_definite(p22)?;
    let (n_y, n_u) = cfg.split(net.input_dim())?;
    let family = QsrFamily::StrictPassivityFamily;
    let ev = Evaluator::new(net, &family, p22, n_y, n_u)?;
    let iters = cfg.bisection_iters;

    // Shortfall along the ray (eps, delta) = -r (da, db).
    let ray = |l: &[f64], da: f64, db: f64| {
        threshold_crossing(&mut |r| ev.min_eig(l, -r * da, -r * db), 0.0, iters)
    };

    let mut lambdas = init.to_vec();
    let mut dir = (1.0, 1.0);
    let mut best: Option<(f64, f64, f64, Vec<f64>)> = None; // (violation, a, b, lambdas)

    for _ in 0..2 {
        let (l, neg_r) = coordinate_search(&lambdas, cfg, |l| -ray(l, dir.0, dir.1));
        lambdas = l;
        let r = -neg_r;
        if !r.is_finite() {
            break;
        }
        let (a, b) = if r <= 0.0 {
            (0.0, 0.0)
        } else {
            // minimise a + b(a) over a in [0, 2 r max(da, db)]; convex in a
            let b_of = |a: f64| {
                let f0 = ev.min_eig(&lambdas, -a, 0.0);
                if f0 >= 0.0 {
                    0.0
                } else {
                    let b = threshold_crossing(&mut |b| ev.min_eig(&lambdas, -a, -b), 0.0, iters);
                    b.max(0.0)
                }
            };
            let upper = 2.0 * r * dir.0.max(dir.1);
            let (a, neg) = golden_max(0.0, upper, cfg.golden_iters, &mut |a| -(a + b_of(a)));
            let cand = (a, b_of(a));
            let ray_pt = (r * dir.0, r * dir.1);
            if -neg <= ray_pt.0 + ray_pt.1 { cand } else { ray_pt }
        };
        let v = a + b;
        if best.as_ref().is_none_or(|(bv, ..)| v < *bv) {
            best = Some((v, a, b, lambdas.clone()));
        }
        if v == 0.0 || a + b == 0.0 {
            break;
        }
        let s = 0.5 * (a + b);
        dir = (a / s, b / s);
        if dir.0 <= 0.0 || dir.1 <= 0.0 {
            break;
        }
    }

    let (a, b, lambdas) = match best {
        Some((_, a, b, l)) => (a, b, l),
        None => {
            return Err(Error::contract(
                "no finite relaxation exists (multipliers cannot offset P22)",
            ))
        }
    };
    let (eps, delta) = (-a, -b);
    let multipliers = Multipliers::new(lambdas);
    let qsr = family.resolve(n_y, n_u, eps, delta)?;
    let min_eig_ml = feasibility_margin(net, &qsr, p22, &multipliers)?;
    Ok(RelaxedIndices {
        eps,
        delta,
        objective: violation(eps, delta),
        min_eig_ml,
        multipliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certkit::{qsr_preset, QsrPreset, QsrSpec};
    use crate::neuralfield::{Activation, Layer};

    fn scalar_net(act: Activation, w1: f64, w2: f64) -> Mlp {
        Mlp::from_layers(vec![
            Layer {
                weight: DenseMatrix::from_row_major(1, 2, vec![w1, -w1]).unwrap(),
                bias: vec![0.0],
                activation: act,
            },
            Layer {
                weight: DenseMatrix::from_row_major(2, 1, vec![w2, 0.5 * w2]).unwrap(),
                bias: vec![0.0, 0.0],
                activation: Activation::Identity,
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_weight_trivial_qsr_is_feasible() {
        let net = Mlp::random(&[4, 16, 4], Activation::LeakyRelu { a: 0.2 }, 1).unwrap();
        let net = net
            .with_weights(vec![DenseMatrix::zeros(16, 4), DenseMatrix::zeros(4, 16)])
            .unwrap();
        let qsr = QsrSpec::new(
            DenseMatrix::identity(2),
            DenseMatrix::zeros(2, 2),
            DenseMatrix::identity(2),
        )
        .unwrap();
        let cert = verify(
            &net,
            &QsrFamily::Fixed { qsr },
            &DenseMatrix::scaled_identity(4, -0.01),
            &SearchConfig::default(),
        )
        .unwrap();
        assert!(cert.feasible);
        assert!(cert.min_eig_ml >= 0.0);
        assert!(cert.multipliers.lambdas[1] >= 0.01);
    }

    #[test]
    fn indefinite_p11_with_relu_first_layer_is_infeasible() {
        // p = 0 for ReLU, so block (0, 0) of M_L is exactly P11.
        let net = scalar_net(Activation::Relu, 1.0, 1.0);
        let cert = verify(
            &net,
            &QsrFamily::Preset {
                preset: QsrPreset::Passivity,
            },
            &DenseMatrix::scaled_identity(2, -0.01),
            &SearchConfig {
                n_y: Some(1),
                ..SearchConfig::default()
            },
        )
        .unwrap();
        assert!(!cert.feasible);
        assert!(cert.min_eig_ml < 0.0);
        let p11 = qsr_preset(QsrPreset::Passivity, 1, 1).unwrap().p11();
        assert!(cert.min_eig_ml <= min_eig(&p11).unwrap() + 1e-12);
    }

    #[test]
    fn rejects_non_negative_definite_p22() {
        let net = scalar_net(Activation::Tanh, 1.0, 1.0);
        let r = verify(
            &net,
            &QsrFamily::StrictPassivityFamily,
            &DenseMatrix::identity(2),
            &SearchConfig::default(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn relaxed_indices_objective_matches_pair() {
        let net = Mlp::random(&[4, 8, 4], Activation::LeakyRelu { a: 0.2 }, 3).unwrap();
        let r = relaxed_indices(&net, &DenseMatrix::scaled_identity(4, -0.01), &SearchConfig::default())
            .unwrap();
        assert_eq!(r.objective, violation(r.eps, r.delta));
        assert!(r.min_eig_ml >= -1e-9, "{r:?}");
        // P11 must be PSD for any certificate, so eps * delta >= 1/4 with both negative.
        assert!(r.eps < 0.0 && r.delta < 0.0);
        assert!(r.eps * r.delta >= 0.25 - 1e-6);
    }

    #[test]
    fn golden_finds_concave_max() {
        let (x, v) = golden_max(0.0, 4.0, 60, &mut |t| -(t - 1.3) * (t - 1.3));
        assert!((x - 1.3).abs() < 1e-8 && v <= 0.0);
    }

    #[test]
    fn threshold_crossing_brackets_both_sides() {
        let r = threshold_crossing(&mut |r| r - 3.0, 0.0, 60);
        assert!((r - 3.0).abs() < 1e-9);
        let r = threshold_crossing(&mut |r| r + 5.0, 0.0, 60);
        assert!((r + 5.0).abs() < 1e-9);
        assert_eq!(threshold_crossing(&mut |_| -1.0, 0.0, 10), f64::INFINITY);
    }
}
