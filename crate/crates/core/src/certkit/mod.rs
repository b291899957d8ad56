//! Incremental QSR-dissipativity certificates for the network vector field.
//!
//! For a network with layers `z^i = phi_i(W_i z^{i-1} + b_i)` every layer
//! satisfies the slope quadratic constraint
//! `[dv; dphi]^T [[p I, -m I], [-m I, I]] [dv; dphi] <= 0` with
//! `p = alpha beta`, `m = (alpha + beta) / 2`. Stacking those constraints
//! gives `S_T`, the P-blocks give `P_L`, and
//!
//! ```text
//! M_L = P_L + lambda * S_T  >= 0
//! ```
//!
//! certifies `[dz^0; dz^l]^T P [dz^0; dz^l] >= 0` for every pair of inputs.
//! With `P11 = [[Q, S], [S^T, R]]`, `P12 = 0` and `P22 < 0` this is the
//! incremental supply-rate inequality.
//!
//! `lambda` is fixed to 1: it only ever appears in the products
//! `lambda_i * lambda`, so it folds into the per-layer multipliers.
//!
//! Biases never enter `M_L`; they cancel in input differences.

mod assemble;
pub(crate) mod search;

pub use assemble::{block_offsets, build_ml, build_pl, build_st, lemma1_quadratic};
pub use search::{
    feasibility_margin, relaxed_indices, relaxed_indices_from, reverify, verify, verify_from,
    RelaxedIndices, SearchConfig,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matkit::{min_eig, DenseMatrix, SYMMETRY_TOL};
use crate::neuralfield::{Activation, Mlp};
use crate::simkit::Trajectory;

/// Default PSD tolerance for feasibility verdicts.
pub const DEFAULT_PSD_TOL: f64 = 1e-9;

/// Certificate file format version.
pub const CERTIFICATE_FORMAT_VERSION: u32 = 1;

/// Supply-rate matrices `(Q, S, R)` over `[dy; du]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QsrSpec {
    pub q: DenseMatrix,
    pub s: DenseMatrix,
    pub r: DenseMatrix,
}

impl QsrSpec {
    pub fn new(q: DenseMatrix, s: DenseMatrix, r: DenseMatrix) -> Result<Self> {
        let spec = Self { q, s, r };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (ny, nu) = (self.q.rows(), self.r.rows());
        if !self.q.is_square() || !self.r.is_square() || self.s.shape() != (ny, nu) {
            return Err(Error::contract(format!(
                "inconsistent QSR shapes: Q {:?}, S {:?}, R {:?}",
                self.q.shape(),
                self.s.shape(),
                self.r.shape()
            )));
        }
        if !self.q.is_symmetric(SYMMETRY_TOL) || !self.r.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::contract("Q and R must be symmetric"));
        }
        if !(self.q.is_finite() && self.s.is_finite() && self.r.is_finite()) {
            return Err(Error::data("non-finite QSR entries"));
        }
        Ok(())
    }

    pub fn n_y(&self) -> usize {
        self.q.rows()
    }

    pub fn n_u(&self) -> usize {
        self.r.rows()
    }

    /// `[[Q, S], [S^T, R]]`.
    pub fn p11(&self) -> DenseMatrix {
        let (ny, nu) = (self.n_y(), self.n_u());
        let mut m = DenseMatrix::zeros(ny + nu, ny + nu);
        m.set_block(0, 0, &self.q);
        m.set_block(0, ny, &self.s);
        m.set_block(ny, 0, &self.s.transpose());
        m.set_block(ny, ny, &self.r);
        m
    }
}

/// Named supply rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QsrPreset {
    /// `Q = -I/gamma, S = 0, R = gamma I`.
    L2Gain { gamma: f64 },
    /// `Q = 0, S = I/2, R = 0`.
    Passivity,
    /// `Q = -eps I, S = I/2, R = -delta I`.
    StrictPassivity { eps: f64, delta: f64 },
    /// `Q = -I, S = c I, R = (r^2 - c^2) I`.
    Conicity { c: f64, r: f64 },
    /// `Q = -I, S = (a + b) I, R = -a b I`.
    Sector { a: f64, b: f64 },
}

/// Builds the preset's matrices at the requested dimensions. Off-square `S`
/// blocks use the rectangular identity.
pub fn qsr_preset(preset: QsrPreset, n_y: usize, n_u: usize) -> Result<QsrSpec> {
    if n_y == 0 || n_u == 0 {
        return Err(Error::contract("QSR dimensions must be positive"));
    }
    let eye_y = |s: f64| DenseMatrix::scaled_identity(n_y, s);
    let eye_u = |s: f64| DenseMatrix::scaled_identity(n_u, s);
    let cross = |s: f64| DenseMatrix::rect_identity(n_y, n_u, s);
    let finite = |vals: &[f64]| {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::data("non-finite preset parameter"))
        }
    };
    let (q, s, r) = match preset {
        QsrPreset::L2Gain { gamma } => {
            finite(&[gamma])?;
            if gamma <= 0.0 {
                return Err(Error::contract(format!("L2 gain must be positive, got {gamma}")));
            }
            (eye_y(-1.0 / gamma), cross(0.0), eye_u(gamma))
        }
        QsrPreset::Passivity => (eye_y(0.0), cross(0.5), eye_u(0.0)),
        QsrPreset::StrictPassivity { eps, delta } => {
            finite(&[eps, delta])?;
            if eps <= 0.0 || delta <= 0.0 {
                return Err(Error::contract(format!(
                    "strict passivity needs eps > 0 and delta > 0, got ({eps}, {delta})"
                )));
            }
            (eye_y(-eps), cross(0.5), eye_u(-delta))
        }
        QsrPreset::Conicity { c, r } => {
            finite(&[c, r])?;
            if r <= 0.0 {
                return Err(Error::contract(format!("conicity radius must be positive, got {r}")));
            }
            (eye_y(-1.0), cross(c), eye_u(r * r - c * c))
        }
        QsrPreset::Sector { a, b } => {
            finite(&[a, b])?;
            (eye_y(-1.0), cross(a + b), eye_u(-a * b))
        }
    };
    QsrSpec::new(q, s, r)
}

/// Supply rate handed to the certificate: either one fixed `(Q, S, R)` or the
/// strict-passivity family `Q = -eps I, S = I/2, R = -delta I` with `eps`,
/// `delta` as decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QsrFamily {
    Fixed { qsr: QsrSpec },
    Preset { preset: QsrPreset },
    StrictPassivityFamily,
}

impl QsrFamily {
    pub fn is_family(&self) -> bool {
        matches!(self, QsrFamily::StrictPassivityFamily)
    }

    /// Concrete `(Q, S, R)`; `eps`/`delta` are used only in family mode and
    /// may have either sign there.
    pub fn resolve(&self, n_y: usize, n_u: usize, eps: f64, delta: f64) -> Result<QsrSpec> {
        match self {
            QsrFamily::Fixed { qsr } => {
                if qsr.n_y() != n_y || qsr.n_u() != n_u {
                    return Err(Error::contract(format!(
                        "QSR is {}+{} but the network splits as {n_y}+{n_u}",
                        qsr.n_y(),
                        qsr.n_u()
                    )));
                }
                Ok(qsr.clone())
            }
            QsrFamily::Preset { preset } => qsr_preset(*preset, n_y, n_u),
            QsrFamily::StrictPassivityFamily => QsrSpec::new(
                DenseMatrix::scaled_identity(n_y, -eps),
                DenseMatrix::rect_identity(n_y, n_u, 0.5),
                DenseMatrix::scaled_identity(n_u, -delta),
            ),
        }
    }
}

/// `P` blocks of the quadratic form on `[dz^0; dz^l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PBlocks {
    pub p11: DenseMatrix,
    pub p12: DenseMatrix,
    pub p21: DenseMatrix,
    pub p22: DenseMatrix,
}

impl PBlocks {
    pub fn new(
        p11: DenseMatrix,
        p12: DenseMatrix,
        p21: DenseMatrix,
        p22: DenseMatrix,
    ) -> Result<Self> {
        let (n0, nl) = (p11.rows(), p22.rows());
        if !p11.is_square()
            || !p22.is_square()
            || p12.shape() != (n0, nl)
            || p21.shape() != (nl, n0)
        {
            return Err(Error::contract("inconsistent P-block shapes"));
        }
        if !p11.is_symmetric(SYMMETRY_TOL) || !p22.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::contract("P11 and P22 must be symmetric"));
        }
        if p12.transpose().max_abs_diff(&p21) > SYMMETRY_TOL {
            return Err(Error::contract("P12^T must equal P21"));
        }
        Ok(Self { p11, p12, p21, p22 })
    }

    /// `P11 = [[Q, S], [S^T, R]]`, `P12 = P21 = 0` and the given `P22`.
    pub fn dissipativity(qsr: &QsrSpec, p22: &DenseMatrix) -> Result<Self> {
        let n0 = qsr.n_y() + qsr.n_u();
        let nl = p22.rows();
        Self::new(
            qsr.p11(),
            DenseMatrix::zeros(n0, nl),
            DenseMatrix::zeros(nl, n0),
            p22.clone(),
        )
    }

    pub fn n0(&self) -> usize {
        self.p11.rows()
    }

    pub fn nl(&self) -> usize {
        self.p22.rows()
    }
}

/// Fails unless `p22` is symmetric negative definite.
pub fn check_negative_definite(p22: &DenseMatrix) -> Result<()> {
    if !p22.is_square() || !p22.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::contract("P22 must be square and symmetric"));
    }
    let top = -min_eig(&p22.scale(-1.0))?;
    if top >= 0.0 {
        return Err(Error::contract(format!(
            "P22 must be negative definite (largest eigenvalue {top:.3e})"
        )));
    }
    Ok(())
}

/// Multipliers `lambda` and `lambda_1 .. lambda_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: f64,
    pub lambdas: Vec<f64>,
}

impl Multipliers {
    /// `lambda = 1` with the given per-layer multipliers.
    pub fn new(lambdas: Vec<f64>) -> Self {
        Self {
            lambda: 1.0,
            lambdas,
        }
    }

    pub fn uniform(layers: usize, value: f64) -> Self {
        Self::new(vec![value; layers])
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.lambdas.len() != layers {
            return Err(Error::contract(format!(
                "{} layer multipliers for a {layers}-layer network",
                self.lambdas.len()
            )));
        }
        if !(self.lambda >= 0.0) || self.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::contract("multipliers must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Verdict plus everything needed to recompute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub feasible: bool,
    pub qsr: QsrSpec,
    pub p22: DenseMatrix,
    pub multipliers: Multipliers,
    /// Strict-passivity indices (family mode only).
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub min_eig_ml: f64,
    pub psd_tol: f64,
}

/// On-disk certificate with provenance digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub certificate: Certificate,
    pub model_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl Certificate {
    pub fn save(
        &self,
        path: &Path,
        model_digest: &str,
        config_digest: Option<String>,
    ) -> Result<String> {
        let file = CertificateFile {
            format_version: CERTIFICATE_FORMAT_VERSION,
            certificate: self.clone(),
            model_digest: model_digest.to_string(),
            config_digest,
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, &text)?;
        Ok(crate::digest_bytes(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<CertificateFile> {
        let file: CertificateFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format_version != CERTIFICATE_FORMAT_VERSION {
            return Err(Error::Schema {
                expected: CERTIFICATE_FORMAT_VERSION,
                found: file.format_version,
            });
        }
        Ok(file)
    }
}

/// `(p, m) = (alpha beta, (alpha + beta) / 2)`.
pub fn slope_constants(act: &Activation) -> (f64, f64) {
    let (a, b) = act.slope_bounds();
    (a * b, 0.5 * (a + b))
}

/// `[dv; dphi]^T [[p I, -m I], [-m I, I]] [dv; dphi]`, evaluated in the
/// equivalent factored form `sum_k (dphi_k - alpha dv_k)(dphi_k - beta dv_k)`
/// so that exact-slope cases (identity, the linear pieces of ReLU) give 0
/// exactly instead of rounding residue.
pub fn slope_quadratic(v_a: &[f64], v_b: &[f64], act: &Activation) -> Result<f64> {
    if v_a.len() != v_b.len() {
        return Err(Error::contract("slope_quadratic: length mismatch"));
    }
    let (alpha, beta) = act.slope_bounds();
    Ok(v_a
        .iter()
        .zip(v_b)
        .map(|(a, b)| {
            let dv = b - a;
            let dphi = act.apply(*b) - act.apply(*a);
            (dphi - alpha * dv) * (dphi - beta * dv)
        })
        .sum())
}

/// `[dy; du]^T [[Q, S], [S^T, R]] [dy; du]`.
pub fn supply_rate(dy: &[f64], du: &[f64], qsr: &QsrSpec) -> Result<f64> {
    if dy.len() != qsr.n_y() || du.len() != qsr.n_u() {
        return Err(Error::contract(format!(
            "supply rate expects ({}, {}) got ({}, {})",
            qsr.n_y(),
            qsr.n_u(),
            dy.len(),
            du.len()
        )));
    }
    let qy = qsr.q.quad_form(dy);
    let ru = qsr.r.quad_form(du);
    let sy: f64 = dy.iter().zip(qsr.s.mat_vec(du)).map(|(a, b)| a * b).sum();
    Ok(qy + 2.0 * sy + ru)
}

/// Minimum supply rate over all samples of all trajectory pairs, where
/// each sample `z = [y; u]` is split at `qsr.n_y()`.
pub fn empirical_dissipativity(
    pairs: &[(Trajectory, Trajectory)],
    qsr: &QsrSpec,
) -> Result<f64> {
    let n = qsr.n_y() + qsr.n_u();
    let mut worst = f64::INFINITY;
    for (a, b) in pairs {
        if a.len() != b.len() || a.dt != b.dt {
            return Err(Error::contract("trajectory pair differs in length or dt"));
        }
        for (za, zb) in a.samples.iter().zip(&b.samples) {
            if za.len() != n || zb.len() != n {
                return Err(Error::contract("sample dimension does not match the QSR split"));
            }
            let dz: Vec<f64> = zb.iter().zip(za).map(|(x, y)| x - y).collect();
            worst = worst.min(supply_rate(&dz[..qsr.n_y()], &dz[qsr.n_y()..], qsr)?);
        }
    }
    Ok(worst)
}

/// Rolls out model trajectory pairs from the given initial-state pairs and
/// returns [`empirical_dissipativity`] over them.
pub fn empirical_dissipativity_of(
    net: &Mlp,
    initial_pairs: &[(Vec<f64>, Vec<f64>)],
    steps: usize,
    dt: f64,
    qsr: &QsrSpec,
) -> Result<f64> {
    let pairs = initial_pairs
        .iter()
        .map(|(a, b)| {
            Ok((
                crate::neuralfield::rollout(net, a, steps, dt)?,
                crate::neuralfield::rollout(net, b, steps, dt)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    empirical_dissipativity(&pairs, qsr)
}

/// `F0 - lam F1 >= -DEFAULT_PSD_TOL`.
pub fn s_procedure_holds(f0: &DenseMatrix, f1: &DenseMatrix, lam: f64) -> Result<bool> {
    s_procedure_holds_tol(f0, f1, lam, DEFAULT_PSD_TOL)
}

pub fn s_procedure_holds_tol(
    f0: &DenseMatrix,
    f1: &DenseMatrix,
    lam: f64,
    psd_tol: f64,
) -> Result<bool> {
    if !(lam >= 0.0) {
        return Err(Error::contract(format!("S-procedure multiplier must be >= 0, got {lam}")));
    }
    let mut d = f0.clone();
    if f0.shape() != f1.shape() {
        return Err(Error::contract("S-procedure matrices differ in shape"));
    }
    d.axpy(-lam, f1);
    Ok(min_eig(&d)? >= -psd_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = qsr_preset(QsrPreset::Passivity, 2, 2).unwrap();
        assert_eq!(p.q, DenseMatrix::zeros(2, 2));
        assert_eq!(p.s, DenseMatrix::scaled_identity(2, 0.5));
        assert_eq!(p.r, DenseMatrix::zeros(2, 2));

        let l2 = qsr_preset(QsrPreset::L2Gain { gamma: 2.0 }, 2, 2).unwrap();
        assert_eq!(l2.q, DenseMatrix::scaled_identity(2, -0.5));
        assert_eq!(l2.s, DenseMatrix::zeros(2, 2));
        assert_eq!(l2.r, DenseMatrix::scaled_identity(2, 2.0));

        let sec = qsr_preset(QsrPreset::Sector { a: -1.0, b: 1.0 }, 2, 2).unwrap();
        assert_eq!(sec.q, DenseMatrix::scaled_identity(2, -1.0));
        assert_eq!(sec.s, DenseMatrix::zeros(2, 2));
        assert_eq!(sec.r, DenseMatrix::scaled_identity(2, 1.0));

        let con = qsr_preset(QsrPreset::Conicity { c: 1.0, r: 2.0 }, 1, 1).unwrap();
        assert_eq!(con.r.get(0, 0), 3.0);
    }

    #[test]
    fn preset_errors() {
        assert!(matches!(
            qsr_preset(QsrPreset::L2Gain { gamma: 0.0 }, 2, 2),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            qsr_preset(QsrPreset::Conicity { c: 0.0, r: -1.0 }, 2, 2),
            Err(Error::Contract(_))
        ));
        assert!(qsr_preset(QsrPreset::StrictPassivity { eps: 0.0, delta: 1.0 }, 2, 2).is_err());
    }

    #[test]
    fn slope_constant_examples() {
        assert_eq!(slope_constants(&Activation::Relu), (0.0, 0.5));
        let (p, m) = slope_constants(&Activation::LeakyRelu { a: 0.2 });
        assert!((p - 0.2).abs() < 1e-15 && (m - 0.6).abs() < 1e-15);
        assert_eq!(slope_constants(&Activation::Identity), (1.0, 1.0));
    }

    #[test]
    fn slope_quadratic_examples() {
        assert_eq!(slope_quadratic(&[0.3], &[0.3], &Activation::Tanh).unwrap(), 0.0);
        assert_eq!(slope_quadratic(&[-1.0], &[1.0], &Activation::Relu).unwrap(), -1.0);
        assert_eq!(
            slope_quadratic(&[0.123, -4.5], &[7.25, 1.0 / 3.0], &Activation::Identity).unwrap(),
            0.0
        );
        assert!(slope_quadratic(&[1.0], &[1.0, 2.0], &Activation::Relu).is_err());
    }

    #[test]
    fn factored_form_matches_matrix_form() {
        let act = Activation::LeakyRelu { a: 0.3 };
        let (p, m) = slope_constants(&act);
        for (a, b) in [(-2.0, 1.5), (0.4, 3.0), (-5.0, -0.1)] {
            let dv: f64 = b - a;
            let dphi = act.apply(b) - act.apply(a);
            let matrix_form = p * dv * dv - 2.0 * m * dv * dphi + dphi * dphi;
            let f = slope_quadratic(&[a], &[b], &act).unwrap();
            assert!((f - matrix_form).abs() < 1e-12);
        }
    }

    #[test]
    fn supply_rate_examples() {
        let p = qsr_preset(QsrPreset::Passivity, 2, 2).unwrap();
        assert_eq!(supply_rate(&[0.0, 0.0], &[0.0, 0.0], &p).unwrap(), 0.0);
        assert_eq!(supply_rate(&[1.0, 0.0], &[1.0, 0.0], &p).unwrap(), 1.0);
        assert_eq!(supply_rate(&[1.0, 0.0], &[-1.0, 0.0], &p).unwrap(), -1.0);
        assert!(supply_rate(&[1.0], &[1.0, 0.0], &p).is_err());
    }

    #[test]
    fn s_procedure_examples() {
        let i = DenseMatrix::identity(2);
        assert!(s_procedure_holds(&i, &i, 1.0).unwrap());
        let d = DenseMatrix::diag(&[1.0, -1.0]);
        assert!(s_procedure_holds(&d, &d, 1.0).unwrap());
        assert!(!s_procedure_holds(&d, &i, 0.0).unwrap());
        assert!(s_procedure_holds(&i, &i, -1.0).is_err());
        assert!(s_procedure_holds(&i, &DenseMatrix::identity(3), 1.0).is_err());
    }

    #[test]
    fn p22_definiteness_check() {
        assert!(check_negative_definite(&DenseMatrix::scaled_identity(2, -0.01)).is_ok());
        assert!(check_negative_definite(&DenseMatrix::diag(&[-1.0, 0.0])).is_err());
        assert!(check_negative_definite(&DenseMatrix::identity(2)).is_err());
    }

    #[test]
    fn family_resolution() {
        let f = QsrFamily::StrictPassivityFamily;
        let q = f.resolve(2, 2, 0.1, -0.2).unwrap();
        assert_eq!(q.q, DenseMatrix::scaled_identity(2, -0.1));
        assert_eq!(q.r, DenseMatrix::scaled_identity(2, 0.2));
        assert_eq!(q.s, DenseMatrix::scaled_identity(2, 0.5));
        let fixed = QsrFamily::Fixed { qsr: q };
        assert!(fixed.resolve(1, 3, 0.0, 0.0).is_err());
    }
}
