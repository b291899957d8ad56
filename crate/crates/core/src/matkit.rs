//! Dense real linear algebra used by every certificate computation.
//!
//! Matrices are small (the case-study certificate matrix is 24x24), so the
//! symmetric eigensolver is plain cyclic Jacobi. Inputs to [`sym_eig`] are
//! checked for symmetry to `SYMMETRY_TOL` and then symmetrized as
//! `(A + A^T) / 2` before decomposition.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Absolute tolerance on `|a_ij - a_ji|` accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Largest dimension accepted by the eigensolver.
pub const MAX_EIG_DIM: usize = 512;

const MAX_SWEEPS: usize = 100;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::from_row_major(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    /// `rows x cols` matrix with `s` on the main diagonal (rectangular identity).
    pub fn rect_identity(rows: usize, cols: usize, s: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = s;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major entries, rejecting shape mismatches and
    /// non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged row lengths"));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A^T A`.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for k in 0..self.rows {
            let r = self.row(k);
            for i in 0..n {
                let a = r[i];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out.data[i * n..(i + 1) * n].iter_mut().zip(r) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `A^T x`.
    pub fn t_mat_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    /// `x^T A x` for square `A`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        debug_assert!(self.is_square() && x.len() == self.rows);
        x.iter()
            .zip(self.mat_vec(x))
            .map(|(a, b)| a * b)
            .sum()
    }

    fn check_same_shape(&self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    fn zip_map(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|a_ij - a_ji|`; infinite for non-square matrices.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    pub fn block(&self, r0: usize, c0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |i, j| self.get(r0 + i, c0 + j))
    }

    /// Adds `m` into the block whose top-left corner is `(r0, c0)`.
    pub fn add_block(&mut self, r0: usize, c0: usize, m: &DenseMatrix) {
        for i in 0..m.rows {
            for j in 0..m.cols {
                self.add_at(r0 + i, c0 + j, m.get(i, j));
            }
        }
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, m: &DenseMatrix) {
        for i in 0..m.rows {
            let dst = &mut self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + m.cols];
            dst.copy_from_slice(m.row(i));
        }
    }

    /// Adds `s * A` elementwise.
    pub fn axpy(&mut self, s: f64, a: &DenseMatrix) {
        debug_assert_eq!(self.shape(), a.shape());
        for (d, v) in self.data.iter_mut().zip(&a.data) {
            *d += s * v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Eigenvalues in non-decreasing order.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: DenseMatrix,
}

impl SymEigResult {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.vectors.rows()).map(|i| self.vectors.get(i, j)).collect()
    }

    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let mut out = DenseMatrix::zeros(n, n);
        for (k, lam) in self.values.iter().enumerate() {
            for i in 0..n {
                let vik = self.vectors.get(i, k) * lam;
                if vik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.add_at(i, j, vik * self.vectors.get(j, k));
                }
            }
        }
        out
    }
}

fn check_symmetric_input(a: &DenseMatrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "symmetric routine given a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() > MAX_EIG_DIM {
        return Err(Error::contract(format!(
            "dimension {} exceeds the supported maximum {MAX_EIG_DIM}",
            a.rows()
        )));
    }
    if !a.is_finite() {
        return Err(Error::data("matrix has non-finite entries"));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "matrix is not symmetric (max |a_ij - a_ji| = {asym:.3e})"
        )));
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigResult> {
    check_symmetric_input(a)?;
    let n = a.rows();
    let mut m = a.symmetrized().into_vec();
    let mut v = DenseMatrix::identity(n).into_vec();

    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (f64::EPSILON * scale).powi(2) * 1e-2;

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // negligible against both diagonal entries
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // columns p, q
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                // rows p, q
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| v[i * n + order[j]]);
    Ok(SymEigResult { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(a: &DenseMatrix) -> Result<f64> {
    Ok(sym_eig(a)?.values[0])
}

/// `min_eig(a) >= -tol`.
pub fn is_psd(a: &DenseMatrix, tol: f64) -> Result<bool> {
    Ok(min_eig(a)? >= -tol)
}

/// Grid of optional blocks; `None` is a zero block.
pub type BlockGrid = Vec<Vec<Option<DenseMatrix>>>;

/// Assembles a block grid, inferring block heights per grid row and widths
/// per grid column from the blocks present. Every grid row and column must
/// contain at least one block.
pub fn frob_block_assemble(blocks: &BlockGrid) -> Result<DenseMatrix> {
    let nr = blocks.len();
    let nc = blocks.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(Error::contract("empty block grid"));
    }
    if blocks.iter().any(|r| r.len() != nc) {
        return Err(Error::contract("ragged block grid"));
    }
    let mut heights = vec![None; nr];
    let mut widths = vec![None; nc];
    for (i, row) in blocks.iter().enumerate() {
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                for (slot, size, what) in [
                    (&mut heights[i], b.rows(), "row"),
                    (&mut widths[j], b.cols(), "column"),
                ] {
                    match slot {
                        None => *slot = Some(size),
                        Some(s) if *s != size => {
                            return Err(Error::contract(format!(
                                "inconsistent block sizes in grid {what} ({s} vs {size})"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    let heights: Option<Vec<usize>> = heights.into_iter().collect();
    let widths: Option<Vec<usize>> = widths.into_iter().collect();
    match (heights, widths) {
        (Some(h), Some(w)) => block_assemble_with_sizes(blocks, &h, &w),
        _ => Err(Error::contract(
            "cannot infer block sizes: a grid row or column has no blocks",
        )),
    }
}

/// Assembles a block grid with explicit block heights and widths.
pub fn block_assemble_with_sizes(
    blocks: &BlockGrid,
    heights: &[usize],
    widths: &[usize],
) -> Result<DenseMatrix> {
    if blocks.len() != heights.len() || blocks.iter().any(|r| r.len() != widths.len()) {
        return Err(Error::contract("block grid does not match the size lists"));
    }
    let total_r: usize = heights.iter().sum();
    let total_c: usize = widths.iter().sum();
    let mut out = DenseMatrix::zeros(total_r, total_c);
    let mut r0 = 0;
    for (i, row) in blocks.iter().enumerate() {
        let mut c0 = 0;
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                if b.rows() != heights[i] || b.cols() != widths[j] {
                    return Err(Error::contract(format!(
                        "block ({i}, {j}) is {}x{}, expected {}x{}",
                        b.rows(),
                        b.cols(),
                        heights[i],
                        widths[j]
                    )));
                }
                out.set_block(r0, c0, b);
            }
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn eig_identity() {
        let r = sym_eig(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(r.values, vec![1.0, 1.0]);
    }

    #[test]
    fn eig_diagonal_sorted() {
        let r = sym_eig(&DenseMatrix::diag(&[3.0, -2.0])).unwrap();
        assert_eq!(r.values, vec![-2.0, 3.0]);
        assert_eq!(r.vector(0), vec![0.0, 1.0]);
    }

    #[test]
    fn eig_two_by_two() {
        let r = sym_eig(&m(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-14);
        assert!((r.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn min_eig_examples() {
        assert_eq!(min_eig(&DenseMatrix::zeros(3, 3)).unwrap(), 0.0);
        assert_eq!(min_eig(&DenseMatrix::diag(&[1.0, -1.0])).unwrap(), -1.0);
        // (tr - sqrt(diff^2 + 4 b^2)) / 2
        let a = m(&[&[1.25, -0.5], &[-0.5, 0.99]]);
        let expected = (2.24 - (0.26f64 * 0.26 + 1.0).sqrt()) / 2.0;
        assert!((min_eig(&a).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.60337).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_input() {
        let rect = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(Error::Contract(_))));
        let asym = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&asym), Err(Error::Contract(_))));
        assert!(matches!(
            DenseMatrix::from_row_major(1, 1, vec![f64::NAN]),
            Err(Error::Data(_))
        ));
        let mut bad = DenseMatrix::zeros(2, 2);
        bad.set(0, 0, f64::INFINITY);
        assert!(matches!(sym_eig(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let a = m(&[&[1.0, 0.5 + 5e-13], &[0.5, 1.0]]);
        let r = sym_eig(&a).unwrap();
        assert!((r.values[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deserialize_validates_shape() {
        let ok: DenseMatrix = serde_json::from_str(r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#).unwrap();
        assert_eq!(ok.get(0, 1), 2.0);
        assert!(serde_json::from_str::<DenseMatrix>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }

    #[test]
    fn assemble_single_and_diag() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0]]);
        assert_eq!(frob_block_assemble(&vec![vec![Some(a.clone())]]).unwrap(), a);
        let d = frob_block_assemble(&vec![
            vec![Some(a.clone()), None],
            vec![None, Some(b.clone())],
        ])
        .unwrap();
        assert_eq!(d.shape(), (3, 3));
        assert_eq!(d.get(2, 2), 5.0);
        assert!(frob_block_assemble(&vec![vec![Some(a.clone()), None]]).is_err());
        let d = block_assemble_with_sizes(
            &vec![vec![Some(a.clone()), None], vec![None, Some(b)]],
            &[2, 1],
            &[2, 1],
        )
        .unwrap();
        assert_eq!(d.get(2, 2), 5.0);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 1), 4.0);
    }

    #[test]
    fn assemble_symmetric_off_diagonal() {
        let a = m(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let b = m(&[&[3.0]]);
        let c = m(&[&[0.5, -1.5]]);
        let out = frob_block_assemble(&vec![
            vec![Some(a), Some(c.transpose())],
            vec![Some(c), Some(b)],
        ])
        .unwrap();
        assert_eq!(out, out.transpose());
    }

    #[test]
    fn assemble_rejects_inconsistent() {
        let a = DenseMatrix::zeros(2, 2);
        let b = DenseMatrix::zeros(3, 2);
        let grid = vec![vec![Some(a), Some(b)]];
        assert!(matches!(frob_block_assemble(&grid), Err(Error::Contract(_))));
    }
}
