use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralfield::{rollout, Mlp};
use crate::simkit::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    /// Per-channel RMSE against the ground truth.
    pub rmse: Vec<f64>,
    pub max_abs: Vec<f64>,
    /// Root of the mean squared error over all channels.
    pub overall_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub a: String,
    pub b: String,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFailure {
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub models: Vec<ModelMetrics>,
    pub pairwise: Vec<PairMetrics>,
    pub failures: Vec<ModelFailure>,
}

impl MetricsTable {
    pub fn get(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// `(per-channel rmse, per-channel max |diff|)` over aligned samples.
pub fn channel_errors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "cannot compare {} samples with {}",
            a.len(),
            b.len()
        )));
    }
    let n = a[0].len();
    let mut sq = vec![0.0; n];
    let mut mx = vec![0.0f64; n];
    for (x, y) in a.iter().zip(b) {
        if x.len() != n || y.len() != n {
            return Err(Error::contract("sample width mismatch"));
        }
        for c in 0..n {
            let d = x[c] - y[c];
            sq[c] += d * d;
            mx[c] = mx[c].max(d.abs());
        }
    }
    let rmse = sq.iter().map(|s| (s / a.len() as f64).sqrt()).collect();
    Ok((rmse, mx))
}

fn overall(rmse: &[f64]) -> f64 {
    (rmse.iter().map(|r| r * r).sum::<f64>() / rmse.len() as f64).sqrt()
}

/// Rolls every model out from `z0` over the ground truth's grid and
/// tabulates errors. A model whose rollout fails is listed under
/// `failures` and left out of the pairwise table; the rest still run.
pub fn compare_models(models: &[(String, Mlp)], z0: &[f64], truth: &Trajectory) -> Result<MetricsTable> {
    if truth.len() < 2 {
        return Err(Error::contract("ground truth needs at least two samples"));
    }
    let steps = truth.len() - 1;
    let mut table = MetricsTable::default();
    let mut rolled: Vec<(&str, Trajectory)> = Vec::new();
    for (name, net) in models {
        match rollout(net, z0, steps, truth.dt).and_then(|tr| {
            let (rmse, max_abs) = channel_errors(&tr.samples, &truth.samples)?;
            Ok((tr, rmse, max_abs))
        }) {
            Ok((tr, rmse, max_abs)) => {
                table.models.push(ModelMetrics {
                    name: name.clone(),
                    overall_rmse: overall(&rmse),
                    rmse,
                    max_abs,
                });
                rolled.push((name, tr));
            }
            Err(e) => table.failures.push(ModelFailure {
                name: name.clone(),
                error: e.to_string(),
            }),
        }
    }
    for i in 0..rolled.len() {
        for j in i + 1..rolled.len() {
            let (rmse, _) = channel_errors(&rolled[i].1.samples, &rolled[j].1.samples)?;
            table.pairwise.push(PairMetrics {
                a: rolled[i].0.to_string(),
                b: rolled[j].0.to_string(),
                rmse,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_rmse() {
        let a: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 1.0]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|s| vec![s[0], s[1] + 0.3]).collect();
        let (rmse, mx) = channel_errors(&a, &b).unwrap();
        assert_eq!(rmse[0], 0.0);
        assert!((rmse[1] - 0.3).abs() < 1e-15);
        assert!((mx[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(channel_errors(&[vec![0.0]], &[]).is_err());
    }
}
