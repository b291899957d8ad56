//! Rollout loss and its exact gradient by reverse accumulation through the
//! unrolled RK4 steps.

use rayon::prelude::*;

use super::{Mlp, TrainConfig, TrainableMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossAndGradient {
    pub loss: f64,
    /// Same layout as [`Mlp::params`].
    pub gradient: Vec<f64>,
}

struct Unrolled {
    /// Stage inputs `[z_n, z_n + h/2 k1, z_n + h/2 k2, z_n + h k3]` per step.
    stages: Vec<[Vec<f64>; 4]>,
    states: Vec<Vec<f64>>,
}

fn unroll(net: &Mlp, z0: &[f64], steps: usize, h: f64) -> Option<Unrolled> {
    let n = z0.len();
    let mut states = Vec::with_capacity(steps + 1);
    let mut stages = Vec::with_capacity(steps);
    states.push(z0.to_vec());
    for k in 0..steps {
        let z = &states[k];
        let s1 = z.clone();
        let k1 = net.eval(&s1);
        let s2: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * h * k1[i]).collect();
        let k2 = net.eval(&s2);
        let s3: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * h * k2[i]).collect();
        let k3 = net.eval(&s3);
        let s4: Vec<f64> = (0..n).map(|i| z[i] + h * k3[i]).collect();
        let k4 = net.eval(&s4);
        let next: Vec<f64> = (0..n)
            .map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        stages.push([s1, s2, s3, s4]);
        states.push(next);
    }
    Some(Unrolled { stages, states })
}

fn check_window(window: &[Vec<f64>], net: &Mlp, horizon: usize, stride: usize) -> Result<()> {
    if window.len() < horizon * stride + 1 {
        return Err(Error::contract(format!(
            "window of {} samples is shorter than horizon {horizon} x stride {stride} + 1",
            window.len()
        )));
    }
    if window[0].len() != net.input_dim() {
        return Err(Error::contract("window sample dimension does not match the network"));
    }
    Ok(())
}

/// Sum of squared errors between the rollout from `window[0]` and
/// `window[k * stride]` for `k = 1..=horizon`.
fn sse(net: &Mlp, window: &[Vec<f64>], horizon: usize, stride: usize, h: f64) -> Option<f64> {
    let u = unroll(net, &window[0], horizon, h)?;
    Some(
        (1..=horizon)
            .map(|k| {
                u.states[k]
                    .iter()
                    .zip(&window[k * stride])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum(),
    )
}

/// Mean squared rollout error over one window (no gradient).
pub fn window_loss(
    net: &Mlp,
    window: &[Vec<f64>],
    horizon: usize,
    stride: usize,
    dt: f64,
) -> Result<f64> {
    check_window(window, net, horizon, stride)?;
    let h = dt * stride as f64;
    sse(net, window, horizon, stride, h)
        .map(|s| s / (horizon * net.input_dim()) as f64)
        .filter(|l| l.is_finite())
        .ok_or_else(|| Error::Training {
            batch: 0,
            message: "rollout diverged".into(),
        })
}

fn window_gradient(
    net: &Mlp,
    window: &[Vec<f64>],
    horizon: usize,
    stride: usize,
    h: f64,
    scale: f64,
) -> Option<(f64, Vec<f64>)> {
    let n = net.input_dim();
    let u = unroll(net, &window[0], horizon, h)?;
    let mut grad = vec![0.0; net.num_params()];
    let mut sse = 0.0;
    let mut zbar = vec![0.0; n];
    for k in (1..=horizon).rev() {
        let target = &window[k * stride];
        for i in 0..n {
            let r = u.states[k][i] - target[i];
            sse += r * r;
            zbar[i] += 2.0 * r * scale;
        }
        // back through step k-1 -> k
        let [s1, s2, s3, s4] = &u.stages[k - 1];
        let mut k1bar: Vec<f64> = zbar.iter().map(|g| g * h / 6.0).collect();
        let mut k2bar: Vec<f64> = zbar.iter().map(|g| g * h / 3.0).collect();
        let mut k3bar: Vec<f64> = k2bar.clone();
        let k4bar: Vec<f64> = k1bar.clone();
        let mut prev = zbar.clone();

        let s4bar = net.vjp(&net.forward_cached(s4), &k4bar, &mut grad);
        for i in 0..n {
            prev[i] += s4bar[i];
            k3bar[i] += h * s4bar[i];
        }
        let s3bar = net.vjp(&net.forward_cached(s3), &k3bar, &mut grad);
        for i in 0..n {
            prev[i] += s3bar[i];
            k2bar[i] += 0.5 * h * s3bar[i];
        }
        let s2bar = net.vjp(&net.forward_cached(s2), &k2bar, &mut grad);
        for i in 0..n {
            prev[i] += s2bar[i];
            k1bar[i] += 0.5 * h * s2bar[i];
        }
        let s1bar = net.vjp(&net.forward_cached(s1), &k1bar, &mut grad);
        for i in 0..n {
            prev[i] += s1bar[i];
        }
        zbar = prev;
    }
    if !sse.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    Some((sse, grad))
}

/// Mean squared error between the rollout from each window's first sample
/// and the window's samples over `cfg.horizon` model steps of size
/// `cfg.dt * cfg.stride`, with its exact gradient. Masked-out parameters get
/// exactly zero gradient.
///
/// Windows are processed in parallel; the per-window results are reduced
/// in window order, so the output does not depend on the thread count.
pub fn loss_and_gradient(
    net: &Mlp,
    batch: &[&[Vec<f64>]],
    cfg: &TrainConfig,
) -> Result<LossAndGradient> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (horizon, stride) = (cfg.horizon, cfg.stride);
    for w in batch {
        check_window(w, net, horizon, stride)?;
    }
    let h = cfg.dt * stride as f64;
    let denom = (batch.len() * horizon * net.input_dim()) as f64;
    let scale = 1.0 / denom;

    let parts: Vec<Option<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|w| window_gradient(net, w, horizon, stride, h, scale))
        .collect();

    let mut loss = 0.0;
    let mut gradient = vec![0.0; net.num_params()];
    for (idx, part) in parts.into_iter().enumerate() {
        let (s, g) = part.ok_or_else(|| Error::Training {
            batch: idx,
            message: "non-finite loss or gradient".into(),
        })?;
        loss += s;
        for (a, b) in gradient.iter_mut().zip(&g) {
            *a += b;
        }
    }
    loss /= denom;
    if cfg.mask == TrainableMask::BiasesOnly {
        for (g, is_w) in gradient.iter_mut().zip(net.weight_mask()) {
            if is_w {
                *g = 0.0;
            }
        }
    }
    Ok(LossAndGradient { loss, gradient })
}
