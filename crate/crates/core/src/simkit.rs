//! Ground-truth simulation and dataset fabrication.
//!
//! The simulated plant is the forced Duffing oscillator driven by the
//! case-study input law. Its state is augmented as `z = [x1, x2, u, pad]`,
//! where `pad` is a dummy input channel with zero dynamics so that the
//! network input and output dimensions agree.
//!
//! Noise convention: the `noise_variance` argument is a **variance**
//! (0.01 gives standard deviation 0.1). Noise is added to the stored
//! samples of the state and true-input channels only, never to the pad
//! channel, and is not fed back into the integration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sub_seed;

/// Width of the augmented state `[x1, x2, u, pad]`.
pub const AUGMENTED_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            c: 1.0,
        }
    }
}

impl DuffingParams {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::data("Duffing parameters must be finite"))
        }
    }
}

/// `z = [x; u]` with `x = (x1, x2)` and `u = (u, pad)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub x: [f64; 2],
    pub u: [f64; 2],
}

impl AugmentedState {
    pub fn new(x: [f64; 2], u: f64) -> Self {
        Self { x, u: [u, 0.0] }
    }

    pub fn z(&self) -> Vec<f64> {
        vec![self.x[0], self.x[1], self.u[0], self.u[1]]
    }
}

/// Uniformly sampled trajectory; sample `k` is at `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.samples.last().expect("trajectory has samples")
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Trajectory {
        Trajectory {
            t0: self.t0,
            dt: self.dt,
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("z{i}")));
        w.write_record(&header)?;
        for (k, s) in self.samples.iter().enumerate() {
            let mut rec = Vec::with_capacity(s.len() + 1);
            rec.push(self.time(k).to_string());
            rec.extend(s.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Trajectory::write_csv`]. `dt` is taken from
    /// the first two timestamps.
    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("t")
            || header
                .iter()
                .skip(1)
                .enumerate()
                .any(|(i, h)| h != format!("z{i}"))
        {
            return Err(Error::data(format!(
                "{}: unexpected trajectory header",
                path.display()
            )));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> =
                rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            times.push(vals[0]);
            samples.push(vals[1..].to_vec());
        }
        if samples.is_empty() {
            return Err(Error::data(format!("{}: no samples", path.display())));
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        Ok(Trajectory {
            t0: times[0],
            dt,
            samples,
        })
    }
}

/// One contiguous window cut from a source trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub source: usize,
    pub start: usize,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dt: f64,
    pub collections: Vec<Collection>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.collections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collections.is_empty()
    }

    /// Common collection length.
    pub fn window_len(&self) -> usize {
        self.collections.first().map_or(0, |c| c.samples.len())
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::data(format!("non-finite {what}")))
    }
}

/// Duffing vector field `(x2, -a x2 - (b + c x1^2) x1 + u)`.
pub fn duffing_field(x: [f64; 2], u: f64, p: &DuffingParams) -> Result<[f64; 2]> {
    check_finite(&[x[0], x[1], u], "Duffing state or input")?;
    p.validate()?;
    Ok(duffing_unchecked(x, u, p))
}

#[inline]
fn duffing_unchecked(x: [f64; 2], u: f64, p: &DuffingParams) -> [f64; 2] {
    [x[1], -p.a * x[1] - (p.b + p.c * x[0] * x[0]) * x[0] + u]
}

/// Input rate `(0.6 cos(pi t) - 3 pi sin(pi t)) e^{-0.2 t}` for `t >= 0`, zero before.
pub fn case_study_input_rate(t: f64) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::data("non-finite time"));
    }
    Ok(input_rate_unchecked(t))
}

#[inline]
fn input_rate_unchecked(t: f64) -> f64 {
    use std::f64::consts::PI;
    if t < 0.0 {
        return 0.0;
    }
    let decay = (-0.2 * t).exp();
    0.6 * decay * (PI * t).cos() - 3.0 * PI * decay * (PI * t).sin()
}

/// Right-hand side of the augmented plant `z' = [x2, duffing, u'(t), 0]`.
pub fn augmented_field(p: DuffingParams) -> impl Fn(f64, &[f64]) -> Vec<f64> {
    move |t, z| {
        let [dx1, dx2] = duffing_unchecked([z[0], z[1]], z[2], &p);
        vec![dx1, dx2, input_rate_unchecked(t), 0.0]
    }
}

fn step_count(t_span: (f64, f64), dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Integration {
            time: t_span.0,
            message: format!("step size must be positive, got {dt}"),
        });
    }
    let span = t_span.1 - t_span.0;
    if !span.is_finite() || span < 0.0 {
        return Err(Error::contract(format!("invalid time span {t_span:?}")));
    }
    let steps = (span / dt).round();
    if (steps * dt - span).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "span {span} is not a multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

/// One classical RK4 step.
pub fn rk4_step(field: &impl Fn(f64, &[f64]) -> Vec<f64>, t: f64, z: &[f64], dt: f64) -> Vec<f64> {
    let n = z.len();
    let k1 = field(t, z);
    let tmp: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * dt * k1[i]).collect();
    let k2 = field(t + 0.5 * dt, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * dt * k2[i]).collect();
    let k3 = field(t + 0.5 * dt, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| z[i] + dt * k3[i]).collect();
    let k4 = field(t + dt, &tmp);
    (0..n)
        .map(|i| z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Fixed-step classical RK4 from `t_span.0` to `t_span.1`, sampling every
/// grid point including both endpoints.
pub fn integrate_rk4(
    field: impl Fn(f64, &[f64]) -> Vec<f64>,
    z0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory> {
    let steps = step_count(t_span, dt)?;
    integrate_steps(field, z0, t_span.0, steps, dt)
}

/// RK4 for a fixed number of steps.
pub fn integrate_steps(
    field: impl Fn(f64, &[f64]) -> Vec<f64>,
    z0: &[f64],
    t0: f64,
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Integration {
            time: t0,
            message: format!("step size must be positive, got {dt}"),
        });
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            time: t0,
            message: "non-finite initial state".into(),
        });
    }
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(z0.to_vec());
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let next = rk4_step(&field, t, &samples[k], dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                time: t + dt,
                message: "state became non-finite".into(),
            });
        }
        samples.push(next);
    }
    Ok(Trajectory { t0, dt, samples })
}

/// Initial `x` states drawn uniformly from `[-1, 1]^2`.
pub fn draw_initial_states(count: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
        .collect()
}

/// Simulates the augmented plant from each `(x0, u0)` pair and adds sensor
/// noise of the given variance to the state and true-input channels.
pub fn generate_trajectories(
    p: &DuffingParams,
    initial_states: &[[f64; 2]],
    u0_values: &[f64],
    t_span: (f64, f64),
    dt: f64,
    noise_variance: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if initial_states.len() != u0_values.len() {
        return Err(Error::contract(format!(
            "{} initial states but {} input offsets",
            initial_states.len(),
            u0_values.len()
        )));
    }
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::contract(format!(
            "noise variance must be non-negative, got {noise_variance}"
        )));
    }
    p.validate()?;
    let sigma = noise_variance.sqrt();
    initial_states
        .iter()
        .zip(u0_values)
        .enumerate()
        .map(|(idx, (x0, u0))| {
            let z0 = AugmentedState::new(*x0, *u0).z();
            let mut traj = integrate_rk4(augmented_field(*p), &z0, t_span, dt)?;
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, idx as u64));
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                for s in &mut traj.samples {
                    for v in &mut s[..3] {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            Ok(traj)
        })
        .collect()
}

/// Draws `m` windows of `len` consecutive samples: a uniformly random source
/// trajectory and a uniformly random valid start index for each.
pub fn sample_collections(
    trajectories: &[Trajectory],
    m: usize,
    len: usize,
    seed: u64,
) -> Result<Dataset> {
    if trajectories.is_empty() || m == 0 || len == 0 {
        return Err(Error::contract(
            "need at least one trajectory, one collection and a positive length",
        ));
    }
    let dt = trajectories[0].dt;
    if trajectories.iter().any(|t| t.dt != dt) {
        return Err(Error::contract("trajectories have different dt"));
    }
    let shortest = trajectories.iter().map(Trajectory::len).min().unwrap_or(0);
    if len > shortest {
        return Err(Error::contract(format!(
            "collection length {len} exceeds shortest trajectory ({shortest} samples)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let collections = (0..m)
        .map(|_| {
            let source = rng.random_range(0..trajectories.len());
            let traj = &trajectories[source];
            let start = rng.random_range(0..=traj.len() - len);
            Collection {
                source,
                start,
                samples: traj.samples[start..start + len].to_vec(),
            }
        })
        .collect();
    Ok(Dataset { dt, collections })
}
