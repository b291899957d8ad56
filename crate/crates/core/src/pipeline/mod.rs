//! The four-stage identification pipeline:
//!
//! 1. train a baseline model on dataset `D1`;
//! 2. perturb its weights onto the certified set;
//! 3. freeze the weights;
//! 4. retrain only the biases on a fresh dataset `D2`.
//!
//! Every artifact is written under the output directory. JSON artifacts
//! carry the digest of the configuration that produced them.

mod metrics;

pub use metrics::{channel_errors, compare_models, MetricsTable, ModelFailure, ModelMetrics, PairMetrics};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::certkit::{
    build_ml, relaxed_indices, reverify, Certificate, PBlocks, QsrFamily, RelaxedIndices,
};
use crate::error::{Error, Result};
use crate::matkit::DenseMatrix;
use crate::neuralfield::{dataset_loss, train_with_history, Activation, Mlp, TrainConfig, TrainableMask};
use crate::perturbkit::{perturb_traced, write_trace_csv, SolverConfig};
use crate::simkit::{
    draw_initial_states, generate_trajectories, integrate_rk4, augmented_field, sample_collections,
    AugmentedState, Dataset, DuffingParams, Trajectory, AUGMENTED_DIM,
};
use crate::{digest_bytes, sub_seed};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    /// `u' = (0.6 cos(pi t) - 3 pi sin(pi t)) e^{-0.2 t}`.
    CaseStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    /// Initial input value of each simulated trajectory; its length is the
    /// trajectory count.
    pub u0_values: Vec<f64>,
    pub points: usize,
    pub dt: f64,
    pub noise_variance: f64,
    pub collections: usize,
    pub collection_len: usize,
}

impl DatasetRecipe {
    fn span(&self) -> (f64, f64) {
        (0.0, (self.points - 1) as f64 * self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![AUGMENTED_DIM];
        d.extend(&self.hidden);
        d.push(AUGMENTED_DIM);
        d
    }
}

/// Held-out evaluation: noise-free simulation from a fresh initial state
/// with the case-study input starting at `u0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    pub seed: u64,
    pub u0: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub d1: u64,
    pub d2: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub profile: Profile,
    pub system: DuffingParams,
    pub input_law: InputLaw,
    pub data: DatasetRecipe,
    pub seeds: Seeds,
    pub architecture: Architecture,
    pub baseline_training: TrainConfig,
    pub bias_training: TrainConfig,
    pub qsr: QsrFamily,
    /// `P22 = -p22_scale I`.
    pub p22_scale: f64,
    pub solver: SolverConfig,
    pub test: TestProtocol,
    /// Not part of the digest; the CLI's `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// 3 trajectories x 2000 points, 20 collections of 500.
    pub fn desk() -> Self {
        let dt = 1e-3;
        Self {
            schema_version: SCHEMA_VERSION,
            profile: Profile::Desk,
            system: DuffingParams::default(),
            input_law: InputLaw::CaseStudy,
            data: DatasetRecipe {
                u0_values: vec![0.0, 0.1, 0.2],
                points: 2000,
                dt,
                noise_variance: 0.01,
                collections: 20,
                collection_len: 500,
            },
            seeds: Seeds {
                d1: 11,
                d2: 23,
                init: 5,
            },
            architecture: Architecture {
                hidden: vec![16],
                activation: Activation::LeakyRelu { a: 0.2 },
            },
            baseline_training: TrainConfig {
                learning_rate: 5e-3,
                epochs: 800,
                batch_size: 10,
                horizon: 50,
                stride: 5,
                dt,
                seed: 101,
                ..TrainConfig::default()
            },
            bias_training: TrainConfig {
                learning_rate: 2e-3,
                epochs: 300,
                batch_size: 10,
                horizon: 50,
                stride: 5,
                dt,
                seed: 202,
                mask: TrainableMask::BiasesOnly,
                ..TrainConfig::default()
            },
            qsr: QsrFamily::StrictPassivityFamily,
            p22_scale: 0.01,
            solver: SolverConfig::default(),
            test: TestProtocol {
                seed: 9001,
                u0: 0.0,
                points: 2000,
            },
            out_dir: None,
        }
    }

    /// 3 trajectories x 10000 points, 100 collections of 6000.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::Paper;
        c.data.points = 10000;
        c.data.collections = 100;
        c.data.collection_len = 6000;
        c.test.points = 10000;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if self.seeds.d1 == self.seeds.d2 {
            return Err(Error::contract("D1 and D2 seeds must differ"));
        }
        if !(self.p22_scale > 0.0) || !self.p22_scale.is_finite() {
            return Err(Error::contract("p22_scale must be positive"));
        }
        let d = &self.data;
        if d.u0_values.is_empty() || d.points < 2 || d.collections == 0 {
            return Err(Error::contract("dataset recipe is empty"));
        }
        if d.collection_len > d.points {
            return Err(Error::contract("collection_len exceeds trajectory points"));
        }
        if self.test.points < 2 {
            return Err(Error::contract("test protocol needs at least two points"));
        }
        self.system.validate()?;
        self.architecture.activation.validate()?;
        self.baseline_training.validate()?;
        self.bias_training.validate()?;
        self.solver.validate()?;
        for t in [&self.baseline_training, &self.bias_training] {
            if t.dt != d.dt {
                return Err(Error::contract("training dt must equal the data dt"));
            }
            if t.window_span() > d.collection_len {
                return Err(Error::contract("rollout window exceeds collection length"));
            }
        }
        Ok(())
    }

    /// Re-derives every named seed except the held-out test seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seeds = Seeds {
            d1: sub_seed(seed, 0),
            d2: sub_seed(seed, 1),
            init: sub_seed(seed, 2),
        };
        self.baseline_training.seed = sub_seed(seed, 3);
        self.bias_training.seed = sub_seed(seed, 4);
        self.solver.seed = sub_seed(seed, 5);
    }

    /// SHA-256 of the canonical JSON with `out_dir` cleared.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        digest_bytes(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn p22(&self) -> DenseMatrix {
        DenseMatrix::scaled_identity(AUGMENTED_DIM, -self.p22_scale)
    }

    fn data_seed(&self, which: Which) -> u64 {
        match which {
            Which::D1 => self.seeds.d1,
            Which::D2 => self.seeds.d2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    D1,
    D2,
}

/// Noisy trajectories of dataset `which`.
pub fn simulate(cfg: &PipelineConfig, which: Which) -> Result<Vec<Trajectory>> {
    let seed = cfg.data_seed(which);
    let d = &cfg.data;
    let x0 = draw_initial_states(d.u0_values.len(), sub_seed(seed, 0));
    generate_trajectories(&cfg.system, &x0, &d.u0_values, d.span(), d.dt, d.noise_variance, sub_seed(seed, 1))
}

pub fn build_dataset(cfg: &PipelineConfig, which: Which) -> Result<Dataset> {
    let trajs = simulate(cfg, which)?;
    sample_collections(&trajs, cfg.data.collections, cfg.data.collection_len, sub_seed(cfg.data_seed(which), 2))
}

/// Noise-free held-out trajectory and its initial state.
pub fn ground_truth(cfg: &PipelineConfig) -> Result<Trajectory> {
    let x0 = draw_initial_states(1, cfg.test.seed)[0];
    let z0 = AugmentedState::new(x0, cfg.test.u0).z();
    let span = (0.0, (cfg.test.points - 1) as f64 * cfg.data.dt);
    integrate_rk4(augmented_field(cfg.system), &z0, span, cfg.data.dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

/// Everything the run produced. Wall-clock timings are kept out of
/// `report.json` (they go to `timings.json`) so that the report itself is
/// reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub baseline: Option<ArtifactRef>,
    pub baseline_d1_loss: Option<f64>,
    pub relaxed_indices: Option<RelaxedIndices>,
    pub best_min_eig: Option<f64>,
    pub perturbed: Option<ArtifactRef>,
    pub certificate: Option<ArtifactRef>,
    pub perturbation_norm: Option<f64>,
    pub solver_iterations: Option<usize>,
    pub solver_trace: Option<ArtifactRef>,
    pub final_model: Option<ArtifactRef>,
    pub final_certificate: Option<ArtifactRef>,
    pub d2_loss_perturbed: Option<f64>,
    pub d2_loss_final: Option<f64>,
    /// Stage-2 and post-stage-4 `M_L` agree bit for bit.
    pub ml_bitwise_equal: Option<bool>,
    pub final_min_eig: Option<f64>,
    pub metrics: Option<MetricsTable>,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    fn new(config_digest: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_digest,
            status: RunStatus::Failed,
            failed_stage: None,
            error: None,
            baseline: None,
            baseline_d1_loss: None,
            relaxed_indices: None,
            best_min_eig: None,
            perturbed: None,
            certificate: None,
            perturbation_norm: None,
            solver_iterations: None,
            solver_trace: None,
            final_model: None,
            final_certificate: None,
            d2_loss_perturbed: None,
            d2_loss_final: None,
            ml_bitwise_equal: None,
            final_min_eig: None,
            metrics: None,
            timings: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: r.schema_version,
            });
        }
        Ok(r)
    }

    fn persist(&self, out: &Path) -> Result<()> {
        std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        std::fs::write(out.join(TIMINGS_FILE), serde_json::to_string_pretty(&self.timings)?)?;
        Ok(())
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const PERTURBED_FILE: &str = "perturbed.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const FINAL_FILE: &str = "final.json";
pub const FINAL_CERTIFICATE_FILE: &str = "final_certificate.json";
pub const TRACE_FILE: &str = "solver_trace.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

/// Fails with [`Error::Digest`] unless the two digests agree.
pub fn check_digest(expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::Digest {
            expected: expected.to_string(),
            found: other.unwrap_or("<none>").to_string(),
        }),
    }
}

fn file_ref(name: &str, digest: String) -> ArtifactRef {
    ArtifactRef {
        path: name.to_string(),
        digest,
    }
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(digest_bytes(&std::fs::read(path)?))
}

/// Runs the four stages and writes all artifacts under `out`. On a stage
/// failure the partial artifacts and a failed report are still written and
/// the error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let digest = cfg.digest();
    let mut report = RunReport::new(digest.clone());
    let result = stages(cfg, out, &digest, &mut report);
    match result {
        Ok(()) => {
            report.status = RunStatus::Complete;
            report.persist(out)?;
            Ok(report)
        }
        Err((stage, e)) => {
            warn!(stage, error = %e, "pipeline stage failed");
            report.failed_stage = Some(stage.to_string());
            report.error = Some(e.to_string());
            if let Error::SolverFailure { best_min_eig, .. } = e {
                report.best_min_eig = Some(best_min_eig);
            }
            report.persist(out)?;
            Err(Error::Stage {
                stage,
                source: Box::new(e),
            })
        }
    }
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

fn at<T>(stage: &'static str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn stages(cfg: &PipelineConfig, out: &Path, digest: &str, report: &mut RunReport) -> StageResult<()> {
    let p22 = cfg.p22();
    let dig = Some(digest.to_string());

    // 1. baseline
    let t0 = Instant::now();
    let stage = "train_baseline";
    let d1 = at(stage, build_dataset(cfg, Which::D1))?;
    let init = at(stage, Mlp::random(&cfg.architecture.dims(), cfg.architecture.activation, cfg.seeds.init))?;
    let mut base_cfg = cfg.baseline_training.clone();
    base_cfg.mask = TrainableMask::All;
    let trained = at(stage, train_with_history(&init, &d1, &base_cfg))?;
    let baseline = trained.net;
    report.baseline_d1_loss = Some(trained.best_loss);
    let d = at(stage, baseline.save(&out.join(BASELINE_FILE), dig.clone()))?;
    report.baseline = Some(file_ref(BASELINE_FILE, d));
    let truth = at(stage, ground_truth(cfg))?;
    at(stage, truth.write_csv(&out.join(GROUND_TRUTH_FILE)))?;
    let named = [("baseline".to_string(), baseline.clone())];
    report.metrics = Some(at(stage, compare_models(&named, &truth.samples[0], &truth))?);
    report.timings.push(StageTiming {
        stage: stage.into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    info!(loss = trained.best_loss, "baseline trained");

    // 2. relaxed indices and weight perturbation
    let t0 = Instant::now();
    let stage = "perturb";
    let ri = at(stage, relaxed_indices(&baseline, &p22, &cfg.solver.search))?;
    info!(eps = ri.eps, delta = ri.delta, "baseline relaxed indices");
    report.relaxed_indices = Some(ri);
    let (res, trace) = perturb_traced(&baseline, &cfg.qsr, &p22, &cfg.solver);
    at(stage, write_trace_csv(&trace, &out.join(TRACE_FILE)))?;
    report.solver_trace = Some(file_ref(TRACE_FILE, at(stage, file_digest(&out.join(TRACE_FILE)))?));
    report.timings.push(StageTiming {
        stage: stage.into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let pr = at(stage, res)?;
    let d = at(stage, pr.net.save(&out.join(PERTURBED_FILE), dig.clone()))?;
    let cd = at(stage, pr.certificate.save(&out.join(CERTIFICATE_FILE), &d, dig.clone()))?;
    report.perturbed = Some(file_ref(PERTURBED_FILE, d));
    report.certificate = Some(file_ref(CERTIFICATE_FILE, cd));
    report.perturbation_norm = Some(pr.perturbation_norm);
    report.solver_iterations = Some(pr.iterations);
    report.best_min_eig = Some(pr.certificate.min_eig_ml);
    let ml_stage2 = at(stage, ml_of(&pr.net, &pr.certificate))?;

    // 3 + 4. freeze weights, retrain biases on D2
    let t0 = Instant::now();
    let stage = "retrain_biases";
    let d2 = at(stage, build_dataset(cfg, Which::D2))?;
    let mut bias_cfg = cfg.bias_training.clone();
    bias_cfg.mask = TrainableMask::BiasesOnly;
    let retrained = at(stage, train_with_history(&pr.net, &d2, &bias_cfg))?;
    let final_net = retrained.net;
    report.d2_loss_perturbed = Some(retrained.initial_loss);
    report.d2_loss_final = Some(at(stage, dataset_loss(&final_net, &d2, &bias_cfg))?);
    for (a, b) in pr.net.weights().zip(final_net.weights()) {
        if a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err((stage, Error::contract("bias retraining changed a weight")));
        }
    }
    let ml_final = at(stage, ml_of(&final_net, &pr.certificate))?;
    report.ml_bitwise_equal = Some(
        ml_stage2
            .as_slice()
            .iter()
            .zip(ml_final.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()),
    );
    let final_min_eig = at(stage, reverify(&final_net, &pr.certificate))?;
    report.final_min_eig = Some(final_min_eig);
    let final_cert = Certificate {
        min_eig_ml: final_min_eig,
        feasible: final_min_eig >= -pr.certificate.psd_tol,
        ..pr.certificate.clone()
    };
    let d = at(stage, final_net.save(&out.join(FINAL_FILE), dig.clone()))?;
    let cd = at(stage, final_cert.save(&out.join(FINAL_CERTIFICATE_FILE), &d, dig.clone()))?;
    report.final_model = Some(file_ref(FINAL_FILE, d));
    report.final_certificate = Some(file_ref(FINAL_CERTIFICATE_FILE, cd));
    report.timings.push(StageTiming {
        stage: stage.into(),
        seconds: t0.elapsed().as_secs_f64(),
    });

    // metrics
    let stage = "metrics";
    let models = vec![
        ("baseline".to_string(), baseline),
        ("perturbed".to_string(), pr.net),
        ("final".to_string(), final_net),
    ];
    report.metrics = Some(at(stage, compare_models(&models, &truth.samples[0], &truth))?);
    Ok(())
}

fn ml_of(net: &Mlp, cert: &Certificate) -> Result<DenseMatrix> {
    build_ml(net, &PBlocks::dissipativity(&cert.qsr, &cert.p22)?, &cert.multipliers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        PipelineConfig::desk().validate().unwrap();
        PipelineConfig::paper().validate().unwrap();
        let p = PipelineConfig::paper();
        assert_eq!(p.data.points, 10000);
        assert_eq!(p.data.collection_len, 6000);
    }

    #[test]
    fn same_data_seeds_rejected() {
        let mut c = PipelineConfig::desk();
        c.seeds.d2 = c.seeds.d1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_ignores_out_dir() {
        let mut c = PipelineConfig::desk();
        let a = c.digest();
        c.out_dir = Some("elsewhere".into());
        assert_eq!(a, c.digest());
        c.seeds.init += 1;
        assert_ne!(a, c.digest());
    }

    #[test]
    fn config_json_round_trip() {
        let c = PipelineConfig::desk();
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn datasets_differ_between_seeds() {
        let c = PipelineConfig::desk();
        let a = build_dataset(&c, Which::D1).unwrap();
        let b = build_dataset(&c, Which::D2).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.window_len(), 500);
        assert_ne!(a.collections[0].samples[0], b.collections[0].samples[0]);
    }
}
