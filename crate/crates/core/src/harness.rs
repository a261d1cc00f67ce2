//! Config-driven experiments: build or load a bank, check the probing
//! input, design observers, run the joint loop and write plot-ready output.
//!
//! Output layout for a run is `<out>/<run-id>/{trace.csv, segments.csv,
//! meta.json}`. `trace.csv` has one row per sample
//! (`t,alpha_true,alpha_hat,y1..,x_true1..,x_hat1..,err_norm`); modes are
//! 1-based. `segments.csv` has one row per segment
//! (`k,alpha,alpha_hat,eps_1..eps_m,mu_k`, `mu_k = ‖e(kτ)‖`).

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{self, DetectError, Metric, ProbingSignal, ProbingVerdict};
use crate::gridmodel::{self, GridError};
use crate::matnum::{Matrix, Vector, C64};
use crate::observe::{self, JointEstimator, JointRun, ObserveError, ObserverBank, ObserverGain};
use crate::rsls::{self, JointEstimationTrace, Mode, NoiseSpec, RslsBank, RslsError, ScheduleParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("probing input rejected: {0}")]
    Probing(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Rsls(#[from] RslsError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Observe(#[from] ObserveError),
}

impl HarnessError {
    /// 2 for unreadable or malformed input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Toml { .. } => 2,
            HarnessError::Grid(GridError::Io(_)) | HarnessError::Rsls(RslsError::Io(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the subsystems come from: a bank document, or a grid case whose
/// scenarios are linearized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<PathBuf>,
    /// Sensor matrix replacing every mode's `C` (bank) or the default `C`
    /// (case).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub tau: f64,
    pub tau0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
}

impl ScheduleConfig {
    pub fn params(&self) -> Result<ScheduleParams> {
        Ok(match self.ts {
            Some(ts) => ScheduleParams::new(self.tau, self.tau0, ts)?,
            None => ScheduleParams::with_default_sampling(self.tau, self.tau0)?,
        })
    }
}

fn default_gamma_star() -> f64 {
    observe::DEFAULT_GAMMA_STAR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    /// Real parts of the requested poles, shared by every mode.
    pub poles: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poles_imag: Option<Vec<f64>>,
    #[serde(default = "default_gamma_star")]
    pub gamma_star: f64,
    #[serde(default)]
    pub strict: bool,
}

impl ObserverConfig {
    pub fn pole_request(&self) -> Result<Vec<C64>> {
        match &self.poles_imag {
            None => Ok(self.poles.iter().map(|&r| C64::new(r, 0.0)).collect()),
            Some(im) if im.len() == self.poles.len() => {
                Ok(self.poles.iter().zip(im).map(|(&r, &i)| C64::new(r, i)).collect())
            }
            Some(im) => Err(HarnessError::Config(format!(
                "observer.poles_imag has {} entries, poles has {}",
                im.len(),
                self.poles.len()
            ))),
        }
    }
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub segments: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sigma: f64,
    pub x0: Vec<f64>,
    /// Initial estimation error; defaults to `x0` (estimate starts at 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e0: Option<Vec<f64>>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub runs: usize,
    /// Draw `x0` uniformly from the ball of this radius (and `e0 = x0`);
    /// otherwise every run uses the `run` initial condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub probing: ProbingSignal,
    pub schedule: ScheduleConfig,
    pub observer: ObserverConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<MonteCarloConfig>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> std::result::Result<Self, toml::de::Error> {
        let mut c: ExperimentConfig = toml::from_str(text)?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|source| HarnessError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads (or linearizes) the bank and applies the sensor override.
    pub fn load_bank(&self) -> Result<RslsBank> {
        let sensor = match &self.model.sensor {
            Some(rows) => Some(rsls::matrix_from_rows(rows, 0)?),
            None => None,
        };
        match (&self.model.bank, &self.model.case) {
            (Some(b), None) => {
                let path = self.resolve(b);
                if !path.exists() {
                    return Err(HarnessError::Io {
                        path,
                        source: std::io::ErrorKind::NotFound.into(),
                    });
                }
                let bank = RslsBank::load(&path)?;
                Ok(match sensor {
                    Some(c) => bank.with_sensor(&c)?,
                    None => bank,
                })
            }
            (None, Some(c)) => {
                let path = self.resolve(c);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let case = gridmodel::parse_case(&text)?;
                let n = 2 * case.dynamic_buses().len();
                let c_default = sensor.unwrap_or_else(|| {
                    let mut c = Matrix::zeros(1, n);
                    c[(0, 0)] = 1.0;
                    c
                });
                Ok(gridmodel::build_bank(&case, &case.scenarios, &c_default)?)
            }
            _ => Err(HarnessError::Config(
                "model needs exactly one of `bank` or `case`".into(),
            )),
        }
    }

    fn vector(&self, v: &[f64], what: &str, n: usize) -> Result<Vector> {
        if v.len() != n {
            return Err(HarnessError::Config(format!(
                "{what} has {} entries, state dimension is {n}",
                v.len()
            )));
        }
        Ok(Vector::from_row_slice(v))
    }
}

/// Everything needed to run a configured experiment repeatedly.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub bank: RslsBank,
    pub schedule: ScheduleParams,
    pub verdict: ProbingVerdict,
    pub observers: ObserverBank,
}

/// Result of a single run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub modes: Vec<Mode>,
    pub trace: JointEstimationTrace,
}

impl RunOutcome {
    /// Median of `μ` over the last three segment boundaries (including the
    /// final state).
    pub fn steady_state_error(&self) -> f64 {
        steady_state(&self.trace)
    }
}

fn steady_state(trace: &JointEstimationTrace) -> f64 {
    let mut mus = trace.mu_sequence();
    mus.extend(trace.mu_final);
    let tail = mus.len().saturating_sub(3);
    median(&mut mus[tail..].to_vec())
}

fn median(v: &mut [f64]) -> f64 {
    quantile(v, 0.5)
}

/// Linear-interpolation quantile; NaN on empty input.
fn quantile(v: &mut [f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || v[lo] == v[hi] {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunMeta<'a> {
    name: &'a str,
    run_id: &'a str,
    seed: u64,
    segments: usize,
    modes: Vec<usize>,
    detected: Vec<Option<usize>>,
    detection_accuracy: Option<f64>,
    mu: Vec<f64>,
    mu_final: Option<f64>,
    steady_state_error: f64,
    schedule: ScheduleParams,
    sigma: f64,
    metric: Metric,
    probing_ok: bool,
    usable_pole: Option<[f64; 2]>,
    observers: &'a [ObserverGain],
}

/// Aggregate over seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub runs: usize,
    /// Fraction of segments in mode `i` detected as `i`; `None` when the
    /// mode never occurred.
    pub per_mode_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub mu_final_median: f64,
    pub mu_final_p90: f64,
    pub steady_state_median: f64,
    pub separation_median: f64,
    pub separation_p10: f64,
    pub separation_min: f64,
    pub low_confidence_fraction: f64,
}

struct RunStats {
    hits: Vec<(usize, usize)>,
    mu_final: f64,
    steady: f64,
    separations: Vec<f64>,
    low_conf: usize,
}

fn stats(trace: &JointEstimationTrace, modes: usize) -> RunStats {
    let mut hits = vec![(0, 0); modes];
    let mut separations = Vec::with_capacity(trace.segments.len());
    let mut low_conf = 0;
    for s in &trace.segments {
        hits[s.alpha.0].1 += 1;
        if s.alpha_hat == Some(s.alpha) {
            hits[s.alpha.0].0 += 1;
        }
        separations.extend(s.separation);
        if s.low_confidence {
            low_conf += 1;
        }
    }
    RunStats {
        hits,
        mu_final: trace.mu_final.unwrap_or(f64::NAN),
        steady: steady_state(trace),
        separations,
        low_conf,
    }
}

fn summarize(all: &[RunStats], modes: usize) -> MonteCarloSummary {
    let mut hits = vec![(0usize, 0usize); modes];
    let mut seps = Vec::new();
    let mut low = 0;
    for r in all {
        for (h, rh) in hits.iter_mut().zip(&r.hits) {
            h.0 += rh.0;
            h.1 += rh.1;
        }
        seps.extend_from_slice(&r.separations);
        low += r.low_conf;
    }
    let (ok, total) = hits.iter().fold((0, 0), |a, h| (a.0 + h.0, a.1 + h.1));
    let mut finals: Vec<f64> = all.iter().map(|r| r.mu_final).collect();
    let mut steady: Vec<f64> = all.iter().map(|r| r.steady).collect();
    let n_seps = seps.len();
    MonteCarloSummary {
        runs: all.len(),
        per_mode_accuracy: hits
            .iter()
            .map(|&(h, t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        overall_accuracy: if total == 0 { f64::NAN } else { ok as f64 / total as f64 },
        mu_final_median: median(&mut finals),
        mu_final_p90: quantile(&mut finals, 0.9),
        steady_state_median: median(&mut steady),
        separation_median: median(&mut seps),
        separation_p10: quantile(&mut seps, 0.1),
        separation_min: seps.iter().copied().fold(f64::INFINITY, f64::min),
        low_confidence_fraction: if n_seps == 0 { 0.0 } else { low as f64 / n_seps as f64 },
    }
}

// Uniform in the ball, by rejection from the enclosing cube.
fn ball_sample(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-radius..=radius));
        if v.norm() <= radius {
            return v;
        }
    }
}

impl Experiment {
    /// Loads the model, checks the probing input (a rejected input is an
    /// error) and designs the observers.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let bank = config.load_bank()?;
        let schedule = config.schedule.params()?;
        let verdict = detect::validate_probing(&bank, &config.probing);
        if !verdict.is_ok() {
            let msg: Vec<String> = verdict.violations.iter().map(|v| v.to_string()).collect();
            return Err(HarnessError::Probing(msg.join("; ")));
        }
        let poles = config.observer.pole_request()?;
        let observers = observe::design_bank_observers(
            &bank,
            &[poles],
            &schedule,
            config.observer.gamma_star,
            config.observer.strict,
        )?;
        for g in observers.gains.iter().filter(|g| !g.within_bound) {
            log::info!(
                "mode {}: contraction factor {:.4} above {}",
                Mode(g.mode),
                g.gamma,
                config.observer.gamma_star
            );
        }
        Ok(Experiment {
            config,
            bank,
            schedule,
            verdict,
            observers,
        })
    }

    pub fn estimator(&self) -> Result<JointEstimator<'_>> {
        Ok(JointEstimator::new(
            &self.bank,
            &self.observers,
            &self.config.probing,
            &self.schedule,
            self.config.run.metric,
        )?)
    }

    fn initial(&self) -> Result<(Vector, Vector)> {
        let n = self.bank.order();
        let x0 = self.config.vector(&self.config.run.x0, "run.x0", n)?;
        let e0 = match &self.config.run.e0 {
            Some(e) => self.config.vector(e, "run.e0", n)?,
            None => x0.clone(),
        };
        Ok((x0, e0))
    }

    fn joint_run(&self, seed: u64, x0: Vector, e0: Vector) -> Result<JointRun> {
        Ok(JointRun {
            modes: rsls::sample_switching(&self.bank.p, self.config.run.segments, seed)?,
            x0,
            e0,
            noise: NoiseSpec {
                sigma: self.config.run.sigma,
                seed,
            },
        })
    }

    /// One run with the configured initial condition; `seed` overrides the
    /// configured one.
    pub fn run(&self, seed: Option<u64>) -> Result<RunOutcome> {
        let seed = seed.unwrap_or(self.config.run.seed);
        let (x0, e0) = self.initial()?;
        let run = self.joint_run(seed, x0, e0)?;
        let trace = self.estimator()?.run(&run, true)?;
        Ok(RunOutcome {
            run_id: format!("{}-seed{seed}", self.config.name),
            seed,
            modes: run.modes,
            trace,
        })
    }

    /// Runs `runs` independent seeds `base, base+1, …` in parallel.
    pub fn montecarlo(&self, runs: usize, base_seed: Option<u64>) -> Result<MonteCarloSummary> {
        if runs == 0 {
            return Err(HarnessError::Config("montecarlo needs at least one run".into()));
        }
        let base = base_seed.unwrap_or(self.config.run.seed);
        let radius = self.config.montecarlo.as_ref().and_then(|m| m.x0_radius);
        let est = self.estimator()?;
        let (x0, e0) = self.initial()?;
        let n = self.bank.order();
        let all = (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let seed = base.wrapping_add(r);
                let (x, e) = match radius {
                    Some(rad) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba11);
                        let x = ball_sample(&mut rng, n, rad);
                        (x.clone(), x)
                    }
                    None => (x0.clone(), e0.clone()),
                };
                let run = self.joint_run(seed, x, e)?;
                let trace = est.run(&run, false)?;
                Ok(stats(&trace, self.bank.modes()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(summarize(&all, self.bank.modes()))
    }

    /// Writes `trace.csv`, `segments.csv` and `meta.json` under
    /// `out/<run-id>/` and returns that directory.
    pub fn write_run(&self, outcome: &RunOutcome, out: &Path) -> Result<PathBuf> {
        let dir = out.join(&outcome.run_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("trace.csv");
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        outcome
            .trace
            .write_samples_csv(BufWriter::new(f))
            .map_err(io_err(&path))?;
        let path = dir.join("segments.csv");
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        outcome
            .trace
            .write_segments_csv(BufWriter::new(f), self.bank.modes())
            .map_err(io_err(&path))?;
        let meta = RunMeta {
            name: &self.config.name,
            run_id: &outcome.run_id,
            seed: outcome.seed,
            segments: outcome.modes.len(),
            modes: outcome.modes.iter().map(|m| m.number()).collect(),
            detected: outcome
                .trace
                .segments
                .iter()
                .map(|s| s.alpha_hat.map(Mode::number))
                .collect(),
            detection_accuracy: outcome.trace.detection_accuracy(),
            mu: outcome.trace.mu_sequence(),
            mu_final: outcome.trace.mu_final,
            steady_state_error: outcome.steady_state_error(),
            schedule: self.schedule,
            sigma: self.config.run.sigma,
            metric: self.config.run.metric,
            probing_ok: self.verdict.is_ok(),
            usable_pole: self.verdict.usable_pole.map(|z| [z.re, z.im]),
            observers: &self.observers.gains,
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(dir)
    }

    /// Output root: explicit argument, then `run.out`, then `fallback`.
    pub fn output_root(&self, explicit: Option<&Path>, fallback: &Path) -> PathBuf {
        match (explicit, &self.config.run.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.config.resolve(p),
            (None, None) => fallback.to_path_buf(),
        }
    }
}

/// Loads the bank and probing input of a config and checks the input
/// without designing observers.
pub fn validate_config_input(config: &ExperimentConfig) -> Result<ProbingVerdict> {
    let bank = config.load_bank()?;
    Ok(detect::validate_probing(&bank, &config.probing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&mut [3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert!((quantile(&mut [0.0, 10.0], 0.9) - 9.0).abs() < 1e-12);
        assert_eq!(quantile(&mut [7.0], 0.9), 7.0);
        assert!(quantile(&mut [], 0.5).is_nan());
    }

    #[test]
    fn exit_codes_split_usage_from_domain() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Probing("x".into()).exit_code(), 1);
        let io = HarnessError::Grid(GridError::Io(std::io::ErrorKind::NotFound.into()));
        assert_eq!(io.exit_code(), 2);
        assert_eq!(HarnessError::Grid(GridError::SingularJacobian).exit_code(), 1);
    }

    #[test]
    fn imaginary_parts_pair_with_real_parts() {
        let o = ObserverConfig {
            poles: vec![-1.0, -1.0],
            poles_imag: Some(vec![2.0, -2.0]),
            gamma_star: 0.99,
            strict: false,
        };
        assert_eq!(o.pole_request().unwrap()[1], C64::new(-1.0, -2.0));
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            assert!(ball_sample(&mut rng, 3, 2.0).norm() <= 2.0);
        }
    }
}
