//! Randomly switched linear systems: subsystem banks, the i.i.d. mode
//! skeleton, and exact sampled simulation.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha8Rng, ChaCha20Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::ProbingSignal;
use crate::matnum::{self, Matrix, Vector, C64};

#[derive(Debug, Error)]
pub enum RslsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid probability vector: {0}")]
    Probability(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("bank document: {0}")]
    Document(String),
    #[error(transparent)]
    Matnum(#[from] matnum::MatnumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RslsError>;

/// Zero-based mode index. Displayed one-based, as modes are numbered in
/// the literature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mode(pub usize);

impl Mode {
    pub fn index(self) -> usize {
        self.0
    }
    pub fn number(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 + 1)
    }
}

/// One mode's linear model
/// `ẋ = A x + B1 u + B2 uⁿ + D1 ζ + D2 ζⁿ`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSubsystem {
    pub label: String,
    pub a: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
    pub d1: Matrix,
    pub d2: Matrix,
    pub c: Matrix,
}

impl LtiSubsystem {
    pub fn new(label: impl Into<String>, a: Matrix, b1: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        let sub = LtiSubsystem {
            label: label.into(),
            a,
            b1,
            b2: Matrix::zeros(n, 0),
            d1: Matrix::zeros(n, 0),
            d2: Matrix::zeros(n, 0),
            c,
        };
        sub.check()?;
        Ok(sub)
    }

    pub fn with_disturbance_channels(mut self, b2: Matrix, d1: Matrix, d2: Matrix) -> Result<Self> {
        self.b2 = b2;
        self.d1 = d1;
        self.d2 = d2;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(RslsError::Dimension(format!(
                "{}: A is {}x{}",
                self.label,
                n,
                self.a.ncols()
            )));
        }
        for (name, m) in [("B1", &self.b1), ("B2", &self.b2), ("D1", &self.d1), ("D2", &self.d2)] {
            if m.nrows() != n {
                return Err(RslsError::Dimension(format!(
                    "{}: {name} has {} rows, expected {n}",
                    self.label,
                    m.nrows()
                )));
            }
        }
        if self.c.ncols() != n {
            return Err(RslsError::Dimension(format!(
                "{}: C has {} columns, expected {n}",
                self.label,
                self.c.ncols()
            )));
        }
        if self.a.iter().chain(self.b1.iter()).chain(self.c.iter()).any(|v| !v.is_finite()) {
            return Err(RslsError::Dimension(format!("{}: non-finite entry", self.label)));
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b1.ncols()
    }

    /// `G(s) = C (sI − A)⁻¹ B1`; `None` on (or numerically at) the spectrum of A.
    pub fn transfer(&self, s: C64) -> Option<nalgebra::DMatrix<C64>> {
        let n = self.order();
        let a = self.a.map(|v| C64::new(v, 0.0));
        let si = nalgebra::DMatrix::<C64>::identity(n, n) * s;
        let spectrum = matnum::eigenvalues(&self.a).ok()?;
        if spectrum.contains(s, 1e-9) {
            return None;
        }
        let b = self.b1.map(|v| C64::new(v, 0.0));
        let c = self.c.map(|v| C64::new(v, 0.0));
        let sol = (si - a).lu().solve(&b)?;
        Some(c * sol)
    }

    /// `G(s)·d` for an input direction `d`.
    pub fn transfer_along(&self, s: C64, dir: &Vector) -> Option<DVector<C64>> {
        let g = self.transfer(s)?;
        let d = dir.map(|v| C64::new(v, 0.0));
        Some(g * d)
    }
}

/// The ordered mode family with its switching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RslsBank {
    pub label: String,
    pub subsystems: Vec<LtiSubsystem>,
    pub p: Vec<f64>,
}

pub fn check_probabilities(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(RslsError::Probability("empty".into()));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(RslsError::Probability(format!("entry {bad} outside (0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(RslsError::Probability(format!("sums to {sum}")));
    }
    Ok(())
}

impl RslsBank {
    pub fn new(label: impl Into<String>, subsystems: Vec<LtiSubsystem>, p: Vec<f64>) -> Result<Self> {
        if subsystems.len() != p.len() {
            return Err(RslsError::Probability(format!(
                "{} subsystems but {} probabilities",
                subsystems.len(),
                p.len()
            )));
        }
        check_probabilities(&p)?;
        let first = &subsystems[0];
        for s in &subsystems[1..] {
            if s.order() != first.order()
                || s.outputs() != first.outputs()
                || s.inputs() != first.inputs()
            {
                return Err(RslsError::Dimension(format!(
                    "subsystem {} shape ({}, {}, {}) differs from ({}, {}, {})",
                    s.label,
                    s.order(),
                    s.inputs(),
                    s.outputs(),
                    first.order(),
                    first.inputs(),
                    first.outputs()
                )));
            }
        }
        Ok(RslsBank {
            label: label.into(),
            subsystems,
            p,
        })
    }

    pub fn modes(&self) -> usize {
        self.subsystems.len()
    }

    pub fn order(&self) -> usize {
        self.subsystems[0].order()
    }

    pub fn outputs(&self) -> usize {
        self.subsystems[0].outputs()
    }

    pub fn inputs(&self) -> usize {
        self.subsystems[0].inputs()
    }

    pub fn get(&self, m: Mode) -> &LtiSubsystem {
        &self.subsystems[m.0]
    }

    /// Same bank with every `C(i)` replaced.
    pub fn with_sensor(&self, c: &Matrix) -> Result<Self> {
        let subsystems = self
            .subsystems
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.c = c.clone();
                s.check().map(|_| s)
            })
            .collect::<Result<Vec<_>>>()?;
        RslsBank::new(self.label.clone(), subsystems, self.p.clone())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: BankDoc = serde_json::from_str(text)?;
        doc.into_bank()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BankDoc::from_bank(self))?)
    }
}

/// Row-major matrix as nested lists.
pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Builds a matrix from rows; `cols` is used only when `rows` is empty.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(RslsError::Document("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsystemDoc {
    #[serde(default)]
    pub label: String,
    pub a: Vec<Vec<f64>>,
    pub b1: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankDoc {
    #[serde(default)]
    pub label: String,
    pub probabilities: Vec<f64>,
    pub subsystems: Vec<SubsystemDoc>,
}

impl BankDoc {
    pub fn into_bank(self) -> Result<RslsBank> {
        let mut subs = Vec::with_capacity(self.subsystems.len());
        for (k, s) in self.subsystems.into_iter().enumerate() {
            let a = matrix_from_rows(&s.a, 0)?;
            let n = a.nrows();
            let label = if s.label.is_empty() {
                format!("mode {}", k + 1)
            } else {
                s.label
            };
            let opt = |m: Option<Vec<Vec<f64>>>| -> Result<Matrix> {
                match m {
                    Some(rows) if !rows.is_empty() => matrix_from_rows(&rows, 0),
                    _ => Ok(Matrix::zeros(n, 0)),
                }
            };
            let sub = LtiSubsystem::new(label, a, matrix_from_rows(&s.b1, 0)?, matrix_from_rows(&s.c, n)?)?
                .with_disturbance_channels(opt(s.b2)?, opt(s.d1)?, opt(s.d2)?)?;
            subs.push(sub);
        }
        if subs.is_empty() {
            return Err(RslsError::Document("bank has no subsystems".into()));
        }
        RslsBank::new(self.label, subs, self.probabilities)
    }

    pub fn from_bank(bank: &RslsBank) -> Self {
        let opt = |m: &Matrix| (m.ncols() > 0).then(|| matrix_to_rows(m));
        BankDoc {
            label: bank.label.clone(),
            probabilities: bank.p.clone(),
            subsystems: bank
                .subsystems
                .iter()
                .map(|s| SubsystemDoc {
                    label: s.label.clone(),
                    a: matrix_to_rows(&s.a),
                    b1: matrix_to_rows(&s.b1),
                    c: matrix_to_rows(&s.c),
                    b2: opt(&s.b2),
                    d1: opt(&s.d1),
                    d2: opt(&s.d2),
                })
                .collect(),
        }
    }
}

/// Segment length, detection window and sampling interval, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub tau: f64,
    pub tau0: f64,
    pub ts: f64,
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * k.max(1.0) && k >= 0.0).then_some(k as usize)
}

impl ScheduleParams {
    pub fn new(tau: f64, tau0: f64, ts: f64) -> Result<Self> {
        let s = ScheduleParams { tau, tau0, ts };
        s.validate()?;
        Ok(s)
    }

    /// Default sampling: fifty intervals per detection window.
    pub fn with_default_sampling(tau: f64, tau0: f64) -> Result<Self> {
        Self::new(tau, tau0, tau0 / 50.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ts > 0.0 && self.tau0 > 0.0 && self.tau0 < self.tau) {
            return Err(RslsError::Schedule(format!(
                "need 0 < tau0 < tau and ts > 0 (tau={}, tau0={}, ts={})",
                self.tau, self.tau0, self.ts
            )));
        }
        let n0 = integer_ratio(self.tau0, self.ts)
            .ok_or_else(|| RslsError::Schedule("tau0/ts is not an integer".into()))?;
        if n0 < 2 {
            return Err(RslsError::Schedule(format!("N0 = {n0} < 2")));
        }
        integer_ratio(self.tau, self.ts)
            .ok_or_else(|| RslsError::Schedule("tau/ts is not an integer".into()))?;
        Ok(())
    }

    /// Samples in the detection window minus one (`τ₀/t_s`).
    pub fn n0(&self) -> usize {
        integer_ratio(self.tau0, self.ts).expect("validated schedule")
    }

    /// Sampling intervals per segment (`τ/t_s`).
    pub fn per_segment(&self) -> usize {
        integer_ratio(self.tau, self.ts).expect("validated schedule")
    }
}

/// i.i.d. mode skeleton α₀..α_{K−1}.
pub fn sample_switching(p: &[f64], k: usize, seed: u64) -> Result<Vec<Mode>> {
    check_probabilities(p)?;
    let dist = WeightedIndex::new(p).map_err(|e| RslsError::Probability(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| Mode(dist.sample(&mut rng))).collect())
}

/// Bounded uniform measurement noise `σ·d`, `d ~ U[−0.5, 0.5]`, drawn from a
/// counter-based stream so each value depends only on (seed, channel, index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }

    pub fn is_active(&self) -> bool {
        self.sigma != 0.0
    }

    pub fn sample(&self, channel: usize, index: u64) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(channel as u64);
        rng.set_word_pos(2 * index as u128);
        self.sigma * (rng.random::<f64>() - 0.5)
    }

    pub fn vector(&self, channels: usize, index: u64) -> Vector {
        Vector::from_fn(channels, |c, _| self.sample(c, index))
    }
}

/// Constant load disturbances on the `D1` and `D2` channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Disturbance {
    pub zeta: Option<Vector>,
    pub zeta_n: Option<Vector>,
}

impl Disturbance {
    fn drift(&self, sub: &LtiSubsystem) -> Result<Option<Vector>> {
        let n = sub.order();
        let mut g = Vector::zeros(n);
        let mut any = false;
        if let Some(z) = &self.zeta {
            if z.len() != sub.d1.ncols() {
                return Err(RslsError::Dimension(format!(
                    "zeta has {} entries, D1 has {} columns",
                    z.len(),
                    sub.d1.ncols()
                )));
            }
            g += &sub.d1 * z;
            any = true;
        }
        if let Some(z) = &self.zeta_n {
            if z.len() != sub.d2.ncols() {
                return Err(RslsError::Dimension(format!(
                    "zeta_n has {} entries, D2 has {} columns",
                    z.len(),
                    sub.d2.ncols()
                )));
            }
            g += &sub.d2 * z;
            any = true;
        }
        Ok(any.then_some(g))
    }
}

/// One sampled instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub t: f64,
    pub alpha_true: Mode,
    pub alpha_hat: Option<Mode>,
    /// Measured output (noise included).
    pub y: Vec<f64>,
    /// Noise-free output `C(α)x`.
    pub y_clean: Vec<f64>,
    pub x_true: Vec<f64>,
    pub x_hat: Option<Vec<f64>>,
    pub err_norm: Option<f64>,
}

/// One segment `[kτ, (k+1)τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub k: usize,
    pub alpha: Mode,
    pub alpha_hat: Option<Mode>,
    pub eps: Vec<f64>,
    /// `‖e(kτ)‖`.
    pub mu: Option<f64>,
    pub separation: Option<f64>,
    pub low_confidence: bool,
    /// Upper bound on `μ_{k+1}/μ_k` when the detected mode is right.
    pub gamma_bound: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointEstimationTrace {
    pub samples: Vec<SampleRecord>,
    pub segments: Vec<SegmentRecord>,
    /// `‖e(Kτ)‖` after the last segment.
    pub mu_final: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl JointEstimationTrace {
    /// Per-sample CSV: `t,alpha_true,alpha_hat,y...,x_true...,x_hat...,err_norm`.
    pub fn write_samples_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (p, n) = self
            .samples
            .first()
            .map(|s| (s.y.len(), s.x_true.len()))
            .unwrap_or((0, 0));
        let mut header = vec!["t".to_string(), "alpha_true".into(), "alpha_hat".into()];
        header.extend((1..=p).map(|i| format!("y{i}")));
        header.extend((1..=n).map(|i| format!("x_true{i}")));
        header.extend((1..=n).map(|i| format!("x_hat{i}")));
        header.push("err_norm".into());
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row = vec![
                s.t.to_string(),
                s.alpha_true.to_string(),
                s.alpha_hat.map(|m| m.to_string()).unwrap_or_default(),
            ];
            row.extend(s.y.iter().map(|v| v.to_string()));
            row.extend(s.x_true.iter().map(|v| v.to_string()));
            match &s.x_hat {
                Some(xh) => row.extend(xh.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), n)),
            }
            row.push(fmt_opt(s.err_norm));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Segment CSV: `k,alpha,alpha_hat,eps_1..eps_m,mu_k`.
    pub fn write_segments_csv<W: Write>(&self, mut w: W, modes: usize) -> std::io::Result<()> {
        let mut header = vec!["k".to_string(), "alpha".into(), "alpha_hat".into()];
        header.extend((1..=modes).map(|i| format!("eps_{i}")));
        header.push("mu_k".into());
        writeln!(w, "{}", header.join(","))?;
        for s in &self.segments {
            let mut row = vec![
                s.k.to_string(),
                s.alpha.to_string(),
                s.alpha_hat.map(|m| m.to_string()).unwrap_or_default(),
            ];
            for i in 0..modes {
                row.push(s.eps.get(i).map(|v| v.to_string()).unwrap_or_default());
            }
            row.push(fmt_opt(s.mu));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn detection_accuracy(&self) -> Option<f64> {
        let judged: Vec<_> = self
            .segments
            .iter()
            .filter_map(|s| s.alpha_hat.map(|h| h == s.alpha))
            .collect();
        if judged.is_empty() {
            return None;
        }
        Some(judged.iter().filter(|&&ok| ok).count() as f64 / judged.len() as f64)
    }

    /// `μ₀, μ₁, …, μ_K` (segment starts plus the final value).
    pub fn mu_sequence(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.segments.iter().filter_map(|s| s.mu).collect();
        v.extend(self.mu_final);
        v
    }
}

/// One-step propagators of a subsystem over `t_s`: during the probing window
/// (state augmented with the exosystem and, when present, a constant 1 that
/// carries disturbances) and after it.
#[derive(Debug, Clone)]
pub(crate) struct StepPropagators {
    pub window: Matrix,
    pub free: Matrix,
    pub q: usize,
    pub has_drift: bool,
}

pub(crate) fn step_propagators(
    sub: &LtiSubsystem,
    u: &ProbingSignal,
    ts: f64,
    drift: Option<&Vector>,
) -> Result<StepPropagators> {
    let n = sub.order();
    let exo = u.exosystem();
    let q = exo.s.nrows();
    let dir = u.direction_for(sub.inputs()).ok_or_else(|| {
        RslsError::Dimension(format!(
            "probing direction does not match {} inputs of {}",
            sub.inputs(),
            sub.label
        ))
    })?;
    let has_drift = drift.is_some();
    let extra = usize::from(has_drift);

    let dim = n + q + extra;
    let mut m = Matrix::zeros(dim, dim);
    m.view_mut((0, 0), (n, n)).copy_from(&sub.a);
    let bh = &sub.b1 * &dir * &exo.h;
    m.view_mut((0, n), (n, q)).copy_from(&bh);
    m.view_mut((n, n), (q, q)).copy_from(&exo.s);
    if let Some(g) = drift {
        m.view_mut((0, n + q), (n, 1)).copy_from(g);
    }
    let window = matnum::expm(&m, ts)?;

    let dim = n + extra;
    let mut f = Matrix::zeros(dim, dim);
    f.view_mut((0, 0), (n, n)).copy_from(&sub.a);
    if let Some(g) = drift {
        f.view_mut((0, n), (n, 1)).copy_from(g);
    }
    let free = matnum::expm(&f, ts)?;
    Ok(StepPropagators {
        window,
        free,
        q,
        has_drift,
    })
}

/// Exact sampled simulation of the switched system. Probing is applied on
/// `[kτ, kτ+τ₀]` of every segment, restarting from the exosystem's initial
/// state; the input is zero for the rest of the segment. Returns the truth
/// columns only.
pub fn simulate(
    bank: &RslsBank,
    modes: &[Mode],
    x0: &Vector,
    u: &ProbingSignal,
    sched: &ScheduleParams,
    noise: &NoiseSpec,
    disturbance: Option<&Disturbance>,
) -> Result<JointEstimationTrace> {
    sched.validate()?;
    let n = bank.order();
    if x0.len() != n {
        return Err(RslsError::Dimension(format!(
            "x0 has {} entries, state dimension is {n}",
            x0.len()
        )));
    }
    if let Some(m) = modes.iter().find(|m| m.0 >= bank.modes()) {
        return Err(RslsError::Dimension(format!("mode {m} outside bank of {}", bank.modes())));
    }
    let n0 = sched.n0();
    let per = sched.per_segment();
    let p = bank.outputs();
    let mut cache: HashMap<usize, StepPropagators> = HashMap::new();
    let mut trace = JointEstimationTrace::default();
    let mut x = x0.clone();
    let w0 = u.exosystem().w0.clone();

    let record = |trace: &mut JointEstimationTrace, t: f64, mode: Mode, x: &Vector, idx: u64| {
        let c = &bank.get(mode).c;
        let y_clean = c * x;
        let y = &y_clean + noise.vector(p, idx);
        trace.samples.push(SampleRecord {
            t,
            alpha_true: mode,
            alpha_hat: None,
            y: y.iter().copied().collect(),
            y_clean: y_clean.iter().copied().collect(),
            x_true: x.iter().copied().collect(),
            x_hat: None,
            err_norm: None,
        });
    };

    for (k, &mode) in modes.iter().enumerate() {
        let sub = bank.get(mode);
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(mode.0) {
            let drift = match disturbance {
                Some(d) => d.drift(sub)?,
                None => None,
            };
            e.insert(step_propagators(sub, u, sched.ts, drift.as_ref())?);
        }
        let prop = &cache[&mode.0];
        let t0 = k as f64 * sched.tau;
        let base = (k * per) as u64;

        let mut z = Vector::zeros(prop.window.nrows());
        z.rows_mut(0, n).copy_from(&x);
        z.rows_mut(n, prop.q).copy_from(&w0);
        if prop.has_drift {
            z[n + prop.q] = 1.0;
        }
        for l in 0..n0 {
            x = z.rows(0, n).into_owned();
            record(&mut trace, t0 + l as f64 * sched.ts, mode, &x, base + l as u64);
            z = &prop.window * z;
        }
        let mut zf = Vector::zeros(prop.free.nrows());
        zf.rows_mut(0, n).copy_from(&z.rows(0, n));
        if prop.has_drift {
            zf[n] = 1.0;
        }
        for l in n0..per {
            x = zf.rows(0, n).into_owned();
            record(&mut trace, t0 + l as f64 * sched.ts, mode, &x, base + l as u64);
            zf = &prop.free * zf;
        }
        x = zf.rows(0, n).into_owned();
        trace.segments.push(SegmentRecord {
            k,
            alpha: mode,
            alpha_hat: None,
            eps: vec![],
            mu: None,
            separation: None,
            low_confidence: false,
            gamma_bound: None,
        });
    }
    if let Some(&last) = modes.last() {
        let k = modes.len();
        record(&mut trace, k as f64 * sched.tau, last, &x, (k * per) as u64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_ratio_tolerates_rounding() {
        assert_eq!(integer_ratio(0.3, 0.1), Some(3));
        assert_eq!(integer_ratio(2.5, 0.05), Some(50));
        assert_eq!(integer_ratio(0.35, 0.1), None);
        assert_eq!(integer_ratio(-1.0, 0.5), None);
    }

    #[test]
    fn modes_display_one_based() {
        assert_eq!(Mode(0).to_string(), "1");
        assert_eq!(Mode(3).number(), 4);
    }

    #[test]
    fn schedule_rejects_misaligned_window() {
        assert!(ScheduleParams::new(1.0, 0.25, 0.1).is_err());
        assert!(ScheduleParams::new(1.0, 1.5, 0.1).is_err());
        assert!(ScheduleParams::new(1.0, 0.2, 0.1).is_ok());
    }

    #[test]
    fn missing_values_print_empty() {
        assert_eq!(fmt_opt(None), "");
        assert_eq!(fmt_opt(Some(0.5)), "0.5");
    }
}
