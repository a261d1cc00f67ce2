//! Probing-input validation and window-based mode detection.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matnum::{self, Matrix, Spectrum, Vector, C64};
use crate::rsls::{self, LtiSubsystem, Mode, RslsBank, RslsError, ScheduleParams};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("probing signal: {0}")]
    Probing(String),
    #[error("window has {got} samples, expected {expected}")]
    SampleCount { expected: usize, got: usize },
    #[error("window has {got} output channels, expected {expected}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Rsls(#[from] RslsError),
    #[error(transparent)]
    Matnum(#[from] matnum::MatnumError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbingForm {
    /// `sin(ωt)`
    Sinusoid { omega: f64 },
    /// Unit step.
    Step,
    /// Inverse Laplace transform of `num(s)/den(s)`, coefficients in
    /// descending powers; must be strictly proper.
    Rational { num: Vec<f64>, den: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbingDoc {
    amplitude: f64,
    form: ProbingForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction: Option<Vec<f64>>,
}

/// Scalar waveform `a·s(t)` applied along an input direction
/// (all-ones unless given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbingDoc", into = "ProbingDoc")]
pub struct ProbingSignal {
    amplitude: f64,
    form: ProbingForm,
    direction: Option<Vec<f64>>,
    exo: Exosystem,
}

impl TryFrom<ProbingDoc> for ProbingSignal {
    type Error = DetectError;
    fn try_from(d: ProbingDoc) -> Result<Self> {
        let mut s = ProbingSignal::new(d.amplitude, d.form)?;
        if let Some(dir) = d.direction {
            s = s.with_direction(dir)?;
        }
        Ok(s)
    }
}

impl From<ProbingSignal> for ProbingDoc {
    fn from(s: ProbingSignal) -> Self {
        ProbingDoc {
            amplitude: s.amplitude,
            form: s.form,
            direction: s.direction,
        }
    }
}

/// State-space generator `ẇ = S w`, `u = h w`, `w(0) = w0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Exosystem {
    pub s: Matrix,
    pub h: Matrix,
    pub w0: Vector,
}

fn trim_leading_zeros(c: &[f64]) -> Vec<f64> {
    let first = c.iter().position(|&v| v != 0.0).unwrap_or(c.len());
    c[first..].to_vec()
}

impl ProbingSignal {
    pub fn new(amplitude: f64, form: ProbingForm) -> Result<Self> {
        if !amplitude.is_finite() {
            return Err(DetectError::Probing("amplitude must be finite".into()));
        }
        match &form {
            ProbingForm::Sinusoid { omega } if !(omega.is_finite() && *omega > 0.0) => {
                return Err(DetectError::Probing(format!("omega must be positive, got {omega}")));
            }
            ProbingForm::Rational { num, den } => {
                let den = trim_leading_zeros(den);
                let num = trim_leading_zeros(num);
                if den.len() < 2 {
                    return Err(DetectError::Probing("denominator must have degree >= 1".into()));
                }
                if num.len() >= den.len() {
                    return Err(DetectError::Probing("U(s) must be strictly proper".into()));
                }
                if num.is_empty() {
                    return Err(DetectError::Probing("numerator is identically zero".into()));
                }
            }
            _ => {}
        }
        let mut s = ProbingSignal {
            amplitude,
            form,
            direction: None,
            exo: Exosystem {
                s: Matrix::zeros(0, 0),
                h: Matrix::zeros(1, 0),
                w0: Vector::zeros(0),
            },
        };
        s.exo = s.build_exosystem();
        Ok(s)
    }

    pub fn sinusoid(amplitude: f64, omega: f64) -> Result<Self> {
        Self::new(amplitude, ProbingForm::Sinusoid { omega })
    }

    pub fn step(amplitude: f64) -> Result<Self> {
        Self::new(amplitude, ProbingForm::Step)
    }

    /// The zero input.
    pub fn zero() -> Self {
        Self::new(0.0, ProbingForm::Step).expect("valid")
    }

    pub fn with_direction(mut self, dir: Vec<f64>) -> Result<Self> {
        if dir.is_empty() || dir.iter().any(|v| !v.is_finite()) {
            return Err(DetectError::Probing("direction must be a finite non-empty vector".into()));
        }
        self.direction = Some(dir);
        Ok(self)
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn form(&self) -> &ProbingForm {
        &self.form
    }

    pub fn direction(&self) -> Option<&[f64]> {
        self.direction.as_deref()
    }

    /// Same waveform with the amplitude multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.amplitude *= c;
        s.exo = s.build_exosystem();
        s
    }

    /// Input direction as an `inputs × 1` column; `None` when a configured
    /// direction has the wrong length.
    pub fn direction_for(&self, inputs: usize) -> Option<Matrix> {
        match &self.direction {
            None => Some(Matrix::from_element(inputs, 1, 1.0)),
            Some(d) if d.len() == inputs => Some(Matrix::from_column_slice(inputs, 1, d)),
            Some(_) => None,
        }
    }

    /// `U(s) = num/den` including the amplitude, descending coefficients.
    pub fn laplace(&self) -> (Vec<f64>, Vec<f64>) {
        let a = self.amplitude;
        match &self.form {
            ProbingForm::Sinusoid { omega } => (vec![a * omega], vec![1.0, 0.0, omega * omega]),
            ProbingForm::Step => (vec![a], vec![1.0, 0.0]),
            ProbingForm::Rational { num, den } => (
                trim_leading_zeros(num).iter().map(|v| a * v).collect(),
                trim_leading_zeros(den),
            ),
        }
    }

    /// Poles of `U(s)` with multiplicities.
    pub fn poles(&self) -> Spectrum {
        let (_, den) = self.laplace();
        Spectrum::from_values(&matnum::poly_roots(&den), 1e-6)
    }

    pub fn zeros(&self) -> Vec<C64> {
        let (num, _) = self.laplace();
        matnum::poly_roots(&num)
    }

    pub fn exosystem(&self) -> &Exosystem {
        &self.exo
    }

    // Controllable canonical realization of the impulse response of U(s).
    fn build_exosystem(&self) -> Exosystem {
        let (num, den) = self.laplace();
        let lead = den[0];
        let q = den.len() - 1;
        let mut s = Matrix::zeros(q, q);
        for i in 0..q.saturating_sub(1) {
            s[(i, i + 1)] = 1.0;
        }
        for j in 0..q {
            s[(q - 1, j)] = -den[q - j] / lead;
        }
        let mut h = Matrix::zeros(1, q);
        for (k, &b) in num.iter().rev().enumerate() {
            h[(0, k)] = b / lead;
        }
        let mut w0 = Vector::zeros(q);
        w0[q - 1] = 1.0;
        Exosystem { s, h, w0 }
    }

    /// Scalar waveform value at local time `t ≥ 0`.
    pub fn eval(&self, t: f64) -> f64 {
        let e = matnum::expm(&self.exo.s, t).expect("square");
        (&self.exo.h * e * &self.exo.w0)[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    CommonPoleZero { pole: C64, zero: C64 },
    VanishingInput,
    DirectionLength { expected: usize, got: usize },
    PoleInSpectrum { pole: C64, mode: Mode },
    Indistinct { pole: C64, i: Mode, j: Mode, gi: Vec<C64>, gj: Vec<C64> },
}

fn fmt_c(z: C64) -> String {
    // `+ 0.0` folds −0 into 0.
    if z.im.abs() <= 1e-12 * z.norm().max(1.0) {
        format!("{}", z.re + 0.0)
    } else {
        format!("{}{:+}i", z.re + 0.0, z.im)
    }
}

fn fmt_cv(v: &[C64]) -> String {
    if v.len() == 1 {
        fmt_c(v[0])
    } else {
        format!("[{}]", v.iter().map(|&z| fmt_c(z)).collect::<Vec<_>>().join(", "))
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CommonPoleZero { pole, zero } => write!(
                f,
                "U(s) is not coprime: pole {} cancels zero {}",
                fmt_c(*pole),
                fmt_c(*zero)
            ),
            Violation::VanishingInput => write!(f, "input is identically zero"),
            Violation::DirectionLength { expected, got } => {
                write!(f, "input direction has {got} entries, bank has {expected} inputs")
            }
            Violation::PoleInSpectrum { pole, mode } => write!(
                f,
                "input pole {} is an eigenvalue of A({mode})",
                fmt_c(*pole)
            ),
            Violation::Indistinct { pole, i, j, gi, gj } => {
                let s = fmt_c(*pole);
                write!(f, "G_{i}({s}) = {} and G_{j}({s}) = {} coincide", fmt_cv(gi), fmt_cv(gj))
            }
        }
    }
}

/// Outcome of the probing-input check; `usable_pole` is a pole of `U(s)`
/// at which all transfer functions are defined and pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingVerdict {
    pub violations: Vec<Violation>,
    pub usable_pole: Option<C64>,
}

impl ProbingVerdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that `U(s)` is coprime and has a pole off every subsystem spectrum
/// where the transfer functions `G_i(λ)·d` are pairwise distinct.
pub fn validate_probing(bank: &RslsBank, u: &ProbingSignal) -> ProbingVerdict {
    let mut violations = Vec::new();
    if u.amplitude() == 0.0 {
        violations.push(Violation::VanishingInput);
    }
    let Some(dir) = u.direction_for(bank.inputs()) else {
        violations.push(Violation::DirectionLength {
            expected: bank.inputs(),
            got: u.direction().map_or(0, |d| d.len()),
        });
        return ProbingVerdict {
            violations,
            usable_pole: None,
        };
    };
    let dir = dir.column(0).into_owned();
    let poles = u.poles();
    for &p in &poles.eigenvalues {
        for z in u.zeros() {
            if (p - z).norm() <= 1e-9 * p.norm().max(1.0) {
                violations.push(Violation::CommonPoleZero { pole: p, zero: z });
            }
        }
    }
    if bank.modes() == 1 {
        let usable = poles.eigenvalues.first().copied();
        return ProbingVerdict {
            violations,
            usable_pole: usable,
        };
    }

    let spectra: Vec<Spectrum> = bank
        .subsystems
        .iter()
        .map(|s| matnum::eigenvalues(&s.a).expect("square A"))
        .collect();
    let mut pole_failures = Vec::new();
    let mut usable = None;
    // One of each conjugate pair is enough: G(λ̄) is the conjugate of G(λ).
    let candidates: Vec<C64> = poles
        .eigenvalues
        .iter()
        .copied()
        .filter(|p| p.im >= 0.0)
        .collect();
    for &lam in &candidates {
        let mut fails = Vec::new();
        for (i, spec) in spectra.iter().enumerate() {
            if spec.contains(lam, 1e-9) {
                fails.push(Violation::PoleInSpectrum {
                    pole: lam,
                    mode: Mode(i),
                });
            }
        }
        if fails.is_empty() {
            let g: Vec<Vec<C64>> = bank
                .subsystems
                .iter()
                .map(|s| {
                    s.transfer_along(lam, &dir)
                        .expect("off the spectrum")
                        .iter()
                        .copied()
                        .collect()
                })
                .collect();
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    let diff: f64 = g[i]
                        .iter()
                        .zip(&g[j])
                        .map(|(a, b)| (a - b).norm_sqr())
                        .sum::<f64>()
                        .sqrt();
                    let gi_norm: f64 = g[i].iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                    if diff <= 1e-9 * gi_norm.max(1.0) {
                        fails.push(Violation::Indistinct {
                            pole: lam,
                            i: Mode(i),
                            j: Mode(j),
                            gi: g[i].clone(),
                            gj: g[j].clone(),
                        });
                    }
                }
            }
        }
        if fails.is_empty() {
            usable = Some(lam);
            break;
        }
        pole_failures.extend(fails);
    }
    if usable.is_none() {
        violations.extend(pole_failures);
    }
    ProbingVerdict {
        violations,
        usable_pole: usable,
    }
}

/// Window residual metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Mean over samples of the summed absolute channel errors.
    #[default]
    Mae,
    /// Root mean of squared per-sample Euclidean errors.
    L2,
    /// Largest absolute error.
    Max,
}

impl Metric {
    pub fn evaluate(self, residual: &Matrix) -> f64 {
        let rows = residual.nrows().max(1) as f64;
        match self {
            Metric::Mae => residual.iter().map(|v| v.abs()).sum::<f64>() / rows,
            Metric::L2 => (residual.iter().map(|v| v * v).sum::<f64>() / rows).sqrt(),
            Metric::Max => residual.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Metric::Mae),
            "l2" => Ok(Metric::L2),
            "max" => Ok(Metric::Max),
            other => Err(format!("unknown metric {other:?} (expected mae, l2 or max)")),
        }
    }
}

/// Zero-state responses of every subsystem to `u` on the window grid:
/// one `(N₀+1) × p` matrix per subsystem.
pub fn precompute_input_responses(
    bank: &RslsBank,
    u: &ProbingSignal,
    sched: &ScheduleParams,
) -> Result<Vec<Matrix>> {
    bank.subsystems
        .iter()
        .map(|s| input_response(s, u, sched))
        .collect()
}

fn input_response(sub: &LtiSubsystem, u: &ProbingSignal, sched: &ScheduleParams) -> Result<Matrix> {
    sched.validate()?;
    if u.direction_for(sub.inputs()).is_none() {
        return Err(DetectError::Probing(format!(
            "direction length does not match {} inputs",
            sub.inputs()
        )));
    }
    let n0 = sched.n0();
    let n = sub.order();
    let prop = rsls::step_propagators(sub, u, sched.ts, None)?;
    let mut z = Vector::zeros(n + prop.q);
    z.rows_mut(n, prop.q).copy_from(&u.exosystem().w0);
    let mut out = Matrix::zeros(n0 + 1, sub.outputs());
    for l in 0..=n0 {
        let y = &sub.c * z.rows(0, n);
        out.set_row(l, &y.transpose());
        z = &prop.window * z;
    }
    Ok(out)
}

/// Stacked `C e^{Aℓt_s}`, ℓ = 0..N₀, shape `((N₀+1)p) × n`.
fn observation_stack(sub: &LtiSubsystem, sched: &ScheduleParams) -> Result<Matrix> {
    let n0 = sched.n0();
    let (n, p) = (sub.order(), sub.outputs());
    let step = matnum::expm(&sub.a, sched.ts)?;
    let mut e = Matrix::identity(n, n);
    let mut out = Matrix::zeros((n0 + 1) * p, n);
    for l in 0..=n0 {
        out.view_mut((l * p, 0), (p, n)).copy_from(&(&sub.c * &e));
        e = &step * e;
    }
    Ok(out)
}

/// Sampled observability Gramian `Σ t_s e^{Aᵀℓt_s} Cᵀ C e^{Aℓt_s}`.
pub fn gramian(sub: &LtiSubsystem, sched: &ScheduleParams) -> Result<Matrix> {
    let phi = observation_stack(sub, sched)?;
    Ok(phi.transpose() * phi * sched.ts)
}

fn stack_rows(y: &Matrix) -> Vector {
    Vector::from_iterator(y.len(), (0..y.nrows()).flat_map(|l| y.row(l).iter().copied().collect::<Vec<_>>()))
}

/// Relative singular-value cutoff used when the sampled Gramian is
/// (numerically) singular.
pub const RCOND: f64 = 1e-10;

/// Least-squares initial state `Γ⁻¹Y` from a net output window
/// (`(N₀+1) × p`). Solved through an SVD of the stacked observation matrix;
/// directions with singular value below `RCOND·σ_max` are dropped, giving
/// the minimum-norm solution.
pub fn estimate_initial_state(sub: &LtiSubsystem, y_net: &Matrix, sched: &ScheduleParams) -> Result<Vector> {
    let n0 = sched.n0();
    check_window(y_net, n0, sub.outputs())?;
    let phi = observation_stack(sub, sched)? * sched.ts.sqrt();
    let rhs = stack_rows(y_net) * sched.ts.sqrt();
    let (x, _) = matnum::lstsq_min_norm(&phi, &Matrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), RCOND);
    Ok(x.column(0).into_owned())
}

fn check_window(y: &Matrix, n0: usize, p: usize) -> Result<()> {
    if y.nrows() != n0 + 1 {
        return Err(DetectError::SampleCount {
            expected: n0 + 1,
            got: y.nrows(),
        });
    }
    if y.ncols() != p {
        return Err(DetectError::Channels {
            expected: p,
            got: y.ncols(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub alpha_hat: Mode,
    pub eps: Vec<f64>,
    pub x_hat: Vec<Vector>,
    /// Second-smallest over smallest ε (infinite for a single mode or ε_min = 0).
    pub separation: f64,
    /// Advisory flag: separation below `LOW_CONFIDENCE_RATIO`.
    pub low_confidence: bool,
}

pub const LOW_CONFIDENCE_RATIO: f64 = 10.0;

struct Candidate {
    obs: Matrix,
    pinv: Matrix,
    input: Matrix,
}

/// Window detector with the input responses and least-squares operators of
/// every candidate computed once.
pub struct Detector {
    sched: ScheduleParams,
    metric: Metric,
    outputs: usize,
    candidates: Vec<Candidate>,
}

impl Detector {
    pub fn new(bank: &RslsBank, u: &ProbingSignal, sched: &ScheduleParams, metric: Metric) -> Result<Self> {
        sched.validate()?;
        let inputs = precompute_input_responses(bank, u, sched)?;
        let mut candidates = Vec::with_capacity(bank.modes());
        for (sub, input) in bank.subsystems.iter().zip(inputs) {
            let obs = observation_stack(sub, sched)?;
            let phi = &obs * sched.ts.sqrt();
            let pinv = if sub.order() == 0 {
                Matrix::zeros(0, phi.nrows())
            } else {
                let svd = phi.clone().svd(true, true);
                let smax = svd.singular_values.max();
                svd.pseudo_inverse(RCOND * smax)
                    .map_err(|e| DetectError::Probing(e.to_string()))?
                    * sched.ts.sqrt()
            };
            candidates.push(Candidate { obs, pinv, input });
        }
        Ok(Detector {
            sched: *sched,
            metric,
            outputs: bank.outputs(),
            candidates,
        })
    }

    pub fn schedule(&self) -> &ScheduleParams {
        &self.sched
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn input_response(&self, m: Mode) -> &Matrix {
        &self.candidates[m.0].input
    }

    /// Runs detection on one window `y(kτ + ℓt_s)`, ℓ = 0..N₀ (rows).
    pub fn detect(&self, window: &Matrix) -> Result<DetectionReport> {
        let n0 = self.sched.n0();
        check_window(window, n0, self.outputs)?;
        let mut eps = Vec::with_capacity(self.candidates.len());
        let mut x_hat = Vec::with_capacity(self.candidates.len());
        for cand in &self.candidates {
            let y_net = window - &cand.input;
            let x = &cand.pinv * stack_rows(&y_net);
            let pred = &cand.obs * &x;
            let pred = Matrix::from_row_slice(n0 + 1, self.outputs, pred.as_slice());
            let residual = pred + &cand.input - window;
            eps.push(self.metric.evaluate(&residual));
            x_hat.push(x);
        }
        let mut best = 0;
        for (i, &e) in eps.iter().enumerate() {
            if e < eps[best] {
                best = i;
            }
        }
        let second = eps
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &e)| e)
            .fold(f64::INFINITY, f64::min);
        let separation = if eps.len() < 2 {
            f64::INFINITY
        } else if eps[best] == 0.0 {
            if second == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            second / eps[best]
        };
        Ok(DetectionReport {
            alpha_hat: Mode(best),
            eps,
            x_hat,
            separation,
            low_confidence: separation < LOW_CONFIDENCE_RATIO,
        })
    }
}

/// One-shot detection; builds a `Detector` internally.
pub fn detect_mode(
    bank: &RslsBank,
    window: &Matrix,
    u: &ProbingSignal,
    sched: &ScheduleParams,
    metric: Metric,
) -> Result<DetectionReport> {
    Detector::new(bank, u, sched, metric)?.detect(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_formatting_folds_negative_zero() {
        assert_eq!(fmt_c(C64::new(-0.0, 0.0)), "0");
        assert_eq!(fmt_c(C64::new(0.5, -2.0)), "0.5-2i");
    }

    #[test]
    fn leading_zero_coefficients_are_dropped() {
        assert_eq!(trim_leading_zeros(&[0.0, 0.0, 1.0, 0.0]), vec![1.0, 0.0]);
        assert!(trim_leading_zeros(&[0.0]).is_empty());
    }

    #[test]
    fn rows_stack_sample_major() {
        let y = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(stack_rows(&y).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn window_shape_is_checked() {
        assert!(matches!(
            check_window(&Matrix::zeros(3, 1), 3, 1),
            Err(DetectError::SampleCount { expected: 4, got: 3 })
        ));
        assert!(matches!(
            check_window(&Matrix::zeros(4, 2), 3, 1),
            Err(DetectError::Channels { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("L2".parse::<Metric>(), Ok(Metric::L2));
        assert!("median".parse::<Metric>().is_err());
    }

    #[test]
    fn probing_rejects_bad_frequency_and_improper_rational() {
        assert!(ProbingSignal::new(1.0, ProbingForm::Sinusoid { omega: 0.0 }).is_err());
        assert!(ProbingSignal::new(f64::NAN, ProbingForm::Step).is_err());
        let improper = ProbingForm::Rational {
            num: vec![1.0, 0.0],
            den: vec![1.0, 1.0],
        };
        assert!(ProbingSignal::new(1.0, improper).is_err());
    }
}
