//! Observability decomposition, observer gains and the two-time-scale
//! detection/estimation loop.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::detect::{DetectError, DetectionReport, Detector, ProbingSignal};
use crate::matnum::{self, Matrix, MatnumError, Spectrum, Vector, C64};
use crate::rsls::{
    self, JointEstimationTrace, LtiSubsystem, Mode, NoiseSpec, RslsBank, RslsError, SampleRecord,
    ScheduleParams, SegmentRecord,
};

#[derive(Debug, Error)]
pub enum ObserveError {
    #[error("mode {mode}: {source}")]
    Placement { mode: Mode, source: MatnumError },
    #[error("mode {mode}: contraction factor {gamma:.6} exceeds {gamma_star}")]
    Contraction { mode: Mode, gamma: f64, gamma_star: f64 },
    #[error("mode {mode}: decomposition block residual {residual:.3e}")]
    Decomposition { mode: Mode, residual: f64 },
    #[error("pole request: {0}")]
    PoleRequest(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Matnum(#[from] MatnumError),
    #[error(transparent)]
    Rsls(#[from] RslsError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

pub type Result<T> = std::result::Result<T, ObserveError>;

/// `W = [C; CA; …; CA^{n−1}]`.
pub fn observability_matrix(sub: &LtiSubsystem) -> Matrix {
    matnum::observability_stack(&sub.a, &sub.c).expect("subsystem dimensions are checked")
}

/// All `W(i)` stacked; full column rank means the bank is jointly observable.
pub fn combined_observability(bank: &RslsBank) -> Matrix {
    let ws: Vec<Matrix> = bank.subsystems.iter().map(observability_matrix).collect();
    let rows: usize = ws.iter().map(|w| w.nrows()).sum();
    let mut out = Matrix::zeros(rows, bank.order());
    let mut r = 0;
    for w in ws {
        out.view_mut((r, 0), (w.nrows(), w.ncols())).copy_from(&w);
        r += w.nrows();
    }
    out
}

/// Split of the state into an unobservable part `v = K x` and an observable
/// part `z = F x` through the orthogonal `T = [M, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub w: Matrix,
    /// Dimension of the observable part.
    pub rank: usize,
    /// Orthonormal basis of `ker W`.
    pub m: Matrix,
    /// Orthonormal complement of `M`.
    pub n: Matrix,
    pub t: Matrix,
    pub t_inv: Matrix,
    pub k: Matrix,
    pub f: Matrix,
    pub a11: Matrix,
    pub a12: Matrix,
    /// Should vanish; kept for diagnostics.
    pub a21: Matrix,
    pub a22: Matrix,
    /// Input matrix of the observable part, `F·B1`.
    pub b2: Matrix,
    /// Should vanish; kept for diagnostics.
    pub c1: Matrix,
    pub c2: Matrix,
    pub t_cond: f64,
}

impl Decomposition {
    pub fn is_observable(&self) -> bool {
        self.m.ncols() == 0
    }

    /// Largest entry of the blocks that must be zero.
    pub fn block_residual(&self) -> f64 {
        let amax = |m: &Matrix| if m.is_empty() { 0.0 } else { m.amax() };
        amax(&self.a21).max(amax(&self.c1))
    }
}

/// Relative singular-value cutoff for the rank of `W`. The stacked powers
/// `CAᵏ` carry roundoff of a few `ε·σ_max`, which the generic default
/// tolerance does not absorb.
pub const OBSERVABILITY_RTOL: f64 = 1e-10;

pub fn decompose(sub: &LtiSubsystem) -> Result<Decomposition> {
    let n = sub.order();
    let w = observability_matrix(sub);
    let tol = OBSERVABILITY_RTOL * matnum::spectral_norm(&w);
    let rank = matnum::numerical_rank(&w, Some(tol));
    let (m, nb) = if rank == n {
        (Matrix::zeros(n, 0), Matrix::identity(n, n))
    } else {
        let m = matnum::kernel_basis_tol(&w, Some(tol));
        if m.ncols() != n - rank {
            return Err(ObserveError::Dimension(format!(
                "kernel width {} disagrees with rank {rank} of a {n}-state system",
                m.ncols()
            )));
        }
        let nb = if rank == 0 {
            Matrix::zeros(n, 0)
        } else {
            matnum::orthonormal_complement(&m)
        };
        (m, nb)
    };
    let mut t = Matrix::zeros(n, n);
    t.view_mut((0, 0), (n, m.ncols())).copy_from(&m);
    t.view_mut((0, m.ncols()), (n, nb.ncols())).copy_from(&nb);
    let t_inv = t.transpose();
    let k = m.transpose();
    let f = nb.transpose();
    let sv = matnum::singular_values(&t);
    let t_cond = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (None, None) => 1.0,
        _ => f64::INFINITY,
    };
    let d = Decomposition {
        a11: &k * &sub.a * &m,
        a12: &k * &sub.a * &nb,
        a21: &f * &sub.a * &m,
        a22: &f * &sub.a * &nb,
        b2: &f * &sub.b1,
        c1: &sub.c * &m,
        c2: &sub.c * &nb,
        w,
        rank,
        m,
        n: nb,
        t,
        t_inv,
        k,
        f,
        t_cond,
    };
    Ok(d)
}

/// Checks that the observable-part dynamics of every partially observable
/// mode are the same under every mode's `A`. Returns the largest deviation
/// per such mode and logs a warning above `1e-6`.
pub fn substate_independence(bank: &RslsBank, decomps: &[Decomposition]) -> Vec<(Mode, f64)> {
    let mut out = Vec::new();
    for (i, d) in decomps.iter().enumerate() {
        if d.is_observable() {
            continue;
        }
        let mut dev: f64 = 0.0;
        for sub in &bank.subsystems {
            if d.rank > 0 {
                let cross = &d.f * &sub.a * &d.m;
                let own = &d.f * &sub.a * &d.n - &d.a22;
                dev = dev.max(cross.amax()).max(own.amax());
            }
        }
        if dev > 1e-6 {
            log::warn!("mode {}: observable-part dynamics vary across modes by {dev:.3e}", Mode(i));
        }
        out.push((Mode(i), dev));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverGain {
    pub mode: usize,
    #[serde(serialize_with = "ser_poles")]
    pub poles: Vec<C64>,
    #[serde(serialize_with = "ser_matrix")]
    pub l: Matrix,
    /// `N·L`, acting on the full state.
    #[serde(serialize_with = "ser_matrix")]
    pub l_full: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub ac: Matrix,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gammac: f64,
    pub gamma: f64,
    pub within_bound: bool,
}

fn ser_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&rsls::matrix_to_rows(m), s)
}

fn ser_poles<S: serde::Serializer>(p: &[C64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<[f64; 2]> = p.iter().map(|z| [z.re, z.im]).collect();
    serde::Serialize::serialize(&v, s)
}

#[derive(Debug, Clone)]
pub struct ObserverBank {
    pub gains: Vec<ObserverGain>,
    pub decomps: Vec<Decomposition>,
    pub gamma_star: f64,
}

impl ObserverBank {
    pub fn all_within_bound(&self) -> bool {
        self.gains.iter().all(|g| g.within_bound)
    }
}

pub const DEFAULT_GAMMA_STAR: f64 = 0.99;

// ‖e^{X t}‖₂, with the empty matrix counting as no contraction.
fn exp_norm(x: &Matrix, t: f64) -> Result<f64> {
    if x.is_empty() {
        return Ok(1.0);
    }
    Ok(matnum::spectral_norm(&matnum::expm(x, t)?))
}

/// Places the poles of every observable part and evaluates the per-segment
/// contraction factor `γⁱ = (γ_cⁱγ₀ⁱ)^{pᵢ}(γ₁ⁱγ₀ⁱ)^{1−pᵢ}`. Pole requests are
/// truncated to the observable dimension of each mode. With `strict`, a
/// factor above `gamma_star` is an error; otherwise it is reported.
pub fn design_gains(
    bank: &RslsBank,
    decomps: &[Decomposition],
    poles: &[Vec<C64>],
    sched: &ScheduleParams,
    gamma_star: f64,
    strict: bool,
) -> Result<ObserverBank> {
    if decomps.len() != bank.modes() {
        return Err(ObserveError::Dimension(format!(
            "{} decompositions for {} modes",
            decomps.len(),
            bank.modes()
        )));
    }
    if poles.len() != 1 && poles.len() != bank.modes() {
        return Err(ObserveError::PoleRequest(format!(
            "give one pole set or one per mode ({} modes, {} sets)",
            bank.modes(),
            poles.len()
        )));
    }
    let mut gains = Vec::with_capacity(bank.modes());
    for (i, (sub, d)) in bank.subsystems.iter().zip(decomps).enumerate() {
        let mode = Mode(i);
        let request = if poles.len() == 1 { &poles[0] } else { &poles[i] };
        let ni = d.rank;
        if request.len() < ni {
            return Err(ObserveError::PoleRequest(format!(
                "mode {mode}: {} poles for an observable part of order {ni}",
                request.len()
            )));
        }
        let chosen: Vec<C64> = request[..ni].to_vec();
        if let Some(bad) = chosen.iter().find(|z| z.re >= 0.0) {
            return Err(ObserveError::PoleRequest(format!("mode {mode}: pole {bad} is not stable")));
        }
        let l = if ni == 0 {
            Matrix::zeros(0, sub.outputs())
        } else {
            let spec = Spectrum::from_values(&chosen, 0.0);
            matnum::place_observer_gain(&d.a22, &d.c2, &spec)
                .map_err(|source| ObserveError::Placement { mode, source })?
        };
        let ac = &d.a22 - &l * &d.c2;
        let gamma0 = exp_norm(&d.a22, sched.tau0)?;
        let gamma1 = exp_norm(&d.a22, sched.tau - sched.tau0)?;
        let gammac = exp_norm(&ac, sched.tau - sched.tau0)?;
        let p = bank.p[i];
        let gamma = (gammac * gamma0).powf(p) * (gamma1 * gamma0).powf(1.0 - p);
        let within_bound = gamma <= gamma_star;
        if strict && !within_bound {
            return Err(ObserveError::Contraction {
                mode,
                gamma,
                gamma_star,
            });
        }
        gains.push(ObserverGain {
            mode: i,
            poles: chosen,
            l_full: &d.n * &l,
            l,
            ac,
            gamma0,
            gamma1,
            gammac,
            gamma,
            within_bound,
        });
    }
    Ok(ObserverBank {
        gains,
        decomps: decomps.to_vec(),
        gamma_star,
    })
}

/// Decomposes every mode and designs gains in one go.
pub fn design_bank_observers(
    bank: &RslsBank,
    poles: &[Vec<C64>],
    sched: &ScheduleParams,
    gamma_star: f64,
    strict: bool,
) -> Result<ObserverBank> {
    let decomps = bank
        .subsystems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = decompose(s)?;
            let r = d.block_residual();
            if r >= 1e-8 {
                return Err(ObserveError::Decomposition { mode: Mode(i), residual: r });
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    substate_independence(bank, &decomps);
    design_gains(bank, &decomps, poles, sched, gamma_star, strict)
}

/// Truth and initial conditions for one joint run.
#[derive(Debug, Clone)]
pub struct JointRun {
    pub modes: Vec<Mode>,
    pub x0: Vector,
    /// Initial estimation error `x(0) − x̂(0)`.
    pub e0: Vector,
    pub noise: NoiseSpec,
}

/// Runs detection and estimation segment by segment.
///
/// Each segment starts with the probing window, where Algorithm-1 detection
/// runs on the sampled output and the shared estimate propagates open-loop
/// through the detected model. The rest of the segment runs the detected
/// mode's observer on the measured output. The error `e = x − x̂` is
/// propagated directly, jointly with `x` and the exosystem, with one exact
/// step matrix per (true, detected) pair.
pub struct JointEstimator<'a> {
    bank: &'a RslsBank,
    observers: &'a ObserverBank,
    detector: Detector,
    u: ProbingSignal,
    sched: ScheduleParams,
}

struct Props {
    truth: HashMap<usize, rsls::StepPropagators>,
    err_window: HashMap<(usize, usize), Matrix>,
    err_closed: HashMap<(usize, usize), Matrix>,
    bound: HashMap<usize, f64>,
}

impl<'a> JointEstimator<'a> {
    pub fn new(
        bank: &'a RslsBank,
        observers: &'a ObserverBank,
        u: &ProbingSignal,
        sched: &ScheduleParams,
        metric: crate::detect::Metric,
    ) -> Result<Self> {
        if observers.gains.len() != bank.modes() {
            return Err(ObserveError::Dimension(format!(
                "{} observers for {} modes",
                observers.gains.len(),
                bank.modes()
            )));
        }
        let detector = Detector::new(bank, u, sched, metric)?;
        Ok(JointEstimator {
            bank,
            observers,
            detector,
            u: u.clone(),
            sched: *sched,
        })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    fn truth<'p>(&self, props: &'p mut Props, a: usize) -> Result<&'p rsls::StepPropagators> {
        Ok(match props.truth.entry(a) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => v.insert(rsls::step_propagators(&self.bank.subsystems[a], &self.u, self.sched.ts, None)?),
        })
    }

    // Window step for [x; e; w] (true a, detected h). With a == h the error
    // decouples and only the e-block e^{A t_s} is stored.
    fn err_window<'p>(&self, props: &'p mut Props, a: usize, h: usize) -> Result<&'p Matrix> {
        Ok(match props.err_window.entry((a, h)) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => v.insert(self.build_err_window(a, h)?),
        })
    }

    fn build_err_window(&self, a: usize, h: usize) -> Result<Matrix> {
        let n = self.bank.order();
        let sa = &self.bank.subsystems[a];
        Ok(if a == h {
            matnum::expm(&sa.a, self.sched.ts)?
        } else {
            let sh = &self.bank.subsystems[h];
            let exo = self.u.exosystem();
            let q = exo.s.nrows();
            let dir = self.u.direction_for(sa.inputs()).expect("checked by detector");
            let mut g = Matrix::zeros(2 * n + q, 2 * n + q);
            g.view_mut((0, 0), (n, n)).copy_from(&sa.a);
            g.view_mut((0, 2 * n), (n, q)).copy_from(&(&sa.b1 * &dir * &exo.h));
            g.view_mut((n, 0), (n, n)).copy_from(&(&sa.a - &sh.a));
            g.view_mut((n, n), (n, n)).copy_from(&sh.a);
            g.view_mut((n, 2 * n), (n, q)).copy_from(&((&sa.b1 - &sh.b1) * &dir * &exo.h));
            g.view_mut((2 * n, 2 * n), (q, q)).copy_from(&exo.s);
            matnum::expm(&g, self.sched.ts)?
        })
    }

    // Closed-loop step with held noise n. For a == h the state is [e; n],
    // otherwise [x; e; n].
    fn err_closed<'p>(&self, props: &'p mut Props, a: usize, h: usize) -> Result<&'p Matrix> {
        Ok(match props.err_closed.entry((a, h)) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => v.insert(self.build_err_closed(a, h)?),
        })
    }

    fn build_err_closed(&self, a: usize, h: usize) -> Result<Matrix> {
        let n = self.bank.order();
        let p = self.bank.outputs();
        let sa = &self.bank.subsystems[a];
        let sh = &self.bank.subsystems[h];
        let l = &self.observers.gains[h].l_full;
        let ac = &sh.a - l * &sh.c;
        Ok(if a == h {
            let mut g = Matrix::zeros(n + p, n + p);
            g.view_mut((0, 0), (n, n)).copy_from(&ac);
            g.view_mut((0, n), (n, p)).copy_from(&(-l));
            matnum::expm(&g, self.sched.ts)?
        } else {
            let mut g = Matrix::zeros(2 * n + p, 2 * n + p);
            g.view_mut((0, 0), (n, n)).copy_from(&sa.a);
            let coupling = &sa.a - &sh.a - l * (&sa.c - &sh.c);
            g.view_mut((n, 0), (n, n)).copy_from(&coupling);
            g.view_mut((n, n), (n, n)).copy_from(&ac);
            g.view_mut((n, 2 * n), (n, p)).copy_from(&(-l));
            matnum::expm(&g, self.sched.ts)?
        })
    }

    /// `‖e^{(A−LC)(τ−τ₀)}‖·‖e^{Aτ₀}‖` for mode `a` detected correctly.
    fn bound(&self, props: &mut Props, a: usize) -> Result<f64> {
        if let Some(&b) = props.bound.get(&a) {
            return Ok(b);
        }
        let s = &self.bank.subsystems[a];
        let ac = &s.a - &self.observers.gains[a].l_full * &s.c;
        let b = exp_norm(&ac, self.sched.tau - self.sched.tau0)? * exp_norm(&s.a, self.sched.tau0)?;
        props.bound.insert(a, b);
        Ok(b)
    }

    /// Runs the loop. With `record_samples = false` only segment records are
    /// kept.
    pub fn run(&self, run: &JointRun, record_samples: bool) -> Result<JointEstimationTrace> {
        let n = self.bank.order();
        let p = self.bank.outputs();
        if run.x0.len() != n || run.e0.len() != n {
            return Err(ObserveError::Dimension(format!(
                "x0/e0 must have {n} entries ({}, {})",
                run.x0.len(),
                run.e0.len()
            )));
        }
        if let Some(m) = run.modes.iter().find(|m| m.0 >= self.bank.modes()) {
            return Err(ObserveError::Dimension(format!("mode {m} outside the bank")));
        }
        let n0 = self.sched.n0();
        let per = self.sched.per_segment();
        let ts = self.sched.ts;
        let w0 = self.u.exosystem().w0.clone();
        let q = w0.len();
        let mut props = Props {
            truth: HashMap::new(),
            err_window: HashMap::new(),
            err_closed: HashMap::new(),
            bound: HashMap::new(),
        };
        let mut trace = JointEstimationTrace::default();
        let mut x = run.x0.clone();
        let mut e = run.e0.clone();
        let mut last_hat = None;

        for (k, &alpha) in run.modes.iter().enumerate() {
            let a = alpha.0;
            let t0 = k as f64 * self.sched.tau;
            let base = (k * per) as u64;
            let mu = e.norm();

            // Truth over the window, and the measured window for detection.
            let mut xs: Vec<Vector> = Vec::with_capacity(per + 1);
            let mut window = Matrix::zeros(n0 + 1, p);
            let c_a = self.bank.subsystems[a].c.clone();
            {
                let prop = self.truth(&mut props, a)?;
                let mut z = Vector::zeros(n + q);
                z.rows_mut(0, n).copy_from(&x);
                z.rows_mut(n, q).copy_from(&w0);
                for l in 0..=n0 {
                    let xl = z.rows(0, n).into_owned();
                    let y = &c_a * &xl + run.noise.vector(p, base + l as u64);
                    window.set_row(l, &y.transpose());
                    xs.push(xl);
                    if l < n0 {
                        z = &prop.window * z;
                    }
                }
            }
            let report: DetectionReport = self.detector.detect(&window)?;
            let h = report.alpha_hat.0;

            // Estimation error across the window.
            let mut es: Vec<Vector> = Vec::with_capacity(per + 1);
            if a == h {
                let step = self.err_window(&mut props, a, h)?.clone();
                let mut el = e.clone();
                for l in 0..=n0 {
                    es.push(el.clone());
                    if l < n0 {
                        el = &step * el;
                    }
                }
            } else {
                let step = self.err_window(&mut props, a, h)?.clone();
                let mut z = Vector::zeros(2 * n + q);
                z.rows_mut(0, n).copy_from(&x);
                z.rows_mut(n, n).copy_from(&e);
                z.rows_mut(2 * n, q).copy_from(&w0);
                for l in 0..=n0 {
                    es.push(z.rows(n, n).into_owned());
                    if l < n0 {
                        z = &step * z;
                    }
                }
            }

            // Closed loop on the rest of the segment; noise held per sample.
            let free = self.truth(&mut props, a)?.free.clone();
            let closed = self.err_closed(&mut props, a, h)?.clone();
            let mut xl = xs[n0].clone();
            let mut el = es[n0].clone();
            for l in n0..per {
                let noise = run.noise.vector(p, base + l as u64);
                if a == h {
                    let mut z = Vector::zeros(n + p);
                    z.rows_mut(0, n).copy_from(&el);
                    z.rows_mut(n, p).copy_from(&noise);
                    let z = &closed * z;
                    el = z.rows(0, n).into_owned();
                    xl = &free * xl;
                } else {
                    let mut z = Vector::zeros(2 * n + p);
                    z.rows_mut(0, n).copy_from(&xl);
                    z.rows_mut(n, n).copy_from(&el);
                    z.rows_mut(2 * n, p).copy_from(&noise);
                    let z = &closed * z;
                    // Truth keeps its own exact propagator.
                    el = z.rows(n, n).into_owned();
                    xl = &free * xl;
                }
                xs.push(xl.clone());
                es.push(el.clone());
            }

            if record_samples {
                for l in 0..per {
                    let xl = &xs[l];
                    let el = &es[l];
                    let y_clean = &c_a * xl;
                    let y = if l <= n0 {
                        window.row(l).transpose()
                    } else {
                        &y_clean + run.noise.vector(p, base + l as u64)
                    };
                    trace.samples.push(SampleRecord {
                        t: t0 + l as f64 * ts,
                        alpha_true: alpha,
                        alpha_hat: Some(report.alpha_hat),
                        y: y.iter().copied().collect(),
                        y_clean: y_clean.iter().copied().collect(),
                        x_true: xl.iter().copied().collect(),
                        x_hat: Some((xl - el).iter().copied().collect()),
                        err_norm: Some(el.norm()),
                    });
                }
            }
            let gamma_bound = if a == h { Some(self.bound(&mut props, a)?) } else { None };
            trace.segments.push(SegmentRecord {
                k,
                alpha,
                alpha_hat: Some(report.alpha_hat),
                eps: report.eps.clone(),
                mu: Some(mu),
                separation: Some(report.separation),
                low_confidence: report.low_confidence,
                gamma_bound,
            });
            x = xs[per].clone();
            e = es[per].clone();
            last_hat = Some(report.alpha_hat);
        }
        trace.mu_final = Some(e.norm());
        if record_samples {
            if let Some(&last) = run.modes.last() {
                let kk = run.modes.len();
                let c = &self.bank.subsystems[last.0].c;
                let y_clean = c * &x;
                let y = &y_clean + run.noise.vector(p, (kk * per) as u64);
                trace.samples.push(SampleRecord {
                    t: kk as f64 * self.sched.tau,
                    alpha_true: last,
                    alpha_hat: last_hat,
                    y: y.iter().copied().collect(),
                    y_clean: y_clean.iter().copied().collect(),
                    x_true: x.iter().copied().collect(),
                    x_hat: Some((&x - &e).iter().copied().collect()),
                    err_norm: Some(e.norm()),
                });
            }
        }
        Ok(trace)
    }
}

/// One-shot joint estimation run.
pub fn run_joint_estimation(
    bank: &RslsBank,
    observers: &ObserverBank,
    u: &ProbingSignal,
    sched: &ScheduleParams,
    run: &JointRun,
    metric: crate::detect::Metric,
) -> Result<JointEstimationTrace> {
    JointEstimator::new(bank, observers, u, sched, metric)?.run(run, true)
}
