//! Grid cases, AC power flow, swing-equation equilibria and linearization.
//!
//! Powers are per-unit on the case base. A bus is *dynamic* when a swing
//! generator is attached; its state is `(δ, ω)`. Non-dynamic buses are purely
//! algebraic and are eliminated through the power flow.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matnum::{Matrix, Vector, C64};
use crate::rsls::{self, LtiSubsystem, RslsBank, RslsError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("case schema: {0}")]
    Schema(String),
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("branch {index} references unknown bus {bus}")]
    DanglingBranch { index: usize, bus: u32 },
    #[error("network is not connected (bus {0} unreachable)")]
    Disconnected(u32),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("singular power-flow Jacobian")]
    SingularJacobian,
    #[error("no equilibrium: {0}")]
    NoEquilibrium(String),
    #[error("unknown contingency target: {0}")]
    UnknownTarget(String),
    #[error("{0}")]
    Method(String),
    #[error(transparent)]
    Rsls(#[from] RslsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub dynamic: bool,
    pub v_mag: f64,
    /// Radians.
    pub v_ang: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub p_gen: f64,
    pub q_gen: f64,
    /// Shunt conductance and susceptance at 1 pu voltage.
    pub gs: f64,
    pub bs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    pub b: f64,
}

impl Branch {
    pub fn impedance_magnitude(&self) -> f64 {
        self.r.hypot(self.x)
    }

    pub fn impedance_angle(&self) -> f64 {
        self.x.atan2(self.r)
    }

    fn connects(&self, a: u32, b: u32) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynGenerator {
    pub bus: u32,
    pub m: f64,
    pub b: f64,
    pub p_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    /// Multiply `r` and `x` of the branch by `factor`.
    ScaleImpedance { from: u32, to: u32, factor: f64 },
    /// Replace the branch reactance.
    SetReactance { from: u32, to: u32, x: f64 },
    /// Set `|Z|`, keeping the impedance angle.
    SetImpedanceMagnitude { from: u32, to: u32, z: f64 },
    /// Replace the sensor matrix for this scenario.
    SensorOverride { c: Vec<Vec<f64>> },
}

impl Mutation {
    fn is_sensor(&self) -> bool {
        matches!(self, Mutation::SensorOverride { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyScenario {
    pub label: String,
    pub probability: f64,
    #[serde(default)]
    pub mutations: Vec<Mutation>,
}

impl ContingencyScenario {
    pub fn sensor_only(&self) -> bool {
        self.mutations.iter().all(Mutation::is_sensor)
    }

    pub fn sensor_override(&self) -> Option<&Vec<Vec<f64>>> {
        self.mutations.iter().rev().find_map(|m| match m {
            Mutation::SensorOverride { c } => Some(c),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub base_kv: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<DynGenerator>,
    pub scenarios: Vec<ContingencyScenario>,
}

// Case document as written on disk (engineering units).

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseDoc {
    mva: f64,
    #[serde(default)]
    kv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: u32,
    kind: BusKind,
    #[serde(default)]
    dynamic: bool,
    #[serde(default = "one")]
    v_mag: f64,
    #[serde(default)]
    v_ang_deg: Option<f64>,
    #[serde(default)]
    v_ang_rad: Option<f64>,
    #[serde(default)]
    p_load_mw: f64,
    #[serde(default)]
    q_load_mvar: f64,
    #[serde(default)]
    p_gen_mw: f64,
    #[serde(default)]
    q_gen_mvar: f64,
    #[serde(default)]
    gs_mw: f64,
    #[serde(default)]
    bs_mvar: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    from: u32,
    to: u32,
    r_pu: f64,
    x_pu: f64,
    #[serde(default)]
    b_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDoc {
    bus: u32,
    m: f64,
    b: f64,
    p_in_mw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDoc {
    base: BaseDoc,
    bus: Vec<BusDoc>,
    branch: Vec<BranchDoc>,
    #[serde(default)]
    gen: Vec<GenDoc>,
    #[serde(default)]
    scenario: Vec<ContingencyScenario>,
}

/// Parses a JSON case document and validates it.
pub fn parse_case(source: &str) -> Result<GridCase> {
    let doc: CaseDoc = serde_json::from_str(source).map_err(|e| GridError::Schema(e.to_string()))?;
    let base = doc.base.mva;
    if !(base > 0.0) {
        return Err(GridError::Schema(format!("base.mva must be positive, got {base}")));
    }
    let mut buses = Vec::with_capacity(doc.bus.len());
    for (k, b) in doc.bus.into_iter().enumerate() {
        let v_ang = match (b.v_ang_deg, b.v_ang_rad) {
            (Some(_), Some(_)) => {
                return Err(GridError::Schema(format!(
                    "bus row {k} (id {}): give v_ang_deg or v_ang_rad, not both",
                    b.id
                )))
            }
            (Some(d), None) => d.to_radians(),
            (None, Some(r)) => r,
            (None, None) => 0.0,
        };
        buses.push(Bus {
            id: b.id,
            kind: b.kind,
            dynamic: b.dynamic,
            v_mag: b.v_mag,
            v_ang,
            p_load: b.p_load_mw / base,
            q_load: b.q_load_mvar / base,
            p_gen: b.p_gen_mw / base,
            q_gen: b.q_gen_mvar / base,
            gs: b.gs_mw / base,
            bs: b.bs_mvar / base,
        });
    }
    let case = GridCase {
        base_mva: base,
        base_kv: doc.base.kv,
        buses,
        branches: doc
            .branch
            .into_iter()
            .map(|b| Branch {
                from: b.from,
                to: b.to,
                r: b.r_pu,
                x: b.x_pu,
                b: b.b_pu,
            })
            .collect(),
        generators: doc
            .gen
            .into_iter()
            .map(|g| DynGenerator {
                bus: g.bus,
                m: g.m,
                b: g.b,
                p_in: g.p_in_mw / base,
            })
            .collect(),
        scenarios: doc.scenario,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_case(path: &Path) -> Result<GridCase> {
    parse_case(&std::fs::read_to_string(path)?)
}

impl GridCase {
    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(GridError::Schema("bus table is empty".into()));
        }
        let mut ids = HashSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return Err(GridError::DuplicateBus(b.id));
            }
            if !(b.v_mag > 0.0) {
                return Err(GridError::Invalid(format!("bus {}: v_mag must be positive", b.id)));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !ids.contains(&end) {
                    return Err(GridError::DanglingBranch { index: k, bus: end });
                }
            }
            if br.from == br.to {
                return Err(GridError::Invalid(format!("branch {k} is a self-loop")));
            }
            if br.x == 0.0 || !br.x.is_finite() || !br.r.is_finite() {
                return Err(GridError::Invalid(format!(
                    "branch {}-{}: reactance must be finite and non-zero",
                    br.from, br.to
                )));
            }
        }
        let slacks = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        let dynamic = self.buses.iter().filter(|b| b.dynamic).count();
        if slacks > 1 || (slacks == 0 && dynamic == 0) {
            return Err(GridError::Invalid(format!(
                "need exactly one slack bus, or none with at least one dynamic bus ({slacks} slack, {dynamic} dynamic)"
            )));
        }
        let mut gen_count: HashMap<u32, usize> = HashMap::new();
        for g in &self.generators {
            if !ids.contains(&g.bus) {
                return Err(GridError::Invalid(format!("generator at unknown bus {}", g.bus)));
            }
            if !(g.m > 0.0) || !(g.b > 0.0) {
                return Err(GridError::Invalid(format!(
                    "generator at bus {}: need M > 0 and b > 0",
                    g.bus
                )));
            }
            *gen_count.entry(g.bus).or_default() += 1;
        }
        for b in &self.buses {
            let n = gen_count.get(&b.id).copied().unwrap_or(0);
            if b.dynamic != (n == 1) || n > 1 {
                return Err(GridError::Invalid(format!(
                    "bus {}: a dynamic bus needs exactly one generator and a non-dynamic bus none ({n} found)",
                    b.id
                )));
            }
        }
        // Connectivity.
        let index: HashMap<u32, usize> = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            let (a, b) = (index[&br.from], index[&br.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected(self.buses[k].id));
        }
        for s in &self.scenarios {
            if !(s.probability > 0.0 && s.probability <= 1.0) {
                return Err(GridError::Invalid(format!(
                    "scenario {:?}: probability {} outside (0, 1]",
                    s.label, s.probability
                )));
            }
        }
        Ok(())
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch(&self, from: u32, to: u32) -> Option<&Branch> {
        self.branches.iter().find(|b| b.connects(from, to))
    }

    /// Indices (into `buses`) of dynamic buses, in bus order.
    pub fn dynamic_buses(&self) -> Vec<usize> {
        (0..self.buses.len()).filter(|&i| self.buses[i].dynamic).collect()
    }

    pub fn generator(&self, bus_id: u32) -> Option<&DynGenerator> {
        self.generators.iter().find(|g| g.bus == bus_id)
    }

    /// Angle reference: the slack bus, or the first dynamic bus.
    pub fn reference_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .or_else(|| self.buses.iter().position(|b| b.dynamic))
            .expect("validated case has a slack or dynamic bus")
    }

    pub fn admittance(&self) -> DMatrix<C64> {
        let n = self.buses.len();
        let idx: HashMap<u32, usize> = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut y = DMatrix::<C64>::zeros(n, n);
        for br in &self.branches {
            let (f, t) = (idx[&br.from], idx[&br.to]);
            let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
            let ych = C64::new(0.0, br.b / 2.0);
            y[(f, f)] += ys + ych;
            y[(t, t)] += ys + ych;
            y[(f, t)] -= ys;
            y[(t, f)] -= ys;
        }
        for (i, b) in self.buses.iter().enumerate() {
            y[(i, i)] += C64::new(b.gs, b.bs);
        }
        y
    }

    /// Scheduled net injections. Dynamic buses inject `P_in − P_L`.
    fn scheduled_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self
            .buses
            .iter()
            .map(|b| {
                let gen = if b.dynamic {
                    self.generator(b.id).map_or(b.p_gen, |g| g.p_in)
                } else {
                    b.p_gen
                };
                gen - b.p_load
            })
            .collect();
        let q = self.buses.iter().map(|b| b.q_gen - b.q_load).collect();
        (p, q)
    }
}

/// Bus roles for one Newton–Raphson solve: which angles and magnitudes are
/// held, and the specified injections for the remaining equations.
#[derive(Debug, Clone)]
struct FlowProblem {
    angle_fixed: Vec<bool>,
    vmag_fixed: Vec<bool>,
    p_spec: Vec<f64>,
    q_spec: Vec<f64>,
}

impl FlowProblem {
    fn standard(case: &GridCase) -> Self {
        let reference = case.reference_bus();
        let (p_spec, q_spec) = case.scheduled_injections();
        FlowProblem {
            angle_fixed: (0..case.buses.len()).map(|i| i == reference).collect(),
            vmag_fixed: case.buses.iter().map(|b| b.kind != BusKind::Pq).collect(),
            p_spec,
            q_spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchFlow {
    pub from: u32,
    pub to: u32,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    /// Radians.
    pub v_ang: Vec<f64>,
    /// Net injections per bus.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    /// Injection at the reference bus.
    pub p_slack: f64,
    pub q_slack: f64,
    pub branch_flows: Vec<BranchFlow>,
    pub iterations: usize,
    pub mismatch: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

fn injections(y: &DMatrix<C64>, vm: &[f64], va: &[f64]) -> (Vec<C64>, Vec<C64>) {
    let v: Vec<C64> = vm.iter().zip(va).map(|(&m, &a)| C64::from_polar(m, a)).collect();
    let n = v.len();
    let mut cur = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        for k in 0..n {
            cur[i] += y[(i, k)] * v[k];
        }
    }
    let s = (0..n).map(|i| v[i] * cur[i].conj()).collect();
    (s, cur)
}

fn mismatch_vector(
    prob: &FlowProblem,
    s: &[C64],
    p_rows: &[usize],
    q_rows: &[usize],
) -> Vector {
    let mut f = Vector::zeros(p_rows.len() + q_rows.len());
    for (r, &i) in p_rows.iter().enumerate() {
        f[r] = prob.p_spec[i] - s[i].re;
    }
    for (r, &i) in q_rows.iter().enumerate() {
        f[p_rows.len() + r] = prob.q_spec[i] - s[i].im;
    }
    f
}

/// Newton–Raphson in polar form with the analytic Jacobian.
fn newton_raphson(
    y: &DMatrix<C64>,
    prob: &FlowProblem,
    vm0: &[f64],
    va0: &[f64],
    opts: PowerFlowOptions,
) -> Result<(Vec<f64>, Vec<f64>, usize, f64)> {
    let n = vm0.len();
    let mut vm = vm0.to_vec();
    let mut va = va0.to_vec();
    let p_rows: Vec<usize> = (0..n).filter(|&i| !prob.angle_fixed[i]).collect();
    let q_rows: Vec<usize> = (0..n).filter(|&i| !prob.vmag_fixed[i]).collect();
    let dim = p_rows.len() + q_rows.len();
    let mut iterations = 0;
    loop {
        let (s, cur) = injections(y, &vm, &va);
        let f = mismatch_vector(prob, &s, &p_rows, &q_rows);
        let norm = f.amax();
        if !norm.is_finite() {
            return Err(GridError::Diverged {
                iterations,
                mismatch: norm,
            });
        }
        if dim == 0 || norm < opts.tol {
            return Ok((vm, va, iterations, if dim == 0 { 0.0 } else { norm }));
        }
        if iterations >= opts.max_iter {
            return Err(GridError::Diverged {
                iterations,
                mismatch: norm,
            });
        }
        let v: Vec<C64> = vm.iter().zip(&va).map(|(&m, &a)| C64::from_polar(m, a)).collect();
        // dS/dθ_k and dS/d|V|_k for bus i.
        let ds_dva = |i: usize, k: usize| -> C64 {
            let mut t = -y[(i, k)] * v[k];
            if i == k {
                t += cur[i];
            }
            C64::new(0.0, 1.0) * v[i] * t.conj()
        };
        let ds_dvm = |i: usize, k: usize| -> C64 {
            let vn = v[k] / vm[k];
            let mut t = v[i] * (y[(i, k)] * vn).conj();
            if i == k {
                t += cur[i].conj() * vn;
            }
            t
        };
        let mut jac = Matrix::zeros(dim, dim);
        for (r, &i) in p_rows.iter().enumerate() {
            for (c, &k) in p_rows.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, k).re;
            }
            for (c, &k) in q_rows.iter().enumerate() {
                jac[(r, p_rows.len() + c)] = ds_dvm(i, k).re;
            }
        }
        for (r, &i) in q_rows.iter().enumerate() {
            for (c, &k) in p_rows.iter().enumerate() {
                jac[(p_rows.len() + r, c)] = ds_dva(i, k).im;
            }
            for (c, &k) in q_rows.iter().enumerate() {
                jac[(p_rows.len() + r, p_rows.len() + c)] = ds_dvm(i, k).im;
            }
        }
        let dx = jac.lu().solve(&f).ok_or(GridError::SingularJacobian)?;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(GridError::SingularJacobian);
        }
        for (r, &i) in p_rows.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in q_rows.iter().enumerate() {
            vm[i] += dx[p_rows.len() + r];
        }
        iterations += 1;
    }
}

fn assemble_solution(case: &GridCase, y: &DMatrix<C64>, vm: Vec<f64>, va: Vec<f64>, iterations: usize, mismatch: f64) -> PowerFlowSolution {
    let (s, _) = injections(y, &vm, &va);
    let reference = case.reference_bus();
    let idx: HashMap<u32, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let branch_flows = case
        .branches
        .iter()
        .map(|br| {
            let (f, t) = (idx[&br.from], idx[&br.to]);
            let vf = C64::from_polar(vm[f], va[f]);
            let vt = C64::from_polar(vm[t], va[t]);
            let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
            let ych = C64::new(0.0, br.b / 2.0);
            let sf = vf * ((ys + ych) * vf - ys * vt).conj();
            let st = vt * ((ys + ych) * vt - ys * vf).conj();
            BranchFlow {
                from: br.from,
                to: br.to,
                p_from: sf.re,
                q_from: sf.im,
                p_to: st.re,
                q_to: st.im,
            }
        })
        .collect();
    PowerFlowSolution {
        p_inj: s.iter().map(|z| z.re).collect(),
        q_inj: s.iter().map(|z| z.im).collect(),
        p_slack: s[reference].re,
        q_slack: s[reference].im,
        v_mag: vm,
        v_ang: va,
        branch_flows,
        iterations,
        mismatch,
    }
}

pub fn solve_power_flow(case: &GridCase) -> Result<PowerFlowSolution> {
    solve_power_flow_with(case, PowerFlowOptions::default())
}

pub fn solve_power_flow_with(case: &GridCase, opts: PowerFlowOptions) -> Result<PowerFlowSolution> {
    let y = case.admittance();
    let prob = FlowProblem::standard(case);
    let vm0: Vec<f64> = case.buses.iter().map(|b| b.v_mag).collect();
    let va0: Vec<f64> = case.buses.iter().map(|b| b.v_ang).collect();
    let (vm, va, it, mis) = newton_raphson(&y, &prob, &vm0, &va0, opts)?;
    Ok(assemble_solution(case, &y, vm, va, it, mis))
}

/// Operating point of the swing dynamics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    /// `(δ̄, ω̄)` per dynamic bus, interleaved.
    pub x_bar: Vec<f64>,
    /// Mechanical input `P_in` per dynamic bus. The reference bus takes the
    /// value balancing the flow.
    pub v_bar: Vec<f64>,
    /// Loads at the dynamic buses.
    pub l_bar_d: Vec<f64>,
    /// Loads at the eliminated (non-dynamic, non-reference) buses.
    pub l_bar_nd: Vec<f64>,
    pub flow: PowerFlowSolution,
    /// `max |F(x̄)|` of the swing right-hand side.
    pub residual: f64,
}

impl Equilibrium {
    pub fn delta(&self) -> Vec<f64> {
        self.x_bar.iter().step_by(2).copied().collect()
    }
}

/// Buses whose loads enter the linear model as `ζⁿ`.
fn eliminated_load_buses(case: &GridCase) -> Vec<usize> {
    let reference = case.reference_bus();
    (0..case.buses.len())
        .filter(|&i| !case.buses[i].dynamic && i != reference)
        .collect()
}

/// Solves the network with every dynamic bus angle held at `delta` and
/// returns the electrical output `P_out` of each dynamic bus.
struct OutputMap {
    y: DMatrix<C64>,
    dyn_idx: Vec<usize>,
    base: FlowProblem,
    vm0: Vec<f64>,
    va0: Vec<f64>,
}

impl OutputMap {
    fn new(case: &GridCase, flow: &PowerFlowSolution) -> Self {
        let dyn_idx = case.dynamic_buses();
        let mut base = FlowProblem::standard(case);
        for &i in &dyn_idx {
            base.angle_fixed[i] = true;
        }
        OutputMap {
            y: case.admittance(),
            dyn_idx,
            base,
            vm0: flow.v_mag.clone(),
            va0: flow.v_ang.clone(),
        }
    }

    fn eval(&self, delta: &[f64], p_spec: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut prob = self.base.clone();
        if let Some(p) = p_spec {
            prob.p_spec = p.to_vec();
        }
        let mut va = self.va0.clone();
        for (&i, &d) in self.dyn_idx.iter().zip(delta) {
            va[i] = d;
        }
        let opts = PowerFlowOptions {
            tol: 1e-12,
            max_iter: 50,
        };
        let (vm, va, _, _) = newton_raphson(&self.y, &prob, &self.vm0, &va, opts).or_else(|_| {
            // Accept the best attainable accuracy near machine precision.
            newton_raphson(&self.y, &prob, &self.vm0, &va, PowerFlowOptions { tol: 1e-10, max_iter: 50 })
        })?;
        let (s, _) = injections(&self.y, &vm, &va);
        Ok(self.dyn_idx.iter().map(|&i| s[i].re).collect())
    }
}

pub fn compute_equilibrium(case: &GridCase) -> Result<Equilibrium> {
    let flow = solve_power_flow(case).map_err(|e| match e {
        GridError::Diverged { .. } | GridError::SingularJacobian => {
            GridError::NoEquilibrium(format!("power flow failed: {e}"))
        }
        other => other,
    })?;
    let dyn_idx = case.dynamic_buses();
    let reference = case.reference_bus();
    let mut x_bar = Vec::with_capacity(2 * dyn_idx.len());
    let mut v_bar = Vec::with_capacity(dyn_idx.len());
    let mut l_bar_d = Vec::with_capacity(dyn_idx.len());
    for &i in &dyn_idx {
        let bus = &case.buses[i];
        x_bar.push(flow.v_ang[i]);
        x_bar.push(0.0);
        let gen = case.generator(bus.id).expect("dynamic bus has a generator");
        let p_in = if i == reference {
            let balanced = flow.p_inj[i] + bus.p_load;
            if (balanced - gen.p_in).abs() > 1e-6 {
                log::info!(
                    "reference bus {}: P_in {} replaced by balancing value {}",
                    bus.id,
                    gen.p_in,
                    balanced
                );
            }
            balanced
        } else {
            gen.p_in
        };
        v_bar.push(p_in);
        l_bar_d.push(bus.p_load);
    }
    let l_bar_nd = eliminated_load_buses(case)
        .into_iter()
        .map(|i| case.buses[i].p_load)
        .collect();
    let mut eq = Equilibrium {
        x_bar,
        v_bar,
        l_bar_d,
        l_bar_nd,
        flow,
        residual: 0.0,
    };
    let rhs = swing_rhs(case, &eq, &eq.x_bar)?;
    eq.residual = rhs.iter().fold(0.0, |m, v| m.max(v.abs()));
    if eq.residual >= 1e-8 {
        return Err(GridError::NoEquilibrium(format!(
            "swing residual {:.3e} at the power-flow point",
            eq.residual
        )));
    }
    Ok(eq)
}

/// Nonlinear swing right-hand side `ż = F(z)` at nominal inputs and loads,
/// `z = (δ₁, ω₁, δ₂, ω₂, …)`.
pub fn swing_rhs(case: &GridCase, eq: &Equilibrium, z: &[f64]) -> Result<Vec<f64>> {
    let dyn_idx = case.dynamic_buses();
    if z.len() != 2 * dyn_idx.len() {
        return Err(GridError::Invalid(format!(
            "state has {} entries, expected {}",
            z.len(),
            2 * dyn_idx.len()
        )));
    }
    let map = OutputMap::new(case, &eq.flow);
    let delta: Vec<f64> = z.iter().step_by(2).copied().collect();
    let p_out = map.eval(&delta, None)?;
    let mut out = vec![0.0; z.len()];
    for (a, &i) in dyn_idx.iter().enumerate() {
        let g = case.generator(case.buses[i].id).expect("generator");
        let omega = z[2 * a + 1];
        out[2 * a] = omega;
        out[2 * a + 1] = (eq.v_bar[a] - eq.l_bar_d[a] - p_out[a] - g.b * omega) / g.m;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    /// Analytic when every bus is dynamic and none is PQ; otherwise finite
    /// differences.
    #[default]
    Auto,
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearizedModel {
    #[serde(serialize_with = "ser_matrix")]
    pub a: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub b1: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub b2: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub d1: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub d2: Matrix,
    pub state_labels: Vec<String>,
    pub equilibrium: Equilibrium,
    pub method: JacobianMethod,
}

fn ser_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    rsls::matrix_to_rows(m).serialize(s)
}

/// Finite-difference step for the implicit power-flow partials.
pub const FD_STEP: f64 = 1e-5;

fn analytic_eligible(case: &GridCase) -> bool {
    case.buses.iter().all(|b| b.dynamic && b.kind != BusKind::Pq)
}

/// `∂P_out/∂δ` over dynamic buses.
fn output_sensitivity(case: &GridCase, eq: &Equilibrium, method: JacobianMethod) -> Result<Matrix> {
    let dyn_idx = case.dynamic_buses();
    let nd = dyn_idx.len();
    let delta = eq.delta();
    match method {
        JacobianMethod::Analytic => {
            let y = case.admittance();
            let vm = &eq.flow.v_mag;
            let va = &eq.flow.v_ang;
            let v: Vec<C64> = vm.iter().zip(va).map(|(&m, &a)| C64::from_polar(m, a)).collect();
            let (_, cur) = injections(&y, vm, va);
            Ok(Matrix::from_fn(nd, nd, |a, b| {
                let (i, k) = (dyn_idx[a], dyn_idx[b]);
                let mut t = -y[(i, k)] * v[k];
                if i == k {
                    t += cur[i];
                }
                (C64::new(0.0, 1.0) * v[i] * t.conj()).re
            }))
        }
        _ => {
            let map = OutputMap::new(case, &eq.flow);
            let mut jac = Matrix::zeros(nd, nd);
            for b in 0..nd {
                let mut plus = delta.clone();
                let mut minus = delta.clone();
                plus[b] += FD_STEP;
                minus[b] -= FD_STEP;
                let fp = map.eval(&plus, None)?;
                let fm = map.eval(&minus, None)?;
                for a in 0..nd {
                    jac[(a, b)] = (fp[a] - fm[a]) / (2.0 * FD_STEP);
                }
            }
            Ok(jac)
        }
    }
}

/// `∂P_out/∂P_L` for loads at eliminated buses.
fn load_sensitivity(case: &GridCase, eq: &Equilibrium) -> Result<Matrix> {
    let dyn_idx = case.dynamic_buses();
    let loads = eliminated_load_buses(case);
    let map = OutputMap::new(case, &eq.flow);
    let delta = eq.delta();
    let mut sens = Matrix::zeros(dyn_idx.len(), loads.len());
    for (c, &k) in loads.iter().enumerate() {
        let mut plus = map.base.p_spec.clone();
        let mut minus = map.base.p_spec.clone();
        // A load increase lowers the net injection.
        plus[k] -= FD_STEP;
        minus[k] += FD_STEP;
        let fp = map.eval(&delta, Some(&plus))?;
        let fm = map.eval(&delta, Some(&minus))?;
        for a in 0..dyn_idx.len() {
            sens[(a, c)] = (fp[a] - fm[a]) / (2.0 * FD_STEP);
        }
    }
    Ok(sens)
}

pub fn linearize(case: &GridCase, eq: &Equilibrium) -> Result<LinearizedModel> {
    linearize_with(case, eq, JacobianMethod::Auto)
}

pub fn linearize_with(case: &GridCase, eq: &Equilibrium, method: JacobianMethod) -> Result<LinearizedModel> {
    let method = match method {
        JacobianMethod::Auto if analytic_eligible(case) => JacobianMethod::Analytic,
        JacobianMethod::Auto => JacobianMethod::FiniteDifference,
        JacobianMethod::Analytic if !analytic_eligible(case) => {
            return Err(GridError::Method(
                "analytic linearization needs every bus dynamic and none PQ".into(),
            ))
        }
        m => m,
    };
    let dyn_idx = case.dynamic_buses();
    let nd = dyn_idx.len();
    let n = 2 * nd;
    let dp = output_sensitivity(case, eq, method)?;
    let dl = load_sensitivity(case, eq)?;
    let mut a = Matrix::zeros(n, n);
    let mut b1 = Matrix::zeros(n, nd);
    let mut d2 = Matrix::zeros(n, dl.ncols());
    let mut labels = Vec::with_capacity(n);
    for (ia, &i) in dyn_idx.iter().enumerate() {
        let bus = &case.buses[i];
        let g = case.generator(bus.id).expect("generator");
        a[(2 * ia, 2 * ia + 1)] = 1.0;
        for ib in 0..nd {
            a[(2 * ia + 1, 2 * ib)] = -dp[(ia, ib)] / g.m;
        }
        a[(2 * ia + 1, 2 * ia + 1)] = -g.b / g.m;
        b1[(2 * ia + 1, ia)] = 1.0 / g.m;
        for c in 0..dl.ncols() {
            d2[(2 * ia + 1, c)] = -dl[(ia, c)] / g.m;
        }
        labels.push(format!("delta_{}", bus.id));
        labels.push(format!("omega_{}", bus.id));
    }
    let d1 = -&b1;
    Ok(LinearizedModel {
        a,
        b1,
        b2: Matrix::zeros(n, 0),
        d1,
        d2,
        state_labels: labels,
        equilibrium: eq.clone(),
        method,
    })
}

fn find_branches_mut(case: &mut GridCase, from: u32, to: u32) -> Result<Vec<&mut Branch>> {
    let hits: Vec<&mut Branch> = case.branches.iter_mut().filter(|b| b.connects(from, to)).collect();
    if hits.is_empty() {
        return Err(GridError::UnknownTarget(format!("branch {from}-{to}")));
    }
    Ok(hits)
}

/// Returns a mutated copy of `case`; sensor overrides leave the network as is.
pub fn apply_contingency(case: &GridCase, scenario: &ContingencyScenario) -> Result<GridCase> {
    let mut out = case.clone();
    for m in &scenario.mutations {
        match *m {
            Mutation::ScaleImpedance { from, to, factor } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(GridError::Invalid(format!("impedance factor {factor}")));
                }
                for b in find_branches_mut(&mut out, from, to)? {
                    b.r *= factor;
                    b.x *= factor;
                }
            }
            Mutation::SetReactance { from, to, x } => {
                if x == 0.0 || !x.is_finite() {
                    return Err(GridError::Invalid(format!("reactance {x}")));
                }
                for b in find_branches_mut(&mut out, from, to)? {
                    b.x = x;
                }
            }
            Mutation::SetImpedanceMagnitude { from, to, z } => {
                if !(z > 0.0 && z.is_finite()) {
                    return Err(GridError::Invalid(format!("impedance magnitude {z}")));
                }
                for b in find_branches_mut(&mut out, from, to)? {
                    let th = b.impedance_angle();
                    b.r = z * th.cos();
                    b.x = z * th.sin();
                }
            }
            Mutation::SensorOverride { ref c } => {
                let n = 2 * case.dynamic_buses().len();
                if c.is_empty() || c.iter().any(|r| r.len() != n) {
                    return Err(GridError::UnknownTarget(format!(
                        "sensor matrix must have {n} columns"
                    )));
                }
            }
        }
    }
    Ok(out)
}

fn subsystem_from(label: &str, lin: &LinearizedModel, c: Matrix) -> Result<LtiSubsystem> {
    Ok(LtiSubsystem::new(label, lin.a.clone(), lin.b1.clone(), c)?.with_disturbance_channels(
        lin.b2.clone(),
        lin.d1.clone(),
        lin.d2.clone(),
    )?)
}

/// Linearizes every scenario around its own equilibrium. Sensor-only
/// scenarios reuse the unmutated linearization with their own `C(i)`.
pub fn build_bank(case: &GridCase, scenarios: &[ContingencyScenario], c_default: &Matrix) -> Result<RslsBank> {
    if scenarios.is_empty() {
        return Err(GridError::Invalid("no scenarios".into()));
    }
    let p: Vec<f64> = scenarios.iter().map(|s| s.probability).collect();
    rsls::check_probabilities(&p)?;
    let needs_base = scenarios.iter().any(|s| s.sensor_only());
    let base = if needs_base {
        let eq = compute_equilibrium(case)?;
        Some(linearize(case, &eq)?)
    } else {
        None
    };
    let subs = scenarios
        .par_iter()
        .map(|s| -> Result<LtiSubsystem> {
            let mutated = apply_contingency(case, s)?;
            let c = match s.sensor_override() {
                Some(rows) => rsls::matrix_from_rows(rows, 0)?,
                None => c_default.clone(),
            };
            if s.sensor_only() {
                subsystem_from(&s.label, base.as_ref().expect("base linearization"), c)
            } else {
                let eq = compute_equilibrium(&mutated)?;
                let lin = linearize(&mutated, &eq)?;
                subsystem_from(&s.label, &lin, c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RslsBank::new("grid", subs, p)?)
}
