//! Ground truth for the startup Couette flow of an Oldroyd-B fluid,
//! generated with the CONNFFESSIT idea (Laso & Öttinger 1993): polymer
//! chains are linear elastic dumbbells simulated as an ensemble of Itô
//! SDEs per mesh node, and their empirical shear stress feeds a macroscopic
//! momentum solve.
//!
//! Dimensionless micro model per dumbbell (We = Weissenberg number):
//!
//! ```text
//! dr_x = (dv/dy r_y - r_x / (2 We)) dt + sqrt(dt/We) xi_V
//! dr_y = (       - r_y / (2 We)) dt + sqrt(dt/We) xi_W
//! tau  = (eps / We) <r_x r_y>
//! ```
//!
//! Macro model on the 101-node vertical grid, lid at `y = H` driven at
//! velocity `V`, wall at `y = 0` fixed:
//!
//! ```text
//! Re dv/dt = (1 - eps) d2v/dy2 + dtau/dy
//! dq_x/dt  = v                        (material marker displacement)
//! de/dt    = (1 - eps) (dv/dy)^2 + tau dv/dy   (dissipation heating)
//! ```
//!
//! `q` is the position of the node's material marker: `q_x` records the
//! horizontal displacement from the start (the flow is purely horizontal)
//! and `q_y` stays fixed at the node height. The height is what identifies
//! a node's trajectory — every node starts from the same rest state
//! otherwise. The momentum equation is advanced with forward-Euler /
//! centered differences; the solver substeps each micro increment so the
//! diffusion number `dt (1-eps) / (Re dy^2)` stays below 0.5.
//!
//! State layout per node (n = 5): `(q_x, q_y, v, e, tau)`. The learning
//! dataset holds one trajectory per node, excluding the driven lid node.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, TrajectoryDataset};
use crate::error::Error;
use crate::exec::{self, Execution};
use crate::generic::{GenericOperators, StateLayout};
use crate::linalg::Mat;
use crate::rng;

pub const STATE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouetteParams {
    /// Vertical elements; nodes = n_elements + 1.
    pub n_elements: usize,
    /// Channel height.
    pub height: f64,
    /// Dumbbells per node (K).
    pub dumbbells_per_node: usize,
    /// Lid velocity.
    pub lid_velocity: f64,
    pub weissenberg: f64,
    pub reynolds: f64,
    /// Polymer/solvent viscosity ratio (eps).
    pub viscosity_ratio: f64,
    /// Recorded time increment.
    pub dt: f64,
    /// Recorded steps (snapshots = n_steps + 1).
    pub n_steps: usize,
    /// Euler-Maruyama substeps per recorded increment.
    pub micro_substeps: usize,
    /// Momentum-solve substeps per micro substep; 0 derives the smallest
    /// count that satisfies the CFL bound.
    pub macro_substeps: usize,
    /// Sign convention applied to the recorded stress slot.
    pub stress_sign: f64,
}

impl Default for CouetteParams {
    fn default() -> Self {
        Self {
            n_elements: 100,
            height: 1.0,
            dumbbells_per_node: 10_000,
            lid_velocity: 1.0,
            weissenberg: 1.0,
            reynolds: 0.1,
            viscosity_ratio: 0.5,
            dt: 0.0067,
            n_steps: 150,
            micro_substeps: 10,
            macro_substeps: 0,
            stress_sign: 1.0,
        }
    }
}

impl CouetteParams {
    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn dy(&self) -> f64 {
        self.height / self.n_elements as f64
    }

    pub fn dt_micro(&self) -> f64 {
        self.dt / self.micro_substeps as f64
    }

    /// Diffusion number of one explicit momentum update with step `dt`.
    pub fn cfl_number(&self, dt: f64) -> f64 {
        dt * (1.0 - self.viscosity_ratio) / (self.reynolds * self.dy() * self.dy())
    }

    /// Momentum substeps per micro increment: the configured override, or
    /// the smallest count with diffusion number <= 0.45.
    pub fn resolved_macro_substeps(&self) -> usize {
        if self.macro_substeps > 0 {
            self.macro_substeps
        } else {
            (self.cfl_number(self.dt_micro()) / 0.45).ceil().max(1.0) as usize
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("height", self.height),
            ("lid_velocity", self.lid_velocity),
            ("weissenberg", self.weissenberg),
            ("reynolds", self.reynolds),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.n_elements < 2 || self.dumbbells_per_node == 0 || self.micro_substeps == 0 {
            return Err(Error::InvalidConfig(
                "n_elements >= 2, dumbbells_per_node >= 1 and micro_substeps >= 1 required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.viscosity_ratio) {
            return Err(Error::InvalidConfig(
                "viscosity_ratio must lie in [0, 1)".into(),
            ));
        }
        if self.stress_sign.abs() != 1.0 {
            return Err(Error::InvalidConfig("stress_sign must be +1 or -1".into()));
        }
        // configuration-time CFL check of the resolved momentum substep
        let dt_macro = self.dt_micro() / self.resolved_macro_substeps() as f64;
        let cfl = self.cfl_number(dt_macro);
        if cfl > 0.5 {
            return Err(Error::CflViolation { cfl_number: cfl });
        }
        Ok(())
    }
}

pub fn layout() -> StateLayout {
    StateLayout::new(vec![
        StateLayout::slot("q_x", 1, "-"),
        StateLayout::slot("q_y", 1, "-"),
        StateLayout::slot("v", 1, "-"),
        StateLayout::slot("e", 1, "-"),
        StateLayout::slot("tau", 1, "-"),
    ])
}

/// Per-node operator pair on `(q_x, q_y, v, e, tau)`.
///
/// `L` couples q_x <-> v, v <-> e and v <-> tau and is exactly
/// skew-symmetric; row/column `q_y` is identically zero. `M` dissipates in
/// the (v, e) block `[[1, 1], [1, 1]]` (eigenvalues 0 and 2) and the tau
/// diagonal.
pub fn operators() -> GenericOperators {
    let mut l = Mat::zeros(STATE_DIM, STATE_DIM);
    l.set(0, 2, 1.0);
    l.set(2, 0, -1.0);
    l.set(2, 3, 1.0);
    l.set(3, 2, -1.0);
    l.set(2, 4, -1.0);
    l.set(4, 2, 1.0);
    let mut m = Mat::zeros(STATE_DIM, STATE_DIM);
    m.set(2, 2, 1.0);
    m.set(2, 3, 1.0);
    m.set(3, 2, 1.0);
    m.set(3, 3, 1.0);
    m.set(4, 4, 1.0);
    GenericOperators::new(l, m).expect("static operators are square")
}

/// End-to-end vectors of one node's dumbbell ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DumbbellEnsemble {
    pub r_x: Vec<f64>,
    pub r_y: Vec<f64>,
}

impl DumbbellEnsemble {
    /// Draw K dumbbells from the zero-shear stationary distribution
    /// (standard normal per component).
    pub fn equilibrium(k: usize, stream: &mut ChaCha8Rng) -> Self {
        let r_x = (0..k).map(|_| stream.sample(StandardNormal)).collect();
        let r_y = (0..k).map(|_| stream.sample(StandardNormal)).collect();
        Self { r_x, r_y }
    }

    pub fn len(&self) -> usize {
        self.r_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_x.is_empty()
    }

    pub fn second_moments(&self) -> (f64, f64) {
        let k = self.len() as f64;
        let ry2 = self.r_y.iter().map(|v| v * v).sum::<f64>() / k;
        let rxy = self
            .r_x
            .iter()
            .zip(&self.r_y)
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / k;
        (ry2, rxy)
    }
}

/// Euler-Maruyama increment of a single dumbbell with given noises; the
/// drift uses the pre-update state.
#[inline]
pub fn em_update(
    r_x: f64,
    r_y: f64,
    shear_rate: f64,
    we: f64,
    dt: f64,
    xi_v: f64,
    xi_w: f64,
) -> (f64, f64) {
    let amp = (dt / we).sqrt();
    (
        r_x + (shear_rate * r_y - r_x / (2.0 * we)) * dt + amp * xi_v,
        r_y - r_y / (2.0 * we) * dt + amp * xi_w,
    )
}

/// One Euler-Maruyama step of the whole ensemble. Noises are drawn from the
/// node stream in dumbbell order, xi_V before xi_W.
pub fn sde_step(
    ensemble: &mut DumbbellEnsemble,
    shear_rate: f64,
    we: f64,
    dt_micro: f64,
    stream: &mut ChaCha8Rng,
) {
    debug_assert!(dt_micro > 0.0);
    for (rx, ry) in ensemble.r_x.iter_mut().zip(ensemble.r_y.iter_mut()) {
        let xi_v: f64 = stream.sample(StandardNormal);
        let xi_w: f64 = stream.sample(StandardNormal);
        let (nx, ny) = em_update(*rx, *ry, shear_rate, we, dt_micro, xi_v, xi_w);
        *rx = nx;
        *ry = ny;
    }
}

/// Empirical shear stress `tau = (eps / We) * mean(r_x r_y)`.
pub fn shear_stress(ensemble: &DumbbellEnsemble, eps: f64, we: f64) -> f64 {
    let sum: f64 = ensemble
        .r_x
        .iter()
        .zip(&ensemble.r_y)
        .map(|(x, y)| x * y)
        .sum();
    eps / we * sum / ensemble.len() as f64
}

/// Velocity/energy/marker fields on the full node grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub v: Vec<f64>,
    pub e: Vec<f64>,
    pub q_x: Vec<f64>,
}

impl MacroState {
    /// Startup state: fluid at rest, lid node already moving.
    pub fn startup(params: &CouetteParams) -> Self {
        let n = params.n_nodes();
        let mut v = vec![0.0; n];
        v[n - 1] = params.lid_velocity;
        Self {
            v,
            e: vec![0.0; n],
            q_x: vec![0.0; n],
        }
    }
}

/// `dv/dy` on the grid: centered differences inside, one-sided at the
/// boundaries.
pub fn shear_rate_profile(v: &[f64], dy: f64) -> Vec<f64> {
    let n = v.len();
    let mut g = vec![0.0; n];
    g[0] = (v[1] - v[0]) / dy;
    for j in 1..n - 1 {
        g[j] = (v[j + 1] - v[j - 1]) / (2.0 * dy);
    }
    g[n - 1] = (v[n - 1] - v[n - 2]) / dy;
    g
}

/// One explicit update of the momentum balance with step `dt`, followed by
/// marker advection and dissipation heating with the updated velocity.
/// Boundary velocities stay pinned (wall at rest, lid at `V`). Errors if
/// `dt` violates the CFL bound.
pub fn macro_step(
    state: &mut MacroState,
    stresses: &[f64],
    params: &CouetteParams,
    dt: f64,
) -> Result<(), Error> {
    let n = params.n_nodes();
    debug_assert_eq!(state.v.len(), n);
    debug_assert_eq!(stresses.len(), n);
    let cfl = params.cfl_number(dt);
    if cfl > 0.5 {
        return Err(Error::CflViolation { cfl_number: cfl });
    }
    let dy = params.dy();
    let nu_s = 1.0 - params.viscosity_ratio;
    let mut v_new = state.v.clone();
    for j in 1..n - 1 {
        let diffusion = nu_s * (state.v[j + 1] - 2.0 * state.v[j] + state.v[j - 1]) / (dy * dy);
        let stress_div = (stresses[j + 1] - stresses[j - 1]) / (2.0 * dy);
        v_new[j] = state.v[j] + dt / params.reynolds * (diffusion + stress_div);
    }
    v_new[0] = 0.0;
    v_new[n - 1] = params.lid_velocity;
    state.v = v_new;

    let shear = shear_rate_profile(&state.v, dy);
    for j in 0..n {
        state.q_x[j] += state.v[j] * dt;
        state.e[j] += (nu_s * shear[j] * shear[j] + stresses[j] * shear[j]) * dt;
    }
    Ok(())
}

/// The coupled micro/macro simulation.
pub struct CouetteSim {
    pub params: CouetteParams,
    pub state: MacroState,
    pub ensembles: Vec<DumbbellEnsemble>,
    pub stresses: Vec<f64>,
    streams: Vec<ChaCha8Rng>,
    macro_substeps: usize,
}

impl CouetteSim {
    /// Node `j`'s dumbbells are initialized and driven by the dedicated
    /// stream `TRAJECTORY_STREAM_BASE + j` of the master seed, so node
    /// updates can run in parallel without affecting the result.
    pub fn new(params: &CouetteParams, seed: u64) -> Result<Self, Error> {
        params.validate()?;
        let n = params.n_nodes();
        let mut streams: Vec<ChaCha8Rng> = (0..n)
            .map(|j| rng::stream(seed, rng::TRAJECTORY_STREAM_BASE + j as u64))
            .collect();
        let ensembles: Vec<DumbbellEnsemble> = streams
            .iter_mut()
            .map(|s| DumbbellEnsemble::equilibrium(params.dumbbells_per_node, s))
            .collect();
        let stresses = ensembles
            .iter()
            .map(|e| shear_stress(e, params.viscosity_ratio, params.weissenberg))
            .collect();
        Ok(Self {
            params: params.clone(),
            state: MacroState::startup(params),
            ensembles,
            stresses,
            streams,
            macro_substeps: params.resolved_macro_substeps(),
        })
    }

    /// Advance one recorded increment: `micro_substeps` Euler-Maruyama
    /// sweeps, each followed by a CFL-stable sequence of momentum updates.
    pub fn step(&mut self, exec: Execution) -> Result<(), Error> {
        let p = &self.params;
        let dt_micro = p.dt_micro();
        let dt_macro = dt_micro / self.macro_substeps as f64;
        for _ in 0..p.micro_substeps {
            let shear = shear_rate_profile(&self.state.v, p.dy());
            let we = p.weissenberg;
            // Each node owns its ensemble and stream; the update order does
            // not matter.
            let streams = &mut self.streams;
            let pairs: Vec<(&mut DumbbellEnsemble, &mut ChaCha8Rng)> = self
                .ensembles
                .iter_mut()
                .zip(streams.iter_mut())
                .collect();
            let mut items: Vec<_> = pairs;
            exec::for_each_mut(exec, &mut items, |j, (ensemble, stream)| {
                sde_step(ensemble, shear[j], we, dt_micro, stream);
            });
            for (tau, ensemble) in self.stresses.iter_mut().zip(&self.ensembles) {
                *tau = shear_stress(ensemble, p.viscosity_ratio, p.weissenberg);
            }
            for _ in 0..self.macro_substeps {
                macro_step(&mut self.state, &self.stresses, &self.params, dt_macro)?;
            }
        }
        Ok(())
    }

    /// Recorded state row of node `j`: `(q_x, q_y, v, e, tau)` with `q_y`
    /// pinned at the node height.
    pub fn snapshot_row(&self, j: usize) -> [f64; STATE_DIM] {
        [
            self.state.q_x[j],
            j as f64 * self.params.dy(),
            self.state.v[j],
            self.state.e[j],
            self.params.stress_sign * self.stresses[j],
        ]
    }
}

pub fn generate_dataset(params: &CouetteParams, seed: u64) -> Result<TrajectoryDataset, Error> {
    generate_dataset_exec(params, seed, Execution::default())
}

/// Run the coupled simulation and record one learning trajectory per node,
/// excluding the driven lid node at `y = H`.
pub fn generate_dataset_exec(
    params: &CouetteParams,
    seed: u64,
    exec: Execution,
) -> Result<TrajectoryDataset, Error> {
    let mut sim = CouetteSim::new(params, seed)?;
    let n_recorded = params.n_nodes() - 1;
    let n_snapshots = params.n_steps + 1;
    let mut per_node: Vec<Vec<f64>> =
        vec![Vec::with_capacity(n_snapshots * STATE_DIM); n_recorded];
    for (j, buf) in per_node.iter_mut().enumerate() {
        buf.extend_from_slice(&sim.snapshot_row(j));
    }
    for _ in 0..params.n_steps {
        sim.step(exec)?;
        for (j, buf) in per_node.iter_mut().enumerate() {
            buf.extend_from_slice(&sim.snapshot_row(j));
        }
    }
    let trajectories = per_node
        .into_iter()
        .map(|values| Trajectory::new(values, n_snapshots, STATE_DIM))
        .collect::<Result<Vec<_>, _>>()?;
    let table = toml::Value::try_from(params)
        .map_err(|e| Error::Format(e.to_string()))?
        .as_table()
        .cloned()
        .expect("params serialize to a table");
    TrajectoryDataset::from_generator("couette", seed, params.dt, layout(), table, trajectories)
}

/// Piecewise-constant shear history for the analytic moment solution.
#[derive(Debug, Clone, Copy)]
pub struct ShearSegment {
    pub duration: f64,
    pub rate: f64,
}

/// Exact second moments `(<r_y^2>, <r_x r_y>)` of the dumbbell SDE at time
/// `t` under a piecewise-constant shear history, starting from the
/// equilibrium moments (1, 0). Solves the moment ODEs
///
/// ```text
/// d<r_y^2>/dt   = (1 - <r_y^2>) / We
/// d<r_x r_y>/dt = rate * <r_y^2> - <r_x r_y> / We
/// ```
///
/// in closed form per segment; the final segment's rate extends past the
/// end of the history. Entirely independent of the stochastic solver.
pub fn moment_oracle(history: &[ShearSegment], we: f64, t: f64) -> (f64, f64) {
    moment_oracle_from((1.0, 0.0), history, we, t)
}

pub fn moment_oracle_from(
    m0: (f64, f64),
    history: &[ShearSegment],
    we: f64,
    t: f64,
) -> (f64, f64) {
    let (mut ry2, mut rxy) = m0;
    let mut remaining = t;
    let advance = |ry2: &mut f64, rxy: &mut f64, rate: f64, span: f64| {
        let decay = (-span / we).exp();
        let c = *ry2 - 1.0;
        *rxy = *rxy * decay + rate * (we * (1.0 - decay) + c * span * decay);
        *ry2 = 1.0 + c * decay;
    };
    for seg in history {
        if remaining <= 0.0 {
            break;
        }
        let span = seg.duration.min(remaining);
        advance(&mut ry2, &mut rxy, seg.rate, span);
        remaining -= span;
    }
    if remaining > 0.0 {
        let last_rate = history.last().map(|s| s.rate).unwrap_or(0.0);
        advance(&mut ry2, &mut rxy, last_rate, remaining);
    }
    (ry2, rxy)
}
