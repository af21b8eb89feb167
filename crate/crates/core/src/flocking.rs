//! Multi-agent flocking environment.
//!
//! Agents are planar double integrators. The centralized expert
//! accelerations are
//!
//! ```text
//! u_i = -Σ_j (v_i - v_j) - Σ_{j : r_ij < r_c} ∇_{p_i} U(r_ij),   U(r) = 1/r² + ln r²
//! ```
//!
//! clipped to a maximum norm. Agents `i` and `j` communicate at time `t`
//! when `‖p_i(t) - p_j(t)‖ ≤ R`.
//!
//! Closed-loop rollouts feed each agent's raw `(p, v)` into a policy over
//! a trailing window of `K + 1` steps. Policies that need a graph sequence
//! receive `S_1, …, S_K` newest first: `S_1` is the graph of the current
//! step, `S_2` the previous one, and so on.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::graph::{average_gso, res_sample, Graph, GsoKind, ResConfig, ShiftOperator};
use crate::seed;
use crate::spacetime::{SpaceTimeSignal, TimeShiftOperator};
use crate::stgf::ShiftSchedule;
use crate::stgnn::Model;
use crate::training::{Dataset, DatasetSplits, Example, Split};

/// Whose velocities enter the expert's consensus term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsensusScope {
    /// Every other agent (centralized expert).
    #[default]
    Global,
    /// Only agents within the communication radius.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlockConfig {
    pub agent_count: usize,
    /// Communication radius `R` in meters.
    pub comm_radius: f64,
    /// Integration step in seconds.
    pub dt: f64,
    /// Steps per episode.
    pub horizon: usize,
    /// Acceleration norm limit in m/s².
    pub max_accel: f64,
    /// Side of the square initial-position box; `None` uses `√N · R / 2`.
    pub init_box_side: Option<f64>,
    /// Initial velocity components are uniform in `±init_velocity`.
    pub init_velocity: f64,
    /// Minimum initial pairwise distance.
    pub collision_floor: f64,
    /// Range of the collision potential; `None` uses `comm_radius`.
    pub interaction_cutoff: Option<f64>,
    pub consensus: ConsensusScope,
    pub max_init_attempts: usize,
    pub seed: u64,
}

impl Default for FlockConfig {
    fn default() -> Self {
        Self {
            agent_count: 20,
            comm_radius: 2.0,
            dt: 0.01,
            horizon: 200,
            max_accel: 10.0,
            init_box_side: None,
            init_velocity: 1.0,
            collision_floor: 0.1,
            interaction_cutoff: None,
            consensus: ConsensusScope::Global,
            max_init_attempts: 10_000,
            seed: 0,
        }
    }
}

impl FlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.agent_count == 0 {
            return bad("agent_count must be positive");
        }
        if !(self.comm_radius > 0.0) {
            return bad("comm_radius must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if !(self.max_accel > 0.0) {
            return bad("max_accel must be positive");
        }
        if !(self.collision_floor >= 0.0) {
            return bad("collision_floor must be non-negative");
        }
        Ok(())
    }

    pub fn box_side(&self) -> f64 {
        self.init_box_side
            .unwrap_or((self.agent_count as f64).sqrt() * self.comm_radius / 2.0)
    }

    pub fn cutoff(&self) -> f64 {
        self.interaction_cutoff.unwrap_or(self.comm_radius)
    }
}

/// Positions (m) and velocities (m/s) of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlockState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl FlockState {
    pub fn new(positions: Vec<[f64; 2]>, velocities: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(mismatch("flock state", positions.len(), velocities.len()));
        }
        if positions.is_empty() {
            return Err(Error::InvalidParameter(
                "flock needs at least one agent".into(),
            ));
        }
        Ok(Self {
            positions,
            velocities,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.positions.len()
    }

    pub fn mean_velocity(&self) -> [f64; 2] {
        let n = self.agent_count() as f64;
        let (sx, sy) = self
            .velocities
            .iter()
            .fold((0.0, 0.0), |(x, y), v| (x + v[0], y + v[1]));
        [sx / n, sy / n]
    }

    /// `Σ_i ‖v_i - v̄‖²` at this instant.
    pub fn velocity_cost(&self) -> f64 {
        let m = self.mean_velocity();
        self.velocities
            .iter()
            .map(|v| (v[0] - m[0]).powi(2) + (v[1] - m[1]).powi(2))
            .sum()
    }

    /// Smallest pairwise distance.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.agent_count() {
            for j in (i + 1)..self.agent_count() {
                best = best.min(distance(self.positions[i], self.positions[j]));
            }
        }
        best
    }
}

#[inline]
fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Unit-weight proximity graph: edge `{i, j}` iff `‖p_i - p_j‖ ≤ radius`.
pub fn communication_graph(state: &FlockState, radius: f64) -> Graph {
    let n = state.agent_count();
    let mut g = Graph::new(n).expect("state has at least one agent");
    for i in 0..n {
        for j in (i + 1)..n {
            if distance(state.positions[i], state.positions[j]) <= radius {
                g.add_edge(i, j, 1.0).expect("valid pair");
            }
        }
    }
    g
}

/// `dU/dr` of `U(r) = 1/r² + ln r²`.
#[inline]
pub fn potential_derivative(r: f64) -> f64 {
    -2.0 / (r * r * r) + 2.0 / r
}

/// `-Σ_j ∇_{p_i} U(r_ij)` over pairs closer than `cutoff`, before clipping.
/// Each pair contributes equal and opposite forces.
pub fn potential_forces(state: &FlockState, cutoff: f64) -> Result<Vec<[f64; 2]>> {
    let n = state.agent_count();
    let mut forces = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (pi, pj) = (state.positions[i], state.positions[j]);
            let r = distance(pi, pj);
            if r == 0.0 {
                return Err(Error::CoincidentAgents { i, j });
            }
            if r >= cutoff {
                continue;
            }
            let scale = potential_derivative(r) / r;
            let f = [-scale * (pi[0] - pj[0]), -scale * (pi[1] - pj[1])];
            forces[i][0] += f[0];
            forces[i][1] += f[1];
            forces[j][0] -= f[0];
            forces[j][1] -= f[1];
        }
    }
    Ok(forces)
}

/// Scales `u` down to norm `max` if it is longer.
#[inline]
pub fn saturate(u: [f64; 2], max: f64) -> [f64; 2] {
    let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
    if norm > max {
        [u[0] * max / norm, u[1] * max / norm]
    } else {
        u
    }
}

/// Expert accelerations: velocity consensus plus collision potential,
/// clipped to `cfg.max_accel`.
pub fn optimal_controller(state: &FlockState, cfg: &FlockConfig) -> Result<Vec<[f64; 2]>> {
    let n = state.agent_count();
    let forces = potential_forces(state, cfg.cutoff())?;
    let mut u = forces;
    for i in 0..n {
        let vi = state.velocities[i];
        for j in 0..n {
            if j == i {
                continue;
            }
            if cfg.consensus == ConsensusScope::Local
                && distance(state.positions[i], state.positions[j]) > cfg.comm_radius
            {
                continue;
            }
            let vj = state.velocities[j];
            u[i][0] -= vi[0] - vj[0];
            u[i][1] -= vi[1] - vj[1];
        }
    }
    Ok(u.into_iter().map(|a| saturate(a, cfg.max_accel)).collect())
}

/// One double-integrator step: `v ← v + u·dt`, `p ← p + v·dt + ½u·dt²`.
pub fn step_dynamics(state: &FlockState, accel: &[[f64; 2]], dt: f64) -> Result<FlockState> {
    if accel.len() != state.agent_count() {
        return Err(mismatch("accelerations", state.agent_count(), accel.len()));
    }
    let mut next = state.clone();
    for i in 0..state.agent_count() {
        for d in 0..2 {
            let (p, v, u) = (state.positions[i][d], state.velocities[i][d], accel[i][d]);
            next.positions[i][d] = p + v * dt + 0.5 * u * dt * dt;
            next.velocities[i][d] = v + u * dt;
        }
    }
    Ok(next)
}

/// Rejection-samples a collision-free initial state.
pub fn sample_initial_state(cfg: &FlockConfig, rng: &mut impl Rng) -> Result<FlockState> {
    cfg.validate()?;
    let n = cfg.agent_count;
    let side = cfg.box_side();
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while positions.len() < n {
        attempts += 1;
        if attempts > cfg.max_init_attempts {
            return Err(Error::InitRetryExceeded {
                agents: n,
                attempts: cfg.max_init_attempts,
            });
        }
        let half = side / 2.0;
        let p = [
            rng.random_range(-half..=half),
            rng.random_range(-half..=half),
        ];
        if positions
            .iter()
            .all(|&q| distance(p, q) >= cfg.collision_floor.max(f64::MIN_POSITIVE))
        {
            positions.push(p);
        }
    }
    let vr = cfg.init_velocity;
    let velocities = (0..n)
        .map(|_| [rng.random_range(-vr..=vr), rng.random_range(-vr..=vr)])
        .collect();
    FlockState::new(positions, velocities)
}

/// States, applied accelerations and communication graphs over an episode.
///
/// `accelerations[t]` moves `state(t)` to `state(t + 1)`; the last one is
/// recorded but its successor is not.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `N × T × 2`.
    pub positions: SpaceTimeSignal,
    /// `N × T × 2`.
    pub velocities: SpaceTimeSignal,
    /// `N × T × 2`.
    pub accelerations: SpaceTimeSignal,
    /// Communication graph at each step, built from that step's positions.
    pub graphs: Vec<Graph>,
    pub dt: f64,
    pub comm_radius: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryManifest {
    format: String,
    agents: usize,
    horizon: usize,
    dt: f64,
    comm_radius: f64,
    seed: u64,
    positions: String,
    velocities: String,
    accelerations: String,
    graphs: Vec<String>,
}

pub const TRAJECTORY_FORMAT: &str = "stgnn-trajectory/1";

impl Trajectory {
    pub fn agent_count(&self) -> usize {
        self.positions.nodes()
    }

    pub fn horizon(&self) -> usize {
        self.positions.horizon()
    }

    pub fn state_at(&self, t: usize) -> FlockState {
        let n = self.agent_count();
        let positions = (0..n)
            .map(|i| [self.positions.get(i, t, 0), self.positions.get(i, t, 1)])
            .collect();
        let velocities = (0..n)
            .map(|i| [self.velocities.get(i, t, 0), self.velocities.get(i, t, 1)])
            .collect();
        FlockState {
            positions,
            velocities,
        }
    }

    pub fn velocity_cost_at(&self, t: usize) -> f64 {
        self.state_at(t).velocity_cost()
    }

    /// Raw node features `(p_x, p_y, v_x, v_y)`, `N × T × 4`.
    pub fn features(&self) -> SpaceTimeSignal {
        SpaceTimeSignal::from_fn(self.agent_count(), self.horizon(), 4, |n, t, f| {
            if f < 2 {
                self.positions.get(n, t, f)
            } else {
                self.velocities.get(n, t, f - 2)
            }
        })
    }

    pub fn gsos(&self, kind: GsoKind) -> Vec<ShiftOperator> {
        self.graphs
            .iter()
            .map(|g| ShiftOperator::from_graph(g, kind))
            .collect()
    }

    /// Entrywise mean of the episode's shift operators.
    pub fn average_gso(&self, kind: GsoKind) -> Result<ShiftOperator> {
        average_gso(&self.gsos(kind))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("graphs"))?;
        self.positions.save(dir.join("positions.bin"))?;
        self.velocities.save(dir.join("velocities.bin"))?;
        self.accelerations.save(dir.join("accelerations.bin"))?;
        let mut graphs = Vec::with_capacity(self.graphs.len());
        for (t, g) in self.graphs.iter().enumerate() {
            let name = format!("graphs/step_{t:05}.txt");
            g.save(dir.join(&name))?;
            graphs.push(name);
        }
        let manifest = TrajectoryManifest {
            format: TRAJECTORY_FORMAT.into(),
            agents: self.agent_count(),
            horizon: self.horizon(),
            dt: self.dt,
            comm_radius: self.comm_radius,
            seed: self.seed,
            positions: "positions.bin".into(),
            velocities: "velocities.bin".into(),
            accelerations: "accelerations.bin".into(),
            graphs,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("trajectory.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("trajectory.toml"))?;
        let m: TrajectoryManifest =
            toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != TRAJECTORY_FORMAT {
            return Err(Error::Format(format!(
                "unsupported trajectory format `{}`",
                m.format
            )));
        }
        let positions = SpaceTimeSignal::load(dir.join(&m.positions))?;
        let velocities = SpaceTimeSignal::load(dir.join(&m.velocities))?;
        let accelerations = SpaceTimeSignal::load(dir.join(&m.accelerations))?;
        let want = (m.agents, m.horizon, 2);
        for t in [&positions, &velocities, &accelerations] {
            if t.shape() != want {
                return Err(Error::Format(format!(
                    "trajectory tensor has shape {:?}, manifest says {want:?}",
                    t.shape()
                )));
            }
        }
        let graphs = m
            .graphs
            .iter()
            .map(|name| Graph::load(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        if graphs.len() != m.horizon {
            return Err(Error::Format("graph count differs from horizon".into()));
        }
        Ok(Self {
            positions,
            velocities,
            accelerations,
            graphs,
            dt: m.dt,
            comm_radius: m.comm_radius,
            seed: m.seed,
        })
    }
}

/// What a policy sees at one rollout step.
pub struct StepInput<'a> {
    pub t: usize,
    pub state: &'a FlockState,
    /// `N × W × 4` feature window ending at step `t`, zero before `t = 0`.
    pub features: &'a SpaceTimeSignal,
    pub shifts: ShiftSchedule<'a>,
}

/// Maps observations to accelerations, before saturation.
pub trait Policy: Sync {
    /// Number of trailing steps the policy needs, at least 1.
    fn window(&self) -> usize;

    fn act(&self, input: &StepInput<'_>) -> Result<Vec<[f64; 2]>>;
}

/// The centralized expert as a policy.
pub struct ExpertPolicy<'a> {
    pub cfg: &'a FlockConfig,
}

impl Policy for ExpertPolicy<'_> {
    fn window(&self) -> usize {
        1
    }

    fn act(&self, input: &StepInput<'_>) -> Result<Vec<[f64; 2]>> {
        optimal_controller(input.state, self.cfg)
    }
}

/// A trained network as a decentralized policy.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
}

impl Policy for ModelPolicy<'_> {
    fn window(&self) -> usize {
        self.model.order() + 1
    }

    fn act(&self, input: &StepInput<'_>) -> Result<Vec<[f64; 2]>> {
        let w = input.features.horizon();
        let tso = TimeShiftOperator::zero_pad(w)?;
        let y = self.model.forward(input.features, input.shifts, &tso)?;
        if y.features() != 2 {
            return Err(mismatch("policy output features", 2, y.features()));
        }
        Ok((0..y.nodes())
            .map(|n| [y.get(n, w - 1, 0), y.get(n, w - 1, 1)])
            .collect())
    }
}

/// Which operators a rollout hands to its policy.
#[derive(Debug, Clone, Copy)]
pub enum RolloutMode<'a> {
    /// One operator for the whole episode.
    FixedGraph(&'a ShiftOperator),
    /// Operators of the live communication graphs.
    TimeVarying(GsoKind),
    /// A fresh random-edge-sampling draw from `nominal` at every step. Draw
    /// `t` uses seed `derive(seed, [t])`, independent of `probability`.
    Perturbed {
        nominal: &'a ShiftOperator,
        probability: f64,
        seed: u64,
    },
}

fn node_features(state: &FlockState) -> Vec<[f64; 4]> {
    state
        .positions
        .iter()
        .zip(&state.velocities)
        .map(|(p, v)| [p[0], p[1], v[0], v[1]])
        .collect()
}

/// Runs `policy` in closed loop from `initial` for `cfg.horizon` steps.
pub fn closed_loop_rollout(
    policy: &dyn Policy,
    cfg: &FlockConfig,
    initial: &FlockState,
    mode: RolloutMode<'_>,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = initial.agent_count();
    let horizon = cfg.horizon;
    let window = policy.window().max(1);
    let order = window - 1;

    let mut positions = SpaceTimeSignal::zeros(n, horizon, 2);
    let mut velocities = SpaceTimeSignal::zeros(n, horizon, 2);
    let mut accelerations = SpaceTimeSignal::zeros(n, horizon, 2);
    let mut graphs = Vec::with_capacity(horizon);

    let mut history: VecDeque<Vec<[f64; 4]>> = VecDeque::with_capacity(window);
    // newest first
    let mut recent: VecDeque<ShiftOperator> = VecDeque::with_capacity(order.max(1));
    let mut state = initial.clone();

    for t in 0..horizon {
        let graph = communication_graph(&state, cfg.comm_radius);

        if history.len() == window {
            history.pop_front();
        }
        history.push_back(node_features(&state));
        let pad = window - history.len();
        let features = SpaceTimeSignal::from_fn(n, window, 4, |node, col, f| {
            if col < pad {
                0.0
            } else {
                history[col - pad][node][f]
            }
        });

        let live = match mode {
            RolloutMode::FixedGraph(_) => None,
            RolloutMode::TimeVarying(kind) => Some(ShiftOperator::from_graph(&graph, kind)),
            RolloutMode::Perturbed {
                nominal,
                probability,
                seed: root,
            } => {
                let draw = ResConfig::new(probability, seed::derive(root, &[t as u64]))?;
                let sampled = res_sample(nominal.source(), &draw);
                Some(ShiftOperator::from_graph(&sampled, nominal.kind()))
            }
        };
        if let Some(op) = live {
            if recent.is_empty() {
                // steps before t = 0 only ever meet zero-padded features
                recent.extend(std::iter::repeat_n(op.clone(), order.max(1)));
            }
            recent.push_front(op);
            recent.truncate(order.max(1));
        }
        let seq: Vec<&DMatrix<f64>> = recent.iter().take(order).map(|s| s.matrix()).collect();
        let shifts = match mode {
            RolloutMode::FixedGraph(s) => ShiftSchedule::Fixed(s.matrix()),
            _ => ShiftSchedule::Sequence(&seq),
        };

        let raw = policy.act(&StepInput {
            t,
            state: &state,
            features: &features,
            shifts,
        })?;
        if raw.len() != n {
            return Err(mismatch("policy output agents", n, raw.len()));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction { step: t });
        }
        let u: Vec<[f64; 2]> = raw
            .into_iter()
            .map(|a| saturate(a, cfg.max_accel))
            .collect();

        for i in 0..n {
            for d in 0..2 {
                positions.set(i, t, d, state.positions[i][d]);
                velocities.set(i, t, d, state.velocities[i][d]);
                accelerations.set(i, t, d, u[i][d]);
            }
        }
        graphs.push(graph);
        if t + 1 < horizon {
            state = step_dynamics(&state, &u, cfg.dt)?;
        }
    }
    if !positions.is_finite() || !velocities.is_finite() {
        return Err(Error::NonFinitePrediction { step: horizon - 1 });
    }
    Ok(Trajectory {
        positions,
        velocities,
        accelerations,
        graphs,
        dt: cfg.dt,
        comm_radius: cfg.comm_radius,
        seed: cfg.seed,
    })
}

/// Expert rollout from `initial`.
pub fn simulate_expert(cfg: &FlockConfig, initial: &FlockState, seed: u64) -> Result<Trajectory> {
    let mut traj = closed_loop_rollout(
        &ExpertPolicy { cfg },
        cfg,
        initial,
        RolloutMode::TimeVarying(GsoKind::Adjacency),
    )?;
    traj.seed = seed;
    Ok(traj)
}

/// Example counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 40,
            validation: 8,
            test: 8,
        }
    }
}

/// Seed of example `index` in `split`.
pub fn example_seed(root: u64, split: Split, index: usize) -> u64 {
    seed::derive(root, &[seed::stream::DATASET, split as u64, index as u64])
}

/// One expert episode from a fresh initial state drawn with `seed`.
pub fn generate_example(cfg: &FlockConfig, seed: u64) -> Result<Example> {
    let mut rng = seed::rng(seed, &[seed::stream::FLOCK_INIT]);
    let initial = sample_initial_state(cfg, &mut rng)?;
    Ok(Example::from_trajectory(simulate_expert(
        cfg, &initial, seed,
    )?))
}

/// Expert episodes for every split; examples are generated in parallel and
/// each depends only on its own derived seed.
pub fn generate_dataset(cfg: &FlockConfig, counts: SplitCounts) -> Result<DatasetSplits> {
    cfg.validate()?;
    let make = |split: Split, count: usize| -> Result<Dataset> {
        let examples = (0..count)
            .into_par_iter()
            .map(|i| generate_example(cfg, example_seed(cfg.seed, split, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { examples, split })
    };
    Ok(DatasetSplits {
        train: make(Split::Train, counts.train)?,
        validation: make(Split::Validation, counts.validation)?,
        test: make(Split::Test, counts.test)?,
    })
}
