//! Exact gradients, imitation loss, ADAM and the training loop.
//!
//! Backward passes reuse the diffusion terms `z_k` cached by the forward
//! pass. For a filter `Y = Σ_k h_k z_k` with `z_k = S_k z_{k-1} C`:
//!
//! ```text
//! ∂L/∂h_k = ⟨U, z_k⟩
//! ∂L/∂X   = h_0 U + S_1ᵀ(h_1 U + S_2ᵀ(h_2 U + ⋯) Cᵀ) Cᵀ
//! ```
//!
//! where `U = ∂L/∂Y`. The nested form is evaluated from the inside out, so
//! the input gradient costs `K` adjoint steps regardless of the schedule.
//!
//! Training is open loop: each example's recorded expert features are fed
//! through the network and the predictions are regressed onto the expert
//! accelerations. Model selection is closed loop: after every epoch the
//! network flies the validation episodes and the epoch with the lowest
//! mean velocity-variation cost wins (earliest on ties).

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::flocking::{
    closed_loop_rollout, FlockConfig, FlockState, ModelPolicy, RolloutMode, Trajectory,
};
use crate::graph::{AsOperator, GsoKind, ShiftOperator};
use crate::seed;
use crate::spacetime::{spacetime_step_adjoint, SpaceTimeSignal, TimeShiftOperator};
use crate::stgf::{FilterTaps, ShiftSchedule};
use crate::stgnn::{ForwardCache, LayerCache, LayerParams, Model};

fn check_cache(upstream: &SpaceTimeSignal, cache: &[SpaceTimeSignal], order: usize) -> Result<()> {
    if cache.len() != order + 1 || cache.iter().any(|z| !z.same_shape(upstream)) {
        return Err(Error::MissingCache);
    }
    Ok(())
}

/// `r ← S_kᵀ r Cᵀ` applied for `k = K, …, 1`, adding `w_{k-1}` after each.
fn horner_adjoint(
    weighted: Vec<SpaceTimeSignal>,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
) -> Result<SpaceTimeSignal> {
    let mut iter = weighted.into_iter().rev();
    let mut r = iter.next().expect("at least the k = 0 term");
    let order = iter.len();
    for (offset, w) in iter.enumerate() {
        let k = order - offset;
        r = spacetime_step_adjoint(&r, shifts.step(k), tso)?;
        r.axpy(1.0, &w);
    }
    Ok(r)
}

/// Tap and input gradients of a single-feature-map filter over any
/// schedule. `cache` holds the forward diffusion terms `z_0, …, z_K`.
pub fn filter_backward(
    upstream: &SpaceTimeSignal,
    cache: &[SpaceTimeSignal],
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<(Vec<f64>, SpaceTimeSignal)> {
    check_cache(upstream, cache, h.order())?;
    shifts.validate(h.order(), upstream.nodes())?;
    let tap_grads = cache.iter().map(|z| upstream.dot(z)).collect();
    let weighted = h
        .coefficients()
        .iter()
        .map(|&hk| {
            let mut w = upstream.clone();
            w.scale(hk);
            w
        })
        .collect();
    Ok((tap_grads, horner_adjoint(weighted, shifts, tso)?))
}

/// Backward pass of `Y = Σ_k h_k S^k X C^k`.
pub fn stgf_backward(
    upstream: &SpaceTimeSignal,
    cache: &[SpaceTimeSignal],
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<(Vec<f64>, SpaceTimeSignal)> {
    filter_backward(upstream, cache, ShiftSchedule::Fixed(s.operator()), tso, h)
}

/// Backward pass of `Ỹ = Σ_k h_k S_k⋯S_1 X C^k`.
pub fn generalized_stgf_backward<S: AsOperator>(
    upstream: &SpaceTimeSignal,
    cache: &[SpaceTimeSignal],
    seq: &[S],
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<(Vec<f64>, SpaceTimeSignal)> {
    let ops: Vec<&DMatrix<f64>> = seq.iter().map(|s| s.operator()).collect();
    filter_backward(upstream, cache, ShiftSchedule::Sequence(&ops), tso, h)
}

/// Gradients of one mixing layer given the gradient of its activated output.
fn layer_backward(
    d_out: &SpaceTimeSignal,
    cache: &LayerCache,
    params: &LayerParams,
    model: &Model,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
) -> Result<(Vec<f64>, SpaceTimeSignal)> {
    let (k_max, f_in, f_out) = (params.order(), params.inputs(), params.outputs());
    if cache.terms.len() != k_max + 1 || !cache.pre.same_shape(d_out) {
        return Err(Error::MissingCache);
    }
    let kind = model.config().nonlinearity;
    let mut d_pre = d_out.clone();
    for (g, p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g *= kind.derivative(*p);
    }
    let points = d_pre.nodes() * d_pre.horizon();
    let dp = d_pre.data();

    let mut tap_grads = vec![0.0; params.taps().len()];
    let mut weighted = Vec::with_capacity(k_max + 1);
    for (k, z) in cache.terms.iter().enumerate() {
        let zd = z.data();
        let mut w = SpaceTimeSignal::zeros(z.nodes(), z.horizon(), f_in);
        let wd = w.data_mut();
        for p in 0..points {
            let up = &dp[p * f_out..(p + 1) * f_out];
            let zin = &zd[p * f_in..(p + 1) * f_in];
            let win = &mut wd[p * f_in..(p + 1) * f_in];
            for (f, &u) in up.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                for g in 0..f_in {
                    let idx = params.index(f, g, k);
                    tap_grads[idx] += u * zin[g];
                    win[g] += params.taps()[idx] * u;
                }
            }
        }
        weighted.push(w);
    }
    Ok((tap_grads, horner_adjoint(weighted, shifts, tso)?))
}

/// Gradients of every parameter block (in [`Model::blocks`] order) and of
/// the input, given `∂L/∂Y` for the model output.
pub fn model_backward(
    model: &Model,
    cache: &ForwardCache,
    d_output: &SpaceTimeSignal,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
) -> Result<(Vec<Vec<f64>>, SpaceTimeSignal)> {
    if cache.layers.len() != model.layers().len() {
        return Err(Error::MissingCache);
    }
    let r = model.readout();
    let (f, o) = (r.inputs(), r.outputs());
    let hidden = &cache.hidden;
    if hidden.features() != f
        || d_output.features() != o
        || (hidden.nodes(), hidden.horizon()) != (d_output.nodes(), d_output.horizon())
    {
        return Err(Error::MissingCache);
    }
    let points = hidden.nodes() * hidden.horizon();
    let mut d_weight = vec![0.0; f * o];
    let mut d_bias = vec![0.0; o];
    let mut d_hidden = SpaceTimeSignal::zeros(hidden.nodes(), hidden.horizon(), f);
    {
        let (hd, gd, dh) = (hidden.data(), d_output.data(), d_hidden.data_mut());
        for p in 0..points {
            let hrow = &hd[p * f..(p + 1) * f];
            let dhrow = &mut dh[p * f..(p + 1) * f];
            for (oi, &g) in gd[p * o..(p + 1) * o].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                d_bias[oi] += g;
                let wrow = &r.weight()[oi * f..(oi + 1) * f];
                for j in 0..f {
                    d_weight[oi * f + j] += g * hrow[j];
                    dhrow[j] += wrow[j] * g;
                }
            }
        }
    }

    let mut blocks = vec![Vec::new(); model.layers().len()];
    let mut grad = d_hidden;
    for (l, (params, lc)) in model.layers().iter().zip(&cache.layers).enumerate().rev() {
        let (taps, d_in) = layer_backward(&grad, lc, params, model, shifts, tso)?;
        blocks[l] = taps;
        grad = d_in;
    }
    blocks.push(d_weight);
    blocks.push(d_bias);
    Ok((blocks, grad))
}

/// Mean squared error over all entries and its gradient `2(pred - target)/count`.
pub fn mse_loss(
    pred: &SpaceTimeSignal,
    target: &SpaceTimeSignal,
) -> Result<(f64, SpaceTimeSignal)> {
    pred.check_same_shape(target, "mse_loss")?;
    let count = pred.data().len().max(1) as f64;
    let diff = pred.sub(target)?;
    let loss = diff.norm_sq() / count;
    let mut grad = diff;
    grad.scale(2.0 / count);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for each parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(config: AdamConfig, model: &Model) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|b| b.len()).collect();
        Self::new(config, &sizes)
    }

    fn check(&self, params: &[&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(mismatch(
                "parameter blocks",
                self.first_moment.len(),
                grads.len(),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(mismatch("parameter block size", m.len(), g.len()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    mut params: Vec<&mut [f64]>,
    grads: &[Vec<f64>],
) -> Result<()> {
    state.check(&params, grads)?;
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (b, block) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first_moment[b], &mut state.second_moment[b]);
        for (i, p) in block.iter_mut().enumerate() {
            let g = grads[b][i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Velocity-variation cost `Σ_t Σ_i ‖v_i(t) - v̄(t)‖²` of one episode.
pub fn validation_cost(trajectory: &Trajectory) -> f64 {
    (0..trajectory.horizon())
        .map(|t| trajectory.velocity_cost_at(t))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One expert episode and its imitation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub trajectory: Trajectory,
    /// Raw `(p, v)` features, `N × T × 4`.
    pub input: SpaceTimeSignal,
    /// Expert accelerations, `N × T × 2`.
    pub target: SpaceTimeSignal,
}

impl Example {
    pub fn from_trajectory(trajectory: Trajectory) -> Self {
        let input = trajectory.features();
        let target = trajectory.accelerations.clone();
        Self {
            trajectory,
            input,
            target,
        }
    }

    pub fn initial_state(&self) -> FlockState {
        self.trajectory.state_at(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    train: usize,
    validation: usize,
    test: usize,
}

pub const DATASET_FORMAT: &str = "stgnn-dataset/1";

impl DatasetSplits {
    pub fn splits(&self) -> [&Dataset; 3] {
        [&self.train, &self.validation, &self.test]
    }

    /// One trajectory directory per example under `dir/<split>/<index>`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for set in self.splits() {
            for (i, ex) in set.examples.iter().enumerate() {
                ex.trajectory
                    .save(dir.join(set.split.name()).join(format!("{i:05}")))?;
            }
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            train: self.train.examples.len(),
            validation: self.validation.examples.len(),
            test: self.test.examples.len(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("dataset.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("dataset.toml"))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unsupported dataset format `{}`",
                m.format
            )));
        }
        let read = |split: Split, count: usize| -> Result<Dataset> {
            let examples = (0..count)
                .map(|i| {
                    Trajectory::load(dir.join(split.name()).join(format!("{i:05}")))
                        .map(Example::from_trajectory)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset { examples, split })
        };
        Ok(Self {
            train: read(Split::Train, m.train)?,
            validation: read(Split::Validation, m.validation)?,
            test: read(Split::Test, m.test)?,
        })
    }
}

/// Which operators the network sees during training and validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// One operator per episode: the mean of its communication graphs.
    #[default]
    Average,
    /// The live communication graphs, newest first over a `K + 1` window.
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub graph_mode: GraphMode,
    pub gso_kind: GsoKind,
    /// Visit training examples in a fresh random order every epoch.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            adam: AdamConfig::default(),
            graph_mode: GraphMode::Average,
            gso_kind: GsoKind::Laplacian,
            shuffle: true,
            seed: 0,
        }
    }
}

/// MSE and gradients of one example, evaluated open loop.
pub fn example_gradient(
    model: &Model,
    example: &Example,
    mode: GraphMode,
    kind: GsoKind,
) -> Result<(f64, Vec<Vec<f64>>)> {
    match mode {
        GraphMode::Average => {
            let s = example.trajectory.average_gso(kind)?;
            let tso = TimeShiftOperator::zero_pad(example.input.horizon())?;
            let shifts = ShiftSchedule::Fixed(s.matrix());
            let (y, cache) = model.forward_cached(&example.input, shifts, &tso)?;
            let (loss, d_y) = mse_loss(&y, &example.target)?;
            let (grads, _) = model_backward(model, &cache, &d_y, shifts, &tso)?;
            Ok((loss, grads))
        }
        GraphMode::TimeVarying => time_varying_gradient(model, example, kind),
    }
}

/// Per-step windows of `K + 1` columns with the live graph sequence; each
/// window is scored on its newest column only, matching the rollout.
fn time_varying_gradient(
    model: &Model,
    example: &Example,
    kind: GsoKind,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (n, horizon, f_in) = example.input.shape();
    let order = model.order();
    let w = order + 1;
    let tso = TimeShiftOperator::zero_pad(w)?;
    let gsos: Vec<ShiftOperator> = example.trajectory.gsos(kind);
    let outs = example.target.features();
    let scale = 1.0 / (horizon * n * outs) as f64;

    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = model.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
    for t in 0..horizon {
        let pad = w.saturating_sub(t + 1);
        let x = SpaceTimeSignal::from_fn(n, w, f_in, |node, col, f| {
            if col < pad {
                0.0
            } else {
                example.input.get(node, t + col + 1 - w, f)
            }
        });
        let seq: Vec<&DMatrix<f64>> = (0..order)
            .map(|k| gsos[t.saturating_sub(k)].matrix())
            .collect();
        let shifts = ShiftSchedule::Sequence(&seq);
        let (y, cache) = model.forward_cached(&x, shifts, &tso)?;
        let mut d_y = SpaceTimeSignal::zeros(n, w, outs);
        for node in 0..n {
            for o in 0..outs {
                let diff = y.get(node, w - 1, o) - example.target.get(node, t, o);
                total += diff * diff * scale;
                d_y.set(node, w - 1, o, 2.0 * diff * scale);
            }
        }
        let (grads, _) = model_backward(model, &cache, &d_y, shifts, &tso)?;
        for (a, g) in acc.iter_mut().zip(grads) {
            a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
    }
    Ok((total, acc))
}

/// Closed-loop cost of `model` on one episode's initial state.
pub fn rollout_cost(
    model: &Model,
    example: &Example,
    flock: &FlockConfig,
    mode: GraphMode,
    kind: GsoKind,
) -> Result<f64> {
    let policy = ModelPolicy { model };
    let init = example.initial_state();
    let traj = match mode {
        GraphMode::Average => {
            let s = example.trajectory.average_gso(kind)?;
            closed_loop_rollout(&policy, flock, &init, RolloutMode::FixedGraph(&s))?
        }
        GraphMode::TimeVarying => {
            closed_loop_rollout(&policy, flock, &init, RolloutMode::TimeVarying(kind))?
        }
    };
    Ok(validation_cost(&traj))
}

/// Mean closed-loop cost over a dataset. Rollouts run in parallel; the sum
/// is taken in example order.
pub fn mean_rollout_cost(
    model: &Model,
    data: &Dataset,
    flock: &FlockConfig,
    mode: GraphMode,
    kind: GsoKind,
) -> Result<f64> {
    if data.examples.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot score an empty dataset".into(),
        ));
    }
    let costs = data
        .examples
        .par_iter()
        .map(|ex| rollout_cost(model, ex, flock, mode, kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub validation_cost: f64,
    pub selected: bool,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,validation_cost,selected_flag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{}\n",
                r.epoch,
                r.train_mse,
                r.validation_cost,
                u8::from(r.selected)
            ));
        }
        out
    }

    pub fn selected_epoch(&self) -> Option<usize> {
        self.rows.iter().find(|r| r.selected).map(|r| r.epoch)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<(usize, f64, Model)>,
    pub report: LossReport,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerManifest {
    format: String,
    epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_cost: Option<f64>,
    report: LossReport,
}

pub const TRAINER_FORMAT: &str = "stgnn-trainer/1";

fn moments_to_signal(blocks: &[Vec<f64>]) -> Result<SpaceTimeSignal> {
    let flat: Vec<f64> = blocks.iter().flatten().copied().collect();
    SpaceTimeSignal::from_vec(1, 1, flat.len(), flat)
}

fn signal_to_moments(s: SpaceTimeSignal, like: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let total: usize = like.iter().map(Vec::len).sum();
    if s.data().len() != total {
        return Err(Error::Format(
            "optimizer moments do not match the model".into(),
        ));
    }
    let mut data = s.into_vec().into_iter();
    Ok(like
        .iter()
        .map(|b| data.by_ref().take(b.len()).collect())
        .collect())
}

impl TrainerState {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        let adam = AdamState::for_model(adam, &model);
        Self {
            model,
            adam,
            epoch: 0,
            best: None,
            report: LossReport::default(),
        }
    }

    /// The selected model: the best epoch so far, or the current one
    /// before any epoch has run.
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.model.save(dir.join("current"))?;
        if let Some((_, _, best)) = &self.best {
            best.save(dir.join("best"))?;
        }
        moments_to_signal(&self.adam.first_moment)?.save(dir.join("adam.m.bin"))?;
        moments_to_signal(&self.adam.second_moment)?.save(dir.join("adam.v.bin"))?;
        let manifest = TrainerManifest {
            format: TRAINER_FORMAT.into(),
            epoch: self.epoch,
            adam: self.adam.config,
            adam_step: self.adam.step,
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_cost: self.best.as_ref().map(|b| b.1),
            report: self.report.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("trainer.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("trainer.toml"))?;
        let m: TrainerManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != TRAINER_FORMAT {
            return Err(Error::Format(format!(
                "unsupported trainer format `{}`",
                m.format
            )));
        }
        let model = Model::load(dir.join("current"))?;
        let mut adam = AdamState::for_model(m.adam, &model);
        adam.step = m.adam_step;
        adam.first_moment = signal_to_moments(
            SpaceTimeSignal::load(dir.join("adam.m.bin"))?,
            &adam.first_moment,
        )?;
        adam.second_moment = signal_to_moments(
            SpaceTimeSignal::load(dir.join("adam.v.bin"))?,
            &adam.second_moment,
        )?;
        let best = match (m.best_epoch, m.best_cost) {
            (Some(e), Some(c)) => Some((e, c, Model::load(dir.join("best"))?)),
            (None, None) => None,
            _ => return Err(Error::Format("incomplete best-epoch record".into())),
        };
        Ok(Self {
            model,
            adam,
            epoch: m.epoch,
            best,
            report: m.report,
        })
    }
}

/// Runs epochs until `state.epoch == cfg.epochs`.
pub fn train_until(
    state: &mut TrainerState,
    data: &DatasetSplits,
    flock: &FlockConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    train_epochs(
        state,
        data,
        flock,
        cfg,
        cfg.epochs.saturating_sub(state.epoch),
    )
}

/// Runs `count` more epochs. Each epoch is one pass of per-example ADAM
/// updates followed by closed-loop validation.
pub fn train_epochs(
    state: &mut TrainerState,
    data: &DatasetSplits,
    flock: &FlockConfig,
    cfg: &TrainConfig,
    count: usize,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    if data.train.examples.is_empty() || data.validation.examples.is_empty() {
        return Err(Error::InvalidParameter(
            "training needs at least one training and one validation example".into(),
        ));
    }
    for _ in 0..count {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..data.train.examples.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut seed::rng(
                cfg.seed,
                &[seed::stream::SHUFFLE, epoch as u64],
            ));
        }
        let mut sum = 0.0;
        for &i in &order {
            let (loss, grads) = example_gradient(
                &state.model,
                &data.train.examples[i],
                cfg.graph_mode,
                cfg.gso_kind,
            )?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            sum += loss;
            adam_step(&mut state.adam, state.model.blocks_mut(), &grads)?;
        }
        let train_mse = sum / order.len() as f64;
        let validation = match mean_rollout_cost(
            &state.model,
            &data.validation,
            flock,
            cfg.graph_mode,
            cfg.gso_kind,
        ) {
            Ok(c) if c.is_finite() => c,
            Ok(_) | Err(Error::NonFinitePrediction { .. }) => {
                return Err(Error::Divergence { epoch })
            }
            Err(e) => return Err(e),
        };
        let improved = state.best.as_ref().is_none_or(|(_, c, _)| validation < *c);
        if improved {
            state.best = Some((epoch, validation, state.model.clone()));
        }
        let selected = state.best.as_ref().map(|b| b.0);
        state.report.rows.push(LossRow {
            epoch,
            train_mse,
            validation_cost: validation,
            selected: false,
        });
        for row in &mut state.report.rows {
            row.selected = Some(row.epoch) == selected;
        }
        state.epoch = epoch;
    }
    Ok(())
}

/// Trains a copy of `model` for `cfg.epochs` epochs and returns the epoch
/// with the lowest mean validation cost. With zero epochs the initial model
/// is returned with an empty report.
pub fn train(
    model: &Model,
    data: &DatasetSplits,
    flock: &FlockConfig,
    cfg: &TrainConfig,
) -> Result<(Model, LossReport)> {
    let mut state = TrainerState::new(model.clone(), cfg.adam);
    train_until(&mut state, data, flock, cfg)?;
    Ok((state.best_model().clone(), state.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flocking::{generate_dataset, SplitCounts};
    use crate::stgf::{apply_filter, diffusion_terms};
    use crate::stgnn::{ModelConfig, Nonlinearity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, n: usize, t: usize, f: usize) -> SpaceTimeSignal {
        SpaceTimeSignal::from_fn(n, t, f, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_operator(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.6) {
                    let w = rng.random_range(0.2..0.8);
                    m[(i, j)] = w;
                    m[(j, i)] = w;
                }
            }
        }
        m
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn filter_backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = random_signal(&mut rng, 4, 5, 1);
        let s = random_operator(&mut rng, 4);
        let tso = TimeShiftOperator::zero_pad(5).unwrap();
        let h = FilterTaps::new(vec![0.5, -1.0, 0.25]).unwrap();
        let cache = diffusion_terms(&x, ShiftSchedule::Fixed(&s), &tso, 2).unwrap();
        let zero = SpaceTimeSignal::zeros(4, 5, 1);
        let (g, dx) = stgf_backward(&zero, &cache, &s, &tso, &h).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));

        let up = random_signal(&mut rng, 4, 5, 1);
        let h0 = FilterTaps::new(vec![1.7]).unwrap();
        let (g, dx) = stgf_backward(&up, &[x.clone()], &s, &tso, &h0).unwrap();
        assert_eq!(g, vec![up.dot(&x)]);
        let mut want = up.clone();
        want.scale(1.7);
        assert_eq!(dx, want);

        assert!(matches!(
            stgf_backward(&up, &cache[..2], &s, &tso, &h),
            Err(Error::MissingCache)
        ));
    }

    #[test]
    fn generalized_backward_with_repeated_operator_matches_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_signal(&mut rng, 5, 6, 2);
        let s = random_operator(&mut rng, 5);
        let tso = TimeShiftOperator::circulant(6).unwrap();
        let h = FilterTaps::new(vec![0.3, 0.7, -0.2, 0.1]).unwrap();
        let up = random_signal(&mut rng, 5, 6, 2);
        let cache = diffusion_terms(&x, ShiftSchedule::Fixed(&s), &tso, 3).unwrap();
        let a = stgf_backward(&up, &cache, &s, &tso, &h).unwrap();
        let b = generalized_stgf_backward(&up, &cache, &[&s, &s, &s], &tso, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for generalized in [false, true] {
            let (n, t, k) = (4, 5, 3);
            let x = random_signal(&mut rng, n, t, 1);
            let seq: Vec<DMatrix<f64>> = (0..k).map(|_| random_operator(&mut rng, n)).collect();
            let refs: Vec<&DMatrix<f64>> = seq.iter().collect();
            let shifts = if generalized {
                ShiftSchedule::Sequence(&refs)
            } else {
                ShiftSchedule::Fixed(&seq[0])
            };
            let tso = TimeShiftOperator::zero_pad(t).unwrap();
            let h =
                FilterTaps::new((0..=k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let r = random_signal(&mut rng, n, t, 1);
            let loss = |x: &SpaceTimeSignal, h: &FilterTaps| {
                r.dot(&apply_filter(x, shifts, &tso, h).unwrap())
            };
            let cache = diffusion_terms(&x, shifts, &tso, k).unwrap();
            let (gh, gx) = filter_backward(&r, &cache, shifts, &tso, &h).unwrap();
            for kk in 0..=k {
                let fd = central(
                    |v| {
                        let mut c = h.coefficients().to_vec();
                        c[kk] = v;
                        loss(&x, &FilterTaps::new(c).unwrap())
                    },
                    h.coefficients()[kk],
                );
                assert!(rel_err(gh[kk], fd) <= 1e-5, "tap {kk}: {} vs {fd}", gh[kk]);
            }
            for idx in 0..x.data().len() {
                let fd = central(
                    |v| {
                        let mut xp = x.clone();
                        xp.data_mut()[idx] = v;
                        loss(&xp, &h)
                    },
                    x.data()[idx],
                );
                assert!(rel_err(gx.data()[idx], fd) <= 1e-5);
            }
        }
    }

    fn small_model(rng_seed: u64, kind: Nonlinearity) -> Model {
        Model::init(
            ModelConfig {
                layers: 2,
                features: 3,
                order: 2,
                nonlinearity: kind,
                input_features: 2,
                readout_features: 2,
            },
            rng_seed,
        )
        .unwrap()
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for (generalized, kind) in [
            (false, Nonlinearity::Tanh),
            (true, Nonlinearity::Tanh),
            (true, Nonlinearity::Identity),
        ] {
            let model = small_model(44, kind);
            let (n, t) = (4, 5);
            let x = random_signal(&mut rng, n, t, 2);
            let r = random_signal(&mut rng, n, t, 2);
            let seq: Vec<DMatrix<f64>> = (0..2).map(|_| random_operator(&mut rng, n)).collect();
            let refs: Vec<&DMatrix<f64>> = seq.iter().collect();
            let shifts = if generalized {
                ShiftSchedule::Sequence(&refs)
            } else {
                ShiftSchedule::Fixed(&seq[0])
            };
            let tso = TimeShiftOperator::zero_pad(t).unwrap();
            let loss = |m: &Model, x: &SpaceTimeSignal| r.dot(&m.forward(x, shifts, &tso).unwrap());
            let (y, cache) = model.forward_cached(&x, shifts, &tso).unwrap();
            assert_eq!(y, model.forward(&x, shifts, &tso).unwrap());
            let (grads, gx) = model_backward(&model, &cache, &r, shifts, &tso).unwrap();
            for (b, g) in grads.iter().enumerate() {
                for i in 0..g.len() {
                    let fd = central(
                        |v| {
                            let mut m = model.clone();
                            m.blocks_mut()[b][i] = v;
                            loss(&m, &x)
                        },
                        model.blocks()[b][i],
                    );
                    assert!(
                        rel_err(g[i], fd) <= 1e-5,
                        "block {b} coord {i}: {} vs {fd}",
                        g[i]
                    );
                }
            }
            for i in 0..x.data().len() {
                let fd = central(
                    |v| {
                        let mut xp = x.clone();
                        xp.data_mut()[i] = v;
                        loss(&model, &xp)
                    },
                    x.data()[i],
                );
                assert!(rel_err(gx.data()[i], fd) <= 1e-5);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let a = random_signal(&mut rng, 3, 4, 2);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((mse_loss(&b, &a).unwrap().0 - 1.0).abs() < 1e-15);
        let c = random_signal(&mut rng, 3, 4, 2);
        let (loss, grad) = mse_loss(&a, &c).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            for t in 0..4 {
                for f in 0..2 {
                    want += (a.get(i, t, f) - c.get(i, t, f)).powi(2);
                }
            }
        }
        assert!((loss - want / 24.0).abs() < 1e-15);
        assert!((grad.get(1, 2, 1) - 2.0 * (a.get(1, 2, 1) - c.get(1, 2, 1)) / 24.0).abs() < 1e-15);
        assert!(mse_loss(&a, &SpaceTimeSignal::zeros(3, 4, 1)).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(cfg, &[2]);
        adam_step(&mut st, vec![&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);

        // first step: m̂ = g, v̂ = g², so the move is lr·g/(|g| + ε)
        let mut p = vec![1.0];
        let mut st = AdamState::new(cfg, &[1]);
        adam_step(&mut st, vec![&mut p], &[vec![3.0]]).unwrap();
        assert!((p[0] - (1.0 - 5e-4 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);

        let f = |x: f64| (x - 2.0).powi(2);
        let mut x = vec![0.0];
        let mut st = AdamState::new(cfg, &[1]);
        let start = f(x[0]);
        for _ in 0..2 {
            let g = 2.0 * (x[0] - 2.0);
            adam_step(&mut st, vec![&mut x], &[vec![g]]).unwrap();
        }
        assert!(f(x[0]) < start);
        assert!(adam_step(&mut st, vec![&mut x], &[vec![1.0, 2.0]]).is_err());
    }

    fn constant_velocity_trajectory(vels: &[[f64; 2]], horizon: usize) -> Trajectory {
        let n = vels.len();
        Trajectory {
            positions: SpaceTimeSignal::zeros(n, horizon, 2),
            velocities: SpaceTimeSignal::from_fn(n, horizon, 2, |i, _, d| vels[i][d]),
            accelerations: SpaceTimeSignal::zeros(n, horizon, 2),
            graphs: vec![crate::graph::Graph::new(n).unwrap(); horizon],
            dt: 0.01,
            comm_radius: 2.0,
            seed: 0,
        }
    }

    #[test]
    fn validation_cost_examples() {
        assert_eq!(
            validation_cost(&constant_velocity_trajectory(&[[0.3, 1.0]; 4], 7)),
            0.0
        );
        let w = [0.6, -0.8];
        let traj = constant_velocity_trajectory(&[w, [-w[0], -w[1]]], 9);
        assert!((validation_cost(&traj) - 2.0 * 9.0 * 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (n, t) = (5, 6);
        let mut traj = constant_velocity_trajectory(&[[0.0; 2]; 5], t);
        traj.velocities = random_signal(&mut rng, n, t, 2);
        let mut want = 0.0;
        for tt in 0..t {
            for i in 0..n {
                for d in 0..2 {
                    let mean: f64 =
                        (0..n).map(|j| traj.velocities.get(j, tt, d)).sum::<f64>() / n as f64;
                    want += (traj.velocities.get(i, tt, d) - mean).powi(2);
                }
            }
        }
        let got = validation_cost(&traj);
        assert!((got - want).abs() < 1e-12);
        let mut shifted = traj.clone();
        shifted.velocities = traj.velocities.map(|v| v + 3.25);
        assert!((validation_cost(&shifted) - got).abs() < 1e-10);
    }

    fn tiny_data(train: usize) -> (FlockConfig, DatasetSplits) {
        let flock = FlockConfig {
            agent_count: 6,
            horizon: 30,
            seed: 5,
            ..FlockConfig::default()
        };
        let data = generate_dataset(
            &flock,
            SplitCounts {
                train,
                validation: 2,
                test: 1,
            },
        )
        .unwrap();
        (flock, data)
    }

    #[test]
    fn time_varying_gradient_matches_finite_differences() {
        let (_, data) = tiny_data(1);
        let model = Model::init(
            ModelConfig {
                features: 3,
                order: 2,
                ..ModelConfig::default()
            },
            2,
        )
        .unwrap();
        let ex = &data.train.examples[0];
        let (_, grads) =
            example_gradient(&model, ex, GraphMode::TimeVarying, GsoKind::Adjacency).unwrap();
        for (b, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(5) {
                let fd = central(
                    |v| {
                        let mut m = model.clone();
                        m.blocks_mut()[b][i] = v;
                        example_gradient(&m, ex, GraphMode::TimeVarying, GsoKind::Adjacency)
                            .unwrap()
                            .0
                    },
                    model.blocks()[b][i],
                );
                // the loss sums many windows, so allow for its roundoff
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * g[i].abs().max(fd.abs()) + 1e-7,
                    "block {b} coord {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn zero_epochs_return_initial_model() {
        let (flock, data) = tiny_data(1);
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, report) = train(&model, &data, &flock, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(report.rows.is_empty());
    }

    #[test]
    fn overfits_two_examples() {
        // Expert accelerations carry clipped collision spikes that a
        // node-shared filter cannot memorize, so regress onto a realizable
        // linear teacher: the same architecture family, different weights.
        let (flock, mut data) = tiny_data(2);
        let cfg = TrainConfig {
            epochs: 200,
            adam: AdamConfig {
                learning_rate: 5e-3,
                ..AdamConfig::default()
            },
            gso_kind: GsoKind::Laplacian,
            ..TrainConfig::default()
        };
        let linear = |features| ModelConfig {
            features,
            nonlinearity: Nonlinearity::Identity,
            ..ModelConfig::default()
        };
        let teacher = Model::init(linear(4), 30).unwrap();
        for ex in &mut data.train.examples {
            let s = ex.trajectory.average_gso(cfg.gso_kind).unwrap();
            let tso = TimeShiftOperator::zero_pad(ex.input.horizon()).unwrap();
            ex.target = teacher
                .forward(&ex.input, ShiftSchedule::Fixed(s.matrix()), &tso)
                .unwrap();
        }
        let model = Model::init(linear(8), 3).unwrap();
        let initial: f64 = data
            .train
            .examples
            .iter()
            .map(|ex| {
                example_gradient(&model, ex, cfg.graph_mode, cfg.gso_kind)
                    .unwrap()
                    .0
            })
            .sum::<f64>()
            / 2.0;
        let mut state = TrainerState::new(model, cfg.adam);
        train_until(&mut state, &data, &flock, &cfg).unwrap();
        let last = state.report.rows.last().unwrap().train_mse;
        assert!(last < 1e-3 * initial, "{last} vs {initial}");
        assert_eq!(state.report.rows.iter().filter(|r| r.selected).count(), 1);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (flock, data) = tiny_data(2);
        let model = Model::init(
            ModelConfig {
                features: 4,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let mut whole = TrainerState::new(model.clone(), cfg.adam);
        train_until(&mut whole, &data, &flock, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut part = TrainerState::new(model, cfg.adam);
        train_epochs(&mut part, &data, &flock, &cfg, 2).unwrap();
        part.save(dir.path()).unwrap();
        let mut resumed = TrainerState::load(dir.path()).unwrap();
        assert_eq!(resumed, part);
        train_until(&mut resumed, &data, &flock, &cfg).unwrap();
        assert_eq!(resumed, whole);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (flock, data) = tiny_data(1);
        let mut model = Model::init(ModelConfig::default(), 5).unwrap();
        model.readout_mut().bias_mut()[0] = f64::NAN;
        let err = train(
            &model,
            &data,
            &flock,
            &TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }));
    }

    #[test]
    fn dataset_round_trip() {
        let (_, data) = tiny_data(2);
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(DatasetSplits::load(dir.path()).unwrap(), data);
    }

    #[test]
    fn loss_report_csv() {
        let report = LossReport {
            rows: vec![
                LossRow {
                    epoch: 1,
                    train_mse: 0.5,
                    validation_cost: 2.0,
                    selected: false,
                },
                LossRow {
                    epoch: 2,
                    train_mse: 0.25,
                    validation_cost: 1.0,
                    selected: true,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("epoch,train_mse,validation_cost,selected_flag\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with(",1"));
        assert_eq!(report.selected_epoch(), Some(2));
    }
}
