//! Space-time graph neural networks.
//!
//! Layer `l` maps `F_in` input features to `F_out` output features:
//! `X_l^f = σ(Σ_g Σ_k h_kl^{fg} S^k X_{l-1}^g C^k)`. The generalized network
//! replaces `S^k` with `S_k⋯S_1` from one operator sequence shared by every
//! layer of a forward pass. A node-local affine readout maps the last
//! layer's features to the prediction at every node and time step. Filter
//! layers carry no bias; only the readout does.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::graph::AsOperator;
use crate::seed;
use crate::spacetime::{SpaceTimeSignal, TimeShiftOperator};
use crate::stgf::{diffusion_terms, FilterTaps, ShiftSchedule};

/// Pointwise activation. All three are 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
    /// No activation; the network degenerates to a bank of linear filters.
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Identity => v,
        }
    }

    /// Derivative at pre-activation `v`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Nonlinearity::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    /// Lipschitz constant `C_σ`.
    pub fn lipschitz_constant(self) -> f64 {
        1.0
    }
}

/// Entrywise activation of a signal.
pub fn nonlinearity_apply(z: &SpaceTimeSignal, kind: Nonlinearity) -> SpaceTimeSignal {
    z.map(|v| kind.apply(v))
}

/// Taps `h^{fg}_k` of one layer, stored `[out][in][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    order: usize,
    inputs: usize,
    outputs: usize,
    taps: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(order: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            order,
            inputs,
            outputs,
            taps: vec![0.0; outputs * inputs * (order + 1)],
        }
    }

    pub fn from_vec(order: usize, inputs: usize, outputs: usize, taps: Vec<f64>) -> Result<Self> {
        if taps.len() != outputs * inputs * (order + 1) {
            return Err(mismatch(
                "LayerParams::from_vec",
                outputs * inputs * (order + 1),
                taps.len(),
            ));
        }
        Ok(Self {
            order,
            inputs,
            outputs,
            taps,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    #[inline]
    pub fn index(&self, out: usize, inp: usize, k: usize) -> usize {
        (out * self.inputs + inp) * (self.order + 1) + k
    }

    #[inline]
    pub fn tap(&self, out: usize, inp: usize, k: usize) -> f64 {
        self.taps[self.index(out, inp, k)]
    }

    pub fn set_tap(&mut self, out: usize, inp: usize, k: usize, v: f64) {
        let i = self.index(out, inp, k);
        self.taps[i] = v;
    }

    /// The filter from input feature `inp` to output feature `out`.
    pub fn filter(&self, out: usize, inp: usize) -> FilterTaps {
        let start = self.index(out, inp, 0);
        FilterTaps::new(self.taps[start..start + self.order + 1].to_vec())
            .expect("stored taps are finite")
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }
}

/// Node-local affine map `û = W x + b`, shared across nodes and time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ReadoutParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn new(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(mismatch(
                "ReadoutParams::new",
                format!("{outputs}x{inputs} weight and {outputs} bias"),
                format!("{} weight and {} bias entries", weight.len(), bias.len()),
            ));
        }
        Ok(Self {
            inputs,
            outputs,
            weight,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn apply(&self, x: &SpaceTimeSignal) -> Result<SpaceTimeSignal> {
        if x.features() != self.inputs {
            return Err(mismatch(
                "readout input features",
                self.inputs,
                x.features(),
            ));
        }
        let (n, t, _) = x.shape();
        let mut out = SpaceTimeSignal::zeros(n, t, self.outputs);
        let src = x.data();
        let dst = out.data_mut();
        for p in 0..n * t {
            let xin = &src[p * self.inputs..(p + 1) * self.inputs];
            for o in 0..self.outputs {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = row.iter().zip(xin).map(|(w, v)| w * v).sum();
                dst[p * self.outputs + o] = dot + self.bias[o];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of filter layers `L`.
    pub layers: usize,
    /// Hidden features `F` of every filter layer.
    pub features: usize,
    /// Filter order `K`.
    pub order: usize,
    pub nonlinearity: Nonlinearity,
    pub input_features: usize,
    pub readout_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            features: 16,
            order: 3,
            nonlinearity: Nonlinearity::Tanh,
            input_features: 4,
            readout_features: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.features == 0 {
            return Err(Error::InvalidParameter(
                "model needs at least one layer and one feature".into(),
            ));
        }
        if self.input_features == 0 || self.readout_features == 0 {
            return Err(Error::InvalidParameter(
                "input and readout feature counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn layer_inputs(&self, l: usize) -> usize {
        if l == 0 {
            self.input_features
        } else {
            self.features
        }
    }
}

/// Intermediate values of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Diffusion terms `z_k` of the layer input, `k = 0..=K`.
    pub terms: Vec<SpaceTimeSignal>,
    /// Pre-activation output.
    pub pre: SpaceTimeSignal,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    /// Output of the last filter layer, the readout input.
    pub hidden: SpaceTimeSignal,
}

/// Pre-activation mix `Σ_g Σ_k h^{fg}_k z_k^g` of precomputed diffusion terms.
pub fn mix_terms(terms: &[SpaceTimeSignal], params: &LayerParams) -> Result<SpaceTimeSignal> {
    if terms.len() != params.order + 1 {
        return Err(Error::OrderMismatch {
            expected: params.order,
            actual: terms.len().saturating_sub(1),
        });
    }
    let (n, t, f_in) = terms[0].shape();
    if f_in != params.inputs {
        return Err(mismatch("layer input features", params.inputs, f_in));
    }
    let f_out = params.outputs;
    let mut pre = SpaceTimeSignal::zeros(n, t, f_out);
    let dst = pre.data_mut();
    for (k, z) in terms.iter().enumerate() {
        let src = z.data();
        for p in 0..n * t {
            let zin = &src[p * f_in..(p + 1) * f_in];
            let out = &mut dst[p * f_out..(p + 1) * f_out];
            for (f, o) in out.iter_mut().enumerate() {
                for (g, v) in zin.iter().enumerate() {
                    *o += params.taps[params.index(f, g, k)] * v;
                }
            }
        }
    }
    Ok(pre)
}

fn layer_forward_cached(
    x_prev: &SpaceTimeSignal,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
    params: &LayerParams,
    kind: Nonlinearity,
) -> Result<(SpaceTimeSignal, LayerCache)> {
    if x_prev.features() != params.inputs {
        return Err(mismatch(
            "layer input features",
            params.inputs,
            x_prev.features(),
        ));
    }
    let terms = diffusion_terms(x_prev, shifts, tso, params.order)?;
    let pre = mix_terms(&terms, params)?;
    let out = nonlinearity_apply(&pre, kind);
    Ok((out, LayerCache { terms, pre }))
}

/// One filter layer followed by the activation.
pub fn layer_forward(
    x_prev: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
    params: &LayerParams,
    kind: Nonlinearity,
) -> Result<SpaceTimeSignal> {
    let (out, _) = layer_forward_cached(
        x_prev,
        ShiftSchedule::Fixed(s.operator()),
        tso,
        params,
        kind,
    )?;
    Ok(out)
}

/// A complete network: filter layers plus readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerParams>,
    readout: ReadoutParams,
}

pub const CHECKPOINT_FORMAT: &str = "stgnn-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    model: ModelConfig,
    blocks: Vec<String>,
}

impl Model {
    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| LayerParams::zeros(config.order, config.layer_inputs(l), config.features))
            .collect();
        let readout = ReadoutParams::zeros(config.features, config.readout_features);
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    /// Uniform initialization: taps in `±1/√((K+1)·F_in)`, readout weight
    /// and bias in `±1/√F`.
    pub fn init(config: ModelConfig, root_seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = seed::rng(root_seed, &[seed::stream::PARAM_INIT]);
        let order = model.config.order;
        for layer in &mut model.layers {
            let a = 1.0 / (((order + 1) * layer.inputs) as f64).sqrt();
            layer
                .taps
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-a..=a));
        }
        let a = 1.0 / (model.config.features as f64).sqrt();
        model
            .readout
            .weight
            .iter_mut()
            .chain(model.readout.bias.iter_mut())
            .for_each(|v| *v = rng.random_range(-a..=a));
        Ok(model)
    }

    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<LayerParams>,
        readout: ReadoutParams,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers {
            return Err(mismatch("model layers", config.layers, layers.len()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = (config.order, config.layer_inputs(l), config.features);
            let got = (layer.order, layer.inputs, layer.outputs);
            if want != got {
                return Err(mismatch(
                    "layer shape (order, in, out)",
                    format!("{want:?}"),
                    format!("{got:?}"),
                ));
            }
        }
        if (readout.inputs, readout.outputs) != (config.features, config.readout_features) {
            return Err(mismatch(
                "readout shape",
                format!("{}->{}", config.features, config.readout_features),
                format!("{}->{}", readout.inputs, readout.outputs),
            ));
        }
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn readout(&self) -> &ReadoutParams {
        &self.readout
    }

    pub fn readout_mut(&mut self) -> &mut ReadoutParams {
        &mut self.readout
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    /// Parameter blocks in a fixed order: each layer's taps, then readout
    /// weight, then readout bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().map(|l| l.taps.as_slice()).collect();
        out.push(&self.readout.weight);
        out.push(&self.readout.bias);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .map(|l| l.taps.as_mut_slice())
            .collect();
        out.push(&mut self.readout.weight);
        out.push(&mut self.readout.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn check_input(&self, x: &SpaceTimeSignal) -> Result<()> {
        if x.features() != self.config.input_features {
            return Err(mismatch(
                "model input features",
                self.config.input_features,
                x.features(),
            ));
        }
        Ok(())
    }

    /// Forward pass over any shift schedule, keeping intermediates.
    pub fn forward_cached(
        &self,
        x: &SpaceTimeSignal,
        shifts: ShiftSchedule<'_>,
        tso: &TimeShiftOperator,
    ) -> Result<(SpaceTimeSignal, ForwardCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut hidden = x.clone();
        for layer in &self.layers {
            let (out, cache) =
                layer_forward_cached(&hidden, shifts, tso, layer, self.config.nonlinearity)?;
            caches.push(cache);
            hidden = out;
        }
        let y = self.readout.apply(&hidden)?;
        Ok((
            y,
            ForwardCache {
                layers: caches,
                hidden,
            },
        ))
    }

    pub fn forward(
        &self,
        x: &SpaceTimeSignal,
        shifts: ShiftSchedule<'_>,
        tso: &TimeShiftOperator,
    ) -> Result<SpaceTimeSignal> {
        self.forward_cached(x, shifts, tso).map(|(y, _)| y)
    }

    /// Output of the filter layers only, before the readout.
    pub fn hidden(
        &self,
        x: &SpaceTimeSignal,
        shifts: ShiftSchedule<'_>,
        tso: &TimeShiftOperator,
    ) -> Result<SpaceTimeSignal> {
        self.forward_cached(x, shifts, tso).map(|(_, c)| c.hidden)
    }

    /// Writes `model.toml` plus one binary tensor per parameter block into
    /// `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let name = format!("layer{l}.taps.bin");
            SpaceTimeSignal::from_vec(
                layer.outputs,
                layer.inputs,
                layer.order + 1,
                layer.taps.clone(),
            )?
            .save(dir.join(&name))?;
            names.push(name);
        }
        let r = &self.readout;
        SpaceTimeSignal::from_vec(r.outputs, r.inputs, 1, r.weight.clone())?
            .save(dir.join("readout.weight.bin"))?;
        SpaceTimeSignal::from_vec(r.outputs, 1, 1, r.bias.clone())?
            .save(dir.join("readout.bias.bin"))?;
        names.push("readout.weight.bin".into());
        names.push("readout.bias.bin".into());
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            model: self.config.clone(),
            blocks: names,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("model.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("model.toml"))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format `{}`",
                manifest.format
            )));
        }
        let config = manifest.model;
        config.validate()?;
        if manifest.blocks.len() != config.layers + 2 {
            return Err(Error::Format(
                "checkpoint block list has wrong length".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for (l, name) in manifest.blocks[..config.layers].iter().enumerate() {
            let t = SpaceTimeSignal::load(dir.join(name))?;
            let want = (config.features, config.layer_inputs(l), config.order + 1);
            if t.shape() != want {
                return Err(Error::Format(format!(
                    "block {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            layers.push(LayerParams::from_vec(
                config.order,
                config.layer_inputs(l),
                config.features,
                t.into_vec(),
            )?);
        }
        let w = SpaceTimeSignal::load(dir.join(&manifest.blocks[config.layers]))?;
        let b = SpaceTimeSignal::load(dir.join(&manifest.blocks[config.layers + 1]))?;
        let readout = ReadoutParams::new(
            config.features,
            config.readout_features,
            w.into_vec(),
            b.into_vec(),
        )?;
        Self::from_parts(config, layers, readout)
    }
}

/// Fixed-graph network output `Φ(X; S, ℋ)`.
pub fn model_forward(
    x: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
    model: &Model,
) -> Result<SpaceTimeSignal> {
    model.forward(x, ShiftSchedule::Fixed(s.operator()), tso)
}

/// Generalized network output over the sequence `S_1, …, S_K`, shared by
/// every layer.
pub fn generalized_model_forward<S: AsOperator>(
    x: &SpaceTimeSignal,
    seq: &[S],
    tso: &TimeShiftOperator,
    model: &Model,
) -> Result<SpaceTimeSignal> {
    let ops: Vec<&DMatrix<f64>> = seq.iter().map(|s| s.operator()).collect();
    model.forward(x, ShiftSchedule::Sequence(&ops), tso)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spacetime::TimeShiftMode;
    use crate::stgf::{apply_stgf, filter_norm, LambdaRange};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, n: usize, t: usize, f: usize) -> SpaceTimeSignal {
        SpaceTimeSignal::from_fn(n, t, f, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.5) {
                    m[(i, j)] = 1.0;
                    m[(j, i)] = 1.0;
                }
            }
        }
        m
    }

    fn random_layer(rng: &mut ChaCha8Rng, k: usize, fi: usize, fo: usize) -> LayerParams {
        let taps = (0..fo * fi * (k + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        LayerParams::from_vec(k, fi, fo, taps).unwrap()
    }

    #[test]
    fn activation_values() {
        assert_eq!(Nonlinearity::Tanh.apply(0.0), 0.0);
        assert_eq!(Nonlinearity::Relu.apply(-1.0), 0.0);
        assert_eq!(Nonlinearity::Relu.apply(2.5), 2.5);
        // tanh(1) = (e^2 - 1)/(e^2 + 1), e^2 from its series
        let e2: f64 = (0..40)
            .fold((1.0, 1.0), |(sum, term), n| {
                let next = term * 2.0 / (n + 1) as f64;
                (sum + next, next)
            })
            .0;
        let want = (e2 - 1.0) / (e2 + 1.0);
        assert!((Nonlinearity::Tanh.apply(1.0) - want).abs() < 1e-15);
        assert!((want - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn zero_taps_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random_signal(&mut rng, 5, 4, 3);
        let s = random_adjacency(&mut rng, 5);
        let tso = TimeShiftOperator::zero_pad(4).unwrap();
        for kind in [Nonlinearity::Tanh, Nonlinearity::Relu] {
            let y = layer_forward(&x, &s, &tso, &LayerParams::zeros(2, 3, 4), kind).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_feature_identity_layer_is_the_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_signal(&mut rng, 6, 5, 1);
        let s = random_adjacency(&mut rng, 6);
        let tso = TimeShiftOperator::circulant(5).unwrap();
        let layer = random_layer(&mut rng, 3, 1, 1);
        let y = layer_forward(&x, &s, &tso, &layer, Nonlinearity::Identity).unwrap();
        assert_eq!(y, apply_stgf(&x, &s, &tso, &layer.filter(0, 0)).unwrap());
    }

    #[test]
    fn mixed_layer_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (n, t, k) = (5, 6, 2);
        let x = random_signal(&mut rng, n, t, 2);
        let s = random_adjacency(&mut rng, n);
        let tso = TimeShiftOperator::zero_pad(t).unwrap();
        let c = tso.to_matrix();
        let layer = random_layer(&mut rng, k, 2, 3);
        let pre = layer_forward(&x, &s, &tso, &layer, Nonlinearity::Identity).unwrap();
        for f in 0..3 {
            let mut want = DMatrix::zeros(n, t);
            for g in 0..2 {
                let xg = DMatrix::from_fn(n, t, |i, j| x.get(i, j, g));
                for kk in 0..=k {
                    want += layer.tap(f, g, kk) * s.pow(kk as u32) * &xg * c.pow(kk as u32);
                }
            }
            for i in 0..n {
                for j in 0..t {
                    assert!((pre.get(i, j, f) - want[(i, j)]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_readout_weight_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let config = ModelConfig {
            layers: 1,
            features: 3,
            order: 2,
            nonlinearity: Nonlinearity::Tanh,
            input_features: 2,
            readout_features: 2,
        };
        let mut model = Model::init(config, 5).unwrap();
        model.readout_mut().weight_mut().fill(0.0);
        model
            .readout_mut()
            .bias_mut()
            .copy_from_slice(&[0.25, -4.0]);
        let x = random_signal(&mut rng, 4, 3, 2);
        let y = model_forward(
            &x,
            &random_adjacency(&mut rng, 4),
            &TimeShiftOperator::zero_pad(3).unwrap(),
            &model,
        )
        .unwrap();
        for n in 0..4 {
            for t in 0..3 {
                assert_eq!(y.get(n, t, 0), 0.25);
                assert_eq!(y.get(n, t, 1), -4.0);
            }
        }
    }

    #[test]
    fn node_relabeling_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let config = ModelConfig {
            layers: 2,
            features: 4,
            order: 3,
            nonlinearity: Nonlinearity::Tanh,
            input_features: 3,
            readout_features: 2,
        };
        let model = Model::init(config, 6).unwrap();
        let n = 7;
        let x = random_signal(&mut rng, n, 5, 3);
        let s = random_adjacency(&mut rng, n);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let p = DMatrix::from_fn(n, n, |i, j| f64::from(perm[i] == j));
        let s_perm = &p * &s * p.transpose();
        let tso = TimeShiftOperator::zero_pad(5).unwrap();
        let y = model_forward(&x, &s, &tso, &model).unwrap();
        let y_perm = model_forward(&x.permute_nodes(&perm), &s_perm, &tso, &model).unwrap();
        let want = y.permute_nodes(&perm);
        for (a, b) in y_perm.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_scale_configuration_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let config = ModelConfig {
            layers: 1,
            features: 64,
            order: 3,
            nonlinearity: Nonlinearity::Tanh,
            input_features: 4,
            readout_features: 2,
        };
        let model = Model::init(config, 7).unwrap();
        let x = random_signal(&mut rng, 20, 50, 4);
        let y = model_forward(
            &x,
            &random_adjacency(&mut rng, 20),
            &TimeShiftOperator::zero_pad(50).unwrap(),
            &model,
        )
        .unwrap();
        assert_eq!(y.shape(), (20, 50, 2));
        assert!(y.is_finite());
    }

    #[test]
    fn generalized_network_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let config = ModelConfig {
            layers: 2,
            features: 3,
            order: 3,
            nonlinearity: Nonlinearity::Relu,
            input_features: 2,
            readout_features: 2,
        };
        let model = Model::init(config, 8).unwrap();
        let x = random_signal(&mut rng, 6, 5, 2);
        let s = random_adjacency(&mut rng, 6);
        let tso = TimeShiftOperator::zero_pad(5).unwrap();
        let fixed = model_forward(&x, &s, &tso, &model).unwrap();
        let general = generalized_model_forward(&x, &[&s, &s, &s], &tso, &model).unwrap();
        assert_eq!(fixed, general);

        // all-zero operators: only the k = 0 taps act
        let zero = DMatrix::zeros(6, 6);
        let y = generalized_model_forward(&x, &[&zero, &zero, &zero], &tso, &model).unwrap();
        let mut truncated = model.clone();
        for layer in truncated.layers_mut() {
            for f in 0..layer.outputs() {
                for g in 0..layer.inputs() {
                    for k in 1..=layer.order() {
                        layer.set_tap(f, g, k, 0.0);
                    }
                }
            }
        }
        assert_eq!(y, model_forward(&x, &s, &tso, &truncated).unwrap());
        assert!(generalized_model_forward(&x, &[&s, &s], &tso, &model).is_err());
    }

    #[test]
    fn generalized_network_matches_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (n, t, k) = (5, 6, 2);
        let config = ModelConfig {
            layers: 2,
            features: 2,
            order: k,
            nonlinearity: Nonlinearity::Tanh,
            input_features: 2,
            readout_features: 1,
        };
        let model = Model::init(config, 9).unwrap();
        let seq = [random_adjacency(&mut rng, n), random_adjacency(&mut rng, n)];
        let x = random_signal(&mut rng, n, t, 2);
        let tso = TimeShiftOperator::zero_pad(t).unwrap();
        let c = tso.to_matrix();
        let products = [DMatrix::identity(n, n), seq[0].clone(), &seq[1] * &seq[0]];
        let mut feats: Vec<DMatrix<f64>> = (0..2)
            .map(|g| DMatrix::from_fn(n, t, |i, j| x.get(i, j, g)))
            .collect();
        for layer in model.layers() {
            feats = (0..layer.outputs())
                .map(|f| {
                    let mut acc = DMatrix::zeros(n, t);
                    for (g, xg) in feats.iter().enumerate() {
                        for kk in 0..=k {
                            acc += layer.tap(f, g, kk) * &products[kk] * xg * c.pow(kk as u32);
                        }
                    }
                    acc.map(f64::tanh)
                })
                .collect();
        }
        let r = model.readout();
        let want = r.weight()[0] * &feats[0]
            + r.weight()[1] * &feats[1]
            + DMatrix::from_element(n, t, r.bias()[0]);
        let got = generalized_model_forward(&x, &seq, &tso, &model).unwrap();
        for i in 0..n {
            for j in 0..t {
                assert!((got.get(i, j, 0) - want[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unit_norm_layers_grow_at_most_by_feature_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (n, t, k, f) = (8, 8, 2, 3);
        let s = random_adjacency(&mut rng, n) * 0.3;
        let range = LambdaRange::of_operator(&s).unwrap();
        let tso = TimeShiftOperator::new(t, TimeShiftMode::Circulant).unwrap();
        for trial in 0..20 {
            let mut layer = random_layer(&mut rng, k, f, f);
            for o in 0..f {
                for i in 0..f {
                    let norm = filter_norm(&layer.filter(o, i), range, 64).unwrap();
                    for kk in 0..=k {
                        let v = layer.tap(o, i, kk) / norm;
                        layer.set_tap(o, i, kk, v);
                    }
                }
            }
            let x = random_signal(&mut rng, n, t, f);
            let kind = if trial % 2 == 0 {
                Nonlinearity::Tanh
            } else {
                Nonlinearity::Relu
            };
            let y = layer_forward(&x, &s, &tso, &layer, kind).unwrap();
            assert!(y.norm_sq().sqrt() <= f as f64 * x.norm_sq().sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = Model::init(ModelConfig::default(), 10).unwrap();
        let x = random_signal(&mut rng, 6, 10, 4);
        let s = random_adjacency(&mut rng, 6);
        let tso = TimeShiftOperator::zero_pad(10).unwrap();
        let a = model_forward(&x, &s, &tso, &model).unwrap();
        let b = model_forward(&x, &s, &tso, &model).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(
            ModelConfig {
                layers: 2,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(Model::load(dir.path()).unwrap(), model);
        let manifest = std::fs::read_to_string(dir.path().join("model.toml")).unwrap();
        assert!(manifest.contains(CHECKPOINT_FORMAT));
        std::fs::write(
            dir.path().join("model.toml"),
            manifest.replace(CHECKPOINT_FORMAT, "other/9"),
        )
        .unwrap();
        assert!(Model::load(dir.path()).is_err());
    }

    #[test]
    fn shape_errors() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let x = SpaceTimeSignal::zeros(3, 4, 3);
        let s = DMatrix::zeros(3, 3);
        let tso = TimeShiftOperator::zero_pad(4).unwrap();
        assert!(model_forward(&x, &s, &tso, &model).is_err());
        let x = SpaceTimeSignal::zeros(3, 4, 4);
        assert!(model_forward(&x, &DMatrix::zeros(2, 2), &tso, &model).is_err());
        assert!(model_forward(&x, &s, &TimeShiftOperator::zero_pad(5).unwrap(), &model).is_err());
        assert!(Model::zeros(ModelConfig {
            layers: 0,
            ..ModelConfig::default()
        })
        .is_err());
    }
}
