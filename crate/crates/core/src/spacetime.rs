//! Space-time graph signals and the joint space/time shifts.
//!
//! A [`SpaceTimeSignal`] is an `N × T × F` tensor stored row-major as
//! `[node][time][feature]`. With that layout a space shift is a single
//! `N × N` by `N × (T·F)` product and a time shift moves whole `F`-wide
//! blocks inside each node's row.
//!
//! The time shift operator `C` is `T × T` and right-multiplies the signal.
//! It delays: `(X C)[:, t] = X[:, t - 1]`, with either cyclic wrap-around or
//! zero fill at `t = 0`. It is never materialized.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{mismatch, Error, Result};
use crate::graph::AsOperator;

/// Boundary handling of the one-step delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeShiftMode {
    /// `C` is the cyclic permutation matrix: the last sample wraps to `t = 0`.
    #[default]
    Circulant,
    /// Plain delay with zeros shifted in at `t = 0`.
    ZeroPadDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeShiftOperator {
    horizon: usize,
    mode: TimeShiftMode,
}

impl TimeShiftOperator {
    pub fn new(horizon: usize, mode: TimeShiftMode) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        Ok(Self { horizon, mode })
    }

    pub fn circulant(horizon: usize) -> Result<Self> {
        Self::new(horizon, TimeShiftMode::Circulant)
    }

    pub fn zero_pad(horizon: usize) -> Result<Self> {
        Self::new(horizon, TimeShiftMode::ZeroPadDelay)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mode(&self) -> TimeShiftMode {
        self.mode
    }

    /// Dense `T × T` matrix of `C`, for tests and small oracles only.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let t = self.horizon;
        let mut c = DMatrix::zeros(t, t);
        for col in 0..t {
            match (col, self.mode) {
                (0, TimeShiftMode::Circulant) => c[(t - 1, 0)] = 1.0,
                (0, TimeShiftMode::ZeroPadDelay) => {}
                _ => c[(col - 1, col)] = 1.0,
            }
        }
        c
    }
}

/// `N × T × F` real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeSignal {
    nodes: usize,
    horizon: usize,
    features: usize,
    data: Vec<f64>,
}

impl SpaceTimeSignal {
    pub fn zeros(nodes: usize, horizon: usize, features: usize) -> Self {
        assert!(
            nodes > 0 && horizon > 0 && features > 0,
            "signal dimensions must be positive"
        );
        Self {
            nodes,
            horizon,
            features,
            data: vec![0.0; nodes * horizon * features],
        }
    }

    pub fn from_vec(nodes: usize, horizon: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if nodes == 0 || horizon == 0 || features == 0 {
            return Err(Error::InvalidParameter(format!(
                "signal dimensions must be positive, got {nodes}x{horizon}x{features}"
            )));
        }
        if data.len() != nodes * horizon * features {
            return Err(mismatch(
                "SpaceTimeSignal::from_vec",
                nodes * horizon * features,
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "signal entry {pos} is not finite"
            )));
        }
        Ok(Self {
            nodes,
            horizon,
            features,
            data,
        })
    }

    /// Builds a signal from `f(node, time, feature)`.
    pub fn from_fn(
        nodes: usize,
        horizon: usize,
        features: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut s = Self::zeros(nodes, horizon, features);
        for n in 0..nodes {
            for t in 0..horizon {
                for g in 0..features {
                    s.data[(n * horizon + t) * features + g] = f(n, t, g);
                }
            }
        }
        s
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nodes, self.horizon, self.features)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn idx(&self, n: usize, t: usize, f: usize) -> usize {
        debug_assert!(n < self.nodes && t < self.horizon && f < self.features);
        (n * self.horizon + t) * self.features + f
    }

    #[inline]
    pub fn get(&self, n: usize, t: usize, f: usize) -> f64 {
        self.data[self.idx(n, t, f)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, t: usize, f: usize, v: f64) {
        let i = self.idx(n, t, f);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(mismatch(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    /// Squared Frobenius norm over all entries.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Full tensor inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self - other` as a new signal.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "SpaceTimeSignal::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Single-feature signal holding feature `f`.
    pub fn feature(&self, f: usize) -> Self {
        Self::from_fn(self.nodes, self.horizon, 1, |n, t, _| self.get(n, t, f))
    }

    /// Signal restricted to time steps `start..end`.
    pub fn time_window(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.horizon, "invalid time window");
        Self::from_fn(self.nodes, end - start, self.features, |n, t, f| {
            self.get(n, start + t, f)
        })
    }

    /// Applies the node permutation `perm`: node `i` of the result is node
    /// `perm[i]` of `self`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes);
        Self::from_fn(self.nodes, self.horizon, self.features, |n, t, f| {
            self.get(perm[n], t, f)
        })
    }

    /// Little-endian binary form: `N`, `T`, `F` as `u64` followed by every
    /// entry as `f64` in row-major `[node][time][feature]` order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for dim in [self.nodes, self.horizon, self.features] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("signal dimension overflows usize".into()))?;
        }
        let [n, t, f] = dims;
        let len = n
            .checked_mul(t)
            .and_then(|x| x.checked_mul(f))
            .ok_or_else(|| Error::Format("signal dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 8 {
            return Err(Error::Format(format!(
                "expected {} payload bytes for {n}x{t}x{f}, found {}",
                len * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_vec(n, t, f, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 8);
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn check_horizon(x: &SpaceTimeSignal, tso: &TimeShiftOperator) -> Result<()> {
    if x.horizon != tso.horizon {
        return Err(mismatch("time shift horizon", tso.horizon, x.horizon));
    }
    Ok(())
}

fn check_nodes(x: &SpaceTimeSignal, s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() != x.nodes || s.ncols() != x.nodes {
        return Err(mismatch(
            "space shift",
            format!("{0}x{0} operator", x.nodes),
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    Ok(())
}

/// Moves every node's time series by `steps`: positive delays, negative
/// advances (the adjoint direction).
fn shift_columns(x: &SpaceTimeSignal, steps: isize, mode: TimeShiftMode) -> SpaceTimeSignal {
    let (n, t, f) = x.shape();
    let mut out = SpaceTimeSignal::zeros(n, t, f);
    let ti = t as isize;
    for node in 0..n {
        let row = node * t * f;
        for dst in 0..t {
            let src = dst as isize - steps;
            let src = match mode {
                TimeShiftMode::Circulant => src.rem_euclid(ti) as usize,
                TimeShiftMode::ZeroPadDelay if (0..ti).contains(&src) => src as usize,
                TimeShiftMode::ZeroPadDelay => continue,
            };
            out.data[row + dst * f..row + (dst + 1) * f]
                .copy_from_slice(&x.data[row + src * f..row + (src + 1) * f]);
        }
    }
    out
}

/// `X C^k`: every node's time series delayed by `steps`.
pub fn time_shift(
    x: &SpaceTimeSignal,
    steps: usize,
    tso: &TimeShiftOperator,
) -> Result<SpaceTimeSignal> {
    check_horizon(x, tso)?;
    if steps == 0 {
        return Ok(x.clone());
    }
    Ok(shift_columns(x, steps as isize, tso.mode))
}

/// `X (Cᵀ)^k`, the adjoint of [`time_shift`].
pub fn time_shift_adjoint(
    x: &SpaceTimeSignal,
    steps: usize,
    tso: &TimeShiftOperator,
) -> Result<SpaceTimeSignal> {
    check_horizon(x, tso)?;
    if steps == 0 {
        return Ok(x.clone());
    }
    Ok(shift_columns(x, -(steps as isize), tso.mode))
}

fn multiply_nodes(s: &DMatrix<f64>, x: &SpaceTimeSignal, transpose: bool) -> SpaceTimeSignal {
    let (n, t, f) = x.shape();
    let width = t * f;
    let mut out = SpaceTimeSignal::zeros(n, t, f);
    for i in 0..n {
        let dst = &mut out.data[i * width..(i + 1) * width];
        for j in 0..n {
            let w = if transpose { s[(j, i)] } else { s[(i, j)] };
            if w == 0.0 {
                continue;
            }
            let src = &x.data[j * width..(j + 1) * width];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += w * v;
            }
        }
    }
    out
}

/// `S X`: every time slice and feature multiplied by the shift operator.
pub fn space_shift(x: &SpaceTimeSignal, s: &impl AsOperator) -> Result<SpaceTimeSignal> {
    let s = s.operator();
    check_nodes(x, s)?;
    Ok(multiply_nodes(s, x, false))
}

/// `Sᵀ X`.
pub fn space_shift_transpose(x: &SpaceTimeSignal, s: &impl AsOperator) -> Result<SpaceTimeSignal> {
    let s = s.operator();
    check_nodes(x, s)?;
    Ok(multiply_nodes(s, x, true))
}

/// One joint step `S X C`.
pub fn spacetime_step(
    x: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
) -> Result<SpaceTimeSignal> {
    check_horizon(x, tso)?;
    let shifted = space_shift(x, s)?;
    Ok(shift_columns(&shifted, 1, tso.mode))
}

/// `Sᵀ X Cᵀ`, the adjoint of [`spacetime_step`].
pub fn spacetime_step_adjoint(
    x: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
) -> Result<SpaceTimeSignal> {
    check_horizon(x, tso)?;
    let shifted = space_shift_transpose(x, s)?;
    Ok(shift_columns(&shifted, -1, tso.mode))
}

/// `S^k X C^k`, built by `k` successive joint steps.
pub fn spacetime_diffuse(
    x: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
    k: usize,
) -> Result<SpaceTimeSignal> {
    check_horizon(x, tso)?;
    check_nodes(x, s.operator())?;
    let mut z = x.clone();
    for _ in 0..k {
        z = spacetime_step(&z, s, tso)?;
    }
    Ok(z)
}
