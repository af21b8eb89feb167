//! Space-time graph filters.
//!
//! The fixed-graph filter is `Y = Σ_k h_k S^k X C^k`; the generalized
//! filter runs over a sequence of operators, `Ỹ = Σ_k h_k S_k⋯S_1 X C^k`.
//! Both accumulate the diffusion terms with the recursion
//! `z_0 = X, z_k = S_k z_{k-1} C` and share one code path, so a sequence of
//! identical operators reproduces the fixed filter bit for bit.
//!
//! The generalized frequency response of taps `h` at graph frequencies
//! `λ = [λ_1, …, λ_K]` and time frequency `ω` is
//! `h(λ, ω) = Σ_k h_k e^{jkω} Π_{κ≤k} λ_κ` with `λ_0 = 1`. It is affine in
//! every `λ_k` separately, which the Lipschitz analysis below relies on.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{mismatch, Error, Result};
use crate::graph::AsOperator;
use crate::spacetime::{spacetime_step, SpaceTimeSignal, TimeShiftOperator};

/// Filter coefficients `[h_0, …, h_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTaps {
    coefficients: Vec<f64>,
}

impl FilterTaps {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidParameter(
                "a filter needs at least one tap".into(),
            ));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("filter taps must be finite".into()));
        }
        Ok(Self { coefficients })
    }

    /// Filter order `K` (number of taps minus one).
    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.coefficients.iter().map(|c| c * factor).collect())
    }

    /// `K` on the first line, then one coefficient per line with 17
    /// significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.order());
        for c in &self.coefficients {
            let _ = writeln!(out, "{c:.16e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, order) = tokens.next().ok_or(Error::Parse {
            line: 1,
            message: "missing filter order".into(),
        })?;
        let order: usize = order.parse().map_err(|e| Error::Parse {
            line,
            message: format!("bad filter order: {e}"),
        })?;
        let coefficients = tokens
            .map(|(line, t)| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("bad coefficient `{t}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if coefficients.len() != order + 1 {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "order {order} needs {} coefficients, found {}",
                    order + 1,
                    coefficients.len()
                ),
            });
        }
        Self::new(coefficients)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Operators used at each diffusion step.
#[derive(Debug, Clone, Copy)]
pub enum ShiftSchedule<'a> {
    /// The same operator at every step.
    Fixed(&'a DMatrix<f64>),
    /// `S_1, …, S_K`; step `k` uses `S_k`.
    Sequence(&'a [&'a DMatrix<f64>]),
}

impl<'a> ShiftSchedule<'a> {
    /// Operator of step `k`, 1-based.
    pub fn step(&self, k: usize) -> &'a DMatrix<f64> {
        match *self {
            ShiftSchedule::Fixed(s) => s,
            ShiftSchedule::Sequence(seq) => seq[k - 1],
        }
    }

    /// Checks that the schedule covers `order` steps on `nodes` nodes.
    pub fn validate(&self, order: usize, nodes: usize) -> Result<()> {
        let ops: Vec<&DMatrix<f64>> = match *self {
            ShiftSchedule::Fixed(s) => vec![s],
            ShiftSchedule::Sequence(seq) => {
                if seq.len() != order {
                    return Err(Error::OrderMismatch {
                        expected: order,
                        actual: seq.len(),
                    });
                }
                seq.to_vec()
            }
        };
        for s in ops {
            if s.nrows() != nodes || s.ncols() != nodes {
                return Err(mismatch(
                    "shift schedule",
                    format!("{nodes}x{nodes}"),
                    format!("{}x{}", s.nrows(), s.ncols()),
                ));
            }
        }
        Ok(())
    }
}

/// Diffusion terms `[z_0, …, z_K]` with `z_k = S_k z_{k-1} C`.
pub fn diffusion_terms(
    x: &SpaceTimeSignal,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
    order: usize,
) -> Result<Vec<SpaceTimeSignal>> {
    shifts.validate(order, x.nodes())?;
    if x.horizon() != tso.horizon() {
        return Err(mismatch("filter horizon", tso.horizon(), x.horizon()));
    }
    let mut terms = Vec::with_capacity(order + 1);
    terms.push(x.clone());
    for k in 1..=order {
        let next = spacetime_step(&terms[k - 1], shifts.step(k), tso)?;
        terms.push(next);
    }
    Ok(terms)
}

fn accumulate(terms: &[SpaceTimeSignal], h: &FilterTaps) -> SpaceTimeSignal {
    let (n, t, f) = terms[0].shape();
    let mut y = SpaceTimeSignal::zeros(n, t, f);
    for (hk, z) in h.coefficients().iter().zip(terms) {
        y.axpy(*hk, z);
    }
    y
}

/// Applies the filter over an arbitrary schedule.
pub fn apply_filter(
    x: &SpaceTimeSignal,
    shifts: ShiftSchedule<'_>,
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<SpaceTimeSignal> {
    let terms = diffusion_terms(x, shifts, tso, h.order())?;
    Ok(accumulate(&terms, h))
}

/// `Y = Σ_k h_k S^k X C^k`, applied to every feature of `x`.
pub fn apply_stgf(
    x: &SpaceTimeSignal,
    s: &impl AsOperator,
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<SpaceTimeSignal> {
    apply_filter(x, ShiftSchedule::Fixed(s.operator()), tso, h)
}

/// `Ỹ = Σ_k h_k S_k⋯S_1 X C^k`. The sequence holds `S_1, …, S_K`; the
/// identity `S_0` is implicit.
pub fn apply_generalized_stgf<S: AsOperator>(
    x: &SpaceTimeSignal,
    seq: &[S],
    tso: &TimeShiftOperator,
    h: &FilterTaps,
) -> Result<SpaceTimeSignal> {
    let ops: Vec<&DMatrix<f64>> = seq.iter().map(|s| s.operator()).collect();
    apply_filter(x, ShiftSchedule::Sequence(&ops), tso, h)
}

/// A point `(λ, ω)` of the generalized frequency domain; `λ_0 = 1` is
/// implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPoint {
    pub lambda: Vec<f64>,
    pub omega: f64,
}

impl FrequencyPoint {
    pub fn new(lambda: Vec<f64>, omega: f64) -> Self {
        Self { lambda, omega }
    }
}

fn check_order(h: &FilterTaps, lambda: &[f64]) -> Result<()> {
    if lambda.len() != h.order() {
        return Err(Error::OrderMismatch {
            expected: h.order(),
            actual: lambda.len(),
        });
    }
    Ok(())
}

fn response_at(h: &[f64], lambda: &[f64], omega: f64) -> Complex64 {
    let mut product = 1.0;
    let mut acc = Complex64::new(h[0], 0.0);
    for (k, (&hk, &l)) in h[1..].iter().zip(lambda).enumerate() {
        product *= l;
        acc += Complex64::from_polar(hk * product, (k + 1) as f64 * omega);
    }
    acc
}

/// `h(λ, ω) = Σ_k h_k e^{jkω} Π_{κ=0}^{k} λ_κ`.
pub fn frequency_response(h: &FilterTaps, pt: &FrequencyPoint) -> Result<Complex64> {
    check_order(h, &pt.lambda)?;
    Ok(response_at(h.coefficients(), &pt.lambda, pt.omega))
}

fn gradient_at(h: &[f64], lambda1: &[f64], lambda2: &[f64], omega: f64) -> Vec<Complex64> {
    let order = lambda1.len();
    let mut mixed = lambda2.to_vec();
    (1..=order)
        .map(|k| {
            // mixed = [λ_{1,1..k}, λ_{2,k+1..K}]
            mixed[k - 1] = lambda1[k - 1];
            let mut product = 1.0;
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 1..=order {
                if m != k {
                    product *= mixed[m - 1];
                }
                if m >= k {
                    acc += Complex64::from_polar(h[m] * product, m as f64 * omega);
                }
            }
            acc
        })
        .collect()
}

/// Lipschitz gradient `∇_λ h(λ_{1,2}, ω)`: entry `k` is `∂h/∂λ_k` at the
/// mixed point holding the first `k` entries of `λ_1` and the remaining
/// entries of `λ_2`. With it, `h(λ_1, ω) - h(λ_2, ω) = ∇ᵀ (λ_1 - λ_2)`
/// holds exactly.
pub fn lipschitz_gradient(
    h: &FilterTaps,
    lambda1: &[f64],
    lambda2: &[f64],
    omega: f64,
) -> Result<Vec<Complex64>> {
    check_order(h, lambda1)?;
    check_order(h, lambda2)?;
    Ok(gradient_at(h.coefficients(), lambda1, lambda2, omega))
}

/// Closed interval of graph frequencies.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LambdaRange {
    pub lo: f64,
    pub hi: f64,
}

impl LambdaRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::EmptyRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// Spectral interval of a symmetric operator.
    pub fn of_operator(s: &impl AsOperator) -> Result<Self> {
        let d = crate::graph::eigendecompose(s.operator())?;
        let n = d.eigenvalues.len();
        Self::new(d.eigenvalues[0], d.eigenvalues[n - 1])
    }
}

/// How a Lipschitz or norm estimate was sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub range: LambdaRange,
    /// Uniform samples `ω_i = 2πi/n` on `[0, 2π)`.
    pub omega_samples: usize,
    /// Number of `(λ_1, λ_2)` corner pairs evaluated per `ω`.
    pub lambda_points: usize,
    /// Number of ω-grid doublings performed.
    pub refinements: usize,
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "lambda in [{}, {}] (box corners, {} pairs), omega: {} uniform samples on [0, 2pi), {} refinements",
            self.range.lo, self.range.hi, self.lambda_points, self.omega_samples, self.refinements
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub c_l: f64,
    pub grid: GridSpec,
}

/// Corners of the box `[lo, hi]^dims`, enumerated by bit pattern.
fn corners(range: LambdaRange, dims: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..1usize << dims).map(move |bits| {
        (0..dims)
            .map(|i| {
                if bits >> i & 1 == 1 {
                    range.hi
                } else {
                    range.lo
                }
            })
            .collect()
    })
}

fn omega_grid(samples: usize) -> impl Iterator<Item = f64> {
    (0..samples).map(move |i| TAU * i as f64 / samples as f64)
}

/// Largest of the two Lipschitz norms over the sampled `ω` values.
///
/// Every gradient entry is affine in each graph frequency separately, and
/// so is the Hadamard product `λ_1 ⊙ ∇`, so both squared norms are convex
/// in each coordinate and attain their maximum over the box at a corner.
/// The `λ` search is therefore exhaustive over corners and exact; only `ω`
/// is sampled.
pub fn c_l_on_grid(h: &FilterTaps, range: LambdaRange, omega_samples: usize) -> f64 {
    let order = h.order();
    if order == 0 {
        return 0.0;
    }
    let taps = h.coefficients();
    let corner_list: Vec<Vec<f64>> = corners(range, order).collect();
    let mut best = 0.0f64;
    for omega in omega_grid(omega_samples) {
        for l1 in &corner_list {
            for l2 in &corner_list {
                let grad = gradient_at(taps, l1, l2, omega);
                let plain: f64 = grad.iter().map(|g| g.norm_sqr()).sum();
                let weighted: f64 = grad.iter().zip(l1).map(|(g, l)| (g * l).norm_sqr()).sum();
                best = best.max(plain.sqrt()).max(weighted.sqrt());
            }
        }
    }
    best
}

const MAX_OMEGA_SAMPLES: usize = 1 << 16;

/// Estimates `C_L` over `lambda_range`, doubling the ω grid until the
/// estimate moves by less than 1%.
pub fn estimate_c_l(
    h: &FilterTaps,
    lambda_range: LambdaRange,
    omega_samples: usize,
) -> Result<LipschitzEstimate> {
    if omega_samples < 2 {
        return Err(Error::InvalidParameter(
            "need at least 2 omega samples".into(),
        ));
    }
    let mut samples = omega_samples;
    let mut c_l = c_l_on_grid(h, lambda_range, samples);
    let mut refinements = 0;
    while samples < MAX_OMEGA_SAMPLES {
        let finer = c_l_on_grid(h, lambda_range, samples * 2);
        samples *= 2;
        refinements += 1;
        let moved = (finer - c_l).abs();
        c_l = c_l.max(finer);
        if moved <= 0.01 * c_l.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(LipschitzEstimate {
        c_l,
        grid: GridSpec {
            range: lambda_range,
            omega_samples: samples,
            lambda_points: 1 << (2 * h.order()),
            refinements,
        },
    })
}

/// `max |h(λ, ω)|` with `λ` over the corners of the box and `ω` on a
/// uniform grid. `|h|²` is convex in each coordinate, so corners suffice.
pub fn filter_norm(h: &FilterTaps, lambda_range: LambdaRange, omega_samples: usize) -> Result<f64> {
    if omega_samples < 1 {
        return Err(Error::InvalidParameter(
            "need at least 1 omega sample".into(),
        ));
    }
    let taps = h.coefficients();
    let corner_list: Vec<Vec<f64>> = corners(lambda_range, h.order()).collect();
    let mut best = 0.0f64;
    for omega in omega_grid(omega_samples) {
        for l in &corner_list {
            best = best.max(response_at(taps, l, omega).norm());
        }
    }
    Ok(best)
}
