//! Edge-drop stability experiments.
//!
//! Each experiment sweeps the sampling probability `p`, measures how far
//! the perturbed output drifts from the nominal one, and sets the
//! measurements against the first-order bounds
//!
//! ```text
//! filter:  E‖Ỹ − Y‖² ≤ α N C_L² (1 − p) ‖X‖²
//! network: E‖Φ̃ − Φ‖² ≤ α N L² C_L² C_σ^{2L} F^{2L} (1 − p) ‖X‖²
//! ```
//!
//! Trial `i` draws its random edges from `derive(seed, [SWEEP, i, …])` at
//! every `p`, so a trial's edge set at a smaller `p` is a subset of its set
//! at a larger one. This coupling keeps the sweep curves smooth without
//! biasing any single point.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flocking::{closed_loop_rollout, FlockConfig, ModelPolicy, RolloutMode};
use crate::graph::{alpha_constant, sample_gso_sequence, GsoKind, ResConfig, ShiftOperator};
use crate::seed;
use crate::spacetime::{SpaceTimeSignal, TimeShiftOperator};
use crate::stgf::{
    apply_generalized_stgf, apply_stgf, estimate_c_l, FilterTaps, LambdaRange, ShiftSchedule,
};
use crate::stgnn::Model;
use crate::training::{validation_cost, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub probabilities: Vec<f64>,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Initial ω grid for the Lipschitz estimate.
    pub omega_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            probabilities: vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7],
            sizes: vec![20, 50, 80],
            trials: 20,
            seed: 0,
            omega_samples: 64,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probabilities.is_empty() {
            return Err(Error::InvalidParameter("probability list is empty".into()));
        }
        if let Some(p) = self
            .probabilities
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidParameter(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.omega_samples < 2 {
            return Err(Error::InvalidParameter(
                "omega_samples must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// `α N C_L² (1 − p) ‖X‖²`.
pub fn theoretical_bound_filter(alpha: f64, n: usize, c_l: f64, p: f64, x_norm_sq: f64) -> f64 {
    alpha * n as f64 * c_l * c_l * (1.0 - p) * x_norm_sq
}

/// `α N L² C_L² C_σ^{2L} F^{2L} (1 − p) ‖X‖²`.
#[allow(clippy::too_many_arguments)]
pub fn theoretical_bound_gnn(
    alpha: f64,
    n: usize,
    layers: usize,
    c_l: f64,
    c_sigma: f64,
    features: usize,
    p: f64,
    x_norm_sq: f64,
) -> f64 {
    let l = layers as i32;
    let growth = (c_sigma * features as f64).powi(2 * l);
    (l * l) as f64 * growth * theoretical_bound_filter(alpha, n, c_l, p, x_norm_sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept` with the usual `R²`.
/// A perfect fit to constant data reports `R² = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(crate::error::mismatch("linear_fit", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateFit("need at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values are equal"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Coefficients of `y ≈ a·x + b·x²` through the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub linear: f64,
    pub quadratic: f64,
}

pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Result<QuadraticFit> {
    if xs.len() != ys.len() {
        return Err(crate::error::mismatch("quadratic_fit", xs.len(), ys.len()));
    }
    let (mut s2, mut s3, mut s4, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
        sy1 += x * y;
        sy2 += x * x * y;
    }
    let det = s2 * s4 - s3 * s3;
    if det.abs() <= 1e-14 * (s2 * s4).max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateFit("need two distinct nonzero x values"));
    }
    Ok(QuadraticFit {
        linear: (sy1 * s4 - sy2 * s3) / det,
        quadratic: (s2 * sy2 - s3 * sy1) / det,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub n: usize,
    pub p: f64,
    pub trial: usize,
    /// Squared output deviation `‖Ỹ − Y‖²` (open loop).
    pub measured: f64,
    /// Relative closed-loop cost for network sweeps; relative output
    /// deviation `‖Ỹ − Y‖²/‖Y‖²` for filter sweeps.
    pub relative_cost: f64,
    pub bound: f64,
    pub seed: u64,
}

/// Aggregate at one `(N, p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub n: usize,
    pub p: f64,
    pub measured_mean: f64,
    pub measured_std: f64,
    pub relative_mean: f64,
    pub relative_std: f64,
    /// Mean of the per-trial bounds.
    pub bound: f64,
    pub trials: usize,
    /// Trials dropped because a rollout diverged.
    pub failed: usize,
}

impl SweepPoint {
    pub fn drop_probability(&self) -> f64 {
        1.0 - self.p
    }
}

/// Which column the summary and plot report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Measured,
    RelativeCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub n: usize,
    pub metric: Metric,
    pub c_l: f64,
    /// The bound's constant, multiplied by `(1 − p)‖X‖²` to give the bound.
    pub constant: f64,
    pub records: Vec<TrialRecord>,
    pub points: Vec<SweepPoint>,
    /// Trend of the mean squared output deviation against `1 − p`.
    pub measured_fit: LinearFit,
    /// Trend of the mean relative cost against `1 − p`.
    pub relative_fit: LinearFit,
    pub measured_quadratic: Option<QuadraticFit>,
}

impl StabilityReport {
    fn build(
        n: usize,
        metric: Metric,
        c_l: f64,
        constant: f64,
        probabilities: &[f64],
        records: Vec<TrialRecord>,
        failures: &[usize],
    ) -> Result<Self> {
        let points: Vec<SweepPoint> = probabilities
            .iter()
            .zip(failures)
            .map(|(&p, &failed)| {
                let at: Vec<&TrialRecord> = records.iter().filter(|r| r.p == p).collect();
                let measured: Vec<f64> = at.iter().map(|r| r.measured).collect();
                let relative: Vec<f64> = at.iter().map(|r| r.relative_cost).collect();
                let (measured_mean, measured_std) = mean_std(&measured);
                let (relative_mean, relative_std) = mean_std(&relative);
                SweepPoint {
                    n,
                    p,
                    measured_mean,
                    measured_std,
                    relative_mean,
                    relative_std,
                    bound: mean_std(&at.iter().map(|r| r.bound).collect::<Vec<_>>()).0,
                    trials: at.len(),
                    failed,
                }
            })
            .collect();
        let xs: Vec<f64> = points.iter().map(SweepPoint::drop_probability).collect();
        let fit = |ys: Vec<f64>| {
            linear_fit(&xs, &ys).unwrap_or(LinearFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                r_squared: f64::NAN,
            })
        };
        let measured: Vec<f64> = points.iter().map(|p| p.measured_mean).collect();
        let measured_quadratic = quadratic_fit(&xs, &measured).ok();
        Ok(Self {
            n,
            metric,
            c_l,
            constant,
            measured_fit: fit(measured),
            relative_fit: fit(points.iter().map(|p| p.relative_mean).collect()),
            measured_quadratic,
            records,
            points,
        })
    }

    /// The fit of the reported metric.
    pub fn fit(&self) -> LinearFit {
        match self.metric {
            Metric::Measured => self.measured_fit,
            Metric::RelativeCost => self.relative_fit,
        }
    }

    fn metric_of(&self, p: &SweepPoint) -> (f64, f64) {
        match self.metric {
            Metric::Measured => (p.measured_mean, p.measured_std),
            Metric::RelativeCost => (p.relative_mean, p.relative_std),
        }
    }

    /// Whether the reported metric is nondecreasing in `1 − p` up to one
    /// standard error of each successive difference.
    pub fn nondecreasing_within_se(&self) -> bool {
        let mut pts: Vec<&SweepPoint> = self.points.iter().collect();
        pts.sort_by(|a, b| b.p.total_cmp(&a.p));
        pts.windows(2).all(|w| {
            let (m0, s0) = self.metric_of(w[0]);
            let (m1, s1) = self.metric_of(w[1]);
            let se = ((s0 * s0) / w[0].trials.max(1) as f64
                + (s1 * s1) / w[1].trials.max(1) as f64)
                .sqrt();
            m1 >= m0 - se
        })
    }

    /// For every point with `p ≥ min_p`: is the mean squared deviation at
    /// most the first-order bound plus the fitted second-order remainder?
    pub fn bound_check(&self, min_p: f64) -> Vec<(f64, f64, f64, bool)> {
        let b = self
            .measured_quadratic
            .map_or(0.0, |q| q.quadratic.max(0.0));
        self.points
            .iter()
            .filter(|pt| pt.p >= min_p)
            .map(|pt| {
                let x = pt.drop_probability();
                let limit = pt.bound + b * x * x;
                (pt.p, pt.measured_mean, limit, pt.measured_mean <= limit)
            })
            .collect()
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("N,p,trial,measured,relative_cost,bound,seed\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.12e},{:.12e},{:.12e},{}",
                r.n, r.p, r.trial, r.measured, r.relative_cost, r.bound, r.seed
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("N,p,mean,std,bound,slope,intercept,r2\n");
        self.append_summary_rows(&mut out);
        out
    }

    /// Summary rows without the header, for concatenating several sizes.
    pub fn append_summary_rows(&self, out: &mut String) {
        let fit = self.fit();
        for pt in &self.points {
            let (mean, std) = self.metric_of(pt);
            let _ = writeln!(
                out,
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                self.n, pt.p, mean, std, pt.bound, fit.slope, fit.intercept, fit.r_squared
            );
        }
    }

    /// Line chart of mean ± std against `1 − p`, with the bound overlaid
    /// when it is plotted as a squared deviation.
    pub fn svg(&self, title: &str) -> String {
        let (w, h, m) = (640.0, 400.0, 60.0);
        let mut pts: Vec<(f64, f64, f64, f64)> = self
            .points
            .iter()
            .map(|p| {
                let (mean, std) = self.metric_of(p);
                (p.drop_probability(), mean, std, p.bound)
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let show_bound = self.metric == Metric::Measured;
        let x_max = pts.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-12);
        let mut y_max = pts.iter().map(|p| p.1 + p.2).fold(0.0, f64::max);
        let mut y_min = pts.iter().map(|p| p.1 - p.2).fold(0.0, f64::min);
        if show_bound {
            y_max = pts.iter().map(|p| p.3).fold(y_max, f64::max);
        }
        if !(y_max > y_min) {
            y_max = y_min + 1.0;
        }
        y_min = y_min.min(0.0);
        let sx = |x: f64| m + (w - 2.0 * m) * x / x_max;
        let sy = |y: f64| h - m - (h - 2.0 * m) * (y - y_min) / (y_max - y_min);
        let path = |f: &dyn Fn(&(f64, f64, f64, f64)) -> f64| {
            pts.iter()
                .enumerate()
                .map(|(i, p)| {
                    format!(
                        "{}{:.2},{:.2}",
                        if i == 0 { "M" } else { " L" },
                        sx(p.0),
                        sy(f(p))
                    )
                })
                .collect::<String>()
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            w / 2.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{m},{m} L{m},{b} L{r},{b}" fill="none" stroke="black"/>"#,
            b = h - m,
            r = w - m
        );
        for i in 0..=4 {
            let xv = x_max * i as f64 / 4.0;
            let yv = y_min + (y_max - y_min) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{:.3}</text>"#,
                sx(xv),
                h - m + 18.0,
                xv
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{:.3e}</text>"#,
                m - 6.0,
                sy(yv) + 4.0,
                yv
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">1 - p</text>"#,
            w / 2.0,
            h - 16.0
        );
        let band_upper = path(&|p| p.1 + p.2);
        let band_lower: String = pts
            .iter()
            .rev()
            .map(|p| format!(" L{:.2},{:.2}", sx(p.0), sy(p.1 - p.2)))
            .collect();
        let _ = writeln!(
            s,
            r##"<path d="{band_upper}{band_lower} Z" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##
        );
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            path(&|p| p.1)
        );
        for p in &pts {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
                sx(p.0),
                sy(p.1)
            );
        }
        if show_bound {
            let _ = writeln!(
                s,
                r##"<path d="{}" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="6,4"/>"##,
                path(&|p| p.3)
            );
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" fill="#d62728">bound</text>"##,
                w - m - 60.0,
                m + 14.0
            );
        }
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" fill="#1f77b4">mean ± std</text>"##,
            m + 10.0,
            m + 14.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Seed of trial `trial` (and optional sub-index) in a sweep.
pub fn trial_seed(root: u64, trial: usize, sub: usize) -> u64 {
    seed::derive(root, &[seed::stream::SWEEP, trial as u64, sub as u64])
}

/// Squared deviation between the filter on `s` and on `K` sampled
/// realizations of `s`, swept over `cfg.probabilities`.
pub fn filter_deviation_experiment(
    h: &FilterTaps,
    s: &ShiftOperator,
    x: &SpaceTimeSignal,
    tso: &TimeShiftOperator,
    cfg: &SweepConfig,
) -> Result<StabilityReport> {
    cfg.validate()?;
    let n = s.node_count();
    let order = h.order();
    let range = LambdaRange::of_operator(s)?;
    let c_l = estimate_c_l(h, range, cfg.omega_samples)?.c_l;
    let alpha = alpha_constant(s);
    let x_norm_sq = x.norm_sq();
    let nominal = apply_stgf(x, s, tso, h)?;
    let y_norm_sq = nominal.norm_sq();

    let jobs: Vec<(f64, usize)> = cfg
        .probabilities
        .iter()
        .flat_map(|&p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(p, trial)| -> Result<TrialRecord> {
            let seed = trial_seed(cfg.seed, trial, 0);
            let measured = if order == 0 {
                0.0
            } else {
                let seq: Vec<ShiftOperator> =
                    sample_gso_sequence(s, &ResConfig::new(p, seed)?, order)?
                        .into_iter()
                        .map(|d| d.sampled_gso)
                        .collect();
                apply_generalized_stgf(x, &seq, tso, h)?
                    .sub(&nominal)?
                    .norm_sq()
            };
            Ok(TrialRecord {
                n,
                p,
                trial,
                measured,
                relative_cost: if y_norm_sq > 0.0 {
                    measured / y_norm_sq
                } else {
                    0.0
                },
                bound: theoretical_bound_filter(alpha, n, c_l, p, x_norm_sq),
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = vec![0; cfg.probabilities.len()];
    StabilityReport::build(
        n,
        Metric::Measured,
        c_l,
        alpha * n as f64 * c_l * c_l,
        &cfg.probabilities,
        records,
        &failures,
    )
}

/// Largest `C_L` over every filter of every layer.
pub fn model_c_l(model: &Model, range: LambdaRange, omega_samples: usize) -> Result<f64> {
    let mut best = 0.0f64;
    for layer in model.layers() {
        for f in 0..layer.outputs() {
            for g in 0..layer.inputs() {
                best = best.max(estimate_c_l(&layer.filter(f, g), range, omega_samples)?.c_l);
            }
        }
    }
    Ok(best)
}

/// Network sweep over the episodes of `data`.
///
/// Each episode's own averaged communication operator is the nominal
/// graph. For every `(p, trial, episode)` the record holds
///
/// * `measured`: `‖Φ̃ − Φ‖²` between the filter-layer outputs (before the
///   readout) of one open-loop pass over the episode's expert features on
///   `K` sampled operators and of the pass on the nominal operator;
/// * `relative_cost`: `(c̃ − c)/c` where `c̃` is the velocity-variation cost
///   of a closed-loop rollout drawing a fresh sampled operator every step
///   and `c` that of the rollout on the nominal operator.
///
/// Trials whose rollout produces a non-finite action are excluded and
/// counted.
pub fn gnn_relative_cost_experiment(
    model: &Model,
    data: &Dataset,
    flock: &FlockConfig,
    kind: GsoKind,
    cfg: &SweepConfig,
) -> Result<StabilityReport> {
    cfg.validate()?;
    let first = data
        .examples
        .first()
        .ok_or_else(|| Error::InvalidParameter("sweep needs at least one episode".into()))?;
    let n = first.input.nodes();
    let order = model.order();
    let policy = ModelPolicy { model };

    struct Nominal {
        gso: ShiftOperator,
        output: SpaceTimeSignal,
        tso: TimeShiftOperator,
        cost: f64,
        x_norm_sq: f64,
        alpha: f64,
        c_l: f64,
    }
    let nominals = data
        .examples
        .par_iter()
        .map(|ex| -> Result<Nominal> {
            let gso = ex.trajectory.average_gso(kind)?;
            let tso = TimeShiftOperator::zero_pad(ex.input.horizon())?;
            let output = model.hidden(&ex.input, ShiftSchedule::Fixed(gso.matrix()), &tso)?;
            let traj = closed_loop_rollout(
                &policy,
                flock,
                &ex.initial_state(),
                RolloutMode::FixedGraph(&gso),
            )?;
            let range = LambdaRange::of_operator(&gso)?;
            Ok(Nominal {
                alpha: alpha_constant(&gso),
                c_l: model_c_l(model, range, cfg.omega_samples)?,
                cost: validation_cost(&traj),
                x_norm_sq: ex.input.norm_sq(),
                gso,
                output,
                tso,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c_l = nominals.iter().map(|m| m.c_l).fold(0.0, f64::max);
    let alpha = nominals.iter().map(|m| m.alpha).fold(0.0, f64::max);
    let cfgm = model.config();
    let gnn_constant =
        theoretical_bound_gnn(alpha, n, cfgm.layers, c_l, 1.0, cfgm.features, 0.0, 1.0);

    let episodes = data.examples.len();
    let jobs: Vec<(usize, f64, usize, usize)> = cfg
        .probabilities
        .iter()
        .enumerate()
        .flat_map(|(pi, &p)| {
            (0..cfg.trials).flat_map(move |t| (0..episodes).map(move |e| (pi, p, t, e)))
        })
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(_, p, trial, e)| -> Result<Option<TrialRecord>> {
            let ex = &data.examples[e];
            let nom = &nominals[e];
            let seed = trial_seed(cfg.seed, trial, e);
            let measured = if order == 0 {
                0.0
            } else {
                let seq: Vec<ShiftOperator> =
                    sample_gso_sequence(&nom.gso, &ResConfig::new(p, seed)?, order)?
                        .into_iter()
                        .map(|d| d.sampled_gso)
                        .collect();
                let ops: Vec<_> = seq.iter().map(|s| s.matrix()).collect();
                model
                    .hidden(&ex.input, ShiftSchedule::Sequence(&ops), &nom.tso)?
                    .sub(&nom.output)?
                    .norm_sq()
            };
            let mode = RolloutMode::Perturbed {
                nominal: &nom.gso,
                probability: p,
                seed: seed::derive(seed, &[seed::stream::ROLLOUT]),
            };
            let perturbed = match closed_loop_rollout(&policy, flock, &ex.initial_state(), mode) {
                Ok(t) => validation_cost(&t),
                Err(Error::NonFinitePrediction { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let relative_cost = if nom.cost > 0.0 {
                (perturbed - nom.cost) / nom.cost
            } else {
                0.0
            };
            Ok(Some(TrialRecord {
                n,
                p,
                trial: trial * episodes + e,
                measured,
                relative_cost,
                bound: theoretical_bound_gnn(
                    nom.alpha,
                    n,
                    cfgm.layers,
                    nom.c_l,
                    1.0,
                    cfgm.features,
                    p,
                    nom.x_norm_sq,
                ),
                seed,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut failures = vec![0; cfg.probabilities.len()];
    let mut records = Vec::with_capacity(outcomes.len());
    for (job, out) in jobs.iter().zip(outcomes) {
        match out {
            Some(r) => records.push(r),
            None => failures[job.0] += 1,
        }
    }
    StabilityReport::build(
        n,
        Metric::RelativeCost,
        c_l,
        gnn_constant,
        &cfg.probabilities,
        records,
        &failures,
    )
}
