//! Time-indexed splines used as compressed control plans.
//!
//! A plan is a sequence of knots `(τ_k, θ_k)` with strictly increasing
//! times. Evaluation locates the interval `[τ_j, τ_{j+1})` by binary search
//! and interpolates with one of three schemes:
//!
//! * zero-order hold: `θ_j`;
//! * linear: `(1 − q) θ_j + q θ_{j+1}` with `q = (τ − τ_j) / (τ_{j+1} − τ_j)`;
//! * cubic Hermite with finite-difference slopes
//!   `φ_k = ½ ((θ_{k+1} − θ_k)/(τ_{k+1} − τ_k) + (θ_k − θ_{k−1})/(τ_k − τ_{k−1}))`
//!   (one-sided at the first and last knot), evaluated as
//!   `a θ_j + b φ_j + c θ_{j+1} + d φ_{j+1}`.
//!
//! Queries outside `[τ_0, τ_P]` hold the endpoint value. Every scheme is
//! linear in the knot values, so `∂s/∂θ` is a handful of scalar weights that
//! apply identically to each control channel.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Zero,
    Linear,
    Cubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "linear" => Ok(Self::Linear),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::InvalidConfig(format!("unknown interpolation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlan")]
pub struct SplinePlan {
    times: Vec<f64>,
    /// Knot values, row-major: knot `k` occupies `values[k*dim..(k+1)*dim]`.
    values: Vec<f64>,
    dim: usize,
    kind: Interpolation,
}

#[derive(Deserialize)]
struct RawPlan {
    times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    kind: Interpolation,
}

impl TryFrom<RawPlan> for SplinePlan {
    type Error = Error;

    fn try_from(raw: RawPlan) -> Result<Self> {
        SplinePlan::new(raw.times, raw.values, raw.dim, raw.kind)
    }
}

/// Sparse row of `∂s/∂θ`: at most four knots touch any query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisWeights {
    entries: [(usize, f64); 4],
    len: usize,
}

impl BasisWeights {
    fn new() -> Self {
        Self {
            entries: [(0, 0.0); 4],
            len: 0,
        }
    }

    fn push(&mut self, knot: usize, weight: f64) {
        self.entries[self.len] = (knot, weight);
        self.len += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len].iter().copied()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Dense row over `num_knots` knots.
    pub fn to_dense(&self, num_knots: usize) -> Vec<f64> {
        let mut row = vec![0.0; num_knots];
        for (k, w) in self.iter() {
            row[k] += w;
        }
        row
    }
}

/// Index `j` of the interval containing `t`: the largest `j` with
/// `times[j] <= t`, clamped to `[0, P − 1]` (0 for a single knot).
pub fn find_interval(times: &[f64], t: f64) -> Result<usize> {
    if times.is_empty() {
        return Err(Error::EmptyKnots);
    }
    let last = times.len().saturating_sub(2);
    let count = times.partition_point(|&tk| tk <= t);
    Ok(count.saturating_sub(1).min(last))
}

/// `intervals + 1` knot times evenly spaced over `[start, start + duration]`.
pub fn uniform_times(start: f64, duration: f64, intervals: usize) -> Vec<f64> {
    if intervals == 0 {
        return vec![start];
    }
    let dt = duration / intervals as f64;
    (0..=intervals).map(|k| start + k as f64 * dt).collect()
}

fn hermite(q: f64) -> [f64; 4] {
    let q2 = q * q;
    let q3 = q2 * q;
    [
        2.0 * q3 - 3.0 * q2 + 1.0,
        q3 - 2.0 * q2 + q,
        -2.0 * q3 + 3.0 * q2,
        q3 - q2,
    ]
}

impl SplinePlan {
    pub fn new(times: Vec<f64>, values: Vec<f64>, dim: usize, kind: Interpolation) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptyKnots);
        }
        check_len("spline values", times.len() * dim, values.len())?;
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("spline knots"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("knot times must be strictly increasing".into()));
        }
        Ok(Self {
            times,
            values,
            dim,
            kind,
        })
    }

    /// Every knot set to `value`.
    pub fn constant(times: Vec<f64>, value: &[f64], kind: Interpolation) -> Result<Self> {
        let values = value.iter().copied().cycle().take(value.len() * times.len()).collect();
        Self::new(times, values, value.len(), kind)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable knot values. Times and shape stay fixed.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> Interpolation {
        self.kind
    }

    pub fn num_knots(&self) -> usize {
        self.times.len()
    }

    pub fn knot(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    fn interval(&self, t: f64) -> (usize, f64) {
        let j = find_interval(&self.times, t).expect("non-empty");
        if self.times.len() == 1 {
            return (0, 0.0);
        }
        let q = (t - self.times[j]) / (self.times[j + 1] - self.times[j]);
        (j, q.clamp(0.0, 1.0))
    }

    /// Finite-difference slope at knot `k` for channel `i`.
    fn slope(&self, k: usize, i: usize) -> f64 {
        let p = self.times.len() - 1;
        let v = |k: usize| self.values[k * self.dim + i];
        let forward = |k: usize| (v(k + 1) - v(k)) / (self.times[k + 1] - self.times[k]);
        if p == 0 {
            0.0
        } else if k == 0 {
            forward(0)
        } else if k == p {
            forward(p - 1)
        } else {
            0.5 * (forward(k) + forward(k - 1))
        }
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        let dim = self.dim;
        let (j, q) = self.interval(t);
        if self.times.len() == 1 {
            out.copy_from_slice(self.knot(0));
            return;
        }
        match self.kind {
            Interpolation::Zero => {
                let k = if q >= 1.0 { j + 1 } else { j };
                out.copy_from_slice(self.knot(k));
            }
            Interpolation::Linear => {
                let (lo, hi) = (self.knot(j), self.knot(j + 1));
                for i in 0..dim {
                    out[i] = (1.0 - q) * lo[i] + q * hi[i];
                }
            }
            Interpolation::Cubic => {
                let span = self.times[j + 1] - self.times[j];
                let [a, b, c, d] = hermite(q);
                let (b, d) = (b * span, d * span);
                let (lo, hi) = (self.knot(j), self.knot(j + 1));
                for i in 0..dim {
                    out[i] = a * lo[i] + b * self.slope(j, i) + c * hi[i] + d * self.slope(j + 1, i);
                }
            }
        }
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out);
        out
    }

    /// Weights of `∂s(t)/∂θ_k` for every knot `k` touching the query.
    pub fn derivative_wrt_params(&self, t: f64) -> BasisWeights {
        let mut w = BasisWeights::new();
        let p = self.times.len() - 1;
        if p == 0 {
            w.push(0, 1.0);
            return w;
        }
        let (j, q) = self.interval(t);
        match self.kind {
            Interpolation::Zero => w.push(if q >= 1.0 { j + 1 } else { j }, 1.0),
            Interpolation::Linear => {
                w.push(j, 1.0 - q);
                w.push(j + 1, q);
            }
            Interpolation::Cubic => {
                let span = self.times[j + 1] - self.times[j];
                let [a, b, c, d] = hermite(q);
                // Dense weights over knots j-1..=j+2, slot = knot + 1 - j.
                let mut dense = [0.0; 4];
                dense[1] += a;
                dense[2] += c;
                for (k, scale) in [(j, b * span), (j + 1, d * span)] {
                    self.slope_weights(k, |knot, wk| dense[knot + 1 - j] += scale * wk);
                }
                for (slot, value) in dense.iter().enumerate() {
                    let knot = j + slot;
                    if knot >= 1 && knot - 1 <= p {
                        w.push(knot - 1, *value);
                    }
                }
            }
        }
        w
    }

    /// Expands slope `φ_k` into weights on knot values.
    fn slope_weights(&self, k: usize, mut emit: impl FnMut(usize, f64)) {
        let p = self.times.len() - 1;
        let inv = |k: usize| 1.0 / (self.times[k + 1] - self.times[k]);
        if k == 0 {
            emit(0, -inv(0));
            emit(1, inv(0));
        } else if k == p {
            emit(p - 1, -inv(p - 1));
            emit(p, inv(p - 1));
        } else {
            emit(k - 1, -0.5 * inv(k - 1));
            emit(k, 0.5 * (inv(k - 1) - inv(k)));
            emit(k + 1, 0.5 * inv(k));
        }
    }

    /// Clamps every knot value into the per-channel box. Exact bound on the
    /// trajectory for zero and linear splines; cubic ones may overshoot
    /// between knots.
    pub fn clamp_params(&mut self, lower: &[f64], upper: &[f64]) {
        for knot in self.values.chunks_mut(self.dim) {
            for ((v, lo), hi) in knot.iter_mut().zip(lower).zip(upper) {
                *v = v.clamp(*lo, *hi);
            }
        }
    }

    /// New plan on `new_times` whose knots are this plan's evaluations.
    pub fn resample(&self, new_times: Vec<f64>) -> Result<Self> {
        self.resample_as(new_times, self.kind)
    }

    pub fn resample_as(&self, new_times: Vec<f64>, kind: Interpolation) -> Result<Self> {
        let mut values = vec![0.0; new_times.len() * self.dim];
        for (t, out) in new_times.iter().zip(values.chunks_mut(self.dim.max(1))) {
            if self.dim > 0 {
                self.evaluate_into(*t, out);
            }
        }
        Self::new(new_times, values, self.dim, kind)
    }
}
