//! Trainable ADC mapping: a Gaussian-kernel relaxation of non-uniform
//! sampling, a sum-of-tanh relaxation of scalar quantization, the hard rules
//! they project onto after training, and the annealing that sharpens the
//! relaxations during training.
//!
//! Sample positions and the kernel width are stored in grid units
//! (`t / T_L` and `sigma^2 / T_L^2`). The kernel `exp(-(i T_L - t_j)^2 /
//! sigma^2)` is invariant under that rescaling, and the optimizer steps are
//! then commensurate with the grid.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relaxed sampler: output column `j` is `sum_i y[:, i] k(i - u_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSampler {
    positions: Vec<f64>,
    width: f64,
    grid_len: usize,
    spacing: f64,
    /// Divide each kernel column by its sum.
    normalized: bool,
}

impl SoftSampler {
    /// `positions` in grid units, `width` (sigma^2) in grid units squared.
    pub fn new(positions: Vec<f64>, width: f64, grid_len: usize, spacing: f64, normalized: bool) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel width {width} must be > 0")));
        }
        if positions.is_empty() || positions.len() > grid_len {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= L~ <= L, got L~ = {} for L = {grid_len}",
                positions.len()
            )));
        }
        if let Some(u) = positions
            .iter()
            .find(|u| !(u.is_finite() && **u >= 0.0 && **u < grid_len as f64))
        {
            return Err(Error::Domain(format!("sample position {u} outside [0, {grid_len})")));
        }
        Ok(Self {
            positions,
            width,
            grid_len,
            spacing,
            normalized,
        })
    }

    /// Builds from sample times `t_j` in seconds and `sigma^2` in seconds squared.
    pub fn from_times(
        times: &[f64],
        width_secs2: f64,
        grid_len: usize,
        spacing: f64,
        normalized: bool,
    ) -> Result<Self> {
        let positions = times.iter().map(|t| t / spacing).collect();
        Self::new(
            positions,
            width_secs2 / (spacing * spacing),
            grid_len,
            spacing,
            normalized,
        )
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn set_width(&mut self, width: f64) -> Result<()> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel width {width} must be > 0")));
        }
        self.width = width;
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_samples(&self) -> usize {
        self.positions.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.positions.iter().map(|u| u * self.spacing).collect()
    }

    pub fn width_secs2(&self) -> f64 {
        self.width * self.spacing * self.spacing
    }

    /// `L x L~` kernel matrix.
    pub fn kernel(&self) -> Array2<f64> {
        let mut k = Array2::zeros((self.grid_len, self.positions.len()));
        for (j, &u) in self.positions.iter().enumerate() {
            let expo = |i: usize| -((i as f64 - u).powi(2)) / self.width;
            if self.normalized {
                // Softmax over the grid; stable for vanishing widths.
                let top = (0..self.grid_len).map(expo).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..self.grid_len {
                    let e = (expo(i) - top).exp();
                    k[[i, j]] = e;
                    total += e;
                }
                k.column_mut(j).mapv_inplace(|v| v / total);
            } else {
                for i in 0..self.grid_len {
                    k[[i, j]] = expo(i).exp();
                }
            }
        }
        k
    }

    /// Pulls a kernel-matrix gradient back to the positions and the width.
    pub fn kernel_backward(&self, kernel: &Array2<f64>, dkernel: &Array2<f64>) -> (Vec<f64>, f64) {
        let mut dpos = vec![0.0; self.positions.len()];
        let mut dwidth = 0.0;
        for (j, &u) in self.positions.iter().enumerate() {
            let col = kernel.column(j);
            let dcol = dkernel.column(j);
            let inner = if self.normalized {
                col.iter().zip(dcol.iter()).map(|(k, d)| k * d).sum::<f64>()
            } else {
                0.0
            };
            for i in 0..self.grid_len {
                // Gradient w.r.t. the exponent e_i = -(i - u)^2 / w.
                let de = if self.normalized {
                    col[i] * (dcol[i] - inner)
                } else {
                    col[i] * dcol[i]
                };
                let d = i as f64 - u;
                dpos[j] += de * 2.0 * d / self.width;
                dwidth += de * d * d / (self.width * self.width);
            }
        }
        (dpos, dwidth)
    }

    /// Clamps positions to `[0, L-1]` and pushes them apart to at least one
    /// grid step, keeping their relative order.
    pub fn enforce_separation(&mut self) {
        let last = (self.grid_len - 1) as f64;
        let mut order: Vec<usize> = (0..self.positions.len()).collect();
        order.sort_by(|&a, &b| self.positions[a].total_cmp(&self.positions[b]));
        let mut v: Vec<f64> = order.iter().map(|&i| self.positions[i].clamp(0.0, last)).collect();
        for j in 1..v.len() {
            v[j] = v[j].max(v[j - 1] + 1.0);
        }
        if let Some(top) = v.last_mut() {
            *top = top.min(last);
        }
        for j in (0..v.len().saturating_sub(1)).rev() {
            v[j] = v[j].min(v[j + 1] - 1.0);
        }
        for (&i, val) in order.iter().zip(v) {
            self.positions[i] = val;
        }
    }
}

/// `soft_sample`: `p x L` dense samples to `p x L~` relaxed samples.
pub fn soft_sample(y_dense: ArrayView2<f64>, sampler: &SoftSampler) -> Result<Array2<f64>> {
    check_dim("dense grid length", sampler.grid_len, y_dense.ncols())?;
    Ok(y_dense.dot(&sampler.kernel()))
}

/// Relaxed quantizer `a0 + sum_i a_i tanh(c_i z - b_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftQuantizer {
    pub offset: f64,
    pub amplitudes: Vec<f64>,
    pub shifts: Vec<f64>,
    pub slopes: Vec<f64>,
}

/// Parameter gradients of the soft quantizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizerGrad {
    pub offset: f64,
    pub amplitudes: Vec<f64>,
    pub shifts: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl SoftQuantizer {
    pub fn new(offset: f64, amplitudes: Vec<f64>, shifts: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidParameter("quantizer needs M~ >= 2 levels".into()));
        }
        if shifts.len() != amplitudes.len() || slopes.len() != amplitudes.len() {
            return Err(Error::InvalidParameter(
                "quantizer parameter vectors must all have length M~ - 1".into(),
            ));
        }
        if slopes.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter("quantizer slopes must be > 0".into()));
        }
        Ok(Self {
            offset,
            amplitudes,
            shifts,
            slopes,
        })
    }

    /// Uniform mid-rise initialization with `levels` cells over
    /// `[center - half_range, center + half_range]` and slopes of five per
    /// cell width.
    pub fn uniform(levels: usize, center: f64, half_range: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidParameter("quantizer needs M~ >= 2 levels".into()));
        }
        if !(half_range > 0.0 && half_range.is_finite()) {
            return Err(Error::InvalidParameter(format!("range {half_range} must be > 0")));
        }
        let cell = 2.0 * half_range / levels as f64;
        let slope = 5.0 / cell;
        let borders = (1..levels).map(|i| center - half_range + i as f64 * cell);
        let shifts = borders.map(|b| b * slope).collect();
        Self::new(center, vec![cell / 2.0; levels - 1], shifts, vec![slope; levels - 1])
    }

    pub fn levels(&self) -> usize {
        self.amplitudes.len() + 1
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.offset
            + self
                .amplitudes
                .iter()
                .zip(&self.shifts)
                .zip(&self.slopes)
                .map(|((a, b), c)| a * (c * z - b).tanh())
                .sum::<f64>()
    }

    /// Derivative in `z`.
    pub fn derivative(&self, z: f64) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.shifts)
            .zip(&self.slopes)
            .map(|((a, b), c)| {
                let t = (c * z - b).tanh();
                a * c * (1.0 - t * t)
            })
            .sum()
    }

    /// Accumulates parameter gradients for upstream gradient `g` at input
    /// `z` and returns the input gradient.
    pub fn accumulate(&self, z: f64, g: f64, grad: &mut QuantizerGrad) -> f64 {
        grad.offset += g;
        let mut dz = 0.0;
        for i in 0..self.amplitudes.len() {
            let (a, b, c) = (self.amplitudes[i], self.shifts[i], self.slopes[i]);
            let t = (c * z - b).tanh();
            let sech2 = 1.0 - t * t;
            grad.amplitudes[i] += g * t;
            grad.shifts[i] -= g * a * sech2;
            grad.slopes[i] += g * a * sech2 * z;
            dz += a * c * sech2;
        }
        g * dz
    }

    pub fn zero_grad(&self) -> QuantizerGrad {
        let m = self.amplitudes.len();
        QuantizerGrad {
            offset: 0.0,
            amplitudes: vec![0.0; m],
            shifts: vec![0.0; m],
            slopes: vec![0.0; m],
        }
    }
}

/// Elementwise `soft_quantize`.
pub fn soft_quantize(z: f64, q: &SoftQuantizer) -> f64 {
    q.eval(z)
}

/// Hard scalar quantizer: sorted borders and one level per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardQuantizer {
    borders: Vec<f64>,
    levels: Vec<f64>,
    /// Number of borders dropped because they coincided with another.
    pub collapsed: usize,
}

impl HardQuantizer {
    pub fn new(borders: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if levels.len() != borders.len() + 1 || levels.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "{} borders need {} levels, got {}",
                borders.len(),
                borders.len() + 1,
                levels.len()
            )));
        }
        if borders.windows(2).any(|w| !(w[0] < w[1])) || borders.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "borders must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            borders,
            levels,
            collapsed: 0,
        })
    }

    pub fn borders(&self) -> &[f64] {
        &self.borders
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Cell index of `v`; a value on a border belongs to the upper cell.
    pub fn cell(&self, v: f64) -> usize {
        self.borders.partition_point(|&b| b <= v)
    }

    pub fn quantize(&self, v: f64) -> f64 {
        self.levels[self.cell(v)]
    }
}

/// Projected ADC: distinct sorted grid indices plus the hard quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardAdc {
    pub sample_indices: Vec<usize>,
    pub quantizer: HardQuantizer,
}

impl HardAdc {
    pub fn new(sample_indices: Vec<usize>, quantizer: HardQuantizer) -> Result<Self> {
        if sample_indices.is_empty() || sample_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "sample indices must be nonempty and strictly increasing".into(),
            ));
        }
        Ok(Self {
            sample_indices,
            quantizer,
        })
    }
}

fn nearest_index(u: f64, grid_len: usize) -> usize {
    // Nearest grid point, ties toward the lower index.
    let i = (u - 0.5).ceil().max(0.0) as usize;
    i.min(grid_len - 1)
}

/// Grid point assigned to each sample position, in position order.
///
/// Positions claim their nearest grid point in ascending order of distance to
/// it; a position whose point is taken gets the nearest unclaimed one.
pub fn assign_grid_points(s: &SoftSampler) -> Vec<usize> {
    let l = s.grid_len;
    let mut order: Vec<(usize, f64)> = s
        .positions
        .iter()
        .enumerate()
        .map(|(j, &u)| (j, (u - nearest_index(u, l) as f64).abs()))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; l];
    let mut out = vec![0; s.positions.len()];
    for (j, _) in order {
        let u = s.positions[j];
        let best = (0..l)
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| (a as f64 - u).abs().total_cmp(&(b as f64 - u).abs()).then(a.cmp(&b)))
            .expect("L~ <= L leaves a free grid point");
        taken[best] = true;
        out[j] = best;
    }
    out
}

/// Projects sample positions to distinct sorted grid indices.
pub fn harden_sampler(s: &SoftSampler) -> Vec<usize> {
    let mut out = assign_grid_points(s);
    out.sort_unstable();
    out
}

/// Projects the soft quantizer onto its hard counterpart: borders `b_i / c_i`
/// and the sign-rule level on each cell.
pub fn harden_quantizer(q: &SoftQuantizer) -> HardQuantizer {
    let raw: Vec<f64> = q.shifts.iter().zip(&q.slopes).map(|(b, c)| b / c).collect();
    let mut borders = raw.clone();
    borders.sort_by(f64::total_cmp);
    let before = borders.len();
    borders.dedup();
    let collapsed = before - borders.len();
    if collapsed > 0 {
        log::warn!("{collapsed} coinciding quantizer borders collapsed");
    }
    let level_at = |v: f64| -> f64 {
        q.offset
            + q.amplitudes
                .iter()
                .zip(&raw)
                .map(|(a, beta)| if v >= *beta { *a } else { -*a })
                .sum::<f64>()
    };
    let cells = borders.len() + 1;
    let levels = (0..cells)
        .map(|m| {
            if m == 0 {
                level_at(f64::NEG_INFINITY)
            } else if m == cells - 1 {
                level_at(f64::INFINITY)
            } else {
                level_at(0.5 * (borders[m - 1] + borders[m]))
            }
        })
        .collect();
    HardQuantizer {
        borders,
        levels,
        collapsed,
    }
}

/// Hard ADC on a `p x L` dense block: column selection then quantization.
pub fn hard_forward(y_dense: ArrayView2<f64>, adc: &HardAdc) -> Result<Array2<f64>> {
    if let Some(&last) = adc.sample_indices.last() {
        if last >= y_dense.ncols() {
            return Err(Error::DimensionMismatch {
                what: "dense grid length",
                expected: last + 1,
                found: y_dense.ncols(),
            });
        }
    }
    let mut out = Array2::zeros((y_dense.nrows(), adc.sample_indices.len()));
    for (j, &idx) in adc.sample_indices.iter().enumerate() {
        for c in 0..y_dense.nrows() {
            out[[c, j]] = adc.quantizer.quantize(y_dense[[c, idx]]);
        }
    }
    Ok(out)
}

/// Per-epoch multiplicative sharpening of the relaxations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Kernel width factor, `<= 1`.
    pub width_factor: f64,
    /// Quantizer slope factor, `>= 1`.
    pub slope_factor: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            width_factor: 0.95,
            slope_factor: 1.05,
        }
    }
}

impl AnnealSchedule {
    pub const NONE: AnnealSchedule = AnnealSchedule {
        width_factor: 1.0,
        slope_factor: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.width_factor > 0.0 && self.width_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "width factor {} must lie in (0, 1]",
                self.width_factor
            )));
        }
        if !(self.slope_factor >= 1.0 && self.slope_factor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "slope factor {} must be >= 1",
                self.slope_factor
            )));
        }
        Ok(())
    }

    /// Factors applied after epoch `epoch`. The schedule is geometric, so
    /// they do not depend on the epoch.
    pub fn factors(&self, _epoch: usize) -> (f64, f64) {
        (self.width_factor, self.slope_factor)
    }
}

/// Sharpens the relaxations by one epoch's factors. The shifts are rescaled
/// with the slopes so the learned borders `b_i / c_i` stay where they are.
pub fn anneal_step(
    sampler: &mut SoftSampler,
    quantizer: &mut SoftQuantizer,
    epoch: usize,
    schedule: &AnnealSchedule,
) -> Result<()> {
    schedule.validate()?;
    let (gw, gc) = schedule.factors(epoch);
    sampler.set_width(sampler.width * gw)?;
    for (c, b) in quantizer.slopes.iter_mut().zip(quantizer.shifts.iter_mut()) {
        *c *= gc;
        *b *= gc;
    }
    Ok(())
}
