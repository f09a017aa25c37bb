//! Per-channel signed logarithmic activation polishing.
//!
//! The transform compresses heavy-tailed outliers into a narrow, roughly
//! normal range before uniform quantization, and inverts exactly after
//! dequantization:
//!
//! ```text
//! polish:   y = sign(x) · [log2(|x| + α) − log2(α)]
//! unpolish: x = sign(y) · [2^(|y| + log2 α) − α]
//! ```
//!
//! α is a strictly positive per-channel factor calibrated from the ε-th
//! percentile of absolute activation values, averaged over calibration
//! samples.

use crate::error::{QdkError, Result};
use crate::quant::{quantize_uniform, Granularity, QuantParams, QuantizedTensor};
use crate::tensor::{percentile, Tensor};

/// Lower bound on calibrated polishing factors; keeps all-zero channels from
/// producing a degenerate log transform.
pub const ALPHA_FLOOR: f64 = 1e-4;

/// Per-channel polishing factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolishFactors {
    /// One strictly positive factor per channel.
    pub alpha: Vec<f64>,
    /// Percentile rank the factors were calibrated at.
    pub epsilon: f64,
    /// Axis the channels live on.
    pub channel_axis: usize,
    /// Number of calibration samples averaged.
    pub sample_count: usize,
}

impl PolishFactors {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(QdkError::Domain("empty polishing factors".into()));
        }
        if let Some(&a) = self.alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(QdkError::Domain(format!("non-positive polish factor {a}")));
        }
        if self.sample_count == 0 {
            return Err(QdkError::Domain("polish factors need >= 1 sample".into()));
        }
        Ok(())
    }
}

/// Calibrate per-channel polishing factors from activation samples.
///
/// Each tensor in `calibration_batches` is one calibration sample. Per sample
/// and channel the factor is the ε-th percentile of |x|, floored at
/// [`ALPHA_FLOOR`]; the returned factor is the mean over samples.
pub fn calibrate_polish(
    calibration_batches: &[Tensor],
    epsilon: f64,
    channel_axis: usize,
) -> Result<PolishFactors> {
    if calibration_batches.is_empty() {
        return Err(QdkError::Domain(
            "calibrate_polish needs at least one batch".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 100.0) {
        return Err(QdkError::Domain(format!(
            "polish percentile {epsilon} outside (0, 100)"
        )));
    }
    let (_, channels, _) = calibration_batches[0].axis_split(channel_axis)?;
    let mut alpha = vec![0.0; channels];
    for batch in calibration_batches {
        batch.ensure_finite("calibrate_polish")?;
        let (_, ch, _) = batch.axis_split(channel_axis)?;
        if ch != channels {
            return Err(QdkError::Shape(format!(
                "calibration batches disagree on channel extent: {channels} vs {ch}"
            )));
        }
        for (c, acc) in alpha.iter_mut().enumerate() {
            let abs: Vec<f64> = batch
                .channel_values(channel_axis, c)?
                .iter()
                .map(|v| v.abs())
                .collect();
            *acc += percentile(&abs, epsilon)?.max(ALPHA_FLOOR);
        }
    }
    let n = calibration_batches.len() as f64;
    for a in &mut alpha {
        *a /= n;
    }
    let factors = PolishFactors {
        alpha,
        epsilon,
        channel_axis,
        sample_count: calibration_batches.len(),
    };
    factors.validate()?;
    Ok(factors)
}

fn polish_scalar(x: f64, alpha: f64) -> f64 {
    // log2(|x| + α) − log2(α) = log2(1 + |x|/α), which stays accurate for
    // |x| far below α.
    x.signum() * (x.abs() / alpha).ln_1p() / std::f64::consts::LN_2
}

fn unpolish_scalar(y: f64, alpha: f64) -> f64 {
    // 2^(|y| + log2 α) − α = α · (2^|y| − 1)
    y.signum() * alpha * (y.abs() * std::f64::consts::LN_2).exp_m1()
}

/// Apply the polish transform elementwise with each channel's factor.
pub fn polish(x: &Tensor, f: &PolishFactors) -> Result<Tensor> {
    f.validate()?;
    let (_, channels, _) = x.axis_split(f.channel_axis)?;
    if channels != f.alpha.len() {
        return Err(QdkError::Shape(format!(
            "tensor has {channels} channels, factors have {}",
            f.alpha.len()
        )));
    }
    let mut out = x.clone();
    for flat in 0..out.len() {
        let c = x.channel_of(flat, f.channel_axis);
        out.data_mut()[flat] = polish_scalar(x.data()[flat], f.alpha[c]);
    }
    Ok(out)
}

/// Invert the polish transform elementwise.
pub fn unpolish(y: &Tensor, f: &PolishFactors) -> Result<Tensor> {
    f.validate()?;
    let (_, channels, _) = y.axis_split(f.channel_axis)?;
    if channels != f.alpha.len() {
        return Err(QdkError::Shape(format!(
            "tensor has {channels} channels, factors have {}",
            f.alpha.len()
        )));
    }
    let mut out = y.clone();
    for flat in 0..out.len() {
        let c = y.channel_of(flat, f.channel_axis);
        out.data_mut()[flat] = unpolish_scalar(y.data()[flat], f.alpha[c]);
    }
    Ok(out)
}

/// Fit per-channel asymmetric uniform parameters for a polished tensor with
/// the grid anchored on the dominant range endpoint.
///
/// A polished channel is symmetric around zero whenever its extremes are a
/// ± outlier pair, which puts the ideal zero point exactly halfway between
/// two codes; the plain min/max fit then parks both extremes half a step off
/// the grid, and that half step turns into a large relative error after the
/// exponential unpolish. Rounding the zero point first and re-deriving the
/// scale from the wider side keeps the extreme polished value exactly
/// representable.
pub fn fit_polished_params(polished: &Tensor, bits: u8, axis: usize) -> Result<QuantParams> {
    polished.ensure_finite("fit_polished_params")?;
    let (_, channels, _) = polished.axis_split(axis)?;
    let mut ranges = Vec::with_capacity(channels);
    for c in 0..channels {
        let vals = polished.channel_values(axis, c)?;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ranges.push((min, max));
    }
    polished_params_from_ranges(ranges, bits, axis)
}

/// Range-based variant of [`fit_polished_params`] for multi-sample
/// calibration.
pub fn polished_params_from_ranges(
    ranges: Vec<(f64, f64)>,
    bits: u8,
    axis: usize,
) -> Result<QuantParams> {
    if bits < 2 {
        return Err(QdkError::Domain(format!(
            "bit-width {bits} below minimum of 2"
        )));
    }
    let qmax = (1i64 << bits) - 1;
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zero_points = Vec::with_capacity(ranges.len());
    for (min, max) in ranges {
        let min = min.min(0.0);
        let max = max.max(0.0);
        if max - min <= 0.0 {
            scales.push(crate::quant::SCALE_FLOOR);
            zero_points.push(0);
            continue;
        }
        let zp_ideal = qmax as f64 * (-min) / (max - min);
        let zp = crate::quant::round_half_away(zp_ideal).clamp(0.0, qmax as f64) as i64;
        // Anchor the scale on whichever endpoint the rounded zero point can
        // still represent exactly; the other endpoint stays within half a
        // step of the grid edge.
        let s = if zp == 0 {
            max / qmax as f64
        } else if zp == qmax {
            -min / qmax as f64
        } else if zp as f64 >= zp_ideal {
            max / (qmax - zp) as f64
        } else {
            -min / zp as f64
        };
        scales.push(s.max(crate::quant::SCALE_FLOOR));
        zero_points.push(zp);
    }
    let params = QuantParams {
        bits,
        scheme: crate::quant::Scheme::Uniform,
        granularity: Granularity::PerChannel { axis },
        scales,
        zero_points,
    };
    params.validate()?;
    Ok(params)
}

/// Polish, then fit per-channel asymmetric uniform parameters on the polished
/// tensor, then quantize. The matching dequantization path is
/// [`dequantize_uniform`](crate::quant::dequantize_uniform) followed by
/// [`unpolish`].
pub fn polished_quantize(x: &Tensor, f: &PolishFactors, bits: u8) -> Result<QuantizedTensor> {
    let polished = polish(x, f)?;
    let params = fit_polished_params(&polished, bits, f.channel_axis)?;
    quantize_uniform(&polished, &params)
}

/// Full polished round trip: polish → quantize → dequantize → unpolish.
pub fn polished_quantdequant(x: &Tensor, f: &PolishFactors, bits: u8) -> Result<Tensor> {
    let q = polished_quantize(x, f, bits)?;
    let deq = crate::quant::dequantize_uniform(&q)?;
    unpolish(&deq, f)
}
