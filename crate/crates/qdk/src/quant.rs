//! Uniform and log-domain quantization kernels with per-tensor and
//! per-channel asymmetric parameter fitting.
//!
//! Codes are kept as exact small integers inside `f64` tensors so the rest of
//! the pipeline stays on a single tensor type. Rounding is half-away-from-zero
//! everywhere.

use crate::error::{QdkError, Result};
use crate::tensor::{percentile, Tensor};

/// Scale/zero-point granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Quantization mapping family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Uniform,
    Log2,
}

/// Scale, zero point, and bit-width for one quantization mapping.
///
/// Per-channel parameters carry one (scale, zero point) pair per channel;
/// per-tensor parameters carry exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i64>,
}

/// Smallest admissible scale; keeps constant channels from collapsing to a
/// zero scale during calibration.
pub const SCALE_FLOOR: f64 = 1e-12;

impl QuantParams {
    pub fn per_tensor(bits: u8, scheme: Scheme, scale: f64, zero_point: i64) -> Result<Self> {
        let p = Self {
            bits,
            scheme,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zero_points: vec![zero_point],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(QdkError::Domain(format!(
                "bit-width {} below minimum of 2",
                self.bits
            )));
        }
        if self.scales.len() != self.zero_points.len() || self.scales.is_empty() {
            return Err(QdkError::Domain(
                "scale/zero-point vectors empty or mismatched".into(),
            ));
        }
        let qmax = self.qmax();
        for (&s, &zp) in self.scales.iter().zip(&self.zero_points) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(QdkError::Domain(format!("non-positive scale {s}")));
            }
            if zp < 0 || zp > qmax {
                return Err(QdkError::Domain(format!(
                    "zero point {zp} outside [0, {qmax}]"
                )));
            }
        }
        Ok(())
    }

    /// Largest code value, `2^k - 1`.
    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Channel group index for a flat element position of `t`.
    fn group_of(&self, t: &Tensor, flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis } => t.channel_of(flat, axis),
        }
    }

    /// (scale, zero point) applying to a flat element position of `t`.
    pub fn params_for(&self, t: &Tensor, flat: usize) -> (f64, i64) {
        let g = self.group_of(t, flat);
        (self.scales[g], self.zero_points[g])
    }
}

/// Integer codes plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Tensor,
    pub params: QuantParams,
}

impl QuantizedTensor {
    /// Check every code is an integer within `[0, 2^k - 1]`.
    pub fn validate_codes(&self) -> Result<()> {
        let qmax = self.params.qmax() as f64;
        for &c in self.codes.data() {
            if c.fract() != 0.0 || c < 0.0 || c > qmax {
                return Err(QdkError::Domain(format!(
                    "code {c} outside integer range [0, {qmax}]"
                )));
            }
        }
        Ok(())
    }
}

/// Round half away from zero, the fixed rounding mode of every kernel here.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

fn fit_range(min: f64, max: f64, bits: u8) -> (f64, i64) {
    // Extend the observed range to include zero so the zero point always
    // lands on the grid; a constant non-zero channel then reconstructs
    // exactly instead of collapsing onto the clipped zero point.
    let min = min.min(0.0);
    let max = max.max(0.0);
    let qmax = (1i64 << bits) - 1;
    let s = ((max - min) / qmax as f64).max(SCALE_FLOOR);
    let zp = round_half_away(-min / s) as i64;
    (s, zp.clamp(0, qmax))
}

fn channel_ranges(
    x: &Tensor,
    granularity: Granularity,
    range_of: impl Fn(&[f64]) -> Result<(f64, f64)>,
) -> Result<Vec<(f64, f64)>> {
    match granularity {
        Granularity::PerTensor => Ok(vec![range_of(x.data())?]),
        Granularity::PerChannel { axis } => {
            let (_, channels, _) = x.axis_split(axis)?;
            (0..channels)
                .map(|c| range_of(&x.channel_values(axis, c)?))
                .collect()
        }
    }
}

/// Fit asymmetric uniform parameters from observed min/max per group.
pub fn fit_minmax(x: &Tensor, bits: u8, granularity: Granularity) -> Result<QuantParams> {
    if bits < 2 {
        return Err(QdkError::Domain(format!(
            "bit-width {bits} below minimum of 2"
        )));
    }
    x.ensure_finite("fit_minmax")?;
    let ranges = channel_ranges(x, granularity, |vals| {
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((min, max))
    })?;
    build_uniform_params(ranges, bits, granularity)
}

/// Fit asymmetric uniform parameters with percentile-clipped range endpoints.
///
/// `clip_pct = 100` reduces exactly to [`fit_minmax`].
pub fn fit_percentile(
    x: &Tensor,
    bits: u8,
    clip_pct: f64,
    granularity: Granularity,
) -> Result<QuantParams> {
    if bits < 2 {
        return Err(QdkError::Domain(format!(
            "bit-width {bits} below minimum of 2"
        )));
    }
    if !(clip_pct > 50.0 && clip_pct <= 100.0) {
        return Err(QdkError::Domain(format!(
            "clip percentile {clip_pct} outside (50, 100]"
        )));
    }
    if clip_pct == 100.0 {
        return fit_minmax(x, bits, granularity);
    }
    x.ensure_finite("fit_percentile")?;
    let ranges = channel_ranges(x, granularity, |vals| {
        let hi = percentile(vals, clip_pct)?;
        let lo = percentile(vals, 100.0 - clip_pct)?;
        Ok((lo, hi))
    })?;
    build_uniform_params(ranges, bits, granularity)
}

/// Build asymmetric uniform parameters from per-group (min, max) ranges;
/// ranges are zero-extended exactly like [`fit_minmax`].
pub fn uniform_params_from_ranges(
    ranges: Vec<(f64, f64)>,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantParams> {
    if bits < 2 {
        return Err(QdkError::Domain(format!(
            "bit-width {bits} below minimum of 2"
        )));
    }
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zero_points = Vec::with_capacity(ranges.len());
    for (min, max) in ranges {
        let (s, zp) = fit_range(min, max, bits);
        scales.push(s);
        zero_points.push(zp);
    }
    let p = QuantParams {
        bits,
        scheme: Scheme::Uniform,
        granularity,
        scales,
        zero_points,
    };
    p.validate()?;
    Ok(p)
}

fn build_uniform_params(
    ranges: Vec<(f64, f64)>,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantParams> {
    uniform_params_from_ranges(ranges, bits, granularity)
}

/// Uniform quantization: `code = clip(round(x/s) + zp, 0, 2^k - 1)`.
pub fn quantize_uniform(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    if p.scheme != Scheme::Uniform {
        return Err(QdkError::Domain(
            "quantize_uniform called with non-uniform params".into(),
        ));
    }
    p.validate()?;
    x.ensure_finite("quantize_uniform")?;
    let qmax = p.qmax() as f64;
    let mut codes = x.clone();
    for flat in 0..x.len() {
        let (s, zp) = p.params_for(x, flat);
        let c = (round_half_away(x.data()[flat] / s) + zp as f64).clamp(0.0, qmax);
        codes.data_mut()[flat] = c;
    }
    Ok(QuantizedTensor {
        codes,
        params: p.clone(),
    })
}

/// Uniform dequantization: `x̂ = s · (code - zp)`.
pub fn dequantize_uniform(q: &QuantizedTensor) -> Result<Tensor> {
    if q.params.scheme != Scheme::Uniform {
        return Err(QdkError::Domain(
            "dequantize_uniform called with non-uniform params".into(),
        ));
    }
    let mut out = q.codes.clone();
    for flat in 0..out.len() {
        let (s, zp) = q.params.params_for(&q.codes, flat);
        out.data_mut()[flat] = s * (q.codes.data()[flat] - zp as f64);
    }
    Ok(out)
}

/// Log2 quantization for non-negative inputs with `x/s` in `(0, 1]`:
/// `code = clip(round(-log2(x/s)), 0, 2^k - 1)`.
///
/// Inputs at or below zero map to the maximum code (the smallest
/// representable magnitude) so post-softmax zeros never produce infinities.
pub fn quantize_log2(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    if p.scheme != Scheme::Log2 {
        return Err(QdkError::Domain(
            "quantize_log2 called with non-log2 params".into(),
        ));
    }
    p.validate()?;
    x.ensure_finite("quantize_log2")?;
    let qmax = p.qmax() as f64;
    let mut codes = x.clone();
    for flat in 0..x.len() {
        let (s, _) = p.params_for(x, flat);
        let v = x.data()[flat] / s;
        let c = if v <= 0.0 {
            qmax
        } else {
            round_half_away(-v.log2()).clamp(0.0, qmax)
        };
        codes.data_mut()[flat] = c;
    }
    Ok(QuantizedTensor {
        codes,
        params: p.clone(),
    })
}

/// Log2 dequantization: `x̂ = s · 2^{-code}`.
pub fn dequantize_log2(q: &QuantizedTensor) -> Result<Tensor> {
    if q.params.scheme != Scheme::Log2 {
        return Err(QdkError::Domain(
            "dequantize_log2 called with non-log2 params".into(),
        ));
    }
    let mut out = q.codes.clone();
    for flat in 0..out.len() {
        let (s, _) = q.params.params_for(&q.codes, flat);
        out.data_mut()[flat] = s * (-q.codes.data()[flat]).exp2();
    }
    Ok(out)
}

/// Quantize-dequantize round trip under uniform parameters.
pub fn quantdequant_uniform(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    dequantize_uniform(&quantize_uniform(x, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn uniform_params(s: f64, zp: i64, bits: u8) -> QuantParams {
        QuantParams::per_tensor(bits, Scheme::Uniform, s, zp).unwrap()
    }

    #[test]
    fn fit_minmax_zero_to_fifteen() {
        let x = Tensor::new(vec![16], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = fit_minmax(&x, 4, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        assert_eq!(p.zero_points, vec![0]);
    }

    #[test]
    fn fit_minmax_symmetric_unit_range() {
        // s = 2/15, zp = round(7.5) = 8 with half-away-from-zero rounding.
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let p = fit_minmax(&x, 4, Granularity::PerTensor).unwrap();
        assert_abs_diff_eq!(p.scales[0], 2.0 / 15.0, epsilon = 1e-15);
        assert_eq!(p.zero_points[0], 8);
    }

    #[test]
    fn fit_minmax_constant_tensor_survives() {
        // Degenerate observed range: the scale floor keeps an all-zero
        // tensor alive, and any constant reconstructs within 1e-9.
        let zero = Tensor::new(vec![8], vec![0.0; 8]).unwrap();
        let pz = fit_minmax(&zero, 4, Granularity::PerTensor).unwrap();
        assert_eq!(pz.scales[0], SCALE_FLOOR);
        for c in [0.0, 0.73, -1.9] {
            let x = Tensor::new(vec![8], vec![c; 8]).unwrap();
            let p = fit_minmax(&x, 4, Granularity::PerTensor).unwrap();
            let back = quantdequant_uniform(&x, &p).unwrap();
            for &v in back.data() {
                assert!((v - c).abs() < 1e-9, "c = {c}, got {v}");
            }
        }
    }

    #[test]
    fn fit_minmax_rejects_low_bits() {
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(fit_minmax(&x, 1, Granularity::PerTensor).is_err());
    }

    #[test]
    fn fit_percentile_full_clip_equals_minmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::new(
            vec![64],
            (0..64).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
        )
        .unwrap();
        let a = fit_minmax(&x, 4, Granularity::PerTensor).unwrap();
        let b = fit_percentile(&x, 4, 100.0, Granularity::PerTensor).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_percentile_shrinks_outlier_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal: Normal<f64> = Normal::new(0.0, 0.5).unwrap();
        let mut vals: Vec<f64> = (0..990).map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0)).collect();
        for i in 0..10 {
            vals.push(if i % 2 == 0 { 100.0 } else { -100.0 });
        }
        let x = Tensor::new(vec![1000], vals).unwrap();
        let p = fit_percentile(&x, 4, 99.0, Granularity::PerTensor).unwrap();
        // Percentile oracle on the sampled data: range collapses to roughly
        // [-1, 1], so the scale sits near 2/15.
        let s = p.scales[0];
        assert!(s >= 2.0 / 15.0 * 0.9 && s <= 2.0 / 15.0 * 1.3, "s = {s}");
    }

    #[test]
    fn fit_percentile_constant_tensor() {
        // Degenerate range behaves exactly like fit_minmax, including the
        // scale floor on an all-zero tensor.
        let zero = Tensor::new(vec![8], vec![0.0; 8]).unwrap();
        let pz = fit_percentile(&zero, 4, 99.0, Granularity::PerTensor).unwrap();
        assert_eq!(pz.scales[0], SCALE_FLOOR);
        let x = Tensor::new(vec![8], vec![5.0; 8]).unwrap();
        let p = fit_percentile(&x, 4, 99.0, Granularity::PerTensor).unwrap();
        assert_eq!(p, fit_minmax(&x, 4, Granularity::PerTensor).unwrap());
    }

    #[test]
    fn quantize_uniform_examples() {
        let p = uniform_params(0.5, 3, 4);
        let x = Tensor::new(vec![3], vec![1.0, 10.0, -2.0]).unwrap();
        let q = quantize_uniform(&x, &p).unwrap();
        assert_eq!(q.codes.data(), &[5.0, 15.0, 0.0]);
        q.validate_codes().unwrap();
    }

    #[test]
    fn dequantize_uniform_examples() {
        let p = uniform_params(0.5, 3, 4);
        let q = QuantizedTensor {
            codes: Tensor::new(vec![2], vec![5.0, 3.0]).unwrap(),
            params: p,
        };
        let x = dequantize_uniform(&q).unwrap();
        assert_eq!(x.data(), &[1.0, 0.0]);
    }

    #[test]
    fn uniform_round_trip_error_bound() {
        // Property oracle over 10^4 samples drawn inside the representable
        // range: |x - deq(quant(x))| <= s/2.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = uniform_params(0.37, 5, 4);
        let lo = p.scales[0] * (0 - p.zero_points[0]) as f64;
        let hi = p.scales[0] * (p.qmax() - p.zero_points[0]) as f64;
        let vals: Vec<f64> = (0..10_000)
            .map(|_| lo + rng.random::<f64>() * (hi - lo))
            .collect();
        let x = Tensor::new(vec![vals.len()], vals).unwrap();
        let back = quantdequant_uniform(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= p.scales[0] / 2.0 + 1e-12);
        }
    }

    #[test]
    fn quantize_log2_examples() {
        let p = QuantParams::per_tensor(4, Scheme::Log2, 1.0, 0).unwrap();
        let x = Tensor::new(vec![3], vec![0.25, 1.0, 0.3]).unwrap();
        let q = quantize_log2(&x, &p).unwrap();
        // -log2(0.3) = 1.737, rounds to 2.
        assert_eq!(q.codes.data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn quantize_log2_maps_nonpositive_to_max_code() {
        let p = QuantParams::per_tensor(4, Scheme::Log2, 1.0, 0).unwrap();
        let x = Tensor::new(vec![2], vec![0.0, -0.5]).unwrap();
        let q = quantize_log2(&x, &p).unwrap();
        assert_eq!(q.codes.data(), &[15.0, 15.0]);
    }

    #[test]
    fn dequantize_log2_examples() {
        let p = QuantParams::per_tensor(4, Scheme::Log2, 1.0, 0).unwrap();
        let q = QuantizedTensor {
            codes: Tensor::new(vec![2], vec![2.0, 0.0]).unwrap(),
            params: p,
        };
        let x = dequantize_log2(&q).unwrap();
        assert_eq!(x.data(), &[0.25, 1.0]);
    }

    #[test]
    fn log2_round_trip_exact_on_grid() {
        let p = QuantParams::per_tensor(4, Scheme::Log2, 1.0, 0).unwrap();
        let vals: Vec<f64> = (0..16).map(|j| (-(j as f64)).exp2()).collect();
        let x = Tensor::new(vec![16], vals.clone()).unwrap();
        let back = dequantize_log2(&quantize_log2(&x, &p).unwrap()).unwrap();
        assert_eq!(back.data(), &vals[..]);
    }

    #[test]
    fn per_channel_fit_equals_per_slice_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(
            vec![3, 20],
            (0..60).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect(),
        )
        .unwrap();
        let pc = fit_minmax(&x, 4, Granularity::PerChannel { axis: 0 }).unwrap();
        for c in 0..3 {
            let slice = Tensor::new(vec![20], x.channel_values(0, c).unwrap()).unwrap();
            let pt = fit_minmax(&slice, 4, Granularity::PerTensor).unwrap();
            assert_eq!(pc.scales[c], pt.scales[0]);
            assert_eq!(pc.zero_points[c], pt.zero_points[0]);
        }
    }

    proptest! {
        #[test]
        fn codes_always_in_range(vals in proptest::collection::vec(-1e3f64..1e3, 1..64), bits in 2u8..9) {
            let x = Tensor::new(vec![vals.len()], vals).unwrap();
            let p = fit_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let q = quantize_uniform(&x, &p).unwrap();
            prop_assert!(q.validate_codes().is_ok());
        }

        #[test]
        fn quantize_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let p = uniform_params(0.37, 5, 4);
            let x = Tensor::new(vec![2], vec![a.min(b), a.max(b)]).unwrap();
            let q = quantize_uniform(&x, &p).unwrap();
            prop_assert!(q.codes.data()[0] <= q.codes.data()[1]);
        }

        #[test]
        fn in_range_round_trip_bound(u in 0.0f64..1.0) {
            let p = uniform_params(0.25, 7, 4);
            let lo = p.scales[0] * (0 - p.zero_points[0]) as f64;
            let hi = p.scales[0] * (p.qmax() - p.zero_points[0]) as f64;
            let v = lo + u * (hi - lo);
            let x = Tensor::new(vec![1], vec![v]).unwrap();
            let back = quantdequant_uniform(&x, &p).unwrap();
            prop_assert!((back.data()[0] - v).abs() <= p.scales[0] / 2.0 + 1e-12);
        }
    }
}
