//! Deterministic toy networks and synthetic data.
//!
//! The depth-estimation toy model pairs a small attention encoder with a
//! convolutional decoder. Designated decoder channels are built as rarely
//! firing gates: their kernel rows are scaled up and their bias pushed far
//! negative, so after the GELU the channel is near zero almost everywhere
//! with occasional large spikes, and downstream channels mixing those gates
//! see a heavy-tailed signal-plus-outliers distribution. That reproduces, at
//! desk scale, the per-channel outlier phenomenon this quantization pipeline
//! targets.

use crate::error::{QdkError, Result};
use crate::network::{ActivationKind, Layer, LayerKind, ToyNetwork};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seed salts keep independent sampling streams apart.
const SALT_WEIGHTS: u64 = 0x5eed_0001;
const SALT_CALIB: u64 = 0x5eed_0002;
const SALT_EVAL: u64 = 0x5eed_0003;
const SALT_PROBE: u64 = 0x5eed_0004;

/// Structural parameters of the toy depth network.
#[derive(Debug, Clone)]
pub struct ToyMdeConfig {
    pub seed: u64,
    /// Token/feature width of the encoder and decoder channels.
    pub width: usize,
    /// Number of attention blocks.
    pub depth: usize,
    pub heads: usize,
    /// Input image extent (square) and patch size.
    pub input_size: usize,
    pub patch: usize,
    /// How many decoder channels are built as heavy-tailed outlier gates.
    pub decoder_outlier_channels: usize,
    /// Scale factor applied to the gate rows.
    pub outlier_gain: f64,
    /// Gate firing threshold in units of the pre-activation std.
    pub outlier_threshold_sigmas: f64,
}

impl Default for ToyMdeConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 32,
            depth: 1,
            heads: 4,
            input_size: 32,
            patch: 4,
            decoder_outlier_channels: 4,
            outlier_gain: 500.0,
            outlier_threshold_sigmas: 2.75,
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal: Normal<f64> = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Build the deterministic toy depth-estimation network.
pub fn build_toy_mde(cfg: &ToyMdeConfig) -> Result<ToyNetwork> {
    if cfg.width == 0 || cfg.depth == 0 || cfg.input_size == 0 || cfg.patch == 0 {
        return Err(QdkError::Domain("toy network dimensions must be positive".into()));
    }
    if cfg.input_size % cfg.patch != 0 {
        return Err(QdkError::Domain(format!(
            "input size {} not divisible by patch {}",
            cfg.input_size, cfg.patch
        )));
    }
    if cfg.width % cfg.heads != 0 {
        return Err(QdkError::Domain(format!(
            "width {} not divisible by heads {}",
            cfg.width, cfg.heads
        )));
    }
    if cfg.decoder_outlier_channels > cfg.width / 2 {
        return Err(QdkError::Domain(
            "at most half the decoder channels may be outlier gates".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SALT_WEIGHTS);
    let d = cfg.width;
    let grid = cfg.input_size / cfg.patch;
    let mut layers = Vec::new();

    // Patch-embedding stem.
    layers.push(Layer::new(
        "stem",
        LayerKind::Conv2d {
            kernel: normal_tensor(
                &mut rng,
                vec![d, 3, cfg.patch, cfg.patch],
                1.0 / (3.0 * (cfg.patch * cfg.patch) as f64).sqrt(),
            ),
            bias: Some(normal_tensor(&mut rng, vec![d], 0.02)),
            stride: cfg.patch,
            padding: 0,
        },
    ));
    layers.push(Layer::new("tokens", LayerKind::ImageToTokens));

    for b in 0..cfg.depth {
        layers.push(Layer::new(
            format!("enc{b}.ln"),
            LayerKind::LayerNorm {
                gamma: Tensor::new(vec![d], vec![1.0; d])?,
                beta: Tensor::zeros(vec![d]),
            },
        ));
        layers.push(Layer::new(
            format!("enc{b}.qkv"),
            LayerKind::Linear {
                weight: normal_tensor(&mut rng, vec![3 * d, d], 1.0 / (d as f64).sqrt()),
                bias: None,
            },
        ));
        layers.push(Layer::new(
            format!("enc{b}.attn"),
            LayerKind::AttentionCore {
                heads: cfg.heads,
                prob_quant: None,
            },
        ));
        layers.push(Layer::new(
            format!("enc{b}.proj"),
            LayerKind::Linear {
                weight: normal_tensor(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt()),
                bias: None,
            },
        ));
        layers.push(Layer::new(
            format!("enc{b}.act"),
            LayerKind::Activation(ActivationKind::Gelu),
        ));
        layers.push(Layer::new(
            format!("enc{b}.mlp_in"),
            LayerKind::Linear {
                weight: normal_tensor(&mut rng, vec![2 * d, d], 1.0 / (d as f64).sqrt()),
                bias: Some(normal_tensor(&mut rng, vec![2 * d], 0.02)),
            },
        ));
        layers.push(Layer::new(
            format!("enc{b}.mlp_act"),
            LayerKind::Activation(ActivationKind::Gelu),
        ));
        layers.push(Layer::new(
            format!("enc{b}.mlp_out"),
            LayerKind::Linear {
                weight: normal_tensor(&mut rng, vec![d, 2 * d], 1.0 / (2.0 * d as f64).sqrt()),
                bias: None,
            },
        ));
    }

    layers.push(Layer::new(
        "to_image",
        LayerKind::TokensToImage {
            height: grid,
            width: grid,
        },
    ));

    // Decoder conv 1 carries the outlier gates: scaled rows plus a strongly
    // negative bias keep each gate silent except on rare input patterns.
    let fan1 = (d * 9) as f64;
    let mut k1 = normal_tensor(&mut rng, vec![d, d, 3, 3], 1.0 / fan1.sqrt());
    let mut b1 = Tensor::zeros(vec![d]);
    for c in 0..cfg.decoder_outlier_channels {
        // Gate channels occupy the first rows. Each tap group is centered so
        // the gate responds to local contrast, not per-image DC level; that
        // keeps its firing rate stable across input streams.
        for ic in 0..d {
            let start = (c * d + ic) * 9;
            let mean: f64 = k1.data()[start..start + 9].iter().sum::<f64>() / 9.0;
            for t in 0..9 {
                k1.data_mut()[start + t] = (k1.data()[start + t] - mean) * cfg.outlier_gain;
            }
        }
    }
    if cfg.decoder_outlier_channels > 0 {
        // Probe the encoder with deterministic images and bias each gate at
        // the percentile matching the firing threshold, so only the far tail
        // of input patterns activates it.
        let encoder = ToyNetwork {
            layers: layers.clone(),
            input_shape: vec![1, 3, cfg.input_size, cfg.input_size],
        };
        let probes = synthetic_images(cfg.seed ^ SALT_PROBE, 32, cfg.input_size);
        let kmat = k1.reshape(vec![d, d * 9])?;
        let mut gate_vals: Vec<Vec<f64>> = vec![Vec::new(); cfg.decoder_outlier_channels];
        for p in &probes {
            let feat = encoder.forward(p)?;
            let cols = crate::tensor::im2col(&feat, 3, 3, 1, 1)?;
            let pre = crate::tensor::matmul(&kmat, &cols)?;
            let positions = cols.shape()[1];
            for (c, acc) in gate_vals.iter_mut().enumerate() {
                acc.extend_from_slice(&pre.data()[c * positions..(c + 1) * positions]);
            }
        }
        // Φ(τ) as a firing percentile; τ = 2.33 fires on roughly 1% of
        // patches.
        let fire_pct = (100.0 * normal_cdf(cfg.outlier_threshold_sigmas)).clamp(50.0, 99.9);
        for (c, vals) in gate_vals.iter().enumerate() {
            b1.data_mut()[c] = -crate::tensor::percentile(vals, fire_pct)?;
        }
    }
    layers.push(Layer::new(
        "dec1",
        LayerKind::Conv2d {
            kernel: k1,
            bias: Some(b1),
            stride: 1,
            padding: 1,
        },
    ));
    layers.push(Layer::new(
        "dec1.act",
        LayerKind::Activation(ActivationKind::Gelu),
    ));

    // Decoder conv 2 routes the gate channels into alternating output
    // channels through explicit center taps, so half its post-activation
    // outputs are ordinary signal plus rare large spikes. Base couplings to
    // the gates are zeroed so the spike paths are exactly the planted ones.
    let mut k2 = normal_tensor(&mut rng, vec![d, d, 3, 3], 1.0 / fan1.sqrt());
    let mut b2 = normal_tensor(&mut rng, vec![d], 0.02);
    if cfg.decoder_outlier_channels > 0 {
        let mix = 2.5 / fan1.sqrt();
        for oc in 0..d {
            for c in 0..cfg.decoder_outlier_channels {
                let base = (oc * d + c) * 9;
                for t in 0..9 {
                    k2.data_mut()[base + t] = 0.0;
                }
                if oc % 2 == 0 {
                    // Center tap.
                    k2.data_mut()[base + 4] = mix;
                }
            }
        }
        // Spike-bearing rows are scaled up whole, so their ordinary signal
        // carries most of the depth information; per-channel weight fitting
        // absorbs a uniform row scale exactly.
        for oc in (0..d).step_by(2) {
            let start = oc * d * 9;
            for t in 0..d * 9 {
                k2.data_mut()[start + t] *= 3.0;
            }
            b2.data_mut()[oc] *= 3.0;
        }
    }
    layers.push(Layer::new(
        "dec2",
        LayerKind::Conv2d {
            kernel: k2,
            bias: Some(b2),
            stride: 1,
            padding: 1,
        },
    ));
    layers.push(Layer::new(
        "dec2.act",
        LayerKind::Activation(ActivationKind::Gelu),
    ));

    layers.push(Layer::new(
        "dec3",
        LayerKind::Conv2d {
            kernel: normal_tensor(&mut rng, vec![1, d, 3, 3], 1.0 / fan1.sqrt()),
            bias: Some(Tensor::new(vec![1], vec![0.5])?),
            stride: 1,
            padding: 1,
        },
    ));
    layers.push(Layer::new(
        "depth",
        LayerKind::Activation(ActivationKind::Softplus),
    ));

    Ok(ToyNetwork {
        layers,
        input_shape: vec![1, 3, cfg.input_size, cfg.input_size],
    })
}

/// Smooth synthetic RGB images: a few random spatial harmonics per channel
/// plus mild noise, deterministic from the seed.
fn synthetic_images(seed: u64, count: usize, size: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    (0..count)
        .map(|_| {
            let mut img = Tensor::zeros(vec![1, 3, size, size]);
            for ch in 0..3 {
                let harmonics: Vec<(f64, f64, f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            rng.random::<f64>() * 3.0,        // fx
                            rng.random::<f64>() * 3.0,        // fy
                            rng.random::<f64>() * std::f64::consts::TAU, // phase
                            normal.sample(&mut rng) * 0.6,    // amplitude
                        )
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let mut v = 0.0;
                        for &(fx, fy, ph, amp) in &harmonics {
                            v += amp
                                * (std::f64::consts::TAU
                                    * (fx * x as f64 + fy * y as f64)
                                    / size as f64
                                    + ph)
                                    .sin();
                        }
                        v += 0.05 * normal.sample(&mut rng);
                        img.data_mut()[(ch * size + y) * size + x] = v;
                    }
                }
            }
            img
        })
        .collect()
}

/// Calibration images for a given run seed.
pub fn calibration_images(seed: u64, count: usize, size: usize) -> Vec<Tensor> {
    synthetic_images(seed ^ SALT_CALIB, count, size)
}

/// Held-out evaluation images, drawn from a stream disjoint from
/// calibration.
pub fn evaluation_images(seed: u64, count: usize, size: usize) -> Vec<Tensor> {
    synthetic_images(seed ^ SALT_EVAL, count, size)
}

/// Excess kurtosis of a sample.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

/// Per-channel excess kurtosis of the activation feeding `layer_name`,
/// measured across the given inputs.
pub fn channel_kurtosis_at(
    net: &ToyNetwork,
    layer_name: &str,
    inputs: &[Tensor],
) -> Result<Vec<f64>> {
    let idx = net
        .layers
        .iter()
        .position(|l| l.name == layer_name)
        .ok_or_else(|| QdkError::Domain(format!("no layer named {layer_name}")))?;
    let mut per_channel: Vec<Vec<f64>> = Vec::new();
    for x in inputs {
        let traces = net.forward_trace(x)?;
        let act = &traces[idx].input;
        let (_, channels, _) = act.axis_split(1)?;
        if per_channel.is_empty() {
            per_channel = vec![Vec::new(); channels];
        }
        for (c, acc) in per_channel.iter_mut().enumerate() {
            acc.extend(act.channel_values(1, c)?);
        }
    }
    Ok(per_channel.iter().map(|v| excess_kurtosis(v)).collect())
}


/// Standard normal CDF via the error function complement (Abramowitz &
/// Stegun 7.1.26 rational approximation).
fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}
