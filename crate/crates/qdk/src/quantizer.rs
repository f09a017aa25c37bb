//! End-to-end network quantization.
//!
//! The pipeline walks quantizable layers in topological order. For each
//! layer it (a) applies the calibrated input-activation quantization
//! (polished where configured), (b) updates the still-float weights with the
//! closed-form compensation for the activation quantization error, (c)
//! accumulates Kronecker Fisher factors from proxy-loss gradients on the
//! partially quantized network, and (d) reconstructs the weight rounding
//! under the factored quadratic loss. Baseline methods skip (b)–(d) and
//! round to nearest instead.
//!
//! Activation ranges and polishing factors are calibrated once on the float
//! network and frozen; compensation and Fisher statistics use the
//! progressively quantized network, so each layer sees the inputs it will
//! see at inference time.

use crate::compensate::{compensate, CompensationProblem};
use crate::error::{QdkError, Result};
use crate::fisher::{accumulate_kfac, KfacFactors};
use crate::network::{ActQuant, LayerKind, LayerQuant, ToyNetwork};
use crate::polish::{calibrate_polish, polish, polished_params_from_ranges, PolishFactors};
use crate::quant::{
    fit_minmax, quantdequant_uniform, uniform_params_from_ranges, Granularity, QuantParams,
    Scheme,
};
use crate::rounding::{reconstruct_layer, ReconstructionConfig, ReconstructionLog};
use crate::tensor::{im2col, percentile, Tensor};

/// Quantization method: the full pipeline or a range-calibration baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Polish + compensation + Fisher-weighted adaptive rounding.
    QuartDepth,
    /// Per-channel min/max activation ranges, round-to-nearest weights.
    Minmax,
    /// Percentile-clipped activation ranges, round-to-nearest weights.
    Percentile,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quartdepth" => Ok(Self::QuartDepth),
            "minmax" => Ok(Self::Minmax),
            "percentile" => Ok(Self::Percentile),
            other => Err(QdkError::Config(format!(
                "unknown method '{other}' (expected quartdepth|minmax|percentile)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::QuartDepth => "quartdepth",
            Self::Minmax => "minmax",
            Self::Percentile => "percentile",
        }
    }
}

/// Everything that controls one quantization run.
#[derive(Debug, Clone)]
pub struct QuantizePolicy {
    pub method: Method,
    pub weight_bits: u8,
    /// Activation bit-width; `None` keeps activations in real arithmetic
    /// (weights-only quantization).
    pub act_bits: Option<u8>,
    /// Percentile rank for polishing factors.
    pub epsilon: f64,
    /// Dampening ratio for the compensation solve.
    pub damp_ratio: f64,
    /// Clip percentile for the percentile baseline.
    pub percentile_clip: f64,
    /// Log2-quantize attention probabilities at the activation bit-width.
    pub log2_attention_probs: bool,
    /// Override the polish allow-list; `None` polishes every decoder
    /// convolution input (convolutions after the token-to-image boundary).
    pub polish_allowlist: Option<Vec<String>>,
    pub reconstruction: ReconstructionConfig,
}

impl QuantizePolicy {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            weight_bits: 4,
            act_bits: Some(4),
            epsilon: 95.0,
            damp_ratio: 0.01,
            percentile_clip: 99.9,
            log2_attention_probs: true,
            polish_allowlist: None,
            reconstruction: ReconstructionConfig::default(),
        }
    }

    fn polishes(&self, net: &ToyNetwork, layer_idx: usize) -> bool {
        if self.method != Method::QuartDepth || self.act_bits.is_none() {
            return false;
        }
        match &self.polish_allowlist {
            Some(names) => names.iter().any(|n| n == &net.layers[layer_idx].name),
            None => {
                matches!(net.layers[layer_idx].kind, LayerKind::Conv2d { .. })
                    && net.layers[..layer_idx]
                        .iter()
                        .any(|l| matches!(l.kind, LayerKind::TokensToImage { .. }))
            }
        }
    }
}

/// Calibrated activation quantization for one layer.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub layer: usize,
    pub act: ActQuant,
}

/// Calibration artifacts for a network: frozen per-layer activation
/// parameters and polishing factors.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub layers: Vec<LayerCalibration>,
}

impl Calibration {
    pub fn for_layer(&self, idx: usize) -> Option<&LayerCalibration> {
        self.layers.iter().find(|c| c.layer == idx)
    }
}

/// Per-channel value streams of one activation site across samples.
fn channel_streams(samples: &[Tensor], axis: usize) -> Result<Vec<Vec<f64>>> {
    let (_, channels, _) = samples[0].axis_split(axis)?;
    let mut streams = vec![Vec::new(); channels];
    for s in samples {
        let (_, ch, _) = s.axis_split(axis)?;
        if ch != channels {
            return Err(QdkError::Shape(
                "calibration samples disagree on channel extent".into(),
            ));
        }
        for (c, acc) in streams.iter_mut().enumerate() {
            acc.extend(s.channel_values(axis, c)?);
        }
    }
    Ok(streams)
}

fn ranges_of(streams: &[Vec<f64>]) -> Vec<(f64, f64)> {
    streams
        .iter()
        .map(|v| {
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (min, max)
        })
        .collect()
}

/// Calibrate activation quantization for every quantizable layer from float
/// network activations.
pub fn calibrate_network(
    net: &ToyNetwork,
    calibration: &[Tensor],
    policy: &QuantizePolicy,
) -> Result<Calibration> {
    let Some(act_bits) = policy.act_bits else {
        return Ok(Calibration { layers: Vec::new() });
    };
    if calibration.is_empty() {
        return Err(QdkError::Domain("calibration set is empty".into()));
    }
    // One trace per sample; inputs at each quantizable layer.
    let mut traces = Vec::with_capacity(calibration.len());
    for x in calibration {
        traces.push(net.forward_trace(x)?);
    }
    let mut layers = Vec::new();
    for idx in net.quantizable_indices() {
        let inputs: Vec<Tensor> = traces.iter().map(|t| t[idx].input.clone()).collect();
        let axis = 1; // channel axis for both token matrices and NCHW images
        let act = if policy.polishes(net, idx) {
            let factors = calibrate_polish(&inputs, policy.epsilon, axis)?;
            let polished: Vec<Tensor> = inputs
                .iter()
                .map(|x| polish(x, &factors))
                .collect::<Result<_>>()?;
            let streams = channel_streams(&polished, axis)?;
            let params = polished_params_from_ranges(ranges_of(&streams), act_bits, axis)?;
            ActQuant {
                params,
                polish: Some(factors),
            }
        } else {
            let streams = channel_streams(&inputs, axis)?;
            let ranges = match policy.method {
                Method::Percentile => streams
                    .iter()
                    .map(|v| {
                        let hi = percentile(v, policy.percentile_clip)?;
                        let lo = percentile(v, 100.0 - policy.percentile_clip)?;
                        Ok((lo, hi))
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => ranges_of(&streams),
            };
            ActQuant {
                params: uniform_params_from_ranges(
                    ranges,
                    act_bits,
                    Granularity::PerChannel { axis },
                )?,
                polish: None,
            }
        };
        layers.push(LayerCalibration { layer: idx, act });
    }
    Ok(Calibration { layers })
}

/// Per-sample, per-position gradient and activation capture for one layer.
struct LayerSamples {
    gradients: Vec<Tensor>,
    activations: Vec<Tensor>,
}

/// Gradients of the proxy loss `½‖f(x) − target‖²` with respect to every
/// layer's output, per calibration sample.
///
/// Targets are typically the frozen float network's outputs; passing the
/// network's own outputs yields identically zero gradients.
pub fn capture_gradients(
    net: &ToyNetwork,
    inputs: &[Tensor],
    targets: &[Tensor],
    batch_size: usize,
) -> Result<Vec<Vec<Tensor>>> {
    if inputs.len() != targets.len() {
        return Err(QdkError::Shape(
            "inputs and targets must pair up".into(),
        ));
    }
    if batch_size == 0 {
        return Err(QdkError::Domain("batch_size must be >= 1".into()));
    }
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); net.layers.len()];
    for chunk in inputs.chunks(batch_size).zip(targets.chunks(batch_size)) {
        for (x, t) in chunk.0.iter().zip(chunk.1) {
            let traces = net.forward_trace(x)?;
            let out = &traces.last().expect("non-empty network").output;
            let gout = out.sub(t)?;
            let grads = net.backward_trace(&traces, &gout)?;
            for (l, g) in grads.into_iter().enumerate() {
                per_layer[l].push(g);
            }
        }
    }
    Ok(per_layer)
}

/// Split a layer's captured output gradient and consumed input into paired
/// per-position vectors for KFAC accumulation.
fn layer_sample_vectors(
    layer_kind: &LayerKind,
    grad: &Tensor,
    input_q: &Tensor,
) -> Result<LayerSamples> {
    match layer_kind {
        LayerKind::Linear { weight, .. } => {
            let (n, out) = (grad.shape()[0], grad.shape()[1]);
            let dim_in = weight.shape()[1];
            let mut gradients = Vec::with_capacity(n);
            let mut activations = Vec::with_capacity(n);
            for r in 0..n {
                gradients.push(Tensor::new(
                    vec![out],
                    grad.data()[r * out..(r + 1) * out].to_vec(),
                )?);
                activations.push(Tensor::new(
                    vec![dim_in],
                    input_q.data()[r * dim_in..(r + 1) * dim_in].to_vec(),
                )?);
            }
            Ok(LayerSamples {
                gradients,
                activations,
            })
        }
        LayerKind::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let out = kernel.shape()[0];
            let cols = im2col(input_q, kernel.shape()[2], kernel.shape()[3], *stride, *padding)?;
            let positions = cols.shape()[1];
            let patch = cols.shape()[0];
            let gmat = grad.reshape(vec![out, positions])?;
            let mut gradients = Vec::with_capacity(positions);
            let mut activations = Vec::with_capacity(positions);
            for p in 0..positions {
                let mut gv = Tensor::zeros(vec![out]);
                for o in 0..out {
                    gv.data_mut()[o] = gmat.data()[o * positions + p];
                }
                let mut xv = Tensor::zeros(vec![patch]);
                for i in 0..patch {
                    xv.data_mut()[i] = cols.data()[i * positions + p];
                }
                gradients.push(gv);
                activations.push(xv);
            }
            Ok(LayerSamples {
                gradients,
                activations,
            })
        }
        _ => Err(QdkError::UnsupportedLayer(
            "KFAC capture applies to linear and conv layers".into(),
        )),
    }
}

/// Inputs of one layer as an (in × columns) matrix: features × tokens for
/// linear layers, im2col patches × positions for convolutions.
fn input_columns(layer_kind: &LayerKind, samples: &[Tensor]) -> Result<Tensor> {
    let mats: Vec<Tensor> = samples
        .iter()
        .map(|x| match layer_kind {
            LayerKind::Linear { .. } => x.transpose2(),
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => im2col(x, kernel.shape()[2], kernel.shape()[3], *stride, *padding),
            _ => Err(QdkError::UnsupportedLayer(
                "input columns apply to linear and conv layers".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let rows = mats[0].shape()[0];
    let total: usize = mats.iter().map(|m| m.shape()[1]).sum();
    let mut out = Tensor::zeros(vec![rows, total]);
    let mut col = 0;
    for m in &mats {
        let c = m.shape()[1];
        for r in 0..rows {
            for j in 0..c {
                out.data_mut()[r * total + col + j] = m.data()[r * c + j];
            }
        }
        col += c;
    }
    Ok(out)
}

/// Progress events from the quantization pipeline.
#[derive(Debug, Clone)]
pub enum PipelineEvent {
    LayerStarted { layer: String, index: usize },
    Reconstruction { layer: String, log: ReconstructionLog },
    LayerFinished { layer: String, rtn_loss: f64, final_loss: f64 },
}

/// Quantize a network per the policy, returning the quantized clone.
///
/// Non-linear layers stay in real arithmetic throughout; quantizable layer
/// weights end up on their quantization grid with parameters attached.
pub fn quantize_network(
    net: &ToyNetwork,
    calibration_set: &[Tensor],
    policy: &QuantizePolicy,
    mut on_event: impl FnMut(&PipelineEvent),
) -> Result<ToyNetwork> {
    if calibration_set.is_empty() {
        return Err(QdkError::Domain("calibration set is empty".into()));
    }
    policy.reconstruction.validate()?;
    let float_net = net.clone();
    let mut work = net.clone();

    // Post-softmax attention probabilities take log2 quantization.
    if let Some(bits) = policy.act_bits {
        if policy.log2_attention_probs {
            for layer in &mut work.layers {
                if let LayerKind::AttentionCore { prob_quant, .. } = &mut layer.kind {
                    *prob_quant = Some(QuantParams::per_tensor(bits, Scheme::Log2, 1.0, 0)?);
                }
            }
        }
    }

    let calib = calibrate_network(&float_net, calibration_set, policy)?;

    // Frozen float outputs are the proxy-loss targets.
    let float_outputs: Vec<Tensor> = calibration_set
        .iter()
        .map(|x| float_net.forward(x))
        .collect::<Result<_>>()?;

    for idx in net.quantizable_indices() {
        on_event(&PipelineEvent::LayerStarted {
            layer: work.layers[idx].name.clone(),
            index: idx,
        });

        // (a) Inputs under the already-quantized upstream network, then this
        // layer's frozen activation quantization.
        let mixed_inputs: Vec<Tensor> = calibration_set
            .iter()
            .map(|x| Ok(work.forward_trace(x)?[idx].input.clone()))
            .collect::<Result<_>>()?;
        if let Some(c) = calib.for_layer(idx) {
            work.layers[idx].quant.input_quant = Some(c.act.clone());
        }

        // (b) Closed-form weight compensation for the activation error.
        if policy.method == Method::QuartDepth {
            if let Some(c) = calib.for_layer(idx) {
                let quantized_inputs: Vec<Tensor> = mixed_inputs
                    .iter()
                    .map(|x| c.act.apply(x))
                    .collect::<Result<_>>()?;
                let kind = work.layers[idx].kind.clone();
                let x_cols = input_columns(&kind, &mixed_inputs)?;
                let xh_cols = input_columns(&kind, &quantized_inputs)?;
                let w = work.layers[idx].weight_matrix().expect("quantizable");
                let delta = compensate(&CompensationProblem {
                    weights: &w,
                    activations: &x_cols,
                    quantized_activations: &xh_cols,
                    damp_ratio: policy.damp_ratio,
                })?;
                let updated = w.add(&delta)?;
                work.layers[idx].set_weight_matrix(&updated)?;
            }
        }

        // Weight grid on the (possibly compensated) weights.
        let w = work.layers[idx].weight_matrix().expect("quantizable");
        let wparams = fit_minmax(&w, policy.weight_bits, Granularity::PerChannel { axis: 0 })?;

        let (quantized_w, rtn_loss, final_loss) = if policy.method == Method::QuartDepth {
            // (c) Fisher factors from proxy-loss gradients on the current
            // mixed network.
            let samples = collect_kfac_samples(
                &work,
                calibration_set,
                &float_outputs,
                idx,
                policy.reconstruction.batch_size,
            )?;
            let count = samples.gradients.len().max(1);
            let mut factors = accumulate_kfac(&samples.gradients, &samples.activations, count)?;
            // A zero gradient factor (no upstream quantization error yet)
            // degenerates the objective; fall back to an unweighted output
            // factor so rounding still minimizes layer output error.
            let gscale = factors.g.frob_norm();
            if gscale < 1e-24 {
                factors = KfacFactors::new(
                    Tensor::identity(factors.out_dim()),
                    factors.a.clone(),
                    factors.sample_count,
                )?;
            }
            let layer_name = work.layers[idx].name.clone();
            let outcome = reconstruct_layer(
                &w,
                &wparams,
                &factors,
                &policy.reconstruction,
                |log| {
                    on_event(&PipelineEvent::Reconstruction {
                        layer: layer_name.clone(),
                        log: *log,
                    })
                },
            )?;
            (outcome.weights, outcome.rtn_loss, outcome.quadratic_loss)
        } else {
            let q = quantdequant_uniform(&w, &wparams)?;
            (q, 0.0, 0.0)
        };

        work.layers[idx].set_weight_matrix(&quantized_w)?;
        work.layers[idx].quant.weight_params = Some(wparams);
        on_event(&PipelineEvent::LayerFinished {
            layer: work.layers[idx].name.clone(),
            rtn_loss,
            final_loss,
        });
    }
    Ok(work)
}

fn collect_kfac_samples(
    work: &ToyNetwork,
    calibration_set: &[Tensor],
    float_outputs: &[Tensor],
    layer_idx: usize,
    batch_size: usize,
) -> Result<LayerSamples> {
    let mut gradients = Vec::new();
    let mut activations = Vec::new();
    for chunk in calibration_set
        .chunks(batch_size.max(1))
        .zip(float_outputs.chunks(batch_size.max(1)))
    {
        for (x, target) in chunk.0.iter().zip(chunk.1) {
            let traces = work.forward_trace(x)?;
            let out = &traces.last().expect("non-empty network").output;
            let gout = out.sub(target)?;
            let grads = work.backward_trace(&traces, &gout)?;
            let samples = layer_sample_vectors(
                &work.layers[layer_idx].kind,
                &grads[layer_idx],
                &traces[layer_idx].input_q,
            )?;
            gradients.extend(samples.gradients);
            activations.extend(samples.activations);
        }
    }
    Ok(LayerSamples {
        gradients,
        activations,
    })
}

/// Attach an already-serialized quantization state to a network (used when
/// loading quantized models from disk).
pub fn attach_quant_state(
    net: &mut ToyNetwork,
    layer_idx: usize,
    state: LayerQuant,
) -> Result<()> {
    if layer_idx >= net.layers.len() {
        return Err(QdkError::Shape(format!(
            "layer index {layer_idx} out of range"
        )));
    }
    net.layers[layer_idx].quant = state;
    Ok(())
}
