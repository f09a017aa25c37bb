//! Learned rounding of weights onto their quantization grid.
//!
//! Every weight starts at its floor grid point; a learnable variable `v`
//! decides per weight whether to round down or up. The soft quantizer
//!
//! ```text
//! ŵ = s · (clip(⌊w/s⌋ + σ(v) + zp, 0, 2^k − 1) − zp)
//! ```
//!
//! uses the rectified sigmoid `σ(v) = clip(sigmoid(v)·(ζ−γ) + γ, 0, 1)` so
//! training can move smoothly between the two grid points while the annealed
//! penalty `h(v) = Σ (1 − |2σ(v)−1|^β)` forces a binary decision. The
//! optimization objective is the Kronecker-factored quadratic loss on
//! `w − ŵ(v)` plus that penalty; hard rounding and a greedy single-flip
//! descent finish the layer, and the round-to-nearest solution is kept as a
//! fallback candidate so the result never loses to it.

use crate::error::{QdkError, Result};
use crate::fisher::{quadratic_grad, quadratic_loss, KfacFactors};
use crate::quant::{QuantParams, Scheme};
use crate::tensor::Tensor;

/// Rectified sigmoid stretch parameters.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// Saturation value for `v`; `σ(±V_SAT)` is exactly 0 or 1 after
/// rectification.
const V_SAT: f64 = 12.0;

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rectified sigmoid mapping the unconstrained variable to [0, 1].
pub fn rectified_sigmoid(v: f64) -> f64 {
    (logistic(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero in the clipped zones.
pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let raw = logistic(v) * (ZETA - GAMMA) + GAMMA;
    if !(0.0..=1.0).contains(&raw) {
        return 0.0;
    }
    let s = logistic(v);
    s * (1.0 - s) * (ZETA - GAMMA)
}

/// Inverse of the rectified sigmoid on its interior; used to initialize `v`
/// so that `σ(v)` equals each weight's fractional grid offset.
pub fn v_for_sigma(sigma: f64) -> f64 {
    let t = ((sigma - GAMMA) / (ZETA - GAMMA)).clamp(1e-12, 1.0 - 1e-12);
    (t / (1.0 - t)).ln()
}

/// Learnable rounding state for one layer.
#[derive(Debug, Clone)]
pub struct RoundingState {
    /// Unconstrained rounding variables, shaped like the layer weight.
    pub v: Tensor,
    /// Current annealing temperature.
    pub beta: f64,
    /// Penalty strength.
    pub lambda_reg: f64,
    /// Optimizer step.
    pub step: usize,
}

/// Soft-quantize weights with the current rounding variables.
///
/// At `σ(v) ∈ {0, 1}` the result is an exact grid point (pure floor or pure
/// ceiling, clipping permitting); in between it interpolates for training.
pub fn adaround_quantize(w: &Tensor, params: &QuantParams, v: &Tensor) -> Result<Tensor> {
    if params.scheme != Scheme::Uniform {
        return Err(QdkError::Domain(
            "adaptive rounding requires uniform quantization params".into(),
        ));
    }
    params.validate()?;
    if w.shape() != v.shape() {
        return Err(QdkError::Shape(format!(
            "weights {:?} and rounding variables {:?} differ",
            w.shape(),
            v.shape()
        )));
    }
    let qmax = params.qmax() as f64;
    let mut out = w.clone();
    for flat in 0..w.len() {
        let (s, zp) = params.params_for(w, flat);
        let base = (w.data()[flat] / s).floor();
        let sigma = rectified_sigmoid(v.data()[flat]);
        let code = (base + sigma + zp as f64).clamp(0.0, qmax);
        out.data_mut()[flat] = s * (code - zp as f64);
    }
    Ok(out)
}

/// Binarization penalty `h(v) = Σ_i (1 − |2σ(v_i) − 1|^β)`.
///
/// Zero when every `σ(v)` sits at 0 or 1; equal to the element count when
/// every `σ(v)` sits at ½.
pub fn regularizer(v: &Tensor, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(QdkError::Domain(format!("beta {beta} must be positive")));
    }
    Ok(v.data()
        .iter()
        .map(|&vi| 1.0 - (2.0 * rectified_sigmoid(vi) - 1.0).abs().powf(beta))
        .sum())
}

/// Hyperparameters of the per-layer rounding optimization.
#[derive(Debug, Clone)]
pub struct ReconstructionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda_reg: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            lambda_reg: 0.01,
            batch_size: 1,
            warmup_fraction: 0.2,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(QdkError::Domain("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(QdkError::Domain("learning rate must be positive".into()));
        }
        if !(self.beta_end > 0.0) || self.beta_start < self.beta_end {
            return Err(QdkError::Domain(
                "need beta_start >= beta_end > 0".into(),
            ));
        }
        if self.lambda_reg < 0.0 {
            return Err(QdkError::Domain("lambda_reg must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(QdkError::Domain("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(QdkError::Domain(
                "warmup_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// β at a given step: held at `beta_start` through warmup, then annealed
    /// geometrically down to `beta_end`.
    pub fn beta_at(&self, step: usize) -> f64 {
        let warmup = (self.iterations as f64 * self.warmup_fraction) as usize;
        if step < warmup {
            return self.beta_start;
        }
        let span = (self.iterations - warmup).max(1);
        let t = (step - warmup) as f64 / (span.saturating_sub(1)).max(1) as f64;
        self.beta_start * (self.beta_end / self.beta_start).powf(t)
    }

    fn warmup_steps(&self) -> usize {
        (self.iterations as f64 * self.warmup_fraction) as usize
    }
}

/// One progress record of the rounding optimizer.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionLog {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
    pub beta: f64,
}

/// Result of reconstructing one layer.
#[derive(Debug, Clone)]
pub struct ReconstructionOutcome {
    /// Quantized weights, exact grid values.
    pub weights: Tensor,
    /// Final rounding variables; every `σ(v)` is exactly 0 or 1.
    pub v: Tensor,
    /// Quadratic loss of the returned rounding.
    pub quadratic_loss: f64,
    /// Quadratic loss of the round-to-nearest baseline.
    pub rtn_loss: f64,
}

/// Grid values both rounding choices produce for every element.
struct GridChoice {
    floor_val: Vec<f64>,
    ceil_val: Vec<f64>,
}

fn grid_choices(w: &Tensor, params: &QuantParams) -> GridChoice {
    let qmax = params.qmax() as f64;
    let n = w.len();
    let mut floor_val = Vec::with_capacity(n);
    let mut ceil_val = Vec::with_capacity(n);
    for flat in 0..n {
        let (s, zp) = params.params_for(w, flat);
        let base = (w.data()[flat] / s).floor();
        let fc = (base + zp as f64).clamp(0.0, qmax);
        let cc = (base + 1.0 + zp as f64).clamp(0.0, qmax);
        floor_val.push(s * (fc - zp as f64));
        ceil_val.push(s * (cc - zp as f64));
    }
    GridChoice {
        floor_val,
        ceil_val,
    }
}

/// Quadratic loss of a binary rounding choice vector.
fn choice_loss(
    w: &Tensor,
    grid: &GridChoice,
    choices: &[bool],
    factors: &KfacFactors,
) -> Result<f64> {
    let mut d = w.clone();
    for flat in 0..w.len() {
        let val = if choices[flat] {
            grid.ceil_val[flat]
        } else {
            grid.floor_val[flat]
        };
        d.data_mut()[flat] = w.data()[flat] - val;
    }
    quadratic_loss(&d, factors)
}

/// Pair flips are searched only on layers up to this many weights; the
/// candidate set grows quadratically.
const PAIR_FLIP_LIMIT: usize = 2048;

/// Sequential relax-and-round runs only on layers up to this many weights.
const RELAX_ROUND_LIMIT: usize = 256;

/// Layers up to this many weights get an exact branch-and-bound pass over
/// the rounding choices; beyond it the annealed + greedy path stands alone.
const BNB_LIMIT: usize = 16;

/// Exact search over binary roundings by depth-first branch and bound.
///
/// Nodes relax the free coordinates to σ ∈ [0,1] and minimize the quadratic
/// by coordinate descent; that relaxed value lower-bounds every completion of
/// the node, so subtrees that cannot beat the incumbent are pruned. Branching
/// picks the most ambiguous relaxed coordinate, nearest corner first.
fn bnb_choices(
    w: &Tensor,
    grid: &GridChoice,
    factors: &KfacFactors,
    incumbent_choices: &[bool],
) -> Result<Vec<bool>> {
    let dim_in = factors.in_dim();
    let out = factors.out_dim();
    let n = w.len();
    let delta: Vec<f64> = (0..n)
        .map(|i| grid.ceil_val[i] - grid.floor_val[i])
        .collect();

    #[derive(Clone)]
    struct Node {
        sigma: Vec<f64>,
        committed: Vec<Option<bool>>,
        d: Vec<f64>,
    }

    let base_d = |sigma: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| w.data()[i] - grid.floor_val[i] - sigma[i] * delta[i])
            .collect()
    };

    let loss_of = |d: &[f64]| -> Result<f64> {
        let t = Tensor::new(w.shape().to_vec(), d.to_vec())?;
        quadratic_loss(&t, factors)
    };

    // Minimize the relaxation over free coordinates in place; returns the
    // relaxed loss (a valid lower bound for the node).
    let relax = |node: &mut Node| -> Result<f64> {
        for _ in 0..400 {
            let mut moved = 0.0f64;
            for i in 0..n {
                if node.committed[i].is_some() || delta[i] == 0.0 {
                    continue;
                }
                let (r, c) = (i / dim_in, i % dim_in);
                let curv = 2.0 * delta[i] * delta[i] * factors.g.at2(r, r) * factors.a.at2(c, c);
                if curv <= 0.0 {
                    continue;
                }
                // (G D A)_{rc} for this single entry.
                let mut gda = 0.0;
                for row in 0..out {
                    let gr = factors.g.at2(r, row);
                    if gr == 0.0 {
                        continue;
                    }
                    let drow = &node.d[row * dim_in..(row + 1) * dim_in];
                    let mut acc = 0.0;
                    for j in 0..dim_in {
                        acc += drow[j] * factors.a.at2(j, c);
                    }
                    gda += gr * acc;
                }
                let grad = -2.0 * delta[i] * gda;
                let new = (node.sigma[i] - grad / curv).clamp(0.0, 1.0);
                let step = new - node.sigma[i];
                if step != 0.0 {
                    node.sigma[i] = new;
                    node.d[i] -= step * delta[i];
                    moved = moved.max(step.abs());
                }
            }
            if moved < 1e-12 {
                break;
            }
        }
        loss_of(&node.d)
    };

    let mut best_choices = incumbent_choices.to_vec();
    let mut incumbent = choice_loss(w, grid, incumbent_choices, factors)?;
    let prune_slack = 1e-9 * incumbent.max(1.0);

    let root = Node {
        sigma: vec![0.5; n],
        committed: vec![None; n],
        d: base_d(&vec![0.5; n]),
    };
    let mut stack = vec![root];
    let mut nodes = 0usize;
    while let Some(mut node) = stack.pop() {
        nodes += 1;
        if nodes > 500_000 {
            break;
        }
        let bound = relax(&mut node)?;
        if bound >= incumbent - prune_slack {
            continue;
        }
        // Most ambiguous free coordinate.
        let pick = (0..n)
            .filter(|&i| node.committed[i].is_none())
            .min_by(|&a, &b| {
                let da = (node.sigma[a] - 0.5).abs();
                let db = (node.sigma[b] - 0.5).abs();
                da.partial_cmp(&db).unwrap()
            });
        let Some(i) = pick else {
            // All committed: the relaxed loss is the exact leaf loss.
            if bound < incumbent {
                incumbent = bound;
                best_choices = node
                    .committed
                    .iter()
                    .map(|c| c.unwrap_or(false))
                    .collect();
            }
            continue;
        };
        let near = node.sigma[i] >= 0.5;
        for &choice in &[!near, near] {
            // Push the nearest corner last so it is explored first.
            let mut child = node.clone();
            child.committed[i] = Some(choice);
            let target = if choice { 1.0 } else { 0.0 };
            let step = target - child.sigma[i];
            child.sigma[i] = target;
            child.d[i] -= step * delta[i];
            stack.push(child);
        }
    }
    Ok(best_choices)
}

/// Relax the binary rounding to σ ∈ [0,1]^m, minimize the quadratic exactly
/// by coordinate descent, then commit coordinates to corners one at a time
/// (most decided first), re-optimizing the free coordinates after every
/// commitment. Deterministic; returns the committed corner.
fn relax_round_choices(
    w: &Tensor,
    grid: &GridChoice,
    factors: &KfacFactors,
) -> Result<Vec<bool>> {
    let dim_in = factors.in_dim();
    let n = w.len();
    let delta: Vec<f64> = (0..n)
        .map(|i| grid.ceil_val[i] - grid.floor_val[i])
        .collect();
    let mut sigma = vec![0.5f64; n];
    let mut committed = vec![false; n];
    // D(σ) with D_i = w_i − floor_i − σ_i δ_i, and M = G·D·A kept in sync.
    let mut d = w.clone();
    for i in 0..n {
        d.data_mut()[i] = w.data()[i] - grid.floor_val[i] - sigma[i] * delta[i];
    }
    let mut m = quadratic_grad(&d, factors)?.scale(0.5);

    // One exact coordinate update; returns the applied change in σ_i.
    let mut update = |i: usize,
                      target: Option<f64>,
                      sigma: &mut [f64],
                      d: &mut Tensor,
                      m: &mut Tensor|
     -> f64 {
        let (r, c) = (i / dim_in, i % dim_in);
        let curv = 2.0 * delta[i] * delta[i] * factors.g.at2(r, r) * factors.a.at2(c, c);
        let new = match target {
            Some(t) => t,
            None => {
                if curv <= 0.0 {
                    return 0.0;
                }
                // ∂Q/∂σ_i = −2 δ_i (G D A)_{rc}
                let grad = -2.0 * delta[i] * m.data()[i];
                (sigma[i] - grad / curv).clamp(0.0, 1.0)
            }
        };
        let step = new - sigma[i];
        if step == 0.0 {
            return 0.0;
        }
        sigma[i] = new;
        let dd = -step * delta[i];
        d.data_mut()[i] += dd;
        for row in 0..factors.out_dim() {
            let gir = factors.g.at2(row, r);
            if gir == 0.0 {
                continue;
            }
            let mrow = &mut m.data_mut()[row * dim_in..(row + 1) * dim_in];
            for j in 0..dim_in {
                mrow[j] += dd * gir * factors.a.at2(c, j);
            }
        }
        step.abs()
    };

    let sweep = |sigma: &mut [f64],
                 committed: &[bool],
                 d: &mut Tensor,
                 m: &mut Tensor,
                 update: &mut dyn FnMut(usize, Option<f64>, &mut [f64], &mut Tensor, &mut Tensor) -> f64|
     -> f64 {
        let mut moved = 0.0f64;
        for i in 0..sigma.len() {
            if committed[i] {
                continue;
            }
            moved = moved.max(update(i, None, sigma, d, m));
        }
        moved
    };

    // Converge the full relaxation first.
    for _ in 0..200 {
        if sweep(&mut sigma, &committed, &mut d, &mut m, &mut update) < 1e-12 {
            break;
        }
    }
    // Commit one coordinate per round, then re-converge the rest.
    for _ in 0..n {
        let pick = (0..n)
            .filter(|&i| !committed[i])
            .max_by(|&a, &b| {
                let da = (sigma[a] - 0.5).abs();
                let db = (sigma[b] - 0.5).abs();
                da.partial_cmp(&db).unwrap()
            });
        let Some(i) = pick else { break };
        let corner = if sigma[i] >= 0.5 { 1.0 } else { 0.0 };
        update(i, Some(corner), &mut sigma, &mut d, &mut m);
        committed[i] = true;
        for _ in 0..8 {
            if sweep(&mut sigma, &committed, &mut d, &mut m, &mut update) < 1e-10 {
                break;
            }
        }
    }
    Ok(sigma.iter().map(|&s| s >= 0.5).collect())
}

/// Greedy flip descent on the quadratic loss: single flips to a fixpoint,
/// then coordinated pair flips on small layers, repeating until neither
/// improves. Each candidate is scored in O(1) through the cached product
/// M = G·D·A; accepted flips patch M with a rank-1 update.
fn flip_descent(
    w: &Tensor,
    grid: &GridChoice,
    choices: &mut [bool],
    factors: &KfacFactors,
) -> Result<()> {
    let dim_in = factors.in_dim();
    let n = w.len();
    let mut d = w.clone();
    for flat in 0..n {
        let val = if choices[flat] {
            grid.ceil_val[flat]
        } else {
            grid.floor_val[flat]
        };
        d.data_mut()[flat] = w.data()[flat] - val;
    }
    let mut m = quadratic_grad(&d, factors)?.scale(0.5); // G·D·A

    // Change applied to D when the element flips away from its current
    // choice, and the resulting loss delta.
    let delta_of = |choices: &[bool], flat: usize| -> f64 {
        if choices[flat] {
            grid.ceil_val[flat] - grid.floor_val[flat]
        } else {
            grid.floor_val[flat] - grid.ceil_val[flat]
        }
    };
    let single_gain = |m: &Tensor, flat: usize, delta: f64| -> f64 {
        let r = flat / dim_in;
        let c = flat % dim_in;
        2.0 * delta * m.data()[flat] + delta * delta * factors.g.at2(r, r) * factors.a.at2(c, c)
    };

    let mut apply = |choices: &mut [bool], d: &mut Tensor, m: &mut Tensor, flat: usize| {
        let delta = delta_of(choices, flat);
        choices[flat] = !choices[flat];
        d.data_mut()[flat] += delta;
        // M += delta · G[:, r] ⊗ A[c, :]
        let r = flat / dim_in;
        let c = flat % dim_in;
        for i in 0..factors.out_dim() {
            let gir = factors.g.at2(i, r);
            if gir == 0.0 {
                continue;
            }
            let row = &mut m.data_mut()[i * dim_in..(i + 1) * dim_in];
            for j in 0..dim_in {
                row[j] += delta * gir * factors.a.at2(c, j);
            }
        }
    };

    let max_rounds = 16 * n;
    for _ in 0..max_rounds {
        // Single-flip phase.
        let mut best = (0usize, 0.0f64);
        for flat in 0..n {
            let delta = delta_of(choices, flat);
            if delta == 0.0 {
                continue;
            }
            let gain = single_gain(&m, flat, delta);
            if gain < best.1 {
                best = (flat, gain);
            }
        }
        if best.1 < -1e-15 {
            apply(choices, &mut d, &mut m, best.0);
            continue;
        }
        // Pair-flip phase once singles are exhausted.
        if n > PAIR_FLIP_LIMIT {
            break;
        }
        let mut best_pair = (0usize, 0usize, 0.0f64);
        for p in 0..n {
            let dp = delta_of(choices, p);
            if dp == 0.0 {
                continue;
            }
            let gp = single_gain(&m, p, dp);
            let (rp, cp) = (p / dim_in, p % dim_in);
            for q in (p + 1)..n {
                let dq = delta_of(choices, q);
                if dq == 0.0 {
                    continue;
                }
                let gq = single_gain(&m, q, dq);
                let (rq, cq) = (q / dim_in, q % dim_in);
                let cross = 2.0 * dp * dq * factors.g.at2(rp, rq) * factors.a.at2(cp, cq);
                let gain = gp + gq + cross;
                if gain < best_pair.2 {
                    best_pair = (p, q, gain);
                }
            }
        }
        if best_pair.2 < -1e-15 {
            apply(choices, &mut d, &mut m, best_pair.0);
            apply(choices, &mut d, &mut m, best_pair.1);
            continue;
        }
        break;
    }
    Ok(())
}

/// Optimize the rounding of one layer's weights under the Kronecker-factored
/// quadratic loss plus the annealed binarization penalty.
///
/// `weights` is the (possibly im2col-lowered) out × in weight matrix and
/// `params` its uniform quantization grid. `on_log` receives one record per
/// optimizer step.
pub fn reconstruct_layer(
    weights: &Tensor,
    params: &QuantParams,
    factors: &KfacFactors,
    cfg: &ReconstructionConfig,
    mut on_log: impl FnMut(&ReconstructionLog),
) -> Result<ReconstructionOutcome> {
    cfg.validate()?;
    weights.ensure_finite("reconstruct_layer")?;
    if weights.rank() != 2
        || weights.shape()[0] != factors.out_dim()
        || weights.shape()[1] != factors.in_dim()
    {
        return Err(QdkError::Shape(format!(
            "weights {:?} do not match factors ({} x {})",
            weights.shape(),
            factors.out_dim(),
            factors.in_dim()
        )));
    }
    let n = weights.len();
    let grid = grid_choices(weights, params);

    // σ(v) starts at each weight's fractional offset inside its grid cell.
    let mut v = weights.clone();
    for flat in 0..n {
        let (s, _) = params.params_for(weights, flat);
        let frac = weights.data()[flat] / s - (weights.data()[flat] / s).floor();
        v.data_mut()[flat] = v_for_sigma(frac);
    }

    // Adam state.
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let warmup = cfg.warmup_steps();

    // The penalty weight is normalized by the per-element quadratic loss of
    // the round-to-nearest start, so the quadratic term and the binarization
    // pressure stay balanced regardless of the layer's Fisher scale. This
    // also makes the whole optimization equivariant under rescaling the
    // factors: scaling G⊗A scales both terms identically.
    let rtn_start: Vec<bool> = (0..n)
        .map(|flat| {
            let (s, _) = params.params_for(weights, flat);
            let x = weights.data()[flat] / s;
            (crate::quant::round_half_away(x) - x.floor()) >= 1.0
        })
        .collect();
    let rtn_loss = choice_loss(weights, &grid, &rtn_start, factors)?;
    let lambda_scale = (rtn_loss / n as f64).max(1e-300);

    for step in 0..cfg.iterations {
        let beta = cfg.beta_at(step);
        let lambda = if step < warmup {
            0.0
        } else {
            cfg.lambda_reg * lambda_scale
        };

        let what = adaround_quantize(weights, params, &v)?;
        let d = weights.sub(&what)?;
        let loss_q = quadratic_loss(&d, factors)?;
        let penalty = regularizer(&v, beta)?;
        let total = loss_q + lambda * penalty;
        if !total.is_finite() {
            return Err(QdkError::Optimization {
                step,
                learning_rate: cfg.learning_rate,
                detail: format!("loss became {total}"),
            });
        }
        on_log(&ReconstructionLog {
            step,
            loss: loss_q,
            penalty,
            beta,
        });

        // dL/dD = 2 G D A; dD/dσ = -s (straight-through on the code clip);
        // penalty differentiates through the rectified sigmoid only.
        let gq = quadratic_grad(&d, factors)?;
        let t = step + 1;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for flat in 0..n {
            let (s, _) = params.params_for(weights, flat);
            let sig_grad = rectified_sigmoid_grad(v.data()[flat]);
            let mut g = -gq.data()[flat] * s * sig_grad;
            if lambda > 0.0 {
                let sig = rectified_sigmoid(v.data()[flat]);
                let u = 2.0 * sig - 1.0;
                if u != 0.0 {
                    g += lambda * (-beta) * u.abs().powf(beta - 1.0) * u.signum() * 2.0 * sig_grad;
                }
            }
            m1[flat] = b1 * m1[flat] + (1.0 - b1) * g;
            m2[flat] = b2 * m2[flat] + (1.0 - b2) * g * g;
            let update = cfg.learning_rate * (m1[flat] / bc1) / ((m2[flat] / bc2).sqrt() + eps);
            v.data_mut()[flat] -= update;
        }
    }

    // Hard-round the annealed solution and polish it with greedy flips.
    // Round-to-nearest, all-floor, and all-ceiling starts are polished the
    // same way; the best candidate wins, so the result never loses to the
    // round-to-nearest baseline.
    let annealed: Vec<bool> = v.data().iter().map(|&vi| rectified_sigmoid(vi) >= 0.5).collect();
    let mut starts = vec![
        annealed,
        rtn_start.clone(),
        vec![false; n],
        vec![true; n],
    ];
    if n <= RELAX_ROUND_LIMIT {
        starts.push(relax_round_choices(weights, &grid, factors)?);
    }
    let mut choices = rtn_start;
    let mut final_loss = f64::INFINITY;
    for mut cand in starts {
        flip_descent(weights, &grid, &mut cand, factors)?;
        let loss = choice_loss(weights, &grid, &cand, factors)?;
        if loss < final_loss {
            final_loss = loss;
            choices = cand;
        }
    }
    if n <= BNB_LIMIT {
        choices = bnb_choices(weights, &grid, factors, &choices)?;
        final_loss = choice_loss(weights, &grid, &choices, factors)?;
    }

    let mut v_final = Tensor::zeros(weights.shape().to_vec());
    let mut w_final = Tensor::zeros(weights.shape().to_vec());
    for flat in 0..n {
        v_final.data_mut()[flat] = if choices[flat] { V_SAT } else { -V_SAT };
        w_final.data_mut()[flat] = if choices[flat] {
            grid.ceil_val[flat]
        } else {
            grid.floor_val[flat]
        };
    }
    Ok(ReconstructionOutcome {
        weights: w_final,
        v: v_final,
        quadratic_loss: final_loss,
        rtn_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_params(s: f64, zp: i64, bits: u8) -> QuantParams {
        QuantParams::per_tensor(bits, Scheme::Uniform, s, zp).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let m = Tensor::new(
            vec![n, n],
            (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        matmul(&m.transpose2().unwrap(), &m).unwrap()
    }

    #[test]
    fn sigma_saturation_is_exact() {
        assert_eq!(rectified_sigmoid(-V_SAT), 0.0);
        assert_eq!(rectified_sigmoid(V_SAT), 1.0);
        assert_abs_diff_eq!(rectified_sigmoid(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn v_for_sigma_round_trips() {
        for sigma in [0.05, 0.3, 0.5, 0.77, 0.95] {
            assert_abs_diff_eq!(
                rectified_sigmoid(v_for_sigma(sigma)),
                sigma,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn adaround_pure_floor_and_ceiling() {
        let p = uniform_params(0.5, 3, 4);
        let w = Tensor::new(vec![1, 3], vec![1.2, -0.8, 2.3]).unwrap();
        let floor_v = w.map(|_| -V_SAT);
        let ceil_v = w.map(|_| V_SAT);
        let lo = adaround_quantize(&w, &p, &floor_v).unwrap();
        let hi = adaround_quantize(&w, &p, &ceil_v).unwrap();
        for flat in 0..3 {
            let base = (w.data()[flat] / 0.5).floor();
            assert_abs_diff_eq!(lo.data()[flat], 0.5 * base, epsilon = 1e-12);
            assert_abs_diff_eq!(hi.data()[flat], 0.5 * (base + 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn adaround_soft_value() {
        // w/s = 2.3 with σ(v) = 0.7 lands at 2.7 during training.
        let p = uniform_params(1.0, 0, 4);
        let w = Tensor::new(vec![1, 1], vec![2.3]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![v_for_sigma(0.7)]).unwrap();
        let q = adaround_quantize(&w, &p, &v).unwrap();
        assert_abs_diff_eq!(q.data()[0], 2.7, epsilon = 1e-12);
    }

    #[test]
    fn adaround_respects_clip() {
        let p = uniform_params(1.0, 0, 4);
        let w = Tensor::new(vec![1, 1], vec![15.4]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![V_SAT]).unwrap();
        // Ceiling would be code 16; the clip holds it at 15.
        let q = adaround_quantize(&w, &p, &v).unwrap();
        assert_eq!(q.data()[0], 15.0);
    }

    #[test]
    fn regularizer_examples() {
        let v = Tensor::new(vec![3], vec![-V_SAT, V_SAT, V_SAT]).unwrap();
        assert_eq!(regularizer(&v, 3.0).unwrap(), 0.0);
        let half = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(regularizer(&half, 7.0).unwrap(), 1.0);
        let v75 = Tensor::new(vec![1], vec![v_for_sigma(0.75)]).unwrap();
        assert_abs_diff_eq!(regularizer(&v75, 2.0).unwrap(), 0.75, epsilon = 1e-12);
        assert!(regularizer(&half, 0.0).is_err());
    }

    #[test]
    fn beta_schedule_anneals_geometrically() {
        let cfg = ReconstructionConfig {
            iterations: 100,
            warmup_fraction: 0.2,
            ..Default::default()
        };
        assert_eq!(cfg.beta_at(0), 20.0);
        assert_eq!(cfg.beta_at(19), 20.0);
        assert_abs_diff_eq!(cfg.beta_at(99), 2.0, epsilon = 1e-9);
        let mid = cfg.beta_at(60);
        assert!(mid < 20.0 && mid > 2.0);
    }

    #[test]
    fn single_weight_rounds_to_nearest() {
        let p = uniform_params(1.0, 0, 4);
        let factors = KfacFactors::new(Tensor::identity(1), Tensor::identity(1), 1).unwrap();
        for (w, expect) in [(2.3, 2.0), (2.7, 3.0), (5.5, 6.0)] {
            let wt = Tensor::new(vec![1, 1], vec![w]).unwrap();
            let cfg = ReconstructionConfig {
                iterations: 200,
                ..Default::default()
            };
            let out = reconstruct_layer(&wt, &p, &factors, &cfg, |_| {}).unwrap();
            assert_eq!(out.weights.data()[0], expect, "w = {w}");
        }
    }

    #[test]
    fn identity_fisher_with_small_fractions_floors_everything() {
        // All fractional parts below 0.5 - margin: nearest rounding is floor,
        // and with a diagonal Fisher the optimum is elementwise nearest.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let p = uniform_params(1.0, 8, 5);
        let vals: Vec<f64> = (0..8)
            .map(|_| {
                let base = (rng.random::<f64>() * 10.0).floor() - 5.0;
                base + 0.1 + rng.random::<f64>() * 0.3
            })
            .collect();
        let w = Tensor::new(vec![2, 4], vals.clone()).unwrap();
        let factors = KfacFactors::new(Tensor::identity(2), Tensor::identity(4), 1).unwrap();
        let cfg = ReconstructionConfig {
            iterations: 400,
            ..Default::default()
        };
        let out = reconstruct_layer(&w, &p, &factors, &cfg, |_| {}).unwrap();
        for (got, &orig) in out.weights.data().iter().zip(&vals) {
            assert_eq!(*got, orig.floor(), "w = {orig}");
        }
    }

    #[test]
    fn matches_exhaustive_minimum_on_small_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..10 {
            let out = 2;
            let dim_in = 3;
            let n = out * dim_in;
            let factors =
                KfacFactors::new(random_psd(&mut rng, out), random_psd(&mut rng, dim_in), 1)
                    .unwrap();
            let w = Tensor::new(
                vec![out, dim_in],
                (0..n).map(|_| rng.random::<f64>() * 8.0).collect(),
            )
            .unwrap();
            let p = uniform_params(1.0, 0, 4);
            let cfg = ReconstructionConfig {
                iterations: 500,
                ..Default::default()
            };
            let got = reconstruct_layer(&w, &p, &factors, &cfg, |_| {}).unwrap();

            // Exhaustive oracle over all 2^n floor/ceil assignments.
            let grid = grid_choices(&w, &p);
            let mut best = f64::INFINITY;
            for mask in 0..(1usize << n) {
                let choices: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let loss = choice_loss(&w, &grid, &choices, &factors).unwrap();
                best = best.min(loss);
            }
            assert!(
                got.quadratic_loss <= best + 1e-6 * best.max(1.0),
                "trial {trial}: got {} vs exhaustive {}",
                got.quadratic_loss,
                best
            );
        }
    }

    #[test]
    fn never_worse_than_round_to_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let factors =
                KfacFactors::new(random_psd(&mut rng, 3), random_psd(&mut rng, 4), 1).unwrap();
            let w = Tensor::new(
                vec![3, 4],
                (0..12).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect(),
            )
            .unwrap();
            let p = uniform_params(0.7, 8, 4);
            let out = reconstruct_layer(
                &w,
                &p,
                &factors,
                &ReconstructionConfig {
                    iterations: 300,
                    ..Default::default()
                },
                |_| {},
            )
            .unwrap();
            assert!(out.quadratic_loss <= out.rtn_loss + 1e-9);
        }
    }

    #[test]
    fn exit_sigmas_are_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let factors = KfacFactors::new(random_psd(&mut rng, 2), random_psd(&mut rng, 3), 1).unwrap();
        let w = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random::<f64>() * 4.0).collect()).unwrap();
        let p = uniform_params(0.5, 0, 4);
        let out = reconstruct_layer(
            &w,
            &p,
            &factors,
            &ReconstructionConfig {
                iterations: 50,
                ..Default::default()
            },
            |_| {},
        )
        .unwrap();
        for &vi in out.v.data() {
            let sig = rectified_sigmoid(vi);
            assert!(sig == 0.0 || sig == 1.0);
        }
        // Returned weights sit exactly on the quantization grid.
        for flat in 0..6 {
            let (s, zp) = p.params_for(&out.weights, flat);
            let code = out.weights.data()[flat] / s + zp as f64;
            assert_abs_diff_eq!(code, code.round(), epsilon = 1e-9);
        }
    }

    #[test]
    fn normalization_scale_does_not_change_the_rounding() {
        // Rescaling both factors only rescales the objective, so the chosen
        // rounding must be identical.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let g = random_psd(&mut rng, 3);
        let a = random_psd(&mut rng, 3);
        let w = Tensor::new(
            vec![3, 3],
            (0..9).map(|_| rng.random::<f64>() * 6.0).collect(),
        )
        .unwrap();
        let p = uniform_params(1.0, 0, 4);
        let cfg = ReconstructionConfig {
            iterations: 300,
            ..Default::default()
        };
        let f1 = KfacFactors::new(g.clone(), a.clone(), 1).unwrap();
        let f2 = KfacFactors::new(g.scale(1.0 / 8.0), a.scale(8.0f64.sqrt()), 1).unwrap();
        let r1 = reconstruct_layer(&w, &p, &f1, &cfg, |_| {}).unwrap();
        let r2 = reconstruct_layer(&w, &p, &f2, &cfg, |_| {}).unwrap();
        assert_eq!(r1.weights.data(), r2.weights.data());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Differentiable surrogate: quadratic loss + penalty as a function
        // of v, with σ strictly interior.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let factors = KfacFactors::new(random_psd(&mut rng, 2), random_psd(&mut rng, 3), 1).unwrap();
        let w = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random::<f64>() * 4.0).collect()).unwrap();
        let p = uniform_params(0.9, 2, 4);
        let v = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| v_for_sigma(0.2 + 0.6 * rng.random::<f64>())).collect(),
        )
        .unwrap();
        let beta = 4.0;
        let lambda = 0.03;
        let loss_of = |vv: &Tensor| {
            let what = adaround_quantize(&w, &p, vv).unwrap();
            let d = w.sub(&what).unwrap();
            quadratic_loss(&d, &factors).unwrap() + lambda * regularizer(vv, beta).unwrap()
        };
        // Analytic gradient, same path the optimizer takes.
        let what = adaround_quantize(&w, &p, &v).unwrap();
        let d = w.sub(&what).unwrap();
        let gq = quadratic_grad(&d, &factors).unwrap();
        for flat in 0..6 {
            let (s, _) = p.params_for(&w, flat);
            let sig = rectified_sigmoid(v.data()[flat]);
            let sg = rectified_sigmoid_grad(v.data()[flat]);
            let u = 2.0 * sig - 1.0;
            let mut analytic = -gq.data()[flat] * s * sg;
            if u != 0.0 {
                analytic += lambda * (-beta) * u.abs().powf(beta - 1.0) * u.signum() * 2.0 * sg;
            }
            let h = 1e-6;
            let mut plus = v.clone();
            plus.data_mut()[flat] += h;
            let mut minus = v.clone();
            minus.data_mut()[flat] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(analytic, fd, epsilon = 1e-4 * fd.abs().max(1.0));
        }
    }
}
