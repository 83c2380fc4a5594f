//! The progressive sparsify-and-adapt loop, its baselines, merge, and evaluation.
//!
//! Each outer step `t = 1..T`:
//!
//! 1. target mean sparsity `Θᵗ` from the schedule;
//! 2. feature maps of the current effective model `M ⊙ (W + BA)`;
//! 3. layer importance from pairwise linear CKA;
//! 4. per-layer sparsity `sᵗ` from the importance-weighted LP;
//! 5. new masks scored on `W + BA`;
//! 6. rank budget `Ωᵗ`;
//! 7. per-layer reconstruction losses under the new masks;
//! 8. per-layer ranks from those losses, adapters resized;
//! 9. `E` full-batch Adam epochs on every layer.
//!
//! Reconstruction targets always use the dense model's inputs `X_i`,
//! captured once up front.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    adam_step_in_place, linear_decay_lr, loss_and_grads, recon_loss_with, Adapter, OptState,
    Placement,
};
use crate::config::{Mode, RunConfig};
use crate::error::{LosaError, Result};
use crate::linalg::{Matrix, Rng};
use crate::masks::{nm_mask, unstructured_mask, Mask};
use crate::model::{
    forward, forward_capture, load_checkpoint, make_synthetic, Activation, CalibBatch,
    FeatureMaps, LayerStack,
};
use crate::rmi::{allocate_nm, allocate_sparsity, default_bounds, importance, Importance};
use crate::schedule::{allocate_ranks, rank_budget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: usize,
    pub theta: f64,
    pub omega: f64,
    /// Target per-layer sparsity.
    pub s: Vec<f64>,
    /// Fraction of zeros in each mask actually built.
    pub realized_s: Vec<f64>,
    /// Layer importance (empty when the mode does not compute it).
    pub p: Vec<f64>,
    pub r: Vec<usize>,
    /// N per layer in N:M mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nm_keep: Option<Vec<usize>>,
    pub loss_before: Vec<f64>,
    pub loss_after: Vec<f64>,
    /// Layers whose loss rose during inner training.
    pub non_descent: Vec<usize>,
    pub degenerate_pairs: Vec<(usize, usize)>,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

impl StepReport {
    pub fn mean_s(&self) -> f64 {
        mean(&self.s)
    }

    pub fn realized_mean_s(&self) -> f64 {
        mean(&self.realized_s)
    }

    pub fn mean_rank(&self) -> f64 {
        self.r.iter().sum::<usize>() as f64 / self.r.len().max(1) as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Final per-layer weights after merging adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub weights: Vec<Matrix>,
    pub masks: Vec<Mask>,
    pub ranks: Vec<usize>,
    pub placement: Placement,
}

impl SparseModel {
    /// Every masked-out entry is exactly 0.0.
    pub fn zero_pattern_holds(&self) -> bool {
        self.weights.iter().zip(&self.masks).all(|(w, m)| {
            w.data()
                .iter()
                .zip(m.bits())
                .all(|(&v, &keep)| keep || v == 0.0)
        })
    }

    pub fn realized_sparsity(&self) -> Vec<f64> {
        self.masks.iter().map(Mask::sparsity).collect()
    }

    /// Fraction of exactly-zero weights, counted over all layers.
    pub fn weight_zero_fraction(&self) -> f64 {
        let total: usize = self.weights.iter().map(Matrix::len).sum();
        let zeros: usize = self
            .weights
            .iter()
            .map(|w| w.data().iter().filter(|&&v| v == 0.0).count())
            .sum();
        zeros as f64 / total.max(1) as f64
    }

    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().sum::<usize>() as f64 / self.ranks.len().max(1) as f64
    }

    pub fn to_stack(&self) -> Result<LayerStack> {
        LayerStack::from_weights(self.weights.clone())
    }

    pub fn forward(&self, x: &Matrix, activation: Activation) -> Result<Matrix> {
        forward(&self.to_stack()?, x, activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub model: SparseModel,
    pub adapters: Vec<Adapter>,
    pub steps: Vec<StepReport>,
}

/// `W' = M ⊙ (W + BA)` per layer.
pub fn merge(stack: &LayerStack, masks: &[Mask], adapters: &[Adapter]) -> Result<SparseModel> {
    check_lengths(stack, masks.len(), "masks")?;
    check_lengths(stack, adapters.len(), "adapters")?;
    let weights = stack
        .layers()
        .iter()
        .zip(masks.iter().zip(adapters))
        .map(|(l, (m, ad))| crate::adapters::effective_weight(&l.weight, m, ad, Placement::Masked))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseModel {
        weights,
        masks: masks.to_vec(),
        ranks: adapters.iter().map(Adapter::rank).collect(),
        placement: Placement::Masked,
    })
}

fn merge_dense(stack: &LayerStack, masks: &[Mask], adapters: &[Adapter]) -> Result<SparseModel> {
    let weights = stack
        .layers()
        .iter()
        .zip(masks.iter().zip(adapters))
        .map(|(l, (m, ad))| crate::adapters::effective_weight(&l.weight, m, ad, Placement::Dense))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseModel {
        weights,
        masks: masks.to_vec(),
        ranks: adapters.iter().map(Adapter::rank).collect(),
        placement: Placement::Dense,
    })
}

fn check_lengths(stack: &LayerStack, len: usize, what: &str) -> Result<()> {
    if len != stack.len() {
        return Err(LosaError::InvalidArgument(format!(
            "{len} {what} for {} layers",
            stack.len()
        )));
    }
    Ok(())
}

/// Builds the dense model and calibration batch described by `cfg`.
pub fn prepare(cfg: &RunConfig) -> Result<(LayerStack, CalibBatch)> {
    let stack = match &cfg.model.checkpoint {
        Some(path) => load_checkpoint(path)?.stack,
        None => make_synthetic(
            cfg.model.dims.len() - 1,
            &cfg.model.dims,
            crate::linalg::derive_seed(cfg.seed, "model"),
            cfg.model.sigma,
        )?,
    };
    let calib = match &cfg.calib.file {
        Some(path) => CalibBatch::from_csv(path)?,
        None => CalibBatch::synthetic(
            cfg.calib.samples,
            stack.input_dim(),
            crate::linalg::derive_seed(cfg.seed, "calib"),
        )?,
    };
    if calib.inputs().cols() != stack.input_dim() {
        return Err(LosaError::Shape {
            op: "calibration inputs",
            left: calib.inputs().shape(),
            right: stack.layers()[0].weight.shape(),
        });
    }
    Ok((stack, calib))
}

/// Runs whichever mode `cfg.mode` selects.
pub fn run(cfg: &RunConfig, stack: &LayerStack, calib: &CalibBatch) -> Result<RunResult> {
    match cfg.mode {
        Mode::Losa | Mode::NmLosa => run_losa(cfg, stack, calib),
        Mode::LoraBaseline => run_lora_baseline(cfg, stack, calib),
        Mode::Oneshot => run_oneshot(cfg, stack, calib),
    }
}

fn layer_importance(maps: &FeatureMaps, cfg: &RunConfig) -> Result<Importance> {
    if maps.len() == 1 {
        return Ok(Importance {
            p: vec![1.0],
            similarity: vec![vec![1.0]],
            degenerate_pairs: Vec::new(),
        });
    }
    importance(maps, cfg.rmi.importance())
}

fn per_layer_losses(
    stack: &LayerStack,
    masks: &[Mask],
    adapters: &[Adapter],
    teacher: &FeatureMaps,
    placement: Placement,
) -> Result<Vec<f64>> {
    (0..stack.len())
        .into_par_iter()
        .map(|i| {
            let l = recon_loss_with(
                &stack.layers()[i].weight,
                &masks[i],
                &adapters[i],
                &teacher.inputs[i],
                placement,
            )?;
            if !l.is_finite() {
                return Err(LosaError::NonFinite(format!(
                    "reconstruction loss of layer {i} is {l} (rank {}, mask sparsity {:.4})",
                    adapters[i].rank(),
                    masks[i].sparsity()
                )));
            }
            Ok(l)
        })
        .collect()
}

/// `epochs` full-batch Adam steps on every layer; learning rate decays
/// linearly over `total_epochs`, starting at global epoch `first_epoch`.
#[allow(clippy::too_many_arguments)]
fn train_layers(
    stack: &LayerStack,
    masks: &[Mask],
    adapters: &mut [Adapter],
    opts: &mut [OptState],
    teacher: &FeatureMaps,
    placement: Placement,
    epochs: usize,
    first_epoch: u64,
    total_epochs: u64,
) -> Result<()> {
    adapters
        .par_iter_mut()
        .zip(opts.par_iter_mut())
        .enumerate()
        .try_for_each(|(i, (ad, opt))| {
            if ad.rank() == 0 {
                return Ok(());
            }
            let w = &stack.layers()[i].weight;
            for e in 0..epochs {
                let (loss, gb, ga) = loss_and_grads(w, &masks[i], ad, &teacher.inputs[i], placement)?;
                if !loss.is_finite() {
                    return Err(LosaError::NonFinite(format!(
                        "layer {i} epoch {e}: loss {loss}"
                    )));
                }
                let k = first_epoch + e as u64;
                let lr = linear_decay_lr(opt.config.lr, k, total_epochs);
                adam_step_in_place(ad, opt, &gb, &ga, lr)
                    .map_err(|err| LosaError::NonFinite(format!("layer {i} epoch {e}: {err}")))?;
            }
            Ok(())
        })
}

fn non_descent(before: &[f64], after: &[f64]) -> Vec<usize> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .filter(|(_, (b, a))| a > b)
        .map(|(i, _)| i)
        .collect()
}

/// The dynamic loop; `cfg.mode == NmLosa` swaps the unstructured masks for
/// mixed N:M masks.
pub fn run_losa(cfg: &RunConfig, stack: &LayerStack, calib: &CalibBatch) -> Result<RunResult> {
    cfg.validate()?;
    let act = cfg.model.activation;
    let teacher = forward_capture(stack, calib, act)?;
    let n = stack.len();
    let caps = stack.rank_caps();
    let nm = cfg.mode == Mode::NmLosa;
    let big_t = cfg.schedule.steps;
    let epochs = cfg.train.epochs;
    let total_epochs = (big_t * epochs) as u64;

    let mut rng = Rng::derive(cfg.seed, "adapter");
    let mut adapters = stack
        .layers()
        .iter()
        .map(|l| Adapter::init(l.c_out(), l.c_in(), 0, cfg.adapter.sigma, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut opts: Vec<OptState> = adapters
        .iter()
        .map(|ad| OptState::new(ad, cfg.optim))
        .collect();
    let mut masks: Vec<Mask> = stack
        .layers()
        .iter()
        .map(|l| Mask::ones(l.c_out(), l.c_in()))
        .collect();
    let mut steps = Vec::with_capacity(big_t);

    for t in 1..=big_t {
        let started = Instant::now();
        let step = (|| -> Result<StepReport> {
            let theta = cfg.schedule.theta(t)?;

            let current: Vec<Matrix> = stack
                .layers()
                .iter()
                .zip(masks.iter().zip(&adapters))
                .map(|(l, (m, ad))| m.apply(&l.weight.add(&ad.delta())?))
                .collect::<Result<_>>()?;
            let maps = forward_capture(&stack.with_weights(current)?, calib, act)?;
            let imp = layer_importance(&maps, cfg)?;

            let scores = stack
                .layers()
                .iter()
                .zip(&adapters)
                .enumerate()
                .map(|(i, (l, ad))| cfg.mask.scorer.score(&l.weight.add(&ad.delta())?, &teacher.inputs[i]))
                .collect::<Result<Vec<_>>>()?;
            let (s, nm_keep) = if nm {
                let keep = allocate_nm(&imp.p, theta, cfg.mask.nm_group, cfg.mask.nm_shift)?;
                masks = scores
                    .iter()
                    .zip(&keep)
                    .map(|(sc, &k)| nm_mask(sc, k, cfg.mask.nm_group))
                    .collect::<Result<_>>()?;
                let s = keep
                    .iter()
                    .map(|&k| 1.0 - k as f64 / cfg.mask.nm_group as f64)
                    .collect();
                (s, Some(keep))
            } else {
                let profile =
                    allocate_sparsity(&imp.p, theta, &default_bounds(theta, cfg.rmi.box_delta, n))?;
                masks = scores
                    .iter()
                    .zip(&profile.s)
                    .map(|(sc, &si)| unstructured_mask(sc, si))
                    .collect();
                (profile.s, None)
            };

            let omega = rank_budget(t, cfg.schedule.omega_1);
            let loss_before = per_layer_losses(stack, &masks, &adapters, &teacher, Placement::Masked)?;
            let ranks = allocate_ranks(&loss_before, omega, &caps)?;
            for i in 0..n {
                adapters[i] = adapters[i].resize(ranks.r[i], cfg.adapter.sigma, &mut rng)?;
                opts[i] = opts[i].resize(ranks.r[i]);
            }

            train_layers(
                stack,
                &masks,
                &mut adapters,
                &mut opts,
                &teacher,
                Placement::Masked,
                epochs,
                ((t - 1) * epochs) as u64,
                total_epochs,
            )?;
            let loss_after = per_layer_losses(stack, &masks, &adapters, &teacher, Placement::Masked)?;

            Ok(StepReport {
                t,
                theta,
                omega,
                realized_s: masks.iter().map(Mask::sparsity).collect(),
                s,
                p: imp.p,
                r: ranks.r,
                nm_keep,
                non_descent: non_descent(&loss_before, &loss_after),
                loss_before,
                loss_after,
                degenerate_pairs: imp.degenerate_pairs,
                wall_clock_ms: 0.0,
            })
        })()
        .map_err(|e| e.at_step(t))?;
        steps.push(StepReport {
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
            ..step
        });
    }

    let model = merge(stack, &masks, &adapters)?;
    Ok(RunResult {
        mode: cfg.mode,
        model,
        adapters,
        steps,
    })
}

fn uniform_masks(cfg: &RunConfig, stack: &LayerStack, teacher: &FeatureMaps) -> Result<Vec<Mask>> {
    stack
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let sc = cfg.mask.scorer.score(&l.weight, &teacher.inputs[i])?;
            Ok(unstructured_mask(&sc, cfg.schedule.theta_f))
        })
        .collect()
}

/// Uniform-rate masks on `W` at `Θᶠ` with no fine-tuning.
pub fn run_oneshot(cfg: &RunConfig, stack: &LayerStack, calib: &CalibBatch) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let teacher = forward_capture(stack, calib, cfg.model.activation)?;
    let masks = uniform_masks(cfg, stack, &teacher)?;
    let adapters = stack
        .layers()
        .iter()
        .map(|l| Adapter::init(l.c_out(), l.c_in(), 0, 0.0, &mut Rng::new(0)))
        .collect::<Result<Vec<_>>>()?;
    let losses = per_layer_losses(stack, &masks, &adapters, &teacher, Placement::Masked)?;
    let n = stack.len();
    let step = StepReport {
        t: 1,
        theta: cfg.schedule.theta_f,
        omega: 0.0,
        s: vec![cfg.schedule.theta_f; n],
        realized_s: masks.iter().map(Mask::sparsity).collect(),
        p: Vec::new(),
        r: vec![0; n],
        nm_keep: None,
        loss_before: losses.clone(),
        loss_after: losses,
        non_descent: Vec::new(),
        degenerate_pairs: Vec::new(),
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let model = merge(stack, &masks, &adapters)?;
    Ok(RunResult {
        mode: Mode::Oneshot,
        model,
        adapters,
        steps: vec![step],
    })
}

/// Plain LoRA on a one-shot pruned model: uniform `Θᶠ` masks on `W`, a
/// fixed-rank dense adapter trained for the same `T·E` epochs. The result
/// keeps `BA` outside the mask and is therefore not sparse.
pub fn run_lora_baseline(
    cfg: &RunConfig,
    stack: &LayerStack,
    calib: &CalibBatch,
) -> Result<RunResult> {
    cfg.validate()?;
    let teacher = forward_capture(stack, calib, cfg.model.activation)?;
    let masks = uniform_masks(cfg, stack, &teacher)?;
    let mut rng = Rng::derive(cfg.seed, "adapter");
    let mut adapters = stack
        .layers()
        .iter()
        .map(|l| {
            let r = cfg.adapter.lora_rank.min(l.c_out().min(l.c_in()));
            Adapter::init(l.c_out(), l.c_in(), r, cfg.adapter.sigma, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opts: Vec<OptState> = adapters
        .iter()
        .map(|ad| OptState::new(ad, cfg.optim))
        .collect();
    let n = stack.len();
    let big_t = cfg.schedule.steps;
    let epochs = cfg.train.epochs;
    let mut steps = Vec::with_capacity(big_t);
    for t in 1..=big_t {
        let started = Instant::now();
        let step = (|| -> Result<StepReport> {
            let loss_before = per_layer_losses(stack, &masks, &adapters, &teacher, Placement::Dense)?;
            train_layers(
                stack,
                &masks,
                &mut adapters,
                &mut opts,
                &teacher,
                Placement::Dense,
                epochs,
                ((t - 1) * epochs) as u64,
                (big_t * epochs) as u64,
            )?;
            let loss_after = per_layer_losses(stack, &masks, &adapters, &teacher, Placement::Dense)?;
            Ok(StepReport {
                t,
                theta: cfg.schedule.theta_f,
                omega: cfg.adapter.lora_rank as f64,
                s: vec![cfg.schedule.theta_f; n],
                realized_s: masks.iter().map(Mask::sparsity).collect(),
                p: Vec::new(),
                r: adapters.iter().map(Adapter::rank).collect(),
                nm_keep: None,
                non_descent: non_descent(&loss_before, &loss_after),
                loss_before,
                loss_after,
                degenerate_pairs: Vec::new(),
                wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
            })
        })()
        .map_err(|e| e.at_step(t))?;
        steps.push(step);
    }
    let model = merge_dense(stack, &masks, &adapters)?;
    Ok(RunResult {
        mode: Mode::LoraBaseline,
        model,
        adapters,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `‖X_i W_iᵀ − X_i W'_iᵀ‖²_F / samples` on dense-model inputs.
    pub layer_error: Vec<f64>,
    pub total_error: f64,
    /// Mean squared difference of the final outputs, per element.
    pub end_to_end_mse: f64,
    pub realized_sparsity: Vec<f64>,
    pub mean_sparsity: f64,
    pub weight_zero_fraction: f64,
    pub mean_rank: f64,
    /// The zero pattern of the merged weights matches the masks.
    pub mergeable: bool,
}

pub fn evaluate(
    dense: &LayerStack,
    sparse: &SparseModel,
    data: &CalibBatch,
    activation: Activation,
) -> Result<EvalReport> {
    check_lengths(dense, sparse.weights.len(), "sparse weights")?;
    let teacher = forward_capture(dense, data, activation)?;
    let layer_error = dense
        .layers()
        .iter()
        .zip(&sparse.weights)
        .zip(&teacher.inputs)
        .map(|((l, w), x)| {
            Ok(x.matmul_t(&l.weight.sub(w)?)?.frobenius_sq() / x.rows() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let y_dense = teacher.outputs.last().expect("non-empty stack");
    let y_sparse = sparse.forward(data.inputs(), activation)?;
    let diff = y_dense.sub(&y_sparse)?;
    let realized_sparsity = sparse.realized_sparsity();
    Ok(EvalReport {
        total_error: layer_error.iter().sum(),
        layer_error,
        end_to_end_mse: diff.frobenius_sq() / diff.len().max(1) as f64,
        mean_sparsity: mean(&realized_sparsity),
        realized_sparsity,
        weight_zero_fraction: sparse.weight_zero_fraction(),
        mean_rank: sparse.mean_rank(),
        mergeable: sparse.zero_pattern_holds(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub total_error: f64,
    pub end_to_end_mse: f64,
    pub mean_sparsity: f64,
    pub mean_rank: f64,
    pub mergeable: bool,
    pub trainable_params: usize,
}

/// One-shot, LoRA baseline, and dynamic runs on the same model, data, and seed.
pub fn compare(cfg: &RunConfig, stack: &LayerStack, calib: &CalibBatch) -> Result<Vec<ComparisonRow>> {
    [Mode::Oneshot, Mode::LoraBaseline, Mode::Losa]
        .into_iter()
        .map(|mode| {
            let cfg = RunConfig {
                mode,
                ..cfg.clone()
            };
            let result = run(&cfg, stack, calib)?;
            let eval = evaluate(stack, &result.model, calib, cfg.model.activation)?;
            Ok(ComparisonRow {
                mode,
                total_error: eval.total_error,
                end_to_end_mse: eval.end_to_end_mse,
                mean_sparsity: eval.mean_sparsity,
                mean_rank: eval.mean_rank,
                mergeable: eval.mergeable,
                trainable_params: result.adapters.iter().map(Adapter::num_params).sum(),
            })
        })
        .collect()
}
