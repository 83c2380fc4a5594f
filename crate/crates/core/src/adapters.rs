//! Low-rank adapters, the masked layer-wise reconstruction loss, its
//! analytic gradient, and an AdamW-style optimizer with global-norm clipping.
//!
//! For a layer with dense weight `W`, mask `M`, adapter `(B, A)` and
//! calibration inputs `X` (`samples × c_in`):
//!
//! ```text
//! L = ‖X Wᵀ − X (M ⊙ (W + BA))ᵀ‖²_F / samples
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{LosaError, Result};
use crate::linalg::{gaussian_fill, Matrix, Rng};
use crate::masks::Mask;

/// Rank-`r` pair with `B: c_out × r` and `A: r × c_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    b: Matrix,
    a: Matrix,
}

impl Adapter {
    /// `A ~ N(0, σ²)`, `B = 0`, so `BA = 0` at creation.
    pub fn init(c_out: usize, c_in: usize, r: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        check_rank(r, c_out, c_in)?;
        Ok(Self {
            b: Matrix::zeros(c_out, r),
            a: gaussian_fill(rng, r, c_in, sigma),
        })
    }

    pub fn from_parts(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(LosaError::Shape {
                op: "adapter",
                left: b.shape(),
                right: a.shape(),
            });
        }
        check_rank(b.cols(), b.rows(), a.cols())?;
        Ok(Self { b, a })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn c_out(&self) -> usize {
        self.b.rows()
    }

    pub fn c_in(&self) -> usize {
        self.a.cols()
    }

    /// `B·A`, `c_out × c_in` (all zeros at rank 0).
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors are conformable")
    }

    pub fn num_params(&self) -> usize {
        self.b.len() + self.a.len()
    }

    /// Grow: append `N(0, σ²)` rows to `A` and zero columns to `B`, leaving
    /// `BA` unchanged. Shrink: keep the first `new_r` components.
    pub fn resize(&self, new_r: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        check_rank(new_r, self.c_out(), self.c_in())?;
        let r = self.rank();
        let b = self.b.resize_cols(new_r);
        let a = if new_r > r {
            let fresh = gaussian_fill(rng, new_r - r, self.c_in(), sigma);
            Matrix::from_fn(new_r, self.c_in(), |i, j| {
                if i < r {
                    self.a.get(i, j)
                } else {
                    fresh.get(i - r, j)
                }
            })
        } else {
            self.a.resize_rows(new_r)
        };
        Ok(Self { b, a })
    }
}

fn check_rank(r: usize, c_out: usize, c_in: usize) -> Result<()> {
    let max = c_out.min(c_in);
    if r > max {
        return Err(LosaError::RankTooLarge { rank: r, max });
    }
    Ok(())
}

/// Where the adapter sits relative to the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// `M ⊙ (W + BA)`: the adapter shares the mask and merges into sparse weights.
    #[default]
    Masked,
    /// `M ⊙ W + BA`: plain LoRA on a pruned model; the adapter stays dense.
    Dense,
}

/// Effective weight seen by the layer.
pub fn effective_weight(w: &Matrix, mask: &Mask, ad: &Adapter, placement: Placement) -> Result<Matrix> {
    check_shapes(w, mask, ad)?;
    match placement {
        Placement::Masked => mask.apply(&w.add(&ad.delta())?),
        Placement::Dense => mask.apply(w)?.add(&ad.delta()),
    }
}

fn check_shapes(w: &Matrix, mask: &Mask, ad: &Adapter) -> Result<()> {
    if mask.shape() != w.shape() {
        return Err(LosaError::Shape {
            op: "recon (mask)",
            left: w.shape(),
            right: mask.shape(),
        });
    }
    if (ad.c_out(), ad.c_in()) != w.shape() {
        return Err(LosaError::Shape {
            op: "recon (adapter)",
            left: w.shape(),
            right: (ad.c_out(), ad.c_in()),
        });
    }
    Ok(())
}

/// `X (W − W_eff)ᵀ`, `samples × c_out`.
fn residual(w: &Matrix, w_eff: &Matrix, x_in: &Matrix) -> Result<Matrix> {
    if x_in.cols() != w.cols() {
        return Err(LosaError::Shape {
            op: "recon (inputs)",
            left: w.shape(),
            right: x_in.shape(),
        });
    }
    x_in.matmul_t(&w.sub(w_eff)?)
}

pub fn recon_loss(w: &Matrix, mask: &Mask, ad: &Adapter, x_in: &Matrix) -> Result<f64> {
    recon_loss_with(w, mask, ad, x_in, Placement::Masked)
}

pub fn recon_loss_with(
    w: &Matrix,
    mask: &Mask,
    ad: &Adapter,
    x_in: &Matrix,
    placement: Placement,
) -> Result<f64> {
    let w_eff = effective_weight(w, mask, ad, placement)?;
    Ok(residual(w, &w_eff, x_in)?.frobenius_sq() / x_in.rows() as f64)
}

/// Gradients `(∂L/∂B, ∂L/∂A)` of the sample-normalized loss.
pub fn recon_grads(w: &Matrix, mask: &Mask, ad: &Adapter, x_in: &Matrix) -> Result<(Matrix, Matrix)> {
    let (_, gb, ga) = loss_and_grads(w, mask, ad, x_in, Placement::Masked)?;
    Ok((gb, ga))
}

/// Loss and both gradients from one residual evaluation.
pub fn loss_and_grads(
    w: &Matrix,
    mask: &Mask,
    ad: &Adapter,
    x_in: &Matrix,
    placement: Placement,
) -> Result<(f64, Matrix, Matrix)> {
    let n = x_in.rows() as f64;
    let w_eff = effective_weight(w, mask, ad, placement)?;
    let r = residual(w, &w_eff, x_in)?;
    let loss = r.frobenius_sq() / n;
    // ∂L/∂W_eff = −(2/n) Rᵀ X; the mask gates it for the masked placement.
    let mut g_eff = r.t_matmul(x_in)?.scale(-2.0 / n);
    if placement == Placement::Masked {
        g_eff = mask.apply(&g_eff)?;
    }
    let gb = g_eff.matmul_t(ad.a())?;
    let ga = ad.b().t_matmul(&g_eff)?;
    Ok((loss, gb, ga))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip over `(gB, gA)`; `<= 0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 0.3,
        }
    }
}

/// Moment accumulators shaped like the adapter they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m_b: Matrix,
    pub v_b: Matrix,
    pub m_a: Matrix,
    pub v_a: Matrix,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptState {
    pub fn new(ad: &Adapter, config: AdamConfig) -> Self {
        Self {
            m_b: Matrix::zeros(ad.c_out(), ad.rank()),
            v_b: Matrix::zeros(ad.c_out(), ad.rank()),
            m_a: Matrix::zeros(ad.rank(), ad.c_in()),
            v_a: Matrix::zeros(ad.rank(), ad.c_in()),
            step: 0,
            config,
        }
    }

    /// Follows an adapter resize: dropped components lose their moments,
    /// grown components start from zero.
    pub fn resize(&self, new_r: usize) -> Self {
        Self {
            m_b: self.m_b.resize_cols(new_r),
            v_b: self.v_b.resize_cols(new_r),
            m_a: self.m_a.resize_rows(new_r),
            v_a: self.v_a.resize_rows(new_r),
            step: self.step,
            config: self.config,
        }
    }
}

/// `base · (1 − k/total)` for zero-based step `k`.
pub fn linear_decay_lr(base: f64, k: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - (k.min(total) as f64) / total as f64)
}

/// Scales both gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(gb: &mut Matrix, ga: &mut Matrix, max_norm: f64) -> f64 {
    let norm = (gb.frobenius_sq() + ga.frobenius_sq()).sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        *gb = gb.scale(c);
        *ga = ga.scale(c);
    }
    norm
}

/// One clipped, bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(
    ad: &Adapter,
    opt: &OptState,
    gb: &Matrix,
    ga: &Matrix,
    lr: f64,
) -> Result<(Adapter, OptState)> {
    let mut ad = ad.clone();
    let mut opt = opt.clone();
    adam_step_in_place(&mut ad, &mut opt, gb, ga, lr)?;
    Ok((ad, opt))
}

pub fn adam_step_in_place(
    ad: &mut Adapter,
    opt: &mut OptState,
    gb: &Matrix,
    ga: &Matrix,
    lr: f64,
) -> Result<f64> {
    for (op, g, p, m) in [("adam (B)", gb, &ad.b, &opt.m_b), ("adam (A)", ga, &ad.a, &opt.m_a)] {
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(LosaError::Shape {
                op,
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    let mut gb = gb.clone();
    let mut ga = ga.clone();
    let cfg = opt.config;
    let norm = clip_global_norm(&mut gb, &mut ga, cfg.max_grad_norm);

    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let update = |param: &mut Matrix, m: &mut Matrix, v: &mut Matrix, g: &Matrix| {
        let p = param.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * cfg.weight_decay * p[k];
            p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    };
    update(&mut ad.b, &mut opt.m_b, &mut opt.v_b, &gb);
    update(&mut ad.a, &mut opt.m_a, &mut opt.v_a, &ga);
    if !(ad.b.is_finite() && ad.a.is_finite()) {
        return Err(LosaError::NonFinite("adapter parameters after Adam step".into()));
    }
    Ok(norm)
}
