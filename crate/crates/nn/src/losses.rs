//! Contrastive, supervised and joint objectives built from graph ops.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;

pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Weight λ of the self-supervised regularizer during fine-tuning.
    pub lambda_reg: f64,
    /// Matched pixel pairs sampled per view pair.
    pub n_pairs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            lambda_reg: 0.001,
            n_pairs: 4096,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NnError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(NnError::Config(format!("lambda_reg must be ≥ 0, got {}", self.lambda_reg)));
        }
        if self.n_pairs < 2 {
            return Err(NnError::Config(format!("n_pairs must be ≥ 2, got {}", self.n_pairs)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

fn check_unit_rows<T: Real>(g: &Graph<T>, v: Var) -> Result<()> {
    if !cfg!(debug_assertions) {
        return Ok(());
    }
    let t = g.value(v);
    let d = t.shape()[1];
    for row in t.data().chunks(d) {
        let n = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if n != 0.0 && (n - 1.0).abs() > 1e-4 {
            return Err(NnError::Config(format!("InfoNCE input row has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn reduce<T: Real>(g: &mut Graph<T>, total: Var, m: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, T::of(1.0 / m as f64)),
    }
}

/// Dense InfoNCE over row-aligned matched embeddings: row `r` of `emb_i`
/// and row `r` of `emb_j` are a positive pair, every other row of `emb_j`
/// is a negative for it. The positive stays in the denominator.
pub fn info_nce<T: Real>(g: &mut Graph<T>, emb_i: Var, emb_j: Var, tau: f64, reduction: Reduction) -> Result<Var> {
    check_unit_rows(g, emb_i)?;
    check_unit_rows(g, emb_j)?;
    let m = g.shape(emb_i)[0];
    let total = g.info_nce_sum(emb_i, emb_j, tau)?;
    Ok(reduce(g, total, m, reduction))
}

/// Same value as [`info_nce`] assembled from generic ops (matmul, log-softmax,
/// label pick); materializes the full M×M logit matrix.
pub fn info_nce_composed<T: Real>(
    g: &mut Graph<T>,
    emb_i: Var,
    emb_j: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let m = g.shape(emb_i)[0];
    if m < 2 {
        return Err(NnError::TooFewPairs(m));
    }
    let logits = g.matmul(emb_i, emb_j, true)?;
    let logits = g.scale(logits, T::of(1.0 / tau));
    let lsm = g.log_softmax(logits, 1)?;
    let (picked, _) = g.pick_sum(lsm, 1, (0..m as u32).collect(), None)?;
    let total = g.scale(picked, -T::one());
    Ok(reduce(g, total, m, reduction))
}

/// Row-aligned pixel embeddings for matched pairs: `(sample_i, p)` from
/// `emb_a` and `(sample_j, q)` from `emb_b`, both (N, D, H, W).
pub fn gather_pairs<T: Real>(
    g: &mut Graph<T>,
    emb_a: Var,
    emb_b: Var,
    pairs: &[((u32, u32), (u32, u32))],
) -> Result<(Var, Var)> {
    let a = g.gather_pixels(emb_a, pairs.iter().map(|p| p.0).collect())?;
    let b = g.gather_pixels(emb_b, pairs.iter().map(|p| p.1).collect())?;
    Ok((a, b))
}

fn labels_u32(labels: &[u8]) -> Vec<u32> {
    labels.iter().map(|&l| l as u32).collect()
}

/// Mean over non-ignored pixels of −log softmax(logits)[label]; `logits` is
/// (N, C, H, W) and `labels` holds N·H·W entries.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let lsm = g.log_softmax(logits, 1)?;
    nll(g, lsm, labels)
}

/// Cross-entropy from probabilities that already sum to one per pixel.
pub fn cross_entropy_probs<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let lp = g.log(probs);
    nll(g, lp, labels)
}

fn nll<T: Real>(g: &mut Graph<T>, log_probs: Var, labels: &[u8]) -> Result<Var> {
    let (picked, count) = g.pick_sum(log_probs, 1, labels_u32(labels), Some(IGNORE as u32))?;
    if count == 0 {
        return Err(NnError::AllIgnored);
    }
    Ok(g.scale(picked, T::of(-1.0 / count as f64)))
}

/// `λ·ssl + sl`; with λ = 0 or no regularizer the supervised node is
/// returned unchanged.
pub fn joint_loss<T: Real>(g: &mut Graph<T>, sl: Var, ssl: Option<Var>, lambda: f64) -> Result<Var> {
    match ssl {
        Some(ssl) if lambda != 0.0 => {
            let r = g.scale(ssl, T::of(lambda));
            g.add(r, sl)
        }
        _ => Ok(sl),
    }
}

/// Scalar form of the joint objective used for logging.
pub fn joint_finetune_loss(sl: f64, ssl: f64, lambda: f64) -> Result<f64> {
    if sl.is_nan() || ssl.is_nan() || lambda.is_nan() {
        return Err(NnError::NonFinite("joint loss input"));
    }
    Ok(if lambda == 0.0 { sl } else { lambda * ssl + sl })
}
