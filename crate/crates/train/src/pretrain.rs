//! Contrastive pre-training of the embedding network on matched pixels of
//! overlapping view pairs.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use mvcorr_core::correspond::{build_matches, sample_positive_pairs_with};
use mvcorr_core::synth::Split;
use mvcorr_core::ViewBuffers;
use mvcorr_nn::losses::{self, Reduction};
use mvcorr_nn::{checkpoint, Adam, EmbedNet, Graph, Real, Var};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LrSchedule, PipelineConfig};
use crate::dataset::{batch_input, Dataset, ViewCache};
use crate::error::{Result, TrainError};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for r in curve {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.loss, r.lr);
    }
    s
}

/// One sampled view pair of one shape with its positive pixel pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDraw {
    pub shape: usize,
    pub view_i: usize,
    pub view_j: usize,
    pub pairs: Vec<(u32, u32)>,
}

/// Shapes of `split` that have at least one eligible view pair.
pub fn ssl_pool(ds: &Dataset) -> Vec<usize> {
    ds.indices(Split::Unlabeled)
        .into_iter()
        .filter(|&s| !ds.shapes[s].eligible.is_empty())
        .collect()
}

/// Picks an eligible view pair of `shape` (random direction) and samples
/// `n_pairs` positives from its matches.
pub fn draw_pair(
    ds: &Dataset,
    cache: &mut ViewCache,
    shape: usize,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PairDraw>> {
    let eligible = &ds.shapes[shape].eligible;
    if eligible.is_empty() {
        return Ok(None);
    }
    let (a, b) = eligible[rng.gen_range(0..eligible.len())];
    let (i, j) = if rng.gen_bool(0.5) {
        (a as usize, b as usize)
    } else {
        (b as usize, a as usize)
    };
    let (vi, vj) = (cache.get(ds, shape, i), cache.get(ds, shape, j));
    let m = build_matches(&vi, &vj, cfg.match_eps)?;
    if m.len() < 2 {
        return Ok(None);
    }
    let pairs = sample_positive_pairs_with(&m, cfg.loss.n_pairs, rng)?;
    Ok(Some(PairDraw {
        shape,
        view_i: i,
        view_j: j,
        pairs,
    }))
}

/// Draws `count` pairs from distinct pool shapes (with replacement only
/// when the pool is smaller than `count`).
pub fn draw_batch(
    ds: &Dataset,
    cache: &mut ViewCache,
    pool: &[usize],
    count: usize,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairDraw>> {
    let picks: Vec<usize> = if count <= pool.len() {
        index::sample(rng, pool.len(), count).into_iter().collect()
    } else {
        (0..count).map(|_| rng.gen_range(0..pool.len())).collect()
    };
    let mut out = Vec::with_capacity(count);
    for p in picks {
        match draw_pair(ds, cache, pool[p], cfg, rng)? {
            Some(d) => out.push(d),
            None => warn!("shape {} yielded no usable pair; skipped", ds.shapes[pool[p]].id),
        }
    }
    Ok(out)
}

fn embedding_is_valid<T: Real>(emb: &[T], d: usize, hw: usize, n: usize, p: usize) -> bool {
    (0..d).any(|c| emb[(n * d + c) * hw + p] != T::zero())
}

/// Mean over draws of the mean-reduced InfoNCE. All views go through one
/// batched forward pass; pairs touching a guarded zero embedding are
/// dropped. Returns `None` when no draw keeps at least two pairs.
pub fn ssl_batch_loss(
    g: &mut Graph<f32>,
    net: &EmbedNet<f32>,
    params: &[Var],
    ds: &Dataset,
    cache: &mut ViewCache,
    draws: &[PairDraw],
    cfg: &PipelineConfig,
) -> Result<Option<Var>> {
    if draws.is_empty() {
        return Ok(None);
    }
    let views: Vec<std::sync::Arc<ViewBuffers>> = draws
        .iter()
        .flat_map(|d| [cache.get(ds, d.shape, d.view_i), cache.get(ds, d.shape, d.view_j)])
        .collect();
    let refs: Vec<&ViewBuffers> = views.iter().map(|v| v.as_ref()).collect();
    let x = g.constant(batch_input(&refs, cfg.channels)?);
    let emb = net.forward(g, params, x)?;
    let (d, hw) = (cfg.dim, refs[0].num_pixels());
    let mut total: Option<Var> = None;
    let mut used = 0usize;
    for (k, draw) in draws.iter().enumerate() {
        let (ni, nj) = (2 * k as u32, 2 * k as u32 + 1);
        let ev = g.value(emb).data();
        let pairs: Vec<((u32, u32), (u32, u32))> = draw
            .pairs
            .iter()
            .filter(|&&(p, q)| {
                embedding_is_valid(ev, d, hw, ni as usize, p as usize)
                    && embedding_is_valid(ev, d, hw, nj as usize, q as usize)
            })
            .map(|&(p, q)| ((ni, p), (nj, q)))
            .collect();
        if pairs.len() < 2 {
            continue;
        }
        let (a, b) = losses::gather_pairs(g, emb, emb, &pairs)?;
        let l = losses::info_nce(g, a, b, cfg.loss.tau, Reduction::Mean)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        used += 1;
    }
    Ok(total.map(|t| g.scale(t, 1.0 / used as f32)))
}

pub struct PretrainOutcome {
    pub net: EmbedNet<f32>,
    pub curve: Vec<LossRecord>,
}

/// Applies the plateau rule after `done` iterations; returns the new rate.
pub fn plateau_lr(curve: &[LossRecord], done: usize, lr: f64, window: usize, threshold: f64) -> f64 {
    if done == 0 || done % window != 0 || done < 2 * window || curve.len() < 2 * window {
        return lr;
    }
    let n = curve.len();
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let last = mean(&curve[n - window..]);
    let prev = mean(&curve[n - 2 * window..n - window]);
    if (prev - last) < threshold * prev.abs() {
        lr * 0.5
    } else {
        lr
    }
}

/// Pre-trains from `init` (or a seeded random network). With `out`, writes
/// periodic checkpoints, `pretrain.ckpt` and `pretrain_loss.csv` there.
pub fn pretrain(
    ds: &mut Dataset,
    cfg: &PipelineConfig,
    init: Option<EmbedNet<f32>>,
    out: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let unlabeled = ds.indices(Split::Unlabeled);
    ds.compute_overlaps(&unlabeled, cfg)?;
    let ds: &Dataset = ds;
    let pool = ssl_pool(ds);
    if pool.is_empty() {
        return Err(TrainError::NoEligiblePairs {
            min_overlap: cfg.min_overlap,
        });
    }
    let mut net = match init {
        Some(n) => n,
        None => EmbedNet::new(cfg.embed_config(), seed::derive(cfg.seed, seed::TAG_EMBED_INIT))?,
    };
    let tc = &cfg.pretrain;
    let mut rng = seed::rng(cfg.seed, seed::TAG_PRETRAIN);
    let mut cache = ViewCache::new(cfg.cache_views);
    let mut opt = Adam::new(tc.lr);
    let mut curve = Vec::with_capacity(tc.iterations);
    let mut g = Graph::new();
    for it in 0..tc.iterations {
        let draws = draw_batch(ds, &mut cache, &pool, tc.batch_size, cfg, &mut rng)?;
        g.reset();
        let params = net.params.bind(&mut g);
        let Some(loss) = ssl_batch_loss(&mut g, &net, &params, ds, &mut cache, &draws, cfg)? else {
            warn!("iteration {it}: empty batch skipped");
            continue;
        };
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                what: "pre-training loss",
                iteration: it,
            });
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f32>> = params.iter().map(|&p| g.grad(p).to_vec()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        opt.step(&mut net.params.tensors.iter_mut().collect::<Vec<_>>(), &grad_refs)?;
        curve.push(LossRecord {
            iteration: it,
            loss: value,
            lr: opt.lr,
        });
        if let LrSchedule::Plateau { window, threshold } = tc.schedule {
            let new_lr = plateau_lr(&curve, it + 1, opt.lr, window, threshold);
            if new_lr != opt.lr {
                info!("iteration {}: loss plateau, lr {} -> {}", it + 1, opt.lr, new_lr);
                opt.lr = new_lr;
            }
        }
        if it % 50 == 0 {
            info!("pretrain {it}/{}: loss {value:.4} lr {}", tc.iterations, opt.lr);
        }
        if let Some(dir) = out {
            if tc.checkpoint_every > 0 && (it + 1) % tc.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("pretrain_{:06}.ckpt", it + 1)), &[&net.params])?;
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join("pretrain.ckpt"), &[&net.params])?;
        std::fs::write(dir.join("pretrain_loss.csv"), loss_csv(&curve))?;
    }
    Ok(PretrainOutcome { net, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(losses: &[f64]) -> Vec<LossRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRecord {
                iteration: i,
                loss: l,
                lr: 1.0,
            })
            .collect()
    }

    #[test]
    fn plateau_rule() {
        let flat = rec(&[1.0; 8]);
        assert_eq!(plateau_lr(&flat, 8, 1.0, 4, 0.01), 0.5);
        assert_eq!(plateau_lr(&flat, 7, 1.0, 4, 0.01), 1.0);
        assert_eq!(plateau_lr(&flat[..4], 4, 1.0, 4, 0.01), 1.0);
        let falling = rec(&[2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(plateau_lr(&falling, 8, 1.0, 4, 0.01), 1.0);
        let slow = rec(&[1.0, 1.0, 1.0, 1.0, 0.995, 0.995, 0.995, 0.995]);
        assert_eq!(plateau_lr(&slow, 8, 1.0, 4, 0.01), 0.5);
    }

    #[test]
    fn csv_layout() {
        let s = loss_csv(&rec(&[0.5, 0.25]));
        assert_eq!(s, "iteration,loss,lr\n0,0.5,1\n1,0.25,1\n");
    }
}
