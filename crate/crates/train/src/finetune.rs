//! Few-shot fine-tuning: supervised cross-entropy on the labeled views plus
//! an optional contrastive regularizer on unlabeled view pairs.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use mvcorr_core::render::render_label_map;
use mvcorr_core::synth::Split;
use mvcorr_core::ViewBuffers;
use mvcorr_nn::{checkpoint, losses, Adam, EmbedNet, Graph, SegHead, Var};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FewShotProtocol, LrSchedule, PipelineConfig, ViewCount};
use crate::dataset::{batch_input, Dataset, ViewCache};
use crate::error::{Result, TrainError};
use crate::pretrain::{draw_batch, ssl_batch_loss, ssl_pool};
use crate::seed;

/// Labeled shapes of one run and the views of each that supervise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub seed: u64,
    /// `(dataset index, shape id, view indices)`.
    pub shapes: Vec<(usize, String, Vec<usize>)>,
}

impl Selection {
    pub fn pool(&self) -> Vec<(usize, usize)> {
        self.shapes
            .iter()
            .flat_map(|(s, _, views)| views.iter().map(move |&v| (*s, v)))
            .collect()
    }
}

/// Draws `k` train shapes and, for `v = n`, `n` views of each. The draw
/// depends only on `seed` and the dataset, so re-running a seed reselects
/// the same shapes.
pub fn select_labeled(ds: &Dataset, k: usize, v: ViewCount, run_seed: u64) -> Result<Selection> {
    let train = ds.indices(Split::Train);
    if train.is_empty() || k == 0 {
        return Err(TrainError::EmptyLabeled);
    }
    if k > train.len() {
        return Err(TrainError::Config(format!(
            "k = {k} exceeds the {} labeled training shapes",
            train.len()
        )));
    }
    let mut rng = seed::rng(run_seed, seed::TAG_PROTOCOL);
    let mut picks: Vec<usize> = index::sample(&mut rng, train.len(), k).into_iter().map(|i| train[i]).collect();
    picks.sort_unstable();
    let mut shapes = Vec::with_capacity(k);
    for s in picks {
        let n = ds.shapes[s].n_views();
        let views = match v {
            ViewCount::All => (0..n).collect(),
            ViewCount::Count(c) if c <= n => {
                let mut vs: Vec<usize> = index::sample(&mut rng, n, c).into_vec();
                vs.sort_unstable();
                vs
            }
            ViewCount::Count(c) => {
                return Err(TrainError::Config(format!("v = {c} exceeds the {n} views per shape")));
            }
        };
        shapes.push((s, ds.shapes[s].id.clone(), views));
    }
    let sel = Selection { seed: run_seed, shapes };
    info!(
        "seed {run_seed}: labeled shapes {:?}",
        sel.shapes.iter().map(|s| (&s.1, s.2.len())).collect::<Vec<_>>()
    );
    Ok(sel)
}

/// Uniform draws (with replacement) of labeled `(shape, view)` entries.
pub struct SupervisedSampler {
    pool: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl SupervisedSampler {
    pub fn new(selection: &Selection, run_seed: u64) -> Result<Self> {
        let pool = selection.pool();
        if pool.is_empty() {
            return Err(TrainError::EmptyLabeled);
        }
        Ok(SupervisedSampler {
            pool,
            rng: seed::rng(run_seed, seed::TAG_SUPERVISED),
        })
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|_| self.pool[self.rng.gen_range(0..self.pool.len())]).collect()
    }
}

/// Input tensor and concatenated per-pixel labels for a supervised batch;
/// background pixels carry the ignore label.
pub fn supervised_batch(
    ds: &Dataset,
    cache: &mut ViewCache,
    batch: &[(usize, usize)],
    cfg: &PipelineConfig,
) -> Result<(mvcorr_nn::Tensor<f32>, Vec<u8>)> {
    let views: Vec<std::sync::Arc<ViewBuffers>> = batch.iter().map(|&(s, v)| cache.get(ds, s, v)).collect();
    let mut labels = Vec::with_capacity(views.len() * views[0].num_pixels());
    for (&(s, _), view) in batch.iter().zip(&views) {
        let fl = ds.shapes[s]
            .labels
            .as_ref()
            .ok_or_else(|| TrainError::Data(format!("shape {} has no labels", ds.shapes[s].id)))?;
        if fl.labels().iter().any(|&l| l as usize >= ds.n_classes) {
            return Err(TrainError::Data(format!(
                "shape {} has label ids ≥ {}",
                ds.shapes[s].id, ds.n_classes
            )));
        }
        labels.extend(render_label_map(fl, view)?.labels);
    }
    let refs: Vec<&ViewBuffers> = views.iter().map(|v| v.as_ref()).collect();
    Ok((batch_input(&refs, cfg.channels)?, labels))
}

/// Fresh networks for a run: the embedding net from `init` or seeded
/// random weights, the head always seeded random.
pub fn init_networks(
    cfg: &PipelineConfig,
    n_classes: usize,
    run_seed: u64,
    init: Option<&EmbedNet<f32>>,
) -> Result<(EmbedNet<f32>, SegHead<f32>)> {
    let net = match init {
        Some(n) => {
            if n.config != cfg.embed_config() {
                return Err(TrainError::Config(format!(
                    "initial network {:?} does not match configured {:?}",
                    n.config,
                    cfg.embed_config()
                )));
            }
            n.clone()
        }
        None => EmbedNet::new(cfg.embed_config(), seed::derive(run_seed, seed::TAG_EMBED_INIT))?,
    };
    let head = SegHead::new(cfg.dim, n_classes, seed::derive(run_seed, seed::TAG_HEAD_INIT))?;
    Ok((net, head))
}

/// Learning rate in effect during iteration `t` (0-based).
pub fn lr_at(schedule: &LrSchedule, lr0: f64, t: usize) -> f64 {
    match *schedule {
        LrSchedule::Exponential { every, factor } => lr0 * factor.powi((t / every) as i32),
        LrSchedule::Plateau { .. } => lr0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub iteration: usize,
    pub total: f64,
    pub sl: f64,
    /// Regularizer value; `None` when λ = 0 or no pair was usable.
    pub ssl: Option<f64>,
    pub lr: f64,
}

pub fn finetune_csv(log: &[FinetuneRecord]) -> String {
    let mut s = String::from("iteration,total,sl,ssl,lr\n");
    for r in log {
        let ssl = r.ssl.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.total, r.sl, ssl, r.lr);
    }
    s
}

pub struct FinetuneOutcome {
    pub net: EmbedNet<f32>,
    pub head: SegHead<f32>,
    pub log: Vec<FinetuneRecord>,
    pub selection: Selection,
}

/// One fine-tuning run of `protocol` with `run_seed`. The regularizer draws
/// from every view of the unlabeled shapes through its own random stream.
pub fn finetune(
    ds: &mut Dataset,
    cfg: &PipelineConfig,
    protocol: &FewShotProtocol,
    run_seed: u64,
    init: Option<&EmbedNet<f32>>,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    protocol.validate()?;
    let lambda = cfg.loss.lambda_reg;
    if lambda != 0.0 {
        let unlabeled = ds.indices(Split::Unlabeled);
        ds.compute_overlaps(&unlabeled, cfg)?;
    }
    let ds: &Dataset = ds;
    let pool = if lambda != 0.0 { ssl_pool(ds) } else { Vec::new() };
    if lambda != 0.0 && pool.is_empty() {
        return Err(TrainError::NoEligiblePairs {
            min_overlap: cfg.min_overlap,
        });
    }
    let selection = select_labeled(ds, protocol.k, protocol.v, run_seed)?;
    let mut sampler = SupervisedSampler::new(&selection, run_seed)?;
    let mut reg_rng = seed::rng(run_seed, seed::TAG_REGULARIZER);
    let (mut net, mut head) = init_networks(cfg, ds.n_classes, run_seed, init)?;
    let tc = &cfg.finetune;
    let mut opt = Adam::new(tc.lr);
    let mut cache = ViewCache::new(cfg.cache_views);
    let mut log = Vec::with_capacity(tc.iterations);
    let mut g = Graph::new();
    for it in 0..tc.iterations {
        opt.lr = lr_at(&tc.schedule, tc.lr, it);
        let batch = sampler.next_batch(tc.batch_size);
        let (x, labels) = supervised_batch(ds, &mut cache, &batch, cfg)?;
        g.reset();
        let pe = net.params.bind(&mut g);
        let ph = head.params.bind(&mut g);
        let xv = g.constant(x);
        let emb = net.forward(&mut g, &pe, xv)?;
        let logits = head.logits(&mut g, &ph, emb)?;
        let sl = match losses::cross_entropy(&mut g, logits, &labels) {
            Err(mvcorr_nn::NnError::AllIgnored) => {
                log::warn!("iteration {it}: supervised batch has no foreground; skipped");
                continue;
            }
            other => other?,
        };
        let ssl: Option<Var> = if lambda != 0.0 {
            let draws = draw_batch(ds, &mut cache, &pool, cfg.ssl_pairs, cfg, &mut reg_rng)?;
            ssl_batch_loss(&mut g, &net, &pe, ds, &mut cache, &draws, cfg)?
        } else {
            None
        };
        let total = losses::joint_loss(&mut g, sl, ssl, lambda)?;
        let rec = FinetuneRecord {
            iteration: it,
            total: g.value(total).item() as f64,
            sl: g.value(sl).item() as f64,
            ssl: ssl.map(|s| g.value(s).item() as f64),
            lr: opt.lr,
        };
        if !rec.total.is_finite() {
            return Err(TrainError::NonFinite {
                what: "fine-tuning loss",
                iteration: it,
            });
        }
        g.backward(total)?;
        let grads: Vec<Vec<f32>> = pe.iter().chain(&ph).map(|&p| g.grad(p).to_vec()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<_> = net.params.tensors.iter_mut().chain(head.params.tensors.iter_mut()).collect();
        opt.step(&mut params, &grad_refs)?;
        if it % 50 == 0 {
            info!("finetune {it}/{}: total {:.4} sl {:.4}", tc.iterations, rec.total, rec.sl);
        }
        log.push(rec);
        if let Some(dir) = out {
            if tc.checkpoint_every > 0 && (it + 1) % tc.checkpoint_every == 0 {
                checkpoint::save(
                    &dir.join(format!("finetune_{:06}.ckpt", it + 1)),
                    &[&net.params, &head.params],
                )?;
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join("finetune.ckpt"), &[&net.params, &head.params])?;
        std::fs::write(dir.join("finetune_loss.csv"), finetune_csv(&log))?;
        std::fs::write(dir.join("selection.json"), serde_json::to_string_pretty(&selection)?)?;
    }
    Ok(FinetuneOutcome {
        net,
        head,
        log,
        selection,
    })
}
