//! Few-shot protocol runs and the end-to-end pipeline report.

use std::path::Path;

use log::info;
use mvcorr_core::eval::RunTable;
use mvcorr_core::synth::Split;
use mvcorr_nn::EmbedNet;

use crate::config::{FewShotProtocol, PipelineConfig};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::finetune::finetune;
use crate::infer::evaluate;
use crate::pretrain::pretrain;

/// Test-split mIoU of one fine-tuning run per protocol seed.
pub fn run_fewshot(
    ds: &mut Dataset,
    cfg: &PipelineConfig,
    protocol: &FewShotProtocol,
    init: Option<&EmbedNet<f32>>,
) -> Result<Vec<(u64, f64)>> {
    let test = ds.indices(Split::Test);
    let mut out = Vec::with_capacity(protocol.seeds.len());
    for &s in &protocol.seeds {
        let run = finetune(ds, cfg, protocol, s, init, None)?;
        let (cm, _) = evaluate(ds, &test, &run.net, &run.head, cfg)?;
        let miou = cm.part_miou()?;
        info!(
            "{} k={} v={} seed {s}: mIoU {miou:.4}",
            if init.is_some() { "pretrained" } else { "scratch" },
            protocol.k,
            protocol.v
        );
        out.push((s, miou));
    }
    Ok(out)
}

/// Pre-trains (unless `pretrain.iterations` is 0), runs the configured
/// protocol over its seeds and returns the `category,stat,value` report.
/// With `out`, the pre-training artifacts and `report.csv` land there.
pub fn run_pipeline(ds: &mut Dataset, cfg: &PipelineConfig, out: Option<&Path>) -> Result<String> {
    let init = if cfg.pretrain.iterations > 0 {
        Some(pretrain(ds, cfg, None, out)?.net)
    } else {
        None
    };
    let runs = run_fewshot(ds, cfg, &cfg.protocol, init.as_ref())?;
    let mut table = RunTable::default();
    for (s, m) in runs {
        table.push(&ds.category, s, m);
    }
    let csv = table.to_csv();
    if let Some(dir) = out {
        std::fs::write(dir.join("report.csv"), &csv)?;
    }
    Ok(csv)
}
