//! Per-view prediction, fusion onto the surface, occlusion fill and scoring.

use mvcorr_core::aggregate::{aggregate_labels, fill_occluded, Aggregated, ViewPrediction};
use mvcorr_core::eval::ConfusionMatrix;
use mvcorr_core::render::render_view;
use mvcorr_core::{FaceLabels, ViewBuffers};
use mvcorr_nn::{EmbedNet, Graph, SegHead};

use crate::config::PipelineConfig;
use crate::dataset::{batch_input, Dataset};
use crate::error::{Result, TrainError};

/// Class probabilities of every pixel of `views`, pixel-major (`p·C + c`),
/// one vector per view.
pub fn predict_views(
    net: &EmbedNet<f32>,
    head: &SegHead<f32>,
    views: &[ViewBuffers],
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<f32>>> {
    let c = head.n_classes;
    let mut out = Vec::with_capacity(views.len());
    let mut g = Graph::new();
    for chunk in views.chunks(cfg.infer_batch.max(1)) {
        g.reset();
        let pe = net.params.bind_frozen(&mut g);
        let ph = head.params.bind_frozen(&mut g);
        let refs: Vec<&ViewBuffers> = chunk.iter().collect();
        let x = g.constant(batch_input(&refs, cfg.channels)?);
        let emb = net.forward(&mut g, &pe, x)?;
        let probs = head.probs(&mut g, &ph, emb)?;
        let data = g.value(probs).data();
        for (n, view) in chunk.iter().enumerate() {
            let hw = view.num_pixels();
            let base = &data[n * c * hw..(n + 1) * c * hw];
            let mut pm = vec![0.0f32; hw * c];
            for k in 0..c {
                for p in 0..hw {
                    pm[p * c + k] = base[k * hw + p];
                }
            }
            out.push(pm);
        }
    }
    Ok(out)
}

pub struct ShapePrediction {
    pub aggregated: Aggregated,
    /// Complete labeling after occlusion fill.
    pub labels: FaceLabels,
}

/// Renders every camera of shape `s`, predicts, fuses and fills.
pub fn infer_shape(
    ds: &Dataset,
    s: usize,
    net: &EmbedNet<f32>,
    head: &SegHead<f32>,
    cfg: &PipelineConfig,
) -> Result<ShapePrediction> {
    let shape = &ds.shapes[s];
    let views: Vec<ViewBuffers> = shape.cameras.iter().map(|c| render_view(&shape.scene, c)).collect();
    let probs = predict_views(net, head, &views, cfg)?;
    let preds: Vec<ViewPrediction<'_>> = views
        .iter()
        .zip(&probs)
        .map(|(v, p)| ViewPrediction {
            tri_id: &v.tri_id,
            probs: p,
        })
        .collect();
    let n_tri = shape.scene.mesh.num_triangles();
    let aggregated = aggregate_labels(&preds, n_tri, head.n_classes, cfg.gamma);
    let labels = fill_occluded(&shape.scene.mesh, &aggregated.labels, head.n_classes)?;
    Ok(ShapePrediction { aggregated, labels })
}

/// Predicts every listed shape and accumulates one area-weighted confusion
/// matrix against the ground truth.
pub fn evaluate(
    ds: &Dataset,
    shapes: &[usize],
    net: &EmbedNet<f32>,
    head: &SegHead<f32>,
    cfg: &PipelineConfig,
) -> Result<(ConfusionMatrix, Vec<ShapePrediction>)> {
    let mut cm = ConfusionMatrix::new(head.n_classes);
    let mut preds = Vec::with_capacity(shapes.len());
    for &s in shapes {
        let gt = ds.shapes[s]
            .labels
            .as_ref()
            .ok_or_else(|| TrainError::Data(format!("shape {} has no ground truth", ds.shapes[s].id)))?;
        let p = infer_shape(ds, s, net, head, cfg)?;
        cm.accumulate(gt, &p.labels, &ds.shapes[s].scene.mesh)?;
        preds.push(p);
    }
    Ok((cm, preds))
}
