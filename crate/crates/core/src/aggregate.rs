//! Entropy-weighted fusion of per-view class probabilities onto triangles.
//!
//! Each view gets a weight `(1 - mean normalized entropy over its
//! foreground)^gamma`; a triangle's label is the argmax over classes of the
//! weighted probability mass of all pixels whose triangle id is that
//! triangle, across all views that see it. Triangles seen by no view are
//! filled from the nearest covered triangle.

use crate::error::{Error, Result};
use crate::mesh::{FaceLabels, TriMesh};

pub const DEFAULT_GAMMA: f64 = 20.0;

/// Per-view network output aligned with the view's triangle-id buffer.
/// `probs` is pixel-major: `probs[p * n_classes + c]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewPrediction<'a> {
    pub tri_id: &'a [i32],
    pub probs: &'a [f32],
}

/// Shannon entropy divided by `ln(n_classes)`, clamped to `[0,1]`.
pub fn normalized_entropy(p: &[f32]) -> f64 {
    let n = p.len();
    if n < 2 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .map(|&x| x as f64)
        .filter(|&x| x > 0.0)
        .map(|x| -x * x.ln())
        .sum();
    let h = h / (n as f64).ln();
    // A uniform distribution can land an ulp below 1 after rounding.
    if h > 1.0 - 1e-9 {
        1.0
    } else {
        h.max(0.0)
    }
}

/// View weight from the mean normalized entropy over foreground pixels.
/// A view with no foreground gets weight 0.
pub fn view_weight(probs: &[f32], mask: &[bool], gamma: f64, n_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &fg) in mask.iter().enumerate() {
        if fg {
            sum += normalized_entropy(&probs[p * n_classes..(p + 1) * n_classes]);
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    let base = (1.0 - sum / count as f64).clamp(0.0, 1.0);
    base.powf(gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    /// `Some(label)` for triangles visible in at least one view.
    pub labels: Vec<Option<u32>>,
    pub weights: Vec<f64>,
}

impl Aggregated {
    pub fn coverage(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }
}

pub fn aggregate_labels(
    views: &[ViewPrediction<'_>],
    n_triangles: usize,
    n_classes: usize,
    gamma: f64,
) -> Aggregated {
    let mut acc = vec![0.0f64; n_triangles * n_classes];
    let mut seen = vec![false; n_triangles];
    let mut weights = Vec::with_capacity(views.len());
    for view in views {
        let mask: Vec<bool> = view.tri_id.iter().map(|&t| t >= 0).collect();
        let w = view_weight(view.probs, &mask, gamma, n_classes);
        weights.push(w);
        for (p, &t) in view.tri_id.iter().enumerate() {
            if t < 0 || t as usize >= n_triangles {
                continue;
            }
            let t = t as usize;
            seen[t] = true;
            let probs = &view.probs[p * n_classes..(p + 1) * n_classes];
            for (a, &pr) in acc[t * n_classes..(t + 1) * n_classes].iter_mut().zip(probs) {
                *a += w * pr as f64;
            }
        }
    }
    let labels = (0..n_triangles)
        .map(|t| {
            seen[t].then(|| {
                let row = &acc[t * n_classes..(t + 1) * n_classes];
                let mut best = 0;
                for c in 1..n_classes {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
        })
        .collect();
    Aggregated { labels, weights }
}

/// Assigns every uncovered triangle the label of the covered triangle with
/// the nearest centroid (ties to the lowest index). Covered labels are kept.
pub fn fill_occluded(mesh: &TriMesh, partial: &[Option<u32>], n_classes: usize) -> Result<FaceLabels> {
    if partial.len() != mesh.num_triangles() {
        return Err(Error::Length(partial.len(), mesh.num_triangles()));
    }
    let covered: Vec<(usize, u32)> = partial
        .iter()
        .enumerate()
        .filter_map(|(t, l)| l.map(|l| (t, l)))
        .collect();
    if covered.is_empty() {
        return Err(Error::NoLabels);
    }
    let centroids: Vec<_> = (0..mesh.num_triangles()).map(|t| mesh.centroid(t)).collect();
    let labels = partial
        .iter()
        .enumerate()
        .map(|(t, l)| {
            l.unwrap_or_else(|| {
                let mut best = (f64::INFINITY, 0u32);
                for &(s, ls) in &covered {
                    let d = (centroids[s] - centroids[t]).norm_squared();
                    if d < best.0 {
                        best = (d, ls);
                    }
                }
                best.1
            })
        })
        .collect();
    FaceLabels::new(labels, n_classes)
}
