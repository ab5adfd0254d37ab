//! Parameter containers plus the pixel-embedding network and the
//! segmentation head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Inserts every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Inserts every tensor as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// He-style uniform init: weights in ±sqrt(6 / fan_in), zero biases.
fn conv_params<T: Real>(set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
    let fan_in = cin * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = (0..cout * fan_in).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    set.push(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], w).expect("sized"));
    set.push(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    /// Input channels K (3 rgb + 3 normal + 1 depth by default).
    pub in_channels: usize,
    /// Widths of the four hidden convolutions.
    pub widths: [usize; 4],
    /// Embedding dimension D.
    pub dim: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            in_channels: 7,
            widths: [32, 64, 64, 32],
            dim: 16,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.dim == 0 || self.widths.contains(&0) {
            return Err(NnError::Config(format!("embedding network sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Multiply-accumulates of one forward pass on an H×W view.
    pub fn forward_macs(&self, h: usize, w: usize) -> usize {
        let [a, b, c, d] = self.widths;
        let full = h * w;
        let half = (h / 2) * (w / 2);
        9 * (self.in_channels * a * full + a * b * half + b * c * half + c * d * full + d * self.dim * full)
    }
}

const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const DOWN3: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const POINT: ConvSpec = ConvSpec { stride: 1, pad: 0 };

/// conv3×3 → relu → conv3×3/2 → relu → conv3×3 → relu → bilinear ×2 →
/// conv3×3 → relu → conv3×3 → per-pixel L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNet<T> {
    pub config: EmbedConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> EmbedNet<T> {
    pub fn new(config: EmbedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [a, b, c, d] = config.widths;
        conv_params(&mut params, "embed.conv1", config.in_channels, a, 3, &mut rng);
        conv_params(&mut params, "embed.conv2", a, b, 3, &mut rng);
        conv_params(&mut params, "embed.conv3", b, c, 3, &mut rng);
        conv_params(&mut params, "embed.conv4", c, d, 3, &mut rng);
        conv_params(&mut params, "embed.conv5", d, config.dim, 3, &mut rng);
        Ok(EmbedNet { config, params })
    }

    /// Pre-normalization features for an (N, K, H, W) input with even H, W.
    pub fn features(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(NnError::Channels {
                expected: self.config.in_channels,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(NnError::Config(format!("view size {}×{} must be even", s[2], s[3])));
        }
        let h = g.conv2d(x, p[0], Some(p[1]), SAME3)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[2], Some(p[3]), DOWN3)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[4], Some(p[5]), SAME3)?;
        let h = g.relu(h);
        let h = g.upsample2(h)?;
        let h = g.conv2d(h, p[6], Some(p[7]), SAME3)?;
        let h = g.relu(h);
        g.conv2d(h, p[8], Some(p[9]), SAME3)
    }

    /// Unit-norm per-pixel embeddings, shape (N, D, H, W).
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let f = self.features(g, p, x)?;
        g.l2_normalize(f, 1)
    }
}

/// One 1×1 convolution from D to |C| channels; softmax is applied by the
/// caller (`probs`) or folded into the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead<T> {
    pub dim: usize,
    pub n_classes: usize,
    pub params: ParamSet<T>,
}

impl<T: Real> SegHead<T> {
    pub fn new(dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_classes < 2 {
            return Err(NnError::Config(format!(
                "segmentation head needs D ≥ 1 and at least 2 classes, got D={dim}, C={n_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        conv_params(&mut params, "seg.conv", dim, n_classes, 1, &mut rng);
        Ok(SegHead { dim, n_classes, params })
    }

    /// Class logits (N, C, H, W).
    pub fn logits(&self, g: &mut Graph<T>, p: &[Var], emb: Var) -> Result<Var> {
        g.conv2d(emb, p[0], Some(p[1]), POINT)
    }

    /// Per-pixel class probabilities (N, C, H, W).
    pub fn probs(&self, g: &mut Graph<T>, p: &[Var], emb: Var) -> Result<Var> {
        let z = self.logits(g, p, emb)?;
        g.softmax(z, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_and_unit_norm() {
        let net = EmbedNet::<f64>::new(
            EmbedConfig {
                in_channels: 3,
                widths: [4, 6, 6, 4],
                dim: 5,
            },
            1,
        )
        .unwrap();
        for (h, w) in [(8, 8), (6, 10), (2, 4)] {
            let mut g = Graph::new();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i as f64) * 0.7).sin()).collect();
            let xv = g.constant(Tensor::new(vec![2, 3, h, w], x).unwrap());
            let p = net.params.bind(&mut g);
            let e = net.forward(&mut g, &p, xv).unwrap();
            assert_eq!(g.shape(e), &[2, 5, h, w]);
            let v = g.value(e).data();
            for n in 0..2 {
                for px in 0..h * w {
                    let norm: f64 = (0..5).map(|c| v[(n * 5 + c) * h * w + px].powi(2)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-5 || norm == 0.0);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_and_odd_sizes_rejected() {
        let net = EmbedNet::<f32>::new(EmbedConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(matches!(net.forward(&mut g, &p, x), Err(NnError::Channels { expected: 7, got: 3 })));
        let x = g.constant(Tensor::zeros(vec![1, 7, 7, 8]));
        assert!(net.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn zero_input_gives_guarded_zero_embedding() {
        // zero input and zero biases: every pre-normalization feature is 0
        let net = EmbedNet::<f32>::new(EmbedConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 7, 8, 8]));
        let e = net.forward(&mut g, &p, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_probs_sum_to_one() {
        let head = SegHead::<f32>::new(4, 3, 9).unwrap();
        let mut g = Graph::new();
        let p = head.params.bind(&mut g);
        let e: Vec<f32> = (0..4 * 6).map(|i| (i as f32 * 0.3).cos()).collect();
        let ev = g.constant(Tensor::new(vec![1, 4, 2, 3], e).unwrap());
        let pr = head.probs(&mut g, &p, ev).unwrap();
        let v = g.value(pr).data();
        for px in 0..6 {
            let s: f32 = (0..3).map(|c| v[c * 6 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(SegHead::<f32>::new(4, 1, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = EmbedNet::<f32>::new(EmbedConfig::default(), 5).unwrap();
        let b = EmbedNet::<f32>::new(EmbedConfig::default(), 5).unwrap();
        let c = EmbedNet::<f32>::new(EmbedConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
