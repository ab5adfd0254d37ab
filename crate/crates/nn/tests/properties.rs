//! Property tests for normalizing ops, network shapes and the contrastive loss.

use mvcorr_nn::losses::{info_nce, Reduction};
use mvcorr_nn::{EmbedConfig, EmbedNet, Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn nce(a: &[f64], b: &[f64], m: usize, d: usize, tau: f64, reduction: Reduction) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![m, d], a.to_vec()).unwrap());
    let b = g.constant(Tensor::new(vec![m, d], b.to_vec()).unwrap());
    let l = info_nce(&mut g, a, b, tau, reduction).unwrap();
    g.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..3, c in 1usize..7, hw in 1usize..6, spread in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * c * hw).map(|_| rng.gen_range(-spread..spread)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![n, c, hw], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s).data();
        for o in 0..n {
            for i in 0..hw {
                let total: f64 = (0..c).map(|k| v[(o * c + k) * hw + i]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(seed in any::<u64>(), c in 1usize..9, hw in 1usize..6, zero_px in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..c * hw).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = zero_px.index(hw);
        for k in 0..c {
            data[k * hw + z] = 0.0;
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, c, hw], data).unwrap());
        let y = g.l2_normalize(x, 1).unwrap();
        let v = g.value(y).data();
        for p in 0..hw {
            let n = (0..c).map(|k| v[k * hw + p].powi(2)).sum::<f64>().sqrt();
            if p == z {
                prop_assert_eq!(n, 0.0);
            } else {
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn info_nce_is_nonnegative_and_order_free(seed in any::<u64>(), m in 2usize..24, d in 1usize..9, tau in 0.02f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(m, d, &mut rng);
        let b = unit_rows(m, d, &mut rng);
        let sum = nce(&a, &b, m, d, tau, Reduction::Sum);
        let mean = nce(&a, &b, m, d, tau, Reduction::Mean);
        prop_assert!(sum >= 0.0 && mean >= 0.0);
        prop_assert!((sum / m as f64 - mean).abs() < 1e-9 * (1.0 + mean));
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let pa: Vec<f64> = order.iter().flat_map(|&r| a[r * d..(r + 1) * d].to_vec()).collect();
        let pb: Vec<f64> = order.iter().flat_map(|&r| b[r * d..(r + 1) * d].to_vec()).collect();
        prop_assert!((nce(&pa, &pb, m, d, tau, Reduction::Mean) - mean).abs() <= 1e-6);
    }

    /// Pair 0's anchor rotates towards its positive inside a plane orthogonal
    /// to every negative, so only the positive similarity changes.
    #[test]
    fn higher_positive_similarity_lowers_the_loss(seed in any::<u64>(), m in 2usize..8, th in 0.0f64..3.0, dth in 0.01f64..0.1, tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = m + 2;
        let rest = unit_rows(2 * m, d - 2, &mut rng);
        let embed = |th: f64| {
            let mut a = vec![0.0; m * d];
            let mut b = vec![0.0; m * d];
            a[0] = th.cos();
            a[1] = th.sin();
            b[0] = 1.0;
            for r in 1..m {
                a[r * d + 2..(r + 1) * d].copy_from_slice(&rest[r * (d - 2)..(r + 1) * (d - 2)]);
                b[r * d + 2..(r + 1) * d].copy_from_slice(&rest[(m + r) * (d - 2)..(m + r + 1) * (d - 2)]);
            }
            (a, b)
        };
        let (a0, b0) = embed(th + dth);
        let (a1, b1) = embed(th);
        prop_assert!(nce(&a1, &b1, m, d, tau, Reduction::Sum) < nce(&a0, &b0, m, d, tau, Reduction::Sum));
    }

    #[test]
    fn embedding_keeps_spatial_shape(half_h in 1usize..9, half_w in 1usize..9, n in 1usize..3, seed in 0u64..100) {
        let cfg = EmbedConfig { in_channels: 3, widths: [4, 4, 4, 4], dim: 5 };
        let net = EmbedNet::<f32>::new(cfg, seed).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let shape = vec![n, 3, 2 * half_h, 2 * half_w];
        let len = shape.iter().product();
        let x = g.constant(Tensor::new(shape, vec![0.5f32; len]).unwrap());
        let y = net.forward(&mut g, &p, x).unwrap();
        prop_assert_eq!(g.shape(y), &[n, 5, 2 * half_h, 2 * half_w][..]);
    }
}

#[test]
fn aligned_positives_and_opposite_negatives_approach_zero() {
    let a = [1.0, 0.0, -1.0, 0.0];
    let l = nce(&a, &a, 2, 2, 0.05, Reduction::Mean);
    assert!((0.0..1e-15).contains(&l), "loss {l}");
}
