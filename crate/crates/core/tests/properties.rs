//! Property tests for geometry, rendering, matching, fusion and scoring.

use mvcorr_core::aggregate::{aggregate_labels, fill_occluded, view_weight, ViewPrediction};
use mvcorr_core::bvh::intersect_brute_force;
use mvcorr_core::correspond::{build_matches, overlap_from};
use mvcorr_core::eval::ConfusionMatrix;
use mvcorr_core::render::{render_view, sample_views, Camera, Scene, ViewSamplingConfig};
use mvcorr_core::synth::{generate_shape, Family, SynthSpec};
use mvcorr_core::{FaceLabels, TriMesh, Vec3, ViewBuffers};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mesh(seed: u64, n_vertices: usize, n_triangles: usize) -> TriMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    let scale = rng.gen_range(0.1..10.0);
    let vertices = (0..n_vertices)
        .map(|_| offset + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
        .collect();
    let triangles = (0..n_triangles)
        .map(|_| {
            let a = rng.gen_range(0..n_vertices as u32);
            let b = (a + rng.gen_range(1..n_vertices as u32)) % n_vertices as u32;
            let mut c = rng.gen_range(0..n_vertices as u32);
            while c == a || c == b {
                c = (c + 1) % n_vertices as u32;
            }
            [a, b, c]
        })
        .collect();
    TriMesh::new(vertices, triangles)
}

/// The 24 rotations of the cube, as signed axis permutations with det +1.
fn cube_rotations() -> Vec<[[f64; 3]; 3]> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for signs in 0..8 {
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                m[r][p[r]] = if signs >> r & 1 == 1 { -1.0 } else { 1.0 };
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            if det > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn rotate(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    let a = v.to_array();
    let r = |i: usize| m[i][0] * a[0] + m[i][1] * a[1] + m[i][2] * a[2];
    Vec3::new(r(0), r(1), r(2))
}

fn synth_scene(family: Family, seed: u64) -> (Scene, FaceLabels) {
    let s = generate_shape(&SynthSpec::new(family), seed).unwrap();
    (Scene::new(s.mesh, s.texture), s.labels)
}

fn cameras(scene: &Scene, n: usize, size: usize, seed: u64) -> Vec<Camera> {
    let cfg = ViewSamplingConfig {
        n_views: n,
        height: size,
        width: size,
        seed,
        ..Default::default()
    };
    sample_views(&cfg, &scene.mesh).unwrap()
}

/// Brute-force mutual nearest neighbours with the same f64-from-f32
/// distance, `≤ eps` test and lowest-index tie rule.
fn oracle_matches(vi: &ViewBuffers, vj: &ViewBuffers, eps: f64) -> Vec<(u32, u32)> {
    let d2 = |a: [f32; 3], b: [f32; 3]| (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>();
    let nearest = |from: &ViewBuffers, p: usize, to: &ViewBuffers| {
        let mut best: Option<(f64, usize)> = None;
        for q in 0..to.num_pixels() {
            if !to.is_foreground(q) {
                continue;
            }
            let d = d2(from.hit_point(p), to.hit_point(q));
            if d <= eps * eps && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, q));
            }
        }
        best.map(|b| b.1)
    };
    let mut out = Vec::new();
    for p in 0..vi.num_pixels() {
        if !vi.is_foreground(p) {
            continue;
        }
        if let Some(q) = nearest(vi, p, vj) {
            if nearest(vj, q, vi) == Some(p) {
                out.push((p as u32, q as u32));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalize_is_idempotent_and_commutes_with_cube_rotations(seed in 0u64..10_000, nv in 3usize..40, rot in 0usize..24) {
        let mesh = random_mesh(seed, nv, 2 * nv);
        let n1 = mesh.normalize().unwrap();
        let max_norm = n1.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        prop_assert!((max_norm - 1.0).abs() < 1e-6);
        let n2 = n1.normalize().unwrap();
        for (a, b) in n1.vertices.iter().zip(&n2.vertices) {
            prop_assert!((*a - *b).norm() < 1e-6);
        }
        let r = cube_rotations()[rot];
        let mut rotated = mesh.clone();
        rotated.vertices = mesh.vertices.iter().map(|&v| rotate(&r, v)).collect();
        let nr = rotated.normalize().unwrap();
        for (a, b) in nr.vertices.iter().zip(&n1.vertices) {
            prop_assert!((*a - rotate(&r, *b)).norm() < 1e-6);
        }
    }

    #[test]
    fn back_projection_hits_recorded_triangle(seed in 0u64..500, figure in any::<bool>(), view in 0usize..6) {
        let family = if figure { Family::Figure } else { Family::Furniture };
        let (scene, _) = synth_scene(family, seed);
        let cam = cameras(&scene, 6, 24, seed)[view].clone();
        let v = render_view(&scene, &cam);
        prop_assert_eq!(&v, &render_view(&scene, &cam));
        for p in (0..v.num_pixels()).filter(|&p| v.is_foreground(p)) {
            let ray = cam.ray(p / v.width, p % v.width);
            let hit = intersect_brute_force(&scene.mesh, &ray).expect("foreground ray hits");
            prop_assert_eq!(hit.tri as i32, v.tri_id[p]);
            let h = Vec3::from_f32(v.hit_point(p));
            prop_assert!((ray.at(hit.t) - h).norm() < 1e-5);
        }
    }

    #[test]
    fn depth_is_invariant_to_joint_translation_along_view_axis(seed in 0u64..500, shift in -3.0f64..3.0) {
        let (scene, _) = synth_scene(Family::Furniture, seed);
        let cam = cameras(&scene, 4, 24, seed)[0].clone();
        let axis = (cam.look_at - cam.position).normalized();
        let mut mesh = scene.mesh.clone();
        for v in &mut mesh.vertices {
            *v = *v + axis * shift;
        }
        let moved_cam = Camera { position: cam.position + axis * shift, look_at: cam.look_at + axis * shift, ..cam.clone() };
        let a = render_view(&scene, &cam);
        let b = render_view(&Scene::new(mesh, None), &moved_cam);
        // rays are recomputed in shifted coordinates, so a silhouette pixel
        // may flip; everything else must agree
        let agree = a.tri_id.iter().zip(&b.tri_id).filter(|(x, y)| x == y).count();
        prop_assert!(agree as f64 >= 0.99 * a.num_pixels() as f64);
        for p in (0..a.num_pixels()).filter(|&p| a.tri_id[p] == b.tri_id[p]) {
            prop_assert!((a.depth[p] - b.depth[p]).abs() < 1e-4);
        }
    }

    #[test]
    fn matching_is_symmetric_and_equals_brute_force(seed in 0u64..500, figure in any::<bool>(), i in 0usize..8, j in 0usize..8, eps in 0.01f64..0.2) {
        let family = if figure { Family::Figure } else { Family::Furniture };
        let (scene, _) = synth_scene(family, seed);
        let cams = cameras(&scene, 8, 20, seed);
        let (vi, vj) = (render_view(&scene, &cams[i]), render_view(&scene, &cams[j]));
        let m = build_matches(&vi, &vj, eps).unwrap();
        prop_assert_eq!(&m.pairs, &oracle_matches(&vi, &vj, eps));
        let mut back: Vec<(u32, u32)> = build_matches(&vj, &vi, eps).unwrap().pairs.iter().map(|&(q, p)| (p, q)).collect();
        back.sort_unstable();
        prop_assert_eq!(&m.pairs, &back);
        let wider = build_matches(&vi, &vj, eps * 1.5).unwrap();
        prop_assert!(overlap_from(&wider, &vi, &vj) >= overlap_from(&m, &vi, &vj));
    }

    #[test]
    fn single_full_view_fusion_is_per_pixel_argmax(seed in 0u64..1000, n_tri in 1usize..8, c in 2usize..5, gamma in 0.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // full coverage, one pixel per triangle, plus background pixels
        let n_px = n_tri + 4;
        let tri_id: Vec<i32> = (0..n_px).map(|p| if p < n_tri { p as i32 } else { -1 }).collect();
        let probs: Vec<f32> = (0..n_px * c).map(|_| rng.gen_range(0.01f32..1.0)).collect();
        let agg = aggregate_labels(&[ViewPrediction { tri_id: &tri_id, probs: &probs }], n_tri, c, gamma);
        for t in 0..n_tri {
            let row = &probs[t * c..(t + 1) * c];
            let argmax = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            prop_assert_eq!(agg.labels[t], Some(argmax as u32));
        }
    }

    #[test]
    fn single_view_fusion_sums_pixel_probabilities(seed in 0u64..1000, n_tri in 1usize..6, c in 2usize..5, gamma in 0.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_px = 12;
        let tri_id: Vec<i32> = (0..n_px).map(|p| if p < n_tri { p as i32 } else { rng.gen_range(-1..n_tri as i32) }).collect();
        let probs: Vec<f32> = (0..n_px * c).map(|_| rng.gen_range(0.01f32..1.0)).collect();
        let agg = aggregate_labels(&[ViewPrediction { tri_id: &tri_id, probs: &probs }], n_tri, c, gamma);
        let w = agg.weights[0];
        for t in 0..n_tri {
            let mut acc = vec![0.0f64; c];
            for p in (0..n_px).filter(|&p| tri_id[p] == t as i32) {
                for k in 0..c {
                    acc[k] += w * probs[p * c + k] as f64;
                }
            }
            let best = (0..c).fold(0, |b, k| if acc[k] > acc[b] { k } else { b });
            prop_assert_eq!(agg.labels[t], Some(best as u32));
        }
    }

    #[test]
    fn gamma_zero_is_unweighted_sum_and_weights_are_monotone(seed in 0u64..1000, c in 2usize..5, gamma in 1.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_px, n_tri, n_views) = (10, 5, 3);
        let views: Vec<(Vec<i32>, Vec<f32>)> = (0..n_views)
            .map(|_| {
                let t: Vec<i32> = (0..n_px).map(|_| rng.gen_range(-1..n_tri as i32)).collect();
                let mut p: Vec<f32> = (0..n_px * c).map(|_| rng.gen_range(0.01f32..1.0)).collect();
                for row in p.chunks_mut(c) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                }
                (t, p)
            })
            .collect();
        let preds: Vec<ViewPrediction> = views.iter().map(|(t, p)| ViewPrediction { tri_id: t, probs: p }).collect();
        let agg = aggregate_labels(&preds, n_tri, c, 0.0);
        prop_assert!(agg.weights.iter().all(|&w| w == 1.0));
        for t in 0..n_tri {
            let mut acc = vec![0.0f64; c];
            let mut seen = false;
            for (ids, p) in &views {
                for px in (0..n_px).filter(|&px| ids[px] == t as i32) {
                    seen = true;
                    for k in 0..c {
                        acc[k] += p[px * c + k] as f64;
                    }
                }
            }
            let want = seen.then(|| (0..c).fold(0, |b, k| if acc[k] > acc[b] { k } else { b }) as u32);
            prop_assert_eq!(agg.labels[t], want);
        }
        // sharpening every pixel's distribution lowers entropy and cannot lower the weight
        let (_, p) = &views[0];
        let mask = vec![true; n_px];
        let sharp: Vec<f32> = p
            .chunks(c)
            .flat_map(|row| {
                let sq: Vec<f32> = row.iter().map(|x| x * x).collect();
                let s: f32 = sq.iter().sum();
                sq.into_iter().map(move |x| x / s)
            })
            .collect();
        prop_assert!(view_weight(&sharp, &mask, gamma, c) >= view_weight(p, &mask, gamma, c));
    }

    #[test]
    fn fill_completes_and_keeps_visible_labels(seed in 0u64..500, keep in 0.05f64..1.0) {
        let (scene, truth) = synth_scene(Family::Figure, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut partial: Vec<Option<u32>> = truth.labels().iter().map(|&l| rng.gen_bool(keep).then_some(l)).collect();
        partial[0] = Some(truth.get(0));
        let filled = fill_occluded(&scene.mesh, &partial, truth.n_classes()).unwrap();
        prop_assert_eq!(filled.len(), scene.mesh.num_triangles());
        for (t, p) in partial.iter().enumerate() {
            prop_assert!((filled.get(t) as usize) < truth.n_classes());
            if let Some(l) = p {
                prop_assert_eq!(filled.get(t), *l);
            }
        }
    }

    #[test]
    fn splitting_a_triangle_keeps_the_confusion_matrix(seed in 0u64..1000, n in 1usize..12, c in 2usize..4) {
        let mesh = random_mesh(seed, n + 2, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let pr: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let mut base = ConfusionMatrix::new(c);
        base.accumulate(&FaceLabels::new(gt.clone(), c).unwrap(), &FaceLabels::new(pr.clone(), c).unwrap(), &mesh).unwrap();
        // split triangle 0 at the midpoint of its first edge
        let [a, b, cc] = mesh.triangles[0];
        let mut split = mesh.clone();
        let mid = (split.vertices[a as usize] + split.vertices[b as usize]) * 0.5;
        split.vertices.push(mid);
        let m = (split.vertices.len() - 1) as u32;
        split.triangles[0] = [a, m, cc];
        split.triangles.push([m, b, cc]);
        let (mut gt2, mut pr2) = (gt.clone(), pr.clone());
        gt2.push(gt[0]);
        pr2.push(pr[0]);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&FaceLabels::new(gt2, c).unwrap(), &FaceLabels::new(pr2, c).unwrap(), &split).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((cm.get(i, j) - base.get(i, j)).abs() < 1e-6 * (1.0 + base.get(i, j)));
            }
        }
    }
}

fn centroid_y(mesh: &TriMesh, labels: &FaceLabels, part: u32) -> Option<f64> {
    let (mut sum, mut area) = (0.0, 0.0);
    for t in (0..mesh.num_triangles()).filter(|&t| labels.get(t) == part) {
        let a = mesh.area(t);
        sum += a * mesh.centroid(t).y;
        area += a;
    }
    (area > 0.0).then(|| sum / area)
}

#[test]
fn parts_keep_their_positions_across_instances() {
    let spec = SynthSpec::new(Family::Figure);
    for seed in 0..40 {
        let s = generate_shape(&spec, seed).unwrap();
        let torso = centroid_y(&s.mesh, &s.labels, 0).expect("every figure has a torso");
        if let Some(head) = centroid_y(&s.mesh, &s.labels, 1) {
            assert!(head > torso, "seed {seed}: head below torso");
        }
        if let Some(legs) = centroid_y(&s.mesh, &s.labels, 3) {
            assert!(legs < torso, "seed {seed}: legs above torso");
        }
    }
    let spec = SynthSpec::new(Family::Furniture);
    for seed in 0..40 {
        let s = generate_shape(&spec, seed).unwrap();
        let seat = centroid_y(&s.mesh, &s.labels, 0).expect("every chair has a seat");
        if let Some(legs) = centroid_y(&s.mesh, &s.labels, 1) {
            assert!(legs < seat, "seed {seed}: legs above seat");
        }
        if let Some(back) = centroid_y(&s.mesh, &s.labels, 2) {
            assert!(back > seat, "seed {seed}: back below seat");
        }
    }
}

#[test]
fn test_shapes_show_three_parts_in_most_far_views() {
    for family in [Family::Furniture, Family::Figure] {
        let spec = SynthSpec::new(family);
        let (manifest, shapes) = mvcorr_core::synth::generate_shapes(&spec, (0, 0, 8), 7).unwrap();
        for (entry, shape) in manifest.shapes.iter().zip(&shapes) {
            let cfg = ViewSamplingConfig { n_views: 30, height: 48, width: 48, seed: entry.seed, ..Default::default() };
            let cams = sample_views(&cfg, &shape.mesh).unwrap();
            let n_far = cfg.n_views - cfg.n_closeup();
            let scene = Scene::new(shape.mesh.clone(), shape.texture.clone());
            let mut seen_in = vec![0usize; spec.n_classes()];
            for cam in &cams[..n_far] {
                let v = render_view(&scene, cam);
                let mut seen = vec![false; spec.n_classes()];
                for &t in v.tri_id.iter().filter(|&&t| t >= 0) {
                    seen[shape.labels.get(t as usize) as usize] = true;
                }
                for (k, s) in seen.iter().enumerate() {
                    seen_in[k] += *s as usize;
                }
            }
            let frequent = seen_in.iter().filter(|&&n| 2 * n >= n_far).count();
            assert!(frequent >= 3, "{family:?} {}: only {frequent} parts visible in half the far views", entry.id);
        }
    }
}
