//! Pixel correspondences between two views of the same shape.
//!
//! Two foreground pixels match when their ray-traced hit points are mutual
//! nearest neighbours within `eps`. Nearest means smallest distance, then
//! smallest pixel index; this makes the matching one-to-one and symmetric.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::render::ViewBuffers;

pub const DEFAULT_MATCH_EPS: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    /// `(p, q)`: pixel index in the first view, pixel index in the second.
    pub pairs: Vec<(u32, u32)>,
    pub eps: f64,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> MatchSet {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(p, q)| (q, p)).collect();
        pairs.sort_unstable();
        MatchSet { pairs, eps: self.eps }
    }

    /// Raw dump: consecutive little-endian `u32` pairs.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pairs.len() * 8);
        for &(p, q) in &self.pairs {
            out.extend_from_slice(&p.to_le_bytes());
            out.extend_from_slice(&q.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Positive pairs drawn from a [`MatchSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<(u32, u32)>,
    pub seed: u64,
}

#[inline]
fn dist_sq(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Uniform grid over the foreground hit points of one view, CSR layout.
struct HitGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl HitGrid {
    const MAX_DIM: f64 = 128.0;

    fn new(view: &ViewBuffers, eps: f64) -> Option<HitGrid> {
        let fg: Vec<u32> = (0..view.num_pixels() as u32)
            .filter(|&p| view.is_foreground(p as usize))
            .collect();
        if fg.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &p in &fg {
            let h = view.hit_point(p as usize);
            for k in 0..3 {
                lo[k] = lo[k].min(h[k] as f64);
                hi[k] = hi[k].max(h[k] as f64);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let cell = eps.max(extent / Self::MAX_DIM).max(1e-12);
        let dims = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / cell).floor() as usize + 1);
        let mut grid = HitGrid {
            origin: lo,
            cell,
            dims,
            starts: vec![0; dims[0] * dims[1] * dims[2] + 1],
            items: vec![0; fg.len()],
        };
        let cells: Vec<usize> = fg
            .iter()
            .map(|&p| grid.flat(grid.coords(view.hit_point(p as usize))))
            .collect();
        for &c in &cells {
            grid.starts[c + 1] += 1;
        }
        for i in 1..grid.starts.len() {
            grid.starts[i] += grid.starts[i - 1];
        }
        let mut fill = grid.starts.clone();
        for (&p, &c) in fg.iter().zip(&cells) {
            grid.items[fill[c] as usize] = p;
            fill[c] += 1;
        }
        Some(grid)
    }

    fn coords(&self, h: [f32; 3]) -> [i64; 3] {
        [0, 1, 2].map(|k| ((h[k] as f64 - self.origin[k]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Nearest indexed pixel to `h` within `eps` (distance, then index).
    fn nearest(&self, view: &ViewBuffers, h: [f32; 3], eps_sq: f64) -> Option<u32> {
        let c = self.coords(h);
        let mut best: Option<(f64, u32)> = None;
        for dx in -1..=1 {
            let x = c[0] + dx;
            if x < 0 || x >= self.dims[0] as i64 {
                continue;
            }
            for dy in -1..=1 {
                let y = c[1] + dy;
                if y < 0 || y >= self.dims[1] as i64 {
                    continue;
                }
                for dz in -1..=1 {
                    let z = c[2] + dz;
                    if z < 0 || z >= self.dims[2] as i64 {
                        continue;
                    }
                    let f = self.flat([x, y, z]);
                    for &q in &self.items[self.starts[f] as usize..self.starts[f + 1] as usize] {
                        let d = dist_sq(h, view.hit_point(q as usize));
                        if d <= eps_sq && best.is_none_or(|(bd, bq)| d < bd || (d == bd && q < bq)) {
                            best = Some((d, q));
                        }
                    }
                }
            }
        }
        best.map(|(_, q)| q)
    }
}

/// Mutual-nearest matching of foreground hit points within `eps`.
/// Pairs are ordered by the first view's pixel index.
pub fn build_matches(vi: &ViewBuffers, vj: &ViewBuffers, eps: f64) -> Result<MatchSet> {
    if (vi.height, vi.width) != (vj.height, vj.width) {
        return Err(Error::Resolution(vi.height, vi.width, vj.height, vj.width));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("match eps must be positive".into()));
    }
    let empty = MatchSet {
        pairs: Vec::new(),
        eps,
    };
    let (Some(grid_i), Some(grid_j)) = (HitGrid::new(vi, eps), HitGrid::new(vj, eps)) else {
        return Ok(empty);
    };
    let eps_sq = eps * eps;
    let mut pairs = Vec::new();
    for p in 0..vi.num_pixels() {
        if !vi.is_foreground(p) {
            continue;
        }
        let Some(q) = grid_j.nearest(vj, vi.hit_point(p), eps_sq) else {
            continue;
        };
        if grid_i.nearest(vi, vj.hit_point(q as usize), eps_sq) == Some(p as u32) {
            pairs.push((p as u32, q));
        }
    }
    Ok(MatchSet { pairs, eps })
}

/// `|M| / min(|F_i|, |F_j|)`, zero when either view is empty.
pub fn overlap(vi: &ViewBuffers, vj: &ViewBuffers, eps: f64) -> Result<f64> {
    let m = build_matches(vi, vj, eps)?;
    Ok(overlap_from(&m, vi, vj))
}

pub fn overlap_from(m: &MatchSet, vi: &ViewBuffers, vj: &ViewBuffers) -> f64 {
    let denom = vi.foreground_count().min(vj.foreground_count());
    if denom == 0 {
        0.0
    } else {
        m.len() as f64 / denom as f64
    }
}

/// Uniform positives: without replacement when the set is large enough,
/// with replacement otherwise.
pub fn sample_positive_pairs(m: &MatchSet, n: usize, seed: u64) -> Result<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_positive_pairs_with(m, n, &mut rng).map(|pairs| PairSample { pairs, seed })
}

pub fn sample_positive_pairs_with(m: &MatchSet, n: usize, rng: &mut impl Rng) -> Result<Vec<(u32, u32)>> {
    if m.is_empty() {
        return Err(Error::EmptyMatches);
    }
    let pairs = if m.len() >= n {
        index::sample(rng, m.len(), n)
            .into_iter()
            .map(|i| m.pairs[i])
            .collect()
    } else {
        (0..n).map(|_| m.pairs[rng.gen_range(0..m.len())]).collect()
    };
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::mesh::TriMesh;
    use crate::render::{render_view, Camera, Scene};
    use std::collections::HashSet;

    fn plate() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(-0.5, -0.5, 0.0),
                Vec3::new(0.5, -0.5, 0.0),
                Vec3::new(0.5, 0.5, 0.0),
                Vec3::new(-0.5, 0.5, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn cam(pos: Vec3, look: Vec3, size: usize) -> Camera {
        Camera {
            position: pos,
            look_at: look,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_deg: 50.0,
            height: size,
            width: size,
        }
    }

    /// Straight O(P²) mutual-nearest scan.
    fn brute(vi: &ViewBuffers, vj: &ViewBuffers, eps: f64) -> Vec<(u32, u32)> {
        let nn = |a: &ViewBuffers, b: &ViewBuffers, p: usize| -> Option<usize> {
            let mut best: Option<(f64, usize)> = None;
            for q in 0..b.num_pixels() {
                if !b.is_foreground(q) {
                    continue;
                }
                let d = dist_sq(a.hit_point(p), b.hit_point(q));
                if d <= eps * eps && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, q));
                }
            }
            best.map(|(_, q)| q)
        };
        let mut out = Vec::new();
        for p in 0..vi.num_pixels() {
            if !vi.is_foreground(p) {
                continue;
            }
            if let Some(q) = nn(vi, vj, p) {
                if nn(vj, vi, q) == Some(p) {
                    out.push((p as u32, q as u32));
                }
            }
        }
        out
    }

    #[test]
    fn identical_views_match_themselves() {
        let scene = Scene::new(crate::synth::uv_sphere(16, 12), None);
        let v = render_view(&scene, &cam(Vec3::new(0.0, 0.3, 2.2), Vec3::ZERO, 24));
        let m = build_matches(&v, &v, DEFAULT_MATCH_EPS).unwrap();
        assert_eq!(m.len(), v.foreground_count());
        assert!(m.pairs.iter().all(|&(p, q)| p == q));
        assert_eq!(overlap(&v, &v, DEFAULT_MATCH_EPS).unwrap(), 1.0);
    }

    #[test]
    fn opposite_sides_of_a_thick_plate_do_not_match() {
        let mut m = plate();
        let n = m.vertices.len() as u32;
        let back: Vec<Vec3> = m.vertices.iter().map(|v| *v - Vec3::new(0.0, 0.0, 0.02)).collect();
        m.vertices.extend(back);
        m.triangles.push([n, n + 2, n + 1]);
        m.triangles.push([n, n + 3, n + 2]);
        let scene = Scene::new(m, None);
        let a = render_view(&scene, &cam(Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO, 24));
        let b = render_view(&scene, &cam(Vec3::new(0.0, 0.0, -2.0), Vec3::ZERO, 24));
        assert!(a.foreground_count() > 0 && b.foreground_count() > 0);
        assert!(build_matches(&a, &b, DEFAULT_MATCH_EPS).unwrap().is_empty());
        assert_eq!(overlap(&a, &b, DEFAULT_MATCH_EPS).unwrap(), 0.0);
    }

    #[test]
    fn rotated_views_match_brute_force_and_are_symmetric() {
        let scene = Scene::new(crate::synth::uv_sphere(20, 14), None);
        let a = render_view(&scene, &cam(Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO, 32));
        let r = 30f64.to_radians();
        let b = render_view(&scene, &cam(Vec3::new(2.0 * r.sin(), 0.0, 2.0 * r.cos()), Vec3::ZERO, 32));
        for eps in [0.01, 0.03, 0.1] {
            let m = build_matches(&a, &b, eps).unwrap();
            assert_eq!(m.pairs, brute(&a, &b, eps));
            assert_eq!(build_matches(&b, &a, eps).unwrap().pairs, m.swapped().pairs);
            let ps: HashSet<u32> = m.pairs.iter().map(|x| x.0).collect();
            let qs: HashSet<u32> = m.pairs.iter().map(|x| x.1).collect();
            assert_eq!(ps.len(), m.len());
            assert_eq!(qs.len(), m.len());
        }
        assert!(!build_matches(&a, &b, 0.03).unwrap().is_empty());
    }

    #[test]
    fn half_shifted_plane_overlaps_by_half() {
        let big = TriMesh::new(
            vec![
                Vec3::new(-4.0, -4.0, 0.0),
                Vec3::new(4.0, -4.0, 0.0),
                Vec3::new(4.0, 4.0, 0.0),
                Vec3::new(-4.0, 4.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let scene = Scene::new(big, None);
        let size = 32;
        let c = cam(Vec3::new(0.0, 0.0, 1.0), Vec3::ZERO, size);
        let half_width = (25f64.to_radians()).tan();
        let a = render_view(&scene, &c);
        let shift = Vec3::new(half_width, 0.0, 0.0);
        let b = render_view(&scene, &cam(c.position + shift, c.look_at + shift, size));
        let ov = overlap(&a, &b, 1e-3).unwrap();
        assert!((ov - 0.5).abs() <= 0.05, "overlap {ov}");
    }

    #[test]
    fn resolution_mismatch() {
        let a = ViewBuffers::empty(8, 8);
        let b = ViewBuffers::empty(8, 9);
        assert!(matches!(build_matches(&a, &b, 0.01), Err(Error::Resolution(..))));
    }

    #[test]
    fn pair_sampling() {
        let m = MatchSet {
            pairs: (0..10_000u32).map(|i| (i, i + 1)).collect(),
            eps: 0.01,
        };
        let s = sample_positive_pairs(&m, 4096, 1).unwrap();
        let distinct: HashSet<_> = s.pairs.iter().collect();
        assert_eq!(distinct.len(), 4096);
        assert_eq!(s, sample_positive_pairs(&m, 4096, 1).unwrap());

        let small = MatchSet {
            pairs: m.pairs[..50].to_vec(),
            eps: 0.01,
        };
        let mut perm = sample_positive_pairs(&small, 50, 3).unwrap().pairs;
        perm.sort_unstable();
        assert_eq!(perm, small.pairs);
        let over = sample_positive_pairs(&small, 200, 3).unwrap();
        assert_eq!(over.pairs.len(), 200);
        assert!(over.pairs.iter().all(|p| small.pairs.contains(p)));
        let empty = MatchSet { pairs: vec![], eps: 0.01 };
        assert!(matches!(sample_positive_pairs(&empty, 4, 0), Err(Error::EmptyMatches)));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn overlap_monotone_in_eps(az in 0.0f64..6.28, el in -1.0f64..1.0) {
            let scene = Scene::new(crate::synth::uv_sphere(12, 8), None);
            let a = render_view(&scene, &cam(Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO, 16));
            let pos = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * 2.0;
            let b = render_view(&scene, &cam(pos, Vec3::ZERO, 16));
            let mut last = 0.0;
            for eps in [0.005, 0.02, 0.05, 0.1, 0.3] {
                let o = overlap(&a, &b, eps).unwrap();
                proptest::prop_assert!(o + 1e-12 >= last);
                last = o;
            }
        }
    }
}
