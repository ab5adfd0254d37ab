//! Camera placement and ray-traced multi-channel views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geom::{Ray, Vec3};
use crate::mesh::{FaceLabels, Texture, TriMesh};

/// Label value for pixels that carry no class (background).
pub const IGNORE_LABEL: u8 = 255;

/// Gray level of untextured surfaces before view-angle shading.
const UNTEXTURED_GRAY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if (self.position - self.look_at).norm() <= 0.0 {
            return Err(Error::Config("camera position equals look-at".into()));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 120.0) {
            return Err(Error::Config(format!("fov {} outside (1, 120)", self.fov_deg)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("image size must be at least 8x8".into()));
        }
        Ok(())
    }

    /// Orthonormal camera frame `(right, up, forward)`.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position).normalized();
        let mut right = forward.cross(self.up);
        if right.norm() < 1e-9 {
            let alt = if forward.y.abs() < 0.9 {
                Vec3::new(0.0, 1.0, 0.0)
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            };
            right = forward.cross(alt);
        }
        let right = right.normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }

    /// Primary ray through the center of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let (right, up, forward) = self.basis();
        self.ray_with_basis(row, col, right, up, forward)
    }

    fn ray_with_basis(&self, row: usize, col: usize, right: Vec3, up: Vec3, forward: Vec3) -> Ray {
        let half = (self.fov_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * half * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * half;
        Ray {
            origin: self.position,
            dir: (forward + right * x + up * y).normalized(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSamplingConfig {
    pub n_views: usize,
    /// Camera distance from the origin for far views.
    pub radius: f64,
    /// Uniform azimuth/elevation perturbation, degrees (±).
    pub angle_jitter: f64,
    /// Relative field-of-view perturbation (±).
    pub scale_jitter: f64,
    pub closeup_fraction: f64,
    /// Distance between a closeup camera and its target surface point.
    pub closeup_distance: f64,
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ViewSamplingConfig {
    fn default() -> Self {
        ViewSamplingConfig {
            n_views: 90,
            radius: 2.0,
            angle_jitter: 10.0,
            scale_jitter: 0.1,
            closeup_fraction: 0.1,
            closeup_distance: 0.8,
            fov_deg: 60.0,
            height: 128,
            width: 128,
            seed: 0,
        }
    }
}

impl ViewSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::Config("n_views must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.closeup_fraction) {
            return Err(Error::Config("closeup_fraction must lie in [0,1]".into()));
        }
        if self.radius <= 0.0 || self.closeup_distance <= 0.0 {
            return Err(Error::Config("camera distances must be positive".into()));
        }
        if self.angle_jitter < 0.0 || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config("invalid jitter".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("image size must be at least 8x8".into()));
        }
        Ok(())
    }

    pub fn n_closeup(&self) -> usize {
        // Rounded first so 0.1 * 90 does not become 10 through float error.
        let raw = self.closeup_fraction * self.n_views as f64;
        let rounded = (raw * 1e9).round() / 1e9;
        (rounded.ceil() as usize).min(self.n_views)
    }
}

/// `i`-th of `n` points on a Fibonacci lattice over the unit sphere.
pub fn fibonacci_direction(i: usize, n: usize) -> Vec3 {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - y * y).max(0.0).sqrt();
    let phi = golden * i as f64;
    Vec3::new(r * phi.cos(), y, r * phi.sin())
}

fn up_for(forward: Vec3) -> Vec3 {
    if forward.normalized().y.abs() > 0.999 {
        Vec3::new(0.0, 0.0, 1.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    }
}

/// Area-weighted uniform point on the mesh surface.
pub fn sample_surface_point(mesh: &TriMesh, cumulative_area: &[f64], rng: &mut impl Rng) -> Vec3 {
    let total = *cumulative_area.last().unwrap_or(&0.0);
    let x = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    let tri = cumulative_area.partition_point(|&c| c <= x).min(mesh.num_triangles() - 1);
    let (a, b, c) = mesh.corners(tri);
    let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
    if r1 + r2 > 1.0 {
        r1 = 1.0 - r1;
        r2 = 1.0 - r2;
    }
    a + (b - a) * r1 + (c - a) * r2
}

/// Cameras for one shape: jittered Fibonacci-lattice far views followed by
/// closeups aimed at random surface points. Deterministic in `config.seed`.
pub fn sample_views(config: &ViewSamplingConfig, mesh: &TriMesh) -> Result<Vec<Camera>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_close = config.n_closeup();
    let n_far = config.n_views - n_close;
    let mut cams = Vec::with_capacity(config.n_views);
    let fov = |rng: &mut ChaCha8Rng| {
        let s = if config.scale_jitter > 0.0 {
            rng.gen_range(-config.scale_jitter..=config.scale_jitter)
        } else {
            0.0
        };
        (config.fov_deg * (1.0 + s)).clamp(1.5, 119.0)
    };
    for i in 0..n_far {
        let d = fibonacci_direction(i, n_far);
        let mut az = d.z.atan2(d.x);
        let mut el = d.y.clamp(-1.0, 1.0).asin();
        if config.angle_jitter > 0.0 {
            let j = config.angle_jitter.to_radians();
            az += rng.gen_range(-j..=j);
            el = (el + rng.gen_range(-j..=j)).clamp(-89f64.to_radians(), 89f64.to_radians());
        }
        let dir = Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
        let fov_deg = fov(&mut rng);
        cams.push(Camera {
            position: dir * config.radius,
            look_at: Vec3::ZERO,
            up: up_for(dir),
            fov_deg,
            height: config.height,
            width: config.width,
        });
    }
    if n_close > 0 {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut cum = Vec::with_capacity(mesh.num_triangles());
        let mut acc = 0.0;
        for t in 0..mesh.num_triangles() {
            acc += mesh.area(t);
            cum.push(acc);
        }
        for _ in 0..n_close {
            let target = sample_surface_point(mesh, &cum, &mut rng);
            // Back off radially so the camera sits outside the local surface.
            let mut out = target.normalized();
            if out.norm() < 0.5 {
                out = Vec3::new(0.0, 0.0, 1.0);
            }
            let position = target + out * config.closeup_distance;
            let fov_deg = fov(&mut rng);
            cams.push(Camera {
                position,
                look_at: target,
                up: up_for(target - position),
                fov_deg,
                height: config.height,
                width: config.width,
            });
        }
    }
    Ok(cams)
}

/// Mesh plus acceleration structure and optional texture, ready for rendering.
#[derive(Clone, Debug)]
pub struct Scene {
    pub mesh: TriMesh,
    pub bvh: Bvh,
    pub texture: Option<Texture>,
}

impl Scene {
    pub fn new(mesh: TriMesh, texture: Option<Texture>) -> Self {
        let bvh = Bvh::build(&mesh);
        Scene { mesh, bvh, texture }
    }
}

/// All per-pixel buffers of one rendered view. Vector channels are stored
/// interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBuffers {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub normal: Vec<f32>,
    pub depth: Vec<f32>,
    pub tri_id: Vec<i32>,
    pub hit: Vec<f32>,
}

impl ViewBuffers {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        ViewBuffers {
            height,
            width,
            rgb: vec![0.0; 3 * n],
            normal: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            tri_id: vec![-1; n],
            hit: vec![0.0; 3 * n],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_foreground(&self, p: usize) -> bool {
        self.tri_id[p] >= 0
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tri_id.iter().map(|&t| t >= 0).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.tri_id.iter().filter(|&&t| t >= 0).count()
    }

    pub fn hit_point(&self, p: usize) -> [f32; 3] {
        [self.hit[3 * p], self.hit[3 * p + 1], self.hit[3 * p + 2]]
    }
}

struct PixelSample {
    rgb: [f32; 3],
    normal: [f32; 3],
    depth: f64,
    tri: i32,
    hit: [f32; 3],
}

/// Ray traces one view: one primary ray per pixel center, nearest hit only.
pub fn render_view(scene: &Scene, camera: &Camera) -> ViewBuffers {
    let (h, w) = (camera.height, camera.width);
    let (right, up, forward) = camera.basis();
    let mesh = &scene.mesh;
    let samples: Vec<Option<PixelSample>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let ray = camera.ray_with_basis(p / w, p % w, right, up, forward);
            let hit = scene.bvh.intersect(mesh, &ray)?;
            let tri = hit.tri as usize;
            let mut n = mesh.face_normal(tri);
            if n.dot(ray.dir) > 0.0 {
                n = -n;
            }
            let point = ray.at(hit.t);
            let rgb = match (&scene.texture, mesh.uv_at(tri, hit.u, hit.v)) {
                (Some(tex), Some(uv)) => tex.sample(uv),
                _ => {
                    let g = (UNTEXTURED_GRAY * n.dot(ray.dir).abs()) as f32;
                    [g, g, g]
                }
            };
            Some(PixelSample {
                rgb,
                normal: n.to_f32(),
                depth: hit.t * ray.dir.dot(forward),
                tri: hit.tri as i32,
                hit: point.to_f32(),
            })
        })
        .collect();

    let mut out = ViewBuffers::empty(h, w);
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in samples.iter().flatten() {
        dmin = dmin.min(s.depth);
        dmax = dmax.max(s.depth);
    }
    // Rounding noise on a flat view must not be stretched to [0,1].
    let span = if dmax - dmin > 1e-9 * dmax.abs().max(1.0) {
        dmax - dmin
    } else {
        0.0
    };
    for (p, s) in samples.iter().enumerate() {
        let Some(s) = s else { continue };
        out.rgb[3 * p..3 * p + 3].copy_from_slice(&s.rgb);
        out.normal[3 * p..3 * p + 3].copy_from_slice(&s.normal);
        out.hit[3 * p..3 * p + 3].copy_from_slice(&s.hit);
        out.tri_id[p] = s.tri;
        out.depth[p] = if span > 0.0 {
            ((s.depth - dmin) / span) as f32
        } else {
            0.0
        };
    }
    out
}

/// Per-pixel class ids for one view; background is [`IGNORE_LABEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

pub fn render_label_map(labels: &FaceLabels, view: &ViewBuffers) -> Result<LabelMap> {
    let out = view
        .tri_id
        .iter()
        .map(|&t| {
            if t < 0 {
                return Ok(IGNORE_LABEL);
            }
            let t = t as usize;
            if t >= labels.len() {
                return Err(Error::MissingLabel(t));
            }
            let l = labels.get(t);
            if l >= IGNORE_LABEL as u32 {
                return Err(Error::Config(format!("label {l} does not fit a label map")));
            }
            Ok(l as u8)
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMap {
        height: view.height,
        width: view.width,
        labels: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::intersect_brute_force;
    use crate::geom::point_triangle_distance_sq;

    fn quad() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(-1.0, -1.0, 0.0),
                Vec3::new(1.0, -1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(-1.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn front_camera(dist: f64, size: usize) -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, dist),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_deg: 40.0,
            height: size,
            width: size,
        }
    }

    #[test]
    fn single_far_camera_at_radius_two() {
        let cfg = ViewSamplingConfig {
            n_views: 1,
            angle_jitter: 0.0,
            scale_jitter: 0.0,
            closeup_fraction: 0.0,
            ..Default::default()
        };
        let cams = sample_views(&cfg, &quad()).unwrap();
        assert_eq!(cams.len(), 1);
        assert!((cams[0].position.norm() - 2.0).abs() < 1e-12);
        assert_eq!(cams[0].look_at, Vec3::ZERO);
    }

    #[test]
    fn sampling_is_deterministic_and_splits_closeups() {
        let mesh = crate::synth::uv_sphere(12, 8);
        let cfg = ViewSamplingConfig {
            n_views: 90,
            closeup_fraction: 0.1,
            seed: 9,
            ..Default::default()
        };
        let a = sample_views(&cfg, &mesh).unwrap();
        let b = sample_views(&cfg, &mesh).unwrap();
        assert_eq!(a, b);
        let far = a.iter().filter(|c| (c.position.norm() - 2.0).abs() < 1e-9).count();
        assert_eq!(cfg.n_closeup(), 9);
        assert_eq!(far, 81);
        for c in &a[81..] {
            assert!(((c.position - c.look_at).norm() - 0.8).abs() < 1e-9);
        }
        for c in &a {
            c.validate().unwrap();
        }
    }

    #[test]
    fn quad_filling_frame_has_constant_depth() {
        let scene = Scene::new(quad(), None);
        let v = render_view(&scene, &front_camera(1.0, 16));
        assert!(v.mask().iter().all(|&m| m));
        assert!(v.tri_id.iter().all(|&t| t == 0 || t == 1));
        assert!(v.depth.iter().all(|&d| d == 0.0));
        for p in 0..v.num_pixels() {
            assert_eq!(&v.normal[3 * p..3 * p + 3], &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn looking_away_gives_background() {
        let scene = Scene::new(quad(), None);
        let cam = Camera {
            look_at: Vec3::new(0.0, 0.0, 5.0),
            ..front_camera(2.0, 16)
        };
        let v = render_view(&scene, &cam);
        assert_eq!(v, ViewBuffers::empty(16, 16));
    }

    #[test]
    fn sphere_hits_lie_on_surface_and_match_brute_force() {
        let mesh = crate::synth::uv_sphere(24, 16);
        let scene = Scene::new(mesh.clone(), None);
        let cam = front_camera(2.5, 64);
        let v = render_view(&scene, &cam);
        let fg = v.foreground_count();
        assert!(fg > 500);
        let mut dmin = f32::INFINITY;
        let mut dmax = f32::NEG_INFINITY;
        for p in 0..v.num_pixels() {
            let ray = cam.ray(p / 64, p % 64);
            let brute = intersect_brute_force(&mesh, &ray);
            match brute {
                None => assert_eq!(v.tri_id[p], -1),
                Some(h) => {
                    assert_eq!(v.tri_id[p], h.tri as i32);
                    let hp = Vec3::from_f32(v.hit_point(p));
                    assert!((hp - ray.at(h.t)).norm() < 1e-5);
                    let (a, b, c) = mesh.corners(h.tri as usize);
                    assert!(point_triangle_distance_sq(hp, a, b, c).sqrt() < 1e-5);
                    let n = &v.normal[3 * p..3 * p + 3];
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    assert!((len - 1.0).abs() < 1e-4);
                    dmin = dmin.min(v.depth[p]);
                    dmax = dmax.max(v.depth[p]);
                }
            }
        }
        assert_eq!((dmin, dmax), (0.0, 1.0));
    }

    #[test]
    fn depth_invariant_to_joint_translation() {
        let mesh = crate::synth::uv_sphere(16, 12);
        let cam = front_camera(2.5, 32);
        let a = render_view(&Scene::new(mesh.clone(), None), &cam);
        let shift = Vec3::new(0.0, 0.0, -0.75);
        let mut moved = mesh.clone();
        for v in &mut moved.vertices {
            *v += shift;
        }
        let cam2 = Camera {
            position: cam.position + shift,
            look_at: cam.look_at + shift,
            ..cam.clone()
        };
        let b = render_view(&Scene::new(moved, None), &cam2);
        assert_eq!(a.tri_id, b.tri_id);
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn label_maps() {
        let scene = Scene::new(quad(), None);
        let cam = Camera {
            fov_deg: 100.0,
            ..front_camera(1.0, 16)
        };
        let v = render_view(&scene, &cam);
        let all3 = FaceLabels::new(vec![3, 3], 4).unwrap();
        let lm = render_label_map(&all3, &v).unwrap();
        for p in 0..v.num_pixels() {
            let expect = if v.tri_id[p] >= 0 { 3 } else { IGNORE_LABEL };
            assert_eq!(lm.labels[p], expect);
        }
        assert!(lm.labels.contains(&IGNORE_LABEL));
        let short = FaceLabels::new(vec![1], 2).unwrap();
        assert!(matches!(render_label_map(&short, &v), Err(Error::MissingLabel(1))));
    }
}
