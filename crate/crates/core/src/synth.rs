//! Procedural labeled shapes for desk-scale experiments.
//!
//! Two families with positionally consistent part ids:
//! * `Furniture`: untextured chairs built from boxes and cylinders; parts are
//!   told apart by geometry (rendered on the grayscale path).
//! * `Figure`: textured stick figures whose torso and hips share one
//!   continuous box, so some part boundaries exist only in the texture.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{FaceLabels, Texture, TriMesh};

pub const TEXTURE_SIZE: usize = 256;
const TILE_COLS: usize = 4;
const TILE_ROWS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Furniture,
    Figure,
}

impl Family {
    pub fn max_parts(self) -> usize {
        match self {
            Family::Furniture => 6,
            Family::Figure => 8,
        }
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            Family::Furniture => &["seat", "legs", "back", "arms", "stretchers", "top-rail"],
            Family::Figure => &["torso", "head", "arms", "legs", "hips", "hands", "feet", "hat"],
        }
    }

    pub fn is_textured(self) -> bool {
        matches!(self, Family::Figure)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "furniture" | "composite-furniture" => Ok(Family::Furniture),
            "figure" | "articulated-figure" => Ok(Family::Figure),
            _ => Err(Error::Config(format!("unknown family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    /// Inclusive range of part counts; parts are taken in slot order.
    pub min_parts: usize,
    pub max_parts: usize,
    /// Relative jitter applied to dimensions (0.25 = ±25%).
    pub scale_jitter: f64,
    /// Jitter of articulation angles, radians.
    pub pose_jitter: f64,
    /// Per-instance color jitter per channel.
    pub hue_jitter: f64,
    pub segments: usize,
}

impl SynthSpec {
    pub fn new(family: Family) -> Self {
        SynthSpec {
            family,
            min_parts: 4,
            max_parts: family.max_parts(),
            scale_jitter: 0.25,
            pose_jitter: 0.35,
            hue_jitter: 0.08,
            segments: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_parts < 1 || self.min_parts > self.max_parts || self.max_parts > self.family.max_parts() {
            return Err(Error::Config(format!(
                "part range {}..={} invalid for family (max {})",
                self.min_parts,
                self.max_parts,
                self.family.max_parts()
            )));
        }
        if self.segments < 3 {
            return Err(Error::Config("segments must be at least 3".into()));
        }
        Ok(())
    }

    /// Number of classes shared by every shape of this spec.
    pub fn n_classes(&self) -> usize {
        self.max_parts
    }
}

#[derive(Clone, Debug)]
pub struct SynthShape {
    pub mesh: TriMesh,
    pub labels: FaceLabels,
    pub texture: Option<Texture>,
}

/// Accumulates primitives with per-triangle part ids and atlas UVs.
#[derive(Default)]
struct Builder {
    mesh: TriMesh,
    labels: Vec<u32>,
}

fn tile_uv(part: usize, s: f64, t: f64) -> [f64; 2] {
    let (col, row) = (part % TILE_COLS, part / TILE_COLS);
    let inset = 2.0 / TEXTURE_SIZE as f64;
    let (w, h) = (1.0 / TILE_COLS as f64, 1.0 / TILE_ROWS as f64);
    [
        col as f64 * w + inset + s.clamp(0.0, 1.0) * (w - 2.0 * inset),
        row as f64 * h + inset + t.clamp(0.0, 1.0) * (h - 2.0 * inset),
    ]
}

impl Builder {
    fn vertex(&mut self, p: Vec3) -> u32 {
        self.mesh.vertices.push(p);
        (self.mesh.vertices.len() - 1) as u32
    }

    fn uv(&mut self, part: usize, s: f64, t: f64) -> u32 {
        self.mesh.uvs.push(tile_uv(part, s, t));
        (self.mesh.uvs.len() - 1) as u32
    }

    fn tri(&mut self, v: [u32; 3], uv: [u32; 3], part: usize) {
        self.mesh.triangles.push(v);
        self.mesh.tri_uvs.push(uv);
        self.labels.push(part as u32);
    }

    /// Oriented box; `axes` must be orthonormal and right-handed.
    fn cuboid(&mut self, center: Vec3, axes: [Vec3; 3], half: [f64; 3], part: usize) {
        for a in 0..3 {
            for sign in [-1.0, 1.0] {
                let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                let n = axes[a] * sign;
                let fc = center + n * half[a];
                let (eb, ec) = (axes[b] * half[b], axes[c] * half[c]);
                let corners = [fc - eb - ec, fc + eb - ec, fc + eb + ec, fc - eb + ec];
                let st = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
                let vs = corners.map(|p| self.vertex(p));
                let us = st.map(|(s, t)| self.uv(part, s, t));
                // b × c = a, so counter-clockwise order faces +a.
                if sign > 0.0 {
                    self.tri([vs[0], vs[1], vs[2]], [us[0], us[1], us[2]], part);
                    self.tri([vs[0], vs[2], vs[3]], [us[0], us[2], us[3]], part);
                } else {
                    self.tri([vs[0], vs[2], vs[1]], [us[0], us[2], us[1]], part);
                    self.tri([vs[0], vs[3], vs[2]], [us[0], us[3], us[2]], part);
                }
            }
        }
    }

    fn aabb_box(&mut self, center: Vec3, half: [f64; 3], part: usize) {
        self.cuboid(
            center,
            [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
            half,
            part,
        );
    }

    fn cylinder(&mut self, p0: Vec3, p1: Vec3, radius: f64, segs: usize, part: usize) {
        let axis = (p1 - p0).normalized();
        let helper = if axis.x.abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let u = axis.cross(helper).normalized();
        let v = axis.cross(u);
        let ring = |k: usize| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / segs as f64;
            u * a.cos() + v * a.sin()
        };
        let bottom: Vec<u32> = (0..segs).map(|k| self.vertex(p0 + ring(k) * radius)).collect();
        let top: Vec<u32> = (0..segs).map(|k| self.vertex(p1 + ring(k) * radius)).collect();
        for k in 0..segs {
            let k1 = (k + 1) % segs;
            let (s0, s1) = (k as f64 / segs as f64, (k + 1) as f64 / segs as f64);
            let ub0 = self.uv(part, s0, 0.0);
            let ub1 = self.uv(part, s1, 0.0);
            let ut0 = self.uv(part, s0, 1.0);
            let ut1 = self.uv(part, s1, 1.0);
            self.tri([bottom[k], bottom[k1], top[k1]], [ub0, ub1, ut1], part);
            self.tri([bottom[k], top[k1], top[k]], [ub0, ut1, ut0], part);
        }
        for (center, ring_ids, flip) in [(p0, &bottom, true), (p1, &top, false)] {
            let c = self.vertex(center);
            let uc = self.uv(part, 0.5, 0.5);
            for k in 0..segs {
                let k1 = (k + 1) % segs;
                let (a0, a1) = (ring(k), ring(k1));
                let ua = self.uv(part, 0.5 + 0.5 * a0.dot(u), 0.5 + 0.5 * a0.dot(v));
                let ub = self.uv(part, 0.5 + 0.5 * a1.dot(u), 0.5 + 0.5 * a1.dot(v));
                if flip {
                    self.tri([c, ring_ids[k1], ring_ids[k]], [uc, ub, ua], part);
                } else {
                    self.tri([c, ring_ids[k], ring_ids[k1]], [uc, ua, ub], part);
                }
            }
        }
    }

    fn sphere(&mut self, center: Vec3, radius: f64, segs: usize, rings: usize, part: usize) {
        let base = self.mesh.vertices.len() as u32;
        let unit = uv_sphere(segs, rings);
        for &p in &unit.vertices {
            self.vertex(center + p * radius);
        }
        for tri in &unit.triangles {
            let uvs = tri.map(|i| {
                let p = unit.vertices[i as usize];
                let s = 0.5 + p.z.atan2(p.x) / (2.0 * std::f64::consts::PI);
                let t = 0.5 + p.y.clamp(-1.0, 1.0).asin() / std::f64::consts::PI;
                self.uv(part, s, t)
            });
            self.tri(tri.map(|i| base + i), uvs, part);
        }
    }
}

/// Unit sphere with `segs` longitudes and `rings` latitude bands; poles are
/// single vertices joined by triangle fans.
pub fn uv_sphere(segs: usize, rings: usize) -> TriMesh {
    let segs = segs.max(3);
    let rings = rings.max(2);
    let mut v = vec![Vec3::new(0.0, 1.0, 0.0)];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segs {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segs as f64;
            v.push(Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()));
        }
    }
    v.push(Vec3::new(0.0, -1.0, 0.0));
    let south = (v.len() - 1) as u32;
    let idx = |r: usize, s: usize| (1 + (r - 1) * segs + s % segs) as u32;
    let mut t = Vec::new();
    for s in 0..segs {
        t.push([0, idx(1, s + 1), idx(1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segs {
            t.push([idx(r, s), idx(r, s + 1), idx(r + 1, s + 1)]);
            t.push([idx(r, s), idx(r + 1, s + 1), idx(r + 1, s)]);
        }
    }
    for s in 0..segs {
        t.push([south, idx(rings - 1, s), idx(rings - 1, s + 1)]);
    }
    TriMesh::new(v, t)
}

fn jit(rng: &mut ChaCha8Rng, base: f64, rel: f64) -> f64 {
    if rel > 0.0 {
        base * (1.0 + rng.gen_range(-rel..=rel))
    } else {
        base
    }
}

fn ang(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> f64 {
    if spread > 0.0 {
        base + rng.gen_range(-spread..=spread)
    } else {
        base
    }
}

fn build_furniture(spec: &SynthSpec, n_parts: usize, rng: &mut ChaCha8Rng) -> Builder {
    let j = spec.scale_jitter;
    let segs = spec.segments;
    let mut b = Builder::default();
    let w = jit(rng, 0.5, j);
    let d = jit(rng, 0.45, j);
    let t = jit(rng, 0.06, j);
    let h = jit(rng, 0.5, j);
    let r = jit(rng, 0.045, j);
    let back_h = jit(rng, 0.55, j);
    let back_t = jit(rng, 0.04, j);
    let tilt = ang(rng, 0.12, spec.pose_jitter * 0.4);
    let splay = ang(rng, 0.0, spec.pose_jitter * 0.15).abs();

    // 0 seat
    b.aabb_box(Vec3::new(0.0, h, 0.0), [w, t, d], 0);
    // 1 legs
    let inset = r * 1.5;
    let feet: Vec<(Vec3, Vec3)> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .map(|&(sx, sz)| {
            let top = Vec3::new(sx * (w - inset), h - t, sz * (d - inset));
            let foot = Vec3::new(sx * (w - inset + splay * h), 0.0, sz * (d - inset + splay * h));
            (foot, top)
        })
        .collect();
    for &(foot, top) in &feet {
        b.cylinder(foot, top, r, segs, 1);
    }
    // 2 back, tilted backwards about the x axis
    if n_parts > 2 {
        let up = Vec3::new(0.0, tilt.cos(), -tilt.sin());
        let fwd = Vec3::new(0.0, tilt.sin(), tilt.cos());
        let base = Vec3::new(0.0, h + t, -d + back_t);
        let center = base + up * (back_h * 0.5);
        b.cuboid(center, [Vec3::new(1.0, 0.0, 0.0), up, fwd], [w, back_h * 0.5, back_t], 2);
        // 5 top rail across the top edge of the back
        if n_parts > 5 {
            let top = base + up * back_h;
            let rr = jit(rng, 0.05, j);
            b.cylinder(top - Vec3::new(w * 1.1, 0.0, 0.0), top + Vec3::new(w * 1.1, 0.0, 0.0), rr, segs, 5);
        }
    }
    // 3 arms
    if n_parts > 3 {
        let arm_h = jit(rng, 0.22, j);
        let aw = jit(rng, 0.04, j);
        for sx in [-1.0, 1.0] {
            b.aabb_box(
                Vec3::new(sx * (w + aw), h + t + arm_h, 0.0),
                [aw, aw * 0.8, d * 0.85],
                3,
            );
            b.cylinder(
                Vec3::new(sx * (w + aw), h + t, d * 0.6),
                Vec3::new(sx * (w + aw), h + t + arm_h, d * 0.6),
                aw * 0.6,
                segs,
                3,
            );
        }
    }
    // 4 stretchers between front and back legs, plus one across the front
    if n_parts > 4 {
        let sy = jit(rng, 0.3, j);
        let rs = r * 0.6;
        let at = |i: usize| feet[i].0 + (feet[i].1 - feet[i].0) * sy;
        b.cylinder(at(0), at(3), rs, segs, 4);
        b.cylinder(at(1), at(2), rs, segs, 4);
        b.cylinder(at(3), at(2), rs, segs, 4);
    }
    b
}

fn build_figure(spec: &SynthSpec, n_parts: usize, rng: &mut ChaCha8Rng) -> Builder {
    let j = spec.scale_jitter;
    let segs = spec.segments;
    let mut b = Builder::default();
    let sw = jit(rng, 0.25, j);
    let sd = jit(rng, 0.12, j * 0.5);
    let hip_y = jit(rng, 0.8, j * 0.3);
    let shoulder_y = jit(rng, 1.45, j * 0.2);
    let has_hips = n_parts > 4;
    let hips_top = hip_y + jit(rng, 0.16, j);
    // 0 torso, 4 hips: one continuous box split by texture only
    let torso_bottom = if has_hips { hips_top } else { hip_y };
    b.aabb_box(
        Vec3::new(0.0, (torso_bottom + shoulder_y) * 0.5, 0.0),
        [sw, (shoulder_y - torso_bottom) * 0.5, sd],
        0,
    );
    if has_hips {
        b.aabb_box(
            Vec3::new(0.0, (hip_y + hips_top) * 0.5, 0.0),
            [sw, (hips_top - hip_y) * 0.5, sd],
            4,
        );
    }
    // 1 head
    let head_r = jit(rng, 0.15, j);
    let head_c = Vec3::new(0.0, shoulder_y + 0.04 + head_r, 0.0);
    b.sphere(head_c, head_r, segs, segs / 2 + 1, 1);
    // 2 arms, 5 hands
    let arm_len = jit(rng, 0.55, j);
    let arm_r = jit(rng, 0.05, j);
    for sx in [-1.0, 1.0] {
        let a = ang(rng, 0.45, spec.pose_jitter);
        let fwd = ang(rng, 0.0, spec.pose_jitter * 0.5);
        let s = Vec3::new(sx * (sw + arm_r), shoulder_y - arm_r, 0.0);
        let dir = Vec3::new(sx * a.sin(), -a.cos(), fwd.sin()).normalized();
        let e = s + dir * arm_len;
        b.cylinder(s, e, arm_r, segs, 2);
        if n_parts > 5 {
            b.sphere(e + dir * (arm_r * 1.2), arm_r * 1.5, segs, segs / 2 + 1, 5);
        }
    }
    // 3 legs, 6 feet
    let leg_r = jit(rng, 0.07, j);
    for sx in [-1.0, 1.0] {
        let a = ang(rng, 0.08, spec.pose_jitter * 0.3);
        let top = Vec3::new(sx * (sw * 0.5), hip_y + 0.02, 0.0);
        let foot = Vec3::new(sx * (sw * 0.5 + hip_y * a.sin()), 0.1, 0.0);
        b.cylinder(foot, top, leg_r, segs, 3);
        if n_parts > 6 {
            b.aabb_box(foot + Vec3::new(0.0, -0.05, 0.06), [leg_r * 1.1, 0.05, 0.14], 6);
        }
    }
    // 7 hat
    if n_parts > 7 {
        let hh = jit(rng, 0.12, j);
        let base = head_c + Vec3::new(0.0, head_r * 0.75, 0.0);
        b.cylinder(base, base + Vec3::new(0.0, hh, 0.0), head_r * 0.9, segs, 7);
    }
    b
}

#[derive(Clone, Copy)]
enum Pattern {
    Checker(f64),
    Stripes(f64),
    Solid,
}

fn figure_palette(part: usize) -> ([f32; 3], [f32; 3], Pattern) {
    match part {
        0 => ([0.85, 0.2, 0.2], [0.95, 0.9, 0.85], Pattern::Stripes(6.0)),
        1 => ([0.9, 0.72, 0.58], [0.9, 0.72, 0.58], Pattern::Solid),
        2 => ([0.2, 0.45, 0.85], [0.9, 0.9, 0.9], Pattern::Stripes(8.0)),
        3 => ([0.15, 0.2, 0.45], [0.15, 0.2, 0.45], Pattern::Solid),
        4 => ([0.1, 0.1, 0.1], [0.85, 0.75, 0.2], Pattern::Checker(8.0)),
        5 => ([0.95, 0.8, 0.65], [0.95, 0.8, 0.65], Pattern::Solid),
        6 => ([0.35, 0.2, 0.1], [0.6, 0.45, 0.3], Pattern::Checker(4.0)),
        _ => ([0.2, 0.65, 0.3], [0.9, 0.9, 0.3], Pattern::Stripes(4.0)),
    }
}

fn paint_texture(n_parts: usize, hue_jitter: f64, rng: &mut ChaCha8Rng) -> Texture {
    let mut tex = Texture::new(TEXTURE_SIZE, TEXTURE_SIZE, [0.5, 0.5, 0.5]).expect("non-zero size");
    let tw = TEXTURE_SIZE / TILE_COLS;
    let th = TEXTURE_SIZE / TILE_ROWS;
    for part in 0..n_parts {
        let (mut a, mut c, pattern) = figure_palette(part);
        let shift: [f32; 3] = std::array::from_fn(|_| {
            if hue_jitter > 0.0 {
                rng.gen_range(-hue_jitter..=hue_jitter) as f32
            } else {
                0.0
            }
        });
        for k in 0..3 {
            a[k] = (a[k] + shift[k]).clamp(0.0, 1.0);
            c[k] = (c[k] + shift[k]).clamp(0.0, 1.0);
        }
        let (col, row) = (part % TILE_COLS, part / TILE_COLS);
        for y in 0..th {
            for x in 0..tw {
                let s = (x as f64 + 0.5) / tw as f64;
                // Texture rows run top-down while uv `t` runs bottom-up.
                let t = 1.0 - (y as f64 + 0.5) / th as f64;
                let pick_a = match pattern {
                    Pattern::Checker(f) => ((s * f).floor() as i64 + (t * f).floor() as i64) % 2 == 0,
                    Pattern::Stripes(f) => ((t * f).floor() as i64) % 2 == 0,
                    Pattern::Solid => true,
                };
                let px = col * tw + x;
                let py = TEXTURE_SIZE - 1 - (row * th + (th - 1 - y));
                tex.set(px, py, if pick_a { a } else { c });
            }
        }
    }
    tex
}

/// One normalized, labeled shape; deterministic in `seed`.
pub fn generate_shape(spec: &SynthSpec, seed: u64) -> Result<SynthShape> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_parts = rng.gen_range(spec.min_parts..=spec.max_parts);
    generate_with_parts(spec, n_parts, &mut rng)
}

fn generate_with_parts(spec: &SynthSpec, n_parts: usize, rng: &mut ChaCha8Rng) -> Result<SynthShape> {
    let builder = match spec.family {
        Family::Furniture => build_furniture(spec, n_parts, rng),
        Family::Figure => build_figure(spec, n_parts, rng),
    };
    let texture = spec
        .family
        .is_textured()
        .then(|| paint_texture(spec.max_parts, spec.hue_jitter, rng));
    let mut mesh = builder.mesh.normalize()?;
    if !spec.family.is_textured() {
        mesh.uvs.clear();
        mesh.tri_uvs.clear();
    }
    mesh.validate()?;
    let labels = FaceLabels::new(builder.labels, spec.n_classes())?;
    Ok(SynthShape { mesh, labels, texture })
}

/// Shape whose labels cover every part id of the family; retries seeds
/// derived from `seed` until the draw includes all parts.
pub fn generate_complete_shape(spec: &SynthSpec, seed: u64) -> Result<SynthShape> {
    for attempt in 0u64.. {
        let shape = generate_shape(spec, seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
        let mut present = vec![false; spec.n_classes()];
        for &l in shape.labels.labels() {
            present[l as usize] = true;
        }
        if present.iter().all(|&p| p) {
            return Ok(shape);
        }
    }
    unreachable!()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unlabeled,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: Family,
    pub n_classes: usize,
    pub seed: u64,
    pub spec: SynthSpec,
    pub shapes: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Manifest> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(Self::FILE))?)?)
    }

    pub fn ids(&self, split: Split) -> Vec<&ManifestEntry> {
        self.shapes.iter().filter(|e| e.split == split).collect()
    }
}

fn shape_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step so neighbouring indices give unrelated streams
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates shapes in memory in manifest order. Labeled training shapes
/// always contain every part id.
pub fn generate_shapes(
    spec: &SynthSpec,
    split: (usize, usize, usize),
    seed: u64,
) -> Result<(Manifest, Vec<SynthShape>)> {
    spec.validate()?;
    let (nu, nl, nt) = split;
    let mut entries = Vec::new();
    let mut shapes = Vec::new();
    for i in 0..nu + nl + nt {
        let kind = if i < nu {
            Split::Unlabeled
        } else if i < nu + nl {
            Split::Train
        } else {
            Split::Test
        };
        let s = shape_seed(seed, i);
        let shape = if kind == Split::Train {
            generate_complete_shape(spec, s)?
        } else {
            generate_shape(spec, s)?
        };
        entries.push(ManifestEntry {
            id: format!("shape_{i:03}"),
            split: kind,
            seed: s,
        });
        shapes.push(shape);
    }
    let manifest = Manifest {
        family: spec.family,
        n_classes: spec.n_classes(),
        seed,
        spec: spec.clone(),
        shapes: entries,
    };
    Ok((manifest, shapes))
}

pub const MESH_FILE: &str = "mesh.obj";
pub const LABELS_FILE: &str = "labels.txt";
pub const TEXTURE_FILE: &str = "texture.png";

/// Writes `n_shapes` shapes as `<out>/<id>/{mesh.obj,labels.txt,texture.png}`
/// plus `<out>/manifest.json`.
pub fn generate_dataset(
    spec: &SynthSpec,
    n_shapes: usize,
    split: (usize, usize, usize),
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    if split.0 + split.1 + split.2 != n_shapes {
        return Err(Error::Config(format!(
            "split {},{},{} does not sum to {n_shapes}",
            split.0, split.1, split.2
        )));
    }
    let (manifest, shapes) = generate_shapes(spec, split, seed)?;
    fs::create_dir_all(out)?;
    for (entry, shape) in manifest.shapes.iter().zip(&shapes) {
        let dir = out.join(&entry.id);
        fs::create_dir_all(&dir)?;
        shape.mesh.write_obj(&dir.join(MESH_FILE))?;
        shape.labels.write(&dir.join(LABELS_FILE))?;
        if let Some(tex) = &shape.texture {
            tex.save_png(&dir.join(TEXTURE_FILE))?;
        }
    }
    fs::write(out.join(Manifest::FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn distinct(labels: &FaceLabels) -> BTreeSet<u32> {
        labels.labels().iter().copied().collect()
    }

    #[test]
    fn deterministic_per_seed() {
        for family in [Family::Furniture, Family::Figure] {
            let spec = SynthSpec::new(family);
            let a = generate_shape(&spec, 42).unwrap();
            let b = generate_shape(&spec, 42).unwrap();
            assert_eq!(a.mesh, b.mesh);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.texture, b.texture);
            let c = generate_shape(&spec, 43).unwrap();
            assert!(a.mesh != c.mesh || a.texture != c.texture);
        }
    }

    #[test]
    fn part_count_matches_spec() {
        for family in [Family::Furniture, Family::Figure] {
            let spec = SynthSpec {
                min_parts: 5,
                max_parts: 5,
                ..SynthSpec::new(family)
            };
            for seed in 0..5 {
                let s = generate_shape(&spec, seed).unwrap();
                assert_eq!(distinct(&s.labels), (0..5).collect());
            }
        }
    }

    #[test]
    fn shapes_satisfy_mesh_invariants() {
        for family in [Family::Furniture, Family::Figure] {
            let spec = SynthSpec::new(family);
            for seed in 0..10 {
                let s = generate_shape(&spec, seed).unwrap();
                s.mesh.validate().unwrap();
                let maxn = s.mesh.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
                assert!((maxn - 1.0).abs() < 1e-6);
                assert!(s.mesh.bounds().center().norm() < 1e-9);
                assert_eq!(s.labels.len(), s.mesh.num_triangles());
                assert_eq!(s.texture.is_some(), family.is_textured());
                assert_eq!(s.mesh.has_uvs(), family.is_textured());
            }
        }
    }

    #[test]
    fn complete_shapes_cover_all_parts() {
        let spec = SynthSpec::new(Family::Figure);
        for seed in 0..4 {
            let s = generate_complete_shape(&spec, seed).unwrap();
            assert_eq!(distinct(&s.labels).len(), spec.n_classes());
        }
    }

    #[test]
    fn dataset_layout_and_manifest() {
        let spec = SynthSpec::new(Family::Figure);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = generate_dataset(&spec, 6, (3, 2, 1), 7, d1.path()).unwrap();
        generate_dataset(&spec, 6, (3, 2, 1), 7, d2.path()).unwrap();
        assert_eq!(m.shapes.len(), 6);
        assert_eq!(m.ids(Split::Train).len(), 2);
        let a = fs::read(d1.path().join(Manifest::FILE)).unwrap();
        let b = fs::read(d2.path().join(Manifest::FILE)).unwrap();
        assert_eq!(a, b);
        assert_eq!(Manifest::load(d1.path()).unwrap(), m);
        for e in &m.shapes {
            let dir = d1.path().join(&e.id);
            let (mesh, labels) =
                crate::mesh::load_mesh(&dir.join(MESH_FILE), Some(&dir.join(LABELS_FILE))).unwrap();
            assert_eq!(labels.unwrap().len(), mesh.num_triangles());
            assert!(dir.join(TEXTURE_FILE).exists());
        }
        assert!(generate_dataset(&spec, 5, (3, 2, 1), 7, d1.path()).is_err());
    }
}
