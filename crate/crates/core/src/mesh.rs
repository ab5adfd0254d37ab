//! Triangle meshes, per-triangle part labels and textures.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Minimum triangle area accepted for a normalized mesh.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Texture coordinates in `[0,1]²`, indexed by `tri_uvs`.
    pub uvs: Vec<[f64; 2]>,
    /// Per-triangle indices into `uvs`; empty when the mesh is untextured.
    pub tri_uvs: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        TriMesh {
            vertices,
            triangles,
            uvs: Vec::new(),
            tri_uvs: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty() || self.vertices.is_empty()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn has_uvs(&self) -> bool {
        !self.tri_uvs.is_empty() && self.tri_uvs.len() == self.triangles.len()
    }

    pub fn corners(&self, tri: usize) -> (Vec3, Vec3, Vec3) {
        let [a, b, c] = self.triangles[tri];
        (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        )
    }

    pub fn area(&self, tri: usize) -> f64 {
        let (a, b, c) = self.corners(tri);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn centroid(&self, tri: usize) -> Vec3 {
        let (a, b, c) = self.corners(tri);
        (a + b + c) / 3.0
    }

    /// Unit geometric normal following the vertex winding.
    pub fn face_normal(&self, tri: usize) -> Vec3 {
        let (a, b, c) = self.corners(tri);
        (b - a).cross(c - a).normalized()
    }

    pub fn bounds(&self) -> Aabb {
        let mut bb = Aabb::EMPTY;
        for &v in &self.vertices {
            bb.grow(v);
        }
        bb
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Interpolated texture coordinate at barycentric `(u, v)` of `tri`.
    pub fn uv_at(&self, tri: usize, u: f64, v: f64) -> Option<[f64; 2]> {
        if !self.has_uvs() {
            return None;
        }
        let [a, b, c] = self.tri_uvs[tri];
        let (ta, tb, tc) = (self.uvs[a as usize], self.uvs[b as usize], self.uvs[c as usize]);
        let w = 1.0 - u - v;
        Some([
            w * ta[0] + u * tb[0] + v * tc[0],
            w * ta[1] + u * tb[1] + v * tc[1],
        ])
    }

    /// Checks index ranges and rejects triangles below [`MIN_TRIANGLE_AREA`].
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("triangle {t} index out of range")));
            }
            if self.area(t) <= MIN_TRIANGLE_AREA {
                return Err(Error::InvalidMesh(format!("triangle {t} is degenerate")));
            }
        }
        if !self.tri_uvs.is_empty() {
            if self.tri_uvs.len() != self.triangles.len() {
                return Err(Error::InvalidMesh("uv triangle count differs".into()));
            }
            let nu = self.uvs.len() as u32;
            if self.tri_uvs.iter().flatten().any(|&i| i >= nu) {
                return Err(Error::InvalidMesh("uv index out of range".into()));
            }
        }
        Ok(())
    }

    /// Centers the vertex bounding box at the origin and scales so the
    /// farthest vertex lies on the unit sphere.
    pub fn normalize(&self) -> Result<TriMesh> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let center = self.bounds().center();
        let radius = self
            .vertices
            .iter()
            .map(|&v| (v - center).norm())
            .fold(0.0, f64::max);
        if radius <= 0.0 {
            return Err(Error::InvalidMesh("all vertices coincide".into()));
        }
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = (*v - center) / radius;
        }
        Ok(out)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for uv in &self.uvs {
            s.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.has_uvs() {
                let tu = self.tri_uvs[t];
                s.push_str(&format!(
                    "f {}/{} {}/{} {}/{}\n",
                    tri[0] + 1,
                    tu[0] + 1,
                    tri[1] + 1,
                    tu[1] + 1,
                    tri[2] + 1,
                    tu[2] + 1
                ));
            } else {
                s.push_str(&format!("f {} {} {}\n", tri[0] + 1, tri[1] + 1, tri[2] + 1));
            }
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Parses OBJ text. Polygons are fan-triangulated; duplicate vertices are kept.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut mesh = TriMesh::default();
    let mut any_uv_face = false;
    let mut any_plain_face = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        match tag {
            "v" => {
                let xs: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(line_no, format!("bad vertex: {e}")))?;
                if xs.len() != 3 {
                    return Err(err(line_no, "vertex needs 3 coordinates".into()));
                }
                mesh.vertices.push(Vec3::new(xs[0], xs[1], xs[2]));
            }
            "vt" => {
                let xs: Vec<f64> = it
                    .take(2)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(line_no, format!("bad texture coordinate: {e}")))?;
                if xs.len() != 2 {
                    return Err(err(line_no, "texture coordinate needs 2 values".into()));
                }
                mesh.uvs.push([xs[0], xs[1]]);
            }
            "f" => {
                let mut verts = Vec::new();
                let mut uvs = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let vi = resolve_index(parts.next(), mesh.vertices.len())
                        .ok_or_else(|| err(line_no, format!("bad face vertex `{tok}`")))?;
                    verts.push(vi);
                    if let Some(t) = parts.next().filter(|s| !s.is_empty()) {
                        let ti = resolve_index(Some(t), mesh.uvs.len())
                            .ok_or_else(|| err(line_no, format!("bad face uv `{tok}`")))?;
                        uvs.push(ti);
                    }
                }
                if verts.len() < 3 {
                    return Err(err(line_no, "face needs at least 3 vertices".into()));
                }
                let has_uv = uvs.len() == verts.len();
                if !uvs.is_empty() && !has_uv {
                    return Err(err(line_no, "mixed uv usage within a face".into()));
                }
                for k in 1..verts.len() - 1 {
                    let tri = [verts[0], verts[k], verts[k + 1]];
                    let (a, b, c) = (
                        mesh.vertices[tri[0] as usize],
                        mesh.vertices[tri[1] as usize],
                        mesh.vertices[tri[2] as usize],
                    );
                    if (b - a).cross(c - a).norm() == 0.0 {
                        return Err(err(line_no, "degenerate face".into()));
                    }
                    mesh.triangles.push(tri);
                    if has_uv {
                        mesh.tri_uvs.push([uvs[0], uvs[k], uvs[k + 1]]);
                        any_uv_face = true;
                    } else {
                        any_plain_face = true;
                    }
                }
            }
            _ => {}
        }
    }
    if any_uv_face && any_plain_face {
        // Partial texturing is not representable; drop uv mapping.
        mesh.tri_uvs.clear();
    }
    if mesh.is_empty() {
        return Err(err(text.lines().count().max(1), "no triangles".into()));
    }
    Ok(mesh)
}

fn resolve_index(tok: Option<&str>, count: usize) -> Option<u32> {
    let i: i64 = tok?.parse().ok()?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        return None;
    };
    (0..count as i64).contains(&idx).then_some(idx as u32)
}

/// Part id per triangle together with the class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceLabels {
    labels: Vec<u32>,
    n_classes: usize,
}

impl FaceLabels {
    pub fn new(labels: Vec<u32>, n_classes: usize) -> Result<Self> {
        if let Some((t, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::LabelRange {
                triangle: t,
                label: l,
                n_classes,
            });
        }
        Ok(FaceLabels { labels, n_classes })
    }

    /// Class count inferred as `max + 1`.
    pub fn from_labels(labels: Vec<u32>) -> Self {
        let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        FaceLabels { labels, n_classes }
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, tri: usize) -> u32 {
        self.labels[tri]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        let mut s = String::with_capacity(self.labels.len() * 3);
        for l in &self.labels {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        f.write_all(s.as_bytes())?;
        Ok(())
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<u32>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u32>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad label: {e}"),
            })
        })
        .collect()
}

/// Loads an OBJ mesh and, optionally, its integer-per-line label file.
pub fn load_mesh(path: &Path, labels_path: Option<&Path>) -> Result<(TriMesh, Option<FaceLabels>)> {
    let text = fs::read_to_string(path)?;
    let mesh = parse_obj(&text, path)?;
    let labels = match labels_path {
        Some(lp) => {
            let raw = parse_labels(&fs::read_to_string(lp)?, lp)?;
            if raw.len() != mesh.num_triangles() {
                return Err(Error::LabelCount {
                    labels: raw.len(),
                    triangles: mesh.num_triangles(),
                });
            }
            Some(FaceLabels::from_labels(raw))
        }
        None => None,
    };
    Ok((mesh, labels))
}

/// Label of the labeled triangle whose centroid is nearest to the query
/// triangle's centroid; ties go to the lowest triangle index.
pub fn nearest_labeled_triangle(mesh: &TriMesh, labels: &[Option<u32>], query: usize) -> Result<u32> {
    if labels.len() != mesh.num_triangles() {
        return Err(Error::Length(labels.len(), mesh.num_triangles()));
    }
    let q = mesh.centroid(query);
    let mut best: Option<(f64, u32)> = None;
    for (t, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        let d = (mesh.centroid(t) - q).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, *l));
        }
    }
    best.map(|(_, l)| l).ok_or(Error::NoLabels)
}

/// RGB image with channels in `[0,1]`, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl Texture {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("texture dimensions must be at least 1".into()));
        }
        Ok(Texture {
            width,
            height,
            pixels: vec![fill; width * height],
        })
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        self.pixels[y * self.width + x] = rgb.map(|c| c.clamp(0.0, 1.0));
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    /// Bilinear lookup with clamp-to-edge; `v = 0` is the bottom row as in OBJ.
    pub fn sample(&self, uv: [f64; 2]) -> [f32; 3] {
        let u = uv[0].clamp(0.0, 1.0);
        let v = 1.0 - uv[1].clamp(0.0, 1.0);
        let x = (u * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bot = c[k] * (1.0 - fx) + d[k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|c| c as f32 / 255.0))
            .collect();
        Ok(Texture {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0 = self.pixels[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        img.save(path)?;
        Ok(())
    }
}
