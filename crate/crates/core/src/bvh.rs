//! Bounding volume hierarchy over mesh triangles.
//!
//! Built by median splits along the longest centroid axis. Traversal uses
//! the same intersection routine as the brute-force scan and the same
//! nearest-hit order (distance, then triangle index), so both always agree.

use crate::geom::{intersect_triangle, Aabb, Hit, Ray, Vec3};
use crate::mesh::TriMesh;

pub const DEFAULT_LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
struct Node {
    bbox: Aabb,
    /// Leaf: first entry in `order`; interior: index of the left child.
    start: u32,
    /// Leaf: triangle count; interior: 0.
    count: u32,
    /// Interior: index of the right child.
    right: u32,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    leaf_size: usize,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Bvh {
        Self::with_leaf_size(mesh, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(mesh: &TriMesh, leaf_size: usize) -> Bvh {
        let leaf_size = leaf_size.max(1);
        let scale = mesh
            .vertices
            .iter()
            .map(|v| v.x.abs().max(v.y.abs()).max(v.z.abs()))
            .fold(1.0, f64::max);
        let pad = Vec3::new(1.0, 1.0, 1.0) * (1e-9 * scale);
        let boxes: Vec<Aabb> = (0..mesh.num_triangles())
            .map(|t| {
                let (a, b, c) = mesh.corners(t);
                let mut bb = Aabb::EMPTY;
                bb.grow(a);
                bb.grow(b);
                bb.grow(c);
                Aabb {
                    min: bb.min - pad,
                    max: bb.max + pad,
                }
            })
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| b.center()).collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..mesh.num_triangles() as u32).collect(),
            leaf_size,
        };
        if !bvh.order.is_empty() {
            let n = bvh.order.len();
            bvh.build_node(&boxes, &centroids, 0, n);
        }
        bvh
    }

    fn build_node(&mut self, boxes: &[Aabb], centroids: &[Vec3], start: usize, end: usize) -> u32 {
        let mut bbox = Aabb::EMPTY;
        let mut cbox = Aabb::EMPTY;
        for &t in &self.order[start..end] {
            bbox = bbox.union(&boxes[t as usize]);
            cbox.grow(centroids[t as usize]);
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            bbox,
            start: start as u32,
            count: (end - start) as u32,
            right: 0,
        });
        if end - start <= self.leaf_size {
            return id;
        }
        let e = cbox.extent();
        let axis = if e.x >= e.y && e.x >= e.z {
            0
        } else if e.y >= e.z {
            1
        } else {
            2
        };
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        let mid = (start + end) / 2;
        let left = self.build_node(boxes, centroids, start, mid);
        let right = self.build_node(boxes, centroids, mid, end);
        let node = &mut self.nodes[id as usize];
        node.start = left;
        node.count = 0;
        node.right = right;
        id
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Nearest hit along `ray`, if any.
    pub fn intersect(&self, mesh: &TriMesh, ray: &Ray) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<Hit> = None;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            if node.bbox.hit(ray, inv, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &t in &self.order[s..s + node.count as usize] {
                    let (a, b, c) = mesh.corners(t as usize);
                    if let Some((dist, u, v)) = intersect_triangle(ray, a, b, c) {
                        let h = Hit { t: dist, tri: t, u, v };
                        if best.is_none_or(|b| h.closer_than(&b)) {
                            best = Some(h);
                        }
                    }
                }
            } else {
                let (l, r) = (node.start, node.right);
                let tl = self.nodes[l as usize].bbox.hit(ray, inv, limit);
                let tr = self.nodes[r as usize].bbox.hit(ray, inv, limit);
                match (tl, tr) {
                    (Some(a), Some(b)) if a <= b => {
                        stack.push(r);
                        stack.push(l);
                    }
                    (Some(_), Some(_)) => {
                        stack.push(l);
                        stack.push(r);
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }

    /// Checks that every triangle sits in exactly one leaf and parent boxes
    /// contain their children. Returns a description of the first violation.
    pub fn check_invariants(&self, n_triangles: usize) -> Result<(), String> {
        let mut seen = vec![0u32; n_triangles];
        if self.nodes.is_empty() {
            return if n_triangles == 0 {
                Ok(())
            } else {
                Err("empty tree for non-empty mesh".into())
            };
        }
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if node.count > 0 {
                let s = node.start as usize;
                for &t in &self.order[s..s + node.count as usize] {
                    seen[t as usize] += 1;
                }
            } else {
                for child in [node.start, node.right] {
                    if !node.bbox.contains(&self.nodes[child as usize].bbox) {
                        return Err(format!("node {id} does not contain child {child}"));
                    }
                    stack.push(child);
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(t) => Err(format!("triangle {t} appears in {} leaves", seen[t])),
            None => Ok(()),
        }
    }
}

/// Reference scan over all triangles with the same nearest-hit rule.
pub fn intersect_brute_force(mesh: &TriMesh, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for t in 0..mesh.num_triangles() {
        let (a, b, c) = mesh.corners(t);
        if let Some((dist, u, v)) = intersect_triangle(ray, a, b, c) {
            let h = Hit {
                t: dist,
                tri: t as u32,
                u,
                v,
            };
            if best.is_none_or(|b| h.closer_than(&b)) {
                best = Some(h);
            }
        }
    }
    best
}
