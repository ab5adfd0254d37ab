//! Shapes, their camera sets, view-pair overlap tables, and an in-memory
//! cache of rendered views.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use mvcorr_core::correspond::{build_matches, overlap_from};
use mvcorr_core::mesh::{load_mesh, FaceLabels, Texture};
use mvcorr_core::render::{render_view, sample_views, Camera, Scene, ViewBuffers};
use mvcorr_core::synth::{Manifest, Split, SynthShape, LABELS_FILE, MESH_FILE, TEXTURE_FILE};
use mvcorr_nn::Tensor;

use crate::channels::ChannelSet;
use crate::config::PipelineConfig;
use crate::error::{Result, TrainError};
use crate::seed;

pub struct ShapeData {
    pub id: String,
    pub split: Split,
    pub scene: Scene,
    pub labels: Option<FaceLabels>,
    pub cameras: Vec<Camera>,
    /// Row-major V×V overlap fractions; present once computed.
    pub overlap: Option<Vec<f32>>,
    /// View pairs `(i, j)`, `i < j`, whose overlap reaches the threshold.
    pub eligible: Vec<(u16, u16)>,
}

impl ShapeData {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn overlap(&self, i: usize, j: usize) -> Option<f32> {
        self.overlap.as_ref().map(|o| o[i * self.n_views() + j])
    }
}

pub struct Dataset {
    pub category: String,
    pub n_classes: usize,
    pub shapes: Vec<ShapeData>,
}

fn cameras_for(cfg: &PipelineConfig, index: usize, scene: &Scene) -> Result<Vec<Camera>> {
    let mut views = cfg.views.clone();
    views.seed = seed::derive(seed::derive(cfg.views.seed, seed::TAG_VIEWS), index as u64);
    Ok(sample_views(&views, &scene.mesh)?)
}

impl Dataset {
    /// Builds from generated shapes; labels are kept for every split so
    /// test shapes can be scored, but only the train split supervises.
    pub fn from_synth(manifest: &Manifest, shapes: Vec<SynthShape>, cfg: &PipelineConfig) -> Result<Self> {
        if manifest.shapes.len() != shapes.len() {
            return Err(TrainError::Data("manifest and shape count differ".into()));
        }
        let mut out = Vec::with_capacity(shapes.len());
        for (i, (entry, shape)) in manifest.shapes.iter().zip(shapes).enumerate() {
            let scene = Scene::new(shape.mesh, shape.texture);
            let cameras = cameras_for(cfg, i, &scene)?;
            out.push(ShapeData {
                id: entry.id.clone(),
                split: entry.split,
                scene,
                labels: Some(shape.labels),
                cameras,
                overlap: None,
                eligible: Vec::new(),
            });
        }
        let category = format!("{:?}", manifest.family).to_lowercase();
        Dataset::finish(category, manifest.n_classes, out)
    }

    /// Loads a directory written by `generate_dataset` (or laid out the same
    /// way): `manifest.json` plus one directory per shape.
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut out = Vec::with_capacity(manifest.shapes.len());
        for (i, entry) in manifest.shapes.iter().enumerate() {
            let sd = dir.join(&entry.id);
            let labels_path = sd.join(LABELS_FILE);
            let (mesh, labels) = load_mesh(&sd.join(MESH_FILE), labels_path.exists().then_some(labels_path.as_path()))?;
            let tex_path = sd.join(TEXTURE_FILE);
            let texture = if tex_path.exists() && mesh.has_uvs() {
                Some(Texture::load_png(&tex_path)?)
            } else {
                None
            };
            let labels = match labels {
                Some(l) => Some(FaceLabels::new(l.labels().to_vec(), manifest.n_classes)?),
                None => None,
            };
            let scene = Scene::new(mesh, texture);
            let cameras = cameras_for(cfg, i, &scene)?;
            out.push(ShapeData {
                id: entry.id.clone(),
                split: entry.split,
                scene,
                labels,
                cameras,
                overlap: None,
                eligible: Vec::new(),
            });
        }
        let category = format!("{:?}", manifest.family).to_lowercase();
        Dataset::finish(category, manifest.n_classes, out)
    }

    fn finish(category: String, n_classes: usize, shapes: Vec<ShapeData>) -> Result<Self> {
        for s in &shapes {
            if s.cameras.len() < 2 {
                return Err(TrainError::Config(format!("shape {} needs at least 2 views", s.id)));
            }
            if s.split != Split::Unlabeled && s.labels.is_none() {
                return Err(TrainError::Data(format!("shape {} has no labels", s.id)));
            }
        }
        Ok(Dataset {
            category,
            n_classes,
            shapes,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.shapes.len()).filter(|&i| self.shapes[i].split == split).collect()
    }

    /// Renders every view of each listed shape once and records pairwise
    /// overlap; pairs at or above `cfg.min_overlap` become eligible.
    pub fn compute_overlaps(&mut self, which: &[usize], cfg: &PipelineConfig) -> Result<()> {
        for &s in which {
            let shape = &mut self.shapes[s];
            if shape.overlap.is_some() {
                continue;
            }
            let views: Vec<ViewBuffers> = shape.cameras.iter().map(|c| render_view(&shape.scene, c)).collect();
            let n = views.len();
            let mut table = vec![0.0f32; n * n];
            let mut eligible = Vec::new();
            for i in 0..n {
                table[i * n + i] = if views[i].foreground_count() > 0 { 1.0 } else { 0.0 };
                for j in i + 1..n {
                    let m = build_matches(&views[i], &views[j], cfg.match_eps)?;
                    let o = overlap_from(&m, &views[i], &views[j]) as f32;
                    table[i * n + j] = o;
                    table[j * n + i] = o;
                    if o as f64 >= cfg.min_overlap {
                        eligible.push((i as u16, j as u16));
                    }
                }
            }
            debug!("shape {}: {} eligible pairs of {}", shape.id, eligible.len(), n * (n - 1) / 2);
            shape.overlap = Some(table);
            shape.eligible = eligible;
        }
        info!(
            "overlap tables ready for {} shapes ({} eligible pairs)",
            which.len(),
            which.iter().map(|&s| self.shapes[s].eligible.len()).sum::<usize>()
        );
        Ok(())
    }
}

/// Bounded first-in-first-out cache of rendered views.
pub struct ViewCache {
    capacity: usize,
    map: HashMap<(usize, usize), Arc<ViewBuffers>>,
    order: VecDeque<(usize, usize)>,
}

impl ViewCache {
    pub fn new(capacity: usize) -> Self {
        ViewCache {
            capacity,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn get(&mut self, ds: &Dataset, shape: usize, view: usize) -> Arc<ViewBuffers> {
        if let Some(v) = self.map.get(&(shape, view)) {
            return v.clone();
        }
        let s = &ds.shapes[shape];
        let v = Arc::new(render_view(&s.scene, &s.cameras[view]));
        if self.capacity > 0 {
            if self.order.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.map.remove(&old);
                }
            }
            self.order.push_back((shape, view));
            self.map.insert((shape, view), v.clone());
        }
        v
    }
}

/// Stacks views into an (N, K, H, W) input tensor.
pub fn batch_input(views: &[&ViewBuffers], channels: ChannelSet) -> Result<Tensor<f32>> {
    let (h, w) = views.first().map(|v| (v.height, v.width)).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(views.len() * channels.count() * h * w);
    for v in views {
        if (v.height, v.width) != (h, w) {
            return Err(TrainError::Data("views in one batch differ in size".into()));
        }
        channels.append_input(v, &mut data);
    }
    Ok(Tensor::new(vec![views.len(), channels.count(), h, w], data)?)
}
