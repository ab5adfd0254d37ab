use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("label count mismatch: {labels} labels for {triangles} triangles")]
    LabelCount { labels: usize, triangles: usize },
    #[error("label {label} on triangle {triangle} is not below the class count {n_classes}")]
    LabelRange {
        triangle: usize,
        label: u32,
        n_classes: usize,
    },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("no labeled triangles")]
    NoLabels,
    #[error("triangle {0} is visible but has no label")]
    MissingLabel(usize),
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    Resolution(usize, usize, usize, usize),
    #[error("empty match set")]
    EmptyMatches,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("no classes present in confusion matrix")]
    NoClasses,
    #[error("bad view record {path}: {msg}")]
    ViewFormat { path: PathBuf, msg: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
