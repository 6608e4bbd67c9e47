//! JSON model file I/O.
//!
//! Schema: a single document with `template_vertices` (V×3), `faces`
//! (F×3 indices), `shape_dirs` (V×3×10), `skin_weights` and
//! `joint_regressor` as sparse `[row, col, value]` triplets, and `parents`.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BodyModel, KinematicTree, JOINT_NAMES, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ModelFile {
    template_vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    shape_dirs: Vec<Vec<Vec<f64>>>,
    skin_weights: Vec<(usize, usize, f64)>,
    joint_regressor: Vec<(usize, usize, f64)>,
    parents: Vec<i32>,
}

pub fn save_model(model: &BodyModel, path: &Path) -> Result<()> {
    let v = model.vertex_count();
    let file = ModelFile {
        template_vertices: (0..v)
            .map(|i| {
                [
                    model.template_vertices[(i, 0)],
                    model.template_vertices[(i, 1)],
                    model.template_vertices[(i, 2)],
                ]
            })
            .collect(),
        faces: model.faces.clone(),
        shape_dirs: (0..v)
            .map(|i| {
                (0..3)
                    .map(|c| (0..NUM_SHAPE).map(|j| model.shape_dirs[(i, c, j)]).collect())
                    .collect()
            })
            .collect(),
        skin_weights: sparse_triplets(&model.skin_weights),
        joint_regressor: sparse_triplets(&model.joint_regressor),
        parents: model.tree.parents.to_vec(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<BodyModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;

    let v = file.template_vertices.len();
    if file.parents.len() != NUM_JOINTS {
        return Err(Error::InvalidModel(format!(
            "model file must have {NUM_JOINTS} parents, got {}",
            file.parents.len()
        )));
    }
    let mut template = Array2::zeros((v, 3));
    for (i, p) in file.template_vertices.iter().enumerate() {
        for c in 0..3 {
            template[(i, c)] = p[c];
        }
    }
    let mut shape_dirs = Array3::zeros((v, 3, NUM_SHAPE));
    if file.shape_dirs.len() != v {
        return Err(Error::InvalidModel("shape_dirs vertex count".into()));
    }
    for (i, per_vertex) in file.shape_dirs.iter().enumerate() {
        if per_vertex.len() != 3 || per_vertex.iter().any(|row| row.len() != NUM_SHAPE) {
            return Err(Error::InvalidModel(format!(
                "shape_dirs entry {i} must be 3×{NUM_SHAPE}"
            )));
        }
        for c in 0..3 {
            for j in 0..NUM_SHAPE {
                shape_dirs[(i, c, j)] = per_vertex[c][j];
            }
        }
    }
    let skin_weights = dense_from_triplets(&file.skin_weights, v, NUM_JOINTS, "skin_weights")?;
    let joint_regressor =
        dense_from_triplets(&file.joint_regressor, NUM_JOINTS, v, "joint_regressor")?;

    let mut parents = [0i32; NUM_JOINTS];
    parents.copy_from_slice(&file.parents);
    let model = BodyModel {
        template_vertices: template,
        faces: file.faces,
        shape_dirs,
        skin_weights,
        joint_regressor,
        tree: KinematicTree {
            parents,
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        },
    };
    model.validate()?;
    Ok(model)
}

fn sparse_triplets(dense: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for ((r, c), &w) in dense.indexed_iter() {
        if w != 0.0 {
            out.push((r, c, w));
        }
    }
    out
}

fn dense_from_triplets(
    triplets: &[(usize, usize, f64)],
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows, cols));
    for &(r, c, w) in triplets {
        if r >= rows || c >= cols {
            return Err(Error::InvalidModel(format!(
                "{what} triplet ({r}, {c}) out of bounds for {rows}×{cols}"
            )));
        }
        out[(r, c)] = w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::generate_synthetic_model;

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = generate_synthetic_model(42, 240).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.template_vertices, model.template_vertices);
        assert_eq!(loaded.shape_dirs, model.shape_dirs);
        assert_eq!(loaded.skin_weights, model.skin_weights);
        assert_eq!(loaded.joint_regressor, model.joint_regressor);
        assert_eq!(loaded.faces, model.faces);
        assert_eq!(loaded.tree.parents, model.tree.parents);
    }

    #[test]
    fn load_rejects_bad_triplets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = generate_synthetic_model(0, 120).unwrap();
        save_model(&model, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // Corrupt a triplet row index beyond the vertex count.
        text = text.replace("\"skin_weights\":[[0,", "\"skin_weights\":[[99999,");
        std::fs::write(&path, text).unwrap();
        assert!(load_model(&path).is_err());
    }
}
