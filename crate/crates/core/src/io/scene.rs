//! Scene manifests: per-view image, mask and camera files, the morphable
//! model, optional ground truth and training config overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::SplatCloud;
use crate::io::camera::{load_camera, save_camera};
use crate::io::image::{load_image, load_mask, save_image, save_mask};
use crate::io::model::{load_model, save_model};
use crate::io::obj::export_mesh;
use crate::io::ply::{export_splats, PlyPrecision};
use crate::morphable::{MorphableModel, SurfaceParams, TriangleMesh};
use crate::train::{TrainConfig, TrainingView};

pub const MANIFEST_NAME: &str = "scene.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub image: String,
    pub mask: String,
    pub camera: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub mesh: String,
    pub splats: String,
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    /// Model directory, relative to the manifest.
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
    /// Partial training config; unspecified keys keep their defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Table>,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub heldout_views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub root: PathBuf,
    pub views: Vec<TrainingView>,
    pub heldout: Vec<TrainingView>,
    pub model: MorphableModel,
    pub config: TrainConfig,
}

impl LoadedScene {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }
}

pub struct GroundTruthFiles<'a> {
    pub mesh: &'a TriangleMesh,
    pub splats: &'a SplatCloud,
    pub params: &'a SurfaceParams,
}

fn load_view(root: &Path, entry: &ViewEntry) -> Result<TrainingView> {
    let image = load_image(&root.join(&entry.image))?;
    let mask = load_mask(&root.join(&entry.mask))?;
    let camera = load_camera(&root.join(&entry.camera))?;
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::load(root.join(&entry.camera), format!("camera is {}x{} but image {} is {}x{}", camera.width, camera.height, entry.image, image.width, image.height)));
    }
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::load(root.join(&entry.mask), "mask size differs from its image"));
    }
    Ok(TrainingView { name: entry.name.clone(), camera, image, mask })
}

pub fn training_config(manifest: &SceneManifest, path: &Path) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &manifest.config {
        Some(table) => table.clone().try_into().map_err(|e: toml::de::Error| Error::load(path, format!("config: {e}")))?,
        None => TrainConfig::default(),
    };
    if !manifest.config.as_ref().is_some_and(|t| t.contains_key("seed")) {
        config.seed = manifest.seed;
    }
    Ok(config)
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SceneManifest = toml::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
    if manifest.views.is_empty() {
        return Err(Error::load(path, "scene has no views"));
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let views = manifest.views.iter().map(|v| load_view(&root, v)).collect::<Result<Vec<_>>>()?;
    let heldout = manifest.heldout_views.iter().map(|v| load_view(&root, v)).collect::<Result<Vec<_>>>()?;
    let model = load_model(&root.join(&manifest.model))?;
    let config = training_config(&manifest, path)?;
    Ok(LoadedScene { manifest, root, views, heldout, model, config })
}

fn write_views(dir: &Path, sub: &str, views: &[TrainingView]) -> Result<Vec<ViewEntry>> {
    fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    views
        .iter()
        .map(|v| {
            let entry = ViewEntry {
                name: v.name.clone(),
                image: format!("{sub}/{}.ppm", v.name),
                mask: format!("{sub}/{}_mask.pgm", v.name),
                camera: format!("{sub}/{}_camera.toml", v.name),
            };
            save_image(&dir.join(&entry.image), &v.image)?;
            save_mask(&dir.join(&entry.mask), &v.mask)?;
            save_camera(&dir.join(&entry.camera), &v.camera)?;
            Ok(entry)
        })
        .collect()
}

/// Writes every file of a scene and its manifest; returns the manifest path.
pub fn write_scene(
    dir: &Path,
    seed: u64,
    model: &MorphableModel,
    views: &[TrainingView],
    heldout: &[TrainingView],
    ground_truth: Option<GroundTruthFiles>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(&dir.join("model"), model)?;
    let views = write_views(dir, "views", views)?;
    let heldout_views = write_views(dir, "heldout", heldout)?;
    let ground_truth = match ground_truth {
        Some(gt) => {
            let gt_dir = dir.join("gt");
            fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
            export_mesh(gt.mesh, &gt_dir.join("mesh.obj"))?;
            export_splats(gt.splats, &gt_dir.join("splats.ply"), PlyPrecision::Double)?;
            let p = gt_dir.join("params.toml");
            fs::write(&p, toml::to_string(gt.params).expect("params serialize")).map_err(|e| Error::io(&p, e))?;
            Some(GroundTruthEntry { mesh: "gt/mesh.obj".into(), splats: "gt/splats.ply".into(), params: "gt/params.toml".into() })
        }
        None => None,
    };
    let manifest = SceneManifest { seed, model: "model".into(), ground_truth, config: None, views, heldout_views };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_params(path: &Path) -> Result<SurfaceParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}
