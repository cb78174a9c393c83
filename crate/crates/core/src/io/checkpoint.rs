//! Training checkpoints: a directory with the splats (lossless PLY), the
//! surface parameters and the config used.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::SplatCloud;
use crate::io::ply::{export_splats, import_splats, PlyPrecision};
use crate::io::scene::load_params;
use crate::morphable::SurfaceParams;
use crate::train::TrainConfig;

pub const SPLATS_FILE: &str = "splats.ply";
pub const SURFACE_FILE: &str = "surface.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: SplatCloud,
    pub params: SurfaceParams,
    pub config: TrainConfig,
}

pub fn save_checkpoint(dir: &Path, cloud: &SplatCloud, params: &SurfaceParams, config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_splats(cloud, &dir.join(SPLATS_FILE), PlyPrecision::Double)?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(SURFACE_FILE, toml::to_string(params).expect("params serialize"))?;
    write(CONFIG_FILE, toml::to_string(config).expect("config serializes"))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cloud = import_splats(&dir.join(SPLATS_FILE))?;
    let params = load_params(&dir.join(SURFACE_FILE))?;
    let p = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let config = toml::from_str(&text).map_err(|e| Error::load(&p, e.to_string()))?;
    Ok(Checkpoint { cloud, params, config })
}
