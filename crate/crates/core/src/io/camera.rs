//! Camera files: TOML with intrinsics and a row-major 4×4 world-to-camera
//! matrix.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: [[f64; 4]; 4],
}

pub fn camera_to_toml(camera: &Camera) -> String {
    let m = &camera.world_to_camera;
    let file = CameraFile {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        width: camera.width,
        height: camera.height,
        world_to_camera: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
    };
    toml::to_string(&file).expect("camera serializes")
}

pub fn camera_from_toml(text: &str, path: &Path) -> Result<Camera> {
    let f: CameraFile = toml::from_str(text).map_err(|e| Error::load(path, e.to_string()))?;
    let camera = Camera {
        fx: f.fx,
        fy: f.fy,
        cx: f.cx,
        cy: f.cy,
        width: f.width,
        height: f.height,
        world_to_camera: Matrix4::from_fn(|r, c| f.world_to_camera[r][c]),
    };
    camera.validate().map_err(|e| Error::load(path, e.to_string()))?;
    Ok(camera)
}

pub fn save_camera(path: &Path, camera: &Camera) -> Result<()> {
    fs::write(path, camera_to_toml(camera)).map_err(|e| Error::io(path, e))
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    camera_from_toml(&text, path)
}
