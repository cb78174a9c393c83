pub mod camera;
pub mod checkpoint;
pub mod image;
pub mod model;
pub mod obj;
pub mod ply;
pub mod scene;
pub mod synth;
