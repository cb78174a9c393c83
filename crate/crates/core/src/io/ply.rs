//! Splat clouds in the common 3D Gaussian splatting PLY layout.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSplat, SplatCloud};
use crate::math::{Quat, Vec3};

/// Storage width of every property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyPrecision {
    /// `float`, as external viewers expect.
    Single,
    /// `double`, for lossless checkpoints.
    Double,
}

fn property_names(num_sh: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    for i in 0..3 * num_sh.saturating_sub(1) {
        names.push(format!("f_rest_{i}"));
    }
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Values in property order. Higher-order SH are stored channel-major:
/// `f_rest_{c·(K−1) + j}` holds coefficient `j + 1` of channel `c`.
fn splat_values(s: &GaussianSplat, num_sh: usize) -> Vec<f64> {
    let mut v = vec![s.position.x, s.position.y, s.position.z, 0.0, 0.0, 0.0];
    v.extend_from_slice(s.sh_coeffs[0].as_slice());
    for c in 0..3 {
        for j in 1..num_sh {
            v.push(s.sh_coeffs[j][c]);
        }
    }
    v.push(s.opacity_logit);
    v.extend_from_slice(s.log_scale.as_slice());
    v.extend_from_slice(s.rotation.as_slice());
    v
}

pub fn splats_to_ply(cloud: &SplatCloud, precision: PlyPrecision) -> Result<Vec<u8>> {
    let num_sh = cloud.splats.first().map_or(1, |s| s.sh_coeffs.len());
    if cloud.splats.iter().any(|s| s.sh_coeffs.len() != num_sh) {
        return Err(Error::InvalidInput("splats have differing SH degrees".into()));
    }
    let ty = match precision {
        PlyPrecision::Single => "float",
        PlyPrecision::Double => "double",
    };
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for name in property_names(num_sh) {
        out.push_str(&format!("property {ty} {name}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for s in &cloud.splats {
        for v in splat_values(s, num_sh) {
            match precision {
                PlyPrecision::Single => bytes.write_f32::<LittleEndian>(v as f32),
                PlyPrecision::Double => bytes.write_f64::<LittleEndian>(v),
            }
            .expect("writing to a vector");
        }
    }
    Ok(bytes)
}

pub fn export_splats(cloud: &SplatCloud, path: &Path, precision: PlyPrecision) -> Result<()> {
    fs::write(path, splats_to_ply(cloud, precision)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
        })
    }
}

pub fn import_splats(path: &Path) -> Result<SplatCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"end_header\n";
    let end = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| Error::load(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::load(path, "header is not text"))?;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for line in header.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(Error::load(path, format!("unsupported PLY format {fmt}")));
            }
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| Error::load(path, "bad vertex count"))?),
            ["element", other, _] => return Err(Error::load(path, format!("unexpected element {other}"))),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::load(path, format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::load(path, "no vertex element"))?;
    let find = |name: &str| props.iter().position(|(n, _)| n == name).ok_or_else(|| Error::load(path, format!("missing property {name}")));
    let rest = props.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    if rest % 3 != 0 {
        return Err(Error::load(path, format!("{rest} f_rest properties is not a multiple of 3")));
    }
    let num_sh = 1 + rest / 3;
    let idx = |names: &[String]| names.iter().map(|n| find(n)).collect::<Result<Vec<usize>>>();
    let pos = idx(&["x", "y", "z"].map(String::from))?;
    let dc = idx(&["f_dc_0", "f_dc_1", "f_dc_2"].map(String::from))?;
    let rest_idx = idx(&(0..rest).map(|i| format!("f_rest_{i}")).collect::<Vec<_>>())?;
    let opacity = find("opacity")?;
    let scale = idx(&(0..3).map(|i| format!("scale_{i}")).collect::<Vec<_>>())?;
    let rot = idx(&(0..4).map(|i| format!("rot_{i}")).collect::<Vec<_>>())?;

    let mut cur = Cursor::new(&bytes[end + marker.len()..]);
    let mut splats = Vec::with_capacity(count);
    let mut row = vec![0.0; props.len()];
    for k in 0..count {
        for (slot, (_, ty)) in row.iter_mut().zip(&props) {
            *slot = ty.read(&mut cur).map_err(|_| Error::load(path, format!("data truncated at splat {k}")))?;
        }
        let mut sh = vec![Vec3::new(row[dc[0]], row[dc[1]], row[dc[2]])];
        for j in 1..num_sh {
            sh.push(Vec3::from_fn(|c, _| row[rest_idx[c * (num_sh - 1) + j - 1]]));
        }
        splats.push(GaussianSplat::new(
            Vec3::new(row[pos[0]], row[pos[1]], row[pos[2]]),
            Vec3::new(row[scale[0]], row[scale[1]], row[scale[2]]),
            Quat::new(row[rot[0]], row[rot[1]], row[rot[2]], row[rot[3]]),
            row[opacity],
            sh,
        ));
    }
    Ok(SplatCloud::new(splats))
}
