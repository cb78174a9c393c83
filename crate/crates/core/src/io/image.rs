//! 8-bit PPM (P6) colour images and PGM (P5) masks, with optional PNG.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::{Mask, RgbImage};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as saving would.
pub fn quantize(img: &RgbImage) -> RgbImage {
    RgbImage { width: img.width, height: img.height, data: img.data.iter().map(|&v| to_byte(v) as f64 / 255.0).collect() }
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::load(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != magic {
        return Err(Error::load(path, format!("expected {magic} file, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::load(path, format!("bad {what} {s:?}")));
    let (w, h, maxval) = (parse(&fields[1], "width")?, parse(&fields[2], "height")?, parse(&fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::load(path, format!("only 8-bit files are supported (maxval {maxval})")));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::load(path, format!("pixel data truncated: {} of {need} bytes", bytes.len().saturating_sub(pos))));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    write_netpbm(path, "P6", img.width, img.height, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (w, h, bytes) = read_netpbm(path, "P6", 3)?;
    RgbImage::from_data(w, h, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_netpbm(path, "P5", mask.width, mask.height, &bytes)
}

/// Reads a grayscale mask; values of 128 and above count as inside.
pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let (w, h, bytes) = read_netpbm(path, "P5", 1)?;
    Ok(Mask { width: w, height: h, data: bytes.iter().map(|&b| b >= 128).collect() })
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes PPM, or PNG when the path ends in `.png` and the `png` feature is
/// enabled.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    if is_png(path) {
        return save_png(path, img);
    }
    write_ppm(path, img)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    if is_png(path) {
        return load_png(path);
    }
    read_ppm(path)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm_mask(path, mask)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    if is_png(path) {
        let img = load_png(path)?;
        let data = img.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0 >= 0.5).collect();
        return Ok(Mask { width: img.width, height: img.height, data });
    }
    read_pgm_mask(path)
}

#[cfg(feature = "png")]
fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::load(path, e.to_string()))
}

#[cfg(feature = "png")]
fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_data(w as usize, h as usize, img.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(not(feature = "png"))]
fn save_png(path: &Path, _img: &RgbImage) -> Result<()> {
    Err(Error::load(path, "PNG support requires the `png` feature"))
}

#[cfg(not(feature = "png"))]
fn load_png(path: &Path) -> Result<RgbImage> {
    Err(Error::load(path, "PNG support requires the `png` feature"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.037) % 1.0;
        }
        let q = quantize(&img);
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), q);
        assert!(img.data.iter().zip(&q.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn mask_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Mask { width: 4, height: 2, data: vec![true, false, true, true, false, false, true, false] };
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
        assert!(matches!(read_ppm(&path), Err(Error::Load { .. })));
        assert!(matches!(load_image(&dir.path().join("missing.ppm")), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("short.ppm"), b"P6\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_ppm(&dir.path().join("short.ppm")), Err(Error::Load { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        std::fs::write(&path, b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80").unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.get(0, 0), Vec3::new(1.0, 0.0, 128.0 / 255.0));
    }
}
