//! Binary PPM (P6) frames and PGM (P5) masks.
//!
//! Frames are stored planar in memory (`[3, H, W]`) and interleaved on disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, IoContext, Result};

fn write(path: &Path, data: &[u8], width: usize, height: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .at(path)?;
    out.flush().at(path)
}

fn read(path: &Path) -> Result<image::DynamicImage> {
    let mut reader = ImageReader::open(path).at(path)?;
    reader.set_format(ImageFormat::Pnm);
    reader.decode().at(path)
}

/// Writes planar `[3, height, width]` pixels as P6.
pub fn write_ppm(path: &Path, planar: &[u8], width: usize, height: usize) -> Result<()> {
    let plane = width * height;
    if planar.len() != 3 * plane {
        return Err(Error::format(path, format!("{} bytes for a {width}x{height} RGB frame", planar.len())));
    }
    let interleaved: Vec<u8> = (0..plane).flat_map(|i| [planar[i], planar[plane + i], planar[2 * plane + i]]).collect();
    write(path, &interleaved, width, height, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Reads a P6 file into planar `[3, height, width]` pixels.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = read(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut planar = vec![0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = px.0[c];
        }
    }
    Ok((planar, w, h))
}

pub fn write_pgm(path: &Path, gray: &[u8], width: usize, height: usize) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::format(path, format!("{} bytes for a {width}x{height} mask", gray.len())));
    }
    write(path, gray, width, height, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = read(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), w, h))
}

/// Writes a 0/1 mask as 0/255.
pub fn write_mask(path: &Path, mask: &[bool], width: usize) -> Result<()> {
    let gray: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(path, &gray, width, mask.len() / width.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_keeps_planes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let planar: Vec<u8> = (0..3 * 6).map(|v| v as u8 * 10).collect();
        write_ppm(&path, &planar, 3, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        // First pixel interleaves the first entry of each plane.
        assert_eq!(&bytes[bytes.len() - 18..bytes.len() - 15], &[0, 60, 120]);
        assert_eq!(read_ppm(&path).unwrap(), (planar, 3, 2));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_mask(&path, &[true, false, false, true], 2).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
        assert_eq!(read_pgm(&path).unwrap(), (vec![255, 0, 0, 255], 2, 2));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_ppm(&dir.path().join("x.ppm"), &[0; 5], 1, 2).is_err());
        assert!(read_pgm(&dir.path().join("missing.pgm")).is_err());
    }
}
