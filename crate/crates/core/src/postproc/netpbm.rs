//! Binary netpbm I/O: 8-bit PGM (P5) and PPM (P6) with maxval 255, the two
//! formats this toolkit reads and writes. Pixels map to [0, 1] as `v / 255`
//! on read and round-to-nearest `v * 255` on write.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::float::Real;

use super::{Image, Provenance};

/// Reads a P5 or P6 file. Anything else (ASCII variants, 16-bit maxval)
/// is an unsupported-format error.
pub fn read_image<T: Real>(path: &Path) -> Result<Image<T>> {
    let bytes = std::fs::read(path)?;
    let (image, _) = parse_image(&bytes, Provenance::File(path.to_path_buf()))?;
    Ok(image)
}

/// Parses an in-memory netpbm byte stream; returns the image and the number
/// of bytes consumed.
pub fn parse_image<T: Real>(bytes: &[u8], provenance: Provenance) -> Result<(Image<T>, usize)> {
    if bytes.len() < 2 {
        return Err(Error::ImageFormat("file shorter than a magic number".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::ImageFormat(format!(
                "unsupported magic {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval} (only 255)")));
    }
    // One whitespace byte normally separates the header from the raster;
    // tolerate its absence on read (the maxval token already ended).
    if pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let count = channels * width * height;
    if bytes.len() < pos + count {
        return Err(Error::ImageFormat(format!(
            "pixel data truncated: expected {count} bytes, found {}",
            bytes.len() - pos
        )));
    }
    // File raster is interleaved (RGB per pixel); storage is channel-major.
    let mut data = vec![T::zero(); count];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = bytes[pos + (y * width + x) * channels + c];
                data[(c * height + y) * width + x] = T::from_f64_rn(v as f64 / 255.0);
            }
        }
    }
    let image = Image::new(channels, height, width, data, provenance)?;
    Ok((image, pos + count))
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat("malformed header field".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat("malformed header field".into()))
}

/// Writes PGM for 1-channel images and PPM for 3-channel images.
pub fn write_image<T: Real>(img: &Image<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&encode_image(img))?;
    out.flush()?;
    Ok(())
}

/// Encodes an image to netpbm bytes.
pub fn encode_image<T: Real>(img: &Image<T>) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{}\n{} {}\n255\n", magic, img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                bytes.push(quantize(img.pixel(c, y, x)));
            }
        }
    }
    bytes
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn parses_a_minimal_p5_header() {
        let bytes = b"P5 2 2 255\x00\x40\x80\xFF".to_vec();
        let (img, used) = parse_image::<f64>(&bytes, Provenance::Derived).unwrap();
        assert_eq!((img.channels, img.height, img.width), (1, 2, 2));
        assert_eq!(used, bytes.len());
        assert_eq!(img.data[0], 0.0);
        assert!((img.data[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skips_comments_in_headers() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x10\x20".to_vec();
        let (img, _) = parse_image::<f64>(&bytes, Provenance::Derived).unwrap();
        assert_eq!((img.height, img.width), (1, 2));
    }

    #[test]
    fn rejects_wide_maxval_and_foreign_magic() {
        let wide = b"P5 1 1 65535\n\x00\x00".to_vec();
        assert!(matches!(parse_image::<f64>(&wide, Provenance::Derived), Err(Error::ImageFormat(_))));
        let ascii = b"P2 1 1 255\n0".to_vec();
        assert!(matches!(parse_image::<f64>(&ascii, Provenance::Derived), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn rejects_truncated_raster() {
        let bytes = b"P6 2 2 255\n\x00\x00\x00".to_vec();
        assert!(matches!(parse_image::<f64>(&bytes, Provenance::Derived), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn write_read_round_trip_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(5);
        for channels in [1usize, 3] {
            let data: Vec<f64> = (0..channels * 4 * 6).map(|_| rng.next_f64()).collect();
            let img = Image::new(channels, 4, 6, data, Provenance::Synthetic(5)).unwrap();
            let path = dir.path().join(format!("c{channels}.pnm"));
            write_image(&img, &path).unwrap();
            let back = read_image::<f64>(&path).unwrap();
            assert_eq!(back.channels, channels);
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn byte_valued_pixels_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..16).map(|k| (k * 17 % 256) as f64 / 255.0).collect();
        let img = Image::new(1, 4, 4, data.clone(), Provenance::Derived).unwrap();
        let path = dir.path().join("exact.pgm");
        write_image(&img, &path).unwrap();
        let back = read_image::<f64>(&path).unwrap();
        assert_eq!(back.data, data);
    }
}
