//! Binary PGM (P5) images.
//!
//! Files are written with 16-bit big-endian samples and maxval 65535; a
//! sample `v` encodes intensity `v / 65535`. Reading also accepts 8-bit
//! files. Condition labels use the codes `0`, `32768` and `65535` for
//! `0`, `0.5` and `1`, and are snapped back to those exact labels on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

pub const MAXVAL: u16 = 65535;

/// Quantises an intensity in `[0, 1]` to a 16-bit sample (round half away from zero).
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

pub fn dequantize(code: u16) -> f64 {
    code as f64 / MAXVAL as f64
}

/// Storage code of a condition label.
pub fn condition_code(label: f64) -> Result<u16> {
    match label {
        l if l == 0.0 => Ok(0),
        l if l == 0.5 => Ok(32768),
        l if l == 1.0 => Ok(MAXVAL),
        l => Err(Error::Domain(format!("{l} is not a condition label"))),
    }
}

/// Exact label of a stored condition sample, if it is one of the three codes
/// (after rescaling 8-bit files).
fn condition_label(v: f64) -> Option<f64> {
    [0.0, 0.5, 1.0].into_iter().find(|&l| (v - l).abs() < 0.01)
}

fn encode(width: usize, height: usize, codes: impl Iterator<Item = u16>) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n{MAXVAL}\n").into_bytes();
    for c in codes {
        bytes.extend_from_slice(&c.to_be_bytes());
    }
    bytes
}

fn single_channel(img: &ImageTensor) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "1 channel".into(),
            got: format!("{} channels", img.channels()),
        });
    }
    Ok(())
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel image with values in `[0, 1]`.
pub fn write_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    single_channel(img)?;
    if let Some(v) = img.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
    }
    write(
        path.as_ref(),
        encode(img.width(), img.height(), img.values().iter().map(|&v| quantize(v))),
    )
}

/// Writes a condition image whose values are labels in `{0, 0.5, 1}`.
pub fn write_condition(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    single_channel(img)?;
    let codes = img.values().iter().map(|&v| condition_code(v)).collect::<Result<Vec<_>>>()?;
    write(path.as_ref(), encode(img.width(), img.height(), codes.into_iter()))
}

/// Raw samples and maxval of a P5 file.
pub fn read_samples(path: impl AsRef<Path>) -> Result<(Shape, u16, Vec<u16>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format(path, "not a binary PGM (P5) file"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("unsupported header {width}x{height} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let wide = maxval > 255;
    let n = width * height;
    let need = if wide { 2 * n } else { n };
    if data.len() != need {
        return Err(Error::format(path, format!("expected {need} raster bytes, found {}", data.len())));
    }
    let samples: Vec<u16> = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::format(path, format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok((Shape::new(height, width, 1), maxval as u16, samples))
}

/// Reads an image as intensities `sample / maxval`.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let (shape, maxval, samples) = read_samples(path)?;
    ImageTensor::new(shape, samples.iter().map(|&s| s as f64 / maxval as f64).collect())
}

/// Reads a condition image and snaps every sample to its exact label.
pub fn read_condition(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let (shape, maxval, samples) = read_samples(path)?;
    let values = samples
        .iter()
        .map(|&s| {
            let v = s as f64 / maxval as f64;
            condition_label(v).ok_or_else(|| Error::format(path, format!("sample {s} is not a condition label")))
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::new(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = ImageTensor::from_fn(Shape::new(3, 5, 1), |_, y, x| (y * 5 + x) as f64 / 14.0);
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n5 3\n65535\n"));
        assert_eq!(raw.len(), 13 + 2 * 15);
    }

    #[test]
    fn condition_codes_are_exact() {
        assert_eq!(condition_code(0.0).unwrap(), 0);
        assert_eq!(condition_code(0.5).unwrap(), 32768);
        assert_eq!(quantize(0.5), 32768);
        assert_eq!(condition_code(1.0).unwrap(), 65535);
        assert!(condition_code(0.3).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let img = ImageTensor::new(Shape::new(1, 3, 1), vec![0.0, 0.5, 1.0]).unwrap();
        write_condition(&p, &img).unwrap();
        assert_eq!(read_samples(&p).unwrap().2, vec![0, 32768, 65535]);
        assert_eq!(read_condition(&p).unwrap(), img);
    }

    #[test]
    fn eight_bit_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        fs::write(&p, b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_image(&p).unwrap().values(), &[0.0, 1.0]);
        fs::write(&p, b"P5\n2 1\n255\n\x00").unwrap();
        assert!(read_image(&p).is_err());
        fs::write(&p, b"P2\n2 1\n255\n0 1").unwrap();
        assert!(read_image(&p).is_err());
        assert!(read_image(dir.path().join("missing.pgm")).is_err());
    }
}
