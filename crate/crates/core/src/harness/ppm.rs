use std::path::Path;

use crate::datamodel::BANDS;
use crate::error::{Error, Result};

/// Nearest-rank percentile of `values` (`q` in [0, 100]).
fn percentile(sorted: &[f32], q: f64) -> f32 {
    let idx = ((q / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// 8-bit RGB composite of a `6 × H × H` image with a 2–98 percentile stretch
/// per channel. Returns `size·size·3` bytes.
pub fn composite(image: &[f32], size: usize, bands: [usize; 3]) -> Result<Vec<u8>> {
    if image.len() != BANDS * size * size || size == 0 {
        return Err(Error::Dimension {
            op: "composite",
            lhs: vec![image.len()],
            rhs: vec![BANDS, size, size],
        });
    }
    if let Some(&b) = bands.iter().find(|&&b| b >= BANDS) {
        return Err(Error::Config(format!("band index {b} outside 0..{BANDS}")));
    }
    let n = size * size;
    let mut out = vec![0u8; n * 3];
    for (c, &b) in bands.iter().enumerate() {
        let plane = &image[b * n..(b + 1) * n];
        let mut sorted = plane.to_vec();
        sorted.sort_by(f32::total_cmp);
        let lo = percentile(&sorted, 2.0);
        let hi = percentile(&sorted, 98.0);
        for (i, &v) in plane.iter().enumerate() {
            let q = if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0
            } else {
                127.0
            };
            out[i * 3 + c] = q.round() as u8;
        }
    }
    Ok(out)
}

/// Binary P6 bytes, with `comment` as a `#` line after the magic.
pub fn ppm_bytes(rgb: &[u8], size: usize, comment: &str) -> Vec<u8> {
    let comment = comment.replace('\n', " ");
    let mut out = format!("P6\n# {comment}\n{size} {size}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm(image: &[f32], size: usize, bands: [usize; 3], comment: &str, path: &Path) -> Result<()> {
    let rgb = composite(image, size, bands)?;
    std::fs::write(path, ppm_bytes(&rgb, size, comment))?;
    Ok(())
}

/// Parses a P6 file written by [`ppm_bytes`]: `(width, height, rgb)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
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
            return Err(Error::format(pos as u64, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::format(0, "not a P6 image"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(0, format!("bad PPM field {s:?}")))
    };
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..).unwrap_or(&[]).to_vec();
    if data.len() != w * h * 3 {
        return Err(Error::format(pos as u64, "PPM pixel data has the wrong length"));
    }
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn constant_image_is_gray() {
        let rgb = composite(&vec![0.3; BANDS * 16], 4, [2, 1, 0]).unwrap();
        assert!(rgb.iter().all(|&v| v == 127));
    }

    #[test]
    fn header_and_roundtrip() {
        let mut rng = RngStream::new(1, "ppm");
        let img: Vec<f32> = (0..BANDS * 64).map(|_| rng.uniform() as f32).collect();
        let rgb = composite(&img, 8, [2, 1, 0]).unwrap();
        let bytes = ppm_bytes(&rgb, 8, "config_hash=abc seed=1");
        assert!(bytes.starts_with(b"P6\n# config_hash=abc seed=1\n8 8\n255\n"));
        let (w, h, back) = read_ppm(&bytes).unwrap();
        assert_eq!((w, h), (8, 8));
        assert_eq!(back, rgb);
        // quantization oracle for the red channel (band index 2)
        let plane = &img[2 * 64..3 * 64];
        let mut s = plane.to_vec();
        s.sort_by(f32::total_cmp);
        let (lo, hi) = (
            s[(0.02f64 * 63.0).round() as usize],
            s[(0.98f64 * 63.0).round() as usize],
        );
        for (i, &v) in plane.iter().enumerate() {
            let q = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(back[i * 3], q);
        }
    }

    #[test]
    fn bad_band_rejected() {
        assert!(composite(&[0.0; BANDS * 4], 2, [0, 1, 6]).is_err());
    }
}
