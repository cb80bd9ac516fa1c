use std::fs;
use std::path::Path;

use super::{Sample, BANDS, WEATHER_CHANNELS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CIVSFDS1";

const FLAG_SOIL: u8 = 1;
const FLAG_CROPS: u8 = 2;

/// Serializes samples into the little-endian container layout.
pub fn write_container(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(samples.len())
        .map_err(|_| Error::Data(format!("{} samples exceed the u32 count field", samples.len())))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        let field = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Data(format!("sample {i}: {what} {v} exceeds u16")))
        };
        let t = field(s.len(), "image count")?;
        let h = field(s.size, "image size")?;
        let l = field(s.days(), "weather length")?;
        if s.images.len() != s.len() * BANDS * s.size * s.size {
            return Err(Error::Data(format!(
                "sample {i}: image block length disagrees with header"
            )));
        }
        if s.weather.len() != s.days() * WEATHER_CHANNELS {
            return Err(Error::Data(format!("sample {i}: ragged weather block")));
        }
        let mut flags = 0u8;
        if let Some(soil) = &s.soil {
            if soil.len() != s.len() {
                return Err(Error::Data(format!("sample {i}: soil length {} ≠ T", soil.len())));
            }
            flags |= FLAG_SOIL;
        }
        if let Some(crops) = &s.crops {
            if crops.len() != s.size * s.size {
                return Err(Error::Data(format!("sample {i}: crop grid length {}", crops.len())));
            }
            flags |= FLAG_CROPS;
        }
        for v in [t, h, l, s.start_doy] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(flags);
        out.reserve(4 * (s.images.len() + s.weather.len()) + 2 * s.len());
        for x in &s.images {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for d in &s.doys {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &s.weather {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(soil) = &s.soil {
            for x in soil {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(crops) = &s.crops {
            out.extend_from_slice(crops);
        }
    }
    Ok(out)
}

/// Writes the container to `path`, returning the number of bytes written.
pub fn save_container(samples: &[Sample], path: impl AsRef<Path>) -> Result<usize> {
    let bytes = write_container(samples)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", path.as_ref().display())))?;
    read_container(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} extent overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(8, "magic")?;
    if let Some(i) = magic.iter().zip(MAGIC).position(|(a, b)| a != b) {
        return Err(Error::format(i as u64, "bad magic, expected CIVSFDS1"));
    }
    let count = u32::from_le_bytes(c.take(4, "sample count")?.try_into().unwrap());
    let mut samples = Vec::new();
    for i in 0..count {
        let header_at = c.pos as u64;
        let t = c.u16("sample header")? as usize;
        let h = c.u16("sample header")? as usize;
        let l = c.u16("sample header")? as usize;
        let start_doy = c.u16("sample header")?;
        let flags = c.take(1, "sample flags")?[0];
        if flags & !(FLAG_SOIL | FLAG_CROPS) != 0 {
            return Err(Error::format(
                c.pos as u64 - 1,
                format!("sample {i}: unknown flag bits {flags:#04x}"),
            ));
        }
        let images = c.f32s(t * BANDS * h * h, "image block")?;
        let doys = c
            .take(2 * t, "DOY block")?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let weather = c.f32s(l * WEATHER_CHANNELS, "weather block")?;
        let soil = if flags & FLAG_SOIL != 0 {
            Some(c.f32s(t, "soil block")?)
        } else {
            None
        };
        let crops = if flags & FLAG_CROPS != 0 {
            Some(c.take(h * h, "crop block")?.to_vec())
        } else {
            None
        };
        if t == 0 || h == 0 {
            return Err(Error::format(header_at, format!("sample {i}: zero extent in header")));
        }
        samples.push(Sample {
            size: h,
            images,
            doys,
            weather,
            start_doy,
            soil,
            crops,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(
            c.pos as u64,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::tests::tiny_sample;

    #[test]
    fn roundtrip_is_bitwise() {
        let samples: Vec<Sample> = (0..3).map(|i| tiny_sample(3 + i, 8, i as u64)).collect();
        let bytes = write_container(&samples).unwrap();
        let back = read_container(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.images), bits(&b.images));
            assert_eq!(bits(&a.weather), bits(&b.weather));
            assert_eq!(a, b);
        }
        assert_eq!(write_container(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_magic_reports_offset_zero() {
        let mut bytes = write_container(&[tiny_sample(2, 8, 1)]).unwrap();
        bytes[0] = b'X';
        match read_container(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn absent_soil_stays_absent() {
        let mut s = tiny_sample(2, 8, 2);
        s.soil = None;
        let back = read_container(&write_container(&[s]).unwrap()).unwrap();
        assert!(back[0].soil.is_none());
        assert!(back[0].crops.is_some());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_container(&[tiny_sample(2, 8, 3)]).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(read_container(cut), Err(Error::Format { offset, .. }) if offset > 12));
    }

    #[test]
    fn header_counting_more_samples_than_present() {
        let mut bytes = write_container(&[tiny_sample(2, 8, 4)]).unwrap();
        bytes[8] = 2;
        assert!(matches!(read_container(&bytes), Err(Error::Format { .. })));
    }
}
