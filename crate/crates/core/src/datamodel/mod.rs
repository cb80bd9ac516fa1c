//! Samples, the binary dataset container, validation and instance windows.

mod container;
mod instances;

pub use container::{load_container, read_container, save_container, write_container, MAGIC};
pub use instances::{build_instances, split, Split, TrainingInstance};

/// Spectral band order of every image.
pub const BAND_NAMES: [&str; 6] = ["B2", "B3", "B4", "B8", "B9", "B12"];
pub const BANDS: usize = BAND_NAMES.len();

/// Weather channel order of every daily record.
pub const WEATHER_NAMES: [&str; 5] = ["tmin", "tmax", "precip", "wind_u", "wind_v"];
pub const WEATHER_CHANNELS: usize = WEATHER_NAMES.len();

pub const DEFAULT_PATCH: usize = 8;

/// One location: image series, daily weather, day-of-year stamps and the
/// optional soil-moisture and crop-label ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Side length H (= W) in pixels.
    pub size: usize,
    /// `T × 6 × H × H` reflectances, image-major then band-major.
    pub images: Vec<f32>,
    pub doys: Vec<u16>,
    /// `L × 5` daily weather values.
    pub weather: Vec<f32>,
    /// Day of year of the first weather record.
    pub start_doy: u16,
    /// Soil moisture at each image date.
    pub soil: Option<Vec<f32>>,
    /// `H × H` crop class ids.
    pub crops: Option<Vec<u8>>,
}

impl Sample {
    /// Number of images T.
    pub fn len(&self) -> usize {
        self.doys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doys.is_empty()
    }

    /// Number of weather days L.
    pub fn days(&self) -> usize {
        self.weather.len() / WEATHER_CHANNELS
    }

    pub fn image_len(&self) -> usize {
        BANDS * self.size * self.size
    }

    pub fn image(&self, t: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[t * n..(t + 1) * n]
    }

    pub fn weather_day(&self, d: usize) -> &[f32] {
        &self.weather[d * WEATHER_CHANNELS..(d + 1) * WEATHER_CHANNELS]
    }

    /// Row of the weather block holding day-of-year `doy`.
    pub fn weather_index(&self, doy: u16) -> Option<usize> {
        let d = (doy as usize).checked_sub(self.start_doy as usize)?;
        (d < self.days()).then_some(d)
    }
}

/// All invariant violations of a sample, using the default patch size.
pub fn validate(sample: &Sample) -> Vec<String> {
    validate_with_patch(sample, DEFAULT_PATCH)
}

pub fn validate_with_patch(sample: &Sample, patch: usize) -> Vec<String> {
    let mut v = Vec::new();
    let t = sample.len();
    let h = sample.size;
    if t == 0 {
        v.push("empty image series".to_string());
    }
    if h == 0 {
        v.push("zero image size".to_string());
    } else if patch == 0 || !h.is_multiple_of(patch) {
        v.push(format!("image side {h} not divisible by patch size {patch}"));
    }
    let per_band = t * h * h;
    if per_band > 0 {
        if !sample.images.len().is_multiple_of(per_band) {
            v.push(format!(
                "image block holds {} values, not a multiple of T·H·W = {per_band}",
                sample.images.len()
            ));
        } else if sample.images.len() / per_band != BANDS {
            v.push(format!("band count {} ≠ {BANDS}", sample.images.len() / per_band));
        }
    }
    if sample.images.iter().any(|x| !x.is_finite()) {
        v.push("non-finite image value".to_string());
    }
    if sample.doys.windows(2).any(|w| w[0] >= w[1]) {
        v.push("DOY series not strictly increasing".to_string());
    }
    if let Some(bad) = sample.doys.iter().find(|&&d| !(1..=365).contains(&d)) {
        v.push(format!("DOY {bad} outside [1, 365]"));
    }
    if !(1..=365).contains(&sample.start_doy) {
        v.push(format!("weather start DOY {} outside [1, 365]", sample.start_doy));
    }
    if !sample.weather.len().is_multiple_of(WEATHER_CHANNELS) {
        v.push(format!(
            "weather block of {} values is not a whole number of {WEATHER_CHANNELS}-channel days",
            sample.weather.len()
        ));
    }
    if sample.weather.iter().any(|x| !x.is_finite()) {
        v.push("non-finite weather value".to_string());
    }
    let days = sample.days();
    if let (Some(&first), Some(&last)) = (sample.doys.first(), sample.doys.last()) {
        if first < sample.start_doy {
            v.push(format!("image DOY {first} precedes weather start {}", sample.start_doy));
        }
        let needed = last as i64 - sample.start_doy as i64 + 1;
        if needed > days as i64 {
            v.push(format!("weather covers {days} days but DOY {last} needs {needed}"));
        }
    }
    if let Some(soil) = &sample.soil {
        if soil.len() != t {
            v.push(format!("soil series length {} ≠ image count {t}", soil.len()));
        }
        if let Some(bad) = soil.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            v.push(format!("soil moisture {bad} outside [0, 1]"));
        }
    }
    if let Some(crops) = &sample.crops {
        if crops.len() != h * h {
            v.push(format!("crop grid holds {} labels, expected {}", crops.len(), h * h));
        }
    }
    v
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A small valid sample with deterministic content.
    pub fn tiny_sample(t: usize, size: usize, seed: u64) -> Sample {
        let mut rng = crate::numerics::RngStream::new(seed, "tiny-sample");
        let doys: Vec<u16> = (0..t).map(|i| 5 + 7 * i as u16).collect();
        let days = *doys.last().unwrap() as usize + 3;
        Sample {
            size,
            images: (0..t * BANDS * size * size).map(|_| rng.uniform() as f32).collect(),
            doys,
            weather: (0..days * WEATHER_CHANNELS).map(|_| rng.normal() as f32).collect(),
            start_doy: 1,
            soil: Some((0..t).map(|_| rng.uniform() as f32).collect()),
            crops: Some((0..size * size).map(|_| rng.below(5) as u8).collect()),
        }
    }

    #[test]
    fn valid_sample_has_no_violations() {
        assert!(validate(&tiny_sample(4, 16, 1)).is_empty());
    }

    #[test]
    fn repeated_doy_reported() {
        let mut s = tiny_sample(2, 8, 2);
        s.doys = vec![10, 10];
        let v = validate(&s);
        assert!(v.iter().any(|m| m.contains("not strictly increasing")), "{v:?}");
    }

    #[test]
    fn five_band_image_reported() {
        let mut s = tiny_sample(2, 8, 3);
        s.images.truncate(2 * 5 * 64);
        let v = validate(&s);
        assert!(v.iter().any(|m| m == "band count 5 ≠ 6"), "{v:?}");
    }

    #[test]
    fn every_violation_listed() {
        let mut s = tiny_sample(3, 8, 4);
        s.doys = vec![30, 20, 400];
        s.soil = Some(vec![0.5]);
        s.size = 12;
        let v = validate(&s);
        assert!(v.len() >= 4, "{v:?}");
    }

    #[test]
    fn weather_index_respects_span() {
        let s = tiny_sample(3, 8, 5);
        assert_eq!(s.weather_index(1), Some(0));
        assert_eq!(s.weather_index(s.start_doy + s.days() as u16), None);
    }
}
