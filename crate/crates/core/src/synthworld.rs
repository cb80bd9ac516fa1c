//! Synthetic locations whose imagery and soil moisture are driven by a
//! daily weather series.
//!
//! Each pixel carries a vegetation fraction, soil moisture and snow depth
//! that evolve with first-order daily updates. Images are linear mixtures of
//! fixed spectral signatures weighted by that state, so an image at day `d`
//! depends only on the weather up to `d` and the initial state.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::datamodel::{Sample, BANDS, BAND_NAMES, WEATHER_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Reflectance of dry bare soil in band order B2, B3, B4, B8, B9, B12.
pub const SOIL_DRY: [f64; BANDS] = [0.12, 0.16, 0.20, 0.26, 0.28, 0.34];
/// Saturated soil is darker, most strongly in the shortwave infrared.
pub const SOIL_WET: [f64; BANDS] = [0.06, 0.08, 0.10, 0.14, 0.15, 0.14];
pub const VEGETATION: [f64; BANDS] = [0.03, 0.08, 0.04, 0.48, 0.40, 0.12];
pub const SNOW: [f64; BANDS] = [0.90, 0.88, 0.85, 0.75, 0.60, 0.10];

/// World constants shared by every location of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub size: usize,
    pub days: usize,
    pub start_doy: u16,
    pub regions: usize,
    pub crop_classes: usize,
    /// Side of the square crop fields in pixels.
    pub field_block: usize,
    pub first_image_max: u16,
    pub gap_min: u16,
    pub gap_max: u16,
    /// Soil drainage per day.
    pub k_s: f64,
    /// Soil gain per mm of precipitation.
    pub k_p: f64,
    pub t_base: f64,
    /// Snow melt per degree-day above zero, mm.
    pub melt: f64,
    /// Snow depth giving 63% cover, mm.
    pub snow_scale: f64,
    /// Daily vegetation loss fraction.
    pub senescence: f64,
    /// Vegetation loss fraction on frost days.
    pub frost_kill: f64,
    pub frost_temp: f64,
    /// Sensor noise standard deviation (reflectance units).
    pub sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            size: 32,
            days: 365,
            start_doy: 1,
            regions: 6,
            crop_classes: 5,
            field_block: 8,
            first_image_max: 15,
            gap_min: 3,
            gap_max: 15,
            k_s: 0.05,
            k_p: 0.02,
            t_base: 5.0,
            melt: 0.1,
            snow_scale: 5.0,
            senescence: 0.01,
            frost_kill: 0.2,
            frost_temp: -2.0,
            sigma: 0.01,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size == 0 || self.field_block == 0 || !self.size.is_multiple_of(self.field_block) {
            return bad(format!(
                "image size {} not divisible by field block {}",
                self.size, self.field_block
            ));
        }
        if self.days == 0 || !(1..=365).contains(&self.start_doy) {
            return bad(format!(
                "weather span {} days from DOY {} invalid",
                self.days, self.start_doy
            ));
        }
        if self.regions == 0 || self.crop_classes == 0 || self.crop_classes > 255 {
            return bad("regions and crop classes must be positive (classes ≤ 255)".into());
        }
        if self.gap_min == 0 || self.gap_min > self.gap_max || self.first_image_max == 0 {
            return bad(format!("image gap range [{}, {}] invalid", self.gap_min, self.gap_max));
        }
        if !(0.0..=1.0).contains(&self.k_s) || self.k_p < 0.0 || self.melt < 0.0 || self.sigma < 0.0 {
            return bad("world rates must be non-negative (k_s ≤ 1)".into());
        }
        Ok(())
    }

    /// Last DOY an image may fall on.
    pub fn last_doy(&self) -> u16 {
        (self.start_doy as usize + self.days - 1).min(365) as u16
    }
}

/// Seasonal and stochastic weather parameters of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimateParams {
    pub t_mean: f64,
    pub t_amp: f64,
    /// DOY of the temperature peak.
    pub t_phase: f64,
    /// Mean diurnal range tmax − tmin.
    pub t_spread: f64,
    pub t_ar: f64,
    pub t_noise: f64,
    /// Offset of the latent precipitation process; rain falls where it is positive.
    pub p_mean: f64,
    pub p_amp: f64,
    pub p_phase: f64,
    pub p_ar: f64,
    pub p_noise: f64,
    pub wind_mean: [f64; 2],
    pub wind_ar: f64,
    pub wind_noise: f64,
}

impl ClimateParams {
    /// Region `r` of `n`, cold and dry at one end, warm and wet at the other.
    pub fn for_region(region: usize, regions: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, &format!("climate/{region}"));
        let f = if regions > 1 {
            region as f64 / (regions - 1) as f64
        } else {
            0.5
        };
        ClimateParams {
            t_mean: 5.0 + 13.0 * f + rng.uniform_range(-1.0, 1.0),
            t_amp: rng.uniform_range(9.0, 14.0),
            t_phase: rng.uniform_range(190.0, 210.0),
            t_spread: rng.uniform_range(6.0, 12.0),
            t_ar: 0.95,
            t_noise: rng.uniform_range(0.8, 1.3),
            p_mean: -4.0 + 4.0 * ((region * 7 % regions.max(1)) as f64 / regions.max(1) as f64),
            p_amp: rng.uniform_range(1.0, 3.0),
            p_phase: rng.uniform_range(0.0, 365.0),
            p_ar: 0.6,
            p_noise: rng.uniform_range(3.5, 5.0),
            wind_mean: [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)],
            wind_ar: 0.8,
            wind_noise: 1.5,
        }
    }

    /// A noiseless climate with constant temperature and no rain.
    pub fn still(temperature: f64) -> Self {
        ClimateParams {
            t_mean: temperature,
            t_amp: 0.0,
            t_phase: 0.0,
            t_spread: 0.0,
            t_ar: 0.0,
            t_noise: 0.0,
            p_mean: -1.0,
            p_amp: 0.0,
            p_phase: 0.0,
            p_ar: 0.0,
            p_noise: 0.0,
            wind_mean: [0.0, 0.0],
            wind_ar: 0.0,
            wind_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_amp < 0.0 || self.p_amp < 0.0 || self.t_spread < 0.0 {
            return Err(Error::Config("climate amplitudes must be non-negative".into()));
        }
        for ar in [self.t_ar, self.p_ar, self.wind_ar] {
            if !(-1.0 < ar && ar < 1.0) {
                return Err(Error::Config(format!("AR coefficient {ar} outside (−1, 1)")));
            }
        }
        Ok(())
    }
}

/// Daily weather for `days` days starting at `start_doy`, as `L × 5` values.
pub fn gen_weather(params: &ClimateParams, days: usize, start_doy: u16, seed: u64) -> Vec<f32> {
    let mut rng = RngStream::new(seed, "weather");
    let mut out = Vec::with_capacity(days * WEATHER_CHANNELS);
    let (mut ta, mut pa, mut wu, mut wv) = (0.0, 0.0, 0.0, 0.0);
    for d in 0..days {
        let doy = ((start_doy as usize - 1 + d) % 365 + 1) as f64;
        ta = params.t_ar * ta + params.t_noise * rng.normal();
        pa = params.p_ar * pa + params.p_noise * rng.normal();
        wu = params.wind_ar * wu + params.wind_noise * rng.normal();
        wv = params.wind_ar * wv + params.wind_noise * rng.normal();
        let spread_noise = 0.5 * params.t_noise * rng.normal();
        let tavg = params.t_mean + params.t_amp * (2.0 * PI * (doy - params.t_phase) / 365.0).cos() + ta;
        let spread = (params.t_spread + spread_noise).max(0.0);
        let precip = (params.p_mean + params.p_amp * (2.0 * PI * (doy - params.p_phase) / 365.0).cos() + pa).max(0.0);
        out.extend_from_slice(&[
            (tavg - 0.5 * spread) as f32,
            (tavg + 0.5 * spread) as f32,
            precip as f32,
            (params.wind_mean[0] + wu) as f32,
            (params.wind_mean[1] + wv) as f32,
        ]);
    }
    out
}

/// Growing window and growth rate of one crop class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phenology {
    pub planting: u16,
    /// Vegetation is removed on this DOY; 366 means never.
    pub harvest: u16,
    pub rate: f64,
}

/// Class 0 is perennial grassland; the rest are annual crops with staggered seasons.
pub fn class_phenology(class: usize, classes: usize) -> Phenology {
    if class == 0 {
        return Phenology {
            planting: 1,
            harvest: 366,
            rate: 0.004,
        };
    }
    let span = (classes.max(3) - 2) as f64;
    let planting = 40.0 + 100.0 * (class - 1) as f64 / span;
    Phenology {
        planting: planting.round() as u16,
        harvest: (planting + 110.0 + 15.0 * (class % 3) as f64).round().min(365.0) as u16,
        rate: 0.008 + 0.001 * (class % 4) as f64,
    }
}

/// Per-pixel latent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    pub vegetation: f64,
    pub soil: f64,
    pub snow: f64,
}

/// One day of the world dynamics for a single pixel.
pub fn step_state(state: LatentState, day: &[f32], doy: u16, phen: &Phenology, cfg: &WorldConfig) -> LatentState {
    let (tmin, tmax, precip) = (day[0] as f64, day[1] as f64, day[2] as f64);
    let tavg = 0.5 * (tmin + tmax);
    let soil = ((1.0 - cfg.k_s) * state.soil + cfg.k_p * precip).clamp(0.0, 1.0);
    let gdd = (tavg - cfg.t_base).max(0.0);
    let v = state.vegetation;
    let growing = doy >= phen.planting && doy < phen.harvest;
    let growth = if growing {
        phen.rate * gdd * soil * (1.0 - v)
    } else {
        0.0
    };
    let mut loss = cfg.senescence * v;
    if tmin < cfg.frost_temp {
        loss += cfg.frost_kill * v;
    }
    if doy == phen.harvest {
        loss = v;
    }
    let vegetation = (v + growth - loss).clamp(0.0, 1.0);
    let accumulation = if tavg < 0.0 { precip } else { 0.0 };
    let snow = (state.snow + accumulation - cfg.melt * tavg.max(0.0)).max(0.0);
    LatentState { vegetation, soil, snow }
}

/// Noise-free reflectance of one pixel.
pub fn pixel_signature(state: &LatentState, cfg: &WorldConfig) -> [f64; BANDS] {
    let cover = 1.0 - (-state.snow / cfg.snow_scale).exp();
    let (s, v) = (state.soil, state.vegetation);
    let mut out = [0.0; BANDS];
    for (b, o) in out.iter_mut().enumerate() {
        let soil = (1.0 - s) * SOIL_DRY[b] + s * SOIL_WET[b];
        *o = (1.0 - cover) * ((1.0 - v) * soil + v * VEGETATION[b]) + cover * SNOW[b];
    }
    out
}

/// Renders a `6 × H × H` image from a row-major pixel state grid, adding
/// Gaussian noise of standard deviation `cfg.sigma`.
pub fn render_image(grid: &[LatentState], size: usize, cfg: &WorldConfig, rng: &mut RngStream) -> Vec<f32> {
    let n = size * size;
    let mut img = vec![0.0f32; BANDS * n];
    for (p, state) in grid.iter().enumerate().take(n) {
        let sig = pixel_signature(state, cfg);
        for b in 0..BANDS {
            img[b * n + p] = sig[b] as f32;
        }
    }
    if cfg.sigma > 0.0 {
        for x in &mut img {
            *x += (cfg.sigma * rng.normal()) as f32;
        }
    }
    img
}

/// Image dates: first within `[start, start + first_image_max)`, then random gaps.
pub fn image_doys(cfg: &WorldConfig, rng: &mut RngStream) -> Vec<u16> {
    let last = cfg.last_doy() as usize;
    let mut d = cfg.start_doy as usize + rng.below(cfg.first_image_max as usize);
    let mut out = Vec::new();
    while d <= last {
        out.push(d as u16);
        d += rng.int_inclusive(cfg.gap_min as usize, cfg.gap_max as usize);
    }
    out
}

/// Region a dataset sample index belongs to.
pub fn region_of(index: usize, regions: usize) -> usize {
    index % regions.max(1)
}

/// Field class grid: square blocks of `field_block` pixels with uniform class.
pub fn crop_field(cfg: &WorldConfig, rng: &mut RngStream) -> Vec<u8> {
    let blocks = cfg.size / cfg.field_block;
    let classes: Vec<u8> = (0..blocks * blocks)
        .map(|_| rng.below(cfg.crop_classes) as u8)
        .collect();
    let mut grid = vec![0u8; cfg.size * cfg.size];
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            grid[y * cfg.size + x] = classes[(y / cfg.field_block) * blocks + x / cfg.field_block];
        }
    }
    grid
}

/// Generates one location of the given climate.
pub fn gen_location(cfg: &WorldConfig, climate: &ClimateParams, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    climate.validate()?;
    let root = RngStream::new(seed, "location");
    let weather = gen_weather(climate, cfg.days, cfg.start_doy, seed);
    let doys = image_doys(cfg, &mut root.derive("doys"));
    let crops = crop_field(cfg, &mut root.derive("crops"));
    let phen: Vec<Phenology> = (0..cfg.crop_classes)
        .map(|c| class_phenology(c, cfg.crop_classes))
        .collect();
    let mut grid: Vec<LatentState> = crops
        .iter()
        .map(|&c| LatentState {
            vegetation: if c == 0 { 0.1 } else { 0.0 },
            soil: 0.3,
            snow: 0.0,
        })
        .collect();
    let mut noise = root.derive("sensor");
    let mut images = Vec::with_capacity(doys.len() * BANDS * cfg.size * cfg.size);
    let mut soil = Vec::with_capacity(doys.len());
    let mut next = 0;
    for d in 0..cfg.days {
        let doy = cfg.start_doy + d as u16;
        let day = &weather[d * WEATHER_CHANNELS..(d + 1) * WEATHER_CHANNELS];
        for (state, &c) in grid.iter_mut().zip(&crops) {
            *state = step_state(*state, day, doy, &phen[c as usize], cfg);
        }
        if next < doys.len() && doys[next] == doy {
            images.extend(render_image(&grid, cfg.size, cfg, &mut noise));
            soil.push(grid[0].soil as f32);
            next += 1;
        }
    }
    Ok(Sample {
        size: cfg.size,
        images,
        doys,
        weather,
        start_doy: cfg.start_doy,
        soil: Some(soil),
        crops: Some(crops),
    })
}

/// `n` locations; location `i` uses the climate of region `i mod regions`.
pub fn gen_dataset(n: usize, cfg: &WorldConfig, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let climates: Vec<ClimateParams> = (0..cfg.regions)
        .map(|r| ClimateParams::for_region(r, cfg.regions, seed))
        .collect();
    (0..n)
        .map(|i| {
            let loc_seed = RngStream::derive_seed(seed, &format!("sample/{i}"));
            gen_location(cfg, &climates[region_of(i, cfg.regions)], loc_seed)
        })
        .collect()
}

/// Plain-text listing of every world constant, region climate and crop
/// phenology used to generate a dataset.
pub fn world_sidecar(cfg: &WorldConfig, seed: u64, samples: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples = {samples}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "{cfg:#?}");
    let _ = writeln!(s, "bands = {}", BAND_NAMES.join(","));
    for (name, sig) in [
        ("soil_dry", SOIL_DRY),
        ("soil_wet", SOIL_WET),
        ("vegetation", VEGETATION),
        ("snow", SNOW),
    ] {
        let _ = writeln!(s, "signature.{name} = {sig:?}");
    }
    for r in 0..cfg.regions {
        let _ = writeln!(s, "region.{r} = {:?}", ClimateParams::for_region(r, cfg.regions, seed));
    }
    for c in 0..cfg.crop_classes {
        let _ = writeln!(s, "class.{c} = {:?}", class_phenology(c, cfg.crop_classes));
    }
    s
}
