//! Two-phase pretraining for the four frameworks, and the fine-tuning heads
//! that read a frozen encoder.

pub mod evaluate;
pub mod finetune;
pub mod gradcheck;
pub mod phases;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::datamodel::{build_instances, WEATHER_CHANNELS};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Config;
use crate::masking::{build_uniform_mask, build_weather_mask};
use crate::model::{FrameworkKind, Model};
use crate::numerics::nn::ParamStore;
use crate::numerics::{Graph, OptimizerState, RngStream, Tensor};
use phases::{loss_1a, loss_1b, loss_1c, loss_2, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Masked image reconstruction, ViT and decoder only.
    P1a,
    /// Masked weather reconstruction, LSTM only.
    P1b,
    /// Series reconstruction from masked embeddings.
    P1c,
    /// Variable-step forecasting.
    P2,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::P1a, Phase::P1b, Phase::P1c, Phase::P2];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::P1a => "1a",
            Phase::P1b => "1b",
            Phase::P1c => "1c",
            Phase::P2 => "2",
        }
    }

    /// Parameters updated in this phase. The weather normalization and the
    /// parameters a phase never touches stay out.
    pub fn trains(self, name: &str) -> bool {
        if name == "weather.norm" {
            return false;
        }
        match self {
            Phase::P1a => name.starts_with("vit.") || name.starts_with("decoder."),
            Phase::P1b => name.starts_with("weather."),
            Phase::P1c => !name.starts_with("delta.") && !name.starts_with("forecast."),
            Phase::P2 => !name.starts_with("mm."),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }
}

/// Epochs per phase for one framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub p1a: usize,
    pub p1b: usize,
    pub p1c: usize,
    pub p2: usize,
}

impl PhasePlan {
    /// 1a and 1b get fixed budgets (1b only when weather is read), phase 2
    /// gets the final `epochs_forecast` for forecasting frameworks, and 1c
    /// takes what remains of `epochs_total`.
    pub fn for_kind(kind: FrameworkKind, cfg: &Config) -> Result<Self> {
        let p1a = cfg.epochs_1a;
        let p1b = if kind.uses_weather() { cfg.epochs_1b } else { 0 };
        let p2 = if kind.forecasts() { cfg.epochs_forecast } else { 0 };
        let p1c = cfg.epochs_total.checked_sub(p1a + p1b + p2).ok_or_else(|| {
            Error::Config(format!(
                "epochs_total = {} is smaller than 1a + 1b + forecast = {}",
                cfg.epochs_total,
                p1a + p1b + p2
            ))
        })?;
        Ok(PhasePlan { p1a, p1b, p1c, p2 })
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::P1a => self.p1a,
            Phase::P1b => self.p1b,
            Phase::P1c => self.p1c,
            Phase::P2 => self.p2,
        }
    }

    pub fn total(&self) -> usize {
        self.p1a + self.p1b + self.p1c + self.p2
    }

    /// Phase of global epoch `e`.
    pub fn phase_of(&self, e: usize) -> Option<Phase> {
        let mut start = 0;
        for p in Phase::ALL {
            start += self.epochs(p);
            if e < start {
                return Some(p);
            }
        }
        None
    }

    /// `1a:0-15,1b:15-25,…`, half-open global epoch ranges.
    pub fn boundaries(&self) -> String {
        let mut start = 0;
        let mut parts = Vec::new();
        for p in Phase::ALL {
            let n = self.epochs(p);
            parts.push(format!("{p}:{start}-{}", start + n));
            start += n;
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub framework: FrameworkKind,
    pub loss: f64,
    pub seconds: f64,
    /// Target gaps drawn this epoch (forecasting only).
    pub gaps: Vec<u32>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.3}",
            self.epoch, self.phase, self.framework, self.loss, self.seconds
        )
    }
}

pub const CSV_HEADER: &str = "epoch,phase,framework,loss,seconds";

/// Per-channel weather mean and standard deviation over `data`.
pub fn weather_stats(data: &[Prepared]) -> ([f64; 5], [f64; 5]) {
    let mut sum = [0.0; WEATHER_CHANNELS];
    let mut sq = [0.0; WEATHER_CHANNELS];
    let mut n = 0.0;
    for p in data {
        for day in p.sample.weather.chunks(WEATHER_CHANNELS) {
            for c in 0..WEATHER_CHANNELS {
                sum[c] += day[c] as f64;
                sq[c] += (day[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let n = f64::max(n, 1.0);
    let mean = sum.map(|s| s / n);
    let mut std = [1.0; WEATHER_CHANNELS];
    for c in 0..WEATHER_CHANNELS {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
    }
    (mean, std)
}

/// Seed for the random choices of one sample in one epoch.
pub fn instance_seed(seed: u64, phase: Phase, epoch: usize, sample: usize) -> u64 {
    RngStream::derive_seed(seed, &format!("instance/{phase}/{epoch}/{sample}"))
}

/// Pretraining state: model, parameters, optimizer and the epoch log.
pub struct Trainer<'a> {
    pub config: Config,
    pub kind: FrameworkKind,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub plan: PhasePlan,
    /// Next global epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    data: &'a [Prepared],
}

impl<'a> Trainer<'a> {
    pub fn new(config: &Config, data: &'a [Prepared]) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let kind = config.framework;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &config.model_config(), kind, config.seed)?;
        let (mean, std) = weather_stats(data);
        model.set_weather_norm(&mut store, mean, std);
        Ok(Trainer {
            config: config.clone(),
            kind,
            model,
            store,
            optimizer: OptimizerState::new(config.optimizer.0, config.lr, config.weight_decay),
            plan: PhasePlan::for_kind(kind, config)?,
            epoch: 0,
            log: Vec::new(),
            data,
        })
    }

    /// Continues from an epoch-boundary checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: &Config, data: &'a [Prepared], ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, data)?;
        let kind: FrameworkKind = ckpt.require("framework")?.parse()?;
        if kind != t.kind {
            return Err(Error::Compatibility(format!("checkpoint is {kind}, run is {}", t.kind)));
        }
        t.load_params(ckpt)?;
        t.epoch = parse_meta(ckpt, "epoch")?;
        let step: u64 = parse_meta(ckpt, "optimizer_step")?;
        let n = t.store.len();
        let (mut first, mut second) = (vec![None; n], vec![None; n]);
        for (i, (name, _)) in t.store.iter().enumerate() {
            first[i] = ckpt.tensor(&format!("opt.m.{name}")).cloned();
            second[i] = ckpt.tensor(&format!("opt.v.{name}")).cloned();
        }
        t.optimizer.restore(step, first, second);
        t.log = parse_log(ckpt)?;
        Ok(t)
    }

    fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let stored = ckpt.store(crate::model::is_model_param)?;
        Model::attach(&stored, &self.model.config, self.kind)?;
        for (name, t) in stored.iter() {
            self.store.assign(name, t.clone())?;
        }
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.plan.total()
    }

    /// Runs every remaining epoch, calling `after` once per epoch.
    pub fn run(&mut self, mut after: impl FnMut(&Trainer<'a>, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            after(self, &rec)?;
        }
        Ok(())
    }

    /// Runs a single epoch of whichever phase the schedule is in.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let phase = self
            .plan
            .phase_of(self.epoch)
            .ok_or_else(|| Error::Contract("training schedule already complete".into()))?;
        let started = Instant::now();
        let epoch = self.epoch;
        let order = RngStream::new(self.config.seed, &format!("order/{epoch}")).permutation(self.data.len());
        let n = self.store.len();
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; n];
        let mut in_batch = 0usize;
        let (mut total, mut count) = (0.0f64, 0usize);
        let mut gaps = Vec::new();
        for &i in &order {
            let Some((loss, grads, gap)) = self.instance(phase, epoch, i)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    phase: phase.to_string(),
                    epoch,
                });
            }
            total += loss;
            count += 1;
            gaps.extend(gap);
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match a {
                        Some(a) => a.add_assign(&g),
                        None => *a = Some(g),
                    }
                }
            }
            in_batch += 1;
            if in_batch == self.config.batch_size {
                self.apply(&mut acc, in_batch)?;
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            self.apply(&mut acc, in_batch)?;
        }
        if count == 0 {
            return Err(Error::Data(format!("phase {phase} found no usable training instances")));
        }
        self.epoch += 1;
        let rec = EpochRecord {
            epoch,
            phase,
            framework: self.kind,
            loss: total / count as f64,
            seconds: started.elapsed().as_secs_f64(),
            gaps,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    fn apply(&mut self, acc: &mut [Option<Tensor<f32>>], n: usize) -> Result<()> {
        let scale = 1.0 / n as f32;
        let grads: Vec<Option<Tensor<f32>>> = acc
            .iter_mut()
            .map(|a| {
                a.take().map(|mut g| {
                    g.scale(scale);
                    g
                })
            })
            .collect();
        self.optimizer.step(&mut self.store, &grads)
    }

    /// Loss and parameter gradients for sample `i`, or `None` when the sample
    /// cannot form an instance for this phase.
    #[allow(clippy::type_complexity)]
    fn instance(
        &self,
        phase: Phase,
        epoch: usize,
        i: usize,
    ) -> Result<Option<(f64, Vec<Option<Tensor<f32>>>, Option<u32>)>> {
        let cfg = &self.config;
        let prep = &self.data[i];
        let sample = &prep.sample;
        let seed = instance_seed(cfg.seed, phase, epoch, i);
        let mut rng = RngStream::new(seed, "choice");
        let c = cfg.context;
        let grid = self.model.grid();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.store, |n| phase.trains(n));
        let mut gap = None;
        let out = match phase {
            Phase::P1a | Phase::P1c => {
                if sample.len() < c {
                    return Ok(None);
                }
                let start = rng.below(sample.len() - c + 1);
                let plan = build_uniform_mask(c, grid, cfg.mask_ratio, seed)?;
                if phase == Phase::P1a {
                    loss_1a(
                        &mut g,
                        &p,
                        &self.model,
                        prep.patch_slice(start..start + c),
                        &plan,
                        cfg.loss_scope,
                    )?
                } else {
                    let input = prep.input(start..start + c);
                    let wmask = build_weather_mask(sample.days(), cfg.weather_mask_ratio, seed)?;
                    loss_1c(&mut g, &p, &self.model, &input, &plan, Some(&wmask), cfg.loss_scope)?
                }
            }
            Phase::P1b => {
                let wmask = build_weather_mask(sample.days(), cfg.weather_mask_ratio, seed)?;
                loss_1b(&mut g, &p, &self.model, &sample.weather, &wmask)?
            }
            Phase::P2 => {
                let instances = build_instances(sample, c, (cfg.gap_min, Some(cfg.gap_max)), seed)?;
                if instances.is_empty() {
                    return Ok(None);
                }
                let inst = instances[rng.below(instances.len())];
                gap = Some(inst.gap);
                let plan = build_uniform_mask(c, grid, cfg.mask_ratio, seed)?;
                let input = prep.input(inst.context_indices());
                let target = prep.patch_slice(inst.target..inst.target + 1);
                loss_2(
                    &mut g,
                    &p,
                    &self.model,
                    &input,
                    sample.doys[inst.target],
                    target,
                    &plan,
                    cfg.loss_scope,
                    cfg.k_step_weight,
                )?
            }
        };
        let loss = g.value(out.loss).item() as f64;
        let grads = g.backward(out.loss)?.params(&p);
        Ok(Some((loss, grads, gap)))
    }

    /// Parameters, optimizer moments and run metadata at the current epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("format", "civsf-checkpoint");
        c.set("framework", self.kind);
        c.set("epoch", self.epoch);
        c.set("phase_boundaries", self.plan.boundaries());
        c.set("optimizer_step", self.optimizer.step_count());
        c.set("config_hash", self.config.hash());
        c.set("seed", self.config.seed);
        for (k, v) in self.config.entries() {
            c.set(&format!("config.{k}"), v);
        }
        for r in &self.log {
            c.set(&format!("log.{}", r.epoch), format!("{},{}", r.phase, r.loss));
        }
        c.push_store(&self.store);
        let (first, second) = self.optimizer.moments();
        for (prefix, moments) in [("opt.m", first), ("opt.v", second)] {
            for (i, (name, _)) in self.store.iter().enumerate() {
                if let Some(Some(t)) = moments.get(i) {
                    c.tensors.push((format!("{prefix}.{name}"), t.clone()));
                }
            }
        }
        c
    }
}

fn parse_meta<T: FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt.require(key)?;
    v.parse()
        .map_err(|_| Error::Data(format!("checkpoint metadata `{key}` has invalid value {v:?}")))
}

fn parse_log(ckpt: &Checkpoint) -> Result<Vec<EpochRecord>> {
    let kind: FrameworkKind = ckpt.require("framework")?.parse()?;
    let mut out = Vec::new();
    for (k, v) in &ckpt.meta {
        let Some(e) = k.strip_prefix("log.") else { continue };
        let bad = || Error::Data(format!("checkpoint log entry {k}:{v} is malformed"));
        let (phase, loss) = v.split_once(',').ok_or_else(bad)?;
        out.push(EpochRecord {
            epoch: e.parse().map_err(|_| bad())?,
            phase: phase.parse()?,
            framework: kind,
            loss: loss.parse().map_err(|_| bad())?,
            seconds: 0.0,
            gaps: Vec::new(),
        });
    }
    Ok(out)
}

/// Loads the model described by a checkpoint's metadata and parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Config, Model, ParamStore<f32>)> {
    let mut cfg = Config::default();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    let kind: FrameworkKind = ckpt.require("framework")?.parse()?;
    let store = ckpt.store(crate::model::is_model_param)?;
    let model = Model::attach(&store, &cfg.model_config(), kind)?;
    Ok((cfg, model, store))
}
