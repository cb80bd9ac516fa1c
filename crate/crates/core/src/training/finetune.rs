//! Fine-tuning heads on a frozen pretrained encoder. Encoder outputs are
//! computed once per instance and cached; only head parameters train.

use std::fmt;
use std::str::FromStr;

use crate::datamodel::{build_instances, Split, TrainingInstance, BANDS};
use crate::error::{Error, Result};
use crate::forecast_decode::Decoder;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Config;
use crate::harness::metrics::{macro_f1, mae, mse};
use crate::harness::report::{bucketize, Bucket};
use crate::masking::MaskPlan;
use crate::model::{FrameworkKind, MaskMode, Model, SeriesInput};
use crate::numerics::nn::{Linear, ParamId, ParamStore};
use crate::numerics::{Bound, Graph, NodeId, OptimizerKind, OptimizerState, RngStream, Tensor};
use crate::synthworld::region_of;
use crate::training::phases::Prepared;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    SmForecast,
    SmEstimate,
    CropMap,
    MissingImage,
    FutureImage,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::SmForecast,
        HeadKind::SmEstimate,
        HeadKind::CropMap,
        HeadKind::MissingImage,
        HeadKind::FutureImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::SmForecast => "sm-forecast",
            HeadKind::SmEstimate => "sm-estimate",
            HeadKind::CropMap => "crop",
            HeadKind::MissingImage => "missing",
            HeadKind::FutureImage => "future-image",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            HeadKind::SmForecast => 50,
            HeadKind::SmEstimate => 70,
            HeadKind::CropMap => 40,
            HeadKind::MissingImage => 30,
            HeadKind::FutureImage => 10,
        }
    }

    /// Heads that extrapolate in time need a forecasting encoder.
    pub fn needs_forecaster(self) -> bool {
        matches!(self, HeadKind::SmForecast | HeadKind::FutureImage)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL.into_iter().find(|h| h.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown head {s:?}; expected sm-forecast, sm-estimate, crop, missing or future-image"
            ))
        })
    }
}

/// A frozen pretrained model.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Pretrained {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (config, model, store) = super::load_model(ckpt)?;
        Ok(Pretrained { config, model, store })
    }

    pub fn kind(&self) -> FrameworkKind {
        self.model.kind
    }

    pub fn hidden(&self) -> usize {
        self.model.config.hidden()
    }

    /// Unmasked embedding series `[T·G, D]` of images `range`.
    pub fn embed(&self, prep: &Prepared, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
        self.embed_input(&prep.input(range))
    }

    pub fn embed_input(&self, input: &SeriesInput<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.store, |_| false);
        let plan = MaskPlan::none(input.doys.len(), self.model.grid());
        let days = Model::days_through(input.doys, input.start_doy);
        let e = self
            .model
            .encode(&mut g, &p, input, &plan, MaskMode::Pixels, None, days)?;
        Ok(g.value(e.emb).clone())
    }

    /// The forecaster's tokens `[G, D]` carrying the last context image to
    /// `target_doy`, and the per-target addend `[1, D]` it used.
    pub fn forecast(&self, input: &SeriesInput<'_>, target_doy: u16) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (Some(fc), Some(delta)) = (&self.model.forecaster, &self.model.delta) else {
            return Err(Error::Compatibility(format!(
                "{} checkpoints cannot forecast; use sm-vsf or ci-vsf",
                self.kind()
            )));
        };
        let last = *input.doys.last().ok_or_else(|| Error::Data("empty context".into()))?;
        if target_doy <= last {
            return Err(Error::Domain(format!("target DOY {target_doy} not after {last}")));
        }
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.store, |_| false);
        let c = input.doys.len();
        let grid = self.model.grid();
        let plan = MaskPlan::none(c, grid);
        let days = (target_doy - input.start_doy) as usize + 1;
        let e = self
            .model
            .encode(&mut g, &p, input, &plan, MaskMode::Pixels, None, days)?;
        let rows: Vec<usize> = ((c - 1) * grid..c * grid).collect();
        let src = g.gather_rows(e.emb, &rows)?;
        let w = self
            .model
            .matched_weather(&mut g, e.weather, &[target_doy], input.start_doy)?;
        let doy = self.model.doy.embed(&mut g, &p, &[target_doy])?;
        let dl = delta.embed(&mut g, &p, &[(target_doy - last) as u32])?;
        let tokens = fc.forecast(&mut g, &p, src, w, doy, dl, &vec![0; grid])?;
        let mut addend = g.add(doy, dl)?;
        if let Some(w) = w {
            addend = g.add(addend, w)?;
        }
        Ok((g.value(tokens).clone(), g.value(addend).clone()))
    }

    /// The pretrained decoder's image for `target_doy`, as patch rows `[G, 6·p²]`.
    pub fn forecast_image(&self, input: &SeriesInput<'_>, target_doy: u16) -> Result<Tensor<f32>> {
        let (tokens, _) = self.forecast(input, target_doy)?;
        let grid = self.model.grid();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.store, |_| false);
        let x = g.constant(tokens);
        let rows: Vec<usize> = (0..grid).collect();
        let out = self.model.decoder.decode(&mut g, &p, x, &rows, grid)?;
        Ok(g.value(out).clone())
    }
}

/// Per-row mean of a `[T·G, D]` series: `[T, D]`.
fn pool(emb: &Tensor<f32>, grid: usize) -> Tensor<f32> {
    let d = emb.cols();
    let t = emb.rows() / grid;
    let mut out = Tensor::zeros(&[t, d]);
    for (i, row) in emb.data().chunks(d).enumerate() {
        for (o, &v) in out.data_mut()[(i / grid) * d..(i / grid + 1) * d].iter_mut().zip(row) {
            *o += v / grid as f32;
        }
    }
    out
}

/// Outcome of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub head: HeadKind,
    pub framework: FrameworkKind,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Wall time per epoch.
    pub seconds: Vec<f64>,
    /// `(row label, value)` pairs: buckets, protocols or corruption levels.
    pub metrics: Vec<(String, f64)>,
    /// Instances evaluated per row, aligned with `metrics`.
    pub counts: Vec<usize>,
}

impl FinetuneReport {
    pub fn metric(&self, label: &str) -> Option<f64> {
        self.metrics.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }
}

/// Trains head parameters over cached items with AdamW and returns the
/// mean loss and wall time of each epoch.
fn train_head<F>(
    store: &mut ParamStore<f32>,
    items: &[F],
    epochs: usize,
    cfg: &Config,
    label: &str,
    loss: impl Fn(&mut Graph<f32>, &Bound, &F) -> Result<NodeId>,
) -> Result<Vec<(f64, f64)>> {
    if items.is_empty() {
        return Err(Error::Data(format!("no training instances for the {label} head")));
    }
    let mut opt = OptimizerState::new(OptimizerKind::AdamW, cfg.ft_lr, cfg.ft_weight_decay);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let started = std::time::Instant::now();
        let order = RngStream::new(cfg.seed, &format!("{label}/order/{epoch}")).permutation(items.len());
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
        let (mut total, mut in_batch) = (0.0, 0usize);
        let flush = |acc: &mut Vec<Option<Tensor<f32>>>,
                     n: usize,
                     store: &mut ParamStore<f32>,
                     opt: &mut OptimizerState<f32>| {
            let grads: Vec<_> = acc
                .iter_mut()
                .map(|a| {
                    a.take().map(|mut t| {
                        t.scale(1.0 / n as f32);
                        t
                    })
                })
                .collect();
            opt.step(store, &grads)
        };
        for &i in &order {
            let mut g = Graph::new();
            let p = g.bind(store, |_| true);
            let l = loss(&mut g, &p, &items[i])?;
            let v = g.value(l).item() as f64;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    phase: format!("finetune {label}"),
                    epoch,
                });
            }
            total += v;
            for (a, gr) in acc.iter_mut().zip(g.backward(l)?.params(&p)) {
                if let Some(gr) = gr {
                    match a {
                        Some(a) => a.add_assign(&gr),
                        None => *a = Some(gr),
                    }
                }
            }
            in_batch += 1;
            if in_batch == cfg.batch_size {
                flush(&mut acc, in_batch, store, &mut opt)?;
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            flush(&mut acc, in_batch, store, &mut opt)?;
        }
        losses.push((total / items.len() as f64, started.elapsed().as_secs_f64()));
    }
    Ok(losses)
}

/// Evaluates a head on one item without tracking gradients.
fn infer<F>(
    store: &ParamStore<f32>,
    item: &F,
    forward: &impl Fn(&mut Graph<f32>, &Bound, &F) -> Result<NodeId>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = g.bind(store, |_| false);
    let out = forward(&mut g, &p, item)?;
    Ok(g.value(out).clone())
}

/// Forecasting instances for the samples `indices`: `per_sample` random ones
/// each, or every window when `per_sample` is 0.
pub(crate) fn forecast_instances(
    data: &[Prepared],
    indices: &[usize],
    cfg: &Config,
    per_sample: usize,
    label: &str,
) -> Result<Vec<(usize, TrainingInstance)>> {
    let mut out = Vec::new();
    for &i in indices {
        let seed = RngStream::derive_seed(cfg.seed, &format!("{label}/instances/{i}"));
        let all = build_instances(&data[i].sample, cfg.context, (cfg.gap_min, Some(cfg.gap_max)), seed)?;
        if all.is_empty() {
            continue;
        }
        if per_sample == 0 {
            out.extend(all.into_iter().map(|inst| (i, inst)));
        } else {
            let mut rng = RngStream::new(seed, "pick");
            for _ in 0..per_sample {
                out.push((i, all[rng.below(all.len())]));
            }
        }
    }
    Ok(out)
}

/// Bucketed mean of per-instance errors, rows in bucket order.
pub(crate) fn bucket_rows(errors: &[(u32, f64)]) -> (Vec<(String, f64)>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for b in Bucket::ALL {
        let xs: Vec<f64> = errors
            .iter()
            .filter(|(gap, _)| bucketize(*gap as i64).map(|x| x == b).unwrap_or(false))
            .map(|&(_, e)| e)
            .collect();
        let mean = if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        rows.push((b.label().to_string(), mean));
        counts.push(xs.len());
    }
    (rows, counts)
}

/// Runs the head named by `cfg.head` and evaluates it on the test split.
pub fn finetune(pre: &Pretrained, data: &[Prepared], split: &Split, cfg: &Config) -> Result<FinetuneReport> {
    let head: HeadKind = cfg.head.parse()?;
    if head.needs_forecaster() && !pre.kind().forecasts() {
        return Err(Error::Compatibility(format!(
            "the {head} head needs a forecasting encoder; {} checkpoints do not forecast",
            pre.kind()
        )));
    }
    let epochs = if cfg.ft_epochs == 0 {
        head.default_epochs()
    } else {
        cfg.ft_epochs
    };
    let (losses, metrics, counts) = match head {
        HeadKind::SmForecast => sm_forecast(pre, data, split, cfg, epochs)?,
        HeadKind::SmEstimate => sm_estimate(pre, data, split, cfg, epochs)?,
        HeadKind::CropMap => crop_map(pre, data, split, cfg, epochs)?,
        HeadKind::MissingImage => missing_image(pre, data, split, cfg, epochs)?,
        HeadKind::FutureImage => future_image(pre, data, split, cfg, epochs)?,
    };
    let (losses, seconds) = losses.into_iter().unzip();
    Ok(FinetuneReport {
        head,
        framework: pre.kind(),
        losses,
        seconds,
        metrics,
        counts,
    })
}

type HeadOutcome = (Vec<(f64, f64)>, Vec<(String, f64)>, Vec<usize>);

fn soil_of(prep: &Prepared) -> Result<&[f32]> {
    prep.sample
        .soil
        .as_deref()
        .ok_or_else(|| Error::Data("sample has no soil moisture series".into()))
}

/// Linear-ReLU stack ending in one output.
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(store: &mut ParamStore<f32>, rng: &mut RngStream, name: &str, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    fn forward(&self, g: &mut Graph<f32>, p: &Bound, mut x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

struct SoilItem {
    pooled: Tensor<f32>,
    addend: Tensor<f32>,
    past: Tensor<f32>,
    target: f32,
    gap: u32,
}

fn sm_forecast(pre: &Pretrained, data: &[Prepared], split: &Split, cfg: &Config, epochs: usize) -> Result<HeadOutcome> {
    let d = pre.hidden();
    let grid = pre.model.grid();
    let build = |set: &[usize], per: usize| -> Result<Vec<SoilItem>> {
        forecast_instances(data, set, cfg, per, "sm-forecast")?
            .into_iter()
            .map(|(i, inst)| {
                let prep = &data[i];
                let soil = soil_of(prep)?;
                let input = prep.input(inst.context_indices());
                let emb = pre.embed_input(&input)?;
                let (_, addend) = pre.forecast(&input, prep.sample.doys[inst.target])?;
                let past = Tensor::from_f32(&[cfg.context, 1], &soil[inst.context_indices()])?;
                Ok(SoilItem {
                    pooled: pool(&emb, grid),
                    addend,
                    past,
                    target: soil[inst.target],
                    gap: inst.gap,
                })
            })
            .collect()
    };
    let train = build(&split.train, cfg.ft_instances)?;
    let test = build(&split.test, 0)?;
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(cfg.seed, "head/sm-forecast");
    let input = Linear::new(&mut store, &mut rng, "head.soil.input", 1, 4 * d)?;
    let recurrent = store.register(
        "head.soil.recurrent",
        crate::numerics::nn::xavier(&mut rng, &[d, 4 * d], d, 4 * d),
    )?;
    let mlp = Mlp::new(&mut store, &mut rng, "head.mlp", &[d, d, d / 2, 1])?;
    let forward = |g: &mut Graph<f32>, p: &Bound, it: &SoilItem| -> Result<NodeId> {
        let x = g.constant(it.past.clone());
        let xw = input.forward(g, p, x)?;
        let h = g.lstm(xw, p.get(recurrent))?;
        let pooled = g.constant(it.pooled.clone());
        let fused = g.add(h, pooled)?;
        let last = g.gather_rows(fused, &[cfg.context - 1])?;
        let addend = g.constant(it.addend.clone());
        let z = g.add(last, addend)?;
        mlp.forward(g, p, z)
    };
    let losses = train_head(&mut store, &train, epochs, cfg, "sm-forecast", |g, p, it| {
        let y = forward(g, p, it)?;
        let t = g.constant(Tensor::new(vec![1, 1], vec![it.target])?);
        g.mae(y, t)
    })?;
    let mut errors = Vec::new();
    for it in &test {
        let y = infer(&store, it, &forward)?;
        errors.push((it.gap, mae(y.data(), &[it.target])?));
    }
    let (rows, counts) = bucket_rows(&errors);
    Ok((losses, rows, counts))
}

struct EstimateItem {
    pooled: Tensor<f32>,
    soil: Tensor<f32>,
}

fn sm_estimate(pre: &Pretrained, data: &[Prepared], split: &Split, cfg: &Config, epochs: usize) -> Result<HeadOutcome> {
    let grid = pre.model.grid();
    let d = pre.hidden();
    let c = cfg.context;
    let windows = |i: usize, count: usize| -> Result<Vec<EstimateItem>> {
        let prep = &data[i];
        let soil = soil_of(prep)?;
        let t = prep.sample.len();
        if t < c {
            return Ok(Vec::new());
        }
        let mut rng = RngStream::new(RngStream::derive_seed(cfg.seed, &format!("sm-estimate/{i}")), "windows");
        (0..count)
            .map(|_| {
                let s = rng.below(t - c + 1);
                Ok(EstimateItem {
                    pooled: pool(&pre.embed(prep, s..s + c)?, grid),
                    soil: Tensor::from_f32(&[c, 1], &soil[s..s + c])?,
                })
            })
            .collect()
    };
    let per = cfg.ft_instances.max(1);
    let mut train_items = Vec::new();
    let mut train_regions = Vec::new();
    for &i in &split.train {
        for it in windows(i, per)? {
            train_items.push(it);
            train_regions.push(region_of(i, cfg.regions));
        }
    }
    let mut test_items = Vec::new();
    let mut test_regions = Vec::new();
    for &i in &split.test {
        for it in windows(i, per)? {
            test_items.push(it);
            test_regions.push(region_of(i, cfg.regions));
        }
    }
    let fit = |train: &[&EstimateItem], test: &[&EstimateItem], label: &str| -> Result<(Vec<(f64, f64)>, f64)> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(cfg.seed, &format!("head/{label}"));
        let mlp = Mlp::new(&mut store, &mut rng, "head.mlp", &[d, d, d / 2, 1])?;
        let forward = |g: &mut Graph<f32>, p: &Bound, it: &&EstimateItem| -> Result<NodeId> {
            let x = g.constant(it.pooled.clone());
            mlp.forward(g, p, x)
        };
        let losses = train_head(&mut store, train, epochs, cfg, label, |g, p, it| {
            let y = forward(g, p, it)?;
            let t = g.constant(it.soil.clone());
            g.mae(y, t)
        })?;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for it in test {
            pred.extend(infer(&store, it, &forward)?.into_data());
            truth.extend_from_slice(it.soil.data());
        }
        Ok((losses, mae(&pred, &truth)?))
    };
    let all_train: Vec<&EstimateItem> = train_items.iter().collect();
    let all_test: Vec<&EstimateItem> = test_items.iter().collect();
    let (losses, in_region) = fit(&all_train, &all_test, "sm-estimate")?;
    let mut rows = vec![("All".to_string(), in_region)];
    let mut counts = vec![all_test.len()];
    if cfg.protocol == "cross-region" {
        for r in 0..cfg.regions {
            let tr: Vec<&EstimateItem> = train_items
                .iter()
                .zip(&train_regions)
                .filter(|(_, &g)| g != r)
                .map(|(x, _)| x)
                .collect();
            let te: Vec<&EstimateItem> = test_items
                .iter()
                .zip(&test_regions)
                .filter(|(_, &g)| g == r)
                .map(|(x, _)| x)
                .collect();
            if te.is_empty() || tr.is_empty() {
                continue;
            }
            let (_, m) = fit(&tr, &te, &format!("sm-estimate/region{r}"))?;
            rows.push((format!("region {r}"), m));
            counts.push(te.len());
        }
    } else if cfg.protocol != "in-region" {
        return Err(Error::Config(format!(
            "protocol must be in-region or cross-region, got {:?}",
            cfg.protocol
        )));
    }
    Ok((losses, rows, counts))
}

/// Indices of `n` images spread evenly over a series of `t`.
pub fn even_indices(t: usize, n: usize) -> Result<Vec<usize>> {
    if t < n || n == 0 {
        return Err(Error::Data(format!(
            "series of {t} images cannot supply {n} timestamps"
        )));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|i| (i * (t - 1) + (n - 1) / 2) / (n - 1)).collect())
}

/// Timestamp-attention crop head.
pub struct CropHead {
    score: Linear,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    out: Linear,
    pub hidden: usize,
    pub side: usize,
    pub classes: usize,
}

impl CropHead {
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut RngStream,
        hidden: usize,
        side: usize,
        classes: usize,
    ) -> Result<Self> {
        if hidden < 4 {
            return Err(Error::Config(format!("crop head needs hidden size ≥ 4, got {hidden}")));
        }
        let (c1, c2) = (hidden / 2, hidden / 4);
        let mut conv = |name: &str, cin: usize, cout: usize| -> Result<(ParamId, ParamId)> {
            let w = store.register(
                &format!("{name}.w"),
                crate::numerics::nn::xavier(rng, &[cout, cin * 9], cin * 9, cout),
            )?;
            let b = store.register(&format!("{name}.b"), Tensor::zeros(&[cout]))?;
            Ok((w, b))
        };
        let conv1 = conv("head.crop.conv1", hidden, c1)?;
        let conv2 = conv("head.crop.conv2", c1, c2)?;
        Ok(CropHead {
            score: Linear::new(store, rng, "head.crop.score", hidden, 1)?,
            conv1,
            conv2,
            out: Linear::new(store, rng, "head.crop.out", c2, classes * 4)?,
            hidden,
            side,
            classes,
        })
    }

    /// Softmax weights over timestamps, `[1, T]`.
    pub fn attention(&self, g: &mut Graph<f32>, p: &Bound, emb: NodeId, grid: usize) -> Result<NodeId> {
        let pooled = g.group_mean(emb, grid)?;
        let s = self.score.forward(g, p, pooled)?;
        let s = g.transpose(s)?;
        Ok(g.softmax_rows(s))
    }

    /// Per-pixel logits `[(8·side)², classes]` in row-major pixel order.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, emb: NodeId) -> Result<NodeId> {
        let grid = self.side * self.side;
        let d = self.hidden;
        let t = g.shape(emb)[0] / grid;
        let alpha = self.attention(g, p, emb, grid)?;
        let flat = g.reshape(emb, &[t, grid * d])?;
        let agg = g.matmul(alpha, flat)?;
        let agg = g.reshape(agg, &[grid, d])?;
        let x = g.transpose(agg)?;
        let (mut hgt, mut wid) = (self.side, self.side);
        let mut x = x;
        for (w, b) in [self.conv1, self.conv2] {
            x = g.upsample2x(x, hgt, wid)?;
            hgt *= 2;
            wid *= 2;
            x = g.conv3x3(x, p.get(w), p.get(b), hgt, wid)?;
            x = g.relu(x);
        }
        let x = g.transpose(x)?;
        let logits = self.out.forward(g, p, x)?;
        // Each cell of the upsampled grid emits a 2×2 block of pixels.
        let k = self.classes;
        let full = 2 * wid;
        let mut idx = Vec::with_capacity(full * full * k);
        for y in 0..full {
            for xp in 0..full {
                let cell = (y / 2) * wid + xp / 2;
                let sub = (y % 2) * 2 + xp % 2;
                for c in 0..k {
                    idx.push(cell * 4 * k + sub * k + c);
                }
            }
        }
        g.gather_flat(logits, idx, &[full * full, k])
    }
}

struct CropItem {
    emb: Tensor<f32>,
    labels: Vec<usize>,
}

fn crop_map(pre: &Pretrained, data: &[Prepared], split: &Split, cfg: &Config, epochs: usize) -> Result<HeadOutcome> {
    let side = pre.model.side();
    let size = pre.model.config.encoder.image_size;
    if 8 * side != size {
        return Err(Error::Config(format!(
            "crop head output side {} does not match image side {size}",
            8 * side
        )));
    }
    let build = |set: &[usize]| -> Result<Vec<CropItem>> {
        set.iter()
            .map(|&i| {
                let prep = &data[i];
                let crops = prep
                    .sample
                    .crops
                    .as_ref()
                    .ok_or_else(|| Error::Data("sample has no crop grid".into()))?;
                let idx = even_indices(prep.sample.len(), cfg.crop_timestamps)?;
                let doys: Vec<u16> = idx.iter().map(|&t| prep.sample.doys[t]).collect();
                let patches: Vec<f32> = idx.iter().flat_map(|&t| prep.patch_slice(t..t + 1).to_vec()).collect();
                let input = SeriesInput {
                    patches: &patches,
                    doys: &doys,
                    weather: &prep.sample.weather,
                    start_doy: prep.sample.start_doy,
                };
                Ok(CropItem {
                    emb: pre.embed_input(&input)?,
                    labels: crops.iter().map(|&c| c as usize).collect(),
                })
            })
            .collect()
    };
    let train = build(&split.train)?;
    let test = build(&split.test)?;
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(cfg.seed, "head/crop");
    let head = CropHead::new(&mut store, &mut rng, pre.hidden(), side, cfg.crop_classes)?;
    let forward = |g: &mut Graph<f32>, p: &Bound, it: &CropItem| -> Result<NodeId> {
        let e = g.constant(it.emb.clone());
        head.forward(g, p, e)
    };
    let losses = train_head(&mut store, &train, epochs, cfg, "crop", |g, p, it| {
        let logits = forward(g, p, it)?;
        g.cross_entropy(logits, &it.labels)
    })?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for it in &test {
        let logits = infer(&store, it, &forward)?;
        for (row, &t) in logits.data().chunks(cfg.crop_classes).zip(&it.labels) {
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred.push(best as u8);
            truth.push(t as u8);
        }
    }
    let f1 = macro_f1(&pred, &truth, cfg.crop_classes)?;
    Ok((losses, vec![("Average".into(), f1)], vec![test.len()]))
}

/// Zeroes a rectangle covering `pct` percent of a `6 × H × H` image.
/// Returns the number of pixels blanked per band.
pub fn blank_rectangle(image: &mut [f32], size: usize, pct: f64, rng: &mut RngStream) -> usize {
    let area = pct / 100.0 * (size * size) as f64;
    if area <= 0.0 {
        return 0;
    }
    let w = (area.sqrt().round() as usize).clamp(1, size);
    let h = ((area / w as f64).round() as usize).clamp(1, size);
    let x0 = rng.below(size - w + 1);
    let y0 = rng.below(size - h + 1);
    for b in 0..BANDS {
        for y in y0..y0 + h {
            let row = b * size * size + y * size;
            image[row + x0..row + x0 + w].fill(0.0);
        }
    }
    w * h
}

struct MissingItem {
    emb: Tensor<f32>,
    /// Clean patch rows of the corrupted timestamps.
    truth: Tensor<f32>,
    rows: Vec<usize>,
}

fn missing_image(
    pre: &Pretrained,
    data: &[Prepared],
    split: &Split,
    cfg: &Config,
    epochs: usize,
) -> Result<HeadOutcome> {
    let c = cfg.context;
    let grid = pre.model.grid();
    let enc = &pre.model.config.encoder;
    let (size, patch, pd) = (enc.image_size, enc.patch, enc.patch_dim());
    let build = |set: &[usize], per: usize, label: &str| -> Result<Vec<MissingItem>> {
        let mut out = Vec::new();
        for &i in set {
            let prep = &data[i];
            let t = prep.sample.len();
            if t < c {
                continue;
            }
            let mut rng = RngStream::new(RngStream::derive_seed(cfg.seed, &format!("{label}/{i}")), "corrupt");
            for _ in 0..per {
                let s = rng.below(t - c + 1);
                let mut pick = rng.permutation(c);
                pick.truncate(2.min(c));
                pick.sort_unstable();
                let mut images =
                    prep.sample.images[s * prep.sample.image_len()..(s + c) * prep.sample.image_len()].to_vec();
                let n = prep.sample.image_len();
                for &k in &pick {
                    blank_rectangle(&mut images[k * n..(k + 1) * n], size, cfg.corruption, &mut rng);
                }
                let patches = crate::encoders::patchify_series(&images, size, patch)?;
                let input = SeriesInput {
                    patches: &patches,
                    doys: &prep.sample.doys[s..s + c],
                    weather: &prep.sample.weather,
                    start_doy: prep.sample.start_doy,
                };
                let rows: Vec<usize> = pick.iter().flat_map(|&k| k * grid..(k + 1) * grid).collect();
                let clean = prep.patch_slice(s..s + c);
                let truth: Vec<f32> = rows
                    .iter()
                    .flat_map(|&r| clean[r * pd..(r + 1) * pd].to_vec())
                    .collect();
                out.push(MissingItem {
                    emb: pre.embed_input(&input)?,
                    truth: Tensor::from_f32(&[rows.len(), pd], &truth)?,
                    rows,
                });
            }
        }
        Ok(out)
    };
    let per = cfg.ft_instances.max(1);
    let train = build(&split.train, per, "missing/train")?;
    let test = build(&split.test, per, "missing/test")?;
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut RngStream::new(cfg.seed, "head/missing"),
        "head.decoder",
        pre.hidden(),
        pd,
    )?;
    let forward = |g: &mut Graph<f32>, p: &Bound, it: &MissingItem| -> Result<NodeId> {
        let e = g.constant(it.emb.clone());
        let sel = g.gather_rows(e, &it.rows)?;
        let all: Vec<usize> = (0..it.rows.len()).collect();
        dec.decode(g, p, sel, &all, it.rows.len())
    };
    let losses = train_head(&mut store, &train, epochs, cfg, "missing", |g, p, it| {
        let y = forward(g, p, it)?;
        let t = g.constant(it.truth.clone());
        g.mse(y, t, None)
    })?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for it in &test {
        pred.extend(infer(&store, it, &forward)?.into_data());
        truth.extend_from_slice(it.truth.data());
    }
    let label = format!("{}%", cfg.corruption);
    Ok((losses, vec![(label, mse(&pred, &truth)?)], vec![test.len()]))
}

struct FutureItem {
    tokens: Tensor<f32>,
    truth: Tensor<f32>,
    gap: u32,
}

fn future_image(
    pre: &Pretrained,
    data: &[Prepared],
    split: &Split,
    cfg: &Config,
    epochs: usize,
) -> Result<HeadOutcome> {
    let pd = pre.model.config.encoder.patch_dim();
    let grid = pre.model.grid();
    let build = |set: &[usize], per: usize| -> Result<Vec<FutureItem>> {
        forecast_instances(data, set, cfg, per, "future-image")?
            .into_iter()
            .map(|(i, inst)| {
                let prep = &data[i];
                let input = prep.input(inst.context_indices());
                let (tokens, _) = pre.forecast(&input, prep.sample.doys[inst.target])?;
                Ok(FutureItem {
                    tokens,
                    truth: Tensor::from_f32(&[grid, pd], prep.patch_slice(inst.target..inst.target + 1))?,
                    gap: inst.gap,
                })
            })
            .collect()
    };
    let train = build(&split.train, cfg.ft_instances)?;
    let test = build(&split.test, 0)?;
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut RngStream::new(cfg.seed, "head/future"),
        "head.decoder",
        pre.hidden(),
        pd,
    )?;
    let rows: Vec<usize> = (0..grid).collect();
    let forward = |g: &mut Graph<f32>, p: &Bound, it: &FutureItem| -> Result<NodeId> {
        let x = g.constant(it.tokens.clone());
        dec.decode(g, p, x, &rows, grid)
    };
    let losses = train_head(&mut store, &train, epochs, cfg, "future-image", |g, p, it| {
        let y = forward(g, p, it)?;
        let t = g.constant(it.truth.clone());
        g.mse(y, t, None)
    })?;
    let mut errors = Vec::new();
    for it in &test {
        let y = infer(&store, it, &forward)?;
        errors.push((it.gap, mse(y.data(), it.truth.data())?));
    }
    let (rows, counts) = bucket_rows(&errors);
    Ok((losses, rows, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_names_roundtrip() {
        for h in HeadKind::ALL {
            assert_eq!(h.as_str().parse::<HeadKind>().unwrap(), h);
        }
        assert!("segment".parse::<HeadKind>().is_err());
    }

    #[test]
    fn even_spacing() {
        assert_eq!(even_indices(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        let idx = even_indices(40, 10).unwrap();
        assert_eq!((idx[0], idx[9]), (0, 39));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(even_indices(5, 10).is_err());
    }

    #[test]
    fn blanked_area_within_one_patch() {
        let mut rng = RngStream::new(1, "blank");
        for pct in [0.0, 10.0, 50.0, 70.0, 90.0, 100.0] {
            for _ in 0..20 {
                let mut img = vec![1.0; BANDS * 32 * 32];
                let n = blank_rectangle(&mut img, 32, pct, &mut rng);
                let zeros = img.iter().filter(|&&v| v == 0.0).count();
                assert_eq!(zeros, n * BANDS);
                assert!((n as f64 - pct / 100.0 * 1024.0).abs() <= 64.0, "{pct}: {n}");
            }
        }
    }

    #[test]
    fn pooling_means_over_patches() {
        let t = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(pool(&t, 2).data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn crop_attention_sums_to_one_and_shapes() {
        let mut store = ParamStore::new();
        let head = CropHead::new(&mut store, &mut RngStream::new(1, "crop"), 8, 4, 3).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store, |_| true);
        let mut rng = RngStream::new(2, "emb");
        let e = g.constant(Tensor::from_fn(&[10 * 16, 8], |_| rng.normal() as f32));
        let a = head.attention(&mut g, &p, e, 16).unwrap();
        let s: f32 = g.value(a).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        let logits = head.forward(&mut g, &p, e).unwrap();
        assert_eq!(g.shape(logits), &[32 * 32, 3]);
    }
}
