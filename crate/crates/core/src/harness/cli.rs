//! Command line entry points.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::datamodel::{load_container, save_container, split, Split};
use crate::error::{Error, Result};
use crate::forecast_decode::fold_series;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Config;
use crate::harness::metrics::mse;
use crate::harness::ppm::write_ppm;
use crate::harness::report::{bucketize, parse_bands, render_reference_tables, ReportTable};
use crate::masking::build_uniform_mask;
use crate::synthworld::{gen_dataset, world_sidecar};
use crate::training::evaluate::evaluate;
use crate::training::finetune::{finetune, Pretrained};
use crate::training::gradcheck::ci_vsf_gradcheck;
use crate::training::phases::Prepared;
use crate::training::{Trainer, CSV_HEADER};

#[derive(Debug, Parser)]
#[command(
    name = "civsf",
    version,
    about = "Causal multimodal pretraining on a synthetic satellite + weather world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["sm-mr", "mm-mr", "sm-vsf", "ci-vsf"])]
    pub framework: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its world-constants sidecar.
    GenData,
    /// Run the pretraining schedule of the chosen framework.
    Pretrain {
        /// Continue from the checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Train the head named by the `head` key on the frozen encoder.
    Finetune,
    /// Score a pretrained checkpoint on the test split.
    Evaluate,
    /// Forecast one image with the pretrained decoder and write PPMs.
    Forecast {
        /// Sample index; defaults to the first test sample.
        #[arg(long)]
        sample: Option<usize>,
        /// First context image.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Target image index; defaults to the image after the context.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Print a uniform mask and its row and column sums.
    InspectMask {
        #[arg(long)]
        timestamps: Option<usize>,
        #[arg(long)]
        locations: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Finite-difference check of the full CI-VSF objective.
    Gradcheck,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Defaults, then the config file, then `--set`, then the named flags.
pub fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(f) = &cli.framework {
        cfg.set("framework", f)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Pretrain { resume } => pretrain(&cfg, *resume),
        Command::Finetune => run_finetune(&cfg),
        Command::Evaluate => run_evaluate(&cfg),
        Command::Forecast { sample, start, target } => forecast(&cfg, *sample, *start, *target),
        Command::InspectMask {
            timestamps,
            locations,
            ratio,
        } => inspect_mask(&cfg, *timestamps, *locations, *ratio),
        Command::Gradcheck => gradcheck(&cfg),
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(cfg: &Config) -> Result<i32> {
    out_dir(cfg)?;
    let world = cfg.world_config();
    let samples = gen_dataset(cfg.samples, &world, cfg.seed)?;
    let path = cfg.data_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = save_container(&samples, &path)?;
    println!("wrote {} samples ({bytes} bytes) to {}", samples.len(), path.display());
    let sidecar = format!(
        "{}\n{}",
        cfg.provenance_line(),
        world_sidecar(&world, cfg.seed, cfg.samples)
    );
    write_text(&path.with_extension("world.txt"), &sidecar)?;
    Ok(0)
}

/// Loads the dataset named by the config and splits it by location.
pub fn load_data(cfg: &Config) -> Result<(Vec<Prepared>, Split)> {
    let path = cfg.data_path();
    if !path.exists() {
        return Err(Error::Data(format!(
            "no dataset at {}; run gen-data first",
            path.display()
        )));
    }
    let samples = load_container(&path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    if let Some(s) = samples.iter().find(|s| s.size != cfg.image_size) {
        return Err(Error::Data(format!(
            "dataset images are {} px but image_size = {}",
            s.size, cfg.image_size
        )));
    }
    let prepared = samples
        .into_iter()
        .map(|s| Prepared::new(s, cfg.patch))
        .collect::<Result<Vec<_>>>()?;
    let fractions = [cfg.split_train, cfg.split_val, 1.0 - cfg.split_train - cfg.split_val];
    let sp = split(prepared.len(), fractions, cfg.seed)?;
    Ok((prepared, sp))
}

fn load_checkpoint(cfg: &Config) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(Error::Data(format!(
            "no checkpoint at {}; run pretrain first",
            path.display()
        )));
    }
    Checkpoint::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn pretrain(cfg: &Config, resume: bool) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let (data, sp) = load_data(cfg)?;
    let train: Vec<Prepared> = sp.train.iter().map(|&i| data[i].clone()).collect();
    let mut trainer = if resume {
        Trainer::resume(cfg, &train, &load_checkpoint(cfg)?)?
    } else {
        Trainer::new(cfg, &train)?
    };
    let ckpt_path = cfg.checkpoint_path();
    let log_path = dir.join(format!("{}_pretrain.csv", cfg.framework));
    println!(
        "{} on {} training samples, phases {}",
        cfg.framework.label(),
        train.len(),
        trainer.plan.boundaries()
    );
    trainer.run(|t, rec| {
        println!(
            "epoch {:>3}  phase {:<2}  loss {:.6}  {:.2}s",
            rec.epoch, rec.phase, rec.loss, rec.seconds
        );
        let mut csv = format!("{}\n{CSV_HEADER}\n", cfg.provenance_line());
        for r in &t.log {
            csv += &r.csv_row();
            csv.push('\n');
        }
        fs::write(&log_path, csv)?;
        if cfg.checkpoint_every > 0 && (rec.epoch + 1) % cfg.checkpoint_every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    println!("wrote {}", log_path.display());
    println!("wrote {}", ckpt_path.display());
    Ok(0)
}

fn run_finetune(cfg: &Config) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let pre = Pretrained::from_checkpoint(&load_checkpoint(cfg)?)?;
    let (data, sp) = load_data(cfg)?;
    let report = finetune(&pre, &data, &sp, cfg)?;
    let name = format!("{}_{}", pre.kind(), report.head);
    let mut log = format!("{}\n{CSV_HEADER}\n", cfg.provenance_line());
    for (e, (loss, secs)) in report.losses.iter().zip(&report.seconds).enumerate() {
        let _ = writeln!(log, "{e},{},{},{loss:.6},{secs:.3}", report.head, pre.kind());
    }
    write_text(&dir.join(format!("{name}_epochs.csv")), &log)?;
    let mut table = ReportTable::new(
        &format!("{} head on {} encoder, test split", report.head, pre.kind().label()),
        &["row", "value", "instances"],
    );
    table.note = cfg.provenance();
    for ((label, v), n) in report.metrics.iter().zip(&report.counts) {
        table.push(vec![label.clone(), format!("{v:.6}"), n.to_string()]);
    }
    print!("{}", table.to_text());
    write_text(
        &dir.join(format!("{name}.csv")),
        &format!("{}\n{}", cfg.provenance_line(), table.to_csv()),
    )?;
    Ok(0)
}

fn run_evaluate(cfg: &Config) -> Result<i32> {
    let ckpt = load_checkpoint(cfg)?;
    let dir = out_dir(cfg)?;
    let pre = Pretrained::from_checkpoint(&ckpt)?;
    let (data, sp) = load_data(cfg)?;
    let table = evaluate(&pre, &data, &sp, cfg)?;
    let mut text = format!("{}\n{}", cfg.provenance_line(), table.to_text());
    let mut csv = format!("{}\n{}", cfg.provenance_line(), table.to_csv());
    print!("{}", table.to_text());
    for t in render_reference_tables() {
        text += "\n";
        text += &t.to_text();
        csv += "\n";
        csv += &t.to_csv();
    }
    write_text(&dir.join(format!("{}_evaluate.txt", pre.kind())), &text)?;
    write_text(&dir.join(format!("{}_evaluate.csv", pre.kind())), &csv)?;
    Ok(0)
}

fn forecast(cfg: &Config, sample: Option<usize>, start: usize, target: Option<usize>) -> Result<i32> {
    let pre = Pretrained::from_checkpoint(&load_checkpoint(cfg)?)?;
    let dir = out_dir(cfg)?;
    let (data, sp) = load_data(cfg)?;
    let idx = match sample {
        Some(i) => i,
        None => *sp.test.first().ok_or_else(|| Error::Data("empty test split".into()))?,
    };
    let prep = data
        .get(idx)
        .ok_or_else(|| Error::Data(format!("sample {idx} out of range ({} samples)", data.len())))?;
    let c = cfg.context;
    let target = target.unwrap_or(start + c);
    if target >= prep.sample.len() || target < start + c {
        return Err(Error::Data(format!(
            "target image {target} must follow the context {start}..{} within {} images",
            start + c,
            prep.sample.len()
        )));
    }
    let input = prep.input(start..start + c);
    let doy = prep.sample.doys[target];
    let patches = pre.forecast_image(&input, doy)?;
    let enc = &pre.model.config.encoder;
    let image = fold_series(&patches, enc.image_size, enc.patch)?.remove(0);
    let truth = prep.sample.image(target);
    let gap = doy - input.doys[c - 1];
    let err = mse(patches.data(), prep.patch_slice(target..target + 1))?;
    println!(
        "sample {idx}: images {start}..{} forecast image {target} (DOY {doy}, gap {gap} days, {}), MSE {err:.6}",
        start + c,
        bucketize(gap as i64)?.label()
    );
    let bands = parse_bands(&cfg.bands)?;
    let comment = cfg.provenance();
    let stem = format!("{}_s{idx}_t{target}", pre.kind());
    for (name, img) in [("forecast", image.as_slice()), ("truth", truth)] {
        let path = dir.join(format!("{stem}_{name}.ppm"));
        write_ppm(img, enc.image_size, bands, &comment, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn inspect_mask(cfg: &Config, t: Option<usize>, g: Option<usize>, r: Option<f64>) -> Result<i32> {
    let enc = cfg.model_config().encoder;
    let (t, g, r) = (
        t.unwrap_or(cfg.context),
        g.unwrap_or(enc.grid()),
        r.unwrap_or(cfg.mask_ratio),
    );
    let plan = build_uniform_mask(t, g, r, cfg.seed)?;
    println!("{}", cfg.provenance_line());
    println!("T = {t}, G = {g}, r = {r}");
    print!("{}", plan.render());
    Ok(0)
}

fn gradcheck(cfg: &Config) -> Result<i32> {
    println!("{}", cfg.provenance_line());
    let mut worst = 0.0f64;
    for k in 0..cfg.gradcheck_seeds as u64 {
        let r = ci_vsf_gradcheck(cfg.seed + k)?;
        println!(
            "seed {:>3}: max relative error {:.3e} over {} directional checks (worst in {})",
            r.seed, r.max_rel_error, r.checks, r.worst
        );
        worst = worst.max(r.max_rel_error);
    }
    let ok = worst <= cfg.gradcheck_threshold;
    println!(
        "{}: max relative error {worst:.3e}, threshold {:.1e}",
        if ok { "PASS" } else { "FAIL" },
        cfg.gradcheck_threshold
    );
    Ok(if ok { 0 } else { 4 })
}
