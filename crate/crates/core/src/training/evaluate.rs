//! Test-split scores of a pretrained checkpoint, before any fine-tuning.

use crate::datamodel::Split;
use crate::error::Result;
use crate::forecast_decode::{reconstruction_loss, LossScope};
use crate::harness::config::Config;
use crate::harness::metrics::mse;
use crate::harness::report::ReportTable;
use crate::masking::build_uniform_mask;
use crate::model::{MaskMode, Model};
use crate::numerics::{Graph, RngStream, Tensor};

use super::finetune::{bucket_rows, forecast_instances, Pretrained};
use super::phases::Prepared;

/// Reconstruction error of masked context windows (full image and visible
/// patches only) and, for forecasting frameworks, the error of the
/// pretrained decoder's forecast per horizon bucket.
pub fn evaluate(pre: &Pretrained, data: &[Prepared], split: &Split, cfg: &Config) -> Result<ReportTable> {
    let c = cfg.context;
    let grid = pre.model.grid();
    let pd = pre.model.config.encoder.patch_dim();
    let mut table = ReportTable::new(
        &format!("{} pretrained checkpoint, test split", pre.kind().label()),
        &["metric", "value", "instances"],
    );
    let (mut full, mut visible, mut n) = (0.0, 0.0, 0usize);
    for &i in &split.test {
        let prep = &data[i];
        if prep.sample.len() < c {
            continue;
        }
        let plan = build_uniform_mask(
            c,
            grid,
            cfg.mask_ratio,
            RngStream::derive_seed(cfg.seed, &format!("eval/{i}")),
        )?;
        let input = prep.input(0..c);
        let mut g = Graph::<f32>::new();
        let p = g.bind(&pre.store, |_| false);
        let days = Model::days_through(input.doys, input.start_doy);
        let enc = pre
            .model
            .encode(&mut g, &p, &input, &plan, MaskMode::Embeddings, None, days)?;
        let rows = enc.layout.grid_rows();
        let decoded = pre.model.decoder.decode(&mut g, &p, enc.emb, &rows, c * grid)?;
        let x = g.constant(Tensor::from_f32(&[c * grid, pd], input.patches)?);
        let lf = reconstruction_loss(&mut g, decoded, x, &rows, LossScope::Full)?;
        let lv = reconstruction_loss(&mut g, decoded, x, &rows, LossScope::Unmasked)?;
        full += g.value(lf).item() as f64;
        visible += g.value(lv).item() as f64;
        n += 1;
    }
    let cell = |v: f64| format!("{v:.6}");
    if n > 0 {
        table.push(vec![
            "reconstruction MSE, full image".into(),
            cell(full / n as f64),
            n.to_string(),
        ]);
        table.push(vec![
            "reconstruction MSE, visible patches".into(),
            cell(visible / n as f64),
            n.to_string(),
        ]);
    }
    if pre.kind().forecasts() {
        let mut errors = Vec::new();
        for (i, inst) in forecast_instances(data, &split.test, cfg, 0, "evaluate")? {
            let prep = &data[i];
            let input = prep.input(inst.context_indices());
            let img = pre.forecast_image(&input, prep.sample.doys[inst.target])?;
            errors.push((
                inst.gap,
                mse(img.data(), prep.patch_slice(inst.target..inst.target + 1))?,
            ));
        }
        let (rows, counts) = bucket_rows(&errors);
        for ((label, v), k) in rows.into_iter().zip(counts) {
            table.push(vec![format!("forecast MSE, {label}"), cell(v), k.to_string()]);
        }
    }
    table.note = cfg.provenance();
    Ok(table)
}
