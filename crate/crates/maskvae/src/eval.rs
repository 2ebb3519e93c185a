//! Test-split evaluation and the metrics CSV contract.

use std::io::{Read, Write};
use std::path::Path;

use maskvae_core::metrics::{aggregate, evaluate_pair, MetricReport};
use maskvae_core::vae::{decode_image, encode, VaeParams};
use maskvae_core::ImageTensor;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::train::csv_error;

pub const CSV_HEADER: [&str; 6] = ["image_id", "1-ssim", "1-msssim", "1-vif", "l1", "l2"];
const EVAL_BATCH: usize = 32;

/// Deterministic reconstructions through the posterior mean, batched.
pub fn reconstruct_batch(params: &VaeParams<f32>, images: &[ImageTensor<f64>]) -> Result<Vec<ImageTensor<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x: Vec<ImageTensor<f32>> = chunk.iter().map(ImageTensor::cast).collect();
        let z: Vec<Vec<f32>> = encode(params, &x)?.into_iter().map(|p| p.mu).collect();
        out.extend(decode_image(params, &z)?.iter().map(ImageTensor::cast));
    }
    Ok(out)
}

/// Scores `predict`'s output on every sample, compositing with the
/// ground-truth mask. Returns per-image rows followed by the `MEAN` row.
pub fn evaluate_with(
    samples: &[Sample],
    mut predict: impl FnMut(&[ImageTensor<f64>]) -> Result<Vec<ImageTensor<f64>>>,
) -> Result<Vec<MetricReport>> {
    if samples.is_empty() {
        return Err(Error::Data("the evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len() + 1);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let predicted = predict(&images)?;
        for (s, p) in chunk.iter().zip(&predicted) {
            let mask = s.mask.as_ref().ok_or_else(|| Error::Data(format!("image {} has no mask", s.id)))?;
            rows.push(evaluate_pair(s.id.clone(), p, &s.image, mask)?);
        }
    }
    rows.push(aggregate(&rows)?);
    Ok(rows)
}

pub fn evaluate(params: &VaeParams<f32>, samples: &[Sample]) -> Result<Vec<MetricReport>> {
    if let Some(s) = samples.iter().find(|s| s.image.height() != params.arch().resolution) {
        return Err(Error::Data(format!(
            "image {} is {}x{}, the checkpoint expects {r}x{r}",
            s.id,
            s.image.height(),
            s.image.width(),
            r = params.arch().resolution
        )));
    }
    evaluate_with(samples, |x| reconstruct_batch(params, x))
}

pub fn write_csv(out: impl Write, rows: &[MetricReport]) -> Result<()> {
    let wrap = |e: csv::Error| csv_error(Path::new("<metrics csv>"), e);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for r in rows {
        let mut fields = vec![r.image_id.clone()];
        fields.extend(r.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&fields).map_err(wrap)?;
    }
    w.flush().map_err(Error::io("<metrics csv>"))
}

pub fn write_csv_file(path: &Path, rows: &[MetricReport]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    write_csv(file, rows)
}

pub fn read_csv(input: impl Read) -> Result<Vec<MetricReport>> {
    let wrap = |e: csv::Error| csv_error(Path::new("<metrics csv>"), e);
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(wrap)?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Data(format!("unexpected metrics header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(wrap)?;
            let num = |i: usize| {
                rec[i].parse::<f64>().map_err(|_| Error::Data(format!("bad number '{}' in metrics CSV", &rec[i])))
            };
            Ok(MetricReport {
                image_id: rec[0].to_owned(),
                one_minus_ssim: num(1)?,
                one_minus_msssim: num(2)?,
                one_minus_vif: num(3)?,
                l1_scaled: num(4)?,
                l2_scaled: num(5)?,
            })
        })
        .collect()
}
