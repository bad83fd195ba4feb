//! Forged-class pixel metrics and the robustness perturbation harness.
//!
//! Forged (edited) pixels are the positive class throughout. Metrics whose
//! denominator is zero are reported as 0 so aggregates never turn into NaN.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{crop, jpeg_reencode, read_image, write_png, ImageBuffer, Rect};
use crate::semanticmask::{resize_mask, EditMask};

/// Quality factors of the JPEG robustness rows.
pub const JPEG_QUALITIES: [u8; 4] = [90, 80, 70, 60];
/// Removed-area fractions of the random-crop robustness rows.
pub const CROP_FRACTIONS: [f64; 4] = [0.10, 0.20, 0.30, 0.40];
pub const CROP_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn), which avoids rounding in
        // the intermediate ratios.
        let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
        Self {
            f1,
            iou,
            precision,
            recall,
            counts: c,
        }
    }
}

pub fn confusion_counts(pred: &EditMask, truth: &EditMask) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::param(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn score_masks(pred: &EditMask, truth: &EditMask) -> Result<MetricReport> {
    confusion_counts(pred, truth).map(MetricReport::from_counts)
}

/// Scores at the truth resolution, resampling the prediction with nearest
/// neighbour when the sizes differ.
pub fn score_at_truth_resolution(pred: &EditMask, truth: &EditMask) -> Result<MetricReport> {
    if (pred.width(), pred.height()) == (truth.width(), truth.height()) {
        score_masks(pred, truth)
    } else {
        score_masks(&resize_mask(pred, truth.width(), truth.height())?, truth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Unweighted mean of each metric.
    Macro,
    /// Metrics recomputed from summed counts.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: AggregateMode,
    pub n_items: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Combines per-item reports. `counts` is always the summed confusion
/// matrix, whichever mode produced the metrics.
pub fn aggregate(reports: &[MetricReport], mode: AggregateMode) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::param("cannot aggregate an empty list of reports"));
    }
    let counts = reports
        .iter()
        .fold(ConfusionCounts::default(), |acc, r| acc + r.counts);
    let report = match mode {
        AggregateMode::Micro => MetricReport::from_counts(counts),
        AggregateMode::Macro => {
            let n = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            MetricReport {
                f1: mean(|r| r.f1),
                iou: mean(|r| r.iou),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                counts,
            }
        }
    };
    Ok(AggregateReport {
        mode,
        n_items: reports.len(),
        report,
    })
}

pub fn perturb_jpeg(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    jpeg_reencode(img, quality)
}

/// Side lengths of a crop window that removes `fraction` of the area while
/// keeping the aspect ratio.
pub fn crop_window_size(width: usize, height: usize, fraction: f64) -> (usize, usize) {
    let keep = (1.0 - fraction).sqrt();
    // The epsilon keeps exact products such as 0.9 * 100 from flooring to 89.
    let side = |len: usize| ((keep * len as f64 + 1e-9).floor() as usize).clamp(1, len);
    (side(width), side(height))
}

/// Crops a uniformly placed window of area `(1 - fraction) * W * H` out of
/// `img`. The mask, which may be at a different resolution than the image,
/// is resampled over the same window at its own resolution.
///
/// Windows that would leave no forged or no real pixel are redrawn, up to
/// [`CROP_ATTEMPTS`] times.
pub fn perturb_crop(
    img: &ImageBuffer,
    mask: &EditMask,
    fraction: f64,
    seed: u64,
) -> Result<(ImageBuffer, EditMask, Rect)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!(
            "crop fraction must be in (0, 1), got {fraction}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let (ww, wh) = crop_window_size(w, h, fraction);
    let (mw, mh) = (mask.width(), mask.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CROP_ATTEMPTS {
        let x = rng.random_range(0..=w - ww);
        let y = rng.random_range(0..=h - wh);
        let window = Rect::new(x, y, ww, wh);
        let cropped_mask = EditMask::from_fn(mw, mh, |i, j| {
            let sx = x as f64 + (i as f64 + 0.5) * ww as f64 / mw as f64;
            let sy = y as f64 + (j as f64 + 0.5) * wh as f64 / mh as f64;
            let mx = ((sx * mw as f64 / w as f64) as usize).min(mw - 1);
            let my = ((sy * mh as f64 / h as f64) as usize).min(mh - 1);
            mask.get(mx, my)
        })?;
        let forged = cropped_mask.count_edited();
        if forged > 0 && forged < mw * mh {
            return Ok((crop(img, window)?, cropped_mask, window));
        }
    }
    Err(Error::Perturbation(format!(
        "no {ww}x{wh} window kept both classes after {CROP_ATTEMPTS} attempts"
    )))
}

/// One robustness setting. Crop, when present, is applied before JPEG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSetting {
    pub jpeg: Option<u8>,
    pub crop: Option<f64>,
}

impl SweepSetting {
    pub fn label(&self) -> String {
        let j = self.jpeg.map(|q| format!("J{q}"));
        let c = self.crop.map(|f| format!("C{}%", (f * 100.0).round()));
        match (j, c) {
            (Some(j), Some(c)) => format!("{j}+{c}"),
            (Some(s), None) | (None, Some(s)) => s,
            (None, None) => "none".into(),
        }
    }

    pub fn apply(
        &self,
        img: &ImageBuffer,
        mask: &EditMask,
        seed: u64,
    ) -> Result<(ImageBuffer, EditMask)> {
        let (mut img, mask) = match self.crop {
            Some(f) => {
                let (i, m, _) = perturb_crop(img, mask, f, seed)?;
                (i, m)
            }
            None => (img.clone(), mask.clone()),
        };
        if let Some(q) = self.jpeg {
            img = perturb_jpeg(&img, q)?;
        }
        Ok((img, mask))
    }
}

/// JPEG 90/80/70/60, crop 10/20/30/40%, then JPEG 80 combined with a 20%
/// crop.
pub fn default_grid() -> Vec<SweepSetting> {
    let mut grid: Vec<SweepSetting> = JPEG_QUALITIES
        .iter()
        .map(|&q| SweepSetting {
            jpeg: Some(q),
            crop: None,
        })
        .collect();
    grid.extend(CROP_FRACTIONS.iter().map(|&f| SweepSetting {
        jpeg: None,
        crop: Some(f),
    }));
    grid.push(SweepSetting {
        jpeg: Some(80),
        crop: Some(0.20),
    });
    grid
}

/// An evaluation item: an aligned edited image and its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub id: String,
    pub image: ImageBuffer,
    pub truth: EditMask,
}

/// What a predictor sees for one (item, setting) cell. The perturbed truth
/// is provided so that oracle and diagnostic predictors can be expressed;
/// real predictors should only look at `image`.
pub struct PredictionRequest<'a> {
    pub item_id: &'a str,
    pub setting: &'a SweepSetting,
    pub image: &'a ImageBuffer,
    pub truth: &'a EditMask,
}

pub trait MaskPredictor: Sync {
    fn predict(&self, req: &PredictionRequest<'_>) -> Result<EditMask>;
}

impl<F> MaskPredictor for F
where
    F: Fn(&PredictionRequest<'_>) -> Result<EditMask> + Sync,
{
    fn predict(&self, req: &PredictionRequest<'_>) -> Result<EditMask> {
        self(req)
    }
}

/// Runs a shell command template per image. `{input}` is replaced by the
/// path of a PNG of the perturbed image and `{output}` by the path where the
/// command must write its mask PNG (non-zero = forged).
#[derive(Debug, Clone)]
pub struct CommandPredictor {
    pub template: String,
    pub scratch_dir: PathBuf,
}

impl MaskPredictor for CommandPredictor {
    fn predict(&self, req: &PredictionRequest<'_>) -> Result<EditMask> {
        let stem: String = format!("{}__{}", req.item_id, req.setting.label())
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let input = self.scratch_dir.join(format!("{stem}.in.png"));
        let output = self.scratch_dir.join(format!("{stem}.out.png"));
        write_png(req.image, &input)?;
        let cmd = self
            .template
            .replace("{input}", &shell_quote(&input))
            .replace("{output}", &shell_quote(&output));
        let status = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .status()
            .map_err(|e| Error::io(Path::new("sh"), e))?;
        if !status.success() {
            return Err(Error::Perturbation(format!(
                "predictor exited with {status}: {cmd}"
            )));
        }
        let mask = read_image(&output).map(|img| EditMask::from_image(&img));
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        mask
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub report: Option<MetricReport>,
    pub n_items: usize,
    /// False when any item failed to perturb or predict; metrics then cover
    /// only the items that succeeded.
    pub complete: bool,
    pub failures: Vec<String>,
}

/// Scores `predictor` on every item under every setting. Row metrics are
/// micro-averaged over items. Perturbation seeds derive from `seed` and the
/// item index only, so every setting sees the same crop placements.
pub fn robustness_sweep(
    items: &[SweepItem],
    predictor: &dyn MaskPredictor,
    grid: &[SweepSetting],
    seed: u64,
) -> Vec<SweepRow> {
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|s| (0..items.len()).map(move |i| (s, i)))
        .collect();
    let outcomes: Vec<Result<MetricReport>> = cells
        .par_iter()
        .map(|&(s, i)| {
            let (setting, item) = (&grid[s], &items[i]);
            let (image, truth) =
                setting.apply(&item.image, &item.truth, seed.wrapping_add(i as u64))?;
            let pred = predictor.predict(&PredictionRequest {
                item_id: &item.id,
                setting,
                image: &image,
                truth: &truth,
            })?;
            score_at_truth_resolution(&pred, &truth)
        })
        .collect();

    grid.iter()
        .enumerate()
        .map(|(s, setting)| {
            let mut reports = Vec::new();
            let mut failures = Vec::new();
            for (&(cs, i), outcome) in cells.iter().zip(&outcomes) {
                if cs != s {
                    continue;
                }
                match outcome {
                    Ok(r) => reports.push(*r),
                    Err(e) => failures.push(format!("{}: {e}", items[i].id)),
                }
            }
            SweepRow {
                setting: setting.label(),
                report: aggregate(&reports, AggregateMode::Micro)
                    .ok()
                    .map(|a| a.report),
                n_items: reports.len(),
                complete: failures.is_empty() && !reports.is_empty(),
                failures,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    setting: &'a str,
    f1: f64,
    iou: f64,
    precision: f64,
    recall: f64,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    n_items: usize,
    complete: bool,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        let r = row
            .report
            .unwrap_or_else(|| MetricReport::from_counts(ConfusionCounts::default()));
        w.serialize(CsvRow {
            setting: &row.setting,
            f1: r.f1,
            iou: r.iou,
            precision: r.precision,
            recall: r.recall,
            tp: r.counts.tp,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            tn: r.counts.tn,
            n_items: row.n_items,
            complete: row.complete,
        })
        .map_err(|e| Error::Manifest(format!("writing sweep csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}
