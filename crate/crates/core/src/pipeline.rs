//! Batch annotation: align each (original, edited) pair, gate it on
//! registration quality, derive its mask, and persist masks plus a
//! JSON-lines manifest with a seeded train/test split.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{align_pair, AlignConfig, AlignStage, AlignmentStats};
use crate::error::{Error, Result};
use crate::imagecore::read_image;
use crate::semanticmask::{
    annotate_masks_timed, load_feature_file, FeatureSource, MaskConfig, MaskStats,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_SPLIT_RATIO: f64 = 0.95;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PARTIAL_MANIFEST_FILE: &str = "manifest.partial.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityGateConfig {
    pub min_keypoints: usize,
    pub min_matches: usize,
    pub min_inlier_ratio: f64,
}

impl Default for QualityGateConfig {
    fn default() -> Self {
        Self {
            min_keypoints: 10,
            min_matches: 10,
            min_inlier_ratio: 0.60,
        }
    }
}

impl QualityGateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_keypoints == 0 || self.min_matches == 0 {
            return Err(Error::param("gate thresholds must be positive"));
        }
        if !(self.min_inlier_ratio > 0.0 && self.min_inlier_ratio <= 1.0) {
            return Err(Error::param(format!(
                "inlier-ratio gate must be in (0, 1], got {}",
                self.min_inlier_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateCriterion {
    Keypoints,
    Matches,
    InlierRatio,
}

impl std::fmt::Display for GateCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateCriterion::Keypoints => "keypoints",
            GateCriterion::Matches => "matches",
            GateCriterion::InlierRatio => "inlier_ratio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected {
        reason: GateCriterion,
    },
    /// `stage` is `io`, `alignment:<stage>` or `annotation`.
    Failed {
        stage: String,
        reason: String,
    },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }

    /// Short grouping key for summaries.
    pub fn key(&self) -> String {
        match self {
            Verdict::Accepted => "accepted".into(),
            Verdict::Rejected { reason } => format!("rejected:{reason}"),
            Verdict::Failed { stage, .. } => format!("failed:{stage}"),
        }
    }
}

/// Checks the criteria in order keypoints (each image), matches, inlier
/// ratio and reports the first one violated. A statistic that is absent
/// because alignment stopped before computing it is not checked.
pub fn quality_gate(stats: &AlignmentStats, cfg: &QualityGateConfig) -> Verdict {
    let below = |v: Option<usize>, min: usize| v.is_some_and(|v| v < min);
    if below(stats.keypoints_original, cfg.min_keypoints)
        || below(stats.keypoints_edited, cfg.min_keypoints)
    {
        return Verdict::Rejected {
            reason: GateCriterion::Keypoints,
        };
    }
    if below(stats.matches, cfg.min_matches) {
        return Verdict::Rejected {
            reason: GateCriterion::Matches,
        };
    }
    if stats.inlier_ratio.is_some_and(|r| r < cfg.min_inlier_ratio) {
        return Verdict::Rejected {
            reason: GateCriterion::InlierRatio,
        };
    }
    Verdict::Accepted
}

/// How dense features are obtained for each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Builtin {
        patch_size: usize,
    },
    /// Precomputed FMAP files `<pair_id>.original.fmap` and
    /// `<pair_id>.edited.fmap`, extracted from the aligned, cropped images.
    FmapDir {
        dir: PathBuf,
    },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::Builtin {
            patch_size: crate::semanticmask::DEFAULT_PATCH_SIZE,
        }
    }
}

impl std::str::FromStr for FeatureSpec {
    type Err = Error;

    /// `builtin`, `builtin:<patch>` or `fmap-dir:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin" {
            return Ok(FeatureSpec::default());
        }
        if let Some(p) = s.strip_prefix("builtin:") {
            let patch_size = p
                .parse()
                .map_err(|_| Error::param(format!("bad patch size in {s:?}")))?;
            return Ok(FeatureSpec::Builtin { patch_size });
        }
        if let Some(dir) = s.strip_prefix("fmap-dir:") {
            return Ok(FeatureSpec::FmapDir { dir: dir.into() });
        }
        Err(Error::param(format!(
            "unknown feature source {s:?}; expected builtin or fmap-dir:PATH"
        )))
    }
}

impl FeatureSpec {
    fn source_for(&self, pair_id: &str) -> Result<FeatureSource> {
        match self {
            FeatureSpec::Builtin { patch_size } => Ok(FeatureSource::Builtin {
                patch_size: *patch_size,
            }),
            FeatureSpec::FmapDir { dir } => Ok(FeatureSource::Precomputed {
                id: format!("fmap-dir:{}", dir.display()),
                original: load_feature_file(&dir.join(format!("{pair_id}.original.fmap")))?,
                edited: load_feature_file(&dir.join(format!("{pair_id}.edited.fmap")))?,
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub align: AlignConfig,
    pub gate: QualityGateConfig,
    pub mask: MaskConfig,
    pub features: FeatureSpec,
}

/// Wall-clock seconds per stage. Not part of the deterministic record
/// content.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub io: f64,
    pub alignment: f64,
    pub features: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub ransac: u64,
    pub split: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub pair_id: String,
    pub original_path: PathBuf,
    pub edited_path: PathBuf,
    pub editing_task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub original_path: PathBuf,
    pub edited_path: PathBuf,
    pub editing_task: String,
    pub alignment: Option<AlignmentStats>,
    pub mask: Option<MaskStats>,
    /// Relative to the output directory.
    pub mask_path: Option<PathBuf>,
    pub verdict: Verdict,
    pub split: Split,
    pub tool_version: String,
    pub seeds: Seeds,
    pub timing: Option<StageTimings>,
}

/// Runs one pair end to end. Errors never escape; they are recorded in the
/// verdict. With `out_dir` set, the mask of an accepted pair is written to
/// `<out_dir>/masks/<pair_id>.png`.
pub fn annotate_pair(
    input: &PairInput,
    cfg: &PipelineConfig,
    split_seed: u64,
    out_dir: Option<&Path>,
) -> AnnotationRecord {
    let mut record = AnnotationRecord {
        pair_id: input.pair_id.clone(),
        original_path: input.original_path.clone(),
        edited_path: input.edited_path.clone(),
        editing_task: input.editing_task.clone(),
        alignment: None,
        mask: None,
        mask_path: None,
        verdict: Verdict::Accepted,
        split: Split::None,
        tool_version: TOOL_VERSION.into(),
        seeds: Seeds {
            ransac: cfg.align.ransac.seed,
            split: split_seed,
        },
        timing: None,
    };
    let mut timing = StageTimings::default();
    record.verdict = run_pair(input, cfg, out_dir, &mut record, &mut timing);
    record.timing = Some(timing);
    record
}

fn run_pair(
    input: &PairInput,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
    record: &mut AnnotationRecord,
    timing: &mut StageTimings,
) -> Verdict {
    let failed = |stage: &str, reason: String| Verdict::Failed {
        stage: stage.into(),
        reason,
    };

    let started = Instant::now();
    let images =
        read_image(&input.original_path).and_then(|o| Ok((o, read_image(&input.edited_path)?)));
    timing.io += started.elapsed().as_secs_f64();
    let (original, edited) = match images {
        Ok(pair) => pair,
        Err(e) => return failed("io", e.to_string()),
    };

    let started = Instant::now();
    let aligned = align_pair(&original, &edited, &cfg.align);
    timing.alignment = started.elapsed().as_secs_f64();
    let aligned = match aligned {
        Ok(a) => a,
        Err(f) => {
            record.alignment = Some(f.stats.clone());
            // An image without detectable structure is a failure, not a
            // gate decision.
            if f.stage != AlignStage::Detection {
                let verdict = quality_gate(&f.stats, &cfg.gate);
                if !verdict.is_accepted() {
                    return verdict;
                }
            }
            return failed(&format!("alignment:{}", f.stage), f.reason);
        }
    };
    record.alignment = Some(aligned.stats.clone());
    let verdict = quality_gate(&aligned.stats, &cfg.gate);
    if !verdict.is_accepted() {
        return verdict;
    }

    let started = Instant::now();
    let source = cfg.features.source_for(&input.pair_id);
    timing.io += started.elapsed().as_secs_f64();
    let source = match source {
        Ok(s) => s,
        Err(e) => return failed("io", e.to_string()),
    };
    let (mask, stats, t) =
        match annotate_masks_timed(&aligned.original, &aligned.edited, &source, &cfg.mask) {
            Ok(r) => r,
            Err(e) => return failed("annotation", e.to_string()),
        };
    timing.features = t.features.as_secs_f64();
    timing.similarity = t.similarity.as_secs_f64();
    record.mask = Some(stats);
    if mask.count_edited() == 0 {
        return failed("annotation", "mask has no edited pixels".into());
    }

    if let Some(dir) = out_dir {
        let rel = Path::new(MASK_DIR).join(format!("{}.png", input.pair_id));
        let started = Instant::now();
        let written = mask.write_png(&dir.join(&rel));
        timing.io += started.elapsed().as_secs_f64();
        if let Err(e) = written {
            return failed("io", e.to_string());
        }
        record.mask_path = Some(rel);
    }
    Verdict::Accepted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub pipeline: PipelineConfig,
    pub split_ratio: f64,
    pub seed: u64,
    pub workers: usize,
    /// Reuse records from an interrupted run's partial manifest.
    pub resume: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            split_ratio: DEFAULT_SPLIT_RATIO,
            seed: 0,
            workers: 1,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub accepted: usize,
    pub rejected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub failed: usize,
    pub train: usize,
    pub test: usize,
    /// Counts per verdict key, e.g. `rejected:matches`.
    pub by_verdict: BTreeMap<String, usize>,
    pub by_task: BTreeMap<String, TaskCounts>,
}

impl Summary {
    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        let mut s = Summary {
            total: records.len(),
            ..Summary::default()
        };
        for r in records {
            *s.by_verdict.entry(r.verdict.key()).or_default() += 1;
            let task = s.by_task.entry(r.editing_task.clone()).or_default();
            match r.verdict {
                Verdict::Accepted => {
                    s.accepted += 1;
                    task.accepted += 1;
                }
                Verdict::Rejected { .. } => {
                    s.rejected += 1;
                    task.rejected += 1;
                }
                Verdict::Failed { .. } => {
                    s.failed += 1;
                    task.failed += 1;
                }
            }
            match r.split {
                Split::Train => s.train += 1,
                Split::Test => s.test += 1,
                Split::None => {}
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    pub config: BuildConfig,
    pub summary: Summary,
    /// SHA-256 over the manifest lines with per-record timings removed.
    pub determinism_hash: String,
    pub timestamps: RunTimestamps,
}

#[derive(Debug, Deserialize)]
struct ListingRow {
    pair_id: String,
    original_path: PathBuf,
    edited_path: PathBuf,
    editing_task: String,
}

/// Reads a listing CSV with columns `pair_id, original_path, edited_path,
/// editing_task`. Relative image paths resolve against the listing's
/// directory.
pub fn read_listing(path: &Path) -> Result<Vec<PairInput>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for row in reader.deserialize() {
        let row: ListingRow =
            row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let id_ok = !row.pair_id.is_empty()
            && row
                .pair_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !row.pair_id.starts_with('.');
        if !id_ok {
            return Err(Error::Manifest(format!(
                "pair_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                row.pair_id
            )));
        }
        if !seen.insert(row.pair_id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate pair_id {:?}",
                row.pair_id
            )));
        }
        pairs.push(PairInput {
            pair_id: row.pair_id,
            original_path: base.join(row.original_path),
            edited_path: base.join(row.edited_path),
            editing_task: row.editing_task,
        });
    }
    Ok(pairs)
}

/// Sorts records by pair id, then shuffles the accepted ids with `seed` and
/// assigns the first `round(n * ratio)` to train and the rest to test.
pub fn assign_splits(records: &mut [AnnotationRecord], ratio: f64, seed: u64) {
    records.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut accepted: Vec<usize> = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        r.split = Split::None;
        if r.verdict.is_accepted() {
            accepted.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    accepted.shuffle(&mut rng);
    let n_train = (accepted.len() as f64 * ratio).round() as usize;
    for (k, &i) in accepted.iter().enumerate() {
        records[i].split = if k < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
}

fn record_line(r: &AnnotationRecord) -> Result<String> {
    serde_json::to_string(r).map_err(|e| Error::Manifest(e.to_string()))
}

/// Hash of the records with their timings stripped.
pub fn determinism_hash(records: &[AnnotationRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        let stripped = AnnotationRecord {
            timing: None,
            ..r.clone()
        };
        h.update(record_line(&stripped)?.as_bytes());
        h.update(b"\n");
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(records)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Annotates every pair of `listing` into `out_dir`.
///
/// Finished records are appended to a partial manifest as they complete, so
/// an interrupted run can continue with `resume`. The final
/// `manifest.jsonl` is sorted by pair id and does not depend on worker
/// count or completion order.
pub fn build_dataset(listing: &Path, out_dir: &Path, cfg: &BuildConfig) -> Result<DatasetManifest> {
    cfg.pipeline.gate.validate()?;
    if !(cfg.split_ratio > 0.0 && cfg.split_ratio <= 1.0) {
        return Err(Error::param(format!(
            "split ratio must be in (0, 1], got {}",
            cfg.split_ratio
        )));
    }
    let started_unix = unix_now();
    let pairs = read_listing(listing)?;
    std::fs::create_dir_all(out_dir.join(MASK_DIR)).map_err(|e| Error::io(out_dir, e))?;

    let partial_path = out_dir.join(PARTIAL_MANIFEST_FILE);
    let mut records: Vec<AnnotationRecord> = Vec::new();
    if cfg.resume && partial_path.exists() {
        let wanted: HashSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
        let mut done = HashSet::new();
        for r in read_manifest(&partial_path)? {
            if wanted.contains(r.pair_id.as_str()) && done.insert(r.pair_id.clone()) {
                records.push(r);
            }
        }
    }
    let done: HashSet<String> = records.iter().map(|r| r.pair_id.clone()).collect();
    let todo: Vec<&PairInput> = pairs
        .iter()
        .filter(|p| !done.contains(&p.pair_id))
        .collect();

    // Rewrite the checkpoint so it holds exactly the reused records.
    let mut partial = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&partial_path)
        .map_err(|e| Error::io(&partial_path, e))?;
    for r in &records {
        writeln!(partial, "{}", record_line(r)?).map_err(|e| Error::io(&partial_path, e))?;
    }
    let writer = Mutex::new(partial);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))?;
    let fresh: Vec<Result<AnnotationRecord>> = pool.install(|| {
        todo.par_iter()
            .map(|p| {
                let record = annotate_pair(p, &cfg.pipeline, cfg.seed, Some(out_dir));
                let line = record_line(&record)?;
                let mut w = writer.lock().expect("writer poisoned");
                writeln!(w, "{line}").map_err(|e| Error::io(&partial_path, e))?;
                w.flush().map_err(|e| Error::io(&partial_path, e))?;
                Ok(record)
            })
            .collect()
    });
    for r in fresh {
        records.push(r?);
    }

    assign_splits(&mut records, cfg.split_ratio, cfg.seed);
    let mut body = String::new();
    for r in &records {
        body.push_str(&record_line(r)?);
        body.push('\n');
    }
    write_atomic(&out_dir.join(MANIFEST_FILE), body.as_bytes())?;

    let manifest = DatasetManifest {
        summary: Summary::from_records(&records),
        determinism_hash: determinism_hash(&records)?,
        config: cfg.clone(),
        timestamps: RunTimestamps {
            started_unix,
            finished_unix: unix_now(),
        },
        records,
    };
    let summary = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "config": manifest.config,
        "summary": manifest.summary,
        "determinism_hash": manifest.determinism_hash,
        "timestamps": manifest.timestamps,
    });
    let summary =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Manifest(e.to_string()))?;
    write_atomic(&out_dir.join(SUMMARY_FILE), summary.as_bytes())?;
    std::fs::remove_file(&partial_path).map_err(|e| Error::io(&partial_path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub stage: String,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub stages: Vec<StageShare>,
    pub total_seconds: f64,
    /// Set when some records carry no timings or nothing was timed at all.
    pub partial: bool,
    pub records_without_timing: usize,
}

pub const PROFILE_STAGES: [&str; 4] = ["alignment", "features", "similarity", "io"];

/// Percentage of total time per stage, in [`PROFILE_STAGES`] order.
pub fn stage_percentages(seconds: [f64; 4]) -> ([f64; 4], bool) {
    let total: f64 = seconds.iter().sum();
    if !(total > 0.0) {
        return ([0.0; 4], true);
    }
    (seconds.map(|s| 100.0 * s / total), false)
}

pub fn profile_run(records: &[AnnotationRecord]) -> ProfileReport {
    let mut sums = [0f64; 4];
    let mut missing = 0;
    for r in records {
        match r.timing {
            Some(t) => {
                for (s, v) in sums
                    .iter_mut()
                    .zip([t.alignment, t.features, t.similarity, t.io])
                {
                    *s += v;
                }
            }
            None => missing += 1,
        }
    }
    let (percents, degenerate) = stage_percentages(sums);
    ProfileReport {
        stages: PROFILE_STAGES
            .iter()
            .zip(sums.iter().zip(percents))
            .map(|(name, (&seconds, percent))| StageShare {
                stage: (*name).into(),
                seconds,
                percent,
            })
            .collect(),
        total_seconds: sums.iter().sum(),
        partial: degenerate || missing > 0,
        records_without_timing: missing,
    }
}
