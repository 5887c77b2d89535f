//! Dataset ingestion, segmentation metrics, and the evaluation harness.
//!
//! Manifests are JSON-lines: one entry per line with image, captions,
//! ground-truth mask paths (8-bit, 0 = background, 255 = region), an
//! optional class label, and optional per-caption oracle target paths.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::io;
use crate::optim::SegmentationTask;
use crate::raster::{AlphaMaskStack, BinaryMask};
use crate::synth::DatasetEntry;

/// Thresholds reported by default: Prec@0.1 .. Prec@0.5.
pub const DEFAULT_PREC_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Thresholds a soft mask: entries `>= threshold` become region.
pub fn binarize(mask: &ArrayView2<'_, f64>, threshold: f64) -> BinaryMask {
    debug_assert!((0.0..1.0).contains(&threshold) && threshold > 0.0);
    mask.mapv(|v| v >= threshold)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Fraction of samples with IoU strictly above each threshold. Ties at the
/// threshold count as failures.
pub fn precision_at(ious: &[f64], thresholds: &[f64]) -> Result<BTreeMap<String, f64>> {
    if ious.is_empty() {
        return Err(Error::invalid("precision_at needs at least one IoU"));
    }
    if !thresholds.iter().all(|t| (0.0..1.0).contains(t) && *t > 0.0) {
        return Err(Error::invalid("thresholds must lie in (0, 1)"));
    }
    let mut out = BTreeMap::new();
    for &tau in thresholds {
        let frac = ious.iter().filter(|v| **v > tau).count() as f64 / ious.len() as f64;
        out.insert(format!("{tau}"), frac);
    }
    Ok(out)
}

/// Boundary pixels of a binary mask: region pixels with at least one
/// 4-neighbor outside the region (image borders count as background).
fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    BinaryMask::from_shape_fn((h, w), |(i, j)| {
        if !mask[[i, j]] {
            return false;
        }
        let neighbors = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        neighbors
            .iter()
            .any(|&(ni, nj)| ni >= h || nj >= w || !mask[[ni, nj]])
    })
}

fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let r = radius as isize;
    BinaryMask::from_shape_fn((h, w), |(i, j)| {
        for di in -r..=r {
            for dj in -r..=r {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w
                    && mask[[ni as usize, nj as usize]]
                {
                    return true;
                }
            }
        }
        false
    })
}

/// IoU of the dilated boundary bands of two masks; measures how well the
/// predicted contour follows the reference contour.
pub fn boundary_iou(pred: &BinaryMask, gt: &BinaryMask, tolerance_px: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let bp = dilate(&boundary(pred), tolerance_px);
    let bg = dilate(&boundary(gt), tolerance_px);
    iou(&bp, &bg)
}

/// A loaded dataset manifest; every referenced file existed at load time.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

/// Parses a JSONL manifest and validates the referenced files.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: DatasetEntry = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        if entry.captions.is_empty() {
            return Err(Error::Manifest(format!("line {}: no captions", lineno + 1)));
        }
        if entry.masks.len() != entry.captions.len() {
            return Err(Error::Manifest(format!(
                "line {}: {} masks for {} captions",
                lineno + 1,
                entry.masks.len(),
                entry.captions.len()
            )));
        }
        let image_dims = io::image_dimensions(&root.join(&entry.image))?;
        for mask in &entry.masks {
            let mask_dims = io::image_dimensions(&root.join(mask))?;
            if mask_dims != image_dims {
                return Err(Error::Manifest(format!(
                    "line {}: mask {mask} is {mask_dims:?}, image is {image_dims:?}",
                    lineno + 1
                )));
            }
        }
        for target in &entry.oracle_targets {
            io::image_dimensions(&root.join(target))?;
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Manifest("manifest has no entries".into()));
    }
    Ok(DatasetManifest { root, entries })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    pub image: String,
    pub caption: String,
    pub iou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

/// Wall-clock statistics; excluded from the serialized report so evaluation
/// outputs stay byte-reproducible.
#[derive(Debug, Clone, Default)]
pub struct RuntimeStats {
    pub total_ms: f64,
    pub mean_sample_ms: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    /// Threshold (as printed, e.g. "0.1") to fraction.
    pub prec_at: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, f64>,
    pub failures: usize,
    pub samples: Vec<SampleResult>,
    #[serde(skip)]
    pub runtime: RuntimeStats,
}

/// Evaluation knobs.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub threshold: f64,
    pub workers: usize,
    pub prec_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            workers: 1,
            prec_thresholds: DEFAULT_PREC_THRESHOLDS.to_vec(),
        }
    }
}

struct EntryOutcome {
    samples: Vec<SampleResult>,
    masks: Vec<(usize, AlphaMaskStack)>,
    failed: bool,
    elapsed_ms: f64,
}

/// Runs `segment_fn` over every manifest entry and aggregates the metrics.
///
/// Per-entry failures are counted and excluded from aggregation, never
/// silently dropped. Entries fan out over `config.workers` threads; results
/// are merged in manifest order, so the report is identical however many
/// workers run. Returns the report and the soft masks per entry index.
pub fn evaluate<F>(
    manifest: &DatasetManifest,
    segment_fn: &F,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<(usize, AlphaMaskStack)>)>
where
    F: Fn(&SegmentationTask, usize) -> Result<AlphaMaskStack> + Sync,
{
    if manifest.entries.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let started = Instant::now();
    let n = manifest.entries.len();
    let workers = config.workers.max(1).min(n);

    let outcomes: Vec<Option<EntryOutcome>> = {
        let slots: Mutex<Vec<Option<EntryOutcome>>> = Mutex::new((0..n).map(|_| None).collect());
        let cursor = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = cursor.fetch_add(1, Ordering::Relaxed);
                    if idx >= n {
                        break;
                    }
                    let outcome = run_entry(manifest, idx, segment_fn, config);
                    slots.lock().unwrap()[idx] = Some(outcome);
                });
            }
        });
        slots.into_inner().unwrap()
    };

    let mut samples = Vec::new();
    let mut failures = 0usize;
    let mut masks = Vec::new();
    let mut elapsed = Vec::new();
    for outcome in outcomes.into_iter().flatten() {
        if outcome.failed {
            failures += 1;
        }
        samples.extend(outcome.samples);
        masks.extend(outcome.masks);
        elapsed.push(outcome.elapsed_ms);
    }
    if samples.is_empty() {
        return Err(Error::Manifest(format!(
            "every entry failed ({failures} failures)"
        )));
    }

    let ious: Vec<f64> = samples.iter().map(|s| s.iou).collect();
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let prec_at = precision_at(&ious, &config.prec_thresholds)?;

    let mut class_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &samples {
        if let Some(class) = &s.class {
            let e = class_acc.entry(class.clone()).or_insert((0.0, 0));
            e.0 += s.iou;
            e.1 += 1;
        }
    }
    let per_class = class_acc
        .into_iter()
        .map(|(k, (sum, count))| (k, sum / count as f64))
        .collect();

    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    let mean_sample_ms = if elapsed.is_empty() {
        0.0
    } else {
        elapsed.iter().sum::<f64>() / elapsed.len() as f64
    };

    Ok((
        EvalReport {
            miou,
            prec_at,
            per_class,
            failures,
            samples,
            runtime: RuntimeStats {
                total_ms,
                mean_sample_ms,
            },
        },
        masks,
    ))
}

fn run_entry<F>(
    manifest: &DatasetManifest,
    idx: usize,
    segment_fn: &F,
    config: &EvalConfig,
) -> EntryOutcome
where
    F: Fn(&SegmentationTask, usize) -> Result<AlphaMaskStack> + Sync,
{
    let started = Instant::now();
    let entry = &manifest.entries[idx];
    let failed_outcome = |msg: String, elapsed_ms: f64| {
        log::warn!("entry {idx} ({}) failed: {msg}", entry.image);
        EntryOutcome {
            samples: Vec::new(),
            masks: Vec::new(),
            failed: true,
            elapsed_ms,
        }
    };

    let loaded: Result<(SegmentationTask, Vec<BinaryMask>)> = (|| {
        let image = io::load_image(&manifest.root.join(&entry.image))?;
        let mut gts = Vec::with_capacity(entry.masks.len());
        for m in &entry.masks {
            gts.push(io::load_binary_mask(&manifest.root.join(m))?);
        }
        let task = SegmentationTask::new(image, entry.captions.clone())?;
        Ok((task, gts))
    })();
    let (task, gts) = match loaded {
        Ok(v) => v,
        Err(e) => return failed_outcome(e.to_string(), started.elapsed().as_secs_f64() * 1e3),
    };

    let stack = match segment_fn(&task, idx) {
        Ok(s) => s,
        Err(e) => return failed_outcome(e.to_string(), started.elapsed().as_secs_f64() * 1e3),
    };
    if stack.k() != entry.captions.len() {
        return failed_outcome(
            format!("segmenter returned {} masks for {} captions", stack.k(), entry.captions.len()),
            started.elapsed().as_secs_f64() * 1e3,
        );
    }

    let mut samples = Vec::with_capacity(entry.captions.len());
    for (ci, caption) in entry.captions.iter().enumerate() {
        let pred = binarize(&stack.plane(ci), config.threshold);
        match iou(&pred, &gts[ci]) {
            Ok(v) => samples.push(SampleResult {
                image: entry.image.clone(),
                caption: caption.clone(),
                iou: v,
                class: entry.class.clone(),
            }),
            Err(e) => {
                return failed_outcome(e.to_string(), started.elapsed().as_secs_f64() * 1e3)
            }
        }
    }
    EntryOutcome {
        samples,
        masks: vec![(idx, stack)],
        failed: false,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Evaluates the all-ones prediction through the same metric path. The
/// resulting per-sample IoU equals the ground-truth foreground fraction.
pub fn whole_image_baseline(manifest: &DatasetManifest, config: &EvalConfig) -> Result<EvalReport> {
    let all_ones = |task: &SegmentationTask, _idx: usize| -> Result<AlphaMaskStack> {
        let (h, w) = (task.image.height(), task.image.width());
        AlphaMaskStack::new(ndarray::Array3::from_elem((task.captions.len(), h, w), 1.0))
    };
    evaluate(manifest, &all_ones, config).map(|(report, _)| report)
}

/// Writes the report with its fixed key names as pretty JSON.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}
