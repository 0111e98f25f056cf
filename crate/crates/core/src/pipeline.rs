//! Stage wiring shared by the command-line tool and the integration tests:
//! corpus to dataset, dataset to training samples, checkpoints to
//! predictions, steering records and plot data.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::affectmodel::{dynamics, forward_trajectory, Checkpoint, SolveMode, Trajectory, TrajectorySample};
use crate::annotate::{
    annotate_from_endpoint, pair_annotations, read_annotations, AnnotatedRecord, AnnotationConfig,
    AnnotationSource, EmotionVector, NUM_EMOTIONS,
};
use crate::cemoflow::{
    build_cemoflow, read_cemoflow, split_segments, summary_stats, write_cemoflow, CemoflowRow, Format, SegmentInfo,
    SummaryStats, DEFAULT_FACTOR,
};
use crate::error::{Error, Result};
use crate::ingest::{clean, parse_corpus, segment, ColumnSchema, RemovalReport};
use crate::seed::component_rng;
use crate::steering::{build_steering, AnchorSet, SteeringRecord};
use crate::temporal::arctan2_recombine;

pub const DATASET_STEM: &str = "cemoflow";
pub const SEGMENTS_FILE: &str = "segments.json";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "removal_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub corpus: PathBuf,
    /// Precomputed `e0..e5` rows, one per cleaned record in input order.
    pub annotations: Option<PathBuf>,
    pub schema: ColumnSchema,
    pub annotation: AnnotationConfig,
    pub factor: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            corpus: PathBuf::new(),
            annotations: None,
            schema: ColumnSchema::default(),
            annotation: AnnotationConfig::default(),
            factor: DEFAULT_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub rows: Vec<CemoflowRow>,
    pub segments: Vec<SegmentInfo>,
    pub report: RemovalReport,
    pub stats: Option<SummaryStats>,
}

/// Sorts annotated records chronologically (stable) and groups them into
/// per-conversation segments ordered by start time.
pub fn group_annotated(mut annotated: Vec<AnnotatedRecord>) -> Result<Vec<Vec<AnnotatedRecord>>> {
    annotated.sort_by_key(|a| a.record.timestamp.epoch_seconds());
    let mut queues: HashMap<String, VecDeque<EmotionVector>> = HashMap::new();
    for a in &annotated {
        queues
            .entry(a.record.conversation_id.clone())
            .or_default()
            .push_back(a.emotion);
    }
    let records = annotated.into_iter().map(|a| a.record).collect();
    segment(records)?
        .into_iter()
        .map(|seg| {
            let queue = queues
                .get_mut(&seg.conversation_id)
                .expect("every segment comes from a queued conversation");
            Ok(seg
                .records
                .into_iter()
                .map(|record| AnnotatedRecord {
                    emotion: queue.pop_front().expect("one emotion per record"),
                    record,
                })
                .collect())
        })
        .collect()
}

/// Parse, clean, annotate, segment and interpolate.
pub async fn build(cfg: &BuildConfig) -> Result<BuildOutput> {
    let records = parse_corpus(&cfg.corpus, &cfg.schema)?;
    let (cleaned, report) = clean(records);
    log::info!(
        "cleaned corpus: {} rows kept, {} removed, {} windows flagged",
        cleaned.len(),
        report.removed_rows,
        report.flagged_windows
    );
    let annotated = match cfg.annotation.source {
        AnnotationSource::File => {
            let path = cfg
                .annotations
                .as_ref()
                .ok_or_else(|| Error::domain("file annotation source needs an annotations path"))?;
            pair_annotations(cleaned, read_annotations(path)?)?
        }
        AnnotationSource::Endpoint => annotate_from_endpoint(cleaned, &cfg.annotation).await?,
    };
    let segments = group_annotated(annotated)?;
    let (rows, infos) = build_cemoflow(&segments, cfg.factor)?;
    let stats = if rows.is_empty() {
        None
    } else {
        Some(summary_stats(&rows)?)
    };
    Ok(BuildOutput {
        rows,
        segments: infos,
        report,
        stats,
    })
}

pub fn dataset_file_name(format: Format) -> String {
    match format {
        Format::Csv => format!("{DATASET_STEM}.csv"),
        Format::Jsonl => format!("{DATASET_STEM}.jsonl"),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the dataset, its segment table, statistics and removal report
/// into `out_dir`. Returns the dataset path.
pub fn write_build_outputs(out_dir: &Path, out: &BuildOutput, format: Format) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = out_dir.join(dataset_file_name(format));
    write_cemoflow(&out.rows, &dataset, format)?;
    write_json(&out_dir.join(SEGMENTS_FILE), &out.segments)?;
    write_json(&out_dir.join(REPORT_FILE), &out.report)?;
    if let Some(stats) = &out.stats {
        write_json(&out_dir.join(STATS_FILE), stats)?;
    }
    Ok(dataset)
}

/// A dataset file together with its segment boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<CemoflowRow>,
    pub ranges: Vec<Range<usize>>,
    pub infos: Option<Vec<SegmentInfo>>,
}

impl Dataset {
    pub fn from_parts(rows: Vec<CemoflowRow>, infos: Option<Vec<SegmentInfo>>) -> Result<Self> {
        let ranges = split_segments(&rows, infos.as_deref())?;
        Ok(Dataset { rows, ranges, infos })
    }

    /// Reads a dataset and, when present, the segment table beside it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_cemoflow(path)?;
        let sidecar = path.with_file_name(SEGMENTS_FILE);
        let infos = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Self::from_parts(rows, infos)
    }

    pub fn segment(&self, i: usize) -> Option<&[CemoflowRow]> {
        self.ranges.get(i).map(|r| &self.rows[r.clone()])
    }

    pub fn is_noise(&self, i: usize) -> bool {
        self.infos.as_ref().is_some_and(|infos| infos[i].is_noise)
    }

    /// Segments usable for training: noise-flagged ones are left out.
    pub fn training_segments(&self) -> Vec<&[CemoflowRow]> {
        (0..self.ranges.len())
            .filter(|&i| !self.is_noise(i))
            .filter_map(|i| self.segment(i))
            .collect()
    }
}

/// Mean spacing of consecutive rows over all segments, in seconds.
pub fn time_scale(segments: &[&[CemoflowRow]]) -> f64 {
    let (span, gaps) = segments.iter().fold((0.0, 0usize), |(s, g), seg| match seg {
        [first, .., last] => (s + last.t_tilde - first.t_tilde, g + seg.len() - 1),
        _ => (s, g),
    });
    if gaps == 0 || !(span > 0.0) {
        1.0
    } else {
        span / gaps as f64
    }
}

/// Model inputs for one segment: time relative to the first row and delay
/// both divided by `scale`; optionally the previous row's emotions.
pub fn samples_from_rows(rows: &[CemoflowRow], scale: f64, lagged: bool) -> Vec<TrajectorySample> {
    let t0 = rows.first().map_or(0.0, |r| r.t_tilde);
    let mut prev = EmotionVector::uniform().0;
    rows.iter()
        .map(|r| {
            let mut features = r.cyclic.to_vec();
            features.push(r.tau / scale);
            features.push(r.delta_mag);
            if lagged {
                features.extend_from_slice(&prev);
            }
            prev = r.e;
            TrajectorySample {
                t: (r.t_tilde - t0) / scale,
                features,
                target: EmotionVector(r.e),
            }
        })
        .collect()
}

/// Runs a checkpoint over one segment.
pub fn infer(ck: &Checkpoint, rows: &[CemoflowRow], mode: SolveMode) -> Result<(Vec<TrajectorySample>, Trajectory)> {
    let samples = samples_from_rows(rows, ck.time_scale, ck.config.lagged_emotions);
    let h0 = vec![0.0; ck.params.d];
    let traj = forward_trajectory(&ck.params, &samples, mode, &h0, &ck.config.integration)?;
    Ok((samples, traj))
}

/// Steering records for one segment: emotions from the data, strength from
/// the norm of the model's latent slope in per-second units.
pub fn steering_records(
    ck: &Checkpoint,
    rows: &[CemoflowRow],
    anchors: &AnchorSet,
    lambda_base: f64,
    mode: SolveMode,
) -> Result<Vec<SteeringRecord>> {
    let (samples, traj) = infer(ck, rows, mode)?;
    rows.iter()
        .zip(&samples)
        .zip(&traj.states)
        .map(|((row, s), h)| {
            let slope = dynamics(&ck.params, s.t, h, &s.features)?;
            let per_second = slope.iter().map(|v| v * v).sum::<f64>().sqrt() / ck.time_scale;
            let sv = build_steering(&EmotionVector(row.e), per_second, anchors, lambda_base)?;
            Ok(SteeringRecord {
                t: row.t_tilde,
                u: sv.u,
                lambda: sv.strength,
                emotions: row.e,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    pub angle: f64,
    pub value: f64,
    pub delta_mag: f64,
}

/// `(arctan2(sin_h, cos_h), e_j, delta)` triples per emotion. With `count`
/// below the row count, the same seeded subset of rows is used for every
/// emotion, kept in file order.
pub fn plot_points(rows: &[CemoflowRow], count: Option<usize>, seed: u64) -> Result<[Vec<PlotPoint>; NUM_EMOTIONS]> {
    let usable: Vec<&CemoflowRow> = rows
        .iter()
        .filter(|r| !(r.cyclic[0] == 0.0 && r.cyclic[1] == 0.0))
        .collect();
    let picked: Vec<&CemoflowRow> = match count {
        Some(c) if c < usable.len() => {
            let mut idx = sample(&mut component_rng(seed, "plotdata"), usable.len(), c).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| usable[i]).collect()
        }
        _ => usable,
    };
    let mut out: [Vec<PlotPoint>; NUM_EMOTIONS] = Default::default();
    for r in picked {
        let angle = arctan2_recombine(r.cyclic[0], r.cyclic[1])?;
        for (j, series) in out.iter_mut().enumerate() {
            series.push(PlotPoint {
                angle,
                value: r.e[j],
                delta_mag: r.delta_mag,
            });
        }
    }
    Ok(out)
}
