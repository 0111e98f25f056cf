//! The continuous dataset: per-segment Hermite resampling of every value
//! column against cumulative time, file I/O and descriptive statistics.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotatedRecord, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::spline::{fit_segment, resample};
use crate::temporal::build_temporal_rows;

pub const COLUMNS: [&str; 15] = [
    "t_tilde", "tau", "e0", "e1", "e2", "e3", "e4", "e5", "delta", "sin_h", "cos_h", "sin_m", "cos_m", "sin_s",
    "cos_s",
];

pub const DEFAULT_FACTOR: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CemoflowRow {
    pub t_tilde: f64,
    pub tau: f64,
    pub e: [f64; NUM_EMOTIONS],
    pub delta_mag: f64,
    /// sin_h, cos_h, sin_m, cos_m, sin_s, cos_s
    pub cyclic: [f64; 6],
}

impl CemoflowRow {
    pub fn to_array(&self) -> [f64; 15] {
        let mut a = [0.0; 15];
        a[0] = self.t_tilde;
        a[1] = self.tau;
        a[2..8].copy_from_slice(&self.e);
        a[8] = self.delta_mag;
        a[9..15].copy_from_slice(&self.cyclic);
        a
    }

    pub fn from_array(a: [f64; 15]) -> Self {
        let mut e = [0.0; NUM_EMOTIONS];
        e.copy_from_slice(&a[2..8]);
        let mut cyclic = [0.0; 6];
        cyclic.copy_from_slice(&a[9..15]);
        CemoflowRow {
            t_tilde: a[0],
            tau: a[1],
            e,
            delta_mag: a[8],
            cyclic,
        }
    }
}

/// Where each segment sits in the concatenated file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub conversation_id: String,
    pub start_row: usize,
    pub row_count: usize,
    pub knot_count: usize,
    pub is_noise: bool,
}

impl SegmentInfo {
    pub fn rows(&self) -> Range<usize> {
        self.start_row..self.start_row + self.row_count
    }
}

/// Raw knot rows of one chronologically sorted segment, on a local time axis
/// starting at zero.
pub fn knot_rows(records: &[AnnotatedRecord]) -> Result<Vec<CemoflowRow>> {
    let temporal = build_temporal_rows(records)?;
    Ok(records
        .iter()
        .zip(temporal)
        .map(|(r, t)| CemoflowRow {
            t_tilde: t.t_tilde,
            tau: t.tau,
            e: r.emotion.0,
            delta_mag: t.delta_mag,
            cyclic: t.cyclic.to_array(),
        })
        .collect())
}

/// Interpolates the 14 value columns of a segment's knots against `t_tilde`
/// and samples `factor` points per knot interval.
pub fn interpolate_segment(knots: &[CemoflowRow], factor: usize) -> Result<Vec<CemoflowRow>> {
    if factor == 0 {
        return Err(Error::domain("resample factor must be at least 1"));
    }
    match knots.len() {
        0 => return Err(Error::domain("segment has no knots")),
        1 => return Ok(knots.to_vec()),
        _ => {}
    }
    let t: Vec<f64> = knots.iter().map(|k| k.t_tilde).collect();
    let n_out = factor * (knots.len() - 1) + 1;
    let mut out = vec![[0.0; 15]; n_out];
    for col in 1..15 {
        let v: Vec<f64> = knots.iter().map(|k| k.to_array()[col]).collect();
        let curve = fit_segment(COLUMNS[col], &t, &v)?;
        let (ts, vs) = resample(&curve, factor)?;
        if vs.len() != n_out {
            return Err(Error::domain(format!(
                "segment has repeated t_tilde knots; expected {n_out} rows, got {}",
                vs.len()
            )));
        }
        for (i, (tv, vv)) in ts.into_iter().zip(vs).enumerate() {
            out[i][0] = tv;
            out[i][col] = vv;
        }
    }
    Ok(out.into_iter().map(CemoflowRow::from_array).collect())
}

/// Builds the concatenated dataset. Each segment's time axis is shifted so
/// that it starts where the previous one ended.
pub fn build_cemoflow(
    segments: &[Vec<AnnotatedRecord>],
    factor: usize,
) -> Result<(Vec<CemoflowRow>, Vec<SegmentInfo>)> {
    let mut rows = Vec::new();
    let mut infos = Vec::with_capacity(segments.len());
    let mut offset = 0.0;
    for seg in segments {
        let knots = knot_rows(seg)?;
        let mut dense = interpolate_segment(&knots, factor)?;
        let span = knots[knots.len() - 1].t_tilde;
        for r in &mut dense {
            r.t_tilde += offset;
        }
        infos.push(SegmentInfo {
            conversation_id: seg[0].record.conversation_id.clone(),
            start_row: rows.len(),
            row_count: dense.len(),
            knot_count: knots.len(),
            is_noise: seg.iter().any(|r| r.record.is_noise),
        });
        rows.extend(dense);
        offset += span;
    }
    Ok((rows, infos))
}

/// Row ranges of each segment. Without a sidecar, a segment boundary is
/// wherever `t_tilde` repeats.
pub fn split_segments(rows: &[CemoflowRow], infos: Option<&[SegmentInfo]>) -> Result<Vec<Range<usize>>> {
    if let Some(infos) = infos {
        let mut expected = 0;
        for info in infos {
            if info.start_row != expected || info.rows().end > rows.len() {
                return Err(Error::Schema(format!(
                    "segment `{}` does not tile the dataset rows",
                    info.conversation_id
                )));
            }
            expected = info.rows().end;
        }
        if expected != rows.len() {
            return Err(Error::Schema("segment table does not cover every row".into()));
        }
        return Ok(infos.iter().map(SegmentInfo::rows).collect());
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..rows.len() {
        if rows[i].t_tilde == rows[i - 1].t_tilde {
            ranges.push(start..i);
            start = i;
        }
    }
    if !rows.is_empty() {
        ranges.push(start..rows.len());
    }
    Ok(ranges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

/// Seventeen significant digits, enough to round-trip any f64.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_cemoflow_to<W: Write>(rows: &[CemoflowRow], mut w: W, format: Format) -> Result<usize> {
    let io = |e| Error::io("<writer>", e);
    match format {
        Format::Csv => {
            writeln!(w, "{}", COLUMNS.join(",")).map_err(io)?;
            for r in rows {
                let line: Vec<String> = r.to_array().iter().map(|v| format_float(*v)).collect();
                writeln!(w, "{}", line.join(",")).map_err(io)?;
            }
        }
        Format::Jsonl => {
            for r in rows {
                let fields: Vec<String> = COLUMNS
                    .iter()
                    .zip(r.to_array())
                    .map(|(k, v)| format!("\"{k}\":{}", format_float(v)))
                    .collect();
                writeln!(w, "{{{}}}", fields.join(",")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(rows.len())
}

pub fn write_cemoflow(rows: &[CemoflowRow], path: impl AsRef<Path>, format: Format) -> Result<usize> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cemoflow_to(rows, std::io::BufWriter::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn parse_value(s: &str, line: u64, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Row {
        line,
        message: format!("{col} `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Row {
            line,
            message: format!("{col} is not finite"),
        });
    }
    Ok(v)
}

pub fn read_cemoflow_csv<R: std::io::Read>(reader: R) -> Result<Vec<CemoflowRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Schema(format!(
            "dataset header must be `{}`",
            COLUMNS.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut a = [0.0; 15];
        for (i, col) in COLUMNS.iter().enumerate() {
            a[i] = parse_value(&rec[i], line, col)?;
        }
        rows.push(CemoflowRow::from_array(a));
    }
    Ok(rows)
}

pub fn read_cemoflow_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<CemoflowRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
        let mut a = [0.0; 15];
        for (j, col) in COLUMNS.iter().enumerate() {
            a[j] = obj.get(*col).and_then(|v| v.as_f64()).ok_or_else(|| Error::Row {
                line: i as u64 + 1,
                message: format!("missing numeric field `{col}`"),
            })?;
        }
        rows.push(CemoflowRow::from_array(a));
    }
    Ok(rows)
}

pub fn read_cemoflow(path: impl AsRef<Path>) -> Result<Vec<CemoflowRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match Format::from_path(path) {
        Format::Csv => read_cemoflow_csv(file),
        Format::Jsonl => read_cemoflow_jsonl(std::io::BufReader::new(file)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    #[serde(rename = "25%")]
    pub p25: f64,
    #[serde(rename = "50%")]
    pub p50: f64,
    #[serde(rename = "75%")]
    pub p75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub columns: Vec<ColumnStats>,
}

impl SummaryStats {
    pub fn get(&self, column: &str) -> Option<&ColumnStats> {
        self.columns.iter().find(|c| c.column == column)
    }
}

/// Linear interpolation between the closest order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Count, mean, sample standard deviation, min, quartiles and max of one
/// column. A single value has standard deviation 0.
pub fn column_stats(name: &str, values: &[f64]) -> Result<ColumnStats> {
    if values.is_empty() {
        return Err(Error::domain("statistics of an empty column"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ColumnStats {
        column: name.to_string(),
        count: n,
        mean,
        std,
        min: sorted[0],
        p25: quantile_sorted(&sorted, 0.25),
        p50: quantile_sorted(&sorted, 0.5),
        p75: quantile_sorted(&sorted, 0.75),
        max: sorted[n - 1],
    })
}

pub fn summary_stats(rows: &[CemoflowRow]) -> Result<SummaryStats> {
    if rows.is_empty() {
        return Err(Error::domain("statistics of an empty dataset"));
    }
    let columns = COLUMNS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = rows.iter().map(|r| r.to_array()[i]).collect();
            column_stats(name, &values)
        })
        .collect::<Result<_>>()?;
    Ok(SummaryStats { columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::EmotionVector;
    use crate::ingest::{Timestamp, UtteranceRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(conv: &str, ts: &str, e: EmotionVector) -> AnnotatedRecord {
        AnnotatedRecord {
            record: UtteranceRecord {
                timestamp: ts.parse::<Timestamp>().unwrap(),
                conversation_id: conv.into(),
                speaker_id: "s".into(),
                text: "hello there".into(),
                is_noise: false,
            },
            emotion: e,
        }
    }

    fn random_segment(rng: &mut ChaCha8Rng, conv: &str, n: usize) -> Vec<AnnotatedRecord> {
        let mut secs = 12 * 3600 + rng.random_range(0..3600);
        (0..n)
            .map(|i| {
                if i > 0 {
                    secs += rng.random_range(0..200);
                }
                let ts = format!("2024:03:05:{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60);
                let raw: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
                let s: f64 = raw.iter().sum();
                record(conv, &ts, EmotionVector(raw.map(|v| v / s)))
            })
            .collect()
    }

    #[test]
    fn two_knot_segment() {
        let seg = vec![
            record("a", "2024:01:01:10:00:00", EmotionVector::one_hot(0)),
            record("a", "2024:01:01:10:00:08", EmotionVector::one_hot(3)),
        ];
        let (rows, infos) = build_cemoflow(std::slice::from_ref(&seg), 4).unwrap();
        assert_eq!(rows.len(), 5);
        let knots = knot_rows(&seg).unwrap();
        assert_eq!(rows[0], knots[0]);
        assert_eq!(rows[4], knots[1]);
        assert_eq!(rows[0].tau, 0.0);
        assert_eq!(rows[0].delta_mag, 0.0);
        assert_eq!(infos[0].row_count, 5);
        assert_eq!(infos[0].knot_count, 2);
    }

    #[test]
    fn twenty_knots_at_default_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let seg = random_segment(&mut rng, "c", 20);
        let (rows, _) = build_cemoflow(&[seg], DEFAULT_FACTOR).unwrap();
        assert_eq!(rows.len(), 26 * 19 + 1);
        assert_eq!(rows.len(), 495);
    }

    #[test]
    fn constant_emotions_stay_flat() {
        let e = EmotionVector([0.1, 0.2, 0.3, 0.1, 0.2, 0.1]);
        let seg: Vec<AnnotatedRecord> = (0..6)
            .map(|i| record("k", &format!("2024:01:01:08:{:02}:30", i * 3), e))
            .collect();
        let (rows, _) = build_cemoflow(&[seg], 10).unwrap();
        for r in &rows {
            for j in 0..NUM_EMOTIONS {
                assert!((r.e[j] - e.0[j]).abs() < 1e-15);
            }
            assert_eq!(r.delta_mag, 0.0);
        }
    }

    #[test]
    fn segments_concatenate_and_split_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let segs = vec![
            random_segment(&mut rng, "a", 5),
            vec![record("solo", "2024:01:01:00:00:00", EmotionVector::uniform())],
            random_segment(&mut rng, "b", 7),
        ];
        let factor = 3;
        let (rows, infos) = build_cemoflow(&segs, factor).unwrap();
        let expected: usize = segs.iter().map(|s| factor * (s.len() - 1) + 1).sum();
        assert_eq!(rows.len(), expected);
        assert!(rows.windows(2).all(|w| w[1].t_tilde >= w[0].t_tilde));
        let from_sidecar = split_segments(&rows, Some(&infos)).unwrap();
        let from_repeats = split_segments(&rows, None).unwrap();
        assert_eq!(from_sidecar, from_repeats);
        assert_eq!(from_sidecar.len(), 3);
        for r in &from_sidecar {
            assert_eq!(rows[r.start].tau, 0.0);
            assert_eq!(rows[r.start].delta_mag, 0.0);
        }
    }

    #[test]
    fn rejects_bad_factor() {
        let seg = vec![record("a", "2024:01:01:10:00:00", EmotionVector::uniform())];
        assert!(build_cemoflow(&[seg], 0).is_err());
    }

    fn random_rows(n: usize, seed: u64) -> Vec<CemoflowRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: [f64; 15] = std::array::from_fn(|_| {
                    let m: f64 = rng.random_range(-1.0..1.0);
                    m * 10f64.powi(rng.random_range(-12..6))
                });
                CemoflowRow::from_array(a)
            })
            .collect()
    }

    #[test]
    fn csv_and_jsonl_round_trip_bit_exact() {
        let mut rows = random_rows(100, 1);
        rows[0].tau = -0.0;
        rows[1].e[0] = f64::MIN_POSITIVE;
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("d.csv", Format::Csv), ("d.jsonl", Format::Jsonl)] {
            let path = dir.path().join(name);
            assert_eq!(write_cemoflow(&rows, &path, fmt).unwrap(), 100);
            let back = read_cemoflow(&path).unwrap();
            assert_eq!(back.len(), rows.len());
            for (a, b) in rows.iter().zip(&back) {
                for (x, y) in a.to_array().iter().zip(b.to_array()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn empty_write_is_header_only() {
        let mut buf = Vec::new();
        assert_eq!(write_cemoflow_to(&[], &mut buf, Format::Csv).unwrap(), 0);
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t_tilde,tau,e0,e1,e2,e3,e4,e5,delta,sin_h,cos_h,sin_m,cos_m,sin_s,cos_s\n"
        );
        assert!(write_cemoflow(&[], "/nonexistent-dir/x.csv", Format::Csv).is_err());
    }

    #[test]
    fn jsonl_keys_match_header() {
        let mut buf = Vec::new();
        write_cemoflow_to(&random_rows(2, 2), &mut buf, Format::Jsonl).unwrap();
        for line in String::from_utf8(buf).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
            let mut want = COLUMNS.to_vec();
            keys.sort_unstable();
            want.sort_unstable();
            assert_eq!(keys, want);
            let order: Vec<&str> = line.split('"').skip(1).step_by(2).collect();
            assert_eq!(order, COLUMNS);
        }
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let text = "t,tau\n1,2\n";
        assert!(matches!(read_cemoflow_csv(text.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn stats_examples() {
        let s = column_stats("x", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.count, s.mean, s.std, s.min, s.p50, s.max), (3, 2.0, 1.0, 1.0, 2.0, 3.0));
        assert_eq!((s.p25, s.p75), (1.5, 2.5));
        assert_eq!(column_stats("c", &[4.0; 9]).unwrap().std, 0.0);
        let one = column_stats("o", &[7.5]).unwrap();
        assert_eq!([one.min, one.p25, one.p50, one.p75, one.max], [7.5; 5]);
        assert!(summary_stats(&[]).is_err());

        let rows = random_rows(50, 5);
        let st = summary_stats(&rows).unwrap();
        assert_eq!(st.columns.len(), 15);
        for c in &st.columns {
            assert_eq!(c.count, 50);
            assert!(c.min <= c.p25 && c.p25 <= c.p50 && c.p50 <= c.p75 && c.p75 <= c.max);
        }
    }
}
