//! Corpus ingestion: CSV parsing, noise cleaning and conversation segmentation.
//!
//! A corpus is a CSV file with one utterance per row. Timestamps use the
//! colon-separated `yyyy:MM:dd:hh:mm:ss` layout.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hh: u32,
    pub mm: u32,
    pub ss: u32,
}

impl Timestamp {
    pub fn new(year: i32, month: u32, day: u32, hh: u32, mm: u32, ss: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::domain(format!("month {month} out of range 1-12")));
        }
        if !(1..=31).contains(&day) {
            return Err(Error::domain(format!("day {day} out of range 1-31")));
        }
        if hh > 23 || mm > 59 || ss > 59 {
            return Err(Error::domain(format!(
                "time {hh:02}:{mm:02}:{ss:02} out of range"
            )));
        }
        if NaiveDate::from_ymd_opt(year, month, day).is_none() {
            return Err(Error::domain(format!(
                "{year:04}-{month:02}-{day:02} is not a calendar date"
            )));
        }
        Ok(Timestamp {
            year,
            month,
            day,
            hh,
            mm,
            ss,
        })
    }

    pub fn seconds_of_day(&self) -> u32 {
        self.hh * 3600 + self.mm * 60 + self.ss
    }

    /// Seconds since 1970-01-01T00:00:00, timezone-naive.
    pub fn epoch_seconds(&self) -> i64 {
        let date = NaiveDate::from_ymd_opt(self.year, self.month, self.day)
            .expect("validated at construction");
        let days = date
            .signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
            .num_days();
        days * 86_400 + i64::from(self.seconds_of_day())
    }
}

impl FromStr for Timestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 6 {
            return Err(Error::domain(format!(
                "timestamp `{s}` does not have six colon-separated fields"
            )));
        }
        let field = |i: usize, name: &str| -> Result<u32> {
            let p = parts[i];
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::domain(format!("timestamp `{s}`: bad {name} `{p}`")));
            }
            p.parse()
                .map_err(|_| Error::domain(format!("timestamp `{s}`: bad {name} `{p}`")))
        };
        let year = field(0, "year")? as i32;
        Timestamp::new(
            year,
            field(1, "month")?,
            field(2, "day")?,
            field(3, "hour")?,
            field(4, "minute")?,
            field(5, "second")?,
        )
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:04}:{:02}:{:02}:{:02}:{:02}:{:02}",
            self.year, self.month, self.day, self.hh, self.mm, self.ss
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub timestamp: Timestamp,
    pub conversation_id: String,
    pub speaker_id: String,
    pub text: String,
    pub is_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub conversation_id: String,
    pub records: Vec<UtteranceRecord>,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

impl Segment {
    pub fn is_noise(&self) -> bool {
        self.records.iter().any(|r| r.is_noise)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Column names used to locate the required fields in a corpus header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub timestamp: String,
    pub conversation_id: String,
    pub speaker_id: String,
    pub text: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            timestamp: "timestamp".into(),
            conversation_id: "conversation_id".into(),
            speaker_id: "speaker_id".into(),
            text: "text".into(),
        }
    }
}

pub fn parse_corpus(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_reader(file, schema)
}

pub fn parse_corpus_reader<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Vec<UtteranceRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    // a zero-byte file has no header and no rows
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let i_ts = find(&schema.timestamp)?;
    let i_conv = find(&schema.conversation_id)?;
    let i_spk = find(&schema.speaker_id)?;
    let i_text = find(&schema.text)?;

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let timestamp: Timestamp = row[i_ts].parse().map_err(|e: Error| Error::Row {
            line,
            message: e.to_string(),
        })?;
        out.push(UtteranceRecord {
            timestamp,
            conversation_id: row[i_conv].to_string(),
            speaker_id: row[i_spk].to_string(),
            text: row[i_text].to_string(),
            is_noise: false,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub removed_rows: usize,
    pub flagged_windows: usize,
    pub stripped_links: usize,
}

const LINK_PREFIXES: [&str; 3] = ["http://", "https://", "www."];

/// Removes every web-link substring (a link prefix up to the next whitespace).
/// Returns the stripped text and the number of links removed.
pub fn strip_links(text: &str) -> (String, usize) {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut count = 0;
    loop {
        let next = LINK_PREFIXES
            .iter()
            .filter_map(|p| rest.find(p))
            .min();
        let Some(start) = next else {
            out.push_str(rest);
            break;
        };
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let end = tail.find(char::is_whitespace).unwrap_or(tail.len());
        rest = &tail[end..];
        count += 1;
    }
    (out, count)
}

fn is_degenerate(text: &str) -> bool {
    text.trim().chars().count() <= 1
}

/// Drops single-character and link-only utterances, strips links from the
/// rest, and flags every surviving record of an affected conversation as noise.
pub fn clean(records: Vec<UtteranceRecord>) -> (Vec<UtteranceRecord>, RemovalReport) {
    let mut report = RemovalReport::default();
    let mut tainted: BTreeSet<String> = BTreeSet::new();
    let mut kept = Vec::with_capacity(records.len());

    for mut rec in records {
        let (stripped, links) = strip_links(&rec.text);
        report.stripped_links += links;
        if is_degenerate(&stripped) {
            report.removed_rows += 1;
            tainted.insert(rec.conversation_id);
            continue;
        }
        rec.text = stripped;
        kept.push(rec);
    }

    let mut flagged: BTreeSet<&str> = BTreeSet::new();
    for rec in &mut kept {
        if tainted.contains(&rec.conversation_id) {
            rec.is_noise = true;
            flagged.insert(&rec.conversation_id);
        }
    }
    report.flagged_windows = flagged.len();
    (kept, report)
}

/// Stable sort by epoch seconds.
pub fn sort_chronologically(mut records: Vec<UtteranceRecord>) -> Vec<UtteranceRecord> {
    records.sort_by_key(|r| r.timestamp.epoch_seconds());
    records
}

/// Groups records into one segment per conversation id, ordered by start time.
pub fn segment(records: Vec<UtteranceRecord>) -> Result<Vec<Segment>> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<UtteranceRecord>> = Vec::new();
    for rec in records {
        let slot = *index.entry(rec.conversation_id.clone()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        let group = &mut groups[slot];
        if let Some(prev) = group.last() {
            if rec.timestamp.epoch_seconds() < prev.timestamp.epoch_seconds() {
                return Err(Error::Ordering {
                    conversation_id: rec.conversation_id,
                    index: group.len(),
                });
            }
        }
        group.push(rec);
    }

    let mut segments: Vec<Segment> = groups
        .into_iter()
        .map(|records| {
            let first = &records[0];
            let last = &records[records.len() - 1];
            Segment {
                conversation_id: first.conversation_id.clone(),
                t_start: first.timestamp,
                t_end: last.timestamp,
                records,
            }
        })
        .collect();
    segments.sort_by_key(|s| s.t_start.epoch_seconds());
    Ok(segments)
}
