//! Emotion soft labels: temperature-scaled softmax, precomputed annotation
//! files, and batched calls to an external encoder endpoint.

use std::ops::Range;
use std::path::Path;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UtteranceRecord;

pub const NUM_EMOTIONS: usize = 6;

/// Label order shared by every emotion vector, file and wire message.
pub const LABELS: [&str; NUM_EMOTIONS] = ["sadness", "joy", "love", "anger", "fear", "surprise"];

/// Sum deviation that is silently renormalized; anything larger is rejected.
pub const SIMPLEX_RENORM_TOL: f64 = 1e-4;

/// A probability distribution over the six emotion labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionVector(pub [f64; NUM_EMOTIONS]);

impl EmotionVector {
    pub fn uniform() -> Self {
        EmotionVector([1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS])
    }

    pub fn one_hot(index: usize) -> Self {
        let mut e = [0.0; NUM_EMOTIONS];
        e[index] = 1.0;
        EmotionVector(e)
    }

    /// Validates raw probabilities read from a file. Sums within
    /// [`SIMPLEX_RENORM_TOL`] of one are divided by their own sum.
    pub fn from_probabilities(raw: [f64; NUM_EMOTIONS], row: usize) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("annotation row {row}: non-finite value")));
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_RENORM_TOL {
            return Err(Error::Simplex { row, sum });
        }
        let e = raw.map(|v| v / sum);
        if e.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!(
                "annotation row {row}: component outside [0, 1]"
            )));
        }
        Ok(EmotionVector(e))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of `z / delta`.
pub fn softmax_scaled(z: &[f64], delta: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| ((v - max) / delta).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn temperature_softmax(z: &[f64; NUM_EMOTIONS], delta: f64) -> Result<EmotionVector> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {delta}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("logits must be finite"));
    }
    let p = softmax_scaled(z, delta);
    let mut e = [0.0; NUM_EMOTIONS];
    e.copy_from_slice(&p);
    Ok(EmotionVector(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRecord {
    pub record: UtteranceRecord,
    pub emotion: EmotionVector,
}

/// Reads an `e0..e5` CSV, one validated vector per row.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<EmotionVector>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations_from(file)
}

pub fn read_annotations_from<R: std::io::Read>(reader: R) -> Result<Vec<EmotionVector>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; NUM_EMOTIONS];
    for (j, col) in cols.iter_mut().enumerate() {
        let name = format!("e{j}");
        *col = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("annotation file missing column `{name}`")))?;
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut raw = [0.0; NUM_EMOTIONS];
        for (j, &c) in cols.iter().enumerate() {
            raw[j] = rec[c].trim().parse().map_err(|_| Error::Row {
                line: rec.position().map(|p| p.line()).unwrap_or(0),
                message: format!("e{j} `{}` is not a number", &rec[c]),
            })?;
        }
        out.push(EmotionVector::from_probabilities(raw, row)?);
    }
    Ok(out)
}

pub fn pair_annotations(
    records: Vec<UtteranceRecord>,
    emotions: Vec<EmotionVector>,
) -> Result<Vec<AnnotatedRecord>> {
    if records.len() != emotions.len() {
        return Err(Error::CountMismatch {
            records: records.len(),
            annotations: emotions.len(),
        });
    }
    Ok(records
        .into_iter()
        .zip(emotions)
        .map(|(record, emotion)| AnnotatedRecord { record, emotion })
        .collect())
}

pub fn annotate_from_file(
    records: Vec<UtteranceRecord>,
    path: impl AsRef<Path>,
) -> Result<Vec<AnnotatedRecord>> {
    pair_annotations(records, read_annotations(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    #[default]
    File,
    Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub delta: f64,
    pub source: AnnotationSource,
    pub endpoint_url: Option<String>,
    pub batch_size: usize,
    pub max_concurrent: usize,
    /// Sent as a bearer token when present.
    #[serde(skip_serializing)]
    pub api_token: Option<String>,
    /// First retry delay; doubles on each further attempt.
    pub retry_base_ms: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            delta: 1.0,
            source: AnnotationSource::File,
            endpoint_url: None,
            batch_size: 32,
            max_concurrent: 4,
            api_token: None,
            retry_base_ms: 200,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::domain(format!("delta must be positive, got {}", self.delta)));
        }
        if self.batch_size == 0 || self.max_concurrent == 0 {
            return Err(Error::domain("batch_size and max_concurrent must be at least 1"));
        }
        if self.source == AnnotationSource::Endpoint && self.endpoint_url.is_none() {
            return Err(Error::domain("endpoint source requires endpoint_url"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub labels: Vec<String>,
    pub logits: Vec<[f64; NUM_EMOTIONS]>,
}

pub const MAX_ATTEMPTS: usize = 3;

/// Index ranges of consecutive batches of at most `batch_size` items.
pub fn plan_batches(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|start| start..(start + batch_size).min(n))
        .collect()
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

async fn post_batch(
    client: &reqwest::Client,
    url: &str,
    token: Option<&str>,
    texts: &[String],
) -> std::result::Result<AnnotateResponse, Attempt> {
    let mut req = client.post(url).json(&AnnotateRequest {
        texts: texts.to_vec(),
    });
    if let Some(token) = token {
        req = req.bearer_auth(token);
    }
    let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let msg = format!("HTTP {status}");
        return Err(if status.is_server_error() || status.as_u16() == 429 {
            Attempt::Retry(msg)
        } else {
            Attempt::Fatal(msg)
        });
    }
    resp.json::<AnnotateResponse>()
        .await
        .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))
}

async fn annotate_batch(
    client: &reqwest::Client,
    url: &str,
    cfg: &AnnotationConfig,
    batch: usize,
    texts: &[String],
) -> Result<Vec<EmotionVector>> {
    let mut delay = Duration::from_millis(cfg.retry_base_ms);
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        match post_batch(client, url, cfg.api_token.as_deref(), texts).await {
            Ok(resp) => {
                if resp.labels.iter().map(String::as_str).ne(LABELS) {
                    return Err(Error::Endpoint {
                        batch,
                        message: format!("label order {:?} does not match {:?}", resp.labels, LABELS),
                    });
                }
                if resp.logits.len() != texts.len() {
                    return Err(Error::Endpoint {
                        batch,
                        message: format!(
                            "sent {} texts but received {} logit rows",
                            texts.len(),
                            resp.logits.len()
                        ),
                    });
                }
                return resp
                    .logits
                    .iter()
                    .map(|z| temperature_softmax(z, cfg.delta))
                    .collect();
            }
            Err(Attempt::Fatal(message)) => return Err(Error::Endpoint { batch, message }),
            Err(Attempt::Retry(message)) => {
                log::warn!("batch {batch} attempt {} failed: {message}", attempt + 1);
                last = message;
                if attempt + 1 < MAX_ATTEMPTS {
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                }
            }
        }
    }
    Err(Error::Endpoint {
        batch,
        message: format!("failed after {MAX_ATTEMPTS} attempts: {last}"),
    })
}

/// Annotates records through `POST {endpoint_url}/v1/annotate`. Up to
/// `max_concurrent` batches are in flight; output keeps input order.
pub async fn annotate_from_endpoint(
    records: Vec<UtteranceRecord>,
    cfg: &AnnotationConfig,
) -> Result<Vec<AnnotatedRecord>> {
    cfg.validate()?;
    let base = cfg
        .endpoint_url
        .as_deref()
        .ok_or_else(|| Error::domain("endpoint_url not set"))?;
    let url = format!("{}/v1/annotate", base.trim_end_matches('/'));
    let client = reqwest::Client::new();
    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();

    let batches = plan_batches(texts.len(), cfg.batch_size);
    let mut results: Vec<(usize, Result<Vec<EmotionVector>>)> =
        stream::iter(batches.into_iter().enumerate())
            .map(|(i, range)| {
                let (client, url, texts) = (&client, &url, &texts);
                async move { (i, annotate_batch(client, url, cfg, i, &texts[range]).await) }
            })
            .buffer_unordered(cfg.max_concurrent)
            .collect()
            .await;
    results.sort_by_key(|(i, _)| *i);

    let mut emotions = Vec::with_capacity(records.len());
    for (_, r) in results {
        emotions.extend(r?);
    }
    pair_annotations(records, emotions)
}
