//! Steering vectors in a decoder embedding space: a convex mix of six
//! emotion anchors, scaled by how fast the latent state is moving, added to
//! hidden states at chosen layers.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{EmotionVector, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::seed::component_rng;

const UNIT_TOL: f64 = 1e-9;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    d_emb: usize,
    anchors: Vec<Vec<f64>>,
}

impl AnchorSet {
    /// Takes six unit vectors of equal dimension.
    pub fn new(anchors: Vec<Vec<f64>>) -> Result<Self> {
        if anchors.len() != NUM_EMOTIONS {
            return Err(Error::domain(format!("need {NUM_EMOTIONS} anchors, got {}", anchors.len())));
        }
        let d_emb = anchors[0].len();
        if d_emb == 0 {
            return Err(Error::domain("anchor dimension must be positive"));
        }
        for (j, a) in anchors.iter().enumerate() {
            if a.len() != d_emb {
                return Err(Error::domain(format!(
                    "anchor {j} has dimension {}, expected {d_emb}",
                    a.len()
                )));
            }
            let n = norm(a);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::domain(format!("anchor {j} has norm {n}, expected 1")));
            }
        }
        Ok(AnchorSet { d_emb, anchors })
    }

    /// Scales each row to unit length first.
    pub fn normalized(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(j, r)| {
                let n = norm(&r);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::domain(format!("anchor {j} cannot be normalised (norm {n})")));
                }
                Ok(r.into_iter().map(|x| x / n).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(rows)
    }

    /// Seeded random orthonormal anchors (Gram-Schmidt, two passes).
    pub fn random_orthonormal(d_emb: usize, seed: u64) -> Result<Self> {
        if d_emb < NUM_EMOTIONS {
            return Err(Error::domain(format!(
                "orthonormal anchors need d_emb >= {NUM_EMOTIONS}, got {d_emb}"
            )));
        }
        let mut rng = component_rng(seed, "steering.anchors");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(NUM_EMOTIONS);
        while basis.len() < NUM_EMOTIONS {
            let mut v: Vec<f64> = (0..d_emb).map(|_| rng.random_range(-1.0..1.0)).collect();
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Self::new(basis)
    }

    pub fn dim(&self) -> usize {
        self.d_emb
    }

    pub fn anchor(&self, j: usize) -> &[f64] {
        &self.anchors[j]
    }

    /// Header-less CSV, six rows of `d_emb` numbers; rows are normalised.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let row = rec
                .iter()
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| Error::Row {
                        line,
                        message: format!("anchor value `{s}` is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::normalized(rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for a in &self.anchors {
            let row: Vec<String> = a.iter().map(|v| format!("{v:.16e}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub u: Vec<f64>,
    pub strength: f64,
    pub source_t: f64,
    pub source_state: Vec<f64>,
}

impl SteeringVector {
    pub fn with_source(mut self, t: f64, state: Vec<f64>) -> Self {
        self.source_t = t;
        self.source_state = state;
        self
    }
}

/// `u = normalize(sum_j e_j a_j)` with strength `lambda_base * (1 + |dh/dt|)`.
pub fn build_steering(
    emotions: &EmotionVector,
    dhdt_norm: f64,
    anchors: &AnchorSet,
    lambda_base: f64,
) -> Result<SteeringVector> {
    if !(dhdt_norm >= 0.0 && dhdt_norm.is_finite()) {
        return Err(Error::domain(format!("slope norm must be finite and >= 0, got {dhdt_norm}")));
    }
    if !(lambda_base >= 0.0 && lambda_base.is_finite()) {
        return Err(Error::domain(format!("lambda_base must be finite and >= 0, got {lambda_base}")));
    }
    if emotions.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("emotion vector is not finite"));
    }
    let mut v = vec![0.0; anchors.dim()];
    for (e, a) in emotions.0.iter().zip(&anchors.anchors) {
        if *e != 0.0 {
            v.iter_mut().zip(a).for_each(|(x, y)| *x += e * y);
        }
    }
    let n = norm(&v);
    if !(n > 1e-300) {
        return Err(Error::domain("emotion mix of the anchors is the zero vector"));
    }
    // already unit within rounding: keep bit-for-bit
    if (n - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(SteeringVector {
        u: v,
        strength: lambda_base * (1.0 + dhdt_norm),
        source_t: 0.0,
        source_state: Vec::new(),
    })
}

/// `hidden + strength * u`.
pub fn inject(hidden: &[f64], sv: &SteeringVector) -> Result<Vec<f64>> {
    if hidden.len() != sv.u.len() {
        return Err(Error::domain(format!(
            "hidden state has dimension {}, steering vector {}",
            hidden.len(),
            sv.u.len()
        )));
    }
    if sv.strength == 0.0 {
        return Ok(hidden.to_vec());
    }
    Ok(hidden.iter().zip(&sv.u).map(|(h, u)| h + sv.strength * u).collect())
}

/// Stand-in for a decoder: seeded pseudo-random hidden states per
/// (layer, position), independent across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockDecoder {
    pub d_emb: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub layer: usize,
    pub position: usize,
    pub pre_norm: f64,
    pub post_norm: f64,
    /// Norm of `post - pre`.
    pub shift_norm: f64,
    /// `<pre, u>`, zero when unsteered.
    pub dot_u: f64,
    pub injected: bool,
}

impl MockDecoder {
    pub fn hidden(&self, layer: usize, position: usize) -> Vec<f64> {
        let mut rng = component_rng(self.seed, &format!("mock_decoder.{layer}.{position}"));
        (0..self.d_emb).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Runs every layer over every position, injecting `sv` at `inject_layers`.
    pub fn run(
        &self,
        seq_len: usize,
        layers: usize,
        sv: &SteeringVector,
        inject_layers: &[usize],
    ) -> Result<Vec<TraceEntry>> {
        if let Some(&bad) = inject_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::domain(format!("layer {bad} out of range for {layers} layers")));
        }
        if sv.u.len() != self.d_emb {
            return Err(Error::domain(format!(
                "steering vector has dimension {}, decoder {}",
                sv.u.len(),
                self.d_emb
            )));
        }
        let mut trace = Vec::with_capacity(seq_len * layers);
        for layer in 0..layers {
            let injected = inject_layers.contains(&layer);
            for position in 0..seq_len {
                let pre = self.hidden(layer, position);
                let post = if injected { inject(&pre, sv)? } else { pre.clone() };
                let shift: Vec<f64> = post.iter().zip(&pre).map(|(a, b)| a - b).collect();
                trace.push(TraceEntry {
                    layer,
                    position,
                    pre_norm: norm(&pre),
                    post_norm: norm(&post),
                    shift_norm: norm(&shift),
                    dot_u: if injected {
                        pre.iter().zip(&sv.u).map(|(a, b)| a * b).sum()
                    } else {
                        0.0
                    },
                    injected,
                });
            }
        }
        Ok(trace)
    }
}

/// One line of the steering export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRecord {
    pub t: f64,
    pub u: Vec<f64>,
    pub lambda: f64,
    pub emotions: [f64; NUM_EMOTIONS],
}

pub fn write_steering_jsonl(records: &[SteeringRecord], path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

pub fn read_steering_jsonl(path: impl AsRef<Path>) -> Result<Vec<SteeringRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
