//! Segmented cubic Hermite interpolation with finite-difference slopes, plus
//! a natural cubic spline used as the overshoot baseline.

use crate::error::{Error, Result};

/// Hermite basis `[h00, h10, h01, h11]` at local coordinate `x`.
#[inline]
pub fn hermite_basis(x: f64) -> [f64; 4] {
    let x2 = x * x;
    let x3 = x2 * x;
    [
        2.0 * x3 - 3.0 * x2 + 1.0,
        x3 - 2.0 * x2 + x,
        -2.0 * x3 + 3.0 * x2,
        x3 - x2,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteSegment {
    pub t_i: f64,
    pub t_ip1: f64,
    pub v_i: f64,
    pub v_ip1: f64,
    pub m_i: f64,
    pub m_ip1: f64,
}

impl HermiteSegment {
    pub fn new(t_i: f64, t_ip1: f64, v_i: f64, v_ip1: f64, m_i: f64, m_ip1: f64) -> Result<Self> {
        if !(t_ip1 > t_i) {
            return Err(Error::domain(format!(
                "segment knots must increase, got [{t_i}, {t_ip1}]"
            )));
        }
        Ok(HermiteSegment {
            t_i,
            t_ip1,
            v_i,
            v_ip1,
            m_i,
            m_ip1,
        })
    }

    pub fn width(&self) -> f64 {
        self.t_ip1 - self.t_i
    }

    /// Evaluates at local coordinate `x = (t - t_i) / (t_ip1 - t_i)`.
    #[inline]
    pub fn eval_local(&self, x: f64) -> f64 {
        let [h00, h10, h01, h11] = hermite_basis(x);
        let w = self.width();
        h00 * self.v_i + h10 * w * self.m_i + h01 * self.v_ip1 + h11 * w * self.m_ip1
    }

    /// First derivative with respect to `t` at local coordinate `x`.
    pub fn derivative_local(&self, x: f64) -> f64 {
        let x2 = x * x;
        let w = self.width();
        let d00 = 6.0 * x2 - 6.0 * x;
        let d10 = 3.0 * x2 - 4.0 * x + 1.0;
        let d01 = -6.0 * x2 + 6.0 * x;
        let d11 = 3.0 * x2 - 2.0 * x;
        (d00 * self.v_i + d01 * self.v_ip1) / w + d10 * self.m_i + d11 * self.m_ip1
    }

    fn local(&self, t: f64) -> f64 {
        (t - self.t_i) / self.width()
    }
}

pub fn hermite_eval(seg: &HermiteSegment, t: f64) -> Result<f64> {
    if !(seg.t_i..=seg.t_ip1).contains(&t) {
        return Err(Error::domain(format!(
            "t = {t} outside segment [{}, {}]",
            seg.t_i, seg.t_ip1
        )));
    }
    if t == seg.t_ip1 {
        return Ok(seg.v_ip1);
    }
    Ok(seg.eval_local(seg.local(t)))
}

/// Exact integral of the segment's cubic over its interval.
pub fn hermite_integral(seg: &HermiteSegment) -> f64 {
    let w = seg.width();
    w * ((seg.v_i + seg.v_ip1) / 2.0 + w * (seg.m_i - seg.m_ip1) / 12.0)
}

fn check_knots(t: &[f64], v: &[f64], min_len: usize) -> Result<()> {
    if t.len() != v.len() {
        return Err(Error::domain(format!(
            "{} knot times but {} values",
            t.len(),
            v.len()
        )));
    }
    if t.len() < min_len {
        return Err(Error::domain(format!(
            "need at least {min_len} knots, got {}",
            t.len()
        )));
    }
    if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::domain(format!(
            "knot times not strictly increasing at index {}",
            i + 1
        )));
    }
    Ok(())
}

/// Forward difference at the first knot, central differences inside,
/// backward difference at the last knot.
pub fn estimate_slopes(t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_knots(t, v, 2)?;
    let n = t.len();
    let mut m = Vec::with_capacity(n);
    m.push((v[1] - v[0]) / (t[1] - t[0]));
    for i in 1..n - 1 {
        m.push((v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1]));
    }
    m.push((v[n - 1] - v[n - 2]) / (t[n - 1] - t[n - 2]));
    Ok(m)
}

/// One piece `a + b s + c s^2 + d s^3` with `s = t - t_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaturalCubicPiece {
    pub t_i: f64,
    pub t_ip1: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl NaturalCubicPiece {
    pub fn eval(&self, t: f64) -> f64 {
        let s = t - self.t_i;
        self.a + s * (self.b + s * (self.c + s * self.d))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let s = t - self.t_i;
        self.b + s * (2.0 * self.c + 3.0 * s * self.d)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let s = t - self.t_i;
        2.0 * self.c + 6.0 * self.d * s
    }

    pub fn integral(&self) -> f64 {
        let h = self.t_ip1 - self.t_i;
        h * (self.a + h * (self.b / 2.0 + h * (self.c / 3.0 + h * self.d / 4.0)))
    }
}

/// Quadratic coefficients `c_0..c_{n-1}` of the natural cubic spline through
/// the knots (`c_0 = c_{n-1} = 0`), via the Thomas algorithm.
pub fn natural_cubic_coefficients(t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_knots(t, v, 3)?;
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    // sub/diag/super diagonals and rhs for interior unknowns c_1..c_{n-2}
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for k in 0..m {
        let i = k + 1;
        diag[k] = 2.0 * (h[i - 1] + h[i]);
        upper[k] = h[i];
        rhs[k] = 3.0 * ((v[i + 1] - v[i]) / h[i] - (v[i] - v[i - 1]) / h[i - 1]);
    }
    for k in 1..m {
        let lower = h[k];
        let w = lower / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    let mut c = vec![0.0; n];
    for k in (0..m).rev() {
        let next = if k + 1 < m { c[k + 2] } else { 0.0 };
        c[k + 1] = (rhs[k] - upper[k] * next) / diag[k];
    }
    Ok(c)
}

pub fn natural_cubic_fit(t: &[f64], v: &[f64]) -> Result<Vec<NaturalCubicPiece>> {
    let c = natural_cubic_coefficients(t, v)?;
    Ok((0..t.len() - 1)
        .map(|i| {
            let h = t[i + 1] - t[i];
            NaturalCubicPiece {
                t_i: t[i],
                t_ip1: t[i + 1],
                a: v[i],
                b: (v[i + 1] - v[i]) / h - h * (2.0 * c[i] + c[i + 1]) / 3.0,
                c: c[i],
                d: (c[i + 1] - c[i]) / (3.0 * h),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pieces {
    /// A single knot.
    Constant { t: f64, v: f64 },
    Hermite(Vec<HermiteSegment>),
    Natural(Vec<NaturalCubicPiece>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineCurve {
    pub column: String,
    pub pieces: Pieces,
}

impl SplineCurve {
    pub fn domain(&self) -> (f64, f64) {
        match &self.pieces {
            Pieces::Constant { t, .. } => (*t, *t),
            Pieces::Hermite(p) => (p[0].t_i, p[p.len() - 1].t_ip1),
            Pieces::Natural(p) => (p[0].t_i, p[p.len() - 1].t_ip1),
        }
    }

    pub fn num_pieces(&self) -> usize {
        match &self.pieces {
            Pieces::Constant { .. } => 0,
            Pieces::Hermite(p) => p.len(),
            Pieces::Natural(p) => p.len(),
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&t) {
            return Err(Error::domain(format!(
                "t = {t} outside curve domain [{lo}, {hi}]"
            )));
        }
        Ok(match &self.pieces {
            Pieces::Constant { v, .. } => *v,
            Pieces::Hermite(p) => {
                let i = p.partition_point(|s| s.t_ip1 < t).min(p.len() - 1);
                hermite_eval(&p[i], t)?
            }
            Pieces::Natural(p) => {
                let i = p.partition_point(|s| s.t_ip1 < t).min(p.len() - 1);
                p[i].eval(t)
            }
        })
    }

    /// Integral over the whole domain, summed piece by piece.
    pub fn integral(&self) -> f64 {
        match &self.pieces {
            Pieces::Constant { .. } => 0.0,
            Pieces::Hermite(p) => p.iter().map(hermite_integral).sum(),
            Pieces::Natural(p) => p.iter().map(NaturalCubicPiece::integral).sum(),
        }
    }
}

/// Drops all but the last of any run of knots sharing the same time.
pub fn collapse_equal_times(t: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ot: Vec<f64> = Vec::with_capacity(t.len());
    let mut ov: Vec<f64> = Vec::with_capacity(v.len());
    for (&ti, &vi) in t.iter().zip(v) {
        if ot.last() == Some(&ti) {
            *ov.last_mut().unwrap() = vi;
        } else {
            ot.push(ti);
            ov.push(vi);
        }
    }
    (ot, ov)
}

/// Hermite curve through one segment's knots. A single knot yields a
/// constant curve.
pub fn fit_segment(column: &str, t: &[f64], v: &[f64]) -> Result<SplineCurve> {
    if t.len() != v.len() || t.is_empty() {
        return Err(Error::domain(format!(
            "column `{column}`: need matching non-empty knots, got {} and {}",
            t.len(),
            v.len()
        )));
    }
    let (t, v) = collapse_equal_times(t, v);
    let pieces = if t.len() == 1 {
        Pieces::Constant { t: t[0], v: v[0] }
    } else {
        let m = estimate_slopes(&t, &v)?;
        Pieces::Hermite(
            (0..t.len() - 1)
                .map(|i| HermiteSegment {
                    t_i: t[i],
                    t_ip1: t[i + 1],
                    v_i: v[i],
                    v_ip1: v[i + 1],
                    m_i: m[i],
                    m_ip1: m[i + 1],
                })
                .collect(),
        )
    };
    Ok(SplineCurve {
        column: column.to_string(),
        pieces,
    })
}

pub fn fit_natural(column: &str, t: &[f64], v: &[f64]) -> Result<SplineCurve> {
    Ok(SplineCurve {
        column: column.to_string(),
        pieces: Pieces::Natural(natural_cubic_fit(t, v)?),
    })
}

/// Samples each piece at `factor` equally spaced local positions, sharing
/// endpoints at joins: `factor * pieces + 1` points in total.
pub fn resample(curve: &SplineCurve, factor: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if factor == 0 {
        return Err(Error::domain("resample factor must be at least 1"));
    }
    let n = factor * curve.num_pieces() + 1;
    let mut ts = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let inv = 1.0 / factor as f64;
    match &curve.pieces {
        Pieces::Constant { t, v } => {
            ts.push(*t);
            vs.push(*v);
        }
        Pieces::Hermite(pieces) => {
            for p in pieces {
                for k in 0..factor {
                    let x = k as f64 * inv;
                    ts.push(if k == 0 { p.t_i } else { p.t_i + x * p.width() });
                    vs.push(if k == 0 { p.v_i } else { p.eval_local(x) });
                }
            }
            let last = pieces[pieces.len() - 1];
            ts.push(last.t_ip1);
            vs.push(last.v_ip1);
        }
        Pieces::Natural(pieces) => {
            for p in pieces {
                for k in 0..factor {
                    let t = p.t_i + k as f64 * inv * (p.t_ip1 - p.t_i);
                    ts.push(t);
                    vs.push(p.eval(t));
                }
            }
            let last = pieces[pieces.len() - 1];
            ts.push(last.t_ip1);
            vs.push(last.eval(last.t_ip1));
        }
    }
    Ok((ts, vs))
}

/// How far the curve leaves `[data_min, data_max]`, probed at `probe_n`
/// uniformly spaced points across its domain.
pub fn overshoot(curve: &SplineCurve, data_min: f64, data_max: f64, probe_n: usize) -> Result<f64> {
    if probe_n < 100 {
        return Err(Error::domain(format!("need at least 100 probes, got {probe_n}")));
    }
    let (lo, hi) = curve.domain();
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for k in 0..probe_n {
        let t = if k + 1 == probe_n {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (probe_n - 1) as f64
        };
        let v = curve.eval(t)?;
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    Ok((vmax - data_max).max(0.0) + (data_min - vmin).max(0.0))
}
