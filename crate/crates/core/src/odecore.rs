//! Explicit Runge-Kutta integrators: classical RK4 for fixed grids and the
//! Dormand-Prince 5(4) pair with step-size control and dense output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side `dh/dt = f(t, h)` of a first-order system.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, h: &[f64], dh: &mut [f64]);
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, h: &[f64], dh: &mut [f64]) {
        (**self).eval(t, h, dh)
    }
}

/// Wraps a closure as a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, h: &[f64], dh: &mut [f64]) {
        (self.f)(t, h, dh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-6,
            atol: 1e-8,
            h_init: 1e-2,
            h_min: 1e-12,
            h_max: 1e6,
            max_steps: 100_000,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::domain("rtol and atol must be positive"));
        }
        if !(0.0 < self.h_min && self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return Err(Error::domain(format!(
                "need 0 < h_min <= h_init <= h_max, got {} / {} / {}",
                self.h_min, self.h_init, self.h_max
            )));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(Error::domain("safety factor must lie in (0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(Error::domain("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub ts: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_fev: usize,
}

impl OdeSolution {
    pub fn last_state(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }
}

fn axpy(out: &mut [f64], y: &[f64], terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut acc = y[i];
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = acc;
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericBlowup { t })
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F: VectorField + ?Sized>(f: &F, t: f64, y: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("step must be positive, got {dt}")));
    }
    let n = y.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    f.eval(t, y, &mut k1);
    axpy(&mut tmp, y, &[(dt / 2.0, &k1)]);
    f.eval(t + dt / 2.0, &tmp, &mut k2);
    axpy(&mut tmp, y, &[(dt / 2.0, &k2)]);
    f.eval(t + dt / 2.0, &tmp, &mut k3);
    axpy(&mut tmp, y, &[(dt, &k3)]);
    f.eval(t + dt, &tmp, &mut k4);
    let mut out = vec![0.0; n];
    axpy(
        &mut out,
        y,
        &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)],
    );
    check_finite(&out, t + dt)?;
    Ok(out)
}

/// Dormand-Prince 5(4) tableau, as correctly rounded rationals.
pub mod tableau {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

    pub const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];

    /// Fifth-order weights (equal to the last row of `A`).
    pub const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];

    /// Embedded fourth-order weights.
    pub const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    /// `B5 - B4`, written out exactly.
    pub const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    /// Continuous-extension coefficients.
    pub const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];
}

/// Stage derivatives of one Dormand-Prince step; `k[0]` must hold `f(t, y)`.
/// Returns the fifth-order solution. `k[6]` ends up as `f(t + dt, y_new)`.
fn dopri5_stages<F: VectorField + ?Sized>(
    f: &F,
    t: f64,
    y: &[f64],
    dt: f64,
    k: &mut [Vec<f64>; 7],
    tmp: &mut [f64],
) -> Vec<f64> {
    use tableau::{A, C};
    let n = y.len();
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, a) in A[s][..s].iter().enumerate() {
                acc += a * k[j][i];
            }
            tmp[i] = y[i] + dt * acc;
        }
        f.eval(t + C[s] * dt, tmp, &mut k[s]);
    }
    // stage 7 was evaluated at y + dt * sum(A[6] k) = y5
    tmp.to_vec()
}

/// One fixed step of the fifth-order Dormand-Prince formula.
pub fn dopri5_fixed_step<F: VectorField + ?Sized>(f: &F, t: f64, y: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    f.eval(t, y, &mut k[0]);
    let out = dopri5_stages(f, t, y, dt, &mut k, &mut tmp);
    check_finite(&out, t + dt)?;
    Ok(out)
}

fn dense_coefficients(y: &[f64], y_new: &[f64], k: &[Vec<f64>; 7], dt: f64) -> [Vec<f64>; 5] {
    let n = y.len();
    let mut r: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let ydiff = y_new[i] - y[i];
        let bspl = dt * k[0][i] - ydiff;
        r[0][i] = y[i];
        r[1][i] = ydiff;
        r[2][i] = bspl;
        r[3][i] = ydiff - dt * k[6][i] - bspl;
        let mut acc = 0.0;
        for (j, d) in tableau::D.iter().enumerate() {
            acc += d * k[j][i];
        }
        r[4][i] = dt * acc;
    }
    r
}

fn dense_eval(r: &[Vec<f64>; 5], theta: f64) -> Vec<f64> {
    let th1 = 1.0 - theta;
    (0..r[0].len())
        .map(|i| r[0][i] + theta * (r[1][i] + th1 * (r[2][i] + theta * (r[3][i] + th1 * r[4][i]))))
        .collect()
}

/// Adaptive Dormand-Prince integration from `t0` to `t1`.
///
/// With `output_ts` the solution is reported at exactly those times (strictly
/// increasing, inside `[t0, t1]`) via the continuous extension; otherwise at
/// `t0` and every accepted step.
pub fn dopri5_solve<F: VectorField + ?Sized>(
    f: &F,
    t0: f64,
    t1: f64,
    h0: &[f64],
    cfg: &SolverConfig,
    output_ts: Option<&[f64]>,
) -> Result<OdeSolution> {
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::domain(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    if h0.len() != f.dim() {
        return Err(Error::domain(format!(
            "initial state has {} components, field expects {}",
            h0.len(),
            f.dim()
        )));
    }
    check_finite(h0, t0)?;
    if let Some(out) = output_ts {
        if out.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("output times must be strictly increasing"));
        }
        if out.first().is_some_and(|&a| a < t0) || out.last().is_some_and(|&b| b > t1) {
            return Err(Error::domain("output times must lie inside [t0, t1]"));
        }
    }

    let n = h0.len();
    let mut sol = OdeSolution {
        ts: Vec::new(),
        states: Vec::new(),
        n_accepted: 0,
        n_rejected: 0,
        n_fev: 0,
    };
    let mut pending = output_ts.unwrap_or(&[]);
    match output_ts {
        None => {
            sol.ts.push(t0);
            sol.states.push(h0.to_vec());
        }
        Some(_) => {
            while let Some((&first, rest)) = pending.split_first() {
                if first > t0 {
                    break;
                }
                sol.ts.push(first);
                sol.states.push(h0.to_vec());
                pending = rest;
            }
        }
    }

    let mut t = t0;
    let mut y = h0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    f.eval(t, &y, &mut k[0]);
    sol.n_fev += 1;
    let mut dt = cfg.h_init.min(cfg.h_max);

    while t < t1 {
        if sol.n_accepted + sol.n_rejected >= cfg.max_steps {
            return Err(Error::NonConvergence {
                max_steps: cfg.max_steps,
                t_end: t1,
            });
        }
        let last = t + dt >= t1 || (t1 - t - dt).abs() <= 1e-12 * t1.abs().max(1.0);
        let step = if last { t1 - t } else { dt };

        let y_new = dopri5_stages(f, t, &y, step, &mut k, &mut tmp);
        sol.n_fev += 6;

        let mut sum = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, c) in tableau::E.iter().enumerate() {
                e += c * k[j][i];
            }
            e *= step;
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            sum += (e / sc).powi(2);
        }
        let err = (sum / n as f64).sqrt();

        if err <= 1.0 {
            let t_new = if last { t1 } else { t + step };
            if output_ts.is_some() {
                let r = dense_coefficients(&y, &y_new, &k, step);
                while let Some((&to, rest)) = pending.split_first() {
                    if to > t_new {
                        break;
                    }
                    let state = if to == t_new {
                        y_new.clone()
                    } else {
                        dense_eval(&r, (to - t) / step)
                    };
                    sol.ts.push(to);
                    sol.states.push(state);
                    pending = rest;
                }
            } else {
                sol.ts.push(t_new);
                sol.states.push(y_new.clone());
            }
            t = t_new;
            y = y_new;
            k.swap(0, 6);
            sol.n_accepted += 1;
            let factor = if err == 0.0 {
                5.0
            } else {
                (cfg.safety * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            dt = (step * factor).clamp(cfg.h_min, cfg.h_max);
        } else {
            if step <= cfg.h_min {
                return Err(Error::Stiffness {
                    t,
                    h_min: cfg.h_min,
                    err,
                });
            }
            sol.n_rejected += 1;
            let factor = if err.is_finite() {
                (cfg.safety * err.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.2
            };
            dt = (step * factor).max(cfg.h_min);
        }
    }
    check_finite(&y, t)?;
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedMethod {
    Rk4,
    /// The fifth-order Dormand-Prince combination without error control.
    Dopri5,
}

/// Integrates with `n_steps` equal steps and returns the final state.
pub fn integrate_fixed<F: VectorField + ?Sized>(
    f: &F,
    method: FixedMethod,
    t0: f64,
    t1: f64,
    y0: &[f64],
    n_steps: usize,
) -> Result<Vec<f64>> {
    let dt = (t1 - t0) / n_steps as f64;
    let mut y = y0.to_vec();
    for s in 0..n_steps {
        let t = t0 + s as f64 * dt;
        y = match method {
            FixedMethod::Rk4 => rk4_step(f, t, &y, dt)?,
            FixedMethod::Dopri5 => dopri5_fixed_step(f, t, &y, dt)?,
        };
    }
    Ok(y)
}

/// Observed convergence order: least-squares slope of `ln(error)` against
/// `ln(dt)` over fixed-step runs at each step size in `steps`. Returns `None`
/// when every error is at machine precision (nothing to fit).
pub fn order_check<F, X>(
    f: &F,
    exact: X,
    y0: &[f64],
    t0: f64,
    t1: f64,
    steps: &[f64],
    method: FixedMethod,
) -> Result<Option<f64>>
where
    F: VectorField + ?Sized,
    X: Fn(f64) -> Vec<f64>,
{
    if steps.len() < 4 {
        return Err(Error::domain("order check needs at least 4 step sizes"));
    }
    let want = exact(t1);
    let mut pts = Vec::with_capacity(steps.len());
    for &dt in steps {
        let n = ((t1 - t0) / dt).round().max(1.0) as usize;
        let got = integrate_fixed(f, method, t0, t1, y0, n)?;
        let err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = want.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if err <= 4.0 * f64::EPSILON * scale {
            continue;
        }
        pts.push((((t1 - t0) / n as f64).ln(), err.ln()));
    }
    if pts.len() < 2 {
        return Ok(None);
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(Some(sxy / sxx))
}
