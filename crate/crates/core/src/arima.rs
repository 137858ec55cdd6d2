//! ARIMA(p, d, q): differencing, least-squares / conditional-sum-of-squares
//! estimation and recursive forecasting.
//!
//! On the `d`-times differenced series `w`:
//! `w_t = c + Σ φ_i w_{t-i} + Σ θ_j e_{t-j} + e_t`.
//! The intercept `c` is estimated only when `d = 0`; differenced models have
//! no drift.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }

    pub fn min_len(&self) -> usize {
        self.p + self.d + self.q + 10
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
    /// All roots of the AR polynomial lie outside the unit circle.
    pub stationary: bool,
    pub invertible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub lag1_autocorrelation: f64,
    /// Ljung-Box statistic and the number of lags it covers.
    pub ljung_box: f64,
    pub ljung_box_lags: usize,
}

/// Apply first differencing `d` times.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::contract(format!(
            "differencing {d} times needs more than {d} values, got {}",
            series.len()
        )));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// First value of each differencing level `0..d`, enough to undo
/// [`difference`] with [`integrate`].
pub fn difference_heads(series: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut heads = Vec::with_capacity(d);
    let mut level = series.to_vec();
    for _ in 0..d {
        heads.push(
            *level
                .first()
                .ok_or_else(|| Error::contract("series too short"))?,
        );
        level = difference(&level, 1)?;
    }
    Ok(heads)
}

/// Inverse of [`difference`]: cumulative sums seeded by `heads`
/// (as returned by [`difference_heads`]).
pub fn integrate(diffs: &[f64], heads: &[f64]) -> Vec<f64> {
    let mut out = diffs.to_vec();
    for &h in heads.iter().rev() {
        let mut acc = h;
        let mut level = Vec::with_capacity(out.len() + 1);
        level.push(acc);
        for v in &out {
            acc += v;
            level.push(acc);
        }
        out = level;
    }
    out
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if max.is_nan() || max <= 0.0 || min <= max * 1e-10 {
        return Err(Error::DegenerateFit(format!(
            "regressor matrix is singular (singular values span [{min:e}, {max:e}]); the series may be constant"
        )));
    }
    svd.solve(y, 0.0)
        .map_err(|e| Error::DegenerateFit(e.to_string()))
}

/// Parameters laid out as `[c?, φ_1..φ_p, θ_1..θ_q]`.
struct Layout {
    intercept: bool,
    p: usize,
    q: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.intercept as usize + self.p + self.q
    }

    fn split<'a>(&self, beta: &'a [f64]) -> (f64, &'a [f64], &'a [f64]) {
        let o = self.intercept as usize;
        let c = if self.intercept { beta[0] } else { 0.0 };
        (c, &beta[o..o + self.p], &beta[o + self.p..])
    }
}

/// Conditional residuals `e_t` for `t >= p` (earlier residuals are zero).
fn css_residuals(w: &[f64], c: f64, ar: &[f64], ma: &[f64]) -> Vec<f64> {
    let p = ar.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = c;
        for (i, phi) in ar.iter().enumerate() {
            pred += phi * w[t - 1 - i];
        }
        for (j, theta) in ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

fn sse(e: &[f64], p: usize) -> f64 {
    e[p..].iter().map(|v| v * v).sum()
}

/// Jacobian of the residuals `e_t, t >= p` with respect to the parameters.
fn css_jacobian(w: &[f64], e: &[f64], layout: &Layout, ma: &[f64]) -> DMatrix<f64> {
    let (p, n, k) = (layout.p, w.len(), layout.len());
    let mut de = vec![vec![0.0; k]; n];
    for t in p..n {
        let mut row = vec![0.0; k];
        let mut col = 0;
        if layout.intercept {
            row[0] = -1.0;
            col = 1;
        }
        for i in 0..p {
            row[col + i] = -w[t - 1 - i];
        }
        col += p;
        for j in 0..layout.q {
            if t > j {
                row[col + j] = -e[t - 1 - j];
            }
        }
        for (j, theta) in ma.iter().enumerate() {
            if t > j {
                for (r, prev) in row.iter_mut().zip(&de[t - 1 - j]) {
                    *r -= theta * prev;
                }
            }
        }
        de[t] = row;
    }
    DMatrix::from_fn(n - p, k, |r, c| de[r + p][c])
}

/// Fit by ordinary least squares (`q = 0`) or by conditional sum of squares
/// with damped Gauss-Newton from the AR-only estimate (`q > 0`).
pub fn fit_arima(series: &[f64], p: usize, d: usize, q: usize) -> Result<ArimaModel> {
    let order = ArimaOrder { p, d, q };
    if series.len() < order.min_len() {
        return Err(Error::contract(format!(
            "ARIMA{order} needs at least {} observations, got {}",
            order.min_len(),
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit(
            "series contains non-finite values".into(),
        ));
    }
    let w = difference(series, d)?;
    let layout = Layout {
        intercept: d == 0,
        p,
        q,
    };
    let rows = w.len() - p;
    let ar_cols = layout.intercept as usize + p;

    let mut beta = vec![0.0; layout.len()];
    if ar_cols > 0 {
        let x = DMatrix::from_fn(rows, ar_cols, |r, c| {
            let t = r + p;
            if layout.intercept && c == 0 {
                1.0
            } else {
                w[t - 1 - (c - layout.intercept as usize)]
            }
        });
        let y = DVector::from_iterator(rows, w[p..].iter().copied());
        let sol = least_squares(&x, &y)?;
        beta[..ar_cols].copy_from_slice(sol.as_slice());
    }

    if q > 0 {
        let residuals = |beta: &[f64]| {
            let (c, ar, ma) = layout.split(beta);
            css_residuals(&w, c, ar, ma)
        };
        let mut e = residuals(&beta);
        let mut cost = sse(&e, p);
        let mut mu = 1e-3;
        for _ in 0..200 {
            let (_, _, ma) = layout.split(&beta);
            let j = css_jacobian(&w, &e, &layout, ma);
            let r = DVector::from_iterator(rows, e[p..].iter().copied());
            let jtj = j.transpose() * &j;
            let g = j.transpose() * r;
            let mut improved = false;
            while mu < 1e10 {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
                }
                let Some(step) = a.lu().solve(&(-&g)) else {
                    mu *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                if !is_invertible(layout.split(&trial).2) {
                    mu *= 10.0;
                    continue;
                }
                let te = residuals(&trial);
                let tc = sse(&te, p);
                if tc.is_finite() && tc < cost {
                    let rel = (cost - tc) / cost.max(f64::MIN_POSITIVE);
                    beta = trial;
                    e = te;
                    cost = tc;
                    mu = (mu / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                break;
            }
        }
    }

    let (c, ar, ma) = layout.split(&beta);
    let e = css_residuals(&w, c, ar, ma);
    let sigma2 = sse(&e, p) / rows as f64;
    Ok(ArimaModel {
        order,
        ar: ar.to_vec(),
        ma: ma.to_vec(),
        intercept: c,
        sigma2,
        stationary: is_stationary(ar),
        invertible: is_invertible(ma),
    })
}

/// Companion-matrix eigenvalues strictly inside the unit circle.
pub fn is_stationary(ar: &[f64]) -> bool {
    let p = ar.len();
    if p == 0 {
        return true;
    }
    let mut m = DMatrix::zeros(p, p);
    for (i, phi) in ar.iter().enumerate() {
        m[(0, i)] = *phi;
    }
    for i in 1..p {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().all(|z| z.norm() < 1.0)
}

/// Roots of `1 + θ_1 z + … + θ_q z^q` strictly outside the unit circle.
pub fn is_invertible(ma: &[f64]) -> bool {
    let neg: Vec<f64> = ma.iter().map(|t| -t).collect();
    is_stationary(&neg)
}

/// Residuals of `model` over the differenced `history` (zeros before `p`).
pub fn residuals(model: &ArimaModel, history: &[f64]) -> Result<Vec<f64>> {
    let w = difference(history, model.order.d)?;
    Ok(css_residuals(&w, model.intercept, &model.ar, &model.ma))
}

/// `h`-step forecast: future innovations are zero and differencing is undone
/// from the end of `history`.
pub fn forecast(model: &ArimaModel, history: &[f64], h: usize) -> Result<Vec<f64>> {
    let ArimaOrder { p, d, .. } = model.order;
    if history.len() < (p + d).max(1) || history.len() <= d {
        return Err(Error::contract(format!(
            "forecasting ARIMA{} needs at least {} history values, got {}",
            model.order,
            (p + d + 1).max(1),
            history.len()
        )));
    }
    if h == 0 {
        return Err(Error::contract("forecast horizon must be positive"));
    }
    let mut levels = vec![history.to_vec()];
    for _ in 0..d {
        let next = difference(levels.last().expect("non-empty"), 1)?;
        levels.push(next);
    }
    let mut w = levels[d].clone();
    let mut e = css_residuals(&w, model.intercept, &model.ar, &model.ma);
    let n = w.len();
    for t in n..n + h {
        let mut pred = model.intercept;
        for (i, phi) in model.ar.iter().enumerate() {
            if t > i {
                pred += phi * w[t - 1 - i];
            }
        }
        for (j, theta) in model.ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        w.push(pred);
        e.push(0.0);
    }
    let mut out = w[n..].to_vec();
    for level in levels[..d].iter().rev() {
        let mut acc = *level.last().expect("non-empty");
        out = out
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
    }
    Ok(out)
}

/// Summary statistics of the fitted residuals (from index `p` on).
pub fn diagnostics(model: &ArimaModel, history: &[f64]) -> Result<ResidualDiagnostics> {
    let e = residuals(model, history)?;
    let e = &e[model.order.p.min(e.len())..];
    let n = e.len();
    let mean = e.iter().sum::<f64>() / n.max(1) as f64;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let acf = |lag: usize| -> f64 {
        if var <= 0.0 || lag >= n {
            return 0.0;
        }
        e[lag..]
            .iter()
            .zip(e)
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64 * var)
    };
    let lags = (n / 5).clamp(1, 10).min(n.saturating_sub(1));
    let q = n as f64
        * (n as f64 + 2.0)
        * (1..=lags)
            .map(|k| acf(k).powi(2) / (n - k) as f64)
            .sum::<f64>();
    Ok(ResidualDiagnostics {
        count: n,
        mean,
        variance: var,
        lag1_autocorrelation: acf(1),
        ljung_box: q,
        ljung_box_lags: lags,
    })
}
