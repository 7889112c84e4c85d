//! Non-seasonal ARIMA(p, d, q) fitted by conditional least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        ArimaOrder { p: 2, d: 1, q: 0 }
    }
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }

    pub fn min_series_len(&self) -> usize {
        10 * (self.p + self.d + self.q + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    /// Whether the AR polynomial has all roots outside the unit circle.
    pub stationary: bool,
    /// Number of residuals the variance was computed from.
    pub n_effective: usize,
}

impl ArimaModel {
    /// A model with all coefficients zero: forecasts repeat the last level.
    pub fn zero(order: ArimaOrder) -> Self {
        ArimaModel {
            order,
            phi: vec![0.0; order.p],
            theta: vec![0.0; order.q],
            sigma2: 0.0,
            stationary: true,
            n_effective: 0,
        }
    }

    pub fn aic(&self) -> f64 {
        let n = self.n_effective.max(1) as f64;
        n * self.sigma2.max(1e-300).ln() + 2.0 * (self.order.p + self.order.q) as f64
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `(1 - L)^d x`, dropping the first `d` values.
pub fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    out
}

/// Checks stationarity of `1 - sum phi_i z^i` with the step-down (reverse Levinson) recursion.
pub fn is_stationary(phi: &[f64]) -> bool {
    let mut a = phi.to_vec();
    while let Some(&k) = a.last() {
        if !(k.abs() < 1.0) {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - k * k;
        a = (0..m - 1).map(|i| (a[i] + k * a[m - 2 - i]) / denom).collect();
    }
    true
}

/// Solves a symmetric positive semi-definite system by Gaussian elimination with partial
/// pivoting. `None` when the matrix is numerically singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let pivot = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / pivot[col];
            for (x, p) in a[row][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Residuals of the conditional recursion; the first `p` are fixed at zero.
fn css_residuals(w: &[f64], phi: &[f64], theta: &[f64]) -> Vec<f64> {
    let p = phi.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = 0.0;
        for (i, f) in phi.iter().enumerate() {
            pred += f * w[t - 1 - i];
        }
        for (j, th) in theta.iter().enumerate() {
            if t > j {
                pred += th * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

/// Least-squares regression of `w[t]` on the lagged regressors, over `t >= start`.
fn regress(w: &[f64], e: &[f64], p: usize, q: usize, start: usize) -> Result<Vec<f64>> {
    let k = p + q;
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    let mut row = vec![0.0; k];
    for t in start..w.len() {
        for i in 0..p {
            row[i] = w[t - 1 - i];
        }
        for j in 0..q {
            row[p + j] = if t > j { e[t - 1 - j] } else { 0.0 };
        }
        for a in 0..k {
            xty[a] += row[a] * w[t];
            for b in 0..k {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    if (0..k).all(|i| xtx[i][i] == 0.0) {
        // Regressors identically zero: nothing to explain.
        return Ok(vec![0.0; k]);
    }
    solve(xtx, xty).ok_or(Error::SingularSystem)
}

const CSS_ITERATIONS: usize = 25;

/// Fits ARIMA coefficients to `y`. Pure AR orders are a single least-squares solve;
/// MA terms are estimated by iterating the regression on lagged residuals.
pub fn fit_arima(y: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    if y.len() < order.min_series_len() {
        return Err(Error::SeriesTooShort(format!(
            "ARIMA({},{},{}) needs at least {} values, got {}",
            order.p,
            order.d,
            order.q,
            order.min_series_len(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::SeriesTooShort("series contains non-finite values".into()));
    }
    let w = difference(y, order.d);
    let (p, q) = (order.p, order.q);
    let mut e = vec![0.0; w.len()];
    let mut coef = regress(&w, &e, p, 0, p)?;
    coef.extend(std::iter::repeat_n(0.0, q));
    if q > 0 {
        for _ in 0..CSS_ITERATIONS {
            e = css_residuals(&w, &coef[..p], &coef[p..]);
            let next = regress(&w, &e, p, q, p)?;
            let delta = next.iter().zip(&coef).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            coef = next;
            if delta < 1e-9 {
                break;
            }
        }
    }
    let phi = coef[..p].to_vec();
    let theta = coef[p..].to_vec();
    let e = css_residuals(&w, &phi, &theta);
    let n_eff = w.len() - p;
    let sigma2 = e[p..].iter().map(|v| v * v).sum::<f64>() / n_eff.max(1) as f64;
    let stationary = is_stationary(&phi);
    if !stationary {
        log::warn!("fitted AR polynomial {phi:?} is not stationary");
    }
    Ok(ArimaModel { order, phi, theta, sigma2, stationary, n_effective: n_eff })
}

/// Lag-1 sample autocorrelation; 0 for a constant series.
fn lag1_autocorrelation(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var <= 0.0 {
        return 0.0;
    }
    y.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / var
}

/// Differences once when the lag-1 autocorrelation suggests a unit root (above 0.9), then
/// picks p in 0..=3 and q in 0..=1 by AIC. AIC values for different `d` are computed on
/// different series and are not compared.
pub fn select_order(y: &[f64]) -> Result<ArimaModel> {
    let d = usize::from(y.len() > 1 && lag1_autocorrelation(y) > 0.9);
    let mut best: Option<ArimaModel> = None;
    for p in 0..=3 {
        for q in 0..=1 {
            if let Ok(m) = fit_arima(y, ArimaOrder { p, d, q }) {
                if best.as_ref().is_none_or(|b| m.aic() < b.aic()) {
                    best = Some(m);
                }
            }
        }
    }
    best.ok_or_else(|| Error::SeriesTooShort("no candidate order could be fitted".into()))
}

/// Running one-step-ahead forecaster over a growing series.
#[derive(Debug, Clone)]
pub struct ArimaState {
    model: ArimaModel,
    y: Vec<f64>,
    w: Vec<f64>,
    e: Vec<f64>,
    /// Coefficients of y[t-k] in (1-L)^d, k = 0..=d.
    diff_coef: Vec<f64>,
}

impl ArimaState {
    pub fn new(model: ArimaModel, history: &[f64]) -> Self {
        let d = model.order.d;
        let diff_coef = (0..=d).map(|k| binomial(d, k) * if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut s = ArimaState { model, y: Vec::with_capacity(history.len()), w: Vec::new(), e: Vec::new(), diff_coef };
        for &v in history {
            s.observe(v);
        }
        s
    }

    fn predict_w(&self) -> f64 {
        let t = self.w.len();
        let mut pred = 0.0;
        for (i, f) in self.model.phi.iter().enumerate() {
            if t > i {
                pred += f * self.w[t - 1 - i];
            }
        }
        for (j, th) in self.model.theta.iter().enumerate() {
            if t > j {
                pred += th * self.e[t - 1 - j];
            }
        }
        pred
    }

    /// Expected next value of the series given everything observed so far.
    pub fn predict_next(&self) -> f64 {
        let d = self.model.order.d;
        let n = self.y.len();
        if n < d {
            return self.y.last().copied().unwrap_or(0.0);
        }
        let mut pred = self.predict_w();
        for k in 1..=d {
            pred -= self.diff_coef[k] * self.y[n - k];
        }
        pred
    }

    pub fn observe(&mut self, value: f64) {
        let d = self.model.order.d;
        let pred_w = if self.y.len() >= d { Some(self.predict_w()) } else { None };
        self.y.push(value);
        let n = self.y.len();
        if let Some(pw) = pred_w {
            let w: f64 = (0..=d).map(|k| self.diff_coef[k] * self.y[n - 1 - k]).sum();
            let e = if self.w.len() < self.model.order.p { 0.0 } else { w - pw };
            self.w.push(w);
            self.e.push(e);
        }
    }

    /// Forecasts `h` steps ahead with future shocks at their mean of zero.
    pub fn forecast(&self, h: usize) -> Vec<f64> {
        let mut s = self.clone();
        (0..h)
            .map(|_| {
                let v = s.predict_next();
                s.observe(v);
                v
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ar2(phi: (f64, f64), n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Normal::new(0.0, 1.0).unwrap();
        let mut x = vec![0.0f64; n + 200];
        for t in 2..x.len() {
            x[t] = phi.0 * x[t - 1] + phi.1 * x[t - 2] + eps.sample(&mut rng);
        }
        x.split_off(200)
    }

    #[test]
    fn recovers_ar2_coefficients() {
        let y = ar2((0.5, -0.3), 2000, 1);
        let m = fit_arima(&y, ArimaOrder::new(2, 0, 0)).unwrap();
        assert!((m.phi[0] - 0.5).abs() < 0.05 && (m.phi[1] + 0.3).abs() < 0.05, "{:?}", m.phi);
        assert!(m.stationary);
        assert!((m.sigma2 - 1.0).abs() < 0.1);
    }

    #[test]
    fn white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = Normal::new(0.0, 2.0).unwrap();
        let y: Vec<f64> = (0..5000).map(|_| eps.sample(&mut rng)).collect();
        let m = fit_arima(&y, ArimaOrder::new(0, 0, 0)).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!((m.sigma2 - var).abs() / var < 0.01);
    }

    #[test]
    fn random_walk_with_ar_increments_is_stationary_after_differencing() {
        let inc = ar2((0.4, 0.2), 3000, 3);
        let y: Vec<f64> = inc.iter().scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        }).collect();
        let m = fit_arima(&y, ArimaOrder::default()).unwrap();
        assert!(m.stationary, "{:?}", m.phi);
        assert!((m.phi[0] - 0.4).abs() < 0.06 && (m.phi[1] - 0.2).abs() < 0.06);
    }

    #[test]
    fn ma_term_is_estimated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = Normal::new(0.0, 1.0).unwrap();
        let e: Vec<f64> = (0..4001).map(|_| eps.sample(&mut rng)).collect();
        let y: Vec<f64> = (1..e.len()).map(|t| e[t] + 0.6 * e[t - 1]).collect();
        let m = fit_arima(&y, ArimaOrder::new(0, 0, 1)).unwrap();
        assert!((m.theta[0] - 0.6).abs() < 0.05, "{:?}", m.theta);
    }

    #[test]
    fn too_short_and_constant_series() {
        assert!(matches!(fit_arima(&[1.0; 20], ArimaOrder::default()), Err(Error::SeriesTooShort(_))));
        // Constant level with d = 0 makes both lags identical.
        assert!(matches!(fit_arima(&[2.0; 100], ArimaOrder::new(2, 0, 0)), Err(Error::SingularSystem)));
        let m = fit_arima(&[2.0; 100], ArimaOrder::default()).unwrap();
        assert_eq!(m.phi, vec![0.0, 0.0]);
    }

    #[test]
    fn stationarity_check() {
        assert!(is_stationary(&[0.5]));
        assert!(!is_stationary(&[1.2]));
        assert!(is_stationary(&[0.5, -0.3]));
        assert!(!is_stationary(&[1.5, -0.5]));
        assert!(!is_stationary(&[0.2, 1.1]));
        assert!(is_stationary(&[]));
    }

    #[test]
    fn state_forecast_matches_hand_recursion() {
        let model = ArimaModel {
            order: ArimaOrder::new(2, 1, 0),
            phi: vec![0.5, -0.2],
            theta: vec![],
            sigma2: 1.0,
            stationary: true,
            n_effective: 0,
        };
        let y = [1.0, 2.0, 4.0, 3.0];
        let s = ArimaState::new(model, &y);
        // w = [1, 2, -1]; w_hat = 0.5 * -1 - 0.2 * 2 = -0.9; y_hat = 3 - 0.9.
        let f = s.forecast(2);
        assert!((f[0] - 2.1).abs() < 1e-12);
        // w = [.., -1, -0.9]; w_hat = 0.5 * -0.9 - 0.2 * -1 = -0.25.
        assert!((f[1] - 1.85).abs() < 1e-12);
    }

    #[test]
    fn aic_selection_prefers_true_structure() {
        let y = ar2((0.6, 0.0), 3000, 9);
        let m = select_order(&y).unwrap();
        assert!(m.order.p >= 1 && m.order.d == 0, "{:?}", m.order);
    }
}
