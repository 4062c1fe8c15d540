//! Scalar ODE problems `y' = f(y, t)`, state derivatives of the field, and the
//! boundedness constants used by the step-size and error bounds.
//!
//! Derivatives are always partial derivatives in the state argument with the
//! time argument frozen. Every built-in field ships its derivatives in closed
//! form, so `eval_derivatives` is exact up to floating-point rounding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in right-hand sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", content = "params", rename_all = "snake_case")]
pub enum Field {
    /// `f = 0`
    Zero,
    /// `f = c`
    Constant { c: f64 },
    /// `f = a*y + b`
    Affine { a: f64, b: f64 },
    /// `f = y*(1 - y)`
    Logistic,
    /// `f = -y + sin(t)`
    DampedDriven,
    /// `f = c*sin(y)`
    BoundedSine { c: f64 },
    /// `f = sum_j coeffs[j] * y^j`
    Polynomial { coeffs: Vec<f64> },
}

impl Field {
    /// The Riccati field `f = y^2`.
    pub fn square() -> Self {
        Field::Polynomial {
            coeffs: vec![0.0, 0.0, 1.0],
        }
    }

    /// Degree of the field as a polynomial in `y`, `None` if it is not one.
    pub fn state_degree(&self) -> Option<usize> {
        match self {
            Field::Zero | Field::Constant { .. } => Some(0),
            Field::Affine { .. } | Field::DampedDriven => Some(1),
            Field::Logistic => Some(2),
            Field::BoundedSine { .. } => None,
            Field::Polynomial { coeffs } => Some(coeffs.len().saturating_sub(1)),
        }
    }

    /// `d^k f / dy^k` at `(y, t)`.
    pub fn partial(&self, k: usize, y: f64, t: f64) -> f64 {
        match self {
            Field::Zero => 0.0,
            Field::Constant { c } => {
                if k == 0 {
                    *c
                } else {
                    0.0
                }
            }
            Field::Affine { a, b } => match k {
                0 => a * y + b,
                1 => *a,
                _ => 0.0,
            },
            Field::Logistic => match k {
                0 => y * (1.0 - y),
                1 => 1.0 - 2.0 * y,
                2 => -2.0,
                _ => 0.0,
            },
            Field::DampedDriven => match k {
                0 => -y + t.sin(),
                1 => -1.0,
                _ => 0.0,
            },
            Field::BoundedSine { c } => {
                let v = match k % 4 {
                    0 => y.sin(),
                    1 => y.cos(),
                    2 => -y.sin(),
                    _ => -y.cos(),
                };
                c * v
            }
            Field::Polynomial { coeffs } => poly_derivative(coeffs, k, y),
        }
    }
}

/// k-th derivative of `sum_j c_j y^j`, by Horner on the falling-factorial weights.
fn poly_derivative(coeffs: &[f64], k: usize, y: f64) -> f64 {
    if k >= coeffs.len() {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in (k..coeffs.len()).rev() {
        let falling: f64 = ((j - k + 1)..=j).map(|m| m as f64).product();
        acc = acc * y + coeffs[j] * falling;
    }
    acc
}

/// A scalar initial value problem on the box `[y0 - theta, y0 + theta] x [t0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeProblem {
    #[serde(flatten)]
    pub field: Field,
    /// Smoothness order `n`; truncation orders up to `n` are allowed.
    #[serde(rename = "n")]
    pub smoothness_order: usize,
    pub t0: f64,
    #[serde(rename = "tJ")]
    pub t_end: f64,
    pub y0: f64,
    pub theta: f64,
}

impl OdeProblem {
    pub fn new(
        field: Field,
        smoothness_order: usize,
        t0: f64,
        t_end: f64,
        y0: f64,
        theta: f64,
    ) -> Result<Self> {
        let problem = OdeProblem {
            field,
            smoothness_order,
            t0,
            t_end,
            y0,
            theta,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_end.is_finite() && self.y0.is_finite()) {
            return Err(Error::InvalidParameter(
                "t0, tJ and y0 must be finite".into(),
            ));
        }
        if self.t_end <= self.t0 {
            return Err(Error::InvalidParameter(format!(
                "tJ = {} must exceed t0 = {}",
                self.t_end, self.t0
            )));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "theta = {} must be finite and non-negative",
                self.theta
            )));
        }
        Ok(())
    }

    /// Loads a problem definition from a JSON file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let problem: OdeProblem = serde_json::from_str(text)
            .map_err(|e| Error::InvalidParameter(format!("problem definition: {e}")))?;
        problem.validate()?;
        Ok(problem)
    }

    /// Same problem on a different time window.
    pub fn with_window(&self, t0: f64, t_end: f64) -> Result<Self> {
        Self::new(
            self.field.clone(),
            self.smoothness_order,
            t0,
            t_end,
            self.y0,
            self.theta,
        )
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn eval_field(&self, y: f64, t: f64) -> Result<f64> {
        let v = self.field.partial(0, y, t);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalDomain(format!("f({y}, {t}) = {v}")))
        }
    }

    /// `[f, f', ..., f^(k_max)]` at `(y, t)`; orders above `n` are refused.
    pub fn eval_derivatives(&self, y: f64, t: f64, k_max: usize) -> Result<DerivativeStack> {
        if k_max > self.smoothness_order {
            return Err(Error::Order {
                requested: k_max,
                available: self.smoothness_order,
            });
        }
        self.derivatives_unchecked(y, t, k_max)
    }

    fn derivatives_unchecked(&self, y: f64, t: f64, k_max: usize) -> Result<DerivativeStack> {
        let mut coeffs = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let v = self.field.partial(k, y, t);
            if !v.is_finite() {
                return Err(Error::NumericalDomain(format!("f^({k})({y}, {t}) = {v}")));
            }
            coeffs.push(v);
        }
        Ok(DerivativeStack {
            base_y: y,
            base_t: t,
            coeffs,
        })
    }
}

/// State derivatives of the field frozen at a base point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeStack {
    pub base_y: f64,
    pub base_t: f64,
    /// `coeffs[k] = d^k f / dy^k (base_y, base_t)`
    pub coeffs: Vec<f64>,
}

impl DerivativeStack {
    /// Truncation order carried by this stack.
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Taylor coefficients `coeffs[k] / k!`.
    pub fn taylor_coefficients(&self) -> Vec<f64> {
        let mut fact = 1.0;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if k > 0 {
                    fact *= k as f64;
                }
                c / fact
            })
            .collect()
    }
}

/// Constants of the boundedness hypothesis
/// `sup|f^(j)| <= K sup|f^(j-1)| + K1` together with `F0 = sup|f|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "F0")]
    pub f0: f64,
    /// Sampled sups `S_j` of `|f^(j)|` over the box, `j = 0..=k_max`.
    pub derivative_sups: Vec<f64>,
}

impl BoundConstants {
    /// Constants given directly, without sampled sups.
    pub fn new(k: f64, k1: f64, f0: f64) -> Result<Self> {
        let c = BoundConstants {
            k,
            k1,
            f0,
            derivative_sups: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k1 >= 0.0 && self.f0 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "K = {}, K1 = {}, F0 = {} must be non-negative",
                self.k, self.k1, self.f0
            )));
        }
        if self.k1 > 0.0 && self.k >= 1.0 {
            return Err(Error::ConstantsInfeasible(format!(
                "K = {} must be < 1 when K1 = {} > 0",
                self.k, self.k1
            )));
        }
        Ok(())
    }

    /// `K1 (1 - K^k) / (1 - K)`, read as zero when `K1 = 0`.
    pub fn k1_series(&self, k: usize) -> f64 {
        if self.k1 == 0.0 {
            0.0
        } else {
            self.k1 * (1.0 - self.k.powi(k as i32)) / (1.0 - self.k)
        }
    }

    /// Chained bound `K^k F0 + K1 (1 - K^k)/(1 - K)` on `sup|f^(k)|`.
    pub fn derivative_bound(&self, k: usize) -> f64 {
        self.k.powi(k as i32) * self.f0 + self.k1_series(k)
    }
}

/// Number of candidate values of `K` on `[0, 1)` scanned when `K1 = 0` is
/// not attainable.
pub const K_CANDIDATES: usize = 1000;

/// Default grid subdivisions per axis for the constants estimator.
pub const DEFAULT_GRID_DENSITY: usize = 101;

/// Sup of `|f^(j)|`, `j = 0..=k_max`, over a uniform grid with
/// `grid_density` subdivisions per axis (so `grid_density + 1` nodes per axis;
/// doubling the density refines the grid).
pub fn sample_sups(problem: &OdeProblem, k_max: usize, grid_density: usize) -> Result<Vec<f64>> {
    if grid_density < 2 {
        return Err(Error::InvalidParameter(format!(
            "grid_density = {grid_density} must be at least 2"
        )));
    }
    let y_lo = problem.y0 - problem.theta;
    let y_span = 2.0 * problem.theta;
    let t_span = problem.duration();
    let d = grid_density as f64;
    let mut sups = vec![0.0_f64; k_max + 1];
    for a in 0..=grid_density {
        let y = y_lo + y_span * (a as f64 / d);
        for b in 0..=grid_density {
            let t = problem.t0 + t_span * (b as f64 / d);
            for (j, s) in sups.iter_mut().enumerate() {
                let v = problem.field.partial(j, y, t).abs();
                if !v.is_finite() {
                    return Err(Error::NumericalDomain(format!(
                        "|f^({j})({y}, {t})| is not finite"
                    )));
                }
                if v > *s {
                    *s = v;
                }
            }
        }
    }
    Ok(sups)
}

/// Estimates `(K, K1, F0)` from grid-sampled derivative sups.
///
/// When every nonzero sup is preceded by a nonzero sup, `K1 = 0` is attainable
/// and `K = max_j S_j / S_{j-1}` is returned. Otherwise candidates `K` on a
/// uniform grid of `[0, 1)` are paired with `K1 = max_j (S_j - K S_{j-1})^+` and
/// the lexicographically smallest `(K, K1)` wins. The sampling is heuristic:
/// the sups are grid maxima, not certified enclosures.
pub fn estimate_constants(
    problem: &OdeProblem,
    k_max: usize,
    grid_density: usize,
) -> Result<BoundConstants> {
    if k_max > problem.smoothness_order + 1 {
        return Err(Error::Order {
            requested: k_max,
            available: problem.smoothness_order + 1,
        });
    }
    let sups = sample_sups(problem, k_max, grid_density)?;
    let (k, k1) = fit_chain_constants(&sups)?;
    Ok(BoundConstants {
        k,
        k1,
        f0: sups[0],
        derivative_sups: sups,
    })
}

/// Chooses `(K, K1)` with `S_j <= K S_{j-1} + K1` for all `j >= 1`.
pub fn fit_chain_constants(sups: &[f64]) -> Result<(f64, f64)> {
    let pairs: Vec<(f64, f64)> = sups.windows(2).map(|w| (w[0], w[1])).collect();

    let pure_ratio_ok = pairs.iter().all(|&(prev, cur)| prev > 0.0 || cur == 0.0);
    if pure_ratio_ok {
        let k = pairs
            .iter()
            .filter(|(prev, _)| *prev > 0.0)
            .map(|(prev, cur)| cur / prev)
            .fold(0.0_f64, f64::max);
        return Ok((k, 0.0));
    }

    let k1_for = |k: f64| {
        pairs
            .iter()
            .map(|&(prev, cur)| (cur - k * prev).max(0.0))
            .fold(0.0_f64, f64::max)
    };
    (0..K_CANDIDATES)
        .map(|m| m as f64 / K_CANDIDATES as f64)
        .map(|k| (k, k1_for(k)))
        .filter(|(_, k1)| k1.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .ok_or_else(|| {
            Error::ConstantsInfeasible("no candidate K < 1 satisfies the chain bound".into())
        })
}
