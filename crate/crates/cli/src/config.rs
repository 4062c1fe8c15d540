//! Experiment configuration: one JSON file, optionally overridden by flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use taylor_shadow::integrator::{Impulses, IntegratorSettings, Lambda, PerturbationSpec};
use taylor_shadow::problem::DEFAULT_GRID_DENSITY;
use taylor_shadow::shadowing::DEFAULT_EVAL_BUDGET;
use taylor_shadow::{Error, OdeProblem, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: OdeProblem,
    pub ell: usize,
    pub budget: Budget,
    #[serde(default)]
    pub sampling: Sampling,
    /// `x0 = y0 + x0_offset`.
    #[serde(default)]
    pub x0_offset: f64,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub oracle: IntegratorSettings,
    #[serde(default)]
    pub constants: ConstantsSource,
    #[serde(default)]
    pub shadow: ShadowSettings,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Output directory; `--out` wins, `out` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub rho: f64,
    /// Budget for the approximate deviation. The joint construction uses
    /// `rho_x = rho`, so any other value is rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_x: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    /// Greedy admissible construction, optionally capped by `max_step`.
    #[default]
    Auto,
    #[serde(rename = "auto_capped")]
    AutoCapped {
        max_step: f64,
    },
    Uniform {
        h: f64,
    },
    Explicit {
        points: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstantsSource {
    /// Grid-sampled over the problem box.
    Estimate { grid_density: usize },
    Given {
        #[serde(rename = "K")]
        k: f64,
        #[serde(rename = "K1")]
        k1: f64,
        #[serde(rename = "F0")]
        f0: f64,
    },
}

impl Default for ConstantsSource {
    fn default() -> Self {
        ConstantsSource::Estimate {
            grid_density: DEFAULT_GRID_DENSITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowSettings {
    /// Target tolerance; the certificate's `epsilon` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub halfwidth: f64,
    pub budget_evals: usize,
}

impl Default for ShadowSettings {
    fn default() -> Self {
        ShadowSettings {
            epsilon: None,
            halfwidth: 0.1,
            budget_evals: DEFAULT_EVAL_BUDGET,
        }
    }
}

/// Cartesian grid for `sweep`. Empty axes keep the base configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub ell: Vec<usize>,
    pub rho: Vec<f64>,
    pub h: Vec<f64>,
    pub gbar: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Each point's `x0_offset` is shifted by a seeded uniform draw in `[-j, j]`.
    pub e0_jitter: f64,
}

/// Flag values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ell: Option<usize>,
    pub rho: Option<f64>,
    pub h: Option<f64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(ell) = o.ell {
            self.ell = ell;
        }
        if let Some(rho) = o.rho {
            self.budget.rho = rho;
        }
        if let Some(h) = o.h {
            self.sampling = Sampling::Uniform { h };
        }
        if let Some(w) = o.workers {
            self.workers = Some(w);
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output = Some(out.clone());
        }
    }

    pub fn output_dir(&self) -> &str {
        self.output.as_deref().unwrap_or("out")
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if self.ell > self.problem.smoothness_order {
            return Err(Error::Order {
                requested: self.ell,
                available: self.problem.smoothness_order,
            });
        }
        if !(self.budget.rho > 0.0 && self.budget.rho < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "budget.rho = {} must lie in (0, 1)",
                self.budget.rho
            )));
        }
        if let Some(rx) = self.budget.rho_x {
            if rx != self.budget.rho {
                return Err(Error::InvalidParameter(format!(
                    "budget.rho_x = {rx} must equal budget.rho = {}",
                    self.budget.rho
                )));
            }
        }
        if !self.x0_offset.is_finite() || self.x0_offset.abs() > self.problem.theta {
            return Err(Error::InvalidParameter(format!(
                "x0_offset = {} leaves the problem box (theta = {})",
                self.x0_offset, self.problem.theta
            )));
        }
        self.perturbation.lambda.validate()?;
        if self.workers == Some(0) {
            return Err(Error::InvalidParameter("workers must be positive".into()));
        }
        let g = &self.sweep;
        if g.rho
            .iter()
            .chain(&g.h)
            .chain(&g.gbar)
            .chain(&g.lambda)
            .any(|v| !v.is_finite())
            || !(g.e0_jitter >= 0.0 && g.e0_jitter.is_finite())
        {
            return Err(Error::InvalidParameter(
                "sweep ranges must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.problem.y0 + self.x0_offset
    }

    /// Configuration of one sweep point.
    pub fn with_point(&self, p: &SweepPoint) -> Self {
        let mut c = self.clone();
        c.ell = p.ell;
        c.budget.rho = p.rho;
        if let Some(h) = p.h {
            c.sampling = Sampling::Uniform { h };
        }
        if let Some(g) = p.gbar {
            c.perturbation.impulses = if g == 0.0 {
                Impulses::None
            } else {
                Impulses::Uniform(g)
            };
            c.perturbation.impulse_cap = g;
        }
        if let Some(l) = p.lambda {
            c.perturbation.lambda = if l == 0.0 {
                Lambda::Zero
            } else {
                Lambda::Constant { value: l }
            };
        }
        c.x0_offset = p.x0_offset;
        c.sweep = SweepGrid::default();
        c
    }

    /// Cartesian product of the sweep axes; the order is ell, rho, h, gbar, lambda.
    pub fn sweep_points(&self, jitter: impl Fn(usize) -> f64) -> Vec<SweepPoint> {
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        }
        let g = &self.sweep;
        let mut out = Vec::new();
        for ell in axis(&g.ell) {
            for rho in axis(&g.rho) {
                for h in axis(&g.h) {
                    for gbar in axis(&g.gbar) {
                        for lambda in axis(&g.lambda) {
                            let index = out.len();
                            out.push(SweepPoint {
                                index,
                                ell: ell.unwrap_or(self.ell),
                                rho: rho.unwrap_or(self.budget.rho),
                                h,
                                gbar,
                                lambda,
                                x0_offset: self.x0_offset + jitter(index),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn has_perturbation(&self) -> bool {
        !self.perturbation.impulses.is_zero() || self.perturbation.impulse_cap > 0.0
    }

    pub fn perturbation_spec(&self) -> Option<&PerturbationSpec> {
        let p = &self.perturbation;
        (self.has_perturbation() || !p.lambda.is_zero()).then_some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub ell: usize,
    pub rho: f64,
    pub h: Option<f64>,
    pub gbar: Option<f64>,
    pub lambda: Option<f64>,
    pub x0_offset: f64,
}
