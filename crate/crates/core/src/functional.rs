//! Bounded segment functionals `f: C_ν → ℝ` used by the estimators.
//!
//! A functional sees `ξ(0)` and the weighted cell sums of ξ, which is all the
//! catalog entries need and is available in O(1) along a simulated path.

use serde::{Deserialize, Serialize};

use crate::delay_measure::{CellSums, DelayMeasure, Segment};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SegFunctional {
    Constant { c: f64 },
    /// `ξ(0)_i`.
    Origin {
        #[serde(default)]
        component: usize,
    },
    /// `|ξ(0)|²`.
    OriginSquared,
    /// `tanh(ξ(0)_0)`.
    TanhOrigin,
    /// `ε + tanh²(ξ(0)_0)`, strictly positive.
    PositiveTanh2 {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// `exp(-‖ξ‖²_{C_ν})`.
    ExpNorm,
    /// Indicator of `lo ≤ ξ(0)_0 ≤ hi`.
    IndicatorBox { lo: f64, hi: f64 },
}

fn default_eps() -> f64 {
    1e-6
}

impl SegFunctional {
    pub fn eval(&self, origin: &[f64], sums: &CellSums) -> f64 {
        match self {
            SegFunctional::Constant { c } => *c,
            SegFunctional::Origin { component } => origin[*component],
            SegFunctional::OriginSquared => origin.iter().map(|x| x * x).sum(),
            SegFunctional::TanhOrigin => origin[0].tanh(),
            SegFunctional::PositiveTanh2 { eps } => eps + origin[0].tanh().powi(2),
            SegFunctional::ExpNorm => (-(sums.sq + origin.iter().map(|x| x * x).sum::<f64>())).exp(),
            SegFunctional::IndicatorBox { lo, hi } => {
                if origin[0] >= *lo && origin[0] <= *hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn eval_segment(&self, nu: &DelayMeasure, seg: &Segment) -> Result<f64> {
        let sums = nu.cell_sums(seg)?;
        Ok(self.eval(seg.origin(), &sums))
    }

    pub fn is_strictly_positive(&self) -> bool {
        match self {
            SegFunctional::Constant { c } => *c > 0.0,
            SegFunctional::PositiveTanh2 { eps } => *eps > 0.0,
            SegFunctional::ExpNorm => true,
            _ => false,
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, SegFunctional::Origin { .. } | SegFunctional::OriginSquared)
    }
}
