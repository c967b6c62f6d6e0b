use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHIPPED: &str = include_str!("../data/calibration.toml");

/// Measured stand-ins for the proof constants of one dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Largest `‖a‖_n` at which the Picard differences still contract by 1/2.
    pub delta: f64,
    /// Left side of (S′) at the data defining `delta`.
    pub delta_prime: f64,
    /// Left side of (A6) at the reference data and radius with contracting synthesis.
    pub delta_double_prime: f64,
    /// Ratio `∫_0^∞‖u‖₂² / (J^{4/(n+1)} ‖a‖₂^{2(n−1)/(n+1)})`, maximized over the sweep.
    pub gamma: f64,
    /// `t^{1/2} ‖F(t)‖₁` of the discrete kernel.
    pub c1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim2: Option<Constants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim3: Option<Constants>,
}

impl Calibration {
    pub fn shipped() -> Self {
        toml::from_str(SHIPPED).expect("shipped calibration parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn constants(&self, dim: usize) -> Result<Constants> {
        match dim {
            2 => self.dim2,
            3 => self.dim3,
            _ => None,
        }
        .ok_or(Error::MissingCalibration(dim))
    }

    pub fn set(&mut self, dim: usize, c: Constants) {
        match dim {
            2 => self.dim2 = Some(c),
            3 => self.dim3 = Some(c),
            _ => {}
        }
    }
}
