use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
    /// Nodes `0, t_min, t_min r, ...`, with `r` adjusted so the last node is `t_end`.
    Geometric { t_min: f64, ratio: f64 },
}

/// Output nodes of a run. `steps` counts intervals, so there are `steps + 1` nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub steps: usize,
    pub spacing: Spacing,
}

impl TimeGrid {
    pub fn uniform(t_end: f64, steps: usize) -> Result<Self> {
        let g = TimeGrid {
            t_end,
            steps,
            spacing: Spacing::Uniform,
        };
        g.validate()?;
        Ok(g)
    }

    /// Geometric grid whose ratio is the closest to `ratio` that lands on `t_end`.
    pub fn geometric(t_end: f64, t_min: f64, ratio: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < t_end && ratio > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "geometric grid needs 0 < t_min < t_end and ratio > 1 (t_min={t_min}, t_end={t_end}, ratio={ratio})"
            )));
        }
        let intervals = ((t_end / t_min).ln() / ratio.ln()).round().max(1.0) as usize;
        let g = TimeGrid {
            t_end,
            steps: intervals + 1,
            spacing: Spacing::Geometric { t_min, ratio },
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) || !self.t_end.is_finite() || self.steps == 0 {
            return Err(Error::InvalidArgument(format!("bad time grid {self:?}")));
        }
        if let Spacing::Geometric { t_min, ratio } = self.spacing {
            if !(t_min > 0.0 && t_min < self.t_end && ratio > 1.0) || self.steps < 2 {
                return Err(Error::InvalidArgument(format!("bad geometric time grid {self:?}")));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> Vec<f64> {
        match self.spacing {
            Spacing::Uniform => (0..=self.steps)
                .map(|i| if i == self.steps { self.t_end } else { self.t_end * i as f64 / self.steps as f64 })
                .collect(),
            Spacing::Geometric { t_min, .. } => {
                let k = self.steps - 1;
                let r = (self.t_end / t_min).powf(1.0 / k as f64);
                let mut v = vec![0.0];
                v.extend((0..=k).map(|i| if i == k { self.t_end } else { t_min * r.powi(i as i32) }));
                v
            }
        }
    }

    /// Same node layout with all times multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        TimeGrid {
            t_end: self.t_end * factor,
            steps: self.steps,
            spacing: match self.spacing {
                Spacing::Uniform => Spacing::Uniform,
                Spacing::Geometric { t_min, ratio } => Spacing::Geometric {
                    t_min: t_min * factor,
                    ratio,
                },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_start_at_zero_and_increase() {
        for g in [TimeGrid::uniform(2.0, 8).unwrap(), TimeGrid::geometric(64.0, 1e-3, 1.2).unwrap()] {
            let v = g.nodes();
            assert_eq!(v[0], 0.0);
            assert_eq!(*v.last().unwrap(), g.t_end);
            assert!(v.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(v.len(), g.steps + 1);
        }
        let g = TimeGrid::geometric(64.0, 1e-3, 1.2).unwrap();
        let v = g.nodes();
        assert!((v[2] / v[1] - 1.2).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::geometric(1.0, 2.0, 1.2).is_err());
        assert!(TimeGrid::geometric(1.0, 0.1, 1.0).is_err());
    }
}
