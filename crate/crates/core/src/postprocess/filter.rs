use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneEuroParams {
    /// Hz.
    pub min_cutoff: f64,
    pub beta: f64,
    /// Hz.
    pub d_cutoff: f64,
}

impl Default for OneEuroParams {
    fn default() -> Self {
        OneEuroParams {
            min_cutoff: 1.0,
            beta: 0.007,
            d_cutoff: 1.0,
        }
    }
}

impl OneEuroParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_cutoff > 0.0 && self.d_cutoff > 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("invalid 1€ parameters {self:?}")));
        }
        Ok(())
    }
}

fn smoothing(cutoff: f64, dt: f64) -> f64 {
    let tau = 1.0 / (2.0 * PI * cutoff);
    1.0 / (1.0 + tau / dt)
}

/// Scalar 1€ filter.
#[derive(Clone, Debug, PartialEq)]
pub struct OneEuro {
    pub params: OneEuroParams,
    /// Filtered value, filtered derivative, timestamp.
    state: Option<(f64, f64, f64)>,
}

impl OneEuro {
    pub fn new(params: OneEuroParams) -> Self {
        OneEuro { params, state: None }
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    pub fn last(&self) -> Option<f64> {
        self.state.map(|s| s.0)
    }

    pub fn step(&mut self, x: f64, t: f64) -> Result<f64> {
        let Some((prev, dprev, tprev)) = self.state else {
            self.state = Some((x, 0.0, t));
            return Ok(x);
        };
        let dt = t - tprev;
        if !(dt > 0.0) {
            return Err(Error::NonIncreasingTimestamp { prev: tprev, t });
        }
        let p = &self.params;
        let dx = (x - prev) / dt;
        let ad = smoothing(p.d_cutoff, dt);
        let dhat = dprev + ad * (dx - dprev);
        let cutoff = p.min_cutoff + p.beta * dhat.abs();
        let a = smoothing(cutoff, dt);
        let out = prev + a * (x - prev);
        self.state = Some((out, dhat, t));
        Ok(out)
    }
}

/// Independent 1€ filters over a fixed number of channels.
#[derive(Clone, Debug, PartialEq)]
pub struct OneEuroBank {
    filters: Vec<OneEuro>,
}

impl OneEuroBank {
    pub fn new(channels: usize, params: OneEuroParams) -> Self {
        OneEuroBank {
            filters: vec![OneEuro::new(params); channels],
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn last(&self) -> Option<Vec<f64>> {
        self.filters.iter().map(OneEuro::last).collect()
    }

    pub fn step(&mut self, xs: &[f64], t: f64) -> Result<Vec<f64>> {
        if xs.len() != self.filters.len() {
            return Err(Error::invalid(
                "one_euro",
                format!("{} values for {} channels", xs.len(), self.filters.len()),
            ));
        }
        self.filters.iter_mut().zip(xs).map(|(f, &x)| f.step(x, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_fixed_point() {
        let mut f = OneEuro::new(OneEuroParams::default());
        for i in 0..50 {
            assert_eq!(f.step(3.25, i as f64 / 30.0).unwrap(), 3.25);
        }
    }

    #[test]
    fn transparent_limit() {
        let mut f = OneEuro::new(OneEuroParams {
            min_cutoff: 1e9,
            beta: 0.0,
            d_cutoff: 1.0,
        });
        for i in 0..20 {
            let x = (i as f64).sin();
            assert!((f.step(x, i as f64 / 30.0).unwrap() - x).abs() < 1e-6);
        }
    }

    #[test]
    fn time_must_advance() {
        let mut f = OneEuro::new(OneEuroParams::default());
        f.step(1.0, 0.5).unwrap();
        assert!(matches!(f.step(1.0, 0.5), Err(Error::NonIncreasingTimestamp { .. })));
    }
}
