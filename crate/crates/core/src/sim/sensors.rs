//! Deterministic synthetic sensor generators. A sample is a pure function of
//! virtual time (plus a fixed phase), so replays are exact.

use crate::platform::SimTime;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Constant {
        values: Vec<i64>,
    },
    Sinusoid {
        amplitude: f64,
        period_ms: f64,
        axes: usize,
        #[serde(default)]
        phase: f64,
    },
    /// Recorded playback: rows cycle at the given frame period.
    Trace {
        frame_ms: f64,
        rows: Vec<Vec<i64>>,
    },
}

impl GeneratorSpec {
    pub fn sample(&self, t: SimTime) -> Vec<i64> {
        match self {
            GeneratorSpec::Constant { values } => values.clone(),
            GeneratorSpec::Sinusoid {
                amplitude,
                period_ms,
                axes,
                phase,
            } => {
                let ms = t.as_ms();
                (0..*axes)
                    .map(|axis| {
                        let shift = phase + axis as f64 * std::f64::consts::FRAC_PI_3;
                        (amplitude * (2.0 * std::f64::consts::PI * ms / period_ms + shift).sin())
                            .round() as i64
                    })
                    .collect()
            }
            GeneratorSpec::Trace { frame_ms, rows } => {
                if rows.is_empty() {
                    return Vec::new();
                }
                let idx = (t.as_ms() / frame_ms) as usize % rows.len();
                rows[idx].clone()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_constant() {
        let g = GeneratorSpec::Constant {
            values: vec![1, 2, 3],
        };
        assert_eq!(g.sample(SimTime::ZERO), vec![1, 2, 3]);
        assert_eq!(g.sample(SimTime::from_ms(500.0)), vec![1, 2, 3]);
    }

    #[test]
    fn sinusoid_three_axes_and_deterministic() {
        let g = GeneratorSpec::Sinusoid {
            amplitude: 64.0,
            period_ms: 500.0,
            axes: 3,
            phase: 0.0,
        };
        let a = g.sample(SimTime::from_ms(33.0));
        let b = g.sample(SimTime::from_ms(33.0));
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 64));
    }

    #[test]
    fn trace_cycles() {
        let g = GeneratorSpec::Trace {
            frame_ms: 10.0,
            rows: vec![vec![1], vec![2]],
        };
        assert_eq!(g.sample(SimTime::ZERO), vec![1]);
        assert_eq!(g.sample(SimTime::from_ms(10.0)), vec![2]);
        assert_eq!(g.sample(SimTime::from_ms(20.0)), vec![1]);
    }
}
