//! One-sided pooled two-proportion z-test on accuracy estimates.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Ev3Error, Result};
use crate::losses::EvalRecord;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    ASignificantlyBetter,
    NotSignificant,
}

impl Verdict {
    pub fn is_significant(self) -> bool {
        self == Verdict::ASignificantlyBetter
    }
}

/// Outcome of [`z_test`], keeping the statistic for traces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZTest {
    /// `None` when the pooled proportion is 0 or 1 and the variance vanishes.
    pub z: Option<f64>,
    pub critical: f64,
    pub verdict: Verdict,
}

/// Upper-tail critical value of the standard normal at `confidence`.
pub fn critical_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.5 && confidence < 1.0) {
        return Err(Ev3Error::Config(format!(
            "confidence level must lie in (0.5, 1), got {confidence}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(confidence))
}

/// Pooled z statistic for success counts `(ca of na)` versus `(cb of nb)`.
/// Returns `None` when the pooled proportion is degenerate.
pub fn pooled_z(ca: usize, na: usize, cb: usize, nb: usize) -> Option<f64> {
    let (na_f, nb_f) = (na as f64, nb as f64);
    let pooled = (ca + cb) as f64 / (na_f + nb_f);
    if ca + cb == 0 || ca + cb == na + nb {
        return None;
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / na_f + 1.0 / nb_f)).sqrt();
    Some((ca as f64 / na_f - cb as f64 / nb_f) / se)
}

/// Tests whether `a` is significantly more accurate than `b`.
pub fn z_test(a: &EvalRecord, b: &EvalRecord, confidence: f64) -> Result<ZTest> {
    z_test_counts(a.correct(), a.n(), b.correct(), b.n(), confidence)
}

pub fn z_test_counts(ca: usize, na: usize, cb: usize, nb: usize, confidence: f64) -> Result<ZTest> {
    if na == 0 || nb == 0 {
        return Err(Ev3Error::Contract("z-test needs non-empty samples".into()));
    }
    if ca > na || cb > nb {
        return Err(Ev3Error::Contract(format!("invalid counts {ca}/{na} vs {cb}/{nb}")));
    }
    let critical = critical_value(confidence)?;
    let z = pooled_z(ca, na, cb, nb);
    let verdict = match z {
        Some(z) if z > critical => Verdict::ASignificantlyBetter,
        _ => Verdict::NotSignificant,
    };
    Ok(ZTest { z, critical, verdict })
}
