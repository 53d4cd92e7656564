//! Self-checks behind the `gradcheck` and `oracle-check` commands.

use std::fmt;

use edgesynth_tensor::Tensor;
use rand::Rng;

mod gradients;
mod oracles;

pub use gradients::{gradient_suite, GRADIENT_TOLERANCE};
#[cfg(test)]
pub(crate) use gradients::tiny_config;
pub use oracles::{closed_form_suite, fixed_batch_check, fixed_batch_config, oracle_suite};

/// Which side of the bound a measured value must fall on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    AtMost,
    AtLeast,
}

/// One named measurement against its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub kind: Side,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, kind: Side::AtMost }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, kind: Side::AtLeast }
    }

    /// A yes/no property, recorded as `0` when it holds.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::at_most(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn passed(&self) -> bool {
        match self.kind {
            Side::AtMost => self.value <= self.bound,
            Side::AtLeast => self.value >= self.bound,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.kind {
            Side::AtMost => "<=",
            Side::AtLeast => ">=",
        };
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<48} {:.3e} {op} {:.1e}", self.name, self.value, self.bound)
    }
}

pub(crate) fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("random tensor shape")
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_verdicts() {
        assert!(Check::at_most("a", 1e-4, 1e-3).passed());
        assert!(!Check::at_least("b", 0.4, 0.5).passed());
        assert!(Check::holds("c", true).passed() && !Check::holds("d", false).passed());
        assert!(!Check::at_most("nan", f64::NAN, 1.0).passed());
        assert!(Check::at_most("e", 0.0, 0.0).to_string().starts_with("PASS"));
    }
}
