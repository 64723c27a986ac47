//! Reference quadrature rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss-Legendre points and weights mapped to `[0, 1]`.
pub fn gauss_unit(n: usize) -> Result<Vec<(f64, f64)>> {
    let rule: Vec<(f64, f64)> = match n {
        1 => vec![(0.0, 2.0)],
        2 => {
            let a = 1.0 / 3f64.sqrt();
            vec![(-a, 1.0), (a, 1.0)]
        }
        3 => {
            let a = (0.6f64).sqrt();
            vec![(-a, 5.0 / 9.0), (0.0, 8.0 / 9.0), (a, 5.0 / 9.0)]
        }
        4 => {
            let s = 2.0 * (1.2f64).sqrt();
            let a = ((3.0 - s) / 7.0).sqrt();
            let b = ((3.0 + s) / 7.0).sqrt();
            let wa = (18.0 + 30f64.sqrt()) / 36.0;
            let wb = (18.0 - 30f64.sqrt()) / 36.0;
            vec![(-b, wb), (-a, wa), (a, wa), (b, wb)]
        }
        _ => return Err(Error::Config(format!("Gauss rule with {n} points is not available"))),
    };
    Ok(rule.into_iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect())
}

/// Triangle rule as barycentric `(λ1, λ2)` and weights summing to 1.
pub fn triangle_rule(n: usize) -> Result<Vec<([f64; 2], f64)>> {
    Ok(match n {
        1 => vec![([1.0 / 3.0, 1.0 / 3.0], 1.0)],
        3 => vec![
            ([1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
            ([2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
            ([1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
        ],
        6 => {
            let (a1, w1) = (0.445948490915965, 0.223381589678011);
            let (a2, w2) = (0.091576213509771, 0.109951743655322);
            let b1 = 1.0 - 2.0 * a1;
            let b2 = 1.0 - 2.0 * a2;
            vec![
                ([a1, a1], w1),
                ([b1, a1], w1),
                ([a1, b1], w1),
                ([a2, a2], w2),
                ([b2, a2], w2),
                ([a2, b2], w2),
            ]
        }
        _ => return Err(Error::Config(format!("triangle rule with {n} points is not available"))),
    })
}

/// Point counts of the rules used on cells, subcells and lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Gauss points per direction on uncut elements.
    pub tensor: usize,
    /// Points per subcell triangle.
    pub triangle: usize,
    /// Gauss points per interface or boundary segment.
    pub line: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { tensor: 2, triangle: 3, line: 2 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        gauss_unit(self.tensor)?;
        triangle_rule(self.triangle)?;
        gauss_unit(self.line)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials() {
        for n in 1..=4 {
            let r = gauss_unit(n).unwrap();
            for p in 0..2 * n {
                let s: f64 = r.iter().map(|(x, w)| w * x.powi(p as i32)).sum();
                assert!((s - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn triangle_rules_integrate_quadratics() {
        // Reference triangle area 1/2: ∫x² = 1/12, ∫xy = 1/24.
        for n in [3, 6] {
            let r = triangle_rule(n).unwrap();
            let sxx: f64 = r.iter().map(|(l, w)| 0.5 * w * l[0] * l[0]).sum();
            let sxy: f64 = r.iter().map(|(l, w)| 0.5 * w * l[0] * l[1]).sum();
            assert!((sxx - 1.0 / 12.0).abs() < 1e-12);
            assert!((sxy - 1.0 / 24.0).abs() < 1e-12);
        }
    }
}
