use std::f64::consts::PI;

use crate::{Error, Result};

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))` for `0 ≤ step ≤ total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Schedule { step, total: total_steps });
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_and_midpoint() {
        assert_eq!(cosine_lr(0, 30, 5e-4, 1e-5).unwrap(), 5e-4);
        assert!((cosine_lr(30, 30, 5e-4, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(15, 30, 5e-4, 1e-5).unwrap() - (5e-4 + 1e-5) / 2.0).abs() < 1e-18);
        assert!(matches!(cosine_lr(31, 30, 1.0, 0.0), Err(Error::Schedule { step: 31, total: 30 })));
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn monotone_non_increasing() {
        let lrs: Vec<f64> = (0..=20).map(|s| cosine_lr(s, 20, 1e-3, 1e-5).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
