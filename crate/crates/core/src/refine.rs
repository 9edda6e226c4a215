//! Uncertainty estimation, acceptance masking, binarization and two-stage
//! mask fusion. These are pure array functions; the refinement decoder
//! itself lives on the network (it shares the decoder architecture).

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar};
use ndarray::Array2;

/// Binary mask, `1` = cloud.
pub type Mask = Array2<u8>;

/// `U = 1 - 2|P - 0.5|`: 1 at the decision boundary, 0 at full confidence.
pub fn uncertainty_map<F: Scalar>(p: &Array2<F>) -> Result<Array2<F>> {
    if p.iter().any(|&v| v < F::zero() || v > F::one()) {
        return Err(Error::Domain(
            "probability map has values outside [0,1]".into(),
        ));
    }
    let half = sc::<F>(0.5);
    let two = sc::<F>(2.0);
    Ok(p.mapv(|v| F::one() - two * (v - half).abs()))
}

/// Acceptance mask `M = 1(U < gamma)` (strict).
pub fn acceptance_mask<F: Scalar>(u: &Array2<F>, gamma: F) -> Mask {
    u.mapv(|v| u8::from(v < gamma))
}

/// `1` where `P > tau` (strict), else `0`.
pub fn binarize<F: Scalar>(p: &Array2<F>, tau: F) -> Mask {
    p.mapv(|v| u8::from(v > tau))
}

/// Per-pixel select: coarse prediction where accepted, refined elsewhere.
pub fn fuse_masks(m: &Mask, y_c: &Mask, y_r: &Mask) -> Result<Mask> {
    if m.dim() != y_c.dim() || m.dim() != y_r.dim() {
        return Err(Error::Shape(format!(
            "fuse_masks: shapes {:?}, {:?}, {:?} differ",
            m.dim(),
            y_c.dim(),
            y_r.dim()
        )));
    }
    for (name, arr) in [("M", m), ("Y_c", y_c), ("Y_r", y_r)] {
        if arr.iter().any(|&v| v > 1) {
            return Err(Error::Domain(format!("{name} is not a binary mask")));
        }
    }
    let mut out = Mask::zeros(m.dim());
    ndarray::Zip::from(&mut out)
        .and(m)
        .and(y_c)
        .and(y_r)
        .for_each(|o, &m, &c, &r| *o = m * c + (1 - m) * r);
    Ok(out)
}

/// Everything the two-stage pipeline produces for one input.
#[derive(Clone, Debug)]
pub struct StagePipelineOutput<F: Scalar> {
    pub p_c: Array2<F>,
    pub u: Array2<F>,
    pub m: Mask,
    pub p_r: Array2<F>,
    pub y_c: Mask,
    pub y_r: Mask,
    pub y: Mask,
}

impl<F: Scalar> StagePipelineOutput<F> {
    /// Mean of the uncertainty map (hard-sample score for the image).
    pub fn mean_uncertainty(&self) -> f64 {
        let n = self.u.len().max(1);
        self.u.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64
    }

    /// Fraction of pixels where the coarse prediction was accepted.
    pub fn acceptance_rate(&self) -> f64 {
        let n = self.m.len().max(1);
        self.m.iter().map(|&v| v as usize).sum::<usize>() as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uncertainty_fixed_points() {
        let p = arr2(&[[0.5f64, 0.0], [1.0, 0.8]]);
        let u = uncertainty_map(&p).unwrap();
        assert_eq!(u[[0, 0]], 1.0);
        assert_eq!(u[[0, 1]], 0.0);
        assert_eq!(u[[1, 0]], 0.0);
        assert!((u[[1, 1]] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_rejects_out_of_range() {
        let p = arr2(&[[1.2f64]]);
        assert!(matches!(uncertainty_map(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn acceptance_is_strict() {
        let u = arr2(&[[0.39f64, 0.4, 0.0]]);
        let m = acceptance_mask(&u, 0.4);
        assert_eq!(m.as_slice().unwrap(), &[1, 0, 1]);
    }

    #[test]
    fn binarize_is_strict() {
        let p = arr2(&[[0.5f64, 0.51, 1.0]]);
        let m = binarize(&p, 0.5);
        assert_eq!(m.as_slice().unwrap(), &[0, 1, 1]);
    }

    #[test]
    fn fusion_selects_per_pixel() {
        let m = arr2(&[[1u8, 0], [0, 1]]);
        let y_c = arr2(&[[1u8, 1], [0, 0]]);
        let y_r = arr2(&[[0u8, 0], [1, 1]]);
        let y = fuse_masks(&m, &y_c, &y_r).unwrap();
        assert_eq!(y, arr2(&[[1u8, 0], [1, 0]]));
    }

    #[test]
    fn fusion_rejects_non_binary() {
        let m = arr2(&[[2u8]]);
        let y = arr2(&[[1u8]]);
        assert!(matches!(fuse_masks(&m, &y, &y), Err(Error::Domain(_))));
    }

    #[test]
    fn fusion_identities() {
        let y_c = arr2(&[[1u8, 0], [1, 0]]);
        let y_r = arr2(&[[0u8, 1], [0, 1]]);
        let ones = Mask::ones((2, 2));
        let zeros = Mask::zeros((2, 2));
        assert_eq!(fuse_masks(&ones, &y_c, &y_r).unwrap(), y_c);
        assert_eq!(fuse_masks(&zeros, &y_c, &y_r).unwrap(), y_r);
    }

    #[test]
    fn gamma_window_algebra() {
        // U = 1 - 2|P - 0.5| gives U < gamma  <=>  |P - 0.5| > (1 - gamma)/2
        let mut rng_state = 0x12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..10_000 {
            let p: f64 = next();
            let gamma = 0.4;
            let u = 1.0 - 2.0 * (p - 0.5).abs();
            assert_eq!(u < gamma, (p - 0.5).abs() > (1.0 - gamma) / 2.0);
        }
    }
}
