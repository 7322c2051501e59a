//! Training objective: Charbonnier, Laplacian edge and Fourier terms.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// Means over elements; magnitudes do not depend on resolution.
    PerPixel,
    /// Norms over the whole residual.
    GlobalNorm,
}

impl std::str::FromStr for LossForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-pixel" => Ok(Self::PerPixel),
            "global-norm" => Ok(Self::GlobalNorm),
            _ => Err(Error::config("loss_form", format!("expected per-pixel|global-norm, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for LossForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerPixel => "per-pixel",
            Self::GlobalNorm => "global-norm",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub lambda_f: f64,
    pub form: LossForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            delta: 0.05,
            lambda_f: 0.1,
            form: LossForm::PerPixel,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be nonnegative"));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::config("lambda_f", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Loss terms as plain numbers, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub charbonnier: f64,
    pub edge: f64,
    pub frequency: f64,
    pub total: f64,
}

fn same_shape<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn charbonnier_form<T: Scalar>(d: &Var<T>, eps: f64, form: LossForm) -> Var<T> {
    match form {
        LossForm::PerPixel => ops::charbonnier_mean(d, eps),
        LossForm::GlobalNorm => ops::charbonnier_global(d, eps),
    }
}

/// Mean of `sqrt((pred - target)^2 + eps^2)`.
pub fn charbonnier<T: Scalar>(pred: &Var<T>, target: &Var<T>, eps: f64) -> Result<Var<T>> {
    same_shape(pred, target)?;
    Ok(ops::charbonnier_mean(&ops::sub(pred, target), eps))
}

/// Charbonnier distance between the Laplacians of both images.
pub fn edge_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>, eps: f64) -> Result<Var<T>> {
    same_shape(pred, target)?;
    Ok(ops::charbonnier_mean(&ops::laplacian(&ops::sub(pred, target)), eps))
}

/// Mean modulus of the complex difference of the unnormalized 2-D DFTs.
pub fn frequency_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    same_shape(pred, target)?;
    Ok(ops::fft_l1_mean(&ops::sub(pred, target)))
}

/// `L_c + delta * L_e + lambda_f * L_f`.
pub fn total_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>, cfg: &LossConfig) -> Result<(Var<T>, LossComponents)> {
    same_shape(pred, target)?;
    cfg.validate()?;
    let d = ops::sub(pred, target);
    let lc = charbonnier_form(&d, cfg.epsilon, cfg.form);
    let le = charbonnier_form(&ops::laplacian(&d), cfg.epsilon, cfg.form);
    let mut lf = ops::fft_l1_mean(&d);
    if cfg.form == LossForm::GlobalNorm {
        lf = ops::scale(&lf, d.value().len() as f64);
    }
    let total = ops::add(&ops::add(&lc, &ops::scale(&le, cfg.delta)), &ops::scale(&lf, cfg.lambda_f));
    let scalar = |v: &Var<T>| v.value().data()[0].as_f64();
    let parts = LossComponents {
        charbonnier: scalar(&lc),
        edge: scalar(&le),
        frequency: scalar(&lf),
        total: scalar(&total),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn img(v: &[f64], h: usize, w: usize) -> Var<f64> {
        Var::constant(Tensor::from_vec(&[1, 1, h, w], v.to_vec()).unwrap())
    }

    fn val(v: Result<Var<f64>>) -> f64 {
        v.unwrap().value().data()[0]
    }

    #[test]
    fn charbonnier_examples() {
        let a = img(&[0.2, 0.4, 0.6, 0.8], 2, 2);
        assert!((val(charbonnier(&a, &a, 1e-3)) - 1e-3).abs() < 1e-15);
        assert_eq!(val(charbonnier(&img(&[3.0], 1, 1), &img(&[0.0], 1, 1), 0.0)), 3.0);
        let b = img(&[0.1, 0.9, 0.3, 0.0], 2, 2);
        let nb = Var::constant(b.value().map(|v| -v));
        let z = img(&[0.0; 4], 2, 2);
        assert_eq!(val(charbonnier(&b, &z, 1e-3)), val(charbonnier(&nb, &z, 1e-3)));
    }

    #[test]
    fn edge_examples() {
        let a = img(&[0.3; 9], 3, 3);
        let b = img(&[0.7; 9], 3, 3);
        assert!((val(edge_loss(&a, &b, 1e-3)) - 1e-3).abs() < 1e-12);
        // Laplacian of the centred impulse with reflect padding
        let mut imp = [0.0; 9];
        imp[4] = 1.0;
        let expect = [0.0, 2.0, 0.0, 2.0, 4.0, 2.0, 0.0, 2.0, 0.0].iter().sum::<f64>() / 9.0;
        let got = val(edge_loss(&img(&imp, 3, 3), &img(&[0.0; 9], 3, 3), 0.0));
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn frequency_examples() {
        let a = img(&[0.25], 1, 1);
        let b = img(&[0.75], 1, 1);
        assert!((val(frequency_loss(&a, &b)) - 0.5).abs() < 1e-12);
        let c = img(&[0.4; 16], 4, 4);
        assert_eq!(val(frequency_loss(&c, &c)), 0.0);
    }

    #[test]
    fn total_loss_limits() {
        let a = img(&[0.2, 0.4, 0.6, 0.8], 2, 2);
        let (l, parts) = total_loss(&a, &a, &LossConfig::default()).unwrap();
        assert!((l.value().data()[0] - 1.05e-3).abs() < 1e-12);
        assert_eq!(parts.frequency, 0.0);
        let b = img(&[0.1, 0.9, 0.3, 0.0], 2, 2);
        let only_c = LossConfig {
            delta: 0.0,
            lambda_f: 0.0,
            ..LossConfig::default()
        };
        let (l, _) = total_loss(&a, &b, &only_c).unwrap();
        assert_eq!(l.value().data()[0], val(charbonnier(&a, &b, 1e-3)));
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let a = img(&[0.0; 4], 2, 2);
        let b = img(&[0.0; 6], 2, 3);
        assert!(matches!(charbonnier(&a, &b, 1e-3), Err(Error::Shape(_))));
        let bad = LossConfig {
            epsilon: 0.0,
            ..LossConfig::default()
        };
        assert!(total_loss(&a, &a, &bad).is_err());
    }
}
