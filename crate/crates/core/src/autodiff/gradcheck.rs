use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative discrepancy
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over all coordinates of `x`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if h.is_nan() || h <= S::zero() {
        return Err(Error::Invalid("grad_check: step must be positive".into()));
    }
    let eval = |point: Tensor<S>| -> Result<S> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let t = tape.value(out);
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let two = S::lit(2.0);
    let mut worst = S::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = Tensor::new(x.shape().to_vec(), x.data().to_vec())?;
        plus.data_mut()[i] = x.data()[i] + h;
        let mut minus = Tensor::new(x.shape().to_vec(), x.data().to_vec())?;
        minus.data_mut()[i] = x.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let err = (a - numeric).abs() / S::one().max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
