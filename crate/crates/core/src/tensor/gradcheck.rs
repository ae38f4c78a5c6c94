use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of a scalar function with fourth-order central
/// differences, `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// `f` records its computation on the supplied tape, starting from the leaf
/// it is given, and returns the scalar output. Returns the maximum
/// coordinate-wise [`relative_error`].
pub fn gradcheck<G>(f: G, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.constant(probe);
        let out = f(&mut t, leaf)?;
        let v = t.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let at = |d: f64| {
            let mut probe = x.clone();
            probe.data_mut()[i] += d;
            eval(probe)
        };
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        let numeric = (8.0 * near - far) / (12.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.2, 2.5, 0.0, -0.7]).unwrap();
        let err = gradcheck(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }
}
