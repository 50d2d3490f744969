//! Central finite differences, used as an oracle for the tape.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate of `x`.
pub fn central_difference<E>(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64, E>) -> Result<Tensor, E> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        set_flat(&mut probe, i, orig + h);
        let up = f(&probe)?;
        set_flat(&mut probe, i, orig - h);
        let down = f(&probe)?;
        set_flat(&mut probe, i, orig);
        out.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape(), out).expect("finite differences of finite values"))
}

fn set_flat(t: &mut Tensor, i: usize, v: f64) {
    t.data_mut()[i] = v;
}

/// Largest `|analytic − numeric| / (|numeric| + 1e-8)` over all elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}
