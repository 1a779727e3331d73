//! Central finite differences, the independent oracle for `Tape::backward`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    Tensor::new(x.shape().to_vec(), finite_difference_at(f, x, h, &all)?)
}

/// Central differences at the listed coordinates only, in that order.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(alloc::format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(Error::OutOfRange {
                what: "finite-difference coordinate",
                index: i,
                len: x.len(),
            });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    let scale = libm::sqrt(na.max(nb));
    if scale < 1e-10 {
        libm::sqrt(diff)
    } else {
        libm::sqrt(diff) / scale
    }
}
