//! Discrete Fourier transform by direct summation.
//!
//! Transforms act along the row axis of a `[T, C]` matrix, one column at a
//! time, and are plain linear maps so gradients flow through both the real
//! and imaginary parts.

use std::f64::consts::PI;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Spectrum held as two real tensors of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

/// Spectrum living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SpectrumVar {
    pub real: Var,
    pub imag: Var,
}

/// `cos(2π m t / T)` and `sin(2π m t / T)` as `[T, T]` matrices.
fn twiddles(t_len: usize) -> (Tensor, Tensor) {
    let mut c = Vec::with_capacity(t_len * t_len);
    let mut s = Vec::with_capacity(t_len * t_len);
    for m in 0..t_len {
        for t in 0..t_len {
            // reduce m·t mod T first so large products keep full precision
            let angle = 2.0 * PI * ((m * t) % t_len) as f64 / t_len as f64;
            c.push(angle.cos());
            s.push(angle.sin());
        }
    }
    let shape = vec![t_len, t_len];
    (
        Tensor::new(shape.clone(), c).expect("square"),
        Tensor::new(shape, s).expect("square"),
    )
}

/// Forward transform of each column of `x: [T, C]`.
pub fn dft_var(g: &mut Graph, x: Var) -> Result<SpectrumVar> {
    let (t_len, _) = g.value(x).dims2()?;
    if t_len == 0 {
        return Err(Error::EmptyInput("dft of a zero-length sequence".into()));
    }
    let (c, s) = twiddles(t_len);
    let c = g.constant(c);
    let s = g.constant(s);
    let real = g.matmul(c, x)?;
    let sx = g.matmul(s, x)?;
    let imag = g.neg(sx);
    Ok(SpectrumVar { real, imag })
}

/// Real part of the inverse transform of each column.
pub fn idft_real_var(g: &mut Graph, z: SpectrumVar) -> Result<Var> {
    let re = g.value(z.real);
    let im = g.value(z.imag);
    contract!(
        re.shape() == im.shape(),
        "idft: real {:?} and imaginary {:?} parts differ in shape",
        re.shape(),
        im.shape()
    );
    let (t_len, _) = re.dims2()?;
    if t_len == 0 {
        return Err(Error::EmptyInput("idft of a zero-length spectrum".into()));
    }
    let (c, s) = twiddles(t_len);
    let c = g.constant(c);
    let s = g.constant(s);
    let cr = g.matmul(c, z.real)?;
    let si = g.matmul(s, z.imag)?;
    let diff = g.sub(cr, si)?;
    Ok(g.scale(diff, 1.0 / t_len as f64))
}

/// Spectrum of a real sequence.
pub fn dft(x: &[f64]) -> Result<ComplexSpectrum> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![x.len(), 1], x.to_vec())?);
    let z = dft_var(&mut g, xv)?;
    Ok(ComplexSpectrum {
        real: g.value(z.real).clone().reshaped(vec![x.len()])?,
        imag: g.value(z.imag).clone().reshaped(vec![x.len()])?,
    })
}

/// Real part of the inverse transform.
pub fn idft(z: &ComplexSpectrum) -> Result<Vec<f64>> {
    contract!(
        z.real.len() == z.imag.len(),
        "idft: real part has {} bins, imaginary part {}",
        z.real.len(),
        z.imag.len()
    );
    let n = z.real.len();
    let mut g = Graph::new();
    let real = g.constant(Tensor::new(vec![n, 1], z.real.data().to_vec())?);
    let imag = g.constant(Tensor::new(vec![n, 1], z.imag.data().to_vec())?);
    let x = idft_real_var(&mut g, SpectrumVar { real, imag })?;
    Ok(g.value(x).data().to_vec())
}

/// Whether bin `m` survives the high-pass mask `m ≥ 0.7·T`.
pub fn highpass_keeps(m: usize, t_len: usize) -> bool {
    // integer form of m >= 0.7 T, immune to rounding in 0.7
    10 * m >= 7 * t_len
}

/// Indicator column `[T, 1]` of the kept bins.
pub fn highpass_mask(t_len: usize) -> Tensor {
    let data = (0..t_len)
        .map(|m| if highpass_keeps(m, t_len) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![t_len, 1], data).expect("column")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn constant_signal_is_dc() {
        let z = dft(&[1.0; 4]).unwrap();
        assert!(close(z.real.data(), &[4.0, 0.0, 0.0, 0.0], 1e-12));
        assert!(close(z.imag.data(), &[0.0; 4], 1e-12));
    }

    #[test]
    fn impulse_is_flat() {
        let z = dft(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(z.real.data(), &[1.0; 4], 1e-12));
        assert!(close(z.imag.data(), &[0.0; 4], 1e-12));
    }

    #[test]
    fn sine_like_sequence() {
        let z = dft(&[0.0, 1.0, 0.0, -1.0]).unwrap();
        assert!(close(z.real.data(), &[0.0; 4], 1e-12));
        assert!(close(z.imag.data(), &[0.0, -2.0, 0.0, 2.0], 1e-12));
        let back = idft(&z).unwrap();
        assert!(close(&back, &[0.0, 1.0, 0.0, -1.0], 1e-12));
    }

    #[test]
    fn dc_only_inverse() {
        let z = ComplexSpectrum {
            real: Tensor::row(&[4.0, 0.0, 0.0, 0.0]),
            imag: Tensor::row(&[0.0; 4]),
        };
        assert!(close(&idft(&z).unwrap(), &[1.0; 4], 1e-12));
    }

    #[test]
    fn round_trip() {
        let x = [0.3, -1.2, 7.0];
        assert!(close(&idft(&dft(&x).unwrap()).unwrap(), &x, 1e-9));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(dft(&[]), Err(Error::EmptyInput(_))));
        let z = ComplexSpectrum {
            real: Tensor::row(&[1.0, 2.0]),
            imag: Tensor::row(&[1.0]),
        };
        assert!(matches!(idft(&z), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_bins() {
        let kept = |t: usize| (0..t).filter(|&m| highpass_keeps(m, t)).collect::<Vec<_>>();
        assert_eq!(kept(10), vec![7, 8, 9]);
        assert_eq!(kept(4), vec![3]);
        assert!(kept(1).is_empty());
    }
}
