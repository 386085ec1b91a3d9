//! The sequence-axis transform used by the frequency-aware encoder: a direct
//! DFT, its inverse, Parseval's identity and the high-pass mask.
//!
//! cargo run --release --example spectrum_highpass

use spatialoc::diffcore::{dft, highpass_keeps, idft, ComplexSpectrum, Tensor};

fn main() -> spatialoc::Result<()> {
    // A slow ramp plus a fast alternation.
    let t_len = 10;
    let x: Vec<f64> = (0..t_len).map(|t| 0.1 * t as f64 + if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let z = dft(&x)?;
    println!(" m   |Z[m]|   kept");
    for m in 0..t_len {
        let mag = z.real.data()[m].hypot(z.imag.data()[m]);
        println!("{m:2} {mag:8.3}   {}", if highpass_keeps(m, t_len) { "yes" } else { "" });
    }

    let time_energy: f64 = x.iter().map(|v| v * v).sum();
    let freq_energy: f64 = z.real.data().iter().zip(z.imag.data()).map(|(r, i)| r * r + i * i).sum::<f64>() / t_len as f64;
    println!("\nParseval: {time_energy:.12} vs {freq_energy:.12}");
    let back = idft(&z)?;
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("round trip max error: {err:.2e}");

    // Keep only the top bins and go back. Taking the real part moves half of
    // the kept energy into the mirrored low bins.
    let keep = |t: &Tensor| -> Tensor {
        let data = t.data().iter().enumerate().map(|(m, v)| if highpass_keeps(m, t_len) { *v } else { 0.0 }).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    let masked = ComplexSpectrum { real: keep(&z.real), imag: keep(&z.imag) };
    let high = idft(&masked)?;
    println!("\nhigh-pass part: {}", high.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));

    for t in [1, 4, 10, 64] {
        let kept: Vec<usize> = (0..t).filter(|&m| highpass_keeps(m, t)).collect();
        println!("T={t:2}: keeps {} bins starting at {:?}", kept.len(), kept.first());
    }
    Ok(())
}
