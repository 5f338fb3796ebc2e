//! Unitary DFT helpers (`1/sqrt(N)` scaling) built on rustfft.

use crate::C64;
use rustfft::FftPlanner;

/// One-sided spectrum (`N/2 + 1` bins) of a real block with `1/sqrt(N)` scaling.
pub fn rfft_unitary(x: &[f64]) -> Vec<C64> {
    let n = x.len();
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.truncate(n / 2 + 1);
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Full complex spectrum with `1/sqrt(N)` scaling.
pub fn fft_unitary(x: &[C64]) -> Vec<C64> {
    let n = x.len();
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Batch one-sided spectra for many equal-length real blocks, sharing one plan.
pub fn rfft_unitary_many<'a, I>(blocks: I, n: usize) -> Vec<Vec<C64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let plan = FftPlanner::new().plan_fft_forward(n);
    let scale = 1.0 / (n as f64).sqrt();
    blocks
        .into_iter()
        .map(|x| {
            let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
            plan.process(&mut buf);
            buf.truncate(n / 2 + 1);
            buf.iter_mut().for_each(|v| *v *= scale);
            buf
        })
        .collect()
}
