//! Frequency-response evaluation of short real FIR filters on a uniform grid.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct ResponseGrid {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl ResponseGrid {
    pub(crate) fn new(fft_size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        ResponseGrid {
            fft,
            buf: vec![Complex64::default(); fft_size],
            scratch,
        }
    }

    pub(crate) fn size(&self) -> usize {
        self.buf.len()
    }

    /// `|H(e^{jω_k})|²` for `ω_k = 2πk/F`, `k = 0..=F/2`.
    pub(crate) fn power_response(&mut self, taps: &[f64], out: &mut Vec<f64>) {
        let fft_size = self.buf.len();
        assert!(taps.len() <= fft_size);
        for (b, &t) in self.buf.iter_mut().zip(taps.iter().chain(std::iter::repeat(&0.0))) {
            *b = Complex64::new(t, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        out.clear();
        out.extend(self.buf[..=fft_size / 2].iter().map(|c| c.norm_sqr()));
    }
}
