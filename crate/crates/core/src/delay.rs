//! Tap-delay line with a contiguous most-recent-first view.

/// Fixed-length delay line. `window()` returns `[x(n), x(n-1), ..., x(n-len+1)]`
/// as one contiguous slice; the backing buffer is over-allocated so that the
/// shift only happens once every `len` pushes.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    buf: Vec<f64>,
    len: usize,
    pos: usize,
}

impl DelayLine {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "delay line length must be positive");
        let extra = len.max(16);
        DelayLine {
            buf: vec![0.0; len + extra],
            len,
            pos: extra,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        if self.pos == 0 {
            let extra = self.buf.len() - self.len;
            self.buf.copy_within(0..self.len - 1, extra + 1);
            self.pos = extra + 1;
        }
        self.pos -= 1;
        self.buf[self.pos] = x;
    }

    #[inline]
    pub fn window(&self) -> &[f64] {
        &self.buf[self.pos..self.pos + self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reset(&mut self) {
        self.buf.iter_mut().for_each(|x| *x = 0.0);
        self.pos = self.buf.len() - self.len;
    }
}
