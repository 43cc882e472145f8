//! Layer kernels on channel-major activations.
//!
//! An [`Act`] stores `ch` channels, each holding `batch` rows of `len`
//! positions: element `(c, b, t)` lives at `c * batch * len + b * len + t`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub ch: usize,
    pub batch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(ch: usize, batch: usize, len: usize) -> Self {
        Act {
            ch,
            batch,
            len,
            data: vec![0.0; ch * batch * len],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, t: usize) -> usize {
        (c * self.batch + b) * self.len + t
    }

    fn same_shape(&self) -> Act {
        Act::zeros(self.ch, self.batch, self.len)
    }
}

/// `C = alpha * A B + beta * C` with explicit strides (row-major when the
/// column stride is 1).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn uniform_fill(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `(out_ch, in_ch, kernel)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            weight: uniform_fill(rng, out_ch * in_ch * kernel, bound),
            bias: uniform_fill(rng, out_ch, bound),
        }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Unfold `x` into `(in_ch * kernel) x (batch * len)` columns.
    fn im2col(&self, x: &Act) -> Vec<f64> {
        let (bl, len, pl) = (x.batch * x.len, x.len, self.pad_left());
        let mut cols = vec![0.0; self.in_ch * self.kernel * bl];
        for c in 0..self.in_ch {
            for j in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + j) * bl..][..bl];
                for b in 0..x.batch {
                    let src = &x.data[x.idx(c, b, 0)..][..len];
                    let dst = &mut row[b * len..][..len];
                    // Output position t reads input t + j - pl.
                    let lo = pl.saturating_sub(j);
                    let hi = (len + pl).saturating_sub(j).min(len);
                    for t in lo..hi {
                        dst[t] = src[t + j - pl];
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], dx: &mut Act) {
        let (bl, len, pl) = (dx.batch * dx.len, dx.len, self.pad_left());
        for c in 0..self.in_ch {
            for j in 0..self.kernel {
                let row = &dcols[(c * self.kernel + j) * bl..][..bl];
                for b in 0..dx.batch {
                    let start = dx.idx(c, b, 0);
                    let dst = &mut dx.data[start..][..len];
                    let src = &row[b * len..][..len];
                    let lo = pl.saturating_sub(j);
                    let hi = (len + pl).saturating_sub(j).min(len);
                    for t in lo..hi {
                        dst[t + j - pl] += src[t];
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Act) -> (Act, Vec<f64>) {
        let cols = self.im2col(x);
        let bl = x.batch * x.len;
        let ck = self.in_ch * self.kernel;
        let mut y = Act::zeros(self.out_ch, x.batch, x.len);
        for o in 0..self.out_ch {
            y.data[o * bl..(o + 1) * bl].fill(self.bias[o]);
        }
        gemm(
            self.out_ch, ck, bl, 1.0, &self.weight, ck, 1, &cols, bl, 1, 1.0, &mut y.data, bl, 1,
        );
        (y, cols)
    }

    /// Returns the input gradient when `need_dx`; accumulates parameter
    /// gradients into `grads = (dW, db)` when given.
    pub fn backward(
        &self,
        x_shape: (usize, usize),
        cols: &[f64],
        dy: &Act,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_dx: bool,
    ) -> Option<Act> {
        let (batch, len) = x_shape;
        let bl = batch * len;
        let ck = self.in_ch * self.kernel;
        if let Some((dw, db)) = grads {
            gemm(
                self.out_ch, bl, ck, 1.0, &dy.data, bl, 1, cols, 1, bl, 1.0, dw, ck, 1,
            );
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy.data[o * bl..(o + 1) * bl].iter().sum::<f64>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; ck * bl];
        gemm(
            ck, self.out_ch, bl, 1.0, &self.weight, 1, ck, &dy.data, bl, 1, 0.0, &mut dcols, bl, 1,
        );
        let mut dx = Act::zeros(self.in_ch, batch, len);
        self.col2im(&dcols, &mut dx);
        Some(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Act,
    pub inv_std: Vec<f64>,
    pub train: bool,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the quantity folded into the running average.
    pub batch_var: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm1d {
            channels,
            momentum,
            eps,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&self, x: &Act, train: bool) -> (Act, BnCache) {
        let n = x.batch * x.len;
        let mut xhat = x.same_shape();
        let mut y = x.same_shape();
        let mut inv_std = vec![0.0; self.channels];
        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        for c in 0..self.channels {
            let xs = &x.data[c * n..(c + 1) * n];
            let (mean, var) = if train {
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                batch_mean.push(mean);
                batch_var.push(if n > 1 { var * n as f64 / (n - 1) as f64 } else { var });
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = inv;
            let (g, bt) = (self.gamma[c], self.beta[c]);
            for ((h, o), v) in xhat.data[c * n..(c + 1) * n]
                .iter_mut()
                .zip(&mut y.data[c * n..(c + 1) * n])
                .zip(xs)
            {
                *h = (v - mean) * inv;
                *o = g * *h + bt;
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train,
                batch_mean,
                batch_var,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.batch_var[c];
        }
    }

    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Act,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Act {
        let n = dy.batch * dy.len;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx = dy.same_shape();
        for c in 0..self.channels {
            let dys = &dy.data[c * n..(c + 1) * n];
            let hs = &cache.xhat.data[c * n..(c + 1) * n];
            let sum_dy: f64 = dys.iter().sum();
            let sum_dy_h: f64 = dys.iter().zip(hs).map(|(d, h)| d * h).sum();
            dgamma[c] = sum_dy_h;
            dbeta[c] = sum_dy;
            let g = self.gamma[c] * cache.inv_std[c];
            let out = &mut dx.data[c * n..(c + 1) * n];
            if cache.train {
                let nf = n as f64;
                for ((o, d), h) in out.iter_mut().zip(dys).zip(hs) {
                    *o = g / nf * (nf * d - sum_dy - h * sum_dy_h);
                }
            } else {
                for (o, d) in out.iter_mut().zip(dys) {
                    *o = g * d;
                }
            }
        }
        if let Some((gg, gb)) = grads {
            for c in 0..self.channels {
                gg[c] += dgamma[c];
                gb[c] += dbeta[c];
            }
        }
        dx
    }
}

pub fn leaky_relu_forward(x: &Act, slope: f64) -> Act {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v <= 0.0 {
            *v *= slope;
        }
    }
    y
}

pub fn leaky_relu_backward(x: &Act, dy: &Act, slope: f64) -> Act {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        if *v <= 0.0 {
            *d *= slope;
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Flatten channel-major activations to a `batch x (ch * len)` matrix, the
/// feature index being `c * len + t`.
pub fn flatten(x: &Act) -> Vec<f64> {
    let d = x.ch * x.len;
    let mut f = vec![0.0; x.batch * d];
    for c in 0..x.ch {
        for b in 0..x.batch {
            f[b * d + c * x.len..][..x.len].copy_from_slice(&x.data[x.idx(c, b, 0)..][..x.len]);
        }
    }
    f
}

pub fn unflatten(f: &[f64], ch: usize, batch: usize, len: usize) -> Act {
    let d = ch * len;
    let mut x = Act::zeros(ch, batch, len);
    for c in 0..ch {
        for b in 0..batch {
            let start = x.idx(c, b, 0);
            x.data[start..start + len].copy_from_slice(&f[b * d + c * len..][..len]);
        }
    }
    x
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            in_features,
            out_features,
            weight: uniform_fill(rng, out_features * in_features, bound),
            bias: uniform_fill(rng, out_features, bound),
        }
    }

    /// `features` is `batch x in_features`; returns `batch x out_features`.
    pub fn forward(&self, features: &[f64], batch: usize) -> Vec<f64> {
        let (d, m) = (self.in_features, self.out_features);
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(batch, d, m, 1.0, features, d, 1, &self.weight, 1, d, 1.0, &mut out, m, 1);
        out
    }

    pub fn backward(
        &self,
        features: &[f64],
        dout: &[f64],
        batch: usize,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        let (d, m) = (self.in_features, self.out_features);
        if let Some((dw, db)) = grads {
            gemm(m, batch, d, 1.0, dout, 1, m, features, d, 1, 1.0, dw, d, 1);
            for b in 0..batch {
                for (g, v) in db.iter_mut().zip(&dout[b * m..(b + 1) * m]) {
                    *g += v;
                }
            }
        }
        let mut df = vec![0.0; batch * d];
        gemm(batch, m, d, 1.0, dout, m, 1, &self.weight, d, 1, 0.0, &mut df, d, 1);
        df
    }
}
