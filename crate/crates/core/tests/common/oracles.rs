//! Brute-force reference implementations, independent of the library's
//! GEMM/im2col and tape paths.

use griduq::autodiff::Tensor;

/// Direct nested-loop cross-correlation with zero padding, f64 accumulation.
pub fn direct_conv2d(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f32; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[co] as f64;
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * cin + ci) * h + ii as usize) * wd + jj as usize];
                                let wv = w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((s * cout + co) * oh + i) * ow + j] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Per-window scan for 2x2 (or k x k) max pooling.
pub fn naive_maxpool(x: &Tensor, k: usize) -> Vec<f32> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::new();
    for p in 0..n * c {
        for i in (0..h).step_by(k) {
            for j in (0..w).step_by(k) {
                let mut m = f32::NEG_INFINITY;
                for di in 0..k {
                    for dj in 0..k {
                        m = m.max(x.data()[(p * h + i + di) * w + j + dj]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn loop_gaussian_nll(mu: &[f32], s2: &[f32], y: &[f32], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..mu.len() {
        if mask[i] {
            let r = y[i] as f64 - mu[i] as f64;
            let v = s2[i] as f64;
            sum += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
            n += 1.0;
        }
    }
    sum / n
}

pub fn loop_rmse(pred: &[f32], y: &[f32], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] as f64 - y[i] as f64;
            sum += d * d;
            n += 1.0;
        }
    }
    (sum / n).sqrt()
}

/// Population mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Rank-based Spearman correlation with average ranks for ties, computed
/// by sorting (no shared code with the library).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, _) = mean_var(&ra);
    let (mb, _) = mean_var(&rb);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
