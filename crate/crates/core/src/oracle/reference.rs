//! Naive f64 forward evaluations used as finite-difference references.
//! Deliberately written as direct loops, sharing nothing with the tape kernels.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn add_bias(x: &[f64], b: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| v + b[i % b.len()]).collect()
}

/// Direct convolution: `x[n,c,h,w]`, `w[o,c,k,k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], wt: &[f64], n: usize, c: usize, h: usize, w: usize, o: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Batch norm over `[n, c, s]`; `running = None` normalizes with biased batch statistics.
pub fn batch_norm(x: &[f64], n: usize, c: usize, s: usize, g: &[f64], b: &[f64], running: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|ni| (0..s).map(move |j| (ni * c + ci) * s + j)).map(|i| x[i]).collect();
        let (mu, var) = match running {
            Some((rm, rv)) => (rm[ci], rv[ci]),
            None => {
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
                (mu, var)
            }
        };
        for ni in 0..n {
            for j in 0..s {
                let i = (ni * c + ci) * s + j;
                out[i] = g[ci] * (x[i] - mu) / (var + eps).sqrt() + b[ci];
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], s: usize) -> Vec<f64> {
    x.chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect()
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|r| {
            let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            r.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

/// Mean over rows of `Σ p (ln p − log_q)`.
pub fn kl_rows(p: &[f64], log_q: &[f64], rows: usize) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum::<f64>()
        / rows as f64
}

pub fn l1_rows(a: &[f64], b: &[f64], rows: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / rows as f64
}

pub fn cross_entropy(x: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let lp = log_softmax_rows(x, cols);
    labels.iter().enumerate().map(|(i, &l)| -lp[i * cols + l]).sum::<f64>() / labels.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
