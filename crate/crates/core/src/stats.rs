//! Estimates, error bars and the block-parallel sampling driver.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::Streams;

/// A Monte Carlo (or exact) value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, samples: 0 }
    }

    pub fn new(value: f64, std_error: f64, samples: u64) -> Self {
        Self { value, std_error, samples }
    }

    /// Standardized distance to a reference value. Zero when both agree exactly.
    pub fn z_against(&self, reference: f64) -> f64 {
        let d = self.value - reference;
        if d == 0.0 {
            0.0
        } else if self.std_error == 0.0 {
            f64::INFINITY * d.signum()
        } else {
            d / self.std_error
        }
    }

    pub fn z_between(&self, other: &Estimate) -> f64 {
        let d = self.value - other.value;
        let s = self.std_error.hypot(other.std_error);
        if d == 0.0 {
            0.0
        } else if s == 0.0 {
            f64::INFINITY * d.signum()
        } else {
            d / s
        }
    }
}

/// Neumaier compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-block sums of a fixed number of statistics.
#[derive(Clone, Debug)]
pub struct BlockSums {
    nstat: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl BlockSums {
    pub fn new(nstat: usize) -> Self {
        Self { nstat, sums: Vec::new(), counts: Vec::new() }
    }

    pub fn push(&mut self, sums: Vec<f64>, count: u64) {
        debug_assert_eq!(sums.len(), self.nstat);
        self.sums.push(sums);
        self.counts.push(count);
    }

    pub fn blocks(&self) -> usize {
        self.sums.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn means(&self) -> Vec<f64> {
        let n = self.total() as f64;
        (0..self.nstat).map(|k| self.sums.iter().map(|s| s[k]).sum::<f64>() / n).collect()
    }

    /// Jackknife over blocks of an arbitrary smooth function of the means.
    pub fn jackknife(&self, f: impl Fn(&[f64]) -> f64) -> Estimate {
        let b = self.blocks();
        let n = self.total();
        let totals: Vec<f64> = (0..self.nstat).map(|k| self.sums.iter().map(|s| s[k]).sum()).collect();
        let full: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
        let value = f(&full);
        if b < 2 {
            return Estimate::new(value, f64::NAN, n);
        }
        let mut thetas = Vec::with_capacity(b);
        let mut loo = vec![0.0; self.nstat];
        for i in 0..b {
            let m = (n - self.counts[i]) as f64;
            for k in 0..self.nstat {
                loo[k] = (totals[k] - self.sums[i][k]) / m;
            }
            thetas.push(f(&loo));
        }
        let mean = thetas.iter().sum::<f64>() / b as f64;
        let var = thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() * (b as f64 - 1.0) / b as f64;
        Estimate::new(value, var.sqrt(), n)
    }
}

/// Default number of jackknife blocks for sampling runs.
pub const DEFAULT_BLOCKS: usize = 100;

/// Sums of one block and its sample count.
type BlockResult = Result<(Vec<f64>, u64)>;

/// Split `n_samples` into blocks, run each block on its own stream and collect
/// the per-block sums. Block `i` always uses stream `i`, so the result does not
/// depend on `workers`.
pub fn run_blocks<F>(n_samples: u64, nstat: usize, streams: &Streams, workers: usize, body: F) -> Result<BlockSums>
where
    F: Fn(&mut ChaCha8Rng, u64, &mut [f64]) -> Result<()> + Sync,
{
    ensure!(n_samples > 0, Parameter, "sample count must be positive");
    let nblocks = (DEFAULT_BLOCKS as u64).min(n_samples) as usize;
    let base = n_samples / nblocks as u64;
    let extra = (n_samples % nblocks as u64) as usize;
    let size = |i: usize| base + u64::from(i < extra);
    let workers = workers.max(1).min(nblocks);
    let run_one = |i: usize| -> BlockResult {
        let mut rng = streams.rng(i as u64);
        let mut sums = vec![0.0; nstat];
        body(&mut rng, size(i), &mut sums)?;
        Ok((sums, size(i)))
    };
    let mut results: Vec<Option<BlockResult>> = (0..nblocks).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_one(i));
        }
    } else {
        let chunks: Vec<Vec<(usize, BlockResult)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_one = &run_one;
                    scope.spawn(move || (w..nblocks).step_by(workers).map(|i| (i, run_one(i))).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for (i, r) in chunks.into_iter().flatten() {
            results[i] = Some(r);
        }
    }
    let mut out = BlockSums::new(nstat);
    for r in results {
        let (s, c) = r.expect("every block ran")?;
        out.push(s, c);
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean with the naive i.i.d. standard error.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate::new(m, f64::NAN, n as u64);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Estimate::new(m, (var / n as f64).sqrt(), n as u64)
}

/// Integrated autocorrelation time with Sokal's automatic window (c = 6).
/// Convention: tau = 1/2 + sum_t rho(t), so uncorrelated data gives 1/2.
pub fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 0.5;
    }
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for t in 1..n / 2 {
        let c = xs[..n - t].iter().zip(&xs[t..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64;
        tau += c / c0;
        if (t as f64) >= 6.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

/// Means of consecutive blocks of length `len` (a trailing partial block is dropped).
pub fn block_means(xs: &[f64], len: usize) -> Vec<f64> {
    xs.chunks_exact(len.max(1)).map(mean).collect()
}

/// Block length of at least ten autocorrelation times, leaving at least `min_blocks` blocks.
pub fn block_length(xs: &[f64], min_blocks: usize) -> Result<usize> {
    let tau = integrated_autocorrelation(xs);
    let len = (10.0 * tau).ceil().max(1.0) as usize;
    ensure!(
        xs.len() / len >= min_blocks,
        InsufficientData,
        "{} samples give fewer than {min_blocks} blocks of length {len}",
        xs.len()
    );
    Ok(len)
}

/// Least-squares line y = a + b x. With `sigma` the fit is weighted; the slope
/// error comes from the weights, or from the residual scatter when unweighted.
#[derive(Clone, Copy, Debug)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
}

pub fn fit_line(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<LineFit> {
    let n = x.len();
    ensure!(n == y.len() && n >= 2, InsufficientData, "need at least two points for a line");
    let w: Vec<f64> = match sigma {
        Some(s) if s.iter().all(|&v| v > 0.0) => s.iter().map(|v| 1.0 / (v * v)).collect(),
        _ => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return Err(Error::InsufficientData("degenerate abscissae".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    let weighted = matches!(sigma, Some(s) if s.iter().all(|&v| v > 0.0));
    let slope_se = if weighted {
        (sw / det).sqrt()
    } else if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n as f64 - 2.0) * sw / det).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { intercept, slope, slope_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn jackknife_of_mean_matches_naive_error() {
        let streams = Streams::new(3);
        let sums = run_blocks(10_000, 1, &streams, 1, |rng, n, s| {
            for _ in 0..n {
                s[0] += rng.random::<f64>();
            }
            Ok(())
        })
        .unwrap();
        let e = sums.jackknife(|m| m[0]);
        assert!((e.value - 0.5).abs() < 5.0 * e.std_error);
        let expected = (1.0f64 / 12.0 / 10_000.0).sqrt();
        assert!((e.std_error / expected - 1.0).abs() < 0.3);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let streams = Streams::new(11);
        let body = |rng: &mut ChaCha8Rng, n: u64, s: &mut [f64]| {
            for _ in 0..n {
                s[0] += rng.random::<f64>();
            }
            Ok(())
        };
        let a = run_blocks(1234, 1, &streams, 1, body).unwrap().means();
        let b = run_blocks(1234, 1, &streams, 3, body).unwrap().means();
        assert_eq!(a, b);
    }

    #[test]
    fn tau_of_white_noise_is_one_half() {
        let mut rng = Streams::new(5).rng(0);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let tau = integrated_autocorrelation(&xs);
        assert!((tau - 0.5).abs() < 0.1, "tau = {tau}");
    }

    #[test]
    fn tau_of_ar1_chain() {
        let mut rng = Streams::new(6).rng(0);
        let phi: f64 = 0.8;
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                x = phi * x + rng.random::<f64>() - 0.5;
                x
            })
            .collect();
        let expected = 0.5 * (1.0 + phi) / (1.0 - phi);
        let tau = integrated_autocorrelation(&xs);
        assert!((tau / expected - 1.0).abs() < 0.15, "tau = {tau}, expected {expected}");
    }

    #[test]
    fn exact_line_fit() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|x| 0.5 * x + 1.0).collect();
        let f = fit_line(&x, &y, None).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(f.slope_se < 1e-12);
    }

    #[test]
    fn kahan_recovers_small_terms() {
        let mut k = KahanSum::default();
        k.add(1e16);
        for _ in 0..1000 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 1000.0);
    }
}
