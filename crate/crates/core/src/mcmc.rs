//! Continuous-time cluster Monte Carlo for the space-time Ising measure.
//!
//! A world is a piecewise-constant spin trajectory on every vertex line. One
//! sweep is a Swendsen-Wang update of the Fortuin-Kasteleyn coupling of the
//! path-integral weight exp{(lambda/2) int s_u s_v + delta (kinks) + gamma int s}:
//! - every line is cut at its kinks and at extra Poisson(delta) points;
//! - neighbouring pieces with equal spins are bonded at rate lambda (= 2 x coupling);
//! - + pieces are tied to the ghost at rate 2 gamma;
//! - clusters not tied to the ghost get a fresh uniform spin, the ghost cluster is +.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{Boundary, Lattice, LatticeDoc, Params, Topology};
use crate::error::{ensure, Error, Result};
use crate::rng::Streams;
use crate::stats::{block_length, integrated_autocorrelation, BlockSums, Estimate};

/// One vertex line: the spin just after time 0 and the sorted kink times in (0, beta).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub spin0: i8,
    pub flips: Vec<f64>,
}

impl Line {
    fn spin_at(&self, t: f64) -> i8 {
        let k = self.flips.partition_point(|&f| f <= t);
        if k % 2 == 0 {
            self.spin0
        } else {
            -self.spin0
        }
    }

    /// (end, spin) pieces covering [0, beta).
    fn pieces(&self, beta: f64) -> impl Iterator<Item = (f64, i8)> + '_ {
        let mut s = self.spin0;
        self.flips.iter().copied().chain(std::iter::once(beta)).map(move |end| {
            let out = (end, s);
            s = -s;
            out
        })
    }

    fn integral(&self, beta: f64) -> f64 {
        let mut prev = 0.0;
        let mut total = 0.0;
        for (end, s) in self.pieces(beta) {
            total += f64::from(s) * (end - prev);
            prev = end;
        }
        total
    }
}

fn overlap(a: &Line, b: &Line, beta: f64) -> f64 {
    let mut s = f64::from(a.spin0 * b.spin0);
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut total = 0.0;
    loop {
        let ta = a.flips.get(i).copied().unwrap_or(beta);
        let tb = b.flips.get(j).copied().unwrap_or(beta);
        let t = ta.min(tb);
        total += s * (t - prev);
        prev = t;
        if t >= beta {
            break;
        }
        if ta == t {
            s = -s;
            i += 1;
        }
        if tb == t {
            s = -s;
            j += 1;
        }
    }
    total / beta
}

/// Spin trajectories of every vertex.
#[derive(Clone, Debug)]
pub struct SpinWorld {
    lattice: Arc<Lattice>,
    beta: f64,
    topology: Topology,
    lines: Vec<Line>,
    sweeps: u64,
}

/// Scratch buffers reused across sweeps.
#[derive(Default)]
struct Scratch {
    ends: Vec<Vec<f64>>,
    segs: Vec<Vec<u32>>,
    spins: Vec<i8>,
    lens: Vec<f64>,
    parent: Vec<u32>,
    new_spin: Vec<i8>,
    cuts: Vec<f64>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb) as usize] = ra.min(rb);
    }
}

impl SpinWorld {
    /// All spins +1, no kinks.
    pub fn all_plus(lattice: Arc<Lattice>, beta: f64, topology: Topology) -> Result<Self> {
        ensure!(beta.is_finite() && beta > 0.0, Parameter, "beta must be positive");
        let lines = vec![Line { spin0: 1, flips: Vec::new() }; lattice.vertex_count()];
        Ok(Self { lattice, beta, topology, lines, sweeps: 0 })
    }

    pub fn from_lines(lattice: Arc<Lattice>, beta: f64, topology: Topology, lines: Vec<Line>) -> Result<Self> {
        ensure!(beta.is_finite() && beta > 0.0, Parameter, "beta must be positive");
        ensure!(lines.len() == lattice.vertex_count(), Consistency, "one line per vertex required");
        for (v, l) in lines.iter().enumerate() {
            ensure!(l.spin0 == 1 || l.spin0 == -1, Consistency, "vertex {v}: spin must be +1 or -1");
            ensure!(
                l.flips.windows(2).all(|w| w[0] < w[1]) && l.flips.iter().all(|&t| t > 0.0 && t < beta),
                Consistency,
                "vertex {v}: kink times must be increasing inside (0, beta)"
            );
            ensure!(
                topology == Topology::Interval || l.flips.len() % 2 == 0,
                Consistency,
                "vertex {v}: a time circle needs an even number of kinks"
            );
        }
        Ok(Self { lattice, beta, topology, lines, sweeps: 0 })
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }

    pub fn spin(&self, v: usize, t: f64) -> i8 {
        self.lines[v].spin_at(t.rem_euclid(self.beta))
    }

    /// (1/|K|) int s_x dx.
    pub fn magnetization(&self) -> f64 {
        let total: f64 = self.lines.iter().map(|l| l.integral(self.beta)).sum();
        total / (self.beta * self.lines.len() as f64)
    }

    /// (1/beta) int s_u(t) s_v(t) dt.
    pub fn pair(&self, u: usize, v: usize) -> f64 {
        overlap(&self.lines[u], &self.lines[v], self.beta)
    }

    /// (1/beta) int s_v(t) s_v(t + tau) dt on the time circle.
    pub fn time_correlation(&self, v: usize, tau: f64) -> f64 {
        let beta = self.beta;
        let l = &self.lines[v];
        let tau = tau.rem_euclid(beta);
        let mut shifted: Vec<f64> = l.flips.iter().map(|&t| (t - tau).rem_euclid(beta)).filter(|&t| t > 0.0).collect();
        shifted.sort_by(f64::total_cmp);
        let other = Line { spin0: l.spin_at(tau), flips: shifted };
        overlap(l, &other, beta)
    }

    /// Space-time average of s_x s_{x + r e_1}, over all vertices that have a partner.
    pub fn correlation_at(&self, r: usize) -> f64 {
        let n = self.lines.len();
        let mut total = 0.0;
        let mut count = 0;
        for v in 0..n {
            if let Some(w) = self.lattice.translate(v, 0, r as i64) {
                total += self.pair(v, w);
                count += 1;
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        }
    }

    /// One cluster update.
    pub fn cluster_sweep<R: Rng + ?Sized>(&mut self, params: &Params, rng: &mut R) -> Result<()> {
        let mut scratch = Scratch::default();
        self.sweep_with(params, rng, &mut scratch)
    }

    fn sweep_with<R: Rng + ?Sized>(&mut self, params: &Params, rng: &mut R, sc: &mut Scratch) -> Result<()> {
        params.validate()?;
        let beta = self.beta;
        let n = self.lines.len();
        let circle = self.topology == Topology::Circle;
        sc.ends.resize_with(n, Vec::new);
        sc.segs.resize_with(n, Vec::new);
        sc.spins.clear();
        sc.lens.clear();
        let cut_count = (params.delta * beta > 0.0).then(|| Poisson::new(params.delta * beta).expect("finite"));
        // Pieces of each line, labelled by segment.
        for v in 0..n {
            let line = &self.lines[v];
            sc.cuts.clear();
            if let Some(d) = &cut_count {
                let k = d.sample(rng) as usize;
                sc.cuts.extend((0..k).map(|_| rng.random::<f64>() * beta));
                sc.cuts.sort_by(f64::total_cmp);
            }
            let ends = &mut sc.ends[v];
            let segs = &mut sc.segs[v];
            ends.clear();
            segs.clear();
            let first = sc.spins.len() as u32;
            let (mut i, mut j) = (0, 0);
            let mut s = line.spin0;
            let mut prev = 0.0;
            let mut seg = first;
            sc.spins.push(s);
            sc.lens.push(0.0);
            loop {
                let tf = line.flips.get(i).copied().unwrap_or(beta);
                let tc = sc.cuts.get(j).copied().unwrap_or(beta);
                let t = tf.min(tc);
                ends.push(t);
                segs.push(seg);
                sc.lens[seg as usize] += t - prev;
                prev = t;
                if t >= beta {
                    break;
                }
                if tf == t {
                    s = -s;
                    i += 1;
                }
                if tc == t {
                    j += 1;
                }
                seg = sc.spins.len() as u32;
                sc.spins.push(s);
                sc.lens.push(0.0);
            }
            // On a circle the last piece continues the first segment.
            if circle && segs.len() > 1 {
                let last = *segs.last().expect("nonempty");
                let len = sc.lens[last as usize];
                sc.lens[first as usize] += len;
                sc.lens[last as usize] = 0.0;
                *segs.last_mut().expect("nonempty") = first;
            }
        }
        let ghost = sc.spins.len() as u32;
        sc.parent.clear();
        sc.parent.extend(0..=ghost);
        let bond_rate = params.lambda;
        if bond_rate > 0.0 {
            for &(u, v) in self.lattice.edges() {
                let (eu, su) = (&sc.ends[u], &sc.segs[u]);
                let (ev, sv) = (&sc.ends[v], &sc.segs[v]);
                let (mut i, mut j) = (0, 0);
                let mut prev = 0.0;
                while i < eu.len() && j < ev.len() {
                    let t = eu[i].min(ev[j]);
                    let (a, b) = (su[i], sv[j]);
                    if t > prev && sc.spins[a as usize] == sc.spins[b as usize] && find(&mut sc.parent, a) != find(&mut sc.parent, b) {
                        let p = -(-bond_rate * (t - prev)).exp_m1();
                        if rng.random::<f64>() < p {
                            union(&mut sc.parent, a, b);
                        }
                    }
                    prev = t;
                    if eu[i] == t {
                        i += 1;
                    }
                    if ev[j] == t {
                        j += 1;
                    }
                }
            }
        }
        if params.gamma > 0.0 {
            for s in 0..ghost {
                if sc.spins[s as usize] > 0 && sc.lens[s as usize] > 0.0 {
                    let p = -(-2.0 * params.gamma * sc.lens[s as usize]).exp_m1();
                    if rng.random::<f64>() < p {
                        union(&mut sc.parent, s, ghost);
                    }
                }
            }
        }
        sc.new_spin.clear();
        sc.new_spin.resize(ghost as usize + 1, 0);
        let groot = find(&mut sc.parent, ghost);
        sc.new_spin[groot as usize] = 1;
        for s in 0..ghost {
            let r = find(&mut sc.parent, s);
            if sc.new_spin[r as usize] == 0 {
                sc.new_spin[r as usize] = if rng.random::<bool>() { 1 } else { -1 };
            }
        }
        for v in 0..n {
            let (ends, segs) = (&sc.ends[v], &sc.segs[v]);
            let spin_of = |k: usize, parent: &mut [u32]| sc.new_spin[find(parent, segs[k]) as usize];
            let mut flips = Vec::new();
            let spin0 = spin_of(0, &mut sc.parent);
            let mut cur = spin0;
            for k in 1..segs.len() {
                let s = spin_of(k, &mut sc.parent);
                if s != cur {
                    flips.push(ends[k - 1]);
                    cur = s;
                }
            }
            ensure!(
                !circle || flips.len() % 2 == 0,
                Invariant,
                "vertex {v}: odd number of kinks after a sweep"
            );
            self.lines[v] = Line { spin0, flips };
        }
        self.sweeps += 1;
        Ok(())
    }
}

/// Per-sweep measurements.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Series {
    pub m: Vec<f64>,
    pub displacements: Vec<usize>,
    /// corr[k][i]: correlation at displacements[k] after sweep i.
    pub corr: Vec<Vec<f64>>,
}

impl Series {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sweep,m");
        for r in &self.displacements {
            out.push_str(&format!(",c{r}"));
        }
        out.push('\n');
        for i in 0..self.m.len() {
            out.push_str(&format!("{i},{}", self.m[i]));
            for c in &self.corr {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Run `burn_in` unrecorded sweeps, then `sweeps` recorded ones.
pub fn run_chain<R: Rng + ?Sized>(
    world: &mut SpinWorld,
    params: &Params,
    burn_in: u64,
    sweeps: u64,
    displacements: &[usize],
    rng: &mut R,
) -> Result<Series> {
    let mut sc = Scratch::default();
    for _ in 0..burn_in {
        world.sweep_with(params, rng, &mut sc)?;
    }
    let mut series = Series {
        m: Vec::with_capacity(sweeps as usize),
        displacements: displacements.to_vec(),
        corr: vec![Vec::with_capacity(sweeps as usize); displacements.len()],
    };
    for _ in 0..sweeps {
        world.sweep_with(params, rng, &mut sc)?;
        series.m.push(world.magnetization());
        for (k, &r) in displacements.iter().enumerate() {
            series.corr[k].push(world.correlation_at(r));
        }
    }
    Ok(series)
}

/// Blocked estimate of the mean of a series, blocks at least ten autocorrelation times long.
pub fn blocked_mean(xs: &[f64]) -> Result<Estimate> {
    let len = block_length(xs, 20)?;
    let mut sums = BlockSums::new(1);
    for c in xs.chunks_exact(len) {
        sums.push(vec![c.iter().sum()], len as u64);
    }
    Ok(sums.jackknife(|m| m[0]))
}

/// Magnetization moments of one chain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Moments {
    pub m: Estimate,
    pub abs_m: Estimate,
    pub m2: Estimate,
    pub m4: Estimate,
    /// U = 1 - <m^4> / (3 <m^2>^2): 0 for a Gaussian, 2/3 when ordered.
    pub binder: Estimate,
    pub tau_int: f64,
    pub block_len: usize,
}

pub fn moments(m: &[f64]) -> Result<Moments> {
    let m2: Vec<f64> = m.iter().map(|x| x * x).collect();
    let tau_int = integrated_autocorrelation(&m2).max(integrated_autocorrelation(m));
    let block_len = (10.0 * tau_int).ceil().max(1.0) as usize;
    ensure!(
        m.len() / block_len >= 20,
        InsufficientData,
        "{} sweeps give fewer than 20 blocks of length {block_len}",
        m.len()
    );
    let mut sums = BlockSums::new(4);
    for c in m.chunks_exact(block_len) {
        let mut s = vec![0.0; 4];
        for &x in c {
            s[0] += x;
            s[1] += x.abs();
            s[2] += x * x;
            s[3] += x.powi(4);
        }
        sums.push(s, block_len as u64);
    }
    Ok(Moments {
        m: sums.jackknife(|v| v[0]),
        abs_m: sums.jackknife(|v| v[1]),
        m2: sums.jackknife(|v| v[2]),
        m4: sums.jackknife(|v| v[3]),
        binder: sums.jackknife(|v| 1.0 - v[3] / (3.0 * v[2] * v[2])),
        tau_int,
        block_len,
    })
}

/// Sampling effort of one chain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChainSettings {
    pub burn_in: u64,
    pub sweeps: u64,
}

/// The periodic chain [-n, n] with time circle beta.
pub fn ring(n: usize) -> Result<Arc<Lattice>> {
    Ok(Arc::new(Lattice::cubic(1, n, Boundary::Periodic)?))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScanPoint {
    pub n: usize,
    pub beta: f64,
    pub rho: f64,
    pub moments: Moments,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Crossing {
    pub n_small: usize,
    pub n_large: usize,
    pub rho: f64,
    pub std_error: f64,
    /// Fraction of bootstrap replicas with a crossing inside the grid.
    pub found: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanResult {
    pub format: u32,
    pub aspect: f64,
    pub sizes: Vec<usize>,
    pub rhos: Vec<f64>,
    pub points: Vec<ScanPoint>,
    pub crossings: Vec<Crossing>,
    /// Weighted mean of the crossings; absent when some pair does not cross.
    pub rho_c: Option<Estimate>,
    pub diagnostic: Option<String>,
}

/// Run independent work items on `workers` threads; results come back in item order.
pub fn run_items<T: Send, F>(count: usize, workers: usize, body: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(count.max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= count {
                    break;
                }
                let r = body(k);
                out.lock().expect("poisoned")[k] = Some(r);
            });
        }
    });
    out.into_inner().expect("poisoned").into_iter().map(|r| r.expect("every item ran")).collect()
}

/// First downward sign change of the difference curve, by linear interpolation.
fn first_crossing(rhos: &[f64], diff: &[f64]) -> Option<f64> {
    (0..rhos.len().saturating_sub(1)).find_map(|k| {
        let (a, b) = (diff[k], diff[k + 1]);
        if a == 0.0 {
            Some(rhos[k])
        } else if a > 0.0 && b <= 0.0 {
            Some(rhos[k] + (rhos[k + 1] - rhos[k]) * a / (a - b))
        } else {
            None
        }
    })
}

/// Binder-ratio scan in d = 1 with gamma = 0, delta = 1 and beta = aspect * n.
pub fn scan_critical(
    sizes: &[usize],
    aspect: f64,
    rhos: &[f64],
    settings: ChainSettings,
    bootstrap: usize,
    streams: &Streams,
    workers: usize,
) -> Result<ScanResult> {
    ensure!(sizes.len() >= 2, Parameter, "a scan needs at least two sizes");
    ensure!(rhos.len() >= 2, Parameter, "a scan needs at least two rho values");
    ensure!(aspect > 0.0 && aspect.is_finite(), Parameter, "aspect must be positive");
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    let items: Vec<(usize, usize)> = (0..sizes.len()).flat_map(|i| (0..rhos.len()).map(move |j| (i, j))).collect();
    let points = run_items(items.len(), workers, |k| {
        let (i, j) = items[k];
        let n = sizes[i];
        let beta = aspect * n as f64;
        let params = Params::new(rhos[j], 1.0, 0.0)?;
        let mut world = SpinWorld::all_plus(ring(n)?, beta, Topology::Circle)?;
        let mut rng = streams.rng(k as u64);
        let series = run_chain(&mut world, &params, settings.burn_in, settings.sweeps, &[], &mut rng)?;
        Ok(ScanPoint { n, beta, rho: rhos[j], moments: moments(&series.m)? })
    })?;
    let binder = |i: usize| -> Vec<Estimate> { (0..rhos.len()).map(|j| points[i * rhos.len() + j].moments.binder).collect() };
    let mut crossings = Vec::new();
    let mut missing = Vec::new();
    let mut rng = streams.child(1).rng(0);
    let mut replicas: Vec<Vec<Option<f64>>> = Vec::new();
    for i in 0..sizes.len() - 1 {
        let (us, ul) = (binder(i), binder(i + 1));
        let diff: Vec<f64> = us.iter().zip(&ul).map(|(a, b)| a.value - b.value).collect();
        let Some(centre) = first_crossing(rhos, &diff) else {
            missing.push(format!("sizes {} and {} do not cross on the grid", sizes[i], sizes[i + 1]));
            continue;
        };
        let mut reps = Vec::with_capacity(bootstrap);
        for _ in 0..bootstrap {
            let d: Vec<f64> = us
                .iter()
                .zip(&ul)
                .map(|(a, b)| {
                    let na = Normal::new(a.value, a.std_error.max(0.0)).expect("finite");
                    let nb = Normal::new(b.value, b.std_error.max(0.0)).expect("finite");
                    na.sample(&mut rng) - nb.sample(&mut rng)
                })
                .collect();
            reps.push(first_crossing(rhos, &d));
        }
        let ok: Vec<f64> = reps.iter().flatten().copied().collect();
        let se = if ok.len() >= 2 {
            let m = ok.iter().sum::<f64>() / ok.len() as f64;
            (ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (ok.len() as f64 - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        crossings.push(Crossing {
            n_small: sizes[i],
            n_large: sizes[i + 1],
            rho: centre,
            std_error: se,
            found: ok.len() as f64 / bootstrap.max(1) as f64,
        });
        replicas.push(reps);
    }
    let (rho_c, diagnostic) = if missing.is_empty() && !crossings.is_empty() {
        let w: Vec<f64> = crossings.iter().map(|c| 1.0 / c.std_error.max(1e-12).powi(2)).collect();
        let sw: f64 = w.iter().sum();
        let value = crossings.iter().zip(&w).map(|(c, w)| w * c.rho).sum::<f64>() / sw;
        let mut boot = Vec::new();
        for b in 0..bootstrap {
            let vals: Option<Vec<f64>> = replicas.iter().map(|r| r[b]).collect();
            if let Some(vals) = vals {
                boot.push(vals.iter().zip(&w).map(|(v, w)| w * v).sum::<f64>() / sw);
            }
        }
        let se = if boot.len() >= 2 {
            let m = boot.iter().sum::<f64>() / boot.len() as f64;
            (boot.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (boot.len() as f64 - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        (Some(Estimate::new(value, se, boot.len() as u64)), None)
    } else {
        (None, Some(missing.join("; ")))
    };
    Ok(ScanResult { format: 1, aspect, sizes, rhos: rhos.to_vec(), points, crossings, rho_c, diagnostic })
}

/// Equal-time correlations along the first axis at the requested distances.
#[allow(clippy::too_many_arguments)]
pub fn decay_profile(
    d: usize,
    n: usize,
    beta: f64,
    rho: f64,
    displacements: &[usize],
    settings: ChainSettings,
    chains: usize,
    streams: &Streams,
    workers: usize,
) -> Result<Vec<(f64, Estimate)>> {
    ensure!(chains >= 1, Parameter, "need at least one chain");
    let lattice = Arc::new(Lattice::cubic(d, n, Boundary::Periodic)?);
    let params = Params::new(rho, 1.0, 0.0)?;
    let per_chain = run_items(chains, workers, |k| {
        let mut world = SpinWorld::all_plus(lattice.clone(), beta, Topology::Circle)?;
        let mut rng = streams.rng(k as u64);
        run_chain(&mut world, &params, settings.burn_in, settings.sweeps, displacements, &mut rng)
    })?;
    correlation_profile(&per_chain)
}

/// Correlation against distance from independent chains with equal displacement lists.
pub fn correlation_profile(chains: &[Series]) -> Result<Vec<(f64, Estimate)>> {
    ensure!(!chains.is_empty(), InsufficientData, "no chains");
    let displacements = &chains[0].displacements;
    ensure!(
        chains.iter().all(|c| &c.displacements == displacements),
        Consistency,
        "chains measured different displacements"
    );
    let mut out = Vec::with_capacity(displacements.len());
    for (k, &r) in displacements.iter().enumerate() {
        // Chains are independent: inverse-variance weights when every error is positive.
        let ests = chains.iter().map(|s| blocked_mean(&s.corr[k])).collect::<Result<Vec<_>>>()?;
        let est = if ests.iter().all(|e| e.std_error > 0.0) {
            let w: Vec<f64> = ests.iter().map(|e| 1.0 / e.std_error.powi(2)).collect();
            let sw: f64 = w.iter().sum();
            let v = ests.iter().zip(&w).map(|(e, w)| w * e.value).sum::<f64>() / sw;
            Estimate::new(v, sw.sqrt().recip(), ests.iter().map(|e| e.samples).sum())
        } else {
            let v = ests.iter().map(|e| e.value).sum::<f64>() / ests.len() as f64;
            let se = ests.iter().map(|e| e.std_error.powi(2)).sum::<f64>().sqrt() / ests.len() as f64;
            Estimate::new(v, se, ests.iter().map(|e| e.samples).sum())
        };
        out.push((r as f64, est));
    }
    Ok(out)
}

/// ChaCha8 position: key, stream and word position (as a decimal string).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { key: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Consistency(format!("bad word position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// A resumable chain: world, parameters and generator state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub lattice: LatticeDoc,
    pub beta: f64,
    pub circle: bool,
    pub lines: Vec<Line>,
    pub sweeps: u64,
    pub params: Params,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(world: &SpinWorld, params: &Params, rng: &ChaCha8Rng) -> Self {
        Self {
            format: 1,
            lattice: LatticeDoc::of(&world.lattice),
            beta: world.beta,
            circle: world.topology == Topology::Circle,
            lines: world.lines.clone(),
            sweeps: world.sweeps,
            params: *params,
            rng: RngState::capture(rng),
        }
    }

    pub fn restore(&self) -> Result<(SpinWorld, Params, ChaCha8Rng)> {
        ensure!(self.format == 1, Consistency, "unknown checkpoint format {}", self.format);
        let topology = if self.circle { Topology::Circle } else { Topology::Interval };
        let mut world = SpinWorld::from_lines(Arc::new(self.lattice.build()?), self.beta, topology, self.lines.clone())?;
        world.sweeps = self.sweeps;
        self.params.validate()?;
        Ok((world, self.params, self.rng.restore()?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DenseHamiltonian;

    fn sample_mean<F: Fn(&SpinWorld) -> f64>(lat: Arc<Lattice>, beta: f64, p: &Params, sweeps: u64, seed: u64, f: F) -> Estimate {
        let mut w = SpinWorld::all_plus(lat, beta, Topology::Circle).unwrap();
        let mut rng = Streams::new(seed).rng(0);
        let mut sc = Scratch::default();
        for _ in 0..200 {
            w.sweep_with(p, &mut rng, &mut sc).unwrap();
        }
        let mut xs = Vec::with_capacity(sweeps as usize);
        for _ in 0..sweeps {
            w.sweep_with(p, &mut rng, &mut sc).unwrap();
            xs.push(f(&w));
        }
        blocked_mean(&xs).unwrap()
    }

    #[test]
    fn measurements_of_simple_worlds() {
        let lat = ring(1).unwrap();
        let w = SpinWorld::all_plus(lat.clone(), 2.0, Topology::Circle).unwrap();
        assert_eq!(w.magnetization(), 1.0);
        assert_eq!(w.correlation_at(0), 1.0);
        let half = Line { spin0: 1, flips: vec![0.5, 1.5] };
        let w = SpinWorld::from_lines(lat, 2.0, Topology::Circle, vec![half; 3]).unwrap();
        assert!(w.magnetization().abs() < 1e-15);
        assert!((w.time_correlation(0, 1.0) + 1.0).abs() < 1e-15);
        assert!(SpinWorld::from_lines(ring(1).unwrap(), 2.0, Topology::Circle, vec![Line { spin0: 1, flips: vec![0.5] }; 3]).is_err());
    }

    #[test]
    fn single_spin_time_correlation() {
        let lat = Arc::new(Lattice::chain(1).unwrap());
        let p = Params::new(0.0, 1.0, 0.0).unwrap();
        let beta = 2.0;
        let tau = 0.6;
        let est = sample_mean(lat, beta, &p, 40_000, 1, |w| w.time_correlation(0, tau));
        let exact = (beta - 2.0 * tau).cosh() / beta.cosh();
        assert!(est.z_against(exact).abs() < 4.0, "{est:?} vs {exact}");
    }

    #[test]
    fn two_vertices_match_trace_oracle() {
        let lat = Arc::new(Lattice::chain(2).unwrap());
        let p = Params::new(1.0, 1.0, 0.0).unwrap();
        let est = sample_mean(lat.clone(), 1.0, &p, 40_000, 2, |w| w.pair(0, 1));
        let exact = DenseHamiltonian::new(&lat, &p).unwrap().thermal_expectation(1.0, &[0, 1]).unwrap();
        assert!(est.z_against(exact).abs() < 4.0, "{est:?} vs {exact}");
    }

    #[test]
    fn field_matches_trace_oracle() {
        let lat = Arc::new(Lattice::chain(2).unwrap());
        let p = Params::new(1.3, 0.8, 0.4).unwrap();
        let est = sample_mean(lat.clone(), 1.5, &p, 40_000, 3, |w| w.magnetization());
        let exact = DenseHamiltonian::new(&lat, &p).unwrap().magnetization(1.5, 0).unwrap();
        assert!(est.z_against(exact).abs() < 4.0, "{est:?} vs {exact}");
    }

    #[test]
    fn zero_field_symmetry() {
        let p = Params::new(1.0, 1.0, 0.0).unwrap();
        let est = sample_mean(ring(2).unwrap(), 2.0, &p, 20_000, 4, |w| w.magnetization());
        assert!(est.z_against(0.0).abs() < 4.0, "{est:?}");
    }

    #[test]
    fn kink_parity_is_kept() {
        let p = Params::new(2.0, 1.5, 0.3).unwrap();
        let mut w = SpinWorld::all_plus(ring(3).unwrap(), 3.0, Topology::Circle).unwrap();
        let mut rng = Streams::new(5).rng(0);
        for _ in 0..200 {
            w.cluster_sweep(&p, &mut rng).unwrap();
            assert!(w.lines().iter().all(|l| l.flips.len() % 2 == 0));
        }
    }

    #[test]
    fn checkpoint_resumes_identically() {
        let p = Params::new(2.0, 1.0, 0.1).unwrap();
        let mut w = SpinWorld::all_plus(ring(2).unwrap(), 2.0, Topology::Circle).unwrap();
        let mut rng = Streams::new(6).rng(3);
        for _ in 0..10 {
            w.cluster_sweep(&p, &mut rng).unwrap();
        }
        let ck = Checkpoint::from_json(&Checkpoint::capture(&w, &p, &rng).to_json().unwrap()).unwrap();
        let (mut w2, p2, mut rng2) = ck.restore().unwrap();
        for _ in 0..10 {
            w.cluster_sweep(&p, &mut rng).unwrap();
            w2.cluster_sweep(&p2, &mut rng2).unwrap();
        }
        assert_eq!(w.lines(), w2.lines());
        assert_eq!(w2.sweeps(), 20);
    }

    #[test]
    fn crossing_interpolation() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(first_crossing(&r, &[1.0, -1.0, -2.0]), Some(1.5));
        assert_eq!(first_crossing(&r, &[1.0, 2.0, 3.0]), None);
    }
}
