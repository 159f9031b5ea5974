//! Exact reference values for small instances.
//!
//! * [`DenseHamiltonian`]: the quantum Hamiltonian on (C^2)^V, thermal and
//!   time-displaced correlations on L x S_beta by exact diagonalization.
//! * [`region_log_partition`] / [`region_correlation`]: the time-ordered product of
//!   transfer matrices over an arbitrary region K. A vertex that leaves K is projected
//!   onto the unnormalized sum state, which sums its spin freely over the next
//!   interval. This gives Z'_K and correlations on K.
//! * [`conditional_ising`]: the classical Ising model on the interval graph G(D),
//!   by brute-force spin sum and independently by summing over bond parities.
//!
//! Basis convention: bit i of a basis index set means spin -1 at vertex i.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::domain::{Lattice, Params, Point, Region, Span, TIME_TOL};
use crate::error::{ensure, Error, Result};

/// Largest number of vertices handled by the dense oracles.
pub const MAX_ORACLE_VERTICES: usize = 12;
/// Largest interval graph handled by [`conditional_ising`].
pub const MAX_CONDITIONAL_SITES: usize = 20;

fn spin(state: usize, v: usize) -> f64 {
    if state >> v & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// H = -(lambda/2) sum_e s3 s3 - delta sum s1 - gamma sum s3 with its spectrum.
pub struct DenseHamiltonian {
    vertices: usize,
    energies: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl DenseHamiltonian {
    pub fn new(lattice: &Lattice, params: &Params) -> Result<Self> {
        params.validate()?;
        let n = lattice.vertex_count();
        ensure!(n <= MAX_ORACLE_VERTICES, Capability, "{n} vertices exceed the exact oracle limit");
        let dim = 1usize << n;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for s in 0..dim {
            let mut diag = 0.0;
            for &(u, v) in lattice.edges() {
                diag -= 0.5 * params.lambda * spin(s, u) * spin(s, v);
            }
            for v in 0..n {
                diag -= params.gamma * spin(s, v);
                h[(s ^ (1 << v), s)] -= params.delta;
            }
            h[(s, s)] += diag;
        }
        let eig = SymmetricEigen::new(h);
        Ok(Self { vertices: n, energies: eig.eigenvalues, vectors: eig.eigenvectors })
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn ground_energy(&self) -> f64 {
        self.energies.min()
    }

    fn diag_in_eigenbasis(&self, sites: &[usize]) -> DMatrix<f64> {
        let dim = self.energies.len();
        let o = DVector::from_iterator(dim, (0..dim).map(|s| sites.iter().map(|&v| spin(s, v)).product::<f64>()));
        self.vectors.transpose() * DMatrix::from_diagonal(&o) * &self.vectors
    }

    /// <prod_{v in sites} s3_v> at inverse temperature beta. Repeated sites cancel.
    pub fn thermal_expectation(&self, beta: f64, sites: &[usize]) -> Result<f64> {
        ensure!(beta > 0.0, Parameter, "beta must be positive");
        ensure!(sites.iter().all(|&v| v < self.vertices), Domain, "site outside the lattice");
        let e0 = self.ground_energy();
        let dim = self.energies.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..dim {
            let w = (-beta * (self.energies[k] - e0)).exp();
            let mut ok = 0.0;
            for s in 0..dim {
                ok += sites.iter().map(|&v| spin(s, v)).product::<f64>() * self.vectors[(s, k)].powi(2);
            }
            num += w * ok;
            den += w;
        }
        Ok(num / den)
    }

    /// <s3_(u,s) s3_(v,t)> on L x S_beta.
    pub fn time_displaced_correlation(&self, beta: f64, u: usize, s: f64, v: usize, t: f64) -> Result<f64> {
        ensure!(beta > 0.0, Parameter, "beta must be positive");
        ensure!(u < self.vertices && v < self.vertices, Domain, "site outside the lattice");
        let tau = (t - s).rem_euclid(beta);
        let a = self.diag_in_eigenbasis(&[u]);
        let b = self.diag_in_eigenbasis(&[v]);
        let e0 = self.ground_energy();
        let dim = self.energies.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..dim {
            let ek = self.energies[k] - e0;
            den += (-beta * ek).exp();
            for l in 0..dim {
                let el = self.energies[l] - e0;
                num += (-(beta - tau) * ek - tau * el).exp() * a[(k, l)] * b[(l, k)];
            }
        }
        Ok(num / den)
    }

    /// Magnetization <s3_v>.
    pub fn magnetization(&self, beta: f64, v: usize) -> Result<f64> {
        self.thermal_expectation(beta, &[v])
    }
}

// --- transfer product over a region -------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
enum OpKind {
    EndSource = 0,
    Project = 1,
    Start = 2,
    Source = 3,
}

struct Op {
    time: f64,
    kind: OpKind,
    bit: usize,
}

struct Sweep<'a> {
    region: &'a Region,
    params: Params,
    bits: Vec<Option<usize>>,
    active: Vec<usize>,
    cache: HashMap<usize, (DVector<f64>, DMatrix<f64>)>,
}

impl<'a> Sweep<'a> {
    fn new(region: &'a Region, params: &Params) -> Result<Self> {
        params.validate()?;
        let active = region.active_vertices();
        ensure!(
            active.len() <= MAX_ORACLE_VERTICES,
            Capability,
            "{} active vertices exceed the exact oracle limit",
            active.len()
        );
        let mut bits = vec![None; region.lattice().vertex_count()];
        for (i, &v) in active.iter().enumerate() {
            bits[v] = Some(i);
        }
        Ok(Self { region, params: *params, bits, active, cache: HashMap::new() })
    }

    fn dim(&self) -> usize {
        1 << self.active.len()
    }

    fn generator(&self, mask: usize) -> DMatrix<f64> {
        let dim = self.dim();
        let j = self.params.bridge_rate();
        let mut g = DMatrix::<f64>::zeros(dim, dim);
        let on = |v: usize| self.bits[v].filter(|b| mask >> b & 1 == 1);
        for s in 0..dim {
            let mut diag = 0.0;
            for &(u, v) in self.region.lattice().edges() {
                if let (Some(a), Some(b)) = (on(u), on(v)) {
                    diag += j * spin(s, a) * spin(s, b);
                }
            }
            for b in 0..self.active.len() {
                if mask >> b & 1 == 1 {
                    diag += self.params.gamma * spin(s, b);
                    g[(s ^ (1 << b), s)] += self.params.delta;
                }
            }
            g[(s, s)] += diag;
        }
        g
    }

    fn propagator(&mut self, mask: usize, tau: f64) -> DMatrix<f64> {
        if !self.cache.contains_key(&mask) {
            let eig = SymmetricEigen::new(self.generator(mask));
            self.cache.insert(mask, (eig.eigenvalues, eig.eigenvectors));
        }
        let (e, v) = &self.cache[&mask];
        let emax = e.max();
        let d = DVector::from_iterator(e.len(), e.iter().map(|x| (tau * (x - emax)).exp()));
        v * DMatrix::from_diagonal(&d) * v.transpose()
    }

    fn emax(&self, mask: usize) -> f64 {
        self.cache[&mask].0.max()
    }

    fn active_mask(&self, mid: f64) -> usize {
        let beta = self.region.beta();
        let mut mask = 0;
        for (b, &v) in self.active.iter().enumerate() {
            let inside = self.region.line(v).iter().any(|s| match s.offset_of(mid, beta) {
                Some(o) => s.full || (o > 0.0 && o < s.len),
                None => false,
            });
            if inside {
                mask |= 1 << b;
            }
        }
        mask
    }

    fn ops(&self, sources: &[Point]) -> Result<Vec<Op>> {
        let beta = self.region.beta();
        let tol = TIME_TOL * beta.max(1.0);
        let mut ops = Vec::new();
        for &v in &self.active {
            let bit = self.bits[v].expect("active");
            for s in self.region.line(v).iter().filter(|s| !s.full) {
                ops.push(Op { time: span_end(s, beta), kind: OpKind::Project, bit });
                ops.push(Op { time: s.start, kind: OpKind::Start, bit });
            }
        }
        for p in sources {
            let loc = self
                .region
                .locate(p)
                .ok_or_else(|| Error::Domain(format!("source {p:?} is outside the region")))?;
            let s = self.region.span(loc.span);
            let bit = self.bits[p.vertex].expect("located vertex is active");
            let (time, kind) = if s.full {
                (loc.offset, OpKind::Source)
            } else if loc.offset <= tol {
                (s.start, OpKind::Source)
            } else if (s.len - loc.offset).abs() <= tol {
                (span_end(s, beta), OpKind::EndSource)
            } else {
                (s.time_at(loc.offset, beta).rem_euclid(beta), OpKind::Source)
            };
            ops.push(Op { time, kind, bit });
        }
        ops.sort_by(|a, b| a.time.total_cmp(&b.time).then((a.kind as u8).cmp(&(b.kind as u8))));
        Ok(ops)
    }

    /// Returns (sign, log |trace|) of the time-ordered product with s3 inserted at `sources`.
    fn trace(&mut self, sources: &[Point]) -> Result<(f64, f64)> {
        let beta = self.region.beta();
        let dim = self.dim();
        let ops = self.ops(sources)?;
        let mut m = DMatrix::<f64>::identity(dim, dim);
        let mut log_scale = 0.0;
        let mut cur = 0.0;
        let step = |m: &mut DMatrix<f64>, log_scale: &mut f64, sweep: &mut Self, from: f64, to: f64| {
            if to > from {
                let mask = sweep.active_mask(0.5 * (from + to));
                let p = sweep.propagator(mask, to - from);
                *log_scale += (to - from) * sweep.emax(mask);
                *m = p * &*m;
            }
        };
        for op in &ops {
            step(&mut m, &mut log_scale, self, cur, op.time);
            cur = cur.max(op.time);
            match op.kind {
                OpKind::Start => continue,
                OpKind::Source | OpKind::EndSource => {
                    for s in 0..dim {
                        if s >> op.bit & 1 == 1 {
                            m.row_mut(s).neg_mut();
                        }
                    }
                }
                OpKind::Project => {
                    let mut out = m.clone();
                    for s in 0..dim {
                        let t = s ^ (1 << op.bit);
                        let row = m.row(s) + m.row(t);
                        out.set_row(s, &row);
                    }
                    m = out;
                }
            }
            let norm = m.amax();
            if norm > 0.0 {
                m /= norm;
                log_scale += norm.ln();
            }
        }
        step(&mut m, &mut log_scale, self, cur, beta);
        let tr = m.trace();
        if tr == 0.0 {
            return Ok((0.0, f64::NEG_INFINITY));
        }
        Ok((tr.signum(), tr.abs().ln() + log_scale))
    }
}

fn span_end(s: &Span, beta: f64) -> f64 {
    let e = s.start + s.len;
    if e > beta {
        e - beta
    } else {
        e
    }
}

/// log Z'_K, the space-time partition function on region K.
pub fn region_log_partition(region: &Region, params: &Params) -> Result<f64> {
    let (sign, log) = Sweep::new(region, params)?.trace(&[])?;
    ensure!(sign > 0.0, Invariant, "partition function must be positive");
    Ok(log)
}

/// <s_A>_K for points A in the closure of K (the ghost spin is +1 and needs no entry).
pub fn region_correlation(region: &Region, sources: &[Point], params: &Params) -> Result<f64> {
    let mut sweep = Sweep::new(region, params)?;
    let (s0, l0) = sweep.trace(&[])?;
    let (s1, l1) = sweep.trace(sources)?;
    ensure!(s0 > 0.0, Invariant, "partition function must be positive");
    Ok(s1 * (l1 - l0).exp())
}

/// log Z_K = log E_K(d psi^empty), recovered from Z'_K through the partition identity
/// Z'_K = 2^N(K) exp(lambda/2 |F| + gamma |K| - delta |K|) Z_K.
pub fn region_log_z(region: &Region, params: &Params) -> Result<f64> {
    let log_zp = region_log_partition(region, params)?;
    Ok(log_zp - log_partition_prefactor(region, params))
}

/// log of 2^N(K) exp(lambda/2 |F| + gamma |K| - delta |K|).
pub fn log_partition_prefactor(region: &Region, params: &Params) -> f64 {
    region.interval_count() as f64 * std::f64::consts::LN_2
        + params.bridge_rate() * region.edge_measure()
        + (params.gamma - params.delta) * region.measure()
}

// --- classical Ising model on G(D) ---------------------------------------------

/// One vertex of the interval graph G(D).
#[derive(Clone, Debug)]
struct Piece {
    pieces: Vec<(f64, f64)>,
    len: f64,
}

fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(x0, x1) in a {
        for &(y0, y1) in b {
            total += (x1.min(y1) - x0.max(y0)).max(0.0);
        }
    }
    total
}

fn arc_pieces(start: f64, len: f64, beta: f64) -> Vec<(f64, f64)> {
    Span { start: start.rem_euclid(beta), len, full: len >= beta }.pieces(beta)
}

/// Exact results for the Ising model on G(D).
#[derive(Clone, Copy, Debug)]
pub struct ConditionalIsing {
    /// <s_A | D> by direct spin summation.
    pub spin_sum: f64,
    /// The same quantity as P(dPsi = A) / P(dPsi = empty) over bond parities.
    pub parity_sum: f64,
    /// Z(D) = sum over spins of exp(J int s s + gamma int s).
    pub partition: f64,
    pub sites: usize,
}

/// The Ising model on G(D) conditional on the death set `deaths`.
pub fn conditional_ising(region: &Region, deaths: &[Point], sources: &[Point], params: &Params) -> Result<ConditionalIsing> {
    params.validate()?;
    let beta = region.beta();
    let lattice = region.lattice();
    let mut sites: Vec<Piece> = Vec::new();
    let mut owner: Vec<(usize, usize, f64, f64)> = Vec::new(); // (site, span id, offset from, offset to)
    let mut by_vertex: Vec<Vec<usize>> = vec![Vec::new(); lattice.vertex_count()];
    for id in 0..region.span_count() {
        let span = *region.span(id);
        let v = region.span_vertex(id);
        let mut offs: Vec<f64> = deaths
            .iter()
            .filter(|d| d.vertex == v)
            .filter_map(|d| span.offset_of(d.time, beta))
            .filter(|&o| span.full || (o > 0.0 && o < span.len))
            .collect();
        offs.sort_by(f64::total_cmp);
        let mut bounds: Vec<(f64, f64)> = Vec::new();
        if span.full {
            if offs.is_empty() {
                bounds.push((0.0, beta));
            } else {
                for i in 0..offs.len() {
                    let a = offs[i];
                    let b = if i + 1 < offs.len() { offs[i + 1] } else { offs[0] + beta };
                    bounds.push((a, b));
                }
            }
        } else {
            let mut prev = 0.0;
            for &o in &offs {
                bounds.push((prev, o));
                prev = o;
            }
            bounds.push((prev, span.len));
        }
        for (a, b) in bounds {
            let site = sites.len();
            sites.push(Piece { pieces: arc_pieces(span.start + a, b - a, beta), len: b - a });
            owner.push((site, id, a, b));
            by_vertex[v].push(site);
        }
    }
    let n = sites.len();
    ensure!(n <= MAX_CONDITIONAL_SITES, Capability, "G(D) has {n} sites, above the limit");
    let j = params.bridge_rate();
    let mut bonds: Vec<(usize, usize, f64)> = Vec::new();
    for &(u, v) in lattice.edges() {
        for &p in &by_vertex[u] {
            for &q in &by_vertex[v] {
                let w = overlap(&sites[p].pieces, &sites[q].pieces);
                if w > 0.0 {
                    bonds.push((p, q, j * w));
                }
            }
        }
    }
    let fields: Vec<f64> = sites.iter().map(|s| params.gamma * s.len).collect();
    let mut a_mask = 0usize;
    for p in sources {
        let loc = region
            .locate(p)
            .ok_or_else(|| Error::Domain(format!("source {p:?} is outside the region")))?;
        let (site, ..) = owner
            .iter()
            .filter(|(_, id, ..)| *id == loc.span)
            .find(|&&(_, _, a, b)| {
                let o = if region.span(loc.span).full && loc.offset < a { loc.offset + beta } else { loc.offset };
                o >= a && o <= b
            })
            .ok_or_else(|| Error::Invariant("source not inside any site of G(D)".into()))?;
        a_mask ^= 1 << site;
    }

    // Spin sum, shifted by the maximal exponent for stability.
    let energy = |s: usize| -> f64 {
        let mut e = 0.0;
        for &(p, q, w) in &bonds {
            e += w * spin(s, p) * spin(s, q);
        }
        for (p, &h) in fields.iter().enumerate() {
            e += h * spin(s, p);
        }
        e
    };
    let emax: f64 = bonds.iter().map(|b| b.2).sum::<f64>() + fields.iter().sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for s in 0..1usize << n {
        let w = (energy(s) - emax).exp();
        let sa = if (s & a_mask).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
        num += sa * w;
        den += w;
    }

    // Parity route: bonds of G(D) plus ghost bonds with weight gamma |site|.
    let mut dist = vec![0.0; 1 << n];
    dist[0] = 1.0;
    let mut toggle = |mask: usize, mu: f64| {
        let p = 0.5 * (1.0 - (-2.0 * mu).exp());
        let next: Vec<f64> = (0..dist.len()).map(|s| (1.0 - p) * dist[s] + p * dist[s ^ mask]).collect();
        dist = next;
    };
    for &(p, q, w) in &bonds {
        toggle(1 << p | 1 << q, w);
    }
    for (p, &h) in fields.iter().enumerate() {
        if h > 0.0 {
            toggle(1 << p, h);
        }
    }
    Ok(ConditionalIsing {
        spin_sum: num / den,
        parity_sum: dist[a_mask] / dist[0],
        partition: den * emax.exp(),
        sites: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Boundary, Configuration, Segment, TimeDomain, Topology};
    use crate::rng::Streams;
    use std::sync::Arc;

    fn line(n: usize) -> Arc<Lattice> {
        Arc::new(Lattice::chain(n).unwrap())
    }

    #[test]
    fn single_spin_in_transverse_field() {
        let l = line(1);
        let p = Params::new(0.0, 1.0, 0.0).unwrap();
        let h = DenseHamiltonian::new(&l, &p).unwrap();
        // H = -s1: correlation cosh(beta - 2 tau) / cosh(beta)
        let c = h.time_displaced_correlation(2.0, 0, 0.0, 0, 0.5).unwrap();
        assert!((c - (1.0f64).cosh() / (2.0f64).cosh()).abs() < 1e-12);
        let r = Region::full(l.clone(), TimeDomain::circle(2.0).unwrap());
        assert!((region_log_partition(&r, &p).unwrap() - (2.0 * 2.0f64.cosh()).ln()).abs() < 1e-12);
        let rc = region_correlation(&r, &[Point::new(0, 0.0), Point::new(0, 0.5)], &p).unwrap();
        assert!((rc - c).abs() < 1e-12);
    }

    #[test]
    fn free_time_interval_partition() {
        let p = Params::new(0.0, 1.0, 0.0).unwrap();
        let r = Region::full(line(1), TimeDomain::new(1.0, Topology::Interval).unwrap());
        assert!((region_log_partition(&r, &p).unwrap() - (2.0 * 1.0f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn longitudinal_field_magnetization() {
        let p = Params::new(0.0, 0.0, 0.7).unwrap();
        let h = DenseHamiltonian::new(&line(1), &p).unwrap();
        let m = h.magnetization(1.3, 0).unwrap();
        assert!((m - (0.7f64 * 1.3).tanh()).abs() < 1e-12);
    }

    #[test]
    fn region_oracle_matches_dense_on_full_domain() {
        let l = Arc::new(Lattice::cubic(1, 1, Boundary::Periodic).unwrap());
        let p = Params::new(1.3, 0.8, 0.4).unwrap();
        let h = DenseHamiltonian::new(&l, &p).unwrap();
        let r = Region::full(l.clone(), TimeDomain::circle(1.7).unwrap());
        let m = region_correlation(&r, &[Point::new(1, 0.3)], &p).unwrap();
        assert!((m - h.magnetization(1.7, 1).unwrap()).abs() < 1e-10);
        let c = region_correlation(&r, &[Point::new(0, 0.2), Point::new(2, 1.1)], &p).unwrap();
        assert!((c - h.time_displaced_correlation(1.7, 0, 0.2, 2, 1.1).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn conditional_routes_agree() {
        let l = Arc::new(Lattice::cubic(1, 1, Boundary::Periodic).unwrap());
        let r = Region::full(l, TimeDomain::circle(1.0).unwrap());
        let p = Params::new(1.2, 1.5, 0.3).unwrap();
        let mut rng = Streams::new(2).rng(0);
        for _ in 0..20 {
            let c = Configuration::sample(&r, &p, true, &mut rng).unwrap();
            if c.deaths.len() > 8 {
                continue;
            }
            let a = [Point::new(0, 0.123), Point::new(2, 0.777)];
            let ci = conditional_ising(&r, &c.deaths, &a, &p).unwrap();
            assert!((ci.spin_sum - ci.parity_sum).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_death_set_gives_loop_vertex() {
        let r = Region::full(line(1), TimeDomain::circle(1.0).unwrap());
        let p = Params::new(0.0, 1.0, 0.5).unwrap();
        let ci = conditional_ising(&r, &[], &[Point::new(0, 0.1)], &p).unwrap();
        assert_eq!(ci.sites, 1);
        assert!((ci.spin_sum - 0.5f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn averaging_conditional_partitions_recovers_region_partition() {
        let r = Region::full(line(2), TimeDomain::circle(0.8).unwrap())
            .subtract(&[Segment { vertex: 1, start: 0.1, len: 0.3 }])
            .unwrap();
        let p = Params::new(1.0, 1.0, 0.5).unwrap();
        let mut rng = Streams::new(4).rng(0);
        let n = 40_000;
        let mut acc = Vec::with_capacity(n);
        for _ in 0..n {
            let c = Configuration::sample(&r, &p, true, &mut rng).unwrap();
            acc.push(conditional_ising(&r, &c.deaths, &[], &p).unwrap().partition);
        }
        let e = crate::stats::mean_se(&acc);
        let exact = region_log_partition(&r, &p).unwrap().exp();
        assert!(e.z_against(exact).abs() < 4.0, "{e:?} vs {exact}");
    }

    #[test]
    fn oracle_capability_limit() {
        let l = Lattice::cubic(1, 7, Boundary::Periodic).unwrap();
        assert!(matches!(DenseHamiltonian::new(&l, &Params::new(1.0, 1.0, 0.0).unwrap()), Err(Error::Capability(_))));
    }
}
