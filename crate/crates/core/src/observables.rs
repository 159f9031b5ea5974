//! Physical estimators and numerical checks of the correlation inequalities.

use rand::Rng;
use serde::Serialize;

use crate::domain::{Boundary, Configuration, Params, Point, Region, Segment, Site, Span, TIME_TOL};
use crate::error::{ensure, Error, Result};
use crate::parity::{locate_sources, Colouring, Located, ParityEvaluator, SourceSet};
use crate::rng::Streams;
use crate::stats::{fit_line, run_blocks, BlockSums, Estimate};
use crate::switching::{ConnectivityIndex, CutSet};

/// A named estimate at a parameter point, as written by the command line tools.
#[derive(Clone, Debug, Serialize)]
pub struct ObservableReport {
    pub name: String,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub n: usize,
    pub d: usize,
    pub estimate: Estimate,
    pub estimator: String,
    pub seed: u64,
}

impl ObservableReport {
    pub fn new(name: &str, region: &Region, params: &Params, estimate: Estimate, estimator: &str, seed: u64) -> Self {
        let l = region.lattice();
        Self {
            name: name.to_string(),
            lambda: params.lambda,
            delta: params.delta,
            gamma: params.gamma,
            beta: region.beta(),
            n: l.side() / 2,
            d: l.dim(),
            estimate,
            estimator: estimator.to_string(),
            seed,
        }
    }
}

/// The point 0: the lattice origin at time 0.
pub fn origin(region: &Region) -> Point {
    Point::new(region.lattice().origin(), 0.0)
}

/// Periodic box, whole time circles: the setting in which M does not depend on
/// the choice of 0.
pub fn check_translation_invariant(region: &Region) -> Result<()> {
    let l = region.lattice();
    ensure!(
        l.boundary() == Boundary::Periodic || (l.dim() == 1 && l.vertex_count() <= 2),
        Parameter,
        "the lattice must be a periodic box"
    );
    ensure!(
        (0..region.span_count()).all(|id| region.span(id).full) && region.span_count() == l.vertex_count(),
        Parameter,
        "every vertex line must be the whole time circle"
    );
    Ok(())
}

/// Block sums of normalized weights: statistic 0 is psi^empty, statistic k + 1
/// is psi^{sets[k]}, all against the same (B, G).
pub fn weight_sums(
    region: &Region,
    sets: &[Vec<Point>],
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<BlockSums> {
    let located: Vec<Vec<Located>> = sets
        .iter()
        .map(|s| locate_sources(region, SourceSet::new(region, s)?.points()))
        .collect::<Result<_>>()?;
    run_blocks(samples, sets.len() + 1, streams, workers, |rng, n, s| {
        let mut ev = ParityEvaluator::new(region, params)?;
        for _ in 0..n {
            ev.sample(rng);
            s[0] += ev.weight(&[]);
            for (k, l) in located.iter().enumerate() {
                s[k + 1] += ev.weight(l);
            }
        }
        Ok(())
    })
}

/// M = <s_0>.
pub fn magnetization(region: &Region, params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<Estimate> {
    params.validate()?;
    if params.gamma == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let sums = weight_sums(region, &[vec![origin(region)]], params, samples, streams, workers)?;
    Ok(sums.jackknife(|m| m[1] / m[0]))
}

/// <s_x s_y>.
pub fn two_point(region: &Region, x: Point, y: Point, params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<Estimate> {
    params.validate()?;
    let sums = weight_sums(region, &[vec![x, y]], params, samples, streams, workers)?;
    Ok(sums.jackknife(|m| m[1] / m[0]))
}

/// <s_x; s_y> = <s_x s_y> - <s_x><s_y>.
pub fn truncated_two_point(
    region: &Region,
    x: Point,
    y: Point,
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<Estimate> {
    params.validate()?;
    let sums = weight_sums(region, &[vec![x, y], vec![x], vec![y]], params, samples, streams, workers)?;
    Ok(sums.jackknife(|m| m[1] / m[0] - m[2] * m[3] / (m[0] * m[0])))
}

/// Quadrature nodes and weights over a span: the periodic rule on a whole
/// circle, the trapezoid rule otherwise. `m` is the number of panels.
fn span_nodes(span: &Span, m: usize, beta: f64) -> Vec<(f64, f64)> {
    let h = span.len / m as f64;
    if span.full {
        (0..m).map(|k| (k as f64 * h, h)).collect()
    } else {
        (0..=m)
            .map(|k| {
                let w = if k == 0 || k == m { 0.5 * h } else { h };
                (span.time_at(k as f64 * h, beta).rem_euclid(beta), w)
            })
            .collect()
    }
}

/// Nodes on the h-grid and on the 2h-grid (even panel counts so the coarse grid nests).
fn grid_over(spans: &[(usize, Span)], h: f64, beta: f64) -> (Vec<Point>, Vec<f64>, Vec<f64>) {
    let mut points = Vec::new();
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    for &(v, span) in spans {
        let m = 2 * ((span.len / (2.0 * h)).ceil() as usize).max(1);
        let f = span_nodes(&span, m, beta);
        let c = span_nodes(&span, m / 2, beta);
        for (k, (t, w)) in f.into_iter().enumerate() {
            points.push(Point::new(v, t));
            fine.push(w);
            coarse.push(if k % 2 == 0 { c[k / 2].1 } else { 0.0 });
        }
    }
    (points, fine, coarse)
}

/// chi with its quadrature diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Susceptibility {
    /// Statistical and quadrature errors combined.
    pub estimate: Estimate,
    pub monte_carlo_error: f64,
    pub fine: f64,
    pub coarse: f64,
    /// |chi_h - chi_2h| / 3.
    pub quadrature_error: f64,
}

/// chi = int_K <s_0; s_x> dx by the trapezoid rule on an h-grid of every line.
pub fn susceptibility(region: &Region, params: &Params, samples: u64, h: f64, streams: &Streams, workers: usize) -> Result<Susceptibility> {
    params.validate()?;
    ensure!(h.is_finite() && h > 0.0, Parameter, "quadrature step must be positive, got {h}");
    let beta = region.beta();
    let spans: Vec<(usize, Span)> = (0..region.span_count()).map(|id| (region.span_vertex(id), *region.span(id))).collect();
    let (points, fine, coarse) = grid_over(&spans, h, beta);
    let o = origin(region);
    let mut sets = vec![vec![o]];
    for &x in &points {
        sets.push(vec![x]);
        sets.push(vec![o, x]);
    }
    let sums = weight_sums(region, &sets, params, samples, streams, workers)?;
    let integral = |m: &[f64], w: &[f64]| -> f64 {
        let m0 = m[1] / m[0];
        let mut s = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let mx = m[2 + 2 * k] / m[0];
            let m0x = m[3 + 2 * k] / m[0];
            s += wk * (m0x - m0 * mx);
        }
        s
    };
    let est = sums.jackknife(|m| integral(m, &fine));
    let means = sums.means();
    let c = integral(&means, &coarse);
    let quad = (est.value - c).abs() / 3.0;
    Ok(Susceptibility {
        estimate: Estimate::new(est.value, est.std_error.hypot(quad), est.samples),
        monte_carlo_error: est.std_error,
        fine: est.value,
        coarse: c,
        quadrature_error: quad,
    })
}

/// The two-replica representations of the derivatives of M, all from one run.
/// `dm_dlambda` is with respect to the Hamiltonian coupling; `dm_dbond` is with
/// respect to the bridge intensity lambda/2 and equals 2 dm_dlambda.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Derivatives {
    pub m: Estimate,
    pub dm_dgamma: Estimate,
    pub dm_dlambda: Estimate,
    pub dm_dbond: Estimate,
    /// -dM/d delta.
    pub minus_dm_ddelta: Estimate,
    /// M/gamma - dM/dgamma.
    pub gamma_bound_slack: Estimate,
    /// 2 d M dM/dgamma - dM/dbond.
    pub lambda_bound_slack: Estimate,
    /// 2M/(1 - M^2) dM/dgamma + dM/d delta.
    pub delta_bound_slack: Estimate,
}

impl Derivatives {
    /// Whether the three bounds hold within three standard errors.
    pub fn bounds_hold(&self) -> bool {
        [self.gamma_bound_slack, self.lambda_bound_slack, self.delta_bound_slack]
            .iter()
            .all(|s| s.value >= -3.0 * s.std_error)
    }
}

/// dM/dgamma, dM/dlambda and -dM/d delta from (psi1, psi2^empty, Delta).
///
/// The x-integrals are Monte Carlo integrals: each sample draws one uniform
/// point of K (one uniform point of F for the bridge term). The delta term
/// integrates exactly: the measure of {x : 0 <->^x ghost} is the total length
/// of the atoms that are cut edges between 0 and the ghost.
pub fn derivative_estimators(region: &Region, params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<Derivatives> {
    params.validate()?;
    check_translation_invariant(region)?;
    let lat = region.lattice();
    let beta = region.beta();
    let k_measure = region.measure();
    let f_measure = region.edge_measure();
    let o = origin(region);
    let edges = lat.edges().to_vec();
    let s_empty = SourceSet::empty();
    let s_o = SourceSet::new(region, &[o])?;
    let sums = run_blocks(samples, 6, streams, workers, |rng, n, s| {
        let mut c1 = Configuration::default();
        let mut c2 = Configuration::default();
        for _ in 0..n {
            c1.resample(region, params, false, rng);
            c2.resample(region, params, false, rng);
            let cuts = CutSet::sample(region, params.delta, rng)?;
            let p1 = Colouring::build(region, &s_empty, &c1.bridges, &c1.ghosts, rng)?;
            let p2 = Colouring::build(region, &s_empty, &c2.bridges, &c2.ghosts, rng)?;
            let w2 = p2.normalized_weight(params.delta);
            s[0] += p1.normalized_weight(params.delta);
            s[1] += w2;
            let q = Colouring::build(region, &s_o, &c1.bridges, &c1.ghosts, rng)?;
            let wq = q.normalized_weight(params.delta);
            s[2] += wq;
            if w2 == 0.0 {
                continue;
            }
            if wq > 0.0 {
                let idx = ConnectivityIndex::build(&q, &p2, &cuts, &[])?;
                s[5] += wq * w2 * idx.pivotal_measure(&Site::At(o), &Site::Ghost)?;
            }
            let x = Point::new(rng.random_range(0..lat.vertex_count()), rng.random::<f64>() * beta);
            let q = Colouring::build(region, &SourceSet::new(region, &[o, x])?, &c1.bridges, &c1.ghosts, rng)?;
            let wq = q.normalized_weight(params.delta);
            if wq > 0.0 {
                let idx = ConnectivityIndex::build(&q, &p2, &cuts, &[o, x])?;
                if !idx.connected(&Site::At(o), &Site::Ghost)? {
                    s[3] += k_measure * wq * w2;
                }
            }
            if !edges.is_empty() {
                let (u, v) = edges[rng.random_range(0..edges.len())];
                let t = rng.random::<f64>() * beta;
                let (x, y) = (Point::new(u, t), Point::new(v, t));
                let q = Colouring::build(region, &SourceSet::new(region, &[o, x, y])?, &c1.bridges, &c1.ghosts, rng)?;
                let wq = q.normalized_weight(params.delta);
                if wq > 0.0 {
                    let idx = ConnectivityIndex::build(&q, &p2, &cuts, &[o, x, y])?;
                    if !idx.connected(&Site::At(o), &Site::Ghost)? {
                        s[4] += f_measure * wq * w2;
                    }
                }
            }
        }
        Ok(())
    })?;
    let d = lat.dim() as f64;
    let gamma = params.gamma;
    let m = |v: &[f64]| v[2] / v[0];
    let dg = |v: &[f64]| v[3] / (v[0] * v[1]);
    let db = |v: &[f64]| v[4] / (v[0] * v[1]);
    let dd = |v: &[f64]| 2.0 * v[5] / (v[0] * v[1]);
    Ok(Derivatives {
        m: sums.jackknife(m),
        dm_dgamma: sums.jackknife(dg),
        dm_dlambda: sums.jackknife(|v| 0.5 * db(v)),
        dm_dbond: sums.jackknife(db),
        minus_dm_ddelta: sums.jackknife(dd),
        gamma_bound_slack: if gamma > 0.0 {
            sums.jackknife(|v| m(v) / gamma - dg(v))
        } else {
            Estimate::exact(f64::INFINITY)
        },
        lambda_bound_slack: sums.jackknife(|v| 2.0 * d * m(v) * dg(v) - db(v)),
        delta_bound_slack: sums.jackknife(|v| {
            let mm = m(v);
            2.0 * mm / (1.0 - mm * mm) * dg(v) - dd(v)
        }),
    })
}

/// Central differences of the exact magnetization: (dM/dgamma, dM/dlambda, -dM/d delta).
pub fn oracle_derivatives(region: &Region, params: &Params) -> Result<[f64; 3]> {
    use crate::oracle::DenseHamiltonian;
    check_translation_invariant(region)?;
    let lat = region.lattice();
    let beta = region.beta();
    let o = lat.origin();
    let m = |p: Params| -> Result<f64> { DenseHamiltonian::new(lat, &p)?.magnetization(beta, o) };
    let h = 1e-4;
    let dg = (m(Params { gamma: params.gamma + h, ..*params })? - m(Params { gamma: (params.gamma - h).max(0.0), ..*params })?)
        / (params.gamma + h - (params.gamma - h).max(0.0));
    let dl = (m(Params { lambda: params.lambda + h, ..*params })? - m(Params { lambda: (params.lambda - h).max(0.0), ..*params })?)
        / (params.lambda + h - (params.lambda - h).max(0.0));
    let dd = (m(Params { delta: params.delta + h, ..*params })? - m(Params { delta: (params.delta - h).max(0.0), ..*params })?)
        / (params.delta + h - (params.delta - h).max(0.0));
    Ok([dg, dl, -dd])
}

/// Outcome of a one-sided check `value >= -3 se`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct OneSided {
    pub estimate: Estimate,
    pub holds: bool,
}

impl OneSided {
    pub fn nonnegative(estimate: Estimate) -> Self {
        Self { estimate, holds: estimate.value >= -3.0 * estimate.std_error }
    }

    pub fn nonpositive(estimate: Estimate) -> Self {
        Self { estimate, holds: estimate.value <= 3.0 * estimate.std_error }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GksReport {
    /// <s_A>.
    pub first: OneSided,
    /// <s_A; s_B>.
    pub second: OneSided,
}

/// GKS: <s_A> >= 0 and <s_A s_B> - <s_A><s_B> >= 0.
pub fn check_gks(region: &Region, a: &[Point], b: &[Point], params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<GksReport> {
    params.validate()?;
    let ab: Vec<Point> = a.iter().chain(b).copied().collect();
    let sums = weight_sums(region, &[a.to_vec(), b.to_vec(), ab], params, samples, streams, workers)?;
    Ok(GksReport {
        first: OneSided::nonnegative(sums.jackknife(|m| m[1] / m[0])),
        second: OneSided::nonnegative(sums.jackknife(|m| m[3] / m[0] - m[1] * m[2] / (m[0] * m[0]))),
    })
}

/// GHS: <s_x; s_y; s_z> <= 0 via its five-term expansion.
#[allow(clippy::too_many_arguments)]
pub fn check_ghs(region: &Region, x: Point, y: Point, z: Point, params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<OneSided> {
    params.validate()?;
    let sets = [vec![x], vec![y], vec![z], vec![x, y], vec![x, z], vec![y, z], vec![x, y, z]];
    let sums = weight_sums(region, &sets, params, samples, streams, workers)?;
    Ok(OneSided::nonpositive(sums.jackknife(|m| {
        let c = |k: usize| m[k] / m[0];
        let (sx, sy, sz, sxy, sxz, syz, sxyz) = (c(1), c(2), c(3), c(4), c(5), c(6), c(7));
        sxyz - sx * syz - sy * sxz - sz * sxy + 2.0 * sx * sy * sz
    })))
}

/// M at each gamma and the second differences M(g-) - 2M(g) + M(g+) over
/// consecutive equally spaced triples.
#[derive(Clone, Debug, Serialize)]
pub struct ConcavityReport {
    pub gammas: Vec<f64>,
    pub magnetization: Vec<Estimate>,
    pub second_differences: Vec<OneSided>,
}

impl ConcavityReport {
    pub fn holds(&self) -> bool {
        self.second_differences.iter().all(|s| s.holds)
    }
}

/// Concavity of M in gamma, from independent runs at each gamma.
pub fn check_concavity(region: &Region, params: &Params, gammas: &[f64], samples: u64, streams: &Streams, workers: usize) -> Result<ConcavityReport> {
    ensure!(gammas.len() >= 3, Parameter, "concavity needs at least three gamma values");
    for w in gammas.windows(3) {
        ensure!(
            ((w[1] - w[0]) - (w[2] - w[1])).abs() <= 1e-9 * w[2].abs().max(1.0) && w[1] > w[0],
            Parameter,
            "gamma values must be increasing and equally spaced"
        );
    }
    let ms = gammas
        .iter()
        .enumerate()
        .map(|(k, &g)| magnetization(region, &params.with_gamma(g), samples, &streams.child(k as u64), workers))
        .collect::<Result<Vec<_>>>()?;
    let second_differences = ms
        .windows(3)
        .map(|w| {
            let v = w[0].value - 2.0 * w[1].value + w[2].value;
            let se = (w[0].std_error.powi(2) + 4.0 * w[1].std_error.powi(2) + w[2].std_error.powi(2)).sqrt();
            OneSided::nonpositive(Estimate::new(v, se, w[1].samples))
        })
        .collect();
    Ok(ConcavityReport { gammas: gammas.to_vec(), magnetization: ms, second_differences })
}

/// Free arcs of one span in offset coordinates, after removing closed T-ranges.
struct FreeArc {
    vertex: usize,
    span: usize,
    lo: f64,
    hi: f64,
}

/// Closed T-ranges per span in offset coordinates, merged and sorted.
fn separator_ranges(region: &Region, t: &[Segment]) -> Result<Vec<Vec<(f64, f64)>>> {
    let beta = region.beta();
    let tol = TIME_TOL * beta.max(1.0);
    let mut ranges = vec![Vec::new(); region.span_count()];
    for seg in t {
        ensure!(seg.len >= 0.0 && seg.len <= beta, Parameter, "separator arc length {} out of range", seg.len);
        let loc = region
            .locate(&Point::new(seg.vertex, seg.start.rem_euclid(beta)))
            .ok_or_else(|| Error::Parameter(format!("separator arc on vertex {} starts outside the region", seg.vertex)))?;
        let span = region.span(loc.span);
        let lo = loc.offset;
        let hi = lo + seg.len;
        if span.full {
            if seg.len >= beta - tol {
                ranges[loc.span].push((0.0, beta));
            } else if hi > beta {
                ranges[loc.span].push((lo, beta));
                ranges[loc.span].push((0.0, hi - beta));
            } else {
                ranges[loc.span].push((lo, hi));
            }
        } else {
            ensure!(hi <= span.len + tol, Parameter, "separator arc on vertex {} leaves its interval", seg.vertex);
            ranges[loc.span].push((lo, hi.min(span.len)));
        }
    }
    for r in &mut ranges {
        *r = merge_ranges(std::mem::take(r), tol);
    }
    Ok(ranges)
}

fn merge_ranges(mut r: Vec<(f64, f64)>, tol: f64) -> Vec<(f64, f64)> {
    r.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(r.len());
    for (a, b) in r {
        match out.last_mut() {
            Some(last) if a <= last.1 + tol => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Lengths of the maximal sub-intervals of T; on a whole circle, ranges meeting
/// across time 0 form one sub-interval.
fn separator_pieces(region: &Region, ranges: &[Vec<(f64, f64)>]) -> Vec<f64> {
    let beta = region.beta();
    let tol = TIME_TOL * beta.max(1.0);
    let mut out = Vec::new();
    for (id, r) in ranges.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let mut lens: Vec<f64> = r.iter().map(|(a, b)| b - a).collect();
        if region.span(id).full && r.len() > 1 && r[0].0 <= tol && r[r.len() - 1].1 >= beta - tol {
            let last = lens.pop().expect("nonempty");
            lens[0] += last;
        }
        out.extend(lens);
    }
    out
}

fn free_arcs(region: &Region, ranges: &[Vec<(f64, f64)>]) -> Vec<FreeArc> {
    let beta = region.beta();
    let tol = TIME_TOL * beta.max(1.0);
    let mut arcs = Vec::new();
    for (id, r) in ranges.iter().enumerate() {
        let span = region.span(id);
        let v = region.span_vertex(id);
        let mut cur = 0.0;
        let mut local = Vec::new();
        for &(a, b) in r {
            if a > cur + tol {
                local.push((cur, a));
            }
            cur = cur.max(b);
        }
        if span.len > cur + tol {
            local.push((cur, span.len));
        }
        if span.full && local.len() > 1 && local[0].0 <= tol && local[local.len() - 1].1 >= beta - tol {
            let (a, _) = local.pop().expect("nonempty");
            local[0] = (a, local[0].1 + beta);
        }
        arcs.extend(local.into_iter().map(|(lo, hi)| FreeArc { vertex: v, span: id, lo, hi }));
    }
    arcs
}

/// Time pieces [a, b) of [0, beta) covered by an arc.
fn arc_pieces(region: &Region, span: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let beta = region.beta();
    let s = region.span(span);
    let start = (s.start + lo).rem_euclid(beta);
    let len = (hi - lo).min(beta);
    Span { start, len, full: len >= beta }.pieces(beta)
}

fn arcs_overlap(p: &[(f64, f64)], q: &[(f64, f64)]) -> bool {
    p.iter().any(|&(a, b)| q.iter().any(|&(c, d)| b.min(d) - a.max(c) > 0.0))
}

fn arc_of(region: &Region, arcs: &[FreeArc], p: &Point) -> Option<usize> {
    let loc = region.locate(p)?;
    let beta = region.beta();
    arcs.iter().position(|a| {
        a.span == loc.span && {
            let o = loc.offset;
            (o > a.lo && o < a.hi) || (o + beta > a.lo && o + beta < a.hi) || ((a.lo == 0.0 && o == 0.0) || (a.hi == region.span(a.span).len && o == a.hi))
        }
    })
}

/// The separated side U: T together with every free arc that no lattice path
/// joins to b without meeting T. Errors when T does not separate a from b.
pub fn separated_region(region: &Region, a: &Point, b: &Point, t: &[Segment]) -> Result<Region> {
    let ranges = separator_ranges(region, t)?;
    let arcs = free_arcs(region, &ranges);
    let ia = arc_of(region, &arcs, a).ok_or_else(|| Error::Parameter(format!("{a:?} lies in the separator or outside K")))?;
    let ib = arc_of(region, &arcs, b).ok_or_else(|| Error::Parameter(format!("{b:?} lies in the separator or outside K")))?;
    let pieces: Vec<Vec<(f64, f64)>> = arcs.iter().map(|a| arc_pieces(region, a.span, a.lo, a.hi)).collect();
    let lat = region.lattice();
    let mut reach = vec![false; arcs.len()];
    reach[ib] = true;
    let mut stack = vec![ib];
    while let Some(i) = stack.pop() {
        for (j, arc) in arcs.iter().enumerate() {
            if !reach[j] && lat.edge_between(arcs[i].vertex, arc.vertex).is_some() && arcs_overlap(&pieces[i], &pieces[j]) {
                reach[j] = true;
                stack.push(j);
            }
        }
    }
    ensure!(!reach[ia], Parameter, "the separator does not separate {a:?} from {b:?}");
    let beta = region.beta();
    let tol = TIME_TOL * beta.max(1.0);
    let mut lines = vec![Vec::new(); lat.vertex_count()];
    for (id, own) in ranges.iter().enumerate() {
        let span = *region.span(id);
        let mut r: Vec<(f64, f64)> = own.clone();
        for (k, arc) in arcs.iter().enumerate() {
            if arc.span == id && !reach[k] {
                if arc.hi > beta && span.full {
                    r.push((arc.lo, beta));
                    r.push((0.0, arc.hi - beta));
                } else {
                    r.push((arc.lo, arc.hi));
                }
            }
        }
        let r = merge_ranges(r, tol);
        if r.is_empty() {
            continue;
        }
        let v = region.span_vertex(id);
        if span.full && r.len() == 1 && r[0].0 <= tol && r[0].1 >= beta - tol {
            lines[v].push(Span { start: 0.0, len: beta, full: true });
            continue;
        }
        let mut spans: Vec<(f64, f64)> = r;
        if span.full && spans.len() > 1 && spans[0].0 <= tol && spans[spans.len() - 1].1 >= beta - tol {
            let (lo, _) = spans.pop().expect("nonempty");
            spans[0] = (lo, spans[0].1 + beta);
        }
        for (lo, hi) in spans {
            if hi - lo <= tol {
                continue;
            }
            let start = (span.start + lo).rem_euclid(beta);
            lines[v].push(Span { start: if start >= beta - tol && start > 0.0 { 0.0 } else { start }, len: hi - lo, full: false });
        }
    }
    Region::from_spans(lat.clone(), beta, lines)
}

/// Both sides of the Simon and Lieb bounds.
#[derive(Clone, Debug, Serialize)]
pub struct SimonLiebReport {
    /// <s_a s_b>.
    pub lhs: Estimate,
    /// (1/eps) exp(8 eps delta) int_T <s_a s_x><s_x s_b> dx.
    pub simon_rhs: Estimate,
    /// The same with <s_a s_x> restricted to U.
    pub lieb_rhs: Estimate,
    /// rhs - lhs for each bound, and the Simon integral minus the Lieb integral.
    pub simon: OneSided,
    pub lieb: OneSided,
    pub restriction: OneSided,
    pub separated_measure: f64,
}

/// Simon and Lieb bounds for gamma = 0 with an eps-fat separating set T.
#[allow(clippy::too_many_arguments)]
pub fn check_simon_lieb(
    region: &Region,
    a: Point,
    b: Point,
    t: &[Segment],
    eps: f64,
    params: &Params,
    samples: u64,
    h: f64,
    streams: &Streams,
    workers: usize,
) -> Result<SimonLiebReport> {
    params.validate()?;
    ensure!(params.gamma == 0.0, Parameter, "the Simon and Lieb bounds need gamma = 0");
    ensure!(eps > 0.0 && eps.is_finite(), Parameter, "eps must be positive");
    ensure!(h > 0.0 && h.is_finite(), Parameter, "quadrature step must be positive");
    let ranges = separator_ranges(region, t)?;
    let pieces = separator_pieces(region, &ranges);
    ensure!(!pieces.is_empty(), Parameter, "empty separator");
    let tol = TIME_TOL * region.beta().max(1.0);
    ensure!(
        pieces.iter().all(|&l| l >= eps - tol),
        Parameter,
        "separator is not {eps}-fat: shortest piece has length {}",
        pieces.iter().copied().fold(f64::INFINITY, f64::min)
    );
    let u = separated_region(region, &a, &b, t)?;
    let beta = region.beta();
    let mut tspans = Vec::new();
    for (id, r) in ranges.iter().enumerate() {
        let span = region.span(id);
        for &(lo, hi) in r {
            let v = region.span_vertex(id);
            if span.full && hi - lo >= beta - tol {
                tspans.push((v, Span { start: 0.0, len: beta, full: true }));
            } else {
                tspans.push((v, Span { start: (span.start + lo).rem_euclid(beta), len: hi - lo, full: false }));
            }
        }
    }
    let (xs, w, _) = grid_over(&tspans, h, beta);
    let g = xs.len();
    let mut k_sets = vec![vec![a, b]];
    for &x in &xs {
        k_sets.push(vec![a, x]);
        k_sets.push(vec![x, b]);
    }
    let k_located: Vec<Vec<Located>> = k_sets
        .iter()
        .map(|s| locate_sources(region, SourceSet::new(region, s)?.points()))
        .collect::<Result<_>>()?;
    let u_located: Vec<Vec<Located>> = xs
        .iter()
        .map(|&x| locate_sources(&u, SourceSet::new(&u, &[a, x])?.points()))
        .collect::<Result<_>>()?;
    let nk = k_located.len() + 1;
    let sums = run_blocks(samples, nk + g + 1, streams, workers, |rng, n, s| {
        let mut ek = ParityEvaluator::new(region, params)?;
        let mut eu = ParityEvaluator::new(&u, params)?;
        for _ in 0..n {
            ek.sample(rng);
            eu.sample(rng);
            s[0] += ek.weight(&[]);
            for (k, l) in k_located.iter().enumerate() {
                s[k + 1] += ek.weight(l);
            }
            s[nk] += eu.weight(&[]);
            for (k, l) in u_located.iter().enumerate() {
                s[nk + 1 + k] += eu.weight(l);
            }
        }
        Ok(())
    })?;
    let factor = (8.0 * eps * params.delta).exp() / eps;
    let simon_int = |m: &[f64]| -> f64 { (0..g).map(|k| w[k] * (m[2 + 2 * k] / m[0]) * (m[3 + 2 * k] / m[0])).sum() };
    let lieb_int = |m: &[f64]| -> f64 { (0..g).map(|k| w[k] * (m[nk + 1 + k] / m[nk]) * (m[3 + 2 * k] / m[0])).sum() };
    let lhs = |m: &[f64]| m[1] / m[0];
    Ok(SimonLiebReport {
        lhs: sums.jackknife(lhs),
        simon_rhs: sums.jackknife(|m| factor * simon_int(m)),
        lieb_rhs: sums.jackknife(|m| factor * lieb_int(m)),
        simon: OneSided::nonnegative(sums.jackknife(|m| factor * simon_int(m) - lhs(m))),
        lieb: OneSided::nonnegative(sums.jackknife(|m| factor * lieb_int(m) - lhs(m))),
        restriction: OneSided::nonnegative(sums.jackknife(|m| simon_int(m) - lieb_int(m))),
        separated_measure: u.measure(),
    })
}

/// The four right-hand terms of M <= gamma chi + M^3 + 2 lambda M^2 dM/dlambda - 2 delta M^2 dM/d delta.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PdiTerms {
    pub gamma_chi: f64,
    pub m_cubed: f64,
    pub lambda_term: f64,
    pub delta_term: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PdiReport {
    pub m: Estimate,
    pub chi: Susceptibility,
    pub derivatives: Derivatives,
    pub terms: PdiTerms,
    /// rhs - M.
    pub slack: OneSided,
}

/// The main differential inequality. chi comes from an independent run, so its
/// error is added in quadrature to the jackknife error of the remaining terms.
pub fn check_main_pdi(region: &Region, params: &Params, samples: u64, h: f64, streams: &Streams, workers: usize) -> Result<PdiReport> {
    params.validate()?;
    check_translation_invariant(region)?;
    let chi = susceptibility(region, params, samples, h, &streams.child(1), workers)?;
    let der = derivative_estimators(region, params, samples, &streams.child(2), workers)?;
    let (l, d, g) = (params.lambda, params.delta, params.gamma);
    let mm = der.m.value;
    let terms = PdiTerms {
        gamma_chi: g * chi.estimate.value,
        m_cubed: mm.powi(3),
        lambda_term: 2.0 * l * mm * mm * der.dm_dlambda.value,
        delta_term: 2.0 * d * mm * mm * der.minus_dm_ddelta.value,
    };
    // Error of the M-dependent part by the delta method.
    let dm = 3.0 * mm * mm + 4.0 * l * mm * der.dm_dlambda.value + 4.0 * d * mm * der.minus_dm_ddelta.value - 1.0;
    let rest_var = (dm * der.m.std_error).powi(2)
        + (2.0 * l * mm * mm * der.dm_dlambda.std_error).powi(2)
        + (2.0 * d * mm * mm * der.minus_dm_ddelta.std_error).powi(2);
    let value = terms.gamma_chi + terms.m_cubed + terms.lambda_term + terms.delta_term - mm;
    let se = (rest_var + (g * chi.estimate.std_error).powi(2)).sqrt();
    Ok(PdiReport {
        m: der.m,
        chi,
        derivatives: der,
        terms,
        slack: OneSided::nonnegative(Estimate::new(value, se, der.m.samples)),
    })
}

/// Mass from a correlation profile: weighted least-squares slope of -log C
/// against distance, over the largest distances whose signal exceeds 3 standard
/// errors (the last max(3, half) of them).
pub fn mass_estimate(correlations: &[(f64, Estimate)]) -> Result<Estimate> {
    let mut usable: Vec<&(f64, Estimate)> = correlations
        .iter()
        .filter(|(_, c)| c.value > 0.0 && c.value > 3.0 * c.std_error)
        .collect();
    usable.sort_by(|a, b| a.0.total_cmp(&b.0));
    ensure!(usable.len() >= 3, InsufficientData, "only {} distances carry signal; need 3", usable.len());
    let keep = 3.max(usable.len().div_ceil(2));
    let tail = &usable[usable.len() - keep..];
    let x: Vec<f64> = tail.iter().map(|(r, _)| *r).collect();
    let y: Vec<f64> = tail.iter().map(|(_, c)| -c.value.ln()).collect();
    let sig: Vec<f64> = tail.iter().map(|(_, c)| c.std_error / c.value).collect();
    let weighted = sig.iter().all(|&s| s > 0.0);
    let fit = fit_line(&x, &y, weighted.then_some(&sig[..]))?;
    let samples = tail.iter().map(|(_, c)| c.samples).min().unwrap_or(0);
    Ok(Estimate::new(fit.slope, fit.slope_se, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Lattice, TimeDomain};
    use crate::oracle::{region_correlation, DenseHamiltonian};
    use std::sync::Arc;

    fn chain(n: usize, beta: f64) -> Region {
        Region::full(Arc::new(Lattice::chain(n).unwrap()), TimeDomain::circle(beta).unwrap())
    }

    #[test]
    fn magnetization_zero_field_is_exact_zero() {
        let r = chain(1, 1.0);
        let m = magnetization(&r, &Params::new(1.0, 1.0, 0.0).unwrap(), 10, &Streams::new(1), 1).unwrap();
        assert_eq!(m, Estimate::exact(0.0));
    }

    #[test]
    fn single_spin_magnetization_long_time() {
        let r = chain(1, 20.0);
        let m = magnetization(&r, &Params::new(0.0, 1.0, 1.0).unwrap(), 200_000, &Streams::new(2), 1).unwrap();
        let exact = (1.0 / 2f64.sqrt()) * (20.0 * 2f64.sqrt()).tanh();
        assert!(m.z_against(exact).abs() < 4.0, "{m:?} vs {exact}");
    }

    #[test]
    fn truncated_two_point_same_point() {
        let r = chain(1, 1.0);
        let p = Params::new(0.0, 1.0, 0.5).unwrap();
        let x = Point::new(0, 0.3);
        let t = truncated_two_point(&r, x, x, &p, 100_000, &Streams::new(3), 1).unwrap();
        let m = DenseHamiltonian::new(r.lattice(), &p).unwrap().magnetization(1.0, 0).unwrap();
        assert!(t.z_against(1.0 - m * m).abs() < 4.0, "{t:?}");
    }

    #[test]
    fn susceptibility_single_spin_matches_oracle_derivative() {
        let r = chain(1, 1.0);
        let p = Params::new(0.0, 1.0, 0.5).unwrap();
        let chi = susceptibility(&r, &p, 100_000, 1.0 / 64.0, &Streams::new(4), 1).unwrap();
        let exact = oracle_derivatives(&r, &p).unwrap()[0];
        assert!((chi.estimate.value - exact).abs() <= 0.05 * exact, "{chi:?} vs {exact}");
        let m = DenseHamiltonian::new(r.lattice(), &p).unwrap().magnetization(1.0, 0).unwrap();
        assert!(chi.estimate.value <= m / p.gamma + 3.0 * chi.estimate.std_error);
    }

    #[test]
    fn derivative_representations_match_finite_differences() {
        let r = chain(2, 1.0);
        let p = Params::new(1.2, 0.9, 0.6).unwrap();
        let d = derivative_estimators(&r, &p, 200_000, &Streams::new(5), 1).unwrap();
        let fd = oracle_derivatives(&r, &p).unwrap();
        for (est, exact) in [(d.dm_dgamma, fd[0]), (d.dm_dlambda, fd[1]), (d.minus_dm_ddelta, fd[2])] {
            let ok = (est.value - exact).abs() <= (0.05 * exact.abs()).max(3.0 * est.std_error);
            assert!(ok, "{est:?} vs {exact}");
        }
        assert!(d.bounds_hold(), "{d:?}");
    }

    #[test]
    fn mass_of_exact_exponential() {
        let c: Vec<(f64, Estimate)> = (0..8).map(|r| (r as f64, Estimate::exact((-0.5 * r as f64).exp()))).collect();
        let m = mass_estimate(&c).unwrap();
        assert!((m.value - 0.5).abs() < 1e-12);
        let flat: Vec<(f64, Estimate)> = (0..8).map(|r| (r as f64, Estimate::new(0.7, 0.01, 100))).collect();
        assert!(mass_estimate(&flat).unwrap().value.abs() < 1e-12);
        let few: Vec<(f64, Estimate)> = (0..2).map(|r| (r as f64, Estimate::exact(1.0))).collect();
        assert!(matches!(mass_estimate(&few), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn separator_on_middle_line() {
        let r = chain(3, 1.0);
        let a = Point::new(0, 0.2);
        let b = Point::new(2, 0.2);
        let t = [Segment { vertex: 1, start: 0.0, len: 1.0 }];
        let u = separated_region(&r, &a, &b, &t).unwrap();
        assert!((u.measure() - 2.0).abs() < 1e-12);
        assert!(u.contains(&a) && !u.contains(&b));
        // an arc short of the full line leaves a gap
        let short = [Segment { vertex: 1, start: 0.0, len: 0.9 }];
        assert!(matches!(separated_region(&r, &a, &b, &short), Err(Error::Parameter(_))));
    }

    #[test]
    fn separator_fatness() {
        let r = chain(3, 1.0);
        let p = Params::new(1.0, 1.0, 0.0).unwrap();
        let t = [Segment { vertex: 1, start: 0.0, len: 1.0 }];
        let res = check_simon_lieb(&r, Point::new(0, 0.0), Point::new(2, 0.0), &t, 1.5, &p, 10, 0.1, &Streams::new(1), 1);
        assert!(matches!(res, Err(Error::Parameter(_))));
    }

    #[test]
    fn simon_and_lieb_hold_on_a_path() {
        let r = chain(3, 1.0);
        let p = Params::new(1.5, 1.0, 0.0).unwrap();
        let (a, b) = (Point::new(0, 0.0), Point::new(2, 0.5));
        let t = [Segment { vertex: 1, start: 0.0, len: 1.0 }];
        let rep = check_simon_lieb(&r, a, b, &t, 1.0, &p, 20_000, 1.0 / 16.0, &Streams::new(6), 1).unwrap();
        assert!(rep.simon.holds && rep.lieb.holds && rep.restriction.holds, "{rep:?}");
        let exact = region_correlation(&r, &[a, b], &p).unwrap();
        assert!(rep.lhs.z_against(exact).abs() < 4.0);
    }

    #[test]
    fn ghs_independent_spins() {
        let r = chain(3, 1.0);
        let p = Params::new(0.0, 1.0, 0.5).unwrap();
        let rep = check_ghs(&r, Point::new(0, 0.1), Point::new(1, 0.2), Point::new(2, 0.3), &p, 50_000, &Streams::new(7), 1).unwrap();
        assert!(rep.estimate.value.abs() < 4.0 * rep.estimate.std_error.max(1e-12), "{rep:?}");
    }
}
