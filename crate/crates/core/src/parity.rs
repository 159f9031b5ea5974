//! Random-parity colourings.
//!
//! Given bridges B, ghost-bonds G and a source set A, every interval of K is cut
//! into segments labelled odd or even that switch at the points of
//! S = (endpoints of B) u G u A. A full circle needs one extra bit (the label at
//! time 0+). The weight of a colouring is d psi = exp(2 delta |ev(psi)|); estimators
//! use the normalized weight exp(-2 delta |odd(psi)|) = d psi * exp(-2 delta |K|).

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::domain::{point_order, Bridge, Configuration, Params, Point, Region, Span};
use crate::error::{ensure, Error, Result};
use crate::oracle;
use crate::rng::Streams;
use crate::stats::{run_blocks, Estimate, KahanSum};

/// A finite set A of points in the closure of K. The ghost is a source exactly
/// when |A| is odd.
#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct SourceSet {
    points: Vec<Point>,
}

impl SourceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Points listed an even number of times cancel.
    pub fn new(region: &Region, points: &[Point]) -> Result<Self> {
        let mut pts: Vec<Point> = points.to_vec();
        pts.sort_by(point_order);
        let mut kept: Vec<Point> = Vec::with_capacity(pts.len());
        for p in pts {
            if kept.last() == Some(&p) {
                kept.pop();
            } else {
                kept.push(p);
            }
        }
        for p in &kept {
            ensure!(region.contains(p), Domain, "source {p:?} is not in the closure of the region");
            ensure!(
                region.endpoint_multiplicity(p) <= 1,
                Consistency,
                "source {p:?} is an endpoint of two intervals"
            );
        }
        Ok(Self { points: kept })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when the ghost belongs to the set.
    pub fn has_ghost(&self) -> bool {
        self.points.len() % 2 == 1
    }

    /// A with the given points toggled.
    pub fn toggled(&self, region: &Region, points: &[Point]) -> Result<Self> {
        let mut all = self.points.clone();
        all.extend_from_slice(points);
        Self::new(region, &all)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkKind {
    Source,
    Ghost(usize),
    Bridge(usize),
}

/// A switching point on an interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mark {
    pub offset: f64,
    pub time: f64,
    pub kind: MarkKind,
}

/// Colouring of one maximal interval. Segment k lies between marks k-1 and k;
/// its label is odd iff `first_odd` xor (k odd).
#[derive(Clone, Debug)]
pub struct SpanColouring {
    pub span: Span,
    pub vertex: usize,
    pub marks: Vec<Mark>,
    pub first_odd: bool,
}

impl SpanColouring {
    pub fn segment_odd(&self, k: usize) -> bool {
        self.first_odd ^ (k % 2 == 1)
    }

    /// `(from, to, odd)` in offsets.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, bool)> + '_ {
        (0..=self.marks.len()).map(move |k| {
            let a = if k == 0 { 0.0 } else { self.marks[k - 1].offset };
            let b = if k == self.marks.len() { self.span.len } else { self.marks[k].offset };
            (a, b, self.segment_odd(k))
        })
    }

    /// Label at an offset; `None` on a switching point.
    pub fn label_at(&self, offset: f64) -> Option<bool> {
        let k = self.marks.partition_point(|m| m.offset < offset);
        if self.marks.get(k).is_some_and(|m| m.offset == offset) {
            return None;
        }
        if self.span.full && offset == 0.0 {
            return Some(self.segment_odd(0));
        }
        Some(self.segment_odd(k))
    }

    fn odd_measure(&self) -> f64 {
        let mut s = KahanSum::default();
        for (a, b, odd) in self.segments() {
            if odd {
                s.add(b - a);
            }
        }
        s.value()
    }
}

/// Bridges as `(u, v, time)` with u < v, and ghost points, recovered from a labelling.
pub type Reconstruction = (Vec<(usize, usize, f64)>, Vec<Point>);

/// A colouring psi^A of region K, or the failure symbol when some closed interval
/// holds an odd number of switching points.
#[derive(Clone, Debug)]
pub struct Colouring<'r> {
    region: &'r Region,
    sources: SourceSet,
    bridges: Vec<Bridge>,
    ghosts: Vec<Point>,
    bits: Vec<bool>,
    spans: Vec<SpanColouring>,
    valid: bool,
}

fn mark_offset(span: &Span, p: &Point, beta: f64) -> Option<f64> {
    let o = span.offset_of(p.time, beta)?;
    Some(if span.full && o == 0.0 { beta } else { o })
}

impl<'r> Colouring<'r> {
    /// Build psi^A, drawing one bit per full circle (in vertex order) from `rng`.
    pub fn build<R: Rng + ?Sized>(
        region: &'r Region,
        sources: &SourceSet,
        bridges: &[Bridge],
        ghosts: &[Point],
        rng: &mut R,
    ) -> Result<Self> {
        let bits: Vec<bool> = (0..region.lattice().vertex_count())
            .map(|v| region.line(v).first().is_some_and(|s| s.full) && rng.random::<bool>())
            .collect();
        Self::build_with_bits(region, sources, bridges, ghosts, &bits)
    }

    /// Build psi^A with the given circle bits (indexed by vertex, ignored off W(K)).
    pub fn build_with_bits(
        region: &'r Region,
        sources: &SourceSet,
        bridges: &[Bridge],
        ghosts: &[Point],
        bits: &[bool],
    ) -> Result<Self> {
        let beta = region.beta();
        ensure!(bits.len() == region.lattice().vertex_count(), Consistency, "one bit per vertex required");
        let mut spans: Vec<SpanColouring> = (0..region.span_count())
            .map(|id| {
                let span = *region.span(id);
                let vertex = region.span_vertex(id);
                SpanColouring { span, vertex, marks: Vec::new(), first_odd: span.full && bits[vertex] }
            })
            .collect();
        let mut place = |p: &Point, kind: MarkKind| -> Result<()> {
            let loc = region
                .locate(p)
                .ok_or_else(|| Error::Domain(format!("switching point {p:?} is outside the region")))?;
            let sc = &mut spans[loc.span];
            let offset = mark_offset(&sc.span, p, beta).expect("located");
            sc.marks.push(Mark { offset, time: p.time, kind });
            Ok(())
        };
        for (i, b) in bridges.iter().enumerate() {
            place(&Point::new(b.u, b.time), MarkKind::Bridge(i))?;
            place(&Point::new(b.v, b.time), MarkKind::Bridge(i))?;
        }
        for (i, g) in ghosts.iter().enumerate() {
            place(g, MarkKind::Ghost(i))?;
        }
        for a in sources.points() {
            place(a, MarkKind::Source)?;
        }
        let mut valid = true;
        for sc in &mut spans {
            sc.marks.sort_by(|a, b| a.offset.total_cmp(&b.offset));
            if sc.marks.windows(2).any(|w| w[0].offset == w[1].offset) {
                return Err(Error::Consistency("two switching points coincide".into()));
            }
            if sc.marks.len() % 2 == 1 {
                valid = false;
            }
            if !sc.span.full {
                sc.first_odd = false;
            }
        }
        Ok(Self {
            region,
            sources: sources.clone(),
            bridges: bridges.to_vec(),
            ghosts: ghosts.to_vec(),
            bits: bits.to_vec(),
            spans,
            valid,
        })
    }

    pub fn region(&self) -> &'r Region {
        self.region
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn sources(&self) -> &SourceSet {
        &self.sources
    }

    pub fn bridges(&self) -> &[Bridge] {
        &self.bridges
    }

    pub fn ghosts(&self) -> &[Point] {
        &self.ghosts
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn spans(&self) -> &[SpanColouring] {
        &self.spans
    }

    /// Label at a point (true = odd). `None` for points outside K, switching
    /// points, or a failed colouring.
    pub fn label_at(&self, p: &Point) -> Option<bool> {
        if !self.valid {
            return None;
        }
        let loc = self.region.locate(p)?;
        let sc = &self.spans[loc.span];
        let o = if sc.span.full && loc.offset == 0.0 { 0.0 } else { loc.offset };
        sc.label_at(o)
    }

    /// |odd(psi)|, zero for a failed colouring.
    pub fn odd_measure(&self) -> f64 {
        if !self.valid {
            return 0.0;
        }
        let mut s = KahanSum::default();
        for sc in &self.spans {
            s.add(sc.odd_measure());
        }
        s.value()
    }

    /// |ev(psi)|, zero for a failed colouring.
    pub fn even_measure(&self) -> f64 {
        if !self.valid {
            return 0.0;
        }
        self.region.measure() - self.odd_measure()
    }

    /// log d psi = 2 delta |ev(psi)|, or -infinity for the failure symbol.
    pub fn log_weight(&self, delta: f64) -> f64 {
        if self.valid {
            2.0 * delta * self.even_measure()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// exp(-2 delta |odd(psi)|), the weight normalized by exp(2 delta |K|).
    pub fn normalized_weight(&self, delta: f64) -> f64 {
        if self.valid {
            (-2.0 * delta * self.odd_measure()).exp()
        } else {
            0.0
        }
    }

    /// Recover (bridges as (u, v, time), ghost points) from the labelling alone:
    /// take every point where the label switches, drop the sources, and pair
    /// switches at equal times on adjacent lines.
    pub fn reconstruct(&self) -> Result<Reconstruction> {
        ensure!(self.valid, Consistency, "cannot reconstruct from a failed colouring");
        let mut switches: Vec<Point> = Vec::new();
        for sc in &self.spans {
            for (k, m) in sc.marks.iter().enumerate() {
                if sc.segment_odd(k) == sc.segment_odd(k + 1) {
                    return Err(Error::Invariant("labels do not switch at a switching point".into()));
                }
                switches.push(Point::new(sc.vertex, m.time));
            }
        }
        let is_source = |p: &Point| self.sources.points().contains(p);
        let mut rest: Vec<Point> = switches.into_iter().filter(|p| !is_source(p)).collect();
        rest.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.vertex.cmp(&b.vertex)));
        let lattice = self.region.lattice();
        let mut bridges = Vec::new();
        let mut ghosts = Vec::new();
        let mut i = 0;
        while i < rest.len() {
            let same: Vec<Point> = rest[i..].iter().take_while(|p| p.time == rest[i].time).copied().collect();
            match same.as_slice() {
                [p, q] if lattice.edge_between(p.vertex, q.vertex).is_some() => {
                    bridges.push((p.vertex.min(q.vertex), p.vertex.max(q.vertex), p.time))
                }
                [p] => ghosts.push(*p),
                _ => return Err(Error::Invariant("ambiguous switching points".into())),
            }
            i += same.len();
        }
        ghosts.sort_by(point_order);
        bridges.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
        Ok((bridges, ghosts))
    }
}

// --- fast evaluation for estimators --------------------------------------------

/// A source located in a region.
#[derive(Clone, Copy, Debug)]
pub struct Located {
    pub span: usize,
    pub offset: f64,
}

/// Locate source points; the result is sorted by span then offset.
pub fn locate_sources(region: &Region, points: &[Point]) -> Result<Vec<Located>> {
    let beta = region.beta();
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let loc = region
            .locate(p)
            .ok_or_else(|| Error::Domain(format!("source {p:?} is outside the region")))?;
        let span = region.span(loc.span);
        let offset = mark_offset(span, p, beta).expect("located");
        out.push(Located { span: loc.span, offset });
    }
    out.sort_by(|a, b| a.span.cmp(&b.span).then(a.offset.total_cmp(&b.offset)));
    Ok(out)
}

struct EdgePiece {
    a: f64,
    b: f64,
    span_u: usize,
    off_u: f64,
    full_u: bool,
    span_v: usize,
    off_v: f64,
    full_v: bool,
    count: Option<Poisson<f64>>,
}

/// Samples (B, G) straight into per-interval switching lists and evaluates the
/// normalized weight of psi^A for many source sets against the same (B, G).
/// The bit of a full circle is averaged out exactly:
/// E[exp(-2 delta |odd|) | B, G] = (exp(-2 delta o) + exp(-2 delta (beta - o))) / 2.
pub struct ParityEvaluator<'r> {
    region: &'r Region,
    delta: f64,
    edges: Vec<EdgePiece>,
    ghost_counts: Vec<Option<Poisson<f64>>>,
    marks: Vec<Vec<f64>>,
    base_log: Vec<f64>,
    base_ok: Vec<bool>,
    total_log: f64,
    bad: usize,
}

impl<'r> ParityEvaluator<'r> {
    pub fn new(region: &'r Region, params: &Params) -> Result<Self> {
        params.validate()?;
        let mut edges = Vec::new();
        let j = params.bridge_rate();
        for (e, &(u, v)) in region.lattice().edges().iter().enumerate() {
            for &(a, b) in region.edge_pieces(e) {
                let mid = 0.5 * (a + b);
                let lu = region.locate(&Point::new(u, mid)).ok_or_else(|| Error::Invariant("edge piece off K".into()))?;
                let lv = region.locate(&Point::new(v, mid)).ok_or_else(|| Error::Invariant("edge piece off K".into()))?;
                edges.push(EdgePiece {
                    a,
                    b,
                    span_u: lu.span,
                    off_u: lu.offset - (mid - a),
                    full_u: region.span(lu.span).full,
                    span_v: lv.span,
                    off_v: lv.offset - (mid - a),
                    full_v: region.span(lv.span).full,
                    count: (j * (b - a) > 0.0).then(|| Poisson::new(j * (b - a)).expect("finite")),
                });
            }
        }
        let ghost_counts = (0..region.span_count())
            .map(|id| {
                let m = params.gamma * region.span(id).len;
                (m > 0.0).then(|| Poisson::new(m).expect("finite"))
            })
            .collect();
        let n = region.span_count();
        Ok(Self {
            region,
            delta: params.delta,
            edges,
            ghost_counts,
            marks: vec![Vec::new(); n],
            base_log: vec![0.0; n],
            base_ok: vec![true; n],
            total_log: 0.0,
            bad: 0,
        })
    }

    pub fn region(&self) -> &'r Region {
        self.region
    }

    /// Draw a fresh (B, G).
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let beta = self.region.beta();
        loop {
            for m in &mut self.marks {
                m.clear();
            }
            for e in &self.edges {
                let Some(d) = &e.count else { continue };
                let k = d.sample(rng) as usize;
                for _ in 0..k {
                    let x = rng.random::<f64>() * (e.b - e.a);
                    self.marks[e.span_u].push(wrap_offset(e.off_u + x, beta, e.full_u));
                    self.marks[e.span_v].push(wrap_offset(e.off_v + x, beta, e.full_v));
                }
            }
            for (id, d) in self.ghost_counts.iter().enumerate() {
                let Some(d) = d else { continue };
                let k = d.sample(rng) as usize;
                let len = self.region.span(id).len;
                let full = self.region.span(id).full;
                for _ in 0..k {
                    let o = rng.random::<f64>() * len;
                    self.marks[id].push(if o == 0.0 && full { len } else { o });
                }
            }
            let mut distinct = true;
            for m in &mut self.marks {
                m.sort_by(f64::total_cmp);
                distinct &= m.windows(2).all(|w| w[0] != w[1]);
            }
            if distinct {
                break;
            }
        }
        self.refresh();
    }

    /// Load an explicit configuration instead of sampling.
    pub fn load(&mut self, config: &Configuration) -> Result<()> {
        let beta = self.region.beta();
        for m in &mut self.marks {
            m.clear();
        }
        let pts = config
            .bridges
            .iter()
            .flat_map(|b| [Point::new(b.u, b.time), Point::new(b.v, b.time)])
            .chain(config.ghosts.iter().copied());
        for p in pts {
            let loc = self.region.locate(&p).ok_or_else(|| Error::Domain(format!("{p:?} outside the region")))?;
            let o = mark_offset(self.region.span(loc.span), &p, beta).expect("located");
            self.marks[loc.span].push(o);
        }
        for m in &mut self.marks {
            m.sort_by(f64::total_cmp);
        }
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        self.total_log = 0.0;
        self.bad = 0;
        for id in 0..self.marks.len() {
            let (ok, lw) = self.span_log_weight(id, &[]);
            self.base_ok[id] = ok;
            self.base_log[id] = lw;
            if ok {
                self.total_log += lw;
            } else {
                self.bad += 1;
            }
        }
    }

    /// Parity check and log normalized weight of one interval with extra sources.
    fn span_log_weight(&self, id: usize, extra: &[f64]) -> (bool, f64) {
        let span = self.region.span(id);
        let base = &self.marks[id];
        if (base.len() + extra.len()) % 2 == 1 {
            return (false, f64::NEG_INFINITY);
        }
        let mut odd = 0.0;
        let mut label = false;
        let mut last = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < base.len() || j < extra.len() {
            let x = if j >= extra.len() || (i < base.len() && base[i] < extra[j]) {
                i += 1;
                base[i - 1]
            } else {
                j += 1;
                extra[j - 1]
            };
            if label {
                odd += x - last;
            }
            last = x;
            label = !label;
        }
        let dd = 2.0 * self.delta;
        if span.full {
            let even = span.len - odd;
            let (lo, hi) = if odd < even { (odd, even) } else { (even, odd) };
            (true, -dd * lo + (0.5 * (1.0 + (-dd * (hi - lo)).exp())).ln())
        } else {
            (true, -dd * odd)
        }
    }

    /// Normalized weight E[exp(-2 delta |odd(psi^A)|) | B, G] for located sources.
    pub fn weight(&self, sources: &[Located]) -> f64 {
        self.log_weight(sources).exp()
    }

    pub fn log_weight(&self, sources: &[Located]) -> f64 {
        let mut total = self.total_log;
        let mut bad = self.bad;
        let mut buf = [0.0f64; 8];
        let mut k = 0;
        while k < sources.len() {
            let id = sources[k].span;
            let mut m = k;
            while m < sources.len() && sources[m].span == id {
                m += 1;
            }
            let n = m - k;
            let (ok, lw) = if n <= buf.len() {
                for (b, s) in buf.iter_mut().zip(&sources[k..m]) {
                    *b = s.offset;
                }
                self.span_log_weight(id, &buf[..n])
            } else {
                let v: Vec<f64> = sources[k..m].iter().map(|s| s.offset).collect();
                self.span_log_weight(id, &v)
            };
            if self.base_ok[id] {
                total -= self.base_log[id];
            } else {
                bad -= 1;
            }
            if ok {
                total += lw;
            } else {
                bad += 1;
            }
            k = m;
        }
        if bad > 0 {
            f64::NEG_INFINITY
        } else {
            total
        }
    }
}

fn wrap_offset(o: f64, beta: f64, full: bool) -> f64 {
    if !full {
        o
    } else if o > beta {
        o - beta
    } else if o <= 0.0 {
        o + beta
    } else {
        o
    }
}

/// Result of [`estimate_correlation`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrelationEstimate {
    pub estimate: Estimate,
    /// Mean normalized weight of psi^empty.
    pub denominator: Estimate,
    /// Fraction of samples where psi^A is a genuine colouring.
    pub valid_fraction: f64,
}

/// <s_A> = E(d psi^A) / E(d psi^empty) by direct sampling of (B, G).
pub fn estimate_correlation(
    region: &Region,
    sources: &SourceSet,
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<CorrelationEstimate> {
    params.validate()?;
    if sources.is_empty() {
        let one = Estimate::exact(1.0);
        return Ok(CorrelationEstimate { estimate: one, denominator: one, valid_fraction: 1.0 });
    }
    if sources.has_ghost() && params.gamma == 0.0 {
        return Ok(CorrelationEstimate {
            estimate: Estimate::exact(0.0),
            denominator: Estimate::exact(f64::NAN),
            valid_fraction: 0.0,
        });
    }
    let located = locate_sources(region, sources.points())?;
    let sums = run_blocks(samples, 3, streams, workers, |rng, n, s| {
        let mut ev = ParityEvaluator::new(region, params)?;
        for _ in 0..n {
            ev.sample(rng);
            let wa = ev.weight(&located);
            s[0] += wa;
            s[1] += ev.weight(&[]);
            s[2] += f64::from(u8::from(wa > 0.0));
        }
        Ok(())
    })?;
    let estimate = sums.jackknife(|m| m[0] / m[1]);
    let denominator = sums.jackknife(|m| m[1]);
    Ok(CorrelationEstimate { estimate, denominator, valid_fraction: sums.means()[2] })
}

/// Monte Carlo value of Z' from the partition identity, compared with the region oracle.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PartitionCheck {
    /// 2^N exp(lambda/2 |F| + gamma |K| - delta |K|) E(d psi^empty).
    pub sampled: Estimate,
    pub exact: f64,
    pub ratio: f64,
    pub z: f64,
}

pub fn verify_partition_identity(
    region: &Region,
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<PartitionCheck> {
    let exact_log = oracle::region_log_partition(region, params)?;
    let sums = run_blocks(samples, 1, streams, workers, |rng, n, s| {
        let mut ev = ParityEvaluator::new(region, params)?;
        for _ in 0..n {
            ev.sample(rng);
            s[0] += ev.weight(&[]);
        }
        Ok(())
    })?;
    // Unnormalized d psi carries exp(2 delta |K|).
    let log_pref = oracle::log_partition_prefactor(region, params) + 2.0 * params.delta * region.measure() - exact_log;
    let scaled = sums.jackknife(|m| m[0] * log_pref.exp());
    let sampled = Estimate::new(scaled.value * exact_log.exp(), scaled.std_error * exact_log.exp(), scaled.samples);
    Ok(PartitionCheck { sampled, exact: exact_log.exp(), ratio: scaled.value, z: scaled.z_against(1.0) })
}

/// Order of marks by offset, for callers merging mark lists.
pub fn by_offset(a: &Mark, b: &Mark) -> Ordering {
    a.offset.total_cmp(&b.offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Boundary, Lattice, Segment, TimeDomain, Topology};
    use crate::oracle::DenseHamiltonian;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn circle(n: usize, beta: f64) -> Region {
        Region::full(Arc::new(Lattice::chain(n).unwrap()), TimeDomain::circle(beta).unwrap())
    }

    #[test]
    fn no_points_full_circle() {
        let r = circle(1, 2.0);
        let c = Colouring::build_with_bits(&r, &SourceSet::empty(), &[], &[], &[false]).unwrap();
        assert!(c.is_valid());
        assert_eq!(c.even_measure(), 2.0);
        assert!((c.log_weight(1.5) - 6.0).abs() < 1e-15);
        let c = Colouring::build_with_bits(&r, &SourceSet::empty(), &[], &[], &[true]).unwrap();
        assert_eq!(c.even_measure(), 0.0);
    }

    #[test]
    fn two_sources_on_interval() {
        let l = Arc::new(Lattice::chain(1).unwrap());
        let r = Region::full(l, TimeDomain::new(1.0, Topology::Interval).unwrap());
        let a = SourceSet::new(&r, &[Point::new(0, 0.2), Point::new(0, 0.7)]).unwrap();
        let c = Colouring::build_with_bits(&r, &a, &[], &[], &[false]).unwrap();
        assert!(c.is_valid());
        assert!((c.odd_measure() - 0.5).abs() < 1e-15);
        assert!((c.even_measure() - 0.5).abs() < 1e-15);
        assert_eq!(c.label_at(&Point::new(0, 0.5)), Some(true));
        assert_eq!(c.label_at(&Point::new(0, 0.1)), Some(false));
    }

    #[test]
    fn odd_count_fails() {
        let l = Arc::new(Lattice::chain(1).unwrap());
        let r = Region::full(l, TimeDomain::new(1.0, Topology::Interval).unwrap());
        let a = SourceSet::new(&r, &[Point::new(0, 0.2)]).unwrap();
        let c = Colouring::build_with_bits(&r, &a, &[], &[], &[false]).unwrap();
        assert!(!c.is_valid());
        assert_eq!(c.normalized_weight(1.0), 0.0);
        assert_eq!(c.log_weight(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn source_on_interval_end() {
        let l = Arc::new(Lattice::chain(1).unwrap());
        let r = Region::full(l, TimeDomain::new(1.0, Topology::Interval).unwrap());
        let a = SourceSet::new(&r, &[Point::new(0, 0.0), Point::new(0, 0.4)]).unwrap();
        let c = Colouring::build_with_bits(&r, &a, &[], &[], &[false]).unwrap();
        assert!((c.odd_measure() - 0.4).abs() < 1e-15);
        let a = SourceSet::new(&r, &[Point::new(0, 0.4), Point::new(0, 1.0)]).unwrap();
        let c = Colouring::build_with_bits(&r, &a, &[], &[], &[false]).unwrap();
        assert!((c.odd_measure() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn source_outside_region_is_rejected() {
        let r = circle(1, 1.0).subtract(&[Segment { vertex: 0, start: 0.2, len: 0.3 }]).unwrap();
        assert!(matches!(SourceSet::new(&r, &[Point::new(0, 0.3)]), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_sources_cancel() {
        let r = circle(1, 1.0);
        let a = SourceSet::new(&r, &[Point::new(0, 0.3), Point::new(0, 0.3), Point::new(0, 0.5)]).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a.has_ghost());
    }

    #[test]
    fn evaluator_matches_colouring_average() {
        let l = Arc::new(Lattice::chain(2).unwrap());
        let r = Region::full(l, TimeDomain::circle(1.3).unwrap())
            .subtract(&[Segment { vertex: 1, start: 0.9, len: 0.2 }])
            .unwrap();
        let p = Params::new(1.7, 0.9, 0.8).unwrap();
        let mut rng = Streams::new(8).rng(0);
        let pts = [Point::new(0, 0.25), Point::new(1, 0.5)];
        let a = SourceSet::new(&r, &pts).unwrap();
        let loc = locate_sources(&r, a.points()).unwrap();
        let mut ev = ParityEvaluator::new(&r, &p).unwrap();
        for _ in 0..200 {
            let c = Configuration::sample(&r, &p, false, &mut rng).unwrap();
            ev.load(&c).unwrap();
            let w0 = Colouring::build_with_bits(&r, &a, &c.bridges, &c.ghosts, &[false, false]).unwrap();
            let w1 = Colouring::build_with_bits(&r, &a, &c.bridges, &c.ghosts, &[true, false]).unwrap();
            let avg = 0.5 * (w0.normalized_weight(p.delta) + w1.normalized_weight(p.delta));
            assert!((ev.weight(&loc) - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn single_vertex_magnetization_matches_oracle() {
        let r = circle(1, 1.0);
        let p = Params::new(0.0, 1.0, 0.6).unwrap();
        let a = SourceSet::new(&r, &[Point::new(0, 0.0)]).unwrap();
        let est = estimate_correlation(&r, &a, &p, 200_000, &Streams::new(1), 1).unwrap();
        let exact = DenseHamiltonian::new(r.lattice(), &p).unwrap().magnetization(1.0, 0).unwrap();
        assert!(est.estimate.z_against(exact).abs() < 4.0, "{:?} vs {exact}", est.estimate);
    }

    #[test]
    fn two_point_matches_oracle_on_triangle() {
        let l = Arc::new(Lattice::cubic(1, 1, Boundary::Periodic).unwrap());
        let r = Region::full(l.clone(), TimeDomain::circle(1.2).unwrap());
        let p = Params::new(1.4, 1.1, 0.3).unwrap();
        let a = SourceSet::new(&r, &[Point::new(0, 0.1), Point::new(2, 0.9)]).unwrap();
        let est = estimate_correlation(&r, &a, &p, 200_000, &Streams::new(2), 1).unwrap();
        let exact = DenseHamiltonian::new(&l, &p).unwrap().time_displaced_correlation(1.2, 0, 0.1, 2, 0.9).unwrap();
        assert!(est.estimate.z_against(exact).abs() < 4.0, "{:?} vs {exact}", est.estimate);
    }

    #[test]
    fn odd_source_set_without_field_is_exactly_zero() {
        let r = circle(2, 1.0);
        let p = Params::new(1.0, 1.0, 0.0).unwrap();
        let a = SourceSet::new(&r, &[Point::new(0, 0.5)]).unwrap();
        let est = estimate_correlation(&r, &a, &p, 10, &Streams::new(3), 1).unwrap();
        assert_eq!(est.estimate.value, 0.0);
        assert_eq!(est.estimate.std_error, 0.0);
    }

    #[test]
    fn partition_identity_on_cut_region() {
        let l = Arc::new(Lattice::chain(2).unwrap());
        let r = Region::full(l, TimeDomain::circle(1.0).unwrap())
            .subtract(&[Segment { vertex: 0, start: 0.3, len: 0.25 }])
            .unwrap();
        let p = Params::new(1.2, 0.8, 0.5).unwrap();
        let chk = verify_partition_identity(&r, &p, 200_000, &Streams::new(4), 1).unwrap();
        assert!(chk.z.abs() < 4.0, "{chk:?}");
    }

    fn arb_config() -> impl Strategy<Value = (u64, f64, f64, f64)> {
        (0u64..10_000, 0.2f64..3.0, 0.0f64..2.0, 0.5f64..2.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn colouring_structure((seed, lambda, gamma, beta) in arb_config()) {
            let l = Arc::new(Lattice::cubic(1, 1, Boundary::Periodic).unwrap());
            let r = Region::full(l, TimeDomain::circle(beta).unwrap());
            let p = Params::new(lambda, 1.0, gamma).unwrap();
            let mut rng = Streams::new(seed).rng(0);
            let c = Configuration::sample(&r, &p, false, &mut rng).unwrap();
            let a = SourceSet::new(&r, &[Point::new(0, 0.31 * beta), Point::new(1, 0.77 * beta)]).unwrap();
            let col = Colouring::build(&r, &a, &c.bridges, &c.ghosts, &mut rng).unwrap();
            let expect_valid = col.spans().iter().all(|s| s.marks.len() % 2 == 0);
            prop_assert_eq!(col.is_valid(), expect_valid);
            if col.is_valid() {
                // labels alternate across every switching point
                for sc in col.spans() {
                    let segs: Vec<_> = sc.segments().collect();
                    for w in segs.windows(2) {
                        prop_assert!(w[0].2 != w[1].2);
                    }
                    prop_assert_eq!(segs.first().unwrap().2, segs.last().unwrap().2);
                }
                prop_assert!((col.odd_measure() + col.even_measure() - r.measure()).abs() < 1e-12);
                let (bridges, ghosts) = col.reconstruct().unwrap();
                let mut want: Vec<(usize, usize, f64)> = c.bridges.iter().map(|b| (b.u, b.v, b.time)).collect();
                want.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
                prop_assert_eq!(bridges, want);
                prop_assert_eq!(ghosts, c.ghosts.clone());
            }
        }
    }
}
