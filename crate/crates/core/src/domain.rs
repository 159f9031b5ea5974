//! Lattice, time domain, regions of space-time and Poisson configurations.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Relative tolerance used when snapping times onto interval endpoints.
pub const TIME_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Circle,
    Interval,
}

/// Model parameters. `lambda` is the coupling in H = -(lambda/2) sum s3 s3 - delta sum s1 - gamma sum s3,
/// so the bond rate of the random-parity layer is `lambda / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl Params {
    pub fn new(lambda: f64, delta: f64, gamma: f64) -> Result<Self> {
        let p = Self { lambda, delta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("delta", self.delta), ("gamma", self.gamma)] {
            ensure!(v.is_finite() && v >= 0.0, Parameter, "{name} must be finite and non-negative, got {v}");
        }
        Ok(())
    }

    /// Rate of bridges on each edge line.
    pub fn bridge_rate(&self) -> f64 {
        0.5 * self.lambda
    }

    pub fn rho(&self) -> f64 {
        self.lambda / self.delta
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }
}

/// A box [-n, n]^d, or a free chain of arbitrary length. Vertices are indexed row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    dim: usize,
    side: usize,
    lo: i64,
    boundary: Boundary,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Lattice {
    pub fn cubic(dim: usize, n: usize, boundary: Boundary) -> Result<Self> {
        ensure!(dim >= 1, Parameter, "dimension must be at least 1");
        ensure!(
            !(boundary == Boundary::Periodic && n == 0),
            Parameter,
            "a periodic box needs n >= 1"
        );
        let side = 2 * n + 1;
        ensure!(side.checked_pow(dim as u32).is_some_and(|c| c <= 1 << 24), Capability, "lattice too large");
        Ok(Self::build(dim, side, -(n as i64), boundary))
    }

    /// A free path of `len` vertices with coordinates 0..len.
    pub fn chain(len: usize) -> Result<Self> {
        ensure!(len >= 1, Parameter, "a chain needs at least one vertex");
        Ok(Self::build(1, len, 0, Boundary::Free))
    }

    fn build(dim: usize, side: usize, lo: i64, boundary: Boundary) -> Self {
        let count = side.pow(dim as u32);
        let mut edges = Vec::new();
        for v in 0..count {
            for axis in 0..dim {
                let stride = side.pow((dim - 1 - axis) as u32);
                let c = (v / stride) % side;
                let w = if c + 1 < side {
                    v + stride
                } else if boundary == Boundary::Periodic && side > 2 {
                    v - c * stride
                } else {
                    continue;
                };
                edges.push((v.min(w), v.max(w)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); count];
        for (e, &(u, v)) in edges.iter().enumerate() {
            adjacency[u].push((v, e));
            adjacency[v].push((u, e));
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Self { dim, side, lo, boundary, edges, adjacency }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbours of `v` as `(neighbour, edge index)`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn edge_between(&self, u: usize, v: usize) -> Option<usize> {
        self.adjacency[u].iter().find(|&&(w, _)| w == v).map(|&(_, e)| e)
    }

    pub fn coords(&self, v: usize) -> Vec<i64> {
        (0..self.dim)
            .map(|axis| {
                let stride = self.side.pow((self.dim - 1 - axis) as u32);
                ((v / stride) % self.side) as i64 + self.lo
            })
            .collect()
    }

    pub fn index(&self, coords: &[i64]) -> Option<usize> {
        if coords.len() != self.dim {
            return None;
        }
        let mut v = 0;
        for &c in coords {
            let k = c - self.lo;
            if k < 0 || k >= self.side as i64 {
                return None;
            }
            v = v * self.side + k as usize;
        }
        Some(v)
    }

    /// The vertex with all coordinates zero (the first vertex of a chain).
    pub fn origin(&self) -> usize {
        self.index(&vec![0; self.dim]).unwrap_or(0)
    }

    /// Translate `v` by `shift` along `axis`, wrapping on periodic boxes.
    pub fn translate(&self, v: usize, axis: usize, shift: i64) -> Option<usize> {
        let mut c = self.coords(v);
        let side = self.side as i64;
        let k = c[axis] - self.lo + shift;
        c[axis] = match self.boundary {
            Boundary::Periodic => k.rem_euclid(side) + self.lo,
            Boundary::Free if (0..side).contains(&k) => k + self.lo,
            Boundary::Free => return None,
        };
        self.index(&c)
    }

    /// Graph distance along `axis` for two vertices that differ only along it.
    pub fn axis_distance(&self, a: usize, b: usize, axis: usize) -> i64 {
        let d = (self.coords(a)[axis] - self.coords(b)[axis]).abs();
        match self.boundary {
            Boundary::Periodic => d.min(self.side as i64 - d),
            Boundary::Free => d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeDomain {
    pub beta: f64,
    pub topology: Topology,
}

impl TimeDomain {
    pub fn new(beta: f64, topology: Topology) -> Result<Self> {
        ensure!(beta.is_finite() && beta > 0.0, Parameter, "beta must be positive, got {beta}");
        Ok(Self { beta, topology })
    }

    pub fn circle(beta: f64) -> Result<Self> {
        Self::new(beta, Topology::Circle)
    }
}

/// A point of space-time. Times lie in [0, beta]; the value beta only ever names
/// the upper closure point of an interval ending at beta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub vertex: usize,
    pub time: f64,
}

impl Point {
    pub fn new(vertex: usize, time: f64) -> Self {
        Self { vertex, time }
    }
}

/// The canonical total order: by vertex index, then by time.
pub fn point_order(a: &Point, b: &Point) -> Ordering {
    a.vertex.cmp(&b.vertex).then(a.time.total_cmp(&b.time))
}

/// A point of space-time or the ghost vertex, which sorts last.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Site {
    At(Point),
    Ghost,
}

impl Site {
    pub fn point(&self) -> Option<Point> {
        match self {
            Site::At(p) => Some(*p),
            Site::Ghost => None,
        }
    }
}

pub fn site_order(a: &Site, b: &Site) -> Ordering {
    match (a, b) {
        (Site::At(p), Site::At(q)) => point_order(p, q),
        (Site::At(_), Site::Ghost) => Ordering::Less,
        (Site::Ghost, Site::At(_)) => Ordering::Greater,
        (Site::Ghost, Site::Ghost) => Ordering::Equal,
    }
}

/// A maximal interval of one line. `full` marks the whole circle; otherwise the
/// interval runs from `start` for `len` (wrapping past beta) and its closure adds both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub start: f64,
    pub len: f64,
    pub full: bool,
}

impl Span {
    /// Non-wrapping pieces `[a, b)` of [0, beta) covered by the span.
    pub fn pieces(&self, beta: f64) -> Vec<(f64, f64)> {
        let end = self.start + self.len;
        if self.full {
            vec![(0.0, beta)]
        } else if end <= beta {
            vec![(self.start, end)]
        } else {
            vec![(self.start, beta), (0.0, end - beta)]
        }
    }

    /// Offset of time `t` from the start, if `t` lies in the closure.
    pub fn offset_of(&self, t: f64, beta: f64) -> Option<f64> {
        let tol = TIME_TOL * beta.max(1.0);
        if self.full {
            let t = if t >= beta { t - beta } else { t };
            return (t >= 0.0 && t < beta).then_some(t);
        }
        let mut off = if t >= self.start { t - self.start } else { t - self.start + beta };
        if off > self.len {
            if (off - self.len).abs() <= tol {
                off = self.len;
            } else if beta - off <= tol {
                off = 0.0;
            } else {
                return None;
            }
        }
        Some(off)
    }

    pub fn time_at(&self, offset: f64, beta: f64) -> f64 {
        let t = self.start + offset;
        if t > beta {
            t - beta
        } else {
            t
        }
    }
}

/// A location inside a region: global span id plus offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loc {
    pub span: usize,
    pub offset: f64,
}

/// A closed arc `[start, start + len]` (mod beta) on one line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub vertex: usize,
    pub start: f64,
    pub len: f64,
}

/// A finite union of intervals on each line of the lattice.
#[derive(Clone, Debug)]
pub struct Region {
    lattice: Arc<Lattice>,
    beta: f64,
    lines: Vec<Vec<Span>>,
    first_span: Vec<usize>,
    span_vertex: Vec<usize>,
    edge_pieces: Vec<Vec<(f64, f64)>>,
    intervals: usize,
}

impl Region {
    /// The whole of L x S for the given time domain.
    pub fn full(lattice: Arc<Lattice>, time: TimeDomain) -> Self {
        let beta = time.beta;
        let line = match time.topology {
            Topology::Circle => vec![Span { start: 0.0, len: beta, full: true }],
            Topology::Interval => vec![Span { start: 0.0, len: beta, full: false }],
        };
        let lines = vec![line; lattice.vertex_count()];
        Self::assemble(lattice, beta, lines)
    }

    /// A region from explicit spans, one list per vertex.
    pub fn from_spans(lattice: Arc<Lattice>, beta: f64, lines: Vec<Vec<Span>>) -> Result<Self> {
        ensure!(beta.is_finite() && beta > 0.0, Parameter, "beta must be positive");
        ensure!(lines.len() == lattice.vertex_count(), Consistency, "one span list per vertex required");
        let mut lines = lines;
        for (v, line) in lines.iter_mut().enumerate() {
            for s in line.iter_mut() {
                if s.full {
                    *s = Span { start: 0.0, len: beta, full: true };
                }
                ensure!(
                    s.start >= 0.0 && s.start < beta && s.len > 0.0 && s.len <= beta,
                    Parameter,
                    "vertex {v}: bad interval start {} length {}",
                    s.start,
                    s.len
                );
            }
            ensure!(
                !line.iter().any(|s| s.full) || line.len() == 1,
                Consistency,
                "vertex {v}: a full circle cannot share its line"
            );
            line.sort_by(|a, b| a.start.total_cmp(&b.start));
            let total: f64 = line.iter().map(|s| s.len).sum();
            ensure!(total <= beta * (1.0 + TIME_TOL), Consistency, "vertex {v}: intervals overlap");
            for i in 0..line.len() {
                let a = line[i];
                let b = line[(i + 1) % line.len()];
                if line.len() > 1 {
                    let gap = (b.start - a.start).rem_euclid(beta);
                    let gap = if gap == 0.0 { beta } else { gap };
                    ensure!(a.len <= gap * (1.0 + TIME_TOL), Consistency, "vertex {v}: intervals overlap");
                }
            }
        }
        Ok(Self::assemble(lattice, beta, lines))
    }

    fn assemble(lattice: Arc<Lattice>, beta: f64, lines: Vec<Vec<Span>>) -> Self {
        let mut first_span = Vec::with_capacity(lines.len() + 1);
        let mut span_vertex = Vec::new();
        for (v, l) in lines.iter().enumerate() {
            first_span.push(span_vertex.len());
            span_vertex.extend(std::iter::repeat_n(v, l.len()));
        }
        first_span.push(span_vertex.len());
        let intervals = lines.iter().map(Vec::len).sum();
        let mut r = Self { lattice, beta, lines, first_span, span_vertex, edge_pieces: Vec::new(), intervals };
        r.edge_pieces = (0..r.lattice.edges().len()).map(|e| r.compute_edge_pieces(e)).collect();
        r
    }

    fn compute_edge_pieces(&self, e: usize) -> Vec<(f64, f64)> {
        let (u, v) = self.lattice.edges()[e];
        let pu: Vec<(f64, f64)> = self.lines[u].iter().flat_map(|s| s.pieces(self.beta)).collect();
        let pv: Vec<(f64, f64)> = self.lines[v].iter().flat_map(|s| s.pieces(self.beta)).collect();
        let mut out = Vec::new();
        for &(a, b) in &pu {
            for &(c, d) in &pv {
                let lo = a.max(c);
                let hi = b.min(d);
                if hi > lo {
                    out.push((lo, hi));
                }
            }
        }
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn line(&self, v: usize) -> &[Span] {
        &self.lines[v]
    }

    pub fn span_count(&self) -> usize {
        self.span_vertex.len()
    }

    pub fn span(&self, id: usize) -> &Span {
        let v = self.span_vertex[id];
        &self.lines[v][id - self.first_span[v]]
    }

    pub fn span_vertex(&self, id: usize) -> usize {
        self.span_vertex[id]
    }

    /// Global ids of the spans on line `v`.
    pub fn span_ids(&self, v: usize) -> std::ops::Range<usize> {
        self.first_span[v]..self.first_span[v + 1]
    }

    /// N(K): number of maximal intervals, full circles counted once.
    pub fn interval_count(&self) -> usize {
        self.intervals
    }

    /// Recount N(K) from the span lists.
    pub fn recount_intervals(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    /// Vertices whose line is the whole circle.
    pub fn full_vertices(&self) -> Vec<usize> {
        (0..self.lines.len()).filter(|&v| self.lines[v].first().is_some_and(|s| s.full)).collect()
    }

    /// Vertices with a non-empty line.
    pub fn active_vertices(&self) -> Vec<usize> {
        (0..self.lines.len()).filter(|&v| !self.lines[v].is_empty()).collect()
    }

    /// Lebesgue measure |K|.
    pub fn measure(&self) -> f64 {
        self.lines.iter().flatten().map(|s| s.len).sum()
    }

    pub fn line_measure(&self, v: usize) -> f64 {
        self.lines[v].iter().map(|s| s.len).sum()
    }

    /// Pieces of K_u intersect K_v for edge `e`, as non-wrapping `[a, b)`.
    pub fn edge_pieces(&self, e: usize) -> &[(f64, f64)] {
        &self.edge_pieces[e]
    }

    /// |F|: total measure of edge overlaps.
    pub fn edge_measure(&self) -> f64 {
        self.edge_pieces.iter().flatten().map(|(a, b)| b - a).sum()
    }

    /// Locate a point in the closure of the region.
    pub fn locate(&self, p: &Point) -> Option<Loc> {
        if p.vertex >= self.lines.len() {
            return None;
        }
        let base = self.first_span[p.vertex];
        self.lines[p.vertex]
            .iter()
            .enumerate()
            .find_map(|(k, s)| s.offset_of(p.time, self.beta).map(|offset| Loc { span: base + k, offset }))
    }

    /// Closure points of `p`'s line: how many spans have `p` as an endpoint.
    pub fn endpoint_multiplicity(&self, p: &Point) -> usize {
        let tol = TIME_TOL * self.beta.max(1.0);
        if p.vertex >= self.lines.len() {
            return 0;
        }
        self.lines[p.vertex]
            .iter()
            .filter(|s| !s.full)
            .map(|s| match s.offset_of(p.time, self.beta) {
                Some(o) if o <= tol || (s.len - o).abs() <= tol => 1,
                _ => 0,
            })
            .sum()
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.locate(p).is_some()
    }

    /// Remove closed arcs. Each arc must lie inside a single interval.
    pub fn subtract(&self, segments: &[Segment]) -> Result<Region> {
        let beta = self.beta;
        let tol = TIME_TOL * beta.max(1.0);
        let mut lines = self.lines.clone();
        let mut intervals = self.intervals;
        for seg in segments {
            ensure!(seg.vertex < lines.len(), Domain, "segment on unknown vertex {}", seg.vertex);
            ensure!(seg.len >= 0.0 && seg.len < beta, Consistency, "segment length {} out of range", seg.len);
            let line = &mut lines[seg.vertex];
            let (k, off) = line
                .iter()
                .enumerate()
                .find_map(|(k, s)| {
                    s.offset_of(seg.start, beta).filter(|o| o + seg.len <= s.len + tol || s.full).map(|o| (k, o))
                })
                .ok_or_else(|| {
                    Error::Consistency(format!(
                        "segment [{}, +{}] on vertex {} is not inside one interval",
                        seg.start, seg.len, seg.vertex
                    ))
                })?;
            let s = line.remove(k);
            intervals -= 1;
            let mut keep = Vec::new();
            if s.full {
                let start = (seg.start + seg.len).rem_euclid(beta);
                keep.push(Span { start, len: beta - seg.len, full: false });
            } else {
                if off > tol {
                    keep.push(Span { start: s.start, len: off, full: false });
                }
                let right = s.len - off - seg.len;
                if right > tol {
                    let start = s.time_at(off + seg.len, beta).rem_euclid(beta);
                    keep.push(Span { start, len: right, full: false });
                }
            }
            intervals += keep.len();
            line.extend(keep);
            line.sort_by(|a, b| a.start.total_cmp(&b.start));
        }
        let mut r = Self::assemble(self.lattice.clone(), beta, lines);
        r.intervals = intervals;
        Ok(r)
    }
}

/// A bridge: a Poisson point on the edge line of `edge = {u, v}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub edge: usize,
    pub u: usize,
    pub v: usize,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Vertices,
    Edges,
}

/// A sampled event: `index` is a vertex or an edge depending on the support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub index: usize,
    pub time: f64,
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as usize
}

/// Poisson process of the given intensity on the vertex lines or edge lines of the region.
pub fn sample_events<R: Rng + ?Sized>(region: &Region, intensity: f64, support: Support, rng: &mut R) -> Result<Vec<Event>> {
    ensure!(intensity.is_finite() && intensity >= 0.0, Parameter, "intensity must be non-negative");
    let mut out = Vec::new();
    match support {
        Support::Vertices => push_vertex_events(region, intensity, rng, &mut out),
        Support::Edges => push_edge_events(region, intensity, rng, &mut out),
    }
    out.sort_by(|a, b| a.index.cmp(&b.index).then(a.time.total_cmp(&b.time)));
    Ok(out)
}

fn push_vertex_events<R: Rng + ?Sized>(region: &Region, intensity: f64, rng: &mut R, out: &mut Vec<Event>) {
    let beta = region.beta;
    for (v, line) in region.lines.iter().enumerate() {
        for s in line {
            let k = poisson_count(intensity * s.len, rng);
            for _ in 0..k {
                let t = s.time_at(rng.random::<f64>() * s.len, beta);
                out.push(Event { index: v, time: if t >= beta { t - beta } else { t } });
            }
        }
    }
}

fn push_edge_events<R: Rng + ?Sized>(region: &Region, intensity: f64, rng: &mut R, out: &mut Vec<Event>) {
    for (e, pieces) in region.edge_pieces.iter().enumerate() {
        for &(a, b) in pieces {
            let k = poisson_count(intensity * (b - a), rng);
            for _ in 0..k {
                out.push(Event { index: e, time: a + rng.random::<f64>() * (b - a) });
            }
        }
    }
}

/// Bridges B, deaths D and ghost-bonds G on a region.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Configuration {
    pub bridges: Vec<Bridge>,
    pub deaths: Vec<Point>,
    pub ghosts: Vec<Point>,
}

impl Configuration {
    /// Sample B (rate lambda/2), D (rate delta, only if `with_deaths`) and G (rate gamma).
    pub fn sample<R: Rng + ?Sized>(region: &Region, params: &Params, with_deaths: bool, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let mut c = Self::default();
        c.resample(region, params, with_deaths, rng);
        Ok(c)
    }

    /// In-place resampling that reuses the buffers. Exact time collisions are resampled.
    pub fn resample<R: Rng + ?Sized>(&mut self, region: &Region, params: &Params, with_deaths: bool, rng: &mut R) {
        let mut scratch = Vec::new();
        loop {
            self.bridges.clear();
            self.deaths.clear();
            self.ghosts.clear();
            scratch.clear();
            push_edge_events(region, params.bridge_rate(), rng, &mut scratch);
            let edges = region.lattice.edges();
            self.bridges
                .extend(scratch.iter().map(|ev| Bridge { edge: ev.index, u: edges[ev.index].0, v: edges[ev.index].1, time: ev.time }));
            if with_deaths {
                scratch.clear();
                push_vertex_events(region, params.delta, rng, &mut scratch);
                self.deaths.extend(scratch.iter().map(|ev| Point::new(ev.index, ev.time)));
            }
            scratch.clear();
            push_vertex_events(region, params.gamma, rng, &mut scratch);
            self.ghosts.extend(scratch.iter().map(|ev| Point::new(ev.index, ev.time)));
            if self.times_distinct() {
                break;
            }
        }
        self.bridges.sort_by(|a, b| a.edge.cmp(&b.edge).then(a.time.total_cmp(&b.time)));
        self.deaths.sort_by(point_order);
        self.ghosts.sort_by(point_order);
    }

    fn times_distinct(&self) -> bool {
        let mut t: Vec<f64> = self.bridges.iter().map(|b| b.time).collect();
        t.extend(self.deaths.iter().map(|p| p.time));
        t.extend(self.ghosts.iter().map(|p| p.time));
        t.sort_by(f64::total_cmp);
        t.windows(2).all(|w| w[0] != w[1])
    }
}

// --- JSON documents -----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeDoc {
    pub dim: usize,
    pub side: usize,
    pub lo: i64,
    pub boundary: Boundary,
}

impl LatticeDoc {
    pub fn of(l: &Lattice) -> Self {
        Self { dim: l.dim, side: l.side, lo: l.lo, boundary: l.boundary }
    }

    pub fn build(&self) -> Result<Lattice> {
        if self.lo == 0 && self.dim == 1 && self.boundary == Boundary::Free {
            Lattice::chain(self.side)
        } else {
            ensure!(self.side % 2 == 1 && self.lo == -((self.side / 2) as i64), Parameter, "unsupported lattice shape");
            Lattice::cubic(self.dim, self.side / 2, self.boundary)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineDoc {
    pub vertex: usize,
    #[serde(default)]
    pub full: bool,
    #[serde(default)]
    pub intervals: Vec<[f64; 2]>,
}

/// Serialized region, `{"format": 1, ...}`. Intervals are `[start, length]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionDoc {
    pub format: u32,
    pub lattice: LatticeDoc,
    pub beta: f64,
    pub lines: Vec<LineDoc>,
}

impl RegionDoc {
    pub fn of(r: &Region) -> Self {
        let lines = r
            .lines
            .iter()
            .enumerate()
            .map(|(vertex, line)| LineDoc {
                vertex,
                full: line.first().is_some_and(|s| s.full),
                intervals: line.iter().filter(|s| !s.full).map(|s| [s.start, s.len]).collect(),
            })
            .collect();
        Self { format: 1, lattice: LatticeDoc::of(&r.lattice), beta: r.beta, lines }
    }

    pub fn build(&self) -> Result<Region> {
        ensure!(self.format == 1, Parameter, "unsupported region format {}", self.format);
        let lattice = Arc::new(self.lattice.build()?);
        let mut lines = vec![Vec::new(); lattice.vertex_count()];
        for l in &self.lines {
            ensure!(l.vertex < lines.len(), Domain, "line for unknown vertex {}", l.vertex);
            if l.full {
                lines[l.vertex].push(Span { start: 0.0, len: self.beta, full: true });
            }
            lines[l.vertex].extend(l.intervals.iter().map(|&[start, len]| Span { start, len, full: false }));
        }
        Region::from_spans(lattice, self.beta, lines)
    }
}

/// Serialized configuration, `{"format": 1, ...}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigurationDoc {
    pub format: u32,
    pub bridges: Vec<Bridge>,
    pub deaths: Vec<Point>,
    pub ghosts: Vec<Point>,
}

impl ConfigurationDoc {
    pub fn of(c: &Configuration) -> Self {
        Self { format: 1, bridges: c.bridges.clone(), deaths: c.deaths.clone(), ghosts: c.ghosts.clone() }
    }

    pub fn build(&self) -> Result<Configuration> {
        ensure!(self.format == 1, Parameter, "unsupported configuration format {}", self.format);
        Ok(Configuration { bridges: self.bridges.clone(), deaths: self.deaths.clone(), ghosts: self.ghosts.clone() })
    }
}
