//! Backbone extraction and backbone weights.
//!
//! Starting from the least source in point order, follow the odd side of the
//! colouring, crossing bridges, until a source or a ghost-bond is reached. Remove
//! both ends from the pending sources and repeat. What remains of the odd set after
//! all paths are removed is a union of cycles (possibly closing through the ghost).

use serde::{Deserialize, Serialize};

use crate::domain::{point_order, Configuration, Params, Point, Region, Segment, TIME_TOL};
use crate::error::{ensure, Error, Result};
use crate::oracle;
use crate::parity::{Colouring, CorrelationEstimate, MarkKind, ParityEvaluator, SourceSet};
use crate::rng::Streams;
use crate::stats::{run_blocks, Estimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// A closed stretch of one line traversed by a path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub vertex: usize,
    pub from: f64,
    pub len: f64,
    pub dir: Direction,
}

impl Piece {
    pub fn to(&self, beta: f64) -> f64 {
        match self.dir {
            Direction::Up => wrap(self.from + self.len, beta),
            Direction::Down => wrap(self.from - self.len, beta),
        }
    }

    /// The covered closed arc, started at its lower end.
    pub fn segment(&self, beta: f64) -> Segment {
        let start = match self.dir {
            Direction::Up => self.from,
            Direction::Down => wrap(self.from - self.len, beta),
        };
        Segment { vertex: self.vertex, start, len: self.len }
    }

    /// Distance from `from` to time `t` along the direction of travel.
    fn distance_to(&self, t: f64, beta: f64) -> f64 {
        let d = match self.dir {
            Direction::Up => t - self.from,
            Direction::Down => self.from - t,
        };
        let d = d.rem_euclid(beta);
        if (beta - d) <= TIME_TOL * beta.max(1.0) {
            0.0
        } else {
            d
        }
    }
}

fn wrap(t: f64, beta: f64) -> f64 {
    let w = t.rem_euclid(beta);
    if w >= beta {
        0.0
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathEnd {
    /// Ends at a source point.
    Point { at: Point },
    /// Ends at a ghost-bond located at `at`, i.e. at the ghost vertex.
    Ghost { at: Point },
}

/// One path of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackbonePath {
    pub start: Point,
    pub end: PathEnd,
    pub pieces: Vec<Piece>,
}

impl BackbonePath {
    pub fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.len).sum()
    }

    pub fn ends_at_ghost(&self) -> bool {
        matches!(self.end, PathEnd::Ghost { .. })
    }
}

/// An ordered family of disjoint paths, serializable as `{"format": 1, "paths": [...]}`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Backbone {
    pub format: u32,
    pub paths: Vec<BackbonePath>,
}

impl Backbone {
    pub fn new(paths: Vec<BackbonePath>) -> Self {
        Self { format: 1, paths }
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.paths.iter().map(BackbonePath::length).sum()
    }

    pub fn segments(&self, beta: f64) -> Vec<Segment> {
        self.paths.iter().flat_map(|p| p.pieces.iter().map(|q| q.segment(beta))).collect()
    }

    /// K minus the closed backbone.
    pub fn complement(&self, region: &Region) -> Result<Region> {
        region.subtract(&self.segments(region.beta()))
    }

    /// Endpoint pattern, e.g. `0-1` or `0-G 1-G`, indexing sources by position in `sources`.
    pub fn pattern(&self, sources: &SourceSet) -> String {
        let idx = |p: &Point| {
            sources
                .points()
                .iter()
                .position(|a| a == p)
                .map_or_else(|| "?".to_string(), |i| i.to_string())
        };
        self.paths
            .iter()
            .map(|p| {
                let e = match &p.end {
                    PathEnd::Point { at } => idx(at),
                    PathEnd::Ghost { .. } => "G".to_string(),
                };
                format!("{}-{}", idx(&p.start), e)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        ensure!(b.format == 1, Parameter, "unsupported backbone format {}", b.format);
        Ok(b)
    }
}

fn find_mark(col: &Colouring, vertex: usize, pred: impl Fn(&MarkKind, f64) -> bool) -> Option<(usize, usize)> {
    let region = col.region();
    for id in region.span_ids(vertex) {
        if let Some(k) = col.spans()[id].marks.iter().position(|m| pred(&m.kind, m.time)) {
            return Some((id, k));
        }
    }
    None
}

/// Extract the backbone of a valid colouring. The failure symbol has the empty backbone.
pub fn extract_backbone(col: &Colouring) -> Result<Backbone> {
    if !col.is_valid() {
        return Ok(Backbone::new(Vec::new()));
    }
    let beta = col.region().beta();
    let mut pending: Vec<Point> = col.sources().points().to_vec();
    pending.sort_by(point_order);
    let total_marks: usize = col.spans().iter().map(|s| s.marks.len()).sum();
    let mut paths = Vec::new();
    while !pending.is_empty() {
        let a = pending.remove(0);
        let (mut id, mut k) = find_mark(col, a.vertex, |kind, t| *kind == MarkKind::Source && t == a.time)
            .ok_or_else(|| Error::Invariant(format!("source {a:?} has no mark")))?;
        let mut pieces = Vec::new();
        let mut guard = 0;
        let end = loop {
            guard += 1;
            ensure!(guard <= total_marks + 1, Invariant, "backbone walk does not terminate");
            let sc = &col.spans()[id];
            let n = sc.marks.len();
            let up = sc.segment_odd(k + 1);
            ensure!(up != sc.segment_odd(k), Invariant, "no unique odd side at a switching point");
            let next = if up {
                if sc.span.full { (k + 1) % n } else { k + 1 }
            } else if sc.span.full {
                (k + n - 1) % n
            } else {
                ensure!(k > 0, Invariant, "odd side runs off an interval");
                k - 1
            };
            ensure!(next < n, Invariant, "odd side runs off an interval");
            let (o0, o1) = (sc.marks[k].offset, sc.marks[next].offset);
            let len = if up { o1 - o0 } else { o0 - o1 };
            let len = if sc.span.full && len <= 0.0 { len + beta } else { len };
            pieces.push(Piece {
                vertex: sc.vertex,
                from: wrap(sc.marks[k].time, beta),
                len,
                dir: if up { Direction::Up } else { Direction::Down },
            });
            let m = sc.marks[next];
            match m.kind {
                MarkKind::Source => break PathEnd::Point { at: Point::new(sc.vertex, m.time) },
                MarkKind::Ghost(_) => break PathEnd::Ghost { at: Point::new(sc.vertex, m.time) },
                MarkKind::Bridge(b) => {
                    let br = col.bridges()[b];
                    let w = if br.u == sc.vertex { br.v } else { br.u };
                    let (nid, nk) = find_mark(col, w, |kind, _| *kind == MarkKind::Bridge(b))
                        .ok_or_else(|| Error::Invariant("bridge with one end".into()))?;
                    id = nid;
                    k = nk;
                }
            }
        };
        if let PathEnd::Point { at } = &end {
            let pos = pending
                .iter()
                .position(|p| p == at)
                .ok_or_else(|| Error::Invariant("path ends at a source already used".into()))?;
            pending.remove(pos);
        }
        paths.push(BackbonePath { start: a, end, pieces });
    }
    Ok(Backbone::new(paths))
}

/// Check that, once the backbone is removed, every switching point has its odd
/// sides either all removed or all kept, with sources fully removed. Then the rest
/// of the odd set consists of cycles, closed through the ghost where they meet G.
pub fn leftover_is_cycles(col: &Colouring, backbone: &Backbone) -> Result<bool> {
    if !col.is_valid() {
        return Ok(true);
    }
    let beta = col.region().beta();
    let tol = 1e-9 * beta.max(1.0);
    let segs = backbone.segments(beta);
    let covered = |vertex: usize, span: &crate::domain::Span, a: f64, b: f64| {
        let mid = span.time_at(0.5 * (a + b), beta);
        let mid = wrap(mid, beta);
        segs.iter().any(|s| {
            s.vertex == vertex && {
                let d = (mid - s.start).rem_euclid(beta);
                d > 0.0 && d < s.len
            }
        }) || (b - a) <= tol
    };
    let mut bridge_state: std::collections::HashMap<usize, bool> = std::collections::HashMap::new();
    for sc in col.spans() {
        let segs_here: Vec<(f64, f64, bool)> = sc.segments().collect();
        let n = sc.marks.len();
        for (k, m) in sc.marks.iter().enumerate() {
            let (before, after) = if sc.span.full && k == 0 {
                (segs_here[n], segs_here[1])
            } else {
                (segs_here[k], segs_here[k + 1])
            };
            let odd = if before.2 { before } else { after };
            let removed = covered(sc.vertex, &sc.span, odd.0, odd.1);
            match m.kind {
                MarkKind::Source => {
                    if !removed {
                        return Ok(false);
                    }
                }
                MarkKind::Bridge(b) => {
                    if let Some(prev) = bridge_state.insert(b, removed) {
                        if prev != removed {
                            return Ok(false);
                        }
                    }
                }
                MarkKind::Ghost(_) => {}
            }
        }
    }
    Ok(true)
}

/// Whether A ~ nu: the endpoints of nu are exactly A (plus ghost ends), paths start
/// at the least pending source, and the moves used have positive intensity.
pub fn is_compatible(sources: &SourceSet, backbone: &Backbone, params: &Params) -> bool {
    let mut pending: Vec<Point> = sources.points().to_vec();
    pending.sort_by(point_order);
    for path in &backbone.paths {
        if pending.first() != Some(&path.start) {
            return false;
        }
        pending.remove(0);
        match &path.end {
            PathEnd::Point { at } => match pending.iter().position(|p| p == at) {
                Some(i) => {
                    pending.remove(i);
                }
                None => return false,
            },
            PathEnd::Ghost { .. } => {
                if params.gamma == 0.0 {
                    return false;
                }
            }
        }
        if path.pieces.len() > 1 && params.lambda == 0.0 {
            return false;
        }
    }
    pending.is_empty()
}

/// Exact w^A(nu) = Z_{K minus nu} / Z_K from the region oracle.
pub fn backbone_weight_exact(region: &Region, backbone: &Backbone, sources: &SourceSet, params: &Params) -> Result<f64> {
    if !is_compatible(sources, backbone, params) {
        return Ok(0.0);
    }
    let rest = backbone.complement(region)?;
    Ok((oracle::region_log_z(&rest, params)? - oracle::region_log_z(region, params)?).exp())
}

/// Monte Carlo w^A(nu): two independent estimates of Z on K minus nu and on K.
pub fn backbone_weight(
    region: &Region,
    backbone: &Backbone,
    sources: &SourceSet,
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<Estimate> {
    params.validate()?;
    if !is_compatible(sources, backbone, params) {
        return Ok(Estimate::exact(0.0));
    }
    if backbone.is_empty() || (params.lambda == 0.0 && params.gamma == 0.0 && params.delta == 0.0) {
        return Ok(Estimate::exact(1.0));
    }
    let rest = backbone.complement(region)?;
    let zr = mean_normalized_weight(&rest, params, samples, &streams.child(1), workers)?;
    let zk = mean_normalized_weight(region, params, samples, &streams.child(2), workers)?;
    // Z_R = exp(2 delta |R|) * E(exp(-2 delta |odd|)); |K| - |R| = |nu|.
    let scale = (-2.0 * params.delta * backbone.length()).exp();
    let value = scale * zr.value / zk.value;
    let rel = (zr.std_error / zr.value).hypot(zk.std_error / zk.value);
    Ok(Estimate::new(value, value * rel, samples))
}

/// Mean normalized weight of psi^empty on a region.
pub fn mean_normalized_weight(region: &Region, params: &Params, samples: u64, streams: &Streams, workers: usize) -> Result<Estimate> {
    let sums = run_blocks(samples, 1, streams, workers, |rng, n, s| {
        let mut ev = ParityEvaluator::new(region, params)?;
        for _ in 0..n {
            ev.sample(rng);
            s[0] += ev.weight(&[]);
        }
        Ok(())
    })?;
    Ok(sums.jackknife(|m| m[0]))
}

/// Split a backbone at a point x on one of its paths: the first part runs up to
/// x (which becomes a source endpoint), the second restarts at x.
pub fn cut_backbone(backbone: &Backbone, x: &Point, beta: f64) -> Result<(Backbone, Backbone)> {
    let tol = 1e-12 * beta.max(1.0);
    for (i, path) in backbone.paths.iter().enumerate() {
        for (k, piece) in path.pieces.iter().enumerate() {
            if piece.vertex != x.vertex {
                continue;
            }
            let d = piece.distance_to(x.time, beta);
            if d > piece.len + tol {
                continue;
            }
            let d = d.min(piece.len);
            let at_start = k == 0 && d <= tol;
            let at_end = k + 1 == path.pieces.len() && (piece.len - d) <= tol;
            ensure!(!(at_start || at_end), Consistency, "cut point is a path endpoint");
            let mut first: Vec<Piece> = path.pieces[..k].to_vec();
            first.push(Piece { len: d, ..*piece });
            let mut second = vec![Piece { from: x.time, len: piece.len - d, ..*piece }];
            second.extend_from_slice(&path.pieces[k + 1..]);
            let mut p1: Vec<BackbonePath> = backbone.paths[..i].to_vec();
            p1.push(BackbonePath { start: path.start, end: PathEnd::Point { at: *x }, pieces: first });
            let mut p2 = vec![BackbonePath { start: *x, end: path.end, pieces: second }];
            p2.extend_from_slice(&backbone.paths[i + 1..]);
            return Ok((Backbone::new(p1), Backbone::new(p2)));
        }
    }
    Err(Error::Consistency(format!("{x:?} does not lie on the backbone")))
}

/// Join a split backbone back together (inverse of [`cut_backbone`]).
pub fn concat_backbones(first: &Backbone, second: &Backbone) -> Result<Backbone> {
    let mut paths = first.paths.clone();
    let mut rest = second.paths.clone();
    ensure!(!paths.is_empty() && !rest.is_empty(), Consistency, "both parts must be non-empty");
    let head = rest.remove(0);
    let last = paths.last_mut().expect("non-empty");
    ensure!(
        matches!(last.end, PathEnd::Point { at } if at == head.start),
        Consistency,
        "parts do not meet at the cut point"
    );
    let mut pieces = head.pieces.into_iter();
    if let (Some(a), Some(b)) = (last.pieces.last_mut(), pieces.next()) {
        if a.vertex == b.vertex && a.dir == b.dir {
            a.len += b.len;
        } else {
            last.pieces.push(b);
        }
    }
    last.pieces.extend(pieces);
    last.end = head.end;
    paths.extend(rest);
    Ok(Backbone::new(paths))
}

/// Whether two backbones agree segment-wise up to `tol`.
pub fn backbones_match(a: &Backbone, b: &Backbone, tol: f64) -> bool {
    a.paths.len() == b.paths.len()
        && a.paths.iter().zip(&b.paths).all(|(p, q)| {
            p.start == q.start
                && p.end == q.end
                && p.pieces.len() == q.pieces.len()
                && p.pieces.iter().zip(&q.pieces).all(|(x, y)| {
                    x.vertex == y.vertex && x.dir == y.dir && (x.from - y.from).abs() <= tol && (x.len - y.len).abs() <= tol
                })
        })
}

/// How the inner weight Z_{K minus xi} / Z_K is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerWeights {
    /// Nested Monte Carlo with about sqrt(outer) inner samples.
    Sampled,
    /// Exact, from the region oracle.
    Exact,
}

#[derive(Clone, Debug, Serialize)]
pub struct PatternShare {
    pub pattern: String,
    pub contribution: Estimate,
}

/// Mean of d psi^empty on a region conditioned on psi^empty being valid, by
/// rejection: each sample is the first valid draw.
pub fn conditional_mean_weight<R: rand::Rng + ?Sized>(region: &Region, params: &Params, samples: u64, rng: &mut R) -> Result<Estimate> {
    let mut ev = ParityEvaluator::new(region, params)?;
    let mut xs = Vec::with_capacity(samples as usize);
    for _ in 0..samples {
        let mut tries = 0u64;
        let w = loop {
            ev.sample(rng);
            let w = ev.weight(&[]);
            if w > 0.0 {
                break w;
            }
            tries += 1;
            ensure!(tries < 1_000_000, Capability, "sourceless colourings are almost never valid on this region");
        };
        xs.push(w);
    }
    Ok(crate::stats::mean_se(&xs))
}

/// Comparison of the backbone side with the direct parity estimate and the exact value.
///
/// `literal` is E(w^A(xi)) with xi drawn under the product measure. Given xi = nu the
/// configuration off nu is conditioned to give a valid sourceless colouring of
/// K minus nu, so E(d psi^A | xi) = Z_{K minus xi} / P_{K minus xi}(valid), and
/// `backbone_side` is E(w^A(xi) / P_{K minus xi}(valid)). The two agree when nothing
/// can fail off the backbone (no bridges and no ghost-bonds).
#[derive(Clone, Debug, Serialize)]
pub struct BackboneCheck {
    pub backbone_side: Estimate,
    pub literal: Estimate,
    pub direct: CorrelationEstimate,
    pub exact: f64,
    pub z_direct: f64,
    pub z_exact: f64,
    pub z_literal: f64,
    pub patterns: Vec<PatternShare>,
}

/// Largest region (number of active vertices) accepted by the nested check.
pub const MAX_BACKBONE_CHECK_VERTICES: usize = 3;

pub fn verify_backbone_representation(
    region: &Region,
    sources: &SourceSet,
    params: &Params,
    outer: u64,
    inner: InnerWeights,
    streams: &Streams,
    workers: usize,
) -> Result<BackboneCheck> {
    params.validate()?;
    ensure!(
        region.active_vertices().len() <= MAX_BACKBONE_CHECK_VERTICES,
        Capability,
        "nested backbone check is limited to {MAX_BACKBONE_CHECK_VERTICES} vertices"
    );
    ensure!(outer > 0, Parameter, "outer sample count must be positive");
    let exact = oracle::region_correlation(region, sources.points(), params)?;
    let log_zk = oracle::region_log_z(region, params)?;
    // With delta = 0 every valid colouring weighs 1, so Z_R is the validity probability.
    let no_deaths = Params { delta: 0.0, ..*params };
    let inner_n = ((outer as f64).sqrt().ceil() as u64).max(10);
    let zk_sampled = mean_normalized_weight(region, params, outer.max(1000), &streams.child(10), workers)?;
    // (pattern, literal weight, corrected weight)
    let mut values: Vec<(String, f64, f64)> = Vec::with_capacity(outer as usize);
    let mut seen: Vec<String> = Vec::new();
    let mut rng = streams.child(11).rng(0);
    for i in 0..outer {
        let c = Configuration::sample(region, params, false, &mut rng)?;
        let col = Colouring::build(region, sources, &c.bridges, &c.ghosts, &mut rng)?;
        if !col.is_valid() {
            values.push((String::new(), 0.0, 0.0));
            continue;
        }
        let xi = extract_backbone(&col)?;
        let rest = xi.complement(region)?;
        let (w, corrected) = match inner {
            InnerWeights::Exact => {
                let log_zr = oracle::region_log_z(&rest, params)?;
                let log_valid = oracle::region_log_z(&rest, &no_deaths)?;
                ((log_zr - log_zk).exp(), (log_zr - log_valid - log_zk).exp())
            }
            InnerWeights::Sampled => {
                let scale = (-2.0 * params.delta * xi.length()).exp() / zk_sampled.value;
                let st = streams.child(1000 + i);
                let zr = mean_normalized_weight(&rest, params, inner_n, &st, 1)?;
                let cond = conditional_mean_weight(&rest, params, inner_n, &mut st.child(1).rng(0))?;
                (scale * zr.value, scale * cond.value)
            }
        };
        let pat = xi.pattern(sources);
        if !seen.contains(&pat) {
            seen.push(pat.clone());
        }
        values.push((pat, w, corrected));
    }
    let spread = |mut e: Estimate| {
        if inner == InnerWeights::Sampled {
            let rel = zk_sampled.std_error / zk_sampled.value;
            e.std_error = e.std_error.hypot(e.value * rel);
        }
        e
    };
    let literal = spread(crate::stats::mean_se(&values.iter().map(|v| v.1).collect::<Vec<_>>()));
    let backbone_side = spread(crate::stats::mean_se(&values.iter().map(|v| v.2).collect::<Vec<_>>()));
    let mut patterns = Vec::new();
    for pat in seen {
        let xs: Vec<f64> = values.iter().map(|v| if v.0 == pat { v.2 } else { 0.0 }).collect();
        patterns.push(PatternShare { pattern: pat, contribution: crate::stats::mean_se(&xs) });
    }
    patterns.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    let direct = crate::parity::estimate_correlation(region, sources, params, outer.max(1000) * 10, &streams.child(12), workers)?;
    Ok(BackboneCheck {
        z_direct: backbone_side.z_between(&direct.estimate),
        z_exact: backbone_side.z_against(exact),
        z_literal: literal.z_against(exact),
        backbone_side,
        literal,
        direct,
        exact,
        patterns,
    })
}
