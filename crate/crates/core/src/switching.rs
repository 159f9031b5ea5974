//! Connectivity of colouring pairs and the switching map.
//!
//! For a pair (psi1, psi2) and a cut set Delta (Poisson, rate 4 delta), a path
//! is open when it uses bridges and ghost-bonds of either colouring and never
//! crosses a cut lying on a stretch that is even in both colourings.
//!
//! The index is a multigraph. Nodes: the ghost, every switching point of either
//! colouring, every registered query point, interval ends, and every cut (a
//! blocking cut becomes two unconnected nodes). Edges: the stretches between
//! consecutive nodes on a line ("atoms"), bridges, and ghost-bonds to the ghost.

use rand::Rng;
use serde::Serialize;

use crate::domain::{sample_events, Bridge, Params, Point, Region, Site, Support};
use crate::error::{ensure, Error, Result};
use crate::parity::{Colouring, MarkKind, SourceSet};
use crate::rng::Streams;
use crate::stats::{run_blocks, Estimate};

/// Cuts Delta: a Poisson process of rate 4 delta on K.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CutSet {
    pub points: Vec<Point>,
}

impl CutSet {
    pub fn sample<R: Rng + ?Sized>(region: &Region, delta: f64, rng: &mut R) -> Result<Self> {
        let ev = sample_events(region, 4.0 * delta, Support::Vertices, rng)?;
        Ok(Self { points: ev.into_iter().map(|e| Point::new(e.index, e.time)).collect() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeKind {
    /// A stretch of span `span` from offset `from` of length `len`, with the
    /// labels (odd?) of both colourings.
    Atom { span: usize, from: f64, len: f64, odd: [bool; 2] },
    Bridge { replica: usize, index: usize },
    Ghost { replica: usize, index: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug)]
struct EventNode {
    offset: f64,
    lower: usize,
    upper: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EvKind {
    Mark { replica: usize, kind: MarkKind },
    Cut,
    Query,
}

/// The ghost node.
pub const GHOST: usize = 0;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connectivity structure of (psi1, psi2, Delta).
pub struct ConnectivityIndex<'r> {
    region: &'r Region,
    nodes: usize,
    edges: Vec<Edge>,
    events: Vec<Vec<EventNode>>,
    span_start: Vec<usize>,
    span_end: Vec<usize>,
    root: Vec<usize>,
}

impl<'r> ConnectivityIndex<'r> {
    /// Build the index. `queries` become nodes so that paths can start or end there.
    pub fn build(q1: &Colouring<'r>, q2: &Colouring<'r>, cuts: &CutSet, queries: &[Point]) -> Result<Self> {
        ensure!(q1.is_valid() && q2.is_valid(), Consistency, "connectivity needs two genuine colourings");
        let region = q1.region();
        ensure!(std::ptr::eq(region, q2.region()), Consistency, "colourings live on different regions");
        let beta = region.beta();
        let nspans = region.span_count();
        let mut raw: Vec<Vec<(f64, EvKind)>> = vec![Vec::new(); nspans];
        for (r, q) in [q1, q2].into_iter().enumerate() {
            for (id, sc) in q.spans().iter().enumerate() {
                raw[id].extend(sc.marks.iter().map(|m| (m.offset, EvKind::Mark { replica: r, kind: m.kind })));
            }
        }
        let mut place = |p: &Point, kind: EvKind| -> Result<()> {
            let loc = region
                .locate(p)
                .ok_or_else(|| Error::Domain(format!("{p:?} lies outside the region")))?;
            let span = region.span(loc.span);
            let o = if span.full && loc.offset == 0.0 { beta } else { loc.offset };
            raw[loc.span].push((o, kind));
            Ok(())
        };
        for c in &cuts.points {
            place(c, EvKind::Cut)?;
        }
        for q in queries {
            place(q, EvKind::Query)?;
        }
        let mut nodes = 1; // the ghost
        let mut edges = Vec::new();
        let mut events = Vec::with_capacity(nspans);
        let mut span_start = vec![usize::MAX; nspans];
        let mut span_end = vec![usize::MAX; nspans];
        let mut bridge_nodes: Vec<Vec<Option<usize>>> =
            vec![vec![None; q1.bridges().len()], vec![None; q2.bridges().len()]];
        for id in 0..nspans {
            let span = *region.span(id);
            let list = &mut raw[id];
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut odd = [q1.spans()[id].first_odd, q2.spans()[id].first_odd];
            let mut evs: Vec<EventNode> = Vec::with_capacity(list.len());
            let mut prev: Option<(usize, f64)> = None;
            if !span.full {
                span_start[id] = nodes;
                prev = Some((nodes, 0.0));
                nodes += 1;
            }
            let mut first_lower = None;
            for &(offset, kind) in list.iter() {
                let blocking = kind == EvKind::Cut && !odd[0] && !odd[1];
                let lower = nodes;
                let upper = if blocking { nodes + 1 } else { nodes };
                nodes += if blocking { 2 } else { 1 };
                if let Some((pn, po)) = prev {
                    edges.push(Edge { a: pn, b: lower, kind: EdgeKind::Atom { span: id, from: po, len: offset - po, odd } });
                } else {
                    first_lower = Some(lower);
                }
                if let EvKind::Mark { replica, kind } = kind {
                    match kind {
                        MarkKind::Bridge(b) => match bridge_nodes[replica][b] {
                            Some(other) => edges.push(Edge { a: other, b: lower, kind: EdgeKind::Bridge { replica, index: b } }),
                            None => bridge_nodes[replica][b] = Some(lower),
                        },
                        MarkKind::Ghost(g) => edges.push(Edge { a: lower, b: GHOST, kind: EdgeKind::Ghost { replica, index: g } }),
                        MarkKind::Source => {}
                    }
                    odd[replica] = !odd[replica];
                }
                evs.push(EventNode { offset, lower, upper });
                prev = Some((upper, offset));
            }
            if span.full {
                match (prev, first_lower) {
                    (Some((pn, po)), Some(fl)) => {
                        edges.push(Edge { a: pn, b: fl, kind: EdgeKind::Atom { span: id, from: po, len: beta - po + evs[0].offset, odd } });
                    }
                    _ => {
                        // An event-free circle: one isolated node.
                        span_start[id] = nodes;
                        nodes += 1;
                    }
                }
            } else {
                span_end[id] = nodes;
                let (pn, po) = prev.expect("interval start node");
                edges.push(Edge { a: pn, b: nodes, kind: EdgeKind::Atom { span: id, from: po, len: span.len - po, odd } });
                nodes += 1;
            }
            events.push(evs);
        }
        let mut uf = UnionFind::new(nodes);
        for e in &edges {
            uf.union(e.a, e.b);
        }
        let root = (0..nodes).map(|i| uf.find(i)).collect();
        Ok(Self { region, nodes, edges, events, span_start, span_end, root })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// The node of a site, or the atom edge containing it together with the
    /// nodes on either side.
    fn locate(&self, site: &Site) -> Result<Located> {
        let p = match site {
            Site::Ghost => return Ok(Located::Node(GHOST)),
            Site::At(p) => p,
        };
        let loc = self
            .region
            .locate(p)
            .ok_or_else(|| Error::Domain(format!("{p:?} lies outside the region")))?;
        let span = self.region.span(loc.span);
        let beta = self.region.beta();
        let o = if span.full && loc.offset == 0.0 { beta } else { loc.offset };
        let evs = &self.events[loc.span];
        if evs.is_empty() {
            return Ok(if span.full {
                Located::Node(self.span_start[loc.span])
            } else {
                Located::Inside { lower: self.span_start[loc.span], upper: self.span_end[loc.span], offset: o }
            });
        }
        let k = evs.partition_point(|e| e.offset < o);
        if let Some(e) = evs.get(k).filter(|e| e.offset == o) {
            return Ok(Located::Node(e.lower));
        }
        if !span.full && o == 0.0 {
            return Ok(Located::Node(self.span_start[loc.span]));
        }
        if !span.full && o == span.len {
            return Ok(Located::Node(self.span_end[loc.span]));
        }
        let lower = if k == 0 {
            if span.full { evs[evs.len() - 1].upper } else { self.span_start[loc.span] }
        } else {
            evs[k - 1].upper
        };
        let upper = if k == evs.len() {
            if span.full { evs[0].lower } else { self.span_end[loc.span] }
        } else {
            evs[k].lower
        };
        Ok(Located::Inside { lower, upper, offset: o })
    }

    fn node_of(&self, site: &Site) -> Result<usize> {
        Ok(match self.locate(site)? {
            Located::Node(n) => n,
            Located::Inside { lower, .. } => lower,
        })
    }

    /// x <-> y by an open path.
    pub fn connected(&self, x: &Site, y: &Site) -> Result<bool> {
        Ok(self.root[self.node_of(x)?] == self.root[self.node_of(y)?])
    }

    /// The nodes connected to the ghost.
    pub fn ghost_cluster(&self) -> Vec<bool> {
        (0..self.nodes).map(|i| self.root[i] == self.root[GHOST]).collect()
    }

    /// Whether a point lies in the open cluster of the ghost.
    pub fn in_ghost_cluster(&self, p: &Point) -> Result<bool> {
        self.connected(&Site::At(*p), &Site::Ghost)
    }

    /// x <->^z y: false exactly when some open path from x to y avoids z.
    pub fn only_via(&self, x: &Site, y: &Site, z: &Point) -> Result<bool> {
        if !self.connected(x, y)? {
            return Ok(true);
        }
        let zl = self.locate(&Site::At(*z))?;
        let (lx, ly) = (self.locate(x)?, self.locate(y)?);
        if lx == zl || ly == zl {
            return Ok(true);
        }
        let mut uf = UnionFind::new(self.nodes);
        let (removed_node, removed_edge) = match zl {
            Located::Node(n) => (Some(n), None),
            Located::Inside { lower, upper, offset } => (None, self.atom_between(lower, upper, offset)),
        };
        for (i, e) in self.edges.iter().enumerate() {
            if Some(i) == removed_edge || removed_node.is_some_and(|n| e.a == n || e.b == n) {
                continue;
            }
            uf.union(e.a, e.b);
        }
        let side = |l: Located| -> usize {
            match (l, zl) {
                (Located::Node(n), _) => n,
                (Located::Inside { lower, upper, offset }, Located::Inside { lower: zl_, upper: zu, offset: zo })
                    if lower == zl_ && upper == zu =>
                {
                    if self.before(lower, upper, offset, zo) { lower } else { upper }
                }
                (Located::Inside { lower, .. }, _) => lower,
            }
        };
        let (nx, ny) = (side(lx), side(ly));
        if removed_node.is_some_and(|n| n == nx || n == ny) {
            return Ok(true);
        }
        Ok(uf.find(nx) != uf.find(ny))
    }

    fn atom_between(&self, lower: usize, upper: usize, offset: f64) -> Option<usize> {
        self.edges.iter().position(|e| match e.kind {
            EdgeKind::Atom { from, len, .. } => {
                e.a == lower && e.b == upper && {
                    let beta = self.region.beta();
                    let d = (offset - from).rem_euclid(beta);
                    d <= len
                }
            }
            _ => false,
        })
    }

    /// Whether `offset` precedes `z` inside the atom from `lower` to `upper`.
    fn before(&self, lower: usize, upper: usize, offset: f64, z: f64) -> bool {
        match self.atom_between(lower, upper, offset).map(|i| self.edges[i].kind) {
            Some(EdgeKind::Atom { from, .. }) => {
                let beta = self.region.beta();
                (offset - from).rem_euclid(beta) < (z - from).rem_euclid(beta)
            }
            _ => true,
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.a].push((e.b, i));
            if e.a != e.b {
                adj[e.b].push((e.a, i));
            }
        }
        adj
    }

    /// Measure of the points z with x <->^z y (x and y connected): the total
    /// length of atoms that are cut edges separating x from y. When x and y are
    /// not connected every z qualifies and |K| is returned.
    pub fn pivotal_measure(&self, x: &Site, y: &Site) -> Result<f64> {
        if !self.connected(x, y)? {
            return Ok(self.region.measure());
        }
        let (sx, sy) = (self.node_of(x)?, self.node_of(y)?);
        if sx == sy {
            return Ok(0.0);
        }
        let adj = self.adjacency();
        let n = self.nodes;
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0; n];
        let mut parent_edge = vec![usize::MAX; n];
        let mut parent = vec![usize::MAX; n];
        let mut is_bridge = vec![false; self.edges.len()];
        let mut time = 0;
        let mut stack: Vec<(usize, usize)> = vec![(sx, 0)];
        disc[sx] = time;
        low[sx] = time;
        time += 1;
        while let Some(&mut (v, ref mut it)) = stack.last_mut() {
            if *it < adj[v].len() {
                let (w, e) = adj[v][*it];
                *it += 1;
                if e == parent_edge[v] {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = time;
                    low[w] = time;
                    time += 1;
                    parent[w] = v;
                    parent_edge[w] = e;
                    stack.push((w, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _)) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        is_bridge[parent_edge[v]] = true;
                    }
                }
            }
        }
        let mut total = 0.0;
        let mut v = sy;
        while v != sx {
            let e = parent_edge[v];
            if is_bridge[e] {
                if let EdgeKind::Atom { len, .. } = self.edges[e].kind {
                    total += len;
                }
            }
            v = parent[v];
        }
        Ok(total)
    }

    /// A self-avoiding open path from x to y, by breadth-first search in edge order.
    /// Paths avoiding `avoid` (if given) take precedence.
    pub fn find_open_path(&self, x: &Site, y: &Site, avoid: Option<&Point>) -> Result<Option<SwitchPath>> {
        let (sx, sy) = (self.node_of(x)?, self.node_of(y)?);
        let adj = self.adjacency();
        let banned = match avoid.map(|z| self.locate(&Site::At(*z))).transpose()? {
            Some(Located::Node(n)) if n != sx && n != sy => Some((Some(n), None)),
            Some(Located::Inside { lower, upper, offset }) => Some((None, self.atom_between(lower, upper, offset))),
            _ => None,
        };
        for attempt in 0..2 {
            let ban = if attempt == 0 { banned } else { None };
            if attempt == 1 && banned.is_none() {
                break;
            }
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.nodes];
            let mut seen = vec![false; self.nodes];
            let mut queue = std::collections::VecDeque::new();
            seen[sx] = true;
            queue.push_back(sx);
            while let Some(v) = queue.pop_front() {
                if v == sy {
                    break;
                }
                for &(w, e) in &adj[v] {
                    if seen[w] {
                        continue;
                    }
                    if let Some((bn, be)) = ban {
                        if bn == Some(w) || be == Some(e) {
                            continue;
                        }
                    }
                    seen[w] = true;
                    prev[w] = Some((v, e));
                    queue.push_back(w);
                }
            }
            if seen[sy] {
                let mut path = Vec::new();
                let mut v = sy;
                while v != sx {
                    let (p, e) = prev[v].expect("reached");
                    path.push(e);
                    v = p;
                }
                path.reverse();
                return Ok(Some(self.describe(&path)));
            }
        }
        Ok(None)
    }

    fn describe(&self, path: &[usize]) -> SwitchPath {
        let mut out = SwitchPath::default();
        for &i in path {
            match self.edges[i].kind {
                EdgeKind::Atom { span, from, len, .. } => out.atoms.push(PathAtom { span, from, len }),
                EdgeKind::Bridge { replica, index } => out.bridges.push(BondRef { replica, index }),
                EdgeKind::Ghost { replica, index } => out.ghosts.push(BondRef { replica, index }),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Located {
    Node(usize),
    Inside { lower: usize, upper: usize, offset: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathAtom {
    pub span: usize,
    pub from: f64,
    pub len: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BondRef {
    pub replica: usize,
    pub index: usize,
}

/// A path pi in Q: the line stretches it covers and the bonds it crosses, the
/// bonds identified by which colouring of the pair they belong to.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SwitchPath {
    pub atoms: Vec<PathAtom>,
    pub bridges: Vec<BondRef>,
    pub ghosts: Vec<BondRef>,
}

impl SwitchPath {
    fn covers(&self, span: usize, offset: f64, beta: f64) -> bool {
        self.atoms.iter().any(|a| {
            a.span == span && {
                let d = (offset - a.from).rem_euclid(beta);
                d >= 0.0 && d <= a.len
            }
        })
    }
}

fn measure_even_both_on_path(q1: &Colouring, q2: &Colouring, path: &SwitchPath) -> f64 {
    let beta = q1.region().beta();
    let mut total = 0.0;
    for a in path.atoms.iter().filter(|a| a.len > 0.0) {
        let span = q1.region().span(a.span);
        let mut mid = a.from + 0.5 * a.len;
        if span.full && mid >= beta {
            mid -= beta;
        }
        let even = |q: &Colouring| q.spans()[a.span].label_at(mid) == Some(false);
        if even(q1) && even(q2) {
            total += a.len;
        }
    }
    total
}

/// Both sides of the switched-weights identity, as logarithms:
/// log(dQ1 dQ2) - 4 delta |ev(Q1) n ev(Q2) n pi| and the same for (R1, R2).
pub fn switched_weight_logs(
    q: (&Colouring, &Colouring),
    r: (&Colouring, &Colouring),
    path: &SwitchPath,
    delta: f64,
) -> (f64, f64) {
    let lhs = q.0.log_weight(delta) + q.1.log_weight(delta) - 4.0 * delta * measure_even_both_on_path(q.0, q.1, path);
    let rhs = r.0.log_weight(delta) + r.1.log_weight(delta) - 4.0 * delta * measure_even_both_on_path(r.0, r.1, path);
    (lhs, rhs)
}

/// Apply the switch map f_pi: bridges and ghost-bonds on pi move to the other
/// colouring, x and y are toggled in both source sets, and circle bits are chosen
/// so that each new colouring equals the old one off pi. Returns the new pair and
/// pi re-addressed to it.
pub fn switch_along<'r>(
    q1: &Colouring<'r>,
    q2: &Colouring<'r>,
    path: &SwitchPath,
    x: &Site,
    y: &Site,
) -> Result<(Colouring<'r>, Colouring<'r>, SwitchPath)> {
    let region = q1.region();
    let beta = region.beta();
    let qs = [q1, q2];
    let mut bridges: [Vec<Bridge>; 2] = [Vec::new(), Vec::new()];
    let mut ghosts: [Vec<Point>; 2] = [Vec::new(), Vec::new()];
    // Bonds not on pi stay; bonds on pi change colouring. Track new addresses.
    let on_path_b = |r: usize, i: usize| path.bridges.iter().any(|b| b.replica == r && b.index == i);
    let on_path_g = |r: usize, i: usize| path.ghosts.iter().any(|b| b.replica == r && b.index == i);
    for r in 0..2 {
        for (i, b) in qs[r].bridges().iter().enumerate() {
            if !on_path_b(r, i) {
                bridges[r].push(*b);
            }
        }
        for (i, g) in qs[r].ghosts().iter().enumerate() {
            if !on_path_g(r, i) {
                ghosts[r].push(*g);
            }
        }
    }
    let mut new_path = SwitchPath { atoms: path.atoms.clone(), bridges: Vec::new(), ghosts: Vec::new() };
    for b in &path.bridges {
        let to = 1 - b.replica;
        new_path.bridges.push(BondRef { replica: to, index: bridges[to].len() });
        bridges[to].push(qs[b.replica].bridges()[b.index]);
    }
    for g in &path.ghosts {
        let to = 1 - g.replica;
        new_path.ghosts.push(BondRef { replica: to, index: ghosts[to].len() });
        ghosts[to].push(qs[g.replica].ghosts()[g.index]);
    }
    let toggles: Vec<Point> = [x, y].iter().filter_map(|s| s.point()).collect();
    let mut out = Vec::with_capacity(2);
    for r in 0..2 {
        let sources: SourceSet = qs[r].sources().toggled(region, &toggles)?;
        let mut bits = qs[r].bits().to_vec();
        let mut col = Colouring::build_with_bits(region, &sources, &bridges[r], &ghosts[r], &bits)?;
        ensure!(col.is_valid(), Invariant, "switched colouring has an odd interval");
        let mut changed = false;
        for v in region.full_vertices() {
            let id = region.span_ids(v).start;
            if let Some(t) = probe_off_path(&col, qs[r], id, path, beta) {
                let p = Point::new(v, t);
                if col.label_at(&p) != qs[r].label_at(&p) {
                    bits[v] = !bits[v];
                    changed = true;
                }
            }
        }
        if changed {
            col = Colouring::build_with_bits(region, &sources, &bridges[r], &ghosts[r], &bits)?;
        }
        out.push(col);
    }
    let r2 = out.pop().expect("two");
    let r1 = out.pop().expect("two");
    Ok((r1, r2, new_path))
}

/// A time on full span `id` off pi and off every switching point of both colourings.
fn probe_off_path(a: &Colouring, b: &Colouring, id: usize, path: &SwitchPath, beta: f64) -> Option<f64> {
    let mut cuts: Vec<f64> = a.spans()[id].marks.iter().chain(&b.spans()[id].marks).map(|m| m.offset).collect();
    for at in path.atoms.iter().filter(|at| at.span == id) {
        cuts.push(at.from);
        cuts.push((at.from + at.len).rem_euclid(beta));
    }
    cuts.push(0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best: Option<(f64, f64)> = None;
    for i in 0..cuts.len() {
        let lo = cuts[i];
        let hi = if i + 1 < cuts.len() { cuts[i + 1] } else { cuts[0] + beta };
        let mid = (0.5 * (lo + hi)).rem_euclid(beta);
        if hi - lo > 0.0 && !path.covers(id, mid, beta) && best.is_none_or(|(w, _)| hi - lo > w) {
            best = Some((hi - lo, mid));
        }
    }
    best.map(|(_, t)| t)
}

/// Whether two colourings agree in sources, bonds, bits and labels.
pub fn colourings_equal(a: &Colouring, b: &Colouring) -> bool {
    let key = |c: &Colouring| {
        let mut br: Vec<(usize, usize, u64)> = c.bridges().iter().map(|b| (b.u, b.v, b.time.to_bits())).collect();
        br.sort_unstable();
        let mut gh: Vec<(usize, u64)> = c.ghosts().iter().map(|g| (g.vertex, g.time.to_bits())).collect();
        gh.sort_unstable();
        (br, gh)
    };
    if a.sources() != b.sources() || key(a) != key(b) || a.is_valid() != b.is_valid() {
        return false;
    }
    a.spans().iter().zip(b.spans()).all(|(x, y)| {
        x.marks.len() == y.marks.len() && x.segments().zip(y.segments()).all(|(s, t)| s.2 == t.2)
    })
}

/// A connectivity event: `true` asks for a connection, `false` for its absence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Connection {
    pub from: Site,
    pub to: Site,
    pub connected: bool,
}

/// A product of connection indicators, F(Q1, Q2, Delta).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConnectivityPredicate {
    pub terms: Vec<Connection>,
}

impl ConnectivityPredicate {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn points(&self) -> Vec<Point> {
        self.terms.iter().flat_map(|c| [c.from.point(), c.to.point()]).flatten().collect()
    }

    pub fn eval(&self, index: &ConnectivityIndex) -> Result<bool> {
        for t in &self.terms {
            if index.connected(&t.from, &t.to)? != t.connected {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Both sides of the switching identity
/// E(dpsi1^A dpsi2^B F 1{x<->y}) = E(dpsi1^{A xy} dpsi2^{B xy} F 1{x<->y}).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SwitchingReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub z: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn verify_switching(
    region: &Region,
    a: &SourceSet,
    b: &SourceSet,
    x: &Site,
    y: &Site,
    predicate: &ConnectivityPredicate,
    params: &Params,
    samples: u64,
    streams: &Streams,
    workers: usize,
) -> Result<SwitchingReport> {
    params.validate()?;
    let toggles: Vec<Point> = [x, y].iter().filter_map(|s| s.point()).collect();
    let a2 = a.toggled(region, &toggles)?;
    let b2 = b.toggled(region, &toggles)?;
    let side = |sa: &SourceSet, sb: &SourceSet, st: &Streams| -> Result<Estimate> {
        let mut queries = predicate.points();
        queries.extend(&toggles);
        let sums = run_blocks(samples, 1, st, workers, |rng, n, s| {
            let mut c1 = crate::domain::Configuration::default();
            let mut c2 = crate::domain::Configuration::default();
            for _ in 0..n {
                c1.resample(region, params, false, rng);
                c2.resample(region, params, false, rng);
                let cuts = CutSet::sample(region, params.delta, rng)?;
                let q1 = Colouring::build(region, sa, &c1.bridges, &c1.ghosts, rng)?;
                let q2 = Colouring::build(region, sb, &c2.bridges, &c2.ghosts, rng)?;
                if !q1.is_valid() || !q2.is_valid() {
                    continue;
                }
                let idx = ConnectivityIndex::build(&q1, &q2, &cuts, &queries)?;
                if idx.connected(x, y)? && predicate.eval(&idx)? {
                    s[0] += q1.normalized_weight(params.delta) * q2.normalized_weight(params.delta);
                }
            }
            Ok(())
        })?;
        Ok(sums.jackknife(|m| m[0]))
    };
    let l = side(a, b, &streams.child(1))?;
    let r = side(&a2, &b2, &streams.child(2))?;
    Ok(SwitchingReport { lhs: l.value, lhs_se: l.std_error, rhs: r.value, rhs_se: r.std_error, z: l.z_between(&r) })
}
