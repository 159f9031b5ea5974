//! Run configuration: a flat TOML table with command-line overrides.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stising::domain::{Segment, Topology};
use stising::switching::{Connection, ConnectivityPredicate};
use stising::{Boundary, Error, Lattice, Params, Point, Region, Result, Site, TimeDomain};

/// A number written either as an integer or a float.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    pub fn value(self) -> f64 {
        match self {
            Num::Int(i) => i as f64,
            Num::Float(f) => f,
        }
    }
}

/// `[vertex, time]`.
pub type PointSpec = (usize, Num);

/// `"ghost"` or `[vertex, time]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteSpec {
    Named(String),
    At(PointSpec),
}

impl SiteSpec {
    pub fn site(&self) -> Result<Site> {
        match self {
            SiteSpec::Named(s) if s == "ghost" => Ok(Site::Ghost),
            SiteSpec::Named(s) => Err(Error::Parameter(format!("unknown site {s:?}; use \"ghost\" or [vertex, time]"))),
            SiteSpec::At((v, t)) => Ok(Site::At(Point::new(*v, t.value()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub from: SiteSpec,
    pub to: SiteSpec,
    #[serde(default = "yes")]
    pub connected: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// "chain" (free path of `length` vertices) or "box" ([-n, n]^dim).
    pub lattice: String,
    pub length: usize,
    pub dim: usize,
    pub n: usize,
    /// "periodic" or "free".
    pub boundary: String,
    pub beta: f64,
    /// "circle" or "interval".
    pub topology: String,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
    pub samples: u64,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    /// estimate: magnetization, two-point, truncated, susceptibility or correlation.
    pub observable: String,
    pub x: Option<SiteSpec>,
    pub y: Option<SiteSpec>,
    pub z: Option<SiteSpec>,
    pub a: Vec<PointSpec>,
    pub b: Vec<PointSpec>,
    pub predicate: Vec<ConnectionSpec>,
    pub gammas: Vec<f64>,
    /// `[vertex, start, length]` arcs.
    pub separator: Vec<(usize, Num, Num)>,
    pub eps: f64,
    /// Quadrature step; beta / 64 when absent.
    pub h: Option<f64>,
    /// "exact" or "sampled" inner weights for the backbone check.
    pub inner: String,
    pub sizes: Vec<usize>,
    pub aspect: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_step: f64,
    pub bootstrap: usize,
    pub expect_rho_c: Option<(f64, f64)>,
    pub rho: f64,
    pub displacements: Vec<usize>,
    pub burn_in: u64,
    pub sweeps: u64,
    pub chains: usize,
    /// Sweeps between checkpoint writes.
    pub checkpoint_every: u64,
    /// Continue chains from existing checkpoints.
    pub resume: bool,
    /// Stop every chain after this many sweeps in this invocation, leaving a checkpoint.
    pub stop_after: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lattice: "chain".into(),
            length: 2,
            dim: 1,
            n: 1,
            boundary: "periodic".into(),
            beta: 1.0,
            topology: "circle".into(),
            lambda: 1.0,
            delta: 1.0,
            gamma: 0.5,
            samples: 20_000,
            seed: 1,
            workers: 1,
            out: PathBuf::from("out"),
            observable: "magnetization".into(),
            x: None,
            y: None,
            z: None,
            a: Vec::new(),
            b: Vec::new(),
            predicate: Vec::new(),
            gammas: vec![0.2, 0.4, 0.6],
            separator: Vec::new(),
            eps: 1.0,
            h: None,
            inner: "exact".into(),
            sizes: vec![8, 16, 32],
            aspect: 1.0,
            rho_min: 1.5,
            rho_max: 2.5,
            rho_step: 0.1,
            bootstrap: 1000,
            expect_rho_c: None,
            rho: 1.0,
            displacements: Vec::new(),
            burn_in: 500,
            sweeps: 5000,
            chains: 1,
            checkpoint_every: 1000,
            resume: false,
            stop_after: None,
        }
    }
}

/// Parse `key=value`, reading the value as TOML and falling back to a bare string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Parameter(format!("override {s:?} is not key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k, value))
}

impl RunConfig {
    /// Config file (if any), then `key=value` overrides.
    pub fn load(file: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Parameter(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parameter(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        self.region()?;
        if self.workers == 0 {
            return Err(Error::Parameter("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form. Keys that only control how a run
    /// is carried out (workers, resumption, output directory) are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        c.out = PathBuf::new();
        c.resume = false;
        c.stop_after = None;
        let json = serde_json::to_string(&c).expect("serializable");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn params(&self) -> Result<Params> {
        Params::new(self.lambda, self.delta, self.gamma)
    }

    pub fn build_lattice(&self) -> Result<Lattice> {
        match self.lattice.as_str() {
            "chain" => Lattice::chain(self.length),
            "box" => {
                let boundary = match self.boundary.as_str() {
                    "periodic" => Boundary::Periodic,
                    "free" => Boundary::Free,
                    other => return Err(Error::Parameter(format!("unknown boundary {other:?}"))),
                };
                Lattice::cubic(self.dim, self.n, boundary)
            }
            other => Err(Error::Parameter(format!("unknown lattice {other:?}; use \"chain\" or \"box\""))),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        match self.topology.as_str() {
            "circle" => Ok(Topology::Circle),
            "interval" => Ok(Topology::Interval),
            other => Err(Error::Parameter(format!("unknown topology {other:?}"))),
        }
    }

    pub fn region(&self) -> Result<Region> {
        let time = TimeDomain::new(self.beta, self.topology()?)?;
        Ok(Region::full(Arc::new(self.build_lattice()?), time))
    }

    pub fn quadrature_step(&self) -> f64 {
        self.h.unwrap_or(self.beta / 64.0)
    }

    pub fn point(spec: &PointSpec) -> Point {
        Point::new(spec.0, spec.1.value())
    }

    pub fn points(specs: &[PointSpec]) -> Vec<Point> {
        specs.iter().map(Self::point).collect()
    }

    /// A required point-valued site.
    pub fn required_point(spec: &Option<SiteSpec>, name: &str, default: Point) -> Result<Point> {
        match spec {
            None => Ok(default),
            Some(s) => s
                .site()?
                .point()
                .ok_or_else(|| Error::Parameter(format!("{name} must be a point, not the ghost"))),
        }
    }

    pub fn predicate(&self) -> Result<ConnectivityPredicate> {
        let terms = self
            .predicate
            .iter()
            .map(|c| Ok(Connection { from: c.from.site()?, to: c.to.site()?, connected: c.connected }))
            .collect::<Result<_>>()?;
        Ok(ConnectivityPredicate { terms })
    }

    pub fn separator(&self) -> Vec<Segment> {
        self.separator
            .iter()
            .map(|&(vertex, start, len)| Segment { vertex, start: start.value(), len: len.value() })
            .collect()
    }

    pub fn rho_grid(&self) -> Result<Vec<f64>> {
        if !(self.rho_step > 0.0 && self.rho_max >= self.rho_min) {
            return Err(Error::Parameter("rho grid needs rho_step > 0 and rho_max >= rho_min".into()));
        }
        let count = ((self.rho_max - self.rho_min) / self.rho_step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|k| ((self.rho_min + k as f64 * self.rho_step) * 1e9).round() / 1e9).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml() {
        let cfg = RunConfig::load(None, &["gamma=0.25".into(), "x=[0, 0]".into(), "lattice=box".into(), "n=2".into()]).unwrap();
        assert_eq!(cfg.gamma, 0.25);
        assert_eq!(cfg.x, Some(SiteSpec::At((0, Num::Int(0)))));
        assert_eq!(cfg.build_lattice().unwrap().vertex_count(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["gama=0.25".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.workers = 4;
        b.resume = true;
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rho_grid_is_inclusive() {
        let g = RunConfig::default().rho_grid().unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[10], 2.5);
    }
}
