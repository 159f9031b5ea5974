//! One function per subcommand. Each returns an [`Outcome`]; the driver writes it.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use stising::backbone::{verify_backbone_representation, InnerWeights};
use stising::mcmc::{self, run_chain, run_items, ChainSettings, Checkpoint, Series, SpinWorld};
use stising::observables::{self, origin};
use stising::oracle::{region_correlation, DenseHamiltonian};
use stising::parity::{estimate_correlation, verify_partition_identity, SourceSet};
use stising::switching::verify_switching;
use stising::{Boundary, Error, Estimate, Lattice, Params, Point, Region, Result, Site, Streams, Topology};

use crate::config::RunConfig;
use crate::output::{Meta, Outcome};

/// Two-sided agreement threshold in standard errors.
const Z_MAX: f64 = 3.0;
/// Relative tolerance for derivative estimators against finite differences.
const DERIVATIVE_REL_TOL: f64 = 0.05;

/// Default points: 0, then a second vertex (if any) half a period later, then a quarter period on.
fn default_points(region: &Region) -> [Point; 3] {
    let o = origin(region);
    let v = region.lattice().vertex_count();
    let beta = region.beta();
    [o, Point::new(1.min(v - 1), beta / 2.0), Point::new(0, beta / 4.0)]
}

struct Setup {
    region: Region,
    params: Params,
    streams: Streams,
    x: Point,
    y: Point,
    z: Point,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let region = cfg.region()?;
    let [dx, dy, dz] = default_points(&region);
    Ok(Setup {
        params: cfg.params()?,
        streams: Streams::new(cfg.seed),
        x: RunConfig::required_point(&cfg.x, "x", dx)?,
        y: RunConfig::required_point(&cfg.y, "y", dy)?,
        z: RunConfig::required_point(&cfg.z, "z", dz)?,
        region,
    })
}

fn sources_or(cfg_points: &[crate::config::PointSpec], fallback: &[Point]) -> Vec<Point> {
    if cfg_points.is_empty() {
        fallback.to_vec()
    } else {
        RunConfig::points(cfg_points)
    }
}

fn z_line(o: &mut Outcome, z: f64) {
    o.line("z", format!("{z:.3} (|z| < {Z_MAX})"));
}

pub fn estimate(cfg: &RunConfig) -> Result<Outcome> {
    let s = setup(cfg)?;
    let (n, w) = (cfg.samples, cfg.workers);
    let obs = cfg.observable.as_str();
    let (estimate, extra) = match obs {
        "magnetization" => (observables::magnetization(&s.region, &s.params, n, &s.streams, w)?, None),
        "two-point" => (observables::two_point(&s.region, s.x, s.y, &s.params, n, &s.streams, w)?, None),
        "truncated" => (observables::truncated_two_point(&s.region, s.x, s.y, &s.params, n, &s.streams, w)?, None),
        "susceptibility" => {
            let chi = observables::susceptibility(&s.region, &s.params, n, cfg.quadrature_step(), &s.streams, w)?;
            (chi.estimate, Some(serde_json::to_value(chi)?))
        }
        "correlation" => {
            let a = SourceSet::new(&s.region, &sources_or(&cfg.a, &[s.x, s.y]))?;
            let c = estimate_correlation(&s.region, &a, &s.params, n, &s.streams, w)?;
            (c.estimate, Some(serde_json::to_value(c)?))
        }
        other => {
            return Err(Error::Parameter(format!(
                "unknown observable {other:?}; use magnetization, two-point, truncated, susceptibility or correlation"
            )))
        }
    };
    let report = observables::ObservableReport::new(obs, &s.region, &s.params, estimate, "random parity", cfg.seed);
    let mut o = Outcome::new("estimate", serde_json::json!({ "observable": report, "details": extra }))?;
    o.row(obs, 0.0, obs, estimate);
    o.estimate_line(obs, estimate);
    Ok(o)
}

pub fn oracle_compare(cfg: &RunConfig) -> Result<Outcome> {
    let s = setup(cfg)?;
    let (n, w) = (cfg.samples, cfg.workers);
    let obs = cfg.observable.as_str();
    let beta = s.region.beta();
    let exact = |pts: &[Point]| region_correlation(&s.region, pts, &s.params);
    let (mc, transfer) = match obs {
        "magnetization" => {
            (observables::magnetization(&s.region, &s.params, n, &s.streams, w)?, exact(&[origin(&s.region)])?)
        }
        "two-point" => (observables::two_point(&s.region, s.x, s.y, &s.params, n, &s.streams, w)?, exact(&[s.x, s.y])?),
        "truncated" => (
            observables::truncated_two_point(&s.region, s.x, s.y, &s.params, n, &s.streams, w)?,
            exact(&[s.x, s.y])? - exact(&[s.x])? * exact(&[s.y])?,
        ),
        other => {
            return Err(Error::Capability(format!(
                "oracle comparison supports magnetization, two-point and truncated, not {other:?}"
            )))
        }
    };
    // Diagonalization as a second, independent reference where it applies.
    let dense = if (0..s.region.span_count()).all(|id| s.region.span(id).full) {
        match DenseHamiltonian::new(s.region.lattice(), &s.params) {
            Ok(h) => Some(match obs {
                "magnetization" => h.magnetization(beta, origin(&s.region).vertex)?,
                "two-point" => h.time_displaced_correlation(beta, s.x.vertex, s.x.time, s.y.vertex, s.y.time)?,
                _ => {
                    h.time_displaced_correlation(beta, s.x.vertex, s.x.time, s.y.vertex, s.y.time)?
                        - h.thermal_expectation(beta, &[s.x.vertex])? * h.thermal_expectation(beta, &[s.y.vertex])?
                }
            }),
            Err(Error::Capability(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let z = mc.z_against(transfer);
    let oracles_agree = dense.is_none_or(|d| (d - transfer).abs() <= 1e-8 * (1.0 + d.abs()));
    let mut o = Outcome::new(
        "oracle-compare",
        serde_json::json!({ "observable": obs, "estimate": mc, "transfer": transfer, "dense": dense, "z": z }),
    )?;
    o.passed = Some(z.abs() < Z_MAX && oracles_agree);
    o.row(obs, 0.0, "estimate", mc);
    o.row(obs, 0.0, "transfer", Estimate::exact(transfer));
    if let Some(d) = dense {
        o.row(obs, 0.0, "dense", Estimate::exact(d));
    }
    o.estimate_line("estimate", mc);
    o.line("transfer oracle", format!("{transfer:.6}"));
    if let Some(d) = dense {
        o.line("dense oracle", format!("{d:.6}"));
    }
    z_line(&mut o, z);
    Ok(o)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Switching,
    Gks,
    Ghs,
    Concavity,
    SimonLieb,
    Pdi,
    Derivatives,
    Partition,
    Backbone,
}

impl Check {
    fn name(self) -> &'static str {
        match self {
            Check::Switching => "verify-switching",
            Check::Gks => "verify-gks",
            Check::Ghs => "verify-ghs",
            Check::Concavity => "verify-concavity",
            Check::SimonLieb => "verify-simon-lieb",
            Check::Pdi => "verify-pdi",
            Check::Derivatives => "verify-derivatives",
            Check::Partition => "verify-partition",
            Check::Backbone => "verify-backbone",
        }
    }
}

pub fn verify(cfg: &RunConfig, check: Check) -> Result<Outcome> {
    let s = setup(cfg)?;
    let (n, w) = (cfg.samples, cfg.workers);
    let name = check.name();
    let o = match check {
        Check::Switching => {
            let a = SourceSet::new(&s.region, &RunConfig::points(&cfg.a))?;
            let b = SourceSet::new(&s.region, &RunConfig::points(&cfg.b))?;
            let x = cfg.x.as_ref().map(|x| x.site()).transpose()?.unwrap_or(Site::At(s.x));
            let y = cfg.y.as_ref().map(|y| y.site()).transpose()?.unwrap_or(Site::At(s.y));
            let pred = cfg.predicate()?;
            let r = verify_switching(&s.region, &a, &b, &x, &y, &pred, &s.params, n, &s.streams, w)?;
            let mut o = Outcome::new(name, r)?;
            o.passed = Some(r.z.abs() < Z_MAX);
            o.row("switching", 0.0, "lhs", Estimate::new(r.lhs, r.lhs_se, n));
            o.row("switching", 0.0, "rhs", Estimate::new(r.rhs, r.rhs_se, n));
            o.estimate_line("lhs", Estimate::new(r.lhs, r.lhs_se, n));
            o.estimate_line("rhs", Estimate::new(r.rhs, r.rhs_se, n));
            z_line(&mut o, r.z);
            o
        }
        Check::Gks => {
            let a = sources_or(&cfg.a, &[s.x]);
            let b = sources_or(&cfg.b, &[s.y]);
            let r = observables::check_gks(&s.region, &a, &b, &s.params, n, &s.streams, w)?;
            let mut o = Outcome::new(name, r)?;
            o.passed = Some(r.first.holds && r.second.holds);
            o.row("gks", 0.0, "first", r.first.estimate);
            o.row("gks", 0.0, "second", r.second.estimate);
            o.estimate_line("<s_A>", r.first.estimate);
            o.estimate_line("<s_A; s_B>", r.second.estimate);
            o
        }
        Check::Ghs => {
            let r = observables::check_ghs(&s.region, s.x, s.y, s.z, &s.params, n, &s.streams, w)?;
            let mut o = Outcome::new(name, r)?;
            o.passed = Some(r.holds);
            o.row("ghs", 0.0, "third_cumulant", r.estimate);
            o.estimate_line("<s_x; s_y; s_z>", r.estimate);
            o
        }
        Check::Concavity => {
            let r = observables::check_concavity(&s.region, &s.params, &cfg.gammas, n, &s.streams, w)?;
            let mut o = Outcome::new(name, &r)?;
            o.passed = Some(r.holds());
            for (g, m) in r.gammas.iter().zip(&r.magnetization) {
                o.row("magnetization", *g, "m", *m);
                o.estimate_line(&format!("M({g})"), *m);
            }
            for (k, d) in r.second_differences.iter().enumerate() {
                o.row("second_difference", r.gammas[k + 1], "d2m", d.estimate);
                o.estimate_line(&format!("second difference at {}", r.gammas[k + 1]), d.estimate);
            }
            o
        }
        Check::SimonLieb => {
            let t = cfg.separator();
            if t.is_empty() {
                return Err(Error::Parameter("simon-lieb needs a separator: separator = [[vertex, start, length], ...]".into()));
            }
            let r = observables::check_simon_lieb(
                &s.region,
                s.x,
                s.y,
                &t,
                cfg.eps,
                &s.params,
                n,
                cfg.quadrature_step(),
                &s.streams,
                w,
            )?;
            let mut o = Outcome::new(name, &r)?;
            o.passed = Some(r.simon.holds && r.lieb.holds && r.restriction.holds);
            o.row("simon_lieb", 0.0, "lhs", r.lhs);
            o.row("simon_lieb", 0.0, "simon_rhs", r.simon_rhs);
            o.row("simon_lieb", 0.0, "lieb_rhs", r.lieb_rhs);
            o.estimate_line("<s_a s_b>", r.lhs);
            o.estimate_line("simon bound", r.simon_rhs);
            o.estimate_line("lieb bound", r.lieb_rhs);
            o
        }
        Check::Pdi => {
            let r = observables::check_main_pdi(&s.region, &s.params, n, cfg.quadrature_step(), &s.streams, w)?;
            let mut o = Outcome::new(name, r)?;
            o.passed = Some(r.slack.holds);
            o.row("pdi", s.params.gamma, "m", r.m);
            o.row("pdi", s.params.gamma, "chi", r.chi.estimate);
            o.row("pdi", s.params.gamma, "dm_dlambda", r.derivatives.dm_dlambda);
            o.row("pdi", s.params.gamma, "minus_dm_ddelta", r.derivatives.minus_dm_ddelta);
            o.row("pdi", s.params.gamma, "slack", r.slack.estimate);
            o.estimate_line("M", r.m);
            o.estimate_line("chi", r.chi.estimate);
            o.line("gamma chi", format!("{:.6}", r.terms.gamma_chi));
            o.line("M^3", format!("{:.6}", r.terms.m_cubed));
            o.line("lambda term", format!("{:.6}", r.terms.lambda_term));
            o.line("delta term", format!("{:.6}", r.terms.delta_term));
            o.estimate_line("slack (rhs - M)", r.slack.estimate);
            o
        }
        Check::Derivatives => derivatives(cfg, &s)?,
        Check::Partition => {
            let r = verify_partition_identity(&s.region, &s.params, n, &s.streams, w)?;
            let mut o = Outcome::new(name, r)?;
            o.passed = Some(r.z.abs() < Z_MAX);
            o.row("partition", 0.0, "sampled", r.sampled);
            o.row("partition", 0.0, "exact", Estimate::exact(r.exact));
            o.estimate_line("sampled Z'", r.sampled);
            o.line("exact Z'", format!("{:.6}", r.exact));
            z_line(&mut o, r.z);
            o
        }
        Check::Backbone => {
            let a = SourceSet::new(&s.region, &sources_or(&cfg.a, &[s.x, s.y]))?;
            let inner = match cfg.inner.as_str() {
                "exact" => InnerWeights::Exact,
                "sampled" => InnerWeights::Sampled,
                other => return Err(Error::Parameter(format!("unknown inner weights {other:?}; use exact or sampled"))),
            };
            let r = verify_backbone_representation(&s.region, &a, &s.params, n, inner, &s.streams, w)?;
            let mut o = Outcome::new(name, &r)?;
            o.passed = Some(r.z_exact.abs() < Z_MAX && r.z_direct.abs() < Z_MAX);
            o.row("backbone", 0.0, "backbone_side", r.backbone_side);
            o.row("backbone", 0.0, "literal", r.literal);
            o.row("backbone", 0.0, "direct", r.direct.estimate);
            o.row("backbone", 0.0, "exact", Estimate::exact(r.exact));
            o.estimate_line("backbone side", r.backbone_side);
            o.line("literal E(w(xi))", format!("{:.6} ± {:.6}  (z {:.3})", r.literal.value, r.literal.std_error, r.z_literal));
            o.estimate_line("direct", r.direct.estimate);
            o.line("exact", format!("{:.6}", r.exact));
            o.line("z (exact, direct)", format!("{:.3}, {:.3}", r.z_exact, r.z_direct));
            o
        }
    };
    Ok(o)
}

/// Within 5% of the reference or 3 standard errors, whichever is looser.
pub fn derivative_agrees(e: &Estimate, reference: f64) -> bool {
    (e.value - reference).abs() <= (DERIVATIVE_REL_TOL * reference.abs()).max(Z_MAX * e.std_error)
}

fn derivatives(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let d = observables::derivative_estimators(&s.region, &s.params, cfg.samples, &s.streams, cfg.workers)?;
    let fd = match observables::oracle_derivatives(&s.region, &s.params) {
        Ok(v) => Some(v),
        Err(Error::Capability(_)) => None,
        Err(e) => return Err(e),
    };
    let ests = [("dm_dgamma", d.dm_dgamma), ("dm_dlambda", d.dm_dlambda), ("minus_dm_ddelta", d.minus_dm_ddelta)];
    let agree = fd.map(|fd| ests.iter().zip(fd).all(|((_, e), r)| derivative_agrees(e, r)));
    let mut o = Outcome::new(
        "verify-derivatives",
        serde_json::json!({ "estimators": d, "finite_differences": fd, "agree": agree, "bounds_hold": d.bounds_hold() }),
    )?;
    o.passed = Some(d.bounds_hold() && agree.unwrap_or(true));
    o.row("derivatives", 0.0, "m", d.m);
    o.estimate_line("M", d.m);
    for (k, (q, e)) in ests.iter().enumerate() {
        o.row("derivatives", 0.0, q, *e);
        match fd {
            Some(fd) => o.line(q, format!("{:.6} ± {:.6}  (finite difference {:.6})", e.value, e.std_error, fd[k])),
            None => o.estimate_line(q, *e),
        }
    }
    for (q, e) in [
        ("gamma_bound_slack", d.gamma_bound_slack),
        ("lambda_bound_slack", d.lambda_bound_slack),
        ("delta_bound_slack", d.delta_bound_slack),
    ] {
        o.row("derivatives", 0.0, q, e);
        o.estimate_line(q, e);
    }
    Ok(o)
}

pub fn scan_critical(cfg: &RunConfig) -> Result<Outcome> {
    let rhos = cfg.rho_grid()?;
    let settings = ChainSettings { burn_in: cfg.burn_in, sweeps: cfg.sweeps };
    let r = mcmc::scan_critical(&cfg.sizes, cfg.aspect, &rhos, settings, cfg.bootstrap, &Streams::new(cfg.seed), cfg.workers)?;
    let mut o = Outcome::new("scan-critical", &r)?;
    for p in &r.points {
        let g = format!("n={}", p.n);
        o.row(&g, p.rho, "binder", p.moments.binder);
        o.row(&g, p.rho, "m2", p.moments.m2);
        o.row(&g, p.rho, "m4", p.moments.m4);
        o.row(&g, p.rho, "abs_m", p.moments.abs_m);
    }
    for c in &r.crossings {
        let g = format!("crossing {}-{}", c.n_small, c.n_large);
        o.row(&g, 0.0, "rho", Estimate::new(c.rho, c.std_error, cfg.bootstrap as u64));
        o.line(&g, format!("{:.4} ± {:.4}", c.rho, c.std_error));
    }
    match r.rho_c {
        Some(e) => {
            o.row("rho_c", 0.0, "rho", e);
            o.estimate_line("rho_c", e);
        }
        None => o.line("rho_c", r.diagnostic.clone().unwrap_or_default()),
    }
    if let Some((lo, hi)) = cfg.expect_rho_c {
        o.passed = Some(r.rho_c.is_some_and(|e| (lo..=hi).contains(&e.value)));
        o.line("expected", format!("[{lo}, {hi}]"));
    }
    Ok(o)
}

/// A chain's checkpoint together with the measurements taken so far.
#[derive(Serialize, Deserialize)]
struct ChainFile {
    meta: Meta,
    chain: usize,
    checkpoint: Checkpoint,
    series: Series,
}

fn chain_path(cfg: &RunConfig, k: usize) -> PathBuf {
    cfg.out.join(format!("decay_chain{k}.ckpt"))
}

/// Runs (or resumes) chain `k`; `None` when `stop_after` interrupted it.
fn decay_chain(cfg: &RunConfig, lattice: &Arc<Lattice>, params: &Params, displacements: &[usize], k: usize) -> Result<Option<Series>> {
    let path = chain_path(cfg, k);
    let meta = Meta::of(cfg);
    let (mut world, mut rng, mut series) = if cfg.resume && path.exists() {
        let f: ChainFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if f.meta.config_hash != meta.config_hash {
            return Err(Error::Consistency(format!(
                "{} was written by configuration {}, not {}",
                path.display(),
                f.meta.config_hash,
                meta.config_hash
            )));
        }
        let (world, _, rng) = f.checkpoint.restore()?;
        (world, rng, f.series)
    } else {
        let world = SpinWorld::all_plus(lattice.clone(), cfg.beta, Topology::Circle)?;
        let series = Series { displacements: displacements.to_vec(), corr: vec![Vec::new(); displacements.len()], ..Series::default() };
        (world, Streams::new(cfg.seed).rng(k as u64), series)
    };
    let total = cfg.burn_in + cfg.sweeps;
    let budget = cfg.stop_after.unwrap_or(u64::MAX);
    let mut ran = 0;
    let every = cfg.checkpoint_every.max(1);
    while world.sweeps() < total && ran < budget {
        let done = world.sweeps();
        let step = every.min(total - done).min(budget - ran);
        let burn = cfg.burn_in.saturating_sub(done).min(step);
        let part = run_chain(&mut world, params, burn, step - burn, displacements, &mut rng)?;
        series.m.extend(part.m);
        for (c, p) in series.corr.iter_mut().zip(part.corr) {
            c.extend(p);
        }
        ran += step;
        let f = ChainFile { meta: meta.clone(), chain: k, checkpoint: Checkpoint::capture(&world, params, &rng), series };
        std::fs::write(&path, serde_json::to_string(&f)?)?;
        series = f.series;
    }
    Ok((world.sweeps() >= total).then_some(series))
}

pub fn decay(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.chains == 0 {
        return Err(Error::Parameter("chains must be at least 1".into()));
    }
    let lattice = Arc::new(Lattice::cubic(cfg.dim, cfg.n, Boundary::Periodic)?);
    let params = Params::new(cfg.rho, 1.0, 0.0)?;
    let displacements: Vec<usize> = if cfg.displacements.is_empty() { (1..=cfg.n).collect() } else { cfg.displacements.clone() };
    std::fs::create_dir_all(&cfg.out)?;
    let chains = run_items(cfg.chains, cfg.workers, |k| decay_chain(cfg, &lattice, &params, &displacements, k))?;
    let finished: Option<Vec<Series>> = chains.into_iter().collect();
    let Some(series) = finished else {
        let mut o = Outcome::new("decay", serde_json::json!({ "complete": false }))?;
        o.line("complete", "no; rerun with resume = true");
        return Ok(o);
    };
    let profile = mcmc::correlation_profile(&series)?;
    let mass = observables::mass_estimate(&profile);
    let mut o = Outcome::new(
        "decay",
        serde_json::json!({
            "complete": true,
            "d": cfg.dim,
            "n": cfg.n,
            "beta": cfg.beta,
            "rho": cfg.rho,
            "profile": profile,
            "mass": mass.as_ref().ok(),
            "mass_diagnostic": mass.as_ref().err().map(|e| e.to_string()),
        }),
    )?;
    for (r, c) in &profile {
        o.row("correlation", *r, "c", *c);
        o.estimate_line(&format!("C({r})"), *c);
    }
    match &mass {
        Ok(m) => {
            o.row("mass", 0.0, "mass", *m);
            o.estimate_line("mass", *m);
        }
        Err(e) => o.line("mass", e),
    }
    Ok(o)
}
