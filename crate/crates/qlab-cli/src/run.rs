use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use qlab::blocks::{block_rpf, build_schedule, fit_decay_constant, induce, measure_constants, probe_set};
use qlab::cones::birkhoff_contraction;
use qlab::environment::{mixing_bounds, product_decay, psi_condition_gap, sample_path, visiting_times, EnvPath};
use qlab::limits::{clt_report, mdp_report, variance, CltOptions, MdpOptions, Quenched};
use qlab::rpf::{circle_tests, decay_rate, lambda_bounds_hold, solve_triplet, RPFTriplet, Regime};
use qlab::systems::{FiberedSystem, RandomFunction};
use qlab::transfer::CocycleWindow;

use crate::config::*;
use crate::report::{config_hash, to_json, Assertion, ConfigEcho, RunReport};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

struct Ctx {
    sys: FiberedSystem,
    path: EnvPath,
    phi: RandomFunction,
    f: RandomFunction,
    window: CocycleWindow,
    triplet: RPFTriplet,
}

impl Ctx {
    fn q(&self) -> qlab::Result<Quenched<'_>> {
        Quenched::new(&self.sys, &self.path, &self.phi, &self.f, &self.window, &self.triplet)
    }
}

#[derive(Default)]
struct Sink {
    results: serde_json::Map<String, Value>,
    assertions: Vec<Assertion>,
    errors: Vec<String>,
    plot: Vec<(String, f64, f64)>,
    timing: serde_json::Map<String, Value>,
}

impl Sink {
    fn series(&mut self, name: &str, xy: impl IntoIterator<Item = (f64, f64)>) {
        self.plot.extend(xy.into_iter().map(|(x, y)| (name.to_string(), x, y)));
    }
}

fn write_rows<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(|e| CliError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Operators needed to the right of fiber 0.
fn window_demand(cfg: &ExperimentConfig) -> usize {
    let a = &cfg.analysis;
    let mut need = 320;
    if let Some(d) = &a.decay {
        need = need.max(d.n_max + 1);
    }
    if let Some(v) = &a.var {
        need = need.max(v.n_max.max(v.env_samples + v.k_max) + 1);
    }
    if let Some(c) = &a.clt {
        need = need.max(c.n_grid.iter().copied().max().unwrap_or(0));
    }
    if let Some(m) = &a.mdp {
        need = need.max(m.n_grid.iter().copied().max().unwrap_or(0));
    }
    if a.blocks.is_some() {
        need = need.max(400);
    }
    need
}

fn build_ctx(cfg: &ExperimentConfig) -> qlab::Result<Ctx> {
    let sys = cfg.system.build()?;
    let env = cfg.environment.build()?;
    let burn = cfg.discretization.burn_in;
    let need = window_demand(cfg);
    let path = sample_path(&env, -(3 * burn as i64), (need + 7 * burn) as i64, cfg.environment.seed())?;
    let phi = cfg.system.potential();
    let f = cfg.system.observable();
    let disc = cfg.discretization.to_disc(cfg.system.is_circle());
    let raw = CocycleWindow::build(&sys, &path, &phi, &disc, -(2 * burn as i64), need + 4 * burn, Complex64::new(0.0, 0.0), None)?;
    let triplet = solve_triplet(&raw, burn, cfg.discretization.rpf_tol)?;
    let window = triplet.normalized_window(&raw)?;
    Ok(Ctx { sys, path, phi, f, window, triplet })
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed_override {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    let dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qlab-out"));
    fs::create_dir_all(&dir)?;

    let started = Instant::now();
    let mut sink = Sink::default();
    let needs_ctx = cfg.analysis.run.iter().any(|a| a != "cones" && a != "mixing");
    let ctx = if needs_ctx {
        let t = Instant::now();
        let c = build_ctx(&cfg)?;
        sink.timing.insert("setup".into(), json!(t.elapsed().as_secs_f64()));
        Some(c)
    } else {
        None
    };

    for name in cfg.analysis.run.clone() {
        let t = Instant::now();
        let out = match name.as_str() {
            "rpf" => rpf(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            "decay" => decay(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            "cones" => cones(&cfg, &dir, &mut sink),
            "blocks" => blocks(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            "clt" => clt(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            "mdp" => mdp(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            "var" => var(&cfg, ctx.as_ref().unwrap(), &dir, &mut sink),
            _ => mixing(&cfg, &dir, &mut sink),
        };
        if let Err(e) = out {
            sink.errors.push(format!("{name}: {e}"));
            sink.assertions.push(Assertion::flag(&name, "completed", false));
        }
        sink.timing.insert(name, json!(t.elapsed().as_secs_f64()));
    }
    sink.timing.insert("total".into(), json!(started.elapsed().as_secs_f64()));

    let toml = cfg.to_toml();
    let report = RunReport {
        config: ConfigEcho { sha256: config_hash(&toml), toml },
        results: sink.results,
        pass: sink.errors.is_empty() && sink.assertions.iter().all(|a| a.pass),
        assertions: sink.assertions,
        errors: sink.errors,
    };
    fs::write(dir.join("report.json"), to_json(&report))?;
    fs::write(dir.join("timing.json"), to_json(&sink.timing))?;
    fs::write(dir.join("config.toml"), &report.config.toml)?;
    #[derive(Serialize)]
    struct PlotRow<'a> {
        series: &'a str,
        x: f64,
        y: f64,
    }
    let rows: Vec<PlotRow> = sink.plot.iter().map(|(s, x, y)| PlotRow { series: s, x: *x, y: *y }).collect();
    write_rows(&dir, "plot.csv", &rows)?;
    Ok(report)
}

fn rpf(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.rpf.as_ref().unwrap();
    let t = &ctx.triplet;
    let bounds = lambda_bounds_hold(t, &ctx.sys, &ctx.path, &ctx.phi)?;
    #[derive(Serialize)]
    struct Row {
        index: i64,
        lambda: f64,
        eigen_residual: f64,
        dual_residual: f64,
    }
    let rows: Vec<Row> = (0..t.len())
        .map(|k| Row {
            index: t.start + k as i64,
            lambda: t.lambdas[k],
            eigen_residual: t.eigen_residual[k],
            dual_residual: t.dual_residual[k],
        })
        .collect();
    write_rows(dir, "rpf.csv", &rows)?;
    let mean_log = t.lambdas.iter().map(|l| l.ln()).sum::<f64>() / t.len() as f64;
    sink.series("log_lambda", rows.iter().map(|r| (r.index as f64, r.lambda.ln())));
    sink.results.insert(
        "rpf".into(),
        json!({"start": t.start, "operators": t.len(), "mean_log_lambda": mean_log,
               "max_residual": t.max_residual(), "convergence": t.convergence, "lambda_bounds_hold": bounds}),
    );
    sink.assertions.push(Assertion::le("rpf", "max_residual", t.max_residual(), s.max_residual));
    sink.assertions.push(Assertion::flag("rpf", "lambda_bounds", bounds));
    Ok(())
}

fn decay(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.decay.as_ref().unwrap();
    let geom = ctx.window.geometry(0)?;
    let tests: Vec<(String, Vec<f64>)> = if cfg.system.is_circle() {
        circle_tests(geom.len(), s.levels)
    } else {
        probe_set(geom).into_iter().enumerate().map(|(i, v)| (format!("probe{i}"), v)).collect()
    };
    let r = decay_rate(&ctx.window, &ctx.triplet.mu_at(0)?, 0, &tests, s.n_max, ctx.sys.alpha)?;
    #[derive(Serialize)]
    struct Row {
        n: usize,
        decay: f64,
        envelope: f64,
    }
    let rows: Vec<Row> = r.sup_norm_decay.iter().zip(&r.envelope).map(|(&(n, d), &e)| Row { n, decay: d, envelope: e }).collect();
    write_rows(dir, "decay.csv", &rows)?;
    sink.series("decay", r.sup_norm_decay.iter().map(|&(n, d)| (n as f64, d)));
    if let Some(want) = &s.expect_regime {
        let got = match r.regime {
            Regime::Exponential => "exponential",
            Regime::Polynomial => "polynomial",
            Regime::Indeterminate => "indeterminate",
        };
        sink.assertions.push(Assertion::flag("decay", &format!("regime {got} == {want}"), got == want));
    }
    sink.results.insert(
        "decay".into(),
        json!({"regime": r.regime, "exp_rate": r.exp_rate, "fitted_exponent": r.fitted_exponent,
               "envelope_constant": r.envelope_constant, "envelope_growth_last_half": r.envelope_growth_last_half()}),
    );
    Ok(())
}

fn cones(cfg: &ExperimentConfig, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.cones.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.analysis.seed);
    let d = s.dim;
    let mut rows = Vec::with_capacity(s.matrices);
    for _ in 0..s.matrices {
        let m = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.gen_range(-2.0f64..2.0).exp());
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..s.pairs)
            .map(|_| {
                let f = (0..d).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
                let g = (0..d).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
                (f, g)
            })
            .collect();
        rows.push(birkhoff_contraction(&m, &pairs)?);
    }
    write_rows(dir, "birkhoff.csv", &rows)?;
    let worst = rows.iter().map(|r| r.max_ratio - r.tanh_quarter).fold(f64::NEG_INFINITY, f64::max);
    sink.series("birkhoff_ratio_vs_diameter", rows.iter().map(|r| (r.diameter, r.max_ratio)));
    sink.assertions.push(Assertion::le("cones", "max(ratio - tanh(diameter/4))", worst, s.slack));
    sink.results.insert("cones".into(), json!({"matrices": rows.len(), "worst_gap": worst}));
    Ok(())
}

fn var(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.var.as_ref().unwrap();
    let v = variance(&ctx.q()?, 0, s.n_max, s.k_max, s.env_samples)?;
    #[derive(Serialize)]
    struct Row {
        n: usize,
        sigma2_over_n: f64,
    }
    let rows: Vec<Row> = v.per_n.iter().map(|&(n, s2)| Row { n, sigma2_over_n: s2 }).collect();
    write_rows(dir, "variance.csv", &rows)?;
    #[derive(Serialize)]
    struct Corr {
        k: usize,
        b: f64,
    }
    let corr: Vec<Corr> = v.b_k.iter().enumerate().map(|(k, &b)| Corr { k, b }).collect();
    write_rows(dir, "correlations.csv", &corr)?;
    sink.series("sigma2_over_n", v.per_n.iter().map(|&(n, s2)| (n as f64, s2)));
    if let Some(want) = s.expect_sigma2 {
        sink.assertions.push(Assertion::le("var", &format!("|sigma2 - {want}|"), (v.sigma2_series - want).abs(), s.tol));
    }
    if let Some(max) = s.max_slope {
        sink.assertions.push(Assertion::le("var", "convergence_slope", v.convergence_slope.unwrap_or(f64::NAN), max));
    }
    sink.results.insert(
        "var".into(),
        json!({"sigma2": v.sigma2_series, "tail_bound": v.tail_bound, "envelope_c": v.envelope_c,
               "envelope_beta": v.envelope_beta, "convergence_slope": v.convergence_slope}),
    );
    Ok(())
}

fn series_sigma2(ctx: &Ctx) -> qlab::Result<f64> {
    Ok(variance(&ctx.q()?, 0, 256, 32, 64)?.sigma2_series)
}

fn clt(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.clt.as_ref().unwrap();
    let opts = CltOptions {
        samples: s.samples,
        seed: cfg.analysis.seed,
        cutoff_factor: s.cutoff_factor,
        panels: s.panels,
        esseen: true,
    };
    let r = clt_report(&ctx.q()?, 0, &s.n_grid, series_sigma2(ctx)?, &opts)?;
    write_rows(dir, "ks_table.csv", &r.rows)?;
    sink.series("ks", r.rows.iter().map(|row| (row.n as f64, row.ks)));
    sink.series("esseen_bound", r.rows.iter().map(|row| (row.n as f64, row.esseen_bound)));
    for row in &r.rows {
        sink.assertions.push(Assertion::ge("clt", &format!("esseen_bound >= ks at n={}", row.n), row.esseen_bound, row.ks));
        if let Some(max) = s.max_ks {
            sink.assertions.push(Assertion::le("clt", &format!("ks at n={}", row.n), row.ks, max));
        }
    }
    if let Some(max) = s.max_slope {
        sink.assertions.push(Assertion::le("clt", "ks_slope", r.be_slope().unwrap_or(f64::NAN), max));
    }
    sink.results.insert("clt".into(), json!({"ks_slope": r.be_slope(), "rows": r.rows.len()}));
    Ok(())
}

fn mdp(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.mdp.as_ref().unwrap();
    let opts = MdpOptions {
        exponent: s.exponent,
        n_grid: s.n_grid.clone(),
        t_grid: s.t_grid.clone(),
        sets: s.sets.iter().map(|[a, b]| (*a, *b)).collect(),
        samples: s.samples,
        seed: cfg.analysis.seed,
    };
    let r = mdp_report(&ctx.q()?, 0, &opts)?;
    write_rows(dir, "cumulants.csv", &r.cumulants)?;
    write_rows(dir, "mdp_sets.csv", &r.sets)?;
    for &n in &s.n_grid {
        sink.series(&format!("scaled_cumulant_n{n}"), r.cumulants.iter().filter(|c| c.n == n).map(|c| (c.t, c.value)));
    }
    sink.assertions.push(Assertion::flag("mdp", "cumulants convex in t", r.convex));
    sink.assertions.push(Assertion::le("mdp", "cumulant rel error at largest n", r.limit_error_at_largest(), s.cumulant_tol));
    if let Some(tol) = s.set_rate_tol {
        let n = s.n_grid.iter().copied().max().unwrap_or(0);
        for set in r.sets.iter().filter(|x| x.n == n) {
            sink.assertions.push(Assertion::le("mdp", &format!("set rate [{}, {}]", set.lo, set.hi), set.relative_error(), tol));
        }
    }
    sink.results.insert("mdp".into(), json!({"convex": r.convex, "limit_error_at_largest": r.limit_error_at_largest()}));
    Ok(())
}

fn mixing(cfg: &ExperimentConfig, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.mixing.as_ref().unwrap();
    let env = cfg.environment.build()?;
    let rows = product_decay(&env, &s.g, s.n_max, s.samples, cfg.analysis.seed)?;
    write_rows(dir, "product_decay.csv", &rows)?;
    sink.series("product_mc", rows.iter().map(|r| (r.n as f64, r.mc_estimate)));
    sink.series("product_exact", rows.iter().map(|r| (r.n as f64, r.exact)));
    sink.series("product_bound", rows.iter().map(|r| (r.n as f64, r.lemma_bound)));
    let worst_z = rows
        .iter()
        .filter(|r| r.mc_se > 0.0)
        .map(|r| (r.mc_estimate - r.exact).abs() / r.mc_se)
        .fold(0.0, f64::max);
    let envelope = rows.iter().all(|r| r.exact <= r.lemma_bound + 1e-14);
    let profile = mixing_bounds(&env)?;
    let gap = psi_condition_gap(&profile, env.expectation(&s.g));
    sink.assertions.push(Assertion::le("mixing", "max |mc - exact|/se", worst_z, s.sigmas));
    sink.assertions.push(Assertion::flag("mixing", "exact <= lemma envelope", envelope));
    sink.results.insert("mixing".into(), json!({"profile": profile, "psi_condition_gap": gap, "worst_z": worst_z}));
    Ok(())
}

fn blocks(cfg: &ExperimentConfig, ctx: &Ctx, dir: &Path, sink: &mut Sink) -> Result<(), CliError> {
    let s = cfg.analysis.blocks.as_ref().unwrap();
    let alpha = ctx.sys.alpha;
    let level = s.level_set.clone().unwrap_or_else(|| vec![true; ctx.sys.state_count()]);
    let skip = (-ctx.path.offset) as usize;
    let tail = EnvPath { offset: 0, states: ctx.path.states[skip..].to_vec() };
    let visits = visiting_times(&tail, &level, "config")?;
    let w = &ctx.window;
    let t = &ctx.triplet;
    let c1 = fit_decay_constant(w, t, 0, &visits.visit_indices, s.beta, s.eps, alpha, 4, 6)?;
    let sched = build_schedule(c1, s.beta, s.eps, s.eps0, s.j_max)?;
    let mut buf = Vec::new();
    sched.write_csv(&mut buf)?;
    fs::write(dir.join("schedule.csv"), buf)?;
    let bc = induce(w, alpha, t, 0, &visits, &sched, 1.0, 0.0, s.j_cut + 1)?;
    let z_probe = 0.01;
    let probe = w.twisted(&ctx.sys, &ctx.path, &ctx.phi, &ctx.f, Complex64::new(z_probe, 0.0))?;
    let k = measure_constants(&ctx.sys, &ctx.path, &bc, &probe, &ctx.f, 0.5, 2.0, z_probe)?;
    let rep = block_rpf(&ctx.sys, &ctx.path, &ctx.phi, &ctx.f, w, &bc, &k, s.j_cut, s.rays, 6)?;
    sink.assertions.push(Assertion::flag("blocks", "schedule sandwich", sched.sandwich_holds()));
    sink.assertions.push(Assertion::le("blocks", "worst eps0 ratio", bc.worst_eps0_ratio(), 1.0));
    sink.assertions.push(Assertion::le("blocks", "z=0 deviation", rep.z0_deviation, s.tol));
    sink.assertions.push(Assertion::le("blocks", "normalization residual", rep.max_normalization_residual, s.tol));
    sink.assertions.push(Assertion::le("blocks", "rank-one ratio", rep.max_ratio, 2.0 * s.eps0));
    sink.results.insert(
        "blocks".into(),
        json!({"c1": c1, "blocks": bc.count(), "radius": rep.radius, "constants": rep.constants,
               "z0_deviation": rep.z0_deviation, "max_normalization_residual": rep.max_normalization_residual,
               "max_ratio": rep.max_ratio, "derivative_error": rep.derivative_error}),
    );
    Ok(())
}
