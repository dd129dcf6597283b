use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;
use unravel_core::hilbert::{basis, herm_eig, projector, tensor_ket, trace_distance};
use unravel_core::histories::{
    coarse_grain, compare_records, decoherence_table, pt_decoherence_functional, ProjectorSchedule, TableOptions,
};
use unravel_core::lindblad::{apply_superop, evolve_master, superop_expm};
use unravel_core::rng::RNG_NAME;
use unravel_core::unravel::{run_ensemble, run_trajectory, EnsembleOptions};
use unravel_core::{Operator, C64};

use crate::config::{lift, min_eig, observable, out_path, RunConfig};
use crate::Failure;

/// Smallest jump-record probability compared in relative terms.
const COMPARE_FLOOR: f64 = 1e-6;

pub struct Context {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

fn open(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn metadata(ctx: &Context, command: &str) -> serde_json::Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": ctx.cfg,
        "master_seed": ctx.cfg.master_seed,
        "backend": ctx.cfg.backend,
        "rng": RNG_NAME,
    })
}

fn write_header(w: &mut dyn Write, ctx: &Context, command: &str, extra: &[String]) -> io::Result<()> {
    writeln!(w, "# unravel {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "# command: {command}")?;
    writeln!(w, "# config: {}", serde_json::to_string(&ctx.cfg).expect("config serializes"))?;
    writeln!(w, "# master_seed: {}", ctx.cfg.master_seed)?;
    writeln!(w, "# backend: {}", ctx.cfg.backend)?;
    writeln!(w, "# rng: {RNG_NAME}")?;
    for e in extra {
        writeln!(w, "# {e}")?;
    }
    Ok(())
}

fn observables(cfg: &RunConfig, model: &unravel_core::LindbladModel) -> Vec<(String, Operator)> {
    let d = cfg.scenario.sys_dim;
    std::iter::once("n".to_string())
        .chain(cfg.observables.iter().cloned())
        .map(|name| {
            let op = observable(&name, d).expect("validated observable");
            (name, lift(&op, model))
        })
        .collect()
}

pub fn evolve(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    cfg.validate_common()?;
    let times = cfg.validate_time_grid()?;
    let (model, psi) = cfg.dynamics()?;
    let rho0 = projector(&psi);
    let states = evolve_master(&model, &rho0, &times, cfg.dt)?;
    let obs = observables(cfg, &model);
    let mut w = open(&ctx.out)?;
    write_header(&mut *w, ctx, "evolve", &[])?;
    let mut cols = vec!["t".to_string()];
    for (name, _) in &obs {
        cols.push(format!("re_{name}"));
        cols.push(format!("im_{name}"));
    }
    cols.push("trace".into());
    cols.push("min_eig".into());
    writeln!(w, "{}", cols.join(","))?;
    for (t, rho) in times.iter().zip(&states) {
        let mut row = vec![sci(*t)];
        for (_, op) in &obs {
            let v = (rho * op).trace();
            row.push(sci(v.re));
            row.push(sci(v.im));
        }
        row.push(sci(rho.trace().re));
        row.push(sci(min_eig(rho)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn traj(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    cfg.validate_common()?;
    cfg.validate_ensemble()?;
    let times = cfg.validate_time_grid()?;
    let engine = cfg.engine()?;
    let (model, psi) = cfg.dynamics()?;
    let mut w = open(&ctx.out)?;
    let mut meta = metadata(ctx, "traj");
    meta["kind"] = json!("meta");
    serde_json::to_writer(&mut w, &meta).map_err(io::Error::from)?;
    writeln!(w)?;
    for i in 0..cfg.n_traj {
        let r = run_trajectory(engine, &model, &psi, &times, cfg.dt, cfg.master_seed, i as u64, cfg.timing)?;
        r.write_jsonl(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensemble(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    cfg.validate_common()?;
    cfg.validate_ensemble()?;
    let times = cfg.validate_time_grid()?;
    let engine = cfg.engine()?;
    let (model, psi) = cfg.dynamics()?;
    let obs = observables(cfg, &model);
    let options = EnsembleOptions {
        workers: ctx.workers,
        timing: cfg.timing,
        observables: obs.iter().map(|(_, o)| o.clone()).collect(),
    };
    let stats = run_ensemble(engine, &model, &psi, &times, cfg.dt, cfg.n_traj, cfg.master_seed, &options)?;
    let oracle = if cfg.oracle {
        let rho0 = projector(&psi);
        Some(
            times
                .iter()
                .map(|&t| Ok(apply_superop(&superop_expm(&model, t)?, &rho0)))
                .collect::<Result<Vec<Operator>, unravel_core::Error>>()?,
        )
    } else {
        None
    };
    let mut w = open(&ctx.out)?;
    let estimator = if stats.weighted_estimator { "weighted" } else { "normalized" };
    write_header(&mut *w, ctx, "ensemble", &[format!("engine: {engine}"), format!("estimator: {estimator}")])?;
    let mut cols = vec!["t".to_string()];
    for (name, _) in &obs {
        cols.push(format!("re_{name}"));
        cols.push(format!("im_{name}"));
        cols.push(format!("stderr_{name}"));
    }
    cols.push("trace".into());
    cols.push("mean_weight".into());
    if oracle.is_some() {
        cols.push("trace_distance".into());
    }
    writeln!(w, "{}", cols.join(","))?;
    for (o, t) in times.iter().enumerate() {
        let mut row = vec![sci(*t)];
        for q in 0..obs.len() {
            let v = stats.observable_mean[o][q];
            row.push(sci(v.re));
            row.push(sci(v.im));
            row.push(sci(stats.observable_stderr[o][q]));
        }
        row.push(sci(stats.mean[o].trace().re));
        row.push(sci(stats.mean_weight[o]));
        if let Some(exact) = &oracle {
            row.push(sci(trace_distance(&stats.mean[o], &exact[o])));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PtReport {
    history: String,
    probability: f64,
    eigenvalues: Vec<f64>,
    dominance: f64,
}

pub fn hist(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    cfg.validate_common()?;
    cfg.validate_history()?;
    let backend = cfg.backend()?;
    let h = &cfg.history;
    let model = cfg.split_model()?;
    let psi = tensor_ket(&cfg.initial_system_ket()?, &basis(cfg.scenario.mode_dim, 0));
    let rho0 = projector(&psi);
    let schedule = ProjectorSchedule::photon_number(cfg.scenario.sys_dim, cfg.scenario.mode_dim)?;
    let options = TableOptions {
        pruning: h.pruning,
        backend,
        off_diagonal: h.off_diagonal,
        pt_norms: h.pt,
        workers: ctx.workers,
    };
    let table = decoherence_table(&model, &rho0, &schedule, h.n, h.delta_t, &options)?;
    let summary = table.summary();

    let mut pt_report = Vec::new();
    if h.pt {
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.sort_by(|&a, &b| table.probability(b).total_cmp(&table.probability(a)).then(a.cmp(&b)));
        for &i in order.iter().take(5) {
            let hist = &table.histories[i];
            let d = pt_decoherence_functional(&model, &rho0, &schedule, hist, hist, h.delta_t, backend)?;
            let herm = (&d + d.adjoint()) * C64::new(0.5, 0.0);
            let mut ev: Vec<f64> = herm_eig(&herm)?.values.iter().copied().collect();
            ev.reverse();
            let dominance = if ev.len() > 1 && ev[1].abs() > 0.0 { ev[0] / ev[1].abs() } else { f64::INFINITY };
            pt_report.push(PtReport { history: hist.to_string(), probability: table.probability(i), eigenvalues: ev, dominance });
        }
    }

    let mut w = open(&ctx.out)?;
    write_header(&mut *w, ctx, "hist", &[])?;
    table.write_csv(&mut w)?;
    w.flush()?;

    let mut doc = metadata(ctx, "hist");
    doc["summary"] = serde_json::to_value(&summary).expect("summary serializes");
    if h.pt {
        doc["pt_diagonal"] = serde_json::to_value(&pt_report).expect("report serializes");
    }
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    match out_path(&ctx.out, ".summary.json") {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => eprintln!("{text}"),
    }
    Ok(())
}

pub fn compare(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    cfg.validate_common()?;
    cfg.validate_history()?;
    let backend = cfg.backend()?;
    let h = &cfg.history;
    let model = cfg.split_model()?;
    let psi_sys = cfg.initial_system_ket()?;
    let rho0 = projector(&tensor_ket(&psi_sys, &basis(cfg.scenario.mode_dim, 0)));
    let schedule = ProjectorSchedule::photon_number(cfg.scenario.sys_dim, cfg.scenario.mode_dim)?;
    let options = TableOptions { pruning: h.pruning, backend, off_diagonal: false, pt_norms: false, workers: ctx.workers };
    let table = decoherence_table(&model, &rho0, &schedule, h.n, h.delta_t, &options)?;
    let coarse = coarse_grain(&table, h.m, cfg.scenario.gamma1, cfg.omega_scale())?;
    let reduced = cfg.reduced_model()?;
    let t_final = h.n as f64 * h.delta_t;
    let rows = compare_records(&coarse, &reduced, &psi_sys, t_final, COMPARE_FLOOR)?;
    let max_err = rows
        .iter()
        .filter(|r| r.flag == "ok")
        .map(|r| r.relative_error)
        .fold(0.0, f64::max);

    let mut extra = vec![
        format!("window: {}", sci(coarse.window)),
        format!("multi_click_mass: {}", sci(coarse.multi_click_mass)),
        format!("truncated_mass: {}", sci(coarse.truncated_mass)),
        format!("max_relative_error: {}", sci(max_err)),
    ];
    for wmsg in coarse.warnings.iter().chain(model.regime_violations(h.delta_t).iter()) {
        extra.push(format!("warning: {wmsg}"));
    }
    let mut w = open(&ctx.out)?;
    write_header(&mut *w, ctx, "compare", &extra)?;
    writeln!(w, "record,times,p_history,p_jump,relative_error,flag")?;
    for r in &rows {
        let rec = if r.flag == "truncated" {
            "*".to_string()
        } else if r.windows.is_empty() {
            "-".to_string()
        } else {
            r.windows.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
        };
        let times = r.times.iter().map(|t| sci(*t)).collect::<Vec<_>>().join(";");
        writeln!(w, "{rec},{times},{},{},{},{}", sci(r.p_history), sci(r.p_jump), sci(r.relative_error), r.flag)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;
    use crate::config::{ModelKind, Overrides};

    fn run(f: fn(&Context) -> Result<(), Failure>, cfg: RunConfig, out: &Path, workers: Option<usize>) -> String {
        let ctx = Context { cfg, out: Some(out.to_path_buf()), workers };
        if f(&ctx).is_err() {
            panic!("command failed");
        }
        std::fs::read_to_string(out).unwrap()
    }

    fn rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().unwrap().split(',').map(String::from).collect();
        (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
    }

    fn column(text: &str, name: &str) -> Vec<f64> {
        let (header, body) = rows(text);
        let k = header.iter().position(|h| h == name).unwrap();
        body.iter().map(|r| r[k].parse().unwrap()).collect()
    }

    fn cavity(n_traj: usize, t_final: f64, n_outputs: usize) -> RunConfig {
        RunConfig { n_traj, t_final, n_outputs, ..RunConfig::default() }
    }

    #[test]
    fn evolve_population_decays_at_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let text = run(evolve, RunConfig::default(), &dir.path().join("e.csv"), None);
        assert!(text.starts_with("# unravel "));
        for key in ["# config: ", "# master_seed: ", "# backend: "] {
            assert!(text.contains(key));
        }
        let t = column(&text, "t");
        let n = column(&text, "re_n");
        assert_eq!(t.len(), 21);
        for (t, n) in t.iter().zip(&n) {
            assert!((n - (-0.04 * t).exp()).abs() <= 1e-6, "t={t}: {n}");
        }
    }

    #[test]
    fn evolve_without_coupling_is_constant() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.scenario.kappa = 0.0;
        let text = run(evolve, cfg, &dir.path().join("e.csv"), None);
        assert!(column(&text, "re_n").iter().all(|n| (n - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"scenario": {"kappa": "one"}}"#).unwrap();
        let e = crate::config::load(Some(&p), &Overrides::default()).unwrap_err();
        assert_eq!(e.field, "scenario.kappa");
        assert_eq!(Failure::from(e).exit_code(), 2);
        std::fs::write(&p, r#"{"n_trajectories": 3}"#).unwrap();
        let e = crate::config::load(Some(&p), &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("n_trajectories"));
        let ctx = Context { cfg: RunConfig { dt: -1.0, ..RunConfig::default() }, out: None, workers: None };
        match evolve(&ctx) {
            Err(f @ Failure::Config(_)) => assert!(f.to_string().contains("dt")),
            _ => panic!("negative dt accepted"),
        }
        assert_eq!(Failure::Numeric("x".into()).exit_code(), 3);
    }

    fn jsonl(text: &str) -> Vec<serde_json::Value> {
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn traj_is_seeded_and_counts_clicks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { master_seed: 11, ..cavity(10_000, 20.0, 2) };
        let a = run(traj, cfg.clone(), &dir.path().join("a.jsonl"), None);
        let b = run(traj, cfg, &dir.path().join("b.jsonl"), None);
        assert_eq!(a, b);
        let lines = jsonl(&a);
        assert_eq!(lines[0]["kind"], "meta");
        let n = lines.iter().filter(|l| l["kind"] == "header").count();
        assert_eq!(n, 10_000);
        let clicks = lines.iter().filter(|l| l["kind"] == "jump").count() as f64 / n as f64;
        let p = 1.0 - (-0.04f64 * 20.0).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((clicks - p).abs() <= 3.0 * sigma, "{clicks} vs {p}");
    }

    #[test]
    fn qsd_writes_no_events() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { engine: "qsd".into(), ..cavity(20, 5.0, 6) };
        let text = run(traj, cfg, &dir.path().join("q.jsonl"), None);
        let lines = jsonl(&text);
        assert!(lines.iter().all(|l| ["meta", "header", "snapshot"].contains(&l["kind"].as_str().unwrap())));
        assert_eq!(lines.iter().filter(|l| l["kind"] == "snapshot").count(), 20 * 6);
    }

    #[test]
    fn single_trajectory_ensemble_matches_traj() {
        let dir = tempfile::tempdir().unwrap();
        for engine in ["jumps", "qsd", "ortho"] {
            let cfg = RunConfig { engine: engine.into(), master_seed: 4, ..cavity(1, 10.0, 11) };
            let t = run(traj, cfg.clone(), &dir.path().join("t.jsonl"), None);
            let e = run(ensemble, cfg, &dir.path().join("e.csv"), None);
            let pops: Vec<f64> = jsonl(&t)
                .iter()
                .filter(|l| l["kind"] == "snapshot")
                .map(|l| {
                    let (re, im) = (l["re"][1].as_f64().unwrap(), l["im"][1].as_f64().unwrap());
                    let (re0, im0) = (l["re"][0].as_f64().unwrap(), l["im"][0].as_f64().unwrap());
                    (re * re + im * im) / (re * re + im * im + re0 * re0 + im0 * im0)
                })
                .collect();
            let mean = column(&e, "re_n");
            assert_eq!(pops.len(), mean.len());
            for (a, b) in pops.iter().zip(&mean) {
                assert!((a - b).abs() <= 1e-12, "{engine}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ensemble_ignores_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { engine: "qsd-linear".into(), master_seed: 8, observables: vec!["sigma_x".into()], ..cavity(500, 4.0, 5) };
        let a = run(ensemble, cfg.clone(), &dir.path().join("a.csv"), Some(1));
        let b = run(ensemble, cfg, &dir.path().join("b.csv"), Some(8));
        assert_eq!(a, b);
        assert!(a.contains("# estimator: weighted"));
    }

    fn total(kappa: f64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scenario.model = ModelKind::Total;
        cfg.scenario.kappa = kappa;
        cfg.history.n = 6;
        cfg
    }

    #[test]
    fn hist_without_coupling_never_clicks() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("h.csv");
        let text = run(hist, total(0.0), &out, None);
        let (header, body) = rows(&text);
        assert_eq!(header, ["h", "h'", "re_d", "im_d", "ratio"]);
        for r in &body {
            let d: f64 = r[2].parse().unwrap();
            let expected = if r[0] == "000000" && r[1] == "000000" { 1.0 } else { 0.0 };
            assert!((d - expected).abs() <= 1e-14, "{r:?}");
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("h.csv.summary.json")).unwrap()).unwrap();
        assert!((summary["summary"]["probability_sum"].as_f64().unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn hist_probabilities_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("h.csv");
        run(hist, total(1.0), &out, None);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("h.csv.summary.json")).unwrap()).unwrap();
        assert!((summary["summary"]["probability_sum"].as_f64().unwrap() - 1.0).abs() <= 1e-6);
        assert_eq!(summary["summary"]["n_histories"], 64);
    }

    #[test]
    fn compare_flags_truncated_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = total(1.0);
        cfg.history.n = 10;
        let full = run(compare, cfg.clone(), &dir.path().join("a.csv"), None);
        let (header, body) = rows(&full);
        assert_eq!(header, ["record", "times", "p_history", "p_jump", "relative_error", "flag"]);
        assert_eq!(body[0][0], "-");
        assert!(body.iter().all(|r| r[5] != "truncated"));
        cfg.history.pruning = 1e-4;
        let pruned = run(compare, cfg, &dir.path().join("b.csv"), None);
        let (_, body) = rows(&pruned);
        let last = body.last().unwrap();
        assert_eq!((last[0].as_str(), last[5].as_str()), ("*", "truncated"));
        assert!(last[2].parse::<f64>().unwrap() > 0.0);
    }
}
