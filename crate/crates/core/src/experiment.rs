//! Experiment dispatch and artifact emission.
//!
//! Each run writes its data CSVs, gnuplot-ready plot files, and a manifest
//! JSON (config echo, content hash, wall time, warnings, per-experiment
//! summaries) into the output directory. Replicate work is distributed over
//! a local thread pool; reductions are performed in replicate order, so the
//! emitted bytes do not depend on the thread count. Data and plot files are
//! byte-reproducible for a fixed (config, seed); only the manifest's
//! `wall_ms` field varies between reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::corrector::{corrector_moment_sweep, CorrectorOptions};
use crate::environment::{moment_condition_check, sample_environment};
use crate::error::{Error, Result};
use crate::heat::{on_diagonal_series, EvolutionParams};
use crate::lattice::TorusLattice;
use crate::relaxation::{
    fit_decay, fit_log_log, necessity_experiment, run_relaxation, DecayFit, NecessityConfig,
};
use crate::weights::{
    build_inverse_index, compute_moderation, minimal_resistance, weight_moment_estimate,
    DetourParams, PathCertificate,
};

/// Files written by a run, relative to the output directory.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub manifest: serde_json::Value,
}

/// Run a validated experiment and write every artifact under
/// `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let lattice = TorusLattice::new(cfg.dim, cfg.side)?;
    let params = EvolutionParams::new(cfg.dt, &cfg.t_grid, cfg.dim)?;

    let mut files: Vec<String> = Vec::new();
    let mut summary = serde_json::Map::new();

    match cfg.experiment {
        ExperimentKind::Relax => {
            let spec = cfg.relax.as_ref().expect("validated");
            let series = run_relaxation(
                &cfg.laws,
                &cfg.observable,
                &spec.p_list,
                &params,
                spec.reps,
                cfg.seed,
                &lattice,
            )?;
            let mut moments = String::from("t,p,moment,stderr,reps\n");
            for s in &series {
                for e in &s.entries {
                    writeln!(
                        moments,
                        "{},{},{},{},{}",
                        e.t, s.p, e.estimate, e.stderr, s.meta.reps
                    )
                    .expect("string write");
                }
            }
            write_file(&cfg.out_dir, "moments.csv", &moments, &mut files)?;

            let mut fit_rows = String::from("series_id,exponent,stderr,window_lo,window_hi,r2\n");
            let mut fit_summaries = Vec::new();
            for s in &series {
                let fit = fit_decay(s, spec.fit_window)?;
                writeln!(
                    fit_rows,
                    "p{},{},{},{},{},{}",
                    s.p, fit.exponent, fit.stderr, fit.window.0, fit.window.1, fit.r2
                )
                .expect("string write");
                fit_summaries.push(serde_json::json!({
                    "p": s.p,
                    "exponent": fit.exponent,
                    "stderr": fit.stderr,
                    "r2": fit.r2,
                }));
                let points: Vec<(f64, f64)> = s.entries.iter().map(|e| (e.t, e.estimate)).collect();
                let name = format!("relax_p{}.dat", s.p);
                let plot = emit_plot_data(&points, &cfg.out_dir.join(&name))?;
                files.push(name);
                if plot.dropped > 0 {
                    summary.insert(
                        format!("plot_dropped_p{}", s.p),
                        serde_json::json!(plot.dropped),
                    );
                }
            }
            write_file(&cfg.out_dir, "fits.csv", &fit_rows, &mut files)?;
            summary.insert("fits".into(), serde_json::json!(fit_summaries));
            summary.insert(
                "moment_condition".into(),
                serde_json::to_value(
                    series
                        .iter()
                        .filter_map(|s| s.meta.moment_verdict.clone())
                        .collect::<Vec<_>>(),
                )
                .expect("serializable"),
            );
            summary.insert(
                "dissipation_ok".into(),
                serde_json::json!(series.iter().all(crate::relaxation::dissipation_check)),
            );
        }
        ExperimentKind::Kernel => {
            let spec = cfg.kernel.as_ref().expect("validated");
            let env = sample_environment(&cfg.laws, &lattice, cfg.seed)?;
            let rows = on_diagonal_series(&env, &params)?;
            let mut csv = String::from("t,p00,mass,l2_half_identity_gap\n");
            for r in &rows {
                writeln!(csv, "{},{},{},{}", r.t, r.p00, r.mass, r.identity_gap())
                    .expect("string write");
            }
            write_file(&cfg.out_dir, "kernel.csv", &csv, &mut files)?;
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.t >= spec.fit_window.0 && r.t <= spec.fit_window.1)
                .map(|r| (r.t, r.p00))
                .collect();
            let fit = fit_log_log(&points, spec.fit_window)?;
            summary.insert(
                "p00_fit".into(),
                serde_json::json!({
                    "exponent": fit.exponent,
                    "stderr": fit.stderr,
                    "r2": fit.r2,
                    "window": [fit.window.0, fit.window.1],
                }),
            );
            let all_points: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.p00)).collect();
            emit_plot_data(&all_points, &cfg.out_dir.join("kernel_p00.dat"))?;
            files.push("kernel_p00.dat".into());
        }
        ExperimentKind::Corrector => {
            let spec = cfg.corrector.as_ref().expect("validated");
            let opts = CorrectorOptions {
                tol: spec.tol,
                jacobi_preconditioner: spec.jacobi,
                max_iterations: None,
            };
            let rows = corrector_moment_sweep(
                &cfg.laws,
                &lattice,
                spec.direction,
                &spec.mu_list,
                &spec.p_list,
                spec.reps,
                cfg.seed,
                &opts,
            )?;
            let mut csv =
                String::from("mu,p,moment_estimate,stderr,reps_used,nonconverged_count\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    r.mu, r.p, r.moment, r.stderr, r.reps_used, r.nonconverged
                )
                .expect("string write");
            }
            write_file(&cfg.out_dir, "corrector_sweep.csv", &csv, &mut files)?;
            summary.insert(
                "nonconverged".into(),
                serde_json::json!(rows.first().map(|r| r.nonconverged).unwrap_or(0)),
            );
        }
        ExperimentKind::Weights => {
            let spec = cfg.weights.as_ref().expect("validated");
            let env = sample_environment(&cfg.laws, &lattice, cfg.seed)?;
            let certs: Vec<PathCertificate> = (0..lattice.edge_count())
                .map(|e| minimal_resistance(&env, e))
                .collect::<Result<_>>()?;
            let mut csv = String::from("edge,w,path_len,provenance\n");
            for c in &certs {
                writeln!(csv, "{},{},{},{}", c.edge, c.weight, c.len(), c.provenance)
                    .expect("string write");
            }
            // Exercise the detour construction on the same environment.
            let detour_params = match spec.detour_epsilon {
                Some(eps) => DetourParams::new(eps, (0..cfg.dim).collect(), &cfg.laws)?,
                None => DetourParams::default_for(&cfg.laws)?,
            };
            let mut detour_failures = 0usize;
            for e in 0..lattice.edge_count() {
                match crate::weights::detour_path(&env, e, &detour_params) {
                    Ok(c) => writeln!(csv, "{},{},{},{}", c.edge, c.weight, c.len(), c.provenance)
                        .expect("string write"),
                    Err(_) => detour_failures += 1,
                }
            }
            write_file(&cfg.out_dir, "certificates.csv", &csv, &mut files)?;
            let index = build_inverse_index(&certs, &lattice)?;
            summary.insert(
                "inverse_index_total".into(),
                serde_json::json!(index.total_size()),
            );
            summary.insert("detour_failures".into(), serde_json::json!(detour_failures));

            let moderation =
                compute_moderation(&env, spec.moderation_q, spec.moderation_r_exponent)?;
            let mut mod_csv = String::from("q,r_exponent,value\n");
            writeln!(
                mod_csv,
                "{},{},{}",
                moderation.q, moderation.r_exponent, moderation.value
            )
            .expect("string write");
            write_file(&cfg.out_dir, "moderation.csv", &mod_csv, &mut files)?;

            let rows =
                weight_moment_estimate(&cfg.laws, &lattice, &spec.q_list, spec.reps, cfg.seed)?;
            let mut csv = String::from("q,stat,mean,stderr,fail_count\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},w_inv_q,{},{},{}",
                    r.q, r.w_inv_q_mean, r.w_inv_q_stderr, r.disconnected
                )
                .expect("string write");
                writeln!(
                    csv,
                    "{},path_len_q,{},{},{}",
                    r.q, r.path_len_q_mean, r.path_len_q_stderr, r.disconnected
                )
                .expect("string write");
            }
            write_file(&cfg.out_dir, "weight_moments.csv", &csv, &mut files)?;
            summary.insert(
                "moment_condition".into(),
                serde_json::to_value(moment_condition_check(&cfg.laws, &spec.q_list)?)
                    .expect("serializable"),
            );
        }
        ExperimentKind::Necessity => {
            let spec = cfg.necessity.as_ref().expect("validated");
            let ncfg = NecessityConfig {
                theta: spec.theta.clone(),
                q: spec.q,
                side: cfg.side,
                observable: cfg.observable.clone(),
            };
            let table = necessity_experiment(&ncfg, &params, spec.reps, cfg.seed)?;
            let mut csv = String::from("t,q,s_value,raw_moment,stderr\n");
            for r in &table.rows {
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.t, table.q, r.s_value, r.raw, r.stderr
                )
                .expect("string write");
            }
            write_file(&cfg.out_dir, "necessity.csv", &csv, &mut files)?;
            summary.insert(
                "moment_condition".into(),
                serde_json::to_value(moment_condition_check(&cfg.laws, &[spec.q as f64])?)
                    .expect("serializable"),
            );
            summary.insert("p0".into(), serde_json::json!(table.p0));
            summary.insert("growth_ratio".into(), serde_json::json!(table.growth_ratio));
            summary.insert(
                "growth_witnessed".into(),
                serde_json::json!(table.growth_witnessed),
            );
            summary.insert("band_ratio".into(), serde_json::json!(table.band_ratio));
            let points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.t, r.s_value)).collect();
            emit_plot_data(&points, &cfg.out_dir.join("necessity_s.dat"))?;
            files.push("necessity_s.dat".into());
        }
    }

    let config_echo = serde_json::to_value(cfg).expect("config serializes");
    let manifest = serde_json::json!({
        "schema_version": cfg.schema_version,
        "experiment": cfg.experiment.to_string(),
        "seed": cfg.seed,
        "config": config_echo,
        "content_hash": content_hash(cfg),
        "warnings": cfg.warnings,
        "outputs": files,
        "summary": serde_json::Value::Object(summary),
        "wall_ms": started.elapsed().as_millis() as u64,
    });
    let manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut files = files;
    write_file(&cfg.out_dir, "manifest.json", &manifest_text, &mut files)?;

    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        files,
        manifest,
    })
}

/// Content hash of the effective configuration: any field change changes
/// the hash.
pub fn content_hash(cfg: &ExperimentConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canon.as_bytes()))
}

fn write_file(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    files.push(name.to_string());
    Ok(())
}

/// Result of writing a plot-data file.
#[derive(Debug, Clone, Copy)]
pub struct PlotSummary {
    pub written: usize,
    /// Points dropped because t or the value was outside the log domain.
    pub dropped: usize,
    pub exponent: Option<f64>,
}

/// Write whitespace-separated `(log10 t, log10 value)` rows with a comment
/// header carrying the fitted exponent. Nonpositive points cannot be logged
/// and are dropped with a count.
pub fn emit_plot_data(points: &[(f64, f64)], path: &Path) -> Result<PlotSummary> {
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no data to plot for {}",
            path.display()
        )));
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(t, v)| *t > 0.0 && *v > 0.0)
        .collect();
    let dropped = points.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no positive data to plot for {}",
            path.display()
        )));
    }
    let exponent = if usable.len() >= 4 {
        fit_log_log(&usable, (usable[0].0, usable[usable.len() - 1].0))
            .ok()
            .map(|f: DecayFit| f.exponent)
    } else {
        None
    };
    let mut text = String::new();
    match exponent {
        Some(e) => writeln!(text, "# fitted_exponent = {e}").expect("string write"),
        None => writeln!(text, "# fitted_exponent = unavailable").expect("string write"),
    }
    if dropped > 0 {
        writeln!(text, "# dropped_nonpositive = {dropped}").expect("string write");
    }
    for (t, v) in &usable {
        writeln!(text, "{} {}", t.log10(), v.log10()).expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(PlotSummary {
        written: usable.len(),
        dropped,
        exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn read(dir: &Path, name: &str) -> String {
        std::fs::read_to_string(dir.join(name)).unwrap()
    }

    fn kernel_config(out: &Path) -> String {
        format!(
            r#"
schema_version = 1
experiment = "kernel"
seed = 3

[lattice]
d = 2
side = 16

[[law]]
kind = "constant"
value = 1.0

[evolution]
t_grid = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0]

[kernel]
fit_window = [2.0, 16.0]

[output]
dir = "{}"
"#,
            out.display()
        )
    }

    #[test]
    fn kernel_experiment_emits_conservative_series() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&kernel_config(dir.path())).unwrap();
        let summary = run_experiment(&cfg).unwrap();
        assert!(summary.files.iter().any(|f| f == "kernel.csv"));
        let csv = read(dir.path(), "kernel.csv");
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let mass: f64 = fields[2].parse().unwrap();
            assert!((mass - 1.0).abs() <= 1e-9, "mass column {mass}");
            let gap: f64 = fields[3].parse().unwrap();
            assert!(gap <= 1e-9);
        }
        assert!(read(dir.path(), "manifest.json").contains("content_hash"));
    }

    #[test]
    fn reruns_are_byte_identical_across_thread_counts() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let base = r#"
schema_version = 1
experiment = "relax"
seed = 11
threads = {T}

[lattice]
d = 2
side = 10

[[law]]
kind = "uniform"
lo = 0.0
hi = 1.0

[evolution]
t_grid = [0.0, 1.0, 2.0, 4.0]

[relax]
reps = 6
p_list = [1, 2]
fit_window = [1.0, 4.0]

[output]
dir = "{D}"
"#;
        // fit_window [1,4] has 3 points; widen via t_grid instead.
        let base = base.replace(
            "t_grid = [0.0, 1.0, 2.0, 4.0]",
            "t_grid = [0.0, 1.0, 2.0, 3.0, 4.0]",
        );
        let cfg1 = parse_config(
            &base
                .replace("{T}", "1")
                .replace("{D}", &dir1.path().display().to_string()),
        )
        .unwrap();
        let cfg2 = parse_config(
            &base
                .replace("{T}", "2")
                .replace("{D}", &dir2.path().display().to_string()),
        )
        .unwrap();
        let s1 = run_experiment(&cfg1).unwrap();
        run_experiment(&cfg2).unwrap();
        for name in ["moments.csv", "fits.csv", "relax_p1.dat", "relax_p2.dat"] {
            assert_eq!(
                read(dir1.path(), name),
                read(dir2.path(), name),
                "{name} differs across thread counts"
            );
        }
        // The manifest records the moment-condition verdict for the run.
        let verdicts = &s1.manifest["summary"]["moment_condition"];
        assert!(verdicts.as_array().is_some_and(|v| !v.is_empty()));
        assert!(verdicts[0]["pass"].is_boolean());
    }

    #[test]
    fn manifest_hash_tracks_config_changes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg1 = parse_config(&kernel_config(dir.path())).unwrap();
        let mut cfg2 = cfg1.clone();
        cfg2.seed = 4;
        assert_ne!(content_hash(&cfg1), content_hash(&cfg2));
        let mut cfg3 = cfg1.clone();
        cfg3.t_grid.push(32.0);
        assert_ne!(content_hash(&cfg1), content_hash(&cfg3));
        assert_eq!(content_hash(&cfg1), content_hash(&cfg1.clone()));
    }

    #[test]
    fn plot_data_header_and_log_domain() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.dat");
        let points: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&t| (t, t.powf(-1.5)))
            .collect();
        let s = emit_plot_data(&points, &path).unwrap();
        assert_eq!(s.dropped, 0);
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# fitted_exponent = 1.5"), "{first}");

        let with_zero = [
            (0.0, 1.0),
            (1.0, 1.0),
            (2.0, 0.5),
            (4.0, 0.25),
            (8.0, 0.125),
        ];
        let s = emit_plot_data(&with_zero, &path).unwrap();
        assert_eq!(s.dropped, 1);
        assert_eq!(s.written, 4);

        assert!(emit_plot_data(&[], &path).is_err());
        assert!(emit_plot_data(&[(1.0, 0.0)], &path).is_err());
    }

    #[test]
    fn weights_experiment_writes_certificates_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
schema_version = 1
experiment = "weights"
seed = 5

[lattice]
d = 2
side = 6

[[law]]
kind = "uniform"
lo = 0.3
hi = 1.0

[weights]
q_list = [1.0, 2.0]
reps = 40

[output]
dir = "{}"
"#,
            dir.path().display()
        );
        let cfg = parse_config(&text).unwrap();
        run_experiment(&cfg).unwrap();
        let certs = read(dir.path(), "certificates.csv");
        assert!(certs.lines().count() > 72); // optimal plus detour rows
        assert!(certs.contains("optimal"));
        assert!(certs.contains("detour"));
        let moments = read(dir.path(), "weight_moments.csv");
        assert!(moments.contains("w_inv_q"));
        assert!(moments.contains("path_len_q"));
        let moderation = read(dir.path(), "moderation.csv");
        assert!(moderation.lines().count() == 2);
    }
}
