use nalgebra::DVector;
use oedkit::benchmark::AdProblem;
use oedkit::criteria::{dense_posterior, evaluate, phi_a_estimate, CriterionKind, CriterionSpec};
use oedkit::design_opt::{greedy_placement, optimize_weights, DesignObjective, GreedyResult, LinearCriterion};
use oedkit::nonlinear::{NonlinearCriterion, NonlinearCriterionKind, NonlinearProblem, SeirdModel, TrainingSet};
use oedkit::posterior::DesignVector;
use oedkit::rng;
use oedkit::verify::run_checks;
use oedkit::OedError;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, NonlinearObjective, ProblemConfig, SearchMethod};
use crate::output::{num, Artifacts, Timings};
use crate::{CliError, FieldKind};

fn rt(e: OedError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn needs_budget(cfg: &ExperimentConfig, command: &str) -> Result<usize, CliError> {
    cfg.design
        .budget
        .ok_or_else(|| CliError::Validation(format!("{command} needs a budget: pass --k or set design.budget")))
}

fn check_budget(k: Option<usize>, n: usize) -> Result<(), CliError> {
    match k {
        Some(k) if k > n => Err(CliError::Validation(format!("budget {k} exceeds {n} candidates"))),
        _ => Ok(()),
    }
}

fn linear_spec(cfg: &ExperimentConfig, ad: &AdProblem) -> Result<CriterionSpec, CliError> {
    Ok(match cfg.design.criterion {
        CriterionKind::A => CriterionSpec::a_optimal(),
        CriterionKind::D => CriterionSpec::d_optimal(),
        CriterionKind::C => {
            let c = ad
                .model
                .region_average_gradient(cfg.design.goal_region)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            CriterionSpec::c_optimal(c)
        }
    })
}

/// Build the problem without running anything; used by `--dry-run`.
pub fn check(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let val = |e: OedError| CliError::Validation(e.to_string());
    match &cfg.problem {
        ProblemConfig::AdvectionDiffusion(b) => {
            let ad = b.build().map_err(val)?;
            check_budget(cfg.design.budget, ad.problem.n_sensors())?;
            linear_spec(cfg, &ad)?;
        }
        ProblemConfig::Seird(b) => {
            let (model, _) = b.build().map_err(val)?;
            check_budget(cfg.design.budget, model.config().observation_times.len())?;
        }
    }
    Ok(())
}

fn field_rows(ad: &AdProblem, values: &DVector<f64>) -> Vec<Vec<String>> {
    let nx = ad.model.config().nx;
    (0..values.len())
        .map(|idx| {
            let [x, y] = ad.model.cell_center(idx);
            vec![(idx % nx).to_string(), (idx / nx).to_string(), num(x), num(y), num(values[idx])]
        })
        .collect()
}

const FIELD_HEADER: [&str; 5] = ["ix", "iy", "x", "y", "value"];

/// Prior draw and noisy data from the run seed.
fn synthetic_data(ad: &AdProblem, seed: u64) -> Result<(DVector<f64>, DVector<f64>), OedError> {
    let p = &ad.problem;
    let truth = p.prior().sample(rng::substream_seed(seed, "truth", 0))?;
    let mut r = rng::substream(seed, "noise", 0);
    let y = p.forward().apply(&truth)? + rng::standard_normal(&mut r, p.n_sensors()) * p.sigma();
    Ok((truth, y))
}

fn sensor_value(ad: &AdProblem) -> Value {
    json!(ad.sensors.coords())
}

pub fn linear_oed(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let ProblemConfig::AdvectionDiffusion(bench) = &cfg.problem else {
        return Err(CliError::Validation("linear-oed needs an advection_diffusion problem".into()));
    };
    let d = &cfg.design;
    let mut timings = Timings::default();
    let ad = timings.time("build", || bench.build()).map_err(rt)?;
    let p = &ad.problem;
    let n_s = p.n_sensors();
    check_budget(d.budget, n_s)?;
    let spec = linear_spec(cfg, &ad)?;
    let obj = LinearCriterion::new(p, spec.clone(), d.estimator);
    let (phi_empty, phi_all) = timings
        .time("reference", || Ok((obj.value(&DesignVector::zeros(n_s))?, obj.value(&DesignVector::ones(n_s))?)))
        .map_err(rt)?;
    let w0 = DesignVector::new(DVector::from_element(n_s, d.initial_weight)).map_err(rt)?;
    let report = timings
        .time("optimize", || optimize_weights(&obj, &d.penalty, &w0, d.budget, &d.optimizer))
        .map_err(rt)?;
    let w_final = DesignVector::from_slice(report.w_binary.as_ref().unwrap_or(&report.w_relaxed)).map_err(rt)?;
    let mut out = Artifacts::create(&cfg.out_dir)?;
    let design_rows = (0..n_s).map(|i| {
        let [x, y] = ad.sensors.coords()[i];
        vec![i.to_string(), num(x), num(y), num(report.w_relaxed[i]), num(w_final.as_vector()[i])]
    });
    out.csv("design.csv", &["index", "x", "y", "weight_relaxed", "weight"], design_rows)?;

    let mut value = json!({
        "command": "linear-oed",
        "status": if report.aborted.is_some() { "aborted" } else { "ok" },
        "config": cfg,
        "problem": {"kind": cfg.problem.name(), "n_params": p.n_params(), "n_sensors": n_s, "sensors": sensor_value(&ad)},
        "criterion": {"kind": spec.kind(), "phi_empty": phi_empty, "phi_all": phi_all},
        "optimizer": report,
        "selected": w_final.active(0.5),
    });
    let mut failure = report.aborted.clone();
    if failure.is_none() {
        if let Err(e) = linear_tail(cfg, &ad, &spec, &w_final, &mut value, &mut out, &mut timings) {
            value["status"] = json!("failed");
            value["error"] = json!(e.message());
            failure = Some(e.message().to_string());
        }
    }
    finish(&mut out, value, timings, failure)
}

/// Criterion diagnostics and MAP/variance fields for the final design.
fn linear_tail(
    cfg: &ExperimentConfig,
    ad: &AdProblem,
    spec: &CriterionSpec,
    w_final: &DesignVector,
    value: &mut Value,
    out: &mut Artifacts,
    timings: &mut Timings,
) -> Result<(), CliError> {
    let p = &ad.problem;
    let est_cfg = &cfg.design.estimator;
    let phi_final = timings.time("evaluate", || evaluate(p, w_final, spec, est_cfg)).map_err(rt)?;
    value["criterion"]["phi_final"] = json!(phi_final);
    if spec.kind() == CriterionKind::A {
        let est = timings.time("evaluate", || phi_a_estimate(p, w_final, est_cfg)).map_err(rt)?;
        value["criterion"]["estimate"] = json!(est);
    }
    let (truth, y) = synthetic_data(ad, cfg.seed).map_err(rt)?;
    let (map, variance) = timings
        .time("fields", || {
            let map = p.posterior(w_final)?.map_point(&y)?;
            let variance = dense_posterior(p, w_final)?.covariance.diagonal();
            Ok::<_, OedError>((map, variance))
        })
        .map_err(rt)?;
    out.csv("truth.csv", &FIELD_HEADER, field_rows(ad, &truth))?;
    out.csv("map.csv", &FIELD_HEADER, field_rows(ad, &map))?;
    out.csv("variance.csv", &FIELD_HEADER, field_rows(ad, &variance))?;
    value["fields"] = json!({
        "map_error_m_norm": p.parameter_space().norm(&(map - &truth)),
        "mean_posterior_variance": variance.mean(),
    });
    Ok(())
}

fn finish(out: &mut Artifacts, mut value: Value, timings: Timings, aborted: Option<String>) -> Result<Value, CliError> {
    let mut names = out.names().to_vec();
    names.push("report.json".into());
    value["artifacts"] = json!(names);
    value["timings"] = timings.to_value();
    out.json("report.json", &value)?;
    match aborted {
        Some(msg) => Err(CliError::Runtime(format!("{msg} (partial report written)"))),
        None => Ok(value),
    }
}

fn seird_c(model: &SeirdModel, problem: &NonlinearProblem) -> DVector<f64> {
    let n_beta = model.config().n_beta;
    let mass = problem.prior().mass().diag();
    DVector::from_fn(mass.len(), |i, _| if i < n_beta { 1.0 / (n_beta as f64 * mass[i]) } else { 0.0 })
}

fn nonlinear_kind(cfg: &ExperimentConfig, model: &SeirdModel, problem: &NonlinearProblem) -> NonlinearCriterionKind {
    match cfg.design.nonlinear_criterion {
        NonlinearObjective::BayesRisk => NonlinearCriterionKind::BayesRisk,
        NonlinearObjective::GaussianA => NonlinearCriterionKind::GaussianA(cfg.design.laplace_trace),
        NonlinearObjective::GaussianC => NonlinearCriterionKind::GaussianC(seird_c(model, problem)),
    }
}

fn monotone(g: &GreedyResult) -> bool {
    std::iter::once(g.initial)
        .chain(g.values.iter().copied())
        .collect::<Vec<_>>()
        .windows(2)
        .all(|p| p[1] <= p[0])
}

fn times_rows(model: &SeirdModel, relaxed: Option<&[f64]>, w: &[f64]) -> Vec<Vec<String>> {
    let t = &model.config().observation_times;
    (0..t.len())
        .map(|i| vec![i.to_string(), num(t[i]), num(relaxed.map_or(w[i], |r| r[i])), num(w[i])])
        .collect()
}

fn trajectory_rows(model: &SeirdModel, m: &DVector<f64>) -> Result<Vec<Vec<String>>, OedError> {
    let t = &model.config().observation_times;
    let traj = model.trajectory(m)?;
    Ok(traj
        .iter()
        .zip(t)
        .map(|(s, ti)| std::iter::once(num(*ti)).chain(s.iter().map(|x| num(*x))).collect())
        .collect())
}

const TRAJECTORY_HEADER: [&str; 6] = ["t", "S", "E", "I", "R", "D"];

pub fn greedy(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let k = needs_budget(cfg, "greedy")?;
    let mut timings = Timings::default();
    match &cfg.problem {
        ProblemConfig::AdvectionDiffusion(bench) => {
            let ad = timings.time("build", || bench.build()).map_err(rt)?;
            let p = &ad.problem;
            check_budget(Some(k), p.n_sensors())?;
            let spec = linear_spec(cfg, &ad)?;
            let obj = LinearCriterion::new(p, spec.clone(), cfg.design.estimator);
            let g = timings.time("greedy", || greedy_placement(&obj, k)).map_err(rt)?;
            let mut out = Artifacts::create(&cfg.out_dir)?;
            let rows = (0..p.n_sensors()).map(|i| {
                let [x, y] = ad.sensors.coords()[i];
                vec![i.to_string(), num(x), num(y), num(g.design[i])]
            });
            out.csv("design.csv", &["index", "x", "y", "weight"], rows)?;
            let value = json!({
                "command": "greedy",
                "status": "ok",
                "config": cfg,
                "problem": {"kind": cfg.problem.name(), "n_params": p.n_params(), "n_sensors": p.n_sensors(), "sensors": sensor_value(&ad)},
                "criterion": {"kind": spec.kind()},
                "greedy": g,
                "monotone": monotone(&g),
            });
            finish(&mut out, value, timings, None)
        }
        ProblemConfig::Seird(bench) => {
            let (model, problem) = timings.time("build", || bench.build()).map_err(rt)?;
            check_budget(Some(k), problem.data_dim())?;
            let training = timings.time("training", || TrainingSet::draw(&problem, cfg.design.n_d, cfg.seed)).map_err(rt)?;
            let crit = NonlinearCriterion { problem: &problem, training: &training, kind: nonlinear_kind(cfg, &model, &problem) };
            let g = timings.time("greedy", || greedy_placement(&crit, k)).map_err(rt)?;
            let mut out = Artifacts::create(&cfg.out_dir)?;
            out.csv("times.csv", &["index", "time", "weight_relaxed", "weight"], times_rows(&model, None, &g.design))?;
            let times: Vec<f64> = g.selected.iter().map(|&i| model.config().observation_times[i]).collect();
            let value = json!({
                "command": "greedy",
                "status": "ok",
                "config": cfg,
                "problem": {"kind": cfg.problem.name(), "n_params": model.n_params(), "candidate_times": model.config().observation_times},
                "training": training_value(&training),
                "greedy": g,
                "selected_times": times,
                "monotone": monotone(&g),
            });
            finish(&mut out, value, timings, None)
        }
    }
}

fn training_value(t: &TrainingSet) -> Value {
    json!({"seed": t.seed, "requested": t.requested, "failed": t.failed, "used": t.len()})
}

pub fn nonlinear_oed(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let ProblemConfig::Seird(bench) = &cfg.problem else {
        return Err(CliError::Validation("nonlinear-oed needs a seird problem".into()));
    };
    let d = &cfg.design;
    let mut timings = Timings::default();
    let (model, problem) = timings.time("build", || bench.build()).map_err(rt)?;
    let n_s = problem.data_dim();
    check_budget(d.budget, n_s)?;
    let training = timings.time("training", || TrainingSet::draw(&problem, d.n_d, cfg.seed)).map_err(rt)?;
    let crit = NonlinearCriterion { problem: &problem, training: &training, kind: nonlinear_kind(cfg, &model, &problem) };
    let mut out_value = json!({
        "command": "nonlinear-oed",
        "config": cfg,
        "problem": {"kind": cfg.problem.name(), "n_params": model.n_params(), "candidate_times": model.config().observation_times},
        "training": training_value(&training),
    });
    let (w_final, relaxed, aborted) = match d.method {
        SearchMethod::Greedy => {
            let k = needs_budget(cfg, "nonlinear-oed with greedy search")?;
            let g = timings.time("search", || greedy_placement(&crit, k)).map_err(rt)?;
            out_value["monotone"] = json!(monotone(&g));
            out_value["greedy"] = json!(g);
            (g.design.clone(), None, None)
        }
        SearchMethod::Penalized => {
            let w0 = DesignVector::new(DVector::from_element(n_s, d.initial_weight)).map_err(rt)?;
            let r = timings
                .time("search", || optimize_weights(&crit, &d.penalty, &w0, d.budget, &d.optimizer))
                .map_err(rt)?;
            let w = r.w_binary.clone().unwrap_or_else(|| r.w_relaxed.clone());
            let relaxed = r.w_relaxed.clone();
            let aborted = r.aborted.clone();
            out_value["optimizer"] = json!(r);
            (w, Some(relaxed), aborted)
        }
    };
    let times: Vec<f64> = (0..n_s).filter(|&i| w_final[i] >= 0.5).map(|i| model.config().observation_times[i]).collect();
    out_value["status"] = json!(if aborted.is_some() { "aborted" } else { "ok" });
    out_value["selected_times"] = json!(times);
    if aborted.is_none() {
        let w = DesignVector::from_slice(&w_final).map_err(rt)?;
        let saa = timings.time("evaluate", || crit.evaluate(&w)).map_err(rt)?;
        out_value["criterion"] = json!({"kind": d.nonlinear_criterion, "final": saa});
    }
    let mut out = Artifacts::create(&cfg.out_dir)?;
    out.csv("times.csv", &["index", "time", "weight_relaxed", "weight"], times_rows(&model, relaxed.as_deref(), &w_final))?;
    let traj = trajectory_rows(&model, problem.prior().mean()).map_err(rt)?;
    out.csv("trajectory.csv", &TRAJECTORY_HEADER, traj)?;
    finish(&mut out, out_value, timings, aborted)
}

/// Returns the report and whether every check passed.
pub fn verify(cfg: &ExperimentConfig) -> Result<(Value, bool), CliError> {
    let mut timings = Timings::default();
    let checks = timings.time("checks", || Ok::<_, CliError>(run_checks(cfg.seed)))?;
    for c in &checks {
        println!("{} {}: {:.3e} (tolerance {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    let ok = checks.iter().all(|c| c.passed);
    let mut out = Artifacts::create(&cfg.out_dir)?;
    let value = json!({
        "command": "verify",
        "status": if ok { "ok" } else { "failed" },
        "seed": cfg.seed,
        "checks": checks,
    });
    let value = finish(&mut out, value, timings, None)?;
    Ok((value, ok))
}

pub fn export_field(cfg: &ExperimentConfig, field: FieldKind) -> Result<Value, CliError> {
    let mut timings = Timings::default();
    let mut out;
    match (&cfg.problem, field) {
        (ProblemConfig::Seird(bench), FieldKind::Trajectory) => {
            let (model, problem) = bench.build().map_err(rt)?;
            let m = problem.prior().mean();
            let rows = timings.time("export", || trajectory_rows(&model, m)).map_err(rt)?;
            out = Artifacts::create(&cfg.out_dir)?;
            out.csv("trajectory.csv", &TRAJECTORY_HEADER, rows)?;
        }
        (ProblemConfig::AdvectionDiffusion(bench), f) if f != FieldKind::Trajectory => {
            let ad = bench.build().map_err(rt)?;
            let p = &ad.problem;
            let n_s = p.n_sensors();
            let all = DesignVector::ones(n_s);
            let values = timings
                .time("export", || -> Result<DVector<f64>, OedError> {
                    Ok(match f {
                        FieldKind::PriorSample => p.prior().sample(rng::substream_seed(cfg.seed, "prior-samples", 0))?,
                        FieldKind::PriorVariance => dense_posterior(p, &DesignVector::zeros(n_s))?.covariance.diagonal(),
                        FieldKind::PosteriorVariance => dense_posterior(p, &all)?.covariance.diagonal(),
                        FieldKind::Map => {
                            let (_, y) = synthetic_data(&ad, cfg.seed)?;
                            p.posterior(&all)?.map_point(&y)?
                        }
                        FieldKind::Trajectory => unreachable!("guarded above"),
                    })
                })
                .map_err(rt)?;
            out = Artifacts::create(&cfg.out_dir)?;
            out.csv(&format!("{}.csv", field.file_stem()), &FIELD_HEADER, field_rows(&ad, &values))?;
        }
        (problem, f) => {
            return Err(CliError::Validation(format!(
                "field {} is not available for problem kind {}",
                f.file_stem(),
                problem.name()
            )))
        }
    }
    let value = json!({
        "command": "export-field",
        "status": "ok",
        "field": field.file_stem(),
        "config": cfg,
        "artifacts": out.names(),
        "timings": timings.to_value(),
    });
    Ok(value)
}
