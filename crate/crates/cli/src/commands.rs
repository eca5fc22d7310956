//! The six pipeline verbs as library functions; `main` only parses flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffnet::{Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stcm_core::grid::{CostMapStack, OccupancyGrid};
use stcm_core::intentions::{cluster_trajectories, IntentionSet};
use stcm_core::metrics::{build_candidates, evaluate, EvalSummary, PlanInputs, Selection};
use stcm_core::models::Model;
use stcm_core::planner::{rank, rule_cost_map, score_all, CandidateSource};
use stcm_core::synth::{generate_scenario, make_training_example, random_spec, TrainingExample};
use stcm_core::training::{supervision, EpochLog, Supervision, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{input, io_err, CliError, Result};
use crate::gradcheck::{format_report, full_suite, TOLERANCE};
use crate::pgm;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Maps `f` over `items` on scoped worker threads, keeping input order so the
/// result does not depend on the worker count.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Scenario seeds and count written next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub run_seed: u64,
    pub seeds: Vec<u64>,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

/// Generates `count` examples in memory.
pub fn generate(cfg: &RunConfig, count: usize) -> Result<Dataset> {
    let seeds: Vec<u64> = (0..count).map(|i| cfg.scenario_seed(i)).collect();
    let examples = par_map(&seeds, |&seed| {
        let spec = random_spec(seed, &cfg.grid, cfg.data.crossing_bias);
        let scenario = generate_scenario(&spec)?;
        Ok(make_training_example(&scenario, &cfg.grid, cfg.data.map_channels)?)
    })?;
    Ok(Dataset {
        grid: cfg.grid.clone(),
        map_channels: cfg.data.map_channels,
        examples,
    })
}

pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<Manifest> {
    let ds = generate(cfg, count)?;
    ds.save(out)?;
    let manifest = Manifest {
        count,
        run_seed: cfg.seed,
        seeds: ds.examples.iter().map(|e| e.seed).collect(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write(&manifest_path(out), text)?;
    if let Some(dir) = out.parent() {
        cfg.write_resolved(if dir.as_os_str().is_empty() { Path::new(".") } else { dir })?;
    }
    Ok(manifest)
}

pub fn save_intentions(set: &IntentionSet, path: &Path) -> Result<()> {
    write(path, toml::to_string(set).expect("intention set serializes"))
}

pub fn load_intentions(path: &Path) -> Result<IntentionSet> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let set: IntentionSet =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if set.means.is_empty() || set.member_counts.len() != set.means.len() {
        return input(format!("{}: malformed intention set", path.display()));
    }
    Ok(set)
}

pub fn fit_intentions(cfg: &RunConfig, examples: &[TrainingExample]) -> Result<IntentionSet> {
    if examples.is_empty() {
        return input("cannot cluster an empty dataset");
    }
    let trajs: Vec<_> = examples.iter().map(|e| e.expert_future(cfg.grid.tau).to_vec()).collect();
    let mut set = cluster_trajectories(&trajs, cfg.cluster.eps, cfg.cluster.min_pts)?;
    if let Some(m) = cfg.cluster.membership_eps {
        set.membership_eps = m;
    }
    Ok(set)
}

pub fn cmd_cluster(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<IntentionSet> {
    let set = fit_intentions(cfg, &dataset.examples)?;
    save_intentions(&set, out)?;
    Ok(set)
}

pub fn supervise(cfg: &RunConfig, examples: &[TrainingExample], set: Option<&IntentionSet>) -> Result<Vec<Supervision>> {
    examples
        .iter()
        .map(|e| Ok(supervision(e, &cfg.grid, cfg.planner.footprint, set, cfg.train.params.weight_mode)?))
        .collect()
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,steps,total,pred,pred_ce,prior,aux\n");
    for l in log {
        let t = &l.terms;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", l.epoch, l.steps, t.total, t.pred, t.pred_ce, t.prior, t.aux);
    }
    s
}

/// Trains a fresh model; `on_epoch` sees each epoch's log and the model.
pub fn train_model<S: Scalar>(
    cfg: &RunConfig,
    examples: &[TrainingExample],
    set: Option<&IntentionSet>,
    mut on_epoch: impl FnMut(&EpochLog, &Model<S>) -> Result<()>,
) -> Result<(Model<S>, Vec<EpochLog>)> {
    let mut mcfg = cfg.model.clone();
    mcfg.intentions = set.map_or(0, |s| s.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::<S>::new(cfg.model_kind(), mcfg, &mut rng)?;
    let sup = supervise(cfg, examples, set)?;
    let mut trainer = Trainer::new(model, cfg.train.params.clone(), cfg.loss.clone())?;
    let mut log = Vec::with_capacity(cfg.train.params.epochs);
    for e in 1..=cfg.train.params.epochs {
        let l = trainer.epoch(e, examples, &sup)?;
        on_epoch(&l, &trainer.model)?;
        log.push(l);
    }
    Ok((trainer.model, log))
}

/// Trains, writing `loss_log.csv`, periodic and final checkpoints and the resolved config into `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Dataset,
    set: Option<&IntentionSet>,
    out: &Path,
    precision: Precision,
) -> Result<Vec<EpochLog>> {
    dataset.check_compatible(&cfg.grid, cfg.data.map_channels)?;
    if dataset.examples.is_empty() {
        return input("training dataset is empty");
    }
    cfg.write_resolved(out)?;
    let mut cfg = cfg.clone();
    cfg.model.intentions = set.map_or(0, |s| s.len());
    match precision {
        Precision::Single => train_and_save::<f32>(&cfg, dataset, set, out),
        Precision::Double => train_and_save::<f64>(&cfg, dataset, set, out),
    }
}

fn train_and_save<S: Scalar>(cfg: &RunConfig, ds: &Dataset, set: Option<&IntentionSet>, out: &Path) -> Result<Vec<EpochLog>> {
    let every = cfg.train.checkpoint_every;
    let steps_per_epoch = ds.examples.len().div_ceil(cfg.train.params.batch_size) as u64;
    let mut so_far = Vec::new();
    let (model, log) = train_model::<S>(cfg, &ds.examples, set, |l, m| {
        so_far.push(*l);
        write(&out.join("loss_log.csv"), loss_log_csv(&so_far))?;
        if every > 0 && l.epoch % every == 0 {
            let ck = Checkpoint::from_model(m, l.epoch as u64 * steps_per_epoch, cfg);
            ck.save(&out.join(format!("checkpoint_epoch{:04}.cmec", l.epoch)))?;
        }
        Ok(())
    })?;
    let steps = log.len() as u64 * steps_per_epoch;
    Checkpoint::from_model(&model, steps, cfg).save(&out.join("model.cmec"))?;
    Ok(log)
}

/// RuleCM inputs: current occupancy and non-drivable cells replicated over the horizon.
pub fn rule_inputs(ex: &TrainingExample, horizon: usize) -> Result<PlanInputs> {
    let cur = ex.observed.last().ok_or_else(|| CliError::Input("example has no observations".into()))?;
    Ok(PlanInputs {
        cost: rule_cost_map(cur, ex.semantic.drivable(), horizon)?,
        predicted: None,
        extra: vec![],
    })
}

/// Learned cost maps and predictions; with an intention set and an imitation
/// head, adds `μ_k + s°_k` as extra candidates.
pub fn model_inputs<S: Scalar>(
    model: &Model<S>,
    ex: &TrainingExample,
    set: Option<&IntentionSet>,
    imitation_candidates: bool,
) -> Result<PlanInputs> {
    let observed: Vec<OccupancyGrid<S>> = ex.observed.iter().map(|g| g.cast()).collect();
    let out = model.infer(&observed, &ex.semantic)?;
    let to32 = |g: &OccupancyGrid<S>| g.cast::<f32>();
    let cost = CostMapStack::from_vec(
        out.cost_maps.steps(),
        out.cost_maps.height(),
        out.cost_maps.width(),
        out.cost_maps.values().iter().map(|v| v.as_f64() as f32).collect(),
    )?;
    let mut extra = Vec::new();
    if let (true, Some(set)) = (imitation_candidates && model.has_imitation(), set) {
        let im = model.infer_imitation(&out.cost_maps)?;
        if im.offsets.len() != set.len() {
            return input(format!("imitation head has K={} but the intention set has {}", im.offsets.len(), set.len()));
        }
        for (mu, off) in set.means.iter().zip(&im.offsets) {
            extra.push(mu.iter().zip(off).map(|(m, o)| (m.0 + o.0, m.1 + o.1)).collect());
        }
    }
    Ok(PlanInputs {
        cost,
        predicted: (!out.predicted_ogms.is_empty()).then(|| out.predicted_ogms.iter().map(to32).collect()),
        extra,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub setting: Selection,
    pub algorithm: String,
    pub variant: String,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl Report {
    pub fn csv(&self) -> String {
        let mut s = String::from("setting,algorithm,variant,minADE,CR,RV,TP,TN,S100\n");
        for r in &self.rows {
            let m = &r.summary;
            let (tp, tn, s100) = m.ogm.as_ref().map_or((None, None, None), |o| (o.tp, o.tn, o.s100));
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.2},{:.2},{},{},{}",
                r.setting.label(),
                r.algorithm,
                r.variant,
                m.min_ade,
                m.cr,
                m.rv,
                fmt_opt(tp),
                fmt_opt(tn),
                fmt_opt(s100)
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8} {:<10} {:<20} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "setting", "algorithm", "variant", "minADE", "CR", "RV", "TP", "TN", "S100"
        );
        for r in &self.rows {
            let m = &r.summary;
            let (tp, tn, s100) = m.ogm.as_ref().map_or((None, None, None), |o| (o.tp, o.tn, o.s100));
            let _ = writeln!(
                s,
                "{:<8} {:<10} {:<20} {:>8.3} {:>7.2} {:>7.2} {:>7} {:>7} {:>7}",
                r.setting.label(),
                r.algorithm,
                r.variant,
                m.min_ade,
                m.cr,
                m.rv,
                fmt_opt(tp),
                fmt_opt(tn),
                fmt_opt(s100)
            );
        }
        s
    }
}

/// Evaluates one algorithm under every selection, running inference once per example.
pub fn eval_rows(
    cfg: &RunConfig,
    examples: &[TrainingExample],
    set: Option<&IntentionSet>,
    algorithm: &str,
    variant: &str,
    infer: impl Fn(&TrainingExample) -> Result<PlanInputs> + Sync,
) -> Result<Vec<ReportRow>> {
    let inputs = par_map(examples, infer)?;
    let mut rows = Vec::new();
    for &sel in &cfg.eval.selections {
        if sel == Selection::Top3PerCluster && set.is_none() {
            return input("top-3-per-cluster selection needs an intention set");
        }
        let mut next = inputs.iter();
        let summary = evaluate(examples, &cfg.grid, &cfg.planner, sel, set, |_| {
            Ok(next.next().expect("one input per example").clone())
        })?;
        rows.push(ReportRow {
            setting: sel,
            algorithm: algorithm.to_string(),
            variant: variant.to_string(),
            summary,
        });
    }
    Ok(rows)
}

/// One row per selection setting and algorithm (RuleCM, then each checkpoint).
pub fn cmd_eval(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoints: &[Checkpoint],
    rule_cm: bool,
    set: Option<&IntentionSet>,
    out: &Path,
    precision: Precision,
) -> Result<Report> {
    dataset.check_compatible(&cfg.grid, cfg.data.map_channels)?;
    if !rule_cm && checkpoints.is_empty() {
        return input("nothing to evaluate: pass --rule-cm or at least one checkpoint");
    }
    let ex = &dataset.examples;
    let mut rows = Vec::new();
    if rule_cm {
        rows.extend(eval_rows(cfg, ex, set, "RuleCM", "rule", |e| rule_inputs(e, cfg.grid.horizon))?);
    }
    for ck in checkpoints {
        dataset
            .check_compatible(&ck.config.grid, ck.config.data.map_channels)
            .map_err(|e| CliError::Input(format!("checkpoint does not fit the dataset: {e}")))?;
        let imit = cfg.eval.imitation_candidates && set.is_some() && ck.config.model.intentions > 0;
        let variant = format!("{}{}", ck.kind.tag(), if imit { "+imitation" } else { "" });
        let algorithm = if ck.config.loss.beta > 0.0 && ck.config.model.intentions > 0 { "CME.aux" } else { "CME" };
        let new_rows = match precision {
            Precision::Single => {
                let m = ck.to_model::<f32>()?;
                eval_rows(cfg, ex, set, algorithm, &variant, |e| model_inputs(&m, e, set, imit))?
            }
            Precision::Double => {
                let m = ck.to_model::<f64>()?;
                eval_rows(cfg, ex, set, algorithm, &variant, |e| model_inputs(&m, e, set, imit))?
            }
        };
        rows.extend(new_rows);
    }
    // Group by setting so the table reads one block per selection rule.
    rows.sort_by_key(|r| cfg.eval.selections.iter().position(|s| *s == r.setting));
    let report = Report { rows };
    cfg.write_resolved(out)?;
    write(&out.join("report.csv"), report.csv())?;
    write(&out.join("report.txt"), report.table())?;
    Ok(report)
}

/// Files written by [`cmd_plan`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub candidates: usize,
    pub chosen: usize,
    pub images: Vec<PathBuf>,
}

/// Plans one generated scenario and renders its grids and the chosen trajectory.
pub fn cmd_plan(
    cfg: &RunConfig,
    checkpoint: Option<&Checkpoint>,
    scenario_seed: u64,
    set: Option<&IntentionSet>,
    out: &Path,
) -> Result<PlanOutput> {
    let spec = random_spec(scenario_seed, &cfg.grid, cfg.data.crossing_bias);
    let ex = make_training_example(&generate_scenario(&spec)?, &cfg.grid, cfg.data.map_channels)?;
    let inputs = match checkpoint {
        Some(ck) => model_inputs(&ck.to_model::<f32>()?, &ex, set, cfg.eval.imitation_candidates)?,
        None => rule_inputs(&ex, cfg.grid.horizon)?,
    };
    let mut cands = build_candidates(&ex, &inputs.extra, &cfg.grid, &cfg.planner)?;
    score_all(&mut cands, &inputs.cost, cfg.planner.off_grid_penalty)?;
    let order = rank(&cands)?;

    let mut csv = String::from("rank,source,shape,kappa0,kappa_rate,accel,cost\n");
    for (r, &i) in order.iter().enumerate() {
        let c = &cands[i];
        let src = match c.source {
            CandidateSource::Sampler => "sampler",
            CandidateSource::Imitation => "imitation",
        };
        let _ = writeln!(
            csv,
            "{},{},{:?},{},{},{},{}",
            r + 1,
            src,
            c.shape.kind,
            c.shape.kappa0,
            c.shape.kappa_rate,
            c.profile.accel,
            c.cost
        );
    }
    write(&out.join("candidates.csv"), csv)?;

    let (h, w) = (cfg.grid.height, cfg.grid.width);
    let mut images = Vec::new();
    let mut emit = |name: String, values: Vec<f64>| -> Result<()> {
        let p = out.join(name);
        write(&p, pgm::encode(w, h, &values))?;
        images.push(p);
        Ok(())
    };
    for (k, g) in ex.observed.iter().enumerate() {
        emit(format!("observed_{k:02}.pgm"), g.values().iter().map(|&v| v as f64).collect())?;
    }
    if let Some(pred) = &inputs.predicted {
        for (k, g) in pred.iter().enumerate() {
            emit(format!("predicted_{k:02}.pgm"), g.values().iter().map(|&v| v as f64).collect())?;
        }
    }
    for k in 0..inputs.cost.steps() {
        emit(format!("cost_{k:02}.pgm"), inputs.cost.step(k).iter().map(|&v| v as f64).collect())?;
    }
    let chosen = order[0];
    let current = ex.observed.last().expect("τ ≥ 1");
    let mut overlay: Vec<f64> = current
        .values()
        .iter()
        .zip(ex.semantic.drivable())
        .map(|(&o, &d)| if o >= 0.5 { 0.6 } else if d == 0 { 0.15 } else { 0.0 })
        .collect();
    for &(r, c) in cands[chosen].cells.iter().flatten() {
        overlay[r * w + c] = 1.0;
    }
    emit("overlay.pgm".into(), overlay)?;
    cfg.write_resolved(out)?;
    Ok(PlanOutput {
        candidates: cands.len(),
        chosen,
        images,
    })
}

/// Runs the finite-difference suite; any failing row is a numerical error.
pub fn cmd_gradcheck(seed: u64, probes: usize, inject_fault: bool) -> Result<String> {
    let reports = full_suite(seed, probes, inject_fault)?;
    let text = format_report(&reports);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passes(TOLERANCE)).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(text)
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}\n{text}", failed.join(", "))))
    }
}
