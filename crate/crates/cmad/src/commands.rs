//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cmad_core::control::{policies_from_checkpoint, policies_to_checkpoint, ControlPolicy};
use cmad_core::costs::Classifier;
use cmad_core::experiment::{
    evaluate, prepare_assets, train_policies, train_score, train_task_classifier, Assets, Evaluation, ExperimentConfig,
    Method, Report, Scene, ScoreSource, Task,
};
use cmad_core::score::{ScoreNet, ScoreProvider};
use cmad_core::Error;

use crate::artifacts::{self, *};
use crate::config::{resolve_path, FileConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::pgm;

/// Side length of the gmm2d scatter plots in pixels.
const SCATTER_SIZE: u32 = 256;
const SCATTER_EXTENT: f64 = 4.0;

fn load_score(rc: &RunConfig) -> Result<Option<ScoreNet>> {
    match (&rc.score_checkpoint, rc.experiment.score_source) {
        (Some(p), ScoreSource::Trained) => {
            let path = resolve_path(p);
            let ck = artifacts::read_checkpoint(&path)?;
            Ok(Some(ScoreNet::from_checkpoint(&ck)?))
        }
        _ => Ok(None),
    }
}

fn load_classifier(rc: &RunConfig) -> Result<Option<Classifier>> {
    match &rc.classifier_checkpoint {
        Some(p) if rc.experiment.task == Task::Shapes16 => {
            let path = resolve_path(p);
            Ok(Some(Classifier::from_checkpoint(&artifacts::read_checkpoint(&path)?)?))
        }
        _ => Ok(None),
    }
}

/// Load configured models, train missing ones and save those into `dir`.
fn assets_for(rc: &RunConfig, dir: &Path) -> Result<Assets> {
    let cfg = &rc.experiment;
    let assets = prepare_assets(cfg, load_score(rc)?, load_classifier(rc)?)?;
    if !assets.score_curve.is_empty() {
        if let ScoreProvider::Network(net) = &assets.score {
            artifacts::write_checkpoint(&dir.join(SCORE_FILE), &net.to_checkpoint())?;
            artifacts::write_series(&dir.join(SCORE_CURVE_FILE), "dsm_loss", &assets.score_curve)?;
        }
    }
    if let (Some(acc), Some(c)) = (assets.classifier_accuracy, &assets.classifier) {
        artifacts::write_checkpoint(&dir.join(CLASSIFIER_FILE), &c.to_checkpoint())?;
        eprintln!("classifier held-out accuracy {acc:.4}");
    }
    Ok(assets)
}

fn write_config(rc: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, rc.snapshot().to_toml()).map_err(|e| CliError::io(&path, e))
}

fn write_images(cfg: &ExperimentConfig, scene: &Scene, eval: &Evaluation, grid: usize, dir: &Path) -> Result<()> {
    let s = &eval.samples;
    let per_agent = s.agents.len() == scene.agg.num_agents();
    match cfg.task.image() {
        Some(img) => {
            pgm::write_pgm(&dir.join(SAMPLES_FILE), &pgm::sample_grid(&s.composite, grid, img))?;
            if per_agent {
                for (i, x) in s.agents.iter().enumerate() {
                    let g = pgm::agent_grid(x, scene.agg.owners(), i, grid, img);
                    pgm::write_pgm(&dir.join(agent_file(i)), &g)?;
                }
            }
        }
        None => {
            pgm::write_pgm(&dir.join(SAMPLES_FILE), &pgm::scatter(&s.composite, SCATTER_SIZE, SCATTER_EXTENT))?;
            if per_agent {
                for (i, x) in s.agents.iter().enumerate() {
                    pgm::write_pgm(&dir.join(agent_file(i)), &pgm::scatter(x, SCATTER_SIZE, SCATTER_EXTENT))?;
                }
            }
        }
    }
    Ok(())
}

fn engine_or_training(e: Error, dir: &Path) -> CliError {
    if let Error::Training { curve, .. } = &e {
        // Keep what was recorded before the failure.
        let _ = artifacts::write_series(&dir.join("failed_curve.csv"), "objective", curve);
    }
    CliError::Engine(e)
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: Report,
}

/// Train (for learned methods), evaluate and write every artifact.
pub fn run(rc: &RunConfig) -> Result<RunOutcome> {
    let cfg = &rc.experiment;
    let dir = artifacts::create_dir(&rc.output_path())?;
    write_config(rc, &dir)?;
    let assets = assets_for(rc, &dir)?;
    let scene = Scene::new(cfg, &assets)?;
    let (policies, training) = if cfg.method.is_learned() {
        let ck_path = dir.join(POLICIES_FILE);
        let every = rc.checkpoint_every;
        let mut ck_err: Option<CliError> = None;
        let mut hook = |it: usize, ps: &[ControlPolicy]| {
            if every > 0 && (it + 1).is_multiple_of(every) && ck_err.is_none() {
                if let Err(e) = artifacts::write_checkpoint(&ck_path, &policies_to_checkpoint(ps)) {
                    ck_err = Some(e);
                }
            }
        };
        let (p, r) = train_policies(cfg, &scene, Some(&mut hook)).map_err(|e| engine_or_training(e, &dir))?;
        if let Some(e) = ck_err {
            return Err(e);
        }
        artifacts::write_checkpoint(&ck_path, &policies_to_checkpoint(&p))?;
        artifacts::write_curve(&dir.join(CURVE_FILE), &r.curve)?;
        (p, Some(r))
    } else {
        (Vec::new(), None)
    };
    let evaluation = evaluate(cfg, &scene, cfg.method, &policies)?;
    write_images(cfg, &scene, &evaluation, rc.grid_samples, &dir)?;
    let report = Report { method: cfg.method, evaluation, training, policies };
    artifacts::write_metrics(&dir.join(METRICS_FILE), &report.metrics())?;
    Ok(RunOutcome { dir, report })
}

/// Draw evaluation samples, using saved policies for learned methods.
pub fn sample(rc: &RunConfig, policies_path: Option<&Path>) -> Result<RunOutcome> {
    let cfg = &rc.experiment;
    let policies = if cfg.method.is_learned() {
        let path = match (policies_path, &rc.policies_checkpoint) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => resolve_path(p),
            (None, None) => {
                return Err(CliError::Config(format!(
                    "method {} needs a policies checkpoint (--policies or policies_checkpoint)",
                    cfg.method.name()
                )))
            }
        };
        let ps = policies_from_checkpoint(&artifacts::read_checkpoint(&path)?)?;
        if ps.len() != cfg.num_agents {
            return Err(CliError::Config(format!("checkpoint holds {} policies, config has {} agents", ps.len(), cfg.num_agents)));
        }
        ps
    } else {
        Vec::new()
    };
    let dir = artifacts::create_dir(&rc.output_path())?;
    write_config(rc, &dir)?;
    let assets = assets_for(rc, &dir)?;
    let scene = Scene::new(cfg, &assets)?;
    let evaluation = evaluate(cfg, &scene, cfg.method, &policies)?;
    write_images(cfg, &scene, &evaluation, rc.grid_samples, &dir)?;
    let report = Report { method: cfg.method, evaluation, training: None, policies };
    artifacts::write_metrics(&dir.join(METRICS_FILE), &report.metrics())?;
    Ok(RunOutcome { dir, report })
}

/// Train the task's score network; returns the checkpoint path.
pub fn train_score_net(rc: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = artifacts::create_dir(&rc.output_path())?;
    let (net, curve) = train_score(&rc.experiment)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(SCORE_FILE));
    artifacts::write_checkpoint(&path, &net.to_checkpoint())?;
    artifacts::write_series(&dir.join(SCORE_CURVE_FILE), "dsm_loss", &curve)?;
    Ok(path)
}

/// Train the shapes classifier; returns the checkpoint path and held-out accuracy.
pub fn train_classifier(rc: &RunConfig, out: Option<&Path>) -> Result<(PathBuf, f64)> {
    let dir = artifacts::create_dir(&rc.output_path())?;
    let (clf, acc) = train_task_classifier(&rc.experiment)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CLASSIFIER_FILE));
    artifacts::write_checkpoint(&path, &clf.to_checkpoint())?;
    Ok((path, acc))
}

/// Files a finished run directory must contain.
pub fn expected_artifacts(rc: &RunConfig) -> Vec<String> {
    let mut files = vec![CONFIG_FILE.to_string(), METRICS_FILE.to_string(), SAMPLES_FILE.to_string()];
    let cfg = &rc.experiment;
    if cfg.method.is_learned() {
        files.push(CURVE_FILE.into());
        files.push(POLICIES_FILE.into());
    }
    if cfg.method != Method::PoeNaive {
        files.extend((0..cfg.num_agents).map(agent_file));
    }
    files
}

/// One summary row per run directory; fails if any artifact is missing.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{:<32} {:<9} {:<13} {:>6} {:>12} {:>10} {:>9}", "run", "task", "method", "agents", "mean_psi", "std_err", "accuracy");
    for dir in dirs {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
        let rc = FileConfig::from_toml(&text)?.resolve()?;
        let missing: Vec<String> = expected_artifacts(&rc).into_iter().filter(|f| !dir.join(f).exists()).collect();
        if !missing.is_empty() {
            return Err(CliError::Format {
                path: dir.clone(),
                message: format!("incomplete run directory, missing {}", missing.join(", ")),
            });
        }
        let metrics = artifacts::read_metrics(&dir.join(METRICS_FILE))?;
        let get = |k: &str| metrics.iter().find(|(n, _)| n == k).map(|(_, v)| *v).unwrap_or(f64::NAN);
        let e = &rc.experiment;
        let _ = writeln!(
            out,
            "{:<32} {:<9} {:<13} {:>6} {:>12.5} {:>10.5} {:>9.4}",
            dir.display(),
            e.task.name(),
            e.method.name(),
            e.num_agents,
            get("mean_psi"),
            get("psi_std_err"),
            get("accuracy")
        );
    }
    Ok(out)
}
