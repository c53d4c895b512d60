//! Experiment protocol: task presets, asset preparation, training and
//! evaluation of every method under paired evaluation noise.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::{ImageShape, MaskAggregator, MaskPreset};
use crate::control::{ControlPolicy, PolicyShape};
use crate::costs::{Classifier, SeamSpec, SocConfig, TerminalCost, TerminalKind};
use crate::diffgraph::Tensor;
use crate::error::{bail, Result};
use crate::math;
use crate::noise::{NoiseStream, Purpose};
use crate::optimize::{
    controlwise_ido, joint_ido, sample_many, sample_poe_naive, Problem, SampleBatch, Steering, TrainMode,
    TrainPlan, TrainReport, UpdateHook,
};
use crate::score::{GaussianMixture, ScoreNet, ScoreParam, ScoreProvider, ScoreTrainConfig};
use crate::sde::{NoiseSchedule, TimeGrid};
use crate::shapes::{self, ClassifierTrainConfig, ShapesDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Two-dimensional agents over a four-mode mixture.
    Gmm2d,
    /// 16×16 shape images split into stripes.
    Shapes16,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Gmm2d => "gmm2d",
            Task::Shapes16 => "shapes16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Task::Gmm2d, Task::Shapes16].into_iter().find(|t| t.name() == s)
    }

    pub fn dim(self) -> usize {
        match self {
            Task::Gmm2d => 2,
            Task::Shapes16 => shapes::PIXELS,
        }
    }

    pub fn image(self) -> Option<ImageShape> {
        match self {
            Task::Gmm2d => None,
            Task::Shapes16 => Some(ImageShape { height: shapes::SIDE, width: shapes::SIDE }),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Gmm2d => GMM2D_MODES.len(),
            Task::Shapes16 => shapes::CLASS_NAMES.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Uncontrolled,
    Joint,
    ControlWise,
    Cdps,
    PoeNaive,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Uncontrolled, Method::Joint, Method::ControlWise, Method::Cdps, Method::PoeNaive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uncontrolled => "uncontrolled",
            Method::Joint => "joint",
            Method::ControlWise => "control-wise",
            Method::Cdps => "cdps",
            Method::PoeNaive => "poe-naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Joint | Method::ControlWise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    /// Closed-form score of the data-generating mixture.
    Analytic,
    /// A network fitted by denoising score matching.
    Trained,
}

impl ScoreSource {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Analytic => "analytic",
            ScoreSource::Trained => "trained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ScoreSource::Analytic, ScoreSource::Trained].into_iter().find(|m| m.name() == s)
    }
}

/// Terminal cost of the gmm2d task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gmm2dTarget {
    QuadraticWell,
    Gaussian,
}

impl Gmm2dTarget {
    pub fn name(self) -> &'static str {
        match self {
            Gmm2dTarget::QuadraticWell => "quadratic-well",
            Gmm2dTarget::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Gmm2dTarget::QuadraticWell, Gmm2dTarget::Gaussian].into_iter().find(|m| m.name() == s)
    }
}

pub const GMM2D_MODES: [[f64; 2]; 4] = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
pub const GMM2D_VAR: f64 = 0.1;

pub fn gmm2d_mixture() -> GaussianMixture {
    GaussianMixture::uniform(GMM2D_MODES.iter().map(|m| m.to_vec()).collect(), GMM2D_VAR)
        .expect("the gmm2d constants form a valid mixture")
}

/// Index of the closest gmm2d mode.
pub fn nearest_mode(y: &[f64]) -> usize {
    let dist = |m: &[f64; 2]| (y[0] - m[0]) * (y[0] - m[0]) + (y[1] - m[1]) * (y[1] - m[1]);
    let mut best = 0;
    for (i, m) in GMM2D_MODES.iter().enumerate() {
        if dist(m) < dist(&GMM2D_MODES[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub method: Method,
    pub num_agents: usize,
    pub mask: MaskPreset,
    pub soc: SocConfig,
    pub schedule: NoiseSchedule,
    /// Number of grid points K.
    pub steps: usize,
    pub eps: f64,
    pub joint_updates: usize,
    pub outer: usize,
    pub inner: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_theta: f64,
    pub shuffle_agents: bool,
    pub policy: PolicyShape,
    pub alpha_guid: f64,
    pub eval_samples: usize,
    pub eval_chunk: usize,
    pub seed: u64,
    pub score_source: ScoreSource,
    pub score_hidden: Vec<usize>,
    pub score_time_dim: usize,
    pub score_train: ScoreTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub train_per_class: usize,
    pub held_per_class: usize,
    pub gmm2d_target: Gmm2dTarget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Shapes16,
            method: Method::ControlWise,
            num_agents: 2,
            mask: MaskPreset::HStripes,
            soc: SocConfig { target_label: 2, ..SocConfig::default() },
            schedule: NoiseSchedule::default(),
            steps: 500,
            eps: 1e-3,
            joint_updates: 1000,
            outer: 300,
            inner: 5,
            batch: 16,
            lr: 1e-4,
            lr_theta: 1e-4,
            shuffle_agents: false,
            policy: PolicyShape::default(),
            alpha_guid: 100.0,
            eval_samples: 1024,
            eval_chunk: 128,
            seed: 0,
            score_source: ScoreSource::Analytic,
            score_hidden: vec![512, 512],
            score_time_dim: 32,
            score_train: ScoreTrainConfig { steps: 4000, batch: 64, lr: 1e-3, seed: 0 },
            classifier: ClassifierTrainConfig::default(),
            train_per_class: 200,
            held_per_class: 50,
            gmm2d_target: Gmm2dTarget::QuadraticWell,
        }
    }
}

impl ExperimentConfig {
    /// Small two-agent problem over the four-mode mixture, target mode 0.
    pub fn gmm2d(method: Method) -> Self {
        Self {
            task: Task::Gmm2d,
            method,
            num_agents: 2,
            mask: MaskPreset::Halves,
            soc: SocConfig { target_label: 0, ..SocConfig::default() },
            steps: 100,
            policy: PolicyShape { hidden: vec![32, 32], time_dim: 8, nn2_hidden: vec![8], c0: 0.0 },
            score_hidden: vec![64, 64],
            score_time_dim: 8,
            score_train: ScoreTrainConfig { steps: 3000, batch: 128, lr: 3e-3, seed: 0 },
            alpha_guid: 1.0,
            ..Self::default()
        }
    }

    /// Stripe-split shapes with target class "cross".
    pub fn shapes16(method: Method, num_agents: usize) -> Self {
        Self { method, num_agents, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            bail!(Config, "num_agents must be at least 1");
        }
        if self.eval_samples == 0 || self.eval_chunk == 0 {
            bail!(Config, "eval_samples and eval_chunk must be at least 1");
        }
        if self.soc.target_label >= self.task.num_classes() {
            bail!(Config, "target label {} is not one of the {} classes", self.soc.target_label, self.task.num_classes());
        }
        if !(self.alpha_guid.is_finite() && self.alpha_guid >= 0.0) {
            bail!(Config, "alpha_guid must be finite and non-negative");
        }
        if matches!(self.mask, MaskPreset::HStripes | MaskPreset::VStripes) && self.task.image().is_none() {
            bail!(Config, "stripe masks need an image task");
        }
        self.soc.validate()?;
        TimeGrid::linear(self.steps, self.eps)?;
        if self.method.is_learned() {
            self.plan().validate()?;
        }
        Ok(())
    }

    /// Training plan of the configured learned method.
    pub fn plan(&self) -> TrainPlan {
        let mut plan = match self.method {
            Method::ControlWise => TrainPlan::control_wise(self.outer, self.inner, self.batch, self.lr, self.seed),
            _ => TrainPlan::joint(self.joint_updates, self.batch, self.lr, self.seed),
        };
        plan.lr_theta = self.lr_theta;
        plan.shuffle_agents = self.shuffle_agents;
        plan
    }
}

/// Pre-trained models an experiment relies on.
#[derive(Debug, Clone)]
pub struct Assets {
    pub score: ScoreProvider,
    /// Loss curve when the score network was trained in this run.
    pub score_curve: Vec<f64>,
    pub classifier: Option<Arc<Classifier>>,
    pub classifier_accuracy: Option<f64>,
}

pub fn shapes_dataset(cfg: &ExperimentConfig) -> Result<ShapesDataset> {
    ShapesDataset::generate(cfg.train_per_class, cfg.held_per_class, cfg.seed)
}

/// Training images for the task's score network.
pub fn score_training_data(cfg: &ExperimentConfig) -> Result<Tensor> {
    match cfg.task {
        Task::Gmm2d => {
            let mut rng = NoiseStream::new(cfg.seed, Purpose::Data, 0x2d);
            Ok(gmm2d_mixture().sample(4096, &mut rng))
        }
        Task::Shapes16 => Ok(shapes_dataset(cfg)?.train),
    }
}

pub fn train_score(cfg: &ExperimentConfig) -> Result<(ScoreNet, Vec<f64>)> {
    let data = score_training_data(cfg)?;
    let mut net = ScoreNet::new(
        cfg.task.dim(),
        &cfg.score_hidden,
        cfg.score_time_dim,
        ScoreParam::NoisePrediction,
        cfg.score_train.seed,
    )?;
    let curve = crate::score::train_score_net(&mut net, &data, &cfg.score_train, &cfg.schedule)?;
    Ok((net, curve))
}

pub fn train_task_classifier(cfg: &ExperimentConfig) -> Result<(Classifier, f64)> {
    if cfg.task != Task::Shapes16 {
        bail!(Config, "only the shapes16 task uses a classifier");
    }
    shapes::train_classifier(&shapes_dataset(cfg)?, &cfg.classifier)
}

/// Uses the given models and trains whatever is required but missing.
pub fn prepare_assets(cfg: &ExperimentConfig, score_net: Option<ScoreNet>, classifier: Option<Classifier>) -> Result<Assets> {
    cfg.validate()?;
    let mut score_curve = Vec::new();
    let score = match (cfg.score_source, score_net) {
        (ScoreSource::Analytic, _) => ScoreProvider::analytic(data_mixture(cfg.task)?),
        (ScoreSource::Trained, Some(net)) => {
            if net.dim() != cfg.task.dim() {
                bail!(Shape, "score network has dimension {}, task needs {}", net.dim(), cfg.task.dim());
            }
            ScoreProvider::Network(net)
        }
        (ScoreSource::Trained, None) => {
            let (net, curve) = train_score(cfg)?;
            score_curve = curve;
            ScoreProvider::Network(net)
        }
    };
    let (classifier, classifier_accuracy) = match cfg.task {
        Task::Gmm2d => (None, None),
        Task::Shapes16 => match classifier {
            Some(c) => {
                if c.dim() != shapes::PIXELS || c.num_classes() != shapes::CLASS_NAMES.len() {
                    bail!(Shape, "classifier does not match the shapes16 task");
                }
                (Some(Arc::new(c)), None)
            }
            None => {
                let (c, acc) = train_task_classifier(cfg)?;
                (Some(Arc::new(c)), Some(acc))
            }
        },
    };
    Ok(Assets { score, score_curve, classifier, classifier_accuracy })
}

fn data_mixture(task: Task) -> Result<GaussianMixture> {
    match task {
        Task::Gmm2d => Ok(gmm2d_mixture()),
        Task::Shapes16 => shapes::template_mixture(shapes::PIXEL_NOISE * shapes::PIXEL_NOISE),
    }
}

/// Closed-form model of the target class alone, the second expert of the
/// naive product sampler.
pub fn target_expert(cfg: &ExperimentConfig) -> Result<GaussianMixture> {
    let label = cfg.soc.target_label;
    match cfg.task {
        Task::Gmm2d => GaussianMixture::new(vec![1.0], vec![GMM2D_MODES[label].to_vec()], vec![GMM2D_VAR]),
        Task::Shapes16 => shapes::class_mixture(label, shapes::PIXEL_NOISE * shapes::PIXEL_NOISE),
    }
}

/// The assembled control problem.
#[derive(Debug, Clone)]
pub struct Scene {
    pub score: ScoreProvider,
    pub agg: MaskAggregator,
    pub psi: TerminalCost,
    pub soc: SocConfig,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub classifier: Option<Arc<Classifier>>,
}

impl Scene {
    pub fn new(cfg: &ExperimentConfig, assets: &Assets) -> Result<Self> {
        cfg.validate()?;
        let agg = MaskAggregator::from_preset(&cfg.mask, cfg.num_agents, cfg.task.dim(), cfg.task.image())?;
        let label = cfg.soc.target_label;
        let psi = match cfg.task {
            Task::Gmm2d => {
                let target = GMM2D_MODES[label].to_vec();
                TerminalCost::new(match cfg.gmm2d_target {
                    Gmm2dTarget::QuadraticWell => TerminalKind::QuadraticWell { target },
                    Gmm2dTarget::Gaussian => TerminalKind::GaussianNll { mean: target, var: GMM2D_VAR },
                })
            }
            Task::Shapes16 => {
                let Some(clf) = assets.classifier.clone() else {
                    bail!(Config, "the shapes16 task needs a classifier");
                };
                TerminalCost::new(TerminalKind::Classifier { clf, label })
                    .with_seam(SeamSpec::from_aggregator(&agg, &cfg.soc))
            }
        };
        Ok(Self {
            score: assets.score.clone(),
            agg,
            psi,
            soc: cfg.soc.clone(),
            schedule: cfg.schedule,
            grid: TimeGrid::linear(cfg.steps, cfg.eps)?,
            classifier: assets.classifier.clone(),
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            score: &self.score,
            agg: &self.agg,
            psi: &self.psi,
            cfg: &self.soc,
            schedule: &self.schedule,
            grid: &self.grid,
        }
    }

    /// Class of each composite sample: nearest mode or classifier decision.
    pub fn predict(&self, composite: &Tensor) -> Result<Vec<usize>> {
        match &self.classifier {
            Some(c) => c.predict(composite),
            None => Ok((0..composite.rows()).map(|r| nearest_mode(composite.row(r))).collect()),
        }
    }
}

pub fn init_policies(cfg: &ExperimentConfig) -> Result<Vec<ControlPolicy>> {
    (0..cfg.num_agents).map(|i| ControlPolicy::new(i, cfg.task.dim(), &cfg.policy, cfg.seed)).collect()
}

/// Trains fresh policies with the configured learned method.
pub fn train_policies(
    cfg: &ExperimentConfig,
    scene: &Scene,
    hook: Option<UpdateHook>,
) -> Result<(Vec<ControlPolicy>, TrainReport)> {
    let plan = cfg.plan();
    let mut policies = init_policies(cfg)?;
    let report = match plan.mode {
        TrainMode::Joint if cfg.method == Method::Joint => joint_ido(&plan, &scene.problem(), &mut policies, hook)?,
        TrainMode::ControlWise => controlwise_ido(&plan, &scene.problem(), &mut policies, hook)?,
        _ => bail!(Config, "method {} has nothing to train", cfg.method.name()),
    };
    Ok((policies, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub samples: SampleBatch,
    pub predicted: Vec<usize>,
    pub mean_psi: f64,
    pub psi_std_err: f64,
    pub accuracy: f64,
}

/// Draws the evaluation samples of `method`. Every method uses evaluation
/// stream `c` for chunk `c`, so comparisons are paired.
pub fn evaluate(cfg: &ExperimentConfig, scene: &Scene, method: Method, policies: &[ControlPolicy]) -> Result<Evaluation> {
    let problem = scene.problem();
    let samples = match method {
        Method::Uncontrolled => sample_many(&problem, Steering::None, cfg.seed, cfg.eval_samples, cfg.eval_chunk)?,
        Method::Joint | Method::ControlWise => {
            sample_many(&problem, Steering::Policies(policies), cfg.seed, cfg.eval_samples, cfg.eval_chunk)?
        }
        Method::Cdps => {
            sample_many(&problem, Steering::Cdps { alpha_guid: cfg.alpha_guid }, cfg.seed, cfg.eval_samples, cfg.eval_chunk)?
        }
        Method::PoeNaive => {
            let experts = [scene.score.clone(), ScoreProvider::analytic(target_expert(cfg)?)];
            let mut chunks = Vec::new();
            let mut done = 0;
            let mut c = 0u64;
            while done < cfg.eval_samples {
                let b = cfg.eval_chunk.min(cfg.eval_samples - done);
                let mut noise = NoiseStream::new(cfg.seed, Purpose::Evaluation, c);
                chunks.push(sample_poe_naive(&experts, &scene.schedule, &scene.grid, &mut noise, b)?);
                done += b;
                c += 1;
            }
            let composite = Tensor::concat_rows(&chunks)?;
            let psi = scene.psi.eval(&composite)?;
            SampleBatch { agents: vec![composite.clone()], composite, psi }
        }
    };
    let predicted = scene.predict(&samples.composite)?;
    let label = cfg.soc.target_label;
    let accuracy = predicted.iter().filter(|&&p| p == label).count() as f64 / predicted.len() as f64;
    let (mean_psi, psi_std_err) = mean_and_std_err(&samples.psi);
    Ok(Evaluation { samples, predicted, mean_psi, psi_std_err, accuracy })
}

pub fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var / n))
}

#[derive(Debug, Clone)]
pub struct Report {
    pub method: Method,
    pub evaluation: Evaluation,
    pub training: Option<TrainReport>,
    pub policies: Vec<ControlPolicy>,
}

impl Report {
    /// Named scalar metrics in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let e = &self.evaluation;
        let mut out = vec![
            (String::from("samples"), e.predicted.len() as f64),
            (String::from("mean_psi"), e.mean_psi),
            (String::from("psi_std_err"), e.psi_std_err),
            (String::from("accuracy"), e.accuracy),
        ];
        if let Some(t) = &self.training {
            let obj = t.objectives();
            out.push((String::from("updates"), obj.len() as f64));
            out.push((String::from("skipped_updates"), t.skipped.len() as f64));
            out.push((String::from("final_lr"), t.final_lr));
            if let (Some(a), Some(b)) = (obj.first(), obj.last()) {
                out.push((String::from("objective_first"), *a));
                out.push((String::from("objective_last"), *b));
            }
        }
        out
    }
}

/// Runs the configured method end to end.
pub fn run_experiment(cfg: &ExperimentConfig, assets: &Assets) -> Result<Report> {
    let scene = Scene::new(cfg, assets)?;
    let (policies, training) = if cfg.method.is_learned() {
        let (p, r) = train_policies(cfg, &scene, None)?;
        (p, Some(r))
    } else {
        (Vec::new(), None)
    };
    let evaluation = evaluate(cfg, &scene, cfg.method, &policies)?;
    Ok(Report { method: cfg.method, evaluation, training, policies })
}
