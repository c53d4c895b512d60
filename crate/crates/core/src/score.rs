//! Score functions `∇ₓ log p_t(x)`: closed-form Gaussian-mixture scores, a
//! trainable score network, the Tweedie denoiser and the denoising
//! score-matching loss.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffgraph::{time_embedding, AdamState, Checkpoint, CustomOp, HeadInit, Mlp, MlpVars, Tape, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::noise::{NoiseStream, Purpose};
use crate::sde::{check_time, NoiseSchedule};

/// Smallest diffusion time used where `σ(t)` appears in a denominator.
pub const MIN_TIME: f64 = 1e-3;

/// Smallest `α(t)` the Tweedie estimate accepts.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Mixture of isotropic Gaussians `Σ w_k N(μ_k, s_k² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            bail!(Config, "mixture needs matching, non-empty weights/means/variances");
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            bail!(Shape, "mixture means must share a positive dimension");
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            bail!(Config, "mixture weights must lie on the simplex");
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            bail!(Config, "mixture variances must be positive");
        }
        Ok(Self { weights, means, variances, dim })
    }

    /// Equal-weight mixture with a common variance.
    pub fn uniform(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = means.len();
        Self::new(vec![1.0 / k.max(1) as f64; k], means, vec![variance; k])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self { weights: vec![1.0], means: vec![vec![0.0; dim]], variances: vec![1.0], dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Component log-densities (including log-weights) of the VP-diffused
    /// mixture at scale `(α, σ)`, plus the per-component `(mean, variance)`.
    fn component_logs(&self, x: &[f64], alpha: f64, sigma: f64, out: &mut [f64], vars: &mut [f64]) {
        let d = self.dim as f64;
        for k in 0..self.weights.len() {
            let v = alpha * alpha * self.variances[k] + sigma * sigma;
            vars[k] = v;
            let mut sq = 0.0;
            for (xi, mi) in x.iter().zip(&self.means[k]) {
                let r = xi - alpha * mi;
                sq += r * r;
            }
            out[k] = math::ln(self.weights[k]) - 0.5 * sq / v
                - 0.5 * d * math::ln(2.0 * core::f64::consts::PI * v);
        }
    }

    /// `log q_t(x)` for the mixture diffused to time `t`.
    pub fn log_density(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        check_time(t)?;
        if x.len() != self.dim {
            bail!(Shape, "point has dim {}, mixture has dim {}", x.len(), self.dim);
        }
        let (a, s) = schedule.coeffs_unchecked(t);
        Ok(self.log_density_at(x, a, s))
    }

    pub(crate) fn log_density_at(&self, x: &[f64], alpha: f64, sigma: f64) -> f64 {
        let k = self.weights.len();
        let mut logs = vec![0.0; k];
        let mut vars = vec![0.0; k];
        self.component_logs(x, alpha, sigma, &mut logs, &mut vars);
        math::log_sum_exp(&logs)
    }

    /// Responsibilities `r_k(x)` and component variances at scale `(α, σ)`.
    fn responsibilities(&self, x: &[f64], alpha: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let k = self.weights.len();
        let mut logs = vec![0.0; k];
        let mut vars = vec![0.0; k];
        self.component_logs(x, alpha, sigma, &mut logs, &mut vars);
        let lse = math::log_sum_exp(&logs);
        for l in &mut logs {
            *l = math::exp(*l - lse);
        }
        (logs, vars)
    }

    fn score_at(&self, x: &[f64], alpha: f64, sigma: f64, out: &mut [f64]) {
        let (resp, vars) = self.responsibilities(x, alpha, sigma);
        out.fill(0.0);
        for k in 0..resp.len() {
            let c = resp[k] / vars[k];
            if c == 0.0 {
                continue;
            }
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&self.means[k]) {
                *o += c * (alpha * mi - xi);
            }
        }
    }

    /// Exact score of the VP-diffused mixture at time `t`.
    pub fn score(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        check_time(t)?;
        if x.len() != self.dim {
            bail!(Shape, "point has dim {}, mixture has dim {}", x.len(), self.dim);
        }
        let (a, s) = schedule.coeffs_unchecked(t);
        let mut out = vec![0.0; self.dim];
        self.score_at(x, a, s, &mut out);
        Ok(out)
    }

    fn score_batch(&self, x: &Tensor, alpha: f64, sigma: f64) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            self.score_at(x.row(r), alpha, sigma, out.row_mut(r));
        }
        out
    }

    /// Draw `n` samples from the (undiffused) mixture.
    pub fn sample(&self, n: usize, rng: &mut NoiseStream) -> Tensor {
        let mut out = Tensor::zeros(n, self.dim);
        for r in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let sd = math::sqrt(self.variances[k]);
            for (o, m) in out.row_mut(r).iter_mut().zip(&self.means[k]) {
                *o = m + sd * rng.normal();
            }
        }
        out
    }

    /// Normalised product `∏ᵢ pᵢ` of mixtures, which is again a mixture.
    pub fn product(parts: &[GaussianMixture]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Config, "product of zero mixtures");
        };
        let mut acc = first.clone();
        for p in &parts[1..] {
            acc = acc.product_pair(p)?;
        }
        Ok(acc)
    }

    fn product_pair(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            bail!(Shape, "cannot multiply mixtures of dims {} and {}", self.dim, other.dim);
        }
        let d = self.dim as f64;
        let mut logw = Vec::new();
        let mut means = Vec::new();
        let mut variances = Vec::new();
        for (i, mi) in self.means.iter().enumerate() {
            for (j, mj) in other.means.iter().enumerate() {
                let (vi, vj) = (self.variances[i], other.variances[j]);
                let v = vi * vj / (vi + vj);
                let mean: Vec<f64> = mi.iter().zip(mj).map(|(a, b)| v * (a / vi + b / vj)).collect();
                // ∫ N(x; mi, vi) N(x; mj, vj) dx = N(mi; mj, vi + vj)
                let sq: f64 = mi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum();
                let s = vi + vj;
                let lz = -0.5 * sq / s - 0.5 * d * math::ln(2.0 * core::f64::consts::PI * s);
                logw.push(math::ln(self.weights[i]) + math::ln(other.weights[j]) + lz);
                means.push(mean);
                variances.push(v);
            }
        }
        let lse = math::log_sum_exp(&logw);
        let mut weights: Vec<f64> = logw.iter().map(|l| math::exp(l - lse)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self::new(weights, means, variances)
    }
}

/// Vector-Jacobian product of the mixture score with respect to `x`.
///
/// With `a_k = (αμ_k − x)/v_k` and `s = Σ r_k a_k`, the Jacobian is
/// `−(Σ r_k/v_k) I + Σ r_k a_k a_kᵀ − s sᵀ`, which is symmetric.
struct GmmScoreOp {
    gmm: Arc<GaussianMixture>,
    alpha: f64,
    sigma: f64,
}

impl CustomOp for GmmScoreOp {
    fn name(&self) -> &'static str {
        "gmm_score"
    }

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.cols();
        let mut dx = Tensor::zeros(x.rows(), d);
        let mut a = vec![0.0; d];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let g = grad_out.row(r);
            let s = output.row(r);
            let (resp, vars) = self.gmm.responsibilities(xr, self.alpha, self.sigma);
            let s_dot_g = math::dot(s, g);
            let out = dx.row_mut(r);
            let mut diag = 0.0;
            for k in 0..resp.len() {
                if resp[k] == 0.0 {
                    continue;
                }
                diag += resp[k] / vars[k];
                for ((ai, xi), mi) in a.iter_mut().zip(xr).zip(&self.gmm.means[k]) {
                    *ai = (self.alpha * mi - xi) / vars[k];
                }
                let c = resp[k] * math::dot(&a, g);
                for (o, ai) in out.iter_mut().zip(&a) {
                    *o += c * ai;
                }
            }
            for ((o, gi), si) in out.iter_mut().zip(g).zip(s) {
                *o += -diag * gi - si * s_dot_g;
            }
        }
        vec![Some(dx)]
    }
}

/// How the score network's output is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreParam {
    /// The network output is the score.
    Direct,
    /// The network predicts the injected noise; `S = −NN/σ(t)`.
    NoisePrediction,
}

/// Trainable score model `S(x, t; θ)` on top of an [`Mlp`] with time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    pub net: Mlp,
    pub param: ScoreParam,
}

impl ScoreNet {
    pub fn new(dim: usize, hidden: &[usize], time_dim: usize, param: ScoreParam, seed: u64) -> Result<Self> {
        let mut rng = NoiseStream::new(seed, Purpose::Init, 0x5c0e);
        let net = Mlp::new(dim, hidden, dim, time_dim, HeadInit::Random, &mut rng)?;
        Ok(Self { net, param })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Per-row output scale (`−1/σ(t)` or 1).
    fn output_scale(&self, t: f64, schedule: &NoiseSchedule) -> f64 {
        match self.param {
            ScoreParam::Direct => 1.0,
            ScoreParam::NoisePrediction => {
                let (_, s) = schedule.coeffs_unchecked(t.max(MIN_TIME));
                -1.0 / s
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let param = match self.param {
            ScoreParam::Direct => "direct",
            ScoreParam::NoisePrediction => "noise",
        };
        let mut ck = Checkpoint::new("score-net").with_meta("param", param);
        self.net.write_to(&mut ck, "score");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "score-net" {
            return Err(Error::Parse(alloc::format!("expected a score-net checkpoint, got `{}`", ck.kind)));
        }
        let param = match ck.meta("param") {
            Some("direct") => ScoreParam::Direct,
            Some("noise") => ScoreParam::NoisePrediction,
            other => return Err(Error::Parse(alloc::format!("unknown score parametrisation {other:?}"))),
        };
        let net = Mlp::read_from(ck, "score")?;
        if net.input_dim() != net.output_dim() {
            bail!(Shape, "score network must map R^d to R^d");
        }
        Ok(Self { net, param })
    }

    fn eval_rows(&self, x: &Tensor, times: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
        let raw = self.net.eval(&[x], Some(times))?;
        if times.len() == 1 {
            Ok(crate::diffgraph::fwd_scale(&raw, self.output_scale(times[0], schedule)))
        } else {
            let mut out = raw;
            for (r, &t) in times.iter().enumerate() {
                let c = self.output_scale(t, schedule);
                for v in out.row_mut(r) {
                    *v *= c;
                }
            }
            Ok(out)
        }
    }

    fn forward_rows(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        times: &[f64],
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        let raw = self.net.forward(tape, vars, &[x], Some(times))?;
        if times.len() == 1 {
            Ok(tape.scale(raw, self.output_scale(times[0], schedule)))
        } else {
            let col: Vec<f64> = times.iter().map(|&t| self.output_scale(t, schedule)).collect();
            let c = tape.constant(Tensor::from_vec(times.len(), 1, col)?);
            tape.scale_rows(raw, c)
        }
    }
}

/// Source of scores for one agent (all agents share one provider).
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreProvider {
    Analytic(Arc<GaussianMixture>),
    Network(ScoreNet),
}

/// A [`ScoreProvider`]'s weights placed on a tape once per rollout.
#[derive(Debug, Clone)]
pub struct ScoreBinding {
    vars: Option<MlpVars>,
}

impl ScoreBinding {
    /// Network weight handles when bound as trainable.
    pub fn vars(&self) -> Option<&MlpVars> {
        self.vars.as_ref()
    }
}

impl ScoreProvider {
    pub fn analytic(gmm: GaussianMixture) -> Self {
        Self::Analytic(Arc::new(gmm))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Analytic(g) => g.dim(),
            Self::Network(n) => n.dim(),
        }
    }

    fn check(&self, x: &Tensor, t: f64) -> Result<()> {
        check_time(t)?;
        if x.cols() != self.dim() {
            bail!(Shape, "score input has {} columns, model dim is {}", x.cols(), self.dim());
        }
        Ok(())
    }

    /// Batched score at a shared time `t`.
    pub fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        self.check(x, t)?;
        match self {
            Self::Analytic(g) => {
                let (a, s) = schedule.coeffs_unchecked(t);
                Ok(g.score_batch(x, a, s))
            }
            Self::Network(n) => n.eval_rows(x, &[t], schedule),
        }
    }

    /// Batched score with one time per row.
    pub fn score_rows(&self, x: &Tensor, times: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
        if times.len() != x.rows() {
            bail!(Shape, "{} times for {} rows", times.len(), x.rows());
        }
        for &t in times {
            check_time(t)?;
        }
        match self {
            Self::Analytic(g) => {
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for (r, &t) in times.iter().enumerate() {
                    let (a, s) = schedule.coeffs_unchecked(t);
                    g.score_at(x.row(r), a, s, out.row_mut(r));
                }
                Ok(out)
            }
            Self::Network(n) => n.eval_rows(x, times, schedule),
        }
    }

    /// Place the model's parameters on `tape`. Frozen models bind constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ScoreBinding {
        match self {
            Self::Analytic(_) => ScoreBinding { vars: None },
            Self::Network(n) => ScoreBinding { vars: Some(n.net.bind(tape, trainable)) },
        }
    }

    /// Taped score at a shared time; differentiable with respect to `x`.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ScoreBinding,
        x: Var,
        t: f64,
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        self.check(tape.value(x), t)?;
        match self {
            Self::Analytic(g) => {
                let (a, s) = schedule.coeffs_unchecked(t);
                let value = g.score_batch(tape.value(x), a, s);
                Ok(tape.custom(&[x], value, Box::new(GmmScoreOp { gmm: g.clone(), alpha: a, sigma: s })))
            }
            Self::Network(n) => {
                let vars = binding.vars.as_ref().ok_or_else(|| Error::Usage("score network is not bound".into()))?;
                n.forward_rows(tape, vars, x, &[t], schedule)
            }
        }
    }
}

/// Tweedie posterior-mean estimate `x̂₀ = (x + σ(t)²·score)/α(t)`.
pub fn tweedie(x: &[f64], t: f64, score: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x.len() != score.len() {
        bail!(Shape, "tweedie: x has dim {}, score has dim {}", x.len(), score.len());
    }
    let (a, s) = tweedie_coeffs(t, schedule)?;
    let inv = 1.0 / a;
    let s2 = s * s;
    Ok(x.iter().zip(score).map(|(xv, sv)| (xv + s2 * sv) * inv).collect())
}

pub(crate) fn tweedie_coeffs(t: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    let (a, s) = schedule.marginal_coeffs(t)?;
    if a < ALPHA_FLOOR {
        bail!(Numeric, "alpha({t}) = {a} is below the Tweedie floor");
    }
    Ok((a, s))
}

/// Batched Tweedie estimate; bit-identical to [`tweedie_on_tape`].
pub fn tweedie_batch(x: &Tensor, t: f64, score: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x.shape() != score.shape() {
        bail!(Shape, "tweedie: {:?} vs {:?}", x.shape(), score.shape());
    }
    let (a, s) = tweedie_coeffs(t, schedule)?;
    let inv = 1.0 / a;
    let s2 = s * s;
    Ok(x.zip_map(score, |xv, sv| (xv + s2 * sv) * inv))
}

pub fn tweedie_on_tape(tape: &mut Tape, x: Var, t: f64, score: Var, schedule: &NoiseSchedule) -> Result<Var> {
    let (a, s) = tweedie_coeffs(t, schedule)?;
    let scaled = tape.scale(score, s * s);
    let sum = tape.add(x, scaled)?;
    Ok(tape.scale(sum, 1.0 / a))
}

/// Denoising score-matching loss
/// `mean_b ‖−ε_b/σ(t_b) − S(α x₀_b + σ ε_b, t_b)‖²`, with times clamped to
/// [`MIN_TIME`].
pub fn dsm_loss(
    model: &ScoreProvider,
    x0: &Tensor,
    times: &[f64],
    noises: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0.rows() == 0 {
        bail!(Config, "dsm_loss needs a non-empty batch");
    }
    if times.len() != x0.rows() || noises.shape() != x0.shape() {
        bail!(Shape, "dsm_loss: batch, times and noises disagree");
    }
    let times: Vec<f64> = times.iter().map(|&t| t.clamp(MIN_TIME, 1.0)).collect();
    let (xt, target) = perturb(x0, &times, noises, schedule);
    let pred = model.score_rows(&xt, &times, schedule)?;
    let total: f64 = pred.data().iter().zip(target.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(total / x0.rows() as f64)
}

/// Perturbed samples `x_t` and conditional scores `−ε/σ`.
fn perturb(x0: &Tensor, times: &[f64], noises: &Tensor, schedule: &NoiseSchedule) -> (Tensor, Tensor) {
    let mut xt = x0.clone();
    let mut target = noises.clone();
    for (r, &t) in times.iter().enumerate() {
        let (a, s) = schedule.coeffs_unchecked(t);
        for (xv, nv) in xt.row_mut(r).iter_mut().zip(noises.row(r)) {
            *xv = a * *xv + s * nv;
        }
        for v in target.row_mut(r) {
            *v = -*v / s;
        }
    }
    (xt, target)
}

/// Settings for [`train_score_net`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Fit a score network to `data` by minimising the denoising objective.
///
/// Noise-prediction networks are trained on `‖NN − ε‖²`, which is the
/// score-matching loss weighted by `σ(t)²`; direct networks use the
/// unweighted loss. Returns the per-step training loss.
pub fn train_score_net(
    net: &mut ScoreNet,
    data: &Tensor,
    cfg: &ScoreTrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if data.rows() == 0 || cfg.batch == 0 {
        bail!(Config, "score training needs data and a positive batch size");
    }
    if data.cols() != net.dim() {
        bail!(Shape, "data dim {} vs network dim {}", data.cols(), net.dim());
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    let d = data.cols();
    for step in 0..cfg.steps {
        let mut rng = NoiseStream::new(cfg.seed, Purpose::Minibatch, step as u64);
        let mut x0 = Tensor::zeros(cfg.batch, d);
        for r in 0..cfg.batch {
            x0.row_mut(r).copy_from_slice(data.row(rng.below(data.rows())));
        }
        let times: Vec<f64> = (0..cfg.batch).map(|_| MIN_TIME + (1.0 - MIN_TIME) * rng.uniform()).collect();
        let mut eps = Tensor::zeros(cfg.batch, d);
        rng.fill_normal(eps.data_mut());
        let (xt, target) = perturb(&x0, &times, &eps, schedule);

        let mut tape = Tape::new();
        let vars = net.net.bind(&mut tape, true);
        let xv = tape.constant(xt);
        let raw = net.net.forward(&mut tape, &vars, &[xv], Some(&times))?;
        let tgt = match net.param {
            ScoreParam::NoisePrediction => tape.constant(eps),
            ScoreParam::Direct => tape.constant(target),
        };
        let diff = tape.sub(raw, tgt)?;
        let sq = tape.row_sum_squares(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training { message: alloc::format!("non-finite loss at step {step}"), curve });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
        adam.update(&mut net.net.tensors_mut(), &g)?;
    }
    Ok(curve)
}

/// Time features for a batch, exposed for diagnostics.
pub fn embed_times(times: &[f64], dim: usize) -> Tensor {
    time_embedding(times, times.len(), dim)
}
