//! Cost terms of the control objective: control energy weights, the
//! terminal cost `Ψ` (classifier NLL or an analytic surrogate, plus an
//! optional seam term), the Tweedie running cost and the assembled `Ĵ`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::{ImageShape, MaskAggregator};
use crate::diffgraph::{Checkpoint, HeadInit, Mlp, MlpVars, Tape, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::noise::{NoiseStream, Purpose};
use crate::optimize::RolloutRecord;

/// Time profile of the running-cost weight `α_t = alpha_run · profile(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunningProfile {
    Constant,
    /// Grows linearly from 0 at `t = 1` to 1 at `t = 0`.
    LinearRamp,
}

impl RunningProfile {
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::LinearRamp => 1.0 - t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocConfig {
    pub lambda: f64,
    pub alpha_run: f64,
    pub running_profile: RunningProfile,
    /// Per-agent control weights; `None` means `λ/N` for every agent.
    pub agent_lambdas: Option<Vec<f64>>,
    pub beta_seam: f64,
    pub gamma_seam: f64,
    pub charbonnier_eps: f64,
    pub target_label: usize,
}

impl Default for SocConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha_run: 1.0,
            running_profile: RunningProfile::Constant,
            agent_lambdas: None,
            beta_seam: 0.1,
            gamma_seam: 0.1,
            charbonnier_eps: 1e-3,
            target_label: 0,
        }
    }
}

impl SocConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.lambda) || !nonneg(self.alpha_run) || !nonneg(self.beta_seam) || !nonneg(self.gamma_seam) {
            bail!(Config, "lambda, alpha_run and seam weights must be finite and non-negative");
        }
        if !(self.charbonnier_eps > 0.0 && self.charbonnier_eps.is_finite()) {
            bail!(Config, "charbonnier_eps must be positive");
        }
        if let Some(l) = &self.agent_lambdas {
            if l.iter().any(|&v| !nonneg(v)) {
                bail!(Config, "per-agent lambdas must be non-negative");
            }
        }
        Ok(())
    }

    /// Control weight of each of `n` agents.
    pub fn agent_weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.agent_lambdas {
            Some(l) if l.len() != n => bail!(Config, "{} per-agent lambdas for {n} agents", l.len()),
            Some(l) => Ok(l.clone()),
            None => Ok(vec![self.lambda / n as f64; n]),
        }
    }

    /// Running-cost scale `α_t`.
    pub fn alpha_at(&self, t: f64) -> f64 {
        self.alpha_run * self.running_profile.weight(t)
    }
}

/// Small MLP classifier over composite states.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: Mlp,
}

impl Classifier {
    pub fn new(dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            bail!(Config, "a classifier needs at least two classes");
        }
        let mut rng = NoiseStream::new(seed, Purpose::Init, 0xc1a5);
        Ok(Self { net: Mlp::new(dim, hidden, classes, 0, HeadInit::Random, &mut rng)? })
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval(&[x], None)
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Taped per-row negative log-probability of `label` (`B × 1`).
    pub fn nll_on_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var, label: usize) -> Result<Var> {
        if label >= self.num_classes() {
            bail!(Config, "label {label} out of range for {} classes", self.num_classes());
        }
        let logits = self.net.forward(tape, vars, &[x], None)?;
        let lp = tape.log_softmax(logits);
        let picked = tape.gather_cols(lp, vec![label])?;
        Ok(tape.scale(picked, -1.0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("classifier");
        self.net.write_to(&mut ck, "clf");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "classifier" {
            return Err(Error::Parse(alloc::format!("expected a classifier checkpoint, got `{}`", ck.kind)));
        }
        let net = Mlp::read_from(ck, "clf")?;
        if net.output_dim() < 2 || net.time_dim() != 0 {
            bail!(Shape, "classifier checkpoint has an unexpected layout");
        }
        Ok(Self { net })
    }
}

/// Cross-entropy of the classifier's softmax at `label`.
pub fn classifier_nll(y: &[f64], label: usize, clf: &Classifier) -> Result<f64> {
    if y.len() != clf.dim() {
        bail!(Shape, "input has dim {}, classifier expects {}", y.len(), clf.dim());
    }
    let mut tape = Tape::new();
    let vars = clf.net.bind(&mut tape, false);
    let x = tape.constant(Tensor::row_vector(y.to_vec()));
    let nll = clf.nll_on_tape(&mut tape, &vars, x, label)?;
    Ok(tape.value(nll).item())
}

/// Seam geometry and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SeamSpec {
    pub image: ImageShape,
    pub pairs: Vec<(usize, usize)>,
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl SeamSpec {
    /// Seams derived from the aggregator's stripe layout; `None` when it has none.
    pub fn from_aggregator(agg: &MaskAggregator, cfg: &SocConfig) -> Option<Self> {
        let image = agg.image()?;
        if agg.seams().is_empty() {
            return None;
        }
        Some(Self {
            image,
            pairs: agg.seams().to_vec(),
            beta: cfg.beta_seam,
            gamma: cfg.gamma_seam,
            eps: cfg.charbonnier_eps,
        })
    }

    fn row_cols(&self, r: usize) -> impl Iterator<Item = usize> {
        let w = self.image.width;
        (0..w).map(move |c| r * w + c)
    }

    /// Gather index lists for the upper/lower seam rows and their vertical
    /// neighbours; at the image border the neighbour is the row itself, so
    /// the one-sided difference vanishes.
    fn indices(&self) -> [Vec<usize>; 4] {
        let mut p = Vec::new();
        let mut p_prev = Vec::new();
        let mut q = Vec::new();
        let mut q_next = Vec::new();
        for &(rp, rq) in &self.pairs {
            p.extend(self.row_cols(rp));
            p_prev.extend(self.row_cols(rp.saturating_sub(1)));
            q.extend(self.row_cols(rq));
            q_next.extend(self.row_cols((rq + 1).min(self.image.height - 1)));
        }
        [p, p_prev, q, q_next]
    }

    /// Taped per-row seam loss (`B × 1`).
    pub fn on_tape(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let cols = tape.value(y).cols();
        if cols != self.image.pixels() {
            bail!(Shape, "seam loss: state has {cols} entries, image has {}", self.image.pixels());
        }
        if self.pairs.iter().any(|&(p, q)| p >= self.image.height || q >= self.image.height) {
            bail!(Config, "seam row outside the image");
        }
        let [p, p_prev, q, q_next] = self.indices();
        let yp = tape.gather_cols(y, p)?;
        let yq = tape.gather_cols(y, q)?;
        let diff = tape.sub(yp, yq)?;
        let rho = tape.charbonnier(diff, self.eps);
        let intensity = tape.row_sum(rho);
        let ypp = tape.gather_cols(y, p_prev)?;
        let yqn = tape.gather_cols(y, q_next)?;
        let grad_p = tape.sub(yp, ypp)?;
        let grad_q = tape.sub(yqn, yq)?;
        let gdiff = tape.sub(grad_p, grad_q)?;
        let grho = tape.charbonnier(gdiff, self.eps);
        let vertical = tape.row_sum(grho);
        let a = tape.scale(intensity, self.beta);
        let b = tape.scale(vertical, self.gamma);
        tape.add(a, b)
    }
}

/// Seam-continuity loss of one image.
pub fn seam_loss(y: &[f64], seams: &SeamSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::row_vector(y.to_vec()));
    let out = seams.on_tape(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Main term of the terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalKind {
    /// `−log p(label | Y)` under a trained classifier.
    Classifier { clf: Arc<Classifier>, label: usize },
    /// `½‖Y − μ‖²/var`: the negative log of a Gaussian density up to its
    /// normalising constant, so the term is non-negative.
    GaussianNll { mean: Vec<f64>, var: f64 },
    /// `‖Y − y*‖²`.
    QuadraticWell { target: Vec<f64> },
}

/// Terminal cost `Ψ(Y)`; the running cost evaluates the same function at the
/// Tweedie look-ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub kind: TerminalKind,
    pub seam: Option<SeamSpec>,
}

/// A [`TerminalCost`]'s constants placed on a tape.
#[derive(Debug, Clone)]
pub struct CostBinding {
    clf: Option<MlpVars>,
    target: Option<Var>,
}

impl TerminalCost {
    pub fn new(kind: TerminalKind) -> Self {
        Self { kind, seam: None }
    }

    pub fn with_seam(mut self, seam: Option<SeamSpec>) -> Self {
        self.seam = seam;
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TerminalKind::Classifier { clf, .. } => clf.dim(),
            TerminalKind::GaussianNll { mean, .. } => mean.len(),
            TerminalKind::QuadraticWell { target } => target.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            TerminalKind::Classifier { clf, label } if *label >= clf.num_classes() => {
                bail!(Config, "label {label} out of range for {} classes", clf.num_classes())
            }
            TerminalKind::GaussianNll { var, .. } if !(*var > 0.0) => bail!(Config, "Gaussian variance must be positive"),
            _ => Ok(()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> CostBinding {
        match &self.kind {
            TerminalKind::Classifier { clf, .. } => CostBinding { clf: Some(clf.net.bind(tape, false)), target: None },
            TerminalKind::GaussianNll { mean: t, .. } | TerminalKind::QuadraticWell { target: t } => {
                // Stored negated so that `y − t` is a single row-bias add.
                let neg = t.iter().map(|v| -v).collect();
                CostBinding { clf: None, target: Some(tape.constant(Tensor::row_vector(neg))) }
            }
        }
    }

    /// Taped per-row cost (`B × 1`).
    pub fn on_tape(&self, tape: &mut Tape, binding: &CostBinding, y: Var) -> Result<Var> {
        let cols = tape.value(y).cols();
        if cols != self.dim() {
            bail!(Shape, "cost input has dim {cols}, expected {}", self.dim());
        }
        let main = match &self.kind {
            TerminalKind::Classifier { clf, label } => {
                let vars = binding.clf.as_ref().ok_or_else(|| Error::Usage("cost is not bound".into()))?;
                clf.nll_on_tape(tape, vars, y, *label)?
            }
            TerminalKind::GaussianNll { var, .. } => {
                let t = binding.target.ok_or_else(|| Error::Usage("cost is not bound".into()))?;
                let diff = tape.add_row_bias(y, t)?;
                let sq = tape.row_sum_squares(diff);
                tape.scale(sq, 0.5 / var)
            }
            TerminalKind::QuadraticWell { .. } => {
                let t = binding.target.ok_or_else(|| Error::Usage("cost is not bound".into()))?;
                let diff = tape.add_row_bias(y, t)?;
                tape.row_sum_squares(diff)
            }
        };
        match &self.seam {
            Some(s) if s.beta != 0.0 || s.gamma != 0.0 => {
                let seam = s.on_tape(tape, y)?;
                tape.add(main, seam)
            }
            _ => Ok(main),
        }
    }

    /// Per-row cost values.
    pub fn eval(&self, y: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let v = tape.constant(y.clone());
        let out = self.on_tape(&mut tape, &b, v)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Per-row cost values and per-row gradients `∇_Y Ψ`.
    pub fn value_and_grad(&self, y: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let v = tape.leaf(y.clone());
        let out = self.on_tape(&mut tape, &b, v)?;
        let total = tape.sum(out);
        let grads = tape.backward(total)?;
        Ok((tape.value(out).data().to_vec(), grads.wrt(&tape, v)))
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        Ok(self.eval(&Tensor::row_vector(y.to_vec()))?[0])
    }
}

/// `α_t · Ψ(Ŷ₀)`.
pub fn running_cost(y0hat: &[f64], t: f64, psi: &TerminalCost, cfg: &SocConfig) -> Result<f64> {
    let a = cfg.alpha_at(t);
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(a * psi.value(y0hat)?)
}

/// Recompute `Ĵ = Σᵢ λⁱ Σ_k ‖uⁱ_k‖² Δt_k + Σ_k α_{t_k} Ψ(Ŷ₀,k) Δt_k + Ψ(Y)`
/// (batch means) from the per-term accumulators of a rollout record.
pub fn soc_objective(record: &RolloutRecord, cfg: &SocConfig) -> Result<f64> {
    if record.batch == 0 {
        bail!(Config, "objective over an empty batch");
    }
    let lambdas = cfg.agent_weights(record.agent_energy.len())?;
    let control: f64 = lambdas.iter().zip(&record.agent_energy).map(|(l, e)| l * e).sum();
    Ok(control + cfg.alpha_run * record.ell_c + record.ell_psi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seam16(beta: f64, gamma: f64, eps: f64) -> SeamSpec {
        SeamSpec { image: ImageShape { height: 16, width: 16 }, pairs: vec![(7, 8)], beta, gamma, eps }
    }

    #[test]
    fn seam_examples() {
        let y = vec![0.3; 256];
        assert_eq!(seam_loss(&y, &seam16(0.0, 0.0, 1e-3)).unwrap(), 0.0);
        let eps = 1e-3;
        let floor = seam_loss(&y, &seam16(0.5, 2.0, eps)).unwrap();
        assert!((floor - 1.0 * 2.5 * eps * 16.0).abs() < 1e-15);
        let step = |h: f64| {
            let mut y = vec![0.0; 256];
            for v in &mut y[8 * 16..] {
                *v = h;
            }
            seam_loss(&y, &seam16(1.0, 1.0, eps)).unwrap()
        };
        let (a, b, c) = (step(0.0), step(0.5), step(1.0));
        assert!(a < b && b < c);
    }

    #[test]
    fn seam_border_rows() {
        // Seams touching the first and last image rows use vanishing one-sided differences.
        let s = SeamSpec { image: ImageShape { height: 2, width: 3 }, pairs: vec![(0, 1)], beta: 0.0, gamma: 1.0, eps: 0.0 };
        assert_eq!(seam_loss(&[1.0, 2.0, 3.0, -1.0, 0.0, 4.0], &s).unwrap(), 0.0);
        assert!(seam_loss(&[0.0; 5], &s).is_err());
    }

    #[test]
    fn running_cost_examples() {
        let psi = TerminalCost::new(TerminalKind::QuadraticWell { target: vec![1.0, 1.0] });
        let mut cfg = SocConfig { alpha_run: 0.0, ..SocConfig::default() };
        assert_eq!(running_cost(&[5.0, -3.0], 0.4, &psi, &cfg).unwrap(), 0.0);
        cfg.alpha_run = 1.0;
        assert_eq!(running_cost(&[1.0, 1.0], 0.4, &psi, &cfg).unwrap(), 0.0);
        // ‖Ŷ₀ − y*‖ = 2.
        assert!((running_cost(&[1.0 + 2.0f64.sqrt(), 1.0 + 2.0f64.sqrt()], 0.4, &psi, &cfg).unwrap() - 4.0).abs() < 1e-12);
        cfg.running_profile = RunningProfile::LinearRamp;
        assert!((running_cost(&[3.0, 1.0], 0.25, &psi, &cfg).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_nll_examples() {
        // Zero weights everywhere: uniform logits.
        let mut clf = Classifier::new(4, &[3], 5, 0).unwrap();
        for t in clf.net.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let v = classifier_nll(&[0.1, 0.2, 0.3, 0.4], 2, &clf).unwrap();
        assert!((v - (5.0f64).ln()).abs() < 1e-12);
        // A huge bias on the correct class.
        clf.net.tensors_mut()[3].data_mut()[2] = 50.0;
        assert!(classifier_nll(&[0.1, 0.2, 0.3, 0.4], 2, &clf).unwrap() < 1e-12);
        assert!(classifier_nll(&[0.1, 0.2, 0.3, 0.4], 5, &clf).is_err());
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let clf = Classifier::new(6, &[5], 3, 2).unwrap();
        let back = Classifier::from_checkpoint(&Checkpoint::decode(&clf.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back, clf);
    }

    fn fd_check(cost: &TerminalCost, y: &Tensor) {
        let (_, g) = cost.value_and_grad(y).unwrap();
        let h = 1e-5;
        for i in 0..y.len() {
            let mut p = y.clone();
            p.data_mut()[i] += h;
            let mut m = y.clone();
            m.data_mut()[i] -= h;
            let fd = (cost.eval(&p).unwrap().iter().sum::<f64>() - cost.eval(&m).unwrap().iter().sum::<f64>()) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3), "{i}: {a} vs {fd}");
        }
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let mut rng = NoiseStream::new(4, Purpose::Data, 0);
        let mut y = Tensor::zeros(2, 16);
        rng.fill_normal(y.data_mut());
        let image = ImageShape { height: 4, width: 4 };
        let seam = SeamSpec { image, pairs: vec![(0, 1), (2, 3)], beta: 0.7, gamma: 0.3, eps: 1e-2 };
        let target: Vec<f64> = (0..16).map(|i| 0.1 * i as f64).collect();
        fd_check(&TerminalCost::new(TerminalKind::QuadraticWell { target: target.clone() }).with_seam(Some(seam.clone())), &y);
        fd_check(&TerminalCost::new(TerminalKind::GaussianNll { mean: target, var: 0.3 }), &y);
        let clf = Arc::new(Classifier::new(16, &[8], 4, 1).unwrap());
        fd_check(&TerminalCost::new(TerminalKind::Classifier { clf, label: 1 }).with_seam(Some(seam)), &y);
    }

    #[test]
    fn costs_are_non_negative() {
        let mut rng = NoiseStream::new(5, Purpose::Data, 0);
        let mut y = Tensor::zeros(20, 4);
        rng.fill_normal(y.data_mut());
        let clf = Arc::new(Classifier::new(4, &[8], 3, 1).unwrap());
        for cost in [
            TerminalCost::new(TerminalKind::QuadraticWell { target: vec![1.0; 4] }),
            TerminalCost::new(TerminalKind::GaussianNll { mean: vec![0.0; 4], var: 0.01 }),
            TerminalCost::new(TerminalKind::Classifier { clf, label: 0 }),
        ] {
            assert!(cost.eval(&y).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SocConfig::default().validate().is_ok());
        assert!(SocConfig { lambda: -1.0, ..SocConfig::default() }.validate().is_err());
        assert!(SocConfig { charbonnier_eps: 0.0, ..SocConfig::default() }.validate().is_err());
        let w = SocConfig::default().agent_weights(4).unwrap();
        assert_eq!(w, vec![2.5; 4]);
        let c = SocConfig { agent_lambdas: Some(vec![1.0, 2.0]), ..SocConfig::default() };
        assert!(c.agent_weights(3).is_err());
    }
}
