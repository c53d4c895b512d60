//! Rollouts and training loops: the taped controlled rollout behind `Ĵ`,
//! joint and control-wise iterative optimisation, and untaped samplers for
//! the uncontrolled, learned, CDPS and naive score-sum baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::MaskAggregator;
use crate::control::{cdps_guidance, ControlPolicy, PolicyVars};
use crate::costs::{SocConfig, TerminalCost};
use crate::diffgraph::{AdamState, Tape, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::noise::{NoiseStream, Purpose};
use crate::score::{tweedie_batch, tweedie_on_tape, ScoreBinding, ScoreProvider};
use crate::sde::{NoiseSchedule, TimeGrid};

/// Everything a rollout needs besides the policies.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub score: &'a ScoreProvider,
    pub agg: &'a MaskAggregator,
    pub psi: &'a TerminalCost,
    pub cfg: &'a SocConfig,
    pub schedule: &'a NoiseSchedule,
    pub grid: &'a TimeGrid,
}

impl Problem<'_> {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.psi.validate()?;
        let d = self.agg.dim();
        if self.score.dim() != d || self.psi.dim() != d {
            bail!(
                Shape,
                "score dim {}, aggregator dim {d} and cost dim {} disagree",
                self.score.dim(),
                self.psi.dim()
            );
        }
        self.cfg.agent_weights(self.agg.num_agents())?;
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.agg.num_agents()
    }

    pub fn dim(&self) -> usize {
        self.agg.dim()
    }

    fn check_policies(&self, policies: &[ControlPolicy]) -> Result<()> {
        if policies.len() != self.num_agents() {
            bail!(Shape, "{} policies for {} agents", policies.len(), self.num_agents());
        }
        if policies.iter().any(|p| p.dim() != self.dim()) {
            bail!(Shape, "policy dimension does not match the agents");
        }
        Ok(())
    }
}

fn draw(rng: &mut NoiseStream, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    rng.fill_normal(t.data_mut());
    t
}

/// Per-agent guidance `∇_{X̂₀ⁱ} Ψ(Ŷ₀)` and the per-row `Ψ(Ŷ₀)`.
fn tweedie_guidance(psi: &TerminalCost, agg: &MaskAggregator, y0: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let (values, grad) = psi.value_and_grad(y0)?;
    Ok((values, agg.scatter_adjoint_batch(&grad)?))
}

/// One Euler-Maruyama update of the controlled reverse SDE, written in the
/// same operation order as the taped update so both agree bit for bit:
/// `x + ((x·½β + s·β) + u·g)·Δt + ξ·(g√Δt)`.
fn em_update(x: &Tensor, s: &Tensor, u: Option<&Tensor>, beta: f64, g: f64, dt: f64, xi: &Tensor) -> Tensor {
    let half = 0.5 * beta;
    let nscale = g * math::sqrt(dt);
    let mut out = x.clone();
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        let xv = x.data()[idx];
        let mu = xv * half + s.data()[idx] * beta;
        let uv = u.map_or(0.0, |u| u.data()[idx]);
        let m2 = mu + uv * g;
        let step = m2 * dt;
        *o = (xv + step) + xi.data()[idx] * nscale;
    }
    out
}

/// Which agents' policy parameters are tape leaves, and what is recorded.
#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    /// Per-agent trainable flags; empty means all agents train.
    pub trainable: Vec<bool>,
    /// Bind the score network's parameters as leaves (for gradient probes).
    pub score_trainable: bool,
    /// Keep per-step states, controls and look-aheads in the record.
    pub keep_trajectory: bool,
    /// Replace the computed guidance with fixed values `[step][agent]`.
    pub fixed_guidance: Option<Vec<Vec<Tensor>>>,
}

/// Summary (and optionally the full trajectory) of one taped rollout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutRecord {
    pub batch: usize,
    pub num_agents: usize,
    /// Times and step sizes of the control applications.
    pub times: Vec<f64>,
    pub dts: Vec<f64>,
    /// `[step][agent]`, `B × d`; states include the terminal state.
    pub states: Vec<Vec<Tensor>>,
    pub controls: Vec<Vec<Tensor>>,
    pub tweedie: Vec<Vec<Tensor>>,
    pub guidance: Vec<Vec<Tensor>>,
    pub aggregates: Vec<Tensor>,
    pub aggregates0: Vec<Tensor>,
    pub terminal: Tensor,
    /// `Σ_k mean_b ‖uⁱ_k‖² Δt_k` per agent.
    pub agent_energy: Vec<f64>,
    /// `(1/N) Σᵢ` of the agent energies.
    pub ell_u: f64,
    /// `Σ_k profile(t_k) · mean_b Ψ(Ŷ₀,k) · Δt_k`.
    pub ell_c: f64,
    pub ell_psi: f64,
    pub objective: f64,
}

/// The tape of a rollout with handles to its objective terms.
pub struct RolloutTape {
    pub tape: Tape,
    pub objective: Var,
    pub control_term: Var,
    pub policy_vars: Vec<Option<PolicyVars>>,
    pub score: ScoreBinding,
}

/// Simulate `batch` coupled controlled trajectories on a tape and build the
/// differentiable objective `Ĵ = Σᵢ λⁱ Eⁱ + α ℓ_c + ℓ_Ψ`.
pub fn bptt_rollout(
    problem: &Problem,
    policies: &[ControlPolicy],
    opts: &RolloutOptions,
    noise: &mut NoiseStream,
    batch: usize,
) -> Result<(RolloutTape, RolloutRecord)> {
    problem.validate()?;
    problem.check_policies(policies)?;
    if batch == 0 {
        bail!(Config, "rollout batch must be at least 1");
    }
    let n = problem.num_agents();
    let d = problem.dim();
    let trainable = if opts.trainable.is_empty() { vec![true; n] } else { opts.trainable.clone() };
    if trainable.len() != n {
        bail!(Shape, "{} trainable flags for {n} agents", trainable.len());
    }
    let lambdas = problem.cfg.agent_weights(n)?;
    let sched = problem.schedule;
    let times = problem.grid.times();

    let mut tape = Tape::new();
    let sb = problem.score.bind(&mut tape, opts.score_trainable);
    let cb = problem.psi.bind(&mut tape);
    let pvars: Vec<PolicyVars> = policies.iter().zip(&trainable).map(|(p, &tr)| p.bind(&mut tape, tr)).collect();

    let mut rec = RolloutRecord { batch, num_agents: n, ..RolloutRecord::default() };
    let (_, sigma0) = sched.marginal_coeffs(times[0])?;
    let mut xs: Vec<Var> = (0..n)
        .map(|_| {
            let xi = draw(noise, batch, d);
            tape.constant(crate::diffgraph::fwd_scale(&xi, sigma0))
        })
        .collect();
    let mut energy: Vec<Option<Var>> = vec![None; n];
    let mut running: Option<Var> = None;
    let mut energy_vals = vec![0.0; n];

    for (k, t, dt) in problem.grid.steps() {
        let beta = sched.beta(t);
        let g = math::sqrt(beta);
        let mut scores = Vec::with_capacity(n);
        let mut x0 = Vec::with_capacity(n);
        for &x in &xs {
            let s = problem.score.score_on_tape(&mut tape, &sb, x, t, sched)?;
            x0.push(tweedie_on_tape(&mut tape, x, t, s, sched)?);
            scores.push(s);
        }
        let y = problem.agg.aggregate_on_tape(&mut tape, &xs)?;
        let y0 = problem.agg.aggregate_on_tape(&mut tape, &x0)?;
        let (psi_vals, guidance) = match &opts.fixed_guidance {
            Some(fixed) => {
                let gs = fixed.get(k).ok_or_else(|| Error::Shape(format!("no fixed guidance for step {k}")))?;
                (problem.psi.eval(tape.value(y0))?, gs.clone())
            }
            None => tweedie_guidance(problem.psi, problem.agg, tape.value(y0))?,
        };
        let profile = problem.cfg.running_profile.weight(t);
        rec.ell_c += profile * psi_vals.iter().sum::<f64>() / batch as f64 * dt;
        if problem.cfg.alpha_run != 0.0 && profile != 0.0 {
            let c = problem.psi.on_tape(&mut tape, &cb, y0)?;
            let m = tape.mean(c);
            let term = tape.scale(m, profile * dt);
            running = Some(match running {
                Some(r) => tape.add(r, term)?,
                None => term,
            });
        }
        let mut next = Vec::with_capacity(n);
        let mut step_controls = Vec::with_capacity(n);
        for i in 0..n {
            let gc = tape.constant(guidance[i].clone());
            let gv = tape.stopgrad(gc);
            let u = policies[i].forward(&mut tape, &pvars[i], xs[i], y, gv, t)?;
            let sq = tape.row_sum_squares(u);
            let m = tape.mean(sq);
            energy_vals[i] += tape.value(m).item() * dt;
            let e = tape.scale(m, dt);
            energy[i] = Some(match energy[i] {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
            let xi = draw(noise, batch, d);
            let a = tape.scale(xs[i], 0.5 * beta);
            let b = tape.scale(scores[i], beta);
            let mu = tape.add(a, b)?;
            let gu = tape.scale(u, g);
            let m2 = tape.add(mu, gu)?;
            let step = tape.scale(m2, dt);
            let x1 = tape.add(xs[i], step)?;
            let nz = tape.constant(crate::diffgraph::fwd_scale(&xi, g * math::sqrt(dt)));
            let x2 = tape.add(x1, nz)?;
            if !tape.value(x2).is_finite() {
                return Err(Error::Diverged { step: k });
            }
            step_controls.push(u);
            next.push(x2);
        }
        if opts.keep_trajectory {
            rec.times.push(t);
            rec.dts.push(dt);
            rec.states.push(xs.iter().map(|&x| tape.value(x).clone()).collect());
            rec.controls.push(step_controls.iter().map(|&u| tape.value(u).clone()).collect());
            rec.tweedie.push(x0.iter().map(|&x| tape.value(x).clone()).collect());
            rec.guidance.push(guidance);
            rec.aggregates.push(tape.value(y).clone());
            rec.aggregates0.push(tape.value(y0).clone());
        } else {
            rec.times.push(t);
            rec.dts.push(dt);
        }
        xs = next;
    }
    if opts.keep_trajectory {
        rec.states.push(xs.iter().map(|&x| tape.value(x).clone()).collect());
    }
    let y_t = problem.agg.aggregate_on_tape(&mut tape, &xs)?;
    let psi_t = problem.psi.on_tape(&mut tape, &cb, y_t)?;
    let ell_psi = tape.mean(psi_t);

    let mut control_term: Option<Var> = None;
    for (i, e) in energy.iter().enumerate() {
        let Some(e) = *e else { continue };
        let w = tape.scale(e, lambdas[i]);
        control_term = Some(match control_term {
            Some(acc) => tape.add(acc, w)?,
            None => w,
        });
    }
    let control_term = control_term.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let mut objective = tape.add(control_term, ell_psi)?;
    if let Some(r) = running {
        let scaled = tape.scale(r, problem.cfg.alpha_run);
        objective = tape.add(objective, scaled)?;
    }

    rec.terminal = tape.value(y_t).clone();
    rec.agent_energy = energy_vals;
    rec.ell_u = rec.agent_energy.iter().sum::<f64>() / n as f64;
    rec.ell_psi = tape.value(ell_psi).item();
    rec.objective = tape.value(objective).item();
    if !rec.objective.is_finite() {
        return Err(Error::Diverged { step: problem.grid.len() - 1 });
    }
    let policy_vars = pvars.into_iter().zip(&trainable).map(|(v, &tr)| tr.then_some(v)).collect();
    Ok((RolloutTape { tape, objective, control_term, policy_vars, score: sb }, rec))
}

/// How policies are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    ControlWise,
    CdpsOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub mode: TrainMode,
    /// Outer iterations. Joint mode runs `outer × inner` updates.
    pub outer: usize,
    /// Inner updates per agent (control-wise) or per outer iteration (joint).
    pub inner: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_theta: f64,
    pub seed: u64,
    /// Visit agents in a seeded random order each outer iteration.
    pub shuffle_agents: bool,
}

impl TrainPlan {
    pub fn joint(updates: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self { mode: TrainMode::Joint, outer: updates, inner: 1, batch, lr, lr_theta: lr, seed, shuffle_agents: false }
    }

    pub fn control_wise(outer: usize, inner: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self { mode: TrainMode::ControlWise, outer, inner, batch, lr, lr_theta: lr, seed, shuffle_agents: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TrainMode::CdpsOnly {
            return Ok(());
        }
        if self.outer == 0 || self.inner == 0 || self.batch == 0 {
            bail!(Config, "outer iterations, inner steps and batch size must all be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_theta >= 0.0 && self.lr_theta.is_finite()) {
            bail!(Config, "learning rates must be finite and non-negative");
        }
        Ok(())
    }

    /// Gradient updates the plan performs for `num_agents` agents.
    pub fn total_updates(&self, num_agents: usize) -> usize {
        match self.mode {
            TrainMode::Joint => self.outer * self.inner,
            TrainMode::ControlWise => self.outer * self.inner * num_agents,
            TrainMode::CdpsOnly => 0,
        }
    }
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub outer: usize,
    /// Active agent in control-wise mode.
    pub agent: Option<usize>,
    pub ell_u: f64,
    pub ell_c: f64,
    pub ell_psi: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_lr: f64,
    /// Update indices skipped because the rollout diverged.
    pub skipped: Vec<usize>,
    /// Number of frozen-policy comparisons performed (control-wise only).
    pub freeze_checks: usize,
}

impl TrainReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.curve.iter().map(|p| p.objective).collect()
    }
}

/// Observer called after every update with the iteration and the policies.
pub type UpdateHook<'h> = &'h mut dyn FnMut(usize, &[ControlPolicy]);

/// One rollout, backward pass and Adam step on the active agents.
fn train_step(
    problem: &Problem,
    policies: &mut [ControlPolicy],
    adams: &mut [AdamState],
    active: &[bool],
    plan: &TrainPlan,
    iteration: usize,
    lr: f64,
) -> Result<RolloutRecord> {
    let mut noise = NoiseStream::new(plan.seed, Purpose::Training, iteration as u64);
    let opts = RolloutOptions { trainable: active.to_vec(), ..RolloutOptions::default() };
    let (rt, rec) = bptt_rollout(problem, policies, &opts, &mut noise, plan.batch)?;
    let grads = rt.tape.backward(rt.objective)?;
    let mut all = Vec::with_capacity(policies.len());
    for vars in rt.policy_vars.iter() {
        let g: Option<Vec<Tensor>> = vars.as_ref().map(|v| v.vars().iter().map(|&x| grads.wrt(&rt.tape, x)).collect());
        if let Some(g) = &g {
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { step: problem.grid.len() - 1 });
            }
        }
        all.push(g);
    }
    for ((p, g), adam) in policies.iter_mut().zip(all).zip(adams.iter_mut()) {
        if let Some(g) = g {
            crate::diffgraph::adam_step(&mut p.tensors_mut(), &g, adam, lr)?;
        }
    }
    Ok(rec)
}

/// Applies the divergence guard: the first divergence halves the learning
/// rate and skips the update, the second aborts with the partial curve.
struct Guard {
    lr: f64,
    halved: bool,
}

impl Guard {
    fn handle(&mut self, err: Error, iteration: usize, report: &mut TrainReport) -> Result<()> {
        match err {
            Error::Diverged { .. } | Error::Numeric(_) if !self.halved => {
                self.halved = true;
                self.lr *= 0.5;
                report.skipped.push(iteration);
                Ok(())
            }
            Error::Diverged { step } => Err(Error::Training {
                message: format!("rollout diverged again at step {step} of update {iteration}"),
                curve: report.objectives(),
            }),
            Error::Numeric(m) => Err(Error::Training { message: m, curve: report.objectives() }),
            other => Err(other),
        }
    }
}

fn point(iteration: usize, outer: usize, agent: Option<usize>, rec: &RolloutRecord) -> CurvePoint {
    CurvePoint { iteration, outer, agent, ell_u: rec.ell_u, ell_c: rec.ell_c, ell_psi: rec.ell_psi, objective: rec.objective }
}

fn check_trainable(plan: &TrainPlan, problem: &Problem, policies: &[ControlPolicy], mode: TrainMode) -> Result<()> {
    if plan.mode != mode {
        bail!(Config, "plan mode {:?} used with the {mode:?} trainer", plan.mode);
    }
    plan.validate()?;
    problem.validate()?;
    problem.check_policies(policies)?;
    if policies.iter().map(|p| p.num_params()).sum::<usize>() == 0 {
        bail!(Config, "there are no learnable parameters to train");
    }
    Ok(())
}

/// Update all policies simultaneously for `outer × inner` steps.
pub fn joint_ido(
    plan: &TrainPlan,
    problem: &Problem,
    policies: &mut [ControlPolicy],
    mut hook: Option<UpdateHook>,
) -> Result<TrainReport> {
    check_trainable(plan, problem, policies, TrainMode::Joint)?;
    let n = policies.len();
    let mut adams = vec![AdamState::new(plan.lr); n];
    let active = vec![true; n];
    let mut report = TrainReport::default();
    let mut guard = Guard { lr: plan.lr, halved: false };
    for it in 0..plan.total_updates(n) {
        match train_step(problem, policies, &mut adams, &active, plan, it, guard.lr) {
            Ok(rec) => report.curve.push(point(it, it / plan.inner, None, &rec)),
            Err(e) => guard.handle(e, it, &mut report)?,
        }
        if let Some(h) = hook.as_mut() {
            h(it, policies);
        }
    }
    report.final_lr = guard.lr;
    Ok(report)
}

/// Coordinate descent over agents: for each outer iteration and each agent
/// in turn, `inner` updates of that agent's policy with all others frozen.
pub fn controlwise_ido(
    plan: &TrainPlan,
    problem: &Problem,
    policies: &mut [ControlPolicy],
    mut hook: Option<UpdateHook>,
) -> Result<TrainReport> {
    check_trainable(plan, problem, policies, TrainMode::ControlWise)?;
    let n = policies.len();
    let mut adams = vec![AdamState::new(plan.lr); n];
    let mut report = TrainReport::default();
    let mut guard = Guard { lr: plan.lr, halved: false };
    let mut it = 0;
    for outer in 0..plan.outer {
        let mut order: Vec<usize> = (0..n).collect();
        if plan.shuffle_agents {
            NoiseStream::new(plan.seed, Purpose::Schedule, outer as u64).shuffle(&mut order);
        }
        for &i in &order {
            let mut active = vec![false; n];
            active[i] = true;
            let frozen: Vec<Vec<f64>> = policies.iter().map(|p| p.flat_params()).collect();
            for _ in 0..plan.inner {
                match train_step(problem, policies, &mut adams, &active, plan, it, guard.lr) {
                    Ok(rec) => report.curve.push(point(it, outer, Some(i), &rec)),
                    Err(e) => guard.handle(e, it, &mut report)?,
                }
                if let Some(h) = hook.as_mut() {
                    h(it, policies);
                }
                it += 1;
            }
            // Aggregation parameters would be updated here; fixed masks have none.
            let _ = problem.agg.parameters();
            for (j, p) in policies.iter().enumerate() {
                if j != i {
                    report.freeze_checks += 1;
                    let same = p.flat_params().iter().zip(&frozen[j]).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(Error::Training {
                            message: format!("agent {j} changed while agent {i} was active"),
                            curve: report.objectives(),
                        });
                    }
                }
            }
        }
    }
    report.final_lr = guard.lr;
    Ok(report)
}

/// Control used by the untaped sampler.
#[derive(Debug, Clone, Copy)]
pub enum Steering<'a> {
    None,
    Policies(&'a [ControlPolicy]),
    /// Training-free control `−α ∇_{Xⁱ} Ψ(Ŷ₀)`.
    Cdps { alpha_guid: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub agents: Vec<Tensor>,
    pub composite: Tensor,
    /// Terminal cost per sample.
    pub psi: Vec<f64>,
}

/// Untaped simulation of the coupled system. Consumes the noise stream in
/// the same order as [`bptt_rollout`], so a zero control reproduces the
/// taped trajectory exactly.
pub fn sample(problem: &Problem, steering: Steering, noise: &mut NoiseStream, batch: usize) -> Result<SampleBatch> {
    problem.validate()?;
    if let Steering::Policies(p) = steering {
        problem.check_policies(p)?;
    }
    if batch == 0 {
        bail!(Config, "sample batch must be at least 1");
    }
    let n = problem.num_agents();
    let d = problem.dim();
    let sched = problem.schedule;
    let (_, sigma0) = sched.marginal_coeffs(problem.grid.times()[0])?;
    let mut xs: Vec<Tensor> = (0..n).map(|_| crate::diffgraph::fwd_scale(&draw(noise, batch, d), sigma0)).collect();
    for (k, t, dt) in problem.grid.steps() {
        let beta = sched.beta(t);
        let g = math::sqrt(beta);
        let scores: Vec<Tensor> = xs.iter().map(|x| problem.score.score(x, t, sched)).collect::<Result<_>>()?;
        let controls: Option<Vec<Tensor>> = match steering {
            Steering::None => None,
            Steering::Policies(ps) => {
                let x0: Vec<Tensor> =
                    xs.iter().zip(&scores).map(|(x, s)| tweedie_batch(x, t, s, sched)).collect::<Result<_>>()?;
                let r0: Vec<&Tensor> = x0.iter().collect();
                let y0 = problem.agg.aggregate_batch(&r0)?;
                let (_, guidance) = tweedie_guidance(problem.psi, problem.agg, &y0)?;
                let rx: Vec<&Tensor> = xs.iter().collect();
                let y = problem.agg.aggregate_batch(&rx)?;
                Some(ps.iter().zip(&xs).zip(&guidance).map(|((p, x), gd)| p.eval(x, &y, gd, t)).collect::<Result<_>>()?)
            }
            Steering::Cdps { alpha_guid } => {
                let (_, grads) = cdps_guidance(&xs, t, problem.score, problem.agg, problem.psi, sched)?;
                Some(grads.iter().map(|gr| gr.map(|v| -alpha_guid * v)).collect())
            }
        };
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let xi = draw(noise, batch, d);
            let x = em_update(&xs[i], &scores[i], controls.as_ref().map(|c| &c[i]), beta, g, dt, &xi);
            if !x.is_finite() {
                return Err(Error::Diverged { step: k });
            }
            next.push(x);
        }
        xs = next;
    }
    let refs: Vec<&Tensor> = xs.iter().collect();
    let composite = problem.agg.aggregate_batch(&refs)?;
    let psi = problem.psi.eval(&composite)?;
    Ok(SampleBatch { agents: xs, composite, psi })
}

/// `total` evaluation samples drawn in chunks; chunk `c` uses evaluation
/// stream `c`, so different methods see the same noise.
pub fn sample_many(
    problem: &Problem,
    steering: Steering,
    seed: u64,
    total: usize,
    chunk: usize,
) -> Result<SampleBatch> {
    if total == 0 || chunk == 0 {
        bail!(Config, "sample count and chunk size must be at least 1");
    }
    let mut agents: Vec<Vec<Tensor>> = vec![Vec::new(); problem.num_agents()];
    let mut composite = Vec::new();
    let mut psi = Vec::with_capacity(total);
    let mut done = 0;
    let mut c = 0u64;
    while done < total {
        let b = chunk.min(total - done);
        let mut noise = NoiseStream::new(seed, Purpose::Evaluation, c);
        let s = sample(problem, steering, &mut noise, b)?;
        for (acc, a) in agents.iter_mut().zip(s.agents) {
            acc.push(a);
        }
        composite.push(s.composite);
        psi.extend(s.psi);
        done += b;
        c += 1;
    }
    Ok(SampleBatch {
        agents: agents.into_iter().map(|a| Tensor::concat_rows(&a)).collect::<Result<_>>()?,
        composite: Tensor::concat_rows(&composite)?,
        psi,
    })
}

/// CDPS baseline: the coupled system steered by the scaled cost gradient.
pub fn sample_cdps(problem: &Problem, alpha_guid: f64, seed: u64, total: usize, chunk: usize) -> Result<SampleBatch> {
    sample_many(problem, Steering::Cdps { alpha_guid }, seed, total, chunk)
}

/// Naive product-of-experts sampler: one reverse SDE whose score is the sum
/// of the given models' scores.
pub fn sample_poe_naive(
    scores: &[ScoreProvider],
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    noise: &mut NoiseStream,
    batch: usize,
) -> Result<Tensor> {
    let Some(first) = scores.first() else {
        bail!(Config, "naive product sampling needs at least one score model");
    };
    let d = first.dim();
    if scores.iter().any(|s| s.dim() != d) {
        bail!(Shape, "score models must share one dimension");
    }
    let (_, sigma0) = schedule.marginal_coeffs(grid.times()[0])?;
    let mut x = crate::diffgraph::fwd_scale(&draw(noise, batch, d), sigma0);
    for (k, t, dt) in grid.steps() {
        let beta = schedule.beta(t);
        let mut s = scores[0].score(&x, t, schedule)?;
        for other in &scores[1..] {
            s.add_assign(&other.score(&x, t, schedule)?);
        }
        let xi = draw(noise, batch, d);
        x = em_update(&x, &s, None, beta, math::sqrt(beta), dt, &xi);
        if !x.is_finite() {
            return Err(Error::Diverged { step: k });
        }
    }
    Ok(x)
}
