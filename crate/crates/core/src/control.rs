//! Per-agent control policies `uⁱ = NN₁(Xⁱ, Y, gⁱ, t) + NN₂(t)·gⁱ` and the
//! training-free CDPS control.

use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::MaskAggregator;
use crate::costs::TerminalCost;
use crate::diffgraph::{fwd_scale, Checkpoint, HeadInit, Mlp, MlpVars, Tape, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::noise::{NoiseStream, Purpose};
use crate::score::{tweedie_on_tape, ScoreProvider};
use crate::sde::NoiseSchedule;

/// Widths of a policy's two networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyShape {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub nn2_hidden: Vec<usize>,
    /// Constant output of NN₂ at initialisation.
    pub c0: f64,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self { hidden: vec![64, 64], time_dim: 16, nn2_hidden: vec![16], c0: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    pub agent: usize,
    pub nn1: Mlp,
    pub nn2: Mlp,
}

/// Tape handles of one policy.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub nn1: MlpVars,
    pub nn2: MlpVars,
}

impl PolicyVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.nn1.vars();
        v.extend(self.nn2.vars());
        v
    }
}

impl ControlPolicy {
    /// NN₁ starts with a zero output layer, NN₂ with the constant `c0`.
    pub fn new(agent: usize, dim: usize, shape: &PolicyShape, seed: u64) -> Result<Self> {
        if shape.time_dim == 0 {
            bail!(Config, "control networks need a time embedding");
        }
        let mut rng = NoiseStream::new(seed, Purpose::Init, 0x1000 + agent as u64);
        let nn1 = Mlp::new(3 * dim, &shape.hidden, dim, shape.time_dim, HeadInit::Zero, &mut rng)?;
        let nn2 = Mlp::new(0, &shape.nn2_hidden, 1, shape.time_dim, HeadInit::Constant(shape.c0), &mut rng)?;
        Ok(Self { agent, nn1, nn2 })
    }

    pub fn dim(&self) -> usize {
        self.nn1.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.nn1.num_params() + self.nn2.num_params()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.nn1.tensors_mut();
        v.extend(self.nn2.tensors_mut());
        v
    }

    /// Snapshot of all parameter values, for freeze checks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for net in [&self.nn1, &self.nn2] {
            for l in net.layers() {
                out.extend_from_slice(l.weight.data());
                out.extend_from_slice(l.bias.data());
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PolicyVars {
        PolicyVars { nn1: self.nn1.bind(tape, trainable), nn2: self.nn2.bind(tape, trainable) }
    }

    fn check(&self, x: (usize, usize), y: (usize, usize), g: (usize, usize)) -> Result<()> {
        let d = self.dim();
        if x.1 != d || y.1 != d || g.1 != d {
            bail!(Shape, "control inputs must have {d} columns");
        }
        if x.0 != y.0 || x.0 != g.0 {
            bail!(Shape, "control inputs differ in batch size");
        }
        Ok(())
    }

    /// Batched control; bit-identical to [`ControlPolicy::forward`].
    pub fn eval(&self, x: &Tensor, y: &Tensor, guidance: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x.shape(), y.shape(), guidance.shape())?;
        let h = self.nn1.eval(&[x, y, guidance], Some(&[t]))?;
        let c = self.nn2.eval(&[], Some(&[t]))?.item();
        let mut out = fwd_scale(guidance, c);
        for (o, hv) in out.data_mut().iter_mut().zip(h.data()) {
            *o += hv;
        }
        Ok(out)
    }

    /// Taped control `NN₁(x, y, g, t) + NN₂(t)·g`.
    pub fn forward(&self, tape: &mut Tape, vars: &PolicyVars, x: Var, y: Var, guidance: Var, t: f64) -> Result<Var> {
        self.check(tape.value(x).shape(), tape.value(y).shape(), tape.value(guidance).shape())?;
        let h = self.nn1.forward(tape, &vars.nn1, &[x, y, guidance], Some(&[t]))?;
        let c = self.nn2.forward(tape, &vars.nn2, &[], Some(&[t]))?;
        let rows = tape.value(x).rows();
        let ones = tape.constant(Tensor::filled(rows, 1, 1.0));
        let col = tape.matmul(ones, c)?;
        let scaled = tape.scale_rows(guidance, col)?;
        tape.add(h, scaled)
    }

    pub fn write_to(&self, ck: &mut Checkpoint) {
        let p = alloc::format!("agent{}", self.agent);
        self.nn1.write_to(ck, &alloc::format!("{p}.nn1"));
        self.nn2.write_to(ck, &alloc::format!("{p}.nn2"));
    }

    pub fn read_from(ck: &Checkpoint, agent: usize) -> Result<Self> {
        let p = alloc::format!("agent{agent}");
        let nn1 = Mlp::read_from(ck, &alloc::format!("{p}.nn1"))?;
        let nn2 = Mlp::read_from(ck, &alloc::format!("{p}.nn2"))?;
        if nn1.input_dim() != 3 * nn1.output_dim() || nn2.output_dim() != 1 || nn2.input_dim() != 0 {
            bail!(Shape, "policy checkpoint for agent {agent} has an unexpected layout");
        }
        Ok(Self { agent, nn1, nn2 })
    }
}

/// Single-sample control for agent inputs given as slices.
pub fn eval_control(policy: &ControlPolicy, x_i: &[f64], y: &[f64], t: f64, guidance: &[f64]) -> Result<Vec<f64>> {
    let row = |v: &[f64]| Tensor::row_vector(v.to_vec());
    Ok(policy.eval(&row(x_i), &row(y), &row(guidance), t)?.into_data())
}

/// Save a set of policies in one checkpoint.
pub fn policies_to_checkpoint(policies: &[ControlPolicy]) -> Checkpoint {
    let mut ck = Checkpoint::new("policies").with_meta("agents", policies.len());
    for p in policies {
        p.write_to(&mut ck);
    }
    ck
}

pub fn policies_from_checkpoint(ck: &Checkpoint) -> Result<Vec<ControlPolicy>> {
    if ck.kind != "policies" {
        return Err(Error::Parse(alloc::format!("expected a policies checkpoint, got `{}`", ck.kind)));
    }
    let n: usize = ck.meta_parse("agents")?;
    (0..n).map(|i| ControlPolicy::read_from(ck, i)).collect()
}

/// `û = alpha_guid · guidance_wrt_state`.
pub fn cdps_control(guidance_wrt_state: &[f64], alpha_guid: f64) -> Vec<f64> {
    guidance_wrt_state.iter().map(|g| alpha_guid * g).collect()
}

/// `∇_{Xⁱ} Ψ(Ŷ₀)` for every agent, differentiated through the Tweedie map
/// and the score model (batched; one row per sample).
pub fn cdps_guidance(
    agents: &[Tensor],
    t: f64,
    score: &ScoreProvider,
    agg: &MaskAggregator,
    psi: &TerminalCost,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let sb = score.bind(&mut tape, false);
    let cb = psi.bind(&mut tape);
    let xs: Vec<Var> = agents.iter().map(|a| tape.leaf(a.clone())).collect();
    let mut x0 = Vec::with_capacity(xs.len());
    for &x in &xs {
        let s = score.score_on_tape(&mut tape, &sb, x, t, schedule)?;
        x0.push(tweedie_on_tape(&mut tape, x, t, s, schedule)?);
    }
    let y0 = agg.aggregate_on_tape(&mut tape, &x0)?;
    let cost = psi.on_tape(&mut tape, &cb, y0)?;
    let total = tape.sum(cost);
    let grads = tape.backward(total)?;
    let values = tape.value(cost).data().to_vec();
    Ok((values, xs.iter().map(|&x| grads.wrt(&tape, x)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::TerminalKind;
    use crate::score::{tweedie_batch, GaussianMixture};

    #[test]
    fn fresh_policy_is_c0_times_guidance() {
        let shape = PolicyShape { c0: 0.7, ..PolicyShape::default() };
        let p = ControlPolicy::new(0, 3, &shape, 1).unwrap();
        let mut rng = NoiseStream::new(3, Purpose::Data, 0);
        for _ in 0..100 {
            let mut v = [0.0; 10];
            rng.fill_normal(&mut v);
            let t = rng.uniform();
            let u = eval_control(&p, &v[0..3], &v[3..6], t, &v[6..9]).unwrap();
            for (ui, gi) in u.iter().zip(&v[6..9]) {
                assert_eq!(*ui, 0.7 * gi);
            }
        }
        let z = ControlPolicy::new(1, 3, &PolicyShape::default(), 1).unwrap();
        assert_eq!(eval_control(&z, &[1.0; 3], &[2.0; 3], 0.5, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn policy_sees_the_aggregate() {
        let mut p = ControlPolicy::new(0, 2, &PolicyShape::default(), 1).unwrap();
        let mut rng = NoiseStream::new(7, Purpose::Init, 0);
        for t in p.nn1.tensors_mut() {
            rng.fill_normal(t.data_mut());
        }
        let a = eval_control(&p, &[0.1, 0.2], &[0.0, 0.0], 0.5, &[0.3, 0.4]).unwrap();
        let b = eval_control(&p, &[0.1, 0.2], &[1.0, 0.0], 0.5, &[0.3, 0.4]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, eval_control(&p, &[0.1, 0.2], &[0.0, 0.0], 0.5, &[0.3, 0.4]).unwrap());
        assert!(eval_control(&p, &[0.1], &[0.0, 0.0], 0.5, &[0.3, 0.4]).is_err());
    }

    #[test]
    fn taped_matches_untaped() {
        let mut p = ControlPolicy::new(0, 2, &PolicyShape { c0: 0.3, ..PolicyShape::default() }, 1).unwrap();
        let mut rng = NoiseStream::new(8, Purpose::Init, 0);
        for t in p.tensors_mut() {
            rng.fill_normal(t.data_mut());
        }
        let x = Tensor::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = Tensor::from_vec(2, 2, vec![-0.1, 0.5, 0.0, 0.9]).unwrap();
        let g = Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let direct = p.eval(&x, &y, &g, 0.3).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let (xv, yv, gv) = (tape.constant(x), tape.constant(y), tape.constant(g));
        let u = p.forward(&mut tape, &vars, xv, yv, gv, 0.3).unwrap();
        assert_eq!(tape.value(u), &direct);
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let ps: Vec<ControlPolicy> = (0..2).map(|i| ControlPolicy::new(i, 4, &PolicyShape::default(), 5).unwrap()).collect();
        let back = policies_from_checkpoint(&Checkpoint::decode(&policies_to_checkpoint(&ps).encode()).unwrap()).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn cdps_examples() {
        assert_eq!(cdps_control(&[1.0, -2.0], 0.0), vec![0.0, 0.0]);
        assert_eq!(cdps_control(&[1.0, -2.0], 100.0), vec![100.0, -200.0]);
    }

    #[test]
    fn cdps_guidance_matches_finite_differences() {
        let s = NoiseSchedule::default();
        let score = ScoreProvider::analytic(GaussianMixture::new(vec![1.0], vec![vec![0.5, -0.5]], vec![0.3]).unwrap());
        let agg = MaskAggregator::halves(2, 2).unwrap();
        let target = vec![1.0, 2.0];
        let psi = TerminalCost::new(TerminalKind::QuadraticWell { target: target.clone() });
        let xs = vec![
            Tensor::from_vec(1, 2, vec![0.2, -0.4]).unwrap(),
            Tensor::from_vec(1, 2, vec![0.7, 0.1]).unwrap(),
        ];
        let t = 0.4;
        let (_, g) = cdps_guidance(&xs, t, &score, &agg, &psi, &s).unwrap();
        let f = |xs: &[Tensor]| {
            let x0: Vec<Tensor> =
                xs.iter().map(|x| tweedie_batch(x, t, &score.score(x, t, &s).unwrap(), &s).unwrap()).collect();
            let refs: Vec<&Tensor> = x0.iter().collect();
            psi.eval(&agg.aggregate_batch(&refs).unwrap()).unwrap()[0]
        };
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut p = xs.clone();
                p[i].data_mut()[j] += h;
                let mut m = xs.clone();
                m[i].data_mut()[j] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let a = g[i].data()[j];
                assert!((a - fd).abs() < 1e-6 * fd.abs().max(1.0), "{a} vs {fd}");
            }
        }
        // Closed form for one Gaussian component: Tweedie is affine with
        // slope (1 − σ²/v)/α, v = α²s² + σ², so ∇ = slope · 2(Ŷ₀ − y*) on owned coords.
        let (a, sig) = s.marginal_coeffs(t).unwrap();
        let v = a * a * 0.3 + sig * sig;
        let slope = (1.0 - sig * sig / v) / a;
        let x0_0 = tweedie_batch(&xs[0], t, &score.score(&xs[0], t, &s).unwrap(), &s).unwrap();
        assert!((g[0].data()[0] - slope * 2.0 * (x0_0.data()[0] - target[0])).abs() < 1e-10);
        assert_eq!(g[0].data()[1], 0.0);
    }
}
