use cmad_core::aggregation::MaskAggregator;
use cmad_core::control::{cdps_guidance, ControlPolicy, PolicyShape};
use cmad_core::costs::{SocConfig, TerminalCost, TerminalKind};
use cmad_core::diffgraph::{HeadInit, Mlp, Tape, Tensor};
use cmad_core::experiment::gmm2d_mixture;
use cmad_core::noise::{NoiseStream, Purpose};
use cmad_core::optimize::{bptt_rollout, Problem, RolloutOptions};
use cmad_core::score::{GaussianMixture, ScoreNet, ScoreParam, ScoreProvider};
use cmad_core::sde::{NoiseSchedule, TimeGrid};

fn randomise(t: &mut Tensor, rng: &mut NoiseStream, scale: f64) {
    for v in t.data_mut() {
        *v += scale * rng.normal();
    }
}

/// Worst relative error, ignoring entries where both sides are negligible.
fn worst_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-7)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn mlp_2_16_16_2_matches_finite_differences() {
    let mut rng = NoiseStream::new(4, Purpose::Init, 0);
    let mlp = Mlp::new(2, &[16, 16], 2, 0, HeadInit::Random, &mut rng).unwrap();
    let x = Tensor::from_vec(1, 2, vec![0.7, -1.3]).unwrap();
    let w = Tensor::from_vec(1, 2, vec![0.4, -0.9]).unwrap();
    let f = |m: &Mlp| -> f64 {
        let y = m.eval(&[&x], None).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut tape = Tape::new();
    let vars = mlp.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, &vars, &[xv], None).unwrap();
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).unwrap();
    let root = tape.sum(p);
    let grads = tape.backward(root).unwrap();
    let mut analytic = Vec::new();
    for v in vars.vars() {
        analytic.extend_from_slice(grads.wrt(&tape, v).data());
    }
    let h = 1e-5;
    let mut numeric = Vec::new();
    let n_tensors = mlp.clone().tensors_mut().len();
    for ti in 0..n_tensors {
        let len = mlp.clone().tensors_mut()[ti].len();
        for j in 0..len {
            let mut plus = mlp.clone();
            plus.tensors_mut()[ti].data_mut()[j] += h;
            let mut minus = mlp.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= h;
            numeric.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    let err = worst_rel(&analytic, &numeric);
    assert!(err < 1e-4, "worst relative error {err}");
}

struct Setup {
    score: ScoreProvider,
    agg: MaskAggregator,
    psi: TerminalCost,
    cfg: SocConfig,
    sched: NoiseSchedule,
    grid: TimeGrid,
}

impl Setup {
    fn new(n: usize, score: ScoreProvider) -> Self {
        Self {
            score,
            agg: if n == 1 { MaskAggregator::identity(2).unwrap() } else { MaskAggregator::halves(n, 2).unwrap() },
            psi: TerminalCost::new(TerminalKind::QuadraticWell { target: vec![1.5, -0.5] }),
            cfg: SocConfig { lambda: 2.0, alpha_run: 0.7, ..SocConfig::default() },
            sched: NoiseSchedule::default(),
            grid: TimeGrid::linear(5, 1e-3).unwrap(),
        }
    }

    fn problem(&self) -> Problem<'_> {
        Problem { score: &self.score, agg: &self.agg, psi: &self.psi, cfg: &self.cfg, schedule: &self.sched, grid: &self.grid }
    }
}

fn random_policies(n: usize, seed: u64) -> Vec<ControlPolicy> {
    let shape = PolicyShape { hidden: vec![6], time_dim: 4, nn2_hidden: vec![4], c0: 0.3 };
    let mut rng = NoiseStream::new(seed, Purpose::Init, 99);
    (0..n)
        .map(|i| {
            let mut p = ControlPolicy::new(i, 2, &shape, seed).unwrap();
            for t in p.tensors_mut() {
                randomise(t, &mut rng, 0.3);
            }
            p
        })
        .collect()
}

/// Gradient of Ĵ w.r.t. all policy parameters against central differences,
/// with the guidance input held at the base rollout's values (it is a
/// stop-gradient constant by construction).
fn check_rollout_gradient(n: usize, batch: usize) -> f64 {
    let s = Setup::new(n, ScoreProvider::analytic(gmm2d_mixture()));
    let p = s.problem();
    let policies = random_policies(n, 5);
    let noise = || NoiseStream::new(17, Purpose::Training, 0);
    let keep = RolloutOptions { keep_trajectory: true, ..RolloutOptions::default() };
    let (rt, rec) = bptt_rollout(&p, &policies, &keep, &mut noise(), batch).unwrap();
    let grads = rt.tape.backward(rt.objective).unwrap();
    let mut analytic = Vec::new();
    for v in rt.policy_vars.iter().flatten() {
        for var in v.vars() {
            analytic.extend_from_slice(grads.wrt(&rt.tape, var).data());
        }
    }
    let fixed = RolloutOptions { fixed_guidance: Some(rec.guidance.clone()), ..RolloutOptions::default() };
    let objective = |ps: &[ControlPolicy]| bptt_rollout(&p, ps, &fixed, &mut noise(), batch).unwrap().1.objective;
    assert_eq!(objective(&policies), rec.objective);
    let h = 1e-5;
    let mut numeric = Vec::new();
    for a in 0..n {
        let count = policies[a].clone().tensors_mut().len();
        for ti in 0..count {
            let len = policies[a].clone().tensors_mut()[ti].len();
            for j in 0..len {
                let mut plus = policies.clone();
                plus[a].tensors_mut()[ti].data_mut()[j] += h;
                let mut minus = policies.clone();
                minus[a].tensors_mut()[ti].data_mut()[j] -= h;
                numeric.push((objective(&plus) - objective(&minus)) / (2.0 * h));
            }
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    worst_rel(&analytic, &numeric)
}

#[test]
fn rollout_gradient_two_agents() {
    let err = check_rollout_gradient(2, 3);
    assert!(err < 1e-3, "worst relative error {err}");
}

#[test]
fn rollout_gradient_single_agent_identity() {
    let err = check_rollout_gradient(1, 1);
    assert!(err < 1e-3, "worst relative error {err}");
}

fn small_score_net() -> ScoreNet {
    let mut net = ScoreNet::new(2, &[8], 4, ScoreParam::NoisePrediction, 3).unwrap();
    let mut rng = NoiseStream::new(8, Purpose::Init, 1);
    for t in net.net.tensors_mut() {
        randomise(t, &mut rng, 0.1);
    }
    net
}

#[test]
fn guidance_carries_no_adjoint_into_the_score_network() {
    // Freezing the guidance at its recorded values only removes a path
    // through the guidance input, so identical score gradients mean that
    // path carries nothing.
    let s = Setup::new(2, ScoreProvider::Network(small_score_net()));
    let p = s.problem();
    let policies = random_policies(2, 9);
    let opts = RolloutOptions { score_trainable: true, keep_trajectory: true, ..RolloutOptions::default() };
    let noise = || NoiseStream::new(2, Purpose::Training, 0);
    let (rt, rec) = bptt_rollout(&p, &policies, &opts, &mut noise(), 2).unwrap();
    let frozen = RolloutOptions { fixed_guidance: Some(rec.guidance.clone()), ..opts.clone() };
    let (rt2, _) = bptt_rollout(&p, &policies, &frozen, &mut noise(), 2).unwrap();
    let g1 = rt.tape.backward(rt.objective).unwrap();
    let g2 = rt2.tape.backward(rt2.objective).unwrap();
    let v1 = rt.score.vars().unwrap().vars();
    let v2 = rt2.score.vars().unwrap().vars();
    for (a, b) in v1.iter().zip(&v2) {
        assert_eq!(g1.wrt(&rt.tape, *a), g2.wrt(&rt2.tape, *b));
    }
}

#[test]
fn control_term_gives_zero_score_gradient_at_k2() {
    // K = 2: one control application, computed from the initial state. The
    // control energy depends on the score only through the guidance input,
    // which is stop-gradiented.
    let mut s = Setup::new(2, ScoreProvider::Network(small_score_net()));
    s.grid = TimeGrid::linear(2, 1e-3).unwrap();
    let p = s.problem();
    let policies = random_policies(2, 4);
    let opts = RolloutOptions { score_trainable: true, ..RolloutOptions::default() };
    let (rt, _) = bptt_rollout(&p, &policies, &opts, &mut NoiseStream::new(6, Purpose::Training, 0), 3).unwrap();
    assert!(rt.tape.value(rt.control_term).item() > 0.0);
    let g = rt.tape.backward(rt.control_term).unwrap();
    for v in rt.score.vars().unwrap().vars() {
        assert!(g.wrt(&rt.tape, v).data().iter().all(|&x| x == 0.0));
    }
    // The full objective does reach the score network (drift and running cost).
    let g = rt.tape.backward(rt.objective).unwrap();
    let total: f64 = rt.score.vars().unwrap().vars().iter().map(|&v| g.wrt(&rt.tape, v).data().iter().map(|x| x.abs()).sum::<f64>()).sum();
    assert!(total > 0.0);
}

#[test]
fn cdps_follows_score_parameters() {
    let agg = MaskAggregator::halves(2, 2).unwrap();
    let psi = TerminalCost::new(TerminalKind::QuadraticWell { target: vec![1.0, 1.0] });
    let sched = NoiseSchedule::default();
    let xs = vec![Tensor::from_vec(1, 2, vec![0.3, -0.2]).unwrap(), Tensor::from_vec(1, 2, vec![-0.5, 0.8]).unwrap()];
    let net = small_score_net();
    let mut bumped = net.clone();
    bumped.net.tensors_mut()[0].data_mut()[0] += 0.5;
    let a = cdps_guidance(&xs, 0.5, &ScoreProvider::Network(net), &agg, &psi, &sched).unwrap().1;
    let b = cdps_guidance(&xs, 0.5, &ScoreProvider::Network(bumped), &agg, &psi, &sched).unwrap().1;
    assert_ne!(a, b);
}

#[test]
fn cdps_guidance_differs_from_tweedie_guidance_for_gaussians() {
    // For N(0, I) the Tweedie map is x ↦ αx, so the state gradient is α times
    // the look-ahead gradient.
    let agg = MaskAggregator::identity(2).unwrap();
    let target = vec![1.0, -2.0];
    let psi = TerminalCost::new(TerminalKind::QuadraticWell { target: target.clone() });
    let sched = NoiseSchedule::default();
    let score = ScoreProvider::analytic(GaussianMixture::standard_normal(2));
    let x = Tensor::from_vec(1, 2, vec![0.4, 0.1]).unwrap();
    let t = 0.3;
    let (alpha, _) = sched.marginal_coeffs(t).unwrap();
    let g = cdps_guidance(std::slice::from_ref(&x), t, &score, &agg, &psi, &sched).unwrap().1;
    for j in 0..2 {
        let expected = alpha * 2.0 * (alpha * x.data()[j] - target[j]);
        assert!((g[0].data()[j] - expected).abs() < 1e-12);
    }
}
