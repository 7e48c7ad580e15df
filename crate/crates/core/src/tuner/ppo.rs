//! Small actor-critic networks trained with clipped PPO.
//!
//! Networks are 2x64 tanh MLPs with hand-written backprop. The layout actor
//! is Gaussian over pre-sigmoid actions; loop actors pick a direction in
//! {-1, 0, +1} per parameter.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const HIDDEN: usize = 64;
pub const LEARNING_RATE: f64 = 3e-4;
pub const CLIP: f64 = 0.2;
pub const EPOCHS: usize = 8;
const LN_2PI_HALF: f64 = 0.918_938_533_204_672_7;

/// Fully connected tanh network with a linear output layer. Parameters
/// live in one flat vector so the optimizer can treat them uniformly.
#[derive(Clone, Debug)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform Glorot initialization; the output layer is scaled by
    /// `out_scale`. Biases start at zero.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut impl Rng) -> Mlp {
        let mut params = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let lim = (6.0 / (i + o) as f64).sqrt();
            let scale = if l + 2 == sizes.len() { out_scale } else { 1.0 };
            params.extend((0..i * o).map(|_| rng.gen_range(-lim..lim) * scale));
            params.extend(std::iter::repeat(0.0).take(o));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    fn run(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let n = self.sizes.len() - 1;
        for l in 0..n {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            let a = acts.last().unwrap();
            let mut y: Vec<f64> = (0..o)
                .map(|r| b[r] + (0..i).map(|c| w[r * i + c] * a[c]).sum::<f64>())
                .collect();
            if l + 1 < n {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
            off += i * o + o;
        }
        (acts.last().unwrap().clone(), Trace { acts })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).0
    }

    /// Adds d(loss)/d(params) to `grad` given d(loss)/d(output).
    fn backward(&self, t: &Trace, dy: &[f64], grad: &mut [f64]) {
        let n = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(n);
        let mut off = 0;
        for l in 0..n {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dy.to_vec();
        for l in (0..n).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let a = &t.acts[l];
            let off = offs[l];
            for r in 0..o {
                for c in 0..i {
                    grad[off + r * i + c] += delta[r] * a[c];
                }
                grad[off + i * o + r] += delta[r];
            }
            if l > 0 {
                let w = &self.params[off..off + i * o];
                delta = (0..i)
                    .map(|c| {
                        let s: f64 = (0..o).map(|r| w[r * i + c] * delta[r]).sum();
                        s * (1.0 - a[c] * a[c])
                    })
                    .collect();
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grad[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grad[k] * grad[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// Pre-squash Gaussian sample per tunable.
    Continuous(Vec<f64>),
    /// Direction index (0 = -1, 1 = stay, 2 = +1) per parameter.
    Discrete(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Head {
    Gaussian { log_std: Vec<f64> },
    Categorical { heads: usize },
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = l.iter().map(|v| (v - mx).exp()).sum();
    l.iter().map(|v| v - mx - s.ln()).collect()
}

/// Policy network with its optimizer. For the Gaussian head the trainable
/// log standard deviations follow the network weights in the parameter
/// vector seen by the optimizer.
#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    head: Head,
    opt: Adam,
}

/// Network input: `ln(1 + |x|)` with the sign kept, so raw sizes and
/// counts stay in the tanh range.
pub fn squash_input(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.signum() * v.abs().ln_1p()).collect()
}

impl Actor {
    pub fn gaussian(state_len: usize, actions: usize, rng: &mut impl Rng) -> Actor {
        let net = Mlp::new(&[state_len, HIDDEN, HIDDEN, actions], 0.01, rng);
        let n = net.params.len() + actions;
        Actor {
            net,
            head: Head::Gaussian {
                log_std: vec![0.0; actions],
            },
            opt: Adam::new(n, LEARNING_RATE),
        }
    }

    /// Direction actor; the initial policy keeps each parameter in place
    /// with probability `e^b / (e^b + 2)` for the stay bias `b`.
    pub fn categorical(state_len: usize, heads: usize, stay_bias: f64, rng: &mut impl Rng) -> Actor {
        let mut net = Mlp::new(&[state_len, HIDDEN, HIDDEN, heads * 3], 0.01, rng);
        let nb = net.params.len() - heads * 3;
        for h in 0..heads {
            net.params[nb + h * 3 + 1] = stay_bias;
        }
        let n = net.params.len();
        Actor {
            net,
            head: Head::Categorical { heads },
            opt: Adam::new(n, LEARNING_RATE),
        }
    }

    /// Every trainable parameter, flattened.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params.clone();
        if let Head::Gaussian { log_std } = &self.head {
            p.extend(log_std);
        }
        p
    }

    /// Mean and standard deviation of a Gaussian actor.
    pub fn gaussian_params(&self, state: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.head {
            Head::Gaussian { log_std } => Some((
                self.net.forward(&squash_input(state)),
                log_std.iter().map(|s| s.exp()).collect(),
            )),
            Head::Categorical { .. } => None,
        }
    }

    /// Direction probabilities of a categorical actor, one row per head.
    pub fn probabilities(&self, state: &[f64]) -> Option<Vec<[f64; 3]>> {
        match &self.head {
            Head::Categorical { heads } => {
                let l = self.net.forward(&squash_input(state));
                Some(
                    (0..*heads)
                        .map(|h| {
                            let lp = log_softmax(&l[h * 3..h * 3 + 3]);
                            [lp[0].exp(), lp[1].exp(), lp[2].exp()]
                        })
                        .collect(),
                )
            }
            Head::Gaussian { .. } => None,
        }
    }

    pub fn sample(&self, state: &[f64], rng: &mut impl Rng) -> (Action, f64) {
        let out = self.net.forward(&squash_input(state));
        let a = match &self.head {
            Head::Gaussian { log_std } => Action::Continuous(
                out.iter()
                    .zip(log_std)
                    .map(|(m, s)| {
                        let n: f64 = StandardNormal.sample(rng);
                        m + s.exp() * n
                    })
                    .collect(),
            ),
            Head::Categorical { heads } => Action::Discrete(
                (0..*heads)
                    .map(|h| {
                        let lp = log_softmax(&out[h * 3..h * 3 + 3]);
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        for (k, l) in lp.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                return k;
                            }
                        }
                        2
                    })
                    .collect(),
            ),
        };
        let lp = self.log_prob(state, &a);
        (a, lp)
    }

    pub fn log_prob(&self, state: &[f64], a: &Action) -> f64 {
        let out = self.net.forward(&squash_input(state));
        self.log_prob_out(&out, a)
    }

    fn log_prob_out(&self, out: &[f64], a: &Action) -> f64 {
        match (&self.head, a) {
            (Head::Gaussian { log_std }, Action::Continuous(z)) => z
                .iter()
                .zip(out)
                .zip(log_std)
                .map(|((z, m), s)| {
                    let d = (z - m) / s.exp();
                    -0.5 * d * d - s - LN_2PI_HALF
                })
                .sum(),
            (Head::Categorical { .. }, Action::Discrete(d)) => d
                .iter()
                .enumerate()
                .map(|(h, &k)| log_softmax(&out[h * 3..h * 3 + 3])[k])
                .sum(),
            _ => panic!("action does not match the actor"),
        }
    }

    /// Adds `coef * d(log p)/d(params)` to `grad`.
    fn add_logp_grad(&self, state: &[f64], a: &Action, coef: f64, grad: &mut [f64]) {
        let (out, trace) = self.net.run(&squash_input(state));
        let np = self.net.params.len();
        let mut dy = vec![0.0; out.len()];
        match (&self.head, a) {
            (Head::Gaussian { log_std }, Action::Continuous(z)) => {
                for k in 0..z.len() {
                    let var = (2.0 * log_std[k]).exp();
                    let d = z[k] - out[k];
                    dy[k] = coef * d / var;
                    grad[np + k] += coef * (d * d / var - 1.0);
                }
            }
            (Head::Categorical { .. }, Action::Discrete(d)) => {
                for (h, &k) in d.iter().enumerate() {
                    let lp = log_softmax(&out[h * 3..h * 3 + 3]);
                    for j in 0..3 {
                        let onehot = if j == k { 1.0 } else { 0.0 };
                        dy[h * 3 + j] = coef * (onehot - lp[j].exp());
                    }
                }
            }
            _ => panic!("action does not match the actor"),
        }
        self.net.backward(&trace, &dy, &mut grad[..np]);
    }

    fn apply(&mut self, grad: &[f64]) {
        let mut p = self.params();
        self.opt.step(&mut p, grad);
        let np = self.net.params.len();
        self.net.params.copy_from_slice(&p[..np]);
        if let Head::Gaussian { log_std } = &mut self.head {
            log_std.copy_from_slice(&p[np..]);
        }
    }
}

/// State-value network shared by all actors. States are zero-padded or
/// truncated to the critic's input width.
#[derive(Clone, Debug)]
pub struct Critic {
    pub net: Mlp,
    opt: Adam,
}

impl Critic {
    pub fn new(width: usize, rng: &mut impl Rng) -> Critic {
        let net = Mlp::new(&[width, HIDDEN, HIDDEN, 1], 1.0, rng);
        let n = net.params.len();
        Critic {
            net,
            opt: Adam::new(n, LEARNING_RATE),
        }
    }

    fn input(&self, state: &[f64]) -> Vec<f64> {
        let mut x = squash_input(state);
        x.resize(self.net.input_len(), 0.0);
        x
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        self.net.forward(&self.input(state))[0]
    }

    pub fn mse(&self, batch: &[Transition]) -> f64 {
        batch.iter().map(|t| (self.value(&t.state) - t.ret).powi(2)).sum::<f64>() / batch.len() as f64
    }

    /// One Adam step on the mean squared error. Returns false when the
    /// gradient was zero or not finite and the step was skipped.
    pub fn fit_step(&mut self, batch: &[Transition]) -> bool {
        let mut grad = vec![0.0; self.net.params.len()];
        let n = batch.len() as f64;
        for t in batch {
            let (v, trace) = self.net.run(&self.input(&t.state));
            self.net.backward(&trace, &[2.0 * (v[0] - t.ret) / n], &mut grad);
        }
        if !usable(&grad) {
            return false;
        }
        self.opt.step(&mut self.net.params, &grad);
        true
    }
}

/// One decision: the state seen, the action taken with its log-probability
/// at sampling time, and the return that followed.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub logp: f64,
    pub ret: f64,
}

fn usable(grad: &[f64]) -> bool {
    if grad.iter().any(|g| !g.is_finite()) {
        warn!("skipping update: non-finite gradient");
        return false;
    }
    grad.iter().any(|g| *g != 0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Actor optimizer steps taken.
    pub actor_steps: usize,
    pub critic_steps: usize,
}

/// Clipped PPO on one batch of transitions. Advantages are `ret - V(s)`,
/// normalized unless their spread is zero. Steps whose gradient is zero or
/// non-finite are skipped, so a batch with all-zero advantages leaves the
/// actor untouched.
pub fn ppo_update(actor: &mut Actor, critic: &mut Critic, batch: &[Transition]) -> UpdateStats {
    let mut stats = UpdateStats::default();
    if batch.is_empty() {
        return stats;
    }
    let mut adv: Vec<f64> = batch.iter().map(|t| t.ret - critic.value(&t.state)).collect();
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-12 && adv.len() > 1 {
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
    for _ in 0..EPOCHS {
        let mut grad = vec![0.0; actor.params().len()];
        for (t, &a) in batch.iter().zip(&adv) {
            let ratio = (actor.log_prob(&t.state, &t.action) - t.logp).exp();
            let active = if a >= 0.0 { ratio < 1.0 + CLIP } else { ratio > 1.0 - CLIP };
            if active && a != 0.0 {
                // gradient descent on -ratio * A
                actor.add_logp_grad(&t.state, &t.action, -a * ratio / n, &mut grad);
            }
        }
        if usable(&grad) {
            actor.apply(&grad);
            stats.actor_steps += 1;
        }
        if critic.fit_step(batch) {
            stats.critic_steps += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuner::space::action_to_factor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 on erf
        let z = x / std::f64::consts::SQRT_2;
        let t = 1.0 / (1.0 + 0.327_591_1 * z.abs());
        let y = 1.0
            - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t + 0.254_829_592)
                * t
                * (-z * z).exp();
        0.5 * (1.0 + z.signum() * y)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let (y, tr) = net.run(&x);
        let mut g = vec![0.0; net.params.len()];
        // loss = y0 + 2 y1
        net.backward(&tr, &[1.0, 2.0], &mut g);
        let _ = y;
        for k in (0..net.params.len()).step_by(7) {
            let old = net.params[k];
            net.params[k] = old + 1e-6;
            let a = net.forward(&x);
            net.params[k] = old - 1e-6;
            let b = net.forward(&x);
            net.params[k] = old;
            let num = ((a[0] + 2.0 * a[1]) - (b[0] + 2.0 * b[1])) / 2e-6;
            assert!((num - g[k]).abs() < 1e-6, "param {k}: {num} vs {}", g[k]);
        }
    }

    #[test]
    fn logp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mut actor in [Actor::gaussian(4, 2, &mut rng), Actor::categorical(4, 3, 1.0, &mut rng)] {
            let s = [1.0, 8.0, 2.0, 0.0];
            let (a, _) = actor.sample(&s, &mut rng);
            let mut g = vec![0.0; actor.params().len()];
            actor.add_logp_grad(&s, &a, 1.0, &mut g);
            let base = actor.params();
            for k in (0..base.len()).step_by(13).chain([base.len() - 1]) {
                let mut p = base.clone();
                p[k] += 1e-6;
                set_params(&mut actor, &p);
                let up = actor.log_prob(&s, &a);
                p[k] -= 2e-6;
                set_params(&mut actor, &p);
                let down = actor.log_prob(&s, &a);
                set_params(&mut actor, &base);
                assert!(((up - down) / 2e-6 - g[k]).abs() < 1e-5);
            }
        }
    }

    fn set_params(actor: &mut Actor, p: &[f64]) {
        let np = actor.net.params.len();
        actor.net.params.copy_from_slice(&p[..np]);
        if let Head::Gaussian { log_std } = &mut actor.head {
            log_std.copy_from_slice(&p[np..]);
        }
    }

    /// Two arms: the factor a sampled action decodes to over a dim of two.
    /// Picking the whole dim costs half as much as splitting it.
    #[test]
    fn bandit_prefers_cheaper_arm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut actor = Actor::gaussian(2, 1, &mut rng);
        let mut critic = Critic::new(2, &mut rng);
        let state = [1.0, 2.0];
        // P(sigmoid(z) decodes to 2) = P(z > ln 3)
        let p_cheap = |a: &Actor| {
            let (m, s) = a.gaussian_params(&state).unwrap();
            1.0 - normal_cdf(((3.0f64).ln() - m[0]) / s[0])
        };
        let start = p_cheap(&actor);
        assert!(start < 0.2);
        let mut u: f64 = 0.0;
        let mut reached = None;
        let mut batch = Vec::new();
        for ep in 1..=200 {
            let (a, logp) = actor.sample(&state, &mut rng);
            let Action::Continuous(z) = &a else { unreachable!() };
            let cost = if action_to_factor(sigmoid(z[0]), 2) == 2 { 1.0 } else { 2.0 };
            u = u.max(cost);
            batch.push(Transition {
                state: state.to_vec(),
                action: a,
                logp,
                ret: (u - cost) / u,
            });
            if batch.len() == 4 {
                ppo_update(&mut actor, &mut critic, &batch);
                batch.clear();
            }
            if p_cheap(&actor) > 0.9 {
                reached = Some(ep);
                break;
            }
        }
        assert!(reached.is_some(), "P(cheap) = {} after 200 episodes", p_cheap(&actor));
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut actor = Actor::categorical(3, 4, 0.0, &mut rng);
        let mut critic = Critic::new(3, &mut rng);
        // critic output layer zeroed: V(s) = 0 = every return
        critic.net.params.iter_mut().for_each(|p| *p = 0.0);
        let s = vec![0.5, 1.0, 2.0];
        let batch: Vec<Transition> = (0..6)
            .map(|_| {
                let (a, logp) = actor.sample(&s, &mut rng);
                Transition {
                    state: s.clone(),
                    action: a,
                    logp,
                    ret: 0.0,
                }
            })
            .collect();
        let before = actor.params();
        let st = ppo_update(&mut actor, &mut critic, &batch);
        assert_eq!(st.actor_steps, 0);
        assert_eq!(actor.params(), before);
    }

    #[test]
    fn critic_loss_falls_on_constant_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut critic = Critic::new(6, &mut rng);
        let batch: Vec<Transition> = (0..8)
            .map(|_| Transition {
                state: vec![4.0, 1.0, 2.0, 0.0, 0.0, 3.0],
                action: Action::Discrete(vec![1]),
                logp: 0.0,
                ret: 2.5,
            })
            .collect();
        let mut last = critic.mse(&batch);
        for _ in 0..50 {
            assert!(critic.fit_step(&batch));
            let now = critic.mse(&batch);
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let a1 = Actor::categorical(5, 2, 0.0, &mut r1);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a2 = Actor::categorical(5, 2, 0.0, &mut r2);
        let s = [1.0, 0.0, 0.5, 0.2, 0.1];
        assert_eq!(a1.sample(&s, &mut r1), a2.sample(&s, &mut r2));
    }
}
