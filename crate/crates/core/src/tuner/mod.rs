//! Joint layout and loop tuning.
//!
//! The joint stage visits the complex operators in topological order. For
//! each it proposes layouts (the default first, then samples of a Gaussian
//! actor ranked by the cost model) and, per layout, runs a few rounds of
//! loop exploration. The loop-only stage then freezes the best layouts and
//! spends the rest of the budget on loop schedules.
//!
//! Budget is counted in simulator calls. A loop round measures at most
//! `top_k` points: a batch round ranks `batch` random points, an episode
//! round ranks the points of a walk steered by a direction actor.

pub mod loopspace;
pub mod ppo;
pub mod space;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, HashMap, HashSet};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{extract_features, predict_cost, simulate_cache, train_surrogate, CacheConfig, FeatureVector, Predictor, ProfileCounters};
use crate::ir::Graph;
use crate::layout::{rewrite_accesses_pass, RewrittenGraph};
use crate::loops::{lower, Schedules};
use crate::pipeline::compile;
use crate::program::Program;
use crate::propagation::{build_plan, insert_conversions, OpLayouts, PropagationPlan};

pub use loopspace::{assemble, build_loop_spaces, LoopPoint, LoopSpace};
pub use ppo::{ppo_update, Action, Actor, Critic, Transition};
pub use space::{action_to_factor, build_layout_space, divisors, LayoutTemplate, LAYOUT_STATE_WIDTH};

const CRITIC_WIDTH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Total simulator calls.
    pub budget: usize,
    /// Calls given to the joint stage; the rest go to the loop-only stage.
    pub joint: usize,
    pub batch: usize,
    pub top_k: usize,
    pub episode_len: usize,
    /// Loop rounds per proposed layout.
    pub inner_rounds: usize,
    /// Actor samples ranked per layout proposal.
    pub layout_candidates: usize,
    /// Tiling levels of the output templates (1 or 2).
    pub levels: usize,
    /// Initial log-odds bias of the loop actors toward leaving a
    /// parameter unchanged.
    pub stay_bias: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            budget: 256,
            joint: 96,
            batch: 128,
            top_k: 8,
            episode_len: 128,
            inner_rounds: 2,
            layout_candidates: 16,
            levels: 1,
            stay_bias: 2.0,
            seed: 0,
            parallel: true,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.joint > self.budget {
            return bad("joint budget exceeds the total budget");
        }
        if self.top_k == 0 || self.batch < self.top_k || self.episode_len == 0 {
            return bad("need 0 < top_k <= batch and a non-empty episode");
        }
        if self.inner_rounds == 0 || self.layout_candidates == 0 {
            return bad("inner_rounds and layout_candidates must be positive");
        }
        if !(1..=2).contains(&self.levels) {
            return bad("levels must be 1 or 2");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Joint,
    LoopOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub stage: Stage,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rebuilds {
    pub joint: usize,
    pub loop_only: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub plan: PropagationPlan,
    pub schedules: Schedules,
    pub best_cost: f64,
    pub counters: ProfileCounters,
    pub history: Vec<HistoryEntry>,
    pub seed: u64,
    #[serde(default)]
    pub rebuilds: Rebuilds,
}

impl TuneResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn program(&self, g: &Graph) -> Result<Program> {
        compile(g, &self.plan, &self.schedules)
    }
}

/// A frozen set of layouts with its loop spaces.
#[derive(Clone)]
struct Ctx {
    key: String,
    plan: PropagationPlan,
    rg: RewrittenGraph,
    spaces: Vec<LoopSpace>,
    rest: Schedules,
}

impl Ctx {
    fn new(g: &Graph, plan: PropagationPlan) -> Result<Ctx> {
        let (g2, seqs) = insert_conversions(g, &plan)?;
        let rg = rewrite_accesses_pass(&g2, &seqs)?;
        let (spaces, rest) = build_loop_spaces(&rg)?;
        Ok(Ctx {
            key: serde_json::to_string(&plan)?,
            plan,
            rg,
            spaces,
            rest,
        })
    }

    fn from_factors(g: &Graph, templates: &[LayoutTemplate], factors: &[Vec<usize>]) -> Result<Ctx> {
        let mut claims = OpLayouts::new();
        for (t, f) in templates.iter().zip(factors) {
            claims.insert(t.op.clone(), t.decode(f)?);
        }
        Ctx::new(g, build_plan(g, &claims)?)
    }

    fn schedules(&self, points: &[LoopPoint]) -> Result<Schedules> {
        assemble(&self.spaces, &self.rest, points)
    }

    fn program(&self, points: &[LoopPoint]) -> Result<Program> {
        lower(&self.rg, &self.schedules(points)?)
    }

    fn default_points(&self) -> Vec<LoopPoint> {
        self.spaces.iter().map(LoopSpace::default_point).collect()
    }

    /// Keeps each old point whose space has the same shape and transfers
    /// the others.
    fn carry_points(&self, old: &Ctx, points: &[LoopPoint]) -> Vec<LoopPoint> {
        self.spaces
            .iter()
            .zip(&old.spaces)
            .zip(points)
            .map(|((n, o), p)| {
                if n.options() == o.options() && n.chain == o.chain {
                    p.clone()
                } else {
                    n.transfer(o, p)
                }
            })
            .collect()
    }
}

fn points_key(ctx: &Ctx, points: &[LoopPoint]) -> String {
    format!("{}|{:?}", ctx.key, points)
}

struct Tuner<'a> {
    g: &'a Graph,
    cache: &'a CacheConfig,
    cfg: &'a TuneConfig,
    rng: ChaCha8Rng,
    data: Vec<(FeatureVector, f64)>,
    predictor: Predictor,
    history: Vec<HistoryEntry>,
    stage: Stage,
    /// Running maximum of measured costs.
    u: f64,
    memo: HashMap<String, f64>,
    critic: Critic,
    loop_actors: BTreeMap<(String, usize), Actor>,
    layout_actors: BTreeMap<String, Actor>,
    rebuilds: Rebuilds,
}

impl<'a> Tuner<'a> {
    fn new(g: &'a Graph, cache: &'a CacheConfig, cfg: &'a TuneConfig) -> Tuner<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let critic = Critic::new(CRITIC_WIDTH, &mut rng);
        Tuner {
            g,
            cache,
            cfg,
            rng,
            data: Vec::new(),
            predictor: train_surrogate(&[]),
            history: Vec::new(),
            stage: Stage::Joint,
            u: 0.0,
            memo: HashMap::new(),
            critic,
            loop_actors: BTreeMap::new(),
            layout_actors: BTreeMap::new(),
            rebuilds: Rebuilds::default(),
        }
    }

    fn used(&self) -> usize {
        self.history.len()
    }

    fn reward(&self, cost: f64) -> f64 {
        if self.u > 0.0 {
            (self.u - cost) / self.u
        } else {
            0.0
        }
    }

    fn map<T: Send, R: Send>(&self, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
        if self.cfg.parallel {
            items.into_par_iter().map(f).collect()
        } else {
            items.into_iter().map(f).collect()
        }
    }

    /// Predicted cost of each candidate, `None` before the model is trained
    /// or when a candidate does not lower.
    fn predict(&self, ctx: &Ctx, cands: &[Vec<LoopPoint>]) -> Vec<Option<f64>> {
        if !self.predictor.is_trained() {
            return vec![None; cands.len()];
        }
        let pred = &self.predictor;
        self.map(cands.to_vec(), |c| {
            let prog = ctx.program(&c).ok()?;
            predict_cost(pred, &extract_features(&prog))
        })
    }

    /// Simulates the candidates, in order, one budget unit each.
    fn measure(&mut self, ctx: &Ctx, cands: Vec<Vec<LoopPoint>>) -> Vec<Option<f64>> {
        let cache = self.cache;
        let results = self.map(cands.clone(), |c| -> Result<(FeatureVector, f64)> {
            let prog = ctx.program(&c)?;
            let counters = simulate_cache(&prog, cache)?;
            Ok((extract_features(&prog), counters.cost))
        });
        let mut out = Vec::with_capacity(cands.len());
        for (c, r) in cands.iter().zip(results) {
            match r {
                Ok((fv, cost)) => {
                    self.history.push(HistoryEntry {
                        step: self.history.len(),
                        stage: self.stage,
                        cost,
                    });
                    self.u = self.u.max(cost);
                    self.memo.insert(points_key(ctx, c), cost);
                    self.data.push((fv, cost));
                    out.push(Some(cost));
                }
                Err(e) => {
                    warn!("candidate failed to lower: {e}");
                    out.push(None);
                }
            }
        }
        self.predictor = train_surrogate(&self.data);
        debug!("measured {} points, {} total", cands.len(), self.used());
        out
    }

    /// Candidate indices to measure: unmeasured, distinct, best predicted
    /// first (or evenly spread when there is no model), at most `n`.
    fn select(&self, ctx: &Ctx, cands: &[Vec<LoopPoint>], pred: &[Option<f64>], n: usize) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut idx: Vec<usize> = (0..cands.len())
            .filter(|&i| {
                let k = points_key(ctx, &cands[i]);
                !self.memo.contains_key(&k) && seen.insert(k)
            })
            .collect();
        if pred.iter().any(Option::is_some) {
            idx.sort_by(|&a, &b| {
                let pa = pred[a].unwrap_or(f64::INFINITY);
                let pb = pred[b].unwrap_or(f64::INFINITY);
                pa.total_cmp(&pb).then(a.cmp(&b))
            });
            idx.truncate(n);
        } else if idx.len() > n {
            let m = idx.len();
            idx = (0..n).map(|k| idx[k * m / n]).collect();
        }
        idx
    }

    /// Loop exploration of space `gi` with every other space held at its
    /// point. Updates `points[gi]` and `best` in place; never exceeds
    /// `limit` total simulator calls.
    fn explore_loop(
        &mut self,
        ctx: &Ctx,
        points: &mut [LoopPoint],
        best: &mut f64,
        gi: usize,
        rounds: usize,
        limit: usize,
    ) {
        let space = ctx.spaces[gi].clone();
        let top_k = self.cfg.top_k;
        let with = |points: &[LoopPoint], p: LoopPoint| {
            let mut c = points.to_vec();
            c[gi] = p;
            c
        };
        let mut stalls = 0;
        for r in 0..rounds {
            if stalls >= 3 {
                break;
            }
            let room = limit.saturating_sub(self.used()).min(top_k);
            if room == 0 {
                break;
            }
            let fresh = !self.memo.contains_key(&points_key(ctx, points));
            if r == 0 && fresh {
                // batch round, the current point first
                let mut cands = vec![points.to_vec()];
                while cands.len() < self.cfg.batch {
                    let p = space.random_point(&mut self.rng);
                    cands.push(with(points, p));
                }
                let mut pred = self.predict(ctx, &cands);
                pred[0] = Some(f64::NEG_INFINITY);
                let pick = self.select(ctx, &cands, &pred, room);
                let chosen: Vec<Vec<LoopPoint>> = pick.iter().map(|&i| cands[i].clone()).collect();
                stalls = if chosen.is_empty() { stalls + 1 } else { 0 };
                let costs = self.measure(ctx, chosen.clone());
                for (c, cost) in chosen.into_iter().zip(costs) {
                    if let Some(cost) = cost {
                        if cost < *best {
                            *best = cost;
                            points[gi] = c[gi].clone();
                        }
                    }
                }
                continue;
            }
            // episode round
            let key = (space.op.clone(), space.dims());
            if !self.loop_actors.contains_key(&key) {
                let a = Actor::categorical(space.dims(), space.dims(), self.cfg.stay_bias, &mut self.rng);
                self.loop_actors.insert(key.clone(), a);
            }
            let actor = self.loop_actors.get(&key).unwrap().clone();
            let mut p = points[gi].clone();
            let mut steps = Vec::with_capacity(self.cfg.episode_len);
            let mut cands = Vec::with_capacity(self.cfg.episode_len);
            for _ in 0..self.cfg.episode_len {
                let state = space.encode(&p);
                let (a, logp) = actor.sample(&state, &mut self.rng);
                let Action::Discrete(d) = &a else { unreachable!() };
                p = space.step(&p, d);
                steps.push((state, a, logp));
                cands.push(with(points, p.clone()));
            }
            let pred = self.predict(ctx, &cands);
            let pick = self.select(ctx, &cands, &pred, room);
            let chosen: Vec<Vec<LoopPoint>> = pick.iter().map(|&i| cands[i].clone()).collect();
            stalls = if chosen.is_empty() { stalls + 1 } else { 0 };
            let costs = self.measure(ctx, chosen.clone());
            for (c, cost) in chosen.iter().zip(&costs) {
                if let Some(cost) = *cost {
                    if cost < *best {
                        *best = cost;
                        points[gi] = c[gi].clone();
                    }
                }
            }
            // per-step cost: measured, else predicted
            let step_cost: Vec<Option<f64>> = cands
                .iter()
                .zip(&pred)
                .map(|(c, pr)| self.memo.get(&points_key(ctx, c)).copied().or(*pr))
                .collect();
            let rewards: Vec<Option<f64>> = step_cost.iter().map(|c| c.map(|c| self.reward(c).max(-1.0))).collect();
            let mut batch = Vec::new();
            for (t, (state, a, logp)) in steps.into_iter().enumerate() {
                if rewards[t].is_none() {
                    continue;
                }
                let future: Vec<f64> = rewards[t..].iter().flatten().copied().collect();
                let ret = future.iter().sum::<f64>() / future.len() as f64;
                batch.push(Transition {
                    state,
                    action: a,
                    logp,
                    ret,
                });
            }
            let actor = self.loop_actors.get_mut(&key).unwrap();
            ppo_update(actor, &mut self.critic, &batch);
        }
    }

    fn propose_layout(
        &mut self,
        templates: &[LayoutTemplate],
        ti: usize,
        base: &[Vec<usize>],
        tried: &HashSet<Vec<usize>>,
    ) -> (Vec<usize>, Transition) {
        let t = &templates[ti];
        if !self.layout_actors.contains_key(&t.op) {
            let a = Actor::gaussian(LAYOUT_STATE_WIDTH, t.tunables.len(), &mut self.rng);
            self.layout_actors.insert(t.op.clone(), a);
        }
        let actor = self.layout_actors[&t.op].clone();
        let state = t.encode_state(&base[ti]);
        let mut samples = Vec::new();
        for _ in 0..self.cfg.layout_candidates {
            let (a, logp) = actor.sample(&state, &mut self.rng);
            let Action::Continuous(z) = &a else { unreachable!() };
            let acts: Vec<f64> = z.iter().map(|z| ppo::sigmoid(*z)).collect();
            let f = t.factors_from_actions(&acts);
            samples.push((f, a, logp));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if self.predictor.is_trained() {
            let mut keys = Vec::new();
            let mut seen: HashMap<Vec<usize>, f64> = HashMap::new();
            for (i, (f, _, _)) in samples.iter().enumerate() {
                if let Some(v) = seen.get(f) {
                    keys.push((*v, i));
                    continue;
                }
                let mut fs = base.to_vec();
                fs[ti] = f.clone();
                let v = match Ctx::from_factors(self.g, templates, &fs) {
                    Ok(ctx) => {
                        let mut cands = vec![ctx.default_points()];
                        for _ in 0..3 {
                            let mut p = ctx.default_points();
                            p[ti] = ctx.spaces[ti].random_point(&mut self.rng);
                            cands.push(p);
                        }
                        self.predict(&ctx, &cands)
                            .into_iter()
                            .flatten()
                            .fold(f64::INFINITY, f64::min)
                    }
                    Err(_) => f64::INFINITY,
                };
                seen.insert(f.clone(), v);
                keys.push((v, i));
            }
            keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order = keys.into_iter().map(|(_, i)| i).collect();
        }
        let pick = order
            .iter()
            .copied()
            .find(|&i| !tried.contains(&samples[i].0))
            .unwrap_or(order[0]);
        let (f, a, logp) = samples.swap_remove(pick);
        (
            f,
            Transition {
                state,
                action: a,
                logp,
                ret: 0.0,
            },
        )
    }

    fn finish(&mut self, ctx: &Ctx, points: &[LoopPoint]) -> Result<TuneResult> {
        let schedules = ctx.schedules(points)?;
        let prog = lower(&ctx.rg, &schedules)?;
        let counters = simulate_cache(&prog, self.cache)?;
        Ok(TuneResult {
            plan: ctx.plan.clone(),
            schedules,
            best_cost: counters.cost,
            counters,
            history: self.history.clone(),
            seed: self.cfg.seed,
            rebuilds: self.rebuilds,
        })
    }

    /// Loop-only stage over a fixed context, budget split evenly across
    /// the spaces in order.
    fn loop_only(&mut self, ctx: &Ctx, points: &mut [LoopPoint], best: &mut f64) {
        self.stage = Stage::LoopOnly;
        let n = ctx.spaces.len();
        for gi in 0..n {
            let left = self.cfg.budget.saturating_sub(self.used());
            let limit = self.used() + left / (n - gi);
            let rounds = usize::MAX;
            self.explore_loop(ctx, points, best, gi, rounds, limit);
        }
    }
}

/// Joint layout and loop tuning of `g`.
pub fn tune(g: &Graph, cache: &CacheConfig, cfg: &TuneConfig) -> Result<TuneResult> {
    cfg.validate()?;
    cache.validate()?;
    g.validated()?;
    let templates = build_layout_space(g, cfg.levels)?;
    let mut factors: Vec<Vec<usize>> = templates.iter().map(LayoutTemplate::default_point).collect();
    let mut tuner = Tuner::new(g, cache, cfg);
    let mut ctx = Ctx::from_factors(g, &templates, &factors)?;
    let mut points = ctx.default_points();
    let mut best = f64::INFINITY;
    info!("tuning {} complex operators, budget {}", templates.len(), cfg.budget);

    for (ti, t) in templates.iter().enumerate() {
        let left = cfg.joint.saturating_sub(tuner.used());
        let limit = tuner.used() + left / (templates.len() - ti);
        let mut tried: HashSet<Vec<usize>> = HashSet::new();
        let mut prev: Vec<usize> = factors[ti].clone();
        let mut cur_ctx = ctx.clone();
        let mut op_best = (best, factors[ti].clone(), ctx.clone(), points.clone());
        let mut first = true;
        while tuner.used() < limit {
            let (f, tr) = if first {
                (factors[ti].clone(), None)
            } else {
                let (f, tr) = tuner.propose_layout(&templates, ti, &factors, &tried);
                (f, Some(tr))
            };
            first = false;
            if f != prev {
                tuner.rebuilds.joint += 1;
                let mut fs = factors.clone();
                fs[ti] = f.clone();
                let next = Ctx::from_factors(g, &templates, &fs)?;
                debug!("layout {:?} for `{}`", f, t.op);
                cur_ctx = next;
            }
            tried.insert(f.clone());
            prev = f.clone();
            let mut p = cur_ctx.carry_points(&op_best.2, &op_best.3);
            let mut cost = tuner.memo.get(&points_key(&cur_ctx, &p)).copied().unwrap_or(f64::INFINITY);
            let before = tuner.used();
            tuner.explore_loop(&cur_ctx, &mut p, &mut cost, ti, cfg.inner_rounds, limit);
            if tuner.used() == before && tr.is_some() {
                break;
            }
            if let Some(mut tr) = tr {
                if cost.is_finite() {
                    tr.ret = tuner.reward(cost);
                    let actor = tuner.layout_actors.get_mut(&t.op).unwrap();
                    ppo_update(actor, &mut tuner.critic, &[tr]);
                }
            }
            if cost < op_best.0 {
                op_best = (cost, f.clone(), cur_ctx.clone(), p);
            }
        }
        if op_best.0 < best || !best.is_finite() {
            best = op_best.0;
            factors[ti] = op_best.1;
            ctx = op_best.2;
            points = op_best.3;
        }
        info!("`{}`: best layout {:?}, cost {best}", t.op, factors[ti]);
    }

    tuner.loop_only(&ctx, &mut points, &mut best);
    tuner.finish(&ctx, &points)
}

/// Loop-only tuning with the layouts of `plan` frozen.
pub fn tune_loops(g: &Graph, plan: &PropagationPlan, cache: &CacheConfig, cfg: &TuneConfig) -> Result<TuneResult> {
    cfg.validate()?;
    cache.validate()?;
    g.validated()?;
    plan.validate(g)?;
    let mut tuner = Tuner::new(g, cache, cfg);
    let ctx = Ctx::new(g, plan.clone())?;
    let mut points = ctx.default_points();
    let mut best = f64::INFINITY;
    tuner.loop_only(&ctx, &mut points, &mut best);
    tuner.finish(&ctx, &points)
}

/// Random-point sampler shared by tests and tools.
pub fn random_schedules(g: &Graph, plan: &PropagationPlan, rng: &mut impl Rng) -> Result<Schedules> {
    let ctx = Ctx::new(g, plan.clone())?;
    let points: Vec<LoopPoint> = ctx.spaces.iter().map(|s| s.random_point(rng)).collect();
    ctx.schedules(&points)
}

/// Random layout claims for every complex operator, as a plan.
pub fn random_plan(g: &Graph, levels: usize, rng: &mut impl Rng) -> Result<PropagationPlan> {
    let templates = build_layout_space(g, levels)?;
    let mut claims = OpLayouts::new();
    for t in &templates {
        let pts = t.enumerate();
        let f = pts.choose(rng).expect("space is never empty");
        claims.insert(t.op.clone(), t.decode(f)?);
    }
    build_plan(g, &claims)
}

/// Plan with every complex operator at its default layout.
pub fn default_plan(g: &Graph) -> Result<PropagationPlan> {
    let templates = build_layout_space(g, 1)?;
    let mut claims = OpLayouts::new();
    for t in &templates {
        claims.insert(t.op.clone(), t.decode(&t.default_point())?);
    }
    build_plan(g, &claims)
}
