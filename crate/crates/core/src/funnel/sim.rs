//! Offline simulator. A bootstrap period with random serving seeds the light
//! ranker, the engagement graph and the counterfactual log; then every arm
//! replays the same evaluation requests against its own budgets while the
//! sourcing pipelines refresh on a simulated clock from the production
//! (control) arm's traffic.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::auction::{auction, winners, Bidder};
use super::light::{light_rank, train_light_ranker, LightRanker, LightRankerParams};
use super::uas::{is_uas_sampled, uas_records};
use super::{heavy_rank, rankscore, FunnelConfig, TargetingCache};
use crate::ann::{build_exact, build_hnsw, AnnIndex, HnswParams};
use crate::embed::{
    decay_user_embedding, follow_graph, propagate_embeddings, tic_update, toc_update, train,
    DecayParams, EmbeddingModel, FollowGraph, Optimizer, TrainParams,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, delta_edges, HetGraph, Vertex, Window};
use crate::io::{read_jsonl, write_jsonl};
use crate::rng::{self, keyed_unit, tags};
use crate::sourcing::{
    blend, graph_candidates, serving_filter, QualityTracker, UasRecord, STRATEGY_GRAPH,
    STRATEGY_GRAPH_DECAYED, STRATEGY_RANKSCORE,
};
use crate::world::{
    draw_outcome, gen_requests, would_engage, AdId, AdvertiserId, CampaignId, EngagementProb,
    EventLog, EventRecord, EventType, ImpressionEvent, Request, Timestamp, UserId, World,
    SECONDS_PER_HOUR,
};

/// Pipeline refresh periods in simulated hours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cadences {
    pub rankscore_refresh: u64,
    pub graph_refresh: u64,
    pub tic: u64,
    pub toc: u64,
}

impl Default for Cadences {
    fn default() -> Self {
        Cadences {
            rankscore_refresh: 3,
            graph_refresh: 6,
            tic: 12,
            toc: 168,
        }
    }
}

impl Cadences {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rankscore_refresh", self.rankscore_refresh),
            ("graph_refresh", self.graph_refresh),
            ("tic", self.tic),
            ("toc", self.toc),
        ] {
            if v == 0 {
                return Err(Error::config(name, "cadence must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Exact,
    Hnsw,
}

fn default_sim_train() -> TrainParams {
    TrainParams {
        dim: 32,
        negatives_batch: 64,
        negatives_uniform: 64,
        epochs: 10,
        batch_size: 256,
        optimizer: Optimizer::Adagrad,
        ..TrainParams::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Evaluation requests, after the bootstrap period.
    pub n_requests: usize,
    pub bootstrap_requests: usize,
    /// Simulated span covering bootstrap and evaluation.
    pub span_days: u64,
    pub uas_sample_rate: f64,
    pub k_source: usize,
    pub quality_time_scale_days: f64,
    pub quality_window_days: u64,
    pub cadences: Cadences,
    /// Build sourcing lists once at the start of evaluation and never refresh.
    pub stale: bool,
    pub train: TrainParams,
    pub index: IndexKind,
    pub hnsw: HnswParams,
    pub decay: DecayParams,
    pub propagation_cap: usize,
    pub light: LightRankerParams,
    /// Cut-off for rNCG; defaults to the production arm's slot count.
    pub rncg_m: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 11,
            n_requests: 50_000,
            bootstrap_requests: 20_000,
            span_days: 21,
            uas_sample_rate: 0.02,
            k_source: 200,
            quality_time_scale_days: 1.0,
            quality_window_days: 21,
            cadences: Cadences::default(),
            stale: false,
            train: default_sim_train(),
            index: IndexKind::Exact,
            hnsw: HnswParams::default(),
            decay: DecayParams::default(),
            propagation_cap: 100,
            light: LightRankerParams::default(),
            rncg_m: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_requests == 0 {
            return Err(Error::config("n_requests", "must be at least 1"));
        }
        if self.bootstrap_requests == 0 {
            return Err(Error::config("bootstrap_requests", "must be at least 1"));
        }
        if self.span_days == 0 {
            return Err(Error::config("span_days", "must be at least 1"));
        }
        if !(self.uas_sample_rate > 0.0 && self.uas_sample_rate <= 1.0) {
            return Err(Error::config("uas_sample_rate", "must lie in (0, 1]"));
        }
        if self.k_source == 0 {
            return Err(Error::config("k_source", "must be at least 1"));
        }
        if !(self.quality_time_scale_days > 0.0 && self.quality_time_scale_days.is_finite()) {
            return Err(Error::config("quality_time_scale_days", "must be positive"));
        }
        if self.propagation_cap == 0 {
            return Err(Error::config("propagation_cap", "must be at least 1"));
        }
        if self.rncg_m == Some(0) {
            return Err(Error::config("rncg_m", "must be at least 1"));
        }
        self.cadences.validate()?;
        self.train.validate()?;
        self.hnsw.validate()?;
        self.decay.validate()?;
        self.light.validate()
    }
}

/// Whether a request falls in the treatment bucket.
pub fn in_treatment(seed: u64, request_id: u64, bucket_rate: f64) -> bool {
    bucket_rate >= 1.0 || keyed_unit(seed ^ tags::BUCKET, &[request_id]) < bucket_rate
}

/// Per-request counts behind recall, auction recall and rNCG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveTally {
    /// Eligible ads the user would engage with if shown.
    pub engaged: u32,
    pub engaged_hit: u32,
    /// Winner slots of the auction over the full eligible set.
    pub winners: u32,
    pub winners_hit: u32,
    /// Top-m rankscore sum over the candidate set.
    pub rncg_num: f64,
    /// Top-m rankscore sum over the eligible set.
    pub rncg_den: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub request_id: u64,
    pub ts: Timestamp,
    pub user_id: UserId,
    pub treated: bool,
    pub n_eligible: u32,
    pub n_candidates: u32,
    pub overall: ObjectiveTally,
    /// Indexed by objective − 1.
    pub by_objective: Vec<ObjectiveTally>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpressionRecord {
    pub request_id: u64,
    pub ts: Timestamp,
    pub user_id: UserId,
    pub ad_id: AdId,
    pub advertiser_id: AdvertiserId,
    pub campaign_id: CampaignId,
    pub objective: u8,
    pub bid: f64,
    pub price: f64,
    pub rankscore: f64,
    pub positive: bool,
    pub negative: bool,
    pub converted: bool,
    pub treated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmLog {
    pub name: String,
    pub requests: Vec<RequestRecord>,
    pub impressions: Vec<ImpressionRecord>,
}

impl ArmLog {
    /// Writes `requests.jsonl` and `impressions.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("requests.jsonl"), &self.requests)?;
        write_jsonl(&dir.join("impressions.jsonl"), &self.impressions)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        Ok(ArmLog {
            name: name.to_string(),
            requests: read_jsonl(&dir.join("requests.jsonl"))?,
            impressions: read_jsonl(&dir.join("impressions.jsonl"))?,
        })
    }
}

/// A treatment arm: `config` serves requests in the bucket, the production
/// config serves the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub config: FunnelConfig,
    pub bucket_rate: f64,
}

/// Shared state produced by the bootstrap period.
pub struct Simulation<'w> {
    world: &'w World,
    config: SimConfig,
    production: FunnelConfig,
    targeting: TargetingCache,
    requests: Vec<Request>,
    bootstrap_events: EventLog,
    bootstrap_uas: Vec<UasRecord>,
    light: LightRanker,
    eval_start: Timestamp,
}

impl<'w> Simulation<'w> {
    /// Generates the request stream and serves the bootstrap requests from
    /// uniformly random candidate sets of size K, heavy-ranked and auctioned
    /// with budgets untouched. Logs their sampled counterfactuals and trains
    /// the light ranker on the resulting engagements.
    pub fn prepare(
        world: &'w World,
        config: &SimConfig,
        production: &FunnelConfig,
    ) -> Result<Self> {
        config.validate()?;
        production.validate()?;
        let targeting = TargetingCache::new(world);
        let mut all = gen_requests(
            world,
            config.bootstrap_requests + config.n_requests,
            config.span_days * 86_400,
        )?;
        let requests = all.split_off(config.bootstrap_requests);
        let bootstrap = all;
        let eval_start = requests[0].ts;

        let budgets = world.initial_budgets();
        let mut shown = Vec::new();
        let mut bootstrap_uas = Vec::new();
        for req in &bootstrap {
            let eligible = targeting.eligible(req.user_id, &budgets);
            if is_uas_sampled(config.seed, req.request_id, config.uas_sample_rate) {
                bootstrap_uas.extend(uas_records(world, config.seed, req, &eligible, production)?);
            }
            let mut pick = rng::stream(
                rng::mix(config.seed, &[req.request_id]),
                tags::BOOTSTRAP_SERVE,
            );
            let n = production.k.min(eligible.len());
            let cands: Vec<AdId> = index::sample(&mut pick, eligible.len(), n)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            let weights = production.weights();
            let bidders: Vec<Bidder> = heavy_rank(
                world,
                config.seed,
                req.user_id,
                &cands,
                production.noise_sigma,
            )?
            .iter()
            .map(|s| {
                let bid = world.ads[s.ad_id.index()].bid;
                Bidder {
                    ad_id: s.ad_id,
                    rankscore: rankscore(bid, s.p_eng, s.p_neg, &weights),
                    bid,
                }
            })
            .collect();
            for slot in auction(&bidders, production.n_slots, production.reserve_price)?.slots {
                shown.push(ImpressionEvent {
                    ts: req.ts,
                    user_id: req.user_id,
                    ad_id: slot.ad_id,
                });
            }
        }
        let bootstrap_events = crate::world::sample_engagements(world, &shown)?;
        let light = train_light_ranker(&bootstrap_events, world, &config.light)?;
        Ok(Simulation {
            world,
            config: config.clone(),
            production: production.clone(),
            targeting,
            requests,
            bootstrap_events,
            bootstrap_uas,
            light,
            eval_start,
        })
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn light_ranker(&self) -> &LightRanker {
        &self.light
    }

    pub fn bootstrap_events(&self) -> &[EventRecord] {
        &self.bootstrap_events
    }

    pub fn eval_start(&self) -> Timestamp {
        self.eval_start
    }

    fn rncg_m(&self) -> usize {
        self.config.rncg_m.unwrap_or(self.production.n_slots)
    }

    /// Runs the production arm (first log) and each treatment arm over the
    /// evaluation requests.
    pub fn run(&self, arms: &[ArmSpec]) -> Result<Vec<ArmLog>> {
        let mut strategies = BTreeSet::new();
        for cfg in std::iter::once(&self.production).chain(arms.iter().map(|a| &a.config)) {
            cfg.validate()?;
            for (name, &f) in cfg.blend.strategies() {
                if ![STRATEGY_RANKSCORE, STRATEGY_GRAPH, STRATEGY_GRAPH_DECAYED]
                    .contains(&name.as_str())
                {
                    return Err(Error::config(name.clone(), "unknown sourcing strategy"));
                }
                if f > 0.0 {
                    strategies.insert(name.clone());
                }
            }
        }
        for a in arms {
            if !(a.bucket_rate > 0.0 && a.bucket_rate <= 1.0) {
                return Err(Error::config("bucket_rate", "must lie in (0, 1]"));
            }
        }

        let mut pipeline = Pipeline::start(self, &strategies)?;
        let mut states: Vec<ArmState> = std::iter::once(ArmState::new(self, "control", None))
            .chain(arms.iter().map(|a| ArmState::new(self, &a.name, Some(a))))
            .collect();
        for req in &self.requests {
            pipeline.advance(req.ts, &states[0].budgets)?;
            for (i, state) in states.iter_mut().enumerate() {
                let uas = state.serve(self, &pipeline, req, i == 0)?;
                if i == 0 {
                    let start = state.log.impressions.len() - state.last_served;
                    pipeline.record(&state.log.impressions[start..], &uas)?;
                }
            }
        }
        Ok(states.into_iter().map(|s| s.log).collect())
    }
}

fn hours(h: u64) -> Timestamp {
    h * SECONDS_PER_HOUR
}

/// Sourcing state refreshed on the simulated clock from production traffic.
struct Pipeline<'s, 'w> {
    sim: &'s Simulation<'w>,
    strategies: BTreeSet<String>,
    quality: QualityTracker,
    rankscore_lists: Vec<Vec<AdId>>,
    graph_lists: Vec<Vec<AdId>>,
    decayed_lists: Vec<Vec<AdId>>,
    model: Option<EmbeddingModel>,
    prev_graph: Option<HetGraph>,
    follows: FollowGraph,
    events: EventLog,
    /// Per user, positively engaged ads with their times.
    engaged: Vec<Vec<(AdId, Timestamp)>>,
    next_rankscore: Timestamp,
    next_graph: Timestamp,
    next_tic: Timestamp,
    next_toc: Timestamp,
}

impl<'s, 'w> Pipeline<'s, 'w> {
    fn start(sim: &'s Simulation<'w>, strategies: &BTreeSet<String>) -> Result<Self> {
        let world = sim.world;
        let cfg = &sim.config;
        let t = sim.eval_start;
        let mut quality = QualityTracker::new(
            cfg.quality_window_days * 86_400,
            cfg.quality_time_scale_days,
        )?;
        if strategies.contains(STRATEGY_RANKSCORE) {
            for r in &sim.bootstrap_uas {
                quality.push(r)?;
            }
        }
        let mut engaged = vec![Vec::new(); world.users.len()];
        for e in sim
            .bootstrap_events
            .iter()
            .filter(|e| e.event == EventType::PositiveEngagement)
        {
            engaged[e.user_id.index()].push((e.ad_id, e.ts));
        }
        let c = &cfg.cadences;
        let mut p = Pipeline {
            sim,
            strategies: strategies.clone(),
            quality,
            rankscore_lists: vec![Vec::new(); world.users.len()],
            graph_lists: vec![Vec::new(); world.users.len()],
            decayed_lists: vec![Vec::new(); world.users.len()],
            model: None,
            prev_graph: None,
            follows: follow_graph(world),
            events: sim.bootstrap_events.clone(),
            engaged,
            next_rankscore: t + hours(c.rankscore_refresh),
            next_graph: t + hours(c.graph_refresh),
            next_tic: t + hours(c.tic),
            next_toc: t + hours(c.toc),
        };
        if p.needs_graph() {
            let graph = p.snapshot(t)?;
            p.model = Some(train(&graph, &cfg.train, None)?);
            p.prev_graph = Some(graph);
        }
        let budgets = world.initial_budgets();
        p.refresh_rankscore(t)?;
        p.refresh_graph(t, &budgets)?;
        Ok(p)
    }

    fn needs_graph(&self) -> bool {
        self.strategies.contains(STRATEGY_GRAPH) || self.strategies.contains(STRATEGY_GRAPH_DECAYED)
    }

    fn list(&self, strategy: &str, user: UserId) -> &[AdId] {
        let lists = match strategy {
            STRATEGY_RANKSCORE => &self.rankscore_lists,
            STRATEGY_GRAPH => &self.graph_lists,
            STRATEGY_GRAPH_DECAYED => &self.decayed_lists,
            _ => return &[],
        };
        lists.get(user.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    fn snapshot(&self, t: Timestamp) -> Result<HetGraph> {
        let upto = self.events.partition_point(|e| e.ts <= t);
        Ok(build_graph(&self.events[..upto], Window::new(0, t.max(1))?)?.0)
    }

    /// Runs every refresh due at or before `now`, earliest first. At equal
    /// times a toc replaces the tic, and embedding updates precede list rebuilds.
    fn advance(&mut self, now: Timestamp, production_budgets: &[f64]) -> Result<()> {
        if self.sim.config.stale {
            return Ok(());
        }
        let c = self.sim.config.cadences.clone();
        loop {
            let due = self
                .next_rankscore
                .min(self.next_graph)
                .min(self.next_tic)
                .min(self.next_toc);
            if due > now {
                return Ok(());
            }
            if self.next_toc == due {
                self.toc(due)?;
                self.next_toc += hours(c.toc);
                if self.next_tic == due {
                    self.next_tic += hours(c.tic);
                }
            }
            if self.next_tic == due {
                self.tic(due)?;
                self.next_tic += hours(c.tic);
            }
            if self.next_graph == due {
                self.refresh_graph(due, production_budgets)?;
                self.next_graph += hours(c.graph_refresh);
            }
            if self.next_rankscore == due {
                self.refresh_rankscore(due)?;
                self.next_rankscore += hours(c.rankscore_refresh);
            }
        }
    }

    fn record(&mut self, served: &[ImpressionRecord], uas: &[UasRecord]) -> Result<()> {
        if self.strategies.contains(STRATEGY_RANKSCORE) {
            for r in uas {
                self.quality.push(r)?;
            }
        }
        for imp in served {
            let base = EventRecord {
                ts: imp.ts,
                user_id: imp.user_id,
                ad_id: imp.ad_id,
                advertiser_id: imp.advertiser_id,
                event: EventType::Impression,
                objective: imp.objective,
            };
            self.events.push(base.clone());
            if imp.positive {
                self.events.push(EventRecord {
                    event: EventType::PositiveEngagement,
                    ..base.clone()
                });
                self.engaged[imp.user_id.index()].push((imp.ad_id, imp.ts));
            }
            if imp.negative {
                self.events.push(EventRecord {
                    event: EventType::NegativeEngagement,
                    ..base.clone()
                });
            }
            if imp.converted {
                self.events.push(EventRecord {
                    event: EventType::Conversion,
                    ..base
                });
            }
        }
        Ok(())
    }

    fn toc(&mut self, t: Timestamp) -> Result<()> {
        let Some(model) = &self.model else {
            return Ok(());
        };
        let graph = self.snapshot(t)?;
        self.model = Some(toc_update(model, &graph.edges, &self.sim.config.train)?);
        self.prev_graph = Some(graph);
        Ok(())
    }

    fn tic(&mut self, t: Timestamp) -> Result<()> {
        let (Some(model), Some(prev)) = (&self.model, &self.prev_graph) else {
            return Ok(());
        };
        let graph = self.snapshot(t)?;
        let delta = delta_edges(prev, &graph)?;
        if !delta.is_empty() {
            self.model = Some(tic_update(model, &delta, &self.sim.config.train)?);
        }
        self.prev_graph = Some(graph);
        Ok(())
    }

    fn refresh_rankscore(&mut self, t: Timestamp) -> Result<()> {
        if !self.strategies.contains(STRATEGY_RANKSCORE) {
            return Ok(());
        }
        for user in self.quality.advance(t)? {
            self.rankscore_lists[user.index()] = self
                .quality
                .top_k(user, self.sim.config.k_source)
                .into_iter()
                .map(|s| s.ad_id)
                .collect();
        }
        Ok(())
    }

    fn refresh_graph(&mut self, t: Timestamp, production_budgets: &[f64]) -> Result<()> {
        let Some(model) = &self.model else {
            return Ok(());
        };
        let sim = self.sim;
        let cfg = &sim.config;
        let items: Vec<(u64, Vec<f64>)> = sim
            .world
            .ads
            .iter()
            .filter(|a| production_budgets[a.id.index()] > 0.0)
            .filter_map(|a| {
                model
                    .vector(&Vertex::ad(a.id.0))
                    .map(|v| (a.id.0 as u64, v.to_vec()))
            })
            .collect();
        if items.is_empty() {
            return Ok(());
        }
        let index: AnnIndex = match cfg.index {
            IndexKind::Exact => build_exact(&items)?,
            IndexKind::Hnsw => build_hnsw(&items, &cfg.hnsw, cfg.seed)?,
        };
        let eligible = |u: UserId, a: AdId| sim.targeting.admits(u, a);

        if self.strategies.contains(STRATEGY_GRAPH) {
            let table = propagate_embeddings(&self.follows, model, cfg.propagation_cap, cfg.seed)?;
            let queries = sim
                .world
                .users
                .iter()
                .filter_map(|u| table.user_query(u.id).map(|q| (u.id, q)))
                .collect();
            let sourced =
                graph_candidates(STRATEGY_GRAPH, &queries, &index, cfg.k_source, eligible, t)?;
            self.graph_lists.iter_mut().for_each(Vec::clear);
            for (u, list) in sourced.lists {
                self.graph_lists[u.index()] = list.into_iter().map(|s| s.ad_id).collect();
            }
        }
        if self.strategies.contains(STRATEGY_GRAPH_DECAYED) {
            let mut queries = std::collections::BTreeMap::new();
            for (u, history) in self.engaged.iter().enumerate() {
                let vectors: Vec<(&[f64], Timestamp)> = history
                    .iter()
                    .filter(|(_, ts)| *ts <= t)
                    .filter_map(|(a, ts)| model.vector(&Vertex::ad(a.0)).map(|v| (v, *ts)))
                    .collect();
                if let Some(q) = decay_user_embedding(&vectors, t, &cfg.decay)? {
                    queries.insert(UserId(u as u32), q);
                }
            }
            let sourced = graph_candidates(
                STRATEGY_GRAPH_DECAYED,
                &queries,
                &index,
                cfg.k_source,
                eligible,
                t,
            )?;
            self.decayed_lists.iter_mut().for_each(Vec::clear);
            for (u, list) in sourced.lists {
                self.decayed_lists[u.index()] = list.into_iter().map(|s| s.ad_id).collect();
            }
        }
        Ok(())
    }
}

/// Reusable per-request buffers indexed by ad id, valid where the stamp
/// equals the current generation.
struct Scratch {
    generation: u32,
    eligible: Vec<u32>,
    engaged: Vec<u32>,
    candidate: Vec<u32>,
    rankscore: Vec<f64>,
    r_by_objective: Vec<Vec<f64>>,
    c_by_objective: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(n_ads: usize, n_objectives: usize) -> Self {
        Scratch {
            generation: 0,
            eligible: vec![0; n_ads],
            engaged: vec![0; n_ads],
            candidate: vec![0; n_ads],
            rankscore: vec![0.0; n_ads],
            r_by_objective: vec![Vec::new(); n_objectives],
            c_by_objective: vec![Vec::new(); n_objectives],
        }
    }

    fn next(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.eligible.fill(0);
            self.engaged.fill(0);
            self.candidate.fill(0);
            self.generation = 1;
        }
        self.r_by_objective.iter_mut().for_each(Vec::clear);
        self.c_by_objective.iter_mut().for_each(Vec::clear);
    }
}

/// Sum of the `m` largest values. Reorders `values`.
fn top_m_sum(values: &mut [f64], m: usize) -> f64 {
    let desc = |a: &f64, b: &f64| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal);
    if values.len() > m {
        values.select_nth_unstable_by(m - 1, desc);
        values[..m].sort_by(desc);
        values[..m].iter().sum()
    } else {
        values.sort_by(desc);
        values.iter().sum()
    }
}

struct ArmState<'a> {
    spec: Option<&'a ArmSpec>,
    budgets: Vec<f64>,
    log: ArmLog,
    scratch: Scratch,
    last_served: usize,
}

impl<'a> ArmState<'a> {
    fn new(sim: &Simulation, name: &str, spec: Option<&'a ArmSpec>) -> Self {
        ArmState {
            spec,
            budgets: sim.world.initial_budgets(),
            log: ArmLog {
                name: name.to_string(),
                requests: Vec::with_capacity(sim.requests.len()),
                impressions: Vec::new(),
            },
            scratch: Scratch::new(sim.world.ads.len(), sim.world.config.objective_count),
            last_served: 0,
        }
    }

    /// Serves one request and appends its records. Returns the request's
    /// counterfactual log lines when `log_uas` is set and the request is sampled.
    fn serve(
        &mut self,
        sim: &Simulation,
        pipe: &Pipeline,
        req: &Request,
        log_uas: bool,
    ) -> Result<Vec<UasRecord>> {
        let world = sim.world;
        let seed = sim.config.seed;
        let treated = self
            .spec
            .is_some_and(|s| in_treatment(seed, req.request_id, s.bucket_rate));
        let cfg = match self.spec {
            Some(s) if treated => &s.config,
            _ => &sim.production,
        };
        let weights = cfg.weights();
        let user = req.user_id;
        let n_obj = world.config.objective_count;
        let m = sim.rncg_m();
        let sampled = log_uas && is_uas_sampled(seed, req.request_id, sim.config.uas_sample_rate);

        let eligible = sim.targeting.eligible(user, &self.budgets);
        let heavy = heavy_rank(world, seed, user, &eligible, cfg.noise_sigma)?;
        self.scratch.next();
        let gen = self.scratch.generation;
        let mut overall = ObjectiveTally::default();
        let mut by_objective = vec![ObjectiveTally::default(); n_obj];
        let mut all_r = Vec::with_capacity(heavy.len());
        let mut uas = Vec::new();
        for s in &heavy {
            let i = s.ad_id.index();
            let ad = &world.ads[i];
            let o = ad.objective as usize - 1;
            let rs = rankscore(ad.bid, s.p_eng, s.p_neg, &weights);
            self.scratch.eligible[i] = gen;
            self.scratch.rankscore[i] = rs;
            all_r.push(rs);
            self.scratch.r_by_objective[o].push(rs);
            let imp = ImpressionEvent {
                ts: req.ts,
                user_id: user,
                ad_id: s.ad_id,
            };
            if would_engage(world.config.seed, &imp, s.p_true) {
                self.scratch.engaged[i] = gen;
                overall.engaged += 1;
                by_objective[o].engaged += 1;
            }
            if sampled {
                uas.push(UasRecord {
                    ts: req.ts,
                    request_id: req.request_id,
                    user_id: user,
                    ad_id: s.ad_id,
                    rankscore: rs,
                    bid: ad.bid,
                    p_eng: s.p_eng,
                    p_neg: s.p_neg,
                });
            }
        }
        let bidder = |a: AdId| Bidder {
            ad_id: a,
            rankscore: self.scratch.rankscore[a.index()],
            bid: world.ads[a.index()].bid,
        };
        let full_winners = winners(
            eligible.iter().map(|&a| bidder(a)),
            cfg.n_slots,
            cfg.reserve_price,
        );

        let cands = if eligible.is_empty() {
            Vec::new()
        } else {
            let light = light_rank(&sim.light, world, user, &eligible, cfg.k)?;
            let mut sources = IndexMap::new();
            for (name, &f) in cfg.blend.strategies() {
                if f > 0.0 {
                    sources.insert(
                        name.clone(),
                        serving_filter(pipe.list(name, user), world, user, &self.budgets),
                    );
                }
            }
            blend(&light, &sources, &cfg.blend)?
        };
        let mut all_c = Vec::with_capacity(cands.len());
        for &a in &cands {
            let i = a.index();
            if self.scratch.eligible[i] != gen {
                return Err(Error::DataIntegrity(format!(
                    "candidate ad {} for request {} is not eligible",
                    a.0, req.request_id
                )));
            }
            self.scratch.candidate[i] = gen;
            let o = world.ads[i].objective as usize - 1;
            all_c.push(self.scratch.rankscore[i]);
            self.scratch.c_by_objective[o].push(self.scratch.rankscore[i]);
            if self.scratch.engaged[i] == gen {
                overall.engaged_hit += 1;
                by_objective[o].engaged_hit += 1;
            }
        }
        for w in &full_winners {
            let o = world.ads[w.ad_id.index()].objective as usize - 1;
            let hit = self.scratch.candidate[w.ad_id.index()] == gen;
            overall.winners += 1;
            by_objective[o].winners += 1;
            if hit {
                overall.winners_hit += 1;
                by_objective[o].winners_hit += 1;
            }
        }
        overall.rncg_num = top_m_sum(&mut all_c, m);
        overall.rncg_den = top_m_sum(&mut all_r, m);
        for (o, t) in by_objective.iter_mut().enumerate() {
            t.rncg_num = top_m_sum(&mut self.scratch.c_by_objective[o], m);
            t.rncg_den = top_m_sum(&mut self.scratch.r_by_objective[o], m);
        }

        let bidders: Vec<Bidder> = cands.iter().map(|&a| bidder(a)).collect();
        let result = auction(&bidders, cfg.n_slots, cfg.reserve_price)?;
        self.last_served = result.slots.len();
        for slot in &result.slots {
            let ad = &world.ads[slot.ad_id.index()];
            let truth: EngagementProb = world.true_engagement_prob(user, slot.ad_id)?;
            let conversion_rate = world.campaigns[ad.campaign_id.index()].conversion_rate;
            let imp = ImpressionEvent {
                ts: req.ts,
                user_id: user,
                ad_id: slot.ad_id,
            };
            let outcome = draw_outcome(world.config.seed, &imp, truth, conversion_rate);
            self.budgets[slot.ad_id.index()] -= slot.price;
            self.log.impressions.push(ImpressionRecord {
                request_id: req.request_id,
                ts: req.ts,
                user_id: user,
                ad_id: slot.ad_id,
                advertiser_id: ad.advertiser_id,
                campaign_id: ad.campaign_id,
                objective: ad.objective,
                bid: ad.bid,
                price: slot.price,
                rankscore: slot.rankscore,
                positive: outcome.positive,
                negative: outcome.negative,
                converted: outcome.converted,
                treated,
            });
        }
        self.log.requests.push(RequestRecord {
            request_id: req.request_id,
            ts: req.ts,
            user_id: user,
            treated,
            n_eligible: eligible.len() as u32,
            n_candidates: cands.len() as u32,
            overall,
            by_objective,
        });
        Ok(uas)
    }
}

/// Runs `control` on every request in the first log, and each named config
/// on every request in the following logs.
pub fn simulate(
    world: &World,
    config: &SimConfig,
    control: &FunnelConfig,
    treatments: &[(String, FunnelConfig)],
) -> Result<Vec<ArmLog>> {
    let sim = Simulation::prepare(world, config, control)?;
    let arms: Vec<ArmSpec> = treatments
        .iter()
        .map(|(name, cfg)| ArmSpec {
            name: name.clone(),
            config: cfg.clone(),
            bucket_rate: 1.0,
        })
        .collect();
    sim.run(&arms)
}

/// Paired A/B experiment. The control arm serves every request with
/// `control`; the treatment arm serves bucketed requests with `treatment`
/// and the rest with `control`. Each arm keeps its own budgets, and all
/// randomness is keyed by request, user and ad, so the arms differ only
/// through the treatment.
pub fn run_experiment(
    world: &World,
    config: &SimConfig,
    control: &FunnelConfig,
    treatment: &FunnelConfig,
    bucket_rate: f64,
) -> Result<(ArmLog, ArmLog)> {
    if !(bucket_rate > 0.0 && bucket_rate < 1.0) {
        return Err(Error::config("bucket_rate", "must lie in (0, 1)"));
    }
    let sim = Simulation::prepare(world, config, control)?;
    let mut logs = sim.run(&[ArmSpec {
        name: "treatment".into(),
        config: treatment.clone(),
        bucket_rate,
    }])?;
    let treated = logs
        .pop()
        .ok_or_else(|| Error::DataIntegrity("treatment arm missing".into()))?;
    let control = logs
        .pop()
        .ok_or_else(|| Error::DataIntegrity("control arm missing".into()))?;
    Ok((control, treated))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_m_sum_cases() {
        assert_eq!(top_m_sum(&mut [5.0, 4.0, 3.0, 2.0, 1.0], 3), 12.0);
        assert_eq!(top_m_sum(&mut [1.0, 3.0], 3), 4.0);
        assert_eq!(top_m_sum(&mut [], 2), 0.0);
    }

    #[test]
    fn bucket_share() {
        let n = 100_000u64;
        let hits = (0..n).filter(|&r| in_treatment(3, r, 0.02)).count() as f64;
        let sd = (n as f64 * 0.02 * 0.98).sqrt();
        assert!((hits - 2000.0).abs() < 3.0 * sd, "{hits}");
        assert!((0..100).all(|r| in_treatment(3, r, 1.0)));
    }
}
