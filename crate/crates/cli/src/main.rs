//! Command-line driver: one subcommand per pipeline stage, plus `simulate`
//! and `experiment`, which chain every stage on a simulated clock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adsource::ann::{build_exact, build_hnsw, AnnIndex};
use adsource::embed::{
    decay_user_embedding, follow_graph, propagate_embeddings, tic_update, toc_update, train,
    EmbeddingModel,
};
use adsource::funnel::{
    random_serving_events, run_experiment, simulate, uas_log, ArmLog, FunnelConfig, SimConfig,
    TargetingCache,
};
use adsource::graph::{
    build_graph, delta_edges, load_snapshot, read_event_log_lenient, save_snapshot, EntityType,
    Vertex, Window,
};
use adsource::io::{read_json, read_jsonl, write_json, write_jsonl};
use adsource::metrics::{compare, BootstrapParams, MetricsReport};
use adsource::sourcing::{
    blend, graph_candidates, quality_scores, topk_rankscore_candidates, ScoredAd, SourcedAds,
    UasRecord, STRATEGY_GRAPH, STRATEGY_GRAPH_DECAYED,
};
use adsource::world::{
    gen_requests, gen_world, AdId, EventType, Request, UserId, World, WorldConfig,
};
use adsource::{Error, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Everything a subcommand may need besides its input paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    world: WorldConfig,
    sim: SimConfig,
    control: FunnelConfig,
    treatment: FunnelConfig,
    bucket_rate: Option<f64>,
    bootstrap: BootstrapParams,
}

const DEFAULT_BUCKET_RATE: f64 = 0.02;

impl PipelineConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let config: PipelineConfig = read_json(path).map_err(|e| match e {
            Error::Json(e) => Error::Config {
                field: "config".into(),
                reason: e.to_string(),
            },
            other => other,
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sim.validate()?;
        self.control.validate()?;
        self.treatment.validate()?;
        let rate = self.bucket_rate();
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config {
                field: "bucket_rate".into(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }

    fn bucket_rate(&self) -> f64 {
        self.bucket_rate.unwrap_or(DEFAULT_BUCKET_RATE)
    }
}

#[derive(Parser)]
#[command(
    name = "adsource",
    version,
    about = "Ensembled ad candidate generation on a synthetic ads universe"
)]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages; 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world, and optionally requests and an exploration event log.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, requires = "requests_out")]
        requests: Option<usize>,
        #[arg(long)]
        requests_out: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        span_days: u64,
        /// Random-serving impressions with sampled engagements for the requests.
        #[arg(long, requires = "requests")]
        events_out: Option<PathBuf>,
    },
    /// Build an engagement graph snapshot from an event log.
    BuildGraph {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Exclusive end; defaults to one second past the last event.
        #[arg(long)]
        end: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train embeddings on a graph snapshot from scratch.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the vertices new since the previous snapshot, freezing the rest.
    Tic {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prev_graph: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain every vector on the merged graph, warm-started from a model.
    Toc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an ANN index over the model's ad vectors.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exhaustive index instead of HNSW.
        #[arg(long)]
        exact: bool,
        /// Index only ads with budget left in this world.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Per-user top ads by time-weighted counterfactual rankscore.
    SourceRankscore {
        #[arg(long)]
        uas: PathBuf,
        /// Evaluation time; defaults to the newest log record.
        #[arg(long)]
        t0: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-user top ads by embedding similarity.
    SourceGraph {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Use time-decayed engagement histories from this log as queries.
        #[arg(long)]
        decayed_events: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Give users without vectors the mean vector of their followings.
    Propagate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tail-replace light-ranker lists with sourced lists under the treatment blend.
    Blend {
        #[arg(long)]
        light: PathBuf,
        /// `strategy=path`, repeatable, in precedence order.
        #[arg(long = "source", value_parser = parse_source)]
        sources: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the control and treatment configs over every request.
    Simulate {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Counterfactually score every eligible ad for a sample of requests.
    Uas {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bucketed A/B experiment with the full pipeline loop, then the report.
    Experiment {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare two arm logs.
    Metrics {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[arg(long)]
        treatment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved report as a table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_source(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected strategy=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) => 2,
        Error::Config { .. } => 3,
        Error::DataIntegrity(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn world_or_generate(path: Option<&Path>, config: &PipelineConfig) -> Result<World> {
    match path {
        Some(p) => World::load(p),
        None => gen_world(&config.world),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config {
            field: "threads".into(),
            reason: "must be at least 1".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Argument(e.to_string()))?;
    let config = PipelineConfig::load(cli.config.as_deref())?;
    let sim = &config.sim;

    match cli.command {
        Command::Datagen {
            out,
            seed,
            requests,
            requests_out,
            span_days,
            events_out,
        } => {
            let mut world_config = config.world.clone();
            if let Some(seed) = seed {
                world_config.seed = seed;
            }
            let world = gen_world(&world_config)?;
            world.save(&out)?;
            if let (Some(n), Some(path)) = (requests, requests_out) {
                let reqs = gen_requests(&world, n, span_days * 86_400)?;
                write_jsonl(&path, &reqs)?;
                if let Some(events) = events_out {
                    let log = random_serving_events(
                        &world,
                        &reqs,
                        config.control.n_slots,
                        world_config.seed,
                    )?;
                    write_jsonl(&events, &log)?;
                }
            }
        }
        Command::BuildGraph {
            events,
            start,
            end,
            out,
        } => {
            let (log, unreadable) = read_event_log_lenient(&events)?;
            let end = end.unwrap_or_else(|| log.last().map_or(1, |e| e.ts + 1));
            let (graph, report) = build_graph(&log, Window::new(start, end)?)?;
            save_snapshot(&graph, &out)?;
            eprintln!(
                "{} edges, {} vertices; {} unreadable lines, {report:?}",
                graph.edges.len(),
                graph.vertices.len(),
                unreadable
            );
        }
        Command::Train { graph, out } => {
            let g = load_snapshot(&graph)?;
            train(&g, &sim.train, None)?.save(&out)?;
        }
        Command::Tic {
            model,
            prev_graph,
            graph,
            out,
        } => {
            let m = EmbeddingModel::load(&model)?;
            let delta = delta_edges(&load_snapshot(&prev_graph)?, &load_snapshot(&graph)?)?;
            tic_update(&m, &delta, &sim.train)?.save(&out)?;
        }
        Command::Toc { model, graph, out } => {
            let m = EmbeddingModel::load(&model)?;
            let g = load_snapshot(&graph)?;
            toc_update(&m, &g.edges, &sim.train)?.save(&out)?;
        }
        Command::Index {
            model,
            out,
            exact,
            world,
        } => {
            let m = EmbeddingModel::load(&model)?;
            let budgets = world
                .as_deref()
                .map(World::load)
                .transpose()?
                .map(|w| w.initial_budgets());
            let items: Vec<(u64, Vec<f64>)> = m
                .entities_of(EntityType::Ad)
                .filter(|(v, _)| {
                    budgets
                        .as_ref()
                        .is_none_or(|b| b.get(v.id as usize).is_some_and(|&x| x > 0.0))
                })
                .map(|(v, x)| (v.id, x.to_vec()))
                .collect();
            let index = if exact {
                build_exact(&items)?
            } else {
                build_hnsw(&items, &sim.hnsw, sim.seed)?
            };
            index.save(&out)?;
        }
        Command::SourceRankscore { uas, t0, out } => {
            let log: Vec<UasRecord> = read_jsonl(&uas)?;
            let t0 = t0.unwrap_or_else(|| log.iter().map(|r| r.ts).max().unwrap_or(0));
            let q = quality_scores(
                &log,
                t0,
                sim.quality_window_days * 86_400,
                sim.quality_time_scale_days,
            )?;
            topk_rankscore_candidates(&q, sim.k_source)?.save(&out)?;
        }
        Command::SourceGraph {
            model,
            index,
            world,
            t0,
            decayed_events,
            out,
        } => {
            let m = EmbeddingModel::load(&model)?;
            let index = AnnIndex::load(&index)?;
            let world = World::load(&world)?;
            let targeting = TargetingCache::new(&world);
            let eligible = |u: UserId, a: AdId| targeting.admits(u, a);
            let sourced = match decayed_events {
                None => {
                    let queries = world
                        .users
                        .iter()
                        .filter_map(|u| m.user_query(u.id).map(|q| (u.id, q)))
                        .collect();
                    graph_candidates(STRATEGY_GRAPH, &queries, &index, sim.k_source, eligible, t0)?
                }
                Some(path) => {
                    let (log, _) = read_event_log_lenient(&path)?;
                    let mut history: BTreeMap<UserId, Vec<(&[f64], u64)>> = BTreeMap::new();
                    for e in log
                        .iter()
                        .filter(|e| e.event == EventType::PositiveEngagement && e.ts <= t0)
                    {
                        if let Some(v) = m.vector(&Vertex::ad(e.ad_id.0)) {
                            history.entry(e.user_id).or_default().push((v, e.ts));
                        }
                    }
                    let mut queries = BTreeMap::new();
                    for (u, h) in history {
                        if let Some(q) = decay_user_embedding(&h, t0, &sim.decay)? {
                            queries.insert(u, q);
                        }
                    }
                    graph_candidates(
                        STRATEGY_GRAPH_DECAYED,
                        &queries,
                        &index,
                        sim.k_source,
                        eligible,
                        t0,
                    )?
                }
            };
            sourced.save(&out)?;
        }
        Command::Propagate { model, world, out } => {
            let m = EmbeddingModel::load(&model)?;
            let world = World::load(&world)?;
            propagate_embeddings(&follow_graph(&world), &m, sim.propagation_cap, sim.seed)?
                .save(&out)?;
        }
        Command::Blend {
            light,
            sources,
            out,
        } => {
            let light = SourcedAds::load(&light, "light")?;
            let mut loaded = Vec::with_capacity(sources.len());
            for (name, path) in &sources {
                loaded.push((name.clone(), SourcedAds::load(path, name)?));
            }
            let mut blended = SourcedAds::new("blend", light.generated_at);
            for (&user, list) in &light.lists {
                let light_topk: Vec<AdId> = list.iter().map(|s| s.ad_id).collect();
                let per_source: indexmap::IndexMap<String, Vec<AdId>> = loaded
                    .iter()
                    .map(|(n, s)| (n.clone(), s.ads_for(user)))
                    .collect();
                let merged = blend(&light_topk, &per_source, &config.treatment.blend)?;
                let n = merged.len();
                blended.lists.insert(
                    user,
                    merged
                        .into_iter()
                        .enumerate()
                        .map(|(i, ad_id)| ScoredAd {
                            ad_id,
                            score: (n - i) as f64,
                        })
                        .collect(),
                );
            }
            blended.save(&out)?;
        }
        Command::Simulate { world, out_dir } => {
            let world = world_or_generate(world.as_deref(), &config)?;
            let logs = simulate(
                &world,
                sim,
                &config.control,
                &[("treatment".into(), config.treatment.clone())],
            )?;
            for log in &logs {
                log.save(&out_dir.join(&log.name))?;
            }
            let report = compare(
                &world,
                &logs[0],
                &logs[1],
                &config.control.weights(),
                &config.bootstrap,
            )?;
            emit_report(&report, &out_dir)?;
        }
        Command::Uas {
            world,
            requests,
            out,
        } => {
            let world = World::load(&world)?;
            let reqs: Vec<Request> = read_jsonl(&requests)?;
            let log = uas_log(
                &world,
                &reqs,
                sim.uas_sample_rate,
                &config.control,
                sim.seed,
                &world.initial_budgets(),
            )?;
            write_jsonl(&out, &log)?;
        }
        Command::Experiment { world, out_dir } => {
            let world = world_or_generate(world.as_deref(), &config)?;
            let (control, treatment) = run_experiment(
                &world,
                sim,
                &config.control,
                &config.treatment,
                config.bucket_rate(),
            )?;
            control.save(&out_dir.join("control"))?;
            treatment.save(&out_dir.join("treatment"))?;
            let report = compare(
                &world,
                &control,
                &treatment,
                &config.control.weights(),
                &config.bootstrap,
            )?;
            emit_report(&report, &out_dir)?;
        }
        Command::Metrics {
            world,
            control,
            treatment,
            out,
        } => {
            let world = World::load(&world)?;
            let c = ArmLog::load(&control, "control")?;
            let t = ArmLog::load(&treatment, "treatment")?;
            let report = compare(&world, &c, &t, &config.control.weights(), &config.bootstrap)?;
            write_json(&out, &report)?;
            print!("{}", report.table());
        }
        Command::Report { report } => {
            let report: MetricsReport = read_json(&report)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let table = report.table();
    std::fs::write(dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
