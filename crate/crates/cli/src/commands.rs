use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use deliberank::config::EngineConfig;
use deliberank::deliberation::Strategy;
use deliberank::domain::{ImageId, ProxySource, SemanticProxy};
use deliberank::evalbench::datasets::load_gallery_manifest;
use deliberank::evalbench::report::{render_table, sweep_csv, Aggregates, RunReport};
use deliberank::evalbench::synthetic::{
    SyntheticBenchmark, SyntheticConfig, EMBEDDINGS_FILE, METADATA_FILE, PROXIES_FILE, TRIPLETS_FILE,
};
use deliberank::pipeline::{build_gateway, Engine, ProviderTier, Resources};
use deliberank::proxies::ProxyStore;
use deliberank::router::FusionMode;

use crate::{DistillArgs, EngineArgs, EvaluateArgs, GenArgs, IngestArgs, ModeArg, RunArgs, StrategyArg, SweepArgs};

/// Config file written next to a generated benchmark.
pub const ENGINE_CONFIG_FILE: &str = "engine.json";

/// Too many queries failed; the report is still written.
#[derive(Debug)]
pub struct RunFailed(pub String);

impl std::fmt::Display for RunFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RunFailed {}

impl EngineArgs {
    fn tier(&self) -> ProviderTier {
        if self.tier.oracle {
            ProviderTier::Oracle {
                error_rate: self.oracle_error.unwrap_or(0.0),
            }
        } else if self.tier.live {
            ProviderTier::Live
        } else {
            ProviderTier::Mock
        }
    }

    fn load_config(&self) -> Result<EngineConfig> {
        let mut cfg = EngineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.experience.distill.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.fusion.mode = match mode {
                ModeArg::Ipr => FusionMode::Ipr,
                ModeArg::Static => FusionMode::Static,
                ModeArg::Avg => FusionMode::Avg,
            };
        }
        if let Some(k) = self.k {
            cfg.fusion.k = k;
        }
        if let Some(tau) = self.tau {
            cfg.fusion.tau = tau;
        }
        if let Some(stages) = self.stages {
            cfg.deliberation.stages = stages;
        }
        if let Some(s) = self.strategy {
            cfg.deliberation.strategy_override = Some(match s {
                StrategyArg::Sequential => Strategy::Sequential,
                StrategyArg::Parallel => Strategy::Parallel,
            });
        }
        if let Some(n) = self.query_concurrency {
            cfg.run.query_concurrency = n;
        }
        if let Some(e) = self.oracle_error {
            ensure!(self.tier.oracle, "--oracle-error needs --oracle");
            ensure!((0.0..=1.0).contains(&e), "--oracle-error must be in [0, 1]");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn engine(&self) -> Result<Engine> {
        let cfg = self.load_config()?;
        let tier = self.tier();
        let resources = Arc::new(Resources::load(&cfg)?);
        let gateway = Arc::new(build_gateway(&cfg, tier, &resources)?);
        Ok(Engine::new(cfg, tier, resources, gateway)?)
    }
}

pub async fn run(args: RunArgs) -> Result<()> {
    let engine = args.engine.engine()?;
    let report = engine.run(args.engine.limit).await;
    report
        .save(&args.out)
        .with_context(|| format!("writing report {}", args.out.display()))?;
    println!(
        "{}",
        render_table(&[("fused", &report.fused_aggregates), ("final", &report.aggregates)])
    );
    println!(
        "{} queries, {} failed, {} output tokens; report at {}",
        report.aggregates.n_queries,
        report.aggregates.n_failed,
        report.aggregates.total_tokens_out,
        args.out.display()
    );
    let limit = engine.config().run.max_failure_rate;
    if report.failure_rate() > limit {
        return Err(RunFailed(format!(
            "{} of {} queries failed (rate {:.3} exceeds {limit})",
            report.aggregates.n_failed,
            report.aggregates.n_queries,
            report.failure_rate()
        ))
        .into());
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.reports {
        let report = RunReport::load(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push((label, Aggregates::over(&report.queries, args.fused)));
    }
    let parts: Vec<Aggregates> = rows.iter().map(|(_, a)| a.clone()).collect();
    let average = if rows.len() > 1 {
        Some(Aggregates::average(&parts)?)
    } else {
        None
    };

    let mut table: Vec<(&str, &Aggregates)> = rows.iter().map(|(l, a)| (l.as_str(), a)).collect();
    if let Some(avg) = &average {
        table.push(("average", avg));
    }
    println!("{}", render_table(&table));

    if let Some(out) = &args.json {
        let reports: Vec<_> = rows
            .iter()
            .map(|(label, agg)| serde_json::json!({ "label": label, "aggregates": agg }))
            .collect();
        let summary = serde_json::json!({ "reports": reports, "average": average });
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub async fn sweep_k(args: SweepArgs) -> Result<()> {
    ensure!(!args.ks.is_empty(), "--ks needs at least one value");
    if let Some(bad) = args.ks.iter().find(|k| **k < 2) {
        bail!("candidate pool size must be at least 2, got {bad}");
    }
    let base = args.engine.load_config()?;
    let tier = args.engine.tier();
    let resources = Arc::new(Resources::load(&base)?);
    let gateway = Arc::new(build_gateway(&base, tier, &resources)?);
    let mut rows = Vec::with_capacity(args.ks.len());
    let mut failed = Vec::new();
    for &k in &args.ks {
        let mut cfg = base.clone();
        cfg.fusion.k = k;
        let limit = cfg.run.max_failure_rate;
        let engine = Engine::new(cfg, tier, Arc::clone(&resources), Arc::clone(&gateway))?;
        let report = engine.run(args.engine.limit).await;
        if report.failure_rate() > limit {
            failed.push(k);
        }
        rows.push((k, report.aggregates));
    }
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if !failed.is_empty() {
        return Err(RunFailed(format!("failure rate exceeded for k in {failed:?}")).into());
    }
    Ok(())
}

pub async fn distill(args: DistillArgs) -> Result<()> {
    let mut engine_args = args.engine;
    let mut cfg = engine_args.load_config()?;
    if let Some(r) = args.rounds {
        cfg.experience.distill.rounds = r;
    }
    if let Some(m) = args.rollouts {
        cfg.experience.distill.rollouts = m;
    }
    cfg.validate()?;
    let out = match args.out.or_else(|| cfg.experience.path.clone()) {
        Some(p) => p,
        None => bail!("no library destination: pass --out or set experience.path"),
    };
    let tier = engine_args.tier();
    let resources = Arc::new(Resources::load(&cfg)?);
    let gateway = Arc::new(build_gateway(&cfg, tier, &resources)?);
    let limit = engine_args.limit.take();
    let engine = Engine::new(cfg, tier, resources, gateway)?;
    let outcome = engine.distill(limit, Some(&out)).await?;
    for r in &outcome.log {
        println!(
            "round {}: {} instances, mean reward {:.4}, mean logical score {:.4}, library {} (v{})",
            r.round, r.instances, r.mean_reward, r.mean_logical_score, r.library_size, r.library_version
        );
    }
    outcome.library.save(&out)?;
    println!("{} experiences written to {}", outcome.library.len(), out.display());
    Ok(())
}

pub fn ingest_proxies(args: IngestArgs) -> Result<()> {
    let mut store = ProxyStore::new();
    for input in &args.inputs {
        let part = if input.extension().is_some_and(|e| e == "tsv") {
            read_tsv(input, args.max_chars)?
        } else {
            ProxyStore::load_jsonl(input, args.max_chars)?
        };
        for id in part.sorted_ids() {
            let proxy = part.get(id).expect("listed id").clone();
            if store.insert(proxy).is_some() {
                bail!("image {id} has proxies in more than one input");
            }
        }
    }
    if let Some(manifest) = &args.gallery {
        let gallery = load_gallery_manifest(manifest)?;
        let missing: Vec<&ImageId> = gallery.iter().filter(|id| store.get(id).is_none()).collect();
        if let Some(first) = missing.first() {
            bail!(
                "{} of {} gallery images have no proxy (first: {first})",
                missing.len(),
                gallery.len()
            );
        }
    }
    store
        .save_jsonl(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} proxies written to {}", store.len(), args.out.display());
    Ok(())
}

fn read_tsv(path: &Path, max_chars: usize) -> Result<ProxyStore> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut store = ProxyStore::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        let Some((id, text)) = line.split_once('\t') else {
            bail!("{}: expected `id<TAB>text`", at());
        };
        let id = ImageId::new(id.trim()).with_context(at)?;
        let proxy = SemanticProxy::new(id, text.trim(), ProxySource::Precomputed, max_chars).with_context(at)?;
        if let Some(prev) = store.insert(proxy) {
            bail!("{}: duplicate image {}", at(), prev.image);
        }
    }
    Ok(store)
}

pub fn gen_synthetic(args: GenArgs) -> Result<()> {
    let config = SyntheticConfig {
        seed: args.seed,
        n_gallery: args.n_gallery,
        n_queries: args.n_queries,
        n_attrs: args.n_attrs,
        noise: args.noise,
        intent_mix: [args.intent_mix[0], args.intent_mix[1], args.intent_mix[2]],
        caption_error: args.caption_error,
        near_duplicate_share: args.near_duplicate_share,
    };
    let bench = SyntheticBenchmark::generate(&config)?;
    bench.write_to(&args.out)?;
    let engine = serde_json::json!({
        "seed": args.seed,
        "embeddings": { "gallery": EMBEDDINGS_FILE },
        "proxies": PROXIES_FILE,
        "text_embedder": { "kind": "synthetic", "metadata": METADATA_FILE },
        "dataset": { "kind": "generic_jsonl", "annotations": TRIPLETS_FILE },
    });
    let path = args.out.join(ENGINE_CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(&engine)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} gallery items, {} queries written to {}",
        bench.items.len(),
        bench.queries.len(),
        args.out.display()
    );
    Ok(())
}
