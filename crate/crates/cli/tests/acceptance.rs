//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without network access or optional components. Exits non-zero when
//! any criterion fails.

// `ensure!` negates its condition so that NaN fails a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use deliberank::config::EngineConfig;
use deliberank::deliberation::Strategy;
use deliberank::domain::{ImageId, RankedList, View};
use deliberank::embedstore::{load_embv1, write_embv1_rows};
use deliberank::evalbench::metrics::{map_at_k, recall_at_k};
use deliberank::evalbench::report::{RunReport, MAP_KS, RECALL_KS};
use deliberank::evalbench::synthetic::{SyntheticBenchmark, SyntheticConfig};
use deliberank::experience::{CandidateExperience, ExperienceLibrary, Paradigm, MAX_ITEM_CHARS, SCORE_FLOOR};
use deliberank::llm::{
    Gateway, LlmError, LlmProvider, LlmRequest, MockProvider, ProviderError, ProviderReply, RetryPolicy, Role,
};
use deliberank::pipeline::{build_gateway, Engine, ProviderTier, Resources};
use deliberank::router::{fuse, Branches, FusionConfig, FusionMode, IntentWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::runtime::Runtime;

type Check = fn(&Runtime) -> Result<String, String>;

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("runtime");
    let checks: [(&str, Check); 10] = [
        ("fusion matches brute-force oracle", fusion_oracle),
        ("worked fusion value", worked_fusion_value),
        ("metrics match brute-force oracles", metric_oracles),
        ("perfect judge recovers buffer coverage", oracle_completeness),
        ("fusion-mode and stage-count ablation", ablation_ordering),
        ("candidate pool sweep", k_sweep),
        ("experience library invariants and determinism", experience_library),
        ("EMBV1 round trip", embv1_round_trip),
        ("gateway bound, retry and backoff", gateway_faults),
        ("mock end-to-end run on the bundled fixture", mock_end_to_end),
    ];
    let mut failed = 0;
    for (n, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let outcome = check(&rt);
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name} ({secs:.2}s): {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name} ({secs:.2}s): {detail}", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn id(s: &str) -> ImageId {
    ImageId::new(s).expect("valid id")
}

fn ranked(view: View, ids: &[ImageId]) -> RankedList {
    let n = ids.len();
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, x)| (x.clone(), (n - i) as f64))
        .collect();
    RankedList::from_sorted(view, "q", entries).expect("sorted list")
}

/// Σ_m w_m / (r_m + τ); a missing id ranks one past the branch end and
/// empty branches are skipped.
fn brute_force_fusion(branches: &[Vec<ImageId>; 3], w: [f64; 3], tau: f64) -> BTreeMap<ImageId, f64> {
    let mut out = BTreeMap::new();
    for item in branches.iter().flatten() {
        let mut s = 0.0;
        for (b, weight) in branches.iter().zip(w) {
            if b.is_empty() {
                continue;
            }
            let r = b.iter().position(|x| x == item).map_or(b.len() + 1, |p| p + 1);
            s += weight / (r as f64 + tau);
        }
        out.insert(item.clone(), s);
    }
    out
}

fn fused(branches: &[Vec<ImageId>; 3], w: [f64; 3], k: usize) -> Vec<(ImageId, f64)> {
    let lists = [
        ranked(View::Pred, &branches[0]),
        ranked(View::Key, &branches[1]),
        ranked(View::Vis, &branches[2]),
    ];
    let cfg = FusionConfig {
        k,
        ..Default::default()
    };
    let weights = IntentWeights::normalized(w).expect("weights");
    fuse(
        Branches {
            pred: &lists[0],
            key: &lists[1],
            vis: &lists[2],
        },
        &weights,
        &cfg,
    )
    .expect("fusion")
    .entries()
    .to_vec()
}

fn fusion_oracle(_: &Runtime) -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xf05e);
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..=100);
        let universe: Vec<ImageId> = (0..n).map(|i| id(&format!("g{i:03}"))).collect();
        let mut branches: [Vec<ImageId>; 3] = Default::default();
        for b in branches.iter_mut() {
            let mut pool = universe.clone();
            pool.shuffle(&mut rng);
            pool.truncate(rng.random_range(0..=n));
            *b = pool;
        }
        if branches.iter().all(Vec::is_empty) {
            branches[0] = universe.clone();
        }
        let raw = [
            rng.random::<f64>() + 1e-3,
            rng.random::<f64>() + 1e-3,
            rng.random::<f64>() + 1e-3,
        ];
        let total: f64 = raw.iter().sum();
        let w = raw.map(|x| x / total);

        let oracle = brute_force_fusion(&branches, w, 60.0);
        let got = fused(&branches, w, 100);
        ensure!(
            got.len() == oracle.len(),
            "case {case}: {} fused ids, oracle has {}",
            got.len(),
            oracle.len()
        );
        for (item, score) in &got {
            let expect = oracle
                .get(item)
                .ok_or_else(|| format!("case {case}: {item} not in any branch"))?;
            worst = worst.max((expect - score).abs());
            ensure!(
                (expect - score).abs() <= 1e-12,
                "case {case}: {item} fused {score}, oracle {expect}"
            );
            compared += 1;
        }
        let mut expect_order: Vec<(&ImageId, &f64)> = oracle.iter().collect();
        expect_order.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        ensure!(
            expect_order.iter().map(|(i, _)| *i).eq(got.iter().map(|(i, _)| i)),
            "case {case}: fused order differs from oracle order"
        );

        // One-hot weights reproduce that branch's order.
        for b in 0..3 {
            if branches[b].is_empty() {
                continue;
            }
            let mut one_hot = [0.0; 3];
            one_hot[b] = 1.0;
            let order = fused(&branches, one_hot, 100);
            ensure!(
                order
                    .iter()
                    .take(branches[b].len())
                    .map(|(i, _)| i)
                    .eq(branches[b].iter()),
                "case {case}: one-hot branch {b} order not reproduced"
            );
        }

        // Promoting an item in a positively weighted branch never hurts it.
        let b = (0..3).find(|b| branches[*b].len() >= 2).unwrap_or(0);
        if branches[b].len() >= 2 {
            let p = rng.random_range(1..branches[b].len());
            let item = branches[b][p].clone();
            let before = fused(&branches, w, 100);
            let mut promoted = branches.clone();
            promoted[b].swap(p - 1, p);
            let after = fused(&promoted, w, 100);
            let score = |v: &[(ImageId, f64)]| v.iter().find(|(i, _)| *i == item).map(|x| x.1).unwrap();
            let pos = |v: &[(ImageId, f64)]| v.iter().position(|(i, _)| *i == item).unwrap();
            ensure!(
                score(&after) > score(&before),
                "case {case}: promotion did not raise the score"
            );
            ensure!(
                pos(&after) <= pos(&before),
                "case {case}: promotion lowered the fused position"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s, limit 5s");
    Ok(format!(
        "1000 instances, {compared} scores, max |diff| {worst:.1e}, {secs:.2}s"
    ))
}

fn worked_fusion_value(_: &Runtime) -> Result<String, String> {
    let filler = |prefix: &str, n: usize| -> Vec<ImageId> { (0..n).map(|i| id(&format!("{prefix}{i}"))).collect() };
    let target = id("target");
    let mut pred = filler("p", 0);
    pred.insert(0, target.clone());
    let mut key = filler("k", 2);
    key.insert(2, target.clone());
    let mut vis = filler("v", 9);
    vis.insert(9, target.clone());
    let got = fused(&[pred, key, vis], [0.6, 0.3, 0.1], 50);
    let score = got
        .iter()
        .find(|(i, _)| *i == target)
        .map(|x| x.1)
        .ok_or("target missing")?;
    ensure!(
        (score - 0.0160266).abs() <= 1e-7,
        "score {score:.7}, expected 0.0160266"
    );
    Ok(format!("ranks (1, 3, 10), weights (0.6, 0.3, 0.1): {score:.7}"))
}

fn brute_recall(ranking: &[ImageId], targets: &BTreeSet<ImageId>, k: usize) -> f64 {
    let mut hit = false;
    for (i, x) in ranking.iter().enumerate() {
        if i < k && targets.contains(x) {
            hit = true;
        }
    }
    f64::from(u8::from(hit))
}

fn brute_map(ranking: &[ImageId], targets: &BTreeSet<ImageId>, k: usize) -> f64 {
    let mut sum = 0.0;
    for n in 1..=k.min(ranking.len()) {
        if targets.contains(&ranking[n - 1]) {
            let hits = ranking[..n].iter().filter(|x| targets.contains(*x)).count();
            sum += hits as f64 / n as f64;
        }
    }
    sum / targets.len().min(k) as f64
}

fn metric_oracles(_: &Runtime) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    for case in 0..1000 {
        let n = rng.random_range(1..=60);
        let mut ranking: Vec<ImageId> = (0..n).map(|i| id(&format!("r{i}"))).collect();
        ranking.shuffle(&mut rng);
        let n_targets = rng.random_range(1..=5);
        let targets: BTreeSet<ImageId> = (0..n_targets)
            .map(|_| id(&format!("r{}", rng.random_range(0..n + 5))))
            .collect();
        let k = rng.random_range(1..=70);
        let (r, br) = (recall_at_k(&ranking, &targets, k), brute_recall(&ranking, &targets, k));
        ensure!((r - br).abs() <= 1e-12, "case {case}: recall@{k} {r} vs {br}");
        let (m, bm) = (map_at_k(&ranking, &targets, k), brute_map(&ranking, &targets, k));
        ensure!((m - bm).abs() <= 1e-12, "case {case}: mAP@{k} {m} vs {bm}");
    }
    let ranking: Vec<ImageId> = ["A", "x1", "B", "x2", "x3"].map(id).to_vec();
    let targets = BTreeSet::from([id("A"), id("B")]);
    let m = map_at_k(&ranking, &targets, 5);
    ensure!((m - 0.8333).abs() <= 1e-4, "worked mAP@5 {m}");
    Ok(format!("1000 random cases agree; [A,x,B,x,x] mAP@5 = {m:.4}"))
}

fn engine_config() -> EngineConfig {
    // Paths are placeholders: resources are built in memory.
    EngineConfig::from_json(
        r#"{
            "embeddings": {"gallery": "unused.embv1"},
            "proxies": "unused.jsonl",
            "text_embedder": {"kind": "synthetic", "metadata": "unused.json"},
            "dataset": {"kind": "generic_jsonl", "annotations": "unused.jsonl"}
        }"#,
        "acceptance",
    )
    .expect("config")
}

async fn run_engine(res: &Arc<Resources>, cfg: EngineConfig, tier: ProviderTier) -> Result<RunReport, String> {
    let gateway = Arc::new(build_gateway(&cfg, tier, res).map_err(|e| e.to_string())?);
    let engine = Engine::new(cfg, tier, Arc::clone(res), gateway).map_err(|e| e.to_string())?;
    Ok(engine.run(None).await)
}

fn bench(config: SyntheticConfig) -> Result<(SyntheticBenchmark, Arc<Resources>), String> {
    let b = SyntheticBenchmark::generate(&config).map_err(|e| e.to_string())?;
    let res = Arc::new(Resources::from_synthetic(&b));
    Ok((b, res))
}

const PERFECT: ProviderTier = ProviderTier::Oracle { error_rate: 0.0 };

fn oracle_completeness(rt: &Runtime) -> Result<String, String> {
    let started = Instant::now();
    let (_, res) = bench(SyntheticConfig {
        seed: 20,
        n_gallery: 200,
        n_queries: 50,
        noise: 0.05,
        ..Default::default()
    })?;
    let mut cfg = engine_config();
    cfg.deliberation.strategy_override = Some(Strategy::Sequential);
    let seq = rt.block_on(run_engine(&res, cfg.clone(), PERFECT))?;
    ensure!(
        seq.aggregates.n_failed == 0,
        "{} failed queries",
        seq.aggregates.n_failed
    );
    for q in &seq.queries {
        let (after, before) = (q.metrics.recall(1), q.fused_metrics.recall(50));
        ensure!(
            after == before,
            "{}: final R@1 {after:?} vs fused R@50 {before:?}",
            q.query_id
        );
    }
    let r1 = seq.aggregates.recall(1).unwrap_or(f64::NAN);
    let r50 = seq.fused_aggregates.recall(50).unwrap_or(f64::NAN);
    ensure!(r1 == r50, "final R@1 {r1} vs fused R@50 {r50}");

    cfg.deliberation.strategy_override = Some(Strategy::Parallel);
    let par = rt.block_on(run_engine(&res, cfg, PERFECT))?;
    for q in &par.queries {
        let (after, before) = (q.metrics.map(5).unwrap_or(-1.0), q.fused_metrics.map(5).unwrap_or(2.0));
        ensure!(
            after >= before,
            "{}: parallel mAP@5 {after} < fused {before}",
            q.query_id
        );
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s, limit 10s");
    Ok(format!(
        "sequential R@1 {r1:.2} = fused R@50 {r50:.2}; parallel mAP@5 {:.2} >= fused {:.2} on all {} queries; {secs:.2}s",
        par.aggregates.map(5).unwrap_or(0.0),
        par.fused_aggregates.map(5).unwrap_or(0.0),
        par.queries.len()
    ))
}

fn ablation_ordering(rt: &Runtime) -> Result<String, String> {
    let tier = ProviderTier::Oracle { error_rate: 0.15 };
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (_, res) = bench(SyntheticConfig {
            seed,
            n_gallery: 2000,
            n_queries: 300,
            noise: 0.15,
            caption_error: 0.1,
            intent_mix: [0.5, 0.3, 0.2],
            ..Default::default()
        })?;
        let mut map5 = Vec::new();
        for (mode, stages) in [
            (FusionMode::Avg, 2),
            (FusionMode::Static, 2),
            (FusionMode::Ipr, 2),
            (FusionMode::Ipr, 1),
            (FusionMode::Ipr, 0),
        ] {
            let mut cfg = engine_config();
            cfg.seed = seed;
            cfg.fusion.mode = mode;
            cfg.deliberation.stages = stages;
            let report = rt.block_on(run_engine(&res, cfg, tier))?;
            map5.push(report.aggregates.map(5).unwrap_or(f64::NAN));
        }
        let [avg, stat, ipr, l1, l0] = [map5[0], map5[1], map5[2], map5[3], map5[4]];
        let ok = avg <= stat && stat <= ipr && ipr >= l1 && l1 >= l0;
        held += usize::from(ok);
        lines.push(format!(
            "seed {seed} {}: avg {avg:.2} static {stat:.2} ipr {ipr:.2} | L2 {ipr:.2} L1 {l1:.2} L0 {l0:.2}",
            if ok { "ok" } else { "violated" }
        ));
    }
    let detail = format!("orderings held on {held}/5 seeds [{}]", lines.join("; "));
    ensure!(held >= 4, "{detail}");
    Ok(detail)
}

fn k_sweep(rt: &Runtime) -> Result<String, String> {
    let (_, res) = bench(SyntheticConfig {
        seed: 5,
        n_gallery: 600,
        n_queries: 100,
        noise: 0.2,
        intent_mix: [0.5, 0.3, 0.2],
        ..Default::default()
    })?;
    let mut rows = Vec::new();
    for k in [10, 25, 50] {
        let mut cfg = engine_config();
        cfg.fusion.k = k;
        let report = rt.block_on(run_engine(&res, cfg, PERFECT))?;
        rows.push((
            k,
            report.aggregates.map(5).unwrap_or(f64::NAN),
            report.aggregates.mean_tokens_out,
        ));
    }
    for w in rows.windows(2) {
        ensure!(
            w[1].1 >= w[0].1,
            "mAP@5 fell from {:.2} (k={}) to {:.2} (k={})",
            w[0].1,
            w[0].0,
            w[1].1,
            w[1].0
        );
        ensure!(
            w[1].2 > w[0].2,
            "mean tokens {:.1} (k={}) -> {:.1} (k={})",
            w[0].2,
            w[0].0,
            w[1].2,
            w[1].0
        );
    }
    let text: Vec<String> = rows
        .iter()
        .map(|(k, m, t)| format!("k={k} mAP@5 {m:.2} tokens {t:.1}"))
        .collect();
    Ok(text.join("; "))
}

fn experience_library(rt: &Runtime) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe4);
    let words = [
        "check",
        "Check",
        "verify  colour",
        "verify colour",
        "reject",
        "prefer",
        "ignore",
        "  ",
        "",
    ];
    let paradigms = [
        Paradigm::IntraPageTruth,
        Paradigm::CrossPageRejection,
        Paradigm::CounterfactualDefense,
    ];
    let mut updates = 0usize;
    for seq in 0..10_000 {
        let cap = rng.random_range(1..=6);
        let mut lib = ExperienceLibrary::new(cap);
        for _ in 0..rng.random_range(1..=6) {
            let batch: Vec<CandidateExperience> = (0..rng.random_range(0..=6))
                .map(|_| {
                    let mut text = words[rng.random_range(0..words.len())].to_string();
                    if rng.random_bool(0.1) {
                        text = "x".repeat(MAX_ITEM_CHARS + 20);
                    }
                    CandidateExperience {
                        text,
                        score: rng.random_range(-0.3..1.3),
                        paradigm: paradigms[rng.random_range(0..3)],
                    }
                })
                .collect();
            let next = lib.update(&batch);
            updates += 1;
            ensure!(
                next.version == lib.version + 1,
                "seq {seq}: version {} -> {}",
                lib.version,
                next.version
            );
            ensure!(
                next.items.len() <= cap,
                "seq {seq}: {} items over capacity {cap}",
                next.items.len()
            );
            let mut keys = HashSet::new();
            let mut ids = HashSet::new();
            for item in &next.items {
                let key = item
                    .text
                    .split_whitespace()
                    .map(str::to_lowercase)
                    .collect::<Vec<_>>()
                    .join(" ");
                ensure!(!key.is_empty(), "seq {seq}: empty item text");
                ensure!(
                    item.text.chars().count() <= MAX_ITEM_CHARS,
                    "seq {seq}: item over {MAX_ITEM_CHARS} chars"
                );
                ensure!(
                    (SCORE_FLOOR..=1.0).contains(&item.score),
                    "seq {seq}: score {}",
                    item.score
                );
                ensure!(keys.insert(key), "seq {seq}: duplicate text {:?}", item.text);
                ensure!(ids.insert(item.id.clone()), "seq {seq}: duplicate id {}", item.id);
            }
            lib = next;
        }
    }

    let (_, res) = bench(SyntheticConfig {
        seed: 3,
        ..Default::default()
    })?;
    let dir = tempdir()?;
    let mut libraries = Vec::new();
    for run in 0..2 {
        let mut cfg = engine_config();
        cfg.experience.distill.rounds = 3;
        cfg.experience.distill.rollouts = 4;
        cfg.experience.distill.seed = 17;
        let path = dir.join(format!("library-{run}.json"));
        let tier = ProviderTier::Mock;
        let gateway = Arc::new(build_gateway(&cfg, tier, &res).map_err(|e| e.to_string())?);
        let engine = Engine::new(cfg, tier, Arc::clone(&res), gateway).map_err(|e| e.to_string())?;
        let outcome = rt
            .block_on(engine.distill(None, Some(&path)))
            .map_err(|e| e.to_string())?;
        ensure!(outcome.log.len() == 3, "{} rounds logged", outcome.log.len());
        libraries.push(std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    ensure!(
        libraries[0] == libraries[1],
        "distilled libraries differ between identical runs"
    );
    let lib: ExperienceLibrary = serde_json::from_slice(&libraries[0]).map_err(|e| e.to_string())?;
    ensure!(!lib.items.is_empty(), "distillation produced an empty library");
    ensure!(
        lib.items.iter().all(|i| (0.0..=1.0).contains(&i.score)),
        "score out of [0, 1]"
    );
    Ok(format!(
        "10000 sequences ({updates} updates) clean; T=3 M=4 library of {} items, {} bytes, identical across runs",
        lib.items.len(),
        libraries[0].len()
    ))
}

fn embv1_round_trip(_: &Runtime) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3b);
    let dir = tempdir()?;
    let path = dir.join("m.embv1");
    let mut shapes = vec![(1usize, 1usize), (1, 7), (9, 1)];
    while shapes.len() < 100 {
        shapes.push((rng.random_range(1..=40), rng.random_range(1..=64)));
    }
    for (case, (n, dim)) in shapes.into_iter().enumerate() {
        let ids: Vec<ImageId> = (0..n)
            .map(|i| id(&format!("img-{case}-{i}-{}", rng.random::<u16>())))
            .collect();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let x: f32 = rng.random_range(-1.0..1.0);
                        if x.abs() < 1e-3 {
                            0.5
                        } else {
                            x
                        }
                    })
                    .collect()
            })
            .collect();
        write_embv1_rows(&path, dim, ids.iter().zip(&rows).map(|(i, r)| (i, r.as_slice())))
            .map_err(|e| format!("case {case}: {e}"))?;
        let m = load_embv1(&path).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(
            m.dim() == dim && m.ids() == ids.as_slice(),
            "case {case}: ids or dim changed"
        );
        for (i, raw) in rows.iter().enumerate() {
            let norm = raw.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            for (got, x) in m.row(i).iter().zip(raw) {
                let want = f64::from(*x) / norm;
                ensure!(
                    (f64::from(*got) - want).abs() <= 1e-6,
                    "case {case} row {i}: {got} vs {want}"
                );
            }
        }
    }
    Ok("100 matrices incl. dim=1 and single-record files; ids exact, vectors within 1e-6".into())
}

/// Counts concurrent calls and answers like the mock.
struct Counting {
    mock: MockProvider,
    now: AtomicUsize,
    peak: AtomicUsize,
}

#[async_trait]
impl LlmProvider for Counting {
    fn name(&self) -> &str {
        "counting"
    }

    async fn complete(&self, req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
        let inflight = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(inflight, Ordering::SeqCst);
        tokio::time::sleep(Duration::from_micros(200)).await;
        self.now.fetch_sub(1, Ordering::SeqCst);
        Ok(ProviderReply::text(self.mock.reply_for(req.role, &req.prompt)))
    }
}

/// Fails the first `fail_first` calls with `error`, then answers.
struct Faulty {
    calls: AtomicUsize,
    fail_first: usize,
    error: ProviderError,
    delay: Duration,
}

#[async_trait]
impl LlmProvider for Faulty {
    fn name(&self) -> &str {
        "faulty"
    }

    async fn complete(&self, _: &LlmRequest) -> Result<ProviderReply, ProviderError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        tokio::time::sleep(self.delay).await;
        if n < self.fail_first {
            Err(self.error.clone())
        } else {
            Ok(ProviderReply::text("ok"))
        }
    }
}

fn faulty(fail_first: usize, error: ProviderError) -> Arc<Faulty> {
    Arc::new(Faulty {
        calls: AtomicUsize::new(0),
        fail_first,
        error,
        delay: Duration::ZERO,
    })
}

fn gateway_faults(rt: &Runtime) -> Result<String, String> {
    rt.block_on(async {
        let counting = Arc::new(Counting {
            mock: MockProvider::new(1),
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Arc::new(Gateway::builder().fallback(counting.clone()).concurrency_bound(4).build());
        let calls = (0..1000).map(|i| {
            let gw = Arc::clone(&gw);
            tokio::spawn(async move {
                let role = Role::ALL[i % Role::ALL.len()];
                gw.complete(&LlmRequest::new(role, format!("<mod>request {i}</mod>"))).await
            })
        });
        let results = futures::future::join_all(calls).await;
        let ok = results.into_iter().filter(|r| matches!(r, Ok(Ok(_)))).count();
        let peak = counting.peak.load(Ordering::SeqCst);
        ensure!(ok == 1000, "{ok} of 1000 requests succeeded");
        ensure!(peak <= 4, "peak in-flight {peak} exceeds bound 4");

        let policy = RetryPolicy {
            retries: 3,
            base_backoff: Duration::from_millis(20),
            max_backoff: Duration::from_millis(30),
        };
        let req = LlmRequest::new(Role::DeJudge, "x");

        // Two transient failures: waits of 20 ms and 30 ms (capped), then success.
        let p = faulty(2, ProviderError::Transient("503".into()));
        let gw = Gateway::builder().fallback(p.clone()).retry(policy).build();
        let t = Instant::now();
        let reply = gw.complete(&req).await.map_err(|e| e.to_string())?;
        let waited = t.elapsed();
        ensure!(reply.attempts == 3, "{} attempts after two transient failures", reply.attempts);
        ensure!(waited >= Duration::from_millis(50), "backoff slept only {waited:?}");

        let p = faulty(usize::MAX, ProviderError::RateLimited("429".into()));
        let gw = Gateway::builder().fallback(p.clone()).retry(policy).build();
        let err = gw.complete(&req).await.unwrap_err();
        ensure!(matches!(err, LlmError::Exhausted { attempts: 4, .. }), "persistent 429: {err}");
        ensure!(p.calls.load(Ordering::SeqCst) == 4, "persistent 429 made {} calls", p.calls.load(Ordering::SeqCst));

        let p = faulty(usize::MAX, ProviderError::Auth("401".into()));
        let gw = Gateway::builder().fallback(p.clone()).retry(policy).build();
        let err = gw.complete(&req).await.unwrap_err();
        ensure!(matches!(err, LlmError::Auth { .. }) && p.calls.load(Ordering::SeqCst) == 1, "auth error retried: {err}");

        let slow = Arc::new(Faulty {
            calls: AtomicUsize::new(0),
            fail_first: 0,
            error: ProviderError::Timeout,
            delay: Duration::from_millis(200),
        });
        let gw = Gateway::builder()
            .fallback(slow.clone())
            .retry(RetryPolicy { retries: 1, ..policy })
            .timeout(Duration::from_millis(10))
            .build();
        let err = gw.complete(&req).await.unwrap_err();
        ensure!(matches!(err, LlmError::Timeout { attempts: 2, .. }), "slow provider: {err}");

        // A request sleeping in backoff does not hold the only permit.
        let long = RetryPolicy {
            retries: 1,
            base_backoff: Duration::from_millis(300),
            max_backoff: Duration::from_millis(300),
        };
        let flaky = faulty(1, ProviderError::Transient("503".into()));
        let gw = Arc::new(
            Gateway::builder()
                .provider(Role::DeJudge, flaky)
                .fallback(faulty(0, ProviderError::Timeout))
                .concurrency_bound(1)
                .retry(long)
                .build(),
        );
        let backing_off = {
            let gw = Arc::clone(&gw);
            tokio::spawn(async move { gw.complete(&LlmRequest::new(Role::DeJudge, "x")).await })
        };
        tokio::time::sleep(Duration::from_millis(50)).await;
        let t = Instant::now();
        gw.complete(&LlmRequest::new(Role::SiWorker, "y")).await.map_err(|e| e.to_string())?;
        let other = t.elapsed();
        ensure!(other < Duration::from_millis(200), "second request waited {other:?} behind a backoff");
        let first = backing_off.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
        ensure!(first.attempts == 2, "backing-off request took {} attempts", first.attempts);

        Ok(format!(
            "1000 requests, peak in-flight {peak}/4; transient x2 -> 3 attempts after {}ms; 429 exhausts at 4; auth not retried; timeouts counted; backoff releases the permit",
            waited.as_millis()
        ))
    })
}

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic/engine.json")
}

fn mock_end_to_end(_: &Runtime) -> Result<String, String> {
    let dir = tempdir()?;
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("report-{run}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_deliberank"))
            .args(["run", "--mock", "--config"])
            .arg(fixture_config())
            .arg("--out")
            .arg(&out)
            // Any network attempt would fail and surface as failed queries.
            .env("HTTP_PROXY", "http://127.0.0.1:9")
            .env("HTTPS_PROXY", "http://127.0.0.1:9")
            .env("ALL_PROXY", "http://127.0.0.1:9")
            .output()
            .map_err(|e| format!("spawn: {e}"))?;
        ensure!(
            status.status.code() == Some(0),
            "exit {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        );
        bytes.push(std::fs::read(&out).map_err(|e| format!("{}: {e}", out.display()))?);
    }
    ensure!(bytes[0] == bytes[1], "reports differ between identical runs");
    let report: RunReport = serde_json::from_slice(&bytes[0]).map_err(|e| format!("report is not valid: {e}"))?;
    let agg = &report.aggregates;
    ensure!(
        agg.n_queries == report.queries.len() && agg.n_queries > 0,
        "query count mismatch"
    );
    ensure!(agg.n_failed == 0, "{} failed queries", agg.n_failed);
    for a in [&report.aggregates, &report.fused_aggregates] {
        let values = a.recall.iter().chain(&a.map).map(|x| x.value);
        ensure!(
            values.clone().all(|v| (0.0..=100.0).contains(&v)),
            "aggregate out of [0, 100]"
        );
        let ks: Vec<usize> = a.recall.iter().map(|x| x.k).collect();
        ensure!(
            ks == RECALL_KS && a.map.iter().map(|x| x.k).eq(MAP_KS),
            "unexpected cutoffs"
        );
        ensure!(
            a.recall.windows(2).all(|w| w[0].value <= w[1].value),
            "recall not monotone in k"
        );
    }
    let mut total = 0u64;
    for q in &report.queries {
        let decisions: u64 = q.decisions.iter().map(|d| d.tokens_out).sum();
        ensure!(
            q.deliberation_tokens_out == decisions,
            "{}: deliberation tokens not additive",
            q.query_id
        );
        ensure!(
            q.tokens_out >= q.deliberation_tokens_out,
            "{}: total below deliberation share",
            q.query_id
        );
        total += q.tokens_out;
    }
    ensure!(
        total == agg.total_tokens_out,
        "token total {} vs per-query sum {total}",
        agg.total_tokens_out
    );
    let mean = total as f64 / agg.n_queries as f64;
    ensure!(
        (agg.mean_tokens_out - mean).abs() < 1e-9,
        "mean tokens {} vs {mean}",
        agg.mean_tokens_out
    );
    Ok(format!(
        "exit 0, {} queries, R@1 {:.2}, mAP@5 {:.2}, {total} output tokens, byte-identical reruns",
        agg.n_queries,
        agg.recall(1).unwrap_or(0.0),
        agg.map(5).unwrap_or(0.0)
    ))
}

fn tempdir() -> Result<PathBuf, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    Ok(dir.keep())
}
