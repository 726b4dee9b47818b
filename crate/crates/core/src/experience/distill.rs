use std::collections::BTreeSet;
use std::path::Path;

use futures::future::join_all;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{
    build_sandbox, AnswerItem, CandidateExperience, ExperienceError, ExperienceLibrary, Paradigm, SandboxInstance,
    SandboxSource,
};
use crate::deliberation::{render_experience, render_page_prompt, Page, PickMode, QueryView};
use crate::llm::{stable_seed, LlmRequest, LlmSession, Role, SchemaKind, Structured};
use crate::prompts::{markup, PromptSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub rounds: usize,
    /// Rollouts per instance.
    pub rollouts: usize,
    /// Weight of the reasoning score in the reward.
    pub lambda: f64,
    /// Sampling weights for intra-page, cross-page and counterfactual pages.
    pub paradigm_mix: [f64; 3],
    pub instances_per_round: usize,
    pub page_size: usize,
    pub rollout_temperature: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            rollouts: 4,
            lambda: 0.2,
            paradigm_mix: [0.4, 0.3, 0.3],
            instances_per_round: 4,
            page_size: 25,
            rollout_temperature: 0.7,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), ExperienceError> {
        let bad = |m: String| Err(ExperienceError::Config(m));
        if self.rollouts < 2 {
            return bad(format!("rollouts must be >= 2, got {}", self.rollouts));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.paradigm_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.paradigm_mix.iter().sum::<f64>() <= 0.0
        {
            return bad(format!("paradigm_mix {:?} has no positive weight", self.paradigm_mix));
        }
        if self.page_size < 2 {
            return bad(format!("page_size must be >= 2, got {}", self.page_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub answer_reward: f64,
    pub logical_score: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub think: String,
    pub answer: BTreeSet<AnswerItem>,
    pub reward: RewardParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub instances: usize,
    pub mean_reward: f64,
    pub mean_logical_score: f64,
    pub library_size: usize,
    pub library_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub library: ExperienceLibrary,
    pub log: Vec<RoundLog>,
}

/// F1 between two answer sets; two empty sets score 1.
pub fn set_f1(answer: &BTreeSet<AnswerItem>, truth: &BTreeSet<AnswerItem>) -> f64 {
    if answer.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let hit = answer.intersection(truth).count() as f64;
    2.0 * hit / (answer.len() + truth.len()) as f64
}

/// Answer agreement plus `lambda` times the logic judge's score of `think`.
/// A failed or unusable judgement contributes 0.
pub async fn reward_rollout(
    answer: &BTreeSet<AnswerItem>,
    answer_set: &BTreeSet<AnswerItem>,
    think: &str,
    lambda: f64,
    session: &LlmSession,
    prompts: &PromptSet,
) -> Result<RewardParts, ExperienceError> {
    let answer_reward = set_f1(answer, answer_set);
    let logical_score = if lambda == 0.0 {
        0.0
    } else {
        let think_text = if think.trim().is_empty() { "(empty)" } else { think };
        let prompt = prompts.logic_judge.render(&[("think", think_text)])?;
        match session
            .complete_structured(&LlmRequest::new(Role::LogicJudge, prompt), SchemaKind::Score)
            .await
        {
            Ok(out) => match out.value {
                Ok(Structured::Score(s)) => s.clamp(0.0, 1.0),
                _ => {
                    warn!("logic judge reply unusable, scoring 0");
                    0.0
                }
            },
            Err(e) => {
                warn!(error = %e, "logic judge failed, scoring 0");
                0.0
            }
        }
    };
    Ok(RewardParts {
        answer_reward,
        logical_score,
        total: answer_reward + lambda * logical_score,
    })
}

fn instance_view(instance: &SandboxInstance) -> QueryView<'_> {
    QueryView {
        query_id: &instance.query_id,
        ref_proxy: &instance.ref_proxy,
        mod_text: &instance.mod_text,
        hypothesis: Some(&instance.target_hypothesis),
    }
}

fn instance_page(instance: &SandboxInstance) -> Page<'_> {
    Page {
        index: 0,
        of: 1,
        candidates: instance.candidates.iter().map(|(id, t)| (id, t.as_str())).collect(),
        leading: None,
    }
}

/// One judged attempt at a sandbox page. The rollout index goes into the
/// prompt so repeated attempts are distinct requests.
pub async fn rollout(
    instance: &SandboxInstance,
    index: usize,
    library: &ExperienceLibrary,
    cfg: &DistillConfig,
    session: &LlmSession,
    prompts: &PromptSet,
) -> Result<Rollout, ExperienceError> {
    let multi = instance.answer_set.len() > 1;
    let mode = if multi { PickMode::PickMany } else { PickMode::PickOne };
    let experience = render_experience(library, crate::deliberation::DEFAULT_EXPERIENCE_IN_PROMPT);
    let mut prompt = render_page_prompt(
        prompts,
        &instance_view(instance),
        &instance_page(instance),
        &experience,
        mode,
    )?;
    prompt.push('\n');
    prompt.push_str(&markup::rollout(index));
    let req = LlmRequest::new(Role::DeJudge, prompt).with_temperature(cfg.rollout_temperature);
    let out = session.complete_structured(&req, SchemaKind::PageDecision).await?;
    let (answer, think) = match out.value {
        Ok(Structured::Decision {
            selected, rationale, ..
        }) => {
            let mut answer: BTreeSet<AnswerItem> = selected
                .iter()
                .filter_map(|s| instance.candidates.iter().find(|(id, _)| id.as_str() == s.trim()))
                .map(|(id, _)| AnswerItem::Image(id.clone()))
                .collect();
            if answer.is_empty() {
                answer.insert(AnswerItem::NextPage);
            }
            if mode == PickMode::PickOne && answer.len() > 1 {
                let first = answer.iter().next().cloned().expect("non-empty");
                answer = BTreeSet::from([first]);
            }
            (answer, rationale)
        }
        _ => (BTreeSet::new(), String::new()),
    };
    let reward = reward_rollout(&answer, &instance.answer_set, &think, cfg.lambda, session, prompts).await?;
    Ok(Rollout { think, answer, reward })
}

fn describe_rollout(r: &Rollout) -> String {
    let answer: Vec<String> = r.answer.iter().map(|a| a.to_string()).collect();
    format!(
        "Answer: [{}]\nReward: {:.3}\nReasoning: {}",
        answer.join(", "),
        r.reward.total,
        if r.think.is_empty() { "(none)" } else { &r.think }
    )
}

fn describe_instance(instance: &SandboxInstance) -> String {
    let view = instance_view(instance);
    let mut s = markup::query_block(view.query_id, view.ref_proxy, view.mod_text, view.hypothesis);
    for (n, (id, text)) in instance.candidates.iter().enumerate() {
        s.push('\n');
        s.push_str(&markup::candidate(id.as_str(), n + 1, false, &markup::escape(text)));
    }
    let answer: Vec<String> = instance.answer_set.iter().map(|a| a.to_string()).collect();
    s.push_str(&format!("\nCorrect answer: [{}]", answer.join(", ")));
    s
}

/// Asks the distiller to contrast the best and worst rollout. Each returned
/// heuristic is scored by the reward gap over `1 + lambda`, clamped to
/// `[0, 1]`. Any failure yields no heuristics.
pub async fn distill(
    instance: &SandboxInstance,
    rollouts: &[Rollout],
    library: &ExperienceLibrary,
    lambda: f64,
    session: &LlmSession,
    prompts: &PromptSet,
) -> Vec<CandidateExperience> {
    if rollouts.len() < 2 {
        return Vec::new();
    }
    let mut best = &rollouts[0];
    let mut worst = &rollouts[0];
    for r in &rollouts[1..] {
        if r.reward.total > best.reward.total {
            best = r;
        }
        if r.reward.total < worst.reward.total {
            worst = r;
        }
    }
    let score = ((best.reward.total - worst.reward.total) / (1.0 + lambda)).clamp(0.0, 1.0);
    let library_text = render_experience(library, library.capacity);
    let prompt = match prompts.distiller.render(&[
        ("instance", &describe_instance(instance)),
        ("best", &describe_rollout(best)),
        ("worst", &describe_rollout(worst)),
        ("library", &library_text),
    ]) {
        Ok(p) => p,
        Err(e) => {
            warn!(error = %e, "distiller prompt failed to render");
            return Vec::new();
        }
    };
    match session
        .complete_structured(&LlmRequest::new(Role::Distiller, prompt), SchemaKind::Heuristics)
        .await
    {
        Ok(out) => match out.value {
            Ok(Structured::Heuristics(list)) => list
                .into_iter()
                .filter(|h| !h.trim().is_empty())
                .take(3)
                .map(|text| CandidateExperience {
                    text,
                    score,
                    paradigm: instance.paradigm,
                })
                .collect(),
            _ => {
                warn!("distiller reply unusable");
                Vec::new()
            }
        },
        Err(e) => {
            warn!(error = %e, "distiller failed");
            Vec::new()
        }
    }
}

fn persist(library: &ExperienceLibrary, path: Option<&Path>) -> Result<(), ExperienceError> {
    match path {
        Some(p) => library.save(p),
        None => Ok(()),
    }
}

fn sample_instance(
    source: &SandboxSource<'_>,
    paradigm: Paradigm,
    page_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SandboxInstance, ExperienceError> {
    match build_sandbox(source, paradigm, 1, page_size, rng) {
        Ok(mut v) => Ok(v.remove(0)),
        Err(ExperienceError::InsufficientCandidates { .. }) if paradigm != Paradigm::IntraPageTruth => {
            warn!(%paradigm, "no eligible query, sampling an intra-page instance instead");
            Ok(build_sandbox(source, Paradigm::IntraPageTruth, 1, page_size, rng)?.remove(0))
        }
        Err(e) => Err(e),
    }
}

/// `rounds` rounds of sample, roll out, reward, distill, update. The library
/// is persisted after every round, and also when a round aborts on a
/// provider failure.
pub async fn run_distillation(
    cfg: &DistillConfig,
    source: &SandboxSource<'_>,
    session: &LlmSession,
    prompts: &PromptSet,
    initial: ExperienceLibrary,
    persist_to: Option<&Path>,
) -> Result<DistillOutcome, ExperienceError> {
    cfg.validate()?;
    let mix = WeightedIndex::new(cfg.paradigm_mix).map_err(|e| ExperienceError::Config(e.to_string()))?;
    let mut library = initial;
    let mut log = Vec::with_capacity(cfg.rounds);
    persist(&library, persist_to)?;
    for round in 1..=cfg.rounds {
        let mut rng = ChaCha8Rng::from_seed(stable_seed(&[
            &cfg.seed.to_le_bytes(),
            b"distill-round",
            &(round as u64).to_le_bytes(),
        ]));
        let mut instances = Vec::with_capacity(cfg.instances_per_round);
        for _ in 0..cfg.instances_per_round {
            let paradigm = Paradigm::ALL[mix.sample(&mut rng)];
            instances.push(sample_instance(source, paradigm, cfg.page_size, &mut rng)?);
        }

        let mut candidates = Vec::new();
        let mut totals = Vec::new();
        let mut logical = Vec::new();
        for instance in &instances {
            let results =
                join_all((0..cfg.rollouts).map(|z| rollout(instance, z, &library, cfg, session, prompts))).await;
            let mut rollouts = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok(r) => rollouts.push(r),
                    Err(e) => {
                        persist(&library, persist_to)?;
                        return Err(ExperienceError::Aborted {
                            round,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            totals.extend(rollouts.iter().map(|r| r.reward.total));
            logical.extend(rollouts.iter().map(|r| r.reward.logical_score));
            candidates.extend(distill(instance, &rollouts, &library, cfg.lambda, session, prompts).await);
        }
        library = library.update(&candidates);
        persist(&library, persist_to)?;
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let entry = RoundLog {
            round,
            instances: instances.len(),
            mean_reward: mean(&totals),
            mean_logical_score: mean(&logical),
            library_size: library.len(),
            library_version: library.version,
        };
        info!(
            round,
            mean_reward = entry.mean_reward,
            library_size = entry.library_size,
            "distillation round finished"
        );
        log.push(entry);
    }
    Ok(DistillOutcome { library, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ImageId;
    use crate::llm::{Gateway, LlmProvider, MockProvider, ProviderError, ProviderReply};
    use async_trait::async_trait;
    use std::sync::Arc;

    fn set(items: &[&str]) -> BTreeSet<AnswerItem> {
        items.iter().map(|s| AnswerItem::from(s.to_string())).collect()
    }

    struct Score(f64);

    #[async_trait]
    impl LlmProvider for Score {
        fn name(&self) -> &str {
            "score"
        }
        async fn complete(&self, _req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
            Ok(ProviderReply::text(format!("{{\"score\": {}}}", self.0)))
        }
    }

    struct Down;

    #[async_trait]
    impl LlmProvider for Down {
        fn name(&self) -> &str {
            "down"
        }
        async fn complete(&self, _req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
            Err(ProviderError::Auth("no key".into()))
        }
    }

    fn session(p: Arc<dyn LlmProvider>) -> LlmSession {
        LlmSession::new(Arc::new(Gateway::builder().fallback(p).build()))
    }

    #[test]
    fn f1_cases() {
        assert_eq!(set_f1(&set(&["a"]), &set(&["a"])), 1.0);
        assert_eq!(set_f1(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(set_f1(&set(&["NEXT_PAGE"]), &set(&["NEXT_PAGE"])), 1.0);
        assert!((set_f1(&set(&["a", "b"]), &set(&["a"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(set_f1(&set(&[]), &set(&["a"])), 0.0);
    }

    #[tokio::test]
    async fn reward_arithmetic() {
        let p = PromptSet::default();
        let r = reward_rollout(&set(&["a"]), &set(&["a"]), "t", 0.2, &session(Arc::new(Score(0.5))), &p)
            .await
            .unwrap();
        assert!((r.total - 1.1).abs() < 1e-12);
        let r = reward_rollout(&set(&["b"]), &set(&["a"]), "t", 0.2, &session(Arc::new(Score(1.0))), &p)
            .await
            .unwrap();
        assert!((r.total - 0.2).abs() < 1e-12);
        let r = reward_rollout(&set(&["a"]), &set(&["a"]), "t", 0.2, &session(Arc::new(Down)), &p)
            .await
            .unwrap();
        assert_eq!(r.logical_score, 0.0);
        assert_eq!(r.total, 1.0);
    }

    fn instance() -> SandboxInstance {
        SandboxInstance {
            query_id: "q".into(),
            ref_proxy: "r".into(),
            mod_text: "m".into(),
            target_hypothesis: "h".into(),
            candidates: vec![
                (ImageId::new("a").unwrap(), "x".into()),
                (ImageId::new("b").unwrap(), "y".into()),
            ],
            answer_set: set(&["a"]),
            paradigm: Paradigm::IntraPageTruth,
        }
    }

    fn ro(total: f64) -> Rollout {
        Rollout {
            think: "t".into(),
            answer: set(&["a"]),
            reward: RewardParts {
                answer_reward: total,
                logical_score: 0.0,
                total,
            },
        }
    }

    #[tokio::test]
    async fn heuristic_score_is_normalized_gap() {
        let p = PromptSet::default();
        let s = session(Arc::new(MockProvider::new(2)));
        let lib = ExperienceLibrary::default();
        let items = distill(&instance(), &[ro(0.1), ro(1.1), ro(0.5)], &lib, 0.2, &s, &p).await;
        assert!(!items.is_empty() && items.len() <= 3);
        assert!(items.iter().all(|i| (i.score - 1.0 / 1.2).abs() < 1e-12));
        let flat = distill(&instance(), &[ro(0.5), ro(0.5)], &lib, 0.2, &s, &p).await;
        assert!(flat.iter().all(|i| i.score == 0.0));
        let down = distill(
            &instance(),
            &[ro(0.1), ro(1.1)],
            &lib,
            0.2,
            &session(Arc::new(Down)),
            &p,
        )
        .await;
        assert!(down.is_empty());
    }

    #[tokio::test]
    async fn zero_rounds_persist_empty_library() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        let queries = Vec::new();
        let buffers = Default::default();
        let proxies = Default::default();
        let hyps = Default::default();
        let src = SandboxSource {
            queries: &queries,
            buffers: &buffers,
            proxies: &proxies,
            hypotheses: &hyps,
            attributes: None,
        };
        let cfg = DistillConfig {
            rounds: 0,
            ..Default::default()
        };
        let out = run_distillation(
            &cfg,
            &src,
            &session(Arc::new(MockProvider::new(0))),
            &PromptSet::default(),
            ExperienceLibrary::default(),
            Some(&path),
        )
        .await
        .unwrap();
        assert!(out.log.is_empty());
        let saved = ExperienceLibrary::load(&path).unwrap();
        assert_eq!(saved.version, 0);
        assert!(saved.is_empty());
    }
}
