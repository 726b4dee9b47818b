//! Ground-truth-aware providers for harness runs on the synthetic benchmark.
//!
//! They answer the judge and router roles from the construction and defer
//! every other role to a [`MockProvider`]. Nothing in the engine
//! configuration can select them; only the harness and the CLI `--oracle`
//! tier build them.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synthetic::Intent;
use crate::domain::ImageId;
use crate::llm::{
    stable_seed, Gateway, GatewayBuilder, LlmProvider, LlmRequest, MockProvider, ProviderError, ProviderReply, Role,
};
use crate::prompts::markup;

/// Page size at which the configured error rate is defined.
pub const REFERENCE_PAGE: f64 = 25.0;

/// Judge that knows every query's targets, optionally fallible.
///
/// The fallible judge reads a page in order. Every non-target it reads
/// before settling misleads it with probability
/// `δ = 1 - (1 - ε)^(1 / REFERENCE_PAGE)`, so a target-free page of
/// reference size yields a false pick with probability exactly `ε`, and a
/// target placed early on a page is judged more reliably than a late one.
/// Draws are keyed by query, page and rollout, so runs are repeatable.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    targets: HashMap<String, BTreeSet<ImageId>>,
    error_rate: f64,
    seed: u64,
}

impl OracleJudge {
    pub fn new(targets: HashMap<String, BTreeSet<ImageId>>) -> Self {
        Self {
            targets,
            error_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_error(mut self, error_rate: f64, seed: u64) -> Self {
        self.error_rate = error_rate.clamp(0.0, 1.0);
        self.seed = seed;
        self
    }

    /// Chance that one non-target misleads the judge.
    pub fn per_candidate_error(&self) -> f64 {
        1.0 - (1.0 - self.error_rate).powf(1.0 / REFERENCE_PAGE)
    }

    /// False-pick probability on a page of `page_len` non-targets.
    pub fn page_error_rate(&self, page_len: usize) -> f64 {
        1.0 - (1.0 - self.error_rate).powf(page_len as f64 / REFERENCE_PAGE)
    }

    pub fn reply_for(&self, prompt: &str) -> String {
        let query = markup::query_id(prompt).unwrap_or_default();
        let page = markup::page_index(prompt).unwrap_or(0);
        let rollout = markup::attribute(prompt, "rollout", "index").unwrap_or_default();
        let cands = markup::candidates(prompt);
        let pick_many = markup::element(prompt, "mode").is_some_and(|m| m.contains("pick_many"));
        let empty = BTreeSet::new();
        let targets = self.targets.get(&query).unwrap_or(&empty);
        let is_target = |id: &str| ImageId::new(id).map(|i| targets.contains(&i)).unwrap_or(false);

        let delta = self.per_candidate_error();
        let mut rng = ChaCha8Rng::from_seed(stable_seed(&[
            &self.seed.to_le_bytes(),
            b"judge",
            query.as_bytes(),
            &(page as u64).to_le_bytes(),
            rollout.as_bytes(),
        ]));
        let mut misled = |_: &str| delta > 0.0 && rng.random_bool(delta);

        let mut selected: Vec<&str> = Vec::new();
        if pick_many {
            for c in &cands {
                if is_target(&c.id) || misled(&c.id) {
                    selected.push(&c.id);
                }
            }
        } else {
            // A leading target was already verified on an earlier page.
            let lead = cands.iter().find(|c| c.leading && is_target(&c.id));
            if let Some(c) = lead {
                selected.push(&c.id);
            } else {
                for c in &cands {
                    if is_target(&c.id) || misled(&c.id) {
                        selected.push(&c.id);
                        break;
                    }
                }
            }
        }

        let mut rationale = String::new();
        for c in &cands {
            let verdict = if selected.contains(&c.id.as_str()) {
                "satisfies the query"
            } else {
                "rejected"
            };
            rationale.push_str(&format!("{} {verdict}; ", c.id));
        }
        serde_json::json!({
            "selected": selected,
            "next_page": selected.is_empty(),
            "rationale": rationale.trim_end(),
        })
        .to_string()
    }
}

/// Weights the construction says each intent needs.
pub fn intent_weights(intent: Option<Intent>) -> [f64; 3] {
    match intent {
        Some(Intent::Holistic) => [0.8, 0.1, 0.1],
        Some(Intent::Explicit) => [0.6, 0.3, 0.1],
        Some(Intent::Visual) => [0.6, 0.1, 0.3],
        None => [1.0 / 3.0; 3],
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleRouter;

impl OracleRouter {
    pub fn reply_for(&self, prompt: &str) -> String {
        let mod_text = markup::element(prompt, "mod").unwrap_or("");
        let w = intent_weights(Intent::of_mod_text(mod_text));
        serde_json::json!({ "weights": w }).to_string()
    }
}

/// Oracle judge and router; every other role goes to the mock.
pub struct OracleProvider {
    judge: OracleJudge,
    router: OracleRouter,
    mock: MockProvider,
}

impl OracleProvider {
    pub fn new(judge: OracleJudge, mock: MockProvider) -> Self {
        Self {
            judge,
            router: OracleRouter,
            mock,
        }
    }
}

#[async_trait]
impl LlmProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    async fn complete(&self, req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
        let text = match req.role {
            Role::DeJudge => self.judge.reply_for(&req.prompt),
            Role::IrRouter => self.router.reply_for(&req.prompt),
            role => self.mock.reply_for(role, &req.prompt),
        };
        Ok(ProviderReply::text(text))
    }
}

/// Gateway builder with the oracle on every role.
pub fn oracle_gateway(judge: OracleJudge, mock_seed: u64) -> GatewayBuilder {
    let provider: Arc<dyn LlmProvider> = Arc::new(OracleProvider::new(judge, MockProvider::new(mock_seed)));
    Gateway::builder().fallback(provider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{parse_structured, SchemaKind, Structured};

    fn judge() -> OracleJudge {
        let t = BTreeSet::from([ImageId::new("t1").unwrap(), ImageId::new("t2").unwrap()]);
        OracleJudge::new(HashMap::from([("q".to_string(), t)]))
    }

    fn page(ids: &[&str], leading: Option<&str>, mode: &str) -> String {
        let mut s = markup::query_block("q", "r", "m", None);
        s.push_str(&markup::page_header(0, 2));
        for (n, id) in ids.iter().enumerate() {
            s.push_str(&markup::candidate(id, n + 1, Some(*id) == leading, "p"));
        }
        s.push_str(&format!("<mode>{mode}</mode>"));
        s
    }

    fn decide(j: &OracleJudge, prompt: &str) -> (Vec<String>, bool) {
        match parse_structured(&j.reply_for(prompt), SchemaKind::PageDecision).unwrap() {
            Structured::Decision {
                selected, next_page, ..
            } => (selected, next_page),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_judge_contract() {
        let j = judge();
        assert_eq!(
            decide(&j, &page(&["a", "t2", "t1"], None, "pick_one")),
            (vec!["t2".to_string()], false)
        );
        assert_eq!(decide(&j, &page(&["t1", "a", "t2"], Some("t2"), "pick_one")).0, ["t2"]);
        assert_eq!(decide(&j, &page(&["t2", "a", "t1"], None, "pick_many")).0, ["t2", "t1"]);
        assert_eq!(decide(&j, &page(&["a", "b"], None, "pick_one")), (vec![], true));
    }

    #[test]
    fn fallible_judge_is_calibrated_per_page() {
        let j = judge().with_error(0.15, 7);
        let decoys: Vec<String> = (0..25).map(|i| format!("x{i}")).collect();
        let n = 4000;
        let mut false_picks = 0;
        let mut early_wrong = 0;
        for i in 0..n {
            let mut s = markup::query_block("q", "r", "m", None);
            s.push_str(&markup::page_header(i, n));
            for (k, id) in decoys.iter().enumerate() {
                s.push_str(&markup::candidate(id, k + 1, false, "p"));
            }
            s.push_str("<mode>pick_one</mode>");
            if !decide(&j, &s).0.is_empty() {
                false_picks += 1;
            }
            let early =
                page(&["x0", "t1", "x1", "x2"], None, "pick_one").replace("index=\"0\"", &format!("index=\"{i}\""));
            if decide(&j, &early).0 != ["t1"] {
                early_wrong += 1;
            }
        }
        let rate = false_picks as f64 / n as f64;
        assert!((rate - 0.15).abs() < 0.025, "{rate}");
        // One decoy read before the target.
        let early = early_wrong as f64 / n as f64;
        assert!((early - j.per_candidate_error()).abs() < 0.01, "{early}");
        assert!((j.page_error_rate(50) - (1.0 - 0.85f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn leading_target_is_kept() {
        let j = judge().with_error(0.9, 1);
        assert_eq!(decide(&j, &page(&["t1", "a", "b"], Some("t1"), "pick_one")).0, ["t1"]);
    }

    #[test]
    fn router_reads_intent_phrasing() {
        let r = OracleRouter;
        let w = |m: &str| match parse_structured(&r.reply_for(&format!("<mod>{m}</mod>")), SchemaKind::Weights).unwrap()
        {
            Structured::Weights(w) => w,
            other => panic!("{other:?}"),
        };
        assert_eq!(w("keep the same look but make it red"), [0.6, 0.1, 0.3]);
        assert_eq!(w("it must be red and round"), [0.6, 0.3, 0.1]);
        assert_eq!(w("change it so it is red"), [0.8, 0.1, 0.1]);
    }
}
