use async_trait::async_trait;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{LlmProvider, LlmRequest, ProviderError, ProviderReply, Role};
use crate::prompts::markup;

/// 32-byte seed derived from arbitrary byte strings; stable across platforms
/// and toolchains.
pub fn stable_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "it", "its", "is", "be", "to", "of", "and", "or", "but", "with", "in", "on", "make", "change",
    "keep", "same", "look", "show", "should", "have", "has", "into", "for", "this", "that", "so", "more", "less",
    "instead", "than", "image", "one",
];

pub(crate) const HEURISTIC_BANK: &[&str] = &[
    "Check every attribute named in the modification against each candidate before selecting it.",
    "Prefer the candidate that keeps the unchanged reference attributes intact.",
    "Reject candidates that satisfy the change but alter an attribute the instruction did not mention.",
    "When no candidate satisfies all stated constraints, answer next_page instead of the closest match.",
    "Do not favor a candidate because of its position on the page.",
    "Treat a leading candidate as a hypothesis to verify, not as the default answer.",
    "Compare near-duplicate candidates attribute by attribute; a single mismatch disqualifies.",
    "Resolve comparative words against the reference before judging the candidates.",
    "Ignore stylistic details the instruction does not constrain.",
    "Select several candidates only when each one independently satisfies the query.",
    "Re-read the modification for negations before accepting a candidate.",
    "Confirm the object category first, then the modified attributes.",
];

/// Deterministic stand-in for every role: the reply is a pure function of
/// `(seed, role, prompt)`.
#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    name: String,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            name: format!("mock-{seed}"),
        }
    }

    fn rng(&self, role: Role, prompt: &str) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(stable_seed(&[
            &self.seed.to_le_bytes(),
            role.as_str().as_bytes(),
            prompt.as_bytes(),
        ]))
    }

    pub fn reply_for(&self, role: Role, prompt: &str) -> String {
        let mut rng = self.rng(role, prompt);
        match role {
            Role::SiWorker => imagine(prompt),
            Role::CpWorker => constraints(prompt),
            Role::IrRouter => {
                let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                format!("{{\"weights\": [{:.4}, {:.4}, {:.4}]}}", w[0], w[1], w[2])
            }
            Role::DeJudge => judge(prompt, &mut rng),
            Role::Distiller => {
                let n = rng.random_range(1..=3);
                let picks = sample(&mut rng, HEURISTIC_BANK.len(), n);
                let list: Vec<&str> = picks.iter().map(|i| HEURISTIC_BANK[i]).collect();
                serde_json::json!({ "heuristics": list }).to_string()
            }
            Role::LogicJudge => format!("{{\"score\": {:.3}}}", rng.random_range(0.0..=1.0)),
        }
    }
}

fn imagine(prompt: &str) -> String {
    match (markup::element(prompt, "ref"), markup::element(prompt, "mod")) {
        (Some(r), Some(m)) => format!("{}; {}", r.trim(), m.trim()),
        _ => String::new(),
    }
}

fn constraints(prompt: &str) -> String {
    let text = markup::element(prompt, "mod").unwrap_or("");
    let mut pairs = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric() && c != '-') {
        let w = word.to_lowercase();
        if w.len() < 3 || STOPWORDS.contains(&w.as_str()) {
            continue;
        }
        if pairs.len() == 16 {
            break;
        }
        pairs.push(serde_json::json!({ "object": w, "attribute": "" }));
    }
    serde_json::json!({ "pairs": pairs }).to_string()
}

fn judge(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let cands = markup::candidates(prompt);
    let pick_many = markup::element(prompt, "mode").is_some_and(|m| m.contains("pick_many"));
    let mut rationale = format!("Checked {} candidates against the query.", cands.len());
    for c in &cands {
        rationale.push_str(&format!(" {} partial match;", c.id));
    }
    let selected: Vec<&str> = if cands.is_empty() || rng.random_bool(0.35) {
        Vec::new()
    } else {
        let n = if pick_many {
            rng.random_range(1..=2.min(cands.len()))
        } else {
            1
        };
        sample(rng, cands.len(), n)
            .into_iter()
            .map(|i| cands[i].id.as_str())
            .collect()
    };
    serde_json::json!({
        "selected": selected,
        "next_page": selected.is_empty(),
        "rationale": rationale,
    })
    .to_string()
}

#[async_trait]
impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
        Ok(ProviderReply::text(self.reply_for(req.role, &req.prompt)))
    }
}
