use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerItem, ExperienceError, Paradigm};
use crate::domain::{ComposedQuery, ImageId};
use crate::proxies::ProxyStore;
use crate::router::CandidateBuffer;

/// Discrete attribute values per image, for near-duplicate search.
pub type AttributeTable = HashMap<ImageId, Vec<u16>>;

pub fn hamming(a: &[u16], b: &[u16]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

/// A judging exercise with a known answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxInstance {
    pub query_id: String,
    pub ref_proxy: String,
    pub mod_text: String,
    pub target_hypothesis: String,
    pub candidates: Vec<(ImageId, String)>,
    pub answer_set: BTreeSet<AnswerItem>,
    pub paradigm: Paradigm,
}

/// Labeled queries with their fused buffers.
pub struct SandboxSource<'a> {
    pub queries: &'a [ComposedQuery],
    pub buffers: &'a HashMap<String, CandidateBuffer>,
    pub proxies: &'a ProxyStore,
    /// Imagined target descriptions by query id; missing ones are replaced by
    /// `"<ref proxy>; <mod text>"`.
    pub hypotheses: &'a HashMap<String, String>,
    pub attributes: Option<&'a AttributeTable>,
}

struct Prepared<'a> {
    query: &'a ComposedQuery,
    target: &'a ImageId,
    ref_proxy: &'a str,
    /// Buffer ids that are not targets and have a proxy.
    negatives: Vec<ImageId>,
}

impl SandboxSource<'_> {
    fn prepared(&self) -> Vec<Prepared<'_>> {
        self.queries
            .iter()
            .filter_map(|q| {
                let target = q.ground_truth.iter().find(|t| self.proxies.get(t).is_some())?;
                let buffer = self.buffers.get(&q.query_id)?;
                let ref_proxy = self.proxies.text(&q.ref_image)?;
                let negatives = buffer
                    .ids()
                    .into_iter()
                    .filter(|id| !q.ground_truth.contains(id) && self.proxies.get(id).is_some())
                    .collect();
                Some(Prepared {
                    query: q,
                    target,
                    ref_proxy,
                    negatives,
                })
            })
            .collect()
    }

    fn near_duplicates(&self, p: &Prepared<'_>) -> Vec<ImageId> {
        let Some(table) = self.attributes else {
            return Vec::new();
        };
        let Some(target_attrs) = table.get(p.target) else {
            return Vec::new();
        };
        let mut out: Vec<ImageId> = table
            .iter()
            .filter(|(id, attrs)| {
                hamming(attrs, target_attrs) == 1
                    && !p.query.ground_truth.contains(*id)
                    && self.proxies.get(id).is_some()
            })
            .map(|(id, _)| id.clone())
            .collect();
        out.sort();
        out
    }

    fn instance(
        &self,
        p: &Prepared<'_>,
        ids: Vec<ImageId>,
        answer: BTreeSet<AnswerItem>,
        paradigm: Paradigm,
    ) -> SandboxInstance {
        let candidates = ids
            .into_iter()
            .map(|id| {
                let text = self.proxies.text(&id).expect("filtered for proxies").to_string();
                (id, text)
            })
            .collect();
        let target_hypothesis = self
            .hypotheses
            .get(&p.query.query_id)
            .cloned()
            .unwrap_or_else(|| format!("{}; {}", p.ref_proxy, p.query.mod_text));
        SandboxInstance {
            query_id: p.query.query_id.clone(),
            ref_proxy: p.ref_proxy.to_string(),
            mod_text: p.query.mod_text.clone(),
            target_hypothesis,
            candidates,
            answer_set: answer,
            paradigm,
        }
    }
}

/// Draws `count` instances of one paradigm from randomly chosen queries.
///
/// * intra-page truth: the leading `page_size - 1` non-target buffer entries
///   with the target inserted at a uniform position;
/// * cross-page rejection: a contiguous window of non-target buffer entries,
///   answer `NEXT_PAGE`;
/// * counterfactual defense: the target, every near duplicate (one differing
///   attribute) and non-target buffer entries, shuffled. Needs at least three
///   near duplicates.
pub fn build_sandbox<R: Rng + ?Sized>(
    source: &SandboxSource<'_>,
    paradigm: Paradigm,
    count: usize,
    page_size: usize,
    rng: &mut R,
) -> Result<Vec<SandboxInstance>, ExperienceError> {
    let insufficient = ExperienceError::InsufficientCandidates { paradigm, page_size };
    if page_size < 2 {
        return Err(insufficient);
    }
    let prepared = source.prepared();
    let eligible: Vec<(&Prepared<'_>, Vec<ImageId>)> = prepared
        .iter()
        .filter_map(|p| {
            match paradigm {
                Paradigm::IntraPageTruth => (p.negatives.len() >= page_size - 1).then(Vec::new),
                Paradigm::CrossPageRejection => (p.negatives.len() >= page_size).then(Vec::new),
                Paradigm::CounterfactualDefense => {
                    let near = source.near_duplicates(p);
                    (near.len() >= 3 && p.negatives.len() >= page_size - 1).then_some(near)
                }
            }
            .map(|near| (p, near))
        })
        .collect();
    if eligible.is_empty() {
        return Err(insufficient);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, near) = &eligible[rng.random_range(0..eligible.len())];
        let target_answer = BTreeSet::from([AnswerItem::Image(p.target.clone())]);
        let instance = match paradigm {
            Paradigm::IntraPageTruth => {
                let mut ids: Vec<ImageId> = p.negatives[..page_size - 1].to_vec();
                ids.insert(rng.random_range(0..=ids.len()), p.target.clone());
                source.instance(p, ids, target_answer, paradigm)
            }
            Paradigm::CrossPageRejection => {
                let start = rng.random_range(0..=p.negatives.len() - page_size);
                let ids = p.negatives[start..start + page_size].to_vec();
                source.instance(p, ids, BTreeSet::from([AnswerItem::NextPage]), paradigm)
            }
            Paradigm::CounterfactualDefense => {
                let mut ids: Vec<ImageId> = vec![p.target.clone()];
                ids.extend(near.iter().take(page_size - 1).cloned());
                for n in &p.negatives {
                    if ids.len() >= page_size {
                        break;
                    }
                    if !ids.contains(n) {
                        ids.push(n.clone());
                    }
                }
                ids.shuffle(rng);
                source.instance(p, ids, target_answer, paradigm)
            }
        };
        out.push(instance);
    }
    Ok(out)
}
