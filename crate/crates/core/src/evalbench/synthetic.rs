//! Attribute-world benchmark with a known answer for every query.
//!
//! Each gallery item is a tuple of discrete attribute values plus a latent
//! style class that captions never mention. Image embeddings are the
//! normalized one-hot encoding of (attributes, style) plus Gaussian noise.
//! Captions list the attribute words; the text embedder reads those words
//! back into the same one-hot space (style dims stay zero), so text and
//! image vectors are directly comparable.
//!
//! Queries come in three intents, each phrased in a recognizable way:
//!
//! * holistic: one or two attributes change (`"change it so it is red"`);
//! * explicit: all but one attribute change and every new value is listed
//!   (`"it must be red, round and wooden"`);
//! * visual: one attribute changes and the style must be kept
//!   (`"keep the same look but make it red"`). Three distractors share the
//!   target's attributes but not its style.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use async_trait::async_trait;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::datasets::{Dataset, DatasetKind, Split, TripletRecord};
use crate::domain::{ComposedQuery, ImageId, ProxySource, SemanticProxy, DEFAULT_PROXY_MAX_CHARS};
use crate::embedder::{EmbedError, TextEmbedder};
use crate::embedstore::{write_embv1, EmbedStoreError, EmbeddingMatrix};
use crate::experience::AttributeTable;
use crate::proxies::{ProxyError, ProxyStore};

pub const VALUES_PER_ATTRIBUTE: usize = 8;
pub const STYLES: usize = 4;
const MAX_ATTRIBUTES: usize = 8;
const STYLE_WEIGHT: f32 = 1.0;
/// Weight a value keeps in text embeddings once a later mention replaces it.
pub const SUPERSEDED_WEIGHT: f32 = 0.5;
const PLACEMENT_RETRIES: usize = 200;
const NEAR_DUPLICATES: usize = 3;

const ATTRIBUTES: [(&str, [&str; VALUES_PER_ATTRIBUTE]); MAX_ATTRIBUTES] = [
    (
        "color",
        ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"],
    ),
    (
        "shape",
        [
            "round",
            "square",
            "oval",
            "triangular",
            "hexagonal",
            "conical",
            "cubic",
            "spherical",
        ],
    ),
    (
        "material",
        [
            "wooden", "metallic", "glass", "plastic", "leather", "ceramic", "paper", "stone",
        ],
    ),
    (
        "size",
        [
            "tiny",
            "small",
            "medium",
            "large",
            "huge",
            "miniature",
            "giant",
            "compact",
        ],
    ),
    (
        "pattern",
        [
            "striped",
            "dotted",
            "checkered",
            "floral",
            "plaid",
            "plain",
            "zigzag",
            "paisley",
        ],
    ),
    (
        "texture",
        [
            "smooth", "rough", "glossy", "matte", "fuzzy", "bumpy", "silky", "grainy",
        ],
    ),
    (
        "lighting",
        [
            "sunlit",
            "shadowed",
            "backlit",
            "dim",
            "neon",
            "candlelit",
            "overcast",
            "studio",
        ],
    ),
    (
        "setting",
        [
            "beach",
            "forest",
            "kitchen",
            "street",
            "desert",
            "garden",
            "office",
            "snowfield",
        ],
    ),
];

const HOLISTIC_PREFIX: &str = "change it so it is";
const EXPLICIT_PREFIX: &str = "it must be";
const VISUAL_PREFIX: &str = "keep the same look but make it";

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("cannot place {what} uniquely after {retries} attempts")]
    Unsatisfiable { what: String, retries: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] EmbedStoreError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Holistic,
    Explicit,
    Visual,
}

impl Intent {
    pub const ALL: [Intent; 3] = [Intent::Holistic, Intent::Explicit, Intent::Visual];

    /// Recovers the intent from the phrasing of a generated modification text.
    pub fn of_mod_text(text: &str) -> Option<Intent> {
        let t = text.trim_start().to_lowercase();
        if t.starts_with(VISUAL_PREFIX) {
            Some(Intent::Visual)
        } else if t.starts_with(EXPLICIT_PREFIX) {
            Some(Intent::Explicit)
        } else if t.starts_with(HOLISTIC_PREFIX) {
            Some(Intent::Holistic)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_gallery: usize,
    pub n_queries: usize,
    pub n_attrs: usize,
    /// Standard deviation of the per-dimension Gaussian noise on image vectors.
    pub noise: f64,
    /// Relative frequency of holistic, explicit and visual queries.
    pub intent_mix: [f64; 3],
    /// Probability that a caption misstates one attribute value.
    pub caption_error: f64,
    /// Share of queries that get near-duplicate distractors of the target.
    pub near_duplicate_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gallery: 200,
            n_queries: 50,
            n_attrs: 4,
            noise: 0.05,
            intent_mix: [1.0, 0.0, 0.0],
            caption_error: 0.0,
            near_duplicate_share: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Config(m));
        if !(3..=MAX_ATTRIBUTES).contains(&self.n_attrs) {
            return bad(format!("n_attrs must be in 3..={MAX_ATTRIBUTES}, got {}", self.n_attrs));
        }
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1".into());
        }
        if self.n_gallery < self.n_queries {
            return bad(format!(
                "n_gallery ({}) must be >= n_queries ({})",
                self.n_gallery, self.n_queries
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.intent_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.intent_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!(
                "intent_mix must be non-negative with a positive sum, got {:?}",
                self.intent_mix
            ));
        }
        for (name, p) in [
            ("caption_error", self.caption_error),
            ("near_duplicate_share", self.near_duplicate_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub id: ImageId,
    pub attrs: Vec<u16>,
    pub style: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub ref_image: ImageId,
    pub target: ImageId,
    pub intent: Intent,
    pub mod_text: String,
    pub near_duplicates: bool,
}

/// Word-to-slot table shared by captions, modification texts and the text
/// embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub attributes: Vec<(String, Vec<String>)>,
}

impl Vocabulary {
    pub fn new(n_attrs: usize) -> Self {
        Self {
            attributes: ATTRIBUTES[..n_attrs]
                .iter()
                .map(|(name, values)| (name.to_string(), values.iter().map(|v| v.to_string()).collect()))
                .collect(),
        }
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn dim(&self) -> usize {
        self.n_attrs() * VALUES_PER_ATTRIBUTE + STYLES
    }

    pub fn word(&self, attr: usize, value: u16) -> &str {
        &self.attributes[attr].1[value as usize]
    }

    fn lookup(&self) -> HashMap<&str, (usize, u16)> {
        let mut out = HashMap::new();
        for (a, (_, values)) in self.attributes.iter().enumerate() {
            for (v, w) in values.iter().enumerate() {
                out.insert(w.as_str(), (a, v as u16));
            }
        }
        out
    }

    /// Attribute values named in `text`; a later mention of the same
    /// attribute overrides an earlier one.
    pub fn read(&self, text: &str) -> Vec<Option<u16>> {
        let lookup = self.lookup();
        let mut slots = vec![None; self.n_attrs()];
        for token in text.split(|c: char| !c.is_alphanumeric() && c != '-') {
            if let Some(&(a, v)) = lookup.get(token.to_lowercase().as_str()) {
                slots[a] = Some(v);
            }
        }
        slots
    }

    /// Weighted one-hot reading of `text`: the latest mention of each
    /// attribute has weight 1 and every value it replaced keeps
    /// [`SUPERSEDED_WEIGHT`].
    pub fn read_weighted(&self, text: &str) -> Vec<f32> {
        let lookup = self.lookup();
        let mut v = vec![0.0f32; self.dim()];
        let mut latest: Vec<Option<usize>> = vec![None; self.n_attrs()];
        for token in text.split(|c: char| !c.is_alphanumeric() && c != '-') {
            if let Some(&(a, value)) = lookup.get(token.to_lowercase().as_str()) {
                let slot = a * VALUES_PER_ATTRIBUTE + value as usize;
                if let Some(prev) = latest[a].filter(|p| *p != slot) {
                    v[prev] = v[prev].min(SUPERSEDED_WEIGHT);
                }
                v[slot] = 1.0;
                latest[a] = Some(slot);
            }
        }
        normalize(&mut v);
        v
    }

    fn encode(&self, attrs: &[Option<u16>], style: Option<u16>) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim()];
        for (a, value) in attrs.iter().enumerate() {
            if let Some(value) = value {
                v[a * VALUES_PER_ATTRIBUTE + *value as usize] = 1.0;
            }
        }
        if let Some(s) = style {
            v[self.n_attrs() * VALUES_PER_ATTRIBUTE + s as usize] = STYLE_WEIGHT;
        }
        normalize(&mut v);
        v
    }

    pub fn caption(&self, attrs: &[u16]) -> String {
        let words: Vec<&str> = attrs.iter().enumerate().map(|(a, v)| self.word(a, *v)).collect();
        let (last, init) = words.split_last().expect("at least three attributes");
        format!("an object that is {} and {last}", init.join(", "))
    }
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn listing(words: &[&str]) -> String {
    match words {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Embeds text by reading attribute words back into the one-hot space,
/// keeping superseded values at reduced weight.
#[derive(Debug, Clone)]
pub struct SyntheticTextEmbedder {
    vocabulary: Vocabulary,
}

impl SyntheticTextEmbedder {
    pub fn new(vocabulary: Vocabulary) -> Self {
        Self { vocabulary }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        self.vocabulary.read_weighted(text)
    }
}

#[async_trait]
impl TextEmbedder for SyntheticTextEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Generated benchmark: metadata plus the derived artifacts.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub vocabulary: Vocabulary,
    pub items: Vec<SyntheticItem>,
    pub queries: Vec<SyntheticQuery>,
    pub proxies: ProxyStore,
    pub embeddings: EmbeddingMatrix,
}

/// The metadata file; everything else is regenerated from it.
#[derive(Serialize, Deserialize)]
struct Metadata {
    config: SyntheticConfig,
    vocabulary: Vocabulary,
    items: Vec<SyntheticItem>,
    queries: Vec<SyntheticQuery>,
}

pub const METADATA_FILE: &str = "synthetic.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.embv1";
pub const PROXIES_FILE: &str = "proxies.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

struct Draft {
    attrs: Vec<u16>,
    style: u16,
}

struct World<'a> {
    rng: ChaCha8Rng,
    vocabulary: &'a Vocabulary,
    items: Vec<Draft>,
    /// How many items carry each attribute tuple.
    occupancy: HashMap<Vec<u16>, usize>,
    /// Tuples owned by a query target; nothing else may take them.
    reserved: HashSet<Vec<u16>>,
}

impl World<'_> {
    fn random_tuple(&mut self) -> Vec<u16> {
        (0..self.vocabulary.n_attrs())
            .map(|_| self.rng.random_range(0..VALUES_PER_ATTRIBUTE as u16))
            .collect()
    }

    fn push(&mut self, attrs: Vec<u16>, style: u16) -> usize {
        *self.occupancy.entry(attrs.clone()).or_default() += 1;
        self.items.push(Draft { attrs, style });
        self.items.len() - 1
    }

    fn change(&mut self, base: &[u16], attrs: &[usize]) -> Vec<u16> {
        let mut out = base.to_vec();
        for &a in attrs {
            let shift = self.rng.random_range(1..VALUES_PER_ATTRIBUTE as u16);
            out[a] = (out[a] + shift) % VALUES_PER_ATTRIBUTE as u16;
        }
        out
    }

    fn place_target(&mut self, reference: usize, intent: Intent) -> Result<(usize, Vec<usize>), SyntheticError> {
        let n = self.vocabulary.n_attrs();
        for _ in 0..PLACEMENT_RETRIES {
            let changed: usize = match intent {
                Intent::Holistic => self.rng.random_range(1..=2),
                Intent::Explicit => n - 1,
                Intent::Visual => 1,
            };
            let mut which: Vec<usize> = rand::seq::index::sample(&mut self.rng, n, changed).into_vec();
            which.sort_unstable();
            let base = self.items[reference].attrs.clone();
            let attrs = self.change(&base, &which);
            if self.occupancy.contains_key(&attrs) {
                continue;
            }
            let style = match intent {
                Intent::Visual => self.items[reference].style,
                _ => self.rng.random_range(0..STYLES as u16),
            };
            self.reserved.insert(attrs.clone());
            let id = self.push(attrs, style);
            return Ok((id, which));
        }
        Err(SyntheticError::Unsatisfiable {
            what: "a query target".into(),
            retries: PLACEMENT_RETRIES,
        })
    }

    fn place_free(&mut self, attrs: Vec<u16>, style: u16) -> bool {
        if self.reserved.contains(&attrs) {
            return false;
        }
        self.push(attrs, style);
        true
    }

    fn place_near_duplicates(&mut self, target: usize) -> Result<(), SyntheticError> {
        let n = self.vocabulary.n_attrs();
        let base = self.items[target].attrs.clone();
        let mut placed = 0;
        for _ in 0..PLACEMENT_RETRIES {
            let a = self.rng.random_range(0..n);
            let attrs = self.change(&base, &[a]);
            let style = self.rng.random_range(0..STYLES as u16);
            if self.place_free(attrs, style) {
                placed += 1;
                if placed == NEAR_DUPLICATES {
                    return Ok(());
                }
            }
        }
        Err(SyntheticError::Unsatisfiable {
            what: "near-duplicate distractors".into(),
            retries: PLACEMENT_RETRIES,
        })
    }
}

fn mod_text(vocabulary: &Vocabulary, intent: Intent, target: &[u16], changed: &[usize]) -> String {
    let words: Vec<&str> = changed.iter().map(|&a| vocabulary.word(a, target[a])).collect();
    let prefix = match intent {
        Intent::Holistic => HOLISTIC_PREFIX,
        Intent::Explicit => EXPLICIT_PREFIX,
        Intent::Visual => VISUAL_PREFIX,
    };
    format!("{prefix} {}", listing(&words))
}

impl SyntheticBenchmark {
    pub fn generate(config: &SyntheticConfig) -> Result<Self, SyntheticError> {
        config.validate()?;
        let vocabulary = Vocabulary::new(config.n_attrs);
        let mut world = World {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            vocabulary: &vocabulary,
            items: Vec::with_capacity(config.n_gallery),
            occupancy: HashMap::new(),
            reserved: HashSet::new(),
        };

        let intents = WeightedIndex::new(config.intent_mix).map_err(|e| SyntheticError::Config(e.to_string()))?;
        let plan: Vec<(Intent, bool)> = (0..config.n_queries)
            .map(|_| {
                let intent = Intent::ALL[intents.sample(&mut world.rng)];
                (intent, world.rng.random_bool(config.near_duplicate_share))
            })
            .collect();
        let mut plan = plan;
        // Top up the near-duplicate share to the requested minimum.
        let wanted = (config.near_duplicate_share * config.n_queries as f64).ceil() as usize;
        let mut have = plan.iter().filter(|(_, nd)| *nd).count();
        for entry in plan.iter_mut() {
            if have >= wanted {
                break;
            }
            if !entry.1 {
                entry.1 = true;
                have += 1;
            }
        }
        let needed: usize = plan
            .iter()
            .map(|(intent, nd)| {
                1 + if *intent == Intent::Visual { NEAR_DUPLICATES } else { 0 } + if *nd { NEAR_DUPLICATES } else { 0 }
            })
            .sum();
        if needed >= config.n_gallery {
            return Err(SyntheticError::Unsatisfiable {
                what: format!("{} query items in a gallery of {}", needed, config.n_gallery),
                retries: 0,
            });
        }
        for _ in 0..config.n_gallery - needed {
            let attrs = world.random_tuple();
            let style = world.rng.random_range(0..STYLES as u16);
            world.push(attrs, style);
        }
        let base_items = world.items.len();

        let mut drafts = Vec::with_capacity(config.n_queries);
        for (intent, near) in plan {
            let reference = world.rng.random_range(0..base_items);
            let (target, changed) = world.place_target(reference, intent)?;
            if intent == Intent::Visual {
                let attrs = world.items[target].attrs.clone();
                let own = world.items[target].style;
                let mut others: Vec<u16> = (0..STYLES as u16).filter(|s| *s != own).collect();
                others.shuffle(&mut world.rng);
                for style in others.into_iter().take(NEAR_DUPLICATES) {
                    world.push(attrs.clone(), style);
                }
            }
            if near {
                world.place_near_duplicates(target)?;
            }
            let text = mod_text(&vocabulary, intent, &world.items[target].attrs, &changed);
            drafts.push((reference, target, intent, near, text));
        }

        let mut order: Vec<usize> = (0..world.items.len()).collect();
        order.shuffle(&mut world.rng);
        let ids: Vec<ImageId> = {
            let mut ids = vec![None; world.items.len()];
            for (slot, &item) in order.iter().enumerate() {
                ids[item] = Some(ImageId::new(format!("img-{slot:04}")).expect("non-empty id"));
            }
            ids.into_iter().map(|i| i.expect("every item has an id")).collect()
        };

        let mut items: Vec<SyntheticItem> = world
            .items
            .iter()
            .zip(&ids)
            .map(|(d, id)| SyntheticItem {
                id: id.clone(),
                attrs: d.attrs.clone(),
                style: d.style,
            })
            .collect();
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let queries = drafts
            .into_iter()
            .enumerate()
            .map(|(i, (r, t, intent, near, text))| SyntheticQuery {
                query_id: format!("q-{i:03}"),
                ref_image: ids[r].clone(),
                target: ids[t].clone(),
                intent,
                mod_text: text,
                near_duplicates: near,
            })
            .collect();
        Self::assemble(config.clone(), vocabulary, items, queries)
    }

    /// Derives captions and embeddings from the metadata. Noise is drawn from
    /// a stream separate from the world layout.
    fn assemble(
        config: SyntheticConfig,
        vocabulary: Vocabulary,
        items: Vec<SyntheticItem>,
        queries: Vec<SyntheticQuery>,
    ) -> Result<Self, SyntheticError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, config.noise).map_err(|e| SyntheticError::Config(e.to_string()))?;
        let mut proxies = ProxyStore::new();
        let mut rows = Vec::with_capacity(items.len());
        for item in &items {
            let mut caption_attrs = item.attrs.clone();
            if rng.random_bool(config.caption_error) {
                let a = rng.random_range(0..vocabulary.n_attrs());
                let shift = rng.random_range(1..VALUES_PER_ATTRIBUTE as u16);
                caption_attrs[a] = (caption_attrs[a] + shift) % VALUES_PER_ATTRIBUTE as u16;
            }
            let caption = vocabulary.caption(&caption_attrs);
            proxies.insert(
                SemanticProxy::new(
                    item.id.clone(),
                    caption,
                    ProxySource::Precomputed,
                    DEFAULT_PROXY_MAX_CHARS,
                )
                .map_err(|e| SyntheticError::Config(e.to_string()))?,
            );
            let slots: Vec<Option<u16>> = item.attrs.iter().map(|v| Some(*v)).collect();
            let mut v = vocabulary.encode(&slots, Some(item.style));
            if config.noise > 0.0 {
                v.iter_mut().for_each(|x| *x += normal.sample(&mut rng) as f32);
            }
            rows.push((item.id.clone(), v));
        }
        let embeddings = EmbeddingMatrix::from_rows(vocabulary.dim(), rows)?;
        Ok(Self {
            config,
            vocabulary,
            items,
            queries,
            proxies,
            embeddings,
        })
    }

    pub fn triplets(&self) -> Vec<TripletRecord> {
        self.queries
            .iter()
            .map(|q| TripletRecord {
                query_id: q.query_id.clone(),
                ref_image: q.ref_image.clone(),
                mod_text: q.mod_text.clone(),
                targets: [q.target.clone()].into(),
                subset: None,
                split: Split::Val,
            })
            .collect()
    }

    pub fn composed_queries(&self) -> Vec<ComposedQuery> {
        self.triplets()
            .iter()
            .map(|t| t.to_query().expect("generated queries are valid"))
            .collect()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            kind: DatasetKind::GenericJsonl,
            triplets: self.triplets(),
            gallery: self.items.iter().map(|i| i.id.clone()).collect(),
        }
    }

    pub fn attribute_table(&self) -> AttributeTable {
        self.items.iter().map(|i| (i.id.clone(), i.attrs.clone())).collect()
    }

    pub fn text_embedder(&self) -> SyntheticTextEmbedder {
        SyntheticTextEmbedder::new(self.vocabulary.clone())
    }

    pub fn targets(&self) -> BTreeMap<String, ImageId> {
        self.queries
            .iter()
            .map(|q| (q.query_id.clone(), q.target.clone()))
            .collect()
    }

    /// Writes the metadata, captions, embeddings and triplets into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SyntheticError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SyntheticError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let meta = Metadata {
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            items: self.items.clone(),
            queries: self.queries.clone(),
        };
        let path = dir.join(METADATA_FILE);
        let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        json.push('\n');
        fs::write(&path, json).map_err(io(&path))?;
        write_embv1(dir.join(EMBEDDINGS_FILE), &self.embeddings)?;
        self.proxies.save_jsonl(&dir.join(PROXIES_FILE))?;
        let path = dir.join(TRIPLETS_FILE);
        let mut lines = String::new();
        for q in &self.queries {
            let line = serde_json::json!({
                "query_id": q.query_id,
                "ref": q.ref_image,
                "mod": q.mod_text,
                "targets": [q.target],
            });
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
        fs::write(&path, lines).map_err(io(&path))?;
        Ok(())
    }

    /// Rebuilds a benchmark from its metadata file. Captions and embeddings
    /// are regenerated, so they match what [`write_to`](Self::write_to) wrote.
    pub fn load(metadata: &Path) -> Result<Self, SyntheticError> {
        let raw = fs::read_to_string(metadata).map_err(|source| SyntheticError::Io {
            path: metadata.display().to_string(),
            source,
        })?;
        let meta: Metadata = serde_json::from_str(&raw).map_err(|e| SyntheticError::Format {
            path: metadata.display().to_string(),
            reason: e.to_string(),
        })?;
        meta.config.validate()?;
        Self::assemble(meta.config, meta.vocabulary, meta.items, meta.queries)
    }
}

/// Reads only the vocabulary from a metadata file.
pub fn load_vocabulary(metadata: &Path) -> Result<Vocabulary, SyntheticError> {
    #[derive(Deserialize)]
    struct Partial {
        vocabulary: Vocabulary,
    }
    let raw = fs::read_to_string(metadata).map_err(|source| SyntheticError::Io {
        path: metadata.display().to_string(),
        source,
    })?;
    let p: Partial = serde_json::from_str(&raw).map_err(|e| SyntheticError::Format {
        path: metadata.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(p.vocabulary)
}
