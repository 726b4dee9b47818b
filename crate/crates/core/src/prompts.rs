//! Prompt templates and the small markup vocabulary rendered into them.
//!
//! Templates are plain text with `{{slot}}` placeholders. Built-in defaults
//! live in `prompts/`; a directory with files of the same names overrides
//! them one by one.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::llm::Role;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: slot {{{{{slot}}}}} was not provided")]
    MissingSlot { template: String, slot: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Replaces every `{{slot}}`. A placeholder without a value is an error.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else {
                out.push_str(&rest[start..]);
                rest = "";
                break;
            };
            let slot = after[..end].trim();
            let value = slots
                .iter()
                .find(|(name, _)| *name == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingSlot {
                    template: self.name.clone(),
                    slot: slot.to_string(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub si_worker: PromptTemplate,
    pub cp_worker: PromptTemplate,
    pub ir_router: PromptTemplate,
    pub de_judge: PromptTemplate,
    pub distiller: PromptTemplate,
    pub logic_judge: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            si_worker: PromptTemplate::new("si_worker", include_str!("../prompts/si_worker.txt")),
            cp_worker: PromptTemplate::new("cp_worker", include_str!("../prompts/cp_worker.txt")),
            ir_router: PromptTemplate::new("ir_router", include_str!("../prompts/ir_router.txt")),
            de_judge: PromptTemplate::new("de_judge", include_str!("../prompts/de_judge.txt")),
            distiller: PromptTemplate::new("distiller", include_str!("../prompts/distiller.txt")),
            logic_judge: PromptTemplate::new("logic_judge", include_str!("../prompts/logic_judge.txt")),
        }
    }
}

impl PromptSet {
    /// Defaults, overridden by `<role>.txt` files found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for role in Role::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            *set.for_role_mut(role) = PromptTemplate::new(role.as_str(), text);
        }
        Ok(set)
    }

    pub fn for_role(&self, role: Role) -> &PromptTemplate {
        match role {
            Role::SiWorker => &self.si_worker,
            Role::CpWorker => &self.cp_worker,
            Role::IrRouter => &self.ir_router,
            Role::DeJudge => &self.de_judge,
            Role::Distiller => &self.distiller,
            Role::LogicJudge => &self.logic_judge,
        }
    }

    fn for_role_mut(&mut self, role: Role) -> &mut PromptTemplate {
        match role {
            Role::SiWorker => &mut self.si_worker,
            Role::CpWorker => &mut self.cp_worker,
            Role::IrRouter => &mut self.ir_router,
            Role::DeJudge => &mut self.de_judge,
            Role::Distiller => &mut self.distiller,
            Role::LogicJudge => &mut self.logic_judge,
        }
    }
}

/// Tags the engine renders into prompts, and their parsers.
///
/// The deterministic and oracle providers read prompts through these helpers,
/// so rendering and parsing stay in one place.
pub mod markup {
    pub fn escape(s: &str) -> String {
        s.replace('&', "&amp;")
            .replace('"', "&quot;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
    }

    pub fn unescape(s: &str) -> String {
        s.replace("&quot;", "\"")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&amp;", "&")
    }

    /// Body of the first `<name>...</name>` element.
    pub fn element<'a>(text: &'a str, name: &str) -> Option<&'a str> {
        let open = format!("<{name}>");
        let close = format!("</{name}>");
        let start = text.find(&open)? + open.len();
        let end = text[start..].find(&close)? + start;
        Some(&text[start..end])
    }

    /// Value of `attr` on the first `<name ...>` tag.
    pub fn attribute(text: &str, name: &str, attr: &str) -> Option<String> {
        let open = format!("<{name} ");
        let start = text.find(&open)?;
        let tag_end = text[start..].find('>')? + start;
        attr_in(&text[start..tag_end], attr)
    }

    fn attr_in(tag: &str, attr: &str) -> Option<String> {
        let key = format!(" {attr}=\"");
        let s = tag.find(&key)? + key.len();
        let e = tag[s..].find('"')? + s;
        Some(unescape(&tag[s..e]))
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct CandidateMark {
        pub id: String,
        pub leading: bool,
        pub text: String,
    }

    pub fn candidate(id: &str, n: usize, leading: bool, proxy: &str) -> String {
        let lead = if leading { " leading=\"true\"" } else { "" };
        format!("<cand id=\"{}\" n=\"{n}\"{lead}>{}</cand>", escape(id), proxy)
    }

    /// All `<cand>` elements in order.
    pub fn candidates(text: &str) -> Vec<CandidateMark> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(start) = rest.find("<cand ") {
            let Some(tag_end) = rest[start..].find('>').map(|e| e + start) else {
                break;
            };
            let tag = &rest[start..tag_end];
            let body_end = rest[tag_end..]
                .find("</cand>")
                .map(|e| e + tag_end)
                .unwrap_or(tag_end + 1);
            if let Some(id) = attr_in(tag, "id") {
                out.push(CandidateMark {
                    id,
                    leading: attr_in(tag, "leading").as_deref() == Some("true"),
                    text: rest[tag_end + 1..body_end.max(tag_end + 1)].to_string(),
                });
            }
            rest = &rest[body_end.min(rest.len())..];
        }
        out
    }

    pub fn query_block(query_id: &str, ref_proxy: &str, mod_text: &str, hypothesis: Option<&str>) -> String {
        let mut s = format!(
            "<query id=\"{}\">\nReference image: <ref>{ref_proxy}</ref>\nModification: <mod>{mod_text}</mod>\n",
            escape(query_id)
        );
        if let Some(h) = hypothesis {
            s.push_str(&format!("Imagined target: <hyp>{h}</hyp>\n"));
        }
        s.push_str("</query>");
        s
    }

    pub fn page_header(index: usize, of: usize) -> String {
        format!("<page index=\"{index}\" of=\"{of}\"/>")
    }

    pub fn page_index(text: &str) -> Option<usize> {
        attribute(text, "page", "index")?.parse().ok()
    }

    pub fn leading(id: Option<&str>) -> String {
        match id {
            Some(id) => format!("<leading id=\"{}\"/>", escape(id)),
            None => "none".to_string(),
        }
    }

    pub fn query_id(text: &str) -> Option<String> {
        attribute(text, "query", "id")
    }

    pub fn rollout(index: usize) -> String {
        format!("<rollout index=\"{index}\"/>")
    }
}
