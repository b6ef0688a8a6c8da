//! The closed class-word vocabulary used to anchor identities in prompts
//! and captions, with plural handling and span search.

use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

/// A class word with the plural surface forms mapped back to it.
#[derive(Debug, Clone)]
pub struct ClassWord {
    pub singular: &'static str,
    pub plurals: &'static [&'static str],
}

pub const CLASS_WORDS: &[ClassWord] = &[
    ClassWord { singular: "man", plurals: &["men"] },
    ClassWord { singular: "woman", plurals: &["women"] },
    ClassWord { singular: "boy", plurals: &["boys"] },
    ClassWord { singular: "girl", plurals: &["girls"] },
    ClassWord { singular: "person", plurals: &["people", "persons"] },
    ClassWord { singular: "lady", plurals: &["ladies"] },
    ClassWord { singular: "guy", plurals: &["guys"] },
    ClassWord { singular: "kid", plurals: &["kids"] },
    ClassWord { singular: "child", plurals: &["children"] },
];

/// One class-word occurrence in a text: byte span plus the canonical singular.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occurrence {
    pub start: usize,
    pub end: usize,
    pub singular: String,
    /// Surface form as written (possibly plural or capitalized).
    pub surface: String,
}

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Longest alternatives first so plural forms win over embedded singulars.
        let mut forms: Vec<&str> = CLASS_WORDS
            .iter()
            .flat_map(|c| std::iter::once(c.singular).chain(c.plurals.iter().copied()))
            .collect();
        forms.sort_by_key(|f| std::cmp::Reverse(f.len()));
        let pat = format!(r"(?i)\b({})\b", forms.join("|"));
        Regex::new(&pat).expect("class-word regex")
    })
}

pub fn singular_of(form: &str) -> Option<&'static str> {
    let lower = form.to_ascii_lowercase();
    for c in CLASS_WORDS {
        if c.singular == lower || c.plurals.contains(&lower.as_str()) {
            return Some(c.singular);
        }
    }
    None
}

pub fn is_class_word(form: &str) -> bool {
    singular_of(form).is_some()
}

/// All class-word occurrences in reading order.
pub fn find_occurrences(text: &str) -> Vec<Occurrence> {
    word_regex()
        .find_iter(text)
        .map(|m| Occurrence {
            start: m.start(),
            end: m.end(),
            singular: singular_of(m.as_str()).expect("matched form has a singular").to_string(),
            surface: m.as_str().to_string(),
        })
        .collect()
}

/// Rewrites every plural class word to its singular, leaving everything else
/// untouched. Grammar of the surrounding words is deliberately not repaired.
pub fn singularize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for occ in find_occurrences(text) {
        out.push_str(&text[at..occ.start]);
        out.push_str(&occ.singular);
        at = occ.end;
    }
    out.push_str(&text[at..]);
    out
}

/// The unique class-word occurrence in a generation prompt.
///
/// Zero occurrences and multiple occurrences are both errors: without an
/// anchor there is nowhere to inject identity rows, and with several the
/// choice would be ambiguous at generation time.
pub fn unique_occurrence(text: &str) -> Result<Occurrence> {
    let occ = find_occurrences(text);
    match occ.len() {
        0 => Err(Error::invalid(format!(
            "prompt contains no class word ({}): {text:?}",
            CLASS_WORDS.iter().map(|c| c.singular).collect::<Vec<_>>().join(", ")
        ))),
        1 => Ok(occ.into_iter().next().unwrap()),
        n => Err(Error::invalid(format!(
            "prompt contains {n} class words, expected exactly one: {text:?}"
        ))),
    }
}
