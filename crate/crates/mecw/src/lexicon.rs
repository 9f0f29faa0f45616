//! Vocabulary the synthetic dataset draws from: name pools, the 15
//! item nouns with explicit plural forms, and the 9 color words.
//!
//! A lexicon is loaded from a TOML file (a pinned default ships inside
//! the binary) and validated up front so that everything downstream can
//! assume the invariants: exactly 15 items and 9 colors, nonempty
//! whitespace-free tokens, no duplicates, and no singular/plural form
//! colliding with any other item's forms. Whitespace-free tokens are
//! what keep rendered sentences parseable and full person names unique.
//!
//! Run manifests record [`Lexicons::content_hash`] so an analysis can
//! always tell which vocabulary produced its rows.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The lexicon compiled into the binary.
pub const DEFAULT_LEXICON_TOML: &str = include_str!("../assets/default_lexicon.toml");

/// An item noun with its explicit plural, e.g. `balloon` / `balloons`.
/// Plurals are stored rather than derived to keep irregular nouns from
/// corrupting sentence parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemNoun {
    pub singular: String,
    pub plural: String,
}

/// Validated vocabulary pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub items: Vec<ItemNoun>,
    pub colors: Vec<String>,
}

/// Number of item nouns a lexicon must supply.
pub const ITEM_COUNT: usize = 15;
/// Number of color words a lexicon must supply.
pub const COLOR_COUNT: usize = 9;

impl Lexicons {
    /// Parses and validates a lexicon from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let lexicons: Lexicons = toml::from_str(text)?;
        lexicons.validate()?;
        Ok(lexicons)
    }

    /// Loads and validates a lexicon file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read lexicon {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// The compiled-in default lexicon.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_LEXICON_TOML)
            .expect("compiled-in default lexicon must validate")
    }

    /// Checks every structural invariant; called by all constructors.
    pub fn validate(&self) -> Result<()> {
        if self.items.len() != ITEM_COUNT {
            return Err(Error::Lexicon(format!(
                "expected exactly {ITEM_COUNT} items, found {}",
                self.items.len()
            )));
        }
        if self.colors.len() != COLOR_COUNT {
            return Err(Error::Lexicon(format!(
                "expected exactly {COLOR_COUNT} colors, found {}",
                self.colors.len()
            )));
        }
        if self.first_names.is_empty() || self.last_names.is_empty() {
            return Err(Error::Lexicon("name pools must be nonempty".into()));
        }

        check_tokens("first_names", self.first_names.iter())?;
        check_tokens("last_names", self.last_names.iter())?;
        check_tokens("colors", self.colors.iter())?;
        check_tokens("item singulars", self.items.iter().map(|i| &i.singular))?;
        check_tokens("item plurals", self.items.iter().map(|i| &i.plural))?;

        // Sentences are parsed back from their final token, which may
        // be either form of any item; the union of all forms must be
        // collision-free for that lookup to be unambiguous.
        let mut forms = HashSet::new();
        for item in &self.items {
            for form in [&item.singular, &item.plural] {
                if !forms.insert(form.as_str()) {
                    return Err(Error::Lexicon(format!(
                        "item form {form:?} appears more than once across singular/plural forms"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable content digest (`sha256:<hex>`), recorded in run
    /// manifests. Computed over the canonical JSON rendering so that
    /// formatting-only differences between source files do not matter.
    pub fn content_hash(&self) -> String {
        let canonical =
            serde_json::to_vec(self).expect("lexicon serialization cannot fail");
        format!("sha256:{}", hex::encode(Sha256::digest(&canonical)))
    }

    /// How many unique full names the pools can produce.
    pub fn pair_capacity(&self) -> usize {
        self.first_names.len() * self.last_names.len()
    }

    /// Looks up an item by either of its forms.
    pub fn item_for_form(&self, form: &str) -> Option<&ItemNoun> {
        self.items
            .iter()
            .find(|i| i.singular == form || i.plural == form)
    }

    /// True if `word` is one of the color tokens.
    pub fn has_color(&self, word: &str) -> bool {
        self.colors.iter().any(|c| c == word)
    }
}

fn check_tokens<'a>(
    list_name: &str,
    tokens: impl Iterator<Item = &'a String>,
) -> Result<()> {
    let mut seen = HashSet::new();
    for token in tokens {
        if token.is_empty() {
            return Err(Error::Lexicon(format!("{list_name} contains an empty entry")));
        }
        if token.chars().any(char::is_whitespace) {
            return Err(Error::Lexicon(format!(
                "{list_name} entry {token:?} contains whitespace"
            )));
        }
        if !seen.insert(token.as_str()) {
            return Err(Error::Lexicon(format!(
                "{list_name} entry {token:?} is duplicated"
            )));
        }
    }
    Ok(())
}
