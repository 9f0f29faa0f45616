//! Seeded generation of the synthetic persons dataset.
//!
//! Every row is one fact about one unique person, rendered as a fixed
//! sentence: `"Abigail Holmes has 19 red balloons."`. Uniqueness comes
//! from sampling (first, last) name pairs without replacement from the
//! full pair grid; counts, colors and items are drawn from their own
//! derived streams so the attributes of row *i* never depend on how
//! many rows came before it in some other stream.
//!
//! [`parse_row`] is the exact inverse of [`render_row`] and exists so
//! tests and graders can re-read any emitted sentence from scratch; it
//! is strict about the grammar, including singular/plural agreement
//! with the count.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{ItemNoun, Lexicons};
use crate::rng;

/// Inclusive bounds for the per-row object count.
pub const MIN_COUNT: u32 = 1;
pub const MAX_COUNT: u32 = 20;

/// One synthetic fact: a person owns `count` objects of one color and
/// one item kind, plus the rendered sentence the model will see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRow {
    /// Full name, `"{first} {last}"`.
    pub person_name: String,
    pub count: u32,
    pub color: String,
    pub item: ItemNoun,
    pub sentence: String,
}

/// The full generated dataset plus the coordinates that reproduce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<FactRow>,
    pub seed: u64,
    /// Content hash of the lexicon the rows were drawn from.
    pub lexicon_id: String,
}

/// Fields recovered from a sentence by [`parse_row`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRow {
    pub person_name: String,
    pub count: u32,
    pub color: String,
    pub item: ItemNoun,
}

/// Generates `n` rows with unique person names, deterministically for
/// a given `(seed, lexicon)` pair.
pub fn generate_dataset(n: usize, seed: u64, lexicons: &Lexicons) -> Result<Dataset> {
    lexicons.validate()?;
    let capacity = lexicons.pair_capacity();
    if n > capacity {
        return Err(Error::Capacity {
            requested: n,
            capacity,
        });
    }

    let mut name_rng = rng::derive_rng(seed, "synthgen.names", &[], &[]);
    let mut count_rng = rng::derive_rng(seed, "synthgen.counts", &[], &[]);
    let mut color_rng = rng::derive_rng(seed, "synthgen.colors", &[], &[]);
    let mut item_rng = rng::derive_rng(seed, "synthgen.items", &[], &[]);

    let pair_indices = sample_without_replacement(capacity, n, &mut name_rng);
    let last_len = lexicons.last_names.len();

    let rows = pair_indices
        .into_iter()
        .map(|pair| {
            let first = &lexicons.first_names[pair / last_len];
            let last = &lexicons.last_names[pair % last_len];
            let person_name = format!("{first} {last}");
            let count = count_rng.gen_range(MIN_COUNT..=MAX_COUNT);
            let color = lexicons.colors[color_rng.gen_range(0..lexicons.colors.len())].clone();
            let item = lexicons.items[item_rng.gen_range(0..lexicons.items.len())].clone();
            let sentence = render_row(&person_name, count, &color, &item)?;
            Ok(FactRow {
                person_name,
                count,
                color,
                item,
                sentence,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        rows,
        seed,
        lexicon_id: lexicons.content_hash(),
    })
}

/// Renders the canonical sentence for one fact. The item appears in
/// singular form exactly when `count == 1`.
pub fn render_row(person_name: &str, count: u32, color: &str, item: &ItemNoun) -> Result<String> {
    if !(MIN_COUNT..=MAX_COUNT).contains(&count) {
        return Err(Error::Validation(format!(
            "count {count} outside [{MIN_COUNT}, {MAX_COUNT}]"
        )));
    }
    let form = if count == 1 {
        &item.singular
    } else {
        &item.plural
    };
    Ok(format!("{person_name} has {count} {color} {form}."))
}

/// Parses a sentence produced by [`render_row`] back into its fields,
/// validating color and item membership against `lexicons` and
/// singular/plural agreement with the count. Errors carry the byte
/// offset of the offending token.
pub fn parse_row(sentence: &str, lexicons: &Lexicons) -> Result<ParsedRow> {
    let Some(body) = sentence.strip_suffix('.') else {
        return Err(parse_err(sentence.len(), "expected terminal period"));
    };

    let tokens = tokenize(body)?;
    if tokens.len() < 5 {
        return Err(parse_err(
            0,
            "expected \"<name> has <count> <color> <item>.\"",
        ));
    }

    let (item_pos, item_tok) = tokens[tokens.len() - 1];
    let (color_pos, color_tok) = tokens[tokens.len() - 2];
    let (count_pos, count_tok) = tokens[tokens.len() - 3];
    let (has_pos, has_tok) = tokens[tokens.len() - 4];

    if has_tok != "has" {
        return Err(parse_err(has_pos, "expected the verb \"has\""));
    }

    let count: u32 = count_tok
        .parse()
        .map_err(|_| parse_err(count_pos, "count is not an unsigned integer"))?;
    if !(MIN_COUNT..=MAX_COUNT).contains(&count) {
        return Err(parse_err(
            count_pos,
            &format!("count {count} outside [{MIN_COUNT}, {MAX_COUNT}]"),
        ));
    }

    if !lexicons.has_color(color_tok) {
        return Err(parse_err(color_pos, &format!("unknown color {color_tok:?}")));
    }

    let Some(item) = lexicons.item_for_form(item_tok) else {
        return Err(parse_err(item_pos, &format!("unknown item {item_tok:?}")));
    };
    let expected_form = if count == 1 {
        &item.singular
    } else {
        &item.plural
    };
    if item_tok != expected_form {
        return Err(parse_err(
            item_pos,
            &format!("item form {item_tok:?} disagrees with count {count}"),
        ));
    }

    let name_tokens: Vec<&str> = tokens[..tokens.len() - 4].iter().map(|t| t.1).collect();
    Ok(ParsedRow {
        person_name: name_tokens.join(" "),
        count,
        color: color_tok.to_string(),
        item: item.clone(),
    })
}

/// Uniformly samples `n` distinct values from `0..pool` via a partial
/// Fisher–Yates shuffle over a sparse overlay, so huge pools cost only
/// O(n) memory. Draw order is part of the determinism contract.
pub fn sample_without_replacement(pool: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n <= pool, "cannot sample {n} distinct values from a pool of {pool}");
    let mut displaced: HashMap<usize, usize> = HashMap::new();
    let mut chosen = Vec::with_capacity(n);
    for j in 0..n {
        let r = rng.gen_range(j..pool);
        let value_at_r = *displaced.get(&r).unwrap_or(&r);
        let value_at_j = *displaced.get(&j).unwrap_or(&j);
        chosen.push(value_at_r);
        displaced.insert(r, value_at_j);
    }
    chosen
}

fn parse_err(position: usize, message: &str) -> Error {
    Error::RowParse {
        position,
        message: message.to_string(),
    }
}

/// Splits on single spaces, keeping byte offsets; empty tokens (runs of
/// spaces, leading/trailing space) are grammar violations.
fn tokenize(body: &str) -> Result<Vec<(usize, &str)>> {
    let mut tokens = Vec::new();
    let mut start = 0;
    for (i, byte) in body.bytes().enumerate() {
        if byte == b' ' {
            tokens.push((start, &body[start..i]));
            start = i + 1;
        }
    }
    tokens.push((start, &body[start..]));
    for &(pos, tok) in &tokens {
        if tok.is_empty() {
            return Err(parse_err(pos, "empty token (consecutive spaces?)"));
        }
    }
    Ok(tokens)
}
