//! The four question types, their exact oracles, and answer grading.
//!
//! Each task asks something a human could verify with a pencil over the
//! sampled rows, which is the point: ground truth is computable exactly,
//! so correctness is a clean bit and accuracy curves mean something.
//!
//! * `Needle` — one person's count ("How many objects does X have?")
//! * `Needles` — sum over a color or item filter
//! * `Summary` — grand total over all rows
//! * `Sorted` — find people matching a filter, sort by name, concatenate
//!   their counts into one digit string
//!
//! Grading tolerates realistic model output: prose around the JSON,
//! code fences, quoted numerals. It extracts the first JSON object
//! containing an `"answer"` key and compares after normalization; it
//! never panics on arbitrary input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::FactRow;

/// Closed set of task types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Needle,
    Needles,
    Summary,
    Sorted,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Needle,
        TaskType::Needles,
        TaskType::Summary,
        TaskType::Sorted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Needle => "needle",
            TaskType::Needles => "needles",
            TaskType::Summary => "summary",
            TaskType::Sorted => "sorted",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(TaskType::Needle),
            "needles" => Ok(TaskType::Needles),
            "summary" => Ok(TaskType::Summary),
            "sorted" => Ok(TaskType::Sorted),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected one of needle, needles, summary, sorted"
            ))),
        }
    }
}

/// Which rows a filtered task is about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowFilter {
    Color { color: String },
    /// Item filters carry both forms: matching uses the singular (rows
    /// store it), question text uses the plural.
    Item { singular: String, plural: String },
}

impl RowFilter {
    fn matches(&self, row: &FactRow) -> bool {
        match self {
            RowFilter::Color { color } => row.color == *color,
            RowFilter::Item { singular, .. } => row.item.singular == *singular,
        }
    }
}

/// What the question is anchored to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    /// A single person (Needle).
    Person { name: String },
    /// A color or item filter (Needles, Sorted).
    Filter { filter: RowFilter },
    /// The whole context (Summary).
    All,
}

/// Exact expected answer, numeric for counting tasks and string for the
/// concatenation task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ExpectedAnswer {
    Numeric(i64),
    Text(String),
}

/// A fully instantiated question: text to ask and the answer to expect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub task: TaskType,
    pub selector: Selector,
    pub question_text: String,
    pub expected: ExpectedAnswer,
}

/// Why a graded answer was wrong, when it was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Unparseable,
    WrongValue,
    Empty,
}

/// Outcome of grading one raw response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeResult {
    pub correct: bool,
    /// Normalized answer actually given, when one could be extracted.
    pub parsed_answer: Option<String>,
    pub failure_reason: Option<FailureReason>,
}

/// Builds a question of the given type over `rows`. Selector choices
/// (which person, which filter value, color-vs-item dimension) are
/// drawn from `rng`, and filters are only ever drawn from values
/// actually present in the rows.
pub fn make_question(
    task: TaskType,
    rows: &[FactRow],
    rng: &mut impl Rng,
) -> Result<QuestionInstance> {
    if rows.is_empty() {
        return Err(Error::Validation(
            "cannot build a question over zero rows".into(),
        ));
    }
    match task {
        TaskType::Needle => {
            let person = rows[rng.gen_range(0..rows.len())].person_name.clone();
            let expected = oracle_needle(rows, &person)?;
            Ok(QuestionInstance {
                task,
                question_text: format!("How many objects does {person} have?"),
                selector: Selector::Person { name: person },
                expected: ExpectedAnswer::Numeric(expected),
            })
        }
        TaskType::Needles => {
            let filter = draw_filter(rows, rng);
            let expected = ExpectedAnswer::Numeric(oracle_needles(rows, &filter));
            let question_text = match &filter {
                RowFilter::Color { color } => format!("How many {color} objects are there?"),
                RowFilter::Item { plural, .. } => format!("How many {plural} are there?"),
            };
            Ok(QuestionInstance {
                task,
                selector: Selector::Filter { filter },
                question_text,
                expected,
            })
        }
        TaskType::Summary => Ok(QuestionInstance {
            task,
            selector: Selector::All,
            question_text: "How many objects are there total?".to_string(),
            expected: ExpectedAnswer::Numeric(oracle_summary(rows)),
        }),
        TaskType::Sorted => {
            let filter = draw_filter(rows, rng);
            let expected = ExpectedAnswer::Text(oracle_sorted(rows, &filter));
            let subject = match &filter {
                RowFilter::Color { color } => format!("{color} objects"),
                RowFilter::Item { plural, .. } => plural.clone(),
            };
            let question_text = format!(
                "Find all people with {subject}. Sort them by first and last name. \
                 Concatenate the number of objects they have into one long string value \
                 in the order they were sorted."
            );
            Ok(QuestionInstance {
                task,
                selector: Selector::Filter { filter },
                question_text,
                expected,
            })
        }
    }
}

/// Count owned by exactly one person. Zero or several matching rows is
/// an integrity violation: generated contexts hold one row per person.
pub fn oracle_needle(rows: &[FactRow], person: &str) -> Result<i64> {
    let mut matches = rows.iter().filter(|r| r.person_name == person);
    let Some(row) = matches.next() else {
        return Err(Error::OracleIntegrity(format!(
            "no row for person {person:?}"
        )));
    };
    if matches.next().is_some() {
        return Err(Error::OracleIntegrity(format!(
            "multiple rows for person {person:?}"
        )));
    }
    Ok(i64::from(row.count))
}

/// Sum of counts over rows matching the filter; 0 when nothing matches.
pub fn oracle_needles(rows: &[FactRow], filter: &RowFilter) -> i64 {
    rows.iter()
        .filter(|r| filter.matches(r))
        .map(|r| i64::from(r.count))
        .sum()
}

/// Sum of counts over all rows.
pub fn oracle_summary(rows: &[FactRow]) -> i64 {
    rows.iter().map(|r| i64::from(r.count)).sum()
}

/// Counts of matching rows, sorted by person name (byte order, which is
/// first-then-last for these names), concatenated as decimal strings.
/// Empty string when nothing matches.
pub fn oracle_sorted(rows: &[FactRow], filter: &RowFilter) -> String {
    let mut matched: Vec<(&str, u32)> = rows
        .iter()
        .filter(|r| filter.matches(r))
        .map(|r| (r.person_name.as_str(), r.count))
        .collect();
    matched.sort_by(|a, b| a.0.cmp(b.0));
    matched
        .into_iter()
        .map(|(_, count)| count.to_string())
        .collect()
}

/// Grades a raw model response against the expected answer. Never
/// fails: anything unextractable is simply incorrect with a reason.
pub fn grade(raw_response: &str, expected: &ExpectedAnswer) -> GradeResult {
    if raw_response.trim().is_empty() {
        return GradeResult {
            correct: false,
            parsed_answer: None,
            failure_reason: Some(FailureReason::Empty),
        };
    }
    let Some(answer) = extract_answer(raw_response) else {
        return GradeResult {
            correct: false,
            parsed_answer: None,
            failure_reason: Some(FailureReason::Unparseable),
        };
    };
    match expected {
        ExpectedAnswer::Numeric(want) => match normalize_numeric(&answer) {
            Some(got) => verdict(got == *want, got.to_string()),
            None => verdict(false, render_value(&answer)),
        },
        ExpectedAnswer::Text(want) => match normalize_text(&answer) {
            Some(got) => verdict(got == *want, got),
            None => verdict(false, render_value(&answer)),
        },
    }
}

fn verdict(correct: bool, parsed: String) -> GradeResult {
    GradeResult {
        correct,
        parsed_answer: Some(parsed),
        failure_reason: if correct {
            None
        } else {
            Some(FailureReason::WrongValue)
        },
    }
}

/// Finds the first JSON object in the text that carries an `"answer"`
/// key, scanning candidate `{` positions left to right. Surrounding
/// prose and code fences fall away for free: they simply are not valid
/// JSON at those positions.
fn extract_answer(raw: &str) -> Option<serde_json::Value> {
    for (pos, _) in raw.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            if let Some(answer) = map.get("answer") {
                return Some(answer.clone());
            }
        }
    }
    None
}

/// Accepts JSON integers, integral floats, and quoted digit strings.
fn normalize_numeric(value: &serde_json::Value) -> Option<i64> {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Some(i)
            } else {
                n.as_f64().and_then(|f| {
                    if f.fract() == 0.0 && f >= i64::MIN as f64 && f <= i64::MAX as f64 {
                        Some(f as i64)
                    } else {
                        None
                    }
                })
            }
        }
        serde_json::Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    }
}

/// Accepts strings (trimmed) and bare integers rendered back to decimal
/// (a model answering `193` for expected `"193"` is right).
fn normalize_text(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.trim().to_string()),
        serde_json::Value::Number(n) if n.is_i64() || n.is_u64() => Some(n.to_string()),
        _ => None,
    }
}

fn render_value(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

/// Picks a filter dimension by fair coin, then a value uniformly from
/// the distinct values present (first-occurrence order).
fn draw_filter(rows: &[FactRow], rng: &mut impl Rng) -> RowFilter {
    let use_color = rng.gen_bool(0.5);
    if use_color {
        let colors = distinct(rows.iter().map(|r| r.color.as_str()));
        let color = colors[rng.gen_range(0..colors.len())].to_string();
        RowFilter::Color { color }
    } else {
        let singulars = distinct(rows.iter().map(|r| r.item.singular.as_str()));
        let chosen = singulars[rng.gen_range(0..singulars.len())];
        let item = rows
            .iter()
            .find(|r| r.item.singular == chosen)
            .expect("chosen form came from rows")
            .item
            .clone();
        RowFilter::Item {
            singular: item.singular,
            plural: item.plural,
        }
    }
}

fn distinct<'a>(values: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for v in values {
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{ItemNoun, Lexicons};
    use crate::synthgen::{generate_dataset, render_row};
    use proptest::prelude::*;

    fn row(name: &str, count: u32, color: &str, singular: &str, plural: &str) -> FactRow {
        let item = ItemNoun {
            singular: singular.into(),
            plural: plural.into(),
        };
        let sentence = render_row(name, count, color, &item).unwrap();
        FactRow {
            person_name: name.into(),
            count,
            color: color.into(),
            item,
            sentence,
        }
    }

    fn example_rows() -> Vec<FactRow> {
        vec![
            row("Abigail Holmes", 19, "red", "balloon", "balloons"),
            row("Zed Adams", 3, "red", "kite", "kites"),
            row("Bea Cole", 5, "blue", "pencil", "pencils"),
        ]
    }

    #[test]
    fn needle_oracle_returns_the_single_match() {
        let rows = example_rows();
        assert_eq!(oracle_needle(&rows, "Abigail Holmes").unwrap(), 19);
        assert_eq!(oracle_needle(&rows[..1], "Abigail Holmes").unwrap(), 19);
    }

    #[test]
    fn needle_oracle_rejects_zero_or_multiple_matches() {
        let rows = example_rows();
        assert!(matches!(
            oracle_needle(&rows, "Nobody Here"),
            Err(Error::OracleIntegrity(_))
        ));
        let mut dup = example_rows();
        dup.push(row("Abigail Holmes", 2, "blue", "coin", "coins"));
        assert!(matches!(
            oracle_needle(&dup, "Abigail Holmes"),
            Err(Error::OracleIntegrity(_))
        ));
    }

    #[test]
    fn needles_oracle_sums_matching_rows() {
        let rows = example_rows();
        let red = RowFilter::Color {
            color: "red".into(),
        };
        assert_eq!(oracle_needles(&rows, &red), 22);
        let green = RowFilter::Color {
            color: "green".into(),
        };
        assert_eq!(oracle_needles(&rows, &green), 0);
        let kites = RowFilter::Item {
            singular: "kite".into(),
            plural: "kites".into(),
        };
        assert_eq!(oracle_needles(&rows, &kites), 3);
    }

    #[test]
    fn summary_oracle_totals_everything() {
        let rows = example_rows();
        assert_eq!(oracle_summary(&rows), 27);
        assert_eq!(oracle_summary(&rows[..1]), 19);
    }

    #[test]
    fn sorted_oracle_orders_by_name_and_concatenates() {
        let rows = example_rows();
        let red = RowFilter::Color {
            color: "red".into(),
        };
        // Abigail Holmes (19) sorts before Zed Adams (3).
        assert_eq!(oracle_sorted(&rows, &red), "193");
        let none = RowFilter::Color {
            color: "white".into(),
        };
        assert_eq!(oracle_sorted(&rows, &none), "");
    }

    #[test]
    fn sorted_output_length_is_sum_of_digit_lengths() {
        let rows = example_rows();
        let red = RowFilter::Color {
            color: "red".into(),
        };
        let expected_len: usize = rows
            .iter()
            .filter(|r| r.color == "red")
            .map(|r| r.count.to_string().len())
            .sum();
        assert_eq!(oracle_sorted(&rows, &red).len(), expected_len);
    }

    #[test]
    fn summary_equals_needles_partitioned_by_color_and_by_item() {
        let lex = Lexicons::builtin();
        let ds = generate_dataset(300, 11, &lex).unwrap();
        let total = oracle_summary(&ds.rows);

        let color_sum: i64 = distinct(ds.rows.iter().map(|r| r.color.as_str()))
            .into_iter()
            .map(|c| {
                oracle_needles(
                    &ds.rows,
                    &RowFilter::Color { color: c.into() },
                )
            })
            .sum();
        assert_eq!(total, color_sum);

        let item_sum: i64 = distinct(ds.rows.iter().map(|r| r.item.singular.as_str()))
            .into_iter()
            .map(|s| {
                let item = ds.rows.iter().find(|r| r.item.singular == s).unwrap();
                oracle_needles(
                    &ds.rows,
                    &RowFilter::Item {
                        singular: item.item.singular.clone(),
                        plural: item.item.plural.clone(),
                    },
                )
            })
            .sum();
        assert_eq!(total, item_sum);
    }

    #[test]
    fn make_question_instantiates_the_templates() {
        let rows = example_rows();
        let mut rng = crate::rng::derive_rng(3, "test.q", &[], &[]);

        let q = make_question(TaskType::Needle, &rows, &mut rng).unwrap();
        assert!(q.question_text.starts_with("How many objects does "));
        assert!(q.question_text.ends_with(" have?"));
        let Selector::Person { name } = &q.selector else {
            panic!("needle selector must be a person");
        };
        assert_eq!(
            q.expected,
            ExpectedAnswer::Numeric(oracle_needle(&rows, name).unwrap())
        );

        let q = make_question(TaskType::Summary, &rows, &mut rng).unwrap();
        assert_eq!(q.question_text, "How many objects are there total?");
        assert_eq!(q.expected, ExpectedAnswer::Numeric(27));
    }

    #[test]
    fn filtered_questions_only_select_present_values() {
        let rows = vec![
            row("Ann Bell", 2, "red", "kite", "kites"),
            row("Bea Cole", 3, "red", "kite", "kites"),
        ];
        for seed in 0..200 {
            let mut rng = crate::rng::derive_rng(seed, "test.present", &[], &[]);
            for task in [TaskType::Needles, TaskType::Sorted] {
                let q = make_question(task, &rows, &mut rng).unwrap();
                match q.selector {
                    Selector::Filter { filter: RowFilter::Color { ref color } } => {
                        assert_eq!(color, "red")
                    }
                    Selector::Filter { filter: RowFilter::Item { ref singular, .. } } => {
                        assert_eq!(singular, "kite")
                    }
                    ref other => panic!("unexpected selector {other:?}"),
                }
            }
        }
    }

    #[test]
    fn needles_question_uses_both_template_variants() {
        let lex = Lexicons::builtin();
        let ds = generate_dataset(50, 5, &lex).unwrap();
        let (mut saw_color, mut saw_item) = (false, false);
        for seed in 0..50 {
            let mut rng = crate::rng::derive_rng(seed, "test.variant", &[], &[]);
            let q = make_question(TaskType::Needles, &ds.rows, &mut rng).unwrap();
            match &q.selector {
                Selector::Filter { filter: RowFilter::Color { color } } => {
                    saw_color = true;
                    assert_eq!(q.question_text, format!("How many {color} objects are there?"));
                }
                Selector::Filter { filter: RowFilter::Item { plural, .. } } => {
                    saw_item = true;
                    assert_eq!(q.question_text, format!("How many {plural} are there?"));
                }
                other => panic!("unexpected selector {other:?}"),
            }
        }
        assert!(saw_color && saw_item, "fair coin should hit both variants in 50 draws");
    }

    #[test]
    fn sorted_question_spells_out_the_full_instructions() {
        let rows = example_rows();
        let mut rng = crate::rng::derive_rng(8, "test.sorted-text", &[], &[]);
        let q = make_question(TaskType::Sorted, &rows, &mut rng).unwrap();
        assert!(q.question_text.starts_with("Find all people with "));
        assert!(q.question_text.contains("Sort them by first and last name."));
        assert!(q
            .question_text
            .ends_with("into one long string value in the order they were sorted."));
    }

    #[test]
    fn make_question_rejects_empty_rows() {
        let mut rng = crate::rng::derive_rng(1, "test.empty", &[], &[]);
        assert!(make_question(TaskType::Needle, &[], &mut rng).is_err());
    }

    #[test]
    fn make_question_is_deterministic_per_stream() {
        let rows = example_rows();
        for task in TaskType::ALL {
            let mut a = crate::rng::derive_rng(77, "test.det", &[], &[]);
            let mut b = crate::rng::derive_rng(77, "test.det", &[], &[]);
            assert_eq!(
                make_question(task, &rows, &mut a).unwrap(),
                make_question(task, &rows, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn grades_exact_numeric_answers() {
        let g = grade(r#"{"answer": 19}"#, &ExpectedAnswer::Numeric(19));
        assert!(g.correct);
        assert_eq!(g.parsed_answer.as_deref(), Some("19"));
        assert_eq!(g.failure_reason, None);
    }

    #[test]
    fn grades_wrong_numeric_answers() {
        let g = grade(r#"{"answer": 18}"#, &ExpectedAnswer::Numeric(19));
        assert!(!g.correct);
        assert_eq!(g.failure_reason, Some(FailureReason::WrongValue));
        assert_eq!(g.parsed_answer.as_deref(), Some("18"));
    }

    #[test]
    fn grades_fenced_string_answers() {
        let raw = "Sure, here you go:\n```json\n{\"answer\": \"193\"}\n```\n";
        let g = grade(raw, &ExpectedAnswer::Text("193".into()));
        assert!(g.correct);
    }

    #[test]
    fn grades_quoted_numerals_and_integral_floats() {
        assert!(grade(r#"{"answer": "19"}"#, &ExpectedAnswer::Numeric(19)).correct);
        assert!(grade(r#"{"answer": " 19 "}"#, &ExpectedAnswer::Numeric(19)).correct);
        assert!(grade(r#"{"answer": 19.0}"#, &ExpectedAnswer::Numeric(19)).correct);
        assert!(!grade(r#"{"answer": 19.5}"#, &ExpectedAnswer::Numeric(19)).correct);
    }

    #[test]
    fn grades_numeric_answer_for_text_expectation() {
        assert!(grade(r#"{"answer": 193}"#, &ExpectedAnswer::Text("193".into())).correct);
        assert!(!grade(r#"{"answer": 192}"#, &ExpectedAnswer::Text("193".into())).correct);
    }

    #[test]
    fn unparseable_and_empty_responses_are_classified() {
        let g = grade("I cannot answer that.", &ExpectedAnswer::Numeric(1));
        assert!(!g.correct);
        assert_eq!(g.failure_reason, Some(FailureReason::Unparseable));
        assert_eq!(g.parsed_answer, None);

        let g = grade("   \n\t ", &ExpectedAnswer::Numeric(1));
        assert_eq!(g.failure_reason, Some(FailureReason::Empty));
    }

    #[test]
    fn first_answer_object_wins() {
        let raw = r#"{"not_it": 5} then {"answer": 7} and later {"answer": 8}"#;
        let g = grade(raw, &ExpectedAnswer::Numeric(7));
        assert!(g.correct);
    }

    #[test]
    fn grading_is_stable_under_reserialization() {
        let raw = "prefix {\"answer\":   19 \n} suffix";
        let g1 = grade(raw, &ExpectedAnswer::Numeric(19));
        assert!(g1.correct);
        // Re-serialize the embedded object compactly and grade again.
        let reserialized = r#"{"answer":19}"#;
        let g2 = grade(reserialized, &ExpectedAnswer::Numeric(19));
        assert_eq!(g1.correct, g2.correct);
        assert_eq!(g1.parsed_answer, g2.parsed_answer);
    }

    proptest! {
        #[test]
        fn grade_never_panics(raw in ".*") {
            let _ = grade(&raw, &ExpectedAnswer::Numeric(5));
            let _ = grade(&raw, &ExpectedAnswer::Text("12".into()));
        }

        #[test]
        fn oracles_are_pure(seed in 0u64..500) {
            let lex = Lexicons::builtin();
            let ds = generate_dataset(40, seed, &lex).unwrap();
            let filter = RowFilter::Color { color: ds.rows[0].color.clone() };
            prop_assert_eq!(
                oracle_needles(&ds.rows, &filter),
                oracle_needles(&ds.rows, &filter)
            );
            prop_assert_eq!(oracle_summary(&ds.rows), oracle_summary(&ds.rows));
            prop_assert_eq!(
                oracle_sorted(&ds.rows, &filter),
                oracle_sorted(&ds.rows, &filter)
            );
        }
    }
}
