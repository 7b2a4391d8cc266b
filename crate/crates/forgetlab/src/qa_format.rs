//! Domain types for instruction-tuning samples in the five question formats,
//! plus JSONL (de)serialization and validation.
//!
//! A sample is one training record: an opaque image reference, the core
//! question, a response-format prompt (RFP) dictating the answer style, an
//! option list (multiple-choice only, plus the short-answer option-list
//! variant), the ground-truth label, its format tag, and provenance. Image
//! content is never opened — the pipeline manipulates text mechanics, not
//! pixels.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five answer styles a sample can ask for.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum QuestionFormat {
    #[serde(rename = "yes_no")]
    YesNo,
    #[serde(rename = "mcq")]
    MultipleChoice,
    #[serde(rename = "short")]
    ShortAnswer,
    #[serde(rename = "brief")]
    BriefExplanation,
    #[serde(rename = "detail")]
    DetailedExplanation,
}

impl QuestionFormat {
    /// All five variants in canonical order.
    pub const ALL: [QuestionFormat; 5] = [
        QuestionFormat::YesNo,
        QuestionFormat::MultipleChoice,
        QuestionFormat::ShortAnswer,
        QuestionFormat::BriefExplanation,
        QuestionFormat::DetailedExplanation,
    ];

    /// Position of this format in [`QuestionFormat::ALL`].
    pub fn index(self) -> usize {
        QuestionFormat::ALL
            .iter()
            .position(|f| *f == self)
            .expect("format is one of the canonical five")
    }

    /// The wire/file tag for this format.
    pub fn tag(self) -> &'static str {
        match self {
            QuestionFormat::YesNo => "yes_no",
            QuestionFormat::MultipleChoice => "mcq",
            QuestionFormat::ShortAnswer => "short",
            QuestionFormat::BriefExplanation => "brief",
            QuestionFormat::DetailedExplanation => "detail",
        }
    }

    /// Whether samples of this format carry a direct answer (as opposed to
    /// a free-form explanatory label).
    pub fn has_direct_answer(self) -> bool {
        matches!(
            self,
            QuestionFormat::YesNo | QuestionFormat::MultipleChoice | QuestionFormat::ShortAnswer
        )
    }
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Where a sample came from: the source corpus, or a style transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Original,
    Transformed {
        source: QuestionFormat,
        target: QuestionFormat,
    },
}

/// One instruction-tuning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSample {
    /// Unique within a dataset.
    pub id: String,
    /// Opaque reference (path or URI); empty for text-only tasks.
    pub image: String,
    /// Core question text, before the RFP. For yes/no conversions this also
    /// carries the candidate-answer line (the rendered instruction is
    /// question + candidate + RFP).
    pub question: String,
    /// Response format prompt appended to the instruction.
    pub rfp: String,
    /// Option texts; empty unless multiple-choice or the short-answer
    /// option-list variant.
    pub options: Vec<String>,
    /// Ground-truth answer. For multiple-choice this is the option letter.
    pub gt_label: String,
    pub format: QuestionFormat,
    pub provenance: Provenance,
}

/// Uppercase letter addressing option `index` ("A", "B", …).
pub fn option_letter(index: usize) -> Option<char> {
    if index < 26 {
        Some((b'A' + index as u8) as char)
    } else {
        None
    }
}

/// Inverse of [`option_letter`].
pub fn letter_index(letter: &str) -> Option<usize> {
    let mut chars = letter.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Some((c as u8 - b'A') as usize),
        _ => None,
    }
}

impl InstructionSample {
    /// The full instruction text: question, option list (when present), and
    /// RFP, joined by single newlines. Multiple-choice options render as
    /// lettered lines ("A. Yes"); the short-answer option-list variant
    /// renders them as one "a, b, …, or c" line.
    pub fn render_instruction(&self) -> String {
        let mut segments = vec![self.question.clone()];
        match self.format {
            QuestionFormat::MultipleChoice => {
                for (i, opt) in self.options.iter().enumerate() {
                    let letter = option_letter(i).unwrap_or('?');
                    segments.push(format!("{letter}. {opt}"));
                }
            }
            QuestionFormat::ShortAnswer if !self.options.is_empty() => {
                segments.push(render_option_list(&self.options));
            }
            _ => {}
        }
        segments.push(self.rfp.clone());
        segments.join("\n")
    }
}

/// Comma-separated option list with "or" before the last entry, as injected
/// into short-answer conversions of option-based tasks.
pub fn render_option_list(options: &[String]) -> String {
    match options.len() {
        0 => String::new(),
        1 => options[0].clone(),
        n => {
            let head = options[..n - 1].join(", ");
            format!("{head}, or {}", options[n - 1])
        }
    }
}

/// An ordered collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<InstructionSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<InstructionSample>) -> Self {
        Dataset {
            name: name.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-format sample counts, recomputed from the samples.
    pub fn format_histogram(&self) -> BTreeMap<QuestionFormat, usize> {
        let mut hist = BTreeMap::new();
        for f in QuestionFormat::ALL {
            hist.insert(f, 0);
        }
        for s in &self.samples {
            *hist.entry(s.format).or_insert(0) += 1;
        }
        hist
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("sample {id:?}: {}", violations.join("; "))]
    InvalidSample { id: String, violations: Vec<String> },
}

/// The standard response-format prompts plus the short-answer override used
/// by option-list tasks; `validate_sample` accepts exactly these.
pub(crate) fn builtin_rfp_catalog() -> [&'static str; 8] {
    [
        crate::asd::RFP_YES_NO,
        crate::asd::RFP_MCQ,
        crate::asd::RFP_SHORT,
        crate::asd::RFP_BRIEF_DIRECT,
        crate::asd::RFP_BRIEF_INDIRECT,
        crate::asd::RFP_DETAIL_DIRECT,
        crate::asd::RFP_DETAIL_INDIRECT,
        crate::asd::RFP_SHORT_OPTION_LIST,
    ]
}

/// Check one sample against the format invariants; an empty report means
/// valid. `extra_rfps` lists task-specific RFP overrides registered in
/// config, accepted in addition to the built-in catalog.
pub fn validate_sample_with_rfps(sample: &InstructionSample, extra_rfps: &[String]) -> Vec<String> {
    let mut violations = Vec::new();
    match sample.format {
        QuestionFormat::MultipleChoice => {
            if sample.options.is_empty() {
                violations.push("multiple-choice sample must have options".to_string());
            } else if sample.options.len() > 26 {
                violations.push(format!(
                    "multiple-choice sample has {} options; letters address at most 26",
                    sample.options.len()
                ));
            }
            match letter_index(&sample.gt_label) {
                Some(idx) if idx < sample.options.len() => {}
                Some(idx) => violations.push(format!(
                    "gt_label {:?} addresses option {} but only {} options exist",
                    sample.gt_label,
                    idx + 1,
                    sample.options.len()
                )),
                None => violations.push(format!(
                    "multiple-choice gt_label must be a single letter A-Z, got {:?}",
                    sample.gt_label
                )),
            }
        }
        QuestionFormat::YesNo => {
            if sample.gt_label != "Yes" && sample.gt_label != "No" {
                violations.push(format!(
                    "yes/no gt_label must be \"Yes\" or \"No\", got {:?}",
                    sample.gt_label
                ));
            }
            if !sample.options.is_empty() {
                violations.push("yes/no sample must not carry options".to_string());
            }
        }
        QuestionFormat::ShortAnswer => {
            // Options are permitted here: the option-list variant keeps them.
        }
        QuestionFormat::BriefExplanation | QuestionFormat::DetailedExplanation => {
            if !sample.options.is_empty() {
                violations.push(format!(
                    "{} sample must not carry options",
                    sample.format
                ));
            }
        }
    }
    let known = builtin_rfp_catalog();
    if !known.contains(&sample.rfp.as_str()) && !extra_rfps.iter().any(|r| r == &sample.rfp) {
        violations.push(format!("rfp is not a catalog string: {:?}", sample.rfp));
    }
    if let Provenance::Transformed { source, target } = sample.provenance {
        if source == target {
            violations.push(format!("provenance source and target both {source}"));
        }
        if sample.format != target {
            violations.push(format!(
                "format {} does not match provenance target {target}",
                sample.format
            ));
        }
    }
    violations
}

/// [`validate_sample_with_rfps`] against the built-in RFP catalog only.
pub fn validate_sample(sample: &InstructionSample) -> Vec<String> {
    validate_sample_with_rfps(sample, &[])
}

/// Parse a JSONL dataset (one self-describing record per line), checking all
/// sample invariants and id uniqueness. Input order is preserved.
pub fn parse_dataset(name: &str, text: &str) -> Result<Dataset, DatasetError> {
    parse_dataset_with_rfps(name, text, &[])
}

/// [`parse_dataset`] accepting additional registered RFP overrides.
pub fn parse_dataset_with_rfps(
    name: &str,
    text: &str,
    extra_rfps: &[String],
) -> Result<Dataset, DatasetError> {
    let mut samples = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructionSample =
            serde_json::from_str(line).map_err(|e| DatasetError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen_ids.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        let violations = validate_sample_with_rfps(&sample, extra_rfps);
        if !violations.is_empty() {
            return Err(DatasetError::InvalidSample {
                id: sample.id,
                violations,
            });
        }
        samples.push(sample);
    }
    Ok(Dataset::new(name, samples))
}

/// Serialize to JSONL, one record per line in dataset order. Round-trips
/// through [`parse_dataset`] field-for-field.
pub fn serialize_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    for sample in &dataset.samples {
        out.push_str(&serde_json::to_string(sample).expect("samples serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn yes_no_sample(id: &str) -> InstructionSample {
        InstructionSample {
            id: id.to_string(),
            image: "img/001.jpg".to_string(),
            question: "Is the sky blue in this image?".to_string(),
            rfp: crate::asd::RFP_YES_NO.to_string(),
            options: vec![],
            gt_label: "Yes".to_string(),
            format: QuestionFormat::YesNo,
            provenance: Provenance::Original,
        }
    }

    fn mcq_sample(id: &str) -> InstructionSample {
        InstructionSample {
            id: id.to_string(),
            image: String::new(),
            question: "Which rock is igneous?".to_string(),
            rfp: crate::asd::RFP_MCQ.to_string(),
            options: vec![
                "granite".to_string(),
                "limestone".to_string(),
                "shale".to_string(),
                "sandstone".to_string(),
            ],
            gt_label: "A".to_string(),
            format: QuestionFormat::MultipleChoice,
            provenance: Provenance::Original,
        }
    }

    #[test]
    fn parse_empty_text_yields_empty_dataset() {
        let d = parse_dataset("empty", "").unwrap();
        assert!(d.is_empty());
        assert_eq!(serialize_dataset(&d), "");
    }

    #[test]
    fn parse_single_yes_no_line() {
        let text = serialize_dataset(&Dataset::new("one", vec![yes_no_sample("a")]));
        let d = parse_dataset("one", &text).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.format_histogram()[&QuestionFormat::YesNo], 1);
        assert_eq!(d.format_histogram()[&QuestionFormat::MultipleChoice], 0);
    }

    #[test]
    fn mcq_without_options_is_rejected() {
        let mut bad = mcq_sample("m");
        bad.options.clear();
        let text = serde_json::to_string(&bad).unwrap();
        let err = parse_dataset("bad", &text).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidSample { .. }));
        assert!(err.to_string().contains("options"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = serde_json::to_string(&yes_no_sample("a")).unwrap();
        let text = format!("{good}\n{{\"id\": 42}}\n");
        let err = parse_dataset("bad", &text).unwrap_err();
        match err {
            DatasetError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = serialize_dataset(&Dataset::new(
            "dup",
            vec![yes_no_sample("a"), yes_no_sample("a")],
        ));
        let err = parse_dataset("dup", &text).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut value = serde_json::to_value(yes_no_sample("a")).unwrap();
        value["extra"] = serde_json::json!(1);
        let err = parse_dataset("x", &value.to_string()).unwrap_err();
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn validate_sample_reports() {
        assert!(validate_sample(&yes_no_sample("a")).is_empty());

        let mut maybe = yes_no_sample("b");
        maybe.gt_label = "Maybe".to_string();
        let report = validate_sample(&maybe);
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("Yes"));

        let mut out_of_range = mcq_sample("c");
        out_of_range.gt_label = "E".to_string();
        let report = validate_sample(&out_of_range);
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("4 options"));
    }

    #[test]
    fn transformed_provenance_must_match_format() {
        let mut s = yes_no_sample("t");
        s.provenance = Provenance::Transformed {
            source: QuestionFormat::ShortAnswer,
            target: QuestionFormat::MultipleChoice,
        };
        let report = validate_sample(&s);
        assert!(report.iter().any(|v| v.contains("provenance target")));
    }

    #[test]
    fn unknown_rfp_is_flagged_unless_registered() {
        let mut s = yes_no_sample("r");
        s.rfp = "Reply in the task's house style.".to_string();
        assert_eq!(validate_sample(&s).len(), 1);
        assert!(validate_sample_with_rfps(&s, &[s.rfp.clone()]).is_empty());
    }

    #[test]
    fn render_instruction_orders_segments() {
        let s = mcq_sample("m");
        let text = s.render_instruction();
        let expected = format!(
            "Which rock is igneous?\nA. granite\nB. limestone\nC. shale\nD. sandstone\n{}",
            crate::asd::RFP_MCQ
        );
        assert_eq!(text, expected);
    }

    #[test]
    fn render_option_list_uses_or_before_last() {
        let opts: Vec<String> = ["red", "green", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(render_option_list(&opts), "red, green, or blue");
        assert_eq!(render_option_list(&opts[..1]), "red");
    }

    fn arb_format() -> impl Strategy<Value = QuestionFormat> {
        prop::sample::select(QuestionFormat::ALL.to_vec())
    }

    fn build_sample(
        idx: usize,
        format: QuestionFormat,
        question: String,
        word: String,
        flag: bool,
    ) -> InstructionSample {
        let mut s = InstructionSample {
            id: format!("s{idx}"),
            image: if flag {
                format!("img/{idx}.png")
            } else {
                String::new()
            },
            question,
            rfp: crate::asd::rfp_for(format, true).to_string(),
            options: vec![],
            gt_label: word,
            format,
            provenance: Provenance::Original,
        };
        match format {
            QuestionFormat::YesNo => {
                s.gt_label = if flag { "Yes" } else { "No" }.to_string();
            }
            QuestionFormat::MultipleChoice => {
                s.options = vec![
                    "alpha".to_string(),
                    "beta".to_string(),
                    "gamma".to_string(),
                ];
                s.gt_label = if flag { "A" } else { "C" }.to_string();
            }
            QuestionFormat::BriefExplanation | QuestionFormat::DetailedExplanation => {
                s.rfp = crate::asd::rfp_for(format, flag).to_string();
            }
            QuestionFormat::ShortAnswer => {}
        }
        s
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(
            parts in prop::collection::vec(
                (arb_format(), "[a-z ]{1,30}", "[a-z]{1,8}", any::<bool>()),
                0..12,
            )
        ) {
            let samples: Vec<InstructionSample> = parts
                .into_iter()
                .enumerate()
                .map(|(i, (f, q, w, b))| build_sample(i, f, q, w, b))
                .collect();
            let d = Dataset::new("prop", samples);
            let text = serialize_dataset(&d);
            let back = parse_dataset("prop", &text).unwrap();
            prop_assert_eq!(back.format_histogram().values().sum::<usize>(), d.len());
            prop_assert_eq!(back.samples, d.samples);
        }
    }
}
