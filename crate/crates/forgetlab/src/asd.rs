//! Answer-style diversification: rewriting a slice of a dataset into the
//! other four answer styles.
//!
//! Instruction-tuned models tend to collapse onto the single answer style a
//! task was trained with; diversifying a fixed percentage of each task's
//! samples into the remaining styles keeps every style exercised. This
//! module plans which samples change style ([`plan_partition`]), applies the
//! per-style conversion rules ([`to_yes_no`], [`to_mcq`], [`to_short`],
//! [`to_explanatory`]), and drives whole datasets through them
//! ([`transform_dataset`]).
//!
//! Everything is deterministic given `(seed, sample index)`: planning
//! shuffles indices with a seeded generator, and each sample gets its own
//! derived stream, so re-running a conversion reproduces the output
//! byte for byte regardless of ordering or parallelism elsewhere.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa_format::{
    letter_index, option_letter, InstructionSample, Provenance, QuestionFormat,
};
use crate::rewriter::{check_response, RewriteError, RewriteKind, RewriteRequest, Rewriter};
use crate::rng::{derived_rng, salt};

/// Response format prompt for yes/no questions.
pub const RFP_YES_NO: &str = "Is the answer correct? Answer 'Yes' or 'No'.";
/// Response format prompt for multiple-choice questions.
pub const RFP_MCQ: &str = "Answer with the option's letter from the given choices directly.";
/// Response format prompt for short answers.
pub const RFP_SHORT: &str = "Answer the question using a single word or phrase.";
/// Response format prompt for brief explanations when the source style had a
/// direct answer.
pub const RFP_BRIEF_DIRECT: &str = "Answer the question and provide a brief explanation.";
/// Response format prompt for brief explanations when the source style did
/// not have a direct answer.
pub const RFP_BRIEF_INDIRECT: &str = "Answer the question using a brief explanation/description.";
/// Response format prompt for detailed explanations when the source style
/// had a direct answer.
pub const RFP_DETAIL_DIRECT: &str = "Answer the question and provide a detailed explanation.";
/// Response format prompt for detailed explanations when the source style
/// did not have a direct answer.
pub const RFP_DETAIL_INDIRECT: &str =
    "Answer the question using a detailed explanation/description.";
/// Response format prompt for short answers chosen from a rendered option
/// list (the option-list rule override).
pub const RFP_SHORT_OPTION_LIST: &str = "Directly give the answer.";

/// Words requested from the rewriter for brief explanations.
pub const BRIEF_TARGET_WORDS: u32 = 20;
/// Words requested from the rewriter for detailed explanations.
pub const DETAIL_TARGET_WORDS: u32 = 50;
/// Maximum words a condensed short answer may have.
pub const SHORT_MAX_WORDS: u32 = 10;
/// Accepted word-count band for brief explanations (inclusive).
pub const BRIEF_WORD_BAND: (usize, usize) = (10, 35);
/// Accepted word-count band for detailed explanations (inclusive).
pub const DETAIL_WORD_BAND: (usize, usize) = (30, 75);

/// The response format prompt appended when transforming into `target`.
///
/// Explanatory targets phrase the prompt differently depending on whether
/// the source style carried a direct answer (the explanation then wraps that
/// answer) or was itself explanatory (the explanation stands alone).
pub fn rfp_for(target: QuestionFormat, source_has_direct_answer: bool) -> &'static str {
    match (target, source_has_direct_answer) {
        (QuestionFormat::YesNo, _) => RFP_YES_NO,
        (QuestionFormat::MultipleChoice, _) => RFP_MCQ,
        (QuestionFormat::ShortAnswer, _) => RFP_SHORT,
        (QuestionFormat::BriefExplanation, true) => RFP_BRIEF_DIRECT,
        (QuestionFormat::BriefExplanation, false) => RFP_BRIEF_INDIRECT,
        (QuestionFormat::DetailedExplanation, true) => RFP_DETAIL_DIRECT,
        (QuestionFormat::DetailedExplanation, false) => RFP_DETAIL_INDIRECT,
    }
}

/// The prompt an untransformed sample of `format` conventionally carries.
pub fn default_rfp(format: QuestionFormat) -> &'static str {
    rfp_for(format, format.has_direct_answer())
}

#[derive(Debug, Error)]
pub enum AsdError {
    #[error("diversification percent {0} is outside [0, 100]")]
    BadPercent(f64),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error("sample {id}: {message}")]
    BadSample { id: String, message: String },
}

impl AsdError {
    fn bad(sample: &InstructionSample, message: impl Into<String>) -> Self {
        AsdError::BadSample {
            id: sample.id.clone(),
            message: message.into(),
        }
    }
}

/// Tuning knobs for a diversification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsdConfig {
    /// Percentage of each source-format group to transform, in [0, 100].
    pub percent: f64,
    /// Root seed; all per-plan and per-sample generators derive from it.
    pub seed: u64,
    /// Abort on the first conversion failure instead of retaining the
    /// original sample.
    pub strict: bool,
}

impl Default for AsdConfig {
    fn default() -> Self {
        AsdConfig {
            percent: 20.0,
            seed: 0,
            strict: false,
        }
    }
}

/// Dataset-specific rule overrides for multiple-choice and short-answer
/// conversions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleOverrides {
    /// Short-answer conversions from multiple-choice keep the option list in
    /// the instruction and switch to [`RFP_SHORT_OPTION_LIST`].
    pub short_answer_option_list: bool,
    /// Draw multiple-choice distractors from this pool instead of calling
    /// the rewriter.
    pub distractor_pool: Vec<String>,
    /// Treat ground-truth labels as `[x1, y1, x2, y2]` boxes and synthesize
    /// distractor boxes with low overlap instead of calling the rewriter.
    /// Takes precedence over `distractor_pool`.
    pub bbox_distractors: bool,
}

/// Which samples of one source-format group change style, and into what.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformPlan {
    pub source: QuestionFormat,
    /// Per-target quotas in canonical order with the source removed; earlier
    /// targets absorb the remainder, so quotas are non-increasing.
    pub quotas: Vec<(QuestionFormat, usize)>,
    /// One entry per sample of the group, in input order; `None` retains the
    /// original style.
    pub assignments: Vec<Option<QuestionFormat>>,
}

impl TransformPlan {
    /// Total number of samples scheduled for transformation.
    pub fn planned(&self) -> usize {
        self.quotas.iter().map(|(_, q)| q).sum()
    }
}

fn format_pos(format: QuestionFormat) -> usize {
    format.index()
}

/// Plan which of `n` samples of `source` format get transformed.
///
/// The transform count is `n * percent / 100` rounded half to even. It is
/// split evenly over the four non-source formats in canonical order, with
/// the remainder going to the earliest targets, so quotas differ by at most
/// one. Sample selection shuffles indices with a generator derived from
/// `(seed, source, n)`.
pub fn plan_partition(
    n: usize,
    percent: f64,
    seed: u64,
    source: QuestionFormat,
) -> Result<TransformPlan, AsdError> {
    if !percent.is_finite() || !(0.0..=100.0).contains(&percent) {
        return Err(AsdError::BadPercent(percent));
    }
    let t = crate::matrix::round_ties_even_usize(n as f64 * percent / 100.0).min(n);
    let targets: Vec<QuestionFormat> = QuestionFormat::ALL
        .into_iter()
        .filter(|f| *f != source)
        .collect();
    let base = t / targets.len();
    let remainder = t % targets.len();
    let quotas: Vec<(QuestionFormat, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, f)| (*f, base + usize::from(i < remainder)))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, salt("asd-plan", format_pos(source) as u64, n as u64));
    order.shuffle(&mut rng);

    let mut assignments = vec![None; n];
    let mut cursor = 0;
    for (target, quota) in &quotas {
        for &idx in &order[cursor..cursor + quota] {
            assignments[idx] = Some(*target);
        }
        cursor += quota;
    }
    Ok(TransformPlan {
        source,
        quotas,
        assignments,
    })
}

/// Counters describing one [`transform_dataset`] run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub total: usize,
    /// Samples left in their original style (includes failed conversions).
    pub retained: usize,
    pub transformed: usize,
    /// Conversions that failed and fell back to the original sample.
    pub failed: usize,
    /// Transform counts keyed `"source->target"` by format tag.
    pub by_pair: BTreeMap<String, usize>,
    /// First few failure messages, for diagnostics.
    pub failures: Vec<String>,
}

const MAX_LOGGED_FAILURES: usize = 32;

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// The answer content a direct-answer sample asserts: the ground-truth label
/// itself, except for multiple-choice where the letter is dereferenced to
/// the option text.
fn direct_answer_content(sample: &InstructionSample) -> Result<String, AsdError> {
    if sample.format != QuestionFormat::MultipleChoice {
        return Ok(sample.gt_label.clone());
    }
    letter_index(&sample.gt_label)
        .and_then(|i| sample.options.get(i))
        .cloned()
        .ok_or_else(|| {
            AsdError::bad(
                sample,
                format!(
                    "ground-truth letter {:?} does not address one of {} options",
                    sample.gt_label,
                    sample.options.len()
                ),
            )
        })
}

/// Run a rewrite and re-validate the response locally, so conversion logic
/// never trusts a backend to have checked its own output.
fn call_rewriter(
    rewriter: &dyn Rewriter,
    request: &RewriteRequest,
) -> Result<RewriteResponseTexts, AsdError> {
    let response = rewriter.rewrite(request)?;
    check_response(request, &response)?;
    Ok(response.texts)
}

type RewriteResponseTexts = Vec<String>;

/// Convert a sample into a yes/no verification question.
///
/// The candidate answer is appended to the question on its own line; the new
/// label says whether the candidate is correct. Incorrect candidates come
/// from the sample's own wrong options (multiple-choice) or the rewriter
/// (all other styles).
pub fn to_yes_no<R: Rng>(
    sample: &InstructionSample,
    want_correct: bool,
    rng: &mut R,
    rewriter: &dyn Rewriter,
) -> Result<InstructionSample, AsdError> {
    let source = sample.format;
    if source == QuestionFormat::YesNo {
        return Err(AsdError::bad(sample, "sample is already yes/no"));
    }
    let correct_content = direct_answer_content(sample)?;
    let candidate = if want_correct {
        correct_content
    } else if source == QuestionFormat::MultipleChoice {
        let correct_idx = letter_index(&sample.gt_label);
        let incorrect: Vec<&String> = sample
            .options
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != correct_idx)
            .map(|(_, o)| o)
            .collect();
        match incorrect.as_slice() {
            [] => rewrite_incorrect(sample, &correct_content, rewriter)?,
            picks => picks[rng.random_range(0..picks.len())].clone(),
        }
    } else {
        rewrite_incorrect(sample, &correct_content, rewriter)?
    };
    Ok(InstructionSample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        question: format!("{}\n{}", sample.question, candidate),
        rfp: RFP_YES_NO.to_string(),
        options: Vec::new(),
        gt_label: if want_correct { "Yes" } else { "No" }.to_string(),
        format: QuestionFormat::YesNo,
        provenance: Provenance::Transformed {
            source,
            target: QuestionFormat::YesNo,
        },
    })
}

fn rewrite_incorrect(
    sample: &InstructionSample,
    correct_content: &str,
    rewriter: &dyn Rewriter,
) -> Result<String, AsdError> {
    let request = RewriteRequest::new(
        RewriteKind::IncorrectAnswer,
        &sample.question,
        correct_content,
    );
    Ok(call_rewriter(rewriter, &request)?.swap_remove(0))
}

/// Convert a sample into a multiple-choice question.
///
/// Yes/no sources keep their two possible answers as the fixed option list
/// `["Yes", "No"]`; every other source gets three distractors (from the
/// rewriter, a configured pool, or synthesized boxes) shuffled together with
/// the correct answer.
pub fn to_mcq<R: Rng>(
    sample: &InstructionSample,
    rng: &mut R,
    rewriter: &dyn Rewriter,
    overrides: &RuleOverrides,
) -> Result<InstructionSample, AsdError> {
    let source = sample.format;
    if source == QuestionFormat::MultipleChoice {
        return Err(AsdError::bad(sample, "sample is already multiple-choice"));
    }
    let (options, gt_label) = if source == QuestionFormat::YesNo {
        let letter = match sample.gt_label.as_str() {
            "Yes" => "A",
            "No" => "B",
            other => {
                return Err(AsdError::bad(
                    sample,
                    format!("yes/no label must be Yes or No, got {other:?}"),
                ))
            }
        };
        (vec!["Yes".to_string(), "No".to_string()], letter.to_string())
    } else {
        let correct = sample.gt_label.clone();
        let distractors = if overrides.bbox_distractors {
            bbox_distractors(sample, &correct, rng)?
        } else if !overrides.distractor_pool.is_empty() {
            pool_distractors(sample, &correct, &overrides.distractor_pool, rng)?
        } else {
            let request = RewriteRequest::new(
                RewriteKind::Distractors { count: 3 },
                &sample.question,
                &correct,
            );
            call_rewriter(rewriter, &request)?
        };
        let mut options = Vec::with_capacity(4);
        options.push(correct.clone());
        options.extend(distractors);
        options.shuffle(rng);
        let position = options
            .iter()
            .position(|o| *o == correct)
            .expect("correct answer is one of the options");
        let letter = option_letter(position).expect("at most four options");
        (options, letter.to_string())
    };
    Ok(InstructionSample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        question: sample.question.clone(),
        rfp: RFP_MCQ.to_string(),
        options,
        gt_label,
        format: QuestionFormat::MultipleChoice,
        provenance: Provenance::Transformed {
            source,
            target: QuestionFormat::MultipleChoice,
        },
    })
}

fn pool_distractors<R: Rng>(
    sample: &InstructionSample,
    correct: &str,
    pool: &[String],
    rng: &mut R,
) -> Result<Vec<String>, AsdError> {
    let correct_lower = correct.to_lowercase();
    let mut candidates: Vec<&String> = pool
        .iter()
        .filter(|p| p.to_lowercase() != correct_lower)
        .collect();
    if candidates.len() < 3 {
        return Err(AsdError::bad(
            sample,
            format!(
                "distractor pool has only {} entries distinct from the label",
                candidates.len()
            ),
        ));
    }
    candidates.shuffle(rng);
    Ok(candidates[..3].iter().map(|s| s.to_string()).collect())
}

/// Convert a sample into a short-answer question.
///
/// Yes/no sources either keep their one-word label or (alternating) have the
/// whole question rewritten so the answer is no longer yes/no.
/// Multiple-choice sources answer with the correct option's text, dropping
/// the options unless the option-list override keeps them. Explanatory
/// sources get their label condensed.
pub fn to_short(
    sample: &InstructionSample,
    want_rewrite: bool,
    rewriter: &dyn Rewriter,
    overrides: &RuleOverrides,
) -> Result<InstructionSample, AsdError> {
    let source = sample.format;
    let mut question = sample.question.clone();
    let mut options = Vec::new();
    let mut rfp = RFP_SHORT;
    let gt_label = match source {
        QuestionFormat::ShortAnswer => {
            return Err(AsdError::bad(sample, "sample is already short-answer"))
        }
        QuestionFormat::YesNo => {
            if want_rewrite {
                let request = RewriteRequest::new(
                    RewriteKind::RewriteYnQuestion,
                    &sample.question,
                    &sample.gt_label,
                );
                let mut texts = call_rewriter(rewriter, &request)?;
                question = texts.swap_remove(0);
                texts.swap_remove(0)
            } else {
                sample.gt_label.clone()
            }
        }
        QuestionFormat::MultipleChoice => {
            let content = direct_answer_content(sample)?;
            if overrides.short_answer_option_list {
                options = sample.options.clone();
                rfp = RFP_SHORT_OPTION_LIST;
            }
            content
        }
        QuestionFormat::BriefExplanation | QuestionFormat::DetailedExplanation => {
            let request = RewriteRequest::new(
                RewriteKind::Condense {
                    max_words: SHORT_MAX_WORDS,
                },
                &sample.question,
                &sample.gt_label,
            );
            call_rewriter(rewriter, &request)?.swap_remove(0)
        }
    };
    Ok(InstructionSample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        question,
        rfp: rfp.to_string(),
        options,
        gt_label,
        format: QuestionFormat::ShortAnswer,
        provenance: Provenance::Transformed {
            source,
            target: QuestionFormat::ShortAnswer,
        },
    })
}

/// Convert a sample into a brief or detailed explanatory question.
///
/// Direct-answer sources get an explanation that opens with the original
/// answer; explanatory sources are reformulated to the other length. Word
/// bands are enforced only on backends that guarantee them.
pub fn to_explanatory(
    sample: &InstructionSample,
    target: QuestionFormat,
    rewriter: &dyn Rewriter,
) -> Result<InstructionSample, AsdError> {
    let (target_words, band) = match target {
        QuestionFormat::BriefExplanation => (BRIEF_TARGET_WORDS, BRIEF_WORD_BAND),
        QuestionFormat::DetailedExplanation => (DETAIL_TARGET_WORDS, DETAIL_WORD_BAND),
        other => {
            return Err(AsdError::bad(
                sample,
                format!("explanatory target must be brief or detail, got {other}"),
            ))
        }
    };
    let source = sample.format;
    if source == target {
        return Err(AsdError::bad(sample, "sample already has the target style"));
    }
    let direct = source.has_direct_answer();
    let gt_label = if direct {
        let content = direct_answer_content(sample)?;
        let request = RewriteRequest::new(
            RewriteKind::Explain { target_words },
            &sample.question,
            &content,
        );
        call_rewriter(rewriter, &request)?.swap_remove(0)
    } else {
        let request = RewriteRequest::new(
            RewriteKind::Reformulate { target_words },
            &sample.question,
            &sample.gt_label,
        );
        call_rewriter(rewriter, &request)?.swap_remove(0)
    };
    if rewriter.enforces_word_bands() {
        let words = word_count(&gt_label);
        if words < band.0 || words > band.1 {
            return Err(AsdError::Rewrite(RewriteError::ContractViolation(format!(
                "explanation has {words} words, outside [{}, {}]",
                band.0, band.1
            ))));
        }
    }
    Ok(InstructionSample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        question: sample.question.clone(),
        rfp: rfp_for(target, direct).to_string(),
        options: Vec::new(),
        gt_label,
        format: target,
        provenance: Provenance::Transformed { source, target },
    })
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
pub fn bbox_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let intersection = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - intersection;
    if union <= 0.0 {
        0.0
    } else {
        intersection / union
    }
}

/// Parse a `[x1, y1, x2, y2]` label.
pub fn parse_bbox(label: &str) -> Option<[f64; 4]> {
    let inner = label.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut coords = [0.0; 4];
    let mut count = 0;
    for part in inner.split(',') {
        if count == 4 {
            return None;
        }
        coords[count] = part.trim().parse().ok().filter(|v: &f64| v.is_finite())?;
        count += 1;
    }
    (count == 4).then_some(coords)
}

fn format_bbox(b: [f64; 4]) -> String {
    format!("[{:.2}, {:.2}, {:.2}, {:.2}]", b[0], b[1], b[2], b[3])
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Three distractor boxes in the unit square, each overlapping the
/// ground-truth box with intersection over union below one half.
fn bbox_distractors<R: Rng>(
    sample: &InstructionSample,
    gt_label: &str,
    rng: &mut R,
) -> Result<Vec<String>, AsdError> {
    let gt = parse_bbox(gt_label).ok_or_else(|| {
        AsdError::bad(
            sample,
            format!("label {gt_label:?} is not a [x1, y1, x2, y2] box"),
        )
    })?;
    let mut picked: Vec<String> = Vec::with_capacity(3);
    let mut attempts = 0;
    while picked.len() < 3 {
        attempts += 1;
        if attempts > 10_000 {
            return Err(AsdError::bad(
                sample,
                "could not synthesize low-overlap distractor boxes",
            ));
        }
        let mut xs = [
            round2(rng.random_range(0.0..=1.0)),
            round2(rng.random_range(0.0..=1.0)),
        ];
        let mut ys = [
            round2(rng.random_range(0.0..=1.0)),
            round2(rng.random_range(0.0..=1.0)),
        ];
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let candidate = [xs[0], ys[0], xs[1], ys[1]];
        if xs[0] >= xs[1] || ys[0] >= ys[1] || bbox_iou(candidate, gt) >= 0.5 {
            continue;
        }
        let text = format_bbox(candidate);
        if text != gt_label && !picked.contains(&text) {
            picked.push(text);
        }
    }
    Ok(picked)
}

struct PlannedConversion {
    target: QuestionFormat,
    want_correct: bool,
    want_rewrite: bool,
}

/// Diversify a dataset: group samples by source format, plan each group with
/// [`plan_partition`], and apply the conversions.
///
/// Samples keep their input order and ids; a failed conversion retains the
/// original sample unless `config.strict` is set. Conversions that need a
/// correctness or rewrite flag (yes/no candidates, yes/no-to-short) alternate
/// the flag over the selected samples in input order, so the two choices stay
/// balanced within one of each other.
pub fn transform_dataset(
    dataset: &crate::qa_format::Dataset,
    config: &AsdConfig,
    overrides: &RuleOverrides,
    rewriter: &dyn Rewriter,
) -> Result<(crate::qa_format::Dataset, TransformLog), AsdError> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, sample) in dataset.samples.iter().enumerate() {
        groups.entry(format_pos(sample.format)).or_default().push(idx);
    }

    let mut decisions: Vec<Option<PlannedConversion>> = Vec::new();
    decisions.resize_with(dataset.samples.len(), || None);
    for (source_pos, members) in &groups {
        let source = QuestionFormat::ALL[*source_pos];
        let plan = plan_partition(members.len(), config.percent, config.seed, source)?;
        let mut next_want_correct = true;
        let mut next_want_rewrite = true;
        for (local, &global) in members.iter().enumerate() {
            let Some(target) = plan.assignments[local] else {
                continue;
            };
            let mut conversion = PlannedConversion {
                target,
                want_correct: false,
                want_rewrite: false,
            };
            if target == QuestionFormat::YesNo {
                conversion.want_correct = next_want_correct;
                next_want_correct = !next_want_correct;
            }
            if source == QuestionFormat::YesNo && target == QuestionFormat::ShortAnswer {
                conversion.want_rewrite = next_want_rewrite;
                next_want_rewrite = !next_want_rewrite;
            }
            decisions[global] = Some(conversion);
        }
    }

    let mut log = TransformLog {
        total: dataset.samples.len(),
        ..TransformLog::default()
    };
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for (idx, sample) in dataset.samples.iter().enumerate() {
        let Some(conversion) = &decisions[idx] else {
            log.retained += 1;
            samples.push(sample.clone());
            continue;
        };
        let mut rng = derived_rng(config.seed, salt("asd-sample", idx as u64, 0));
        let outcome = match conversion.target {
            QuestionFormat::YesNo => {
                to_yes_no(sample, conversion.want_correct, &mut rng, rewriter)
            }
            QuestionFormat::MultipleChoice => to_mcq(sample, &mut rng, rewriter, overrides),
            QuestionFormat::ShortAnswer => {
                to_short(sample, conversion.want_rewrite, rewriter, overrides)
            }
            target => to_explanatory(sample, target, rewriter),
        };
        match outcome {
            Ok(converted) => {
                let key = format!("{}->{}", sample.format.tag(), conversion.target.tag());
                *log.by_pair.entry(key).or_insert(0) += 1;
                log.transformed += 1;
                samples.push(converted);
            }
            Err(e) if config.strict => return Err(e),
            Err(e) => {
                if log.failures.len() < MAX_LOGGED_FAILURES {
                    log.failures.push(format!("{}: {e}", sample.id));
                }
                log.failed += 1;
                log.retained += 1;
                samples.push(sample.clone());
            }
        }
    }
    Ok((
        crate::qa_format::Dataset::new(dataset.name.clone(), samples),
        log,
    ))
}
