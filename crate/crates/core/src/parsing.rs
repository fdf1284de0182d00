//! Extraction of structured values from free-text model output.
//!
//! Every parser here is pure and total over `&str`: malformed input degrades
//! to an error value or an empty field, never a panic.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::case::AnswerOption;
use crate::model::{Candidate, DiagnosticOpinion, RoleSpec, SynthesisReport};

/// Label returned by [`parse_label`] when nothing matches and the vocabulary
/// contains it.
pub const FALLBACK_LABEL: &str = "Unknown";

pub const IMAGE_KINDS: &[&str] = &["X-Ray", "CT", "MRI", "Pathology", "Biomedical"];
pub const BODY_PARTS: &[&str] = &[
    "Brain", "bone", "abdomen", "mediastinum", "liver", "lung", "kidney", "soft tissue", "pelvis",
];
pub const AUDIO_KINDS: &[&str] = &["Cardiovascular", "Respiratory"];
pub const VIDEO_KINDS: &[&str] = &["Sports", "Rehabilitation", "Emergency"];
/// The 20 question types plus the `Unknown` fallback.
pub const TEXT_TYPES: &[&str] = &[
    "Anaesthesia", "Anatomy", "Biochemistry", "Dental", "ENT", "FM", "O&G", "Medicine",
    "Microbiology", "Ophthalmology", "Orthopaedics", "Pathology", "Pediatrics", "Pharmacology",
    "Physiology", "Psychiatry", "Radiology", "Skin", "PSM", "Surgery", "Unknown",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no label from the vocabulary found in response")]
    NoLabelFound,
    #[error("no role headings found in response")]
    NoRolesFound,
    #[error("no option label could be extracted from response")]
    Unparseable,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte offsets of `needle` in `hay` at word boundaries. ASCII needles match
/// case-insensitively; others match exactly.
fn word_matches(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    // ASCII lowercasing keeps byte offsets, so positions map back to `hay`.
    let (folded, needle) = if needle.is_ascii() {
        (hay.to_ascii_lowercase(), needle.to_ascii_lowercase())
    } else {
        (hay.to_string(), needle.to_string())
    };
    let mut out = Vec::new();
    let mut start = 0;
    while let Some(found) = folded[start..].find(&needle) {
        let i = start + found;
        let end = i + needle.len();
        let before_ok = hay[..i].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = hay[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            out.push(i);
        }
        start = i + hay[i..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

/// Returns the vocabulary label occurring earliest in `text` (case-insensitive,
/// whole words; longer label wins on a tie). Falls back to `Unknown` when the
/// vocabulary contains it.
pub fn parse_label(text: &str, vocab: &[&str]) -> Result<String, ParseError> {
    let best = vocab
        .iter()
        .filter_map(|label| word_matches(text, label).first().map(|&pos| (pos, label)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
    if let Some((_, label)) = best {
        return Ok(label.to_string());
    }
    vocab
        .iter()
        .find(|l| l.eq_ignore_ascii_case(FALLBACK_LABEL))
        .map(|l| l.to_string())
        .ok_or(ParseError::NoLabelFound)
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start();
    let t = t.trim_start_matches('#').trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    t
}

fn bullet_content(line: &str) -> Option<&str> {
    let t = line.trim_start();
    if t.starts_with("**") {
        return None;
    }
    for marker in ["- ", "* ", "• ", "-\t", "*\t"] {
        if let Some(rest) = t.strip_prefix(marker) {
            let rest = rest.trim();
            return (!rest.is_empty()).then_some(rest);
        }
    }
    None
}

/// Parses a `**Name** (Specialty):` heading line into the role name.
fn role_heading(line: &str) -> Option<String> {
    let mut t = strip_list_marker(line);
    if let Some(rest) = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")) {
        t = rest.trim_start();
    }
    let inner_start = t.strip_prefix("**")?;
    let close = inner_start.find("**")?;
    let inner = inner_start[..close].trim().trim_end_matches(':').trim();
    let mut rest = inner_start[close + 2..].trim();
    let mut specialty = None;
    if let Some(after_paren) = rest.strip_prefix('(') {
        let end = after_paren.find(')')?;
        specialty = Some(after_paren[..end].trim());
        rest = after_paren[end + 1..].trim();
    }
    if !(rest.is_empty() || rest == ":") || inner.is_empty() {
        return None;
    }
    Some(match specialty {
        Some(s) if !s.is_empty() => format!("{inner} ({s})"),
        _ => inner.to_string(),
    })
}

/// Extracts every bold role heading with the dash bullets that follow it.
pub fn parse_roles(text: &str) -> Result<Vec<RoleSpec>, ParseError> {
    let mut roles: Vec<RoleSpec> = Vec::new();
    for line in text.lines() {
        if let Some(name) = role_heading(line) {
            roles.push(RoleSpec::new(name, Vec::new()));
        } else if let (Some(role), Some(item)) = (roles.last_mut(), bullet_content(line)) {
            role.responsibilities.push(item.to_string());
        }
    }
    if roles.is_empty() {
        Err(ParseError::NoRolesFound)
    } else {
        Ok(roles)
    }
}

fn leading_word(s: &str) -> String {
    s.trim_start_matches(|c: char| !is_word(c))
        .chars()
        .take_while(|c| is_word(*c))
        .flat_map(char::to_lowercase)
        .collect()
}

/// `yes` → true, `no` → false, read from the first line; otherwise true only
/// when the text says `yes` and never `no`. Ambiguity is dissent.
pub fn parse_vote(text: &str) -> bool {
    if let Some(first) = text.lines().find(|l| !l.trim().is_empty()) {
        match leading_word(first).as_str() {
            "yes" => return true,
            "no" => return false,
            _ => {}
        }
    }
    let mut yes = false;
    let mut no = false;
    for word in text.split(|c: char| !is_word(c)) {
        if word.eq_ignore_ascii_case("yes") {
            yes = true;
        } else if word.eq_ignore_ascii_case("no") {
            no = true;
        }
    }
    yes && !no
}

fn label_eq(token: &str, label: &str) -> bool {
    if label.chars().count() == 1 {
        token == label
    } else {
        token.eq_ignore_ascii_case(label) || token == label
    }
}

fn find_label(token: &str, options: &[AnswerOption]) -> Option<usize> {
    options.iter().position(|o| label_eq(token, &o.label))
}

/// Label at the start of `s` (after wrappers like `(`, `*`, `option`), when
/// followed by a non-word character.
fn leading_label(s: &str, options: &[AnswerOption]) -> Option<usize> {
    let mut t = s.trim_start_matches(|c: char| c.is_whitespace() || "*_([\"'`".contains(c));
    if t.get(..6).is_some_and(|p| p.eq_ignore_ascii_case("option")) {
        t = t[6..].trim_start_matches(|c: char| c.is_whitespace() || "*_([\"'`".contains(c));
    }
    let token: String = t.chars().take_while(|c| is_word(*c)).collect();
    if token.is_empty() {
        return None;
    }
    find_label(&token, options)
}

static ANSWER_IS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\banswer\s*(?:is\b\s*:?|:)").unwrap());
static BOLD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\*\*([^*\n]{1,120})\*\*").unwrap());

fn bold_label(content: &str, options: &[AnswerOption]) -> Option<usize> {
    let mut c = content.trim().trim_start_matches(['(', '[']).trim();
    if c.get(..6).is_some_and(|p| p.eq_ignore_ascii_case("option")) {
        c = c[6..].trim_start();
    }
    let token: String = c.chars().take_while(|ch| is_word(*ch)).collect();
    let idx = find_label(&token, options)?;
    let rest = &c[token.len()..];
    let ok = rest.is_empty()
        || rest.trim_end_matches(['.', ')', ']', ':']).is_empty()
        || [". ", ") ", "] ", ": "].iter().any(|d| rest.starts_with(d));
    ok.then_some(idx)
}

/// Extracts the chosen option label. Cascade, first rule with a hit wins:
/// explicit declaration (`answer is X`, `**X**`), a label alone on a line,
/// then unique whole-word containment of an option's text. Earliest hit
/// wins within a rule, lowest option index on a tie.
pub fn parse_final_answer(text: &str, options: &[AnswerOption]) -> Result<String, ParseError> {
    let pick = |mut hits: Vec<(usize, usize)>| -> Option<String> {
        hits.sort();
        hits.first().map(|&(_, idx)| options[idx].label.clone())
    };

    let mut declared = Vec::new();
    for m in ANSWER_IS.find_iter(text) {
        if let Some(idx) = leading_label(&text[m.end()..], options) {
            declared.push((m.start(), idx));
        }
    }
    for c in BOLD.captures_iter(text) {
        let whole = c.get(0).expect("match");
        if let Some(idx) = bold_label(&c[1], options) {
            declared.push((whole.start(), idx));
        }
    }
    if let Some(label) = pick(declared) {
        return Ok(label);
    }

    let mut lone = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim().trim_matches(|c: char| c.is_whitespace() || "*_()[].:".contains(c));
        if let Some(idx) = find_label(t, options) {
            lone.push((offset, idx));
        }
        offset += line.len();
    }
    if let Some(label) = pick(lone) {
        return Ok(label);
    }

    let contained: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.text.trim().is_empty() && !word_matches(text, o.text.trim()).is_empty())
        .map(|(i, _)| i)
        .collect();
    match contained.as_slice() {
        [only] => Ok(options[*only].label.clone()),
        _ => Err(ParseError::Unparseable),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Heading {
    Assessment,
    PossibleAnswers,
    Conclusion,
    Agreements,
    Disagreements,
}

const HEADINGS: &[(&str, Heading)] = &[
    ("assessment steps", Heading::Assessment),
    ("possible answers", Heading::PossibleAnswers),
    ("conclusions", Heading::Conclusion),
    ("conclusion", Heading::Conclusion),
    ("disagreements", Heading::Disagreements),
    ("agreements", Heading::Agreements),
];

/// Recognizes `**Heading**:` style lines; returns the heading and any text
/// after the colon.
fn section_heading(line: &str) -> Option<(Heading, &str)> {
    let t = line.trim_start_matches(|c: char| c.is_whitespace() || "#>*_-".contains(c));
    for (name, heading) in HEADINGS {
        let Some(prefix) = t.get(..name.len()) else {
            continue;
        };
        if !prefix.eq_ignore_ascii_case(name) {
            continue;
        }
        let rest = t[name.len()..].trim_start_matches(['*', '_', ' ']);
        if let Some(after) = rest.strip_prefix(':') {
            return Some((*heading, after.trim_start_matches(['*', '_']).trim()));
        }
        if rest.trim().is_empty() {
            return Some((*heading, ""));
        }
    }
    None
}

struct Sections {
    preamble: String,
    parts: Vec<(Heading, String)>,
}

impl Sections {
    fn split(text: &str) -> Self {
        let mut preamble = Vec::new();
        let mut parts: Vec<(Heading, Vec<&str>)> = Vec::new();
        for line in text.lines() {
            if let Some((h, inline)) = section_heading(line) {
                parts.push((h, if inline.is_empty() { vec![] } else { vec![inline] }));
            } else if let Some((_, lines)) = parts.last_mut() {
                lines.push(line);
            } else {
                preamble.push(line);
            }
        }
        Self {
            preamble: preamble.join("\n").trim().to_string(),
            parts: parts
                .into_iter()
                .map(|(h, lines)| (h, lines.join("\n").trim().to_string()))
                .collect(),
        }
    }

    fn get(&self, heading: Heading) -> String {
        self.parts
            .iter()
            .filter(|(h, body)| *h == heading && !body.is_empty())
            .map(|(_, body)| body.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn strip_bullet(line: &str) -> &str {
    line.trim()
        .trim_start_matches(|c: char| c.is_whitespace() || "-*•_".contains(c))
        .trim()
}

/// `Answer 3: text` → `text`.
fn answer_item(line: &str) -> Option<&str> {
    let t = strip_bullet(line);
    let prefix = t.get(..6)?;
    if !prefix.eq_ignore_ascii_case("answer") {
        return None;
    }
    let rest = t[6..].trim_start();
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    let rest = rest[digits..].trim_start_matches(['*', '_', ' ']);
    rest.strip_prefix(':').map(|r| r.trim_start_matches(['*', '_']).trim())
}

fn reasoning_item(line: &str) -> Option<&str> {
    let t = strip_bullet(line);
    let prefix = t.get(..9)?;
    if !prefix.eq_ignore_ascii_case("reasoning") {
        return None;
    }
    let rest = t[9..].trim_start_matches(['*', '_', ' ']);
    rest.strip_prefix(':').map(|r| r.trim_start_matches(['*', '_']).trim())
}

fn append(field: &mut String, text: &str) {
    if text.is_empty() {
        return;
    }
    if !field.is_empty() {
        field.push(' ');
    }
    field.push_str(text);
}

fn parse_candidates(section: &str) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    let mut in_reasoning = false;
    for line in section.lines() {
        if let Some(answer) = answer_item(line) {
            out.push(Candidate {
                answer: answer.to_string(),
                reasoning: String::new(),
            });
            in_reasoning = false;
        } else if let Some(reason) = reasoning_item(line) {
            if let Some(c) = out.last_mut() {
                append(&mut c.reasoning, reason);
                in_reasoning = true;
            }
        } else if let Some(c) = out.last_mut() {
            let t = strip_bullet(line);
            if in_reasoning {
                append(&mut c.reasoning, t);
            } else {
                append(&mut c.answer, t);
            }
        }
    }
    out
}

/// Splits a specialist response on its Assessment Steps / Possible Answers /
/// Conclusion headings. Missing sections yield empty fields; text with no
/// headings becomes the assessment.
pub fn parse_opinion(text: &str, role: &str) -> DiagnosticOpinion {
    let sections = Sections::split(text);
    let mut assessment = sections.preamble.clone();
    append_block(&mut assessment, &sections.get(Heading::Assessment));
    DiagnosticOpinion {
        role: role.to_string(),
        assessment,
        candidates: parse_candidates(&sections.get(Heading::PossibleAnswers)),
        conclusion: sections.get(Heading::Conclusion),
        raw: text.to_string(),
    }
}

fn append_block(field: &mut String, block: &str) {
    if block.is_empty() {
        return;
    }
    if !field.is_empty() {
        field.push('\n');
    }
    field.push_str(block);
}

/// Splits a moderator summary on Possible Answers / Agreements /
/// Disagreements / Conclusions.
pub fn parse_report(text: &str) -> SynthesisReport {
    let sections = Sections::split(text);
    let answers_section = sections.get(Heading::PossibleAnswers);
    let mut possible_answers: Vec<String> = parse_candidates(&answers_section)
        .into_iter()
        .map(|c| c.answer)
        .collect();
    if possible_answers.is_empty() {
        possible_answers = answers_section
            .lines()
            .map(strip_bullet)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
    }
    SynthesisReport {
        possible_answers,
        agreements: sections.get(Heading::Agreements),
        disagreements: sections.get(Heading::Disagreements),
        conclusions: sections.get(Heading::Conclusion),
        raw: text.to_string(),
    }
}

/// Numbered `1.` / `2)` lines, in order, with the numbering removed.
pub fn parse_numbered_list(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let t = line.trim_start().trim_start_matches(['*', '_']);
            let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits == 0 {
                return None;
            }
            let rest = t[digits..].strip_prefix(['.', ')'])?;
            let item = rest.trim().trim_matches(['*', '_']).trim();
            (!item.is_empty()).then(|| item.to_string())
        })
        .collect()
}
