//! Rule-based PII scrubbing applied before any text leaves the process.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

static EMAIL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}").unwrap());
static PHONE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:\+\d{1,3}[\s.-]?)?(?:\(\d{3}\)\s?|\b\d{3}[\s.-])\d{3}[\s.-]\d{4}\b").unwrap()
});
static DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)
        \b\d{4}-\d{1,2}-\d{1,2}\b
        | \b\d{1,2}[/.-]\d{1,2}[/.-]\d{2,4}\b
        | \b\d{1,2}\s+(?:jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]*\.?,?\s+\d{4}\b",
    )
    .unwrap()
});
static LONG_DIGITS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d{6,}").unwrap());
/// A patient-context word followed by a capitalized name. Honorifics admit a
/// single surname; other context words need a full-name pair.
static NAME_IN_CONTEXT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?x)
        (?P<ctx>\b(?i:mrs|mr|ms|miss|dr)\.?[\ \t]+)
            (?P<hon>[A-Z][a-z]+(?:[-'][A-Z][a-z]+)?(?:[\ \t]+[A-Z][a-z]+(?:[-'][A-Z][a-z]+)?){0,2})
        | (?P<ctx2>\b(?i:patient|pt|named|name\ is|name:|called|client|resident)[\ \t:,.]+)
            (?P<full>[A-Z][a-z]+(?:[-'][A-Z][a-z]+)?(?:[\ \t]+[A-Z][a-z]+(?:[-'][A-Z][a-z]+)?){1,2})",
    )
    .unwrap()
});

fn name_tokens(name: &str) -> impl Iterator<Item = String> + '_ {
    name.split(|ch: char| ch.is_whitespace() || ch == '-' || ch == '\'')
        .filter(|t| t.len() >= 2)
        .map(str::to_string)
}

fn scrub_tokens(text: &str, tokens: &BTreeSet<String>) -> String {
    if tokens.is_empty() {
        return text.to_string();
    }
    let alternation: Vec<String> = tokens.iter().map(|t| regex::escape(t)).collect();
    let re = Regex::new(&format!(r"\b(?:{})\b", alternation.join("|"))).expect("escaped tokens");
    re.replace_all(text, "[PATIENT]").into_owned()
}

/// Name tokens the context rules detect in `text`.
fn detected_names(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    for c in NAME_IN_CONTEXT.captures_iter(text) {
        let name = c.name("hon").or_else(|| c.name("full")).map_or("", |m| m.as_str());
        tokens.extend(name_tokens(name));
    }
    tokens
}

fn scrub_once(text: &str) -> String {
    let s = EMAIL.replace_all(text, "[EMAIL]");
    let s = PHONE.replace_all(&s, "[PHONE]");
    let s = DATE.replace_all(&s, "[DATE]");
    let s = LONG_DIGITS.replace_all(&s, "[ID]");

    let mut tokens = BTreeSet::new();
    let s = NAME_IN_CONTEXT.replace_all(&s, |c: &regex::Captures<'_>| {
        let (ctx, name) = match (c.name("ctx"), c.name("hon")) {
            (Some(ctx), Some(name)) => (ctx.as_str(), name.as_str()),
            _ => (&c["ctx2"], &c["full"]),
        };
        tokens.extend(name_tokens(name));
        format!("{ctx}[PATIENT]")
    });
    scrub_tokens(&s, &tokens)
}

/// Scrubs names in patient context, emails, phone numbers, dates, and long
/// digit runs. Ages such as `45-year-old` are kept. Idempotent.
pub fn anonymize(text: &str) -> String {
    let mut current = text.to_string();
    for _ in 0..16 {
        let next = scrub_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Like [`anonymize`], but also scrubs names detected in `context`. A model
/// rewriting a question can repeat a name without the word that flagged it.
pub fn anonymize_with_context(text: &str, context: &str) -> String {
    let tokens = detected_names(context);
    anonymize(&scrub_tokens(text, &tokens))
}
