//! Labeled text: one `label<TAB>text` example per line, UTF-8.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{io_err, FormatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// Distinct labels in sorted order; an example's class is its index here.
    pub labels: Vec<String>,
    pub examples: Vec<(usize, String)>,
}

pub fn parse_labeled(text: &str) -> Result<LabeledSet> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| FormatError::Line {
            what: "labeled text",
            line: i + 1,
            msg: "expected label<TAB>text".into(),
        })?;
        if label.is_empty() {
            return Err(FormatError::Line {
                what: "labeled text",
                line: i + 1,
                msg: "empty label".into(),
            });
        }
        raw.push((label, body));
    }
    let labels: Vec<String> = raw
        .iter()
        .map(|(l, _)| *l)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let examples = raw
        .into_iter()
        .map(|(l, t)| {
            (
                labels
                    .binary_search_by(|x| x.as_str().cmp(l))
                    .expect("label collected"),
                t.to_string(),
            )
        })
        .collect();
    Ok(LabeledSet { labels, examples })
}

pub fn format_labeled(set: &LabeledSet) -> String {
    set.examples
        .iter()
        .map(|(c, t)| format!("{}\t{t}\n", set.labels[*c]))
        .collect()
}

pub fn read_labeled(path: &Path) -> Result<LabeledSet> {
    parse_labeled(&std::fs::read_to_string(path).map_err(io_err(path))?)
}
