//! Lexical analysis of python-like test scripts.
//!
//! Scripts are never rejected: comments and string literals are blanked out
//! first, then every dotted identifier path directly followed by `(` is
//! collected. Unterminated literals are counted as skipped regions.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Language dialect tag. Only the python-like profile exists today.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageProfile {
    #[default]
    PythonLike,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptSource {
    pub text: String,
    pub profile: LanguageProfile,
}

impl ScriptSource {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            profile: LanguageProfile::PythonLike,
        }
    }
}

impl From<&str> for ScriptSource {
    fn from(text: &str) -> Self {
        Self::new(text)
    }
}

/// Tokens never reported as calls even when followed by `(`.
pub const NON_CALL_KEYWORDS: &[&str] = &[
    "if", "elif", "else", "for", "while", "return", "def", "class", "import", "from", "with", "not",
    "and", "or", "in", "is", "lambda", "assert", "raise", "try", "except", "finally", "pass",
    "break", "continue", "yield", "async", "await", "del", "global", "nonlocal", "as",
];

fn is_keyword(token: &str) -> bool {
    NON_CALL_KEYWORDS.contains(&token)
}

/// The set of fully qualified function names invoked by a script.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionCallSet(BTreeSet<String>);

impl FunctionCallSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>) -> bool {
        self.0.insert(name.into())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Names in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersection_len(&self, other: &FunctionCallSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl<S: Into<String>> FromIterator<S> for FunctionCallSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

impl<'a> IntoIterator for &'a FunctionCallSet {
    type Item = &'a String;
    type IntoIter = std::collections::btree_set::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for FunctionCallSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, name) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExtractionDiagnostics {
    /// Literals that ran to end of input without a closing quote.
    pub skipped_regions: usize,
}

/// Replace comments and string literals with spaces, keeping newlines so
/// line structure survives.
pub fn strip_comments_and_strings(text: &str) -> (String, ExtractionDiagnostics) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut diagnostics = ExtractionDiagnostics::default();
    let mut i = 0;

    let blank = |c: char, out: &mut String| out.push(if c == '\n' { '\n' } else { ' ' });

    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    out.push(' ');
                    i += 1;
                }
            }
            '"' | '\'' => {
                let triple = i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c;
                let opener = if triple { 3 } else { 1 };
                for _ in 0..opener {
                    out.push(' ');
                }
                i += opener;
                let mut closed = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d == '\\' {
                        blank(d, &mut out);
                        if let Some(&next) = chars.get(i + 1) {
                            blank(next, &mut out);
                        }
                        i += 2;
                        continue;
                    }
                    if triple {
                        if d == c && i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c {
                            out.push_str("   ");
                            i += 3;
                            closed = true;
                            break;
                        }
                    } else if d == c {
                        out.push(' ');
                        i += 1;
                        closed = true;
                        break;
                    } else if d == '\n' {
                        // single-quoted literals cannot span lines
                        break;
                    }
                    blank(d, &mut out);
                    i += 1;
                }
                if !closed {
                    diagnostics.skipped_regions += 1;
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    (out, diagnostics)
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// Func(·): every dotted call path in the script.
pub fn extract_functions(script: &ScriptSource) -> FunctionCallSet {
    extract_functions_with_diagnostics(script).0
}

pub fn extract_functions_with_diagnostics(
    script: &ScriptSource,
) -> (FunctionCallSet, ExtractionDiagnostics) {
    let (clean, diagnostics) = strip_comments_and_strings(&script.text);
    let chars: Vec<char> = clean.chars().collect();
    let mut calls = FunctionCallSet::new();
    let mut i = 0;
    // The identifier right after `def`/`class` names a definition, not a call.
    let mut defining = false;

    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            // numeric literal, including forms like 1e5 or 0x1f
            while i < chars.len() && (is_ident_continue(chars[i]) || chars[i] == '.') {
                i += 1;
            }
            continue;
        }
        if !is_ident_start(c) {
            i += 1;
            continue;
        }

        let start = i;
        let mut segments = 1;
        loop {
            while i < chars.len() && is_ident_continue(chars[i]) {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && is_ident_start(chars[i + 1]) {
                i += 1;
                segments += 1;
                continue;
            }
            break;
        }
        let path: String = chars[start..i].iter().collect();

        if segments == 1 && (path == "def" || path == "class") {
            defining = true;
            continue;
        }
        let followed_by_paren = chars.get(i) == Some(&'(');
        if defining {
            defining = false;
            continue;
        }
        if followed_by_paren && !(segments == 1 && is_keyword(&path)) {
            calls.insert(path);
        }
    }
    (calls, diagnostics)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub is_repetitive: bool,
    pub repeated_window: String,
    pub repeat_count: usize,
    pub window_lines: usize,
}

pub const DEFAULT_MIN_REPEATS: usize = 3;
pub const DEFAULT_WINDOWS: [usize; 3] = [1, 2, 3];

fn normalized_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|line| !line.is_empty())
        .collect()
}

/// Longest run of back-to-back copies of any `window_lines`-line block.
///
/// Lines are whitespace-normalized and blank lines ignored.
///
/// # Panics
/// If `window_lines == 0` or `min_repeats < 2`.
pub fn detect_repetition(
    script: &ScriptSource,
    window_lines: usize,
    min_repeats: usize,
) -> RepetitionReport {
    assert!(window_lines >= 1, "window_lines must be at least 1");
    assert!(min_repeats >= 2, "min_repeats must be at least 2");

    let lines = normalized_lines(&script.text);
    let mut best_count = 0;
    let mut best_start = 0;

    if lines.len() >= window_lines {
        for start in 0..=lines.len() - window_lines {
            let window = &lines[start..start + window_lines];
            let mut count = 1;
            let mut next = start + window_lines;
            while next + window_lines <= lines.len() && &lines[next..next + window_lines] == window {
                count += 1;
                next += window_lines;
            }
            if count > best_count {
                best_count = count;
                best_start = start;
            }
        }
    }

    let repeated_window = if best_count >= 2 {
        lines[best_start..best_start + window_lines].join("\n")
    } else {
        String::new()
    };
    RepetitionReport {
        is_repetitive: best_count >= min_repeats,
        repeated_window,
        repeat_count: best_count,
        window_lines,
    }
}

/// Scan the default windows and keep the strongest finding (smallest window
/// on ties).
pub fn detect_repetition_default(script: &ScriptSource) -> RepetitionReport {
    DEFAULT_WINDOWS
        .iter()
        .map(|&w| detect_repetition(script, w, DEFAULT_MIN_REPEATS))
        .fold(None::<RepetitionReport>, |best, report| match best {
            Some(b) if b.repeat_count >= report.repeat_count => Some(b),
            _ => Some(report),
        })
        .expect("at least one window")
}
