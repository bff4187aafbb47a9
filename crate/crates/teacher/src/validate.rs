use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use mvaema_core::dataset::{InstructionRecord, SCHEMA_VERSION};
use mvaema_core::tokenization::{tokenize, MAX_ANSWER_LEN};
use serde::Serialize;

use crate::error::{Result, TeacherError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Schema,
    MissingImage,
    EmptyInstruction,
    EmptyAnswer,
    UnknownTemplate,
    Duplicate,
    /// Longer than the decoder keeps; training sees a truncated answer.
    LongAnswer,
}

impl ViolationKind {
    pub fn is_hard(self) -> bool {
        !matches!(self, ViolationKind::Duplicate | ViolationKind::LongAnswer)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based record (line) number.
    pub line: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
    pub per_category: BTreeMap<String, usize>,
    pub per_template: BTreeMap<u8, usize>,
}

impl ValidationReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn hard(&self) -> usize {
        self.violations.iter().filter(|v| v.kind.is_hard()).count()
    }

    pub fn is_ok(&self) -> bool {
        self.hard() == 0
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("records: {}\nhard violations: {}\n\n", self.records, self.hard());
        s.push_str("| Category | Records |\n|---|---|\n");
        for (c, n) in &self.per_category {
            let _ = writeln!(s, "| {c} | {n} |");
        }
        s.push_str("\n| Template | Records |\n|---|---|\n");
        for (t, n) in &self.per_template {
            let _ = writeln!(s, "| {t} | {n} |");
        }
        if !self.violations.is_empty() {
            s.push_str("\n| Line | Kind | Detail |\n|---|---|---|\n");
            for v in &self.violations {
                let _ = writeln!(s, "| {} | {:?} | {} |", v.line, v.kind, v.detail);
            }
        }
        s
    }
}

/// Checks already-parsed records; image paths resolve against `base`.
pub fn validate_records(records: &[InstructionRecord], base: &Path) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let mut seen: HashSet<(PathBuf, String)> = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        check(&mut rep, &mut seen, i + 1, r, base);
    }
    rep
}

fn check(rep: &mut ValidationReport, seen: &mut HashSet<(PathBuf, String)>, line: usize, r: &InstructionRecord, base: &Path) {
    let mut flag = |kind, detail: String| rep.violations.push(Violation { line, kind, detail });
    if r.schema_version != SCHEMA_VERSION {
        flag(ViolationKind::Schema, format!("schema version {}", r.schema_version));
    }
    let path = r.image_path(base);
    if !path.is_file() {
        flag(ViolationKind::MissingImage, path.display().to_string());
    }
    if r.instruction.trim().is_empty() {
        flag(ViolationKind::EmptyInstruction, String::new());
    }
    let words = tokenize(&r.answer).len();
    if words == 0 {
        flag(ViolationKind::EmptyAnswer, String::new());
    } else if words > MAX_ANSWER_LEN - 1 {
        flag(ViolationKind::LongAnswer, format!("{words} tokens"));
    }
    if !(1..=10).contains(&r.template_id) {
        flag(ViolationKind::UnknownTemplate, r.template_id.to_string());
    }
    if !seen.insert((r.image.clone(), r.instruction.trim().to_string())) {
        flag(ViolationKind::Duplicate, format!("{} / {}", r.image.display(), r.instruction));
    }
    rep.records += 1;
    *rep.per_category.entry(r.category.name().to_string()).or_default() += 1;
    *rep.per_template.entry(r.template_id).or_default() += 1;
}

/// Validates a JSONL file line by line; lines that do not parse are schema
/// violations rather than errors. Only an unreadable file is an error.
pub fn validate_file(path: &Path) -> Result<ValidationReport> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| TeacherError::io(path, e))?;
    let mut rep = ValidationReport::default();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TeacherError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<InstructionRecord>(&line) {
            Ok(r) => check(&mut rep, &mut seen, i + 1, &r, base),
            Err(e) => {
                rep.records += 1;
                rep.violations.push(Violation {
                    line: i + 1,
                    kind: ViolationKind::Schema,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(rep)
}
