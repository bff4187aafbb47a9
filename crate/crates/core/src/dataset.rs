//! Instruction records, JSONL storage and the synthetic fixture corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::error::{CoreError, Result};
use crate::imaging::{load_image_file, patchify, FixtureEntry, NUM_PATCHES, PATCH_DIM};
use crate::tokenization::{Vocab, MAX_ANSWER_LEN, MAX_QUESTION_LEN};

pub const SCHEMA_VERSION: u32 = 1;

/// The morphology question used for the synthetic corpus.
pub const MORPHOLOGY_QUESTION: &str = "Describe the overall shape and morphology of the nanomaterials?";

/// Where an answer came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Teacher(String),
    Synthetic,
    Human,
}

impl Provenance {
    pub fn as_string(&self) -> String {
        match self {
            Provenance::Teacher(id) => format!("teacher:{id}"),
            Provenance::Synthetic => "synthetic".into(),
            Provenance::Human => "human".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Provenance::Synthetic),
            "human" => Ok(Provenance::Human),
            _ => match s.strip_prefix("teacher:") {
                Some(id) if !id.is_empty() => Ok(Provenance::Teacher(id.to_string())),
                _ => Err(CoreError::UnknownVariant {
                    kind: "provenance",
                    value: s.to_string(),
                }),
            },
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Provenance::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub schema_version: u32,
    /// Image path, relative to the dataset file's directory unless absolute.
    pub image: PathBuf,
    pub category: Category,
    pub template_id: u8,
    pub instruction: String,
    pub answer: String,
    pub provenance: Provenance,
}

impl InstructionRecord {
    pub fn image_path(&self, base: &Path) -> PathBuf {
        if self.image.is_absolute() {
            self.image.clone()
        } else {
            base.join(&self.image)
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionRecord>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord = serde_json::from_str(&line).map_err(|e| CoreError::Dataset {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(CoreError::Dataset {
                line: i + 1,
                msg: format!("schema version {} (expected {SCHEMA_VERSION})", rec.schema_version),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Appends records one line at a time, flushing after each.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &InstructionRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        let io = |e| CoreError::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(|e| CoreError::io(&self.path, e))
    }
}

pub fn write_jsonl(path: &Path, records: &[InstructionRecord]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    records.iter().try_for_each(|r| w.write(r))
}

/// Reference answer to the morphology question for a synthetic image.
pub fn synthetic_answer(category: Category) -> &'static str {
    match category {
        Category::Biological => "the biological nanomaterials appear as elliptical cell like bodies with bright rims",
        Category::Tips => "the tips nanomaterials form sharp conical peaks that fade smoothly toward the base",
        Category::Fibres => "the fibres nanomaterials are long thin strands aligned along a common direction",
        Category::PorousSponge => "the porous sponge nanomaterials show an interconnected network of irregular pores",
        Category::Films => "the films nanomaterials form a smooth continuous layer with a gentle gradient",
        Category::PatternedSurface => "the patterned surface nanomaterials show a periodic grid of straight ridges",
        Category::Nanowires => "the nanowires nanomaterials are thin nearly vertical wires spanning the image",
        Category::Particles => "the particles nanomaterials are round disk shaped grains scattered across the surface",
        Category::Mems => "the mems nanomaterials are rectangular microfabricated structures with sharp edges",
        Category::Powder => "the powder nanomaterials consist of fine dense speckled grains with no clear order",
    }
}

/// One morphology record per fixture image.
pub fn synthetic_records(entries: &[FixtureEntry]) -> Vec<InstructionRecord> {
    entries
        .iter()
        .map(|e| InstructionRecord {
            schema_version: SCHEMA_VERSION,
            image: e.path.clone(),
            category: e.category,
            template_id: 2,
            instruction: MORPHOLOGY_QUESTION.into(),
            answer: synthetic_answer(e.category).into(),
            provenance: Provenance::Synthetic,
        })
        .collect()
}

/// Text that the match and contrastive heads pair with an image of
/// `category`; also the zero-shot probe.
pub fn probe_text(category: Category) -> String {
    format!("this image depicts a {} nanomaterial", category.phrase())
}

/// Every text the model must be able to tokenize for `records`.
pub fn corpus(records: &[InstructionRecord]) -> Vec<String> {
    let mut out: Vec<String> = Category::ALL.iter().map(|&c| probe_text(c)).collect();
    for r in records {
        out.push(r.instruction.clone());
        out.push(r.answer.clone());
    }
    out
}

/// Model-ready training example: patches plus word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Rc<Vec<f32>>,
    pub category: Category,
    /// Words of the match/probe text (no frame tokens).
    pub caption: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    pub fn new(patches: Rc<Vec<f32>>, category: Category, question: &str, answer: &str, vocab: &Vocab) -> Result<Self> {
        if patches.len() != NUM_PATCHES * PATCH_DIM {
            return Err(CoreError::contract("sample", "patch buffer must hold 49 x 3072 values"));
        }
        let mut caption = vocab.ids_of(&probe_text(category));
        caption.truncate(MAX_QUESTION_LEN - 1);
        let mut question = vocab.ids_of(question);
        question.truncate(MAX_QUESTION_LEN);
        let mut answer = vocab.ids_of(answer);
        answer.truncate(MAX_ANSWER_LEN - 1);
        Ok(Sample {
            patches,
            category,
            caption,
            question,
            answer,
        })
    }
}

/// Loads each record's image and tokenizes its texts. Records that share an
/// image path share one patch buffer.
pub fn prepare(records: &[InstructionRecord], base: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let mut cache: std::collections::HashMap<PathBuf, Rc<Vec<f32>>> = Default::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let path = r.image_path(base);
        let patches = match cache.get(&path) {
            Some(p) => p.clone(),
            None => {
                let p = Rc::new(patchify(&load_image_file(&path)?)?.data().to_vec());
                cache.insert(path, p.clone());
                p
            }
        };
        out.push(Sample::new(patches, r.category, &r.instruction, &r.answer, vocab)?);
    }
    Ok(out)
}
