use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use log::{info, warn};
use mvaema_core::dataset::{InstructionRecord, JsonlWriter, Provenance, SCHEMA_VERSION};
use mvaema_core::Category;
use serde::Serialize;

use crate::client::Teacher;
use crate::error::{Result, TeacherError};
use crate::parse::parse_qa;
use crate::request::TeacherRequest;
use crate::templates::{render_prompt, template};

/// One image to annotate; `image` is stored in the records as given and
/// resolved against the pipeline's base directory for reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenJob {
    pub image: PathBuf,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub templates: Vec<u8>,
    pub include_caption: bool,
    /// Upper bound on requests in flight.
    pub concurrency: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            templates: (1..=10).collect(),
            include_caption: true,
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GenReport {
    pub requests: usize,
    pub records: usize,
    pub warnings: usize,
    /// `(image, template)` whose responses yielded no pairs.
    pub unparsed: Vec<(PathBuf, u8)>,
}

type ItemResult = Result<std::result::Result<(Vec<InstructionRecord>, usize), TeacherError>>;

fn run_item(teacher: &dyn Teacher, job: &GenJob, id: u8, base: &Path, include_caption: bool) -> ItemResult {
    let path = if job.image.is_absolute() {
        job.image.clone()
    } else {
        base.join(&job.image)
    };
    let image = std::fs::read(&path).map_err(|e| TeacherError::io(&path, e))?;
    let prompt = render_prompt(id, job.category, include_caption)?;
    let req = TeacherRequest::new(teacher.model_id(), &prompt, &image);
    let raw = teacher.complete(&image, id, &req)?;
    let parsed = match parse_qa(&raw, id) {
        Ok(p) => p,
        Err(e @ TeacherError::Parse { .. }) => return Ok(Err(e)),
        Err(e) => return Err(e),
    };
    let records = parsed
        .pairs
        .into_iter()
        .map(|(instruction, answer)| InstructionRecord {
            schema_version: SCHEMA_VERSION,
            image: job.image.clone(),
            category: job.category,
            template_id: id,
            instruction,
            answer,
            provenance: Provenance::Teacher(teacher.model_id().to_string()),
        })
        .collect();
    Ok(Ok((records, parsed.warnings)))
}

/// Prompts the teacher with every template for every job and appends the
/// parsed pairs to `out` in job-then-template order, independent of the
/// order in which concurrent requests finish. Teacher failures abort the
/// run; responses without any pair are reported and skipped.
pub fn generate_dataset(
    teacher: &dyn Teacher,
    jobs: &[GenJob],
    base: &Path,
    cfg: &GenConfig,
    out: &mut JsonlWriter,
) -> Result<GenReport> {
    if cfg.concurrency == 0 {
        return Err(TeacherError::Config("concurrency must be at least 1".into()));
    }
    for &id in &cfg.templates {
        template(id)?;
    }
    let items: Vec<(usize, u8)> = (0..jobs.len()).flat_map(|j| cfg.templates.iter().map(move |&t| (j, t))).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut report = GenReport::default();
    let (tx, rx) = mpsc::channel::<(usize, ItemResult)>();

    std::thread::scope(|s| -> Result<()> {
        for _ in 0..cfg.concurrency.min(items.len().max(1)) {
            let tx = tx.clone();
            let (next, stop, items) = (&next, &stop, &items);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(j, id)) = items.get(i) else { break };
                if tx.send((i, run_item(teacher, &jobs[j], id, base, cfg.include_caption))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        let mut failure = None;
        for (i, res) in rx {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&cursor) {
                let (j, id) = items[cursor];
                cursor += 1;
                if failure.is_some() {
                    continue;
                }
                report.requests += 1;
                match res {
                    Ok(Ok((records, warnings))) => {
                        report.warnings += warnings;
                        for r in &records {
                            out.write(r)?;
                        }
                        report.records += records.len();
                    }
                    Ok(Err(_)) => {
                        warn!("no pairs in response for {} template {id}", jobs[j].image.display());
                        report.warnings += 1;
                        report.unparsed.push((jobs[j].image.clone(), id));
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        failure = Some(e);
                    }
                }
            }
        }
        failure.map_or(Ok(()), Err)
    })?;
    info!("{} requests, {} records, {} warnings", report.requests, report.records, report.warnings);
    Ok(report)
}
