use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use mvaema_core::ablation::run_ablation;
use mvaema_core::dataset::{corpus, prepare, read_jsonl, synthetic_records, write_jsonl, InstructionRecord, JsonlWriter};
use mvaema_core::imaging::{load_image_file, patchify, read_manifest, write_fixture_set};
use mvaema_core::inference::{answer_request, answer_vqa, classify_zero_shot, generate, BatchRequest};
use mvaema_core::metrics::{ClassificationReport, VqaReport};
use mvaema_core::model::{load_checkpoint, save_checkpoint, Model};
use mvaema_core::tokenization::{decode_tokens, Vocab};
use mvaema_core::trainer::{cross_validate, write_history};
use mvaema_core::Category;
use mvaema_teacher::client::UreqTransport;
use mvaema_teacher::{
    generate_dataset, validate_file, validate_records, GenConfig, GenJob, LiveTeacher, MockTeacher, RetryPolicy, SyntheticTeacher,
    Teacher,
};
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{CliError, Result};
use crate::Common;

const SNAPSHOT: &str = "effective_config.json";

fn settings(c: &Common) -> Result<Settings> {
    Settings::load(c.config.as_deref(), &c.sets, c.seed)
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Records and their base directory, rejected when validation finds hard
/// violations.
fn load_valid(path: &Path) -> Result<(Vec<InstructionRecord>, PathBuf)> {
    let records = read_jsonl(path)?;
    let base = base_of(path);
    let report = validate_records(&records, &base);
    if !report.is_ok() {
        eprint!("{}", report.to_markdown());
        return Err(CliError::Validation { hard: report.hard() });
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", path.display())));
    }
    Ok((records, base))
}

pub fn synth_data(common: &Common, out: &Path, per_category: usize) -> Result<()> {
    let s = settings(common)?;
    if per_category == 0 {
        return Err(CliError::Usage("--per-category must be at least 1".into()));
    }
    let entries = write_fixture_set(out, per_category, s.seed())?;
    write_jsonl(&out.join("dataset.jsonl"), &synthetic_records(&entries))?;
    let mock = out.join("mock");
    let ids: Vec<u8> = (1..=10).collect();
    for e in &entries {
        let path = out.join(&e.path);
        let bytes = std::fs::read(&path).map_err(|err| CliError::io(&path, err))?;
        SyntheticTeacher::write_mock(&mock, &bytes, e.category, &ids)?;
    }
    s.write_snapshot(&out.join(SNAPSHOT))?;
    println!("wrote {} images, manifest.json, dataset.jsonl and mock/ under {}", entries.len(), out.display());
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let canon = |p: &Path| std::fs::canonicalize(if p.as_os_str().is_empty() { Path::new(".") } else { p }).ok();
    canon(a).is_some_and(|x| Some(x) == canon(b))
}

pub fn gen_data(common: &Common, manifest: &Path, out: &Path, mock_dir: Option<&Path>, live: bool) -> Result<()> {
    let s = settings(common)?;
    let entries = read_manifest(manifest)?;
    let base = base_of(manifest);
    let out_dir = base_of(out);
    if !out_dir.as_os_str().is_empty() {
        mkdir(&out_dir)?;
    }
    // record paths stay relative only when the dataset sits beside the images
    let relative = same_dir(&base, &out_dir);
    let jobs = entries
        .iter()
        .map(|e| {
            let image = if relative || e.path.is_absolute() {
                e.path.clone()
            } else {
                let p = base.join(&e.path);
                std::fs::canonicalize(&p).map_err(|err| CliError::io(&p, err))?
            };
            Ok(GenJob {
                image,
                category: e.category,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = GenConfig {
        templates: s.teacher_templates(),
        include_caption: s.include_caption(),
        concurrency: s.teacher_int("concurrency"),
    };
    let mut writer = JsonlWriter::create(out)?;
    let report = if live {
        let transport = UreqTransport::new(Duration::from_secs(s.teacher_int("timeout_secs") as u64));
        let mut teacher = LiveTeacher::from_env(s.teacher_str("endpoint"), s.teacher_str("model"), transport)?;
        teacher.retry = RetryPolicy {
            max_attempts: s.teacher_int("max_attempts").max(1) as u32,
            base_delay: Duration::from_millis(s.teacher_int("backoff_ms") as u64),
        };
        run_gen(&teacher, &jobs, &base, &cfg, &mut writer)?
    } else {
        let dir = mock_dir.map(Path::to_path_buf).unwrap_or_else(|| base.join("mock"));
        run_gen(&MockTeacher::new(dir), &jobs, &base, &cfg, &mut writer)?
    };
    drop(writer);
    s.write_snapshot(&out.with_extension("config.json"))?;
    println!("{}", serde_json::to_string(&report)?);
    let validation = validate_file(out)?;
    write_json(&out.with_extension("validation.json"), &validation)?;
    if !validation.is_ok() {
        eprint!("{}", validation.to_markdown());
        return Err(CliError::Validation { hard: validation.hard() });
    }
    Ok(())
}

fn run_gen(
    teacher: &dyn Teacher,
    jobs: &[GenJob],
    base: &Path,
    cfg: &GenConfig,
    out: &mut JsonlWriter,
) -> Result<mvaema_teacher::GenReport> {
    Ok(generate_dataset(teacher, jobs, base, cfg, out)?)
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    variant: String,
    train_records: usize,
    val_records: usize,
    steps: usize,
    epochs: usize,
    best_val: f64,
    final_joint: Option<f64>,
    stopped_early: bool,
    reached_target: bool,
}

pub fn train(common: &Common, data: &Path, val_data: Option<&Path>, out: &Path) -> Result<()> {
    let s = settings(common)?;
    let tcfg = s.train_config()?;
    let (records, base) = load_valid(data)?;
    let val = match val_data {
        Some(p) => Some(load_valid(p)?),
        None => None,
    };
    let vocab = Vocab::build(&corpus(&records), s.min_freq())?;
    let samples = prepare(&records, &base, &vocab)?;
    let val_samples = match &val {
        Some((r, b)) => prepare(r, b, &vocab)?,
        None => Vec::new(),
    };
    let init = Model::init(s.model_config(vocab.len())?, s.seed())?;
    mkdir(out)?;
    s.write_snapshot(&out.join(SNAPSHOT))?;
    if s.cross_validate() {
        let folds = cross_validate(&tcfg, &init, &samples, &vocab, Some(out))?;
        write_json(&out.join("folds.json"), &folds)?;
        info!("cross-validation over {} folds done", folds.len());
    }
    let outcome = mvaema_core::trainer::train(&tcfg, init, &samples, &val_samples)?;
    save_checkpoint(out, &outcome.model, &vocab, s.seed())?;
    write_history(&out.join("history.csv"), &outcome.steps)?;
    write_json(&out.join("epochs.json"), &outcome.epochs)?;
    let summary = TrainSummary {
        seed: s.seed(),
        variant: tcfg.variant.name().to_string(),
        train_records: samples.len(),
        val_records: val_samples.len(),
        steps: outcome.steps.len(),
        epochs: outcome.epochs.len(),
        best_val: outcome.best_val,
        final_joint: outcome.final_step().map(|l| l.joint),
        stopped_early: outcome.stopped_early,
        reached_target: outcome.reached_target,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn eval_vqa(common: &Common, ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let s = settings(common)?;
    let gcfg = s.generation()?;
    let cp = load_checkpoint(ckpt)?;
    let (records, base) = load_valid(data)?;
    let pairs = records
        .iter()
        .map(|r| Ok((answer_vqa(&cp.model, &cp.vocab, r, &base, &gcfg)?, r.answer.clone())))
        .collect::<Result<Vec<_>>>()?;
    let report = VqaReport::from_pairs(&pairs)?;
    print!("{}", report.to_markdown());
    if let Some(dir) = out {
        mkdir(dir)?;
        write_json(&dir.join("vqa_report.json"), &report)?;
        write_file(&dir.join("vqa_report.md"), &report.to_markdown())?;
        s.write_snapshot(&dir.join(SNAPSHOT))?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Prediction {
    label: Category,
    ranking: Vec<Category>,
}

fn read_predictions(path: &Path) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rankings = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rankings.push(p.ranking.iter().map(|c| c.index()).collect());
        labels.push(p.label.index());
    }
    Ok((rankings, labels))
}

pub fn eval_classify(
    common: &Common,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    predictions: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let s = settings(common)?;
    let (rankings, labels) = match (predictions, ckpt, data) {
        (Some(p), _, _) => read_predictions(p)?,
        (None, Some(ckpt), Some(data)) => {
            let scoring = s.scoring()?;
            let cp = load_checkpoint(ckpt)?;
            let (records, base) = load_valid(data)?;
            let mut seen = HashSet::new();
            let mut rankings = Vec::new();
            let mut labels = Vec::new();
            for r in records.iter().filter(|r| seen.insert(r.image.clone())) {
                let patches = patchify(&load_image_file(&r.image_path(&base))?)?;
                let ranked = classify_zero_shot(&cp.model, &cp.vocab, &patches, &Category::ALL, scoring)?;
                rankings.push(ranked.iter().map(|c| c.category.index()).collect());
                labels.push(r.category.index());
            }
            (rankings, labels)
        }
        _ => return Err(CliError::Usage("eval-classify needs --predictions or both --ckpt and --data".into())),
    };
    if labels.is_empty() {
        return Err(CliError::Data("nothing to classify".into()));
    }
    let report = ClassificationReport::new(Category::ALL.to_vec(), &rankings, &labels)?;
    print!("{}", report.to_markdown());
    if let Some(dir) = out {
        mkdir(dir)?;
        write_json(&dir.join("classify_report.json"), &report)?;
        write_file(&dir.join("classify_report.md"), &report.to_markdown())?;
        s.write_snapshot(&dir.join(SNAPSHOT))?;
    }
    Ok(())
}

pub fn answer(
    common: &Common,
    ckpt: &Path,
    image: Option<&Path>,
    question: Option<&str>,
    batch: Option<&Path>,
    output: Option<&Path>,
) -> Result<()> {
    let s = settings(common)?;
    let gcfg = s.generation()?;
    let cp = load_checkpoint(ckpt)?;
    if let (Some(image), Some(question)) = (image, question) {
        let patches = patchify(&load_image_file(image)?)?;
        let ids = generate(&cp.model, &patches, &cp.vocab.ids_of(question), &gcfg)?;
        println!("{}", decode_tokens(&ids, &cp.vocab)?);
        return Ok(());
    }
    let Some(batch) = batch else {
        return Err(CliError::Usage("answer needs --image with --question, or --batch".into()));
    };
    let base = base_of(batch);
    let file = std::fs::File::open(batch).map_err(|e| CliError::io(batch, e))?;
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let out_name = output.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(batch, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: BatchRequest = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", batch.display(), i + 1)))?;
        let resp = answer_request(&cp.model, &cp.vocab, &req, &base, &gcfg)?;
        writeln!(sink, "{}", serde_json::to_string(&resp)?).map_err(|e| CliError::io(&out_name, e))?;
    }
    sink.flush().map_err(|e| CliError::io(&out_name, e))
}

pub fn ablate(common: &Common, data: &Path, eval_data: Option<&Path>, out: &Path) -> Result<()> {
    let s = settings(common)?;
    let tcfg = s.train_config()?;
    let gcfg = s.generation()?;
    let variants = s.ablation_variants()?;
    let (records, base) = load_valid(data)?;
    let (eval_records, eval_base) = match eval_data {
        Some(p) => load_valid(p)?,
        None => (records.clone(), base.clone()),
    };
    let vocab = Vocab::build(&corpus(&records), s.min_freq())?;
    let train_set = prepare(&records, &base, &vocab)?;
    let eval_set = prepare(&eval_records, &eval_base, &vocab)?;
    let mc = s.model_config(vocab.len())?;
    mkdir(out)?;
    s.write_snapshot(&out.join(SNAPSHOT))?;
    let report = run_ablation(&tcfg, &mc, &variants, &train_set, &eval_set, &vocab, &gcfg)?;
    for r in &report.results {
        write_file(&out.join(format!("history_{}.csv", r.variant.name())), &r.history)?;
    }
    write_json(&out.join("ablation.json"), &report)?;
    write_file(&out.join("ablation.md"), &report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}
