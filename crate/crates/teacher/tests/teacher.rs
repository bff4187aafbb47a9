use std::sync::Mutex;
use std::time::Duration;

use mvaema_core::dataset::{read_jsonl, synthetic_records, write_jsonl, JsonlWriter, Provenance};
use mvaema_core::imaging::write_fixture_set;
use mvaema_core::Category;
use mvaema_teacher::client::{HttpReply, TransportFailure};
use mvaema_teacher::templates::TEMPLATE_FILE;
use mvaema_teacher::{
    format_response, generate_dataset, image_digest, parse_qa, render_prompt, template, validate_file, GenConfig, GenJob,
    LiveTeacher, MockTeacher, RefusingTransport, RetryPolicy, SyntheticTeacher, Teacher, TeacherError, TeacherRequest,
    Transport, ViolationKind,
};
use proptest::prelude::*;

const TEMPLATE_SHA256: &str = "70e237836f09bded75adda8f2de441ccbf660bb2b241c66e06058e4fc172155b";

#[test]
fn template_file_is_pinned() {
    assert_eq!(image_digest(TEMPLATE_FILE.as_bytes()), TEMPLATE_SHA256);
    let p = render_prompt(2, Category::PorousSponge, true).unwrap();
    assert!(p.starts_with("This SEM image shows porous sponge. **Morphology and Structure** - Describe the overall shape"));
}

#[test]
fn request_carries_pinned_sampling_parameters() {
    let req = TeacherRequest::new("teacher-x", "prompt text", b"\x89PNG....");
    let v: serde_json::Value = serde_json::to_value(&req).unwrap();
    assert_eq!(v["temperature"], 0.25);
    assert_eq!(v["top_p"], 0.1);
    assert_eq!(v["max_tokens"], 3500);
    assert_eq!(v["model"], "teacher-x");
    let url = v["messages"][1]["content"][1]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:image/png;base64,"));
    assert_eq!(req.prompt(), Some("prompt text"));
}

#[test]
fn mock_returns_canned_bytes_and_reports_misses() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockTeacher::new(dir.path());
    let image = b"image-bytes";
    let req = TeacherRequest::new("mock", "p", image);
    match mock.complete(image, 3, &req) {
        Err(TeacherError::MockMiss { path }) => assert!(path.ends_with(format!("{}/3.txt", image_digest(image)))),
        other => panic!("expected a miss, got {other:?}"),
    }
    let canned = "1. ümlaut text\r\n\n2. second  \n";
    let path = mock.entry_path(image, 3);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, canned).unwrap();
    assert_eq!(mock.complete(image, 3, &req).unwrap(), canned);
    assert!(matches!(mock.complete(image, 0, &req), Err(TeacherError::UnknownTemplate(0))));
}

/// Replays scripted replies and records every request body.
struct Scripted {
    replies: Mutex<Vec<Result<HttpReply, TransportFailure>>>,
    bodies: Mutex<Vec<String>>,
}

impl Scripted {
    fn new(mut replies: Vec<Result<HttpReply, TransportFailure>>) -> Self {
        replies.reverse();
        Scripted {
            replies: Mutex::new(replies),
            bodies: Mutex::new(Vec::new()),
        }
    }
}

impl Transport for Scripted {
    fn post(&self, _url: &str, key: &str, body: &str) -> Result<HttpReply, TransportFailure> {
        assert_eq!(key, "k");
        self.bodies.lock().unwrap().push(body.to_string());
        self.replies.lock().unwrap().pop().expect("unscripted request")
    }
}

fn reply(status: u16, body: &str) -> Result<HttpReply, TransportFailure> {
    Ok(HttpReply {
        status,
        body: body.to_string(),
    })
}

fn live(t: &Scripted) -> LiveTeacher<&Scripted> {
    let mut l = LiveTeacher::new("http://teacher.invalid/v1/chat", "teacher-x", "k".into(), t);
    l.retry = RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::ZERO,
    };
    l
}

#[test]
fn live_client_retries_transient_failures() {
    let ok = r#"{"choices":[{"message":{"content":"1. fine"}}]}"#;
    let t = Scripted::new(vec![reply(503, ""), Err(TransportFailure::Timeout("slow".into())), reply(200, ok)]);
    let req = TeacherRequest::new("teacher-x", "p", b"img");
    assert_eq!(live(&t).complete(b"img", 1, &req).unwrap(), "1. fine");
    let bodies = t.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!((sent["temperature"].as_f64(), sent["top_p"].as_f64(), sent["max_tokens"].as_u64()), (Some(0.25), Some(0.1), Some(3500)));

    let t = Scripted::new(vec![reply(429, ""), reply(500, ""), reply(502, "")]);
    assert!(matches!(live(&t).complete(b"img", 1, &req), Err(TeacherError::Exhausted { attempts: 3, .. })));

    let t = Scripted::new(vec![reply(401, "no")]);
    assert!(matches!(live(&t).complete(b"img", 1, &req), Err(TeacherError::Auth { status: 401 })));
    assert_eq!(t.bodies.lock().unwrap().len(), 1);

    let t = Scripted::new(vec![reply(400, "bad"), reply(200, "not json")]);
    assert!(matches!(live(&t).complete(b"img", 1, &req), Err(TeacherError::Http { status: 400, .. })));
    assert!(matches!(live(&t).complete(b"img", 1, &req), Err(TeacherError::Response(_))));

    let t = Scripted::new(vec![]);
    let mut l = live(&t);
    l.max_image_bytes = 2;
    assert!(matches!(l.complete(b"img", 1, &req), Err(TeacherError::OversizeImage { bytes: 3, limit: 2 })));
}

#[test]
fn refusing_transport_blocks_the_network() {
    let refuse = RefusingTransport::default();
    let l = LiveTeacher::new("http://teacher.invalid", "m", "k".into(), &refuse);
    let req = TeacherRequest::new("m", "p", b"x");
    assert!(matches!(l.complete(b"x", 1, &req), Err(TeacherError::Refused)));
    assert_eq!(refuse.calls(), 1);
}

fn fixture(per: usize) -> (tempfile::TempDir, Vec<GenJob>) {
    let dir = tempfile::tempdir().unwrap();
    let entries = write_fixture_set(dir.path(), per, 3).unwrap();
    let mock_dir = dir.path().join("mock");
    let jobs: Vec<GenJob> = entries
        .iter()
        .map(|e| {
            let bytes = std::fs::read(dir.path().join(&e.path)).unwrap();
            SyntheticTeacher::write_mock(&mock_dir, &bytes, e.category, &(1..=10).collect::<Vec<_>>()).unwrap();
            GenJob {
                image: e.path.clone(),
                category: e.category,
            }
        })
        .collect();
    (dir, jobs)
}

#[test]
fn mock_pipeline_is_offline_deterministic_and_valid() {
    let (dir, jobs) = fixture(1);
    let refuse = RefusingTransport::default();
    let mock = MockTeacher::new(dir.path().join("mock"));
    let mut outputs = Vec::new();
    for concurrency in [1, 4] {
        let out = dir.path().join(format!("data_{concurrency}.jsonl"));
        let mut w = JsonlWriter::create(&out).unwrap();
        let cfg = GenConfig {
            concurrency,
            ..GenConfig::default()
        };
        let rep = generate_dataset(&mock, &jobs, dir.path(), &cfg, &mut w).unwrap();
        assert_eq!(rep.requests, 100);
        assert_eq!(rep.warnings, 0);
        let expected: usize = (1..=10).map(|i| template(i).unwrap().questions.len()).sum::<usize>() * 10;
        assert_eq!(rep.records, expected);
        outputs.push(std::fs::read(&out).unwrap());
        let v = validate_file(&out).unwrap();
        assert!(v.is_ok(), "{}", v.to_markdown());
        assert_eq!(v.violations.len(), 0);
        assert_eq!(v.per_template.len(), 10);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(refuse.calls(), 0);

    let recs = read_jsonl(&dir.path().join("data_1.jsonl")).unwrap();
    assert!(recs.iter().all(|r| r.provenance == Provenance::Teacher("mock".into())));
    let morph = recs.iter().find(|r| r.category == Category::Particles && r.template_id == 2).unwrap();
    assert_eq!(morph.instruction, "Describe the overall shape and morphology of the nanomaterials?");
}

#[test]
fn pipeline_stops_on_teacher_failure() {
    let (dir, mut jobs) = fixture(1);
    jobs.push(GenJob {
        image: "missing.png".into(),
        category: Category::Films,
    });
    std::fs::write(dir.path().join("missing.png"), b"not in the mock dir").unwrap();
    let mock = MockTeacher::new(dir.path().join("mock"));
    let mut w = JsonlWriter::create(&dir.path().join("out.jsonl")).unwrap();
    let err = generate_dataset(&mock, &jobs, dir.path(), &GenConfig::default(), &mut w).unwrap_err();
    assert!(matches!(err, TeacherError::MockMiss { .. }));
    let cfg = GenConfig {
        templates: vec![11],
        ..GenConfig::default()
    };
    assert!(matches!(generate_dataset(&mock, &jobs, dir.path(), &cfg, &mut w), Err(TeacherError::UnknownTemplate(11))));
}

#[test]
fn validation_flags_duplicates_and_missing_images() {
    let dir = tempfile::tempdir().unwrap();
    let entries = write_fixture_set(dir.path(), 2, 1).unwrap();
    let mut recs = synthetic_records(&entries);
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &recs).unwrap();
    let rep = validate_file(&path).unwrap();
    assert!(rep.violations.is_empty());
    assert_eq!(rep.per_category.values().sum::<usize>(), 20);

    recs.push(recs[0].clone());
    let mut gone = recs[1].clone();
    gone.image = "nowhere.png".into();
    gone.instruction = "another question?".into();
    recs.push(gone);
    write_jsonl(&path, &recs).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"not\": \"a record\"}\n");
    std::fs::write(&path, text).unwrap();
    let rep = validate_file(&path).unwrap();
    assert_eq!(rep.count(ViolationKind::Duplicate), 1);
    assert_eq!(rep.count(ViolationKind::MissingImage), 1);
    assert_eq!(rep.count(ViolationKind::Schema), 1);
    assert_eq!(rep.hard(), 2);
    assert!(!rep.is_ok());
    assert_eq!(rep.records, 23);
}

fn answer_text() -> impl Strategy<Value = String> {
    let word = prop::sample::select(vec![
        "the", "particles", "show", "20", "nm", "wide", "rods,", "smooth", "(SEM)", "edges.", "porous", "1.5", "µm", "über",
        "**bold**", "no", "defects;", "clustered", "-", "3)",
    ]);
    let line = (prop::sample::select(vec!["The", "Edges", "Most", "Particles", "- Some"]), prop::collection::vec(word, 0..12))
        .prop_map(|(first, rest)| std::iter::once(first).chain(rest).collect::<Vec<_>>().join(" "));
    prop::collection::vec(line, 1..4).prop_map(|l| l.join("\n"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn parse_recovers_rendered_answers(id in 1u8..=10, seed_answers in prop::collection::vec(answer_text(), 3)) {
        let questions = &template(id).unwrap().questions;
        let answers = &seed_answers[..questions.len()];
        let raw = format_response(answers);
        let parsed = parse_qa(&raw, id).unwrap();
        prop_assert_eq!(parsed.warnings, 0);
        let expected: Vec<(String, String)> = questions.iter().cloned().zip(answers.iter().cloned()).collect();
        prop_assert_eq!(parsed.pairs, expected);
    }
}
