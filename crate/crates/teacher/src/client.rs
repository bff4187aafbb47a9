use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use log::warn;
use mvaema_core::dataset::synthetic_answer;
use mvaema_core::Category;

use crate::error::{Result, TeacherError};
use crate::image_digest;
use crate::parse::format_response;
use crate::request::TeacherRequest;
use crate::templates::template;

/// Name of the environment variable holding the live API key.
pub const API_KEY_VAR: &str = "MVAEMA_API_KEY";

/// Largest image accepted by the live client.
pub const MAX_IMAGE_BYTES: usize = 20 * 1024 * 1024;

/// Anything that turns (image, template, request) into raw response text.
pub trait Teacher: Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, image: &[u8], template_id: u8, req: &TeacherRequest) -> Result<String>;
}

/// Canned responses stored as `{dir}/{sha256(image)}/{template_id}.txt`.
#[derive(Clone, Debug)]
pub struct MockTeacher {
    pub dir: PathBuf,
    pub model: String,
}

impl MockTeacher {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockTeacher {
            dir: dir.into(),
            model: "mock".into(),
        }
    }

    pub fn entry_path(&self, image: &[u8], template_id: u8) -> PathBuf {
        self.dir.join(image_digest(image)).join(format!("{template_id}.txt"))
    }
}

impl Teacher for MockTeacher {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, image: &[u8], template_id: u8, _req: &TeacherRequest) -> Result<String> {
        template(template_id)?;
        let path = self.entry_path(image, template_id);
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(TeacherError::MockMiss { path }),
            Err(e) => Err(TeacherError::io(path, e)),
        }
    }
}

const STEMS: [&[&str]; 10] = [
    &["are the depicted type", "are shown without a readable scale bar"],
    &["have a regular overall shape", "show a single phase without distinct layers", "are consistent in size and shape"],
    &["span a narrow size range", "are distributed at random", "show little aggregation"],
    &["have a mostly smooth texture", "show few visible defects"],
    &["show contrast variations only from topography", "carry no element labels"],
    &["are mostly separate", "have well defined boundaries"],
    &["show no interaction with a surrounding medium", "appear without foreign objects"],
    &["were captured by scanning electron microscopy", "show no false coloring"],
    &["show no distinct functional regions", "are shown in a static state"],
    &["are suited to materials research", "are experimental samples"],
];

/// Rule-following offline teacher: answers every sub-question of a template
/// in order with a fixed sentence about the image's registered category.
#[derive(Clone, Debug, Default)]
pub struct SyntheticTeacher {
    categories: HashMap<String, Category>,
}

impl SyntheticTeacher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, image: &[u8], category: Category) {
        self.categories.insert(image_digest(image), category);
    }

    /// The answer given to question `q` (0-based) of template `id`.
    pub fn answer(category: Category, id: u8, q: usize) -> Result<String> {
        let t = template(id)?;
        if q >= t.questions.len() {
            return Err(TeacherError::Config(format!("template {id} has {} questions", t.questions.len())));
        }
        if id == 2 && q == 0 {
            return Ok(synthetic_answer(category).to_string());
        }
        Ok(format!("the {} nanomaterials {}", category.phrase(), STEMS[id as usize - 1][q]))
    }

    pub fn response(category: Category, id: u8) -> Result<String> {
        let n = template(id)?.questions.len();
        let answers = (0..n).map(|q| Self::answer(category, id, q)).collect::<Result<Vec<_>>>()?;
        Ok(format_response(&answers))
    }

    /// Writes canned files for `image` so a [`MockTeacher`] on `dir` can
    /// replay them.
    pub fn write_mock(dir: &Path, image: &[u8], category: Category, ids: &[u8]) -> Result<()> {
        let sub = dir.join(image_digest(image));
        std::fs::create_dir_all(&sub).map_err(|e| TeacherError::io(&sub, e))?;
        for &id in ids {
            let path = sub.join(format!("{id}.txt"));
            std::fs::write(&path, Self::response(category, id)?).map_err(|e| TeacherError::io(&path, e))?;
        }
        Ok(())
    }
}

impl Teacher for SyntheticTeacher {
    fn model_id(&self) -> &str {
        "synthetic"
    }

    fn complete(&self, image: &[u8], template_id: u8, _req: &TeacherRequest) -> Result<String> {
        let digest = image_digest(image);
        let category = self.categories.get(&digest).ok_or_else(|| TeacherError::MockMiss {
            path: PathBuf::from(digest),
        })?;
        Self::response(*category, template_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout(String),
    Connect(String),
    /// The transport forbids network use.
    Refused,
}

/// One HTTP POST of a JSON body with bearer authentication.
pub trait Transport: Sync {
    fn post(&self, url: &str, api_key: &str, body: &str) -> std::result::Result<HttpReply, TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, api_key: &str, body: &str) -> std::result::Result<HttpReply, TransportFailure> {
        let resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .header("Content-Type", "application/json")
            .send(body);
        match resp {
            Ok(mut r) => {
                let status = r.status().as_u16();
                let body = r.body_mut().read_to_string().map_err(|e| TransportFailure::Connect(e.to_string()))?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Timeout(t)) => Err(TransportFailure::Timeout(t.to_string())),
            Err(e) => Err(TransportFailure::Connect(e.to_string())),
        }
    }
}

/// Fails every call and counts the attempts; stands in for the network in
/// offline tests.
#[derive(Debug, Default)]
pub struct RefusingTransport {
    calls: AtomicUsize,
}

impl RefusingTransport {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for RefusingTransport {
    fn post(&self, _url: &str, _api_key: &str, _body: &str) -> std::result::Result<HttpReply, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(TransportFailure::Refused)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn post(&self, url: &str, api_key: &str, body: &str) -> std::result::Result<HttpReply, TransportFailure> {
        (**self).post(url, api_key, body)
    }
}

/// Exponential backoff: attempt `i` (0-based) waits `base * 2^(i-1)` first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

pub struct LiveTeacher<T: Transport> {
    pub endpoint: String,
    pub model: String,
    pub retry: RetryPolicy,
    pub max_image_bytes: usize,
    api_key: String,
    transport: T,
}

impl<T: Transport> LiveTeacher<T> {
    pub fn new(endpoint: &str, model: &str, api_key: String, transport: T) -> Self {
        LiveTeacher {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            retry: RetryPolicy::default(),
            max_image_bytes: MAX_IMAGE_BYTES,
            api_key,
            transport,
        }
    }

    /// Reads the key from [`API_KEY_VAR`].
    pub fn from_env(endpoint: &str, model: &str, transport: T) -> Result<Self> {
        let key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()).ok_or(TeacherError::MissingKey(API_KEY_VAR))?;
        Ok(Self::new(endpoint, model, key, transport))
    }
}

fn response_text(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| TeacherError::Response(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| TeacherError::Response("missing choices[0].message.content".into()))
}

impl<T: Transport> Teacher for LiveTeacher<T> {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, image: &[u8], template_id: u8, req: &TeacherRequest) -> Result<String> {
        template(template_id)?;
        if image.len() > self.max_image_bytes {
            return Err(TeacherError::OversizeImage {
                bytes: image.len(),
                limit: self.max_image_bytes,
            });
        }
        let body = serde_json::to_string(req)?;
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let wait = self.retry.base_delay * 2u32.pow(attempt - 1);
                warn!("teacher attempt {attempt} failed ({last}); retrying in {wait:?}");
                std::thread::sleep(wait);
            }
            match self.transport.post(&self.endpoint, &self.api_key, &body) {
                Ok(r) if (200..300).contains(&r.status) => return response_text(&r.body),
                Ok(r) if r.status == 401 || r.status == 403 => return Err(TeacherError::Auth { status: r.status }),
                Ok(r) if r.status == 429 || r.status >= 500 => last = format!("HTTP {}", r.status),
                Ok(r) => {
                    return Err(TeacherError::Http {
                        status: r.status,
                        body: r.body,
                    })
                }
                Err(TransportFailure::Refused) => return Err(TeacherError::Refused),
                Err(TransportFailure::Timeout(m)) => last = format!("timeout: {m}"),
                Err(TransportFailure::Connect(m)) => last = m,
            }
        }
        Err(TeacherError::Exhausted {
            attempts: self.retry.max_attempts,
            last,
        })
    }
}
