//! Blind mean-opinion-score study: task assignment, durable rating log and
//! two-stage aggregation (per image, then per method).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOG_FILE: &str = "ratings.ndjson";
pub const IMAGE_EXT: &str = "png";
pub const LEVELS: std::ops::RangeInclusive<u8> = 1..=5;

/// Scale text shown to raters, best first.
pub const SCALE_LABELS: [&str; 5] = [
    "5 - comparable perceptual quality",
    "4 - slightly worse",
    "3 - notably worse",
    "2 - poor perceptual quality",
    "1 - completely corrupted image",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub reference_dir: PathBuf,
    pub method_dirs: BTreeMap<String, PathBuf>,
    pub image_ids: Vec<String>,
    #[serde(default = "default_target")]
    pub ratings_per_pair_target: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
}

fn default_target() -> usize {
    1
}

impl StudyConfig {
    /// Reads a config; relative directories are resolved against the file's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.reference_dir = base.join(&cfg.reference_dir);
        for dir in cfg.method_dirs.values_mut() {
            *dir = base.join(&*dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.study_id.trim().is_empty() {
            return Err(Error::Validation("study_id is empty".into()));
        }
        if self.method_dirs.is_empty() || self.image_ids.is_empty() {
            return Err(Error::Validation("study needs at least one method and one image".into()));
        }
        if self.ratings_per_pair_target == 0 {
            return Err(Error::Validation("ratings_per_pair_target must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for id in &self.image_ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("image id {id} listed twice")));
            }
            if id.is_empty() || id.contains(['/', '\\']) || id == ".." {
                return Err(Error::Validation(format!("image id {id:?} is not a plain file stem")));
            }
        }
        let mut missing = Vec::new();
        for (name, dir) in std::iter::once(("reference", &self.reference_dir))
            .chain(self.method_dirs.iter().map(|(k, v)| (k.as_str(), v)))
        {
            for id in &self.image_ids {
                if !image_file(dir, id).is_file() {
                    missing.push(format!("{name}/{id}"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!("missing images: {}", missing.join(", "))));
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<Pair> {
        self.method_dirs
            .keys()
            .flat_map(|m| self.image_ids.iter().map(move |i| Pair { method: m.clone(), image_id: i.clone() }))
            .collect()
    }
}

fn image_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{IMAGE_EXT}"))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub method: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub session_id: String,
    pub method: String,
    pub image_id: String,
    pub level: u8,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosResult {
    pub method: String,
    pub mos: f64,
    pub per_image: BTreeMap<String, f64>,
    pub rating_count: usize,
}

/// Mean per image, then mean over rated images, by descending MOS (ties by name).
pub fn aggregate(records: &[RatingRecord]) -> Vec<MosResult> {
    let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<u8>>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.method).or_default().entry(&r.image_id).or_default().push(r.level);
    }
    let mut out: Vec<MosResult> = grouped
        .into_iter()
        .map(|(method, images)| {
            let per_image: BTreeMap<String, f64> = images
                .iter()
                .map(|(id, lv)| (id.to_string(), lv.iter().map(|&l| l as f64).sum::<f64>() / lv.len() as f64))
                .collect();
            MosResult {
                method: method.to_string(),
                mos: per_image.values().sum::<f64>() / per_image.len() as f64,
                rating_count: images.values().map(Vec::len).sum(),
                per_image,
            }
        })
        .collect();
    out.sort_by(|a, b| b.mos.total_cmp(&a.mos).then_with(|| a.method.cmp(&b.method)));
    out
}

pub fn write_ndjson<W: Write>(records: &[RatingRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<export>", e))?;
    }
    Ok(())
}

pub fn read_ndjson<R: Read>(r: R) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<ratings>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn hash_fields(fields: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for f in fields {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The session's own permutation of the method x image grid.
pub fn session_order(cfg: &StudyConfig, session_id: &str) -> Vec<Pair> {
    let seed = cfg.shuffle_seed.to_le_bytes();
    let digest = hash_fields(&[b"order", &seed, session_id.as_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut pairs = cfg.pairs();
    pairs.shuffle(&mut rng);
    pairs
}

fn task_id(cfg: &StudyConfig, session_id: &str, p: &Pair) -> String {
    let seed = cfg.shuffle_seed.to_le_bytes();
    hex(&hash_fields(&[
        b"task",
        cfg.study_id.as_bytes(),
        &seed,
        session_id.as_bytes(),
        p.method.as_bytes(),
        p.image_id.as_bytes(),
    ])[..16])
}

fn image_token(cfg: &StudyConfig, kind: &str, p: &Pair) -> String {
    let seed = cfg.shuffle_seed.to_le_bytes();
    hex(&hash_fields(&[
        b"image",
        cfg.study_id.as_bytes(),
        &seed,
        kind.as_bytes(),
        p.method.as_bytes(),
        p.image_id.as_bytes(),
    ])[..16])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
}

/// What a rater sees. Image references are opaque tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskAssignment {
    Task {
        task_id: String,
        reference: String,
        candidate: String,
        progress: Progress,
    },
    Complete {
        progress: Progress,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub progress: Progress,
}

#[derive(Default)]
struct State {
    records: Vec<RatingRecord>,
    keys: HashSet<(String, String, String)>,
    counts: HashMap<Pair, usize>,
    log: Option<File>,
}

impl State {
    fn insert(&mut self, r: RatingRecord) {
        self.keys.insert((r.session_id.clone(), r.method.clone(), r.image_id.clone()));
        *self
            .counts
            .entry(Pair { method: r.method.clone(), image_id: r.image_id.clone() })
            .or_default() += 1;
        self.records.push(r);
    }

    fn contains(&self, session: &str, p: &Pair) -> bool {
        self.keys.contains(&(session.to_string(), p.method.clone(), p.image_id.clone()))
    }

    fn rated_by(&self, session: &str) -> usize {
        self.records.iter().filter(|r| r.session_id == session).count()
    }
}

/// A running study backed by an append-only log.
pub struct Study {
    cfg: StudyConfig,
    log_path: Option<PathBuf>,
    images: HashMap<String, PathBuf>,
    state: Mutex<State>,
}

fn validate_session(session_id: &str) -> Result<()> {
    if session_id.is_empty() || session_id.len() > 128 || session_id.chars().any(char::is_control) {
        return Err(Error::Validation("session id must be 1-128 printable characters".into()));
    }
    Ok(())
}

/// Loads complete lines from the log. A torn final line (no newline, from a
/// crash mid-append) is dropped and its offset returned so it can be truncated.
fn replay(path: &Path) -> Result<(Vec<RatingRecord>, u64)> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(Error::io(path, e)),
    }
    let good = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let records = read_ndjson(&bytes[..good]).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok((records, good as u64))
}

impl Study {
    /// In-memory study, nothing persisted.
    pub fn ephemeral(cfg: StudyConfig) -> Result<Self> {
        Self::build(cfg, None, Vec::new())
    }

    /// Opens (or creates) `<data_dir>/ratings.ndjson` and replays it.
    pub fn open(cfg: StudyConfig, data_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(data_dir).map_err(|e| Error::io(data_dir, e))?;
        let path = data_dir.join(LOG_FILE);
        let (records, good) = replay(&path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.set_len(good).map_err(|e| Error::io(&path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        let study = Self::build(cfg, Some(path), records)?;
        study.state.lock().expect("study state").log = Some(file);
        Ok(study)
    }

    fn build(cfg: StudyConfig, log_path: Option<PathBuf>, records: Vec<RatingRecord>) -> Result<Self> {
        cfg.validate()?;
        let mut images = HashMap::new();
        for p in cfg.pairs() {
            images.insert(image_token(&cfg, "candidate", &p), image_file(&cfg.method_dirs[&p.method], &p.image_id));
            let r = Pair { method: String::new(), image_id: p.image_id.clone() };
            images.insert(image_token(&cfg, "reference", &r), image_file(&cfg.reference_dir, &p.image_id));
        }
        let grid: HashSet<Pair> = cfg.pairs().into_iter().collect();
        let mut state = State::default();
        for r in records {
            let p = Pair { method: r.method.clone(), image_id: r.image_id.clone() };
            if !grid.contains(&p) || !LEVELS.contains(&r.level) {
                return Err(Error::Validation(format!(
                    "logged rating for {}/{} level {} does not fit this study",
                    r.method, r.image_id, r.level
                )));
            }
            if state.contains(&r.session_id, &p) {
                return Err(Error::Validation(format!(
                    "duplicate logged rating for session {} on {}/{}",
                    r.session_id, r.method, r.image_id
                )));
            }
            state.insert(r);
        }
        Ok(Self { cfg, log_path, images, state: Mutex::new(state) })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    pub fn id(&self) -> &str {
        &self.cfg.study_id
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn total(&self) -> usize {
        self.cfg.method_dirs.len() * self.cfg.image_ids.len()
    }

    /// Next unrated pair for the session: the globally least-rated one
    /// (counts capped at the per-pair target), earliest in the session's
    /// own shuffle on ties.
    pub fn next_task(&self, session_id: &str) -> Result<TaskAssignment> {
        validate_session(session_id)?;
        let state = self.state.lock().expect("study state");
        let progress = Progress { rated: state.rated_by(session_id), total: self.total() };
        let target = self.cfg.ratings_per_pair_target;
        let pick = session_order(&self.cfg, session_id)
            .into_iter()
            .enumerate()
            .filter(|(_, p)| !state.contains(session_id, p))
            .min_by_key(|(pos, p)| (state.counts.get(p).copied().unwrap_or(0).min(target), *pos))
            .map(|(_, p)| p);
        Ok(match pick {
            None => TaskAssignment::Complete { progress },
            Some(p) => {
                let r = Pair { method: String::new(), image_id: p.image_id.clone() };
                TaskAssignment::Task {
                    task_id: task_id(&self.cfg, session_id, &p),
                    reference: image_token(&self.cfg, "reference", &r),
                    candidate: image_token(&self.cfg, "candidate", &p),
                    progress,
                }
            }
        })
    }

    fn resolve_task(&self, session_id: &str, task: &str) -> Option<Pair> {
        self.cfg.pairs().into_iter().find(|p| task_id(&self.cfg, session_id, p) == task)
    }

    /// Appends the rating durably (fsync) before acknowledging.
    pub fn submit_rating(&self, session_id: &str, task: &str, level: i64) -> Result<Ack> {
        validate_session(session_id)?;
        let level = u8::try_from(level)
            .ok()
            .filter(|l| LEVELS.contains(l))
            .ok_or_else(|| Error::Validation(format!("level must be an integer 1-5, got {level}")))?;
        let pair = self
            .resolve_task(session_id, task)
            .ok_or_else(|| Error::NotFound(format!("task {task} for this session")))?;
        let mut state = self.state.lock().expect("study state");
        if state.contains(session_id, &pair) {
            return Err(Error::Conflict("this task was already rated in this session".into()));
        }
        let rec = RatingRecord {
            session_id: session_id.to_string(),
            method: pair.method,
            image_id: pair.image_id,
            level,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        if let Some(file) = state.log.as_mut() {
            let path = self.log_path.as_deref().unwrap_or(Path::new(LOG_FILE));
            let mut line = serde_json::to_vec(&rec).map_err(|e| Error::Parse(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
            file.sync_data().map_err(|e| Error::io(path, e))?;
        }
        state.insert(rec);
        let progress = Progress { rated: state.rated_by(session_id), total: self.total() };
        Ok(Ack { accepted: true, progress })
    }

    pub fn records(&self) -> Vec<RatingRecord> {
        self.state.lock().expect("study state").records.clone()
    }

    pub fn aggregate_mos(&self) -> Vec<MosResult> {
        aggregate(&self.records())
    }

    pub fn export_ratings<W: Write>(&self, w: W) -> Result<()> {
        write_ndjson(&self.records(), w)
    }

    /// File behind an opaque image token.
    pub fn image_path(&self, token: &str) -> Option<&Path> {
        self.images.get(token).map(PathBuf::as_path)
    }
}
