//! JSON-lines datasets, lexicons, zero-shot tasks and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use descap_core::data::{HumanRating, Lexicon, LexiconEntry, SyntheticData, Triplet, ZeroShotTask, DEFAULT_TEMPLATE};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn to_jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl_bytes(records))
}

/// Parse JSON lines from text, checking each record with `check`. Blank
/// lines are skipped. The first bad line aborts with its 1-based number.
pub fn parse_jsonl<T, F>(text: &str, origin: &str, mut check: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<()>,
{
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{origin}:{}: {e}", i + 1)))?;
        check(&rec).map_err(|e| Error::data(format!("{origin}:{}: {}", i + 1, e.message)))?;
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("{origin}: no records");
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T, F>(path: &Path, check: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<()>,
{
    parse_jsonl(&read_text(path)?, &path.display().to_string(), check)
}

pub fn parse_triplets(text: &str, origin: &str) -> Result<Vec<Triplet>> {
    parse_jsonl(text, origin, |t: &Triplet| Ok(t.validate()?))
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    parse_triplets(&read_text(path)?, &path.display().to_string())
}

pub fn parse_human_eval(text: &str, origin: &str) -> Result<Vec<HumanRating>> {
    parse_jsonl(text, origin, |r: &HumanRating| {
        descap_core::data::validate_image(&r.image)?;
        if r.text.trim().is_empty() {
            return Err(Error::data("empty text"));
        }
        let dims = [Some(r.overall), r.imaginability, r.relevance, r.irrelevance];
        if dims.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("ratings must be finite"));
        }
        Ok(())
    })
}

pub fn load_human_eval(path: &Path) -> Result<Vec<HumanRating>> {
    parse_human_eval(&read_text(path)?, &path.display().to_string())
}

/// One line of a lexicon file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconRecord {
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imageability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concreteness: Option<f64>,
}

pub fn parse_lexicon(text: &str, origin: &str) -> Result<Lexicon> {
    let records = parse_jsonl(text, origin, |r: &LexiconRecord| {
        if r.token.is_empty() {
            return Err(Error::data("empty token"));
        }
        if [r.imageability, r.concreteness].iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("ratings must be finite"));
        }
        Ok(())
    })?;
    Ok(records
        .into_iter()
        .map(|r| {
            (
                r.token.to_lowercase(),
                LexiconEntry {
                    imageability: r.imageability,
                    concreteness: r.concreteness,
                },
            )
        })
        .collect())
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    parse_lexicon(&read_text(path)?, &path.display().to_string())
}

pub fn lexicon_records(lexicon: &Lexicon) -> Vec<LexiconRecord> {
    lexicon
        .iter()
        .map(|(token, e)| LexiconRecord {
            token: token.clone(),
            imageability: e.imageability,
            concreteness: e.concreteness,
        })
        .collect()
}

/// One line of `zeroshot.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotRecord {
    pub image: Vec<f64>,
    pub label: usize,
}

/// Task manifest tying the example and label files together. Paths are
/// relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotManifest {
    pub name: String,
    #[serde(default = "default_template")]
    pub template: String,
    pub examples: PathBuf,
    pub labels: PathBuf,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_zeroshot(manifest_path: &Path) -> Result<ZeroShotTask> {
    let m: ZeroShotManifest = read_json(manifest_path)?;
    let labels: Vec<String> = read_json(&relative_to(manifest_path, &m.labels))?;
    let n = labels.len();
    let records = read_jsonl(&relative_to(manifest_path, &m.examples), |r: &ZeroShotRecord| {
        descap_core::data::validate_image(&r.image)?;
        if r.label >= n {
            return Err(Error::data(format!("label {} out of range for {n} labels", r.label)));
        }
        Ok(())
    })?;
    let task = ZeroShotTask {
        name: m.name,
        labels,
        examples: records.into_iter().map(|r| (r.image, r.label)).collect(),
        template: m.template,
    };
    task.validate().map_err(|e| Error::from(e).context(manifest_path.display()))?;
    Ok(task)
}

/// Write a task as `<stem>.jsonl`, `<stem>_labels.json` and the manifest
/// `<stem>.task.json` inside `dir`; returns the manifest path.
pub fn save_zeroshot(dir: &Path, stem: &str, task: &ZeroShotTask) -> Result<PathBuf> {
    let examples = format!("{stem}.jsonl");
    let labels = format!("{stem}_labels.json");
    let records: Vec<ZeroShotRecord> = task
        .examples
        .iter()
        .map(|(image, label)| ZeroShotRecord {
            image: image.clone(),
            label: *label,
        })
        .collect();
    write_jsonl(&dir.join(&examples), &records)?;
    write_json(&dir.join(&labels), &task.labels)?;
    let manifest = ZeroShotManifest {
        name: task.name.clone(),
        template: task.template.clone(),
        examples: examples.into(),
        labels: labels.into(),
    };
    let path = dir.join(format!("{stem}.task.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// File names written by [`save_dataset`].
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ZEROSHOT_STEM: &str = "zeroshot";
pub const LEXICON_FILE: &str = "lexicon.jsonl";
pub const HUMAN_EVAL_FILE: &str = "human_eval.jsonl";

pub fn save_dataset(dir: &Path, data: &SyntheticData) -> Result<()> {
    write_jsonl(&dir.join(TRAIN_FILE), &data.train)?;
    write_jsonl(&dir.join(VAL_FILE), &data.val)?;
    write_jsonl(&dir.join(TEST_FILE), &data.test)?;
    save_zeroshot(dir, ZEROSHOT_STEM, &data.zeroshot)?;
    write_jsonl(&dir.join(LEXICON_FILE), &lexicon_records(&data.lexicon))?;
    write_jsonl(&dir.join(HUMAN_EVAL_FILE), &data.human_eval)?;
    Ok(())
}
