mod attribute;
mod eval;
mod finetune;
mod gen_data;
mod pretrain;
mod select;

use std::collections::BTreeMap;
use std::path::Path;

use descap_core::data::ZeroShotTask;
use descap_core::eval::zero_shot_f1;
use descap_core::model::{DualEncoder, Tokenizer};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::cli::{Cli, Command};
use crate::error::{Error, Result};
use crate::runner::Threaded;

pub use finetune::{MetricsRow, METRICS_FILE};
pub use pretrain::{BASELINE_FILE, PRETRAINED_FILE};

/// Execute one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let runner = Threaded::from_flag(cli.threads);
    match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Pretrain(a) => pretrain::run(a),
        Command::Finetune(a) => finetune::run(a, &runner),
        Command::Eval(a) => eval::run(a, &runner),
        Command::Attribute(a) => attribute::run(a, &runner),
        Command::Select(a) => select::run(a),
    }
}

/// RFC 3339 time for log rows. `SOURCE_DATE_EPOCH` pins it so that repeated
/// runs produce identical files.
pub fn timestamp() -> String {
    let t = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|s| OffsetDateTime::from_unix_timestamp(s).ok())
        .unwrap_or_else(OffsetDateTime::now_utc);
    t.format(&Rfc3339).expect("RFC 3339 formatting")
}

/// Zero-shot F1 per task, keyed by task name.
pub fn transfer_f1(model: &DualEncoder, tok: &Tokenizer, tasks: &[ZeroShotTask]) -> Result<BTreeMap<String, f64>> {
    tasks
        .iter()
        .map(|t| Ok((t.name.clone(), zero_shot_f1(model, tok, t)?)))
        .collect()
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}
