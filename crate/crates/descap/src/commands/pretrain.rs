use descap_core::model::{DualEncoder, Tokenizer};
use descap_core::objectives::{prepare, pretrain, PretrainRecord};
use serde::Serialize;

use super::{ensure_dir, timestamp, transfer_f1};
use crate::checkpoint::Checkpoint;
use crate::cli::PretrainArgs;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, load_triplets, load_zeroshot};

pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const BASELINE_FILE: &str = "baseline_transfer.json";
const LOG_FILE: &str = "pretrain_metrics.jsonl";

#[derive(Serialize)]
struct Row<'a> {
    #[serde(flatten)]
    record: &'a PretrainRecord,
    timestamp: String,
}

pub fn run(args: PretrainArgs) -> Result<()> {
    let mut loaded = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        loaded.config.seed = seed;
    }
    if let Some(e) = args.epochs {
        loaded.config.pretrain.epochs = e;
    }
    loaded.config = loaded.config.clone().normalized()?;
    let cfg = &loaded.config;
    let train_path = loaded.input("train", &cfg.paths.train)?;
    let zs_path = loaded.optional_input("zeroshot", &cfg.paths.zeroshot)?;
    let out_dir = loaded.checkpoint_dir()?;

    let train = load_triplets(&train_path)?;
    if train.is_empty() {
        return Err(Error::data(format!("{}: no training triplets", train_path.display())));
    }
    let tasks = match &zs_path {
        Some(p) => vec![load_zeroshot(p)?],
        None => Vec::new(),
    };
    let mut corpus: Vec<String> = train
        .iter()
        .flat_map(|t| [t.description.clone(), t.caption.clone()])
        .collect();
    for task in &tasks {
        corpus.extend((0..task.labels.len()).map(|l| task.prompt(l)));
    }
    let tok = Tokenizer::build(corpus.iter().map(String::as_str));

    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = tok.vocab_size();
    } else if model_cfg.vocab_size != tok.vocab_size() {
        return Err(Error::config(format!(
            "model.vocab_size is {} but the training corpus yields {} tokens (use 0 to size automatically)",
            model_cfg.vocab_size,
            tok.vocab_size()
        )));
    }
    if let Some(t) = train.iter().find(|t| t.image.len() != model_cfg.d_image_in) {
        return Err(Error::config(format!(
            "model.d_image_in is {} but triplet {} has {} image features",
            model_cfg.d_image_in,
            t.id,
            t.image.len()
        )));
    }
    let prepared = prepare(&train, &tok, model_cfg.max_seq_len)?;
    let mut model = DualEncoder::new(model_cfg, cfg.seed)?;
    ensure_dir(&out_dir)?;
    let mut rows = Vec::new();
    pretrain(&mut model, &prepared, &cfg.pretrain, |_, r| {
        log::info!("pretrain epoch {} loss {:.5}", r.epoch, r.train_loss);
        rows.push(serde_json::to_value(Row {
            record: r,
            timestamp: timestamp(),
        })
        .expect("row serializes"));
        Ok(())
    })?;
    io::write_jsonl(&out_dir.join(LOG_FILE), &rows)?;
    let ckpt = Checkpoint {
        id: "pretrained".into(),
        epoch: None,
        model,
        tokenizer: tok,
        site: None,
        run_config: cfg.to_value(),
    };
    let path = out_dir.join(PRETRAINED_FILE);
    ckpt.save(&path)?;
    if !tasks.is_empty() {
        let f1 = transfer_f1(&ckpt.model, &ckpt.tokenizer, &tasks)?;
        io::write_json(&out_dir.join(BASELINE_FILE), &f1)?;
    }
    println!("{}", path.display());
    Ok(())
}
