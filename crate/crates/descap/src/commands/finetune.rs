use std::collections::BTreeMap;
use std::path::PathBuf;

use descap_core::eval::transfer_score;
use descap_core::objectives::{prepare, prepare_trainee, train, EpochRecord, TrainData};
use serde::{Deserialize, Serialize};

use super::{ensure_dir, timestamp, transfer_f1, BASELINE_FILE, PRETRAINED_FILE};
use crate::checkpoint::Checkpoint;
use crate::cli::FinetuneArgs;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, load_triplets, load_zeroshot};
use crate::runner::Threaded;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint_id: String,
    /// Checkpoint file name, relative to the metrics file.
    pub file: String,
    #[serde(flatten)]
    pub record: EpochRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_f1: Option<BTreeMap<String, f64>>,
    pub timestamp: String,
}

pub fn run(args: FinetuneArgs, runner: &Threaded) -> Result<()> {
    let mut loaded = RunConfig::load(&args.config)?;
    {
        let c = &mut loaded.config;
        if let Some(v) = args.seed {
            c.seed = v;
        }
        if let Some(v) = args.objective {
            c.train.objective = v;
        }
        if let Some(v) = args.adapter {
            c.train.adapter = v;
        }
        if let Some(v) = args.alpha {
            c.train.alpha = v;
        }
        if let Some(v) = args.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = args.epochs {
            c.train.epochs = v;
        }
    }
    loaded.config = loaded.config.clone().normalized()?;
    let cfg = loaded.config.clone();
    let train_path = loaded.input("train", &cfg.paths.train)?;
    let val_path = loaded.input("val", &cfg.paths.val)?;
    let zs_path = loaded.optional_input("zeroshot", &cfg.paths.zeroshot)?;
    let base_path = match &args.base {
        Some(p) => p.clone(),
        None => loaded.checkpoint_dir()?.join(PRETRAINED_FILE),
    };
    let run_name = format!("{}-{}", cfg.train.objective.as_str(), cfg.train.adapter.as_str());
    let out_dir: PathBuf = match &args.out {
        Some(p) => p.clone(),
        None => loaded.checkpoint_dir()?.join(&run_name),
    };

    let base = Checkpoint::load(&base_path)?;
    let tok = base.tokenizer.clone();
    let max_len = base.model.config().max_seq_len;
    let train_set = prepare(&load_triplets(&train_path)?, &tok, max_len)?;
    let val_set = prepare(&load_triplets(&val_path)?, &tok, max_len)?;
    let tasks = match &zs_path {
        Some(p) => vec![load_zeroshot(p)?],
        None => Vec::new(),
    };
    let baseline = if tasks.is_empty() {
        None
    } else {
        Some(transfer_f1(&base.model, &tok, &tasks)?)
    };

    let mut trainee = prepare_trainee(base.model, &cfg.train, &cfg.lora, cfg.site.layer, cfg.site.k)?;
    if trainee.site.is_some() {
        if let Some(s) = base.site {
            trainee.site = Some(s);
        }
    }
    ensure_dir(&out_dir)?;
    if let Some(b) = &baseline {
        io::write_json(&out_dir.join(BASELINE_FILE), b)?;
    }
    let run_config = cfg.to_value();
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut on_epoch = |t: &descap_core::objectives::Trainee, record: &mut EpochRecord| -> Result<()> {
        let f1 = match &baseline {
            Some(b) => {
                let f1 = transfer_f1(&t.model, &tok, &tasks)?;
                record.transfer_score = Some(transfer_score(&f1, b)?.1);
                Some(f1)
            }
            None => None,
        };
        let file = format!("epoch-{:03}.ckpt", record.epoch);
        let ckpt = Checkpoint {
            id: format!("{run_name}/epoch-{:03}", record.epoch),
            epoch: Some(record.epoch),
            model: t.model.clone(),
            tokenizer: tok.clone(),
            site: t.site.clone(),
            run_config: run_config.clone(),
        };
        ckpt.save(&out_dir.join(&file))?;
        log::info!(
            "epoch {} loss {:.5} val Desc>Cap {:.1}%{}",
            record.epoch,
            record.train_loss,
            record.val_desc_gt_cap,
            record
                .transfer_score
                .map(|s| format!(" transfer {s:.3}"))
                .unwrap_or_default()
        );
        rows.push(MetricsRow {
            checkpoint_id: ckpt.id,
            file,
            record: record.clone(),
            transfer_f1: f1,
            timestamp: timestamp(),
        });
        // rewrite the whole log so an interrupted run leaves a valid file
        io::write_jsonl(&metrics_path, &rows)?;
        Ok(())
    };
    let mut failure: Option<Error> = None;
    let outcome = train(
        &mut trainee,
        TrainData {
            train: &train_set,
            val: &val_set,
        },
        &cfg.train,
        runner,
        |t, record| {
            on_epoch(t, record).map_err(|e| {
                let msg = e.message.clone();
                failure = Some(e);
                descap_core::Error::Data(msg)
            })
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = outcome?;
    if outcome.stopped_early {
        log::info!("stopped early; best validation epoch {}", outcome.best_epoch);
    }
    println!("{}", out_dir.display());
    Ok(())
}

