use std::path::PathBuf;

use descap_core::eval::{correlate_scores, triplet_scores, desc_gt_cap_from_scores, zero_shot_f1, CorrelationMethod};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::cli::{EvalArgs, EvalTask};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, load_human_eval, load_triplets, load_zeroshot};
use crate::runner::Threaded;

#[derive(Debug, Serialize)]
struct Report {
    task: &'static str,
    metric: String,
    value: f64,
    n: usize,
    checkpoint_id: String,
    input: String,
    details: Value,
}

pub fn run(args: EvalArgs, _runner: &Threaded) -> Result<()> {
    // the checkpoint comes first so that a bad path fails before anything else
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let input = input_path(&args)?;
    let (model, tok) = (&ckpt.model, &ckpt.tokenizer);
    let report = match args.task {
        EvalTask::Concadia => {
            let triplets = load_triplets(&input)?;
            let scores = triplet_scores(model, tok, &triplets)?;
            let mean = |f: fn(&(f64, f64)) -> f64| scores.iter().map(f).sum::<f64>() / scores.len().max(1) as f64;
            Report {
                task: "concadia",
                metric: "desc_gt_cap".into(),
                value: desc_gt_cap_from_scores(&scores)?,
                n: triplets.len(),
                checkpoint_id: ckpt.id.clone(),
                input: input.display().to_string(),
                details: json!({
                    "mean_description_score": mean(|p| p.0),
                    "mean_caption_score": mean(|p| p.1),
                }),
            }
        }
        EvalTask::Zeroshot => {
            let task = load_zeroshot(&input)?;
            Report {
                task: "zeroshot",
                metric: "macro_f1".into(),
                value: zero_shot_f1(model, tok, &task)?,
                n: task.examples.len(),
                checkpoint_id: ckpt.id.clone(),
                input: input.display().to_string(),
                details: json!({ "name": task.name, "labels": task.labels, "template": task.template }),
            }
        }
        EvalTask::Correlation => {
            let records = load_human_eval(&input)?;
            let c = correlate_scores(model, tok, &records, args.dimension)?;
            let (metric, value) = match args.method {
                CorrelationMethod::Pearson => ("pearson", c.pearson),
                CorrelationMethod::Spearman => ("spearman", c.spearman),
            };
            Report {
                task: "correlation",
                metric: format!("{metric}_{}", args.dimension.as_str()),
                value,
                n: c.n,
                checkpoint_id: ckpt.id.clone(),
                input: input.display().to_string(),
                details: json!({ "dimension": args.dimension.as_str(), "pearson": c.pearson, "spearman": c.spearman }),
            }
        }
    };
    if let Some(out) = &args.out {
        io::write_json(out, &report)?;
    }
    println!("{:<28} {:<24} {:>10} {:>6}", "checkpoint", "metric", "value", "n");
    println!(
        "{:<28} {:<24} {:>10.4} {:>6}",
        report.checkpoint_id, report.metric, report.value, report.n
    );
    Ok(())
}

fn input_path(args: &EvalArgs) -> Result<PathBuf> {
    if let Some(p) = &args.input {
        return Ok(p.clone());
    }
    let Some(config) = &args.config else {
        return Err(Error::config("eval needs --input or --config to locate its data"));
    };
    let loaded = RunConfig::load(config)?;
    let paths = &loaded.config.paths;
    match args.task {
        EvalTask::Concadia => loaded.input("test", &paths.test),
        EvalTask::Zeroshot => loaded.input("zeroshot", &paths.zeroshot),
        EvalTask::Correlation => loaded.input("human_eval", &paths.human_eval),
    }
}
