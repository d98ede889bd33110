use std::collections::BTreeMap;

use descap_core::eval::{select_checkpoint, CheckpointMetrics};

use super::{MetricsRow, METRICS_FILE};
use crate::cli::SelectArgs;
use crate::error::{Error, Result};
use crate::io::{self, parse_jsonl, read_file, read_json};

pub fn run(args: SelectArgs) -> Result<()> {
    let path = args.metrics_dir.join(METRICS_FILE);
    let bytes = read_file(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let rows: Vec<MetricsRow> = parse_jsonl(text, &path.display().to_string(), |_| Ok(()))?;
    let baseline: BTreeMap<String, f64> = read_json(&args.baseline)?;
    let mut files = BTreeMap::new();
    let metrics = rows
        .iter()
        .map(|r| {
            let f1 = r.transfer_f1.clone().ok_or_else(|| {
                Error::data(format!(
                    "{}: checkpoint {} has no transfer_f1 (fine-tune with paths.zeroshot set)",
                    path.display(),
                    r.checkpoint_id
                ))
            })?;
            files.insert(r.checkpoint_id.clone(), r.file.clone());
            Ok(CheckpointMetrics {
                id: r.checkpoint_id.clone(),
                epoch: r.record.epoch,
                desc_gt_cap: r.record.val_desc_gt_cap,
                transfer_f1: f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sel = select_checkpoint(&metrics, &baseline, args.alpha)?;
    for (i, r) in sel.rows.iter().enumerate() {
        log::info!(
            "{} {:<32} acc {:.4} transfer {:.4} tradeoff {:.4}",
            if i == sel.selected { "*" } else { " " },
            r.id,
            r.accuracy,
            r.transfer_score,
            r.tradeoff
        );
    }
    if let Some(report) = &args.report {
        io::write_json(report, &sel)?;
    }
    let best = sel.selected_row();
    println!("{}\t{}", best.id, args.metrics_dir.join(&files[&best.id]).display());
    Ok(())
}
