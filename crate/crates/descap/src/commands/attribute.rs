use descap_core::attribution::{attribute, lexicon_correlation, render_ansi, render_html, AttributionReport};
use descap_core::data::TextPurpose;
use descap_core::MediationMode;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::cli::{AttributeArgs, TextChoice};
use crate::error::{Error, Result};
use crate::io::{self, load_lexicon, load_triplets};
use crate::runner::Threaded;

#[derive(Debug, Serialize)]
struct Row<'a> {
    id: &'a str,
    purpose: TextPurpose,
    #[serde(flatten)]
    report: &'a AttributionReport,
}

pub fn run(args: AttributeArgs, runner: &Threaded) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if args.mediation != MediationMode::None && ckpt.site.is_none() {
        return Err(Error::config(format!(
            "--mediation {} needs a checkpoint trained with an intervention site",
            args.mediation.as_str()
        )));
    }
    let lexicon = args.lexicon.as_deref().map(load_lexicon).transpose()?;
    let mut triplets = load_triplets(&args.input)?;
    if let Some(n) = args.limit {
        triplets.truncate(n);
    }
    let purposes: &[TextPurpose] = match args.texts {
        TextChoice::Description => &[TextPurpose::Description],
        TextChoice::Caption => &[TextPurpose::Caption],
        TextChoice::Both => &[TextPurpose::Description, TextPurpose::Caption],
    };
    let max_len = ckpt.model.config().max_seq_len;
    let mut items = Vec::new();
    for t in &triplets {
        for &p in purposes {
            let text = match p {
                TextPurpose::Description => &t.description,
                TextPurpose::Caption => &t.caption,
            };
            let enc = ckpt.tokenizer.encode(text, max_len)?;
            let report = attribute(
                &ckpt.model,
                &ckpt.tokenizer,
                &t.image,
                enc.active(),
                ckpt.site.as_ref(),
                args.mediation,
                args.steps,
                runner,
            )?;
            items.push((t.id.as_str(), p, report));
        }
    }
    let rows: Vec<Row> = items
        .iter()
        .map(|(id, purpose, report)| Row {
            id,
            purpose: *purpose,
            report,
        })
        .collect();
    match &args.out {
        Some(out) => io::write_jsonl(out, &rows)?,
        None => {
            for r in &rows {
                println!("{} {:<11} {}", r.id, purpose_name(r.purpose), render_ansi(r.report));
            }
        }
    }
    if let Some(html) = &args.html {
        let mut page = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attributions</title></head><body>\n");
        for r in &rows {
            page.push_str(&format!("<p><b>{}</b> {}<br>{}</p>\n", html_escape(r.id), purpose_name(r.purpose), render_html(r.report)));
        }
        page.push_str("</body></html>\n");
        io::write_atomic(html, page.as_bytes())?;
    }
    if let Some(lex) = &lexicon {
        let reports: Vec<AttributionReport> = items.into_iter().map(|(_, _, r)| r).collect();
        let corr = lexicon_correlation(&reports, lex)?;
        let mut summary = serde_json::to_value(&corr).expect("summary serializes");
        summary["mediation"] = args.mediation.as_str().into();
        summary["checkpoint_id"] = ckpt.id.clone().into();
        match &args.summary {
            Some(p) => io::write_json(p, &summary)?,
            None => {
                let fmt = |c: &Option<descap_core::eval::Correlation>| match c {
                    Some(c) => format!("pearson {:.4} spearman {:.4}", c.pearson, c.spearman),
                    None => "n/a".into(),
                };
                println!("imageability  {}", fmt(&corr.imageability));
                println!("concreteness  {}", fmt(&corr.concreteness));
                println!("tokens        {}", corr.n_tokens);
            }
        }
    }
    Ok(())
}

fn purpose_name(p: TextPurpose) -> &'static str {
    match p {
        TextPurpose::Description => "description",
        TextPurpose::Caption => "caption",
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
