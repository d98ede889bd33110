use descap_core::data::{generate, SyntheticSpec};

use crate::cli::GenDataArgs;
use crate::config::{Paths, RunConfig};
use crate::error::{Error, Result};
use crate::io::{self, read_file};

pub fn run(args: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(p) => {
            let bytes = read_file(p).map_err(|e| Error::config(e.message))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let data = generate(&spec)?;
    io::save_dataset(&args.out, &data)?;
    io::write_json(&args.out.join("spec.json"), &spec)?;
    // a ready-to-use run configuration pointing at the files just written
    let run = RunConfig {
        model: descap_core::ModelConfig {
            d_image_in: spec.image_dim,
            ..Default::default()
        },
        paths: Paths {
            train: Some(io::TRAIN_FILE.into()),
            val: Some(io::VAL_FILE.into()),
            test: Some(io::TEST_FILE.into()),
            zeroshot: Some(format!("{}.task.json", io::ZEROSHOT_STEM).into()),
            lexicon: Some(io::LEXICON_FILE.into()),
            human_eval: Some(io::HUMAN_EVAL_FILE.into()),
            checkpoint_dir: Some("checkpoints".into()),
        },
        seed: spec.seed,
        ..Default::default()
    };
    io::write_json(&args.out.join("run.json"), &run)?;
    println!(
        "wrote {} train / {} val / {} test triplets to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}
