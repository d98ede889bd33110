use descap::checkpoint::Checkpoint;
use descap::config::parse_config;
use descap::io::{load_zeroshot, parse_human_eval, parse_lexicon, parse_triplets, save_zeroshot, to_jsonl_bytes, lexicon_records};
use descap_core::data::{generate, SyntheticSpec, Triplet};
use descap_core::intervention::InterventionSite;
use descap_core::model::Tokenizer;
use descap_core::{DualEncoder, LoraConfig, ModelConfig};
use proptest::prelude::*;

fn small_checkpoint(lora: bool, site: bool) -> Checkpoint {
    let tok = Tokenizer::build(["red dog on grass", "curie 1901 paris"]);
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        max_seq_len: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_image_in: 4,
        logit_scale: 20.0,
    };
    let mut model = DualEncoder::new(cfg.clone(), 3).unwrap();
    if lora {
        model = model.with_lora(LoraConfig { rank: 2, ..Default::default() }, 3).unwrap();
    }
    Checkpoint {
        id: "run/epoch-001".into(),
        epoch: Some(1),
        site: site.then(|| InterventionSite::new(&cfg, 1, 3, 9).unwrap()),
        model,
        tokenizer: tok,
        run_config: serde_json::json!({"seed": 3}),
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (lora, site) in [(false, false), (true, false), (true, true), (false, true)] {
        let c = small_checkpoint(lora, site);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        c.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, c);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let img = [0.3, -1.0, 0.5, 2.0];
        let toks = c.tokenizer.encode("red dog 1901", 8).unwrap();
        assert_eq!(
            c.model.score(&img, toks.active()).unwrap().to_bits(),
            back.model.score(&img, toks.active()).unwrap().to_bits()
        );
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let bytes = small_checkpoint(true, true).to_bytes();
    assert!(Checkpoint::from_bytes(b"").is_err());
    assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0").is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn truncated_checkpoints_fail_cleanly(cut in 0usize..4000) {
        let bytes = small_checkpoint(true, true).to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn corrupted_checkpoints_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = small_checkpoint(true, true).to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        // either a clean error or a checkpoint that can be re-serialized
        if let Ok(c) = Checkpoint::from_bytes(&bytes) {
            let _ = c.to_bytes();
        }
    }

    #[test]
    fn arbitrary_lines_never_panic_the_loaders(text in ".{0,200}") {
        let _ = parse_triplets(&text, "t");
        let _ = parse_human_eval(&text, "h");
        let _ = parse_lexicon(&text, "l");
        let _ = parse_config(text.as_bytes(), "c");
    }

    #[test]
    fn triplets_roundtrip(
        rows in prop::collection::vec(
            (prop::collection::vec(-1e3f64..1e3, 1..6), "[a-z]{1,8}( [a-z]{1,8}){0,4}", "[a-z0-9]{1,8}( [a-z]{1,8}){0,4}"),
            1..8,
        )
    ) {
        let triplets: Vec<Triplet> = rows
            .into_iter()
            .enumerate()
            .filter(|(_, (img, _, _))| img.iter().any(|v| *v != 0.0))
            .map(|(i, (image, description, caption))| Triplet { id: format!("t{i}"), image, description, caption, context: None })
            .collect();
        let text = String::from_utf8(to_jsonl_bytes(&triplets)).unwrap();
        prop_assert_eq!(parse_triplets(&text, "t").unwrap(), triplets);
    }
}

#[test]
fn generated_dataset_files_roundtrip() {
    let data = generate(&SyntheticSpec { n_train: 10, n_val: 4, n_test: 4, n_human_eval: 5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_zeroshot(dir.path(), "zs", &data.zeroshot).unwrap();
    assert_eq!(load_zeroshot(&manifest).unwrap(), data.zeroshot);
    let lex = String::from_utf8(to_jsonl_bytes(&lexicon_records(&data.lexicon))).unwrap();
    assert_eq!(parse_lexicon(&lex, "l").unwrap(), data.lexicon);
    let he = String::from_utf8(to_jsonl_bytes(&data.human_eval)).unwrap();
    assert_eq!(parse_human_eval(&he, "h").unwrap(), data.human_eval);
    let tr = String::from_utf8(to_jsonl_bytes(&data.train)).unwrap();
    assert_eq!(parse_triplets(&tr, "t").unwrap(), data.train);
}

#[test]
fn zero_shot_label_out_of_range_rejected() {
    let data = generate(&SyntheticSpec { n_train: 4, n_val: 2, n_test: 2, n_human_eval: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_zeroshot(dir.path(), "zs", &data.zeroshot).unwrap();
    std::fs::write(dir.path().join("zs_labels.json"), r#"["only"]"#).unwrap();
    let err = load_zeroshot(&manifest).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.message.contains("zs.jsonl:"), "{}", err.message);
}
