use super::*;
use crate::io::read_jsonl;
use crate::nn::{load_checkpoint, ParamStore};

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        av_pretrain_n: 6,
        cs_train_n: 5,
        cs_test_fraction: 0.2,
        length_range: (3, 4),
        max_steps: 2,
        ..Default::default()
    };
    c.pretrain.log_every = 1;
    c.finetune.log_every = 1;
    c.recognizer_train.log_every = 1;
    c.acsr_finetune.steps = 2;
    c
}

fn all_files(root: &Path) -> Vec<String> {
    let layout = Layout::new(root);
    files_under(&[root.to_path_buf()])
        .unwrap()
        .iter()
        .map(|p| layout.relative(p))
        .filter(|p| p != "run_manifest.json")
        .collect()
}

#[test]
fn split_arithmetic_and_determinism() {
    let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
    let s = split_ids(&ids, 0.1, 3);
    assert_eq!((s.train.len(), s.test.len()), (9, 1));
    assert_eq!(s, split_ids(&ids, 0.1, 3));
    let mut all = [s.train.clone(), s.test.clone()].concat();
    all.sort();
    assert_eq!(all, {
        let mut v = ids.clone();
        v.sort();
        v
    });
    assert_eq!(split_ids(&ids[..2], 0.01, 0).test.len(), 1);
    assert_eq!(split_ids(&ids[..2], 0.99, 0).train.len(), 1);
}

#[test]
fn config_rules() {
    let c = ExperimentConfig::default();
    c.validate().unwrap();
    let moved = ExperimentConfig {
        output_dir: Some("/elsewhere".into()),
        ..c.clone()
    };
    assert_eq!(c.hash(), moved.hash());
    assert_ne!(c.hash(), ExperimentConfig { seed: 2, ..c.clone() }.hash());
    for bad in [0.0, 1.0, -0.5] {
        assert!(ExperimentConfig { cs_test_fraction: bad, ..c.clone() }.validate().is_err());
    }
    let json = serde_json::to_string(&c).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, c);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
    assert_eq!(partial.seed, 7);
    assert_eq!(partial.av_pretrain_n, 300);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 7}"#).is_err());
}

#[test]
fn layout_resolution_order() {
    let c = ExperimentConfig {
        output_dir: Some("/from-config".into()),
        ..Default::default()
    };
    assert_eq!(Layout::resolve(Some(Path::new("/cli")), &c).unwrap().root, PathBuf::from("/cli"));
    assert_eq!(Layout::resolve(None, &c).unwrap().root, PathBuf::from("/from-config"));
}

#[test]
fn synth_data_refuses_overwrite_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = ExperimentConfig {
        cs_train_n: 10,
        cs_test_fraction: 0.1,
        ..tiny_config()
    };
    cmd_synth_data(&layout, &cfg, false).unwrap();
    let records = std::fs::read_to_string(layout.corpus(CorpusKind::Cs).join("manifest.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 10);
    let split: Split = read_json(&layout.corpus(CorpusKind::Cs).join("split.json")).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (9, 1));
    let before = std::fs::read(layout.corpus(CorpusKind::Cs).join("split.json")).unwrap();
    assert!(matches!(cmd_synth_data(&layout, &cfg, false), Err(Error::OutputExists(_))));
    cmd_synth_data(&layout, &cfg, true).unwrap();
    assert_eq!(before, std::fs::read(layout.corpus(CorpusKind::Cs).join("split.json")).unwrap());
    let m = layout.read_manifest().unwrap().unwrap();
    assert_eq!(m.stages["synth-data"].status, StageStatus::Done);
    assert_eq!(m.config, cfg);
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny_config();
    assert!(matches!(cmd_fit_pca(&layout, &cfg, false), Err(Error::MissingArtifact(_))));
    assert!(matches!(
        cmd_train(&layout, &cfg, Phase::Cs(StrategyTag::S3FrozenEncoder), false),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny_config();
    let tags = [StrategyTag::S1Scratch, StrategyTag::S3FrozenEncoder];
    let report = run_all(&layout, &cfg, &[1], &tags, false).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.median("s3", true).is_some());

    // The manifest accounts for every file on disk.
    let manifest = layout.read_manifest().unwrap().unwrap();
    let mut listed: Vec<String> = manifest.stages.values().flat_map(|s| s.outputs.keys().cloned()).collect();
    listed.sort();
    let mut on_disk = all_files(dir.path());
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert!(manifest.stages.values().all(|s| s.status == StageStatus::Done));

    // Frozen encoder survives fine-tuning bit for bit; the rest moves.
    let ft = layout.finetune(1, StrategyTag::S3FrozenEncoder);
    let init: ParamStore<f32> = load_checkpoint(&ft.join(INIT_CKPT)).unwrap();
    let fin: ParamStore<f32> = load_checkpoint(&ft.join(FINAL_CKPT)).unwrap();
    for (name, t) in init.iter() {
        let same = t.data() == fin.get(name).unwrap().data();
        assert_eq!(same, name.starts_with(crate::generator::ENCODER_PREFIX), "{name}");
    }

    let eval: EvalReport = read_json(&layout.eval(1, StrategyTag::S3FrozenEncoder, false)).unwrap();
    assert_eq!(eval.config_hash, ExperimentConfig { strategy: StrategyTag::S3FrozenEncoder, ..cfg.clone() }.hash());
    assert_eq!(eval.n, eval.utterances.iter().map(|u| u.n).sum::<usize>());
    let text = std::fs::read_to_string(layout.eval(1, StrategyTag::S3FrozenEncoder, false)).unwrap();
    for key in ["\"N\"", "\"D\"", "\"S\"", "\"I\"", "\"config_hash\""] {
        assert!(text.contains(key), "{key}");
    }
    assert!(!text.contains("elapsed"));

    // Generated lengths come from the gate, so they need not match the reference.
    let gen: Vec<GeneratedRecord> = read_jsonl(&layout.generated(1, StrategyTag::S1Scratch).join(GENERATED_INDEX)).unwrap();
    assert_eq!(gen.len(), cfg.cs_train_n);
    for r in &gen {
        let (h, _) = read_generated(&layout.generated(1, StrategyTag::S1Scratch), &r.id).unwrap();
        assert_eq!(h.rows, r.frames);
    }

    let split: Split = read_json(&layout.corpus(CorpusKind::Cs).join("split.json")).unwrap();
    for id in &split.test {
        let svg = std::fs::read_to_string(layout.plots(1, StrategyTag::S3FrozenEncoder).join(format!("{id}-overlay.svg"))).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        let att = std::fs::read_to_string(layout.plots(1, StrategyTag::S3FrozenEncoder).join(format!("{id}-attention.svg"))).unwrap();
        roxmltree::Document::parse(&att).unwrap();
    }

    // Rerunning a stage needs --force and reproduces the same report.
    let c3 = ExperimentConfig { strategy: StrategyTag::S3FrozenEncoder, ..cfg.clone() };
    let src = EvalSource::Generated(StrategyTag::S3FrozenEncoder);
    assert!(matches!(cmd_evaluate(&layout, &c3, src, false, false), Err(Error::OutputExists(_))));
    let again = cmd_evaluate(&layout, &c3, src, false, true).unwrap();
    assert_eq!(again, eval);

    let oracle = cmd_evaluate(&layout, &c3, EvalSource::Oracle, false, false).unwrap();
    assert_eq!(oracle.source, "oracle");
    assert_eq!(oracle.n, eval.n);
    assert!(cmd_evaluate(&layout, &c3, EvalSource::Oracle, true, true).is_err());
}

#[test]
fn zero_steps_keep_the_initialization_and_empty_generation_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = ExperimentConfig {
        max_steps: 0,
        ..tiny_config()
    };
    cmd_synth_data(&layout, &cfg, false).unwrap();
    cmd_fit_pca(&layout, &cfg, false).unwrap();
    cmd_train(&layout, &cfg, Phase::Cs(StrategyTag::S1Scratch), false).unwrap();
    let d = layout.finetune(cfg.seed, StrategyTag::S1Scratch);
    assert_eq!(std::fs::read(d.join(INIT_CKPT)).unwrap(), std::fs::read(d.join(FINAL_CKPT)).unwrap());
    cmd_generate(&layout, &cfg, StrategyTag::S1Scratch, Some(&[]), false).unwrap();
    let files = files_under(&[layout.generated(cfg.seed, StrategyTag::S1Scratch)]).unwrap();
    assert_eq!(files.len(), 1);
    assert_eq!(std::fs::read(&files[0]).unwrap(), Vec::<u8>::new());
}

#[test]
fn identical_streams_overlay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny_config();
    cmd_synth_data(&layout, &cfg, false).unwrap();
    cmd_fit_pca(&layout, &cfg, false).unwrap();
    let (ph, pl) = load_pcas(&layout).unwrap();
    let set = load_features(&layout.features(CorpusKind::Cs), &layout.corpus(CorpusKind::Cs), &cfg.cue().unwrap()).unwrap();
    let b = &set.bundles[0];
    let plot = OverlayPlot::new("x", &b.hand, &b.lips, &b.hand, &b.lips, &ph, &pl).unwrap();
    assert_eq!(plot.max_point_distance(), 0.0);
    assert_eq!(plot.steps(), b.frames());
    assert_eq!(matched_distance(&b.hand, &b.hand).unwrap(), 0.0);

    let svg = overlay_svg(&plot);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("panel")).collect();
    assert_eq!(panels.len(), plot.steps());
    for p in panels {
        let count = |c: &str| p.children().filter(|n| n.attribute("class") == Some(c)).count();
        assert_eq!((count("hand"), count("lips")), (21, 42));
    }
    let fills: Vec<_> = doc.descendants().filter_map(|n| n.attribute("fill")).collect();
    assert!(fills.contains(&"green") && fills.contains(&"red"));
}
