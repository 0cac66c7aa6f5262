use super::*;
use crate::strategies::StrategyKind::*;

pub(crate) fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.generator.posts = 60;
    c.dims = ModelDims {
        embed: 4,
        hidden: 4,
    };
    c.max_len = 8;
    c.pretrain.posts = 40;
    c.pretrain.config.epochs = 1;
    c.pretrain.config.batch_size = 8;
    c.strategy.train.epochs = 2;
    c.strategy.train.batch_size = 8;
    c.strategy.vcl.train_samples = 1;
    c.strategy.vcl.predict_samples = 2;
    c.seeds = vec![3];
    c
}

#[test]
fn single_step_has_plasticity_only() {
    let mut c = tiny();
    c.order = vec!["retrieval".into()];
    let r = run_sequence(&c, 3, &RunOptions::default()).unwrap();
    assert_eq!(r.steps, 1);
    for s in &r.strategies {
        assert!(s.pla(1).is_some(), "{}", s.strategy);
        assert_eq!(s.stability, vec![None]);
    }
    assert_eq!(r.to_csv().lines().next().unwrap(), "strategy,pla_1,status");
}

#[test]
fn stationary_is_perfectly_stable_and_ledgers_match() {
    let c = RunConfig {
        strategies: vec![Stationary, Retraining, FineTuning],
        ..tiny()
    };
    let r = run_sequence(&c, 3, &RunOptions::default()).unwrap();
    assert!(!r.partial);
    let st = r.strategy(Stationary).unwrap();
    for t in 2..=5 {
        assert_eq!(st.sta(t), Some(1.0));
    }
    assert_eq!(r.strategy(Retraining).unwrap().ledger.train_set_reads(), 15);
    assert_eq!(r.strategy(FineTuning).unwrap().ledger.train_set_reads(), 5);
}

#[test]
fn markdown_mirrors_the_six_by_five_layout() {
    let r = run_sequence(&tiny(), 3, &RunOptions::default()).unwrap();
    let md = r.to_markdown();
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(
        rows[0].matches("Pla").count() + rows[0].matches("Sta").count(),
        9
    );
    assert!(rows[1..].iter().all(|row| row.matches('|').count() == 11));
}

#[test]
fn empty_report_is_header_only() {
    let csv = SequenceReport::empty().to_csv();
    assert_eq!(csv, "strategy,status\n");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = RunConfig {
        strategies: vec![FineTuning, Ewc, Vcl],
        ..tiny()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let part_dir = tempfile::tempdir().unwrap();
    let opts = |d: &Path, resume, stop_after| RunOptions {
        work_dir: Some(d.to_path_buf()),
        resume,
        stop_after,
    };
    let full = run_sequence(&c, 3, &opts(full_dir.path(), false, None)).unwrap();
    let partial = run_sequence(&c, 3, &opts(part_dir.path(), false, Some(3))).unwrap();
    assert!(partial.partial);
    assert_eq!(partial.strategies[0].ledger.updates.len(), 3);
    let resumed = run_sequence(&c, 3, &opts(part_dir.path(), true, None)).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(report_from_dir(part_dir.path(), 3).unwrap(), full);
}

#[test]
fn identical_runs_write_identical_files() {
    let c = RunConfig {
        strategies: vec![Individual, Vcl],
        ..tiny()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_sequence(&c, 3, &RunOptions::default()).unwrap();
    let rb = run_sequence(&c, 3, &RunOptions::default()).unwrap();
    let fa = ra.write(a.path()).unwrap();
    let fb = rb.write(b.path()).unwrap();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
}

#[test]
fn failing_strategy_marks_report_partial() {
    let c = RunConfig {
        strategies: vec![FineTuning],
        ..tiny()
    };
    let mut prepared = prepare(&c, 3).unwrap();
    prepared.corpora[2].valid.clear();
    let r = run_prepared(&prepared, &c, 3, &RunOptions::default());
    assert!(r.partial);
    assert!(r.strategies[0].error.is_some());
    assert!(r.to_csv().contains("error"));
}

#[test]
fn config_validation() {
    let mut c = tiny();
    c.order = vec!["nonexistent".into()];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny();
    c.train_fraction = 0.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny();
    c.strategies = vec![Ewc, Ewc];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let text = "seeds = [4]\nstrategies = [\"ewc\"]\n[strategy.ewc]\nlambda_scale = 0.5\n";
    let parsed: RunConfig = toml::from_str(text).unwrap();
    assert_eq!(parsed.seeds, vec![4]);
    assert_eq!(parsed.strategy.ewc.lambda_scale, 0.5);
    assert_eq!(parsed.generator.systems.len(), 5);
    assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
}

#[test]
fn fractions_are_nested_and_bounded() {
    let c = tiny();
    let p = prepare(&c, 3).unwrap();
    let half = p.with_fraction(0.5, 3, 8).unwrap();
    assert_eq!(half.corpora[0].train.len(), 20);
    assert!(half.corpora[0]
        .train
        .iter()
        .all(|q| p.corpora[0].train.contains(q)));
    assert!(matches!(p.with_fraction(0.1, 3, 8), Err(Error::Invalid(_))));
}

#[test]
fn ablation_normalizes_to_full_data() {
    let c = RunConfig {
        strategies: vec![FineTuning],
        ..tiny()
    };
    let r = ablate_training_size(&c, &[1.0, 0.5, 0.25]).unwrap();
    assert_eq!(r.runs.len(), 3);
    for t in 1..=5 {
        if let Some(v) = r.normalized_at(FineTuning, 1.0, t) {
            assert_eq!(v, 1.0);
        }
    }
    assert!(ablate_training_size(&c, &[0.5, 1.0]).is_err());
    assert!(ablate_training_size(&c, &[1.0, 0.1]).is_err());
}

#[test]
fn gap_needs_out_of_scope_systems() {
    let c = tiny();
    let p = prepare(&c, 3).unwrap();
    assert!(gap_for_seed(&p, &c, 3, 5).is_err());
    assert!(gap_for_seed(&p, &c, 3, 0).is_err());
    let (inside, outside) = gap_for_seed(&p, &c, 3, 2).unwrap();
    assert!(inside.is_finite() && outside.is_finite());
}

#[test]
fn order_permutes_systems() {
    let mut c = tiny();
    c.order = vec!["human".into(), "retrieval".into()];
    let p = prepare(&c, 3).unwrap();
    assert_eq!(p.system_ids(), vec!["human", "retrieval"]);
}

#[test]
fn file_corpora_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let files = write_corpora(&c, 3, dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    let from_files = RunConfig {
        data_dir: Some(dir.path().to_path_buf()),
        order: c.generator.systems.iter().map(|s| s.name.clone()).collect(),
        ..tiny()
    };
    assert_eq!(
        from_files.load_systems(3).unwrap(),
        c.load_systems(3).unwrap()
    );
}

#[test]
fn gap_from_checkpoint_matches_pooled_training() {
    let c = RunConfig {
        strategies: vec![Retraining],
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        work_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    run_sequence(&c, 3, &opts).unwrap();
    let p = prepare(&c, 3).unwrap();
    let state = load_state(dir.path(), Retraining, 2).unwrap();
    assert_eq!(
        gap_of_state(&p, &state, &c, 3).unwrap(),
        gap_for_seed(&p, &c, 3, 2).unwrap()
    );
    assert!(load_state(dir.path(), Ewc, 2).is_err());
}
