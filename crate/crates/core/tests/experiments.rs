use std::fs;

use dyncap::experiments::{
    prepare_out_dir, run, sweep_points, train_acl_chain, train_filterbank, ExperimentConfig, ExperimentKind,
    CHAIN_HIDDEN, CHAIN_RANK,
};
use dyncap::layers::ModelGraph;
use dyncap::profiler::{effective_flops, profile};
use dyncap::trainer::TrainConfig;

#[test]
fn effective_flops_track_the_consolidated_count() {
    let cfg = ExperimentConfig::defaults(ExperimentKind::BetaSweep);
    let beta = cfg.beta_list.iter().copied().fold(0.0, f64::max);
    let width = 10 * cfg.bank.n_filters;
    let train = TrainConfig { beta, ..cfg.train.clone() };
    let run = train_filterbank(&cfg.bank, width, cfg.noise_std, &train, cfg.threshold, 64).unwrap();
    let full = profile(&run.trained, 1.0).unwrap().total_flops_per_frame as f64;
    let consolidated = profile(&run.consolidated, 1.0).unwrap().total_flops_per_frame as f64 / full;
    let effective = effective_flops(&run.trained) / full;
    assert!((effective - consolidated).abs() <= 0.15 * consolidated, "{effective} vs {consolidated}");
}

#[test]
fn zero_penalty_sweep_keeps_every_width() {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::BetaSweep);
    cfg.beta_list = vec![0.0];
    cfg.overparam_list = vec![2, 3];
    cfg.train.total_steps = 200;
    cfg.train.phase1_steps = 50;
    for p in sweep_points(&cfg, Some(2)).unwrap() {
        assert_eq!(p.out_factor, p.in_factor);
        assert_eq!(p.flops_ratio, 1.0);
    }
}

#[test]
fn chain_prunes_toward_the_target_rank() {
    let cfg = ExperimentConfig::defaults(ExperimentKind::AclChain);
    let run = train_acl_chain(&cfg.train, cfg.threshold, cfg.eval_frames).unwrap();
    assert!((CHAIN_RANK..CHAIN_HIDDEN).contains(&run.hidden_width), "{}", run.hidden_width);
    assert!(run.equivalence_max_diff < 1e-6);
    let linked = &run.consolidated.layers()[1].layer;
    assert_eq!(linked.in_dim(), run.hidden_width);

    let off = TrainConfig { beta: 0.0, ..cfg.train.clone() };
    assert_eq!(train_acl_chain(&off, cfg.threshold, cfg.eval_frames).unwrap().hidden_width, CHAIN_HIDDEN);
}

#[test]
fn filterbank_run_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Filterbank);
    cfg.train.total_steps = 0;
    cfg.train.phase1_steps = 0;
    cfg.out_dir = tmp.path().join("fb");
    prepare_out_dir(&cfg.out_dir, false).unwrap();
    let written = run(&cfg, None).unwrap();
    let names: Vec<String> =
        written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in [
        "history.csv",
        "filterbank_target.csv",
        "filterbank_initial.csv",
        "filterbank_final.csv",
        "model.bin",
        "model.txt",
        "profile.txt",
        "profile.csv",
        "summary.txt",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    assert!(written.iter().all(|p| p.starts_with(&cfg.out_dir)));

    let summary = fs::read_to_string(cfg.out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("in_factor: 2\n") && summary.contains("out_factor: 2\n"), "{summary}");
    let model = ModelGraph::read_from(fs::File::open(cfg.out_dir.join("model.bin")).unwrap()).unwrap();
    assert_eq!(model.output_dim(), Some(64));
    let target = fs::read_to_string(cfg.out_dir.join("filterbank_target.csv")).unwrap();
    assert_eq!(target.lines().count(), 1 + cfg.bank.bins());
    let profile_txt = fs::read_to_string(cfg.out_dir.join("profile.txt")).unwrap();
    assert!(profile_txt.contains("1 MAC = 2 FLOPs"));
}

#[test]
fn sweep_writes_csv_and_chart() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::BetaSweep);
    cfg.beta_list = vec![0.5];
    cfg.overparam_list = vec![2];
    cfg.train.total_steps = 30;
    cfg.train.phase1_steps = 10;
    cfg.out_dir = tmp.path().to_path_buf();
    run(&cfg, Some(1)).unwrap();
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("beta,in_factor,out_factor,final_l1\n0.5,2,"));
    let svg = fs::read_to_string(tmp.path().join("sweep.svg")).unwrap();
    assert!(svg.contains("<polyline") && svg.contains("stroke-dasharray"));
}
