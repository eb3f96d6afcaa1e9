mod common;

use marble::bagdata::{Dataset, Split, SynthSpec};
use marble::model::{encode_slide, HeadKind, MarbleParams};
use marble::numerics::Tensor;
use marble::train::{ablate_scales, evaluate, train, TrainConfig};

fn small_spec(task: HeadKind, n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_slides: n,
        dim: 8,
        coarse_rows: 2,
        coarse_cols: 2,
        coarse_signals: 1,
        fine_signals: 1,
        task,
        seed,
        ..SynthSpec::default()
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        inner: Some(8),
        state: 4,
        epochs: 6,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn flat_metric_stops_after_patience_plus_one_epochs() {
    let ds = Dataset::from_synthetic(&small_spec(HeadKind::Classification, 12, 0), 8, 4).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.0,
        epochs: 30,
        warmup_epochs: 5,
        patience: 10,
        ..small_cfg()
    };
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.report.len(), 11);
    assert!(out.report[10].stopped);
    assert!(out.report[..10].iter().all(|r| !r.stopped));
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn overfits_a_four_slide_toy_set() {
    let spec = small_spec(HeadKind::Classification, 4, 5);
    let base = Dataset::from_synthetic(&spec, 4, 0).unwrap();
    // the val split repeats the training slides so selection tracks memorisation
    let mut slides = base.slides.clone();
    for s in &base.slides {
        let mut copy = s.clone();
        copy.id.push_str("-val");
        slides.push(copy);
    }
    let splits = [vec![Split::Train; 4], vec![Split::Val; 4]].concat();
    let ds = Dataset::new(HeadKind::Classification, slides, splits).unwrap();
    let cfg = TrainConfig {
        base_lr: 1e-2,
        epochs: 30,
        warmup_epochs: 5,
        patience: 30,
        drop_alpha: 0.0,
        weight_decay: 0.0,
        ..small_cfg()
    };
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.report.len(), 30);
    let first = out.report[0].train_loss;
    let last = out.report[29].train_loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    let report = evaluate(&out.final_params, &ds, Split::Train).unwrap();
    assert_eq!(report.accuracy, Some(1.0));
}

#[test]
fn untrained_models_score_near_chance() {
    let ds = Dataset::from_synthetic(&small_spec(HeadKind::Classification, 120, 1), 20, 20).unwrap();
    let mut aucs = Vec::new();
    for seed in 0..8 {
        let cfg = TrainConfig { seed, ..small_cfg() };
        let params = MarbleParams::init(&cfg.model_config(&ds).unwrap()).unwrap();
        aucs.push(evaluate(&params, &ds, Split::Test).unwrap().metric());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.15, "{aucs:?}");
}

#[test]
fn drop_fraction_only_acts_during_training() {
    let ds = Dataset::from_synthetic(&small_spec(HeadKind::Classification, 16, 2), 10, 6).unwrap();
    let mut reports = Vec::new();
    for alpha in [0.0, 0.05, 0.1, 0.2] {
        for shuffle in [false, true] {
            let cfg = TrainConfig {
                base_lr: 0.0,
                weight_decay: 0.0,
                drop_alpha: alpha,
                shuffle,
                ..small_cfg()
            };
            let out = train(&ds, &cfg).unwrap();
            reports.push(evaluate(&out.best, &ds, Split::Val).unwrap());
        }
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn signal_free_data_gives_chance_level_ablation() {
    let spec = SynthSpec {
        amplitude: 0.0,
        ..small_spec(HeadKind::Classification, 260, 4)
    };
    let ds = Dataset::from_synthetic(&spec, 80, 30).unwrap();
    let cfg = TrainConfig {
        base_lr: 1e-3,
        epochs: 4,
        ..small_cfg()
    };
    for row in ablate_scales(&ds, &cfg, 1).unwrap() {
        let auc = row.summary.test[0];
        assert!((auc - 0.5).abs() <= 0.2, "{}: {auc}", row.name);
    }
}

#[test]
fn scan_encoder_is_order_sensitive() {
    let ds = Dataset::from_synthetic(&small_spec(HeadKind::Survival, 1, 3), 1, 0).unwrap();
    let cfg = small_cfg();
    let params = MarbleParams::init(&cfg.model_config(&ds).unwrap()).unwrap();
    let bag = &ds.slides[0].bag;
    let reversed: Vec<Vec<usize>> = bag.levels.iter().map(|l| (0..l.len()).rev().collect()).collect();
    let a = encode_slide(bag, &params).unwrap();
    let b = encode_slide(&bag.permute_levels(&reversed).unwrap(), &params).unwrap();
    let last = a.levels.len() - 1;
    // per-token outputs follow the tokens but depend on the order they were scanned in
    let n = a.levels[last].rows();
    let b_rows: Vec<Vec<f64>> = (0..n).rev().map(|i| b.levels[last].row(i).to_vec()).collect();
    let b_aligned = Tensor::from_rows(&b_rows).unwrap();
    assert!(a.levels[last].max_abs_diff(&b_aligned) > 1e-9);
}
