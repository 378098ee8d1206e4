use vvit::data::{generate_dataset, split, GeneratorConfig};
use vvit::train::{train, TrainConfig};
use vvit::VVitConfig;

#[test]
fn default_task_loss_decreases_for_five_epochs() {
    let ds = generate_dataset(&GeneratorConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let parts = split(&ds, cfg.train_frac, cfg.val_frac, cfg.seed).unwrap();
    let outcome = train::<f32>(
        &VVitConfig::default(),
        &cfg,
        &ds.subset(&parts.train).unwrap(),
        &ds.subset(&parts.val).unwrap(),
    )
    .unwrap();
    let totals: Vec<f64> = outcome.log.iter().map(|e| e.train.total).collect();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}

#[test]
fn external_preset_shifts_the_distribution() {
    let base = generate_dataset(&GeneratorConfig { n_samples: 300, ..GeneratorConfig::default() }).unwrap();
    let ext = generate_dataset(&GeneratorConfig { n_samples: 300, ..GeneratorConfig::external() }).unwrap();
    let mean_pixel = |ds: &vvit::data::Dataset| {
        let px: Vec<f64> = ds.samples.iter().flat_map(|s| s.target_img.iter().copied()).collect();
        px.iter().sum::<f64>() / px.len() as f64
    };
    assert!(mean_pixel(&ext) > mean_pixel(&base));
    assert_ne!(base.samples[0].target_img, ext.samples[0].target_img);
}
