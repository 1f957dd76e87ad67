use tta_inpaint::harness::ExperimentConfig;

#[test]
fn shipped_example_config_is_the_default() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/bench.example.toml");
    let cfg = ExperimentConfig::load(path).unwrap();
    cfg.validate().unwrap();
    let defaults = ExperimentConfig {
        dataset: tta_inpaint::imagedata::DatasetSpec {
            source_dir: "data".into(),
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    assert_eq!(cfg, defaults);
}
