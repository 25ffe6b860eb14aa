//! Round trips of the files written for benchmarks and runs.

use crlab::experiment::{self, generate_benchmark, load_benchmark, load_params, load_record, save_run};
use crlab::cld_gen::BenchmarkConfig;
use crlab::linalg::Matrix;
use crlab::trainer::{train, ModelConfig, TrainConfig};

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert!(a.same_shape(b));
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn benchmark_round_trips_through_its_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = BenchmarkConfig {
        seed: 17,
        ..BenchmarkConfig::default()
    };
    let manifest = generate_benchmark(&config, tmp.path(), false).unwrap();
    assert!(manifest.support_ok);
    let (loaded, loaded_manifest) = load_benchmark(tmp.path()).unwrap();
    assert_eq!(loaded_manifest, manifest);
    let original = crlab::cld_gen::make_spurcorr_family(&config, &mut crlab::rng::stream_rng(17, crlab::rng::Stream::Family)).unwrap();
    for (a, b) in [
        (&original.family.label_table, &loaded.family.label_table),
        (&original.family.causal_embed, &loaded.family.causal_embed),
        (&original.family.style_embed, &loaded.family.style_embed),
        (&original.source.joint_table, &loaded.source.joint_table),
        (&original.validation.joint_table, &loaded.validation.joint_table),
        (&original.target.joint_table, &loaded.target.joint_table),
    ] {
        assert!(max_abs_diff(a, b) <= 1e-15);
    }
    assert_eq!(experiment::benchmark_id(&loaded).unwrap(), manifest.benchmark_id);
}

#[test]
fn run_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let bench_dir = tmp.path().join("bench");
    let manifest = generate_benchmark(&BenchmarkConfig::default(), &bench_dir, false).unwrap();
    let (b, _) = load_benchmark(&bench_dir).unwrap();
    let config = TrainConfig {
        method: "cr:lam".parse().unwrap(),
        epochs: 2,
        train_size: 100,
        eval_samples: 300,
        eval_pairs: 30,
        model: ModelConfig {
            hidden_widths: vec![8],
            feature_units: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&b.family, &b.source, &b.validation, &b.target, &config).unwrap();
    let dir = save_run(tmp.path(), &manifest.benchmark_id, &out, false).unwrap();
    assert_eq!(dir, experiment::run_dir(tmp.path(), &manifest.benchmark_id, &config).unwrap());
    assert_eq!(load_record(&dir).unwrap(), out.record);
    assert_eq!(load_params(&dir).unwrap(), out.params);
    // saving the same output again leaves the files alone
    assert_eq!(save_run(tmp.path(), &manifest.benchmark_id, &out, false).unwrap(), dir);
}
