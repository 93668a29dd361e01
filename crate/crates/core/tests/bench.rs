use tsfm_kit::bench::{self, generate_dataset, mean_abs_amplitude, BenchSuite, DatasetSpec, ExperimentConfig, Generator};
use tsfm_kit::prelude::*;

fn one_nn(train: &Tensor, labels: &[usize], queries: &Tensor) -> Vec<usize> {
    (0..queries.rows())
        .map(|q| {
            let (best, _) = (0..train.rows())
                .map(|i| {
                    let d: f64 = train.row(i).iter().zip(queries.row(q)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (i, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            labels[best]
        })
        .collect()
}

#[test]
fn noiseless_sine_classes_are_separable_by_one_nn() {
    for seed in [0, 1, 2] {
        let ds = generate_dataset(&DatasetSpec::new(Generator::SineClass, 60, 30, 64), seed).unwrap();
        let (Targets::Labels(tr), Targets::Labels(te)) = (&ds.train.targets, &ds.test.targets) else {
            panic!("labels expected");
        };
        let pred = one_nn(&ds.train.flat(), tr, &ds.test.flat());
        assert_eq!(bench::accuracy(&pred, te), 1.0, "seed {seed}");
    }
}

#[test]
fn constant_series_amplitude_is_its_absolute_value() {
    assert_eq!(mean_abs_amplitude(&[-2.5; 16]), 2.5);
    assert_eq!(mean_abs_amplitude(&[0.75; 3]), 0.75);
}

#[test]
fn datasets_depend_on_the_seed_only() {
    let mut spec = DatasetSpec::new(Generator::ArForecast, 20, 10, 32);
    spec.channels = 2;
    spec.noise_std = 0.1;
    let a = generate_dataset(&spec, 9).unwrap();
    let b = generate_dataset(&spec, 9).unwrap();
    let c = generate_dataset(&spec, 10).unwrap();
    assert!(a.train.values.bitwise_eq(&b.train.values));
    assert!(!a.train.values.bitwise_eq(&c.train.values));
    let Targets::Real(t) = &a.train.targets else { panic!("real targets expected") };
    assert_eq!(t.shape(), &[20, 2 * spec.horizon]);
}

#[test]
fn invalid_specs_are_rejected() {
    let base = DatasetSpec::new(Generator::AmplitudeReg, 10, 5, 32);
    let mut bad = vec![];
    bad.push(DatasetSpec { n_train: 0, ..base.clone() });
    bad.push(DatasetSpec { noise_std: -0.1, ..base.clone() });
    bad.push(DatasetSpec { generator: Generator::ArForecast, horizon: 0, ..base.clone() });
    bad.push(DatasetSpec { generator: Generator::SineClass, classes: 0, ..base.clone() });
    bad.push(DatasetSpec { length: 0, ..base.clone() });
    for spec in bad {
        assert!(spec.validate().is_err(), "{spec:?}");
        assert!(generate_dataset(&spec, 0).is_err());
    }
}

fn small_experiment() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "name": "small",
            "seed": 4,
            "decoder": {"kind": "logistic", "config": {"input_dim": 32, "num_classes": 3, "epochs": 50}},
            "task": {"task": "classification"},
            "dataset": {"generator": "sine_class", "n_train": 30, "n_test": 15, "length": 64, "noise_std": 0.1}
        }"#,
    )
    .unwrap()
}

#[test]
fn experiment_echo_is_canonical() {
    let cfg = small_experiment();
    let echo = cfg.echo();
    let reparsed = ExperimentConfig::from_json(&echo).unwrap();
    assert_eq!(reparsed.echo(), echo);
    let keys: Vec<String> = serde_json::from_str::<serde_json::Value>(&echo).unwrap().as_object().unwrap().keys().cloned().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn experiments_reproduce_exactly() {
    let cfg = small_experiment();
    let a = bench::run_experiment(&cfg).unwrap();
    let b = bench::run_experiment(&cfg).unwrap();
    assert_eq!(a.metric_value.to_bits(), b.metric_value.to_bits());
    assert!(a.predictions.bitwise_eq(&b.predictions));
    assert_eq!(a.summary_json(), b.summary_json());
    assert_eq!(a.metric_name, "accuracy");
    assert!(!a.metrics.is_empty());
}

#[test]
fn config_errors_name_the_offending_field() {
    let mut cfg = small_experiment();
    cfg.decoder.config["input_dim"] = serde_json::json!(12);
    let err = cfg.validate().unwrap_err();
    assert!(err.is_config());
    let msg = err.to_string();
    assert!(msg.starts_with("decoder"), "{msg}");
    assert!(msg.contains("12") && msg.contains("32"), "{msg}");

    let mut cfg = small_experiment();
    cfg.decoder.kind = "forest".into();
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("forest") && msg.contains("ridge"), "{msg}");

    assert!(ExperimentConfig::from_json(r#"{"seed": 1, "colour": "red"}"#).unwrap_err().is_config());
}

#[test]
fn suite_table_has_one_row_per_experiment() {
    let mut second = small_experiment();
    second.decoder = bench::ComponentSpec {
        kind: "knn".into(),
        config: serde_json::json!({"input_dim": 32, "num_classes": 3, "k": 3}),
    };
    second.metrics = false;
    let suite = BenchSuite {
        experiments: vec![small_experiment(), second],
    };
    let mut out = Vec::new();
    let results = bench::run_suite_to(&suite, &mut out).unwrap();
    assert_eq!(results.len(), 2);
    let mut rdr = csv::Reader::from_reader(out.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, bench::bench_columns());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][4], "logistic");
    assert_eq!(&rows[1][4], "knn");
    let wall = header.iter().position(|c| c == "finetune_wall_time_s").unwrap();
    assert!(rows[0][wall].parse::<f64>().unwrap() > 0.0);
    assert_eq!(&rows[1][wall], "", "metrics off leaves phase cells empty");
}

#[test]
fn overhead_paths_agree_on_a_tiny_setup() {
    let cfg = bench::OverheadConfig {
        train_batches: 2,
        predict_batches: 4,
        epochs: 2,
        repetitions: 1,
        finetune_repetitions: 1,
        ..Default::default()
    };
    let r = bench::compare_overhead(&cfg).unwrap();
    assert!(r.outputs_equal);
}
