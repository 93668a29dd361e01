use std::sync::Arc;

use tsfm_kit::prelude::*;
use tsfm_kit::rng::gaussian;

fn small_backbone() -> Backbone {
    Backbone::new(BackboneConfig {
        patch_len: 8,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_mult: 2,
        context_len: 64,
        seed: 1,
        frozen: true,
    })
    .unwrap()
}

fn mlp(input_dim: usize, output_dim: usize) -> MlpDecoder {
    MlpDecoder::new(MlpDecoderConfig {
        input_dim,
        output_dim,
        hidden_dim: 8,
        seed: 2,
    })
    .unwrap()
}

fn real_batches(n: usize, channels: usize, length: usize) -> Vec<TimeSeriesBatch> {
    (0..n as u64)
        .map(|i| {
            let x = gaussian([6, channels, length], 1.0, &[7, i]);
            let y = x.map(|v| v * 0.5).reshape([6, channels * length]).unwrap();
            let y = Tensor::from_rows(&(0..6).map(|r| &y.row(r)[..1]).collect::<Vec<_>>());
            TimeSeriesBatch::with_targets(x, Targets::Real(y)).unwrap()
        })
        .collect()
}

#[test]
fn duplicate_names_are_rejected() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), false).unwrap();
    let err = p.add_decoder(mlp(16, 1), false).unwrap_err();
    assert!(matches!(err, Error::Registry(_)), "{err}");
}

#[test]
fn load_false_registers_without_activating() {
    let mut p = Pipeline::new(small_backbone());
    let name = p.add_decoder(mlp(16, 1), false).unwrap();
    assert_eq!(p.registered(ComponentKind::Decoder), vec![name.as_str()]);
    assert!(p.decoder().is_none());
    p.load_decoder(&name).unwrap();
    assert_eq!(p.active_name(ComponentKind::Decoder), Some(name.as_str()));
}

#[test]
fn unknown_names_list_what_is_registered() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), false).unwrap();
    let err = p.load_decoder("nope").unwrap_err().to_string();
    assert!(err.contains("nope") && err.contains("mlp"), "{err}");
}

#[test]
fn predict_without_decoder_names_the_missing_part() {
    let p = Pipeline::new(small_backbone());
    let err = p.predict(&real_batches(1, 1, 32), &TaskConfig::new(Task::Regression)).unwrap_err();
    assert!(matches!(err, Error::MissingComponent("decoder")), "{err}");
}

#[test]
fn training_an_inactive_part_is_an_error() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), true).unwrap();
    let err = p.train(&real_batches(1, 1, 32), &["adapter"], &TaskConfig::new(Task::Regression)).unwrap_err();
    assert!(matches!(err, Error::MissingComponent("adapter")), "{err}");
}

#[test]
fn unknown_part_names_are_config_errors() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), true).unwrap();
    let err = p.train(&real_batches(1, 1, 32), &["head"], &TaskConfig::new(Task::Regression)).unwrap_err();
    assert!(err.is_config(), "{err}");
    let empty: [&str; 0] = [];
    assert!(p.train(&real_batches(1, 1, 32), &empty, &TaskConfig::new(Task::Regression)).is_err());
}

#[test]
fn fitted_decoders_refuse_backpropagation() {
    let mut p = Pipeline::new(small_backbone());
    p.add_adapter(LoraConfig {
        r: 2,
        lora_alpha: 4.0,
        target_modules: vec!["q".into()],
        lora_dropout: 0.0,
        seed: 0,
    })
    .unwrap();
    p.add_decoder(
        RidgeDecoder::new(RidgeConfig {
            input_dim: 16,
            output_dim: 1,
            lambda: 1.0,
            fit_intercept: true,
        })
        .unwrap(),
        true,
    )
    .unwrap();
    let data = real_batches(2, 1, 32);
    let task = TaskConfig::new(Task::Regression);
    let err = p.train(&data, &["adapter", "decoder"], &task).unwrap_err();
    assert!(err.to_string().contains("cannot backpropagate"), "{err}");
    let report = p.train(&data, &["decoder"], &task).unwrap();
    assert_eq!(report.mode, DecoderMode::Fit);
    assert!(p.decoder().unwrap().is_fitted());
}

#[test]
fn trainable_parts_follow_the_active_chain() {
    let mut p = Pipeline::new(small_backbone());
    assert!(p.trainable_parts().is_empty());
    p.add_decoder(mlp(16, 1), true).unwrap();
    assert_eq!(p.trainable_parts(), vec![ComponentKind::Decoder]);
    p.add_adapter(LoraConfig {
        r: 2,
        lora_alpha: 4.0,
        target_modules: vec!["v".into()],
        lora_dropout: 0.0,
        seed: 0,
    })
    .unwrap();
    assert_eq!(p.trainable_parts(), vec![ComponentKind::Adapter, ComponentKind::Decoder]);
    p.set_backbone_frozen(false);
    assert!(p.trainable_parts().contains(&ComponentKind::Backbone));
}

#[test]
fn pipelines_can_share_one_backbone() {
    let shared = Arc::new(small_backbone());
    let mut a = Pipeline::from_shared(Arc::clone(&shared));
    let mut b = Pipeline::from_shared(Arc::clone(&shared));
    a.add_decoder(mlp(16, 1), true).unwrap();
    b.add_decoder(mlp(16, 1), true).unwrap();
    a.train(&real_batches(2, 1, 32), &["decoder"], &TaskConfig::new(Task::Regression)).unwrap();
    assert!(Arc::ptr_eq(&a.shared_backbone(), &b.shared_backbone()));
    assert!(!a.decoder().unwrap().parameters().bitwise_eq(b.decoder().unwrap().parameters()));
}

#[test]
fn training_an_unfrozen_backbone_detaches_it_from_other_pipelines() {
    let shared = Arc::new(small_backbone());
    let mut a = Pipeline::from_shared(Arc::clone(&shared));
    a.set_backbone_frozen(false);
    a.add_decoder(mlp(16, 1), true).unwrap();
    a.train(&real_batches(1, 1, 32), &["backbone", "decoder"], &TaskConfig::new(Task::Regression)).unwrap();
    assert!(!a.backbone().parameters().bitwise_eq(shared.parameters()));
}

#[test]
fn decoder_training_lowers_the_loss() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), true).unwrap();
    let task = TaskConfig {
        epochs: 20,
        lr: 1e-2,
        ..TaskConfig::new(Task::Regression)
    };
    let report = p.train(&real_batches(4, 1, 32), &["decoder"], &task).unwrap();
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < first, "{first} → {last}");
    assert_eq!(report.updated, vec!["decoder.fc1.weight", "decoder.fc1.bias", "decoder.fc2.weight", "decoder.fc2.bias"]);
}

#[test]
fn mismatched_decoder_is_caught_before_any_data() {
    let mut p = Pipeline::new(small_backbone())
        .with_input_spec(InputSpec { channels: 2, length: 32 })
        .unwrap();
    let err = p.add_decoder(mlp(16, 1), true).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains("32"), "{err}");
    assert!(p.registered(ComponentKind::Decoder).is_empty());
    p.add_decoder(mlp(32, 1), true).unwrap();
    p.validate().unwrap();
}

#[test]
fn channel_combiner_changes_the_decoder_width() {
    let mut p = Pipeline::new(small_backbone())
        .with_input_spec(InputSpec { channels: 3, length: 32 })
        .unwrap();
    p.add_encoder(
        LinearChannelCombiner::new(LinearChannelCombinerConfig {
            num_channels: 3,
            new_num_channels: 1,
        })
        .unwrap(),
        true,
    )
    .unwrap();
    p.add_decoder(mlp(16, 1), true).unwrap();
    let out = p.forward(&real_batches(1, 3, 32)[0]).unwrap();
    assert_eq!(out.shape(), &[6, 1]);
}

#[test]
fn window_outputs_are_reassembled_per_item() {
    let mut p = Pipeline::new(small_backbone());
    p.add_encoder(WindowEncoder::new(WindowConfig { window_len: 16, stride: 8 }).unwrap(), true)
        .unwrap();
    p.add_decoder(mlp(16, 1), true).unwrap();
    let data = real_batches(2, 1, 32);
    let (targets, preds) = p.predict(&data, &TaskConfig::new(Task::Regression)).unwrap();
    assert_eq!(preds.values().unwrap().shape(), &[12, 1]);
    assert_eq!(targets.unwrap().len(), 12);
    p.train(&data, &["decoder"], &TaskConfig::new(Task::Regression)).unwrap();
}

#[test]
fn merged_adapters_cannot_be_swapped_or_trained() {
    let mut p = Pipeline::new(small_backbone());
    p.add_decoder(mlp(16, 1), true).unwrap();
    let cfg = LoraConfig {
        r: 2,
        lora_alpha: 4.0,
        target_modules: vec!["q".into()],
        lora_dropout: 0.0,
        seed: 0,
    };
    let first = p.add_adapter(cfg.clone()).unwrap();
    let second = p.add_adapter(cfg).unwrap();
    assert_eq!((first.as_str(), second.as_str()), ("lora", "lora_2"));
    p.merge_adapter().unwrap();
    assert!(matches!(p.load_adapter(&first), Err(Error::State(_))));
    assert!(matches!(p.unload(ComponentKind::Adapter), Err(Error::State(_))));
    let err = p.train(&real_batches(1, 1, 32), &["adapter"], &TaskConfig::new(Task::Regression)).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
    p.unmerge_adapter().unwrap();
    p.load_adapter(&first).unwrap();
}

#[test]
fn backbone_slot_cannot_be_emptied() {
    let mut p = Pipeline::new(small_backbone());
    assert!(p.unload(ComponentKind::Backbone).is_err());
}

#[test]
fn metrics_collector_records_phases() {
    let mut p = Pipeline::new(small_backbone());
    p.set_metrics(Some(MetricsCollector::new()));
    p.add_decoder(mlp(16, 1), false).unwrap();
    p.load_decoder("mlp").unwrap();
    let data = real_batches(2, 1, 32);
    let task = TaskConfig {
        epochs: 2,
        ..TaskConfig::new(Task::Regression)
    };
    p.train(&data, &["decoder"], &task).unwrap();
    p.predict(&data, &task).unwrap();
    let phases: Vec<Phase> = p.metrics().unwrap().records().iter().map(|m| m.phase).collect();
    for ph in [Phase::Swap, Phase::FinetuneEpoch, Phase::Finetune, Phase::PredictBatch, Phase::Predict] {
        assert!(phases.contains(&ph), "missing {ph:?} in {phases:?}");
    }
    let predict = p.metrics().unwrap().records().into_iter().find(|m| m.phase == Phase::Predict).unwrap();
    assert_eq!(predict.batch_count, 2);
}
