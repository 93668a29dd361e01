//! Acceptance run: eleven criteria, one PASS/FAIL line each.
//!
//! Every criterion runs even when an earlier one fails; the test fails at
//! the end if any did. Oracles are independent of the code under test:
//! nalgebra for the normal equations, plain loops for gradient descent and
//! brute-force nearest neighbours, and raw-series learners for task scores.

use std::time::{Duration, Instant};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use tsfm_kit::bench::{self, oracle, DatasetSpec, ExperimentConfig, Generator, OverheadConfig};
use tsfm_kit::decoders::{knn_fit, knn_predict, logistic_objective, ridge_fit};
use tsfm_kit::metrics::{time_phase, track_peak_memory};
use tsfm_kit::numerics::{finite_diff_check, Graph};
use tsfm_kit::params::{Param, ParameterSet};
use tsfm_kit::pipeline::{load_component, load_component_as, LoadedComponent};
use tsfm_kit::prelude::*;
use tsfm_kit::rng::gaussian;
use tsfm_kit::tensor::alloc;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn reference_backbone() -> Backbone {
    Backbone::new(BackboneConfig::default()).unwrap()
}

fn mlp(input_dim: usize, output_dim: usize, hidden_dim: usize, seed: u64) -> MlpDecoder {
    MlpDecoder::new(MlpDecoderConfig {
        input_dim,
        output_dim,
        hidden_dim,
        seed,
    })
    .unwrap()
}

fn regression_batches(n: usize, b: usize, c: usize, l: usize, seed: u64) -> Vec<TimeSeriesBatch> {
    (0..n as u64)
        .map(|i| {
            let x = gaussian([b, c, l], 1.0, &[seed, 1, i]);
            let y = gaussian([b, 1], 1.0, &[seed, 2, i]);
            TimeSeriesBatch::with_targets(x, Targets::Real(y)).unwrap()
        })
        .collect()
}

fn randomize_adapter(ad: &mut LoraAdapter, std: f64, seed: u64) {
    let paths: Vec<String> = ad.parameters().names().map(String::from).collect();
    for (i, path) in paths.iter().enumerate() {
        let shape = ad.parameters().get(path).unwrap().value.shape().to_vec();
        ad.parameters_mut().assign(path, gaussian(shape, std, &[seed, i as u64])).unwrap();
    }
}

fn lora(r: usize, alpha: f64, targets: &[&str], dropout: f64) -> LoraConfig {
    LoraConfig {
        r,
        lora_alpha: alpha,
        target_modules: targets.iter().map(|s| s.to_string()).collect(),
        lora_dropout: dropout,
        seed: 0,
    }
}

// ---- 1 ---------------------------------------------------------------------

fn lora_neutrality() -> Outcome {
    let mut p = Pipeline::new(reference_backbone());
    p.add_decoder(mlp(32, 1, 16, 3), true).map_err(e2s)?;
    let data = regression_batches(4, 16, 1, 64, 11);
    let task = TaskConfig::new(Task::Regression);
    let (_, before) = p.predict(&data, &task).map_err(e2s)?;
    p.add_adapter(lora(64, 32.0, &["q", "v"], 0.05)).map_err(e2s)?;
    ensure(p.adapter().is_some(), || "adapter not active".into())?;
    let (_, after) = p.predict(&data, &task).map_err(e2s)?;
    ensure(before.bitwise_eq(&after), || "outputs changed after attaching a zero-init adapter".into())?;
    Ok(format!("{} predictions bitwise equal with r=64 α=32 on q,v", after.len()))
}

// ---- 2 ---------------------------------------------------------------------

fn lora_merge() -> Outcome {
    let mut p = Pipeline::new(reference_backbone());
    p.add_decoder(mlp(32, 4, 16, 5), true).map_err(e2s)?;
    let name = p.add_adapter(lora(4, 8.0, &["q", "k", "v", "o", "ffn_in", "ffn_out"], 0.0)).map_err(e2s)?;
    randomize_adapter(p.adapter_mut(&name).unwrap(), 0.1, 21);
    let data = regression_batches(3, 16, 1, 64, 12);
    let task = TaskConfig::new(Task::Regression);
    let (_, unmerged) = p.predict(&data, &task).map_err(e2s)?;
    let original = p.backbone().parameters().clone();
    p.merge_adapter().map_err(e2s)?;
    let (_, merged) = p.predict(&data, &task).map_err(e2s)?;
    let diff = unmerged.values().unwrap().max_abs_diff(merged.values().unwrap());
    ensure(diff < 1e-10, || format!("merged vs unmerged max abs diff {diff:e} ≥ 1e-10"))?;
    ensure(!p.backbone().parameters().bitwise_eq(&original), || "merge left weights unchanged".into())?;
    p.unmerge_adapter().map_err(e2s)?;
    ensure(p.backbone().parameters().bitwise_eq(&original), || "unmerge did not restore weights bitwise".into())?;
    Ok(format!("max abs diff {diff:.2e}; unmerge restores weights bitwise"))
}

// ---- 3 ---------------------------------------------------------------------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Strips `"<kind>."` from gradient keys.
fn by_path(grads: IndexMap<String, Tensor>, kind: &str) -> IndexMap<String, Tensor> {
    let prefix = format!("{kind}.");
    grads
        .into_iter()
        .map(|(k, v)| (k.strip_prefix(&prefix).unwrap_or(&k).to_string(), v))
        .collect()
}

fn with_params<C: Component + Clone>(c: &C, ps: &ParameterSet) -> C {
    let mut c = c.clone();
    for (k, p) in ps.iter() {
        c.parameters_mut().assign(k, p.value.clone()).unwrap();
    }
    c
}

fn fd_mlp() -> Result<f64, Error> {
    let dec = mlp(4, 2, 3, 9);
    let x = gaussian([5, 4], 1.0, &[31]);
    let y = gaussian([5, 2], 1.0, &[32]);
    finite_diff_check(dec.parameters(), FD_H, |ps| {
        let d = with_params(&dec, ps);
        let mut g = Graph::new();
        let pass = Pass {
            grads_for: PartSet::of(&[ComponentKind::Decoder]),
            ..Pass::eval()
        };
        let xv = g.input(&x);
        let out = d.run(&mut g, xv, &pass)?;
        let loss = g.mse(out, y.clone())?;
        let v = g.value(loss).item();
        Ok((v, by_path(g.backward(loss)?.into_map(), "decoder")))
    })
}

fn fd_lora() -> Result<f64, Error> {
    let bb = Backbone::new(BackboneConfig {
        patch_len: 4,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_mult: 2,
        context_len: 8,
        seed: 4,
        frozen: true,
    })?;
    let mut ad = LoraAdapter::attach(&bb, lora(2, 4.0, &["q", "v"], 0.0))?;
    randomize_adapter(&mut ad, 0.3, 41);
    let x = gaussian([2, 1, 8], 1.0, &[42]);
    let y = gaussian([2, 1, 2, 8], 1.0, &[43]);
    finite_diff_check(ad.parameters(), FD_H, |ps| {
        let a = with_params(&ad, ps);
        let mut g = Graph::new();
        let pass = Pass {
            grads_for: PartSet::of(&[ComponentKind::Adapter]),
            ..Pass::eval()
        }
        .with_adapter(Some(&a));
        let xv = g.input(&x);
        let out = bb.run(&mut g, xv, &pass)?;
        let loss = g.mse(out, y.clone())?;
        let v = g.value(loss).item();
        Ok((v, by_path(g.backward(loss)?.into_map(), "adapter")))
    })
}

fn fd_combiner() -> Result<f64, Error> {
    let mut enc = LinearChannelCombiner::new(LinearChannelCombinerConfig {
        num_channels: 3,
        new_num_channels: 2,
    })?;
    let w = gaussian([2, 3], 0.5, &[51]);
    enc.parameters_mut().assign("weight", w)?;
    enc.parameters_mut().assign("bias", gaussian([2], 0.5, &[52]))?;
    let x = gaussian([2, 3, 6], 1.0, &[53]);
    let y = gaussian([2, 2, 6], 1.0, &[54]);
    finite_diff_check(enc.parameters(), FD_H, |ps| {
        let e = with_params(&enc, ps);
        let mut g = Graph::new();
        let pass = Pass {
            grads_for: PartSet::of(&[ComponentKind::Encoder]),
            ..Pass::eval()
        };
        let xv = g.input(&x);
        let out = e.run(&mut g, xv, &pass)?;
        let loss = g.mse(out, y.clone())?;
        let v = g.value(loss).item();
        Ok((v, by_path(g.backward(loss)?.into_map(), "encoder")))
    })
}

fn fd_logistic() -> Result<f64, Error> {
    let z = gaussian([12, 4], 1.0, &[61]);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut ps = ParameterSet::new();
    ps.insert("weight", Param::new(gaussian([3, 4], 0.5, &[62])))?;
    ps.insert("bias", Param::new(gaussian([3], 0.5, &[63])))?;
    finite_diff_check(&ps, FD_H, |p| logistic_objective(p, &z, &labels))
}

fn gradient_correctness() -> Outcome {
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for (name, err) in [
        ("mlp", fd_mlp()),
        ("lora", fd_lora()),
        ("combiner", fd_combiner()),
        ("logistic", fd_logistic()),
    ] {
        let err = err.map_err(e2s)?;
        parts.push(format!("{name} {err:.1e}"));
        if !(err < FD_TOL) {
            failed.push(name);
        }
    }
    ensure(failed.is_empty(), || format!("rel err ≥ 1e-4 for {failed:?}: {}", parts.join(", ")))?;
    Ok(format!("max rel err: {}", parts.join(", ")))
}

// ---- 4 ---------------------------------------------------------------------

fn snapshot(p: &Pipeline) -> Vec<(ComponentKind, ParameterSet)> {
    ComponentKind::ALL
        .into_iter()
        .filter_map(|k| p.active_parameters(k).map(|ps| (k, ps.clone())))
        .collect()
}

fn isolation() -> Outcome {
    let mut base = Pipeline::new(reference_backbone());
    base.add_encoder(
        LinearChannelCombiner::new(LinearChannelCombinerConfig {
            num_channels: 2,
            new_num_channels: 1,
        })
        .map_err(e2s)?,
        true,
    )
    .map_err(e2s)?;
    base.add_adapter(lora(4, 8.0, &["q", "v"], 0.05)).map_err(e2s)?;
    base.add_decoder(mlp(32, 1, 16, 7), true).map_err(e2s)?;
    let data = regression_batches(3, 8, 2, 64, 13);
    let task = TaskConfig {
        epochs: 5,
        lr: 1e-2,
        ..TaskConfig::new(Task::Regression)
    };
    let mut lines = Vec::new();
    for parts in [vec!["decoder"], vec!["adapter"], vec!["encoder", "decoder", "adapter"]] {
        let mut p = base.clone();
        let before = snapshot(&p);
        p.train(&data, &parts, &task).map_err(e2s)?;
        let after = snapshot(&p);
        for ((kind, b), (_, a)) in before.iter().zip(&after) {
            let listed = parts.contains(&kind.as_str());
            let same = a.bitwise_eq(b);
            if !listed {
                ensure(same, || format!("parts {parts:?}: unlisted {kind} changed"))?;
            } else {
                ensure(!same, || format!("parts {parts:?}: listed {kind} did not change"))?;
            }
        }
        lines.push(format!("{parts:?}"));
    }
    Ok(format!("unlisted parts bitwise unchanged after 5 epochs for {}", lines.join(", ")))
}

// ---- 5 ---------------------------------------------------------------------

/// `[w; b]` from the normal equations of the augmented design, intercept unpenalized.
fn normal_equations(x: &Tensor, y: &[f64], lambda: f64) -> DVector<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let a = DMatrix::from_fn(n, f + 1, |i, j| if j < f { x.data()[i * f + j] } else { 1.0 });
    let mut lhs = a.transpose() * &a;
    for j in 0..f {
        lhs[(j, j)] += lambda;
    }
    let rhs = a.transpose() * DVector::from_column_slice(y);
    lhs.lu().solve(&rhs).expect("well conditioned")
}

/// Plain gradient descent on `‖Xw + b − y‖² + λ‖w‖²`.
fn gradient_descent_ls(x: &Tensor, y: &[f64], lambda: f64) -> Vec<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let row = |i: usize| &x.data()[i * f..(i + 1) * f];
    // Step from a bound on the Hessian's largest eigenvalue (trace bound).
    let trace: f64 = 2.0 * (x.data().iter().map(|v| v * v).sum::<f64>() + n as f64 + lambda * f as f64);
    let step = 1.0 / trace;
    let mut theta = vec![0.0; f + 1];
    for _ in 0..200_000 {
        let mut grad = vec![0.0; f + 1];
        for i in 0..n {
            let r = row(i).iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + theta[f] - y[i];
            for j in 0..f {
                grad[j] += 2.0 * r * row(i)[j];
            }
            grad[f] += 2.0 * r;
        }
        for j in 0..f {
            grad[j] += 2.0 * lambda * theta[j];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        if norm < 1e-10 {
            break;
        }
    }
    theta
}

/// Majority vote over the `k` nearest z-scored exemplars; distance ties by
/// index, vote ties by lowest label.
fn brute_force_knn(train: &Tensor, labels: &[usize], queries: &Tensor, k: usize, classes: usize) -> Vec<usize> {
    let (n, f) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for j in 0..f {
        mean[j] = (0..n).map(|i| train.data()[i * f + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (train.data()[i * f + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        sd[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let z = |v: &[f64]| -> Vec<f64> { (0..f).map(|j| (v[j] - mean[j]) / sd[j]).collect() };
    let zt: Vec<Vec<f64>> = (0..n).map(|i| z(&train.data()[i * f..(i + 1) * f])).collect();
    (0..queries.shape()[0])
        .map(|q| {
            let zq = z(&queries.data()[q * f..(q + 1) * f]);
            let mut d: Vec<(f64, usize)> = zt
                .iter()
                .enumerate()
                .map(|(i, t)| (t.iter().zip(&zq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, i) in &d[..k] {
                votes[labels[i]] += 1;
            }
            let best = *votes.iter().max().unwrap();
            votes.iter().position(|&v| v == best).unwrap()
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let x = gaussian([50, 5], 1.0, &[71]);
    let w_true = [1.5, -2.0, 0.5, 0.0, 3.0];
    let noise = gaussian([50], 0.1, &[72]);
    let y: Vec<f64> = (0..50)
        .map(|i| x.row(i).iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.7 + noise.data()[i])
        .collect();
    let lambda = 0.5;
    let fit = ridge_fit(&x, &Tensor::new([50], y.clone()).unwrap(), lambda, true).map_err(e2s)?;
    let mut ours: Vec<f64> = fit.weights().unwrap().data().to_vec();
    ours.push(fit.intercept().unwrap().item());
    let ne = normal_equations(&x, &y, lambda);
    let gd = gradient_descent_ls(&x, &y, lambda);
    let d_ne = ours.iter().zip(ne.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d_gd = ours.iter().zip(&gd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(d_ne < 1e-8, || format!("ridge vs normal equations {d_ne:e} ≥ 1e-8"))?;
    ensure(d_gd < 1e-4, || format!("ridge vs gradient descent {d_gd:e} ≥ 1e-4"))?;

    let train = gaussian([100, 8], 1.0, &[73]);
    let labels: Vec<usize> = (0..100).map(|i| (i * 7 + i / 3) % 3).collect();
    let queries = gaussian([60, 8], 1.2, &[74]);
    let knn = knn_fit(&train, &labels, 5, true).map_err(e2s)?;
    let ours = knn_predict(&knn, &queries).map_err(e2s)?;
    let brute = brute_force_knn(&train, &labels, &queries, 5, 3);
    ensure(ours == brute, || "knn predictions differ from brute force".into())?;
    Ok(format!(
        "ridge Δ normal eq {d_ne:.1e}, Δ GD {d_gd:.1e}; knn equals brute force on {} queries",
        brute.len()
    ))
}

// ---- 6 ---------------------------------------------------------------------

fn swaps() -> Outcome {
    let build_time = (0..3)
        .map(|_| {
            let t = Instant::now();
            let b = reference_backbone();
            let e = t.elapsed();
            drop(b);
            e
        })
        .min()
        .unwrap();
    let mut p = Pipeline::new(reference_backbone());
    p.add_decoder(mlp(32, 2, 16, 1), false).map_err(e2s)?;
    let mut d2 = mlp(32, 2, 8, 2);
    d2.set_name("mlp_b".into());
    p.add_decoder(d2, false).map_err(e2s)?;
    ensure(p.decoder().is_none(), || "load=false activated a decoder".into())?;
    let data = regression_batches(4, 16, 1, 64, 14);
    let task = TaskConfig::new(Task::Regression);
    let backbone_before = p.backbone().parameters().clone();
    let arc_before = p.shared_backbone();

    let mut swap_times = Vec::new();
    let mut allocs_during_swaps = 0u64;
    let mut swap = |p: &mut Pipeline, name: &str| -> Result<(), String> {
        let before = alloc::allocation_count();
        let s = p.load_decoder(name).map_err(e2s)?;
        allocs_during_swaps += alloc::allocation_count() - before;
        swap_times.push(s);
        Ok(())
    };
    swap(&mut p, "mlp")?;
    let (_, p1) = p.predict(&data, &task).map_err(e2s)?;
    swap(&mut p, "mlp_b")?;
    let (_, p2) = p.predict(&data, &task).map_err(e2s)?;
    swap(&mut p, "mlp")?;
    let (_, p1_again) = p.predict(&data, &task).map_err(e2s)?;
    swap(&mut p, "mlp_b")?;
    let (_, p2_again) = p.predict(&data, &task).map_err(e2s)?;
    swap(&mut p, "mlp")?;
    ensure(p1.bitwise_eq(&p1_again) && p2.bitwise_eq(&p2_again), || "predictions changed after a swap round trip".into())?;
    ensure(!p1.bitwise_eq(&p2), || "the two decoders predict identically".into())?;

    let mut fresh = Pipeline::from_shared(p.shared_backbone());
    fresh.add_decoder(mlp(32, 2, 16, 1), true).map_err(e2s)?;
    let (_, pf) = fresh.predict(&data, &task).map_err(e2s)?;
    ensure(pf.bitwise_eq(&p1), || "swapped pipeline differs from a fresh pipeline".into())?;

    ensure(p.load_decoder("missing").is_err(), || "unknown decoder name accepted".into())?;
    ensure(p.backbone().parameters().bitwise_eq(&backbone_before), || "backbone weights changed".into())?;
    ensure(std::sync::Arc::ptr_eq(&arc_before, &p.shared_backbone()), || "backbone was replaced".into())?;
    ensure(allocs_during_swaps == 0, || format!("{allocs_during_swaps} tensor allocations during swaps"))?;
    let worst = swap_times.iter().copied().fold(0.0, f64::max);
    let limit = build_time.as_secs_f64() / 10.0;
    ensure(worst < limit, || format!("slowest swap {worst:.2e}s ≥ construction/10 = {limit:.2e}s"))?;
    Ok(format!(
        "{} swaps, slowest {:.1}µs vs construction {:.1}ms; 0 allocations",
        swap_times.len(),
        worst * 1e6,
        build_time.as_secs_f64() * 1e3
    ))
}

// ---- 7 ---------------------------------------------------------------------

fn overhead() -> Outcome {
    let r = bench::compare_overhead(&OverheadConfig::default()).map_err(e2s)?;
    ensure(r.outputs_equal, || "outputs differ".into())?;
    ensure(r.finetune.ratio < 1.05 && r.predict.ratio < 1.05, || {
        format!("ratios finetune {:.4}, predict {:.4}", r.finetune.ratio, r.predict.ratio)
    })?;
    Ok(format!(
        "bitwise-equal outputs; ratio finetune {:.4}, predict {:.4} (1000 batches)",
        r.finetune.ratio, r.predict.ratio
    ))
}

// ---- 8 ---------------------------------------------------------------------

fn experiment(seed: u64, dataset: &DatasetSpec, decoder: serde_json::Value, task: serde_json::Value) -> ExperimentConfig {
    serde_json::from_value(serde_json::json!({
        "seed": seed,
        "decoder": decoder,
        "task": task,
        "dataset": dataset,
        "metrics": false,
    }))
    .unwrap()
}

fn end_to_end() -> Outcome {
    let seed = 2024;
    let mut sine = DatasetSpec::new(Generator::SineClass, 600, 300, 64);
    sine.noise_std = 0.1;
    let ds = bench::generate_dataset(&sine, seed).map_err(e2s)?;
    let raw_acc = oracle::raw_logistic_accuracy(&ds, 3, 0.5, 500).map_err(e2s)?;
    let cfg = experiment(
        seed,
        &sine,
        serde_json::json!({"kind": "logistic", "config": {"input_dim": 32, "num_classes": 3, "lr": 0.5, "epochs": 500}}),
        serde_json::json!({"task": "classification"}),
    );
    let acc = bench::run_experiment(&cfg).map_err(e2s)?.metric_value;
    ensure(acc >= raw_acc - 0.05, || format!("sine_class accuracy {acc:.3} < raw oracle {raw_acc:.3} − 0.05"))?;

    let mut amp = DatasetSpec::new(Generator::AmplitudeReg, 600, 300, 64);
    amp.noise_std = 0.1;
    let ds = bench::generate_dataset(&amp, seed).map_err(e2s)?;
    let raw_mae = oracle::raw_ridge_mae(&ds, 1e-3).map_err(e2s)?;
    let cfg = experiment(
        seed,
        &amp,
        serde_json::json!({"kind": "ridge", "config": {"input_dim": 32, "lambda": 1e-3}}),
        serde_json::json!({"task": "regression"}),
    );
    let amp_mae = bench::run_experiment(&cfg).map_err(e2s)?.metric_value;
    ensure(amp_mae <= raw_mae * 1.1, || format!("amplitude_reg MAE {amp_mae:.4} > raw oracle {raw_mae:.4} + 10%"))?;

    let ar = DatasetSpec::new(Generator::ArForecast, 600, 300, 64);
    let ds = bench::generate_dataset(&ar, seed).map_err(e2s)?;
    let naive = oracle::naive_forecast_mae(&ds, 8).map_err(e2s)?;
    let cfg = experiment(
        seed,
        &ar,
        serde_json::json!({"kind": "mlp", "config": {"input_dim": 32, "output_dim": 8, "hidden_dim": 64}}),
        serde_json::json!({"task": "forecasting"}),
    );
    let ar_mae = bench::run_experiment(&cfg).map_err(e2s)?.metric_value;
    ensure(ar_mae < naive, || format!("ar_forecast MAE {ar_mae:.4} ≥ naive {naive:.4}"))?;
    Ok(format!(
        "sine acc {acc:.3} (raw {raw_acc:.3}); amplitude MAE {amp_mae:.4} (raw {raw_mae:.4}); ar MAE {ar_mae:.4} (naive {naive:.4})"
    ))
}

// ---- 9 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut ar = DatasetSpec::new(Generator::ArForecast, 96, 48, 64);
    ar.noise_std = 0.05;
    let mut adapted = experiment(
        5,
        &ar,
        serde_json::json!({"kind": "mlp", "config": {"input_dim": 32, "output_dim": 8, "hidden_dim": 16, "seed": 3}}),
        serde_json::json!({"task": "forecasting", "epochs": 2, "lr": 0.01}),
    );
    adapted.adapter = Some(lora(4, 8.0, &["q", "v"], 0.1));
    adapted.parts_to_train = vec!["adapter".into(), "decoder".into()];
    let mut sine = DatasetSpec::new(Generator::SineClass, 90, 45, 64);
    sine.noise_std = 0.2;
    let svm = experiment(
        6,
        &sine,
        serde_json::json!({"kind": "svm", "config": {"input_dim": 32, "num_classes": 3}}),
        serde_json::json!({"task": "classification"}),
    );
    for cfg in [&adapted, &svm] {
        let a = bench::run_experiment(cfg).map_err(e2s)?;
        let b = bench::run_experiment(cfg).map_err(e2s)?;
        ensure(a.metric_value.to_bits() == b.metric_value.to_bits(), || "metric differs between runs".into())?;
        ensure(a.predictions.bitwise_eq(&b.predictions), || "predictions differ between runs".into())?;
        ensure(a.summary_json() == b.summary_json(), || "results differ between runs".into())?;
    }
    Ok("adapter+MLP forecasting and SVM classification reproduce metrics and predictions bitwise".into())
}

// ---- 10 --------------------------------------------------------------------

fn classification_batches(n: usize, b: usize, c: usize, l: usize, seed: u64) -> Vec<TimeSeriesBatch> {
    (0..n as u64)
        .map(|i| {
            let labels: Vec<usize> = (0..b).map(|j| j % 3).collect();
            let mut x = gaussian([b, c, l], 0.3, &[seed, 1, i]);
            for (j, &k) in labels.iter().enumerate() {
                for v in &mut x.data_mut()[j * c * l..(j + 1) * c * l] {
                    *v += k as f64;
                }
            }
            TimeSeriesBatch::with_targets(x, Targets::Labels(labels)).unwrap()
        })
        .collect()
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut base = Pipeline::new(reference_backbone());
    let mut enc = LinearChannelCombiner::new(LinearChannelCombinerConfig {
        num_channels: 2,
        new_num_channels: 1,
    })
    .map_err(e2s)?;
    enc.parameters_mut().assign("weight", gaussian([1, 2], 0.7, &[81])).map_err(e2s)?;
    base.add_encoder(enc, true).map_err(e2s)?;
    let ad = base.add_adapter(lora(4, 8.0, &["q", "v", "ffn_in"], 0.0)).map_err(e2s)?;
    randomize_adapter(base.adapter_mut(&ad).unwrap(), 0.1, 82);

    let reg = regression_batches(3, 12, 2, 64, 83);
    let cls = classification_batches(3, 12, 2, 64, 84);
    let decoders: Vec<(Box<dyn Decoder>, bool)> = vec![
        (Box::new(mlp(32, 2, 8, 85)), false),
        (Box::new(RidgeDecoder::new(RidgeConfig { input_dim: 32, output_dim: 1, lambda: 0.1, fit_intercept: true }).map_err(e2s)?), false),
        (Box::new(KnnDecoder::new(KnnConfig { input_dim: 32, num_classes: 3, k: 3, standardize: true }).map_err(e2s)?), true),
        (Box::new(LogisticDecoder::new(LogisticConfig { input_dim: 32, num_classes: 3, lr: 0.1, epochs: 50 }).map_err(e2s)?), true),
        (Box::new(SvmDecoder::new(SvmConfig { input_dim: 32, num_classes: 3, c: 1.0, lr: 0.05, epochs: 50 }).map_err(e2s)?), true),
    ];
    let mut kinds = vec!["encoder", "backbone", "adapter"];
    for (i, (dec, classify)) in decoders.into_iter().enumerate() {
        let mut p = base.clone();
        let name = p.add_decoder_boxed(dec, true).map_err(e2s)?;
        let data = if classify { &cls } else { &reg };
        if p.decoder().unwrap().mode() == DecoderMode::Fit {
            let task = TaskConfig::new(if classify { Task::Classification } else { Task::Regression });
            p.train(data, &["decoder"], &task).map_err(e2s)?;
        }
        let reference: Vec<Tensor> = data.iter().map(|b| p.forward(b)).collect::<Result<_, _>>().map_err(e2s)?;

        let sub = dir.path().join(format!("set{i}"));
        std::fs::create_dir(&sub).map_err(|e| e.to_string())?;
        let file = |k: &str| sub.join(format!("{k}.ckpt"));
        for (kind, n) in [
            (ComponentKind::Encoder, p.active_name(ComponentKind::Encoder).unwrap().to_string()),
            (ComponentKind::Backbone, p.backbone().name().to_string()),
            (ComponentKind::Adapter, ad.clone()),
            (ComponentKind::Decoder, name.clone()),
        ] {
            p.save_component_of(kind, &n, &file(kind.as_str())).map_err(e2s)?;
        }
        let LoadedComponent::Backbone(bb) = load_component_as(&file("backbone"), ComponentKind::Backbone).map_err(e2s)? else {
            return Err("backbone checkpoint rebuilt as another kind".into());
        };
        ensure(bb.parameters().bitwise_eq(p.backbone().parameters()), || "backbone weights differ after reload".into())?;
        let mut q = Pipeline::new(bb);
        q.load_encoder_file(&file("encoder"), true).map_err(e2s)?;
        q.load_adapter_file(&file("adapter"), true).map_err(e2s)?;
        q.load_decoder_file(&file("decoder"), true).map_err(e2s)?;
        for (b, want) in data.iter().zip(&reference) {
            let got = q.forward(b).map_err(e2s)?;
            ensure(got.bitwise_eq(want), || format!("decoder {name:?}: outputs differ after reload"))?;
        }
        kinds.push(p.decoder().unwrap().type_name());

        if i == 0 {
            let bytes = std::fs::read(file("decoder")).map_err(|e| e.to_string())?;
            let mut flipped = bytes.clone();
            let mid = flipped.len() / 2;
            flipped[mid] ^= 0x01;
            std::fs::write(sub.join("flipped.ckpt"), &flipped).map_err(|e| e.to_string())?;
            std::fs::write(sub.join("short.ckpt"), &bytes[..bytes.len() - 9]).map_err(|e| e.to_string())?;
            for bad in ["flipped.ckpt", "short.ckpt"] {
                let err = load_component(&sub.join(bad)).err();
                ensure(matches!(err.as_ref().map(Error::root), Some(Error::Checksum { .. })), || {
                    format!("{bad}: expected a checksum error, got {err:?}")
                })?;
            }
            let before: Vec<String> = q.registered(ComponentKind::Decoder).into_iter().map(String::from).collect();
            let active = q.active_name(ComponentKind::Decoder).map(String::from);
            let err = q.load_decoder_file(&file("encoder"), true).err();
            ensure(matches!(err.as_ref().map(Error::root), Some(Error::KindMismatch { .. })), || {
                format!("encoder file as decoder: expected a kind mismatch, got {err:?}")
            })?;
            let after: Vec<String> = q.registered(ComponentKind::Decoder).into_iter().map(String::from).collect();
            ensure(before == after && active.as_deref() == q.active_name(ComponentKind::Decoder), || {
                "registry changed after a rejected load".into()
            })?;
        }
    }
    Ok(format!(
        "bitwise-equal outputs after reload for {}; flipped and truncated files rejected by checksum; kind mismatch leaves registry intact",
        kinds.join(", ")
    ))
}

// ---- 11 --------------------------------------------------------------------

fn metrics_sanity() -> Outcome {
    const EIGHT_MB: usize = 8 * 1024 * 1024;
    let (t, m) = track_peak_memory(Phase::Predict, || Tensor::zeros([EIGHT_MB / 8]));
    drop(t);
    ensure(m.peak_mem_bytes as usize >= EIGHT_MB, || format!("peak {} < 8 MiB", m.peak_mem_bytes))?;

    let mut inner = Vec::new();
    let (_, outer) = time_phase(Phase::Finetune, || -> Result<(), Error> {
        for _ in 0..3 {
            let (_, m) = time_phase(Phase::FinetuneEpoch, || -> Result<(), Error> {
                std::thread::sleep(Duration::from_millis(5));
                Ok(())
            });
            inner.push(m);
        }
        Ok(())
    });
    let inner_total: f64 = inner.iter().map(|m| m.wall_time_s).sum();
    ensure(
        inner.iter().all(|m| m.wall_time_s <= outer.wall_time_s && m.depth == outer.depth + 1) && inner_total <= outer.wall_time_s,
        || "nested phase exceeds its parent".into(),
    )?;

    let mut sine = DatasetSpec::new(Generator::SineClass, 64, 320, 64);
    sine.noise_std = 0.1;
    let mut on = experiment(
        1,
        &sine,
        serde_json::json!({"kind": "mlp", "config": {"input_dim": 32, "output_dim": 3, "hidden_dim": 16}}),
        serde_json::json!({"task": "classification", "epochs": 2}),
    );
    on.metrics = true;
    let off = ExperimentConfig { metrics: false, ..on.clone() };
    // Back-to-back pairs share the machine's slow drift, so their ratio
    // isolates the cost of collection.
    let mut ratios = Vec::new();
    for rep in 0..15 {
        let order = if rep % 2 == 0 { [&on, &off] } else { [&off, &on] };
        let (mut t_on, mut t_off) = (0.0, 0.0);
        for cfg in order {
            let t = Instant::now();
            let r = bench::run_experiment(cfg).map_err(e2s)?;
            let dt = t.elapsed().as_secs_f64();
            if cfg.metrics {
                ensure(!r.metrics.is_empty(), || "metrics on but nothing recorded".into())?;
                t_on = dt;
            } else {
                t_off = dt;
            }
        }
        ratios.push(t_on / t_off);
    }
    ratios.sort_by(f64::total_cmp);
    let rel = (ratios[ratios.len() / 2] - 1.0).abs();
    ensure(rel < 0.02, || format!("metrics on/off wall time differs by {:.2}% (median of paired ratios)", rel * 100.0))?;
    Ok(format!(
        "8 MiB peak {} B; nested ≤ parent; on/off differ by {:.2}%",
        m.peak_mem_bytes,
        rel * 100.0
    ))
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("LoRA zero-init neutrality", 5.0, lora_neutrality),
        ("LoRA merge equivalence", 5.0, lora_merge),
        ("gradient correctness", 60.0, gradient_correctness),
        ("selective-training isolation", 60.0, isolation),
        ("oracle equivalence", 10.0, oracle_equivalence),
        ("swap correctness and cost", 30.0, swaps),
        ("pipeline overhead", 300.0, overhead),
        ("end-to-end task sanity", 300.0, end_to_end),
        ("determinism", 60.0, determinism),
        ("persistence round trip", 10.0, persistence),
        ("metrics sanity", 60.0, metrics_sanity),
    ];
    let mut failures = Vec::new();
    for (i, (name, budget_s, run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let out = run();
        let secs = t.elapsed().as_secs_f64();
        let out = out.and_then(|detail| {
            if secs < budget_s {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {secs:.1}s, budget {budget_s}s"))
            }
        });
        match out {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.2}s)", i + 1),
            Err(why) => {
                println!("FAIL [{:>2}] {name}: {why} ({secs:.2}s)", i + 1);
                failures.push(i + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
