// scratch probe: does the default suite produce the expected ordering?
use rayon::prelude::*;
use stagegrade::data::{save_dataset, synth_generate, AugmentOps, ClassDistribution, SynthSpec};
use stagegrade::pipeline::{run_plan, InitFrom, LossKind, StagePlan, StageSpec, TrainableScope};
use std::path::Path;

fn dataset(n: usize, seed: u64, sigma: f64, intensity: f64, background: f64, noise: f64, decay: f64) -> SynthSpec {
    SynthSpec {
        n,
        h: 16,
        w: 16,
        distribution: ClassDistribution::idrid_default(),
        difficulty: sigma,
        seed,
        background,
        blob_intensity: intensity,
        blob_decay: decay,
        label_noise: noise,
    }
}

fn rep_stage(name: &str, dataset: &Path, epochs: usize, seed: u64, init: InitFrom, jitter: f64) -> StageSpec {
    StageSpec {
        name: name.into(),
        dataset: dataset.to_path_buf(),
        epochs,
        learning_rate: 0.001,
        momentum: 0.9,
        batch_size: 8,
        loss: LossKind::Ce,
        trainable_scope: TrainableScope::All,
        reinit_final: false,
        init_from: init,
        augmentation: AugmentOps { hflip: true, vflip: true, rot90: Some(1), jitter: Some(jitter) },
        seed,
    }
}

fn main() {
    let sigma: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seeds: u64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let clf_aug: bool = std::env::args().nth(3).map(|s| s == "aug").unwrap_or(false);
    let clf_batch: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let decay: f64 = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let scale: f64 = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let t0 = std::time::Instant::now();
    save_dataset(&synth_generate(&dataset(5000, 101, 0.6 * scale, 1.15 * scale, 0.08 * scale, 0.05, decay)).unwrap(), &p("large.stds")).unwrap();
    save_dataset(&synth_generate(&dataset(1200, 102, 0.8 * scale, 0.9 * scale, -0.05 * scale, 0.0, decay)).unwrap(), &p("medium.stds")).unwrap();
    save_dataset(&synth_generate(&dataset(100, 103, sigma * scale, 1.0 * scale, 0.0, 0.0, decay)).unwrap(), &p("small-train.stds")).unwrap();
    save_dataset(&synth_generate(&dataset(103, 104, sigma * scale, 1.0 * scale, 0.0, 0.0, decay)).unwrap(), &p("small-test.stds")).unwrap();
    println!("datasets generated in {:?}", t0.elapsed());

    let onestage = StagePlan {
        name: "onestage".into(),
        net_seed: 1,
        stages: vec![rep_stage("small", &p("small-train.stds"), 30, 13, InitFrom::None, 0.1 * scale)],
        eval_dataset: p("small-test.stds"),
    };
    let multistage_cbce = StagePlan {
        name: "multistage_cbce".into(),
        net_seed: 1,
        stages: vec![
            rep_stage("large", &p("large.stds"), 6, 11, InitFrom::None, 0.1 * scale),
            rep_stage("medium", &p("medium.stds"), 4, 12, InitFrom::Stage { stage: "large".into() }, 0.1 * scale),
            rep_stage("small", &p("small-train.stds"), 30, 13, InitFrom::Stage { stage: "medium".into() }, 0.1 * scale),
            StageSpec {
                name: "classifier".into(),
                dataset: p("small-train.stds"),
                epochs: std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(5),
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: clf_batch,
                loss: LossKind::Cbce { beta: 0.9999 },
                trainable_scope: TrainableScope::FinalClassifierOnly,
                reinit_final: true,
                init_from: InitFrom::Stage { stage: "small".into() },
                augmentation: if clf_aug { AugmentOps { hflip: true, vflip: true, rot90: Some(1), jitter: Some(0.1 * scale) } } else { AugmentOps::none() },
                seed: 14,
            },
        ],
        eval_dataset: p("small-test.stds"),
    };

    if std::env::var("TRACE2").is_ok() {
        use stagegrade::autodiff::Tape;
        use stagegrade::data::load_dataset;
        use stagegrade::losses::{cbce_loss_batch, ce_value, ClassWeights};
        use stagegrade::model::{Network, NetworkSpec, ParamGrad};
        use stagegrade::pipeline::{evaluate, run_plan, sgd_momentum_step};
        use stagegrade::rng::{derive_seed_n, SeedStream};
        let test = load_dataset(&p("small-test.stds")).unwrap();
        for seed in 0..3u64 {
            let mut plan = multistage_cbce.with_run_seed(seed);
            plan.stages.truncate(3);
            let out = run_plan(&plan).unwrap();
            println!("seed {seed} multi kappa {:.3}", out.metrics.kappa);
            let (_, rep_ckpt) = &out.checkpoints[2];
            let mut net = Network::build(NetworkSpec::default_desk(5, 16, 16), 0).unwrap();
            rep_ckpt.apply(&mut net).unwrap();
            net.freeze_all_except("fc").unwrap();
            let clf_seed = multistage_cbce.with_run_seed(seed).stages[3].seed;
            net.reinit_layer("fc", derive_seed_n(clf_seed, &[0x03])).unwrap();
            let small = load_dataset(&p("small-train.stds")).unwrap();
            let (train, val) = stagegrade::data::stratified_split(&small, 0.1, derive_seed_n(clf_seed, &[0x04])).unwrap();
            let weights = ClassWeights::effective_number(
                &train.class_counts().iter().map(|&c| c as u64).collect::<Vec<_>>(), 0.9999).unwrap().normalize();
            let fc_idx = net.spec().layer_index("fc").unwrap();
            let mut vel: Vec<Vec<f64>> = net.params_at(fc_idx).iter().map(|p| vec![0.0; p.numel()]).collect();
            for epoch in 1..=10usize {
                let mut order: Vec<usize> = (0..train.len()).collect();
                SeedStream::new(derive_seed_n(clf_seed, &[0x01, epoch as u64])).shuffle(&mut order);
                for batch in order.chunks(4) {
                    let mut tape = Tape::new();
                    let binding = net.bind_params(&mut tape, ParamGrad::Trainable);
                    let (mut ids, mut ts) = (vec![], vec![]);
                    for &i in batch {
                        let tr = net.forward_bound(&mut tape, &binding, &train.samples[i].image).unwrap();
                        ids.push(tr.logits);
                        ts.push(train.samples[i].label);
                    }
                    let loss = cbce_loss_batch(&mut tape, &ids, &ts, &weights).unwrap();
                    tape.backward(loss).unwrap();
                    for t in 0..2 {
                        if let Some(g) = tape.grad(binding.ids[fc_idx][t]) {
                            let g = g.to_vec();
                            sgd_momentum_step(net.param_values_mut(fc_idx, t), &g, &mut vel[t], 0.01, 0.9).unwrap();
                        }
                    }
                }
                let mut wnum = 0.0; let mut wden = 0.0; let mut unum = 0.0;
                for s in &val.samples {
                    let logits = net.forward(&s.image).unwrap();
                    let ce = ce_value(&logits, s.label);
                    let w = weights.weights()[s.label];
                    wnum += w * ce; wden += w; unum += ce;
                }
                let report = evaluate(&net, &test).unwrap();
                println!("  ep{epoch}: wval {:.3} uval {:.3}  test kappa {:.3} acc {:.3} r1 {:?}",
                    wnum / wden, unum / val.samples.len() as f64, report.kappa, report.accuracy, report.recall(1));
            }
        }
        return;
    }
    if std::env::var("TRAJ").is_ok() {
        for seed in 0..3u64 {
            let mut kappas = Vec::new();
            for e in 1..=5usize {
                let mut plan = multistage_cbce.with_run_seed(seed);
                plan.stages[3].epochs = e;
                // selection across e epochs picks best-val among them
                let out = run_plan(&plan).unwrap();
                kappas.push((out.metrics.kappa, out.records[3].best_epoch));
            }
            let multi_k = {
                let mut plan = multistage_cbce.with_run_seed(seed);
                plan.stages.truncate(3);
                run_plan(&plan).unwrap().metrics.kappa
            };
            println!("seed {seed}: multi {multi_k:.3}  cbce by max-epochs: {:?}", kappas.iter().map(|(k, be)| format!("{k:.3}@{be}")).collect::<Vec<_>>());
        }
        return;
    }
    let t1 = std::time::Instant::now();
    let results: Vec<(u64, f64, f64, f64, Option<f64>, Option<f64>, f64, f64)> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let one = run_plan(&onestage.with_run_seed(seed)).unwrap();
            let multi = run_plan(&multistage_cbce.with_run_seed(seed)).unwrap();
            let before = multi.records[2].eval.as_ref().unwrap();
            let after = multi.records[3].eval.as_ref().unwrap();
            (
                seed,
                one.metrics.kappa,
                before.kappa,
                after.kappa,
                before.recall(1),
                after.recall(1),
                before.accuracy,
                after.accuracy,
            )
        })
        .collect();
    println!("runs done in {:?}", t1.elapsed());

    // debug detail for seed 0
    {
        let multi = run_plan(&multistage_cbce.with_run_seed(0)).unwrap();
        let before = multi.records[2].eval.as_ref().unwrap();
        let after = multi.records[3].eval.as_ref().unwrap();
        println!("\nseed0 multi-stage confusion:");
        for row in &before.confusion { println!("  {:?}", row); }
        println!("seed0 +cbce confusion:");
        for row in &after.confusion { println!("  {:?}", row); }
        println!("classifier val losses: {:?}", multi.records[3].val_loss);
        println!("classifier train losses: {:?}", multi.records[3].train_loss);
        println!("classifier best epoch: {}", multi.records[3].best_epoch);
        for (i, rec) in multi.records.iter().enumerate() {
            let ev = rec.eval.as_ref().unwrap();
            println!("stage {} ({}) eval: acc {:.3} kappa {:.3}", i, rec.stage, ev.accuracy, ev.kappa);
        }
        println!("large-stage confusion:");
        for row in &multi.records[0].eval.as_ref().unwrap().confusion { println!("  {:?}", row); }
        // train-set confusion after the classifier stage
        use stagegrade::data::{load_dataset, stratified_split};
        use stagegrade::model::{Network, NetworkSpec};
        use stagegrade::pipeline::evaluate;
        let small = load_dataset(&p("small-train.stds")).unwrap();
        let mut net = Network::build(NetworkSpec::default_desk(5, 16, 16), 0).unwrap();
        // rebuild net at the cbce checkpoint
        let derived = multistage_cbce.with_run_seed(0);
        let outcome = run_plan(&derived).unwrap();
        let (_, ckpt) = &outcome.checkpoints[3];
        ckpt.apply(&mut net).unwrap();
        let train_report = evaluate(&net, &small).unwrap();
        println!("train confusion after cbce:");
        for row in &train_report.confusion { println!("  {:?}", row); }
        // GAP feature magnitudes per class under the multi-stage backbone
        {
            use stagegrade::autodiff::{Tape};
            use stagegrade::model::ParamGrad;
            let (_, ck) = &outcome.checkpoints[2];
            ck.apply(&mut net).unwrap();
            for class in 0..5usize {
                if let Some(s) = small.samples.iter().find(|s| s.label == class) {
                    let mut tape = Tape::new();
                    let b = net.bind_params(&mut tape, ParamGrad::Trainable);
                    let tr = net.forward_bound(&mut tape, &b, &s.image).unwrap();
                    let gap_id = tr.layer_outputs[4];
                    let feats: Vec<String> = tape.values(gap_id).iter().map(|v| format!("{v:.2}")).collect();
                    println!("class {class} gap: [{}]", feats.join(", "));
                }
            }
        }
        let (_, ckpt_before) = &outcome.checkpoints[2];
        ckpt_before.apply(&mut net).unwrap();
        let before_report = evaluate(&net, &small).unwrap();
        println!("train confusion before cbce:");
        for row in &before_report.confusion { println!("  {:?}", row); }
        let _ = stratified_split(&small, 0.1, 0);
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let std = |xs: &[f64]| {
        let m = mean(xs);
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
    };
    let one_k: Vec<f64> = results.iter().map(|r| r.1).collect();
    let multi_k: Vec<f64> = results.iter().map(|r| r.2).collect();
    let cbce_k: Vec<f64> = results.iter().map(|r| r.3).collect();
    let multi_a: Vec<f64> = results.iter().map(|r| r.6).collect();
    let cbce_a: Vec<f64> = results.iter().map(|r| r.7).collect();
    println!("\nseed  one-k   multi-k cbce-k  r1(before->after)  acc(before->after)");
    for r in &results {
        println!(
            "{:>4}  {:.4}  {:.4}  {:.4}  {:?} -> {:?}   {:.3} -> {:.3}",
            r.0, r.1, r.2, r.3, r.4, r.5, r.6, r.7
        );
    }
    let recall_improved = results
        .iter()
        .filter(|r| match (r.4, r.5) {
            (Some(b), Some(a)) => a > b,
            _ => false,
        })
        .count();
    let n = seeds as f64;
    println!("\none-stage  kappa {:.4} +- {:.4}", mean(&one_k), std(&one_k));
    println!("multistage kappa {:.4} +- {:.4}  acc {:.4}", mean(&multi_k), std(&multi_k), mean(&multi_a));
    println!("with cbce  kappa {:.4} +- {:.4}  acc {:.4}", mean(&cbce_k), std(&cbce_k), mean(&cbce_a));
    let se_one = ((std(&one_k).powi(2) + std(&multi_k).powi(2)) / n).sqrt();
    let se_two = ((std(&multi_k).powi(2) + std(&cbce_k).powi(2)) / n).sqrt();
    println!(
        "gap one->multi {:.4} (pooled SE {:.4})  multi->cbce {:.4} (pooled SE {:.4})",
        mean(&multi_k) - mean(&one_k),
        se_one,
        mean(&cbce_k) - mean(&multi_k),
        se_two
    );
    println!("class-1 recall strictly improved in {recall_improved}/{seeds} seeds");
}
