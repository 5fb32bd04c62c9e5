//! Bi-level engine behavior: beta decay, freeze discipline, determinism,
//! retraining, checkpoint round trips, evaluation.

mod common;

use std::cell::RefCell;
use std::collections::VecDeque;

use a2snas_core::data::{gen_synthetic, make_splits, materialize_batch, SplitSpec, SyntheticSpec};
use a2snas_core::rng::Rng;
use a2snas_core::search::{
    beta_decay_loss, checkpoint, evaluate, run_search, train_compact, EvalModel, SearchConfig,
    SearchRun, SgdMomentum,
};
use a2snas_core::supernet::{build_supernet, SupernetConfig};
use a2snas_core::tensor::{ParamKind, ParamStore, Tape, Tensor};

fn tiny_net_cfg() -> SupernetConfig {
    SupernetConfig {
        stem_channels: 2,
        patch_size: 5,
        bands: 8,
        num_classes: 3,
    }
}

fn tiny_search_cfg(seed: u64) -> SearchConfig {
    SearchConfig {
        search_epochs: 2,
        retrain_epochs: 3,
        batch_size: 4,
        seed,
        ..SearchConfig::default()
    }
}

fn tiny_cube() -> a2snas_core::data::HsiCube {
    gen_synthetic(
        &SyntheticSpec {
            classes: 3,
            bands: 8,
            height: 14,
            width: 14,
            noise: 0.05,
        },
        515,
    )
    .unwrap()
}

#[test]
fn beta_decay_value_at_zero_logits() {
    let (_, params) = build_supernet::<f32>(&tiny_net_cfg(), 1).unwrap();
    let tape = Tape::new();
    let loss = beta_decay_loss(&tape, &params).unwrap();
    let want = 6.0 * 12.0f64.ln();
    assert!(
        (loss.item() as f64 - want).abs() < 1e-5,
        "{} vs {want}",
        loss.item()
    );
}

#[test]
fn beta_decay_single_hot_group_analytic() {
    let (net, mut params) = build_supernet::<f32>(&tiny_net_cfg(), 2).unwrap();
    let name = net.blocks[0].beta_name();
    params
        .set_value(&name, Tensor::from_vec(&[3], vec![10.0f32, 0.0, 0.0]).unwrap())
        .unwrap();
    let tape = Tape::new();
    let loss = beta_decay_loss(&tape, &params).unwrap();
    // Hot group term 10 + ln(1 + 2 e^-10); the other 11 groups stay ln 3 / ln 4.
    let want = 10.0 + (1.0 + 2.0 * (-10.0f64).exp()).ln()
        + 5.0 * 3.0f64.ln()
        + 6.0 * 4.0f64.ln();
    assert!(
        (loss.item() as f64 - want).abs() < 1e-5,
        "{} vs {want}",
        loss.item()
    );
}

#[test]
fn beta_decay_gradient_equals_group_softmax() {
    // In both precisions: the gradient for each group is its softmax.
    let (net, mut params) = build_supernet::<f64>(&tiny_net_cfg(), 3).unwrap();
    let mut rng = Rng::stream(77, "decay.logits");
    for block in &net.blocks {
        for (name, n) in [(block.beta_name(), 3), (block.alpha_name(), 4)] {
            let v: Vec<f64> = (0..n).map(|_| 4.0 * rng.next_f64() - 2.0).collect();
            params.set_value(&name, Tensor::from_vec(&[n], v).unwrap()).unwrap();
        }
    }
    let tape = Tape::new();
    let loss = beta_decay_loss(&tape, &params).unwrap();
    let grads = tape.backward(&loss, &params).unwrap();
    for block in &net.blocks {
        for name in [block.beta_name(), block.alpha_name()] {
            let logits = params.value(&name).unwrap();
            let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let g = grads.get(&name).unwrap();
            for (gi, e) in g.data().iter().zip(&exps) {
                assert!((gi - e / total).abs() < 1e-6, "{name}: {gi} vs {}", e / total);
            }
        }
    }
}

#[test]
fn bounds_on_beta_decay_sum() {
    // sum max(group) <= L_beta <= sum (max + ln |group|) on random draws.
    let net_cfg = tiny_net_cfg();
    let (net, mut params) = build_supernet::<f32>(&net_cfg, 4).unwrap();
    let mut rng = Rng::stream(88, "decay.bounds");
    for _ in 0..200 {
        let mut lo = 0.0f64;
        let mut hi = 0.0f64;
        for block in &net.blocks {
            for (name, n) in [(block.beta_name(), 3), (block.alpha_name(), 4)] {
                let v: Vec<f32> = (0..n).map(|_| (8.0 * rng.next_f64() - 4.0) as f32).collect();
                let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                lo += max;
                hi += max + (n as f64).ln();
                params.set_value(&name, Tensor::from_vec(&[n], v).unwrap()).unwrap();
            }
        }
        let tape = Tape::new();
        let loss = beta_decay_loss(&tape, &params).unwrap().item() as f64;
        assert!(loss >= lo - 1e-4 && loss <= hi + 1e-4, "{lo} <= {loss} <= {hi}");
    }
}

#[test]
fn freeze_discipline_is_bitwise() {
    let cube = tiny_cube();
    let splits = make_splits(&cube, SplitSpec::PerClass { train: 8, val: 4 }, 9).unwrap();
    let cfg = tiny_search_cfg(42);
    let mut run = SearchRun::new(&cfg, &tiny_net_cfg()).unwrap();
    let train_batch = materialize_batch(&cube, &splits.train[..4], 5).unwrap();
    let val_batch = materialize_batch(&cube, &splits.val[..4], 5).unwrap();

    let weight_names: Vec<String> = run.params.names_of_kind(ParamKind::Weight);
    let arch_names: Vec<String> = run.params.names_of_kind(ParamKind::Arch);
    for _ in 0..20 {
        let weights_before: Vec<Tensor<f32>> = weight_names
            .iter()
            .map(|n| run.params.value(n).unwrap().clone())
            .collect();
        run.arch_step(&val_batch).unwrap();
        for (name, before) in weight_names.iter().zip(&weights_before) {
            assert!(
                run.params.value(name).unwrap().bits_eq(before),
                "arch step changed weight {name}"
            );
        }
        let arch_before: Vec<Tensor<f32>> = arch_names
            .iter()
            .map(|n| run.params.value(n).unwrap().clone())
            .collect();
        run.weight_step(&train_batch).unwrap();
        for (name, before) in arch_names.iter().zip(&arch_before) {
            assert!(
                run.params.value(name).unwrap().bits_eq(before),
                "weight step changed logits {name}"
            );
        }
    }
}

#[test]
fn lambda_zero_keeps_unconstrained_logits_stationary() {
    // Zero data gradient and lambda = 0: the logits must not move at all.
    let (net, mut params) = build_supernet::<f32>(&tiny_net_cfg(), 6).unwrap();
    let mut sgd = SgdMomentum::new(0.01, 0.9);
    let before: Vec<Tensor<f32>> = net
        .blocks
        .iter()
        .flat_map(|b| [b.beta_name(), b.alpha_name()])
        .map(|n| params.value(&n).unwrap().clone())
        .collect();
    for _ in 0..10 {
        let tape = Tape::new();
        let decay = beta_decay_loss(&tape, &params).unwrap();
        let loss = tape.scale(&decay, 0.0);
        let grads = tape.backward(&loss, &params).unwrap();
        sgd.step(&mut params, &grads, ParamKind::Arch).unwrap();
    }
    for (block, chunk) in net.blocks.iter().zip(before.chunks(2)) {
        assert!(params.value(&block.beta_name()).unwrap().bits_eq(&chunk[0]));
        assert!(params.value(&block.alpha_name()).unwrap().bits_eq(&chunk[1]));
    }
}

#[test]
fn large_lambda_contracts_logit_groups_toward_uniform() {
    // Zeroed data loss, lambda = 1e3: the smoothmax gradient (the group
    // softmax) pulls larger logits down harder, so group variance shrinks
    // monotonically. A momentum-free probe step keeps the contraction map
    // from overshooting the uniform fixed point.
    let (net, mut params) = build_supernet::<f32>(&tiny_net_cfg(), 7).unwrap();
    let mut rng = Rng::stream(99, "contract.init");
    let group_names: Vec<(String, usize)> = net
        .blocks
        .iter()
        .flat_map(|b| [(b.beta_name(), 3), (b.alpha_name(), 4)])
        .collect();
    for (name, n) in &group_names {
        let v: Vec<f32> = (0..*n).map(|_| (2.0 * rng.next_f64() - 1.0) as f32).collect();
        params.set_value(name, Tensor::from_vec(&[*n], v).unwrap()).unwrap();
    }
    let variance = |params: &ParamStore<f32>, name: &str| -> f64 {
        let v = params.value(name).unwrap();
        let n = v.len() as f64;
        let mean = v.data().iter().map(|x| *x as f64).sum::<f64>() / n;
        v.data().iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / n
    };
    let mut sgd = SgdMomentum::new(1e-4, 0.0);
    let lambda = 1e3;
    let initial: Vec<f64> = group_names.iter().map(|(n, _)| variance(&params, n)).collect();
    let mut last = initial.clone();
    for step in 0..100 {
        let tape = Tape::new();
        let decay = beta_decay_loss(&tape, &params).unwrap();
        let loss = tape.scale(&decay, lambda);
        let grads = tape.backward(&loss, &params).unwrap();
        sgd.step(&mut params, &grads, ParamKind::Arch).unwrap();
        let now: Vec<f64> = group_names.iter().map(|(n, _)| variance(&params, n)).collect();
        for ((name, _), (prev, cur)) in group_names.iter().zip(last.iter().zip(&now)) {
            assert!(
                cur <= prev,
                "step {step}: variance of {name} grew from {prev} to {cur}"
            );
        }
        last = now;
    }
    for (a, b) in last.iter().zip(&initial) {
        assert!(a < &(0.5 * b), "weak contraction: {a} vs initial {b}");
    }
}

#[test]
fn single_sample_smoke_losses_decrease() {
    let cube = tiny_cube();
    let pixels = cube.labeled_pixels();
    let cfg = SearchConfig {
        lambda: 0.0,
        seed: 13,
        ..tiny_search_cfg(13)
    };
    let mut run = SearchRun::new(&cfg, &tiny_net_cfg()).unwrap();
    let batch = materialize_batch(&cube, &pixels[..1], 5).unwrap();
    let mut first = None;
    let mut last = (0.0f32, 0.0f32);
    for _ in 0..50 {
        let losses = run.search_step(&batch, &batch).unwrap();
        if first.is_none() {
            first = Some((losses.train_loss, losses.val_loss));
        }
        last = (losses.train_loss, losses.val_loss);
    }
    let first = first.unwrap();
    assert!(last.0 < first.0, "train loss {} -> {}", first.0, last.0);
    assert!(last.1 < first.1, "val loss {} -> {}", first.1, last.1);
}

#[test]
fn run_search_is_bit_deterministic_and_valid() {
    let cube = tiny_cube();
    let splits = make_splits(
        &cube,
        SplitSpec::TotalBudget { total: 36, train_fraction: 0.5 },
        21,
    )
    .unwrap();
    let cfg = tiny_search_cfg(31);
    let net_cfg = tiny_net_cfg();
    let (g1, h1, run1) = run_search(&cfg, &net_cfg, &cube, &splits.train, &splits.val).unwrap();
    let (g2, h2, run2) = run_search(&cfg, &net_cfg, &cube, &splits.train, &splits.val).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(h1.len(), cfg.search_epochs);
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        assert_eq!(a.val_oa.to_bits(), b.val_oa.to_bits());
        let bits_a: Vec<u32> = a.block_probs.iter().map(|p| p.to_bits()).collect();
        let bits_b: Vec<u32> = b.block_probs.iter().map(|p| p.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    for (name, p) in run1.params.iter() {
        assert!(p.value.bits_eq(run2.params.value(name).unwrap()), "{name}");
    }
    assert_eq!(g1.blocks.len(), 6);

    // History softmax rows: each group's 3 or 4 probabilities sum to 1.
    for rec in &h1 {
        assert_eq!(rec.block_probs.len(), 42);
        for chunk_start in (0..42).step_by(7) {
            let beta_sum: f32 = rec.block_probs[chunk_start..chunk_start + 3].iter().sum();
            let alpha_sum: f32 = rec.block_probs[chunk_start + 3..chunk_start + 7].iter().sum();
            assert!((beta_sum - 1.0).abs() < 1e-6);
            assert!((alpha_sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn resume_matches_uninterrupted_run_bit_exactly() {
    let cube = tiny_cube();
    let splits = make_splits(
        &cube,
        SplitSpec::TotalBudget { total: 30, train_fraction: 0.5 },
        22,
    )
    .unwrap();
    let net_cfg = tiny_net_cfg();
    let cfg = SearchConfig {
        search_epochs: 2,
        ..tiny_search_cfg(55)
    };

    // Uninterrupted: two epochs.
    let mut straight = SearchRun::new(&cfg, &net_cfg).unwrap();
    straight.run(&cube, &splits.train, &splits.val).unwrap();

    // Split: one epoch, checkpoint, resume, second epoch.
    let dir = tempfile::tempdir().unwrap();
    let mut first = SearchRun::new(&cfg, &net_cfg).unwrap();
    first.run_epoch(&cube, &splits.train, &splits.val).unwrap();
    first.save_checkpoint(dir.path()).unwrap();
    let mut resumed = SearchRun::resume(&cfg, &net_cfg, dir.path()).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.run_epoch(&cube, &splits.train, &splits.val).unwrap();

    for (name, p) in straight.params.iter() {
        assert!(
            p.value.bits_eq(resumed.params.value(name).unwrap()),
            "param {name} differs after resume"
        );
    }
    assert_eq!(straight.history.len(), resumed.history.len());
    for (a, b) in straight.history.iter().zip(&resumed.history) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        assert_eq!(a.val_oa.to_bits(), b.val_oa.to_bits());
    }
    assert_eq!(straight.genotype().unwrap(), resumed.genotype().unwrap());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let cube = tiny_cube();
    let splits = make_splits(&cube, SplitSpec::PerClass { train: 6, val: 3 }, 23).unwrap();
    let cfg = SearchConfig {
        search_epochs: 1,
        ..tiny_search_cfg(66)
    };
    let net_cfg = tiny_net_cfg();
    let mut run = SearchRun::new(&cfg, &net_cfg).unwrap();
    run.run(&cube, &splits.train, &splits.val).unwrap();

    let dir_a = tempfile::tempdir().unwrap();
    run.save_checkpoint(dir_a.path()).unwrap();
    let resumed = SearchRun::resume(&cfg, &net_cfg, dir_a.path()).unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    resumed.save_checkpoint(dir_b.path()).unwrap();
    for file in ["manifest", "genotype", "weights.bin", "state.bin"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs after a load/save round trip");
    }

    // Wrong fingerprint is refused.
    let mut other = net_cfg;
    other.bands = 9;
    assert!(SearchRun::resume(&cfg, &other, dir_a.path()).is_err());
}

#[test]
fn retrain_monitors_best_and_schedule() {
    let cube = tiny_cube();
    let splits = make_splits(&cube, SplitSpec::PerClass { train: 10, val: 5 }, 24).unwrap();
    let net_cfg = tiny_net_cfg();
    let cfg = SearchConfig {
        retrain_epochs: 4,
        seed: 91,
        ..tiny_search_cfg(91)
    };
    let (net, params) = build_supernet::<f32>(&net_cfg, cfg.seed).unwrap();
    let genotype = net.derive_genotype(&params).unwrap();
    let trained = train_compact(&cfg, &genotype, &net_cfg, &cube, &splits.train, &splits.val).unwrap();

    // Learning rate schedule is exactly w_lr * decay^epoch.
    assert_eq!(trained.history.len(), 4);
    for rec in &trained.history {
        let want = cfg.w_lr * cfg.w_lr_decay.powi(rec.epoch as i32);
        assert_eq!(rec.lr.to_bits(), want.to_bits(), "epoch {}", rec.epoch);
    }

    // The recorded best epoch has the max val OA.
    let best_in_history = trained
        .history
        .iter()
        .map(|r| r.val_oa)
        .fold(f32::NEG_INFINITY, f32::max);
    assert!((trained.best_val_oa as f32 - best_in_history).abs() < 1e-7);

    // Reloading the best checkpoint reproduces its recorded OA exactly.
    let dir = tempfile::tempdir().unwrap();
    trained.save_best_checkpoint(dir.path()).unwrap();
    let manifest = checkpoint::load_manifest_checked(dir.path(), &net_cfg.fingerprint()).unwrap();
    let genotype2 = checkpoint::load_genotype(dir.path()).unwrap();
    assert_eq!(genotype2, genotype);
    let (net2, mut params2) =
        a2snas_core::supernet::build_compact::<f32>(&genotype2, &net_cfg, 0).unwrap();
    checkpoint::read_weights_into(&dir.path().join("weights.bin"), &mut params2).unwrap();
    let (_, report) = evaluate(&net2, &mut params2, &cube, &splits.val, cfg.batch_size).unwrap();
    assert_eq!(report.oa, manifest.val_oa.unwrap());
}

#[test]
fn retrain_reduces_loss_on_separable_data() {
    let cube = gen_synthetic(
        &SyntheticSpec {
            classes: 3,
            bands: 8,
            height: 14,
            width: 14,
            noise: 0.02,
        },
        616,
    )
    .unwrap();
    let splits = make_splits(&cube, SplitSpec::PerClass { train: 12, val: 6 }, 25).unwrap();
    let net_cfg = tiny_net_cfg();
    let cfg = SearchConfig {
        retrain_epochs: 8,
        seed: 92,
        ..tiny_search_cfg(92)
    };
    let (net, params) = build_supernet::<f32>(&net_cfg, cfg.seed).unwrap();
    let genotype = net.derive_genotype(&params).unwrap();
    let trained = train_compact(&cfg, &genotype, &net_cfg, &cube, &splits.train, &splits.val).unwrap();
    let first = trained.history.first().unwrap().train_loss;
    let last = trained.history.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
}

/// Scripted classifier for evaluate(): pops one label per sample.
struct ScriptedModel {
    responses: RefCell<VecDeque<usize>>,
    classes: usize,
    patch: usize,
}

impl EvalModel for ScriptedModel {
    fn eval_logits(&self, _params: &mut ParamStore<f32>, x: &Tensor<f32>) -> a2snas_core::Result<Tensor<f32>> {
        let n = x.shape()[0];
        let mut logits = vec![0.0f32; n * self.classes];
        let mut q = self.responses.borrow_mut();
        for i in 0..n {
            let cls = q.pop_front().expect("scripted responses exhausted");
            logits[i * self.classes + cls] = 10.0;
        }
        Tensor::from_vec(&[n, self.classes], logits)
    }
    fn patch_size(&self) -> usize {
        self.patch
    }
}

#[test]
fn evaluate_perfect_and_constant_classifiers() {
    let cube = tiny_cube();
    let pixels = cube.labeled_pixels();
    let mut store = ParamStore::new();
    store
        .insert("unused", Tensor::zeros(&[1]), false, ParamKind::Weight)
        .unwrap();

    // Perfect: respond with the true label of each pixel in order.
    let truth: VecDeque<usize> = pixels.iter().map(|p| cube.label(*p) as usize - 1).collect();
    let model = ScriptedModel {
        responses: RefCell::new(truth),
        classes: 3,
        patch: 5,
    };
    let (_, report) = evaluate(&model, &mut store, &cube, &pixels, 16).unwrap();
    assert_eq!(report.oa, 1.0);
    assert_eq!(report.aa, 1.0);
    assert_eq!(report.kappa, 1.0);

    // Constant on a balanced 2-class subset: OA 0.5, kappa 0.
    let class1: Vec<_> = pixels.iter().filter(|p| cube.label(**p) == 1).take(10).copied().collect();
    let class2: Vec<_> = pixels.iter().filter(|p| cube.label(**p) == 2).take(10).copied().collect();
    let subset: Vec<_> = class1.into_iter().chain(class2).collect();
    let constant = ScriptedModel {
        responses: RefCell::new(vec![0usize; subset.len()].into()),
        classes: 3,
        patch: 5,
    };
    let (cm, report) = evaluate(&constant, &mut store, &cube, &subset, 7).unwrap();
    assert!((report.oa - 0.5).abs() < 1e-12);
    assert!(report.kappa.abs() < 1e-12);

    // The report agrees with the brute-force oracle on the same counts.
    let rows: Vec<Vec<u64>> = (0..3)
        .map(|i| (0..3).map(|j| cm.get(i, j)).collect())
        .collect();
    let (oa, aa, kappa) = common::metrics_ref(&rows);
    assert_eq!(report.oa, oa);
    assert_eq!(report.aa, aa);
    assert_eq!(report.kappa, kappa);
}
