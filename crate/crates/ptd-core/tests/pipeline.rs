//! Desk-scale end-to-end checks: pruning recovery, smoothness diagnostics,
//! and the census/solver chain on a trained model.

use ptd_core::checkpoint::MaskedCheckpoint;
use ptd_core::data::{split_train_val, synthetic_blobs, LabeledDataset, Split};
use ptd_core::losses::smoothness_report;
use ptd_core::presets;
use ptd_core::prune::{iterative_prune_lr_rewind, PruneConfig, PruneMethod};
use ptd_core::student::{census, solve_student_channels};
use ptd_core::threads::Parallelism;
use ptd_core::train::{evaluate, train, Init, TrainConfig};

fn desk_data(seed: u64) -> LabeledDataset {
    let ds = synthetic_blobs(6, 2, 8, 8, 60, 0.2, seed)
        .unwrap()
        .split_off_test(0.2, seed)
        .unwrap();
    split_train_val(ds, 0.1, seed).unwrap()
}

fn desk_train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.1,
        lr_drops: vec![epochs * 3 / 5, epochs * 4 / 5],
        drop_factor: 0.2,
        weight_decay: 5e-4,
        momentum: 0.9,
        seed,
        decay_exempt_bn_bias: false,
    }
}

fn desk_prune_cfg(iterations: usize) -> PruneConfig {
    PruneConfig {
        rate_per_iteration: 0.2,
        iterations,
        post_epochs: 4,
        post_batch_size: 32,
        post_lr: 0.1,
        post_lr_drops: vec![2],
        post_drop_factor: 0.1,
        post_weight_decay: 2e-4,
        post_momentum: 0.9,
        method: PruneMethod::MagnitudeLrRewind,
        synflow_rounds: 100,
    }
}

#[test]
fn pruned_mini_vgg_recovers_dense_accuracy() {
    let par = Parallelism::resolve(false);
    let data = desk_data(0);
    let arch = presets::mini_vgg(2, 8, 6);
    let (teacher, report) = train::<f32>(&arch, &data, &desk_train_cfg(10, 0), Init::Fresh, &par).unwrap();
    let dense_val = report.best_val_acc().unwrap();
    assert!(dense_val >= 0.9, "dense teacher val acc {dense_val}");

    // four iterations at rate 0.2 -> sparsity 0.5904
    let (pruned, prune_report) =
        iterative_prune_lr_rewind(teacher, &desk_prune_cfg(4), &data, &par).unwrap();
    let total = pruned.masks.total_bits() as f64;
    assert!((pruned.sparsity() - 0.5904).abs() <= 1.0 / total);
    pruned.masks.check_zeroed(&pruned.params).unwrap();
    assert!(prune_report.masks_monotone);

    let pruned_val = evaluate(&pruned, &data, Split::Val, 64, &par).unwrap();
    assert!(
        pruned_val >= dense_val - 0.02,
        "pruned val {pruned_val} vs dense {dense_val}"
    );
}

#[test]
fn smoothness_diagnostic_on_trained_pair() {
    let par = Parallelism::resolve(false);
    let data = desk_data(1);
    let arch = presets::mini_vgg(2, 8, 6);
    let (dense, _) = train::<f32>(&arch, &data, &desk_train_cfg(8, 1), Init::Fresh, &par).unwrap();
    let (pruned, _) =
        iterative_prune_lr_rewind(dense.clone(), &desk_prune_cfg(4), &data, &par).unwrap();

    // identical models: exactly zero
    let same = smoothness_report(&dense, &dense, &data, Split::Train, 128, &par).unwrap();
    assert_eq!(same.mean_log_ratio, 0.0);
    assert!(same.per_sample.iter().all(|s| s.log_ratio == 0.0));

    // swapping arguments negates the value exactly
    let ab = smoothness_report(&dense, &pruned, &data, Split::Train, 128, &par).unwrap();
    let ba = smoothness_report(&pruned, &dense, &data, Split::Train, 128, &par).unwrap();
    assert_eq!(ab.mean_log_ratio, -ba.mean_log_ratio);
    assert_eq!(ab.per_sample.len(), data.train_idx.len());
}

#[test]
fn hand_built_two_class_pair_matches_log_ratio_oracle() {
    use ptd_core::arch::{ArchitectureSpec, LayerSpec};
    use ptd_core::params::{ParamSet, TensorRole};

    // one-dense-layer nets with zero weights and hand-set biases produce
    // constant probabilities: a -> [0.9, 0.1], b -> [0.6, 0.4]
    let arch = ArchitectureSpec {
        name: "const".into(),
        input: [1, 1, 1],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 1,
                out_dim: 2,
                bias: true,
            },
        ],
        notes: None,
    };
    let with_bias = |p0: f64, p1: f64| {
        let mut params = ParamSet::<f32>::zeros_like(&arch).unwrap();
        params.visit_mut(&mut |_, role, t| {
            if role == TensorRole::Bias {
                t.data_mut()[0] = p0.ln() as f32;
                t.data_mut()[1] = p1.ln() as f32;
            }
        });
        MaskedCheckpoint::new(arch.clone(), params, 0).unwrap()
    };
    let a = with_bias(0.9, 0.1);
    let b = with_bias(0.6, 0.4);

    let mut data = synthetic_blobs(2, 1, 1, 1, 8, 0.0, 0).unwrap();
    data.labels.iter_mut().for_each(|l| *l = 0); // every sample is class 0
    data.num_classes = 2;
    let par = Parallelism::single();
    let rep = smoothness_report(&a, &b, &data, Split::Train, 16, &par).unwrap();
    let oracle = (0.9f64 / 0.6).ln(); // calculator: 0.405465
    assert!((oracle - 0.40546).abs() < 1e-5);
    assert!(
        (rep.mean_log_ratio - oracle).abs() < 1e-6,
        "mean {} vs oracle {oracle}",
        rep.mean_log_ratio
    );
}

#[test]
fn census_and_solver_compose_on_trained_pruned_model() {
    let par = Parallelism::resolve(false);
    let data = desk_data(2);
    let arch = presets::mini_vgg(2, 8, 6);
    let (teacher, _) = train::<f32>(&arch, &data, &desk_train_cfg(6, 2), Init::Fresh, &par).unwrap();
    let (pruned, _) =
        iterative_prune_lr_rewind(teacher, &desk_prune_cfg(2), &data, &par).unwrap();
    let c = census(&pruned).unwrap();
    assert_eq!(c.total_nonzero(), pruned.masks.kept());
    let plan = solve_student_channels(&arch, &c).unwrap();
    plan.arch.validate().unwrap();
    // a narrower dense student should carry roughly the kept weight count
    let kept = pruned.masks.kept() as f64;
    let ratio = plan.total_weights as f64 / kept;
    assert!(
        (0.5..1.6).contains(&ratio),
        "student weights {} vs kept {kept}",
        plan.total_weights
    );
}
