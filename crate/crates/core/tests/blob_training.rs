use gccs::attacks::{budget_check, pgd, AttackConfig, AttackKind};
use gccs::data::Split;
use gccs::harness::{attack_sweep, evaluate, export_latent, train, train_on, DataConfig, TrainConfig, TrainMode};
use gccs::model::LossKind;

fn blobs() -> DataConfig {
    DataConfig::Blobs {
        classes: 3,
        dim: 8,
        std: 0.1,
        train_per_class: 200,
        test_per_class: 100,
        seed: 5,
    }
}

fn cfg(loss: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        data: blobs(),
        hidden: vec![32],
        loss,
        epochs,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn gccs_on_three_blobs_is_near_perfect() {
    let (ckpt, rec) = train(&cfg(LossKind::Gccs, 200)).unwrap();
    let acc = rec.clean_accuracy.unwrap();
    assert!(acc >= 99.0, "accuracy {acc}");

    let test = blobs().load(Split::Test).unwrap();
    let mut tgsm = AttackConfig::new(AttackKind::Tgsm, 0.0);
    tgsm.seed = 3;
    let sweep = attack_sweep(&ckpt, &test, &tgsm, &[0.0, 1e-3, 2e-3]).unwrap();
    let success: Vec<f64> = sweep.rows.iter().map(|r| r.target_success.unwrap()).collect();
    assert!(success.windows(2).all(|w| w[0] <= w[1]), "{success:?}");
    assert_eq!(sweep.rows[0].accuracy, acc);
}

#[test]
fn trained_latents_sit_on_simplex_vertices() {
    let run = TrainConfig {
        keep_prob: 1.0,
        ..cfg(LossKind::Gccs, 1000)
    };
    let (ckpt, _) = train(&run).unwrap();
    let test = blobs().load(Split::Test).unwrap();
    let rows = export_latent(&ckpt, &test, &[]).unwrap();
    assert_eq!(rows.len(), test.len());
    for class in 0..3 {
        let members: Vec<_> = rows.iter().filter(|r| r.label == class).collect();
        for j in 0..3 {
            let mean = members.iter().map(|r| r.z[j]).sum::<f64>() / members.len() as f64;
            let want = if j == class { ckpt.target.mu } else { 0.0 };
            assert!((mean - want).abs() <= 3.0 * ckpt.target.sigma, "class {class} coord {j}: {mean}");
        }
    }
}

#[test]
fn fine_tuning_a_cross_entropy_model_matches_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let ce_path = dir.path().join("ce.ckpt");
    let (ce, _) = train(&cfg(LossKind::CrossEntropy, 50)).unwrap();
    ce.save(&ce_path).unwrap();

    let (_, scratch) = train(&cfg(LossKind::Gccs, 100)).unwrap();
    let tuned_cfg = TrainConfig {
        mode: TrainMode::FineTune { checkpoint: ce_path },
        ..cfg(LossKind::Gccs, 100)
    };
    let (_, tuned) = train(&tuned_cfg).unwrap();
    let (a, b) = (scratch.clean_accuracy.unwrap(), tuned.clean_accuracy.unwrap());
    assert!((a - b).abs() <= 1.0, "scratch {a} vs fine-tuned {b}");
}

#[test]
fn untrained_model_has_no_simplex_structure() {
    let train_set = blobs().load(Split::Train).unwrap();
    let (ckpt, _) = train_on(&cfg(LossKind::Gccs, 1), &train_set).unwrap();
    let rows = export_latent(&ckpt, &train_set, &[1]).unwrap();
    assert!(rows.iter().all(|r| r.label == 1));
    let mean = rows.iter().map(|r| r.z[1]).sum::<f64>() / rows.len() as f64;
    assert!((mean - ckpt.target.mu).abs() > 3.0 * ckpt.target.sigma);
}

#[test]
fn pgd_budget_holds_on_a_trained_model() {
    let (ckpt, _) = train(&cfg(LossKind::CrossEntropy, 20)).unwrap();
    let test = DataConfig::Blobs {
        classes: 3,
        dim: 8,
        std: 0.1,
        train_per_class: 1,
        test_per_class: 334,
        seed: 9,
    }
    .load(Split::Test)
    .unwrap()
    .take(1000);
    assert_eq!(test.len(), 1000);
    let adv = pgd(&ckpt.model, &ckpt.target, &test.images, &test.labels, &AttackConfig::new(AttackKind::Pgd, 6e-3)).unwrap();
    let report = budget_check(&adv);
    assert!(report.is_ok(), "{:?} {:?}", report.violations, report.out_of_range);
    assert!(report.max_ratio > 0.0);
    let clean = evaluate(&ckpt, &test).unwrap().accuracy;
    let attacked = attack_sweep(&ckpt, &test, &AttackConfig::new(AttackKind::Pgd, 0.0), &[0.05]).unwrap();
    assert!(attacked.rows[0].accuracy <= clean + 1.0);
}
