use std::collections::BTreeSet;

use icrl_core::airn::AirnInit;
use icrl_core::backbone::BackboneConfig;
use icrl_core::data::{
    class_centers, gen_blobs, gen_outlier_blobs, load_container, outlier_draw, save_container, split_classes,
    ClassData, DatasetContainer, OutlierRule, SplitSpec, SyntheticSpec,
};
use icrl_core::episodes::{
    backbone_checkpoint, eval_episode, evaluate, load_pretrained, meta_optimizer, meta_train, metrics_csv,
    model_checkpoint, model_from_checkpoint, pretrain, sample_episode, train_step, Checkpoint, ClassPool, EvalSpec,
    TrainConfig,
};
use icrl_core::model::{IcrlModel, ModelConfig};
use icrl_core::tensor::{ParamGroup, Tensor};
use icrl_core::{rng, Error};
use proptest::prelude::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 8,
        instances_per_class: 20,
        size: 8,
        seed,
        ..Default::default()
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        blocks: 2,
        channels: 8,
        input_size: 8,
        input_channels: 3,
        pool: 2,
    }
}

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        ways: 3,
        shots: 2,
        queries: 3,
        epochs: 2,
        episodes_per_epoch: 6,
        pretrain_epochs: 3,
        pretrain_batch: 16,
        pretrain_val_episodes: 20,
        augment: false,
        seed,
        ..Default::default()
    }
}

#[test]
fn nearest_centroid_separates_default_blobs() {
    let spec = SyntheticSpec {
        classes: 20,
        instances_per_class: 40,
        seed: 2,
        ..Default::default()
    };
    let data = gen_blobs(&spec).unwrap();
    let centres = class_centers(&spec);
    let (mut right, mut total) = (0, 0);
    for (c, class) in data.classes().iter().enumerate() {
        for img in &class.instances {
            let dist = |t: &Tensor<f32>| -> f64 {
                t.data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum()
            };
            let best = (0..centres.len())
                .min_by(|&a, &b| dist(&centres[a]).total_cmp(&dist(&centres[b])))
                .unwrap();
            right += (best == c) as usize;
            total += 1;
        }
    }
    assert!(right as f64 / total as f64 > 0.99, "{}/{}", right, total);
}

#[test]
fn outlier_flags_match_an_independent_redraw() {
    for rule in [OutlierRule::OtherClass, OutlierRule::UniformNoise] {
        let spec = SyntheticSpec {
            outlier_fraction: 0.2,
            outlier_rule: rule,
            ..small_spec(5)
        };
        let (data, flags) = gen_outlier_blobs(&spec).unwrap();
        let clean = gen_blobs(&spec).unwrap();
        let centres = class_centers(&spec);
        for c in 0..spec.classes {
            for i in 0..spec.instances_per_class {
                let draw = outlier_draw(&spec, c, i);
                assert_eq!(flags.is_outlier(c, i), draw.is_some());
                match draw {
                    None => assert_eq!(data.instance(c, i), clean.instance(c, i)),
                    Some(src) if rule == OutlierRule::OtherClass => {
                        assert_ne!(src, c);
                        let near = |k: usize| -> f64 {
                            centres[k]
                                .data()
                                .iter()
                                .zip(data.instance(c, i).data())
                                .map(|(a, b)| ((a - b) as f64).powi(2))
                                .sum()
                        };
                        assert!(near(src) < near(c), "outlier ({}, {}) is not near class {}", c, i, src);
                    }
                    Some(_) => {}
                }
            }
        }
    }
}

#[test]
fn a_fifth_of_five_shot_supports_are_outliers_on_average() {
    let spec = SyntheticSpec {
        classes: 20,
        instances_per_class: 30,
        size: 4,
        outlier_fraction: 0.2,
        seed: 1,
        ..Default::default()
    };
    let (_, flags) = gen_outlier_blobs(&spec).unwrap();
    let pool = ClassPool::new((0..20).collect(), vec![(0..30).collect(); 20]).unwrap();
    let mut per_support = Vec::new();
    for i in 0..400 {
        let ep = sample_episode(&pool, &mut rng::stream_indexed(3, "test.outliers", i), 5, 5, 1).unwrap();
        for (slot, support) in ep.support.iter().enumerate() {
            per_support.push(
                support
                    .iter()
                    .filter(|&&k| flags.is_outlier(ep.classes[slot], k))
                    .count() as f64,
            );
        }
    }
    let mean = per_support.iter().sum::<f64>() / per_support.len() as f64;
    assert!((mean - 1.0).abs() < 0.15, "mean outliers per support {}", mean);
}

#[test]
fn fsds_file_round_trip_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blobs.fsds");
    let data = gen_blobs(&small_spec(0)).unwrap();
    save_container(&data, &path).unwrap();
    let back = load_container(&path).unwrap();
    assert_eq!(back, data);
    assert!(back.provenance.contains("blobs.fsds"));
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    assert!(matches!(
        load_container(dir.path().join("missing.fsds")),
        Err(Error::Io(_))
    ));
}

#[test]
fn pretraining_beats_chance_and_is_deterministic() {
    let data = gen_blobs(&small_spec(7)).unwrap();
    let classes: Vec<usize> = (0..6).collect();
    let cfg = quick_train(3);
    let a = pretrain(&data, &classes, &small_backbone(), &cfg).unwrap();
    let b = pretrain(&data, &classes, &small_backbone(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 3);
    let best = a.history.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    assert!(best > 1.0 / 3.0 + 0.1, "validation accuracy {}", best);
    let chosen = a.selected_epoch.unwrap();
    assert_eq!(a.history[chosen - 1].val_acc, best);
    assert!(a.backbone.iter().all(|p| p.group == ParamGroup::Backbone));
    assert_eq!(a.metrics_csv().lines().count(), 4);
}

#[test]
fn zero_pretraining_epochs_returns_the_initial_backbone() {
    let data = gen_blobs(&small_spec(7)).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..quick_train(4)
    };
    let out = pretrain(&data, &[0, 1, 2], &small_backbone(), &cfg).unwrap();
    assert_eq!(out.selected_epoch, None);
    let fresh = IcrlModel::new(ModelConfig::new(small_backbone(), 2), 4, AirnInit::Random).unwrap();
    for p in out.backbone.iter() {
        assert_eq!(Some(&p.value), fresh.params.value(&p.name), "{}", p.name);
    }
}

#[test]
fn pretraining_needs_ten_instances_per_class() {
    let data = gen_blobs(&SyntheticSpec {
        instances_per_class: 8,
        ..small_spec(0)
    })
    .unwrap();
    assert!(matches!(
        pretrain(&data, &[0, 1, 2], &small_backbone(), &quick_train(0)),
        Err(Error::Insufficient(_))
    ));
}

#[test]
fn pretrained_backbone_feeds_meta_training() {
    let data = gen_blobs(&small_spec(9)).unwrap();
    let cfg = quick_train(9);
    let out = pretrain(&data, &[0, 1, 2, 3], &small_backbone(), &cfg).unwrap();
    let ck = backbone_checkpoint(&out.backbone, &small_backbone(), &cfg, out.selected_epoch);
    let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(ck.kind(), Some("backbone"));

    let mut model = IcrlModel::new(ModelConfig::new(small_backbone(), 2), 1, AirnInit::Random).unwrap();
    load_pretrained(&mut model, &ck).unwrap();
    for p in out.backbone.iter() {
        assert_eq!(model.params.value(&p.name), Some(&p.value));
    }
    let rows = meta_train(&data, &[0, 1, 2, 3], &mut model, &cfg).unwrap();
    assert_eq!(rows.len(), 12);

    let mut wider = ModelConfig::new(small_backbone(), 2);
    wider.backbone.channels = 16;
    let mut mismatched = IcrlModel::new(wider, 1, AirnInit::Random).unwrap();
    assert!(load_pretrained(&mut mismatched, &ck).is_err());
}

#[test]
fn meta_training_is_reproducible_and_checkpoints_round_trip() {
    let data = gen_blobs(&small_spec(2)).unwrap();
    let cfg = quick_train(11);
    let run = || {
        let mut m = IcrlModel::new(ModelConfig::new(small_backbone(), 2), 11, AirnInit::Random).unwrap();
        let rows = meta_train(&data, &[0, 1, 2, 3, 4], &mut m, &cfg).unwrap();
        (m, metrics_csv(&rows))
    };
    let (m1, csv1) = run();
    let (m2, csv2) = run();
    assert_eq!(csv1, csv2);
    assert_eq!(m1, m2);

    let bytes = model_checkpoint(&m1, &cfg).to_bytes();
    let (back, back_cfg) = model_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.config, m1.config);
    for p in m1.params.iter() {
        assert_eq!(back.params.value(&p.name), Some(&p.value));
    }
    assert_eq!(back.params.len(), m1.params.len());
    assert_eq!(back_cfg, cfg);
    assert_eq!(model_checkpoint(&back, &back_cfg).to_bytes(), bytes);

    let spec = EvalSpec {
        episodes: 12,
        ways: 3,
        shots: 2,
        queries: 3,
        seed: 4,
    };
    assert_eq!(
        evaluate(&m1, &data, &[5, 6, 7], &spec).unwrap(),
        evaluate(&back, &data, &[5, 6, 7], &spec).unwrap()
    );
    let wrong_k = EvalSpec { shots: 3, ..spec };
    assert!(matches!(
        evaluate(&m1, &data, &[5, 6, 7], &wrong_k),
        Err(Error::ShotMismatch {
            trained: 2,
            requested: 3
        })
    ));
}

#[test]
fn memorises_a_fixed_episode() {
    let data = gen_blobs(&SyntheticSpec {
        noise: 0.3,
        separation: 2.0,
        ..small_spec(13)
    })
    .unwrap();
    let pool = ClassPool::all(&data, &[0, 1, 2]).unwrap();
    let spec = EvalSpec {
        episodes: 1,
        ways: 3,
        shots: 2,
        queries: 4,
        seed: 0,
    };
    let ep = eval_episode(&pool, &spec, 0).unwrap();
    let mut model = IcrlModel::new(ModelConfig::new(small_backbone(), 2), 2, AirnInit::Random).unwrap();
    let cfg = quick_train(0);
    let mut opt = meta_optimizer(&model, &cfg);
    let first = train_step(&mut model, &mut opt, &ep.inputs(&data), cfg.loss_weights()).unwrap();
    let mut last = first;
    for _ in 0..150 {
        last = train_step(&mut model, &mut opt, &ep.inputs(&data), cfg.loss_weights()).unwrap();
    }
    assert!(last.0.l_cls < 0.5 * first.0.l_cls, "{:?} -> {:?}", first.0, last.0);
    assert_eq!(last.1, 1.0);
}

fn tiny_container(sizes: &[usize], seed: u64) -> DatasetContainer {
    let mut r = rng::stream(seed, "test.container");
    let classes = sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| ClassData {
            name: format!("class-{}", c),
            instances: (0..n)
                .map(|_| Tensor::from_fn([2, 3, 3], |_| rand::Rng::gen::<f32>(&mut r)))
                .collect(),
        })
        .collect();
    DatasetContainer::new(classes, "test").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fsds_bytes_round_trip(sizes in prop::collection::vec(1usize..6, 1..6), seed in 0u64..1000) {
        let c = tiny_container(&sizes, seed);
        let bytes = c.to_bytes();
        let back = DatasetContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_single_byte_flip_is_detected(seed in 0u64..1000, at in 0usize..10_000, bit in 0u8..8) {
        let bytes = tiny_container(&[2, 3], seed).to_bytes();
        let mut bad = bytes.clone();
        let i = at % bad.len();
        bad[i] ^= 1 << bit;
        prop_assert!(DatasetContainer::from_bytes(&bad).is_err());
    }

    #[test]
    fn splits_partition_without_overlap(n in 1usize..200, a in 0.0f64..0.6, b in 0.0f64..0.2, seed in 0u64..1000) {
        let c = 1.0 - a - b;
        let s = split_classes(n, (a, b, c), seed).unwrap();
        let mut seen = BTreeSet::new();
        for (_, ids) in s.parts() {
            for &id in ids {
                prop_assert!(id < n && seen.insert(id));
            }
        }
        prop_assert_eq!(SplitSpec::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn episodes_are_disjoint_and_full(
        classes in 2usize..10, per in 2usize..12, seed in 0u64..1000,
        n_frac in 0.0f64..1.0, k_frac in 0.0f64..1.0,
    ) {
        let n = 1 + ((classes - 1) as f64 * n_frac) as usize;
        let k = 1 + ((per - 2) as f64 * k_frac) as usize;
        let m = per - k;
        let pool = ClassPool::new((0..classes).map(|c| c * 3).collect(), vec![(0..per).collect(); classes]).unwrap();
        let ep = sample_episode(&pool, &mut rng::stream(seed, "test.episode"), n, k, m).unwrap();
        prop_assert_eq!(ep.classes.iter().collect::<BTreeSet<_>>().len(), n);
        for slot in 0..n {
            prop_assert!(ep.classes[slot].is_multiple_of(3));
            prop_assert_eq!(ep.support[slot].len(), k);
            prop_assert_eq!(ep.query[slot].len(), m);
            let mut ids: BTreeSet<usize> = ep.support[slot].iter().copied().collect();
            for q in &ep.query[slot] {
                prop_assert!(ids.insert(*q), "query {} reused", q);
            }
            prop_assert_eq!(ids.len(), k + m);
        }
    }
}
