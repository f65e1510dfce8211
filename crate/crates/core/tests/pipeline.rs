use nightflow::checkpoint::Stage;
use nightflow::config::TrainConfig;
use nightflow::synthdata::{self, EventStream, SampleConfig, SceneSample};
use nightflow::trainer::{self, FlowModel, NIGHT};
use nightflow::Error;

fn data(count: usize, seed: u64) -> Vec<SceneSample> {
    let cfg = SampleConfig {
        height: 32,
        width: 32,
        max_displacement: 2.0,
        ..SampleConfig::default()
    };
    synthdata::generate_dataset(seed, count, &cfg).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 1,
        epochs_stage2: 1,
        epochs_stage3: 1,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn stages_chain_and_produce_finite_logs() {
    let train = data(4, 3);
    let cfg = quick();
    let s1 = trainer::stage1(&train, &[], &cfg).unwrap();
    let s2 = trainer::stage2(&train, &train[..1], &s1.checkpoint, &cfg).unwrap();
    let s3 = trainer::stage3(&train, &[], &s2.checkpoint, &cfg).unwrap();
    assert_eq!(s3.checkpoint.stage, Stage::Stage3);
    for log in [&s1.log, &s2.log, &s3.log] {
        assert_eq!(log.rows.len(), 1);
        assert!(log.rows[0].values.iter().all(|v| v.is_finite()));
    }
    assert!(s2.log.rows[0].holdout_epe.is_some());
    assert!(s3.checkpoint.params.all_finite());
    let r = trainer::evaluate_model(&s3.checkpoint.params, FlowModel::Night, &train, &cfg).unwrap();
    assert_eq!(r.sample_count, 4);
}

#[test]
fn stage1_is_deterministic() {
    let train = data(3, 11);
    let a = trainer::stage1(&train, &[], &quick()).unwrap();
    let b = trainer::stage1(&train, &[], &quick()).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
}

#[test]
fn disabled_alignment_terms_stay_zero() {
    let train = data(3, 5);
    let s1 = trainer::stage1(&train, &[], &quick()).unwrap();
    let cfg = TrainConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        ..quick()
    };
    let s2 = trainer::stage2(&train, &[], &s1.checkpoint, &cfg).unwrap();
    for name in ["kl_cost", "intra", "inter"] {
        assert!(s2.log.column(name).unwrap().iter().all(|v| *v == 0.0), "{name}");
    }
    assert!(s2.log.column("pho_day").unwrap()[0] > 0.0);
}

#[test]
fn stage3_without_flow_terms_leaves_night_network_untouched() {
    let train = data(3, 6);
    let cfg = quick();
    let s1 = trainer::stage1(&train, &[], &cfg).unwrap();
    let s2 = trainer::stage2(&train, &[], &s1.checkpoint, &cfg).unwrap();
    let off = TrainConfig {
        lambda6: 0.0,
        lambda7: 0.0,
        stage3_photometric: 0.0,
        ..cfg
    };
    let s3 = trainer::stage3(&train, &[], &s2.checkpoint, &off).unwrap();
    assert_eq!(
        s3.checkpoint.params.fingerprint(NIGHT),
        s2.checkpoint.params.fingerprint(NIGHT)
    );
}

#[test]
fn stage3_rejects_missing_events() {
    let mut train = data(2, 7);
    let cfg = quick();
    let s1 = trainer::stage1(&train, &[], &cfg).unwrap();
    let s2 = trainer::stage2(&train, &[], &s1.checkpoint, &cfg).unwrap();
    for s in &mut train {
        s.events = EventStream::empty(32, 32, cfg.contrast).unwrap();
    }
    assert!(matches!(trainer::stage3(&train, &[], &s2.checkpoint, &cfg), Err(Error::Argument(_))));
}

#[test]
fn stages_refuse_checkpoints_out_of_order() {
    let train = data(2, 8);
    let cfg = quick();
    let s1 = trainer::stage1(&train, &[], &cfg).unwrap();
    assert!(trainer::stage3(&train, &[], &s1.checkpoint, &cfg).is_err());
    assert!(trainer::stage2(&train, &[], &s1.checkpoint, &cfg).is_ok());
    assert!(trainer::run_stage(2, &train, &[], None, &cfg).is_err());
    assert!(trainer::run_stage(4, &train, &[], Some(&s1.checkpoint), &cfg).is_err());
}
