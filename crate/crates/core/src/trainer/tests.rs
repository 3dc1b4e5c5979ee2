use super::*;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 2,
        patch_size: [16, 16, 16],
        lr: 1e-3,
        base_width: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn samples() -> Vec<TrainSample> {
    let dims = [16, 16, 16];
    let n: usize = dims.iter().product();
    (0..3)
        .map(|k| {
            let mut labels = vec![0u8; n];
            let mut data = vec![0.05f32; n];
            for z in 4..10 {
                for y in 3..9 {
                    for x in (2 + k)..(8 + k) {
                        let i = (z * 16 + y) * 16 + x;
                        labels[i] = 1;
                        data[i] = 0.6;
                    }
                }
            }
            for z in 10..14 {
                for y in 10..14 {
                    for x in 9..13 {
                        let i = (z * 16 + y) * 16 + x;
                        labels[i] = 2;
                        data[i] = 0.9;
                    }
                }
            }
            let annotated: &[usize] = if k == 2 { &[2] } else { &[1] };
            let set = PartialLabelSet::new(annotated, 2).unwrap();
            let labels = LabelMap::new(dims, labels).unwrap().restricted_to(&set);
            TrainSample {
                volume: Volume::new(dims, [1.0; 3], data).unwrap(),
                labels,
                set,
            }
        })
        .collect()
}

#[test]
fn defaults_match_desk_settings() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.patch_size, c.lr), (40, [32, 32, 32], 1e-4));
    assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    assert_eq!(c.ramp().ramp_epochs, 16.0);
    c.validate().unwrap();
}

#[test]
fn validation_rejects_bad_fields() {
    let bad = [
        TrainConfig {
            epochs: 0,
            ..tiny_config()
        },
        TrainConfig {
            patch_size: [16, 24, 16],
            ..tiny_config()
        },
        TrainConfig {
            beta1: 1.0,
            ..tiny_config()
        },
        TrainConfig {
            fixed_threshold: 2.0,
            ..tiny_config()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn config_json_rejects_unknown_keys_and_fills_defaults() {
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "method": "tal", "filter": "none"}"#).unwrap();
    assert_eq!((c.epochs, c.method, c.filter), (3, Method::Tal, FilterStrategy::None));
    assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn csv_rows_line_up_with_header() {
    assert_eq!(csv_header(0), "epoch,L_main,L_aux,L_con,w,theta,retained,total");
    assert_eq!(csv_header(2), "epoch,L_main,L_aux,L_con,w,theta,retained,total,dsc_class_1,dsc_class_2");
    let row = EpochLog {
        epoch: 2,
        l_main: 0.5,
        l_aux: 0.0,
        l_con: 0.25,
        w: 0.1,
        theta: 0.5,
        retained: 3.0,
        total: 1.0,
        dsc: None,
    };
    assert_eq!(row.csv_row(2), "2,0.5,0,0.25,0.1,0.5,3,1,,");
    let with = EpochLog {
        dsc: Some(vec![0.75, 1.0]),
        ..row
    };
    assert_eq!(with.csv_row(2).split(',').count(), 10);
    assert!(with.csv_row(2).ends_with(",0.75,1"));
}

#[test]
fn tal_never_moves_auxiliary_heads() {
    let cfg = TrainConfig {
        method: Method::Tal,
        epochs: 2,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, 2).unwrap();
    let before = t.model().clone();
    let data = samples();
    for _ in 0..2 {
        let row = t.train_epoch(&data).unwrap();
        assert_eq!((row.l_aux, row.l_con, row.w, row.theta, row.retained), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(row.l_main, row.total);
    }
    let mut moved_backbone = false;
    for (i, ((name, a), (_, b))) in t.model().params().iter().zip(before.params()).enumerate() {
        if t.model().is_ath_param(i) {
            assert_eq!(a, b, "{name} changed");
        } else {
            moved_backbone |= a != b;
        }
    }
    assert!(moved_backbone);
    assert_eq!(t.uncertainty().log_vars, before_log_vars(&t));
}

fn before_log_vars(t: &Trainer) -> Tensor<f32> {
    UncertaintyParams::<f32>::new(t.config().weighting, 2).log_vars
}

#[test]
fn tct_epoch_trains_every_head_and_log_var() {
    let mut t = Trainer::new(tiny_config(), 2).unwrap();
    let before = t.model().clone();
    let data = samples();
    let row = t.train_epoch(&data).unwrap();
    assert!([row.l_main, row.l_aux, row.l_con, row.total].iter().all(|v| v.is_finite()));
    assert!(row.l_aux > 0.0 && row.w > 0.0);
    for ((name, a), (_, b)) in t.model().params().iter().zip(before.params()) {
        assert_ne!(a, b, "{name} did not move");
    }
    assert!(t.uncertainty().log_vars.data().iter().all(|&s| s != 0.0));
    assert!(t.uncertainty().weights().iter().all(|&w| w > 0.0));
    assert_eq!(t.adam.t, 2);
}

#[test]
fn zero_ramp_with_fixed_weights_logs_no_consistency() {
    let cfg = TrainConfig {
        w_max: 0.0,
        weighting: Weighting::Fixed,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, 2).unwrap();
    let row = t.train_epoch(&samples()).unwrap();
    assert_eq!(row.w, 0.0);
    assert!(row.l_aux > 0.0);
    // the total is summed in f32, the parts are reported in f64
    assert!((row.total - (row.l_main + row.l_aux)).abs() <= 1e-6 * row.total, "{row:?}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = samples();
    let run = || {
        let mut t = Trainer::new(tiny_config(), 2).unwrap();
        t.train_epoch(&data).unwrap();
        t.train_epoch(&data).unwrap();
        t.checkpoint().encode().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    let data = samples();
    let mut straight = Trainer::new(tiny_config(), 2).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&data).unwrap();
    }
    let mut first = Trainer::new(tiny_config(), 2).unwrap();
    first.train_epoch(&data).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    let ckpt = Checkpoint::decode(&bytes, Path::new("mid.tctc")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.checkpoint().encode().unwrap(), bytes);
    resumed.train_epoch(&data).unwrap();
    resumed.train_epoch(&data).unwrap();
    assert_eq!(resumed.checkpoint().encode().unwrap(), straight.checkpoint().encode().unwrap());
}

#[test]
fn history_keeps_only_the_tail() {
    let mut t = Trainer::new(tiny_config(), 2).unwrap();
    for e in 1..=HISTORY_TAIL + 3 {
        t.push_history(EpochLog {
            epoch: e,
            l_main: 0.0,
            l_aux: 0.0,
            l_con: 0.0,
            w: 0.0,
            theta: 0.0,
            retained: 0.0,
            total: 0.0,
            dsc: None,
        });
    }
    assert_eq!(t.history().len(), HISTORY_TAIL);
    assert_eq!(t.history()[0].epoch, 4);
}
