use sleep_events::codec::Assembly;
use sleep_events::dataset::{build_examples, DatasetConfig, Example};
use sleep_events::model::{init_params, ModelConfig};
use sleep_events::par;
use sleep_events::synth::{generate_record, montage, SynthConfig};
use sleep_events::trainer::{batch_gradient, evaluate, train, LossMode, TrainConfig};

fn small_setup() -> (Vec<Example>, ModelConfig) {
    let (record, _) = generate_record(&SynthConfig::new(4, 30.0 * 30.0, 4)).unwrap();
    let mut ds = DatasetConfig::new(Assembly::SAR, montage(4));
    ds.rate_hz = 10.0;
    let examples = build_examples(&record, &ds).unwrap().examples;
    let model = ModelConfig {
        channels: 4,
        input_len: ds.input_len(),
        segments: 5,
        kernel: 10,
        filters: vec![2, 4, 4],
        pool_width: 3,
        dense_units: 8,
        dropout_rate: 0.5,
        lstm_hidden: 8,
        assembly: Assembly::SAR,
        seed: 0,
    };
    (examples, model)
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// One test function: the sequential switch is process-global.
#[test]
fn parallel_and_sequential_paths_agree() {
    let (examples, model) = small_setup();
    let refs: Vec<&Example> = examples.iter().collect();
    let params = init_params::<f32>(&model, 3).unwrap();
    let seeds: Vec<u64> = (0..refs.len() as u64).collect();

    par::set_sequential(false);
    let (rp, gp) = batch_gradient(&params, &refs, LossMode::Multi, &seeds).unwrap();
    let ep = evaluate(&params, &refs, LossMode::Multi).unwrap();
    par::set_sequential(true);
    let (rs, gs) = batch_gradient(&params, &refs, LossMode::Multi, &seeds).unwrap();
    let es = evaluate(&params, &refs, LossMode::Multi).unwrap();
    par::set_sequential(false);
    assert_eq!(rp, rs);
    assert_eq!(bits(&gp.data), bits(&gs.data));
    assert_eq!(ep, es);

    let cfg = TrainConfig {
        batch_size: 7,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let (a, la) = train(params.clone(), &refs[..20], &refs[20..], &cfg).unwrap();
    par::set_sequential(true);
    let (b, lb) = train(params.clone(), &refs[..20], &refs[20..], &cfg).unwrap();
    par::set_sequential(false);
    assert_eq!(la, lb);
    assert_eq!(bits(&a.data), bits(&b.data));
}

#[test]
fn best_parameters_reproduce_logged_loss() {
    let (examples, model) = small_setup();
    let refs: Vec<&Example> = examples.iter().collect();
    let params = init_params::<f32>(&model, 5).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 6,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let (best, log) = train(params, &refs[..20], &refs[20..], &cfg).unwrap();
    let again = evaluate(&best, &refs[20..], LossMode::Multi).unwrap();
    assert_eq!(again.loss.total, log.best_validation_loss);
    assert_eq!(log.epochs[log.best_epoch - 1].validation.total, log.best_validation_loss);
}

#[test]
fn single_epoch_cap() {
    let (examples, model) = small_setup();
    let refs: Vec<&Example> = examples.iter().collect();
    let params = init_params::<f32>(&model, 1).unwrap();
    for mode in [LossMode::Multi, LossMode::Single] {
        let cfg = TrainConfig {
            max_epochs: 1,
            loss_mode: mode,
            ..TrainConfig::default()
        };
        let (_, log) = train(params.clone(), &refs[..20], &refs[20..], &cfg).unwrap();
        assert_eq!(log.epochs_run, 1);
        assert!(!log.stopped_early);
    }
}

#[test]
fn empty_split_rejected() {
    let (examples, model) = small_setup();
    let refs: Vec<&Example> = examples.iter().collect();
    let params = init_params::<f32>(&model, 1).unwrap();
    assert!(train(params, &refs, &[], &TrainConfig::default()).is_err());
}
