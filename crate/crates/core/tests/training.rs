use istanet::checkpoint;
use istanet::dataset::SkeletonSequence;
use istanet::layers::Module;
use istanet::model::{InputDims, IstaNet, ModelConfig};
use istanet::synth::{generate, SynthConfig};
use istanet::tensor::Tensor;
use istanet::tokenizer::WindowSpec;
use istanet::train::{predict, TrainConfig, TrainError, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(entities: usize) -> Vec<SkeletonSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(entities as u64);
    (0..12)
        .map(|i| {
            let data: Vec<f64> = (0..3 * 8 * 3 * entities)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let t = Tensor::from_vec(&[3, 8, 3, entities], data).unwrap();
            SkeletonSequence::new(t, i % 3, format!("c{i}")).unwrap()
        })
        .collect()
}

fn trainer(entities: usize, er: bool) -> Trainer<f32> {
    let input = InputDims {
        channels: 3,
        frames: 8,
        joints: 3,
        entities,
    };
    let cfg = ModelConfig::small(input, WindowSpec::new(4, 1, entities).unwrap(), 3, 4, 1, 2);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 5,
        lr: 0.05,
        entity_rearrangement: er,
        seed: 11,
        ..TrainConfig::default()
    };
    Trainer::new(IstaNet::new(cfg, 2).unwrap(), tc).unwrap()
}

fn params(t: &Trainer<f32>) -> Vec<f32> {
    let mut out = Vec::new();
    t.model
        .visit_params(&mut |p| out.extend_from_slice(p.tensor.data()));
    out
}

#[test]
fn rearrangement_is_a_no_op_for_one_entity() {
    let clips = corpus(1);
    let mut on = trainer(1, true);
    let mut off = trainer(1, false);
    let data = on.prepare_all(&clips).unwrap();
    let a = on.fit(&data, &data[..4], None).unwrap();
    let b = off.fit(&data, &data[..4], None).unwrap();
    assert_eq!(a, b);
    assert_eq!(params(&on), params(&off));
}

#[test]
fn rearrangement_changes_two_entity_runs() {
    let clips = corpus(2);
    let mut on = trainer(2, true);
    let mut off = trainer(2, false);
    let data = on.prepare_all(&clips).unwrap();
    on.fit(&data, &[], None).unwrap();
    off.fit(&data, &[], None).unwrap();
    assert_ne!(params(&on), params(&off));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let clips = corpus(2);
    let mut straight = trainer(2, true);
    let data = straight.prepare_all(&clips).unwrap();
    let full = straight.fit(&data, &data[..4], None).unwrap();

    let mut first = trainer(2, true);
    first.config.epochs = 1;
    let mut head = first.fit(&data, &data[..4], None).unwrap();
    let mut resumed = checkpoint::load::<f32>(&checkpoint::save(&first).unwrap()).unwrap();
    resumed.config.epochs = 3;
    head.extend(resumed.fit(&data, &data[..4], None).unwrap());
    assert_eq!(head, full);
    assert_eq!(params(&resumed), params(&straight));
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let sc = SynthConfig {
        frames: 8,
        joints: 3,
        ..SynthConfig::default()
    };
    let clips = generate(&sc, 2, 0);
    let input = InputDims {
        channels: 3,
        frames: 8,
        joints: 3,
        entities: 2,
    };
    let cfg = ModelConfig::small(input, WindowSpec::new(4, 1, 2).unwrap(), 4, 4, 1, 2);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(IstaNet::<f32>::new(cfg, 0).unwrap(), tc).unwrap();
    let data = t.prepare_all(&clips).unwrap();
    t.fit(&data, &[], None).unwrap();
    let bytes = checkpoint::save(&t).unwrap();
    let loaded = checkpoint::load::<f32>(&bytes).unwrap();
    let before: Vec<Vec<u32>> = predict(&t.model, &data, 3)
        .unwrap()
        .iter()
        .map(|l| l.iter().map(|v| v.to_bits()).collect())
        .collect();
    let after: Vec<Vec<u32>> = predict(&loaded.model, &data, 3)
        .unwrap()
        .iter()
        .map(|l| l.iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
    assert_eq!(checkpoint::save(&loaded).unwrap(), bytes);
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let clips = corpus(2);
    let mut t = trainer(2, false);
    let data = t.prepare_all(&clips).unwrap();
    t.model.head.bias.tensor.data_mut()[0] = f32::NAN;
    match t.run_epoch(&data, &[]) {
        Err(TrainError::NonFinite {
            epoch,
            batch,
            param_norms,
        }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert_eq!(param_norms.len(), t.model.param_names().len());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn training_lowers_loss() {
    let sc = SynthConfig {
        frames: 8,
        joints: 3,
        ..SynthConfig::default()
    };
    let clips = generate(&sc, 4, 5);
    let input = InputDims {
        channels: 3,
        frames: 8,
        joints: 3,
        entities: 2,
    };
    let cfg = ModelConfig::small(input, WindowSpec::new(4, 1, 2).unwrap(), 4, 8, 1, 2);
    let tc = TrainConfig {
        epochs: 15,
        batch_size: 8,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(IstaNet::<f32>::new(cfg, 0).unwrap(), tc).unwrap();
    let data = t.prepare_all(&clips).unwrap();
    let log = t.fit(&data, &[], None).unwrap();
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}
