use protoseg::data::{generate_dataset, make_splits, sample_episode, GenConfig, Phase};
use protoseg::metrics::{confusion, iou};
use protoseg::model::Network;
use protoseg::train::{run_training, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_thousand_episodes_reduce_loss_and_beat_random_init() {
    let ds = generate_dataset(&GenConfig::default()).unwrap();
    let split = make_splits(16, 1).unwrap();
    let cfg = TrainConfig {
        episodes: 2000,
        seed: 5,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let out = run_training(&ds, &split, &cfg).unwrap();
    assert_eq!(out.trace.len(), 2000);
    let mean = |r: &[protoseg::train::StepRecord]| r.iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
    let (lead, trail) = (mean(&out.trace[..100]), mean(&out.trace[1900..]));
    assert!(trail < lead, "trailing {trail} vs leading {lead}");

    // query = support: the trained model should recover the support mask
    let random = Network::<f32>::new(out.net.config.clone(), cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut trained_iou, mut random_iou) = (0.0, 0.0);
    for _ in 0..30 {
        let mut ep = sample_episode(&ds, &split, Phase::Test, 1, &mut rng).unwrap();
        ep.query_image = ep.supports[0].image.clone();
        ep.query_mask = ep.supports[0].mask.clone();
        for (net, acc) in [(&out.net, &mut trained_iou), (&random, &mut random_iou)] {
            let pred = net.segment_support_guided(&ep).unwrap();
            *acc += iou(&confusion(&pred.mask, &ep.query_mask, None).unwrap()) / 30.0;
        }
    }
    assert!(trained_iou > random_iou, "trained {trained_iou} vs random {random_iou}");
}
