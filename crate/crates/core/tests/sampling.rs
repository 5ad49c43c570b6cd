//! Statistical checks of the three strategies.

use ausds::attacks::AttackConfig;
use ausds::data::{initial_pool, Label, PoolState};
use ausds::decoder::{margin_of, train_to_plateau, DecoderModel, Example, TrainConfig};
use ausds::encoder::EncoderStack;
use ausds::harness::synthetic::{synthesize, SyntheticSpec};
use ausds::knn::{LatentMapper, MapperConfig};
use ausds::rng::{stream, Stream};
use ausds::sampler::{ausds_select, rm_select, us_select, SamplerConfig};
use ausds::store::EmbeddingStore;
use rand::Rng;

#[test]
fn random_sampling_is_uniform() {
    const POOL: usize = 20;
    let seed = vec![(0, Label::Class(0)), (1, Label::Class(0))];
    let pool = PoolState::from_seed(POOL + 2, seed).unwrap();
    let mut rng = stream(17, Stream::Sampler);
    let mut counts = [0u32; POOL + 2];
    for _ in 0..2000 {
        for id in rm_select(&pool, 5, &mut rng).chosen {
            counts[id as usize] += 1;
        }
    }
    assert_eq!(counts[0] + counts[1], 0);
    let expected = 10_000.0 / POOL as f64;
    let chi2: f64 = counts[2..]
        .iter()
        .map(|&c| (f64::from(c) - expected).powi(2) / expected)
        .sum();
    // 99th percentile of chi-squared with 19 degrees of freedom
    assert!(chi2 < 36.19, "chi2 = {chi2}");
}

#[test]
fn uncertainty_sampling_matches_recomputed_entropies() {
    let mut rng = stream(5, Stream::Synthetic);
    let (n, d, c) = (300usize, 4usize, 3usize);
    let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let store = EmbeddingStore::dense(d, data.clone()).unwrap();
    let stack = EncoderStack::new(&store);
    let model = DecoderModel::random(ausds::decoder::Architecture::Linear, d, c, 5).unwrap();
    let seed: Vec<(u32, Label)> = (0..10).map(|i| (i * 3, Label::Class(0))).collect();
    let pool = PoolState::from_seed(n, seed).unwrap();

    let mut expected: Vec<(f64, u32)> = pool
        .unlabeled()
        .iter()
        .map(|&id| {
            let x: Vec<f64> = data[id as usize * d..(id as usize + 1) * d].iter().map(|&v| f64::from(v)).collect();
            let z = model.logits(&x).unwrap();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let h = -e.iter().map(|v| v / s).map(|p| p * p.ln()).sum::<f64>();
            (h, id)
        })
        .collect();
    expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let r = us_select(&model, &stack, &pool, 25).unwrap();
    let want: Vec<u32> = expected[..25].iter().map(|p| p.1).collect();
    assert_eq!(r.chosen, want);
    assert_eq!(r.scored, n - 10);
}

fn margins(decoder: &DecoderModel, stack: &EncoderStack<'_>, ids: &[u32]) -> f64 {
    let total: f64 = ids
        .iter()
        .map(|&id| margin_of(&decoder.predict_proba(&stack.encode(id).unwrap().values).unwrap()))
        .sum();
    total / ids.len() as f64
}

#[test]
fn adversarial_selections_sit_closer_to_the_boundary() {
    let dataset = synthesize(&SyntheticSpec {
        dim: 2,
        classes: 3,
        per_class: 2000,
        separation: 4.0,
        test_per_class: 0,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let stack = EncoderStack::new(&dataset.train.store);
    let config = SamplerConfig {
        attack: AttackConfig {
            fgv_line_search: true,
            ..AttackConfig::default()
        },
        ..SamplerConfig::default()
    };
    let (mut adv_sum, mut rnd_sum) = (0.0, 0.0);
    for seed in 0..5 {
        let pool = initial_pool(&dataset, 0.005, seed).unwrap();
        let batch: Vec<(u32, Label)> = pool.labeled().to_vec();
        let samples: Vec<_> = batch.iter().map(|(id, _)| stack.encode_rows(*id).unwrap()).collect();
        let examples: Vec<Example<'_>> = samples
            .iter()
            .zip(&batch)
            .map(|(s, (_, l))| Example { rows: &s.rows, targets: l.targets() })
            .collect();
        let train = TrainConfig { seed, ..TrainConfig::default() };
        let mut decoder = DecoderModel::random(train.architecture, 2, 3, seed).unwrap();
        train_to_plateau(&mut decoder, &examples, &train).unwrap();
        let mapper = LatentMapper::build(&stack, pool.unlabeled(), &MapperConfig::default()).unwrap();

        let mut rng = stream(seed, Stream::Sampler);
        let r = ausds_select(&decoder, &stack, &mapper, &batch, &pool, &config, &mut rng).unwrap();
        assert!(!r.degraded);
        let uniform = rm_select(&pool, 32, &mut rng).chosen;
        let (a, u) = (margins(&decoder, &stack, &r.chosen), margins(&decoder, &stack, &uniform));
        assert!(a < u, "seed {seed}: adversarial margin {a} vs uniform {u}");
        adv_sum += a;
        rnd_sum += u;
    }
    assert!(adv_sum < rnd_sum);
}
