use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use emodur::codec::{dedup, expand, UnitSequence};
use emodur::corpus::{generate, GeneratorConfig};
use emodur::embeddings::{ArousalLabel, SpeakerVector, SPEAKER_DIM};
use emodur::numerics::{ParamStore, Tape};
use emodur::predictor::{DurationModel, ModelConfig, Variant};
use emodur::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = UnitSequence::new((0..4096).map(|_| rng.gen_range(0..4)).collect());
    let runs = dedup(&seq);
    c.bench_function("dedup_4096", |b| b.iter(|| dedup(black_box(&seq))));
    c.bench_function("expand_4096", |b| b.iter(|| expand(black_box(&runs))));
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> (Vec<u32>, SpeakerVector) {
    let mut units = Vec::with_capacity(n);
    while units.len() < n {
        let u = rng.gen_range(0..vocab);
        if units.last() != Some(&u) {
            units.push(u);
        }
    }
    let spk = SpeakerVector::new((0..SPEAKER_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    (units, spk)
}

fn predictor(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let label = ArousalLabel::new(3.0).unwrap();
    for hidden in [64, 256] {
        let cfg = ModelConfig {
            hidden,
            ..Default::default()
        };
        let model = DurationModel::new(cfg, Variant::Uncert, 0).unwrap();
        let (units, spk) = inputs(&mut rng, 40, 100);
        c.bench_function(&format!("predict_u40_h{hidden}"), |b| {
            b.iter(|| model.predict(black_box(&units), &spk, label).unwrap())
        });
        c.bench_function(&format!("forward_backward_u40_h{hidden}"), |b| {
            b.iter_batched(
                || model.params().clone(),
                |mut store: ParamStore| {
                    let mut tape = Tape::new();
                    let head = model.forward_on_tape(&mut tape, &store, &units, &spk, label).unwrap();
                    let s = tape.sum(head).unwrap();
                    tape.backward(s, &mut store).unwrap();
                    store
                },
                BatchSize::LargeInput,
            )
        });
    }
}

fn training(c: &mut Criterion) {
    let corpus = generate(&GeneratorConfig {
        n_utterances: 64,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        val_fraction: 0.0,
        model: ModelConfig {
            embed_dim: 32,
            hidden: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_64_utts_h64", |b| b.iter(|| train(&corpus, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, codec, predictor, training);
criterion_main!(benches);
