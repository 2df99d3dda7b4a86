use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use neuromotor_core::dsp::{butterworth_bandpass, filter_signal, FilterSpec};
use neuromotor_core::hmm::{fit_hmm, observation_matrix, viterbi, HmmOptions};
use neuromotor_core::stats::mann_whitney;
use neuromotor_core::synergy::{nmf, NmfOptions};
use neuromotor_core::synth::{gen_hmm_trial, gen_synergy_matrix, Coupling, HmmTrialSpec};
use neuromotor_core::TaskId;

fn bandpass(c: &mut Criterion) {
    let sections = butterworth_bandpass(&FilterSpec::default()).unwrap();
    let x: Vec<f64> = (0..60_000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    c.bench_function("bandpass_zero_phase_60k", |b| b.iter(|| filter_signal(&sections, black_box(&x), true)));
}

fn factorization(c: &mut Criterion) {
    let planted = gen_synergy_matrix(4, 2000, 20.0, 1).unwrap();
    let opts = NmfOptions::default();
    c.bench_function("nmf_rank4_8x2000", |b| b.iter(|| nmf(black_box(&planted.e), 4, &[7], &opts).unwrap()));
}

fn hidden_markov(c: &mut Criterion) {
    let trial = gen_hmm_trial(&HmmTrialSpec::new(TaskId::XAxis, Coupling::Aligned, 3)).unwrap();
    let (_, obs) = observation_matrix(&trial.envelope, 1);
    let opts = HmmOptions::default();
    c.bench_function("hmm_fit_5000x8", |b| b.iter(|| fit_hmm(black_box(&obs), &opts, 11).unwrap()));
    let model = fit_hmm(&obs, &opts, 11).unwrap();
    c.bench_function("viterbi_5000x8", |b| b.iter(|| viterbi(&model, black_box(&obs)).unwrap()));
}

fn rank_test(c: &mut Criterion) {
    let a: Vec<f64> = (0..10).map(|i| i as f64 * 1.3).collect();
    let b: Vec<f64> = (0..10).map(|i| i as f64 * 1.7 + 0.1).collect();
    c.bench_function("mann_whitney_exact_10x10", |bch| {
        bch.iter_batched(|| (a.clone(), b.clone()), |(x, y)| mann_whitney(&x, &y).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, bandpass, factorization, hidden_markov, rank_test);
criterion_main!(benches);
