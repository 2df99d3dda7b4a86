use ndarray::Array2;
use proptest::prelude::*;

use neuromotor_core::dsp::{butterworth_bandpass, filter_signal, normalize_per_muscle, rms_envelope, FilterSpec};
use neuromotor_core::hmm::{subtask_error, viterbi, CovarianceKind, HmmModel};
use neuromotor_core::ingest::{read_series_csv, write_series_csv};
use neuromotor_core::stats::mann_whitney;
use neuromotor_core::{EmgRecord, SampledSeries};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn series_strategy() -> impl Strategy<Value = SampledSeries> {
    (1usize..40, 1usize..5).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(1e-4f64..0.1, n),
            prop::collection::vec(prop::collection::vec(-1e6f64..1e6, n), c),
        )
            .prop_map(|(gaps, channels)| {
                let ts = gaps
                    .iter()
                    .scan(0.0, |t, g| {
                        *t += g;
                        Some(*t)
                    })
                    .collect();
                let labels = (0..channels.len()).map(|i| format!("c{i}")).collect();
                SampledSeries::new(ts, labels, channels).unwrap()
            })
    })
}

fn labels_of(s: &SampledSeries) -> Vec<&str> {
    s.labels().iter().map(String::as_str).collect()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn csv_round_trip_is_lossless(series in series_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_series_csv(&path, &series).unwrap();
        let back = read_series_csv(&path, &labels_of(&series)).unwrap();
        prop_assert_eq!(back, series);
    }

    #[test]
    fn out_of_order_or_non_finite_rows_are_rejected(
        series in series_strategy().prop_filter("needs two rows", |s| s.len() >= 2),
        pick in any::<prop::sample::Index>(),
        nan in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_series_csv(&path, &series).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let row = 1 + pick.index(lines.len() - 2);
        if nan {
            let mut cells: Vec<&str> = lines[row].split(',').collect();
            cells[1] = "NaN";
            lines[row] = cells.join(",");
        } else {
            lines.swap(row, row + 1);
        }
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        prop_assert!(read_series_csv(&path, &labels_of(&series)).is_err());
    }

    #[test]
    fn bandpass_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 64..256),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        zero_phase in any::<bool>(),
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (i as f64 * 0.3).sin() - v).collect();
        let sections = butterworth_bandpass(&FilterSpec::default()).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = filter_signal(&sections, &x, zero_phase);
        let fy = filter_signal(&sections, &y, zero_phase);
        let fm = filter_signal(&sections, &mix, zero_phase);
        for i in 0..x.len() {
            let expected = a * fx[i] + b * fy[i];
            prop_assert!((fm[i] - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "{} vs {}", fm[i], expected);
        }
    }

    #[test]
    fn rms_envelope_scales_and_stays_non_negative(
        x in prop::collection::vec(-10.0f64..10.0, 1..200),
        c in -5.0f64..5.0,
        window in 1usize..50,
    ) {
        let e = rms_envelope(&x, window);
        let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
        let es = rms_envelope(&scaled, window);
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (p, q) in e.iter().zip(&es) {
            prop_assert!(*p >= 0.0 && *p <= peak + 1e-12);
            prop_assert!((q - c.abs() * p).abs() <= 1e-9 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn normalized_envelopes_lie_in_unit_interval(
        trials in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0f64..5.0, 8), 1..20), 1..4),
    ) {
        let records: Vec<EmgRecord> = trials
            .iter()
            .map(|rows| {
                let ts = (0..rows.len()).map(|i| i as f64 * 1e-3).collect();
                let channels = (0..8).map(|c| rows.iter().map(|r| r[c] + 1e-3).collect()).collect();
                EmgRecord::from_channels(ts, channels).unwrap()
            })
            .collect();
        let (normalized, maxima) = normalize_per_muscle(&records).unwrap();
        prop_assert!(maxima.iter().all(|&m| m > 0.0));
        for (c, _) in maxima.iter().enumerate() {
            let top = normalized.iter().flat_map(|r| r.channel(c).iter().copied()).fold(0.0, f64::max);
            prop_assert!((top - 1.0).abs() < 1e-12);
        }
        prop_assert!(normalized.iter().flat_map(|r| r.channels().iter().flatten()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn subtask_error_is_bounded_and_label_symmetric(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..300),
    ) {
        let (a, v): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let s = subtask_error(&a, &v).unwrap();
        prop_assert!((0.0..=0.5).contains(&s));
        let flipped: Vec<u8> = v.iter().map(|x| 1 - x).collect();
        prop_assert!((subtask_error(&a, &flipped).unwrap() - s).abs() < 1e-12);
        prop_assert!((subtask_error(&v, &a).unwrap() - s).abs() < 1e-12);
        prop_assert_eq!(subtask_error(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mann_whitney_ignores_monotone_transforms(
        a in prop::collection::vec(-5.0f64..5.0, 1..12),
        b in prop::collection::vec(-5.0f64..5.0, 1..12),
    ) {
        let r = mann_whitney(&a, &b).unwrap();
        let f = |v: &f64| v.exp() * 3.0 + 1.0;
        let ta: Vec<f64> = a.iter().map(f).collect();
        let tb: Vec<f64> = b.iter().map(f).collect();
        let t = mann_whitney(&ta, &tb).unwrap();
        prop_assert_eq!(r.u, t.u);
        prop_assert_eq!(r.u_a, t.u_a);
        prop_assert!((r.p_two_sided - t.p_two_sided).abs() < 1e-12);
    }
}

/// Two-sided permutation p-value by relabelling every split of the pooled
/// sample, with U counted pairwise.
fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n1, n) = (a.len(), pooled.len());
    let nn = (a.len() * b.len()) as f64;
    let u_of = |mask: u32| {
        let mut u = 0.0;
        for i in (0..n).filter(|i| mask & (1 << i) != 0) {
            for j in (0..n).filter(|j| mask & (1 << j) == 0) {
                if pooled[i] > pooled[j] {
                    u += 1.0;
                }
            }
        }
        f64::min(u, nn - u)
    };
    let observed = u_of((1u32 << n1) - 1);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == n1 {
            total += 1;
            if u_of(mask) <= observed {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn exact_p_matches_permutation_enumeration(
        values in prop::collection::hash_set(-1000i32..1000, 2..=12),
        split in any::<prop::sample::Index>(),
    ) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let n1 = 1 + split.index(values.len() - 1);
        let (a, b) = values.split_at(n1);
        let r = mann_whitney(a, b).unwrap();
        prop_assert!((r.p_two_sided - permutation_p(a, b)).abs() < 1e-12, "{} vs {}", r.p_two_sided, permutation_p(a, b));
    }
}

fn model_strategy() -> impl Strategy<Value = (HmmModel, Array2<f64>)> {
    (2usize..4, 1usize..4, 2usize..30).prop_flat_map(|(n, d, t)| {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(prop::collection::vec(0.05f64..1.0, n), n),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            prop::collection::vec(prop::collection::vec(0.1f64..2.0, d), n),
            prop::collection::vec(-3.0f64..3.0, t * d),
        )
            .prop_map(move |(pi, a, means, vars, obs)| {
                let norm = |v: Vec<f64>| {
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect::<Vec<_>>()
                };
                let covariances = vars
                    .iter()
                    .map(|v| {
                        let mut c = vec![0.0; d * d];
                        for i in 0..d {
                            c[i * d + i] = v[i];
                        }
                        c
                    })
                    .collect();
                let model = HmmModel {
                    pi: norm(pi),
                    transitions: a.into_iter().map(norm).collect(),
                    means,
                    covariances,
                    covariance: CovarianceKind::Diagonal,
                    seed: 0,
                    log_likelihood_trace: vec![],
                    iterations: 0,
                };
                (model, Array2::from_shape_vec((t, d), obs).unwrap())
            })
    })
}

fn path_log_probability(model: &HmmModel, obs: &Array2<f64>, path: &[u8]) -> f64 {
    let b = model.log_emissions(obs).unwrap();
    let mut lp = model.pi[path[0] as usize].ln() + b[[0, path[0] as usize]];
    for t in 1..path.len() {
        let (r, s) = (path[t - 1] as usize, path[t] as usize);
        lp += model.transitions[r][s].ln() + b[[t, s]];
    }
    lp
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn viterbi_beats_every_alternative_path(
        (model, obs) in model_strategy(),
        alternatives in prop::collection::vec(prop::collection::vec(0u8..4, 30), 20),
    ) {
        let best = viterbi(&model, &obs).unwrap();
        let own = path_log_probability(&model, &obs, &best.states);
        prop_assert!((own - best.log_probability).abs() <= 1e-9 * own.abs().max(1.0));
        let n = model.n_states() as u8;
        for alt in alternatives {
            let path: Vec<u8> = alt[..obs.nrows()].iter().map(|s| s % n).collect();
            prop_assert!(path_log_probability(&model, &obs, &path) <= best.log_probability + 1e-9);
        }
    }
}
