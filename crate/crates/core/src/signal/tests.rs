use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn trial_from_fn(n_c: usize, n_t: usize, fs: f64, mut f: impl FnMut(usize, usize) -> f64) -> Trial {
    let x = (0..n_c)
        .flat_map(|c| (0..n_t).map(move |t| (c, t)))
        .map(|(c, t)| f(c, t) as f32)
        .collect();
    Trial::new(x, n_c, n_t, 0, 0, fs).unwrap()
}

fn sine(n_c: usize, seconds: f64, fs: f64, hz: f64) -> Trial {
    let n_t = (seconds * fs) as usize;
    trial_from_fn(n_c, n_t, fs, |_, t| {
        (2.0 * std::f64::consts::PI * hz * t as f64 / fs).sin()
    })
}

/// Amplitude of the `hz` component over the central half of a channel,
/// by projection onto sin/cos (exact for an integer number of periods).
fn amplitude(ch: &[f32], fs: f64, hz: f64) -> f64 {
    let n = ch.len();
    let period = fs / hz;
    let cycles = ((n / 2) as f64 / period).floor();
    let len = (cycles * period).round() as usize;
    let start = (n - len) / 2;
    let (mut s, mut c) = (0.0, 0.0);
    for t in start..start + len {
        let ph = 2.0 * std::f64::consts::PI * hz * t as f64 / fs;
        s += ch[t] as f64 * ph.sin();
        c += ch[t] as f64 * ph.cos();
    }
    2.0 * (s * s + c * c).sqrt() / len as f64
}

#[test]
fn trial_invariants() {
    assert!(Trial::new(vec![0.0; 100], 1, 100, 0, 0, 100.0).is_err());
    assert!(Trial::new(vec![0.0; 100], 2, 50, 0, 0, 100.0).is_err());
    assert!(Trial::new(vec![0.0; 200], 2, 100, 2, 0, 100.0).is_err());
    let t = Trial::new(vec![0.0; 200], 2, 100, 1, 3, 100.0).unwrap();
    assert_eq!(t.one_hot(), [0.0, 1.0]);
}

#[test]
fn bandpass_rejects_dc() {
    let x = trial_from_fn(2, 1000, 250.0, |c, _| 5.0 + c as f64);
    let y = bandpass(&x, 4.0, 40.0).unwrap();
    for c in 0..2 {
        let mean = y.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-3 * (5.0 + c as f64), "mean {mean}");
    }
}

#[test]
fn bandpass_passes_10hz_and_stops_60hz() {
    for fs in [250.0, 500.0, 1000.0] {
        let y = bandpass(&sine(2, 6.0, fs, 10.0), 4.0, 40.0).unwrap();
        assert!(amplitude(y.channel(0), fs, 10.0) >= 0.9, "fs {fs}");
        let y = bandpass(&sine(2, 6.0, fs, 60.0), 4.0, 40.0).unwrap();
        assert!(amplitude(y.channel(0), fs, 60.0) <= 0.01, "fs {fs}");
    }
}

#[test]
fn bandpass_response_meets_band_limits() {
    // The squared magnitude is what forward-backward filtering applies.
    for fs in [250.0, 500.0, 1000.0] {
        let sos = filter::butter_bandpass(BANDPASS_ORDER, 4.0, 40.0, fs).unwrap();
        let db = |f: f64| 20.0 * filter::magnitude(&sos, f, fs).powi(2).log10();
        for f in [0.5, 1.0, 2.0, 60.0, 80.0, fs / 2.0 - 1.0] {
            assert!(db(f) <= -40.0, "fs {fs}: {f} Hz at {} dB", db(f));
        }
        for f in (8..=25).map(f64::from) {
            assert!(db(f) > -1.0, "fs {fs}: {f} Hz at {} dB", db(f));
        }
    }
}

#[test]
fn bandpass_outside_nyquist_is_config_error() {
    let x = sine(2, 2.0, 100.0, 10.0);
    assert!(matches!(
        bandpass(&x, 4.0, 60.0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn bandpass_is_idempotent_in_pass_band() {
    let fs = 250.0;
    let x = trial_from_fn(2, 2500, fs, |_, t| {
        let t = t as f64 / fs;
        (2.0 * std::f64::consts::PI * 10.0 * t).sin()
            + 0.5 * (2.0 * std::f64::consts::PI * 20.0 * t).sin()
    });
    let once = bandpass(&x, 4.0, 40.0).unwrap();
    let twice = bandpass(&once, 4.0, 40.0).unwrap();
    for hz in [10.0, 20.0] {
        let (a, b) = (
            amplitude(once.channel(0), fs, hz),
            amplitude(twice.channel(0), fs, hz),
        );
        assert!((a - b).abs() <= 0.02 * a, "{hz} Hz: {a} vs {b}");
    }
}

#[test]
fn laplacian_common_mode_and_isolated_channel() {
    let x = trial_from_fn(4, 100, 100.0, |_, t| (t as f64).sin());
    let y = laplacian_reference(&x, &ring_neighbors(4, 1)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = trial_from_fn(4, 100, 100.0, |c, _| if c == 0 { 2.5 } else { 0.0 });
    let y = laplacian_reference(&x, &ring_neighbors(4, 2)).unwrap();
    assert!(y.channel(0).iter().all(|&v| v == 2.5));
}

#[test]
fn laplacian_matches_direct_subtraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = trial_from_fn(6, 120, 100.0, |_, _| rng.random_range(-1.0..1.0));
    let neighbors = vec![
        vec![1, 5],
        vec![0, 2, 3],
        vec![4],
        vec![2, 4],
        vec![0, 1, 2, 3],
        vec![3],
    ];
    let y = laplacian_reference(&x, &neighbors).unwrap();
    for (c, ns) in neighbors.iter().enumerate() {
        for t in 0..120 {
            let mut m = 0.0f64;
            for &n in ns {
                m += x.channel(n)[t] as f64;
            }
            let want = (x.channel(c)[t] as f64 - m / ns.len() as f64) as f32;
            assert_eq!(y.channel(c)[t], want);
        }
    }
}

#[test]
fn laplacian_empty_neighbor_set_rejected() {
    let x = trial_from_fn(3, 100, 100.0, |_, _| 0.0);
    let r = laplacian_reference(&x, &[vec![1], vec![], vec![0]]);
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

#[test]
fn segment_baseline_constant_and_length() {
    let fs = 100.0;
    let raw = trial_from_fn(3, 600, fs, |_, _| 7.0);
    let y = segment_baseline(&raw, 1.0, 4.0, 0.5).unwrap();
    assert_eq!(y.n_t(), ((4.0 - 1.0) * fs) as usize);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(segment_baseline(&raw, 1.0, 1.0, 0.5).is_err());
    assert!(segment_baseline(&raw, 3.0, 4.0, 0.5).is_err());
}

#[test]
fn segment_baseline_matches_slice_then_subtract() {
    let fs = 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let raw = trial_from_fn(2, 700, fs, |_, _| rng.random_range(-3.0..3.0));
    let y = segment_baseline(&raw, 2.0, 4.5, 0.5).unwrap();
    for c in 0..2 {
        let ch = raw.channel(c);
        let rest = &ch[..200];
        let mean = rest.iter().map(|&v| v as f64).sum::<f64>() / 200.0;
        let task = &ch[200..650];
        let trimmed = &task[50..400];
        let want: Vec<f32> = trimmed.iter().map(|&v| (v as f64 - mean) as f32).collect();
        assert_eq!(y.channel(c), &want[..]);
    }
}

#[test]
fn downsample_identity_halving_and_non_integer() {
    let x = sine(2, 2.0, 1000.0, 10.0);
    assert_eq!(downsample(&x, 1000.0).unwrap(), x);
    let y = downsample(&x, 500.0).unwrap();
    assert_eq!(y.n_t(), 1000);
    assert_eq!(y.sample_rate(), 500.0);
    assert!(matches!(
        downsample(&x, 300.0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn downsample_keeps_10hz_and_suppresses_aliases() {
    let y = downsample(&sine(2, 4.0, 1000.0, 10.0), 500.0).unwrap();
    let a = amplitude(y.channel(0), 500.0, 10.0);
    assert!((a - 1.0).abs() <= 0.05, "10 Hz amplitude {a}");
    // 300 Hz would fold onto 200 Hz after decimation.
    let y = downsample(&sine(2, 4.0, 1000.0, 300.0), 500.0).unwrap();
    let a = amplitude(y.channel(0), 500.0, 200.0);
    assert!(a <= 0.01, "alias amplitude {a}");
}

#[test]
fn welch_peak_at_10hz() {
    let psd = welch_psd(&sine(2, 4.0, 250.0, 10.0), 250).unwrap();
    let k = (0..psd.frequencies.len())
        .max_by(|&a, &b| psd.power[0][a].total_cmp(&psd.power[0][b]))
        .unwrap();
    assert_eq!(psd.frequencies[k], 10.0);
    assert!(psd.frequencies.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*psd.frequencies.last().unwrap(), 125.0);
}

#[test]
fn welch_zero_and_short_segment() {
    let x = trial_from_fn(2, 256, 128.0, |_, _| 0.0);
    assert!(welch_psd(&x, 128)
        .unwrap()
        .power
        .iter()
        .flatten()
        .all(|&p| p == 0.0));
    assert!(matches!(welch_psd(&x, 7), Err(crate::Error::Config(_))));
    assert!(welch_psd(&x, 257).is_err());
}

#[test]
fn welch_single_segment_matches_direct_periodogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [200usize, 201] {
        let fs = 200.0;
        let x = trial_from_fn(2, n, fs, |_, _| rng.random_range(-1.0..1.0));
        let psd = welch_psd(&x, n).unwrap();
        let w: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let s2: f64 = w.iter().map(|v| v * v).sum();
        for c in 0..2 {
            let ch = x.channel(c);
            for k in 0..=n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..n {
                    let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += w[t] * ch[t] as f64 * ph.cos();
                    im += w[t] * ch[t] as f64 * ph.sin();
                }
                let mut p = (re * re + im * im) / (fs * s2);
                if k != 0 && !(n % 2 == 0 && k == n / 2) {
                    p *= 2.0;
                }
                assert!(
                    (psd.power[c][k] - p).abs() < 1e-6,
                    "n {n} bin {k}: {} vs {p}",
                    psd.power[c][k]
                );
            }
        }
    }
}

fn small_spec(nuisance: Nuisance, trials_per_class: usize, seed: u64) -> CohortSpec {
    CohortSpec {
        num_subjects: 4,
        trials_per_class,
        n_c: 8,
        n_t: 256,
        sample_rate: 128.0,
        nuisance,
        seed,
        ..CohortSpec::default()
    }
}

#[test]
fn cohort_is_deterministic() {
    let spec = small_spec(Nuisance::moderate(), 5, 11);
    let a = generate_cohort(&spec).unwrap();
    let b = generate_cohort(&spec).unwrap();
    assert_eq!(a, b);
    crate::parallel::set_enabled(false);
    let c = generate_cohort(&spec);
    crate::parallel::set_enabled(true);
    assert_eq!(a, c.unwrap());
    assert_ne!(
        a,
        generate_cohort(&CohortSpec { seed: 12, ..spec }).unwrap()
    );
}

#[test]
fn cohort_rejects_single_channel() {
    let spec = CohortSpec {
        n_c: 1,
        ..small_spec(Nuisance::none(), 2, 0)
    };
    assert!(matches!(
        generate_cohort(&spec),
        Err(crate::Error::Config(_))
    ));
}

fn mean_band_power(trials: &[&Trial], chans: &[usize], band: (f64, f64)) -> f64 {
    let mut acc = 0.0;
    for t in trials {
        let psd = welch_psd(t, 128).unwrap();
        acc += chans
            .iter()
            .map(|&c| psd.band_power(c, band.0, band.1))
            .sum::<f64>()
            / chans.len() as f64;
    }
    acc / trials.len() as f64
}

#[test]
fn cohort_class_effect_has_consistent_sign() {
    let spec = small_spec(Nuisance::moderate(), 20, 3);
    let trials = generate_cohort(&spec).unwrap();
    let (left, right) = lateral_groups(spec.n_c);
    for s in 0..spec.num_subjects as u16 {
        let by_class = |k| {
            trials
                .iter()
                .filter(|t| t.subject() == s && t.label() == k)
                .collect::<Vec<_>>()
        };
        let (c0, c1) = (by_class(0), by_class(1));
        let l = mean_band_power(&c1, &left, spec.class_band)
            - mean_band_power(&c0, &left, spec.class_band);
        let r = mean_band_power(&c1, &right, spec.class_band)
            - mean_band_power(&c0, &right, spec.class_band);
        assert!(l > 0.0 && r < 0.0, "subject {s}: left {l}, right {r}");
    }
}

/// Broadband log power of each trial averaged over channels.
fn broadband(t: &Trial) -> f64 {
    let psd = welch_psd(t, 128).unwrap();
    (0..t.n_c())
        .map(|c| psd.band_power(c, 1.0, 60.0).ln())
        .sum::<f64>()
        / t.n_c() as f64
}

#[test]
fn cohort_nuisance_dominates_between_subject_variance() {
    let spec = small_spec(Nuisance::moderate(), 10, 5);
    let trials = generate_cohort(&spec).unwrap();
    let groups: Vec<Vec<f64>> = (0..spec.num_subjects as u16)
        .map(|s| {
            trials
                .iter()
                .filter(|t| t.subject() == s)
                .map(broadband)
                .collect()
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let within = groups.iter().map(|g| var(g)).sum::<f64>() / groups.len() as f64;
    assert!(
        var(&means) > within,
        "between {} within {within}",
        var(&means)
    );
}

#[test]
fn cohort_without_nuisance_converges_across_subjects() {
    let gap = |tpc: usize| {
        let spec = small_spec(Nuisance::none(), tpc, 21);
        let trials = generate_cohort(&spec).unwrap();
        let all: Vec<usize> = (0..spec.n_c).collect();
        let powers: Vec<f64> = (0..spec.num_subjects as u16)
            .map(|s| {
                let ts: Vec<&Trial> = trials.iter().filter(|t| t.subject() == s).collect();
                mean_band_power(&ts, &all, spec.class_band)
            })
            .collect();
        let max = powers.iter().cloned().fold(f64::MIN, f64::max);
        let min = powers.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / max
    };
    let (small, large) = (gap(4), gap(64));
    assert!(
        large < small,
        "gap with 64 trials {large} vs 4 trials {small}"
    );
}

#[test]
fn trialset_round_trip_and_length_check() {
    let trials = generate_cohort(&small_spec(Nuisance::moderate(), 2, 1)).unwrap();
    let mut buf = Vec::new();
    trialset::write_trials(&mut buf, &trials, &trialset::default_class_names()).unwrap();
    let (header, back) = trialset::read_trials(&buf[..]).unwrap();
    assert_eq!(header.n_trials, trials.len());
    assert_eq!(header.subject_ids, vec![0, 1, 2, 3]);
    assert_eq!(back, trials);
    assert!(matches!(
        trialset::read_trials(&buf[..buf.len() - 1]),
        Err(crate::Error::Format(_))
    ));
    let mut longer = buf.clone();
    longer.push(0);
    assert!(trialset::read_trials(&longer[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn preprocessing_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = trial_from_fn(3, 300, 100.0, |_, _| rng.random_range(-1.0..1.0));
        let n = ring_neighbors(3, 1);
        prop_assert_eq!(bandpass(&x, 4.0, 40.0).unwrap(), bandpass(&x, 4.0, 40.0).unwrap());
        prop_assert_eq!(laplacian_reference(&x, &n).unwrap(), laplacian_reference(&x, &n).unwrap());
        prop_assert_eq!(welch_psd(&x, 100).unwrap(), welch_psd(&x, 100).unwrap());
    }

    #[test]
    fn welch_power_nonnegative(seed in any::<u64>(), seg in 8usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = trial_from_fn(2, 200, 100.0, |_, _| rng.random_range(-5.0..5.0));
        let psd = welch_psd(&x, seg).unwrap();
        prop_assert!(psd.power.iter().flatten().all(|&p| p >= 0.0));
    }
}
