use std::f64::consts::PI;

use proptest::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use speech_refine::audio::{log_mel, mel_center_frequencies, mel_filterbank, resample, AudioClip, DspConfig};

/// Frequency of the largest-magnitude FFT bin, plus the bin width.
fn fft_peak(clip: &AudioClip) -> (f64, f64) {
    let n = clip.len();
    let mut buf: Vec<Complex<f64>> = clip.samples().iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (bin, _) = buf[..n / 2]
        .iter()
        .enumerate()
        .map(|(k, c)| (k, c.norm()))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let width = clip.sample_rate() as f64 / n as f64;
    (bin as f64 * width, width)
}

#[test]
fn resampling_keeps_a_440_hz_peak() {
    let src = AudioClip::tone(440.0, 0.5, 1.0, 48_000).unwrap();
    let dst = resample(&src, 16_000).unwrap();
    assert_eq!(dst.len(), 16_000);
    let (f_src, w_src) = fft_peak(&src);
    let (f_dst, w_dst) = fft_peak(&dst);
    assert!((f_src - 440.0).abs() <= w_src);
    assert!((f_dst - 440.0).abs() <= w_dst, "peak at {f_dst} Hz");
}

#[test]
fn upsampling_length_law() {
    let clip = AudioClip::tone(200.0, 0.3, 1.0, 8_000).unwrap();
    assert_eq!(resample(&clip, 16_000).unwrap().len(), 16_000);
}

/// Mel-scale centre frequencies computed from scratch.
fn centre_oracle(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let step = (mel(fmax) - mel(fmin)) / (n_mels + 1) as f64;
    (1..=n_mels).map(|k| hz(mel(fmin) + step * k as f64)).collect()
}

#[test]
fn filter_centres_match_oracle() {
    let cfg = DspConfig::default();
    let got = mel_center_frequencies(&cfg);
    let want = centre_oracle(80, 0.0, 8000.0);
    assert_eq!(got.len(), 80);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6, "{g} vs {w}");
    }
    // Each triangle peaks at (or beside) the FFT bin nearest its centre.
    let fb = mel_filterbank(&cfg, cfg.win_size).unwrap();
    let bin_hz = cfg.target_rate as f64 / cfg.win_size as f64;
    for (m, c) in want.iter().enumerate() {
        let row = fb.row(m);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!((argmax as f64 * bin_hz - c).abs() <= bin_hz, "filter {m}");
    }
}

#[test]
fn one_khz_tone_lands_in_its_band() {
    let cfg = DspConfig::default();
    let fb = mel_filterbank(&cfg, cfg.win_size).unwrap();
    let bin = (1000.0 * cfg.win_size as f64 / cfg.target_rate as f64).round() as usize;
    let expected = (0..cfg.n_mels).max_by(|&a, &b| fb[[a, bin]].total_cmp(&fb[[b, bin]])).unwrap();

    let clip = AudioClip::tone(1000.0, 0.5, 1.0, 16_000).unwrap();
    let mel = log_mel(&clip, &cfg).unwrap();
    let v = mel.values();
    let hits = (0..mel.n_frames())
        .filter(|&t| {
            let col = v.column(t);
            (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap() == expected
        })
        .count();
    assert!(hits as f64 >= 0.95 * mel.n_frames() as f64, "{hits}/{}", mel.n_frames());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resampling_preserves_dominant_frequency(
        freq in 100.0f64..3500.0,
        rates in prop::sample::select(vec![(48_000u32, 16_000u32), (16_000, 48_000), (44_100, 16_000), (8_000, 16_000), (22_050, 16_000)]),
    ) {
        let (src_rate, dst_rate) = rates;
        prop_assume!(freq < 0.45 * src_rate.min(dst_rate) as f64);
        let n = src_rate as usize / 2;
        let samples: Vec<f32> = (0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / src_rate as f64).sin()) as f32).collect();
        let src = AudioClip::new(samples, src_rate).unwrap();
        let dst = resample(&src, dst_rate).unwrap();
        let (f_src, w_src) = fft_peak(&src);
        let (f_dst, w_dst) = fft_peak(&dst);
        prop_assert!((f_src - freq).abs() <= w_src);
        prop_assert!((f_dst - f_src).abs() <= w_src.max(w_dst) + 1e-9, "{} vs {}", f_dst, f_src);
    }
}
