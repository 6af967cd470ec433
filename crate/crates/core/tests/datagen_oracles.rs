use mbsl_core::datagen::{generate, GeneratorConfig, ModalitySpec, MultiModalDataset, SignalKind};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Frequency of the strongest non-DC bin, spectra summed over channels.
fn fft_peak(ds: &MultiModalDataset, m: usize, w: usize) -> f64 {
    let len = ds.window_len;
    let fft = FftPlanner::new().plan_fft_forward(len);
    let mut power = vec![0.0; len / 2 + 1];
    for row in ds.window(m, w).chunks(len) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / len as f64;
        let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(f64::from(v) - mean, 0.0)).collect();
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
    }
    let bin = (1..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
    bin as f64 * ds.fs / len as f64
}

/// Least-squares slope over the window, averaged over channels.
fn mean_slope(ds: &MultiModalDataset, m: usize, w: usize) -> f64 {
    let len = ds.window_len;
    let tm = (len - 1) as f64 / 2.0;
    let sxx: f64 = (0..len).map(|t| (t as f64 - tm).powi(2)).sum();
    let rows: Vec<&[f32]> = ds.window(m, w).chunks(len).collect();
    rows.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(t, &v)| (t as f64 - tm) * f64::from(v))
                .sum::<f64>()
                / sxx
        })
        .sum::<f64>()
        / rows.len() as f64
}

fn oracle(ds: &MultiModalDataset, m: usize, w: usize) -> f64 {
    match ds.modalities[m].kind {
        SignalKind::Trend => mean_slope(ds, m, w),
        _ => fft_peak(ds, m, w),
    }
}

#[test]
fn every_modality_recovers_the_latent() {
    for seed in [7, 8, 9] {
        let ds = generate(&GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let z = &ds.latent.as_ref().unwrap().z;
        for m in 0..ds.n_modalities() {
            let est: Vec<f64> = (0..ds.n_windows()).map(|w| oracle(&ds, m, w)).collect();
            let r = pearson(&est, z);
            assert!(r >= 0.8, "seed {seed} modality {} r = {r}", ds.modalities[m].name);
        }
    }
}

#[test]
fn fft_peak_tracks_regression_labels() {
    let mut cfg = GeneratorConfig {
        n_windows: 300,
        window_len: 256,
        ..GeneratorConfig::default()
    };
    cfg.modalities = vec![ModalitySpec::new(
        "ppg",
        1,
        SignalKind::QuasiPeriodic,
        (-1.0, 1.0),
        0.05,
    )];
    let ds = generate(&cfg).unwrap();
    let labels = match ds.labels.as_ref().unwrap() {
        mbsl_core::datagen::Labels::Regression(v) => v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>(),
        other => panic!("expected regression labels, got {other:?}"),
    };
    let peaks: Vec<f64> = (0..ds.n_windows()).map(|w| fft_peak(&ds, 0, w)).collect();
    let r = pearson(&peaks, &labels);
    assert!(r >= 0.9, "r = {r}");
}

#[test]
fn trend_values_stay_inside_range_under_heavy_noise() {
    let mut cfg = GeneratorConfig {
        n_windows: 100,
        ..GeneratorConfig::default()
    };
    cfg.modalities = vec![ModalitySpec::new("spo2", 2, SignalKind::Trend, (70.0, 100.0), 0.5)];
    let ds = generate(&cfg).unwrap();
    assert!(ds.windows[0].iter().all(|&v| (70.0..=100.0).contains(&f64::from(v))));
}
