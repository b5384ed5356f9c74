use nalgebra::{DMatrix, DVector};
use thermodiff::data::{synth_generate, SynthMode, SynthSceneSpec};
use thermodiff::metrics::*;
use thermodiff::{Error, Rng, Tensor};

fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, rng)
}

#[test]
fn psnr_matches_scalar_loop() {
    let mut rng = Rng::new(1);
    let a = uniform(&[3, 17, 23], &mut rng);
    let b = uniform(&[3, 17, 23], &mut rng);
    let mut sum = 0.0f64;
    for i in 0..a.numel() {
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        sum += d * d;
    }
    let want = 10.0 * (1.0 / (sum / a.numel() as f64)).log10();
    let got = psnr(&a, &b, 1.0).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert_eq!(got, psnr(&b, &a, 1.0).unwrap());
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::full(&[1, 8, 8], 0.25);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
    assert!(matches!(psnr(&a, &Tensor::zeros(&[1, 8, 9]), 1.0), Err(Error::Shape { .. })));
}

/// Direct 2-D window SSIM with explicit weights and no separability.
fn ssim_direct(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let (n, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            win[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut channels = 0.0;
    for c in 0..a.shape()[0] {
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(c * h + y) * w + x] as f64;
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        ma += win[y * n + x] * px(a, y0 + y, x0 + x);
                        mb += win[y * n + x] * px(b, y0 + y, x0 + x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let da = px(a, y0 + y, x0 + x) - ma;
                        let db = px(b, y0 + y, x0 + x) - mb;
                        va += win[y * n + x] * da * da;
                        vb += win[y * n + x] * db * db;
                        cov += win[y * n + x] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        channels += total / count as f64;
    }
    channels / a.shape()[0] as f64
}

#[test]
fn ssim_matches_direct_window() {
    let mut rng = Rng::new(2);
    let a = uniform(&[2, 19, 16], &mut rng);
    let b = a.zip_map(&uniform(&[2, 19, 16], &mut rng), |x, n| 0.7 * x + 0.3 * n).unwrap();
    let p = SsimParams::default();
    let got = ssim(&a, &b, &p).unwrap();
    let want = ssim_direct(&a, &b);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((got - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&got));
}

#[test]
fn ssim_closed_forms() {
    let p = SsimParams::default();
    let mut rng = Rng::new(3);
    let a = uniform(&[1, 16, 16], &mut rng);
    assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-6);
    let zero = Tensor::zeros(&[1, 16, 16]);
    let one = Tensor::ones(&[1, 16, 16]);
    let c1 = 1e-4;
    assert!((ssim(&zero, &one, &p).unwrap() - c1 / (1.0 + c1)).abs() < 1e-6);
}

fn two_pass(features: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = features.len() as f64;
    let d = features[0].len();
    let mu: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    features.iter().map(|f| (f[i] - mu[i]) * (f[j] - mu[j])).sum::<f64>() / (n - 1.0)
                })
                .collect()
        })
        .collect();
    (mu, cov)
}

#[test]
#[allow(clippy::needless_range_loop)]
fn feature_stats_match_two_pass() {
    let mut rng = Rng::new(4);
    let feats: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..6).map(|_| rng.normal() as f64 * 3.0 + 1.0).collect())
        .collect();
    let s = stats_from_features(&feats).unwrap();
    let (mu, cov) = two_pass(&feats);
    for i in 0..6 {
        assert!((s.mu[i] - mu[i]).abs() < 1e-8);
        for j in 0..6 {
            assert!((s.cov[(i, j)] - cov[i][j]).abs() < 1e-8);
        }
    }
    assert_eq!(s.n, 40);
}

#[test]
fn feature_stats_degenerate_cases() {
    let v = vec![1.5, -2.0, 0.25];
    let same = stats_from_features(&[v.clone(), v.clone(), v.clone()]).unwrap();
    assert!(same.cov.iter().all(|&c| c == 0.0));
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let sym = stats_from_features(&[v.clone(), neg]).unwrap();
    assert!(sym.mu.iter().all(|&m| m == 0.0));
    assert!(stats_from_features(&[v]).is_err());

    let img = Tensor::zeros(&[1, 16, 16]);
    let ex = RandomProjection::default();
    let s = feature_stats([("a", &img), ("b", &img)], &ex).unwrap();
    assert!(s.cov.iter().all(|&c| c == 0.0));
}

fn stats(mu: &[f64], cov: DMatrix<f64>) -> FeatureStats {
    FeatureStats {
        mu: DVector::from_column_slice(mu),
        cov,
        n: 100,
    }
}

#[test]
fn frechet_closed_forms() {
    let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
    let s = stats(&[1.0, 2.0, 3.0], c.clone());
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);

    let t = stats(&[1.5, 1.0, 3.0], c);
    assert!((frechet_distance(&s, &t).unwrap() - 1.25).abs() < 1e-6);

    let (a, b) = ([0.5, 2.0, 4.0, 1e-3], [1.0, 0.25, 4.0, 3.0]);
    let da = stats(&[0.0; 4], DMatrix::from_diagonal(&DVector::from_column_slice(&a)));
    let db = stats(&[0.0; 4], DMatrix::from_diagonal(&DVector::from_column_slice(&b)));
    let want: f64 = a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    assert!((frechet_distance(&da, &db).unwrap() - want).abs() < 1e-6);
}

#[test]
fn frechet_non_commuting_two_by_two() {
    // For 2×2 PSD A, B the eigenvalues of AB have sum tr(AB) and product
    // det(A)det(B), so Tr √(AB) = √(tr(AB) + 2√(det A det B)).
    let a = DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
    let b = DMatrix::<f64>::from_row_slice(2, 2, &[0.5, -0.3, -0.3, 1.5]);
    let tr_root = ((&a * &b).trace() + 2.0 * (a.determinant() * b.determinant()).sqrt()).sqrt();
    let want = 0.04 + a.trace() + b.trace() - 2.0 * tr_root;
    let got = frechet_distance(&stats(&[0.0, 0.2], a), &stats(&[0.0, 0.0], b)).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn frechet_rejects_bad_inputs() {
    let s = stats(&[0.0, 0.0], DMatrix::identity(2, 2));
    let t = stats(&[0.0; 3], DMatrix::identity(3, 3));
    assert!(matches!(frechet_distance(&s, &t), Err(Error::Shape { .. })));
    let bad = stats(&[0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]));
    assert!(matches!(frechet_distance(&s, &bad), Err(Error::Numeric(_))));
    let tiny = stats(&[0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]));
    assert!(frechet_distance(&s, &tiny).unwrap() >= 0.0);
}

#[test]
fn intensity_spread_cases() {
    let c = Tensor::full(&[1, 8, 8], 0.3);
    let s = intensity_spread([&c, &c]).unwrap();
    assert_eq!((s.std_dev, s.iqr), (0.0, 0.0));
    assert_eq!(s.histogram.iter().sum::<u64>(), 128);

    let noise = Tensor::uniform(&[200_000], -1.0, 1.0, &mut Rng::new(5));
    let s = intensity_spread([&noise]).unwrap();
    assert!((s.std_dev - 1.0 / 3f64.sqrt()).abs() < 0.005, "{}", s.std_dev);
    assert!((s.iqr - 1.0).abs() < 0.01);
    assert_eq!(s.histogram.len(), 256);
    let expected = 200_000.0 / 256.0;
    assert!(s.histogram.iter().all(|&h| (h as f64 - expected).abs() < 0.2 * expected));

    assert!(intensity_spread(std::iter::empty()).is_err());
}

#[test]
fn synthetic_day_spread_exceeds_night() {
    let set = |mode| {
        let spec = SynthSceneSpec {
            image_size: 32,
            mode,
            seed: 12,
            ..Default::default()
        };
        synth_generate(&spec, 100).unwrap().0
    };
    let (day, night) = (set(SynthMode::Day), set(SynthMode::Night));
    let sd = intensity_spread(day.iter().map(|p| &p.target)).unwrap();
    let sn = intensity_spread(night.iter().map(|p| &p.target)).unwrap();
    assert!(sd.std_dev > sn.std_dev && sd.iqr > sn.iqr);
}

#[test]
fn random_projection_is_a_fixed_function() {
    let mut rng = Rng::new(6);
    let img = Tensor::uniform(&[1, 32, 32], -1.0, 1.0, &mut rng);
    let ex = RandomProjection::default();
    let a = ex.extract("x", &img).unwrap();
    assert_eq!(a, ex.extract("y", &img).unwrap());
    assert_eq!(a.len(), 64);
    let other = RandomProjection { seed: 1, ..ex.clone() };
    assert_ne!(a, other.extract("x", &img).unwrap());
    assert!(ex.extract("x", &Tensor::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn feature_file_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    std::fs::write(&path, "a,1.0,2.0\nb,3.0,4.5\n").unwrap();
    let ff = FeatureFile::load(&path).unwrap();
    let img = Tensor::zeros(&[1, 2, 2]);
    assert_eq!(ff.extract("b", &img).unwrap(), vec![3.0, 4.5]);
    assert!(ff.extract("c", &img).is_err());
    std::fs::write(&path, "a,1.0\nb,3.0,4.5\n").unwrap();
    assert!(FeatureFile::load(&path).is_err());
}

#[test]
fn report_and_grid_rendering() {
    let mut rng = Rng::new(7);
    let gen: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[1, 16, 16], -1.0, 1.0, &mut rng)).collect();
    let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
    let r = evaluate_images(&ids, &gen, &gen, &RandomProjection::default()).unwrap();
    assert_eq!(r.psnr_mean, 99.0);
    assert!((r.ssim_mean - 1.0).abs() < 1e-6);
    assert!(r.fid.unwrap().abs() < 1e-6);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    assert!(r.to_text().contains("img3"));

    let grid = MetricsGrid {
        title: "t".into(),
        row_header: "train".into(),
        col_header: "test".into(),
        rows: vec!["day".into(), "night".into()],
        cols: vec!["day".into(), "night".into(), "mixed".into()],
        cells: vec![vec![r.summary(); 3]; 2],
        extractor: r.extractor.clone(),
    };
    let text = grid.to_text();
    assert!(text.contains("test: mixed") && text.lines().any(|l| l.starts_with("night")));
    assert_eq!(grid.cell("night", "mixed"), Some(&r.summary()));
}
