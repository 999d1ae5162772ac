use insgp_core::cls::{ClsAssignment, IntrinsicConfig};
use insgp_core::geo::{Location, MetricMode, SpatialDataset};
use insgp_core::gp::{fit, FitOptions};
use insgp_core::kernels::{matern_correlation, Covariance, KernelKind, LengthScale, MaternParams};
use insgp_core::spd::SpdMatrix;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

/// Smooth CLS field `Σ(x)` with random coefficients.
#[derive(Debug, Clone, Copy)]
struct Field {
    a: [f64; 3],
    b: [f64; 3],
    t: [f64; 2],
}

impl Field {
    fn at(&self, l: &Location) -> SpdMatrix {
        let (x, y) = (l.lon() / 10.0, l.lat() / 10.0);
        let major = (self.a[0] + self.a[1] * x.sin() + self.a[2] * y.cos()).exp();
        let minor = (self.b[0] + self.b[1] * (2.0 * y).sin() + self.b[2] * x.cos()).exp();
        SpdMatrix::from_axes(major.max(minor), major.min(minor), self.t[0] + self.t[1] * x * y).unwrap()
    }
}

fn field() -> impl Strategy<Value = Field> {
    (prop::array::uniform3(-0.5f64..0.5), prop::array::uniform3(-0.5f64..0.5), prop::array::uniform2(-1.0f64..1.0))
        .prop_map(|(a, b, t)| Field {
            a: [a[0] + 1.0, a[1], a[2]],
            b: [b[0] + 0.5, b[1], b[2]],
            t,
        })
}

fn points(n: std::ops::Range<usize>, span: f64) -> impl Strategy<Value = Vec<Location>> {
    prop::collection::vec((0.0..span, 0.0..span), n).prop_map(|v| {
        let mut seen = std::collections::BTreeSet::new();
        v.into_iter()
            .filter(|(a, b)| seen.insert((a.to_bits(), b.to_bits())))
            .map(|(a, b)| Location::new(a, b).unwrap())
            .collect()
    })
}

fn covariance(kind: KernelKind, sigma_f: f64, sigma_n: f64, aniso: &SpdMatrix) -> Covariance {
    let ls = match kind {
        KernelKind::StatIso => LengthScale::Iso(aniso.det().sqrt().sqrt()),
        _ => LengthScale::Aniso(*aniso),
    };
    Covariance::new(kind, MaternParams::new(1.5, sigma_f, sigma_n, ls).unwrap(), MetricMode::Euclidean)
}

fn assignment(kind: KernelKind, locs: &[Location], f: &Field) -> ClsAssignment {
    let per_point: Vec<SpdMatrix> = locs.iter().map(|l| f.at(l)).collect();
    let a = ClsAssignment::from_per_point(per_point, locs, MetricMode::Euclidean).unwrap();
    match kind {
        KernelKind::IntrinsicNonStationary => a
            .with_intrinsic(IntrinsicConfig {
                k_neighbors: 8.min(locs.len()),
                min_survivors: 3.min(locs.len()),
                ..IntrinsicConfig::default()
            })
            .unwrap(),
        _ => a,
    }
}

fn min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(k.clone()).eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gram_is_symmetric_psd(locs in points(50..51, 30.0), f in field(), kind_ix in 0usize..4) {
        let kind = KernelKind::ALL[kind_ix];
        let cls = assignment(kind, &locs, &f);
        let cov = covariance(kind, 1.0, 0.0, &f.at(&locs[0]));
        let k = cov.gram(&locs, &cls).unwrap();
        prop_assert_eq!(&k, &k.transpose());
        prop_assert!(min_eigenvalue(&k) >= -1e-10, "{kind}: {}", min_eigenvalue(&k));
    }

    #[test]
    fn equal_cls_reduces_to_stationary(locs in points(5..30, 20.0), f in field()) {
        let sigma = f.at(&locs[0]);
        let stat = covariance(KernelKind::StatAniso, 1.3, 0.0, &sigma);
        let reference = stat.gram(&locs, &ClsAssignment::stationary()).unwrap();
        let constant = ClsAssignment::constant(sigma, &locs, MetricMode::Euclidean);
        let ns = covariance(KernelKind::NonStationary, 1.3, 0.0, &sigma).gram(&locs, &constant).unwrap();
        let intrinsic = constant.clone().with_intrinsic(IntrinsicConfig {
            k_neighbors: 4.min(locs.len()),
            min_survivors: 2.min(locs.len()),
            ..IntrinsicConfig::default()
        }).unwrap();
        let ins = covariance(KernelKind::IntrinsicNonStationary, 1.3, 0.0, &sigma).gram(&locs, &intrinsic).unwrap();
        prop_assert!((&ns - &reference).abs().max() <= 1e-10);
        prop_assert!((&ins - &reference).abs().max() <= 1e-10);
    }

    #[test]
    fn gp_matches_explicit_inverse(
        locs in points(2..21, 10.0),
        f in field(),
        kind_ix in 0usize..3,
        sigma_f in 0.5f64..2.0,
        sigma_n in 0.1f64..1.0,
        seed in any::<u64>(),
    ) {
        let kind = KernelKind::ALL[kind_ix];
        let n = locs.len();
        let values: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7) % 1000) as f64 / 250.0) - 2.0).collect();
        let train = SpatialDataset::new(locs.clone(), values.clone()).unwrap();
        let cls = assignment(kind, &locs, &f);
        let cov = covariance(kind, sigma_f, sigma_n, &f.at(&locs[0]));
        let gp = fit(&train, &cov, &cls, &FitOptions::default()).unwrap();
        prop_assert_eq!(gp.jitter(), 0.0);

        let sites: Vec<Option<SpdMatrix>> = cls.training_sites(kind, n).unwrap();
        let mut k = DMatrix::from_fn(n, n, |i, j| cov.eval(&locs[i], &sites[i], &locs[j], &sites[j]).unwrap());
        for i in 0..n {
            k[(i, i)] += sigma_n * sigma_n;
        }
        let kinv = k.clone().try_inverse().unwrap();
        let y = DVector::from_vec(values);
        let alpha = &kinv * &y;
        let lml = -0.5 * y.dot(&alpha) - 0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        prop_assert!((gp.log_marginal_likelihood() - lml).abs() <= 1e-8 * lml.abs().max(1.0));

        let queries = vec![Location::new(3.3, 4.4).unwrap(), Location::new(9.1, 0.2).unwrap(), locs[0]];
        let qsites = cls.query_sites(kind, &queries).unwrap();
        let pred = gp.predict_with_sites(&queries, &qsites).unwrap();
        for ((q, qs), p) in queries.iter().zip(&qsites).zip(&pred) {
            let kstar = DVector::from_fn(n, |j, _| cov.eval(q, qs, &locs[j], &sites[j]).unwrap());
            let mean = kstar.dot(&alpha);
            let var = cov.eval(q, qs, q, qs).unwrap() - kstar.dot(&(&kinv * &kstar)) + sigma_n * sigma_n;
            prop_assert!((p.mean - mean).abs() <= 1e-8 * mean.abs().max(1.0));
            prop_assert!((p.variance - var).abs() <= 1e-8 * var.abs().max(1.0));
        }
    }
}

#[test]
fn half_integer_closed_forms() {
    for q in [0.01f64, 0.1, 1.0, 10.0] {
        let r = q.sqrt();
        assert!((matern_correlation(0.5, r) - (-r).exp()).abs() <= 1e-12);
        let r3 = (3.0 * q).sqrt();
        assert!((matern_correlation(1.5, r) - (1.0 + r3) * (-r3).exp()).abs() <= 1e-12);
    }
}
