mod common;

use std::sync::Arc;

use common::{rng, uniform_point};
use hbshm::model::{softplus, ModelKind};
use hbshm::{Hyperpriors, ModelSpec};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, Normal};

#[test]
fn default_layout_dimensions() {
    let hier = common::hierarchical_spec();
    assert_eq!(hier.dim(), 119);
    assert_eq!(hier.layout().names().len(), 119);
    let indep = common::independent_spec(6);
    assert_eq!(indep.dim(), 9);
    assert_eq!(indep.kind(), ModelKind::Independent { plate: 6 });
    assert_eq!(
        indep.layout().names(),
        ["mu_mu", "sigma_mu", "mu_sigma", "sigma_sigma", "mu_w[6]", "sigma_w[6]", "w[1,6]", "w[2,6]", "gamma[6]"]
    );
    let manifest = hier.layout().manifest();
    assert!(manifest.iter().enumerate().all(|(i, e)| e.index == i));
}

#[test]
fn independent_specs_use_one_plate_each() {
    let d = common::default_dataset();
    let specs =
        hbshm::model::build_independent_specs(&common::strains(&d), &common::default_surrogates(), Hyperpriors::default())
            .unwrap();
    assert_eq!(specs.len(), 6);
    let counts: Vec<usize> = specs.iter().map(|s| s.groups()[0].strains.len()).collect();
    assert_eq!(counts, [20, 20, 20, 20, 20, 2]);
    let dims: usize = specs.iter().map(ModelSpec::dim).sum();
    assert_eq!(dims, 6 * 7 + 102);
}

fn truncated_normal_ln(x: f64, mean: f64, sd: f64) -> f64 {
    let n = Normal::new(mean, sd).unwrap();
    n.ln_pdf(x) - n.sf(0.0).ln()
}

#[test]
fn empty_data_density_is_sum_of_priors() {
    let sur = common::default_surrogates();
    let hp = Hyperpriors::default();
    let spec = ModelSpec::hierarchical(&[vec![], vec![]], &sur[..2], hp).unwrap();
    assert_eq!(spec.dim(), 4 + 2 + 2 + 1);
    let mut r = rng(11);
    for _ in 0..20 {
        let t = uniform_point(spec.dim(), 1.5, &mut r);
        let lp = spec.log_posterior(&t).unwrap().logp;

        let h: Vec<f64> = t[..4].iter().map(|v| v.exp()).collect();
        let mut expect = 0.0;
        for (x, p) in h.iter().zip(hp.as_array()) {
            expect += Gamma::new(p.shape, p.rate).unwrap().ln_pdf(*x);
        }
        let gamma = t[8].exp();
        expect += Gamma::new(hp.gamma.shape, hp.gamma.rate).unwrap().ln_pdf(gamma);
        for g in 0..2 {
            let mu = softplus(t[4 + g]);
            let sig = t[6 + g].exp();
            expect += truncated_normal_ln(mu, h[0], h[1]);
            expect += truncated_normal_ln(sig, h[2], h[3]);
            expect += (1.0 / (1.0 + (-t[4 + g]).exp())).ln() + t[6 + g];
        }
        expect += t[..4].iter().sum::<f64>() + t[8];
        assert!((lp - expect).abs() < 1e-9 * expect.abs().max(1.0), "{lp} vs {expect}");
    }
}

#[test]
fn permuting_observations_within_a_plate() {
    let d = common::default_dataset();
    let sur = common::default_surrogates();
    let mut s = common::strains(&d);
    let spec = ModelSpec::hierarchical(&s, &sur, Hyperpriors::default()).unwrap();
    let mut t = uniform_point(spec.dim(), 1.0, &mut rng(12));
    let base = spec.log_posterior(&t).unwrap().logp;

    s[2].reverse();
    let permuted = ModelSpec::hierarchical(&s, &sur, Hyperpriors::default()).unwrap();
    let lay = spec.layout();
    let (a, n) = (lay.w(2, 0), 20);
    t[a..a + n].reverse();
    let lp = permuted.log_posterior(&t).unwrap().logp;
    assert!((lp - base).abs() < 1e-9 * base.abs());
}

#[test]
fn swapping_identical_plates() {
    let sur = common::default_surrogates();
    let data = vec![vec![90.0, 110.0, 100.0], vec![90.0, 110.0, 100.0], vec![140.0]];
    let shared = vec![Arc::clone(&sur[0]), Arc::clone(&sur[0]), Arc::clone(&sur[2])];
    let spec = ModelSpec::hierarchical(&data, &shared, Hyperpriors::default()).unwrap();
    let lay = spec.layout();
    let t = uniform_point(spec.dim(), 1.0, &mut rng(13));
    let mut swapped = t.clone();
    swapped.swap(lay.mu_w(0), lay.mu_w(1));
    swapped.swap(lay.sigma_w(0), lay.sigma_w(1));
    for i in 0..3 {
        swapped.swap(lay.w(0, i), lay.w(1, i));
    }
    let a = spec.log_posterior(&t).unwrap().logp;
    let b = spec.log_posterior(&swapped).unwrap().logp;
    assert!((a - b).abs() < 1e-9 * a.abs());
}

#[test]
fn non_finite_input_is_rejected() {
    let spec = common::independent_spec(6);
    let mut t = vec![0.0; spec.dim()];
    t[3] = f64::NAN;
    assert!(spec.log_posterior(&t).is_err());
    assert!(spec.log_posterior(&[0.0; 3]).is_err());
}
