//! Solver results checked against slow, independent reference computations.

mod common;

use common::*;
use mlgee::data::derive_missingness;
use mlgee::inference::resample;
use mlgee::mr::build_g_from_probs;
use mlgee::propensity::chi_from_probs;
use mlgee::simulate::{generate_dataset, scenario_by_name, CovariateLaw, SizeLaw};
use rand::Rng;

#[test]
fn logistic_matches_direct_maximization() {
    let gap = oracles::logistic_oracle_gap();
    assert!(gap < 1e-6, "{gap}");
}

#[test]
fn rho_matches_bisection() {
    let gap = oracles::rho_oracle_gap();
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn gee_matches_root_finder() {
    let gap = oracles::gee_oracle_gap();
    assert!(gap < 1e-8, "{gap}");
}

#[test]
fn observed_loglik_matches_enumeration() {
    let gap = oracles::loglik_oracle_gap();
    assert!(gap < 1e-12, "{gap}");
}

#[test]
fn mstep_matches_numeric_q_maximization() {
    let gap = oracles::mstep_oracle_gap();
    assert!(gap < 1e-5, "{gap}");
}

#[test]
fn chi_and_g_match_explicit_loops() {
    let mut r = rng(4);
    let ds = random_two_level(&mut r, 12, 4, [1.0, 0.0, 0.5], [0.5, 0.0, 0.5]);
    let ms = derive_missingness(&ds);
    let phi: Vec<Vec<f64>> = (0..2).map(|_| (0..ds.n_units()).map(|_| r.gen_range(0.1..0.9)).collect()).collect();
    let lambda: Vec<Vec<f64>> = (0..3).map(|_| (0..ds.n_groups()).map(|_| r.gen_range(0.1..0.9)).collect()).collect();
    let chi = chi_from_probs(&phi, &lambda, ds.unit_group());
    let mut n = 0.0;
    let mut sums = [[0.0; 3]; 2];
    for i in 0..ds.n_clusters() {
        for &u in ds.cluster_units(i) {
            n += 1.0;
            for k in 0..2 {
                for l in 0..3 {
                    sums[k][l] += phi[k][u] * lambda[l][i];
                }
            }
        }
    }
    for k in 0..2 {
        for l in 0..3 {
            assert!((chi.get(k, l) - sums[k][l] / n).abs() < 1e-15);
        }
    }
    let cv = build_g_from_probs(&phi, &lambda, chi.clone(), ds.unit_group(), &ms);
    let mut row = 0;
    for u in 0..ds.n_units() {
        if ds.outcomes()[u].is_none() {
            continue;
        }
        assert_eq!(cv.units[row], u);
        for k in 0..2 {
            for l in 0..3 {
                let expected = phi[k][u] * lambda[l][ds.unit_cluster()[u]] - sums[k][l] / n;
                assert!((cv.row(row)[k * 3 + l] - expected).abs() < 1e-15);
            }
        }
        row += 1;
    }
    assert_eq!(row, cv.n());
}

#[test]
fn generator_icc_matches_anova() {
    let mut sc = scenario_by_name("null-du15").unwrap();
    sc.m = 5000;
    sc.cluster_size = SizeLaw::Fixed(10);
    let gd = generate_dataset(&sc, 21);
    let ds = &gd.dataset;
    let cov = |name: &str| ds.covariate(name).unwrap();
    let p = &sc.outcome;
    let (hh, edu, wealth, age, wast, stunt) =
        (cov("hh_size"), cov("education"), cov("wealth"), cov("age"), cov("wasting"), cov("stunting"));
    let resid: Vec<f64> = (0..ds.n_units())
        .map(|u| {
            let a = ds.unit_treatment(u) as f64;
            let z = [hh[u], edu[u], wealth[u]];
            let x = [age[u], wast[u], stunt[u]];
            let dot = |b: &[f64], v: &[f64]| b.iter().zip(v).map(|(s, t)| s * t).sum::<f64>();
            let mean = p.beta_i
                + p.beta_a * a
                + dot(&p.beta_z, &z)
                + dot(&p.beta_x, &x)
                + a * (dot(&p.beta_az, &z) + dot(&p.beta_ax, &x));
            gd.full_outcome[u] - mean
        })
        .collect();
    let n = 10.0;
    let m = ds.n_clusters() as f64;
    let grand = resid.iter().sum::<f64>() / resid.len() as f64;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for i in 0..ds.n_clusters() {
        let units = ds.cluster_units(i);
        let mean = units.iter().map(|&u| resid[u]).sum::<f64>() / n;
        ssb += n * (mean - grand).powi(2);
        ssw += units.iter().map(|&u| (resid[u] - mean).powi(2)).sum::<f64>();
    }
    let msb = ssb / (m - 1.0);
    let msw = ssw / (m * (n - 1.0));
    let icc = (msb - msw) / (msb + (n - 1.0) * msw);
    assert!((icc - sc.icc).abs() < 0.01, "icc {icc}");
}

#[test]
fn bootstrap_keeps_about_63_percent_of_clusters() {
    let mut r = rng(2);
    let ds = random_two_level(&mut r, 2000, 2, [2.0, 0.0, 0.0], [2.0, 0.0, 0.0]);
    let mut s = mlgee::rng::stream(5, 0);
    let bs = resample(&ds, &mut s);
    assert_eq!(bs.n_clusters(), 2000);
    let mut origin: Vec<&str> = bs.cluster_ids().iter().map(|c| c.split('#').next().unwrap()).collect();
    origin.sort_unstable();
    origin.dedup();
    let frac = origin.len() as f64 / 2000.0;
    assert!((frac - (1.0 - (-1f64).exp())).abs() < 0.05, "{frac}");
}

#[test]
fn generator_moments_at_large_m() {
    let mut sc = scenario_by_name("null-du15").unwrap();
    sc.m = 40_000;
    let gd = generate_dataset(&sc, 8);
    let ds = &gd.dataset;
    let CovariateLaw::Null(law) = &sc.covariates else { unreachable!() };
    let cluster_mean = |name: &str| {
        let c = ds.covariate(name).unwrap();
        (0..ds.n_clusters()).map(|i| c[ds.cluster_units(i)[0]]).sum::<f64>() / ds.n_clusters() as f64
    };
    let unit_mean = |name: &str| ds.covariate(name).unwrap().iter().sum::<f64>() / ds.n_units() as f64;
    assert!((cluster_mean("hh_size") - 6.0).abs() < 0.05);
    assert!((cluster_mean("education") - law.p_education).abs() < 0.01);
    assert!((cluster_mean("comp_food") - law.p_comp_food).abs() < 0.01);
    assert!((unit_mean("wasting") - law.zscore_means[0]).abs() < 0.02);
    assert!((unit_mean("hemoglobin") - law.hemoglobin[0]).abs() < 0.02);
    assert!((unit_mean("sex") - law.p_male).abs() < 0.01);
    let treated = (0..ds.n_clusters()).filter(|&i| ds.cluster_treatment(i) == 1).count() as f64;
    assert!((treated / ds.n_clusters() as f64 - 0.5).abs() < 0.01);
    let age = ds.covariate("age").unwrap();
    assert!(age.iter().all(|&a| (6.0..=46.0).contains(&a)));
}

#[test]
fn agreement_rises_with_cluster_size() {
    let rate = |name: &str, m: usize| {
        let mut sc = scenario_by_name(name).unwrap();
        sc.m = m;
        let gd = generate_dataset(&sc, 17);
        let ms = derive_missingness(&gd.dataset);
        gd.true_c.iter().zip(&ms.c_obs).filter(|(a, b)| a == b).count() as f64 / gd.true_c.len() as f64
    };
    let (a, b, c) = (rate("null-du15", 30_000), rate("null-n3", 30_000), rate("null-du3050", 3_000));
    assert!(a < b && b < c, "{a} {b} {c}");
    assert_eq!(c, 1.0);
}
