use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::{Builder, ClusteredDataset, Levels};
use crate::propensity::expit;
use crate::rng::{stream, StreamRng};

use super::scenario::{
    AltCovariates, CovariateLaw, NullCovariates, Scenario, SizeLaw, ThreeLevelCovariates, TruncNormal,
};

/// A simulated dataset together with the quantities the analyst never sees.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: ClusteredDataset,
    /// Latent cluster (subcluster) participation per group.
    pub true_c: Vec<u8>,
    /// Outcome of every unit before erasure.
    pub full_outcome: Vec<f64>,
}

pub fn generate_dataset(sc: &Scenario, seed: u64) -> GeneratedData {
    generate_with_rng(sc, &mut stream(seed, 0))
}

pub fn generate_with_rng(sc: &Scenario, rng: &mut StreamRng) -> GeneratedData {
    match &sc.covariates {
        CovariateLaw::Null(law) => generate_null(sc, law, rng),
        CovariateLaw::Alternative(law) => generate_alt(sc, law, rng),
        CovariateLaw::ThreeLevel(law) => generate_three_level(sc, law, rng),
    }
}

fn draw_size<R: Rng>(law: SizeLaw, rng: &mut R) -> usize {
    match law {
        SizeLaw::Fixed(n) => n,
        SizeLaw::DiscreteUniform(lo, hi) => rng.gen_range(lo..=hi),
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn bern<R: Rng>(rng: &mut R, p: f64) -> u8 {
    u8::from(rng.gen::<f64>() < p)
}

fn trunc_normal<R: Rng>(law: &TruncNormal, rng: &mut R) -> f64 {
    loop {
        let v = law.mean + law.sd * normal(rng);
        if (law.lower..=law.upper).contains(&v) {
            return v;
        }
    }
}

/// Three normals with common correlation `corr >= 0`.
fn equicorrelated<R: Rng>(means: [f64; 3], sds: [f64; 3], corr: f64, rng: &mut R) -> [f64; 3] {
    let f = normal(rng);
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = means[k] + sds[k] * (corr.sqrt() * f + (1.0 - corr).sqrt() * normal(rng));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared outcome model `Y = bI + bA*A + bZ.Z + bX.X + A(bAZ.Z + bAX.X) + delta + eps`.
fn outcome(sc: &Scenario, a: f64, z: &[f64], x: &[f64], delta: f64, eps: f64) -> f64 {
    let p = &sc.outcome;
    p.beta_i
        + p.beta_a * a
        + dot(&p.beta_z, z)
        + dot(&p.beta_x, x)
        + a * (dot(&p.beta_az, z) + dot(&p.beta_ax, x))
        + delta
        + eps
}

struct PendingUnit {
    group: String,
    y: f64,
    r: u8,
    covariates: Vec<f64>,
}

/// Collects one cluster and erases outcomes of nonparticipants.
struct Assembler {
    builder: Builder,
    true_c: Vec<u8>,
    full_outcome: Vec<f64>,
    three_level: bool,
}

impl Assembler {
    fn new(levels: Levels, covariates: &[&str]) -> Self {
        Assembler {
            builder: Builder::new(levels, "A", "Y", covariates.iter().map(|s| s.to_string()).collect()),
            true_c: Vec::new(),
            full_outcome: Vec::new(),
            three_level: levels == Levels::Three,
        }
    }

    /// `groups` lists `(group id, C)` in order; units reference them by id.
    fn push_cluster(&mut self, cluster: usize, a: u8, groups: &[(String, u8)], units: Vec<PendingUnit>) {
        let cid = cluster.to_string();
        for (gid, c) in groups {
            self.true_c.push(*c);
            for (j, u) in units.iter().enumerate().filter(|(_, u)| &u.group == gid) {
                let observed = *c == 1 && u.r == 1;
                self.full_outcome.push(u.y);
                self.builder.push_unchecked(
                    cid.clone(),
                    self.three_level.then(|| gid.clone()),
                    j.to_string(),
                    a,
                    observed.then_some(u.y),
                    &u.covariates,
                );
            }
        }
    }

    fn finish(self) -> GeneratedData {
        GeneratedData {
            dataset: self.builder.finish_unchecked(),
            true_c: self.true_c,
            full_outcome: self.full_outcome,
        }
    }
}

pub const NULL_COVARIATES: [&str; 11] = [
    "hh_size",
    "education",
    "wealth",
    "comp_food",
    "sex",
    "iron",
    "age",
    "wasting",
    "stunting",
    "underweight",
    "hemoglobin",
];

fn generate_null(sc: &Scenario, law: &NullCovariates, rng: &mut StreamRng) -> GeneratedData {
    let sd_delta = sc.sigma_delta2().sqrt();
    let sd_eps = sc.sigma_eps2.sqrt();
    let (g, e) = (&sc.ps.gamma, &sc.ps.eta);
    let iron_logit = (law.iron_prob / (1.0 - law.iron_prob)).ln();
    let mut out = Assembler::new(Levels::Two, &NULL_COVARIATES);
    for i in 0..sc.m {
        let n = draw_size(sc.cluster_size, rng);
        let a = bern(rng, 0.5);
        let af = a as f64;
        let hh = rng.gen_range(law.household_size[0]..=law.household_size[1]) as f64;
        let edu = bern(rng, law.p_education) as f64;
        let wealth = bern(rng, law.p_wealth) as f64;
        let cf = bern(rng, law.p_comp_food) as f64;
        let delta = sd_delta * normal(rng);
        let iron_u = law.iron_cluster_sd * normal(rng);
        let mut units = Vec::with_capacity(n);
        for _ in 0..n {
            let sex = bern(rng, law.p_male) as f64;
            let age = trunc_normal(&law.age, rng);
            let [wast, stunt, under] = equicorrelated(law.zscore_means, law.zscore_sds, law.zscore_corr, rng);
            let hb = law.hemoglobin[0] + law.hemoglobin[1] * normal(rng);
            let iron = bern(rng, expit(iron_logit + iron_u)) as f64;
            let eps = sd_eps * normal(rng);
            let y = outcome(sc, af, &[hh, edu, wealth], &[age, wast, stunt], delta, eps);
            let phi = expit(dot(e, &[1.0, af, cf, wast, stunt, af * wast, af * stunt]));
            let r = bern(rng, phi);
            units.push(PendingUnit {
                group: String::new(),
                y,
                r,
                covariates: vec![hh, edu, wealth, cf, sex, iron, age, wast, stunt, under, hb],
            });
        }
        let lambda = expit(dot(g, &[1.0, af, hh, edu, wealth, af * hh, af * edu, af * wealth]));
        let c = bern(rng, lambda);
        out.push_cluster(i, a, &[(String::new(), c)], units);
    }
    out.finish()
}

pub const ALT_COVARIATES: [&str; 8] = ["X1", "X2", "X3", "X4", "Z1", "Z2", "Z3", "Z4"];

fn generate_alt(sc: &Scenario, law: &AltCovariates, rng: &mut StreamRng) -> GeneratedData {
    let sd_delta = sc.sigma_delta2().sqrt();
    let sd_eps = sc.sigma_eps2.sqrt();
    let (g, e) = (&sc.ps.gamma, &sc.ps.eta);
    let poisson = Poisson::new(law.z3_rate).expect("positive Poisson rate");
    let x4_center = law.x_sds[0] * law.x_sds[0];
    let mut out = Assembler::new(Levels::Two, &ALT_COVARIATES);
    for i in 0..sc.m {
        let n = draw_size(sc.cluster_size, rng);
        let a = bern(rng, 0.5);
        let af = a as f64;
        let z3: f64 = poisson.sample(rng);
        let z4 = law.z4_mean + law.z4_sd * normal(rng);
        let delta = sd_delta * normal(rng);
        let xs: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let [x1, x2, x3] = equicorrelated([0.0; 3], law.x_sds, law.x_corr, rng);
                [x1, x2, x3, x1 * x1 - x4_center]
            })
            .collect();
        let z1 = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let z2 = xs.iter().map(|x| x[1]).sum::<f64>() / n as f64;
        let z = [z1, z2, z3, z4];
        let mut units = Vec::with_capacity(n);
        for x in &xs {
            let eps = sd_eps * normal(rng);
            let y = outcome(sc, af, &z, x, delta, eps);
            let design = [
                1.0,
                af,
                z3,
                x[0],
                x[1],
                x[2],
                x[3],
                af * z3,
                af * x[0],
                af * x[1],
                af * x[2],
                af * x[3],
            ];
            let r = bern(rng, expit(dot(e, &design)));
            units.push(PendingUnit {
                group: String::new(),
                y,
                r,
                covariates: vec![x[0], x[1], x[2], x[3], z1, z2, z3, z4],
            });
        }
        let lambda = expit(dot(g, &[1.0, af, z3, z4, af * z3, af * z4]));
        let c = bern(rng, lambda);
        out.push_cluster(i, a, &[(String::new(), c)], units);
    }
    out.finish()
}

pub const THREE_LEVEL_COVARIATES: [&str; 3] = ["Z", "S", "X"];

fn generate_three_level(sc: &Scenario, law: &ThreeLevelCovariates, rng: &mut StreamRng) -> GeneratedData {
    let sd_delta = sc.sigma_delta2().sqrt();
    let sd_eps = sc.sigma_eps2.sqrt();
    let (g, e) = (&sc.ps.gamma, &sc.ps.eta);
    let mut out = Assembler::new(Levels::Three, &THREE_LEVEL_COVARIATES);
    for i in 0..sc.m {
        let n_sub = draw_size(law.subclusters, rng);
        let a = bern(rng, 0.5);
        let af = a as f64;
        let z = normal(rng);
        let delta = sd_delta * normal(rng);
        let mut groups = Vec::with_capacity(n_sub);
        let mut units = Vec::new();
        for k in 0..n_sub {
            let gid = format!("s{k}");
            let s = bern(rng, law.p_s) as f64;
            for _ in 0..draw_size(sc.cluster_size, rng) {
                let x = normal(rng);
                let eps = sd_eps * normal(rng);
                let y = outcome(sc, af, &[z], &[x], delta, eps);
                let r = bern(rng, expit(dot(e, &[1.0, af, x])));
                units.push(PendingUnit { group: gid.clone(), y, r, covariates: vec![z, s, x] });
            }
            let c = bern(rng, expit(dot(g, &[1.0, af, z, s])));
            groups.push((gid, c));
        }
        out.push_cluster(i, a, &groups, units);
    }
    out.finish()
}
