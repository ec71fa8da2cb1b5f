use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsemod::datagen::{label, pdf_table, PdfKind, TaskKind};
use sparsemod::lwe::{
    distinguish, gen_lwe_pairs, gen_secret, run_attack_with, verify_secret, AttackConfig, DistinguisherConfig,
    LweSecret, SumOracle,
};
use sparsemod::model::ModelConfig;
use sparsemod::modring::{encode_angle, CirclePoint};
use sparsemod::trainer::{EvalConfig, TrainConfig};
use sparsemod::Modulus;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn q(v: u64) -> Modulus {
    Modulus::new(v).unwrap()
}

#[test]
fn weight_one_support_is_uniform() {
    let n = 16;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut counts = vec![0f64; n];
    let draws = 100_000;
    for _ in 0..draws {
        let s = gen_secret(n, 1, &mut r).unwrap();
        counts[s.s.iter().position(|&b| b == 1).unwrap()] += 1.0;
    }
    let expected = draws as f64 / n as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat}, p = {p}");
}

#[test]
fn pair_labels_are_dot_products() {
    let m = q(257);
    let pdf = pdf_table(PdfKind::InvSqrt, 12, m).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let secret = gen_secret(12, 4, &mut r).unwrap();
    let pairs = gen_lwe_pairs(&secret, 2000, m, &pdf, &mut r).unwrap();
    for p in &pairs {
        // independent recomputation in i128
        let b: i128 = p.a.iter().zip(&secret.s).map(|(&a, &s)| a as i128 * s as i128).sum::<i128>() % 257;
        assert_eq!(p.label as i128, b);
    }

    let mut e1 = vec![0u8; 12];
    e1[0] = 1;
    let e1 = LweSecret::from_bits(e1).unwrap();
    for p in gen_lwe_pairs(&e1, 200, m, &pdf, &mut r).unwrap() {
        assert_eq!(p.label, p.a[0]);
    }

    let ones = LweSecret::from_bits(vec![1; 12]).unwrap();
    for p in gen_lwe_pairs(&ones, 200, m, &pdf, &mut r).unwrap() {
        assert_eq!(p.label, label(&TaskKind::ModAdd, &p.a, m).unwrap());
        assert_eq!(p.label, label(&TaskKind::LweDot { secret: vec![1; 12] }, &p.a, m).unwrap());
    }
}

#[test]
fn exact_oracle_is_recovered_across_the_grid() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for &n in &[4usize, 16, 33, 64] {
        for &modulus in &[257u64, 3329] {
            let m = q(modulus);
            let pdf = pdf_table(PdfKind::Default, n, m).unwrap();
            for h in 1..=8.min(n) {
                for trial in 0..20 {
                    let secret = gen_secret(n, h, &mut r).unwrap();
                    let mut oracle = SumOracle { secret: secret.s.clone(), q: m };
                    let cfg = DistinguisherConfig { seed: trial, ..Default::default() };
                    let c = distinguish(&mut oracle, n, m, &pdf, &cfg).unwrap();
                    assert_eq!(c, secret.s, "n={n} q={modulus} h={h}");
                }
            }
        }
    }
}

#[test]
fn dense_secrets_are_recovered_too() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let m = q(257);
    let pdf = pdf_table(PdfKind::Default, 24, m).unwrap();
    for h in [12, 23, 24] {
        let secret = gen_secret(24, h, &mut r).unwrap();
        let mut oracle = SumOracle { secret: secret.s.clone(), q: m };
        assert_eq!(distinguish(&mut oracle, 24, m, &pdf, &DistinguisherConfig::default()).unwrap(), secret.s);
    }
}

#[test]
fn jittered_oracle_is_still_recovered() {
    let m = q(3329);
    let n = 32;
    let pdf = pdf_table(PdfKind::Default, n, m).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let secret = gen_secret(n, 1 + trial % 8, &mut r).unwrap();
        let mut noise = ChaCha8Rng::seed_from_u64(trial as u64);
        let s = secret.s.clone();
        let mut noisy = |batch: &[&[u64]]| {
            Ok(batch
                .iter()
                .map(|a| {
                    let p = encode_angle(secret.dot(a, m), m).unwrap();
                    let jitter = noise.random_range(-0.05 * std::f64::consts::PI..=0.05 * std::f64::consts::PI);
                    CirclePoint::from_angle(p.angle() + jitter)
                })
                .collect())
        };
        let c = distinguish(&mut noisy, n, m, &pdf, &DistinguisherConfig::default()).unwrap();
        assert_eq!(c, s);
    }
}

#[test]
fn verification_examples() {
    let m = q(257);
    let pdf = pdf_table(PdfKind::Default, 16, m).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let secret = gen_secret(16, 3, &mut r).unwrap();
    let pairs = gen_lwe_pairs(&secret, 64, m, &pdf, &mut r).unwrap();
    assert!(verify_secret(&secret.s, &pairs, m).unwrap());
    for i in 0..16 {
        let mut wrong = secret.s.clone();
        wrong[i] ^= 1;
        assert!(!verify_secret(&wrong, &pairs, m).unwrap());
    }
    assert!(verify_secret(&[1; 16], &[], m).is_err());

    let zero = LweSecret::from_bits(vec![0; 16]).unwrap();
    let zero_pairs = gen_lwe_pairs(&zero, 32, m, &pdf, &mut r).unwrap();
    assert!(verify_secret(&[0; 16], &zero_pairs, m).unwrap());
}

#[test]
fn random_wrong_candidates_are_rejected() {
    // A wrong candidate passes one uniform pair with probability 1/q, so 32
    // pairs bound the false-accept rate by q^-32.
    let m = q(257);
    let n = 16;
    let pdf = pdf_table(PdfKind::Default, n, m).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let secret = gen_secret(n, 4, &mut r).unwrap();
    let pairs = gen_lwe_pairs(&secret, 32, m, &pdf, &mut r).unwrap();
    let mut accepted = 0;
    for _ in 0..100_000 {
        let cand: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        if cand != secret.s && verify_secret(&cand, &pairs, m).unwrap() {
            accepted += 1;
        }
    }
    assert_eq!(accepted, 0);
}

fn oracle_attack_config(n: usize, modulus: u64, h: usize, inits: usize) -> AttackConfig {
    let m = q(modulus);
    AttackConfig {
        hamming: h,
        model: ModelConfig {
            positional: sparsemod::model::Positional::Learned,
            ..ModelConfig::standard(n, m)
        },
        train: TrainConfig::standard(250, 1, 0),
        distinct: 250,
        pdf: PdfKind::InvSqrt,
        inits,
        distinguisher: DistinguisherConfig::default(),
        verify_pairs: 64,
        secret_seed: 9,
        data_seed: 9,
        fresh_secret_per_init: true,
        stop_on_recovery: true,
        eval: EvalConfig::new(10, 1),
    }
}

#[test]
fn injected_oracle_recovers_every_init() {
    let cfg = oracle_attack_config(16, 257, 3, 10);
    let res = run_attack_with(&cfg, |s| SumOracle { secret: s.s.clone(), q: cfg.q() }).unwrap();
    assert_eq!(res.recovered, 10);
    assert_eq!(res.recovery_fraction, 1.0);
    // fresh secrets differ between inits
    assert!(res.inits.iter().any(|r| r.secret != res.inits[0].secret));
    assert!(res.to_json_lines().lines().count() == 11);
}

#[test]
fn fixed_secret_is_shared_across_inits() {
    let mut cfg = oracle_attack_config(16, 257, 3, 4);
    cfg.fresh_secret_per_init = false;
    let res = run_attack_with(&cfg, |s| SumOracle { secret: s.s.clone(), q: cfg.q() }).unwrap();
    assert!(res.inits.iter().all(|r| r.secret == res.inits[0].secret));
}
