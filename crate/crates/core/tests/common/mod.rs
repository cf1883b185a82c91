//! Seeded generators shared by the integration tests.

#![allow(dead_code)]

use itu_match::bargaining::PublicGoodOption;
use itu_match::{DistanceSpec, Market};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tu(rng: &mut ChaCha8Rng) -> DistanceSpec {
    DistanceSpec::TU {
        phi: rng.random_range(-2.0..2.0),
    }
}

pub fn ltu(rng: &mut ChaCha8Rng) -> DistanceSpec {
    DistanceSpec::LTU {
        lambda: rng.random_range(0.3..2.0),
        zeta: rng.random_range(0.3..2.0),
        phi: rng.random_range(-2.0..2.0),
    }
}

pub fn etu(rng: &mut ChaCha8Rng) -> DistanceSpec {
    DistanceSpec::ETU {
        alpha: rng.random_range(-1.0..1.0),
        gamma: rng.random_range(-1.0..1.0),
        tau: rng.random_range(0.2..3.0),
        budget: rng.random_range(1.0..3.0),
    }
}

pub fn ntu(rng: &mut ChaCha8Rng) -> DistanceSpec {
    DistanceSpec::NTU {
        alpha: rng.random_range(-1.0..1.0),
        gamma: rng.random_range(-1.0..1.0),
    }
}

pub fn tax(rng: &mut ChaCha8Rng) -> DistanceSpec {
    let k = rng.random_range(0..3usize);
    let mut thresholds = Vec::new();
    let mut t = 0.0;
    for _ in 0..k {
        t += rng.random_range(0.2..2.0);
        thresholds.push(t);
    }
    let mut rates = Vec::new();
    let mut r = rng.random_range(0.0..0.3);
    for _ in 0..=k {
        rates.push(r);
        r += rng.random_range(0.05..0.3);
    }
    DistanceSpec::TaxSchedule {
        alpha: rng.random_range(-1.0..1.0),
        gamma: rng.random_range(0.0..3.0),
        thresholds,
        rates,
    }
}

pub fn public_goods(rng: &mut ChaCha8Rng) -> DistanceSpec {
    let k = rng.random_range(1..4usize);
    DistanceSpec::PublicGoods {
        options: (0..k)
            .map(|_| PublicGoodOption {
                alpha: rng.random_range(-1.0..1.0),
                gamma: rng.random_range(-1.0..1.0),
                budget: rng.random_range(1.0..3.0),
            })
            .collect(),
        tau: rng.random_range(0.2..3.0),
    }
}

/// TU, LTU or ETU.
pub fn smooth(rng: &mut ChaCha8Rng) -> DistanceSpec {
    match rng.random_range(0..3) {
        0 => tu(rng),
        1 => ltu(rng),
        _ => etu(rng),
    }
}

/// Smooth leaves plus unions of smooth leaves (no flat frontier pieces).
pub fn solver_mix(rng: &mut ChaCha8Rng) -> DistanceSpec {
    if rng.random_bool(0.25) {
        let k = rng.random_range(2..4);
        DistanceSpec::Union {
            children: (0..k).map(|_| smooth(rng)).collect(),
        }
    } else {
        smooth(rng)
    }
}

/// Any variant, with combinators nested up to `depth`.
pub fn any_spec(rng: &mut ChaCha8Rng, depth: usize) -> DistanceSpec {
    let top = if depth == 0 { 6 } else { 8 };
    match rng.random_range(0..top) {
        0 => tu(rng),
        1 => ntu(rng),
        2 => ltu(rng),
        3 => etu(rng),
        4 => tax(rng),
        5 => public_goods(rng),
        c => {
            let k = rng.random_range(1..4);
            let children = (0..k).map(|_| any_spec(rng, depth - 1)).collect();
            if c == 6 {
                DistanceSpec::Union { children }
            } else {
                DistanceSpec::Intersection { children }
            }
        }
    }
}

pub fn random_market(
    rng: &mut ChaCha8Rng,
    max_dim: usize,
    mut spec: impl FnMut(&mut ChaCha8Rng) -> DistanceSpec,
) -> Market {
    let nx = rng.random_range(1..=max_dim);
    let ny = rng.random_range(1..=max_dim);
    let n: Vec<f64> = (0..nx).map(|_| rng.random_range(0.5..3.0)).collect();
    let m: Vec<f64> = (0..ny).map(|_| rng.random_range(0.5..3.0)).collect();
    let tech: Vec<DistanceSpec> = (0..nx * ny).map(|_| spec(rng)).collect();
    Market::new(n, m, |x, y| tech[x * ny + y].clone())
}
