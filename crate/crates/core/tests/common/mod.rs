#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bmm_core::clustering::ModeTree;
use bmm_core::dataset_io::FeatureMatrix;
use bmm_core::domain_gap::{fid, gaussian_stats};
use bmm_core::pipeline::{self, PipelineConfig};
use bmm_core::synth::{generate, PlantedWorld, SubMode, SuperMode, TargetMode};
use bmm_core::Result;

pub fn matrix(d: usize, values: Vec<f32>) -> FeatureMatrix {
    let n = values.len() / d;
    FeatureMatrix::new(
        d,
        values,
        (0..n).map(|i| format!("r{i}")).collect(),
        (0..n).map(|i| format!("ds{}", i % 3)).collect(),
    )
    .unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    matrix(d, (0..n * d).map(|_| rng.random_range(-5.0f32..5.0)).collect())
}

/// `n` rows drawn around `centers` random centres spread over `spread`.
pub fn gaussian_blobs(rng: &mut ChaCha8Rng, centers: usize, n: usize, d: usize, spread: f64) -> FeatureMatrix {
    let c: Vec<Vec<f64>> = (0..centers)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect();
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        for &m in &c[i % centers] {
            let z: f64 = rng.sample(StandardNormal);
            values.push((m + z) as f32);
        }
    }
    matrix(d, values)
}

/// Random symmetric positive-definite `d x d`, row-major.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * a[j * d + k];
            }
            out[i * d + j] = s + if i == j { 0.1 } else { 0.0 };
        }
    }
    out
}

/// Set-union of the members of the given nodes, computed independently of
/// the selection code.
pub fn naive_union(tree: &ModeTree, nodes: &[usize]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &id in nodes {
        for &r in &tree.node(id).members {
            out.insert(r);
        }
    }
    out
}

/// `(FID(full server, target), FID(selected, target))` for one world.
pub fn world_gap(world: &PlantedWorld, leaves: usize, clusters: usize, seed: u64) -> Result<(f64, f64)> {
    let (server, target, _) = generate(world)?;
    let cfg = PipelineConfig {
        leaves,
        target_clusters: clusters,
        seed,
        ..PipelineConfig::default()
    };
    let tree = pipeline::build_server(&server, leaves, seed, cfg.linkage)?;
    let outcome = pipeline::run_match(&tree, &target, &cfg)?;
    let target_stats = gaussian_stats(&target, &(0..target.n()).collect::<Vec<_>>())?;
    let full = fid(&gaussian_stats(&server, &(0..server.n()).collect::<Vec<_>>())?, &target_stats)?;
    let selected = fid(&gaussian_stats(&server, &outcome.selection.sample_rows)?, &target_stats)?;
    Ok((full, selected))
}

fn axis(d: usize, i: usize, v: f64) -> Vec<f64> {
    let mut x = vec![0.0; d];
    x[i] = v;
    x
}

/// Targets are whole super modes, so the best server match is an internal
/// node whose size depends on how finely the leaves cut the super mode.
pub fn granularity_probe_world() -> PlantedWorld {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let super_modes = (0..4)
        .map(|s| SuperMode {
            center: axis(d, s, 40.0),
            dataset: Some(format!("set{s}")),
            sub_modes: (0..8)
                .map(|_| SubMode {
                    offset: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    scale: 1.0,
                    n: 80,
                })
                .collect(),
        })
        .collect();
    let targets = (0..2)
        .map(|s| TargetMode {
            super_mode: s,
            sub_mode: None,
            shift: axis(d, 7, 0.2),
            scale_mult: 1.05,
            n: 400,
        })
        .collect();
    PlantedWorld {
        d,
        seed: 6,
        super_modes,
        targets,
    }
}

/// Two target modes drawn around the same server sub mode, shifted apart.
pub fn duplicate_inducing_world() -> PlantedWorld {
    let d = 2;
    let super_modes = (0..3)
        .map(|s| SuperMode {
            center: axis(d, 0, 30.0 * s as f64),
            dataset: None,
            sub_modes: [-3.0, 3.0]
                .iter()
                .map(|&o| SubMode {
                    offset: vec![0.0, o],
                    scale: 0.5,
                    n: 100,
                })
                .collect(),
        })
        .collect();
    let targets = [-0.2, 0.2]
        .iter()
        .map(|&s| TargetMode {
            super_mode: 0,
            sub_mode: Some(0),
            shift: vec![s, 0.0],
            scale_mult: 1.0,
            n: 100,
        })
        .collect();
    PlantedWorld {
        d,
        seed: 7,
        super_modes,
        targets,
    }
}
