//! Single-task reference implementations of the three applications, written
//! directly from their definitions. The parallel harness must reproduce them
//! byte for byte.

use faultline::apps::{AppKind, AppSpec};
use faultline::harness::{run, FaultPlan, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BOUND: f64 = 5.12;

fn rng(seed: u64, item: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&item.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"bspstrm1");
    ChaCha8Rng::from_seed(key)
}

fn rastrigin(x: &[f64]) -> f64 {
    let mut s = 10.0 * x.len() as f64;
    for &v in x {
        s += v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos();
    }
    s
}

fn put(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn jacobi(rows: usize, cols: usize, seed: u64, sweeps: u64) -> Vec<u8> {
    let n = rows * cols;
    let b: Vec<f64> = (0..n).map(|i| rng(seed, i as u64, 0).random_range(-1.0..1.0)).collect();
    let mut x = vec![0.0f64; n];
    for _ in 0..sweeps {
        let old = x.clone();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let mut acc = b[i];
                if r > 0 {
                    acc += old[i - cols];
                }
                if r + 1 < rows {
                    acc += old[i + cols];
                }
                if c > 0 {
                    acc += old[i - 1];
                }
                if c + 1 < cols {
                    acc += old[i + 1];
                }
                x[i] = acc / 4.0;
            }
        }
    }
    let mut out = Vec::new();
    x.iter().for_each(|&v| put(&mut out, v));
    out
}

fn swarm(dim: usize, count: usize, seed: u64, steps: u64) -> Vec<u8> {
    let vmax = 0.2 * 2.0 * BOUND;
    let mut pos = Vec::new();
    let mut vel = Vec::new();
    for i in 0..count {
        let mut g = rng(seed, i as u64, 0);
        let p: Vec<f64> = (0..dim).map(|_| g.random_range(-BOUND..BOUND)).collect();
        let v: Vec<f64> = (0..dim).map(|_| g.random_range(-vmax..vmax)).collect();
        pos.push(p);
        vel.push(v);
    }
    let mut pbest = pos.clone();
    let mut pval: Vec<f64> = pos.iter().map(|p| rastrigin(p)).collect();
    let argmin = |vals: &[f64]| {
        let mut best = 0;
        for i in 1..vals.len() {
            if vals[i] < vals[best] {
                best = i;
            }
        }
        best
    };
    let mut gi = argmin(&pval);
    for step in 1..=steps {
        let gbest = pbest[gi].clone();
        for i in 0..count {
            let mut g = rng(seed, i as u64, step);
            for k in 0..dim {
                let r1: f64 = g.random();
                let r2: f64 = g.random();
                let v = 0.7298 * vel[i][k]
                    + 1.49618 * r1 * (pbest[i][k] - pos[i][k])
                    + 1.49618 * r2 * (gbest[k] - pos[i][k]);
                vel[i][k] = v.clamp(-vmax, vmax);
                pos[i][k] = (pos[i][k] + vel[i][k]).clamp(-BOUND, BOUND);
            }
            let f = rastrigin(&pos[i]);
            if f < pval[i] {
                pval[i] = f;
                pbest[i] = pos[i].clone();
            }
        }
        gi = argmin(&pval);
    }
    let mut out = Vec::new();
    put(&mut out, pval[gi]);
    out.extend_from_slice(&(gi as u64).to_le_bytes());
    pbest[gi].iter().for_each(|&v| put(&mut out, v));
    for i in 0..count {
        for v in pos[i].iter().chain(&vel[i]).chain(&pbest[i]) {
            put(&mut out, *v);
        }
        put(&mut out, pval[i]);
    }
    out
}

fn evolution(dim: usize, count: usize, seed: u64, steps: u64) -> Vec<u8> {
    let mut pop: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let mut g = rng(seed, i as u64, 0);
            (0..dim).map(|_| g.random_range(-BOUND..BOUND)).collect()
        })
        .collect();
    let mut fit: Vec<f64> = pop.iter().map(|p| rastrigin(p)).collect();
    for step in 1..=steps {
        let (old_pop, old_fit) = (pop.clone(), fit.clone());
        for i in 0..count {
            let mut g = rng(seed, i as u64, step);
            let mut donors: Vec<usize> = Vec::new();
            while donors.len() < 3 {
                let c = g.random_range(0..count);
                if c != i && !donors.contains(&c) {
                    donors.push(c);
                }
            }
            let (a, b, c) = (donors[0], donors[1], donors[2]);
            let forced = g.random_range(0..dim);
            let mut trial = old_pop[i].clone();
            for k in 0..dim {
                let u: f64 = g.random();
                if u < 0.9 || k == forced {
                    trial[k] = (old_pop[a][k] + 0.5 * (old_pop[b][k] - old_pop[c][k])).clamp(-BOUND, BOUND);
                }
            }
            let f = rastrigin(&trial);
            if f <= old_fit[i] {
                pop[i] = trial;
                fit[i] = f;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..count {
        pop[i].iter().for_each(|&v| put(&mut out, v));
        put(&mut out, fit[i]);
    }
    out
}

fn reference(spec: &AppSpec, steps: u64) -> Vec<u8> {
    let (d, p) = (spec.dimension as usize, spec.population as usize);
    match spec.name {
        AppKind::JacobiSolver => jacobi(d, p, spec.seed, steps),
        AppKind::ParticleSwarm => swarm(d, p, spec.seed, steps),
        AppKind::DifferentialEvolution => evolution(d, p, spec.seed, steps),
    }
}

fn parallel(spec: &AppSpec, workers: u32, steps: u64) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        workers,
        supersteps: steps,
        ..RunConfig::desk(dir.path())
    };
    run(spec, &cfg, &FaultPlan::none()).unwrap().global
}

#[test]
fn jacobi_four_workers_matches_reference() {
    let spec = AppSpec::new(AppKind::JacobiSolver, 12, 9, 21);
    assert_eq!(parallel(&spec, 4, 10), reference(&spec, 10));
}

#[test]
fn all_apps_match_reference_across_worker_counts() {
    for kind in AppKind::ALL {
        for (seed, workers) in [(1u64, 1u32), (2, 3), (3, 4), (4, 7)] {
            let spec = AppSpec::new(kind, 5, 11, seed);
            assert_eq!(parallel(&spec, workers, 6), reference(&spec, 6), "{kind} seed {seed} workers {workers}");
        }
    }
}

#[test]
fn desk_scale_defaults_match_reference() {
    for kind in AppKind::ALL {
        let spec = AppSpec::desk(kind, 2024);
        assert_eq!(parallel(&spec, 4, 20), reference(&spec, 20), "{kind}");
    }
}

#[test]
fn optimizers_make_progress() {
    let spec = AppSpec::desk(AppKind::DifferentialEvolution, 9);
    let start = evolution(16, 50, 9, 0);
    let end = parallel(&spec, 4, 20);
    let best = |bytes: &[u8]| {
        bytes
            .chunks(8 * 17)
            .map(|rec| f64::from_le_bytes(rec[8 * 16..].try_into().unwrap()))
            .fold(f64::INFINITY, f64::min)
    };
    assert!(best(&end) < best(&start));
}
