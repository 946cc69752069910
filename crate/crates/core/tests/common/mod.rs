#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigmaflow::dynamics::{EnsembleState, Integrator};
use sigmaflow::harness::{self, RunConfig};
use sigmaflow::renorm::Counterterms;
use sigmaflow::{dealiased_product, Field, TorusGrid, C64};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_config(name: &str) -> String {
    let path = workspace_root().join("configs").join(format!("{name}.toml"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn random_field(grid: &Arc<TorusGrid>, rng: &mut ChaCha8Rng) -> Field {
    let coeffs = (0..grid.mode_count()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    Field::from_coeffs(grid, coeffs).unwrap()
}

/// `Σ_j f̂(j) ĝ(k-j)` over retained `j` and `k-j`, for every retained `k`.
pub fn brute_force_product(f: &Field, g: &Field) -> Vec<C64> {
    let grid = f.grid();
    grid.modes()
        .iter()
        .map(|k| {
            let mut acc = C64::new(0.0, 0.0);
            for (j, mj) in grid.modes().iter().enumerate() {
                let diff = [k[0] - mj[0], k[1] - mj[1], k[2] - mj[2]];
                if let Some(i) = grid.mode_index(&diff[..grid.dim()]) {
                    acc += f.coeffs()[j] * g.coeffs()[i];
                }
            }
            acc
        })
        .collect()
}

/// Every valid grid with `n ≤ 16`: `(grids checked, worst relative error)`.
pub fn convolution_all_grids() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut grids = 0;
    let mut worst: f64 = 0.0;
    for d in 1..=3 {
        for n in (2..=16).step_by(2) {
            for k in 0..n / 2 {
                let grid = TorusGrid::new(d, n, k, 1.0, 0.0).unwrap();
                let f = random_field(&grid, &mut rng);
                let g = random_field(&grid, &mut rng);
                let fast = dealiased_product(&f, &g).unwrap();
                let slow = brute_force_product(&f, &g);
                let scale = slow.iter().fold(1.0_f64, |m, c| m.max(c.norm()));
                let err = fast.coeffs().iter().zip(&slow).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
                worst = worst.max(err / scale);
                grids += 1;
            }
        }
    }
    (grids, worst)
}

/// Haar-ish orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn rotate(r: &[Vec<f64>], fields: &[Field]) -> Vec<Field> {
    r.iter()
        .map(|row| {
            let mut out = Field::zeros(fields[0].grid());
            for (c, f) in row.iter().zip(fields) {
                out.axpy(*c, f).unwrap();
            }
            out
        })
        .collect()
}

/// `max |drift(RΦ) - R drift(Φ)| / max |drift(Φ)|` over random rotations.
pub fn rotation_equivariance() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = TorusGrid::new(2, 24, 5, 2.0, 1.0).unwrap();
    let n = 5;
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let phi: Vec<Field> = (0..n).map(|_| random_field(&grid, &mut rng).scaled(0.05)).collect();
        let z: Vec<Field> = (0..n).map(|_| random_field(&grid, &mut rng).scaled(0.05)).collect();
        let r = random_rotation(n, &mut rng);
        let state = |p: Vec<Field>, q: Vec<Field>| {
            EnsembleState::from_parts(&grid, p, q, 0.0, 0, Counterterms::for_grid(&grid), Integrator::Direct, 0, 0)
                .unwrap()
        };
        let base = state(phi.clone(), z.clone()).drift_interacting();
        let rotated = state(rotate(&r, &phi), rotate(&r, &z)).drift_interacting();
        let expect = rotate(&r, &base);
        let scale = base.iter().flat_map(|f| f.coeffs()).fold(0.0_f64, |m, c| m.max(c.norm()));
        let err = rotated
            .iter()
            .zip(&expect)
            .flat_map(|(a, b)| a.coeffs().iter().zip(b.coeffs()))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
        worst = worst.max(err / scale);
    }
    worst
}

pub const DETERMINISM_CONFIGS: [&str; 2] = [
    r#"
experiment = "coupling"
seed = 3
[grid]
d = 2
n = 14
K = 3
m = 2.0
lambda = 1.0
[ensemble]
N_values = [2, 4, 8]
M = 8
replicas = 2
[time]
dt = 0.01
steps = 40
record_every = 10
"#,
    r#"
experiment = "ds-check"
seed = 4
[grid]
d = 2
n = 14
K = 3
m = 1.0
lambda = 1.0
[ensemble]
N = 3
[time]
dt = 0.01
steps = 220
burn_in = 20
thinning = 5
batches = 4
[flags]
extrapolate = true
"#,
];

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "metadata.json" && p.file_name().unwrap() != "config.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Runs each determinism config on 1, 4 and 8 workers; true when every
/// artifact is byte-identical.
pub fn worker_determinism(scratch: &Path) -> bool {
    DETERMINISM_CONFIGS.iter().all(|text| {
        let runs: Vec<Vec<(String, Vec<u8>)>> = [1usize, 4, 8]
            .iter()
            .map(|&w| {
                let o = vec![
                    ("workers".to_string(), w.to_string()),
                    ("output_dir".to_string(), format!("\"{}\"", scratch.join(format!("w{w}")).display())),
                ];
                let cfg = RunConfig::from_toml_str(text, &o).unwrap();
                artifacts(&harness::run(&cfg).unwrap().dir)
            })
            .collect();
        !runs[0].is_empty() && runs.windows(2).all(|w| w[0] == w[1])
    })
}

pub const RESUME_CONFIG: &str = r#"
experiment = "dynamics"
seed = 9
[grid]
d = 2
n = 14
K = 3
m = 2.0
lambda = 1.0
[ensemble]
N = 3
[time]
dt = 0.01
steps = 400
record_every = 25
[flags]
checkpoint_every = 100
"#;

/// Uninterrupted run vs a run resumed from its step-200 checkpoint, for
/// both integrators: later records and the final state must coincide.
pub fn resume_identity(scratch: &Path) -> bool {
    ["false", "true"].iter().all(|dpd| {
        let full_dir = scratch.join(format!("full-{dpd}"));
        let o = vec![
            ("dpd".to_string(), dpd.to_string()),
            ("output_dir".to_string(), format!("\"{}\"", full_dir.display())),
        ];
        let full = harness::run(&RunConfig::from_toml_str(RESUME_CONFIG, &o).unwrap()).unwrap().dir;
        let ckpt = full.join("checkpoint-000000000200.bin");
        let o = vec![
            ("dpd".to_string(), dpd.to_string()),
            ("output_dir".to_string(), format!("\"{}\"", scratch.join(format!("resumed-{dpd}")).display())),
            ("resume".to_string(), format!("\"{}\"", ckpt.display())),
        ];
        let resumed = harness::run(&RunConfig::from_toml_str(RESUME_CONFIG, &o).unwrap()).unwrap().dir;
        let later = |dir: &Path| -> Vec<String> {
            std::fs::read_to_string(dir.join("records.csv"))
                .unwrap()
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().unwrap().parse::<u64>().unwrap() > 200)
                .map(String::from)
                .collect()
        };
        let a = later(&full);
        !a.is_empty()
            && a == later(&resumed)
            && std::fs::read(full.join("final.bin")).unwrap() == std::fs::read(resumed.join("final.bin")).unwrap()
    })
}
