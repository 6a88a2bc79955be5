#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fusekit::distill::{SupervisedExample, ToyLm, ToyLmDims};
use fusekit::dump::DistributionDump;
use fusekit::{DistributionMatrix, SparseRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn fusekit<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_fusekit"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// All regular files in `dir`, by name.
pub fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

pub fn random_row(rng: &mut ChaCha8Rng, v: usize, k: usize) -> SparseRow {
    let mut ids: Vec<u32> = (0..v as u32).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    SparseRow::from_probs(
        ids[..k]
            .iter()
            .zip(&w)
            .map(|(&i, &x)| (i, x / total))
            .collect(),
    )
    .unwrap()
}

/// A dump whose rows survive an f32 round trip unchanged.
pub fn random_dump(
    model_id: &str,
    lens: &[usize],
    v: usize,
    k: usize,
    seed: u64,
) -> DistributionDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrices = lens
        .iter()
        .map(|&n| {
            let rows = (0..n).map(|_| random_row(&mut rng, v, k)).collect();
            DistributionMatrix::new(rows, v, k).unwrap()
        })
        .collect();
    let d = DistributionDump::new(model_id, v, k, matrices).unwrap();
    DistributionDump::decode(&d.encode()).unwrap()
}

pub fn read_corpus(path: &Path) -> Vec<(Vec<u32>, Vec<u32>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let ids = |k: &str| -> Vec<u32> {
                v[k].as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_u64().unwrap() as u32)
                    .collect()
            };
            (ids("pivot"), ids("source"))
        })
        .collect()
}

pub fn write_dataset(path: &Path, data: &[SupervisedExample]) {
    let mut text = String::new();
    for ex in data {
        text.push_str(
            &serde_json::json!({"instruction": ex.instruction, "response": ex.response})
                .to_string(),
        );
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

/// Two synthetic teachers over a shared vocabulary and data sampled from
/// them, half from each.
pub struct FusionScenario {
    pub dims: ToyLmDims,
    pub teacher_a: ToyLm,
    pub teacher_b: ToyLm,
    pub pivot: ToyLm,
    pub train: Vec<SupervisedExample>,
    pub heldout: Vec<SupervisedExample>,
}

fn teacher(dims: ToyLmDims, seed: u64) -> ToyLm {
    let mut m = ToyLm::init(dims, seed);
    for p in m.params_mut() {
        *p *= 2.5;
    }
    m
}

fn sample(rng: &mut ChaCha8Rng, m: &ToyLm, v: usize) -> SupervisedExample {
    let instruction: Vec<u32> = (0..rng.gen_range(1..4))
        .map(|_| rng.gen_range(0..v as u32))
        .collect();
    let mut ctx = *instruction.last().unwrap();
    let mut response = Vec::new();
    for _ in 0..rng.gen_range(4..9) {
        let probs: Vec<f64> = m.log_probs(ctx).iter().map(|lp| lp.exp()).collect();
        let mut u: f64 = rng.gen();
        let mut next = (v - 1) as u32;
        for (i, p) in probs.iter().enumerate() {
            if u < *p {
                next = i as u32;
                break;
            }
            u -= p;
        }
        response.push(next);
        ctx = next;
    }
    SupervisedExample::new(instruction, response).unwrap()
}

pub fn fusion_scenario(n_train: usize, n_heldout: usize, seed: u64) -> FusionScenario {
    let dims = ToyLmDims::new(16, 8, 16).unwrap();
    let teacher_a = teacher(dims, seed ^ 0xA);
    let teacher_b = teacher(dims, seed ^ 0xB);
    let pivot = ToyLm::from_checkpoint(&ToyLm::init(dims, seed).to_checkpoint()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<SupervisedExample> {
        (0..n)
            .map(|i| {
                let t = if i % 2 == 0 { &teacher_a } else { &teacher_b };
                sample(&mut rng, t, dims.vocab)
            })
            .collect()
    };
    let train = draw(n_train);
    let heldout = draw(n_heldout);
    FusionScenario {
        dims,
        teacher_a,
        teacher_b,
        pivot,
        train,
        heldout,
    }
}
