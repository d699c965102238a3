//! Trajectory-pair data: generation, CSV persistence, and minibatching.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate_flow, lookup_system, Domain, IntegratorConfig, StateVector, SystemDef,
};
use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_dev: f64,
    pub seed_offset: u64,
    /// Also perturb the recorded input state. The output is always the flow
    /// of the unperturbed input plus its own noise.
    #[serde(default)]
    pub perturb_inputs: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec::default()
    }

    pub fn gaussian(std_dev: f64) -> Self {
        NoiseSpec {
            std_dev,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub z1: StateVector,
    pub z2: StateVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<DataPair>,
    pub lag: f64,
    pub system_name: String,
    pub domain: Domain,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Indices into a [`TrainingSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation(
                "training set has no pairs (J = 0)".into(),
            ));
        }
        if !(self.lag > 0.0 && self.lag.is_finite()) {
            return Err(Error::Validation(format!(
                "lag must be positive, got {}",
                self.lag
            )));
        }
        if !(self.noise.std_dev >= 0.0) {
            return Err(Error::Validation("noise std must be >= 0".into()));
        }
        self.domain.validate()?;
        let n = self.dim();
        for (j, p) in self.pairs.iter().enumerate() {
            if p.z1.dim() != n || p.z2.dim() != n {
                return Err(Error::Validation(format!("pair {j} has wrong dimension")));
            }
            if !(p.z1.is_finite() && p.z2.is_finite()) {
                return Err(Error::Validation(format!("pair {j} has non-finite values")));
            }
        }
        Ok(())
    }
}

/// Draw `j` inputs uniformly from `domain` and march each forward by `lag`.
///
/// Sample `i` uses its own random stream, so the result does not depend on
/// the order in which samples are computed.
pub fn generate_pairs(
    system: &SystemDef,
    domain: &Domain,
    j: usize,
    lag: f64,
    noise: NoiseSpec,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<TrainingSet> {
    check_dim(system.dimension, domain.dim())?;
    if j == 0 {
        return Err(Error::Contract("J must be >= 1".into()));
    }
    if !(lag > 0.0) {
        return Err(Error::Contract(format!("lag must be positive, got {lag}")));
    }
    if !(noise.std_dev >= 0.0 && noise.std_dev.is_finite()) {
        return Err(Error::Contract("noise std must be finite and >= 0".into()));
    }
    let normal = Normal::new(0.0, noise.std_dev.max(f64::MIN_POSITIVE)).unwrap();
    let noise_seed = rng::derive_seed(seed, noise.seed_offset.wrapping_add(1));

    let pairs = (0..j)
        .map(|i| {
            let x = domain.sample(&mut rng::stream(seed, i as u64));
            let mut z2 = integrate_flow(system, &x, lag, cfg)
                .map_err(|e| e.context(format!("sample {i}")))?;
            let mut z1 = x;
            if noise.std_dev > 0.0 {
                let mut nrng = rng::stream(noise_seed, i as u64);
                let mut eps = || normal.sample(&mut nrng);
                if noise.perturb_inputs {
                    z1.iter_mut().for_each(|v| *v += eps());
                }
                z2.iter_mut().for_each(|v| *v += eps());
            }
            Ok(DataPair { z1, z2 })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrainingSet {
        pairs,
        lag,
        system_name: system.name.clone(),
        domain: domain.clone(),
        noise,
        seed,
    })
}

/// Metadata written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub system: String,
    pub delta: f64,
    #[serde(rename = "J")]
    pub j: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub domain: Domain,
}

impl DatasetManifest {
    pub fn of(set: &TrainingSet) -> Self {
        DatasetManifest {
            system: set.system_name.clone(),
            delta: set.lag,
            j: set.len(),
            noise: set.noise,
            seed: set.seed,
            domain: set.domain.clone(),
        }
    }
}

/// `data.csv` -> `data.manifest.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn csv_header(n: usize) -> String {
    let cols: Vec<String> = (1..=n)
        .map(|i| format!("x{i}_in"))
        .chain((1..=n).map(|i| format!("x{i}_out")))
        .collect();
    cols.join(",")
}

pub fn training_set_to_csv(set: &TrainingSet) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# system={} delta={} J={} noise={} seed={}",
        set.system_name,
        set.lag,
        set.len(),
        set.noise.std_dev,
        set.seed
    )
    .unwrap();
    writeln!(out, "{}", csv_header(set.dim())).unwrap();
    for p in &set.pairs {
        let row: Vec<String> = p.z1.iter().chain(p.z2.iter()).map(f64::to_string).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Write the CSV and its JSON sidecar.
pub fn save_training_set(set: &TrainingSet, path: &Path) -> Result<()> {
    set.validate()?;
    fs::write(path, training_set_to_csv(set))?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&DatasetManifest::of(set))?,
    )?;
    Ok(())
}

struct Comment {
    system: String,
    delta: f64,
    j: usize,
    noise: f64,
    seed: u64,
}

fn parse_comment(line: &str) -> Result<Comment> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| err("expected metadata comment line".into()))?;
    let (mut system, mut delta, mut j, mut noise, mut seed) = (None, None, None, None, None);
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("malformed metadata entry '{kv}'")))?;
        let bad = |_| err(format!("bad value for {k}: '{v}'"));
        match k {
            "system" => system = Some(v.to_string()),
            "delta" => delta = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "J" => j = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "noise" => noise = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    let missing = |k: &str| err(format!("metadata is missing '{k}'"));
    Ok(Comment {
        system: system.ok_or_else(|| missing("system"))?,
        delta: delta.ok_or_else(|| missing("delta"))?,
        j: j.ok_or_else(|| missing("J"))?,
        noise: noise.ok_or_else(|| missing("noise"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
    })
}

/// Parse the CSV form. The domain is taken from `manifest` when given, then
/// from the builtin system of that name, then from the bounding box of inputs.
pub fn training_set_from_csv(
    text: &str,
    manifest: Option<&DatasetManifest>,
) -> Result<TrainingSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let meta = parse_comment(first)?;
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 2,
        msg: "missing header".into(),
    })?;
    let cols = header.split(',').count();
    if cols == 0 || cols % 2 != 0 || header.trim() != csv_header(cols / 2) {
        return Err(Error::Parse {
            line: hline,
            msg: format!("unexpected header '{header}'"),
        });
    }
    let n = cols / 2;
    let mut pairs = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: ln,
                msg: e.to_string(),
            })?;
        if values.len() != cols {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {cols} columns, found {}", values.len()),
            });
        }
        pairs.push(DataPair {
            z1: values[..n].into(),
            z2: values[n..].into(),
        });
    }
    if pairs.len() != meta.j {
        return Err(Error::Validation(format!(
            "metadata says J={} but file has {} rows",
            meta.j,
            pairs.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Validation(
            "training set has no pairs (J = 0)".into(),
        ));
    }

    let (domain, noise) = match manifest {
        Some(m) => (m.domain.clone(), m.noise),
        None => {
            let domain = match lookup_system(&meta.system) {
                Ok(s) if s.dimension == n => s.default_domain,
                _ => bounding_box(&pairs, n)?,
            };
            (domain, NoiseSpec::gaussian(meta.noise))
        }
    };
    let set = TrainingSet {
        pairs,
        lag: meta.delta,
        system_name: meta.system,
        domain,
        noise,
        seed: meta.seed,
    };
    set.validate()?;
    Ok(set)
}

fn bounding_box(pairs: &[DataPair], n: usize) -> Result<Domain> {
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in pairs {
        for i in 0..n {
            lo[i] = lo[i].min(p.z1[i]);
            hi[i] = hi[i].max(p.z1[i]);
        }
    }
    Domain::new(lo, hi)
}

pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    let text = fs::read_to_string(path)?;
    let sidecar = sidecar_path(path);
    let manifest = if sidecar.exists() {
        Some(serde_json::from_str::<DatasetManifest>(
            &fs::read_to_string(sidecar)?,
        )?)
    } else {
        None
    };
    training_set_from_csv(&text, manifest.as_ref())
}

/// Shuffle `indices` with `seed` and cut into consecutive batches.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, 0));
    order
        .chunks(batch_size.max(1))
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect()
}

/// A permutation of `0..J` split into `ceil(J / batch_size)` batches.
pub fn batches(set: &TrainingSet, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > set.len() {
        return Err(Error::Contract(format!(
            "batch size must be in 1..={}, got {batch_size}",
            set.len()
        )));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(shuffled_batches(&all, batch_size, epoch_seed))
}
