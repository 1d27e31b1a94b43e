use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ImageSet, Target, TargetHandle, TargetProtocol};
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::problem::{argmax, AttackProblem, InputTensor, QueryOracle, StopReason};
use crate::targets::{variance_mask, CountingOracle, MaskedOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    /// The attack aborted; `error` holds the reason.
    Error,
    /// The attack claimed success but the re-check disagreed.
    Inconsistent,
}

/// Outcome of one (image, target, epsilon, attack) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub image_id: String,
    pub original_class: usize,
    pub target_class: usize,
    pub epsilon: f64,
    pub attack: String,
    pub seed: u64,
    pub success: bool,
    pub queries: u64,
    pub final_loss: Option<f64>,
    pub stop: Option<StopReason>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_ms: f64,
}

/// Seed of one run, independent of scheduling order.
pub fn derive_seed(seed: u64, image_id: &str, target: usize, attack: &str, epsilon: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update((target as u64).to_le_bytes());
    h.update((attack.len() as u64).to_le_bytes());
    h.update(attack.as_bytes());
    h.update(epsilon.to_bits().to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn random_target(seed: u64, image_id: &str, original: usize, num_classes: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image_id, usize::MAX, "target", 0.0));
    let k = rng.random_range(0..num_classes - 1);
    if k >= original {
        k + 1
    } else {
        k
    }
}

struct Job<'a> {
    image_id: &'a str,
    image: &'a InputTensor,
    mask: Option<&'a [usize]>,
    original: usize,
    target: usize,
    epsilon: f64,
    attack: &'a AttackConfig,
}

fn run_job(handle: &Result<TargetHandle<'_>>, job: &Job<'_>, max_queries: u64, global_seed: u64) -> AttackRecord {
    let seed = derive_seed(global_seed, job.image_id, job.target, job.attack.name(), job.epsilon);
    let mut record = AttackRecord {
        image_id: job.image_id.to_string(),
        original_class: job.original,
        target_class: job.target,
        epsilon: job.epsilon,
        attack: job.attack.name().to_string(),
        seed,
        success: false,
        queries: 0,
        final_loss: None,
        stop: None,
        status: RecordStatus::Ok,
        error: None,
        wall_time_ms: 0.0,
    };
    let classifier = match handle {
        Ok(h) => h.classifier(),
        Err(e) => {
            record.status = RecordStatus::Error;
            record.error = Some(format!("cannot reach target: {e}"));
            return record;
        }
    };
    let start = Instant::now();
    let mut problem = AttackProblem::new(job.image.clone(), job.target, job.epsilon, max_queries);
    let counting = CountingOracle::new(classifier);
    let mut oracle: Box<dyn QueryOracle + '_> = match job.mask {
        Some(mask) => {
            problem = problem.with_support(mask.to_vec());
            match MaskedOracle::new(counting, job.image, mask) {
                Ok(m) => Box::new(m),
                Err(e) => {
                    record.status = RecordStatus::Error;
                    record.error = Some(e.to_string());
                    return record;
                }
            }
        }
        None => Box::new(counting),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = job.attack.run(oracle.as_mut(), &problem, &mut rng);
    record.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(result) => {
            record.queries = result.queries;
            record.final_loss = Some(result.final_loss);
            record.stop = Some(result.stop);
            record.success = result.success;
            let outside_mask = job.mask.and_then(|mask| {
                result
                    .perturbation
                    .support()
                    .into_iter()
                    .find(|i| mask.binary_search(i).is_err())
            });
            if let Some(i) = outside_mask {
                record.success = false;
                record.status = RecordStatus::Inconsistent;
                record.error = Some(format!("final perturbation touches unmasked coordinate {i}"));
            } else if result.success {
                let verified = job
                    .image
                    .perturbed(&result.perturbation.values)
                    .and_then(|x| classifier.logits(x.data()))
                    .map(|z| argmax(&z) == job.target);
                if !matches!(verified, Ok(true)) {
                    record.success = false;
                    record.status = RecordStatus::Inconsistent;
                }
            }
        }
        Err(e) => {
            record.queries = e.queries;
            record.status = RecordStatus::Error;
            record.error = Some(e.error.to_string());
        }
    }
    record
}

fn write_line(out: &mut impl Write, record: &AttackRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Writes records as JSON lines in the given order.
pub fn write_records(path: impl AsRef<Path>, records: &[AttackRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        write_line(&mut out, r).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AttackRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Runs every attack of the campaign.
///
/// Records stream to `records.jsonl.partial` in completion order; once all
/// runs finish, `records.jsonl` is written in canonical order (image, target,
/// epsilon, attack) and the partial file is removed. The returned records are
/// in canonical order too.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<AttackRecord>> {
    config.validate()?;
    let target = Target::load(&config.model)?;
    let set = ImageSet::load(&config.images)?;
    run_campaign(config, &target, &set)
}

/// [`run_experiment`] with the target and images already loaded.
pub fn run_campaign(config: &ExperimentConfig, target: &Target, set: &ImageSet) -> Result<Vec<AttackRecord>> {
    if set.shape != target.input_shape() {
        return Err(Error::Shape(format!(
            "images are {} but the model expects {}",
            set.shape,
            target.input_shape()
        )));
    }
    let num_classes = target.num_classes();
    let images = set.tensors()?;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;

    let probe = target.handle()?;
    let mut prepared = Vec::with_capacity(images.len());
    for (id, image) in &images {
        let original = argmax(&probe.classifier().logits(image.data())?);
        let mask = config.mask_top_k.map(|k| variance_mask(image, k)).transpose()?;
        let targets: Vec<usize> = match config.protocol {
            TargetProtocol::AllOtherClasses => (0..num_classes).filter(|t| *t != original).collect(),
            TargetProtocol::RandomClass => vec![random_target(config.seed, id, original, num_classes)],
        };
        prepared.push((id, image, original, mask, targets));
    }
    drop(probe);

    let mut jobs = Vec::new();
    for (id, image, original, mask, targets) in &prepared {
        for &t in targets {
            for &epsilon in &config.epsilons {
                for attack in &config.attacks {
                    jobs.push(Job {
                        image_id: id,
                        image,
                        mask: mask.as_deref(),
                        original: *original,
                        target: t,
                        epsilon,
                        attack,
                    });
                }
            }
        }
    }

    let final_path = config.output.join("records.jsonl");
    let partial_path: PathBuf = config.output.join("records.jsonl.partial");
    let partial = File::create(&partial_path).map_err(|e| Error::io(&partial_path, e))?;
    let sink = Mutex::new(BufWriter::new(partial));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<std::io::Result<AttackRecord>> = pool.install(|| {
        jobs.par_iter()
            .with_max_len(1)
            .map_init(
                || target.handle(),
                |handle, job| {
                    let record = run_job(handle, job, config.max_queries, config.seed);
                    let mut out = sink.lock().unwrap_or_else(|p| p.into_inner());
                    write_line(&mut *out, &record).and_then(|_| out.flush())?;
                    Ok(record)
                },
            )
            .collect()
    });
    let records = results
        .into_iter()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(&partial_path, e))?;
    drop(sink);
    write_records(&final_path, &records)?;
    fs::remove_file(&partial_path).map_err(|e| Error::io(&partial_path, e))?;
    Ok(records)
}
