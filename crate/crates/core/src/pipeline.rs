//! End-to-end commands on files: dataset generation, training runs,
//! evaluation, data-amount curves and embedding export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::PoolingStrategy;
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::datakit::{build_charset, Charset, DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::evalkit::{compare, evaluate_images, export_embeddings, Comparison, MetricsReport};
use crate::experiments::CurvePoint;
use crate::mix_seed;
use crate::model::Network;
use crate::synthgen::{generate_stream, AugmentConfig, Corpus, Domain, FontSet, LabelAudit, WordImage};
use crate::trainer::{MetricsLog, TrainData, TrainMode, TrainReport, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const BEST_FILE: &str = "best.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CHARSET_FILE: &str = "charset.json";

#[derive(Clone, Debug)]
pub struct GenSynthOptions {
    pub n: usize,
    pub seed: u64,
    pub height: usize,
    pub augment: AugmentConfig,
    /// Domain tag written to the manifest; target-tagged sets stand in for
    /// real data in experiments.
    pub domain: Domain,
    pub split: Split,
}

/// Renders `n` images into `out/images`, plus `manifest.jsonl` and
/// `charset.json`. Output depends only on the inputs and the seed.
pub fn gensynth(corpus: &Corpus, fonts: &FontSet, opts: &GenSynthOptions, out: &Path) -> Result<DatasetManifest> {
    let charset = build_charset(&[corpus], &[])?;
    let stream = generate_stream(corpus, fonts, &opts.augment, opts.height, opts.n, opts.seed)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut manifest = DatasetManifest {
        records: Vec::with_capacity(opts.n),
        base_dir: out.to_path_buf(),
    };
    for (i, img) in stream.enumerate() {
        let img = img?;
        let rel = PathBuf::from("images").join(format!("{i:06}.png"));
        crate::datakit::save_png(&img.pixels, out.join(&rel))?;
        manifest.records.push(ManifestRecord {
            image_path: rel,
            transcript: img.transcript().map(str::to_string),
            writer_id: img.writer_id.clone(),
            split: opts.split,
            domain: Some(opts.domain),
        });
    }
    manifest.save(out.join(MANIFEST_FILE))?;
    charset.save(out.join(CHARSET_FILE))?;
    Ok(manifest)
}

/// Records of `split`, or of the test split when the manifest has none.
fn eval_split(manifest: &DatasetManifest) -> Split {
    if manifest.split(Split::Val).next().is_some() {
        Split::Val
    } else {
        Split::Test
    }
}

fn resolve_charset(cfg: &RunConfig) -> Result<Charset> {
    if let Some(p) = &cfg.data.charset {
        return Charset::load(p);
    }
    for m in [&cfg.data.source_manifest, &cfg.data.target_manifest].into_iter().flatten() {
        let candidate = m.parent().unwrap_or(Path::new(".")).join(CHARSET_FILE);
        if candidate.exists() {
            return Charset::load(candidate);
        }
    }
    Err(Error::Config(
        "no charset: set data.charset or place charset.json next to a manifest".into(),
    ))
}

/// Data pools of a run, loaded at the model's canonical height.
pub struct RunData {
    pub source: Vec<WordImage>,
    pub target: Vec<WordImage>,
    pub val: Vec<WordImage>,
}

impl RunData {
    pub fn load(cfg: &RunConfig, height: usize) -> Result<Self> {
        let load = |p: &Option<PathBuf>, split: Option<Split>, domain| -> Result<Vec<WordImage>> {
            match p {
                Some(p) => {
                    let m = DatasetManifest::load(p)?;
                    m.load_images(split.unwrap_or_else(|| eval_split(&m)), domain, height)
                }
                None => Ok(Vec::new()),
            }
        };
        let source = if cfg.train.mode == TrainMode::SupAdapt {
            Vec::new()
        } else {
            load(&cfg.data.source_manifest, Some(Split::Train), Domain::Source)?
        };
        let mut target = load(&cfg.data.target_manifest, Some(Split::Train), Domain::Target)?;
        if let Some(k) = cfg.data.target_limit {
            target.truncate(k);
        }
        let val = load(&cfg.data.val_manifest, None, Domain::Target)?;
        Ok(Self { source, target, val })
    }

    pub fn as_train_data(&self) -> TrainData<'_> {
        TrainData {
            source: &self.source,
            target: &self.target,
            val: &self.val,
        }
    }
}

/// Builds the trainer a run starts from: resumed, initialized from a
/// checkpoint, or fresh.
fn make_trainer(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    if let Some(path) = resume {
        let ck = checkpoint::load(path)?;
        let (Some(opt), Some(state)) = (ck.opt, ck.state) else {
            return Err(Error::Checkpoint(format!("{} holds no training state", path.display())));
        };
        return Trainer::resume(cfg.train.clone(), ck.net, opt, state);
    }
    if let Some(path) = &cfg.init_checkpoint {
        let ck = checkpoint::load(path)?;
        if ck.net.cfg.discriminator != cfg.model.discriminator {
            let net = ck.net.with_discriminator(&cfg.model.discriminator, mix_seed(cfg.train.seed, 0xD15C))?;
            let opt = ck.opt.map(|o| o.remap(&ck.net.store, &net.store));
            return match opt {
                Some(opt) => Trainer::continue_from(cfg.train.clone(), net, opt),
                None => Trainer::new(cfg.train.clone(), net),
            };
        }
        return match ck.opt {
            Some(opt) => Trainer::continue_from(cfg.train.clone(), ck.net, opt),
            None => Trainer::new(cfg.train.clone(), ck.net),
        };
    }
    let charset = resolve_charset(cfg)?;
    let net = Network::new(&cfg.model, &charset, mix_seed(cfg.train.seed, 0x1417))?;
    Trainer::new(cfg.train.clone(), net)
}

/// What a training run produced.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub best: Option<PathBuf>,
    pub target_label_reads: usize,
    pub steps: u64,
}

/// Validates `cfg`, trains, and writes the checkpoint, best weights,
/// metrics log and config echo into `cfg.out_dir`.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let echo = cfg.to_toml();
    let mut trainer = make_trainer(cfg, resume)?;
    let data = RunData::load(cfg, trainer.net.cfg.height)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), &echo)?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut log = if resume.is_some() {
        MetricsLog::reopen(&metrics_path, &echo)?
    } else {
        MetricsLog::create(&metrics_path, &echo)?
    };
    let audit = LabelAudit::new();
    let report = trainer.train(&data.as_train_data(), &audit, Some(&mut log))?;
    let ck_path = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(
        &ck_path,
        &trainer.net,
        Some(&trainer.cfg),
        Some(&trainer.opt),
        Some(&trainer.state),
        &echo,
    )?;
    let best = match &report.best {
        Some(store) => {
            let mut net = trainer.net.clone();
            net.store = store.clone();
            let p = cfg.out_dir.join(BEST_FILE);
            checkpoint::save(&p, &net, None, None, None, &echo)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        report,
        checkpoint: ck_path,
        best,
        target_label_reads: audit.target_reads(),
        steps: trainer.state.step,
    })
}

/// Loads the labeled items of `split` (all items when `None`).
pub fn load_eval_images(manifest: &Path, split: Option<Split>, height: usize) -> Result<Vec<WordImage>> {
    let m = DatasetManifest::load(manifest)?;
    let split = split.unwrap_or_else(|| eval_split(&m));
    let images = m.load_images(split, Domain::Target, height)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no records in split {split:?}",
            manifest.display()
        )));
    }
    Ok(images)
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Present when a second (adapted) checkpoint was given.
    pub comparison: Option<(MetricsReport, Comparison)>,
}

/// Scores `checkpoint` (and optionally `compare_to`, the adapted model)
/// on the labeled items of `manifest`.
pub fn evaluate(
    checkpoint_path: &Path,
    compare_to: Option<&Path>,
    manifest: &Path,
    split: Option<Split>,
    per_writer: bool,
    batch_size: usize,
) -> Result<EvalOutcome> {
    let ck: Checkpoint = checkpoint::load(checkpoint_path)?;
    let norm = ck.train.as_ref().map(|t| t.normalization).unwrap_or_default();
    let images = load_eval_images(manifest, split, ck.net.cfg.height)?;
    let strip = |mut r: MetricsReport| {
        if !per_writer {
            r.per_writer = None;
        }
        r
    };
    let report = evaluate_images(&ck.net, &images, norm, batch_size)?;
    let comparison = match compare_to {
        Some(p) => {
            let other = checkpoint::load(p)?;
            checkpoint::check_charset(&other.net, &ck.net.charset)?;
            let after = evaluate_images(&other.net, &images, norm, batch_size)?;
            let cmp = compare(&report, &after)?;
            Some((strip(after), cmp))
        }
        None => None,
    };
    Ok(EvalOutcome {
        report: strip(report),
        comparison,
    })
}

/// Adapts from `cfg.init_checkpoint` once per (size, seed) with the first
/// `size` images of a seeded shuffle of the target pool, scoring each run
/// on the validation manifest. Rows come back sorted by size, then seed.
pub fn curve(cfg: &RunConfig, sizes: &[usize], seeds: &[u64]) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("sizes must be a non-empty list of positive counts".into()));
    }
    if cfg.train.mode != TrainMode::UnsupAdapt {
        return Err(Error::Config("curve runs adapt in unsup_adapt mode".into()));
    }
    if cfg.data.val_manifest.is_none() {
        return Err(Error::Config("curve needs a val manifest to score against".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let height = match &cfg.init_checkpoint {
        Some(p) => checkpoint::load(p)?.net.cfg.height,
        None => cfg.model.height,
    };
    let data = RunData::load(cfg, height)?;
    let mut points = Vec::new();
    for &size in &sizes {
        if size > data.target.len() {
            return Err(Error::InvalidArgument(format!(
                "size {size} exceeds the {} target images",
                data.target.len()
            )));
        }
        for &seed in seeds {
            let mut order: Vec<usize> = (0..data.target.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0FE)));
            let subset: Vec<WordImage> = order[..size].iter().map(|&i| data.target[i].clone()).collect();
            let mut run = cfg.clone();
            run.train.seed = seed;
            let mut trainer = make_trainer(&run, None)?;
            let td = TrainData {
                source: &data.source,
                target: &subset,
                val: &[],
            };
            trainer.train(&td, &LabelAudit::new(), None)?;
            let m = evaluate_images(&trainer.net, &data.val, run.train.normalization, run.train.eval_batch_size)?;
            points.push(CurvePoint {
                target_size: size,
                seed,
                cer: m.cer,
                wer: m.wer,
            });
        }
    }
    Ok(points)
}

/// Writes pooled features for every record of the given manifests.
pub fn export_emb(
    checkpoint_path: &Path,
    manifests: &[(PathBuf, Domain)],
    strategy: Option<PoolingStrategy>,
    out: &Path,
) -> Result<usize> {
    let ck = checkpoint::load(checkpoint_path)?;
    let strategy = strategy.unwrap_or(ck.net.cfg.discriminator.pooling);
    let mut items = Vec::new();
    for (path, domain) in manifests {
        let m = DatasetManifest::load(path)?;
        for r in &m.records {
            let pixels = crate::datakit::preprocess_file(m.resolve(r), ck.net.cfg.height)?;
            let img = WordImage::new(pixels, r.domain.unwrap_or(*domain), r.transcript.clone(), r.writer_id.clone())?;
            items.push((r.image_path.display().to_string(), img));
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no records to export".into()));
    }
    export_embeddings(&ck.net, &items, strategy, out)
}
