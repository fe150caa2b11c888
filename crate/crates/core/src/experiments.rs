//! Scaled-down experiment protocols on rendered data: synthetic-only versus
//! adapted training, the pooling ablation and the target-amount curve.
//!
//! Every protocol pretrains on source data, then spends an equal number of
//! further steps either on source data alone or on unsupervised adaptation,
//! so the comparison holds the step budget fixed.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::PoolingStrategy;
use crate::datakit::{build_charset, Charset};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_images, improvement, MetricsReport, Normalization};
use crate::mix_seed;
use crate::model::{ModelConfig, Network};
use crate::synthgen::{generate_stream, AugmentConfig, Corpus, FontSet, LabelAudit, WordImage};
use crate::trainer::{Adam, LambdaKind, LambdaSchedule, LossBundle, TrainConfig, TrainData, TrainMode, Trainer};

/// Characters every toy font must cover.
pub const TOY_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

const TOY_WORDS: &str = include_str!("../data/toy_words.txt");

/// The 200-word lowercase corpus of the toy task.
pub fn toy_corpus() -> Corpus {
    Corpus::new(TOY_WORDS.lines())
}

/// Font families held out as the toy target domain, by base name.
const TARGET_FAMILIES: [&str; 5] = ["STIXGeneral", "STIXGeneralItalic", "STIXGeneralBol", "STIXGeneralBolIta", "cmr10"];

/// Strips a trailing `-k` uniqueness suffix from a font id.
fn base_id(id: &str) -> &str {
    match id.rsplit_once('-') {
        Some((head, tail)) if tail.chars().all(|c| c.is_ascii_digit()) && !tail.is_empty() => head,
        _ => id,
    }
}

/// Splits fonts into disjoint source and target sets. The target prefers a
/// fixed list of serif families so it looks unlike the mostly sans-serif
/// source; otherwise it takes the last `n_target` ids. Source fonts sharing
/// a base name with a target font are excluded, then `n_source` are drawn.
pub fn toy_font_split(fonts: &FontSet, n_source: usize, n_target: usize, seed: u64) -> Result<(FontSet, FontSet)> {
    let ids: Vec<&str> = fonts.entries().iter().map(|e| e.font_id.as_str()).collect();
    let mut target: Vec<&str> = TARGET_FAMILIES
        .iter()
        .filter_map(|t| ids.iter().copied().find(|id| base_id(id) == *t))
        .take(n_target)
        .collect();
    if target.len() < n_target {
        target = ids.iter().rev().copied().take(n_target).collect();
    }
    let target_bases: Vec<&str> = target.iter().map(|t| base_id(t)).collect();
    let mut rest: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !target_bases.contains(&base_id(id)))
        .collect();
    if rest.len() < n_source || target.len() < n_target {
        return Err(Error::InvalidArgument(format!(
            "need {n_source} source and {n_target} target fonts, found {} fonts",
            ids.len()
        )));
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rest.truncate(n_source);
    let src = fonts.subset(|id| rest.contains(&id))?;
    let tgt = fonts.subset(|id| target.contains(&id))?;
    Ok((src, tgt))
}

/// Sizes, presets and budgets of the toy protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub data_seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub n_source_fonts: usize,
    pub n_target_fonts: usize,
    pub source_augment: AugmentConfig,
    pub target_augment: AugmentConfig,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Source-only steps shared by both arms.
    pub pretrain_steps: u64,
    /// Further steps each arm gets after pretraining.
    pub adapt_steps: u64,
    pub lambda: f64,
    pub eval_batch_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            data_seed: 7,
            n_source: 10_000,
            n_target: 3_000,
            n_test: 1_000,
            n_source_fonts: 20,
            n_target_fonts: 5,
            source_augment: AugmentConfig::light(),
            target_augment: AugmentConfig::heavy(),
            model: ModelConfig::toy(),
            batch_size: 32,
            learning_rate: 1e-3,
            pretrain_steps: 1000,
            adapt_steps: 500,
            lambda: 1.0,
            eval_batch_size: 100,
        }
    }
}

/// Rendered toy data. Target training images keep their transcripts so the
/// label audit can prove they are never read.
pub struct ToyData {
    pub charset: Charset,
    pub source: Vec<WordImage>,
    pub target: Vec<WordImage>,
    pub test: Vec<WordImage>,
    pub source_fonts: Vec<String>,
    pub target_fonts: Vec<String>,
}

fn render(corpus: &Corpus, fonts: &FontSet, aug: &AugmentConfig, height: usize, n: usize, seed: u64) -> Result<Vec<WordImage>> {
    generate_stream(corpus, fonts, aug, height, n, seed)?.collect()
}

fn as_target(images: Vec<WordImage>, writer: &str) -> Vec<WordImage> {
    images
        .into_iter()
        .map(|img| {
            let t = img.transcript().map(String::from);
            WordImage::target(img.pixels, t).with_writer(writer)
        })
        .collect()
}

/// Renders the source, target and test sets from `fonts`.
pub fn build_toy_data(cfg: &ToyConfig, fonts: &FontSet) -> Result<ToyData> {
    let corpus = toy_corpus();
    let charset = build_charset(&[&corpus], &[])?;
    let (src_fonts, tgt_fonts) = toy_font_split(fonts, cfg.n_source_fonts, cfg.n_target_fonts, cfg.data_seed)?;
    let h = cfg.model.height;
    let s = cfg.data_seed;
    let source = render(&corpus, &src_fonts, &cfg.source_augment, h, cfg.n_source, mix_seed(s, 1))?;
    let target = as_target(render(&corpus, &tgt_fonts, &cfg.target_augment, h, cfg.n_target, mix_seed(s, 2))?, "target");
    let test = as_target(render(&corpus, &tgt_fonts, &cfg.target_augment, h, cfg.n_test, mix_seed(s, 3))?, "target");
    let ids = |f: &FontSet| f.entries().iter().map(|e| e.font_id.clone()).collect();
    Ok(ToyData {
        charset,
        source,
        target,
        test,
        source_fonts: ids(&src_fonts),
        target_fonts: ids(&tgt_fonts),
    })
}

impl ToyConfig {
    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda: LambdaSchedule {
                kind: LambdaKind::Constant,
                horizon: 1.0,
                max: self.lambda,
            },
            epochs: 0,
            max_steps: Some(self.pretrain_steps.max(self.adapt_steps).max(1)),
            seed,
            eval_batch_size: self.eval_batch_size,
            ..TrainConfig::default()
        }
    }
}

/// A model after the shared source-only phase.
#[derive(Clone)]
pub struct Pretrained {
    pub seed: u64,
    pub net: Network<f32>,
    pub opt: Adam,
}

/// Source-only training for `cfg.pretrain_steps`.
pub fn pretrain(cfg: &ToyConfig, data: &ToyData, seed: u64) -> Result<Pretrained> {
    let net = Network::new(&cfg.model, &data.charset, seed)?;
    let mut tr = Trainer::new(cfg.train_config(TrainMode::SourceOnly, seed), net)?;
    let audit = LabelAudit::new();
    let td = TrainData {
        source: &data.source,
        target: &[],
        val: &[],
    };
    tr.run_steps(&td, &audit, cfg.pretrain_steps)?;
    Ok(Pretrained {
        seed,
        net: tr.net,
        opt: tr.opt,
    })
}

/// Result of one continuation arm.
pub struct ArmResult {
    pub net: Network<f32>,
    pub losses: Vec<LossBundle>,
    pub test: MetricsReport,
    pub target_label_reads: usize,
}

/// Continues a pretrained model for `cfg.adapt_steps` in `mode`, optionally
/// with another pooling strategy, using `target` as the unlabeled pool.
pub fn continue_arm(
    cfg: &ToyConfig,
    data: &ToyData,
    pre: &Pretrained,
    mode: TrainMode,
    pooling: Option<PoolingStrategy>,
    target: &[WordImage],
) -> Result<ArmResult> {
    let (net, opt) = match pooling {
        Some(p) if p != pre.net.cfg.discriminator.pooling => {
            let mut dc = pre.net.cfg.discriminator.clone();
            dc.pooling = p;
            let net = pre.net.with_discriminator(&dc, pre.seed)?;
            let opt = pre.opt.remap(&pre.net.store, &net.store);
            (net, opt)
        }
        _ => (pre.net.clone(), pre.opt.clone()),
    };
    let tc = cfg.train_config(mode, mix_seed(pre.seed, 0xADA7));
    let mut tr = Trainer::continue_from(tc, net, opt)?;
    let audit = LabelAudit::new();
    let td = TrainData {
        source: &data.source,
        target,
        val: &[],
    };
    let losses = tr.run_steps(&td, &audit, cfg.adapt_steps)?;
    let test = evaluate_images(&tr.net, &data.test, Normalization::default(), cfg.eval_batch_size)?;
    Ok(ArmResult {
        net: tr.net,
        losses,
        test,
        target_label_reads: audit.target_reads(),
    })
}

/// Both arms of one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrained_cer: f64,
    pub source_only_cer: f64,
    pub source_only_wer: f64,
    pub adapted_cer: f64,
    pub adapted_wer: f64,
    /// Relative CER improvement of adaptation over source-only, in percent.
    pub improvement: f64,
}

/// Adapted-versus-source-only comparison over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub outcomes: Vec<SeedOutcome>,
    pub wins: usize,
    pub median_improvement: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl EfficacyReport {
    fn new(outcomes: Vec<SeedOutcome>) -> Self {
        let wins = outcomes.iter().filter(|o| o.adapted_cer < o.source_only_cer).count();
        let imp: Vec<f64> = outcomes.iter().map(|o| o.improvement).collect();
        Self {
            outcomes,
            wins,
            median_improvement: median(&imp),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("seed  pretrained  source_only  adapted  improvement%\n");
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "{:<5} {:>10.2} {:>12.2} {:>8.2} {:>12.1}",
                o.seed, o.pretrained_cer, o.source_only_cer, o.adapted_cer, o.improvement
            );
        }
        let _ = writeln!(
            s,
            "adapted better in {}/{} seeds, median improvement {:.1}%",
            self.wins,
            self.outcomes.len(),
            self.median_improvement
        );
        s
    }
}

/// Pretrains once per seed and returns the shared starting points.
pub fn pretrain_all(cfg: &ToyConfig, data: &ToyData, seeds: &[u64]) -> Result<Vec<Pretrained>> {
    seeds.iter().map(|&s| pretrain(cfg, data, s)).collect()
}

/// Runs both arms from each pretrained model.
pub fn efficacy(cfg: &ToyConfig, data: &ToyData, pre: &[Pretrained]) -> Result<EfficacyReport> {
    let mut outcomes = Vec::new();
    for p in pre {
        let before = evaluate_images(&p.net, &data.test, Normalization::default(), cfg.eval_batch_size)?;
        let so = continue_arm(cfg, data, p, TrainMode::SourceOnly, None, &[])?;
        let ad = continue_arm(cfg, data, p, TrainMode::UnsupAdapt, Some(PoolingStrategy::Gru), &data.target)?;
        log::info!(
            "seed {}: pretrained {:.2}, source-only {:.2}, adapted {:.2}",
            p.seed,
            before.cer,
            so.test.cer,
            ad.test.cer
        );
        outcomes.push(SeedOutcome {
            seed: p.seed,
            pretrained_cer: before.cer,
            source_only_cer: so.test.cer,
            source_only_wer: so.test.wer,
            adapted_cer: ad.test.cer,
            adapted_wer: ad.test.wer,
            improvement: improvement(so.test.cer, ad.test.cer),
        });
    }
    Ok(EfficacyReport::new(outcomes))
}

/// One column of the pooling ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationColumn {
    pub pooling: PoolingStrategy,
    pub cer: f64,
    pub wer: f64,
    pub mean_l_d: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<AblationColumn>,
}

impl AblationReport {
    /// Rows CER and WER, one column per strategy.
    pub fn to_table(&self) -> String {
        let mut s = String::from("    ");
        for c in &self.columns {
            let _ = write!(s, " {:>8}", c.pooling.name().to_uppercase());
        }
        s.push('\n');
        for (name, get) in [("CER", (|c: &AblationColumn| c.cer) as fn(&AblationColumn) -> f64), ("WER", |c| c.wer)] {
            let _ = write!(s, "{name} ");
            for c in &self.columns {
                let _ = write!(s, " {:>8.2}", get(c));
            }
            s.push('\n');
        }
        s
    }

    pub fn best(&self) -> Option<PoolingStrategy> {
        self.columns
            .iter()
            .min_by(|a, b| a.cer.total_cmp(&b.cer))
            .map(|c| c.pooling)
    }
}

/// Adapts one pretrained model with every pooling strategy.
pub fn pooling_ablation(cfg: &ToyConfig, data: &ToyData, pre: &Pretrained) -> Result<AblationReport> {
    let mut columns = Vec::new();
    for p in PoolingStrategy::ALL {
        let arm = continue_arm(cfg, data, pre, TrainMode::UnsupAdapt, Some(p), &data.target)?;
        let ld: Vec<f64> = arm.losses.iter().filter_map(|l| l.l_d).collect();
        let finite = arm.losses.iter().all(|l| l.l_r.is_finite() && l.l_d.is_none_or(f64::is_finite));
        log::info!("pooling {p}: CER {:.2}", arm.test.cer);
        columns.push(AblationColumn {
            pooling: p,
            cer: arm.test.cer,
            wer: arm.test.wer,
            mean_l_d: ld.iter().sum::<f64>() / ld.len().max(1) as f64,
            finite,
        });
    }
    Ok(AblationReport { columns })
}

/// One adaptation run of the target-amount curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub target_size: usize,
    pub seed: u64,
    pub cer: f64,
    pub wer: f64,
}

/// Adapts each pretrained model with the first `size` target images, for every size.
pub fn data_curve(cfg: &ToyConfig, data: &ToyData, pre: &[Pretrained], sizes: &[usize]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for &size in sizes {
        if size == 0 || size > data.target.len() {
            return Err(Error::InvalidArgument(format!(
                "target size {size} outside 1..={}",
                data.target.len()
            )));
        }
        for p in pre {
            let arm = continue_arm(cfg, data, p, TrainMode::UnsupAdapt, Some(PoolingStrategy::Gru), &data.target[..size])?;
            log::info!("curve size {size} seed {}: CER {:.2}", p.seed, arm.test.cer);
            out.push(CurvePoint {
                target_size: size,
                seed: p.seed,
                cer: arm.test.cer,
                wer: arm.test.wer,
            });
        }
    }
    Ok(out)
}

/// Median CER at each size, in the order the sizes first appear.
pub fn curve_medians(points: &[CurvePoint]) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = Vec::new();
    for p in points {
        if !sizes.contains(&p.target_size) {
            sizes.push(p.target_size);
        }
    }
    sizes
        .into_iter()
        .map(|s| {
            let v: Vec<f64> = points.iter().filter(|p| p.target_size == s).map(|p| p.cer).collect();
            (s, median(&v))
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("target_size,seed,cer,wer\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", p.target_size, p.seed, p.cer, p.wer);
    }
    s
}
