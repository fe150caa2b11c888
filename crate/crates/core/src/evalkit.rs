//! Error rates, gap reduction, per-writer reports and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::adversary::PoolingStrategy;
use crate::autograd::Graph;
use crate::datakit::collate;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Forward;
use crate::synthgen::{LabelAudit, WordImage};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Scoring options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    /// Lowercase references and hypotheses before scoring.
    pub case_insensitive: bool,
}

impl Normalization {
    fn apply(self, s: &str) -> String {
        if self.case_insensitive {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }
}

/// Error counts for one set of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub char_errors: usize,
    pub ref_chars: usize,
    pub word_errors: usize,
    pub ref_words: usize,
    pub items: usize,
}

impl Counts {
    fn add(&mut self, r: &str, h: &str) {
        let rc: Vec<char> = r.chars().collect();
        let hc: Vec<char> = h.chars().collect();
        self.char_errors += edit_distance(&rc, &hc);
        self.ref_chars += rc.len();
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        self.word_errors += edit_distance(&rw, &hw);
        self.ref_words += rw.len();
        self.items += 1;
    }

    pub fn cer(&self) -> f64 {
        100.0 * self.char_errors as f64 / self.ref_chars.max(1) as f64
    }

    pub fn wer(&self) -> f64 {
        100.0 * self.word_errors as f64 / self.ref_words.max(1) as f64
    }
}

fn check_pairs<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            left: refs.len(),
            right: hyps.len(),
        });
    }
    if refs.is_empty() || refs.iter().any(|r| r.as_ref().trim().is_empty()) {
        return Err(Error::EmptyReference);
    }
    Ok(())
}

fn counts<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], norm: Normalization) -> Result<Counts> {
    check_pairs(refs, hyps)?;
    let mut c = Counts::default();
    for (r, h) in refs.iter().zip(hyps) {
        c.add(&norm.apply(r.as_ref()), &norm.apply(h.as_ref()));
    }
    Ok(c)
}

/// Corpus-level character error rate in percent: total edits over total reference characters.
pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    Ok(counts(refs, hyps, Normalization::default())?.cer())
}

/// Corpus-level word error rate in percent over whitespace-separated tokens.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    Ok(counts(refs, hyps, Normalization::default())?.wer())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReductionInput {
    pub err_synth: f64,
    pub err_adapted: f64,
    pub err_real: f64,
}

/// Share of the synthetic-to-real gap recovered by adaptation, in percent.
pub fn gap_reduction(g: GapReductionInput) -> Result<f64> {
    let gap = g.err_synth - g.err_real;
    if gap == 0.0 {
        return Err(Error::ZeroGap);
    }
    Ok(100.0 * (g.err_synth - g.err_adapted) / gap)
}

/// Relative error reduction in percent, `100 (before - after) / before`.
pub fn improvement(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (before - after) / before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterMetrics {
    pub cer: f64,
    pub wer: f64,
    pub n_words: usize,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cer: f64,
    pub wer: f64,
    pub n_items: usize,
    pub counts: Counts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_writer: Option<BTreeMap<String, WriterMetrics>>,
    /// Reference characters outside the model charset.
    pub unknown_chars: usize,
}

/// Scores hypotheses against references. Writers, when given, produce a
/// per-writer breakdown.
pub fn score<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    writers: Option<&[Option<String>]>,
    norm: Normalization,
) -> Result<MetricsReport> {
    let total = counts(refs, hyps, norm)?;
    let per_writer = match writers {
        Some(ws) if ws.iter().any(Option::is_some) => {
            if ws.len() != refs.len() {
                return Err(Error::LengthMismatch {
                    left: ws.len(),
                    right: refs.len(),
                });
            }
            let mut map: BTreeMap<String, Counts> = BTreeMap::new();
            for ((r, h), w) in refs.iter().zip(hyps).zip(ws) {
                let key = w.clone().unwrap_or_else(|| "<unknown>".into());
                map.entry(key)
                    .or_default()
                    .add(&norm.apply(r.as_ref()), &norm.apply(h.as_ref()));
            }
            Some(
                map.into_iter()
                    .map(|(k, c)| {
                        (
                            k,
                            WriterMetrics {
                                cer: c.cer(),
                                wer: c.wer(),
                                n_words: c.items,
                                counts: c,
                            },
                        )
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(MetricsReport {
        cer: total.cer(),
        wer: total.wer(),
        n_items: total.items,
        counts: total,
        per_writer,
        unknown_chars: 0,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<24} {:>8} {:>8} {:>8}", "set", "CER%", "WER%", "items").unwrap();
        writeln!(out, "{:<24} {:>8.2} {:>8.2} {:>8}", "all", self.cer, self.wer, self.n_items).unwrap();
        if let Some(pw) = &self.per_writer {
            for (w, m) in pw {
                writeln!(out, "{:<24} {:>8.2} {:>8.2} {:>8}", w, m.cer, m.wer, m.n_words).unwrap();
            }
        }
        out
    }
}

/// One row of a two-model comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub writer: String,
    pub cer_before: f64,
    pub cer_after: f64,
    pub improvement: f64,
    pub n_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub overall: ComparisonRow,
    /// Sorted by improvement, best first.
    pub writers: Vec<ComparisonRow>,
}

/// Compares a synthetic-only report with an adapted one on the same items.
pub fn compare(before: &MetricsReport, after: &MetricsReport) -> Result<Comparison> {
    if before.n_items != after.n_items {
        return Err(Error::LengthMismatch {
            left: before.n_items,
            right: after.n_items,
        });
    }
    let row = |writer: &str, b: f64, a: f64, n| ComparisonRow {
        writer: writer.to_string(),
        cer_before: b,
        cer_after: a,
        improvement: improvement(b, a),
        n_words: n,
    };
    let mut writers = Vec::new();
    if let (Some(pb), Some(pa)) = (&before.per_writer, &after.per_writer) {
        for (w, mb) in pb {
            if let Some(ma) = pa.get(w) {
                writers.push(row(w, mb.cer, ma.cer, mb.n_words));
            }
        }
    }
    writers.sort_by(|a, b| b.improvement.total_cmp(&a.improvement).then_with(|| a.writer.cmp(&b.writer)));
    Ok(Comparison {
        overall: row("all", before.cer, after.cer, before.n_items),
        writers,
    })
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<24} {:>10} {:>10} {:>9} {:>7}", "writer", "CER synth", "CER adapt", "Improv.%", "words").unwrap();
        for r in std::iter::once(&self.overall).chain(&self.writers) {
            writeln!(
                out,
                "{:<24} {:>10.2} {:>10.2} {:>9.2} {:>7}",
                r.writer, r.cer_before, r.cer_after, r.improvement, r.n_words
            )
            .unwrap();
        }
        out
    }
}

/// Greedy transcriptions in eval mode, `batch_size` images at a time.
pub fn transcribe(net: &Network<f32>, images: &[WordImage], batch_size: usize) -> Result<Vec<String>> {
    let audit = LabelAudit::new();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&WordImage> = chunk.iter().collect();
        let batch = collate(&refs, &net.charset, &audit, |_| false)?;
        let g = Graph::<f32>::new();
        let f = Forward::eval(&g, &net.store);
        let enc = net.rec.encoder.forward(&f, &batch.ink.clone().into_dyn(), &batch.widths)?;
        let cs = &net.charset;
        let (seqs, _) = net.rec.decoder.greedy(
            &f,
            enc.h,
            &enc.lengths,
            net.cfg.decoder.max_len,
            cs.end(),
            cs.pad(),
            false,
        );
        out.extend(seqs.iter().map(|s| cs.decode_ids(s)));
    }
    Ok(out)
}

/// Transcribes labeled images and scores them against their transcripts.
pub fn evaluate_images(
    net: &Network<f32>,
    images: &[WordImage],
    norm: Normalization,
    batch_size: usize,
) -> Result<MetricsReport> {
    let refs: Vec<&str> = images
        .iter()
        .map(|i| i.transcript().ok_or(Error::EmptyReference))
        .collect::<Result<_>>()?;
    let unknown_chars = refs
        .iter()
        .flat_map(|r| r.chars())
        .filter(|&ch| !net.charset.contains(ch))
        .count();
    let hyps = transcribe(net, images, batch_size)?;
    let writers: Vec<Option<String>> = images.iter().map(|i| i.writer_id.clone()).collect();
    let mut report = score(&refs, &hyps, Some(&writers), norm)?;
    report.unknown_chars = unknown_chars;
    Ok(report)
}

/// Pooled features (one row per image) under `strategy`.
pub fn pooled_features(
    net: &Network<f32>,
    images: &[WordImage],
    strategy: PoolingStrategy,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let audit = LabelAudit::new();
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&WordImage> = chunk.iter().collect();
        let batch = collate(&refs, &net.charset, &audit, |_| false)?;
        let g = Graph::<f32>::new();
        let f = Forward::eval(&g, &net.store);
        let enc = net.rec.encoder.forward(&f, &batch.ink.clone().into_dyn(), &batch.widths)?;
        let pooled = net.disc.pool_as(&f, strategy, enc.h, enc.conv_map, &enc.lengths)?;
        let v: ArrayD<f32> = g.value(pooled).clone();
        rows.extend(v.axis_iter(Axis(0)).map(|r| r.iter().copied().collect::<Vec<f32>>()));
    }
    Ok(rows)
}

/// Writes `item_id, domain, transcript, f0..` rows as TSV.
pub fn export_embeddings(
    net: &Network<f32>,
    items: &[(String, WordImage)],
    strategy: PoolingStrategy,
    out_path: impl AsRef<Path>,
) -> Result<usize> {
    let images: Vec<WordImage> = items.iter().map(|(_, i)| i.clone()).collect();
    let rows = pooled_features(net, &images, strategy, 32)?;
    let dim = rows.first().map_or(0, Vec::len);
    let mut w = BufWriter::new(fs::File::create(out_path)?);
    write!(w, "item_id\tdomain\ttranscript")?;
    for k in 0..dim {
        write!(w, "\tf{k}")?;
    }
    writeln!(w)?;
    for ((id, img), row) in items.iter().zip(&rows) {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        write!(
            w,
            "{}\t{}\t{}",
            clean(id),
            img.domain.as_str(),
            clean(img.transcript().unwrap_or(""))
        )?;
        for v in row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(rows.len())
}
