//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any selected criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to some criteria; the others
//! print SKIP. Criteria 6 to 8 train the toy model and take most of an hour
//! on one CPU core.

use std::fs;
use std::time::Instant;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthadapt::adversary::{grl, DiscriminatorConfig, PoolingStrategy};
use synthadapt::autograd::Graph;
use synthadapt::checkpoint;
use synthadapt::config::RunConfig;
use synthadapt::datakit::{collate, Charset, DatasetManifest, Split};
use synthadapt::evalkit::{cer, edit_distance, gap_reduction, wer, GapReductionInput};
use synthadapt::experiments::{self, curve_csv, curve_medians, toy_corpus, Pretrained, ToyConfig, ToyData, TOY_ALPHABET};
use synthadapt::fonts::discover_fonts;
use synthadapt::model::{ModelConfig, Network};
use synthadapt::nn::{Forward, Section};
use synthadapt::pipeline::{self, GenSynthOptions};
use synthadapt::recognizer::{Backbone, DecoderConfig, EncoderConfig};
use synthadapt::synthgen::{generate_stream, AugmentConfig, Domain, FontSet, LabelAudit};
use synthadapt::trainer::{LossBundle, TrainData, TrainMode, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Small enough for float64 gradient work.
fn small_config(pooling: PoolingStrategy) -> ModelConfig {
    ModelConfig {
        height: 16,
        encoder: EncoderConfig {
            backbone: Backbone::Tiny,
            rnn_layers: 1,
            rnn_hidden: 4,
            dropout: 0.0,
        },
        decoder: DecoderConfig {
            rnn_layers: 1,
            rnn_hidden: 6,
            embedding_dim: 4,
            attn_kernel: 3,
            attn_channels: 2,
            attn_dim: 5,
            dropout: 0.0,
            max_len: 6,
        },
        discriminator: DiscriminatorConfig {
            pooling,
            hidden: [6, 5],
            tpp_levels: vec![1, 2, 4],
            spp_levels: vec![1, 2],
            gru_hidden: 0,
        },
    }
}

fn small_net(pooling: PoolingStrategy, seed: u64) -> Network<f64> {
    Network::new(&small_config(pooling), &Charset::from_symbols("abc".chars()), seed).unwrap()
}

fn random_ink(h: usize, widths: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = *widths.iter().max().unwrap();
    let mut a = ArrayD::zeros(IxDyn(&[widths.len(), 1, h, w]));
    for (b, &wb) in widths.iter().enumerate() {
        for y in 0..h {
            for x in 0..wb {
                a[[b, 0, y, x]] = rng.random::<f64>();
            }
        }
    }
    a
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-2.0..2.0))
}

fn toy_fonts() -> Result<FontSet, String> {
    discover_fonts(TOY_ALPHABET).map_err(|e| format!("no usable fonts: {e}"))
}

// ---------------------------------------------------------------- 1

fn gap_arithmetic() -> Outcome {
    // (dataset, metric, synthetic only, adapted, real target only, published reduction)
    let rows = [
        ("GW", "CER", 26.05, 16.28, 4.56, 45.46),
        ("GW", "WER", 56.79, 39.95, 13.49, 38.89),
        ("IAM", "CER", 26.44, 14.05, 6.88, 63.34),
        ("IAM", "WER", 54.56, 34.86, 17.45, 53.09),
        ("Rimes", "CER", 21.46, 14.39, 2.80, 37.89),
        ("Rimes", "WER", 52.48, 39.21, 8.51, 30.18),
        ("CVL", "CER", 26.30, 19.19, 3.64, 31.38),
        ("CVL", "WER", 55.64, 44.29, 7.77, 23.71),
        ("Esposalles", "CER", 30.78, 20.96, 0.47, 32.40),
        ("Esposalles", "WER", 66.33, 50.00, 1.68, 25.26),
    ];
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for (ds, metric, s, a, r, published) in rows {
        let g = gap_reduction(GapReductionInput {
            err_synth: s,
            err_adapted: a,
            err_real: r,
        })
        .map_err(|e| e.to_string())?;
        let d = (g - published).abs();
        worst = worst.max(d);
        if d > 0.01 {
            bad.push(format!("{ds} {metric}: {g:.4} vs {published}"));
        }
    }
    check(bad.is_empty(), format!("10 entries, max deviation {worst:.4} {}", bad.join("; ")))
}

// ---------------------------------------------------------------- 2

fn domain_grads(net: &Network<f64>, ink: &ArrayD<f64>, widths: &[usize], lambda: Option<f64>) -> Vec<(usize, ArrayD<f64>)> {
    let g = Graph::new();
    let f = Forward::new(&g, &net.store, true, true, 0);
    let enc = net.rec.encoder.forward(&f, ink, widths).unwrap();
    let logits = match lambda {
        Some(l) => net.disc.forward(&f, &enc, l).unwrap(),
        None => {
            let pooled = net.disc.pool(&f, enc.h, enc.conv_map, &enc.lengths).unwrap();
            net.disc.classify(&f, pooled).unwrap()
        }
    };
    let labels: Vec<f64> = (0..widths.len()).map(|i| (i % 2) as f64).collect();
    let loss = g.bce_with_logits(logits, &labels);
    g.backward(loss).params().map(|(i, gr)| (i, gr.clone())).collect()
}

fn grl_contract() -> Outcome {
    let mut compared = 0usize;
    let mut worst: f64 = 0.0;
    for (k, strategy) in PoolingStrategy::ALL.into_iter().enumerate() {
        let net = small_net(strategy, 100 + k as u64);
        let widths = [40, 23, 33, 16];
        let ink = random_ink(16, &widths, 7 + k as u64);
        let plain = domain_grads(&net, &ink, &widths, None);
        for lambda in [0.0, 0.5, 1.0] {
            let rev = domain_grads(&net, &ink, &widths, Some(lambda));
            for (i, gp) in &plain {
                let entry = &net.store.entries()[*i];
                let factor = if entry.section == Section::Encoder { -lambda } else { 1.0 };
                let zeros = ArrayD::zeros(gp.raw_dim());
                let gr = rev.iter().find(|(j, _)| j == i).map_or(&zeros, |(_, g)| g);
                for (n, (&p, &r)) in gp.iter().zip(gr.iter()).enumerate() {
                    let expect = factor * p;
                    let dev = (r - expect).abs();
                    if expect != 0.0 {
                        worst = worst.max(dev / expect.abs());
                    }
                    if dev > 1e-6 * expect.abs() {
                        return Err(format!("{strategy} lambda={lambda} {}[{n}]: {r} vs {expect}", entry.name));
                    }
                    compared += 1;
                }
            }
        }
    }
    // forward pass of the reversal layer is the identity, bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for lambda in [0.0, 0.5, 1.0] {
        let g = Graph::<f64>::new();
        let xv = random_array(&mut rng, &[3, 7, 8]);
        let x = g.variable(xv.clone());
        let y = grl(&g, x, lambda);
        if g.value(y).iter().zip(xv.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("forward differs from input at lambda={lambda}"));
        }
    }
    Ok(format!("{compared} gradient entries over 4 poolings x 3 lambdas, max rel. dev. {worst:.1e}; forward bit-identical"))
}

// ---------------------------------------------------------------- 3

fn check_alpha(alpha: &Array2<f64>, lengths: &[usize], tag: &str) -> Result<(), String> {
    for (b, row) in alpha.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("{tag} item {b}: sum {sum}"));
        }
        if row.iter().any(|&v| v < 0.0) {
            return Err(format!("{tag} item {b}: negative entry"));
        }
        if row.iter().skip(lengths[b]).any(|&v| v != 0.0) {
            return Err(format!("{tag} item {b}: mass past length {}", lengths[b]));
        }
    }
    Ok(())
}

fn attention_normalization() -> Outcome {
    let net = small_net(PoolingStrategy::Cmv, 3);
    let att = &net.rec.decoder.attn;
    let d = net.cfg.encoder.feature_dim();
    let hidden = net.cfg.decoder.rnn_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..100 {
        let bsz = rng.random_range(1..5);
        let n = rng.random_range(1..30);
        let lengths: Vec<usize> = (0..bsz).map(|_| rng.random_range(1..=n)).collect();
        let mut prev = ArrayD::zeros(IxDyn(&[bsz, n]));
        for (b, &l) in lengths.iter().enumerate() {
            let w: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            for (i, v) in w.iter().enumerate() {
                prev[[b, i]] = v / s;
            }
        }
        let g = Graph::new();
        let f = Forward::eval(&g, &net.store);
        // scale H up so some scores saturate
        let h = g.constant(random_array(&mut rng, &[bsz, n, d]).mapv(|v| v * 10.0));
        let s = g.constant(random_array(&mut rng, &[bsz, hidden]));
        let alpha = g.value(att.scores(&f, att.project_keys(&f, h), s, g.constant(prev), &lengths)).clone();
        check_alpha(&alpha.into_dimensionality().unwrap(), &lengths, &format!("triple {t}"))?;
    }

    let fonts = toy_fonts()?;
    let corpus = toy_corpus();
    let cfg = ModelConfig::toy();
    let images: Vec<_> = generate_stream(&corpus, &fonts, &AugmentConfig::light(), cfg.height, 50, 21)
        .and_then(|s| s.collect::<synthadapt::Result<Vec<_>>>())
        .map_err(|e| e.to_string())?;
    let charset = synthadapt::datakit::build_charset(&[&corpus], &[]).map_err(|e| e.to_string())?;
    let net = Network::<f64>::new(&cfg, &charset, 4).map_err(|e| e.to_string())?;
    let mut steps = 0;
    for chunk in images.chunks(10) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = collate(&refs, &charset, &LabelAudit::new(), |_| false).map_err(|e| e.to_string())?;
        let g = Graph::<f64>::new();
        let f = Forward::eval(&g, &net.store);
        let ink = batch.ink.mapv(f64::from).into_dyn();
        let enc = net.rec.encoder.forward(&f, &ink, &batch.widths).map_err(|e| e.to_string())?;
        let (_, alphas) = net.rec.decoder.greedy(&f, enc.h, &enc.lengths, cfg.decoder.max_len, charset.end(), charset.pad(), true);
        for (k, a) in alphas.iter().enumerate() {
            check_alpha(a, &enc.lengths, &format!("toy step {k}"))?;
            steps += 1;
        }
    }
    Ok(format!("100 random triples; 50 toy images, {steps} batched decode steps"))
}

// ---------------------------------------------------------------- 4

fn pooling_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dims = Vec::new();
    for (k, strategy) in PoolingStrategy::ALL.into_iter().enumerate() {
        let net = small_net(strategy, 40 + k as u64);
        let mut seen = Vec::new();
        for n in [1usize, 8, 33] {
            let g = Graph::new();
            let f = Forward::eval(&g, &net.store);
            let widths = [8 * n, (8 * n).saturating_sub(3).max(1)];
            let enc = net.rec.encoder.forward(&f, &random_ink(16, &widths, n as u64), &widths).map_err(|e| e.to_string())?;
            let pooled = net.disc.pool(&f, enc.h, enc.conv_map, &enc.lengths).map_err(|e| e.to_string())?;
            seen.push(g.shape(pooled)[1]);
        }
        if seen.iter().any(|&d| d != seen[0]) {
            return Err(format!("{strategy}: dimensions {seen:?}"));
        }
        dims.push(format!("{}={}", strategy.name(), seen[0]));
    }

    let net = small_net(PoolingStrategy::Cmv, 50);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let lengths: Vec<usize> = (0..3).map(|_| rng.random_range(1..=n)).collect();
        let hv = random_array(&mut rng, &[3, n, 8]);
        let g = Graph::new();
        let f = Forward::eval(&g, &net.store);
        let h = g.constant(hv.clone());
        let out = g.value(net.disc.pool(&f, h, h, &lengths).map_err(|e| e.to_string())?).clone();
        for (b, &l) in lengths.iter().enumerate() {
            for j in 0..8 {
                let mean = (0..l).map(|i| hv[[b, i, j]]).sum::<f64>() / l as f64;
                if (out[[b, j]] - mean).abs() > 1e-6 {
                    return Err(format!("CMV oracle mismatch: {} vs {mean}", out[[b, j]]));
                }
            }
        }
    }

    for (k, strategy) in [PoolingStrategy::Cmv, PoolingStrategy::Tpp, PoolingStrategy::Gru].into_iter().enumerate() {
        let net = small_net(strategy, 60 + k as u64);
        for n in [1, 3, 8, 13, 33] {
            let hv = random_array(&mut rng, &[2, n, 8]);
            let extra = random_array(&mut rng, &[2, 9, 8]);
            let padded = ndarray::concatenate(Axis(1), &[hv.view(), extra.view()]).unwrap();
            let pool = |h: &ArrayD<f64>| {
                let g = Graph::new();
                let f = Forward::eval(&g, &net.store);
                let h = g.constant(h.clone());
                let v = net.disc.pool(&f, h, h, &[n, n]).map(|p| g.value(p).clone());
                v
            };
            let (a, b) = (pool(&hv).map_err(|e| e.to_string())?, pool(&padded).map_err(|e| e.to_string())?);
            let dev = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if dev > 1e-6 {
                return Err(format!("{strategy} n={n}: padding changed output by {dev:e}"));
            }
        }
    }
    Ok(format!("dims {}; CMV oracle on 50 batches; padding invariant for CMV/TPP/GRU", dims.join(" ")))
}

// ---------------------------------------------------------------- 5

/// Full-matrix Levenshtein distance.
fn dp<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_text(rng: &mut ChaCha8Rng, min: usize) -> String {
    let alphabet: Vec<char> = "abcé d".chars().collect();
    loop {
        let n = rng.random_range(min..12);
        let s: String = (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if min == 0 || !s.trim().is_empty() {
            return s;
        }
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut refs, mut hyps) = (Vec::new(), Vec::new());
    let (mut ce, mut cn, mut we, mut wn) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..1000 {
        let r = random_text(&mut rng, 1);
        let h = random_text(&mut rng, 0);
        let (rc, hc): (Vec<char>, Vec<char>) = (r.chars().collect(), h.chars().collect());
        let (rw, hw): (Vec<&str>, Vec<&str>) = (r.split_whitespace().collect(), h.split_whitespace().collect());
        let (dc, dw) = (dp(&rc, &hc), dp(&rw, &hw));
        if edit_distance(&rc, &hc) != dc || edit_distance(&rw, &hw) != dw {
            return Err(format!("pair {i}: distance mismatch on {r:?} / {h:?}"));
        }
        let single_cer = cer(&[&r], &[&h]).map_err(|e| e.to_string())?;
        if single_cer != 100.0 * dc as f64 / rc.len() as f64 {
            return Err(format!("pair {i}: CER {single_cer}"));
        }
        let single_wer = wer(&[&r], &[&h]).map_err(|e| e.to_string())?;
        if single_wer != 100.0 * dw as f64 / rw.len() as f64 {
            return Err(format!("pair {i}: WER {single_wer}"));
        }
        ce += dc;
        cn += rc.len();
        we += dw;
        wn += rw.len();
        refs.push(r);
        hyps.push(h);
    }
    let (c, w) = (cer(&refs, &hyps).map_err(|e| e.to_string())?, wer(&refs, &hyps).map_err(|e| e.to_string())?);
    let (oc, ow) = (100.0 * ce as f64 / cn as f64, 100.0 * we as f64 / wn as f64);
    // the mean of per-pair rates is a different quantity; make sure it is not what we compute
    let mean_rate: f64 = refs
        .iter()
        .zip(&hyps)
        .map(|(r, h)| dp(&r.chars().collect::<Vec<_>>(), &h.chars().collect::<Vec<_>>()) as f64 / r.chars().count() as f64)
        .sum::<f64>()
        * 100.0
        / refs.len() as f64;
    check(
        c == oc && w == ow && (c - mean_rate).abs() > 1e-9,
        format!("1000 pairs exact; corpus CER {c:.3} = {oc:.3}, WER {w:.3} = {ow:.3}"),
    )
}

// ---------------------------------------------------------------- 6-8

struct Toy {
    cfg: ToyConfig,
    data: ToyData,
    pre: Vec<Pretrained>,
}

fn toy_setup() -> Result<Toy, String> {
    let cfg = ToyConfig::default();
    let fonts = toy_fonts()?;
    let t = Instant::now();
    let data = experiments::build_toy_data(&cfg, &fonts).map_err(|e| e.to_string())?;
    println!(
        "  toy data: {} source ({} fonts), {} target + {} test ({} fonts: {}), rendered in {:.0?}",
        data.source.len(),
        data.source_fonts.len(),
        data.target.len(),
        data.test.len(),
        data.target_fonts.len(),
        data.target_fonts.join(", "),
        t.elapsed()
    );
    let t = Instant::now();
    let pre = experiments::pretrain_all(&cfg, &data, &[1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
    println!("  pretrained 5 seeds x {} steps in {:.0?}", cfg.pretrain_steps, t.elapsed());
    Ok(Toy { cfg, data, pre })
}

fn efficacy(toy: &Toy) -> (Outcome, Option<experiments::EfficacyReport>) {
    let report = match experiments::efficacy(&toy.cfg, &toy.data, &toy.pre) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    for line in report.to_table().lines() {
        println!("  {line}");
    }
    let ok = report.wins >= 4 && report.median_improvement >= 10.0;
    let detail = format!(
        "adapted better in {}/5 seeds, median CER improvement {:.1}% (need >=4/5 and >=10%)",
        report.wins, report.median_improvement
    );
    (check(ok, detail), Some(report))
}

fn ablation(toy: &Toy) -> Outcome {
    let report = experiments::pooling_ablation(&toy.cfg, &toy.data, &toy.pre[0]).map_err(|e| e.to_string())?;
    let table = report.to_table();
    for line in table.lines() {
        println!("  {line}");
    }
    let all_finite = report.columns.iter().all(|c| c.finite && c.cer.is_finite());
    let complete = report.columns.len() == 4 && table.lines().count() == 3;
    let best = report.best().map_or("none", |p| p.name());
    check(all_finite && complete, format!("4 strategies finite, report generated; lowest CER: {best}"))
}

fn curve(toy: &Toy, eff: Option<&experiments::EfficacyReport>) -> Outcome {
    // The size-3000 runs are the efficacy runs' adapted arms (same seeds, same
    // full target pool, same pooling), so they are reused rather than retrained.
    let mut points = experiments::data_curve(&toy.cfg, &toy.data, &toy.pre[..3], &[500, 1500]).map_err(|e| e.to_string())?;
    match eff {
        Some(r) => points.extend(r.outcomes.iter().take(3).map(|o| experiments::CurvePoint {
            target_size: toy.data.target.len(),
            seed: o.seed,
            cer: o.adapted_cer,
            wer: o.adapted_wer,
        })),
        None => points.extend(
            experiments::data_curve(&toy.cfg, &toy.data, &toy.pre[..3], &[toy.data.target.len()]).map_err(|e| e.to_string())?,
        ),
    }
    for line in curve_csv(&points).lines() {
        println!("  {line}");
    }
    let med = curve_medians(&points);
    let at = |s: usize| med.iter().find(|(k, _)| *k == s).map(|m| m.1).unwrap_or(f64::NAN);
    let (m500, m3000) = (at(500), at(3000));
    check(
        m3000 <= m500,
        format!("median CER at 500: {m500:.2}, 1500: {:.2}, 3000: {m3000:.2} (need 3000 <= 500)", at(1500)),
    )
}

// ---------------------------------------------------------------- 9

fn small_toy() -> Result<(ToyConfig, ToyData), String> {
    let cfg = ToyConfig {
        n_source: 96,
        n_target: 64,
        n_test: 16,
        batch_size: 8,
        ..ToyConfig::default()
    };
    let data = experiments::build_toy_data(&cfg, &toy_fonts()?).map_err(|e| e.to_string())?;
    Ok((cfg, data))
}

fn same_losses(a: &[LossBundle], b: &[LossBundle]) -> bool {
    let bits = |l: &LossBundle| (l.l_r.to_bits(), l.l_d.map(f64::to_bits), l.total.to_bits(), l.grad_norm.to_bits());
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits(x) == bits(y))
}

fn determinism() -> Outcome {
    let (cfg, data) = small_toy()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let td = TrainData {
        source: &data.source,
        target: &data.target,
        val: &[],
    };
    let mut tc = cfg.train_config(TrainMode::UnsupAdapt, 9);
    tc.max_steps = None;
    tc.epochs = 100;
    let net = Network::<f32>::new(&cfg.model, &data.charset, 9).map_err(|e| e.to_string())?;
    let audit = LabelAudit::new();
    let (k, more) = (13u64, 60u64);
    let mut a = Trainer::new(tc.clone(), net).map_err(|e| e.to_string())?;
    a.run_steps(&td, &audit, k).map_err(|e| e.to_string())?;
    let ck = dir.path().join("k.safetensors");
    checkpoint::save(&ck, &a.net, Some(&a.cfg), Some(&a.opt), Some(&a.state), "").map_err(|e| e.to_string())?;
    let original = a.run_steps(&td, &audit, more).map_err(|e| e.to_string())?;

    let loaded = checkpoint::load(&ck).map_err(|e| e.to_string())?;
    let mut b = Trainer::resume(loaded.train.unwrap(), loaded.net, loaded.opt.unwrap(), loaded.state.unwrap()).map_err(|e| e.to_string())?;
    let resumed = b.run_steps(&td, &audit, more).map_err(|e| e.to_string())?;
    if !same_losses(&original, &resumed) {
        let at = original.iter().zip(&resumed).position(|(x, y)| x.total.to_bits() != y.total.to_bits());
        return Err(format!("resumed trajectory diverges at step {:?}", at.map(|i| k + i as u64)));
    }
    let params_equal = a
        .net
        .store
        .entries()
        .iter()
        .zip(b.net.store.entries())
        .all(|(x, y)| x.value.iter().zip(y.value.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    if !params_equal {
        return Err("final parameters differ after resume".into());
    }

    // generation: same seed gives the same bytes on disk
    let fonts = toy_fonts()?;
    let opts = GenSynthOptions {
        n: 40,
        seed: 77,
        height: 32,
        augment: AugmentConfig::heavy(),
        domain: Domain::Source,
        split: Split::Train,
    };
    let corpus = toy_corpus();
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    pipeline::gensynth(&corpus, &fonts, &opts, &g1).map_err(|e| e.to_string())?;
    pipeline::gensynth(&corpus, &fonts, &opts, &g2).map_err(|e| e.to_string())?;
    let mut files = vec!["manifest.jsonl".to_string(), "charset.json".to_string()];
    files.extend((0..40).map(|i| format!("images/{i:06}.png")));
    for f in &files {
        let (x, y) = (fs::read(g1.join(f)).map_err(|e| e.to_string())?, fs::read(g2.join(f)).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("generated file {f} differs between runs"));
        }
    }
    Ok(format!(
        "resume at step {k} reproduces {more} further steps bit-for-bit; {} generated files byte-identical",
        files.len()
    ))
}

// ---------------------------------------------------------------- 10

fn label_isolation() -> Outcome {
    let fonts = toy_fonts()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = toy_corpus();
    let gen = |name: &str, n, seed, domain| {
        let opts = GenSynthOptions {
            n,
            seed,
            height: 32,
            augment: AugmentConfig::light(),
            domain,
            split: Split::Train,
        };
        pipeline::gensynth(&corpus, &fonts, &opts, &dir.path().join(name)).map_err(|e| e.to_string())
    };
    gen("src", 48, 1, Domain::Source)?;
    let target = gen("tgt", 48, 2, Domain::Target)?;
    let with_text = target.records.iter().filter(|r| r.transcript.is_some()).count();
    if with_text != target.records.len() {
        return Err("target manifest should carry transcripts for this check".into());
    }
    let reloaded = DatasetManifest::load(dir.path().join("tgt/manifest.jsonl")).map_err(|e| e.to_string())?;
    let run = |mode| {
        let mut cfg = RunConfig {
            model: ModelConfig::toy(),
            ..RunConfig::default()
        };
        cfg.train.mode = mode;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 0;
        cfg.train.max_steps = Some(12);
        cfg.data.source_manifest = Some(dir.path().join("src/manifest.jsonl"));
        cfg.data.target_manifest = Some(dir.path().join("tgt/manifest.jsonl"));
        cfg.out_dir = dir.path().join(format!("{mode:?}"));
        pipeline::run_training(&cfg, None).map_err(|e| e.to_string())
    };
    let unsup = run(TrainMode::UnsupAdapt)?;
    let sup = run(TrainMode::SupAdapt)?;
    check(
        unsup.target_label_reads == 0 && sup.target_label_reads > 0 && unsup.steps == 12,
        format!(
            "unsup_adapt: 0 target label reads over {} steps with {} labeled target records present (control: sup_adapt read {})",
            unsup.steps,
            reloaded.records.len(),
            sup.target_label_reads
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "gap-reduction arithmetic",
        "gradient reversal contract",
        "attention normalization",
        "temporal-pooling invariance",
        "metric oracles",
        "toy adaptation efficacy",
        "pooling ablation harness",
        "data-amount curve",
        "determinism and persistence",
        "label isolation",
    ];
    let mut results: Vec<(u32, Option<Outcome>, f64)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        if !selected(n) {
            results.push((n, None, 0.0));
            return;
        }
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        print_line(n, names[n as usize - 1], Some(&out), secs);
        results.push((n, Some(out), secs));
    };
    run(1, &mut gap_arithmetic);
    run(2, &mut grl_contract);
    run(3, &mut attention_normalization);
    run(4, &mut pooling_invariance);
    run(5, &mut metric_oracles);

    if [6, 7, 8].into_iter().any(selected) {
        let t = Instant::now();
        match toy_setup() {
            Ok(toy) => {
                let setup = t.elapsed().as_secs_f64();
                let mut eff = None;
                run(6, &mut || {
                    let (o, r) = efficacy(&toy);
                    eff = r;
                    o
                });
                run(7, &mut || ablation(&toy));
                run(8, &mut || curve(&toy, eff.as_ref()));
                println!("  (shared toy setup took {setup:.0}s)");
            }
            Err(e) => {
                for n in [6, 7, 8] {
                    run(n, &mut || Err(format!("toy setup failed: {e}")));
                }
            }
        }
    } else {
        for n in [6, 7, 8] {
            run(n, &mut || Ok(String::new()));
        }
    }
    run(9, &mut determinism);
    run(10, &mut label_isolation);

    println!("\nsummary");
    let mut failed = 0;
    for (n, out, secs) in &results {
        print_line(*n, names[*n as usize - 1], out.as_ref(), *secs);
        if matches!(out, Some(Err(_))) {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn print_line(n: u32, name: &str, out: Option<&Outcome>, secs: f64) {
    match out {
        None => println!("criterion {n:>2} SKIP {name}"),
        Some(Ok(d)) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {d}"),
        Some(Err(d)) => println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {d}"),
    }
}
