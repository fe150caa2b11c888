use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adversary::PoolingStrategy;
use crate::checkpoint;
use crate::nn::Section;
use crate::testutil::{abc, noise_image, random_ink, tiny_config};

fn schedule(kind: LambdaKind) -> LambdaSchedule {
    LambdaSchedule {
        kind,
        horizon: 10.0,
        max: 1.0,
    }
}

#[test]
fn lambda_schedules() {
    let c = schedule(LambdaKind::Constant);
    assert_eq!(lambda_value(&c, 0.0), 1.0);
    assert_eq!(lambda_value(&c, 7.3), 1.0);
    let l = schedule(LambdaKind::Linear);
    assert_eq!(lambda_value(&l, 0.0), 0.0);
    assert!((lambda_value(&l, 5.0) - 0.5).abs() < 1e-12);
    assert_eq!(lambda_value(&l, 25.0), 1.0);
    let e = schedule(LambdaKind::Exponential);
    assert_eq!(lambda_value(&e, 0.0), 0.0);
    assert!((lambda_value(&e, 10.0) - 0.99991).abs() < 1e-5);
    let mut scaled = c;
    scaled.max = 0.3;
    assert_eq!(lambda_value(&scaled, 2.0), 0.3);
}

#[test]
fn uniform_logits_cost_log_of_class_count() {
    let logits = Array2::zeros((4, 29));
    let l = recognition_loss(&logits, &[0, 5, 28, 3]).unwrap();
    assert!((l - 29f64.ln()).abs() < 1e-12);
}

#[test]
fn recognition_loss_matches_hand_rolled_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Array2<f64> = Array2::from_shape_fn((5, 7), |_| rng.random_range(-4.0..4.0));
    let target = [1, 0, 6, 3, 3];
    let mut oracle = 0.0;
    for (r, &t) in target.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        oracle -= (row[t].exp() / z).ln();
    }
    oracle /= target.len() as f64;
    assert!((recognition_loss(&logits, &target).unwrap() - oracle).abs() < 1e-12);
    assert!(recognition_loss(&logits, &target[..3]).is_err());
}

#[test]
fn domain_loss_matches_hand_rolled_bce() {
    assert!((domain_loss(&[0.0], &[Domain::Source]).unwrap() - 2f64.ln()).abs() < 1e-12);
    let logits: [f64; 4] = [2.0, -1.5, 30.0, -40.0];
    let labels = [Domain::Source, Domain::Target, Domain::Target, Domain::Source];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let oracle: f64 = logits
        .iter()
        .zip(&labels)
        .map(|(&x, d)| {
            let y = d.label();
            // stable form of -(y ln p + (1-y) ln(1-p))
            x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / 4.0;
    let direct = -(sig(2.0).ln() + (1.0 - sig(-1.5)).ln()) / 2.0;
    let first_two = domain_loss(&logits[..2], &labels[..2]).unwrap();
    assert!((first_two - direct).abs() < 1e-12);
    assert!((domain_loss(&logits, &labels).unwrap() - oracle).abs() < 1e-12);
}

fn tiny_f32(strategy: PoolingStrategy, seed: u64) -> Network<f32> {
    Network::new(&tiny_config(strategy), &abc(), seed).unwrap()
}

fn words(n: usize, seed: u64) -> Vec<&'static str> {
    const W: [&str; 6] = ["a", "ab", "cab", "bca", "cc", "abc"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| W[rng.random_range(0..W.len())]).collect()
}

fn source_set(n: usize, seed: u64) -> Vec<WordImage> {
    words(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, w)| noise_image(16, 8 + 6 * w.len() + i % 5, w, seed * 1000 + i as u64))
        .collect()
}

/// Target images that still carry transcripts, so any read would be counted.
fn target_set(n: usize, seed: u64) -> Vec<WordImage> {
    source_set(n, seed)
        .into_iter()
        .map(|img| {
            let t = img.transcript().map(String::from);
            WordImage::target(img.pixels.mapv(|p| p * 0.5), t)
        })
        .collect()
}

fn cfg(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 0,
        max_steps: Some(1000),
        seed,
        ..TrainConfig::default()
    }
}

fn section_changed(a: &ParamStore<f32>, b: &ParamStore<f32>, s: Section) -> bool {
    a.entries()
        .iter()
        .zip(b.entries())
        .filter(|(x, _)| x.section == s)
        .any(|(x, y)| x.value != y.value)
}

#[test]
fn source_only_updates_recognizer_but_not_discriminator() {
    let src = source_set(12, 1);
    let before = tiny_f32(PoolingStrategy::Gru, 2);
    let mut tr = Trainer::new(cfg(TrainMode::SourceOnly, 3), before.clone()).unwrap();
    let audit = LabelAudit::new();
    let data = TrainData {
        source: &src,
        target: &[],
        val: &[],
    };
    let losses = tr.run_steps(&data, &audit, 3).unwrap();
    assert!(losses.iter().all(|l| l.l_d.is_none() && l.l_r.is_finite()));
    assert!(section_changed(&before.store, &tr.net.store, Section::Encoder));
    assert!(section_changed(&before.store, &tr.net.store, Section::Decoder));
    assert!(!section_changed(&before.store, &tr.net.store, Section::Discriminator));
    assert_eq!(audit.target_reads(), 0);
}

#[test]
fn unsupervised_adaptation_never_reads_target_labels() {
    let src = source_set(10, 4);
    let tgt = target_set(10, 5);
    let before = tiny_f32(PoolingStrategy::Gru, 6);
    let mut tr = Trainer::new(cfg(TrainMode::UnsupAdapt, 7), before.clone()).unwrap();
    let audit = LabelAudit::new();
    let data = TrainData {
        source: &src,
        target: &tgt,
        val: &[],
    };
    let losses = tr.run_steps(&data, &audit, 6).unwrap();
    assert!(losses.iter().all(|l| l.l_d.is_some_and(f64::is_finite)));
    assert_eq!(audit.target_reads(), 0);
    assert!(audit.source_reads() > 0);
    assert!(section_changed(&before.store, &tr.net.store, Section::Discriminator));
}

#[test]
fn supervised_adaptation_reads_target_labels() {
    let tgt = target_set(8, 8);
    let mut tr = Trainer::new(cfg(TrainMode::SupAdapt, 9), tiny_f32(PoolingStrategy::Cmv, 9)).unwrap();
    let audit = LabelAudit::new();
    let data = TrainData {
        source: &[],
        target: &tgt,
        val: &[],
    };
    tr.run_steps(&data, &audit, 2).unwrap();
    assert!(audit.target_reads() > 0);
}

#[test]
fn adaptation_without_target_data_fails() {
    let src = source_set(6, 10);
    let mut tr = Trainer::new(cfg(TrainMode::UnsupAdapt, 1), tiny_f32(PoolingStrategy::Cmv, 1)).unwrap();
    let data = TrainData {
        source: &src,
        target: &[],
        val: &[],
    };
    assert!(matches!(
        tr.run_steps(&data, &LabelAudit::new(), 1),
        Err(Error::ExhaustedStream("target"))
    ));
}

#[test]
fn equal_seeds_give_bit_identical_losses() {
    let src = source_set(10, 11);
    let tgt = target_set(10, 12);
    let data = TrainData {
        source: &src,
        target: &tgt,
        val: &[],
    };
    let run = || {
        let mut tr = Trainer::new(cfg(TrainMode::UnsupAdapt, 13), tiny_f32(PoolingStrategy::Tpp, 14)).unwrap();
        tr.run_steps(&data, &LabelAudit::new(), 5).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.l_r.to_bits(), y.l_r.to_bits());
        assert_eq!(x.l_d.unwrap().to_bits(), y.l_d.unwrap().to_bits());
    }
}

#[test]
fn resumed_checkpoint_reproduces_losses() {
    let src = source_set(10, 15);
    let tgt = target_set(7, 16);
    let data = TrainData {
        source: &src,
        target: &tgt,
        val: &[],
    };
    let audit = LabelAudit::new();
    let mut tr = Trainer::new(cfg(TrainMode::UnsupAdapt, 17), tiny_f32(PoolingStrategy::Gru, 18)).unwrap();
    tr.run_steps(&data, &audit, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    checkpoint::save(&path, &tr.net, Some(&tr.cfg), Some(&tr.opt), Some(&tr.state), "echo").unwrap();
    let original = tr.run_steps(&data, &audit, 8).unwrap();

    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.config_echo, "echo");
    let mut resumed = Trainer::resume(ck.train.unwrap(), ck.net, ck.opt.unwrap(), ck.state.unwrap()).unwrap();
    let again = resumed.run_steps(&data, &audit, 8).unwrap();
    for (x, y) in original.iter().zip(&again) {
        assert_eq!(x.l_r.to_bits(), y.l_r.to_bits());
        assert_eq!(x.l_d.unwrap().to_bits(), y.l_d.unwrap().to_bits());
    }
    assert_eq!(tr.net.store.entries()[3].value, resumed.net.store.entries()[3].value);
}

#[test]
fn two_hundred_steps_stay_finite() {
    let src = source_set(40, 19);
    let tgt = target_set(30, 20);
    let data = TrainData {
        source: &src,
        target: &tgt,
        val: &src[..8],
    };
    let mut c = cfg(TrainMode::UnsupAdapt, 21);
    c.max_steps = Some(200);
    let mut tr = Trainer::new(c, tiny_f32(PoolingStrategy::Gru, 22)).unwrap();
    let report = tr.train(&data, &LabelAudit::new(), None).unwrap();
    assert_eq!(report.losses.len(), 200);
    assert!(report.losses.iter().all(|l| l.l_r.is_finite() && l.l_d.is_some_and(f64::is_finite)));
    assert!(!report.validations.is_empty());
    assert!(tr.net.store.entries().iter().all(|e| e.value.iter().all(|v| v.is_finite())));
}

#[test]
fn metrics_log_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut log = MetricsLog::create(&path, "mode = \"x\"").unwrap();
    log.append(&ValRecord {
        epoch: 0,
        step: 3,
        cer: 1.0,
        wer: 2.0,
        l_r: 0.5,
        l_d: Some(0.6),
        lambda: 1.0,
    })
    .unwrap();
    drop(log);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].contains("\"L_r\""));
}

/// `L_d` of a fixed batch at f64 with the given store.
fn domain_loss_at(net: &Network<f64>, ink: &ArrayD<f64>, widths: &[usize]) -> (f64, Vec<(usize, ArrayD<f64>)>) {
    let g = Graph::new();
    let f = Forward::new(&g, &net.store, true, true, 0);
    let enc = net.rec.encoder.forward(&f, ink, widths).unwrap();
    let logits = net.disc.forward(&f, &enc, 1.0).unwrap();
    let labels: Vec<f64> = (0..widths.len()).map(|i| (i % 2) as f64).collect();
    let loss = g.bce_with_logits(logits, &labels);
    let v = g.scalar(loss);
    let grads = g.backward(loss);
    (v, grads.params().map(|(i, gr)| (i, gr.clone())).collect())
}

#[test]
fn descent_step_helps_discriminator_and_hurts_it_through_encoder() {
    let mut net: Network<f64> = Network::new(&tiny_config(PoolingStrategy::Cmv), &abc(), 23).unwrap();
    let widths = [40, 24, 33, 17, 29, 12];
    let ink = random_ink::<f64>(16, &widths, 24);
    let (base, grads) = domain_loss_at(&net, &ink, &widths);
    let step = |net: &mut Network<f64>, section: Section| {
        for (i, gr) in &grads {
            let e = &mut net.store.entries_mut()[*i];
            if e.section == section {
                e.value.zip_mut_with(gr, |w, &g| *w -= 1e-3 * g);
            }
        }
    };
    let mut disc_step = net.clone();
    step(&mut disc_step, Section::Discriminator);
    assert!(domain_loss_at(&disc_step, &ink, &widths).0 < base);
    step(&mut net, Section::Encoder);
    assert!(domain_loss_at(&net, &ink, &widths).0 > base);
}

#[test]
fn adam_remap_keeps_moments_by_name() {
    let a = tiny_f32(PoolingStrategy::Gru, 25);
    let b = a.with_discriminator(&tiny_config(PoolingStrategy::Cmv).discriminator, 26).unwrap();
    let mut opt = Adam::new(a.store.len());
    for i in 0..a.store.len() {
        opt.m[i] = Some(a.store.entries()[i].value.mapv(|_| 1.0));
        opt.v[i] = Some(a.store.entries()[i].value.mapv(|_| 2.0));
        opt.t[i] = i as u64;
    }
    let r = opt.remap(&a.store, &b.store);
    for (j, e) in b.store.entries().iter().enumerate() {
        match a.store.find(&e.name) {
            Some(i) if a.store.entries()[i.0].value.shape() == e.value.shape() => assert_eq!(r.t[j], i.0 as u64),
            _ => assert!(r.m[j].is_none()),
        }
    }
    let first_encoder = b.store.entries().iter().position(|e| e.section == Section::Encoder).unwrap();
    assert!(r.m[first_encoder].is_some());
}
