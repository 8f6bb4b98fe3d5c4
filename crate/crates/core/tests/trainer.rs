//! Trainer behavior: accumulation, optimizer arithmetic, milestones, resume
//! and abort handling.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_params, store, TOY_TEXT};
use tinyvlm::checkpoint::{
    load_checkpoint, load_training_checkpoint, write_checkpoint, CheckpointMeta, CheckpointSink,
    Modality, TrainingState, ABORT_FILE, LAST_GOOD_DIR, LOG_FILE,
};
use tinyvlm::corpus::Batch;
use tinyvlm::features::FeatureStore;
use tinyvlm::model::{loss_and_grad, ModelConfig, ParameterSet, Row, Tensor};
use tinyvlm::tokenizer::{train_bpe, SpecialNames, Tokenizer};
use tinyvlm::trainer::{
    adamw_step, batch_hash, AbortReport, AdamWConfig, Milestone, NullSink, OptimizerState,
    Snapshot, StepLog, TrainConfig, TrainSink, Trainer,
};
use tinyvlm::{Error, PLACEHOLDER_KEY};

const V: usize = 40;

fn tok() -> Tokenizer {
    train_bpe(TOY_TEXT, V, &SpecialNames::default()).unwrap()
}

fn cfg() -> ModelConfig {
    ModelConfig::new(2, 8, 2, 16, V, 16, 4)
}

fn features() -> FeatureStore {
    store(4, &[("img_a", vec![0.5, -1.0, 0.25, 2.0]), ("img_b", vec![1.0, 0.0, -0.5, 0.0])])
}

/// `rows` rows of exactly `len` tokens `[BOS, IMG, body.., EOS]`, no padding.
fn fixed_batch(tok: &Tokenizer, seed: u64, rows: usize, len: usize) -> Batch {
    let sp = tok.specials();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Batch { token_ids: vec![], loss_mask: vec![], image_keys: vec![], word_count: 0 };
    for r in 0..rows {
        let mut ids = vec![sp.bos, sp.img];
        ids.extend((0..len - 3).map(|_| rng.random_range(5..V as u32)));
        ids.push(sp.eos);
        b.loss_mask.push(ids.iter().enumerate().map(|(i, _)| i >= 2).collect());
        b.token_ids.push(ids);
        b.image_keys.push(["img_a", PLACEHOLDER_KEY, "img_b"][r % 3].to_string());
    }
    b.word_count = rows * (len - 3);
    b
}

fn concat(batches: &[Batch]) -> Batch {
    let mut out = Batch { token_ids: vec![], loss_mask: vec![], image_keys: vec![], word_count: 0 };
    for b in batches {
        out.token_ids.extend(b.token_ids.iter().cloned());
        out.loss_mask.extend(b.loss_mask.iter().cloned());
        out.image_keys.extend(b.image_keys.iter().cloned());
        out.word_count += b.word_count;
    }
    out
}

fn train_cfg(accum: usize) -> TrainConfig {
    TrainConfig { lr: 1e-2, accum_steps: accum, micro_batch: 4, ..Default::default() }
}

fn max_diff<T: tinyvlm::model::Scalar>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data.iter().zip(&y.data).map(|(u, v)| (u.f64() - v.f64()).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn accumulation_equals_one_step_on_the_concatenation() {
    let (tok, fs) = (tok(), features());
    let init: ParameterSet<f64> = random_params(&cfg(), 1, 0.3);
    let micro: Vec<Batch> = (0..4).map(|s| fixed_batch(&tok, s, 3, 9)).collect();

    let mut accum = Trainer::new(init.clone(), train_cfg(4), &tok, &fs).unwrap();
    for b in &micro {
        accum.micro_step(b, &mut NullSink).unwrap();
    }
    assert_eq!(accum.step(), 1);

    let mut whole = Trainer::new(init.clone(), train_cfg(1), &tok, &fs).unwrap();
    whole.micro_step(&concat(&micro), &mut NullSink).unwrap();
    assert_eq!(whole.step(), 1);

    assert!(max_diff(accum.params(), &init) > 1e-3);
    assert!(max_diff(accum.params(), whole.params()) < 1e-6);
}

#[test]
fn unit_accumulation_equals_manual_stepping() {
    let (tok, fs) = (tok(), features());
    let init: ParameterSet<f64> = random_params(&cfg(), 2, 0.3);
    let batches: Vec<Batch> = (0..5).map(|s| fixed_batch(&tok, 10 + s, 2, 7)).collect();
    let tc = train_cfg(1);

    let mut trainer = Trainer::new(init.clone(), tc.clone(), &tok, &fs).unwrap();
    let mut manual = init;
    let mut state = OptimizerState::new(&manual);
    for b in &batches {
        trainer.micro_step(b, &mut NullSink).unwrap();
        let feats: Vec<Vec<f64>> = b
            .image_keys
            .iter()
            .map(|k| fs.get(k).unwrap().iter().map(|&x| x as f64).collect())
            .collect();
        let rows: Vec<Row<'_, f64>> = b
            .token_ids
            .iter()
            .zip(&b.loss_mask)
            .zip(&feats)
            .map(|((ids, mask), f)| Row { ids, mask, feature: Some(f) })
            .collect();
        let lg = loss_and_grad(&manual, &rows).unwrap();
        adamw_step(&mut manual, &lg.grads, &mut state, &tc.adamw(), tc.lr).unwrap();
    }
    assert_eq!(trainer.step(), 5);
    assert_eq!(max_diff(trainer.params(), &manual), 0.0);
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepLog>,
    milestones: Vec<Milestone>,
    aborts: Vec<AbortReport>,
}

impl<T: tinyvlm::model::Scalar> TrainSink<T> for Recorder {
    fn on_step(&mut self, log: &StepLog) -> tinyvlm::Result<()> {
        self.steps.push(log.clone());
        Ok(())
    }
    fn on_milestone(&mut self, m: &Milestone, _s: &Snapshot<'_, T>) -> tinyvlm::Result<()> {
        self.milestones.push(m.clone());
        Ok(())
    }
    fn on_abort(&mut self, r: &AbortReport, _s: &Snapshot<'_, T>) -> tinyvlm::Result<()> {
        self.aborts.push(r.clone());
        Ok(())
    }
}

#[test]
fn eight_micro_batches_of_64_make_one_step_per_512_sequences() {
    let (tok, fs) = (tok(), features());
    let tc = TrainConfig { micro_batch: 64, accum_steps: 8, ..Default::default() };
    assert_eq!(tc.effective_batch(), 512);
    let p: ParameterSet<f32> = random_params(&cfg(), 3, 0.1);
    let mut trainer = Trainer::new(p, tc, &tok, &fs).unwrap();
    let mut rec = Recorder::default();
    for i in 0..16u64 {
        trainer.micro_step(&fixed_batch(&tok, 100 + i, 64, 5), &mut rec).unwrap();
        assert_eq!(trainer.step(), (i + 1) / 8);
    }
    assert_eq!(rec.steps.iter().map(|s| s.step).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(trainer.progress().micro_batches, 16);
}

#[test]
fn partial_trailing_group_is_stepped_unless_max_steps_reached() {
    let (tok, fs) = (tok(), features());
    let p: ParameterSet<f32> = random_params(&cfg(), 4, 0.1);
    let data: Vec<Batch> = (0..5).map(|s| fixed_batch(&tok, s, 2, 6)).collect();
    let out = tinyvlm::train(p.clone(), data.clone(), &train_cfg(2), &tok, &fs, &mut NullSink).unwrap();
    assert_eq!(out.progress.step, 3);
    let capped = TrainConfig { max_steps: Some(2), ..train_cfg(2) };
    let out = tinyvlm::train(p, data, &capped, &tok, &fs, &mut NullSink).unwrap();
    assert_eq!(out.progress.step, 2);
    assert_eq!(out.progress.micro_batches, 4);
}

#[test]
fn milestones_fire_once_at_first_crossing() {
    let (tok, fs) = (tok(), features());
    // 2 rows of 4 body tokens: 8 subwords, 800k words per micro-batch.
    let tc = TrainConfig { word_ratio: 1e-5, ..train_cfg(3) };
    let p: ParameterSet<f32> = random_params(&cfg(), 5, 0.1);
    let mut trainer = Trainer::new(p, tc, &tok, &fs).unwrap();
    let mut rec = Recorder::default();
    for i in 0..14 {
        let b = fixed_batch(&tok, i, 2, 7);
        assert_eq!(b.subword_count(&tok), 8);
        trainer.micro_step(&b, &mut rec).unwrap();
    }
    let fired: Vec<(u64, u64, u64)> = rec.milestones.iter().map(|m| (m.threshold, m.words_seen, m.step)).collect();
    let want: Vec<(u64, u64, u64)> = vec![
        (1_000_000, 1_600_000, 0),
        (2_000_000, 2_400_000, 0),
        (3_000_000, 3_200_000, 1),
        (4_000_000, 4_000_000, 1),
        (5_000_000, 5_600_000, 2),
        (6_000_000, 6_400_000, 2),
        (7_000_000, 7_200_000, 2),
        (8_000_000, 8_000_000, 3),
        (9_000_000, 9_600_000, 3),
        (10_000_000, 10_400_000, 4),
    ];
    assert_eq!(fired, want);
    assert_eq!(trainer.words_seen(), 11_200_000);
}

#[test]
fn checkpoint_sink_writes_milestones_and_log() {
    let (tok, fs) = (tok(), features());
    let tc = TrainConfig { word_ratio: 1e-5, ..train_cfg(2) };
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        words_seen: 0,
        modality: Modality::Multimodal,
        seed: 0,
        tokenizer_hash: tok.hash(),
        merge_info: None,
    };
    let mut sink = CheckpointSink::new(dir.path(), meta, tc.clone(), false, false).unwrap();
    let p: ParameterSet<f32> = random_params(&cfg(), 6, 0.1);
    let data: Vec<Batch> = (0..3).map(|s| fixed_batch(&tok, s, 2, 7)).collect();
    tinyvlm::train(p, data, &tc, &tok, &fs, &mut sink).unwrap();
    sink.flush().unwrap();
    let (_, m) = load_checkpoint(&dir.path().join("ckpt_1000000")).unwrap();
    assert_eq!(m.words_seen, 1_600_000);
    assert!(dir.path().join("ckpt_2000000").is_dir());
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,words_seen,loss,lr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1600000,"));
}

#[test]
fn resume_continues_bit_identically() {
    let (tok, fs) = (tok(), features());
    let tc = TrainConfig { word_ratio: 1e-5, ..train_cfg(3) };
    let p: ParameterSet<f32> = random_params(&cfg(), 7, 0.2);
    let data: Vec<Batch> = (0..11).map(|s| fixed_batch(&tok, 50 + s, 2, 7)).collect();
    let full = tinyvlm::train(p.clone(), data.clone(), &tc, &tok, &fs, &mut NullSink).unwrap();

    // Stop after 4 micro-batches (mid-group) and restart from the milestone
    // written by the fourth, whose progress points back at the group start.
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        words_seen: 0,
        modality: Modality::Multimodal,
        seed: 0,
        tokenizer_hash: tok.hash(),
        merge_info: None,
    };
    let mut sink = CheckpointSink::new(dir.path(), meta, tc.clone(), false, false).unwrap();
    let mut first = Trainer::new(p, tc.clone(), &tok, &fs).unwrap();
    for b in &data[..4] {
        first.micro_step(b, &mut sink).unwrap();
    }
    let last = sink.written().last().unwrap().clone();
    assert!(last.ends_with("ckpt_3000000"));
    let (params, _, state) = load_training_checkpoint(&last).unwrap();
    let state = state.unwrap();
    assert_eq!(state.progress.micro_batches, 3);
    let skip = state.progress.micro_batches as usize;
    let resumed = Trainer::resume(params, state.optimizer, state.progress, tc, &tok, &fs).unwrap();
    let out = resumed.run(data[skip..].iter().cloned(), &mut NullSink).unwrap();

    assert_eq!(out.progress, full.progress);
    assert_eq!(out.optimizer.t, full.optimizer.t);
    for ((_, a), (_, b)) in out.params.iter().zip(full.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn training_state_survives_disk() {
    let (tok, fs) = (tok(), features());
    let tc = train_cfg(2);
    let p: ParameterSet<f32> = random_params(&cfg(), 8, 0.2);
    let data: Vec<Batch> = (0..4).map(|s| fixed_batch(&tok, s, 2, 6)).collect();
    let out = tinyvlm::train(p, data, &tc, &tok, &fs, &mut NullSink).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("state");
    let meta = CheckpointMeta {
        words_seen: out.progress.schedule.words_seen,
        modality: Modality::TextOnly,
        seed: 0,
        tokenizer_hash: tok.hash(),
        merge_info: None,
    };
    let state = TrainingState { progress: out.progress.clone(), train_config: tc.clone(), optimizer: out.optimizer.clone() };
    write_checkpoint(&out.params, &meta, Some(&state), &ck, false).unwrap();
    let (p2, m2, s2) = load_training_checkpoint(&ck).unwrap();
    assert_eq!(m2, meta);
    assert_eq!(max_diff(&p2, &out.params), 0.0);
    assert_eq!(s2.unwrap(), state);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics_and_last_good() {
    let (tok, fs) = (tok(), features());
    let tc = train_cfg(2);
    let mut p: ParameterSet<f32> = random_params(&cfg(), 9, 0.2);
    let batches: Vec<Batch> = (0..3).map(|s| fixed_batch(&tok, s, 2, 6)).collect();
    // A head large enough to overflow the logits.
    p.get_mut("lm_head").unwrap().data.fill(3e38);
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        words_seen: 0,
        modality: Modality::Multimodal,
        seed: 0,
        tokenizer_hash: tok.hash(),
        merge_info: None,
    };
    let mut sink = CheckpointSink::new(dir.path(), meta, tc.clone(), false, false).unwrap();
    let err = tinyvlm::train(p.clone(), batches.clone(), &tc, &tok, &fs, &mut sink).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let report: AbortReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(ABORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.step, 0);
    assert_eq!(report.micro_batch, 0);
    assert_eq!(report.batch_hash, batch_hash(&batches[0]));
    assert!(report.parameter.is_some());
    assert!(!report.loss.is_finite());
    let (last_good, _) = load_checkpoint(&dir.path().join(LAST_GOOD_DIR)).unwrap();
    assert_eq!(max_diff(&last_good, &p), 0.0);
    assert!(last_good.first_non_finite().is_none());
}

#[test]
fn trainer_rejects_mismatched_inputs() {
    let (tok, fs) = (tok(), features());
    let wrong_vocab: ParameterSet<f32> = random_params(&ModelConfig::new(1, 8, 2, 8, V + 1, 16, 4), 0, 0.1);
    assert!(matches!(Trainer::new(wrong_vocab, train_cfg(1), &tok, &fs), Err(Error::Config(_))));
    let wrong_dim: ParameterSet<f32> = random_params(&ModelConfig::new(1, 8, 2, 8, V, 16, 3), 0, 0.1);
    assert!(Trainer::new(wrong_dim, train_cfg(1), &tok, &fs).is_err());
    let p: ParameterSet<f32> = random_params(&cfg(), 0, 0.1);
    let bad = TrainConfig { accum_steps: 0, ..train_cfg(1) };
    assert!(Trainer::new(p, bad, &tok, &fs).is_err());
}

// Independent scalar AdamW.
fn reference_adamw(theta: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64, c: &AdamWConfig) {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let mh = *m / (1.0 - c.beta1.powi(t));
    let vh = *v / (1.0 - c.beta2.powi(t));
    *theta -= c.lr * (mh / (vh.sqrt() + c.eps)) + c.lr * c.weight_decay * *theta;
}

fn scalar_set(x: f64) -> ParameterSet<f64> {
    let mut p: ParameterSet<f64> = tinyvlm::init_model(&ModelConfig::new(1, 2, 1, 2, 6, 2, 1)).unwrap();
    for (_, t) in p.iter_mut() {
        t.data.fill(x);
    }
    p
}

#[test]
fn adamw_matches_scalar_reference_on_a_quadratic() {
    let c = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
    let mut p = scalar_set(3.0);
    let mut state = OptimizerState::new(&p);
    let (mut theta, mut m, mut v) = (3.0, 0.0, 0.0);
    for t in 1..=2 {
        // f(θ) = (θ − 1)², g = 2(θ − 1)
        let g = 2.0 * (theta - 1.0);
        let mut grads = p.zeros_like();
        for (_, tg) in grads.iter_mut() {
            tg.data.fill(g);
        }
        adamw_step(&mut p, &grads, &mut state, &c, c.lr).unwrap();
        reference_adamw(&mut theta, &mut m, &mut v, t, g, &c);
        assert_eq!(state.t, t as u64);
        for (_, tp) in p.iter() {
            assert!(tp.data.iter().all(|&x| (x - theta).abs() < 1e-10));
        }
    }
}

#[test]
fn adamw_first_step_and_zero_gradient() {
    let c = AdamWConfig { lr: 1e-3, ..Default::default() };
    let mut p = scalar_set(0.5);
    let mut state = OptimizerState::new(&p);
    let zero = p.zeros_like();
    adamw_step(&mut p, &zero, &mut state, &c, c.lr).unwrap();
    assert_eq!(max_diff(&p, &scalar_set(0.5)), 0.0);

    for g in [-4.0, 1e-3, 7.5] {
        let mut p = scalar_set(0.5);
        let mut state = OptimizerState::new(&p);
        let mut grads = p.zeros_like();
        for (_, t) in grads.iter_mut() {
            t.data.fill(g);
        }
        adamw_step(&mut p, &grads, &mut state, &c, c.lr).unwrap();
        let step = p.get("lm_head").unwrap().data[0] - 0.5;
        assert!((step + c.lr * f64::signum(g)).abs() <= (c.lr * c.eps / g.abs()) * 1.0001);
    }

    let mut grads = p.zeros_like();
    grads.get_mut("lm_head").unwrap().data[0] = f64::NAN;
    assert!(adamw_step(&mut p, &grads, &mut state, &c, c.lr).is_err());
}
