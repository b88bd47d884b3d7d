mod common;

use avatar_core::engine::Tensor;
use avatar_core::inversion::{LogRecord, Phase, TrainObserver, Trainer};
use avatar_core::losses::{AnimationLoss, LossConfig};
use avatar_core::model::Model;
use avatar_core::synthetic::Dataset;
use common::{tiny_dataset, tiny_model, tiny_render, tiny_train};

#[derive(Default)]
struct Recorder {
    records: Vec<LogRecord>,
    ema: Vec<[Vec<Tensor<f32>>; 3]>,
}

impl TrainObserver for Recorder {
    fn record(&mut self, rec: &LogRecord) -> avatar_core::Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }

    fn ema(&mut self, old: &[Tensor<f32>], live: &[Tensor<f32>], new: &[Tensor<f32>]) {
        self.ema.push([old.to_vec(), live.to_vec(), new.to_vec()]);
    }
}

fn trainer(n_id: usize, n_mo: usize, joint: bool) -> Trainer {
    let model = Model::init(&tiny_model(), 3).unwrap();
    let loss = AnimationLoss::new(LossConfig { smoothness_samples: 16, ..LossConfig::default() }).unwrap();
    Trainer::new(model, loss, avatar_core::config::TrainConfig { joint, ..tiny_train(n_id, n_mo) }, tiny_render()).unwrap()
}

fn data() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 3);
    (dir, data)
}

fn steps(rec: &Recorder) -> Vec<(Phase, avatar_core::inversion::Checksums)> {
    rec.records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { phase, checksums, .. } => Some((*phase, *checksums)),
            LogRecord::Ema { .. } => None,
        })
        .collect()
}

#[test]
fn one_iteration_alternates_then_finetunes_then_averages() {
    let (_dir, data) = data();
    let mut t = trainer(5, 3, false);
    let mut rec = Recorder::default();
    t.run_iteration(&data, &mut rec).unwrap();

    let phases: Vec<Phase> = steps(&rec).iter().map(|s| s.0).collect();
    let mut want = vec![Phase::Id; 5];
    want.extend([Phase::Mo; 3]);
    want.push(Phase::Finetune);
    assert_eq!(phases, want);
    assert_eq!(rec.records.iter().filter(|r| matches!(r, LogRecord::Ema { .. })).count(), 1);
    assert!(matches!(rec.records.last(), Some(LogRecord::Ema { .. })));
}

#[test]
fn frozen_parameters_do_not_move_within_a_phase() {
    let (_dir, data) = data();
    let mut t = trainer(4, 3, false);
    let start = (t.model.controller_checksum(), t.model.generator_checksum());
    let mut rec = Recorder::default();
    t.run_iteration(&data, &mut rec).unwrap();
    let s = steps(&rec);

    let id: Vec<_> = s.iter().filter(|x| x.0 == Phase::Id).map(|x| x.1).collect();
    assert!(id.iter().all(|c| (c.controller, c.generator) == start));
    assert!(id.windows(2).all(|w| w[0].w_id != w[1].w_id), "latent should move every id step");

    let mo: Vec<_> = s.iter().filter(|x| x.0 == Phase::Mo).map(|x| x.1).collect();
    let last_id = *id.last().unwrap();
    assert!(mo.iter().all(|c| c.w_id == last_id.w_id && c.generator == start.1));
    assert_ne!(mo[0].controller, start.0);
    assert!(mo.windows(2).all(|w| w[0].controller != w[1].controller));

    let fin = s.last().unwrap().1;
    assert_eq!((fin.w_id, fin.controller), (mo[2].w_id, mo[2].controller));
    assert_ne!(fin.generator, start.1);
}

#[test]
fn joint_steps_update_latent_and_controller_together() {
    let (_dir, data) = data();
    let mut t = trainer(3, 2, true);
    let mut rec = Recorder::default();
    t.run_iteration(&data, &mut rec).unwrap();
    let s = steps(&rec);
    assert_eq!(s.len(), 6);
    assert!(s[..5].iter().all(|x| x.0 == Phase::Joint));
    assert!(s[..5].windows(2).all(|w| w[0].1.w_id != w[1].1.w_id && w[0].1.controller != w[1].1.controller));
}

#[test]
fn ema_shadow_matches_hand_recomputation() {
    let (_dir, data) = data();
    let mut t = trainer(2, 2, false);
    let mut rec = Recorder::default();
    for _ in 0..2 {
        t.run_iteration(&data, &mut rec).unwrap();
    }
    let beta = t.train.ema_beta;
    for [old, live, new] in &rec.ema {
        let mut worst = 0.0f64;
        for ((o, l), n) in old.iter().zip(live).zip(new) {
            for ((&o, &l), &n) in o.data().iter().zip(l.data()).zip(n.data()) {
                worst = worst.max((beta * o as f64 + (1.0 - beta) * l as f64 - n as f64).abs());
            }
        }
        assert!(worst <= 1e-6, "ema deviation {worst:e}");
    }
    assert_eq!(rec.ema.last().unwrap()[2], t.shadow());
}

#[test]
fn shadow_is_a_fixed_point_without_controller_steps() {
    let (_dir, data) = data();
    let mut t = trainer(3, 0, false);
    let before = t.shadow().to_vec();
    t.run_iteration(&data, &mut ()).unwrap();
    assert_eq!(t.shadow(), before.as_slice());
}

#[test]
fn codebook_stays_orthogonal_after_every_step() {
    let (_dir, data) = data();
    let mut t = trainer(1, 4, false);
    let mut rec = Recorder::default();
    for _ in 0..3 {
        t.run_iteration(&data, &mut rec).unwrap();
    }
    for r in &rec.records {
        if let LogRecord::Step { codebook_dot, .. } = r {
            assert!(*codebook_dot <= 1e-4, "{codebook_dot}");
        }
    }
}

#[test]
fn training_is_reproducible() {
    let (_dir, data) = data();
    let run = || {
        let mut t = trainer(2, 1, false);
        t.run_iteration(&data, &mut ()).unwrap();
        t.into_model().unwrap().to_checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn log_lines_are_tagged_json() {
    let (_dir, data) = data();
    let mut t = trainer(1, 1, false);
    let mut log = avatar_core::inversion::JsonLinesLog(Vec::new());
    t.run_iteration(&data, &mut log).unwrap();
    let text = String::from_utf8(log.0).unwrap();
    let kinds: Vec<String> = text.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].to_string()).collect();
    assert_eq!(kinds, ["\"id\"", "\"mo\"", "\"finetune\"", "null"]);
}
