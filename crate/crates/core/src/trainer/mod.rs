//! Training loop, checkpoints, evaluation entry points and the ablation
//! ladder.

mod ablation;
mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat};
use crate::dataset::{batches_per_epoch, Batch, BatchSampler, TrainScan, TrainSet};
use crate::error::{Result, WsdfError};
use crate::evaluation::{self, Evaluation, FaceAutoencoder};
use crate::losses::{loss_jac, loss_kl, loss_mi, loss_neu, loss_rec, LossBreakdown};
use crate::mesh::io::write_mesh_batch;
use crate::mesh::{denormalize, normalize, FaceMesh, NormalizationStats, ScanRecord};
use crate::networks::{reparameterize_graph, WsdfModel};
use crate::neutral_bank::{confidence, NeutralBank};

pub use ablation::{ablation_suite, ladder_flags, AblationReport, AblationRow, ABLATION_LABELS};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{load_template, AblationFlags, DataConfig, DataKind, LoadedData, OptimizerConfig, TrainConfig};
pub use optim::AdamW;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub neu: f64,
    pub jac: f64,
    pub mi: f64,
    pub total: f64,
}

impl StepLog {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown { rec: self.rec, kl: self.kl, neu: self.neu, jac: self.jac, mi: self.mi, total: self.total }
    }
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| WsdfError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| WsdfError::parse(path, format!("line {}: {e}", n + 1))))
        .collect()
}

/// Frozen model together with the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: WsdfModel,
    pub norm: NormalizationStats,
}

const INFERENCE_CHUNK: usize = 64;

impl TrainedModel {
    fn check_mesh(&self, m: &FaceMesh) -> Result<()> {
        if m.vertex_count() != self.model.topology().vertex_count() {
            return Err(WsdfError::Shape(format!(
                "mesh has {} vertices, checkpoint topology has {}",
                m.vertex_count(),
                self.model.topology().vertex_count()
            )));
        }
        Ok(())
    }
}

impl FaceAutoencoder for TrainedModel {
    fn latent_dims(&self) -> (usize, usize) {
        (self.model.d_id(), self.model.d_exp())
    }

    fn encode(&self, scans: &[&FaceMesh]) -> Result<(Array2<f64>, Array2<f64>)> {
        let (di, de) = self.latent_dims();
        let mut mu_id = Array2::zeros((0, di));
        let mut mu_exp = Array2::zeros((0, de));
        for chunk in scans.chunks(INFERENCE_CHUNK) {
            let mut x = Mat::zeros((chunk.len(), self.model.output_dim()));
            for (r, m) in chunk.iter().enumerate() {
                self.check_mesh(m)?;
                let n = normalize(&m.with_topology(self.model.topology().clone())?, &self.norm)?;
                x.row_mut(r).assign(&ndarray::ArrayView1::from(n.flat().as_slice()));
            }
            let (a, b) = self.model.encode_means(&x)?;
            mu_id.append(Axis(0), a.view()).expect("matching width");
            mu_exp.append(Axis(0), b.view()).expect("matching width");
        }
        Ok((mu_id, mu_exp))
    }

    fn decode(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>) -> Result<Vec<FaceMesh>> {
        let mut out = Vec::with_capacity(z_id.nrows());
        for start in (0..z_id.nrows()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(z_id.nrows());
            let flat = self.model.decode(
                &z_id.slice(ndarray::s![start..end, ..]).to_owned(),
                &z_exp.slice(ndarray::s![start..end, ..]).to_owned(),
            )?;
            for row in flat.rows() {
                let m = FaceMesh::from_flat(&row.to_vec(), self.model.topology().clone())?;
                out.push(denormalize(&m, &self.norm)?);
            }
        }
        Ok(out)
    }
}

/// Stateful trainer; [`Trainer::step`] runs exactly one optimisation step.
pub struct Trainer {
    config: TrainConfig,
    model: WsdfModel,
    norm: NormalizationStats,
    train: TrainSet,
    /// Normalised training scans as rows.
    flat: Mat,
    optimizer: AdamW,
    bank: NeutralBank,
    sampler: BatchSampler,
    noise: ChaCha8Rng,
    step: u64,
    out_dir: Option<PathBuf>,
    log_writer: Option<BufWriter<fs::File>>,
}

const NOISE_STREAM: u64 = 0x6e6f_6973_65;

impl Trainer {
    /// Fits normalization on the training scans and initialises a fresh model.
    pub fn new(config: TrainConfig, train_records: &[ScanRecord]) -> Result<Self> {
        config.validate()?;
        let first = train_records.first().ok_or_else(|| WsdfError::Data("no training scans".into()))?;
        let meshes: Vec<&FaceMesh> = train_records.iter().map(|r| &r.mesh).collect();
        let norm = NormalizationStats::fit(&meshes)?;
        let model = WsdfModel::new(config.model.clone(), first.mesh.topology().clone(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer, model.params());
        let bank = NeutralBank::new(config.bank_beta)?;
        Self::assemble(config, model, norm, optimizer, bank, train_records)
    }

    fn assemble(
        config: TrainConfig,
        model: WsdfModel,
        norm: NormalizationStats,
        optimizer: AdamW,
        bank: NeutralBank,
        train_records: &[ScanRecord],
    ) -> Result<Self> {
        let scans = train_records
            .iter()
            .map(|r| {
                let mesh = normalize(&r.mesh.with_topology(model.topology().clone())?, &norm)?;
                Ok(TrainScan { subject_id: r.subject_id.clone(), mesh })
            })
            .collect::<Result<Vec<_>>>()?;
        let train = TrainSet::new(scans);
        let mut flat = Mat::zeros((train.len(), model.output_dim()));
        for (i, s) in train.scans().iter().enumerate() {
            flat.row_mut(i).assign(&ndarray::ArrayView1::from(s.mesh.flat().as_slice()));
        }
        let sampler = BatchSampler::new(&train, config.sampler)?;
        let noise = ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_STREAM);
        Ok(Self {
            config,
            model,
            norm,
            train,
            flat,
            optimizer,
            bank,
            sampler,
            noise,
            step: 0,
            out_dir: None,
            log_writer: None,
        })
    }

    /// Restores the full training state saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, train_records: &[ScanRecord]) -> Result<Self> {
        let Checkpoint { trained, optimizer, bank, step, sampler_pos, noise_pos } = ckpt;
        let mut t = Self::assemble(trained.config, trained.model, trained.norm, optimizer, bank, train_records)?;
        t.step = step;
        t.sampler.set_word_pos(sampler_pos);
        t.noise.set_word_pos(noise_pos);
        Ok(t)
    }

    /// Directs the metrics log, checkpoints and failure dumps to `dir`.
    pub fn set_output_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| WsdfError::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(self.step > 0)
            .write(true)
            .truncate(self.step == 0)
            .open(&path)
            .map_err(|e| WsdfError::io(&path, e))?;
        self.log_writer = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_owned());
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn bank(&self) -> &NeutralBank {
        &self.bank
    }

    pub fn model(&self) -> &WsdfModel {
        &self.model
    }

    pub fn norm(&self) -> &NormalizationStats {
        &self.norm
    }

    pub fn train_set(&self) -> &TrainSet {
        &self.train
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        batches_per_epoch(self.train.len(), self.config.sampler.batch_size())
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    /// Draws the next batch without training on it.
    pub fn next_batch(&mut self) -> Batch {
        self.sampler.next_batch()
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.sampler.next_batch();
        self.step_on(&batch)
    }

    /// One optimisation step on a given batch. The bank is read before and
    /// updated after the optimizer step.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepLog> {
        let rows = batch.indices();
        let b = rows.len();
        let x = self.flat.select(Axis(0), &rows);
        let (d_id, d_exp) = (self.model.d_id(), self.model.d_exp());
        let flags = self.config.ablation;
        let w = self.config.loss;

        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let post = self.model.encode_graph(&mut g, &p, xv)?;
        let noise_id = Mat::from_shape_fn((b, d_id), |_| self.noise.sample(StandardNormal));
        let noise_exp = Mat::from_shape_fn((b, d_exp), |_| self.noise.sample(StandardNormal));
        let z_id = reparameterize_graph(&mut g, post.mu_id, post.logvar_id, noise_id);
        let z_exp = reparameterize_graph(&mut g, post.mu_exp, post.logvar_exp, noise_exp);
        let tangent = flags.enable_jac.then_some(z_exp);
        let (x_rec, jvp) = self.model.decode_graph(&mut g, &p, z_id, z_exp, tangent);
        let zero = g.constant(Mat::zeros((b, d_exp)));
        let (x_neu, _) = self.model.decode_graph(&mut g, &p, z_id, zero, None);

        let rec = loss_rec(&mut g, xv, x_rec);
        let kl = loss_kl(&mut g, post.mu_id, post.logvar_id, post.mu_exp, post.logvar_exp);
        let mut total = g.add(rec, kl);
        let (mut neu_v, mut jac_v, mut mi_v) = (0.0, 0.0, 0.0);
        if flags.enable_neutral_bank {
            let (targets, weights) = self.bank_targets(batch)?;
            let neu = loss_neu(&mut g, targets, weights, x_neu);
            neu_v = g.scalar(neu);
            let term = g.scale(neu, w.lambda_neu);
            total = g.add(total, term);
        }
        if let Some(jvp) = jvp {
            let difference = g.value(x_rec) - g.value(x_neu);
            let (jac, _) = loss_jac(&mut g, difference, jvp, z_exp, w.gamma);
            jac_v = g.scalar(jac);
            let term = g.scale(jac, w.lambda_jac);
            total = g.add(total, term);
        }
        if flags.enable_mi {
            let mi = loss_mi(&mut g, post.mu_id, &batch.group_rows());
            mi_v = g.scalar(mi);
            let term = g.scale(mi, w.lambda_mi);
            total = g.add(total, term);
        }
        let log = StepLog {
            step: self.step,
            epoch: self.step as usize / self.steps_per_epoch(),
            rec: g.scalar(rec),
            kl: g.scalar(kl),
            neu: neu_v,
            jac: jac_v,
            mi: mi_v,
            total: g.scalar(total),
        };
        if !log.total.is_finite() {
            return Err(self.numerical_abort(batch, &x, &log, "loss"));
        }
        let mut grads = g.backward(total);
        let grads = p.collect_grads(&mut grads, self.model.params());
        if grads.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(self.numerical_abort(batch, &x, &log, "gradient"));
        }
        self.optimizer.apply(self.model.params_mut(), &grads);
        if flags.enable_neutral_bank {
            let recon = g.value(x_rec);
            for (group, idx) in batch.groups.iter().zip(batch.group_rows()) {
                self.bank.update(&group.subject_id, recon.select(Axis(0), &idx).view())?;
            }
        }
        self.step += 1;
        if let Some(w) = self.log_writer.as_mut() {
            let line = serde_json::to_string(&log).expect("plain struct");
            writeln!(w, "{line}").map_err(|e| WsdfError::io("metrics.jsonl", e))?;
        }
        Ok(log)
    }

    /// Bank rows for each scan of the batch and their confidence weights;
    /// subjects without an entry yet get weight zero.
    fn bank_targets(&self, batch: &Batch) -> Result<(Mat, Mat)> {
        let b = batch.len();
        let mut targets = Mat::zeros((b, self.model.output_dim()));
        let mut weights = Mat::zeros((b, 1));
        for (group, idx) in batch.groups.iter().zip(batch.group_rows()) {
            if let Some(entry) = self.bank.get(&group.subject_id) {
                let alpha = confidence(self.train.scan_count(&group.subject_id))?;
                for r in idx {
                    targets.row_mut(r).assign(&entry.mesh);
                    weights[[r, 0]] = alpha;
                }
            }
        }
        Ok((targets, weights))
    }

    fn numerical_abort(&self, batch: &Batch, x: &Mat, log: &StepLog, what: &str) -> WsdfError {
        let subjects: Vec<&str> = batch.groups.iter().map(|g| g.subject_id.as_str()).collect();
        let mut msg = format!("non-finite {what} at step {}: {log:?}; subjects {subjects:?}", self.step);
        if let Some(dir) = &self.out_dir {
            let dump = dir.join(format!("nan_step_{}", self.step));
            let written = (|| -> Result<()> {
                fs::create_dir_all(&dump).map_err(|e| WsdfError::io(&dump, e))?;
                let meshes = x
                    .rows()
                    .into_iter()
                    .map(|r| denormalize(&FaceMesh::from_flat(&r.to_vec(), self.model.topology().clone())?, &self.norm))
                    .collect::<Result<Vec<_>>>()?;
                write_mesh_batch(&dump.join("batch.wmb"), &meshes)?;
                let info = serde_json::json!({ "step": self.step, "subjects": subjects, "losses": log });
                fs::write(dump.join("batch.json"), info.to_string()).map_err(|e| WsdfError::io(&dump, e))
            })();
            match written {
                Ok(()) => msg.push_str(&format!("; batch dumped to {}", dump.display())),
                Err(e) => msg.push_str(&format!("; dump failed: {e}")),
            }
        }
        WsdfError::Numerical(msg)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            trained: self.trained_model(),
            optimizer: self.optimizer.clone(),
            bank: self.bank.clone(),
            step: self.step,
            sampler_pos: self.sampler.word_pos(),
            noise_pos: self.noise.get_word_pos(),
        }
    }

    pub fn trained_model(&self) -> TrainedModel {
        TrainedModel { config: self.config.clone(), model: self.model.clone(), norm: self.norm.clone() }
    }

    /// Runs the remaining steps of the configured schedule.
    pub fn run(&mut self) -> Result<Vec<StepLog>> {
        let per_epoch = self.steps_per_epoch() as u64;
        let mut logs = Vec::new();
        while self.step < self.total_steps() {
            let log = self.step()?;
            logs.push(log);
            if self.step.is_multiple_of(per_epoch) {
                let epoch = self.step / per_epoch;
                log::info!("epoch {epoch}: rec {:.5} kl {:.5} neu {:.5} jac {:.5} total {:.5}", log.rec, log.kl, log.neu, log.jac, log.total);
                let every = self.config.checkpoint_every as u64;
                if let Some(dir) = self.out_dir.clone() {
                    if every > 0 && epoch.is_multiple_of(every) && self.step < self.total_steps() {
                        self.checkpoint().save(&dir.join(format!("epoch_{epoch:04}.wsdf")))?;
                    }
                }
            }
        }
        if let Some(w) = self.log_writer.as_mut() {
            w.flush().map_err(|e| WsdfError::io("metrics.jsonl", e))?;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.checkpoint().save(&dir.join("final.wsdf"))?;
        }
        Ok(logs)
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub log: Vec<StepLog>,
    pub data: LoadedData,
    pub checkpoint: Checkpoint,
}

/// Loads the configured data, trains for `epochs` and, when `out_dir` is
/// given, writes the config, metrics log and final checkpoint there.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.data.load()?;
    let mut trainer = Trainer::new(config.clone(), &data.split.train)?;
    if let Some(dir) = out_dir {
        trainer.set_output_dir(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, config.to_toml()?).map_err(|e| WsdfError::io(&path, e))?;
    }
    log::info!(
        "training on {} scans of {} subjects, {} steps",
        trainer.train_set().len(),
        trainer.train_set().subject_count(),
        trainer.total_steps()
    );
    let log = trainer.run()?;
    Ok(TrainOutcome { trained: trainer.trained_model(), checkpoint: trainer.checkpoint(), log, data })
}

/// Evaluates on the test split, or on the training split when the data
/// has no test side.
pub fn evaluate(trained: &TrainedModel, data: &LoadedData) -> Result<Evaluation> {
    let records = if data.split.test.is_empty() { &data.split.train } else { &data.split.test };
    evaluate_records(trained, records, &data.ground_truth)
}

pub fn evaluate_records(
    trained: &TrainedModel,
    records: &[ScanRecord],
    ground_truth: &BTreeMap<String, FaceMesh>,
) -> Result<Evaluation> {
    if data_vertex_count(records) != Some(trained.model.topology().vertex_count()) {
        return Err(WsdfError::Shape("dataset topology does not match the checkpoint".into()));
    }
    let gt = (!ground_truth.is_empty()).then_some(ground_truth);
    evaluation::evaluate(trained, records, gt, &trained.config.eval, trained.config.fingerprint())
}

fn data_vertex_count(records: &[ScanRecord]) -> Option<usize> {
    let first = records.first()?.mesh.vertex_count();
    records.iter().all(|r| r.mesh.vertex_count() == first).then_some(first)
}
