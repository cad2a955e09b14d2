//! Mini-batch training: adaptive-moment updates, deterministic shuffling,
//! early stopping on validation ego-motion loss, per-epoch history, and
//! resumable trainer checkpoints.

use crate::flow::{self, FlowEncoding, FlowError, SequenceManifest};
use crate::geometry::MotionVector;
use crate::loss::{self, LossError, TrainConfig};
use crate::model::{self, ModelError, ModelGraph, TensorRecord};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// Shuffle streams must not collide with the parameter-init streams, which
// salt by small layer indices.
const SHUFFLE_SALT: u64 = 1 << 32;

// ── Data ─────────────────────────────────────────────────────────────

/// In-memory dataset of encoded flow tensors and their motion labels.
pub struct DataSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<MotionVector>,
}

impl DataSet {
    pub fn from_manifest(
        manifest: &SequenceManifest,
        resize: Option<(usize, usize)>,
        encoding: &FlowEncoding,
    ) -> Result<Self> {
        let mut inputs = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let (tensor, _) = flow::load_encoded(&entry.flow_path, resize, encoding)?;
            inputs.push(tensor);
            labels.push(entry.label);
        }
        if let Some(first) = inputs.first() {
            let shape = first.shape().to_vec();
            if inputs.iter().any(|t| t.shape() != shape) {
                return Err(TrainError::Contract(
                    "dataset contains mixed flow shapes".to_string(),
                ));
            }
        }
        Ok(DataSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Assembles (N, h, w, 2) and (N, 6) tensors for the given indices.
    fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let sample = &self.inputs[indices[0]];
        let per = sample.len();
        let mut xs = Vec::with_capacity(indices.len() * per);
        let mut ys = Vec::with_capacity(indices.len() * 6);
        for &i in indices {
            xs.extend_from_slice(self.inputs[i].values());
            ys.extend_from_slice(&self.labels[i].to_array());
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(sample.shape());
        (
            Tensor::new(shape, xs).expect("consistent sample shapes"),
            Tensor::new(vec![indices.len(), 6], ys).expect("labels are 6-vectors"),
        )
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected adaptive-moment update of one parameter buffer.
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
) {
    let t = step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// First/second moments per parameter tensor plus the global step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    /// Applies one update to every parameter from the named gradient map.
    /// Parameters without gradients receive explicit zeros, which leaves
    /// them unchanged from a zero-moment start.
    pub fn apply(
        &mut self,
        graph: &mut ModelGraph,
        grads: &BTreeMap<String, (Tensor, Tensor)>,
        lr: f64,
    ) {
        self.step += 1;
        for (name, params) in graph.params.iter_mut() {
            let (gw, gb) = &grads[name];
            for (suffix, tensor, grad) in [
                ("weight", &mut params.weights, gw),
                ("bias", &mut params.bias, gb),
            ] {
                let key = format!("{name}.{suffix}");
                let (m, v) = self
                    .moments
                    .entry(key)
                    .or_insert_with(|| (vec![0.0; tensor.len()], vec![0.0; tensor.len()]));
                // A corrupted or foreign trainer record must not silently
                // truncate the update.
                if m.len() != tensor.len() {
                    *m = vec![0.0; tensor.len()];
                    *v = vec![0.0; tensor.len()];
                }
                adam_update(tensor.values_mut(), grad.values(), m, v, self.step, lr);
            }
        }
    }

    fn to_records(&self) -> Vec<TensorRecord> {
        let mut records = Vec::new();
        for (key, (m, v)) in &self.moments {
            records.push(TensorRecord {
                name: format!("adam.m.{key}"),
                shape: vec![m.len()],
                values: m.clone(),
            });
            records.push(TensorRecord {
                name: format!("adam.v.{key}"),
                shape: vec![v.len()],
                values: v.clone(),
            });
        }
        records
    }

    fn from_records(records: &[TensorRecord]) -> AdamState {
        let mut state = AdamState::default();
        let mut halves: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        for rec in records {
            if let Some(key) = rec.name.strip_prefix("adam.m.") {
                halves.entry(key.to_string()).or_default().0 = Some(rec.values.clone());
            } else if let Some(key) = rec.name.strip_prefix("adam.v.") {
                halves.entry(key.to_string()).or_default().1 = Some(rec.values.clone());
            }
        }
        for (key, (m, v)) in halves {
            if let (Some(m), Some(v)) = (m, v) {
                state.moments.insert(key, (m, v));
            }
        }
        state
    }
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub train_em: f64,
    pub train_ae: f64,
    pub val_em: f64,
    pub val_ae: f64,
}

/// Trainer counters that, together with the parameters and moments, make a
/// run resumable. The shuffle order is derived from (seed, epoch), so no
/// raw generator state needs to survive serialization.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_em: f64,
    pub since_best: usize,
    pub adam: AdamState,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            epoch: 0,
            best_val_em: f64::INFINITY,
            since_best: 0,
            adam: AdamState::default(),
        }
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochSummary>,
    pub best_val_em: f64,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub stopped_early: bool,
}

/// Mean (loss_em, loss_ae) over a dataset without mutating anything; the
/// reconstruction term is reported whenever the graph has a decoder.
pub fn evaluate_epoch(
    graph: &ModelGraph,
    data: &DataSet,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(TrainError::Contract("cannot evaluate an empty dataset".to_string()));
    }
    let mut em_sum = 0.0;
    let mut ae_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(cfg.batch_size) {
        let (em, ae) = batch_losses(graph, data, chunk, cfg)?;
        em_sum += em * chunk.len() as f64;
        ae_sum += ae * chunk.len() as f64;
    }
    Ok((em_sum / data.len() as f64, ae_sum / data.len() as f64))
}

fn batch_losses(
    graph: &ModelGraph,
    data: &DataSet,
    chunk: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (x, y) = data.batch(chunk);
    let mut pass = graph.forward(&x)?;
    let tape = &mut pass.tape;
    let label = tape.leaf(y);
    let em = loss::loss_em(tape, pass.motion, label, cfg.beta)?;
    let em_val = tape.value(em).item()?;
    let ae_val = match pass.reconstruction {
        Some(recon) => {
            let ae = loss::loss_ae(tape, recon, pass.input_id)?;
            tape.value(ae).item()?
        }
        None => 0.0,
    };
    Ok((em_val, ae_val))
}

/// Trains from a fresh state. History goes to `out_dir/history.csv`; the
/// best-validation trainer checkpoint to `out_dir/checkpoint_best.lsvo` and
/// the running one to `out_dir/checkpoint_last.lsvo`.
pub fn train(
    graph: &mut ModelGraph,
    train_data: &DataSet,
    val_data: &DataSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run_training(graph, train_data, val_data, cfg, out_dir, TrainState::default())
}

/// Continues training from a trainer checkpoint written by a previous run.
/// Given the same config and data, two resumptions from the same file
/// produce identical loss sequences.
pub fn resume(
    checkpoint: &Path,
    train_data: &DataSet,
    val_data: &DataSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(ModelGraph, TrainOutcome)> {
    let mut graph = model::load_checkpoint(checkpoint)?;
    let records = model::read_container(checkpoint)?;
    let state = load_state(&records);
    let outcome = run_training(&mut graph, train_data, val_data, cfg, out_dir, state)?;
    Ok((graph, outcome))
}

fn load_state(records: &[TensorRecord]) -> TrainState {
    let mut state = TrainState {
        adam: AdamState::from_records(records),
        ..TrainState::default()
    };
    if let Some(rec) = records.iter().find(|r| r.name == "state.scalars") {
        if rec.values.len() == 4 {
            state.epoch = rec.values[0] as usize;
            state.adam.step = rec.values[1] as u64;
            state.best_val_em = rec.values[2];
            state.since_best = rec.values[3] as usize;
        }
    }
    state
}

fn save_trainer(
    graph: &ModelGraph,
    state: &TrainState,
    path: &Path,
) -> std::result::Result<(), ModelError> {
    let mut extra = state.adam.to_records();
    extra.push(TensorRecord {
        name: "state.scalars".to_string(),
        shape: vec![4],
        values: vec![
            state.epoch as f64,
            state.adam.step as f64,
            state.best_val_em,
            state.since_best as f64,
        ],
    });
    model::save_checkpoint_with(graph, path, &extra)
}

fn run_training(
    graph: &mut ModelGraph,
    train_data: &DataSet,
    val_data: &DataSet,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut state: TrainState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::Contract(
            "training and validation manifests must be non-empty".to_string(),
        ));
    }
    let expect = vec![graph.input.0, graph.input.1, graph.input.2];
    if train_data.inputs[0].shape() != expect.as_slice() {
        return Err(TrainError::Contract(format!(
            "dataset samples are {:?}, graph expects {:?}",
            train_data.inputs[0].shape(),
            expect
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let history_path = out_dir.join("history.csv");
    let mut history_file = std::fs::File::create(&history_path)?;
    writeln!(history_file, "epoch,step,train_em,train_ae,val_em,val_ae")?;

    let best_path = out_dir.join("checkpoint_best.lsvo");
    let last_path = out_dir.join("checkpoint_last.lsvo");
    let mut history = Vec::new();
    let mut best_epoch = state.epoch;
    let mut stopped_early = false;

    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        Rng::stream(cfg.seed, SHUFFLE_SALT + epoch as u64).shuffle(&mut order);

        let mut em_sum = 0.0;
        let mut ae_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_data.batch(chunk);
            let mut pass = graph.forward(&x)?;
            let tape = &mut pass.tape;
            let label = tape.leaf(y);
            let em = loss::loss_em(tape, pass.motion, label, cfg.beta)?;
            // The reconstruction term only exists for graphs with a decoder;
            // single-task training reduces to the motion loss.
            let (joint, ae_val) = match (cfg.lambda > 0.0, pass.reconstruction) {
                (true, Some(recon)) => {
                    let ae = loss::loss_ae(tape, recon, pass.input_id)?;
                    let weighted = tape.scale(ae, cfg.lambda);
                    (tape.add(em, weighted)?, tape.value(ae).item()?)
                }
                _ => (em, 0.0),
            };
            let joint_val = tape.value(joint).item()?;
            if !joint_val.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            em_sum += tape.value(em).item()? * chunk.len() as f64;
            ae_sum += ae_val * chunk.len() as f64;

            let mut grads = tape.backward(joint)?;
            let named = graph.collect_gradients(&pass.param_ids, &mut grads);
            state.adam.apply(graph, &named, cfg.learning_rate);
        }
        let train_em = em_sum / train_data.len() as f64;
        let train_ae = ae_sum / train_data.len() as f64;
        let (val_em, val_ae) = evaluate_epoch(graph, val_data, cfg)?;

        state.epoch = epoch + 1;
        let summary = EpochSummary {
            epoch,
            step: state.adam.step,
            train_em,
            train_ae,
            val_em,
            val_ae,
        };
        writeln!(
            history_file,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            summary.epoch, summary.step, train_em, train_ae, val_em, val_ae
        )?;
        history.push(summary);

        if val_em < state.best_val_em {
            state.best_val_em = val_em;
            state.since_best = 0;
            best_epoch = epoch;
            save_trainer(graph, &state, &best_path)?;
        } else {
            state.since_best += 1;
        }
        save_trainer(graph, &state, &last_path)?;
        if state.since_best > cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if !best_path.exists() {
        save_trainer(graph, &state, &best_path)?;
    }
    if !last_path.exists() {
        save_trainer(graph, &state, &last_path)?;
    }
    Ok(TrainOutcome {
        history,
        best_val_em: state.best_val_em,
        best_epoch,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        stopped_early,
    })
}
