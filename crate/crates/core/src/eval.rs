//! Accuracy metrics, window sweeps and path export.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::encode::{encode_trajectory, EncodeError, EncodedDataset, Scale, StationIndex};
use crate::hier::{build_streams, CurvePoint, FlatModel, FlatTrainer, HierError, HierModel, HierTrainer, Predictor, StreamEvent};
use crate::ingest::Trajectory;
use crate::nn::TrainConfig;

/// The window lengths of the standard sweep.
pub const SWEEP_WINDOWS: [usize; 4] = [50, 100, 150, 200];

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("sequences of at most {max_len} records are too short for window {window}")]
    SequenceTooShort { window: usize, max_len: usize },
    #[error(transparent)]
    Hier(#[from] HierError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Correct predictions over a number of samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 }
    }

    fn add(self, hit: bool) -> Self {
        Self { correct: self.correct + usize::from(hit), total: self.total + 1 }
    }
}

/// Hierarchical accuracies, micro-averaged over samples.
///
/// `fine` evaluates every sample with the fine model of its true area;
/// `whole` routes by the coarse prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub coarse: Accuracy,
    pub fine: Accuracy,
    pub whole: Accuracy,
    /// Fine accuracy per area model.
    pub per_model: Vec<Accuracy>,
}

impl Metrics {
    pub fn coarse_acc(&self) -> f64 {
        self.coarse.value()
    }

    pub fn fine_acc(&self) -> f64 {
        self.fine.value()
    }

    pub fn whole_acc(&self) -> f64 {
        self.whole.value()
    }
}

/// Outcome of one test sample: (coarse hit, fine hit under true routing, end-to-end hit).
fn score(model: &HierModel, e: &StreamEvent) -> Result<(bool, bool, bool), HierError> {
    let (whole, coarse) = model.predict(&e.fine_window, &e.coarse_window)?;
    let fine = if coarse == e.coarse_target { whole } else { model.predict_with(e.coarse_target, &e.fine_window)? };
    Ok((coarse == e.coarse_target, fine == e.fine_target, whole == e.fine_target))
}

pub fn evaluate(model: &HierModel, test: &[StreamEvent]) -> Result<Metrics, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let scores = test.par_iter().map(|e| score(model, e)).collect::<Result<Vec<_>, _>>()?;
    let mut m = Metrics {
        coarse: Accuracy::default(),
        fine: Accuracy::default(),
        whole: Accuracy::default(),
        per_model: vec![Accuracy::default(); model.fines.len()],
    };
    for (e, (c, f, w)) in test.iter().zip(scores) {
        m.coarse = m.coarse.add(c);
        m.fine = m.fine.add(f);
        m.whole = m.whole.add(w);
        m.per_model[e.coarse_target] = m.per_model[e.coarse_target].add(f);
    }
    Ok(m)
}

pub fn evaluate_flat(model: &FlatModel, test: &[StreamEvent]) -> Result<Accuracy, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let hits = test
        .par_iter()
        .map(|e| Ok(model.predict_fine(&e.fine_window, &e.coarse_window)? == e.fine_target))
        .collect::<Result<Vec<bool>, HierError>>()?;
    Ok(hits.into_iter().fold(Accuracy::default(), Accuracy::add))
}

/// Trains a hierarchical model for `cfg.epochs` passes over `train`.
pub fn train_hier(
    index: &StationIndex,
    train: &[StreamEvent],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(HierModel, Vec<CurvePoint>), EvalError> {
    let mut t = HierTrainer::new(HierModel::new(index.clone(), *cfg)?);
    for _ in 0..cfg.epochs {
        if parallel { t.feed_parallel(train)? } else { t.feed(train)? }
        t.flush()?;
    }
    Ok((t.model(), t.curves()))
}

/// Trains a flat model with the same stream and number of passes.
pub fn train_flat(index: &StationIndex, train: &[StreamEvent], cfg: &TrainConfig) -> Result<(FlatModel, Vec<CurvePoint>), EvalError> {
    let mut t = FlatTrainer::new(FlatModel::new(index.clone(), *cfg)?);
    for _ in 0..cfg.epochs {
        t.feed(train)?;
        t.flush()?;
    }
    Ok((t.model(), t.curves()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub window: usize,
    pub metrics: Metrics,
    pub flat: Accuracy,
    pub test_samples: usize,
}

/// Splits the dataset for window `w`, failing when either side is empty.
pub fn streams_for(ds: &EncodedDataset, w: usize, train_fraction: f64) -> Result<(Vec<StreamEvent>, Vec<StreamEvent>), EvalError> {
    let (train, test) = build_streams(ds, w, train_fraction);
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::SequenceTooShort { window: w, max_len: ds.max_len() });
    }
    Ok((train, test))
}

/// Trains and evaluates a hierarchical and a flat model for each window.
pub fn sweep_windows(ds: &EncodedDataset, windows: &[usize], cfg: &TrainConfig) -> Result<Vec<SweepRow>, EvalError> {
    // fail before any training if a window cannot be served
    let streams =
        windows.iter().map(|&w| streams_for(ds, w, cfg.train_fraction)).collect::<Result<Vec<_>, _>>()?;
    windows
        .iter()
        .zip(streams)
        .map(|(&w, (train, test))| {
            let cfg = TrainConfig { window: w, ..*cfg };
            let (hier, _) = train_hier(&ds.index, &train, &cfg, false)?;
            let (flat, _) = train_flat(&ds.index, &train, &cfg)?;
            Ok(SweepRow { window: w, metrics: evaluate(&hier, &test)?, flat: evaluate_flat(&flat, &test)?, test_samples: test.len() })
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 6] = ["window", "coarse_acc", "fine_acc_true_routing", "whole_acc", "flat_acc", "test_samples"];

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.metrics.coarse_acc().to_string(),
            r.metrics.fine_acc().to_string(),
            r.metrics.whole_acc().to_string(),
            r.flat.value().to_string(),
            r.test_samples.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(out: W, window: usize, m: &Metrics) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "coarse_acc", "fine_acc_true_routing", "whole_acc", "test_samples"])?;
    w.write_record([
        window.to_string(),
        m.coarse_acc().to_string(),
        m.fine_acc().to_string(),
        m.whole_acc().to_string(),
        m.coarse.total.to_string(),
    ])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_flat_metrics_csv<W: Write>(out: W, window: usize, acc: &Accuracy) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "flat_acc", "test_samples"])?;
    w.write_record([window.to_string(), acc.value().to_string(), acc.total.to_string()])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(out: W, curves: &[CurvePoint]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model_id", "iteration", "mean_loss", "running_accuracy"])?;
    for c in curves {
        w.write_record([c.model_id.clone(), c.iteration.to_string(), c.mean_loss.to_string(), c.running_accuracy.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// True and predicted position at one step of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRow {
    pub t: usize,
    pub true_lon: f64,
    pub true_lat: f64,
    pub pred_lon: f64,
    pub pred_lat: f64,
}

/// Predicts every position after the first `W` of a trajectory.
pub fn export_paths(model: &dyn Predictor, traj: &Trajectory, index: &StationIndex) -> Result<Vec<PathRow>, EvalError> {
    let w = model.window();
    let fine = encode_trajectory(traj, index, Scale::Fine)?;
    let coarse = encode_trajectory(traj, index, Scale::Coarse)?;
    if fine.len() <= w {
        return Err(EvalError::SequenceTooShort { window: w, max_len: fine.len() });
    }
    (w..fine.len())
        .map(|t| {
            let pred = index.point(model.predict_fine(&fine[t - w..t], &coarse[t - w..t])?);
            let truth = index.point(fine[t]);
            Ok(PathRow { t, true_lon: truth.longitude, true_lat: truth.latitude, pred_lon: pred.longitude, pred_lat: pred.latitude })
        })
        .collect()
}

pub fn write_paths_csv<W: Write>(out: W, rows: &[PathRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "true_lon", "true_lat", "pred_lon", "pred_lat"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.true_lon.to_string(),
            r.true_lat.to_string(),
            r.pred_lon.to_string(),
            r.pred_lat.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
