//! Coarse router plus one fine model per location area.
//!
//! The coarse model predicts the next area from a coarse-encoded window.
//! Each area owns a fine model whose classes are exactly that area's
//! stations, so a final prediction always lies inside the predicted area.

mod io;
mod online;

pub use io::{load_model, save_model, SavedModel, MAGIC};
pub use online::{train_online, CurvePoint, FlatTrainer, HierTrainer, SubTrainer, RUNNING_WINDOW};

use thiserror::Error;

use crate::encode::{train_len, EncodedDataset, EncodedUser, StationIndex};
use crate::ingest::Timestamp;
use crate::nn::{argmax, CnnModel, NnError, TrainConfig};

#[derive(Error, Debug)]
pub enum HierError {
    #[error("station index has no labels")]
    EmptyIndex,
    #[error("unknown coarse label {0}")]
    UnknownCoarseLabel(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("unsupported model file: {0}")]
    VersionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Seed for sub-model `id` (0 is the coarse or flat model, area `i` is `i + 1`).
pub fn model_seed(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One supervised event of the merged training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    /// Position of the user in the dataset.
    pub user: usize,
    /// Start time of the target record.
    pub time: Timestamp,
    pub fine_window: Vec<usize>,
    pub coarse_window: Vec<usize>,
    pub fine_target: usize,
    pub coarse_target: usize,
}

/// Window events of one user, tagged with whether the target falls in the
/// training prefix.
fn user_events(uid: usize, u: &EncodedUser, w: usize, train_fraction: f64) -> (Vec<StreamEvent>, Vec<StreamEvent>) {
    let cut = train_len(u.fine.len(), train_fraction);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for t in w..u.fine.len() {
        let ev = StreamEvent {
            user: uid,
            time: u.times[t],
            fine_window: u.fine[t - w..t].to_vec(),
            coarse_window: u.coarse[t - w..t].to_vec(),
            fine_target: u.fine[t],
            coarse_target: u.coarse[t],
        };
        if t < cut { train.push(ev) } else { test.push(ev) }
    }
    (train, test)
}

/// Splits each user chronologically, then merges the training parts into a
/// single time-ordered stream. Test events stay grouped by user.
pub fn build_streams(ds: &EncodedDataset, w: usize, train_fraction: f64) -> (Vec<StreamEvent>, Vec<StreamEvent>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (uid, u) in ds.users.iter().enumerate() {
        let (a, b) = user_events(uid, u, w, train_fraction);
        train.extend(a);
        test.extend(b);
    }
    train.sort_by_key(|e| e.time);
    (train, test)
}

/// Anything that maps a history window to a fine label.
pub trait Predictor {
    fn window(&self) -> usize;
    fn predict_fine(&self, fine_window: &[usize], coarse_window: &[usize]) -> Result<usize, HierError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierModel {
    pub coarse: CnnModel,
    /// Indexed by coarse label.
    pub fines: Vec<CnnModel>,
    pub index: StationIndex,
    pub cfg: TrainConfig,
    members: Vec<Vec<usize>>,
    local: Vec<usize>,
}

fn routing_tables(index: &StationIndex) -> (Vec<Vec<usize>>, Vec<usize>) {
    let members: Vec<Vec<usize>> = (0..index.n_coarse()).map(|c| index.members(c)).collect();
    let mut local = vec![0; index.n_fine()];
    for m in &members {
        for (i, &f) in m.iter().enumerate() {
            local[f] = i;
        }
    }
    (members, local)
}

impl HierModel {
    pub fn new(index: StationIndex, cfg: TrainConfig) -> Result<Self, HierError> {
        if index.n_fine() == 0 || index.n_coarse() == 0 {
            return Err(HierError::EmptyIndex);
        }
        let (members, local) = routing_tables(&index);
        let coarse = CnnModel::init(index.n_coarse(), index.n_coarse(), &cfg, model_seed(cfg.seed, 0))?;
        let fines = members
            .iter()
            .enumerate()
            .map(|(i, m)| CnnModel::init(index.n_fine(), m.len(), &cfg, model_seed(cfg.seed, i + 1)))
            .collect::<Result<_, _>>()?;
        Ok(Self { coarse, fines, index, cfg, members, local })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        coarse: CnnModel,
        fines: Vec<CnnModel>,
        index: StationIndex,
        cfg: TrainConfig,
    ) -> Result<Self, HierError> {
        let (members, local) = routing_tables(&index);
        let bad = |m: String| Err(HierError::CorruptFile(m));
        let (n, nc) = (index.n_fine(), index.n_coarse());
        if coarse.in_channels != nc || coarse.classes != nc || fines.len() != nc {
            return bad("coarse model does not match the index".into());
        }
        for (i, (f, m)) in fines.iter().zip(&members).enumerate() {
            if f.in_channels != n || f.classes != m.len() || f.window != coarse.window {
                return bad(format!("fine model {i} does not match the index"));
            }
        }
        Ok(Self { coarse, fines, index, cfg, members, local })
    }

    pub fn window(&self) -> usize {
        self.coarse.window
    }

    /// Fine model responsible for `coarse_label`.
    pub fn route(&self, coarse_label: usize) -> Result<usize, HierError> {
        if coarse_label < self.fines.len() {
            Ok(coarse_label)
        } else {
            Err(HierError::UnknownCoarseLabel(coarse_label))
        }
    }

    /// Global fine labels owned by fine model `model`, ascending.
    pub fn class_set(&self, model: usize) -> &[usize] {
        &self.members[model]
    }

    /// Class index of global fine label `fine` inside its area's model.
    pub fn local_class(&self, fine: usize) -> usize {
        self.local[fine]
    }

    pub fn predict_coarse(&self, coarse_window: &[usize]) -> Result<usize, HierError> {
        Ok(self.coarse.predict(coarse_window)?)
    }

    /// Prediction of fine model `model`, as a global fine label.
    pub fn predict_with(&self, model: usize, fine_window: &[usize]) -> Result<usize, HierError> {
        let m = self.route(model)?;
        let probs = self.fines[m].probabilities(fine_window)?;
        Ok(self.members[m][argmax(&probs)])
    }

    /// `(fine, coarse)` prediction, routing by the predicted area.
    pub fn predict(&self, fine_window: &[usize], coarse_window: &[usize]) -> Result<(usize, usize), HierError> {
        let coarse = self.predict_coarse(coarse_window)?;
        Ok((self.predict_with(coarse, fine_window)?, coarse))
    }
}

impl Predictor for HierModel {
    fn window(&self) -> usize {
        HierModel::window(self)
    }

    fn predict_fine(&self, fine_window: &[usize], coarse_window: &[usize]) -> Result<usize, HierError> {
        Ok(self.predict(fine_window, coarse_window)?.0)
    }
}

/// Single network over all fine labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    pub model: CnnModel,
    pub index: StationIndex,
    pub cfg: TrainConfig,
}

impl FlatModel {
    pub fn new(index: StationIndex, cfg: TrainConfig) -> Result<Self, HierError> {
        if index.n_fine() == 0 {
            return Err(HierError::EmptyIndex);
        }
        let model = CnnModel::init(index.n_fine(), index.n_fine(), &cfg, model_seed(cfg.seed, 0))?;
        Ok(Self { model, index, cfg })
    }
}

impl Predictor for FlatModel {
    fn window(&self) -> usize {
        self.model.window
    }

    fn predict_fine(&self, fine_window: &[usize], _coarse_window: &[usize]) -> Result<usize, HierError> {
        Ok(self.model.predict(fine_window)?)
    }
}
