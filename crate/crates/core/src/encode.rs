//! Two-scale label spaces and supervised windows.
//!
//! Every distinct station coordinate gets a fine label and every location
//! area code that owns at least one station gets a coarse label. Both are
//! numbered in order of first appearance so the same input always yields the
//! same index.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::geo::{GeoPoint, StationKey};
use crate::ingest::{Timestamp, Trajectory};

#[derive(Error, Debug)]
pub enum EncodeError {
    #[error("no trajectory points to index")]
    EmptyInput,
    #[error("station ({lon}, {lat}) is not in the index")]
    UnknownStation { lon: f64, lat: f64 },
    #[error("inconsistent station index: {0}")]
    Inconsistent(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Coarse,
    Fine,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Coarse => "coarse",
            Scale::Fine => "fine",
        })
    }
}

/// Bidirectional mapping between stations, fine labels, area codes and
/// coarse labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StationIndex {
    fine_labels: HashMap<StationKey, usize>,
    coarse_labels: HashMap<String, usize>,
    fine_to_coarse: Vec<usize>,
    label_to_point: Vec<GeoPoint>,
    coarse_to_lacid: Vec<String>,
}

impl StationIndex {
    /// Builds the index from cleaned trajectories.
    ///
    /// A station observed under several area codes belongs to the one it was
    /// seen with most often; ties go to the code seen first.
    pub fn build(trajectories: &[Trajectory]) -> Result<Self, EncodeError> {
        let mut label_to_point = Vec::new();
        let mut fine_labels = HashMap::new();
        // per station: lacid -> (count, first-seen rank)
        let mut votes: Vec<HashMap<&str, (usize, usize)>> = Vec::new();
        let mut lac_order: HashMap<&str, usize> = HashMap::new();
        let mut seen = 0usize;
        for p in trajectories.iter().flat_map(|t| &t.points) {
            let next = label_to_point.len();
            let label = *fine_labels.entry(p.location.key()).or_insert_with(|| {
                label_to_point.push(p.location);
                votes.push(HashMap::new());
                next
            });
            let e = votes[label].entry(p.lacid.as_str()).or_insert((0, seen));
            e.0 += 1;
            let n = lac_order.len();
            lac_order.entry(p.lacid.as_str()).or_insert(n);
            seen += 1;
        }
        if label_to_point.is_empty() {
            return Err(EncodeError::EmptyInput);
        }
        let parent: Vec<&str> = votes
            .iter()
            .map(|v| {
                v.iter()
                    .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
                    .map(|(lac, _)| *lac)
                    .expect("every station has at least one vote")
            })
            .collect();
        // Coarse labels follow first appearance among codes that own a station.
        let mut owners: Vec<&str> = parent.clone();
        owners.sort_by_key(|lac| lac_order[lac]);
        owners.dedup();
        let coarse_labels: HashMap<String, usize> =
            owners.iter().enumerate().map(|(i, lac)| (lac.to_string(), i)).collect();
        let fine_to_coarse = parent.iter().map(|lac| coarse_labels[*lac]).collect();
        Ok(Self {
            fine_labels,
            coarse_labels,
            fine_to_coarse,
            label_to_point,
            coarse_to_lacid: owners.into_iter().map(str::to_string).collect(),
        })
    }

    /// Reassembles an index from its ordered parts, validating the partition.
    pub fn from_parts(points: Vec<GeoPoint>, parents: Vec<usize>, lacids: Vec<String>) -> Result<Self, EncodeError> {
        if points.is_empty() || lacids.is_empty() {
            return Err(EncodeError::EmptyInput);
        }
        if points.len() != parents.len() {
            return Err(EncodeError::Inconsistent("point and parent counts differ".into()));
        }
        let mut owned = vec![false; lacids.len()];
        for &c in &parents {
            *owned
                .get_mut(c)
                .ok_or_else(|| EncodeError::Inconsistent(format!("coarse label {c} out of range")))? = true;
        }
        if owned.iter().any(|o| !o) {
            return Err(EncodeError::Inconsistent("coarse label without stations".into()));
        }
        let fine_labels: HashMap<_, _> = points.iter().enumerate().map(|(i, p)| (p.key(), i)).collect();
        let coarse_labels: HashMap<_, _> = lacids.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        if fine_labels.len() != points.len() || coarse_labels.len() != lacids.len() {
            return Err(EncodeError::Inconsistent("duplicate station or area code".into()));
        }
        Ok(Self { fine_labels, coarse_labels, fine_to_coarse: parents, label_to_point: points, coarse_to_lacid: lacids })
    }

    /// Number of fine labels (stations).
    pub fn n_fine(&self) -> usize {
        self.label_to_point.len()
    }

    /// Number of coarse labels (area codes).
    pub fn n_coarse(&self) -> usize {
        self.coarse_to_lacid.len()
    }

    pub fn fine_label(&self, p: &GeoPoint) -> Option<usize> {
        self.fine_labels.get(&p.key()).copied()
    }

    pub fn coarse_label(&self, lacid: &str) -> Option<usize> {
        self.coarse_labels.get(lacid).copied()
    }

    pub fn coarse_of(&self, fine: usize) -> usize {
        self.fine_to_coarse[fine]
    }

    pub fn fine_to_coarse(&self) -> &[usize] {
        &self.fine_to_coarse
    }

    pub fn point(&self, fine: usize) -> GeoPoint {
        self.label_to_point[fine]
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.label_to_point
    }

    pub fn lacid(&self, coarse: usize) -> &str {
        &self.coarse_to_lacid[coarse]
    }

    pub fn lacids(&self) -> &[String] {
        &self.coarse_to_lacid
    }

    /// Fine labels belonging to one coarse label, ascending.
    pub fn members(&self, coarse: usize) -> Vec<usize> {
        (0..self.n_fine()).filter(|&f| self.fine_to_coarse[f] == coarse).collect()
    }
}

/// One label per trajectory point at the requested scale.
pub fn encode_trajectory(traj: &Trajectory, index: &StationIndex, scale: Scale) -> Result<Vec<usize>, EncodeError> {
    traj.points
        .iter()
        .map(|p| {
            let fine = index.fine_label(&p.location).ok_or(EncodeError::UnknownStation {
                lon: p.location.longitude,
                lat: p.location.latitude,
            })?;
            Ok(match scale {
                Scale::Fine => fine,
                Scale::Coarse => index.coarse_of(fine),
            })
        })
        .collect()
}

/// A history window and the label that follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub window: Vec<usize>,
    pub target: usize,
    pub scale: Scale,
}

/// Stride-one windows: `labels[t-w..t] -> labels[t]` for every `t >= w`.
pub fn make_windows(labels: &[usize], w: usize, scale: Scale) -> Vec<Sample> {
    assert!(w >= 1, "window length must be positive");
    (w..labels.len())
        .map(|t| Sample { window: labels[t - w..t].to_vec(), target: labels[t], scale })
        .collect()
}

/// Number of leading items that go to training for a chronological split.
pub fn train_len(len: usize, train_fraction: f64) -> usize {
    // Nudge so that e.g. 19/23 of 23 lands on 19 despite rounding.
    ((train_fraction * len as f64 + 1e-9).floor() as usize).min(len)
}

/// Chronological split: the first `floor(fraction * len)` items train.
pub fn split_train_test<T>(mut items: Vec<T>, train_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = train_len(items.len(), train_fraction);
    let test = items.split_off(n);
    (items, test)
}

/// Buckets fine-encoded samples by the coarse label of their target.
pub fn partition_by_coarse(samples: &[Sample], index: &StationIndex) -> BTreeMap<usize, Vec<Sample>> {
    let mut out: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(index.coarse_of(s.target)).or_default().push(s.clone());
    }
    out
}

/// Writes samples as `w_0..w_{W-1},target,scale` rows.
pub fn write_samples_csv<W: Write>(out: W, samples: &[Sample], w: usize) -> Result<(), EncodeError> {
    let mut csv = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..w).map(|i| format!("w_{i}")).collect();
    header.push("target".into());
    header.push("scale".into());
    csv.write_record(&header)?;
    for s in samples {
        let mut row: Vec<String> = s.window.iter().map(usize::to_string).collect();
        row.push(s.target.to_string());
        row.push(s.scale.to_string());
        csv.write_record(&row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A user's trajectory encoded at both scales.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUser {
    pub user: String,
    pub times: Vec<Timestamp>,
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
}

/// Trajectories encoded against a shared index.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub index: StationIndex,
    pub users: Vec<EncodedUser>,
}

impl EncodedDataset {
    /// Indexes all trajectories, then encodes them.
    pub fn build(trajectories: &[Trajectory]) -> Result<Self, EncodeError> {
        let index = StationIndex::build(trajectories)?;
        Self::with_index(trajectories, index)
    }

    pub fn with_index(trajectories: &[Trajectory], index: StationIndex) -> Result<Self, EncodeError> {
        let users = trajectories
            .iter()
            .map(|t| {
                Ok(EncodedUser {
                    user: t.user.clone(),
                    times: t.points.iter().map(|p| p.stime).collect(),
                    fine: encode_trajectory(t, &index, Scale::Fine)?,
                    coarse: encode_trajectory(t, &index, Scale::Coarse)?,
                })
            })
            .collect::<Result<_, EncodeError>>()?;
        Ok(Self { index, users })
    }

    pub fn max_len(&self) -> usize {
        self.users.iter().map(|u| u.fine.len()).max().unwrap_or(0)
    }
}
