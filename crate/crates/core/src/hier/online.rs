//! Streaming training with per-model micro-batches.
//!
//! Each sub-model keeps its own buffer. A buffer trains as soon as it holds a
//! full batch and partial buffers are flushed only at the end of a pass, so
//! feeding a stream in pieces gives the same result as feeding it whole.

use std::collections::VecDeque;

use rayon::prelude::*;

use super::{FlatModel, HierError, HierModel, StreamEvent};
use crate::nn::{CnnModel, Example, NnError};

/// Batches averaged into the running accuracy of a curve point.
pub const RUNNING_WINDOW: usize = 100;

/// One training step of one sub-model.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub model_id: String,
    pub iteration: usize,
    pub mean_loss: f64,
    pub running_accuracy: f64,
}

/// A model, its pending micro-batch and its training history.
#[derive(Debug, Clone)]
pub struct SubTrainer {
    pub model: CnnModel,
    pub id: String,
    batch_size: usize,
    buffer: Vec<(Vec<usize>, usize)>,
    recent: VecDeque<(usize, usize)>,
    curve: Vec<CurvePoint>,
}

impl SubTrainer {
    pub fn new(model: CnnModel, id: String, batch_size: usize) -> Self {
        Self { model, id, batch_size, buffer: Vec::with_capacity(batch_size), recent: VecDeque::new(), curve: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.curve.len()
    }

    pub fn curve(&self) -> &[CurvePoint] {
        &self.curve
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, window: &[usize], class: usize) -> Result<(), NnError> {
        if class >= self.model.classes {
            return Err(NnError::LabelOutOfRange { label: class, classes: self.model.classes });
        }
        self.buffer.push((window.to_vec(), class));
        if self.buffer.len() >= self.batch_size {
            self.step()?;
        }
        Ok(())
    }

    /// Trains on whatever is buffered.
    pub fn flush(&mut self) -> Result<(), NnError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        self.step()
    }

    fn step(&mut self) -> Result<(), NnError> {
        let batch: Vec<Example<'_>> = self.buffer.iter().map(|(w, c)| Example { window: w, class: *c }).collect();
        let stats = self.model.train_step(&batch, self.model.learning_rate)?;
        self.buffer.clear();
        self.recent.push_back((stats.correct, stats.count));
        if self.recent.len() > RUNNING_WINDOW {
            self.recent.pop_front();
        }
        let (c, n) = self.recent.iter().fold((0, 0), |(a, b), (c, n)| (a + c, b + n));
        self.curve.push(CurvePoint {
            model_id: self.id.clone(),
            iteration: self.curve.len() + 1,
            mean_loss: stats.mean_loss,
            running_accuracy: c as f64 / n as f64,
        });
        Ok(())
    }
}

/// Online trainer for a [`HierModel`].
///
/// The coarse model sees every event. Each event is routed by its true area
/// to that area's fine model.
#[derive(Debug, Clone)]
pub struct HierTrainer {
    template: HierModel,
    pub coarse: SubTrainer,
    pub fines: Vec<SubTrainer>,
}

impl HierTrainer {
    pub fn new(model: HierModel) -> Self {
        let b = model.cfg.batch_size;
        let coarse = SubTrainer::new(model.coarse.clone(), "coarse".into(), b);
        let fines =
            model.fines.iter().enumerate().map(|(i, m)| SubTrainer::new(m.clone(), format!("fine_{i}"), b)).collect();
        Self { template: model, coarse, fines }
    }

    fn target(&self, e: &StreamEvent) -> Result<(usize, usize), HierError> {
        let m = self.template.route(e.coarse_target)?;
        if e.fine_target >= self.template.index.n_fine() || self.template.index.coarse_of(e.fine_target) != m {
            return Err(HierError::Nn(NnError::LabelOutOfRange { label: e.fine_target, classes: self.template.index.n_fine() }));
        }
        Ok((m, self.template.local_class(e.fine_target)))
    }

    /// Consumes events in order on the calling thread.
    pub fn feed(&mut self, events: &[StreamEvent]) -> Result<(), HierError> {
        for e in events {
            let (m, local) = self.target(e)?;
            self.coarse.push(&e.coarse_window, e.coarse_target)?;
            self.fines[m].push(&e.fine_window, local)?;
        }
        Ok(())
    }

    /// Same result as [`feed`](Self::feed), with the coarse model and every
    /// fine model updating concurrently. Each sub-model still sees its own
    /// events in stream order.
    pub fn feed_parallel(&mut self, events: &[StreamEvent]) -> Result<(), HierError> {
        let mut queues: Vec<Vec<(&[usize], usize)>> = vec![Vec::new(); self.fines.len()];
        for e in events {
            let (m, local) = self.target(e)?;
            queues[m].push((&e.fine_window, local));
        }
        let coarse = &mut self.coarse;
        let fines = &mut self.fines;
        let (a, b) = rayon::join(
            || events.iter().try_for_each(|e| coarse.push(&e.coarse_window, e.coarse_target)),
            || {
                fines
                    .par_iter_mut()
                    .zip(queues)
                    .try_for_each(|(f, q)| q.into_iter().try_for_each(|(w, c)| f.push(w, c)))
            },
        );
        a?;
        b?;
        Ok(())
    }

    /// Ends a pass: every partial batch is trained.
    pub fn flush(&mut self) -> Result<(), HierError> {
        self.coarse.flush()?;
        for f in &mut self.fines {
            f.flush()?;
        }
        Ok(())
    }

    /// Current parameters. Buffered events are not included until flushed.
    pub fn model(&self) -> HierModel {
        let mut m = self.template.clone();
        m.coarse = self.coarse.model.clone();
        m.fines = self.fines.iter().map(|f| f.model.clone()).collect();
        m
    }

    /// Curve points of the coarse model followed by each fine model.
    pub fn curves(&self) -> Vec<CurvePoint> {
        std::iter::once(&self.coarse).chain(&self.fines).flat_map(|s| s.curve().iter().cloned()).collect()
    }

    /// Coarse-model steps taken so far.
    pub fn steps(&self) -> usize {
        self.coarse.steps()
    }
}

/// Online trainer for a [`FlatModel`] on fine windows.
#[derive(Debug, Clone)]
pub struct FlatTrainer {
    template: FlatModel,
    pub inner: SubTrainer,
}

impl FlatTrainer {
    pub fn new(model: FlatModel) -> Self {
        let inner = SubTrainer::new(model.model.clone(), "flat".into(), model.cfg.batch_size);
        Self { template: model, inner }
    }

    pub fn feed(&mut self, events: &[StreamEvent]) -> Result<(), HierError> {
        for e in events {
            self.inner.push(&e.fine_window, e.fine_target)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), HierError> {
        Ok(self.inner.flush()?)
    }

    pub fn model(&self) -> FlatModel {
        FlatModel { model: self.inner.model.clone(), ..self.template.clone() }
    }

    pub fn curves(&self) -> Vec<CurvePoint> {
        self.inner.curve().to_vec()
    }

    pub fn steps(&self) -> usize {
        self.inner.steps()
    }
}

/// Runs `cfg.epochs` passes over `events`, flushing after each pass.
pub fn train_online(model: HierModel, events: &[StreamEvent]) -> Result<(HierModel, Vec<CurvePoint>), HierError> {
    let mut t = HierTrainer::new(model);
    for _ in 0..t.template.cfg.epochs {
        t.feed(events)?;
        t.flush()?;
    }
    Ok((t.model(), t.curves()))
}
