//! The online loop: predict each frame, grow the memory, periodically update
//! the target model with one of the continual-learning methods, and score
//! snapshots retrospectively on every segment.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grcl::{binarize, GateConfig, GateMap, GateMemory, ImportanceAccumulator};
use crate::memory::{MemorySlot, SampleMemory};
use crate::numerics::{FeatureGrid, MaskGrid};
use crate::par::{self, Execution};
use crate::rmscl::{build_working_memory, LassoConfig};
use crate::stream::{Frame, FrameSource};
use crate::target_model::{
    train_epochs, LossConfig, MasAnchor, TargetModel, UpdateSummary, WeightedSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Mas,
    Grcl,
    Rmscl,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Mas,
        Method::Grcl,
        Method::Rmscl,
        Method::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Mas => "mas",
            Method::Grcl => "grcl",
            Method::Rmscl => "rmscl",
            Method::Hybrid => "hybrid",
        }
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Method::Grcl | Method::Hybrid)
    }

    pub fn uses_working_memory(self) -> bool {
        matches!(self, Method::Rmscl | Method::Hybrid)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    /// Name used in result files; defaults to the method name.
    pub label: Option<String>,
    /// Model update cadence `Δ_C` in frames.
    pub update_interval: usize,
    /// Memory insertion cadence `Δ_M` in frames.
    pub memory_interval: usize,
    pub memory_capacity: usize,
    /// Output channels of the target model.
    pub model_outputs: usize,
    pub mas_gamma: f64,
    /// Score threshold turning predictions into masks.
    pub threshold: f64,
    pub loss: LossConfig,
    pub gate: GateConfig,
    pub lasso: LassoConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Baseline,
            label: None,
            update_interval: 1,
            memory_interval: 1,
            memory_capacity: SampleMemory::DEFAULT_CAPACITY,
            model_outputs: 1,
            mas_gamma: 1.0,
            threshold: 0.5,
            loss: LossConfig::default(),
            gate: GateConfig::default(),
            lasso: LassoConfig::default(),
        }
    }
}

impl MethodConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.update_interval > 0, "update_interval must be positive");
        ensure!(self.memory_interval > 0, "memory_interval must be positive");
        ensure!(self.memory_capacity > 0, "memory_capacity must be positive");
        ensure!(self.model_outputs > 0, "model_outputs must be positive");
        ensure!(self.mas_gamma >= 0.0, "mas_gamma must be nonnegative");
        self.loss.validate()?;
        self.gate.validate()?;
        self.lasso.validate()
    }

    /// Sets the execution mode of every parallelizable stage.
    pub fn set_execution(&mut self, exec: Execution) {
        self.loss.execution = exec;
        self.lasso.execution = exec;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 0 for the initial fit on the ground-truth frame, then 1, 2, ...
    pub update_index: usize,
    pub frame: usize,
    pub epochs: usize,
    pub loss_trajectory: Vec<f64>,
    pub frozen_count: usize,
    pub gate_memory_size: usize,
    pub gate_popcount: usize,
    pub dropped_maps: Vec<u64>,
    pub memory_size: usize,
    pub working_memory_size: usize,
    pub working_frames: Vec<u64>,
    pub lambda: Option<f64>,
    pub working_memory_fallback: bool,
    /// Frozen parameters that changed during the update; always zero unless the freeze is broken.
    pub freeze_violations: usize,
    pub note: Option<String>,
    pub duration_ms: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_trajectory.last().copied().unwrap_or(f64::NAN)
    }
}

/// Intersection over union of the positive pixels; 1 when both masks are empty.
pub fn jaccard(pred: &MaskGrid, truth: &MaskGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `J[i][s]`: mean Jaccard of snapshot `i` over the held-out frames of segment `s`.
pub fn evaluate(
    snapshots: &[TargetModel],
    holdouts: &[Vec<Frame>],
    threshold: f64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    ensure!(!snapshots.is_empty(), "no snapshots to evaluate");
    let cells = par::map_range(
        exec,
        snapshots.len() * holdouts.len(),
        |cell| -> Result<f64> {
            let (i, s) = (cell / holdouts.len(), cell % holdouts.len());
            let frames = &holdouts[s];
            ensure!(!frames.is_empty(), "segment {s} has no held-out frames");
            let mut total = 0.0;
            for f in frames {
                total += jaccard(&snapshots[i].predict_mask(&f.feature, threshold)?, &f.mask);
            }
            Ok(total / frames.len() as f64)
        },
    );
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(cells
        .chunks(holdouts.len().max(1))
        .map(<[f64]>::to_vec)
        .collect())
}

/// Mean over segments of the drop from the best to the final snapshot score.
pub fn forgetting_score(j: &[Vec<f64>]) -> Result<f64> {
    ensure!(!j.is_empty(), "empty Jaccard matrix");
    let segments = j[0].len();
    ensure!(segments >= 2, "forgetting needs at least two segments");
    let last = j.last().unwrap();
    let total: f64 = (0..segments)
        .map(|s| j.iter().map(|row| row[s]).fold(f64::NEG_INFINITY, f64::max) - last[s])
        .sum();
    Ok(total / segments as f64)
}

/// Mean of the final snapshot's per-segment scores.
pub fn retrospective_jaccard(j: &[Vec<f64>]) -> f64 {
    j.last()
        .map_or(f64::NAN, |row| row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    /// Last frame processed before the snapshot.
    pub frame: usize,
    pub model: TargetModel,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    /// Initial fit first, then one report per model update.
    pub reports: Vec<TrainReport>,
    pub predictions: Vec<MaskGrid>,
    /// Per-frame Jaccard of the prediction against the stream label.
    pub online_jaccard: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub jaccard: Vec<Vec<f64>>,
    pub retrospective_jaccard: f64,
    /// `None` for single-segment streams.
    pub forgetting: Option<f64>,
    pub peak_memory_slots: usize,
    pub freeze_violations: usize,
    pub final_model: TargetModel,
}

impl RunOutcome {
    pub fn updates(&self) -> &[TrainReport] {
        &self.reports[1..]
    }
}

/// What happened while processing one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameStep {
    pub frame: usize,
    pub inserted: bool,
    pub updated: bool,
    pub snapshot: bool,
}

/// Frame-by-frame driver; [`run_stream`] runs it to the end.
pub struct OnlineRun<'a> {
    cfg: MethodConfig,
    source: &'a dyn FrameSource,
    model: TargetModel,
    memory: SampleMemory,
    gates: GateMemory,
    importance: ImportanceAccumulator,
    mas_anchor: Vec<f64>,
    next_frame: usize,
    insert_count: u64,
    reports: Vec<TrainReport>,
    predictions: Vec<MaskGrid>,
    online_jaccard: Vec<f64>,
    snapshots: Vec<Snapshot>,
}

impl<'a> OnlineRun<'a> {
    pub fn new(source: &'a dyn FrameSource, cfg: MethodConfig) -> Result<Self> {
        cfg.validate()?;
        ensure!(!source.is_empty(), "stream is empty");
        let (c, _, _) = source.dims();
        let model = TargetModel::zeros(cfg.model_outputs, c);
        let k = model.param_count();
        Ok(Self {
            memory: SampleMemory::new(cfg.memory_capacity, cfg.memory_interval)?,
            gates: GateMemory::new(k, cfg.gate.clone())?,
            importance: ImportanceAccumulator::new(k),
            mas_anchor: model.params().to_vec(),
            model,
            cfg,
            source,
            next_frame: 0,
            insert_count: 0,
            reports: Vec::new(),
            predictions: Vec::new(),
            online_jaccard: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    pub fn config(&self) -> &MethodConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TargetModel {
        &self.model
    }

    pub fn memory(&self) -> &SampleMemory {
        &self.memory
    }

    pub fn gate_memory(&self) -> &GateMemory {
        &self.gates
    }

    /// Direct access to the gate memory, e.g. to seed it with external maps.
    pub fn gate_memory_mut(&mut self) -> &mut GateMemory {
        &mut self.gates
    }

    pub fn reports(&self) -> &[TrainReport] {
        &self.reports
    }

    pub fn next_frame_index(&self) -> usize {
        self.next_frame
    }

    pub fn is_finished(&self) -> bool {
        self.next_frame >= self.source.len()
    }

    /// The freeze mask the next update would apply, if the method gates.
    pub fn current_freeze(&self) -> Option<GateMap> {
        self.cfg
            .method
            .uses_gate()
            .then(|| self.gates.overall_gate())
    }

    pub fn process_frame(&mut self) -> Result<FrameStep> {
        let f = self.next_frame;
        let frame = self.source.frame(f)?;
        let mut step = FrameStep {
            frame: f,
            ..Default::default()
        };
        if f == 0 {
            // The first frame comes with its label: it seeds the memory and the model.
            self.record_prediction(frame.mask.clone(), &frame.mask);
            self.memory
                .insert(MemorySlot::new(frame.feature, frame.mask, 0, 0, true)?)?;
            step.inserted = true;
            self.initial_fit()?;
        } else {
            let pred = self
                .model
                .predict_mask(&frame.feature, self.cfg.threshold)?;
            self.record_prediction(pred.clone(), &frame.mask);
            if f.is_multiple_of(self.cfg.memory_interval) {
                self.insert_count += 1;
                let slot =
                    MemorySlot::new(frame.feature, pred, f as u64, self.insert_count, false)?;
                self.memory.insert(slot)?;
                step.inserted = true;
            }
            if f.is_multiple_of(self.cfg.update_interval) {
                self.update(f)?;
                step.updated = true;
            }
        }
        self.next_frame += 1;
        let last_of_segment = f + 1 == self.source.len()
            || self.source.segment_of(f + 1) != self.source.segment_of(f);
        if last_of_segment {
            self.snapshots.push(Snapshot {
                frame: f,
                model: self.model.clone(),
            });
            step.snapshot = true;
        }
        Ok(step)
    }

    fn record_prediction(&mut self, pred: MaskGrid, truth: &MaskGrid) {
        self.online_jaccard.push(jaccard(&pred, truth));
        self.predictions.push(pred);
    }

    fn initial_fit(&mut self) -> Result<()> {
        let start = Instant::now();
        let gt = self
            .memory
            .ground_truth()
            .expect("ground truth was just inserted");
        let batch = [WeightedSample::new(&gt.feature, &gt.mask, 1.0)];
        let summary = train_epochs(
            &mut self.model,
            &batch,
            &self.cfg.loss,
            self.cfg.loss.init_epochs,
            None,
            None,
        )?;
        let mut report = self.base_report(0, 0, &summary);
        self.absorb_importance(&summary, 0, &mut report)?;
        self.mas_anchor = self.model.params().to_vec();
        report.duration_ms = start.elapsed().as_secs_f64() * 1e3;
        self.reports.push(report);
        Ok(())
    }

    fn base_report(
        &self,
        update_index: usize,
        frame: usize,
        summary: &UpdateSummary,
    ) -> TrainReport {
        TrainReport {
            update_index,
            frame,
            epochs: summary.epochs,
            loss_trajectory: summary.loss_trajectory.clone(),
            frozen_count: summary.frozen_count,
            memory_size: self.memory.len(),
            working_memory_size: self.memory.len(),
            ..Default::default()
        }
    }

    /// Folds the applied gradients into the importance statistics and, for
    /// gated methods, stores the binarized map of this update.
    fn absorb_importance(
        &mut self,
        summary: &UpdateSummary,
        step: u64,
        report: &mut TrainReport,
    ) -> Result<()> {
        self.importance.begin_update();
        self.importance.accumulate(&summary.grad_trace)?;
        if self.cfg.method.uses_gate() {
            match binarize(self.importance.u(), &self.cfg.gate, step) {
                Ok(map) => report.dropped_maps = self.gates.maintain(map)?.dropped,
                Err(Error::NoImportanceSignal) => {
                    report.note = Some("no importance signal; gate memory unchanged".into());
                }
                Err(e) => return Err(e),
            }
        }
        report.gate_memory_size = self.gates.len();
        report.gate_popcount = self.gates.overall_gate().popcount();
        Ok(())
    }

    fn update(&mut self, f: usize) -> Result<()> {
        let start = Instant::now();
        let method = self.cfg.method;
        let update_index = self.reports.len();
        let freeze = self.current_freeze();
        let before = self.model.params().to_vec();

        let next_feature: Option<FeatureGrid> = if method.uses_working_memory() {
            let idx = if f + 1 < self.source.len() { f + 1 } else { f };
            Some(self.source.frame(idx)?.feature)
        } else {
            None
        };
        let decay = self.cfg.loss.temporal_decay_base;
        let memory = &self.memory;
        let (batch, lambda, fallback, working_frames) = match &next_feature {
            Some(next) => {
                let wm = build_working_memory(memory, next, &self.cfg.lasso, decay)?;
                (
                    wm.samples(),
                    Some(wm.lambda),
                    wm.fallback,
                    wm.frame_indices(),
                )
            }
            None => {
                let d = memory.temporal_weights(decay)?;
                let batch = memory
                    .slots()
                    .iter()
                    .zip(d)
                    .map(|(s, w)| WeightedSample::new(&s.feature, &s.mask, w))
                    .collect::<Vec<_>>();
                (
                    batch,
                    None,
                    false,
                    memory.slots().iter().map(|s| s.frame_index).collect(),
                )
            }
        };
        let mas = (method == Method::Mas).then(|| MasAnchor {
            anchor: &self.mas_anchor,
            omega: self.importance.omega(),
            gamma: self.cfg.mas_gamma,
        });
        let summary = train_epochs(
            &mut self.model,
            &batch,
            &self.cfg.loss,
            self.cfg.loss.epochs_per_update,
            freeze.as_ref(),
            mas,
        )?;
        let working_size = batch.len();
        drop(batch);

        let mut report = self.base_report(update_index, f, &summary);
        report.working_memory_size = working_size;
        report.working_frames = working_frames;
        report.lambda = lambda;
        report.working_memory_fallback = fallback;
        if let Some(g) = &freeze {
            report.freeze_violations = g
                .bits()
                .iter()
                .zip(before.iter().zip(self.model.params()))
                .filter(|(&frozen, (a, b))| frozen && a.to_bits() != b.to_bits())
                .count();
        }
        self.absorb_importance(&summary, update_index as u64, &mut report)?;
        if method == Method::Mas {
            self.mas_anchor = self.model.params().to_vec();
        }
        report.duration_ms = start.elapsed().as_secs_f64() * 1e3;
        self.reports.push(report);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunOutcome> {
        while !self.is_finished() {
            self.process_frame()?;
        }
        let holdouts = (0..self.source.segment_count())
            .map(|s| self.source.holdout(s))
            .collect::<Result<Vec<_>>>()?;
        let models: Vec<TargetModel> = self.snapshots.iter().map(|s| s.model.clone()).collect();
        let j = evaluate(
            &models,
            &holdouts,
            self.cfg.threshold,
            self.cfg.loss.execution,
        )?;
        let forgetting = if holdouts.len() >= 2 {
            Some(forgetting_score(&j)?)
        } else {
            None
        };
        let freeze_violations = self.reports.iter().map(|r| r.freeze_violations).sum();
        Ok(RunOutcome {
            method: self.cfg.method,
            retrospective_jaccard: retrospective_jaccard(&j),
            jaccard: j,
            forgetting,
            peak_memory_slots: self.memory.peak_len(),
            freeze_violations,
            final_model: self.model,
            reports: self.reports,
            predictions: self.predictions,
            online_jaccard: self.online_jaccard,
            snapshots: self.snapshots,
        })
    }
}

/// Runs `cfg` over the whole stream and scores the segment snapshots.
pub fn run_stream(source: &dyn FrameSource, cfg: &MethodConfig) -> Result<RunOutcome> {
    OnlineRun::new(source, cfg.clone())?.finish()
}
