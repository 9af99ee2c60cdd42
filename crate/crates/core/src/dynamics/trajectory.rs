use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::map::StateVector;
use super::DynamicsError;

/// What happened during one executed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    /// An ordinary transition of the dynamics.
    Step,
    /// A rectification; logical time does not advance.
    Reset,
    /// The loop ended at this observation without acting on it.
    Terminate,
}

/// Per-step observables. Open-loop runs leave the observer fields empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub entropy: Option<f64>,
    pub drift: Option<f64>,
    pub omega: Option<f64>,
    pub event: StepEvent,
    /// Set on steps whose context was dropped by a later rectification.
    #[serde(default)]
    pub discarded: bool,
}

impl StepRecord {
    pub fn open_loop() -> Self {
        Self {
            entropy: None,
            drift: None,
            omega: None,
            event: StepEvent::Step,
            discarded: false,
        }
    }
}

/// A recorded run: actual states, the noiseless reference run from the same
/// initial state, and one record per executed step.
///
/// `states[0]` and `ideal_states[0]` are the shared initial state; entry
/// `i + 1` is the state after record `i`. Reset steps repeat the current ideal
/// state, so the two sequences stay aligned index by index. Runs against an
/// external generator carry no state vectors at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub d: usize,
    pub seeds: Vec<u64>,
    pub states: Vec<StateVector>,
    pub ideal_states: Vec<StateVector>,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(s0: StateVector, seeds: Vec<u64>) -> Self {
        Self {
            d: s0.dim(),
            seeds,
            ideal_states: vec![s0.clone()],
            states: vec![s0],
            records: Vec::new(),
        }
    }

    /// A trajectory without state vectors (external generator mode).
    pub fn stateless(seeds: Vec<u64>) -> Self {
        Self {
            d: 0,
            seeds,
            states: Vec::new(),
            ideal_states: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn has_states(&self) -> bool {
        !self.states.is_empty()
    }

    pub fn push(&mut self, state: StateVector, ideal: StateVector, record: StepRecord) {
        self.states.push(state);
        self.ideal_states.push(ideal);
        self.records.push(record);
    }

    pub fn push_record(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn current(&self) -> Option<&StateVector> {
        self.states.last()
    }

    pub fn current_ideal(&self) -> Option<&StateVector> {
        self.ideal_states.last()
    }

    /// `delta_i = S_i - S*_i`.
    pub fn deviation(&self, i: usize) -> DVector<f64> {
        self.states[i].as_vector() - self.ideal_states[i].as_vector()
    }

    /// `||delta_i||_2` for every stored state, starting with the initial one.
    pub fn error_norms(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| self.deviation(i).norm()).collect()
    }

    pub fn final_error(&self) -> Option<f64> {
        (!self.states.is_empty()).then(|| self.deviation(self.states.len() - 1).norm())
    }

    pub fn count(&self, event: StepEvent) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TrajectoryDoc::from(self)).expect("trajectory is always serializable")
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), DynamicsError> {
        serde_json::to_writer_pretty(writer, &TrajectoryDoc::from(self))
            .map_err(|e| DynamicsError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, DynamicsError> {
        let doc: TrajectoryDoc = serde_json::from_str(text).map_err(|e| DynamicsError::Format(e.to_string()))?;
        doc.try_into()
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self, DynamicsError> {
        let doc: TrajectoryDoc =
            serde_json::from_reader(reader).map_err(|e| DynamicsError::Format(e.to_string()))?;
        doc.try_into()
    }

    /// One row per executed step:
    /// `step,event,entropy,drift,omega,error_norm,discarded,s0..s{d-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DynamicsError> {
        let fmt = |e: csv::Error| DynamicsError::Format(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["step", "event", "entropy", "drift", "omega", "error_norm", "discarded"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.d).map(|i| format!("s{i}")));
        w.write_record(&header).map_err(fmt)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, rec) in self.records.iter().enumerate() {
            let mut row = vec![
                (i + 1).to_string(),
                event_name(rec.event).to_string(),
                opt(rec.entropy),
                opt(rec.drift),
                opt(rec.omega),
                if self.has_states() {
                    self.deviation(i + 1).norm().to_string()
                } else {
                    String::new()
                },
                rec.discarded.to_string(),
            ];
            if self.has_states() {
                row.extend(self.states[i + 1].as_slice().iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(fmt)?;
        }
        w.flush().map_err(|e| DynamicsError::Format(e.to_string()))
    }
}

fn event_name(e: StepEvent) -> &'static str {
    match e {
        StepEvent::Step => "step",
        StepEvent::Reset => "reset",
        StepEvent::Terminate => "terminate",
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryDoc {
    d: usize,
    seeds: Vec<u64>,
    initial_state: Vec<f64>,
    initial_ideal: Vec<f64>,
    steps: Vec<StepDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDoc {
    state: Vec<f64>,
    ideal: Vec<f64>,
    entropy: Option<f64>,
    drift: Option<f64>,
    omega: Option<f64>,
    event: StepEvent,
    #[serde(default)]
    discarded: bool,
}

impl From<&Trajectory> for TrajectoryDoc {
    fn from(t: &Trajectory) -> Self {
        let vec_at = |v: &[StateVector], i: usize| v.get(i).map(StateVector::to_vec).unwrap_or_default();
        TrajectoryDoc {
            d: t.d,
            seeds: t.seeds.clone(),
            initial_state: vec_at(&t.states, 0),
            initial_ideal: vec_at(&t.ideal_states, 0),
            steps: t
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| StepDoc {
                    state: vec_at(&t.states, i + 1),
                    ideal: vec_at(&t.ideal_states, i + 1),
                    entropy: r.entropy,
                    drift: r.drift,
                    omega: r.omega,
                    event: r.event,
                    discarded: r.discarded,
                })
                .collect(),
        }
    }
}

impl TryFrom<TrajectoryDoc> for Trajectory {
    type Error = DynamicsError;

    fn try_from(doc: TrajectoryDoc) -> Result<Self, DynamicsError> {
        let records = doc
            .steps
            .iter()
            .map(|s| StepRecord {
                entropy: s.entropy,
                drift: s.drift,
                omega: s.omega,
                event: s.event,
                discarded: s.discarded,
            })
            .collect();
        if doc.d == 0 {
            return Ok(Trajectory {
                d: 0,
                seeds: doc.seeds,
                states: Vec::new(),
                ideal_states: Vec::new(),
                records,
            });
        }
        let to_state = |v: Vec<f64>| -> Result<StateVector, DynamicsError> {
            if v.len() != doc.d {
                return Err(DynamicsError::DimensionMismatch {
                    expected: doc.d,
                    got: v.len(),
                });
            }
            StateVector::new(v)
        };
        let mut states = vec![to_state(doc.initial_state)?];
        let mut ideal_states = vec![to_state(doc.initial_ideal)?];
        for s in doc.steps {
            states.push(to_state(s.state)?);
            ideal_states.push(to_state(s.ideal)?);
        }
        Ok(Trajectory {
            d: doc.d,
            seeds: doc.seeds,
            states,
            ideal_states,
            records,
        })
    }
}
