//! Newline-delimited JSON protocol for driving an external generator.
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"hello","version":1}
//! <- {"type":"step","entropy":2.7,"finished":false}
//! -> {"type":"continue"}                       (next step follows)
//! -> {"type":"rectify","template":"..."}
//! <- {"type":"anchor","summary":"..."}         (next step follows)
//! ```
//!
//! A step with `finished: true` ends the run; its entropy is ignored.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::halo::HaloRun;
use super::{
    check_stability, detect_oscillation, discard_since_anchor, update_uncertainty, Anchor, ControllerConfig,
    ControllerError, ControllerState, Regime, ResetRecord, RunStatus,
};
use crate::dynamics::{StepEvent, StepRecord, Trajectory};
use crate::observer::{drift_proxy, ObserverCalibration};

pub const PROTOCOL_VERSION: u32 = 1;
pub const COMPRESSION_TEMPLATE: &str = include_str!("../../../../templates/semantic_compression.txt");
pub const REINIT_TEMPLATE: &str = include_str!("../../../../templates/trajectory_reinit.txt");

/// Controller to generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControllerMessage {
    Hello { version: u32 },
    Continue,
    Rectify { template: String },
}

/// Generator to controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AdapterMessage {
    Hello { version: u32 },
    Step { entropy: f64, finished: bool },
    Anchor { summary: String },
}

impl AdapterMessage {
    fn kind(&self) -> &'static str {
        match self {
            AdapterMessage::Hello { .. } => "hello",
            AdapterMessage::Step { .. } => "step",
            AdapterMessage::Anchor { .. } => "anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("io error: {0}")]
    Io(String),
    #[error("adapter closed the stream")]
    Closed,
    #[error("malformed message {line:?}: {reason}")]
    Malformed { line: String, reason: String },
    #[error("expected {expected} message, got {got}")]
    UnexpectedMessage { expected: &'static str, got: String },
    #[error("protocol version mismatch: controller speaks {ours}, adapter {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("no message from adapter within {0:?}")]
    Timeout(Duration),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof => {
                TransportError::Closed
            }
            _ => TransportError::Io(e.to_string()),
        }
    }
}

/// One request/response stream to a generator.
///
/// Incoming lines are read on a helper thread so that every receive can
/// honour the timeout, whatever the underlying transport.
pub struct AdapterSession<W: Write> {
    writer: W,
    lines: Receiver<io::Result<String>>,
    timeout: Option<Duration>,
    child: Option<Child>,
}

impl<W: Write> AdapterSession<W> {
    pub fn new<R: Read + Send + 'static>(reader: R, writer: W, timeout: Option<Duration>) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            writer,
            lines: rx,
            timeout,
            child: None,
        }
    }

    pub fn send(&mut self, msg: &ControllerMessage) -> Result<(), TransportError> {
        let mut line = serde_json::to_string(msg).expect("messages always serialize");
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<AdapterMessage, TransportError> {
        loop {
            let next = match self.timeout {
                Some(t) => self.lines.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => TransportError::Timeout(t),
                    RecvTimeoutError::Disconnected => TransportError::Closed,
                })?,
                None => self.lines.recv().map_err(|_| TransportError::Closed)?,
            };
            let line = next?;
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line).map_err(|e| TransportError::Malformed {
                line,
                reason: e.to_string(),
            });
        }
    }

    /// Exchanges hello messages; a different version aborts.
    pub fn handshake(&mut self) -> Result<(), TransportError> {
        self.send(&ControllerMessage::Hello {
            version: PROTOCOL_VERSION,
        })?;
        match self.recv()? {
            AdapterMessage::Hello { version } if version == PROTOCOL_VERSION => Ok(()),
            AdapterMessage::Hello { version } => Err(TransportError::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: version,
            }),
            other => Err(TransportError::UnexpectedMessage {
                expected: "hello",
                got: other.kind().into(),
            }),
        }
    }
}

impl<W: Write> Drop for AdapterSession<W> {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            if let Ok(None) = child.try_wait() {
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

pub fn connect_tcp(addr: &str, timeout: Option<Duration>) -> Result<AdapterSession<TcpStream>, TransportError> {
    let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
    let mut last = TransportError::Io(format!("{addr} resolved to no addresses"));
    for a in addrs {
        let stream = match timeout {
            Some(t) => TcpStream::connect_timeout(&a, t),
            None => TcpStream::connect(a),
        };
        match stream {
            Ok(s) => {
                s.set_nodelay(true)?;
                let reader = s.try_clone()?;
                return Ok(AdapterSession::new(reader, s, timeout));
            }
            Err(e) => last = e.into(),
        }
    }
    Err(last)
}

/// Starts `program` and talks to it over its stdin and stdout. The child is
/// killed when the session is dropped.
pub fn spawn_adapter(
    program: &str,
    args: &[String],
    timeout: Option<Duration>,
) -> Result<AdapterSession<ChildStdin>, TransportError> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("stdin is piped");
    let stdout = child.stdout.take().expect("stdout is piped");
    let mut session = AdapterSession::new(stdout, stdin, timeout);
    session.child = Some(child);
    Ok(session)
}

#[derive(Debug, Error)]
pub enum ExternalRunError {
    #[error(transparent)]
    Config(#[from] ControllerError),
    #[error("run aborted after {} executed steps: {error}", .partial.executed_steps)]
    Transport {
        error: TransportError,
        /// Everything recorded before the failure.
        partial: Box<HaloRun>,
    },
}

/// The control law of [`run_halo`](super::run_halo) with observations from an
/// external generator. Each rectification sends `template` and waits for the
/// generator's anchor summary.
pub fn run_halo_external<W: Write>(
    session: &mut AdapterSession<W>,
    cal: &ObserverCalibration,
    cfg: &ControllerConfig,
    template: &str,
) -> Result<HaloRun, ExternalRunError> {
    cfg.validate()?;
    let mut run = HaloRun {
        trajectory: Trajectory::stateless(Vec::new()),
        controller: ControllerState::new(),
        logical_steps: 0,
        executed_steps: 0,
    };
    match drive(session, cal, cfg, template, &mut run) {
        Ok(()) => Ok(run),
        Err(error) => {
            run.controller.status = RunStatus::TerminatedTransport;
            run.executed_steps = run.controller.step;
            Err(ExternalRunError::Transport {
                error,
                partial: Box::new(run),
            })
        }
    }
}

fn drive<W: Write>(
    session: &mut AdapterSession<W>,
    cal: &ObserverCalibration,
    cfg: &ControllerConfig,
    template: &str,
    run: &mut HaloRun,
) -> Result<(), TransportError> {
    session.handshake()?;
    let ctrl = &mut run.controller;
    let traj = &mut run.trajectory;
    loop {
        if ctrl.step >= cfg.max_steps {
            ctrl.status = RunStatus::TerminatedHardLimit;
            break;
        }
        let (entropy, finished) = match session.recv()? {
            AdapterMessage::Step { entropy, finished } => (entropy, finished),
            other => {
                return Err(TransportError::UnexpectedMessage {
                    expected: "step",
                    got: other.kind().into(),
                })
            }
        };
        if finished {
            traj.push_record(StepRecord {
                entropy: None,
                drift: None,
                omega: Some(ctrl.omega),
                event: StepEvent::Terminate,
                discarded: false,
            });
            ctrl.status = RunStatus::Finished;
            break;
        }
        if !(entropy.is_finite() && entropy >= 0.0) {
            return Err(TransportError::Malformed {
                line: entropy.to_string(),
                reason: "entropy must be finite and non-negative".into(),
            });
        }
        let drift = drift_proxy(entropy, cal);
        ctrl.omega = update_uncertainty(ctrl.omega, drift, cfg);
        let mut record = StepRecord {
            entropy: Some(entropy),
            drift: Some(drift),
            omega: Some(ctrl.omega),
            event: StepEvent::Step,
            discarded: false,
        };
        match check_stability(ctrl.omega, cfg.psi) {
            Regime::Critical => {
                session.send(&ControllerMessage::Rectify {
                    template: template.to_string(),
                })?;
                let summary = match session.recv()? {
                    AdapterMessage::Anchor { summary } => summary,
                    other => {
                        return Err(TransportError::UnexpectedMessage {
                            expected: "anchor",
                            got: other.kind().into(),
                        })
                    }
                };
                discard_since_anchor(traj);
                record.event = StepEvent::Reset;
                record.omega = Some(0.0);
                traj.push_record(record);
                ctrl.omega = 0.0;
                ctrl.resets.push(ResetRecord {
                    step: ctrl.step,
                    anchor: Anchor::Summary(summary),
                });
                ctrl.step += 1;
                if detect_oscillation(ctrl, cfg) {
                    ctrl.status = RunStatus::TerminatedOscillation;
                    break;
                }
            }
            Regime::Stable => {
                session.send(&ControllerMessage::Continue)?;
                traj.push_record(record);
                ctrl.step += 1;
                run.logical_steps += 1;
            }
        }
    }
    run.executed_steps = run.controller.step;
    Ok(())
}

/// Behaviour of the replaying test adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubConfig {
    /// Entropies emitted in order, one per step; then a finished step.
    pub entropies: Vec<f64>,
    /// Version announced in the hello reply.
    pub version: u32,
    /// Close the stream after emitting this many steps.
    pub close_after_steps: Option<usize>,
    /// Answer every rectify with this summary instead of a fresh one.
    pub fixed_anchor: Option<String>,
}

impl StubConfig {
    pub fn replay(entropies: Vec<f64>) -> Self {
        Self {
            entropies,
            version: PROTOCOL_VERSION,
            close_after_steps: None,
            fixed_anchor: None,
        }
    }
}

/// Counts of what the stub exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StubReport {
    pub steps_sent: usize,
    pub continues: usize,
    pub rectifies: usize,
}

/// Plays the generator side of the protocol from a recorded entropy series.
pub fn serve_stub<R: BufRead, W: Write>(cfg: &StubConfig, reader: R, mut writer: W) -> io::Result<StubReport> {
    let mut lines = reader.lines();
    let mut report = StubReport::default();
    let send = |w: &mut W, msg: &AdapterMessage| -> io::Result<()> {
        let mut line = serde_json::to_string(msg).map_err(io::Error::other)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        w.flush()
    };
    let mut next_line = || -> io::Result<Option<ControllerMessage>> {
        loop {
            match lines.next() {
                None => return Ok(None),
                Some(line) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    return serde_json::from_str(&line)
                        .map(Some)
                        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e));
                }
            }
        }
    };

    match next_line()? {
        Some(ControllerMessage::Hello { .. }) => send(&mut writer, &AdapterMessage::Hello { version: cfg.version })?,
        Some(other) => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("expected hello, got {other:?}"))),
        None => return Ok(report),
    }

    let mut idx = 0;
    loop {
        if cfg.close_after_steps == Some(report.steps_sent) {
            return Ok(report);
        }
        let Some(&entropy) = cfg.entropies.get(idx) else {
            send(&mut writer, &AdapterMessage::Step { entropy: 0.0, finished: true })?;
            return Ok(report);
        };
        send(&mut writer, &AdapterMessage::Step { entropy, finished: false })?;
        report.steps_sent += 1;
        idx += 1;
        match next_line()? {
            None => return Ok(report),
            Some(ControllerMessage::Continue) => report.continues += 1,
            Some(ControllerMessage::Rectify { .. }) => {
                report.rectifies += 1;
                let summary = cfg
                    .fixed_anchor
                    .clone()
                    .unwrap_or_else(|| format!("anchor {} after step {idx}", report.rectifies));
                send(&mut writer, &AdapterMessage::Anchor { summary })?;
            }
            Some(other) => {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected {other:?}")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader as StdBufReader;
    use std::os::unix::net::UnixStream;

    /// Session wired to an in-process stub on a socket pair.
    fn stub_session(cfg: StubConfig, timeout: Option<Duration>) -> (AdapterSession<UnixStream>, thread::JoinHandle<io::Result<StubReport>>) {
        let (ours, theirs) = UnixStream::pair().unwrap();
        let handle = thread::spawn(move || {
            let reader = StdBufReader::new(theirs.try_clone().unwrap());
            serve_stub(&cfg, reader, theirs)
        });
        let reader = ours.try_clone().unwrap();
        (AdapterSession::new(reader, ours, timeout), handle)
    }

    fn cfg(psi: f64) -> ControllerConfig {
        ControllerConfig::new(psi, 100)
    }

    #[test]
    fn hand_traced_reset() {
        let (mut s, h) = stub_session(StubConfig::replay(vec![1.0, 1.0, 4.0, 4.0]), None);
        let run = run_halo_external(&mut s, &ObserverCalibration::reference(), &cfg(1.0), COMPRESSION_TEMPLATE).unwrap();
        let events: Vec<StepEvent> = run.trajectory.records.iter().map(|r| r.event).collect();
        assert_eq!(events, vec![StepEvent::Step, StepEvent::Step, StepEvent::Step, StepEvent::Reset, StepEvent::Terminate]);
        let omegas: Vec<f64> = run.trajectory.records[..3].iter().map(|r| r.omega.unwrap()).collect();
        assert_eq!(omegas[..2], [0.0, 0.0]);
        assert!((omegas[2] - 0.9).abs() < 1e-12);
        assert_eq!(run.controller.resets[0].step, 3);
        assert_eq!(run.status(), RunStatus::Finished);
        assert!(run.trajectory.records[..3].iter().all(|r| r.discarded));
        let report = h.join().unwrap().unwrap();
        assert_eq!((report.steps_sent, report.continues, report.rectifies), (4, 3, 1));
    }

    #[test]
    fn low_entropy_runs_to_finish() {
        let (mut s, _h) = stub_session(StubConfig::replay(vec![2.0; 25]), None);
        let run = run_halo_external(&mut s, &ObserverCalibration::reference(), &cfg(1.0), COMPRESSION_TEMPLATE).unwrap();
        assert_eq!(run.resets(), 0);
        assert_eq!(run.logical_steps, 25);
        assert_eq!(run.status(), RunStatus::Finished);
    }

    #[test]
    fn closed_stream_yields_partial_run() {
        let stub = StubConfig {
            close_after_steps: Some(2),
            ..StubConfig::replay(vec![1.0; 10])
        };
        let (mut s, _h) = stub_session(stub, Some(Duration::from_secs(5)));
        match run_halo_external(&mut s, &ObserverCalibration::reference(), &cfg(1.0), "t") {
            Err(ExternalRunError::Transport { error, partial }) => {
                assert_eq!(error, TransportError::Closed);
                assert_eq!(partial.trajectory.len(), 2);
                assert_eq!(partial.status(), RunStatus::TerminatedTransport);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_aborts() {
        let stub = StubConfig {
            version: 2,
            ..StubConfig::replay(vec![1.0])
        };
        let (mut s, _h) = stub_session(stub, Some(Duration::from_secs(5)));
        match run_halo_external(&mut s, &ObserverCalibration::reference(), &cfg(1.0), "t") {
            Err(ExternalRunError::Transport { error, .. }) => {
                assert_eq!(error, TransportError::VersionMismatch { ours: 1, theirs: 2 })
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repeated_anchor_terminates() {
        let stub = StubConfig {
            fixed_anchor: Some("same".into()),
            ..StubConfig::replay(vec![5.0; 20])
        };
        let (mut s, _h) = stub_session(stub, None);
        let run = run_halo_external(&mut s, &ObserverCalibration::reference(), &cfg(1.0), "t").unwrap();
        assert_eq!(run.status(), RunStatus::TerminatedOscillation);
        assert_eq!(run.resets(), 3);
    }

    #[test]
    fn silent_adapter_times_out() {
        let (ours, _theirs) = UnixStream::pair().unwrap();
        let reader = ours.try_clone().unwrap();
        let mut s = AdapterSession::new(reader, ours, Some(Duration::from_millis(50)));
        assert!(matches!(s.handshake(), Err(TransportError::Timeout(_))));
    }

    #[test]
    fn malformed_line_is_reported() {
        let (ours, mut theirs) = UnixStream::pair().unwrap();
        theirs.write_all(b"{\"type\":\"nope\"}\n").unwrap();
        let reader = ours.try_clone().unwrap();
        let mut s = AdapterSession::new(reader, ours, Some(Duration::from_secs(5)));
        assert!(matches!(s.recv(), Err(TransportError::Malformed { .. })));
    }

    #[test]
    fn wire_format() {
        assert_eq!(
            serde_json::to_string(&ControllerMessage::Hello { version: 1 }).unwrap(),
            r#"{"type":"hello","version":1}"#
        );
        assert_eq!(serde_json::to_string(&ControllerMessage::Continue).unwrap(), r#"{"type":"continue"}"#);
        let m: AdapterMessage = serde_json::from_str(r#"{"type":"step","entropy":2.5,"finished":false}"#).unwrap();
        assert_eq!(m, AdapterMessage::Step { entropy: 2.5, finished: false });
        assert!(COMPRESSION_TEMPLATE.contains("{current_context_window}"));
        assert!(REINIT_TEMPLATE.contains("{compressed_summary_from_step1}"));
    }
}
