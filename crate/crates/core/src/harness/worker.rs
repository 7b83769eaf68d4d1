//! Worker execution: in-process threads or child OS processes.
//!
//! Both kinds share one event channel back to the coordinator. A fail-stop
//! kill silences the worker completely: no further replies, no heartbeats.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::apps::{AppSpec, BspApp};
use crate::detector::HeartbeatSender;

/// Where workers run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum WorkerMode {
    /// One thread per worker; fail-stop aborts the thread.
    #[default]
    InProcess,
    /// One child process per worker, started as `program args...` and
    /// speaking the frame protocol of [`worker_main`] on stdin/stdout;
    /// fail-stop kills the process.
    Process { program: PathBuf, args: Vec<String> },
}

/// Coordinator-to-worker superstep order.
#[derive(Debug, Clone)]
pub(crate) struct StepCommand {
    pub round: u64,
    pub superstep: u64,
    pub global: Arc<Vec<u8>>,
    /// Replaces the worker's local state before computing (after a rollback).
    pub reset_local: Option<Vec<u8>>,
}

#[derive(Debug)]
pub(crate) enum WorkerEvent {
    Contribution {
        worker: u32,
        incarnation: u32,
        round: u64,
        local: Option<Vec<u8>>,
        contribution: Vec<u8>,
    },
    Failed {
        worker: u32,
        incarnation: u32,
        message: String,
    },
}

/// Everything a worker needs to start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct WorkerInit {
    pub app: AppSpec,
    pub worker: u32,
    pub workers: u32,
    pub incarnation: u32,
    /// Heartbeat target and period; `None` disables heartbeats.
    pub heartbeat: Option<(SocketAddr, u64)>,
    pub report_local: bool,
}

pub(crate) trait WorkerLink: Send {
    fn incarnation(&self) -> u32;
    fn send(&mut self, cmd: &StepCommand);
    /// Fail-stop: the worker stops computing, replying and heartbeating.
    fn kill(&mut self);
    fn is_killed(&self) -> bool;
    fn shutdown(self: Box<Self>);
}

pub(crate) fn spawn_worker(
    mode: &WorkerMode,
    app: &Arc<dyn BspApp>,
    init: WorkerInit,
    local: Vec<u8>,
    events: Sender<WorkerEvent>,
) -> Result<Box<dyn WorkerLink>, HarnessError> {
    Ok(match mode {
        WorkerMode::InProcess => Box::new(ThreadWorker::spawn(Arc::clone(app), init, local, events)?),
        WorkerMode::Process { program, args } => {
            Box::new(ProcessWorker::spawn(program, args, init, local, events)?)
        }
    })
}

fn heartbeat_for(init: &WorkerInit) -> io::Result<Option<HeartbeatSender>> {
    init.heartbeat
        .map(|(addr, period_ms)| {
            HeartbeatSender::spawn(
                addr,
                init.worker as u16,
                init.incarnation,
                Duration::from_millis(period_ms),
            )
        })
        .transpose()
}

enum ThreadCommand {
    Step(StepCommand),
    Shutdown,
}

struct ThreadWorker {
    incarnation: u32,
    alive: Arc<AtomicBool>,
    tx: Option<Sender<ThreadCommand>>,
    heartbeat: Option<HeartbeatSender>,
    handle: Option<JoinHandle<()>>,
}

impl ThreadWorker {
    fn spawn(
        app: Arc<dyn BspApp>,
        init: WorkerInit,
        local: Vec<u8>,
        events: Sender<WorkerEvent>,
    ) -> Result<Self, HarnessError> {
        let heartbeat = heartbeat_for(&init)?;
        let alive = Arc::new(AtomicBool::new(true));
        let (tx, rx) = mpsc::channel();
        let handle = {
            let alive = Arc::clone(&alive);
            let init = init.clone();
            thread::Builder::new()
                .name(format!("worker-{}.{}", init.worker, init.incarnation))
                .spawn(move || thread_loop(app, init, local, rx, events, alive))?
        };
        Ok(ThreadWorker {
            incarnation: init.incarnation,
            alive,
            tx: Some(tx),
            heartbeat,
            handle: Some(handle),
        })
    }
}

fn thread_loop(
    app: Arc<dyn BspApp>,
    init: WorkerInit,
    mut local: Vec<u8>,
    rx: Receiver<ThreadCommand>,
    events: Sender<WorkerEvent>,
    alive: Arc<AtomicBool>,
) {
    for cmd in rx {
        if !alive.load(Ordering::SeqCst) {
            return;
        }
        let ThreadCommand::Step(step) = cmd else {
            return;
        };
        if let Some(reset) = step.reset_local {
            local = reset;
        }
        let result = app.superstep(&step.global, &local, init.worker, init.workers, step.superstep);
        if !alive.load(Ordering::SeqCst) {
            return;
        }
        let event = match result {
            Ok(out) => {
                local = out.local;
                WorkerEvent::Contribution {
                    worker: init.worker,
                    incarnation: init.incarnation,
                    round: step.round,
                    local: init.report_local.then(|| local.clone()),
                    contribution: out.contribution,
                }
            }
            Err(e) => WorkerEvent::Failed {
                worker: init.worker,
                incarnation: init.incarnation,
                message: e.to_string(),
            },
        };
        if events.send(event).is_err() {
            return;
        }
    }
}

impl WorkerLink for ThreadWorker {
    fn incarnation(&self) -> u32 {
        self.incarnation
    }

    fn send(&mut self, cmd: &StepCommand) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(ThreadCommand::Step(cmd.clone()));
        }
    }

    fn kill(&mut self) {
        self.alive.store(false, Ordering::SeqCst);
        self.heartbeat.take();
        // Dropping the sender ends the loop once the current step returns;
        // the thread is detached rather than joined, like a crashed node.
        self.tx.take();
        self.handle.take();
    }

    fn is_killed(&self) -> bool {
        !self.alive.load(Ordering::SeqCst)
    }

    fn shutdown(mut self: Box<Self>) {
        self.heartbeat.take();
        if let Some(tx) = self.tx.take() {
            let _ = tx.send(ThreadCommand::Shutdown);
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

// Frame protocol: u32 length (tag + body), u8 tag, body.
const TAG_INIT: u8 = 1;
const TAG_STEP: u8 = 2;
const TAG_REPLY: u8 = 3;
const TAG_FAILED: u8 = 4;
const TAG_SHUTDOWN: u8 = 5;

fn write_frame(w: &mut impl Write, tag: u8, parts: &[&[u8]]) -> io::Result<()> {
    let len: usize = 1 + parts.iter().map(|p| p.len()).sum::<usize>();
    let len = u32::try_from(len).map_err(|_| io::Error::other("frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[tag])?;
    for p in parts {
        w.write_all(p)?;
    }
    w.flush()
}

fn read_frame(r: &mut impl Read) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "empty frame"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let tag = body.remove(0);
    Ok(Some((tag, body)))
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_owned())
}

fn split_u64(b: &[u8]) -> io::Result<(u64, &[u8])> {
    if b.len() < 8 {
        return Err(bad("truncated frame"));
    }
    Ok((u64::from_le_bytes(b[..8].try_into().unwrap()), &b[8..]))
}

/// `[flag u8][len u64][bytes]` when flag is 1, `[0]` otherwise.
fn split_opt_bytes(b: &[u8]) -> io::Result<(Option<Vec<u8>>, &[u8])> {
    match b.first() {
        Some(0) => Ok((None, &b[1..])),
        Some(1) => {
            let (n, rest) = split_u64(&b[1..])?;
            let n = n as usize;
            if rest.len() < n {
                return Err(bad("truncated frame"));
            }
            Ok((Some(rest[..n].to_vec()), &rest[n..]))
        }
        _ => Err(bad("bad option flag")),
    }
}

fn opt_bytes_header(v: &Option<Vec<u8>>) -> Vec<u8> {
    match v {
        None => vec![0],
        Some(b) => {
            let mut h = vec![1];
            h.extend_from_slice(&(b.len() as u64).to_le_bytes());
            h
        }
    }
}

struct ProcessWorker {
    incarnation: u32,
    killed: bool,
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    reader: Option<JoinHandle<()>>,
}

impl ProcessWorker {
    fn spawn(
        program: &PathBuf,
        args: &[String],
        init: WorkerInit,
        local: Vec<u8>,
        events: Sender<WorkerEvent>,
    ) -> Result<Self, HarnessError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                HarnessError::Config(format!("cannot start worker {}: {e}", program.display()))
            })?;
        let mut stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let init_json = serde_json::to_vec(&init).expect("init serializes");
        write_frame(
            &mut stdin,
            TAG_INIT,
            &[&(init_json.len() as u64).to_le_bytes(), &init_json, &local],
        )?;
        let (worker, incarnation) = (init.worker, init.incarnation);
        let reader = thread::Builder::new()
            .name(format!("worker-{worker}.{incarnation}-rx"))
            .spawn(move || {
                let mut stdout = BufReader::new(stdout);
                loop {
                    let event = match read_frame(&mut stdout) {
                        Ok(Some((TAG_REPLY, body))) => match parse_reply(&body) {
                            Ok((round, local, contribution)) => WorkerEvent::Contribution {
                                worker,
                                incarnation,
                                round,
                                local,
                                contribution,
                            },
                            Err(e) => WorkerEvent::Failed {
                                worker,
                                incarnation,
                                message: e.to_string(),
                            },
                        },
                        Ok(Some((TAG_FAILED, body))) => WorkerEvent::Failed {
                            worker,
                            incarnation,
                            message: String::from_utf8_lossy(&body).into_owned(),
                        },
                        Ok(Some((tag, _))) => WorkerEvent::Failed {
                            worker,
                            incarnation,
                            message: format!("unexpected frame tag {tag}"),
                        },
                        // EOF or a broken pipe: the process is gone. Its
                        // silence is left for the heartbeat monitor to notice.
                        Ok(None) | Err(_) => return,
                    };
                    if events.send(event).is_err() {
                        return;
                    }
                }
            })?;
        Ok(ProcessWorker {
            incarnation,
            killed: false,
            child,
            stdin: Some(stdin),
            reader: Some(reader),
        })
    }
}

fn parse_reply(body: &[u8]) -> io::Result<(u64, Option<Vec<u8>>, Vec<u8>)> {
    let (round, rest) = split_u64(body)?;
    let (local, rest) = split_opt_bytes(rest)?;
    Ok((round, local, rest.to_vec()))
}

impl WorkerLink for ProcessWorker {
    fn incarnation(&self) -> u32 {
        self.incarnation
    }

    fn send(&mut self, cmd: &StepCommand) {
        let Some(stdin) = self.stdin.as_mut() else {
            return;
        };
        let reset = opt_bytes_header(&cmd.reset_local);
        let result = write_frame(
            stdin,
            TAG_STEP,
            &[
                &cmd.round.to_le_bytes(),
                &cmd.superstep.to_le_bytes(),
                &reset,
                cmd.reset_local.as_deref().unwrap_or_default(),
                &cmd.global,
            ],
        );
        if let Err(e) = result {
            // A dead child is detected through its missing heartbeats.
            log::debug!("worker pipe write failed: {e}");
            self.stdin = None;
        }
    }

    fn kill(&mut self) {
        self.killed = true;
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }

    fn is_killed(&self) -> bool {
        self.killed
    }

    fn shutdown(mut self: Box<Self>) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = write_frame(&mut stdin, TAG_SHUTDOWN, &[]);
        }
        let _ = self.child.wait();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for ProcessWorker {
    fn drop(&mut self) {
        if self.reader.is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Entry point of a worker child process: serves superstep frames from
/// `input` and writes replies to `output` until shutdown or end of input.
pub fn worker_main(input: impl Read, output: impl Write) -> Result<(), HarnessError> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    let protocol = |m: &str| HarnessError::Protocol(m.to_owned());

    let (tag, body) = read_frame(&mut input)?.ok_or_else(|| protocol("no init frame"))?;
    if tag != TAG_INIT {
        return Err(protocol("first frame is not init"));
    }
    let (json_len, rest) = split_u64(&body)?;
    let json_len = json_len as usize;
    if rest.len() < json_len {
        return Err(protocol("truncated init frame"));
    }
    let init: WorkerInit = serde_json::from_slice(&rest[..json_len])
        .map_err(|e| HarnessError::Protocol(format!("bad init: {e}")))?;
    let mut local = rest[json_len..].to_vec();
    let app = init.app.build()?;
    let _heartbeat = heartbeat_for(&init)?;

    while let Some((tag, body)) = read_frame(&mut input)? {
        match tag {
            TAG_STEP => {
                let (round, rest) = split_u64(&body)?;
                let (superstep, rest) = split_u64(rest)?;
                let (reset, global) = split_opt_bytes(rest)?;
                if let Some(reset) = reset {
                    local = reset;
                }
                match app.superstep(global, &local, init.worker, init.workers, superstep) {
                    Ok(out) => {
                        local = out.local;
                        let reported = init.report_local.then(|| local.clone());
                        let header = opt_bytes_header(&reported);
                        write_frame(
                            &mut output,
                            TAG_REPLY,
                            &[
                                &round.to_le_bytes(),
                                &header,
                                reported.as_deref().unwrap_or_default(),
                                &out.contribution,
                            ],
                        )?;
                    }
                    Err(e) => {
                        write_frame(&mut output, TAG_FAILED, &[e.to_string().as_bytes()])?;
                    }
                }
            }
            TAG_SHUTDOWN => break,
            other => return Err(HarnessError::Protocol(format!("unexpected frame tag {other}"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::AppKind;

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, TAG_STEP, &[b"ab", b"", b"cde"]).unwrap();
        write_frame(&mut buf, TAG_SHUTDOWN, &[]).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap(), Some((TAG_STEP, b"abcde".to_vec())));
        assert_eq!(read_frame(&mut r).unwrap(), Some((TAG_SHUTDOWN, vec![])));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn optional_bytes() {
        for v in [None, Some(vec![]), Some(vec![1, 2, 3])] {
            let mut b = opt_bytes_header(&v);
            b.extend_from_slice(v.as_deref().unwrap_or_default());
            b.extend_from_slice(b"tail");
            let (got, rest) = split_opt_bytes(&b).unwrap();
            assert_eq!(got, v);
            assert_eq!(rest, b"tail");
        }
    }

    #[test]
    fn worker_main_serves_steps() {
        let spec = AppSpec::new(AppKind::JacobiSolver, 2, 3, 4);
        let app = spec.build().unwrap();
        let init = WorkerInit {
            app: spec,
            worker: 1,
            workers: 2,
            incarnation: 0,
            heartbeat: None,
            report_local: true,
        };
        let local = app.init_local(1, 2);
        let global = app.init_global();
        let mut input = Vec::new();
        let json = serde_json::to_vec(&init).unwrap();
        write_frame(&mut input, TAG_INIT, &[&(json.len() as u64).to_le_bytes(), &json, &local]).unwrap();
        write_frame(
            &mut input,
            TAG_STEP,
            &[&7u64.to_le_bytes(), &1u64.to_le_bytes(), &[0], &global],
        )
        .unwrap();
        write_frame(&mut input, TAG_SHUTDOWN, &[]).unwrap();
        let mut output = Vec::new();
        worker_main(&input[..], &mut output).unwrap();

        let (tag, body) = read_frame(&mut &output[..]).unwrap().unwrap();
        assert_eq!(tag, TAG_REPLY);
        let (round, reported, contribution) = parse_reply(&body).unwrap();
        let expected = app.superstep(&global, &local, 1, 2, 1).unwrap();
        assert_eq!(round, 7);
        assert_eq!(reported, Some(expected.local));
        assert_eq!(contribution, expected.contribution);
    }

    #[test]
    fn worker_main_rejects_garbage() {
        let mut input = Vec::new();
        write_frame(&mut input, TAG_STEP, &[b"x"]).unwrap();
        assert!(matches!(
            worker_main(&input[..], Vec::new()),
            Err(HarnessError::Protocol(_))
        ));
    }
}
