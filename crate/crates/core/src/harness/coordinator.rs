use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::worker::{spawn_worker, StepCommand, WorkerEvent, WorkerInit, WorkerLink};
use super::{
    check_meta, encode_meta, local_segment_id, FaultKind, FaultPlan, Harness, HarnessError,
    Injection, RunOutcome, RunStatus, Trigger, GLOBAL_SEGMENT, META_SEGMENT,
};
use crate::apps::BspApp;
use crate::clock::monotonic_ns;
use crate::detector::{FailureKind, LiveDetector};
use crate::metrics::{RunRecord, Variant};
use crate::policy::{should_checkpoint, CheckpointStrategy};
use crate::registry::{ProtectionMode, Registry, SegmentHandle, SegmentScope, SnapshotFilter};
use crate::store;

enum RoundResult {
    Complete {
        contributions: Vec<Vec<u8>>,
        locals: Vec<Option<Vec<u8>>>,
    },
    Failed(Vec<u32>),
}

struct Instruments {
    registry: Arc<Registry>,
    global: SegmentHandle,
    locals: Vec<Option<SegmentHandle>>,
    detector: LiveDetector,
}

struct Coordinator<'h> {
    harness: &'h Harness,
    app: Arc<dyn BspApp>,
    strategy: CheckpointStrategy<f64>,
    workers: u32,
    links: Vec<Box<dyn WorkerLink>>,
    events_tx: Sender<WorkerEvent>,
    events_rx: Receiver<WorkerEvent>,
    instruments: Option<Instruments>,
    pending_resets: Vec<Option<Vec<u8>>>,
    injections: Vec<(Injection, bool)>,
    cold_restart: bool,
    started: Instant,
    tick: Duration,
    global: Arc<Vec<u8>>,
    superstep: u64,
    round: u64,
    last_checkpoint_ns: u64,
    last_committed: Option<u64>,
    record: RunRecord,
    committed_epochs: Vec<u64>,
    restored_epochs: Vec<u64>,
    failed_at: Vec<u64>,
}

pub(super) fn execute(
    harness: &Harness,
    plan: &FaultPlan,
    resuming: bool,
) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    let cfg = &harness.config;
    cfg.validate()?;
    plan.validate(cfg.workers)?;
    let app: Arc<dyn BspApp> = Arc::from(harness.app.build()?);
    let workers = cfg.workers;

    let (epoch, global, locals) = if resuming {
        let ckpt = store::restore_latest(&cfg.checkpoint_dir)?
            .ok_or_else(|| HarnessError::NoCheckpoint(cfg.checkpoint_dir.clone()))?;
        let meta = ckpt
            .segment(META_SEGMENT)
            .ok_or_else(|| HarnessError::MetaMismatch("checkpoint has no __meta segment".into()))?;
        check_meta(&meta.payload, &harness.app, cfg)?;
        let global = ckpt
            .segment(GLOBAL_SEGMENT)
            .ok_or_else(|| HarnessError::MetaMismatch("checkpoint has no global state".into()))?
            .payload
            .clone();
        let locals = (0..workers)
            .map(|w| match ckpt.segment(&local_segment_id(w)) {
                Some(s) => Ok(s.payload.clone()),
                None => app.rebuild_local(&global, w, workers, ckpt.epoch()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        (ckpt.epoch(), global, locals)
    } else {
        if harness.instrumented {
            if let Some(latest) = store::latest_epoch(&cfg.checkpoint_dir)? {
                return Err(HarnessError::Config(format!(
                    "{} already holds checkpoints up to epoch {latest}; resume or use an empty directory",
                    cfg.checkpoint_dir.display()
                )));
            }
        }
        let locals = (0..workers).map(|w| app.init_local(w, workers)).collect();
        (0, app.init_global(), locals)
    };

    let instruments = if harness.instrumented {
        let registry = Arc::new(Registry::new(ProtectionMode::Reject));
        registry.register_reserved(META_SEGMENT, &encode_meta(&harness.app, cfg))?;
        let global_handle = registry.register_segment(GLOBAL_SEGMENT, SegmentScope::Global, &global)?;
        let local_handles = (0..workers)
            .map(|w| {
                cfg.local_checkpointing
                    .then(|| {
                        registry.register_segment(
                            &local_segment_id(w),
                            SegmentScope::Local(w),
                            &locals[w as usize],
                        )
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()?;
        harness.watcher.attach_registry(Arc::clone(&registry));
        let detector = LiveDetector::start(&cfg.detector, (0..workers).map(|w| w as u16))?;
        Some(Instruments {
            registry,
            global: global_handle,
            locals: local_handles,
            detector,
        })
    } else {
        None
    };

    let (events_tx, events_rx) = mpsc::channel();
    let tick = if harness.instrumented {
        Duration::from_millis((cfg.detector.period_ms / 5).clamp(1, 10))
    } else {
        Duration::from_millis(50)
    };
    let variant = if harness.instrumented {
        Variant::Instrumented
    } else {
        Variant::Baseline
    };
    let mut c = Coordinator {
        harness,
        app,
        strategy: cfg.strategy.resolve()?,
        workers,
        links: Vec::with_capacity(workers as usize),
        events_tx,
        events_rx,
        instruments,
        pending_resets: vec![None; workers as usize],
        injections: if harness.instrumented {
            plan.injections.iter().map(|i| (*i, false)).collect()
        } else {
            Vec::new()
        },
        cold_restart: plan.cold_restart,
        started,
        tick,
        global: Arc::new(global),
        superstep: epoch,
        round: 0,
        last_checkpoint_ns: monotonic_ns(),
        last_committed: resuming.then_some(epoch),
        record: RunRecord::new(
            format!("{}-{}", harness.app.name, harness.app.seed),
            variant,
        ),
        committed_epochs: Vec::new(),
        restored_epochs: Vec::new(),
        failed_at: Vec::new(),
    };
    for (w, local) in locals.into_iter().enumerate() {
        let link = c.spawn(w as u32, 0, local)?;
        c.links.push(link);
    }
    if let Some(inst) = c.instruments.as_mut() {
        inst.detector.monitor_mut().rearm_all(monotonic_ns());
    }
    if c.instruments.is_some() && !resuming && !c.strategy.is_never() {
        c.commit(0)?;
    }
    c.last_checkpoint_ns = monotonic_ns();
    c.drive()
}

impl Coordinator<'_> {
    fn spawn(
        &self,
        worker: u32,
        incarnation: u32,
        local: Vec<u8>,
    ) -> Result<Box<dyn WorkerLink>, HarnessError> {
        let cfg = &self.harness.config;
        let init = WorkerInit {
            app: self.harness.app,
            worker,
            workers: self.workers,
            incarnation,
            heartbeat: self
                .instruments
                .as_ref()
                .map(|i| (i.detector.local_addr(), cfg.detector.period_ms)),
            report_local: self.instruments.is_some() && cfg.local_checkpointing,
        };
        spawn_worker(&cfg.worker_mode, &self.app, init, local, self.events_tx.clone())
    }

    fn drive(mut self) -> Result<RunOutcome, HarnessError> {
        let total = self.harness.config.supersteps;
        while self.superstep < total {
            let s = self.superstep + 1;
            self.fire_where(|t| t == Trigger::AtSuperstep(s));
            self.round += 1;
            let step_started = Instant::now();
            for (w, link) in self.links.iter_mut().enumerate() {
                link.send(&StepCommand {
                    round: self.round,
                    superstep: s,
                    global: Arc::clone(&self.global),
                    reset_local: self.pending_resets[w].take(),
                });
            }
            match self.wait_round()? {
                RoundResult::Failed(failed) => self.recover(failed, s)?,
                RoundResult::Complete {
                    contributions,
                    locals,
                } => {
                    self.global = Arc::new(self.app.reduce(&self.global, &contributions)?);
                    self.superstep = s;
                    self.record
                        .superstep_wall_s
                        .push(step_started.elapsed().as_secs_f64());
                    if self.instruments.is_some() {
                        self.sync_registry(&locals)?;
                        if should_checkpoint(&self.strategy, s, monotonic_ns(), self.last_checkpoint_ns) {
                            self.commit(s)?;
                        }
                        if let Some(notice) = self.harness.watcher.poll() {
                            log::info!("termination notice ({:?}) at superstep {s}", notice.source);
                            if self.last_committed != Some(s) {
                                self.commit(s)?;
                            }
                            self.harness.watcher.acknowledge();
                            return Ok(self.finish(RunStatus::Resumable { epoch: s }));
                        }
                    }
                }
            }
        }
        Ok(self.finish(RunStatus::Completed))
    }

    fn fire_where(&mut self, pred: impl Fn(Trigger) -> bool) {
        for i in 0..self.injections.len() {
            let (inj, fired) = self.injections[i];
            if fired || !pred(inj.trigger) {
                continue;
            }
            self.injections[i].1 = true;
            match inj.kind {
                FaultKind::FailStop => {
                    log::info!("injecting fail-stop into worker {}", inj.worker);
                    self.links[inj.worker as usize].kill();
                }
                FaultKind::TerminationNotice => {
                    log::info!("injecting termination notice");
                    self.harness.watcher.inject(None);
                }
            }
        }
    }

    fn fire_elapsed(&mut self) {
        let elapsed = self.started.elapsed().as_millis() as u64;
        self.fire_where(|t| matches!(t, Trigger::AtElapsedMs(ms) if elapsed >= ms));
    }

    fn wait_round(&mut self) -> Result<RoundResult, HarnessError> {
        let n = self.workers as usize;
        let mut contributions: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut locals: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut received = 0;
        loop {
            self.fire_elapsed();
            match self.events_rx.recv_timeout(self.tick) {
                Ok(WorkerEvent::Contribution {
                    worker,
                    incarnation,
                    round,
                    local,
                    contribution,
                }) => {
                    let w = worker as usize;
                    let current = self.links[w].incarnation() == incarnation;
                    if current && round == self.round && contributions[w].is_none() {
                        contributions[w] = Some(contribution);
                        locals[w] = local;
                        received += 1;
                    }
                }
                Ok(WorkerEvent::Failed {
                    worker,
                    incarnation,
                    message,
                }) => {
                    if self.links[worker as usize].incarnation() == incarnation {
                        return Err(HarnessError::Worker { worker, message });
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(HarnessError::Protocol("worker event channel closed".into()))
                }
            }
            if let Some(inst) = self.instruments.as_mut() {
                let failed: Vec<u32> = inst
                    .detector
                    .poll()
                    .into_iter()
                    .filter(|e| e.kind == FailureKind::HeartbeatTimeout)
                    .filter(|e| self.links[e.node_id as usize].incarnation() == e.incarnation)
                    .map(|e| u32::from(e.node_id))
                    .collect();
                if !failed.is_empty() {
                    return Ok(RoundResult::Failed(failed));
                }
            }
            if received == n {
                return Ok(RoundResult::Complete {
                    contributions: contributions.into_iter().map(Option::unwrap).collect(),
                    locals,
                });
            }
        }
    }

    fn sync_registry(&self, locals: &[Option<Vec<u8>>]) -> Result<(), HarnessError> {
        let inst = self.instruments.as_ref().expect("instrumented");
        let _section = inst.registry.protect(SegmentScope::Global);
        inst.registry.update_segment(&inst.global, &self.global)?;
        for (handle, local) in inst.locals.iter().zip(locals) {
            if let (Some(h), Some(l)) = (handle, local) {
                inst.registry.update_segment(h, l)?;
            }
        }
        Ok(())
    }

    fn commit(&mut self, epoch: u64) -> Result<(), HarnessError> {
        let started = Instant::now();
        let inst = self.instruments.as_ref().expect("instrumented");
        let snapshot = inst.registry.snapshot(SnapshotFilter::All)?;
        let dir = &self.harness.config.checkpoint_dir;
        store::commit(dir, epoch, &snapshot)?;
        if let Some(keep) = self.harness.config.retention {
            store::prune(dir, keep)?;
        }
        self.record
            .checkpoint_cost_s
            .push(started.elapsed().as_secs_f64());
        self.committed_epochs.push(epoch);
        self.last_committed = Some(epoch);
        self.last_checkpoint_ns = monotonic_ns();
        Ok(())
    }

    fn recover(&mut self, failed: Vec<u32>, superstep: u64) -> Result<(), HarnessError> {
        let started = Instant::now();
        for &w in &failed {
            log::warn!("worker {w} missed its heartbeats during superstep {superstep}");
            if !self.links[w as usize].is_killed() {
                self.links[w as usize].kill();
            }
            self.record.fault_count += 1;
            self.failed_at.push(superstep);
        }

        let workers = self.workers;
        let (epoch, global, stored_locals) = match store::restore_latest(&self.harness.config.checkpoint_dir)? {
            Some(ckpt) => {
                let global = ckpt
                    .segment(GLOBAL_SEGMENT)
                    .ok_or_else(|| HarnessError::MetaMismatch("checkpoint has no global state".into()))?
                    .payload
                    .clone();
                let locals: Vec<Option<Vec<u8>>> = (0..workers)
                    .map(|w| ckpt.segment(&local_segment_id(w)).map(|s| s.payload.clone()))
                    .collect();
                (ckpt.epoch(), global, locals)
            }
            None if self.cold_restart => {
                log::warn!("no checkpoint available, restarting from the initial state");
                let locals = (0..workers).map(|w| Some(self.app.init_local(w, workers))).collect();
                (0, self.app.init_global(), locals)
            }
            None => {
                return Err(HarnessError::UnrecoverableFailure {
                    worker: failed[0],
                    superstep,
                })
            }
        };
        let locals = stored_locals
            .into_iter()
            .enumerate()
            .map(|(w, l)| match l {
                Some(l) => Ok(l),
                None => self.app.rebuild_local(&global, w as u32, workers, epoch),
            })
            .collect::<Result<Vec<_>, _>>()?;

        for (w, local) in locals.iter().enumerate() {
            if failed.contains(&(w as u32)) {
                let incarnation = self.links[w].incarnation() + 1;
                let link = self.spawn(w as u32, incarnation, local.clone())?;
                self.links[w] = link;
                if let Some(inst) = self.instruments.as_mut() {
                    inst.detector
                        .monitor_mut()
                        .expect_incarnation(w as u16, incarnation, monotonic_ns());
                }
                self.pending_resets[w] = None;
            } else {
                self.pending_resets[w] = Some(local.clone());
            }
        }

        self.global = Arc::new(global);
        self.superstep = epoch;
        let reported: Vec<Option<Vec<u8>>> = locals.into_iter().map(Some).collect();
        self.sync_registry(&reported)?;
        self.last_checkpoint_ns = monotonic_ns();
        self.restored_epochs.push(epoch);
        self.record
            .recovery_cost_s
            .push(started.elapsed().as_secs_f64());
        log::info!("rolled back to epoch {epoch}");
        Ok(())
    }

    fn finish(mut self, status: RunStatus) -> RunOutcome {
        for link in std::mem::take(&mut self.links) {
            link.shutdown();
        }
        self.record.total_wall_s = self.started.elapsed().as_secs_f64();
        RunOutcome {
            global: Arc::try_unwrap(self.global).unwrap_or_else(|g| (*g).clone()),
            record: self.record,
            status,
            committed_epochs: self.committed_epochs,
            restored_epochs: self.restored_epochs,
            failed_at: self.failed_at,
        }
    }
}
