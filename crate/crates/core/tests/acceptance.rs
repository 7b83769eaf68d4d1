//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNMET` print FAIL but do not fail the process;
//! README.md explains each one. Any other failure exits non-zero.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use faultline::apps::{AppKind, AppSpec};
use faultline::clock::monotonic_ns;
use faultline::detector::{DetectorConfig, FailureKind, HeartbeatSender, LiveDetector};
use faultline::harness::{self, FaultPlan, Injection, RunConfig, RunStatus};
use faultline::metrics::{median, relative_overhead, wall_times};
use faultline::policy::{young_daly_interval, CheckpointStrategy, CostModel, PolicyError};
use faultline::registry::{ProtectionMode, Registry, SegmentScope, SnapshotFilter};
use faultline::store;
use num_bigint::BigUint;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Criteria whose stated target cannot be met as written.
const KNOWN_UNMET: &[&str] = &["median relative overhead on reference medians"];

type Verdict = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    check: fn() -> Verdict,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "median relative overhead on reference medians",
            limit: Duration::from_secs(1),
            check: overhead_on_reference_medians,
        },
        Criterion {
            name: "young/daly interval and boundaries",
            limit: Duration::from_secs(1),
            check: young_daly,
        },
        Criterion {
            name: "checkpoint roundtrip x1000",
            limit: Duration::from_secs(30),
            check: roundtrip,
        },
        Criterion {
            name: "torn-write safety x200",
            limit: Duration::from_secs(60),
            check: torn_writes,
        },
        Criterion {
            name: "recovery determinism x60",
            limit: Duration::from_secs(300),
            check: recovery_determinism,
        },
        Criterion {
            name: "detection latency and soak",
            limit: Duration::from_secs(60),
            check: detection,
        },
        Criterion {
            name: "overhead linear in checkpoint count",
            limit: Duration::from_secs(600),
            check: linearity,
        },
        Criterion {
            name: "run, terminate, resume equivalence",
            limit: Duration::from_secs(60),
            check: terminate_and_resume,
        },
    ];

    let mut unexpected = 0;
    for c in &criteria {
        let started = Instant::now();
        let verdict = (c.check)();
        let took = started.elapsed();
        let verdict = match verdict {
            Ok(detail) if took > c.limit => Err(format!("{detail}; took {took:.1?}, limit {:?}", c.limit)),
            other => other,
        };
        match verdict {
            Ok(detail) => println!("PASS {}: {detail} ({took:.2?})", c.name),
            Err(detail) => {
                let known = KNOWN_UNMET.contains(&c.name);
                let tag = if known { " [known, documented]" } else { "" };
                println!("FAIL {}: {detail} ({took:.2?}){tag}", c.name);
                if !known {
                    unexpected += 1;
                }
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed unexpectedly");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn overhead_on_reference_medians() -> Verdict {
    let with = 13441.8312f64;
    let without = with - 174.9448;
    let r = relative_overhead(&[with], &[without]).map_err(|e| e.to_string())?;
    let target = 0.013016;
    let diff = (r.relative_overhead - target).abs();
    let detail = format!(
        "relative_overhead = {:.9}, target {target} +/- 1e-6, off by {diff:.3e}",
        r.relative_overhead
    );
    if diff <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn isqrt_seconds(value_ms2: BigUint) -> f64 {
    const DIGITS: u32 = 24;
    let root = (value_ms2 * BigUint::from(10u32).pow(2 * DIGITS)).sqrt().to_string();
    let (int, frac) = root.split_at(root.len() - DIGITS as usize);
    format!("{int}.{frac}").parse::<f64>().unwrap() / 1000.0
}

fn young_daly() -> Verdict {
    let t = young_daly_interval(&CostModel::new(86400.0, 30.0, 30.0, 30.0)).map_err(|e| e.to_string())?;
    let oracle = isqrt_seconds(BigUint::from(2u32) * BigUint::from(86_340_000u64) * BigUint::from(30_000u64));
    ensure((t - oracle).abs() / oracle <= 1e-6, format!("{t} vs oracle {oracle}"))?;
    ensure((t - 2276.0493).abs() / 2276.0493 <= 1e-6, format!("{t} vs 2276.0493"))?;
    let c0 = young_daly_interval(&CostModel::new(86400.0, 30.0, 30.0, 0.0)).map_err(|e| e.to_string())?;
    ensure(c0 == 0.0, format!("C=0 gave {c0}"))?;
    let edge = young_daly_interval(&CostModel::new(60.0, 30.0, 30.0, 30.0)).map_err(|e| e.to_string())?;
    ensure(edge == 0.0, format!("mu=D+R gave {edge}"))?;
    ensure(
        matches!(
            young_daly_interval(&CostModel::new(59.0, 30.0, 30.0, 30.0)),
            Err(PolicyError::MtbfTooSmall { .. })
        ),
        "mu<D+R accepted",
    )?;
    Ok(format!("T = {t:.10} s, oracle {oracle:.10} s; C=0 -> 0; mu=D+R -> 0"))
}

fn random_registry(rng: &mut StdRng) -> Registry {
    let reg = Registry::new(ProtectionMode::Reject);
    let n = rng.random_range(0..8);
    for i in 0..n {
        let scope = if rng.random_bool(0.5) {
            SegmentScope::Global
        } else {
            SegmentScope::Local(rng.random_range(0..16))
        };
        let len = rng.random_range(0..2048);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let id = format!("seg.{}.{i}", rng.random_range(0..1000));
        if let Ok(h) = reg.register_segment(&id, scope, &payload) {
            for _ in 0..rng.random_range(0..3) {
                let p: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
                reg.update_segment(&h, &p).unwrap();
            }
        }
    }
    reg
}

fn roundtrip() -> Verdict {
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for epoch in 0..1000u64 {
        let snap = random_registry(&mut rng)
            .snapshot(SnapshotFilter::All)
            .map_err(|e| e.to_string())?;
        store::commit(dir.path(), epoch, &snap).map_err(|e| e.to_string())?;
        let back = store::restore_latest(dir.path())
            .map_err(|e| e.to_string())?
            .ok_or("nothing restored")?;
        ensure(back.epoch() == epoch, format!("epoch {} != {epoch}", back.epoch()))?;
        ensure(back.segments.len() == snap.len(), format!("epoch {epoch}: segment count"))?;
        for (a, b) in back.segments.iter().zip(&snap) {
            ensure(
                a.id == b.id && a.scope == b.scope && a.payload == b.payload,
                format!("epoch {epoch}: segment {} differs", b.id),
            )?;
        }
        if epoch % 50 == 49 {
            store::prune(dir.path(), 2).map_err(|e| e.to_string())?;
        }
    }
    Ok("1000 snapshots decoded byte-identically".into())
}

fn torn_writes() -> Verdict {
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trials = 250u64;
    for t in 0..trials {
        let epoch = 2 * t;
        let before = random_registry(&mut rng).snapshot(SnapshotFilter::All).unwrap();
        store::commit(dir.path(), epoch, &before).map_err(|e| e.to_string())?;
        let after = random_registry(&mut rng).snapshot(SnapshotFilter::All).unwrap();
        let staged = store::stage_commit(dir.path(), epoch + 1, 1, &after).map_err(|e| e.to_string())?;
        let full = fs::read(staged.temp_path()).map_err(|e| e.to_string())?;
        let cut = rng.random_range(0..full.len());
        let torn_name = if rng.random_bool(0.5) {
            staged.temp_path().to_path_buf()
        } else {
            // Simulates a rename that reached the disk before the data did.
            let _ = fs::remove_file(staged.temp_path());
            staged.final_path().to_path_buf()
        };
        fs::write(&torn_name, &full[..cut]).map_err(|e| e.to_string())?;
        drop(staged);

        let back = store::restore_latest(dir.path())
            .map_err(|e| e.to_string())?
            .ok_or("nothing restored")?;
        ensure(back.epoch() == epoch, format!("trial {t}: restored {} not {epoch}", back.epoch()))?;
        let same = back.segments.len() == before.len()
            && back.segments.iter().zip(&before).all(|(a, b)| a.id == b.id && a.payload == b.payload);
        ensure(same, format!("trial {t}: restored payload differs"))?;
        let _ = fs::remove_file(&torn_name);
    }
    Ok(format!("{trials} truncations, previous epoch always restored intact"))
}

fn recovery_determinism() -> Verdict {
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let trials = 60;
    let mut faults = 0;
    for t in 0..trials {
        let kind = AppKind::ALL[t % 3];
        let spec = AppSpec::new(kind, rng.random_range(4..12), rng.random_range(8..40), rng.random());
        let workers = rng.random_range(2..6u32);
        let supersteps = rng.random_range(8..16u64);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = RunConfig {
            workers,
            supersteps,
            strategy: CheckpointStrategy::EveryKSupersteps(rng.random_range(1..4)),
            local_checkpointing: rng.random_bool(0.5),
            ..RunConfig::desk(dir.path().join("clean"))
        };
        let clean = harness::run(&spec, &cfg, &FaultPlan::none()).map_err(|e| e.to_string())?;

        let count = rng.random_range(1..=3usize);
        let mut used = BTreeSet::new();
        let mut injections = Vec::new();
        while injections.len() < count {
            let w = rng.random_range(0..workers);
            let s = rng.random_range(1..=supersteps);
            if used.insert((w, s)) {
                injections.push(Injection::fail_stop(w, s));
            }
        }
        let faulty_cfg = RunConfig {
            checkpoint_dir: dir.path().join("faulty"),
            ..cfg.clone()
        };
        let out = harness::run(&spec, &faulty_cfg, &FaultPlan::new(injections.clone()))
            .map_err(|e| format!("trial {t} ({kind}, {injections:?}): {e}"))?;
        ensure(
            out.global == clean.global,
            format!("trial {t} ({kind}, {injections:?}): final state differs"),
        )?;
        for (r, f) in out.restored_epochs.iter().zip(&out.failed_at) {
            ensure(r <= f, format!("trial {t}: restored epoch {r} after failure at {f}"))?;
        }
        let nonzero = out.committed_epochs.iter().filter(|&&e| e > 0).count() as u64;
        ensure(
            nonzero <= supersteps && out.committed_epochs.windows(2).all(|w| w[0] < w[1]),
            format!("trial {t}: committed epochs {:?}", out.committed_epochs),
        )?;
        faults += out.record.fault_count;
    }
    Ok(format!("{trials} trials, {faults} detected fail-stops, all bit-identical"))
}

fn detection() -> Verdict {
    let cfg = DetectorConfig::fast();
    let period = Duration::from_millis(cfg.period_ms);
    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    let mut latencies = Vec::new();
    let mut false_positives = 0;
    for _round in 0..10 {
        let nodes: Vec<u16> = (0..10).collect();
        let mut det = LiveDetector::start(&cfg, nodes.clone()).map_err(|e| e.to_string())?;
        let mut senders: Vec<Option<HeartbeatSender>> = nodes
            .iter()
            .map(|&n| HeartbeatSender::spawn(det.local_addr(), n, 0, period).ok())
            .collect();
        det.monitor_mut().rearm_all(monotonic_ns());
        let base = Instant::now();
        let kill_at: Vec<Duration> = nodes
            .iter()
            .map(|_| Duration::from_millis(rng.random_range(200..700)))
            .collect();
        let mut killed_ns: Vec<Option<u64>> = vec![None; nodes.len()];
        let mut detected: Vec<Option<u64>> = vec![None; nodes.len()];
        while detected.iter().any(Option::is_none) && base.elapsed() < Duration::from_secs(3) {
            for (i, at) in kill_at.iter().enumerate() {
                if killed_ns[i].is_none() && base.elapsed() >= *at {
                    senders[i].take();
                    killed_ns[i] = Some(monotonic_ns());
                }
            }
            for e in det.poll() {
                if e.kind != FailureKind::HeartbeatTimeout {
                    continue;
                }
                let i = e.node_id as usize;
                match killed_ns[i] {
                    Some(k) if detected[i].is_none() => detected[i] = Some(e.detected_at_ns.saturating_sub(k)),
                    _ => false_positives += 1,
                }
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        latencies.extend(detected.into_iter().map(|d| d.map_or(f64::INFINITY, |ns| ns as f64 / 1e6)));
    }
    let within = latencies.iter().filter(|&&ms| ms <= 250.0).count();
    let med = median(&latencies).unwrap_or(f64::NAN);
    let worst = latencies.iter().cloned().fold(0.0, f64::max);

    let soak_nodes: Vec<u16> = (0..8).collect();
    let mut det = LiveDetector::start(&cfg, soak_nodes.clone()).map_err(|e| e.to_string())?;
    let senders: Vec<_> = soak_nodes
        .iter()
        .map(|&n| HeartbeatSender::spawn(det.local_addr(), n, 0, period))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    det.monitor_mut().rearm_all(monotonic_ns());
    let soak_start = Instant::now();
    let mut soak_false = 0;
    while soak_start.elapsed() < Duration::from_secs(10) {
        soak_false += det.poll().len();
        std::thread::sleep(Duration::from_millis(5));
    }
    drop(senders);

    let detail = format!(
        "{within}/{} detected within 250 ms (median {med:.1} ms, worst {worst:.1} ms), \
         {false_positives} early detections, {soak_false} false positives in 10 s soak",
        latencies.len()
    );
    ensure(within * 100 >= latencies.len() * 95 && false_positives == 0 && soak_false == 0, detail.clone())?;
    Ok(detail)
}

fn linearity() -> Verdict {
    let spec = AppSpec::desk(AppKind::JacobiSolver, 11);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut points = Vec::new();
    for supersteps in [10u64, 20, 40, 80] {
        let cfg = RunConfig {
            supersteps,
            strategy: CheckpointStrategy::EveryKSupersteps(1),
            ..RunConfig::desk(dir.path())
        };
        let res = harness::bench(&spec, &cfg, 5).map_err(|e| e.to_string())?;
        let mut all = res.instrumented;
        all.extend(res.baseline);
        let (with, without) = wall_times(&all);
        let gap = median(&with).unwrap() - median(&without).unwrap();
        // Epoch 0 plus one commit per superstep.
        points.push(((supersteps + 1) as f64, gap));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if syy == 0.0 { 0.0 } else { sxy * sxy / (sxx * syy) };
    let slope = sxy / sxx;
    let shown: Vec<String> = points.iter().map(|(x, y)| format!("{x}:{:.2}ms", y * 1e3)).collect();
    let detail = format!("R^2 = {r2:.4}, slope {:.3} ms/checkpoint, points [{}]", slope * 1e3, shown.join(", "));
    ensure(r2 > 0.9, detail.clone())?;
    Ok(detail)
}

fn cli_binary() -> Result<PathBuf, String> {
    if let Ok(p) = std::env::var("FAULTLINE_BIN") {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let profile_dir = exe
        .parent()
        .and_then(|deps| deps.parent())
        .ok_or("cannot locate target directory")?;
    let bin = profile_dir.join(format!("faultline{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "-p", "faultline-cli", "--bin", "faultline"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        let status = cmd.status().map_err(|e| e.to_string())?;
        ensure(status.success() && bin.exists(), "could not build the faultline CLI")?;
    }
    Ok(bin)
}

fn terminate_and_resume() -> Verdict {
    let spec = AppSpec::desk(AppKind::ParticleSwarm, 77);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let straight_cfg = RunConfig::desk(dir.path().join("straight"));
    let straight = harness::run(&spec, &straight_cfg, &FaultPlan::none()).map_err(|e| e.to_string())?;

    let cfg = RunConfig::desk(dir.path().join("split"));
    let first = harness::run(&spec, &cfg, &FaultPlan::new(vec![Injection::notice(10)])).map_err(|e| e.to_string())?;
    ensure(
        first.status == RunStatus::Resumable { epoch: 10 },
        format!("interrupted run ended as {:?}", first.status),
    )?;
    let second = harness::resume(&spec, &cfg).map_err(|e| e.to_string())?;
    ensure(second.status == RunStatus::Completed, "resumed run did not complete")?;
    ensure(second.global == straight.global, "resumed state differs from the straight run")?;

    // The same through the CLI, with process workers.
    let bin = cli_binary()?;
    let conf = dir.path().join("demo.toml");
    fs::write(
        &conf,
        "[app]\nname = \"particle_swarm\"\nseed = 77\n\n[run]\nworkers = 4\nsupersteps = 20\n\
         checkpoint_dir = \"cli\"\n\n[detector]\nperiod_ms = 50\n\n\
         [[faults]]\nat_superstep = 10\nkind = \"termination_notice\"\n",
    )
    .map_err(|e| e.to_string())?;
    let run = Command::new(&bin).args(["run", "-c"]).arg(&conf).output().map_err(|e| e.to_string())?;
    let code = run.status.code();
    ensure(code == Some(3), format!("CLI run exited with {code:?}"))?;
    let resume = Command::new(&bin).args(["resume", "-c"]).arg(&conf).output().map_err(|e| e.to_string())?;
    ensure(resume.status.code() == Some(0), format!("CLI resume exited with {:?}", resume.status.code()))?;
    let crc = String::from_utf8_lossy(&resume.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("state_crc32: ").map(str::to_owned))
        .ok_or("CLI printed no state checksum")?;
    let expected = format!("{:08x}", store::format::crc32(&straight.global));
    ensure(crc == expected, format!("CLI resumed state {crc} != {expected}"))?;
    Ok("library and CLI (exit 3, then 0) both match the straight 20-superstep run".into())
}
