//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.

use std::io::{Read, Write};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pulseox_core::bench::{average_measurement_error, run_session, supply_ripple};
use pulseox_core::codec::{decode, encode, BitStream, DecodeErrorKind, I2cMessage, Rw};
use pulseox_core::config::Settings;
use pulseox_core::estimator::{analyze_stream, process_stream, EstimatorConfig, Reading, ReadingFlags};
use pulseox_core::optics::{invert_calibration, theoretical_r, CalibrationCurve, ExtinctionTable};
use pulseox_core::synth::{synthesize, ArtifactSchedule, Lcg64, PhysioProfile};
use pulseox_core::wire::{
    self, monitor, serve_session, LineAssembler, MonitorEvent, Pacing, ServeOptions, TcpServer,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

const FS: f64 = 100.0;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn readings(profile: PhysioProfile, schedule: &ArtifactSchedule, cfg: &EstimatorConfig, dur: f64, seed: u64) -> Vec<Reading> {
    let s = synthesize(&profile, schedule, FS, dur, seed).map_err(|e| e.to_string()).unwrap();
    process_stream(&s, cfg).unwrap()
}

fn clean_session_accuracy() -> Outcome {
    let mut parts = Vec::new();
    for (label, profile) in [("A", PhysioProfile::new(97.0, 72.0)), ("H", PhysioProfile::new(98.0, 65.0))] {
        let s = Settings {
            profile,
            ..Settings::default()
        };
        let r = run_session(label, &s, 1, 20).map_err(|e| e.to_string())?;
        ensure(r.pairs.len() == 20, || format!("{label}: {} pairs", r.pairs.len()))?;
        ensure(r.mean_abs_rel_error <= 0.001, || {
            format!("{label}: mean abs error {:.4} % > 0.1 %", 100.0 * r.mean_abs_rel_error)
        })?;
        parts.push(format!("{label} {:.4} %", 100.0 * r.mean_abs_rel_error));
    }
    Ok(format!("mean abs relative error {} (bound 0.1 %)", parts.join(", ")))
}

fn trace_overlap() -> Outcome {
    let s = Settings::default();
    let r = run_session("A", &s, 1, 20).map_err(|e| e.to_string())?;
    ensure(r.trace.len() == 57, || format!("trace length {}", r.trace.len()))?;
    let diff = r.mean_abs_diff_pp();
    let within = r.fraction_within(1.0);
    ensure(diff <= 1.0, || format!("mean abs difference {diff:.3} pp > 1.0"))?;
    ensure(within >= 0.9, || format!("{:.1} % of seconds within 1 pp", 100.0 * within))?;
    Ok(format!(
        "60 s: mean abs diff {diff:.4} pp, {:.1} % of seconds within ±1 pp",
        100.0 * within
    ))
}

fn supply_robustness() -> Outcome {
    let cfg = EstimatorConfig::default();
    let p = PhysioProfile::default();
    let base = readings(p, &ArtifactSchedule::clean(), &cfg, 60.0, 7);
    let gained = readings(
        p,
        &ArtifactSchedule {
            supply_gain: supply_ripple(),
            ..ArtifactSchedule::default()
        },
        &cfg,
        60.0,
        7,
    );
    ensure(base.len() == gained.len(), || "reading counts differ".into())?;
    let mut worst: f64 = 0.0;
    for (a, b) in base.iter().zip(&gained) {
        ensure(a.valid && b.valid, || format!("invalid reading at t={}", a.t_s))?;
        worst = worst.max((a.spo2_percent - b.spo2_percent).abs());
    }
    ensure(worst <= 0.1, || format!("max per-reading difference {worst:.4} pp > 0.1"))?;
    Ok(format!(
        "±10 % gain at 0.1 Hz: max per-reading SpO₂ change {worst:.4} pp over {} readings (bound 0.1)",
        base.len()
    ))
}

fn ambient_light() -> Outcome {
    let p = PhysioProfile::default();
    let on = EstimatorConfig::default();
    let off = EstimatorConfig {
        ambient_subtraction: false,
        ..EstimatorConfig::default()
    };
    let lit = ArtifactSchedule {
        ambient_offset_counts: 0.2 * p.dc_level_counts,
        ..ArtifactSchedule::default()
    };
    let baseline = readings(p, &ArtifactSchedule::clean(), &on, 30.0, 3);
    let with_sub = readings(p, &lit, &on, 30.0, 3);
    let without = readings(p, &lit, &off, 30.0, 3);
    let dev = |rs: &[Reading]| -> Vec<f64> {
        rs.iter()
            .zip(&baseline)
            .map(|(r, b)| (r.spo2_percent - b.spo2_percent).abs())
            .collect()
    };
    let d_on = dev(&with_sub);
    let d_off = dev(&without);
    let max_on = d_on.iter().cloned().fold(0.0, f64::max);
    let mean_on = d_on.iter().sum::<f64>() / d_on.len() as f64;
    let mean_off = d_off.iter().sum::<f64>() / d_off.len() as f64;
    ensure(with_sub.iter().all(|r| r.valid), || "invalid reading with subtraction".into())?;
    ensure(max_on <= 1.0, || format!("subtraction on: max deviation {max_on:.3} pp > 1.0"))?;
    ensure(mean_off > mean_on, || {
        format!("subtraction off ({mean_off:.4} pp) not worse than on ({mean_on:.4} pp)")
    })?;
    Ok(format!(
        "20 % ambient: subtraction on max {max_on:.4} pp from baseline; off mean {mean_off:.3} pp > on mean {mean_on:.4} pp"
    ))
}

fn oracle_closure() -> Outcome {
    let table = ExtinctionTable::default();
    let cfg = EstimatorConfig::default();
    let mut worst_r: f64 = 0.0;
    for s in [0.80, 0.85, 0.90, 0.95, 1.00] {
        let stream = synthesize(
            &PhysioProfile::new(100.0 * s, 72.0),
            &ArtifactSchedule::clean(),
            FS,
            20.0,
            11,
        )
        .map_err(|e| e.to_string())?;
        let windows = analyze_stream(&stream, &cfg).map_err(|e| e.to_string())?;
        let rs: Vec<f64> = windows
            .iter()
            .map(|w| w.ratio.clone())
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let measured = rs.iter().sum::<f64>() / rs.len() as f64;
        let expected = theoretical_r(s, &table).map_err(|e| e.to_string())?;
        let rel = (measured / expected - 1.0).abs();
        ensure(rel <= 1e-3, || format!("S={s}: R {measured:.6} vs {expected:.6} ({rel:.2e})"))?;
        worst_r = worst_r.max(rel);
    }
    let curve = CalibrationCurve::default();
    let mut worst_pp: f64 = 0.0;
    for tenth in 700..=1000 {
        let pct = f64::from(tenth) / 10.0;
        let r = theoretical_r(pct / 100.0, &table).map_err(|e| e.to_string())?;
        let back = invert_calibration(&curve, r);
        worst_pp = worst_pp.max((back.percent - pct).abs());
    }
    ensure(worst_pp <= 1.0, || format!("calibration round trip off by {worst_pp:.3} pp"))?;
    Ok(format!(
        "stream-mean R within {worst_r:.2e} relative of theory (bound 1e-3); calibration round trip max {worst_pp:.4} pp over 70–100 % (bound 1.0)"
    ))
}

fn heart_rate() -> Outcome {
    let cfg = EstimatorConfig::default();
    let mut worst: f64 = 0.0;
    for hr in [50.0, 72.0, 120.0, 150.0] {
        let rs = readings(PhysioProfile::new(97.0, hr), &ArtifactSchedule::clean(), &cfg, 20.0, 5);
        for r in &rs {
            let est = r.hr_bpm.ok_or_else(|| format!("HR {hr}: absent at t={}", r.t_s))?;
            ensure((est - hr).abs() <= 2.0, || format!("HR {hr}: estimated {est:.2} at t={}", r.t_s))?;
            worst = worst.max((est - hr).abs());
        }
    }
    Ok(format!("HR 50/72/120/150 bpm: max error {worst:.3} bpm over every reading (bound 2)"))
}

const MALFORMED: &[(&str, DecodeErrorKind, usize)] = &[
    ("", DecodeErrorKind::MissingStart, 0),
    ("P", DecodeErrorKind::MissingStart, 0),
    ("A", DecodeErrorKind::MissingStart, 0),
    ("1010111 0 A P", DecodeErrorKind::MissingStart, 0),
    ("S", DecodeErrorKind::MissingStop, 1),
    ("S 1010111", DecodeErrorKind::MissingStop, 8),
    ("S 1010111 0", DecodeErrorKind::MissingStop, 9),
    ("S 1010111 0 A", DecodeErrorKind::MissingStop, 10),
    ("S 1010111 0 A 0000", DecodeErrorKind::MissingStop, 14),
    ("S 1010111 0 A 00000000 A", DecodeErrorKind::MissingStop, 19),
    ("S P", DecodeErrorKind::MissingAddress, 1),
    ("S 1010 P", DecodeErrorKind::IncompleteFrame, 5),
    ("S 1010111 P", DecodeErrorKind::IncompleteFrame, 8),
    ("S 1010111 A P", DecodeErrorKind::IncompleteFrame, 8),
    ("S S 1010111 0 A P", DecodeErrorKind::IncompleteFrame, 1),
    ("S 1010111 0 A 0000 P", DecodeErrorKind::IncompleteFrame, 14),
    ("S 1010111 0 A 0000000 A P", DecodeErrorKind::IncompleteFrame, 17),
    ("S 1010111 0 A 00000001 A 1111 P", DecodeErrorKind::IncompleteFrame, 23),
    ("S 1010111 0 1 P", DecodeErrorKind::MissingAck, 9),
    ("S 1010111 0 0 A P", DecodeErrorKind::MissingAck, 9),
    ("S 1010111 0 A 00000000 1 P", DecodeErrorKind::MissingAck, 18),
    ("S 1010111 0 A 00000000 S P", DecodeErrorKind::MissingAck, 18),
    ("S 1010111 0 A 00000000 P", DecodeErrorKind::MissingAck, 18),
    ("S 1010111 0 A P P", DecodeErrorKind::TrailingSymbols, 11),
    ("S 1010111 0 A P 1", DecodeErrorKind::TrailingSymbols, 11),
    ("S 1010111 0 A P S 1010111 0 A P", DecodeErrorKind::TrailingSymbols, 11),
    ("S 1010111 0 N 00000000 A P", DecodeErrorKind::DataAfterNack, 10),
    ("S 1010111 1 N 11111111 N P", DecodeErrorKind::DataAfterNack, 10),
];

fn codec() -> Outcome {
    let mut rng = Lcg64::new(2024);
    let n = 10_000;
    for i in 0..n {
        let address = (rng.next_u64() % 128) as u8;
        let rw = if rng.next_u64().is_multiple_of(2) { Rw::Write } else { Rw::Read };
        let addr_ack = !rng.next_u64().is_multiple_of(8);
        let len = if addr_ack { (rng.next_u64() % 17) as usize } else { 0 };
        let payload: Vec<u8> = (0..len).map(|_| rng.next_u64() as u8).collect();
        let mut acks = vec![addr_ack];
        acks.extend((0..len).map(|_| !rng.next_u64().is_multiple_of(4)));
        let msg = I2cMessage {
            address,
            rw,
            payload,
            acks,
        };
        let bits = encode(&msg).map_err(|e| format!("message {i}: {e}"))?;
        let back = decode(&bits.0).map_err(|e| format!("message {i}: {e}"))?;
        ensure(back == msg, || format!("message {i} did not round-trip"))?;
        let text: BitStream = bits.to_string().parse().map_err(|e| format!("{e}"))?;
        ensure(text == bits, || format!("message {i} text form did not round-trip"))?;
    }
    for (text, kind, offset) in MALFORMED {
        let bits: BitStream = text.parse().map_err(|e| format!("{e}"))?;
        match decode(&bits.0) {
            Ok(_) => return Err(format!("`{text}` decoded without error")),
            Err(e) => ensure(e.kind == *kind && e.offset == *offset, || {
                format!("`{text}`: got {:?}@{}, expected {kind:?}@{offset}", e.kind, e.offset)
            })?,
        }
    }
    Ok(format!(
        "{n} random messages round-trip; {} malformed fixtures report exact kind and offset",
        MALFORMED.len()
    ))
}

fn sample_readings(n: usize) -> Vec<Reading> {
    (0..n)
        .map(|i| Reading {
            t_s: 4.0 + i as f64,
            spo2_percent: 95.0 + (i % 37) as f64 * 0.13,
            hr_bpm: if i % 9 == 4 { None } else { Some(60.0 + (i % 23) as f64 * 1.7) },
            perfusion_index: 0.02,
            valid: i % 9 != 4,
            flags: if i % 9 == 4 { ReadingFlags::LOW_PERFUSION } else { ReadingFlags::empty() },
        })
        .collect()
}

fn wire_link() -> Outcome {
    // Loopback over TCP, as fast as the 115200 baud link allows.
    let sent = sample_readings(100);
    let opts = ServeOptions {
        baud: 115200,
        pacing: Pacing::AsFastAsPossible,
    };
    let server = TcpServer::bind("127.0.0.1:0", sent.clone(), opts).map_err(|e| e.to_string())?;
    let addr = server.local_addr().map_err(|e| e.to_string())?.to_string();
    let handle = server.spawn(Some(1));
    let conn = wire::connect(&addr).map_err(|e| e.to_string())?;
    let report = monitor(conn, std::io::sink(), 115200, |_, _| {}).map_err(|e| e.to_string())?;
    handle.join().map_err(|_| "server panicked".to_string())?;
    ensure(report.readings.len() == sent.len(), || {
        format!("received {} of {}", report.readings.len(), sent.len())
    })?;
    for (got, want) in report.readings.iter().zip(&sent) {
        ensure(got.reading.to_line() == wire::format_line(want), || {
            format!("line mismatch at t={}", want.t_s)
        })?;
    }

    // Throughput ceiling at 9600 baud, measured at the receiver.
    let slow = ServeOptions {
        baud: 9600,
        pacing: Pacing::AsFastAsPossible,
    };
    let server = TcpServer::bind("127.0.0.1:0", sample_readings(100), slow).map_err(|e| e.to_string())?;
    let addr = server.local_addr().map_err(|e| e.to_string())?.to_string();
    let handle = server.spawn(Some(1));
    let mut conn = wire::connect(&addr).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut bytes = Vec::new();
    conn.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let stats = handle.join().map_err(|_| "server panicked".to_string())?;
    let served = stats
        .into_iter()
        .next()
        .ok_or("no session")?
        .map_err(|e| e.to_string())?;
    let rate = bytes.len() as f64 / elapsed;
    let ceiling = 9600.0 / 10.0;
    ensure(rate <= ceiling * 1.02, || format!("{rate:.1} B/s exceeds {ceiling} B/s + 2 %"))?;
    let server_rate = served.bytes as f64 / served.elapsed.as_secs_f64();
    ensure(server_rate <= ceiling * 1.02, || format!("server side {server_rate:.1} B/s"))?;

    // Resynchronization after injected garbage.
    let mut wire_bytes = Vec::new();
    serve_session(&sent[..10], &mut wire_bytes, &opts).map_err(|e| e.to_string())?;
    let mut corrupted = b"\x00\xff\xfegarbage".to_vec();
    corrupted.extend_from_slice(&wire_bytes[..40]);
    corrupted.extend_from_slice(b"#!$%");
    corrupted.extend_from_slice(&wire_bytes[40..]);
    let mut asm = LineAssembler::new();
    let mut events = asm.push(&corrupted);
    events.extend(asm.finish());
    let recovered = events.iter().filter(|e| matches!(e, MonitorEvent::Reading(_))).count();
    let warnings = events.iter().filter(|e| matches!(e, MonitorEvent::Warning { .. })).count();
    ensure(recovered >= 9 && warnings >= 1, || {
        format!("resync recovered {recovered} readings, {warnings} warnings")
    })?;

    // Real-time pacing: 5 readings at 1 Hz to two concurrent monitors.
    let paced = ServeOptions {
        baud: 115200,
        pacing: Pacing::one_hz(),
    };
    let server = TcpServer::bind("127.0.0.1:0", sample_readings(5), paced).map_err(|e| e.to_string())?;
    let addr = server.local_addr().map_err(|e| e.to_string())?.to_string();
    let handle = server.spawn(Some(2));
    let clients: Vec<_> = (0..2)
        .map(|_| {
            let addr = addr.clone();
            std::thread::spawn(move || -> Result<(usize, Duration), String> {
                let start = Instant::now();
                let conn = wire::connect(&addr).map_err(|e| e.to_string())?;
                let rep = monitor(conn, std::io::sink(), 115200, |_, _| {}).map_err(|e| e.to_string())?;
                Ok((rep.readings.len(), start.elapsed()))
            })
        })
        .collect();
    let mut durations = Vec::new();
    for c in clients {
        let (n, d) = c.join().map_err(|_| "client panicked".to_string())??;
        ensure(n == 5, || format!("paced client got {n} readings"))?;
        ensure((d.as_secs_f64() - 5.0).abs() <= 1.0, || format!("paced session took {d:?}"))?;
        durations.push(d.as_secs_f64());
    }
    handle.join().map_err(|_| "server panicked".to_string())?;

    Ok(format!(
        "100/100 readings over TCP; 9600 baud: {rate:.1} B/s (ceiling {:.1}); resync {recovered}/10 with {warnings} warnings; paced sessions {:.2} s and {:.2} s",
        ceiling * 1.02,
        durations[0],
        durations[1]
    ))
}

fn measurement_error_formula() -> Outcome {
    let same = average_measurement_error(&[(97.0, 97.0), (98.0, 98.0), (65.0, 65.0)]).map_err(|e| e.to_string())?;
    ensure(same == (0.0, 0.0), || format!("equal pairs gave {same:?}"))?;
    let sym = average_measurement_error(&[(100.0, 99.0), (100.0, 101.0)]).map_err(|e| e.to_string())?;
    ensure(sym == (0.0, 0.01), || format!("symmetric pairs gave {sym:?}"))?;
    let pairs: Vec<(f64, f64)> = (0..20)
        .map(|i| {
            let t = 90.0 + f64::from(i) * 0.5;
            (t, t * (1.0 - 0.0007))
        })
        .collect();
    let (signed, absolute) = average_measurement_error(&pairs).map_err(|e| e.to_string())?;
    ensure((absolute - 0.0007).abs() <= 1e-12 && (signed - 0.0007).abs() <= 1e-12, || {
        format!("constant bias gave ({signed}, {absolute})")
    })?;
    Ok(format!(
        "(0, 0); (0, 0.01); 20 pairs at 0.07 % bias → {:.6} % (float rounding ≤ 1e-12)",
        100.0 * absolute
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 clean-session accuracy", clean_session_accuracy, Duration::from_secs(5)),
        ("2 trace overlap", trace_overlap, Duration::from_secs(5)),
        ("3 supply robustness", supply_robustness, Duration::from_secs(5)),
        ("4 ambient light", ambient_light, Duration::from_secs(5)),
        ("5 oracle closure", oracle_closure, Duration::from_secs(2)),
        ("6 heart rate", heart_rate, Duration::from_secs(5)),
        ("7 codec", codec, Duration::from_secs(5)),
        ("8 wire link", wire_link, Duration::from_secs(10)),
        ("9 measurement error", measurement_error_formula, Duration::from_secs(1)),
    ];
    let mut out = std::io::stdout().lock();
    let mut failures = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        let line = match &result {
            Ok(detail) => format!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failures += 1;
                format!("FAIL criterion {name}: {why} [{elapsed:.2?}]")
            }
        };
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "acceptance: {}/9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
