use std::io::Read;
use std::time::{Duration, Instant};

use pulseox_core::estimator::{Reading, ReadingFlags};
use pulseox_core::wire::{self, monitor, Pacing, ServeOptions, TcpServer, WireError};

fn readings(n: usize) -> Vec<Reading> {
    (0..n)
        .map(|i| Reading {
            t_s: 4.0 + i as f64,
            spo2_percent: 97.0,
            hr_bpm: Some(72.0),
            perfusion_index: 0.02,
            valid: true,
            flags: ReadingFlags::empty(),
        })
        .collect()
}

#[test]
fn dropped_client_does_not_disturb_other_sessions() {
    let opts = ServeOptions {
        baud: 57600,
        pacing: Pacing::AsFastAsPossible,
    };
    let server = TcpServer::bind("127.0.0.1:0", readings(200), opts).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let handle = server.spawn(Some(2));

    let mut quitter = wire::connect(&addr).unwrap();
    let mut first = [0u8; 16];
    quitter.read_exact(&mut first).unwrap();
    drop(quitter);

    let conn = wire::connect(&addr).unwrap();
    let report = monitor(conn, std::io::sink(), 57600, |_, _| {}).unwrap();
    assert_eq!(report.readings.len(), 200);
    assert!(report.warnings.is_empty());

    let results = handle.join().unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[0].is_err());
    assert_eq!(results[1].as_ref().unwrap().lines, 200);
}

#[test]
fn bind_conflict_is_a_startup_error() {
    let first = TcpServer::bind("127.0.0.1:0", Vec::new(), ServeOptions::default()).unwrap();
    let addr = first.local_addr().unwrap().to_string();
    let second = TcpServer::bind(addr.as_str(), Vec::new(), ServeOptions::default());
    assert!(matches!(second, Err(WireError::Bind { .. })));
}

#[test]
fn paced_interval_is_respected() {
    let opts = ServeOptions {
        baud: 115200,
        pacing: Pacing::RealTime {
            interval: Duration::from_millis(200),
        },
    };
    let start = Instant::now();
    let mut out = Vec::new();
    let stats = wire::serve_session(&readings(5), &mut out, &opts).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!((elapsed - 1.0).abs() < 0.2, "{elapsed}");
    assert_eq!(stats.lines, 5);
}
