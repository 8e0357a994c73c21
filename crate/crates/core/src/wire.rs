//! Line-oriented reading protocol over an emulated serial link.
//!
//! Each reading is one CRLF-terminated line `t_s,spo2,hr` with one decimal
//! place, `--` standing in for an absent heart rate. A session opens with a
//! `#baud=<n>` banner so a monitor configured for another rate can refuse
//! the link. Output is throttled to `baud / 10` bytes per second (8N1).

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::estimator::Reading;

pub const SUPPORTED_BAUDS: [u32; 5] = [9600, 19200, 38400, 57600, 115200];
pub const DEFAULT_BAUD: u32 = 115200;
pub const NEWLINE: &str = "\r\n";
const MAX_LINE_BYTES: usize = 256;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unsupported baud rate {0}; expected one of 9600, 19200, 38400, 57600, 115200")]
    UnsupportedBaud(u32),
    #[error("link speed mismatch: monitor at {expected} baud, server at {found}")]
    BaudMismatch { expected: u32, found: u32 },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn check_baud(baud: u32) -> Result<u32, WireError> {
    if SUPPORTED_BAUDS.contains(&baud) {
        Ok(baud)
    } else {
        Err(WireError::UnsupportedBaud(baud))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// One line per `interval`, each sent after waiting a full interval.
    RealTime { interval: Duration },
    AsFastAsPossible,
}

impl Pacing {
    pub fn one_hz() -> Self {
        Pacing::RealTime {
            interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    pub baud: u32,
    pub pacing: Pacing,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            baud: DEFAULT_BAUD,
            pacing: Pacing::one_hz(),
        }
    }
}

/// A reading as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireReading {
    pub t_s: f64,
    pub spo2_percent: f64,
    pub hr_bpm: Option<f64>,
}

impl From<&Reading> for WireReading {
    fn from(r: &Reading) -> Self {
        Self {
            t_s: r.t_s,
            spo2_percent: r.spo2_percent,
            hr_bpm: r.hr_bpm,
        }
    }
}

impl WireReading {
    pub fn to_line(&self) -> String {
        let hr = match self.hr_bpm {
            Some(h) => format!("{h:.1}"),
            None => "--".to_string(),
        };
        format!("{:.1},{:.1},{hr}{NEWLINE}", self.t_s, self.spo2_percent)
    }
}

pub fn format_line(r: &Reading) -> String {
    WireReading::from(r).to_line()
}

fn parse_decimal(field: &str) -> Option<f64> {
    let (int, frac) = field.split_once('.').unwrap_or((field, ""));
    let digits_ok = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || !digits_ok(int) || !digits_ok(frac) {
        return None;
    }
    field.parse().ok()
}

/// Parses a line body (terminator already stripped).
pub fn parse_line(line: &str) -> Option<WireReading> {
    let mut fields = line.split(',');
    let (t, spo2, hr) = (fields.next()?, fields.next()?, fields.next()?);
    if fields.next().is_some() {
        return None;
    }
    let hr_bpm = if hr == "--" {
        None
    } else {
        Some(parse_decimal(hr)?)
    };
    Some(WireReading {
        t_s: parse_decimal(t)?,
        spo2_percent: parse_decimal(spo2)?,
        hr_bpm,
    })
}

/// Writer that never exceeds `bytes_per_s` measured from its creation.
#[derive(Debug)]
pub struct ThrottledWriter<W> {
    inner: W,
    bytes_per_s: f64,
    start: Instant,
    sent: u64,
}

impl<W: Write> ThrottledWriter<W> {
    pub fn new(inner: W, baud: u32) -> Self {
        Self {
            inner,
            bytes_per_s: f64::from(baud) / 10.0,
            start: Instant::now(),
            sent: 0,
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.sent
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for ThrottledWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        // Chunks of about 20 ms keep the byte flow smooth.
        let chunk = ((self.bytes_per_s / 50.0) as usize).clamp(1, buf.len());
        let due = Duration::from_secs_f64((self.sent + chunk as u64) as f64 / self.bytes_per_s);
        if let Some(wait) = due.checked_sub(self.start.elapsed()) {
            thread::sleep(wait);
        }
        let n = self.inner.write(&buf[..chunk])?;
        self.sent += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionStats {
    pub lines: usize,
    pub bytes: u64,
    pub elapsed: Duration,
}

/// Writes the banner and every reading to `out` under the link's pacing
/// and throttle. Stops with an error if the peer goes away.
pub fn serve_session<W: Write>(
    readings: &[Reading],
    out: W,
    opts: &ServeOptions,
) -> Result<SessionStats, WireError> {
    check_baud(opts.baud)?;
    let start = Instant::now();
    let mut w = ThrottledWriter::new(out, opts.baud);
    w.write_all(format!("#baud={}{NEWLINE}", opts.baud).as_bytes())?;
    w.flush()?;
    for (k, r) in readings.iter().enumerate() {
        if let Pacing::RealTime { interval } = opts.pacing {
            let due = interval * (k as u32 + 1);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        w.write_all(format_line(r).as_bytes())?;
        w.flush()?;
    }
    Ok(SessionStats {
        lines: readings.len(),
        bytes: w.bytes_sent(),
        elapsed: start.elapsed(),
    })
}

/// TCP endpoint replaying the same readings to every connecting monitor.
pub struct TcpServer {
    listener: TcpListener,
    readings: Arc<Vec<Reading>>,
    opts: ServeOptions,
}

impl TcpServer {
    pub fn bind<A: ToSocketAddrs + std::fmt::Display>(
        addr: A,
        readings: Vec<Reading>,
        opts: ServeOptions,
    ) -> Result<Self, WireError> {
        check_baud(opts.baud)?;
        let listener = TcpListener::bind(&addr).map_err(|source| WireError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        Ok(Self {
            listener,
            readings: Arc::new(readings),
            opts,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections, one thread per session, until `max_sessions`
    /// have been accepted (forever when `None`), then waits for the open
    /// sessions. Returns the result of each session in accept order.
    pub fn run(self, max_sessions: Option<usize>) -> Vec<Result<SessionStats, WireError>> {
        let mut handles = Vec::new();
        for conn in self.listener.incoming() {
            let stream = match conn {
                Ok(s) => s,
                Err(_) => continue,
            };
            let readings = Arc::clone(&self.readings);
            let opts = self.opts;
            handles.push(thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                serve_session(&readings, stream, &opts)
            }));
            if max_sessions.is_some_and(|m| handles.len() >= m) {
                break;
            }
        }
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(io::Error::other("session thread panicked").into()))
            })
            .collect()
    }

    pub fn spawn(
        self,
        max_sessions: Option<usize>,
    ) -> thread::JoinHandle<Vec<Result<SessionStats, WireError>>> {
        thread::spawn(move || self.run(max_sessions))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorEvent {
    Banner { baud: u32 },
    Reading(WireReading),
    /// Bytes that could not be parsed, without the line terminator.
    Warning { raw: Vec<u8>, reason: &'static str },
}

/// Splits an arbitrary byte sequence into protocol lines, buffering partial
/// input and resynchronizing after corrupt bytes.
#[derive(Debug, Default, Clone)]
pub struct LineAssembler {
    buf: Vec<u8>,
}

impl LineAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<MonitorEvent> {
        let mut events = Vec::new();
        for &b in bytes {
            if b == b'\n' {
                let line = std::mem::take(&mut self.buf);
                self.finish_line(line, &mut events);
            } else {
                self.buf.push(b);
                if self.buf.len() > MAX_LINE_BYTES {
                    events.push(MonitorEvent::Warning {
                        raw: std::mem::take(&mut self.buf),
                        reason: "line too long",
                    });
                }
            }
        }
        events
    }

    /// Reports whatever is still buffered at end of input.
    pub fn finish(&mut self) -> Vec<MonitorEvent> {
        let rest = std::mem::take(&mut self.buf);
        if rest.is_empty() {
            Vec::new()
        } else {
            vec![MonitorEvent::Warning {
                raw: rest,
                reason: "unterminated line at end of input",
            }]
        }
    }

    fn finish_line(&mut self, mut line: Vec<u8>, events: &mut Vec<MonitorEvent>) {
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        if line.is_empty() {
            return;
        }
        if let Ok(text) = std::str::from_utf8(&line) {
            if let Some(rest) = text.strip_prefix('#') {
                if let Some(baud) = rest.strip_prefix("baud=").and_then(|b| b.parse().ok()) {
                    events.push(MonitorEvent::Banner { baud });
                }
                return;
            }
        }
        // The leftmost suffix that parses is the reading; anything before
        // it is noise.
        for start in 0..line.len() {
            let Ok(text) = std::str::from_utf8(&line[start..]) else {
                continue;
            };
            if let Some(r) = parse_line(text) {
                if start > 0 {
                    events.push(MonitorEvent::Warning {
                        raw: line[..start].to_vec(),
                        reason: "garbage before reading",
                    });
                }
                events.push(MonitorEvent::Reading(r));
                return;
            }
        }
        events.push(MonitorEvent::Warning {
            raw: line,
            reason: "malformed line",
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedReading {
    pub reading: WireReading,
    pub rx_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorReport {
    pub readings: Vec<ReceivedReading>,
    pub warnings: Vec<(Vec<u8>, &'static str)>,
    pub banner_baud: Option<u32>,
}

pub const MONITOR_CSV_HEADER: &str = "t_s,spo2,hr,rx_s";

/// Reads the link until EOF, writing each reading to `sink` as CSV and
/// calling `on_warning` for every malformed fragment. A banner announcing a
/// different baud rate aborts with [`WireError::BaudMismatch`].
pub fn monitor<R: Read, W: Write>(
    source: R,
    mut sink: W,
    expected_baud: u32,
    mut on_warning: impl FnMut(&[u8], &str),
) -> Result<MonitorReport, WireError> {
    check_baud(expected_baud)?;
    let start = Instant::now();
    let mut reader = BufReader::new(source);
    let mut asm = LineAssembler::new();
    let mut report = MonitorReport::default();
    writeln!(sink, "{MONITOR_CSV_HEADER}")?;
    loop {
        let chunk = reader.fill_buf()?;
        let done = chunk.is_empty();
        let events = if done {
            asm.finish()
        } else {
            let ev = asm.push(chunk);
            let n = chunk.len();
            reader.consume(n);
            ev
        };
        for ev in events {
            match ev {
                MonitorEvent::Banner { baud } => {
                    if baud != expected_baud {
                        return Err(WireError::BaudMismatch {
                            expected: expected_baud,
                            found: baud,
                        });
                    }
                    report.banner_baud = Some(baud);
                }
                MonitorEvent::Reading(reading) => {
                    let rx_s = start.elapsed().as_secs_f64();
                    let hr = reading.hr_bpm.map(|h| format!("{h:.1}")).unwrap_or_default();
                    writeln!(
                        sink,
                        "{:.1},{:.1},{hr},{rx_s:.3}",
                        reading.t_s, reading.spo2_percent
                    )?;
                    report.readings.push(ReceivedReading { reading, rx_s });
                }
                MonitorEvent::Warning { raw, reason } => {
                    on_warning(&raw, reason);
                    report.warnings.push((raw, reason));
                }
            }
        }
        if done {
            break;
        }
    }
    sink.flush()?;
    Ok(report)
}

pub fn connect(addr: &str) -> Result<TcpStream, WireError> {
    TcpStream::connect(addr).map_err(|source| WireError::Connect {
        addr: addr.to_string(),
        source,
    })
}
