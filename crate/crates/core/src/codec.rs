//! Symbol-level I2C framing and a register-mapped sensor emulator.
//!
//! A message is `START`, an address frame (7 address bits MSB-first plus the
//! R/W bit), one acknowledgment slot, then one 8-bit frame plus
//! acknowledgment per payload byte, and finally `STOP`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const DEFAULT_SENSOR_ADDRESS: u8 = 0x57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Start,
    Zero,
    One,
    Ack,
    Nack,
    Stop,
}

impl Symbol {
    fn bit(self) -> Option<bool> {
        match self {
            Symbol::Zero => Some(false),
            Symbol::One => Some(true),
            _ => None,
        }
    }

    fn from_bit(b: bool) -> Self {
        if b {
            Symbol::One
        } else {
            Symbol::Zero
        }
    }

    fn ack(acked: bool) -> Self {
        if acked {
            Symbol::Ack
        } else {
            Symbol::Nack
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::Start => 'S',
            Symbol::Zero => '0',
            Symbol::One => '1',
            Symbol::Ack => 'A',
            Symbol::Nack => 'N',
            Symbol::Stop => 'P',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        Some(match c {
            'S' => Symbol::Start,
            '0' => Symbol::Zero,
            '1' => Symbol::One,
            'A' => Symbol::Ack,
            'N' => Symbol::Nack,
            'P' => Symbol::Stop,
            _ => return None,
        })
    }
}

/// Ordered symbols on the bus. Not necessarily well formed; see [`decode`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream(pub Vec<Symbol>);

impl BitStream {
    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }
}

/// Renders frames as bit groups, splitting the address from the R/W bit:
/// `S 1010111 0 A 00000101 A P`. Streams that do not follow the frame
/// layout fall back to one token per symbol.
impl fmt::Display for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if decode(&self.0).is_err() {
            let tokens: Vec<String> = self.0.iter().map(|s| s.as_char().to_string()).collect();
            return f.write_str(&tokens.join(" "));
        }
        let mut tokens: Vec<String> = vec!["S".into()];
        let mut i = 1;
        let mut first = true;
        while self.0[i] != Symbol::Stop {
            let bits: String = self.0[i..i + 8].iter().map(|s| s.as_char()).collect();
            if first {
                tokens.push(bits[..7].to_string());
                tokens.push(bits[7..].to_string());
                first = false;
            } else {
                tokens.push(bits);
            }
            tokens.push(self.0[i + 8].as_char().to_string());
            i += 9;
        }
        tokens.push("P".into());
        f.write_str(&tokens.join(" "))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown symbol `{found}` at character {position}")]
pub struct BitStreamParseError {
    pub position: usize,
    pub found: char,
}

/// Whitespace-separated tokens; a run of digits is one symbol per digit.
impl FromStr for BitStream {
    type Err = BitStreamParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(position, c)| {
                Symbol::from_char(c).ok_or(BitStreamParseError { position, found: c })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BitStream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rw {
    Write,
    Read,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct I2cMessage {
    pub address: u8,
    pub rw: Rw,
    pub payload: Vec<u8>,
    /// `true` for ACK; index 0 is the address frame.
    pub acks: Vec<bool>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("address {0:#04x} does not fit in 7 bits")]
    AddressOutOfRange(u8),
    #[error("expected {expected} ack flags, got {got}")]
    AckCount { expected: usize, got: usize },
    #[error("payload after a NACKed address frame")]
    PayloadAfterNack,
}

impl I2cMessage {
    /// Message with every frame acknowledged.
    pub fn new(address: u8, rw: Rw, payload: Vec<u8>) -> Self {
        let acks = vec![true; payload.len() + 1];
        Self {
            address,
            rw,
            payload,
            acks,
        }
    }

    /// Read request of `len` bytes, acknowledged by the master except the last.
    pub fn read_request(address: u8, len: usize) -> Self {
        let mut acks = vec![true; len + 1];
        if len > 0 {
            acks[len] = false;
        }
        Self {
            address,
            rw: Rw::Read,
            payload: vec![0; len],
            acks,
        }
    }

    fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn address_nacked(&self) -> bool {
        self.acks.first() == Some(&false)
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.address >= 0x80 {
            return Err(EncodeError::AddressOutOfRange(self.address));
        }
        if self.acks.len() != self.payload.len() + 1 {
            return Err(EncodeError::AckCount {
                expected: self.payload.len() + 1,
                got: self.acks.len(),
            });
        }
        if self.address_nacked() && !self.payload.is_empty() {
            return Err(EncodeError::PayloadAfterNack);
        }
        Ok(())
    }
}

fn push_byte(out: &mut Vec<Symbol>, byte: u8) {
    out.extend((0..8).rev().map(|i| Symbol::from_bit(byte >> i & 1 == 1)));
}

pub fn encode(msg: &I2cMessage) -> Result<BitStream, EncodeError> {
    msg.validate()?;
    let mut out = Vec::with_capacity(2 + 9 * (msg.payload.len() + 1));
    out.push(Symbol::Start);
    push_byte(&mut out, msg.address << 1 | u8::from(msg.rw == Rw::Read));
    out.push(Symbol::ack(msg.acks[0]));
    for (byte, ack) in msg.payload.iter().zip(&msg.acks[1..]) {
        push_byte(&mut out, *byte);
        out.push(Symbol::ack(*ack));
    }
    out.push(Symbol::Stop);
    Ok(BitStream(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeErrorKind {
    /// First symbol is not START.
    MissingStart,
    /// Input ended before STOP.
    MissingStop,
    /// START followed directly by STOP.
    MissingAddress,
    /// A non-bit symbol inside an 8-bit frame.
    IncompleteFrame,
    /// The slot after a frame holds something other than ACK/NACK.
    MissingAck,
    /// A data frame follows a NACKed address frame.
    DataAfterNack,
    /// Symbols after STOP.
    TrailingSymbols,
}

/// `offset` is the index of the offending symbol, or the stream length when
/// the input ended early.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("{kind:?} at symbol {offset}")]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub offset: usize,
}

pub fn decode(bits: &[Symbol]) -> Result<I2cMessage, DecodeError> {
    let err = |kind, offset| Err(DecodeError { kind, offset });
    match bits.first() {
        Some(Symbol::Start) => {}
        _ => return err(DecodeErrorKind::MissingStart, 0),
    }
    let mut frames: Vec<(u8, bool)> = Vec::new();
    let mut i = 1;
    loop {
        match bits.get(i) {
            None => return err(DecodeErrorKind::MissingStop, bits.len()),
            Some(Symbol::Stop) => break,
            Some(_) => {}
        }
        if frames.first().is_some_and(|(_, ack)| !ack) {
            return err(DecodeErrorKind::DataAfterNack, i);
        }
        let mut byte = 0u8;
        for k in 0..8 {
            match bits.get(i + k) {
                None => return err(DecodeErrorKind::MissingStop, bits.len()),
                Some(s) => match s.bit() {
                    Some(b) => byte = byte << 1 | u8::from(b),
                    None => return err(DecodeErrorKind::IncompleteFrame, i + k),
                },
            }
        }
        let ack = match bits.get(i + 8) {
            None => return err(DecodeErrorKind::MissingStop, bits.len()),
            Some(Symbol::Ack) => true,
            Some(Symbol::Nack) => false,
            Some(_) => return err(DecodeErrorKind::MissingAck, i + 8),
        };
        frames.push((byte, ack));
        i += 9;
    }
    if i + 1 < bits.len() {
        return err(DecodeErrorKind::TrailingSymbols, i + 1);
    }
    let Some(&(head, _)) = frames.first() else {
        return err(DecodeErrorKind::MissingAddress, i);
    };
    Ok(I2cMessage {
        address: head >> 1,
        rw: if head & 1 == 1 { Rw::Read } else { Rw::Write },
        payload: frames[1..].iter().map(|f| f.0).collect(),
        acks: frames.iter().map(|f| f.1).collect(),
    })
}

/// Register ids of the emulated sensor.
pub mod reg {
    pub const INT_STATUS: u8 = 0x00;
    pub const INT_ENABLE: u8 = 0x01;
    pub const FIFO_WR_PTR: u8 = 0x02;
    pub const OVF_COUNTER: u8 = 0x03;
    pub const FIFO_RD_PTR: u8 = 0x04;
    pub const FIFO_DATA: u8 = 0x05;
    pub const MODE_CONFIG: u8 = 0x06;
    pub const SPO2_CONFIG: u8 = 0x07;
    pub const LED_CONFIG: u8 = 0x09;
    pub const TEMP_INT: u8 = 0x16;
    pub const TEMP_FRAC: u8 = 0x17;
    pub const REV_ID: u8 = 0xFE;
    pub const PART_ID: u8 = 0xFF;
}

const READ_ONLY: [u8; 4] = [reg::TEMP_INT, reg::TEMP_FRAC, reg::REV_ID, reg::PART_ID];
pub const FIFO_DEPTH: usize = 16;
pub const SAMPLE_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FifoSample {
    pub ir: u16,
    pub red: u16,
}

impl FifoSample {
    /// IR then red, big-endian.
    pub fn to_bytes(self) -> [u8; SAMPLE_BYTES] {
        let [ih, il] = self.ir.to_be_bytes();
        let [rh, rl] = self.red.to_be_bytes();
        [ih, il, rh, rl]
    }

    pub fn from_bytes(b: [u8; SAMPLE_BYTES]) -> Self {
        Self {
            ir: u16::from_be_bytes([b[0], b[1]]),
            red: u16::from_be_bytes([b[2], b[3]]),
        }
    }
}

/// Bus reply to one message plus side-channel status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorResponse {
    pub message: I2cMessage,
    /// A FIFO read found no complete sample and returned zeros.
    pub underrun: bool,
}

/// MAX30100-style register file with a 16-deep sample FIFO. Samples leave
/// the FIFO whole into a staging buffer, so a read that stops mid-sample
/// resumes with the rest of that same sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorRegisterMap {
    pub address: u8,
    registers: BTreeMap<u8, u8>,
    fifo: VecDeque<FifoSample>,
    staging: VecDeque<u8>,
    pointer: u8,
}

impl Default for SensorRegisterMap {
    fn default() -> Self {
        Self::new(DEFAULT_SENSOR_ADDRESS)
    }
}

impl SensorRegisterMap {
    pub fn new(address: u8) -> Self {
        let registers = [
            (reg::INT_STATUS, 0),
            (reg::INT_ENABLE, 0),
            (reg::FIFO_WR_PTR, 0),
            (reg::OVF_COUNTER, 0),
            (reg::FIFO_RD_PTR, 0),
            (reg::MODE_CONFIG, 0),
            (reg::SPO2_CONFIG, 0),
            (reg::LED_CONFIG, 0),
            (reg::TEMP_INT, 0),
            (reg::TEMP_FRAC, 0),
            (reg::REV_ID, 0x01),
            (reg::PART_ID, 0x11),
        ]
        .into_iter()
        .collect();
        Self {
            address,
            registers,
            fifo: VecDeque::new(),
            staging: VecDeque::new(),
            pointer: 0,
        }
    }

    pub fn register(&self, id: u8) -> Option<u8> {
        self.registers.get(&id).copied()
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    /// Queues a conversion; a full FIFO drops its oldest sample and bumps
    /// the overflow counter.
    pub fn push_sample(&mut self, sample: FifoSample) {
        if self.fifo.len() == FIFO_DEPTH {
            self.fifo.pop_front();
            let ovf = self.registers.entry(reg::OVF_COUNTER).or_default();
            *ovf = ovf.saturating_add(1);
        }
        self.fifo.push_back(sample);
    }

    fn is_known(&self, id: u8) -> bool {
        id == reg::FIFO_DATA || self.registers.contains_key(&id)
    }

    fn advance(&mut self) {
        if self.pointer != reg::FIFO_DATA {
            self.pointer = self.pointer.wrapping_add(1);
        }
    }

    fn read_byte(&mut self, underrun: &mut bool) -> u8 {
        if self.pointer == reg::FIFO_DATA {
            if self.staging.is_empty() {
                match self.fifo.pop_front() {
                    Some(s) => self.staging.extend(s.to_bytes()),
                    None => {
                        *underrun = true;
                        self.staging.extend([0; SAMPLE_BYTES]);
                    }
                }
            }
            return self.staging.pop_front().unwrap_or(0);
        }
        let value = self.registers.get(&self.pointer).copied().unwrap_or(0);
        self.advance();
        value
    }

    /// Applies one bus message. Writes set the register pointer from the
    /// first byte and store the rest with auto-increment; reads return
    /// bytes from the pointer. The sensor NACKs foreign addresses, unknown
    /// registers and read-only targets.
    pub fn transact(&mut self, msg: &I2cMessage) -> SensorResponse {
        let mut underrun = false;
        if msg.address != self.address {
            return SensorResponse {
                message: I2cMessage {
                    address: msg.address,
                    rw: msg.rw,
                    payload: Vec::new(),
                    acks: vec![false],
                },
                underrun,
            };
        }
        let message = match msg.rw {
            Rw::Write => {
                let mut acks = vec![true];
                let mut accepting = true;
                for (i, &byte) in msg.payload.iter().enumerate() {
                    if !accepting {
                        acks.push(false);
                        continue;
                    }
                    let ok = if i == 0 {
                        let known = self.is_known(byte);
                        if known {
                            self.pointer = byte;
                        }
                        known
                    } else if self.pointer == reg::FIFO_DATA
                        || READ_ONLY.contains(&self.pointer)
                        || !self.is_known(self.pointer)
                    {
                        false
                    } else {
                        self.registers.insert(self.pointer, byte);
                        self.advance();
                        true
                    };
                    accepting = ok;
                    acks.push(ok);
                }
                I2cMessage {
                    payload: msg.payload.clone(),
                    acks,
                    ..msg.clone()
                }
            }
            Rw::Read => {
                let payload: Vec<u8> = (0..msg.payload.len())
                    .map(|_| self.read_byte(&mut underrun))
                    .collect();
                I2cMessage::read_request(msg.address, payload.len()).with_payload(payload)
            }
        };
        SensorResponse { message, underrun }
    }

    /// Encodes `msg`, decodes it on the sensor side, and returns the encoded
    /// response, exercising the full symbol path.
    pub fn transact_bits(&mut self, bits: &BitStream) -> Result<(BitStream, bool), DecodeError> {
        let msg = decode(&bits.0)?;
        let resp = self.transact(&msg);
        let out = encode(&resp.message).expect("sensor responses are well formed");
        Ok((out, resp.underrun))
    }
}

/// Host-side helper: points the sensor at the FIFO and reads `n` samples
/// over the symbol-level bus. Returns the samples and whether any read
/// underran.
pub fn read_fifo_samples(
    sensor: &mut SensorRegisterMap,
    n: usize,
) -> Result<(Vec<FifoSample>, bool), DecodeError> {
    let address = sensor.address;
    let set_ptr = encode(&I2cMessage::new(address, Rw::Write, vec![reg::FIFO_DATA]))
        .expect("valid pointer write");
    sensor.transact_bits(&set_ptr)?;
    let request =
        encode(&I2cMessage::read_request(address, n * SAMPLE_BYTES)).expect("valid read request");
    let (reply, underrun) = sensor.transact_bits(&request)?;
    let msg = decode(&reply.0)?;
    let samples = msg
        .payload
        .chunks_exact(SAMPLE_BYTES)
        .map(|c| FifoSample::from_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((samples, underrun))
}
