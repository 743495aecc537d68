//! Lockstep posterior exchange for one-worker-per-member training.
//!
//! Workers form a full mesh over TCP; every training step they broadcast
//! their batch posteriors and block until all peers' posteriors for the same
//! round arrive. Only probability matrices ever cross the wire, so a round
//! for a 64-sample batch costs well under a kilobyte at 32-bit precision.
//!
//! Frames are big-endian and CRC-checked: magic `DMLP`, version, type
//! (1 handshake, 2 posteriors, 3 abort), member id, round, rows, cols,
//! payload, CRC32. The handshake payload carries a 32-byte config hash and a
//! precision flag; a mismatch in either aborts the session before round one.
//!
//! Distributed training uses the `simultaneous` update rule: everyone
//! exchanges pre-step posteriors once, then updates. The in-process
//! simultaneous trainer is the semantic oracle; with 64-bit payloads a
//! two-worker loopback run is bit-identical to it.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::data::{config_hash, write_report, ExperimentConfig};
use crate::error::{Error, Result};
use crate::losses::ProbBatch;
use crate::model::init_mlp;
use crate::model::MlpSpec;
use crate::trainer::{
    epoch_order, eval_metrics, member_update, CohortMember, EpochRow, ExperimentReport, Mode,
    StepContext, TrainOutcome, UpdateRule,
};
use crate::Real;

const FRAME_MAGIC: [u8; 4] = *b"DMLP";
const FRAME_VERSION: u8 = 1;
const TYPE_HANDSHAKE: u8 = 1;
const TYPE_PROBS: u8 = 2;
const TYPE_ABORT: u8 = 3;
/// magic + version + type + member_id + round + rows + cols
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 8 + 4 + 4;
const HANDSHAKE_PAYLOAD_LEN: usize = 33;
/// Row sums may drift this far after 32-bit wire rounding.
pub const WIRE_ROW_SUM_TOL: Real = 1e-6;

/// Payload float width on the wire.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WirePrecision {
    F32,
    F64,
}

impl WirePrecision {
    fn flag(self) -> u8 {
        match self {
            WirePrecision::F32 => 0,
            WirePrecision::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }
}

/// One member's posterior matrix for one lockstep round.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMessage {
    pub round: u64,
    pub member_id: u16,
    pub rows: u32,
    pub cols: u32,
    pub payload: Vec<Real>,
}

impl ProbMessage {
    pub fn from_batch(round: u64, member_id: u16, probs: &ProbBatch) -> Self {
        ProbMessage {
            round,
            member_id,
            rows: probs.rows() as u32,
            cols: probs.cols() as u32,
            payload: probs.data().to_vec(),
        }
    }

    pub fn to_batch(&self) -> Result<ProbBatch> {
        ProbBatch::with_tolerance(
            self.rows as usize,
            self.cols as usize,
            self.payload.clone(),
            WIRE_ROW_SUM_TOL,
        )
        .map_err(|e| Error::FramePayload(e.to_string()))
    }
}

fn header(frame_type: u8, member_id: u16, round: u64, rows: u32, cols: u32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.push(FRAME_VERSION);
    buf.push(frame_type);
    buf.extend_from_slice(&member_id.to_be_bytes());
    buf.extend_from_slice(&round.to_be_bytes());
    buf.extend_from_slice(&rows.to_be_bytes());
    buf.extend_from_slice(&cols.to_be_bytes());
    buf
}

fn seal(mut frame: Vec<u8>) -> Vec<u8> {
    let crc = crate::crc32::crc32(&frame);
    frame.extend_from_slice(&crc.to_be_bytes());
    frame
}

/// Serializes a posterior message at the negotiated precision.
pub fn encode(msg: &ProbMessage, precision: WirePrecision) -> Vec<u8> {
    let mut frame = header(TYPE_PROBS, msg.member_id, msg.round, msg.rows, msg.cols);
    match precision {
        WirePrecision::F32 => {
            for &v in &msg.payload {
                frame.extend_from_slice(&(v as f32).to_be_bytes());
            }
        }
        WirePrecision::F64 => {
            for &v in &msg.payload {
                frame.extend_from_slice(&(v as f64).to_be_bytes());
            }
        }
    }
    seal(frame)
}

struct RawFrame {
    frame_type: u8,
    member_id: u16,
    round: u64,
    rows: u32,
    cols: u32,
    payload: Vec<u8>,
}

fn parse_frame(bytes: &[u8], precision: WirePrecision) -> Result<RawFrame> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::FrameLength {
            expected: HEADER_LEN + 4,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FRAME_MAGIC {
        return Err(Error::FrameBadMagic { found: magic });
    }
    let version = bytes[4];
    if version != FRAME_VERSION {
        return Err(Error::FrameBadVersion {
            found: version,
            expected: FRAME_VERSION,
        });
    }
    let frame_type = bytes[5];
    let member_id = u16::from_be_bytes(bytes[6..8].try_into().unwrap());
    let round = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
    let rows = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let cols = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    let payload_len = match frame_type {
        TYPE_HANDSHAKE => HANDSHAKE_PAYLOAD_LEN,
        TYPE_PROBS => rows as usize * cols as usize * precision.width(),
        TYPE_ABORT => 0,
        other => {
            return Err(Error::FramePayload(format!("unknown frame type {other}")));
        }
    };
    let expected = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected {
        return Err(Error::FrameLength {
            expected,
            got: bytes.len(),
        });
    }
    let stored = u32::from_be_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crate::crc32::crc32(&bytes[..expected - 4]);
    if stored != computed {
        return Err(Error::FrameCrc { stored, computed });
    }
    Ok(RawFrame {
        frame_type,
        member_id,
        round,
        rows,
        cols,
        payload: bytes[HEADER_LEN..expected - 4].to_vec(),
    })
}

/// Parses and validates a posterior frame produced by [`encode`].
pub fn decode(bytes: &[u8], precision: WirePrecision) -> Result<ProbMessage> {
    let raw = parse_frame(bytes, precision)?;
    if raw.frame_type != TYPE_PROBS {
        return Err(Error::FramePayload(format!(
            "expected a posterior frame, got type {}",
            raw.frame_type
        )));
    }
    let payload: Vec<Real> = match precision {
        WirePrecision::F32 => raw
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        WirePrecision::F64 => raw
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()) as Real)
            .collect(),
    };
    let msg = ProbMessage {
        round: raw.round,
        member_id: raw.member_id,
        rows: raw.rows,
        cols: raw.cols,
        payload,
    };
    msg.to_batch()?;
    Ok(msg)
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    )
}

fn read_exact_timeout(stream: &mut TcpStream, buf: &mut [u8], peer: u16, round: u64) -> Result<()> {
    stream.read_exact(buf).map_err(|e| {
        if is_timeout(&e) {
            Error::Timeout { peer, round }
        } else if matches!(
            e.kind(),
            std::io::ErrorKind::UnexpectedEof
                | std::io::ErrorKind::ConnectionReset
                | std::io::ErrorKind::BrokenPipe
        ) {
            Error::PeerAbort { peer }
        } else {
            Error::Io(e)
        }
    })
}

fn read_frame(stream: &mut TcpStream, precision: WirePrecision, peer: u16, round: u64) -> Result<RawFrame> {
    let mut head = [0u8; HEADER_LEN];
    read_exact_timeout(stream, &mut head, peer, round)?;
    // Re-parse lengths from the header, then pull payload + CRC.
    let frame_type = head[5];
    let rows = u32::from_be_bytes(head[16..20].try_into().unwrap());
    let cols = u32::from_be_bytes(head[20..24].try_into().unwrap());
    let payload_len = match frame_type {
        TYPE_HANDSHAKE => HANDSHAKE_PAYLOAD_LEN,
        TYPE_PROBS => rows as usize * cols as usize * precision.width(),
        TYPE_ABORT => 0,
        other => return Err(Error::FramePayload(format!("unknown frame type {other}"))),
    };
    let mut rest = vec![0u8; payload_len + 4];
    read_exact_timeout(stream, &mut rest, peer, round)?;
    let mut full = Vec::with_capacity(HEADER_LEN + rest.len());
    full.extend_from_slice(&head);
    full.extend_from_slice(&rest);
    parse_frame(&full, precision)
}

fn handshake_frame(member_id: u16, hash: &[u8; 32], precision: WirePrecision) -> Vec<u8> {
    let mut frame = header(TYPE_HANDSHAKE, member_id, 0, 0, 0);
    frame.extend_from_slice(hash);
    frame.push(precision.flag());
    seal(frame)
}

fn abort_frame(member_id: u16, round: u64) -> Vec<u8> {
    seal(header(TYPE_ABORT, member_id, round, 0, 0))
}

/// Default peer-wait budget.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A full-mesh lockstep session for one cohort member.
pub struct LockstepSession {
    member_id: u16,
    peers: Vec<(u16, TcpStream)>,
    round: u64,
    precision: WirePrecision,
    timeout: Duration,
}

impl LockstepSession {
    /// Establishes the mesh: binds `endpoints[member_id]`, connects to every
    /// lower id, accepts every higher id, and handshakes each link, checking
    /// config hash and precision agreement.
    pub fn connect(
        member_id: u16,
        endpoints: &[String],
        hash: &[u8; 32],
        precision: WirePrecision,
        timeout: Duration,
    ) -> Result<LockstepSession> {
        let k = endpoints.len() as u16;
        if member_id >= k {
            return Err(Error::InvalidArgument(format!(
                "member id {member_id} out of range for {k} endpoints"
            )));
        }
        let listener = TcpListener::bind(&endpoints[member_id as usize])?;
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut peers: Vec<(u16, TcpStream)> = Vec::with_capacity(k as usize - 1);

        // Lower ids are already listening (or soon will be): dial them.
        for peer in 0..member_id {
            let mut stream = loop {
                match TcpStream::connect(&endpoints[peer as usize]) {
                    Ok(s) => break s,
                    Err(_) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(_) => return Err(Error::Timeout { peer, round: 0 }),
                }
            };
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(timeout))?;
            stream.write_all(&handshake_frame(member_id, hash, precision))?;
            let reply = read_frame(&mut stream, precision, peer, 0)?;
            verify_handshake(&reply, peer, hash, precision)?;
            peers.push((peer, stream));
        }

        // Higher ids dial us; identify each by its handshake.
        let mut expected: Vec<u16> = ((member_id + 1)..k).collect();
        while !expected.is_empty() {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(timeout))?;
                    let hello = read_frame(&mut stream, precision, u16::MAX, 0)?;
                    let peer = hello.member_id;
                    let Some(pos) = expected.iter().position(|&e| e == peer) else {
                        return Err(Error::FramePayload(format!(
                            "unexpected handshake from member {peer}"
                        )));
                    };
                    verify_handshake(&hello, peer, hash, precision)?;
                    stream.write_all(&handshake_frame(member_id, hash, precision))?;
                    expected.remove(pos);
                    peers.push((peer, stream));
                }
                Err(e) if is_timeout(&e) => {
                    if Instant::now() >= deadline {
                        return Err(Error::Timeout {
                            peer: expected[0],
                            round: 0,
                        });
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::Io(e)),
            }
        }

        peers.sort_by_key(|(id, _)| *id);
        Ok(LockstepSession {
            member_id,
            peers,
            round: 0,
            precision,
            timeout,
        })
    }

    pub fn member_id(&self) -> u16 {
        self.member_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Broadcasts this member's posteriors and blocks until every peer's
    /// posteriors for the same round arrive. Returns peers by ascending
    /// member id. Any failure aborts the session for everyone.
    pub fn exchange_round(&mut self, local: &ProbBatch) -> Result<Vec<ProbBatch>> {
        self.round += 1;
        let msg = ProbMessage::from_batch(self.round, self.member_id, local);
        let bytes = encode(&msg, self.precision);
        let result = self.exchange_inner(&bytes);
        if result.is_err() {
            self.abort();
        }
        result
    }

    fn exchange_inner(&mut self, bytes: &[u8]) -> Result<Vec<ProbBatch>> {
        for (peer, stream) in self.peers.iter_mut() {
            stream.write_all(bytes).map_err(|e| {
                if is_timeout(&e) {
                    Error::Timeout {
                        peer: *peer,
                        round: self.round,
                    }
                } else {
                    Error::PeerAbort { peer: *peer }
                }
            })?;
        }
        let mut received = Vec::with_capacity(self.peers.len());
        for (peer, stream) in self.peers.iter_mut() {
            let raw = read_frame(stream, self.precision, *peer, self.round)?;
            match raw.frame_type {
                TYPE_ABORT => return Err(Error::PeerAbort { peer: raw.member_id }),
                TYPE_PROBS => {}
                other => {
                    return Err(Error::FramePayload(format!(
                        "peer {peer} sent frame type {other} mid-session"
                    )))
                }
            }
            if raw.member_id != *peer {
                return Err(Error::FramePayload(format!(
                    "stream for peer {peer} delivered a frame from member {}",
                    raw.member_id
                )));
            }
            if raw.round != self.round {
                return Err(Error::RoundMismatch {
                    peer: *peer,
                    got: raw.round,
                    expected: self.round,
                });
            }
            let full = {
                // Re-encode through the public decoder for payload checks.
                let mut f = header(TYPE_PROBS, raw.member_id, raw.round, raw.rows, raw.cols);
                f.extend_from_slice(&raw.payload);
                seal(f)
            };
            received.push(decode(&full, self.precision)?.to_batch()?);
        }
        Ok(received)
    }

    /// Best-effort abort notification to all peers.
    pub fn abort(&mut self) {
        let frame = abort_frame(self.member_id, self.round);
        for (_, stream) in self.peers.iter_mut() {
            let _ = stream.write_all(&frame);
        }
    }
}

fn verify_handshake(
    frame: &RawFrame,
    peer: u16,
    hash: &[u8; 32],
    precision: WirePrecision,
) -> Result<()> {
    if frame.frame_type != TYPE_HANDSHAKE {
        return Err(Error::FramePayload(format!(
            "expected handshake from peer {peer}, got frame type {}",
            frame.frame_type
        )));
    }
    if frame.payload.len() != HANDSHAKE_PAYLOAD_LEN {
        return Err(Error::FrameLength {
            expected: HANDSHAKE_PAYLOAD_LEN,
            got: frame.payload.len(),
        });
    }
    if &frame.payload[..32] != hash {
        return Err(Error::ConfigHashMismatch { peer });
    }
    if frame.payload[32] != precision.flag() {
        return Err(Error::FramePayload(format!(
            "peer {peer} negotiated a different wire precision"
        )));
    }
    Ok(())
}

/// Options for a distributed worker.
#[derive(Clone, Debug)]
pub struct WorkerOptions {
    pub precision: WirePrecision,
    pub timeout: Duration,
    /// When set, the worker writes its (possibly partial) report under
    /// `<out_dir>/worker_<id>/` even if the session fails.
    pub out_dir: Option<PathBuf>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            precision: WirePrecision::F32,
            timeout: DEFAULT_TIMEOUT,
            out_dir: None,
        }
    }
}

/// Trains one cohort member against live peers over the wire.
///
/// The config must be mutual-learning mode; the update rule is forcibly
/// `simultaneous` (each step uses the posteriors exchanged at its start).
/// Batch order derives from the shared `data_seed`, so all workers iterate
/// identical batches. Returns this member's report rows and parameters.
pub fn run_distributed_worker(
    config: &ExperimentConfig,
    member_id: u16,
    endpoints: &[String],
    opts: &WorkerOptions,
) -> Result<TrainOutcome> {
    let cohort = config.cohort_config()?;
    cohort.validate()?;
    if cohort.mode != Mode::Dml {
        return Err(Error::Config(
            "mode: distributed training supports dml only".into(),
        ));
    }
    if endpoints.len() != cohort.members.len() {
        return Err(Error::Config(format!(
            "endpoints: got {} endpoints for {} members",
            endpoints.len(),
            cohort.members.len()
        )));
    }
    if member_id as usize >= cohort.members.len() {
        return Err(Error::Config(format!(
            "member-id: {member_id} out of range for K={}",
            cohort.members.len()
        )));
    }

    let dataset = config.build_dataset()?;
    let hash = config_hash(config);
    let started = Instant::now();
    let spec = &cohort.members[member_id as usize];
    let mlp = MlpSpec::new(
        dataset.input_dim(),
        spec.hidden.clone(),
        dataset.num_classes(),
        spec.seed,
    );
    let mut member = CohortMember::new(init_mlp(&mlp)?, cohort.optimizer);

    let mut rows: Vec<EpochRow> = Vec::new();
    let push_eval = |rows: &mut Vec<EpochRow>, member: &CohortMember, epoch: u32| -> Result<()> {
        let train = eval_metrics(&member.params, &dataset.train_x, &dataset.train_y)?;
        let test = eval_metrics(&member.params, &dataset.test_x, &dataset.test_y)?;
        rows.push(EpochRow {
            epoch,
            member: member_id as usize,
            train_loss: train.loss,
            test_acc: test.accuracy,
            entropy: train.entropy,
        });
        Ok(())
    };

    let flush = |rows: &[EpochRow], member: &CohortMember, elapsed: f64| -> Result<ExperimentReport> {
        let report = ExperimentReport {
            mode: Mode::Dml,
            update_rule: UpdateRule::Simultaneous,
            config_echo: config.echo(),
            rows: rows.to_vec(),
            checkpoints: Vec::new(),
            wall_clock_secs: elapsed,
        };
        if let Some(dir) = &opts.out_dir {
            let worker_dir = dir.join(format!("worker_{member_id}"));
            write_report(&report, &worker_dir)?;
            std::fs::write(
                worker_dir.join(format!("member_{member_id}.ckpt")),
                crate::model::save_checkpoint(&member.params),
            )?;
        }
        Ok(report)
    };

    let mut session = LockstepSession::connect(
        member_id,
        endpoints,
        &hash,
        opts.precision,
        opts.timeout,
    )?;

    let run = (|| -> Result<()> {
        push_eval(&mut rows, &member, 0)?;
        let n_train = dataset.train_x.rows();
        for epoch in 0..cohort.epochs {
            let lr = crate::optim::lr_at(&cohort.schedule, cohort.optimizer.lr, epoch);
            let order = epoch_order(cohort.data_seed, epoch, n_train);
            for batch_idx in order.chunks(cohort.batch_size) {
                let x = crate::trainer::gather_rows(&dataset.train_x, batch_idx);
                let labels = dataset.train_y.select(batch_idx);
                let (_, own_probs) = crate::trainer::predict(&member.params, &x)?;
                let peers = session.exchange_round(&own_probs)?;
                let ctx = StepContext {
                    mode: Mode::Dml,
                    reduction: cohort.reduction,
                    dml_e_aggregation: cohort.dml_e_aggregation,
                    lr,
                    distill_targets: None,
                    distill_temp: 1.0,
                    instrument: false,
                    update_rule: UpdateRule::Simultaneous,
                };
                member_update(&mut member, &x, &labels, &peers, None, &ctx)?;
            }
            push_eval(&mut rows, &member, epoch + 1)?;
        }
        Ok(())
    })();

    match run {
        Ok(()) => {
            let report = flush(&rows, &member, started.elapsed().as_secs_f64())?;
            Ok(TrainOutcome {
                report,
                members: vec![member.params],
            })
        }
        Err(e) => {
            session.abort();
            // Flush whatever was measured before the failure.
            let _ = flush(&rows, &member, started.elapsed().as_secs_f64());
            Err(e)
        }
    }
}

/// Reserves `k` distinct loopback endpoints by binding throwaway listeners.
pub fn free_local_endpoints(k: usize) -> Result<Vec<String>> {
    let mut endpoints = Vec::with_capacity(k);
    let mut holders = Vec::with_capacity(k);
    for _ in 0..k {
        let l = TcpListener::bind("127.0.0.1:0")?;
        endpoints.push(l.local_addr()?.to_string());
        holders.push(l);
    }
    drop(holders);
    Ok(endpoints)
}
