//! Deterministic in-process message bus and its transcript.
//!
//! Delivery is synchronous and FIFO. Every envelope is verified before it is
//! appended to the transcript; envelopes that fail are refused and logged.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{KeyRegistry, SignedEnvelope, VerifyError};
use crate::model::{PartyId, SimTime};
use crate::protocol::{Actor, Outgoing, ProtocolError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub sim_time: SimTime,
    pub from: PartyId,
    pub to: PartyId,
    pub envelope: SignedEnvelope,
}

/// JSON-lines form of a transcript entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub seq: u64,
    pub time: SimTime,
    pub from: PartyId,
    pub to: PartyId,
    pub envelope: String,
}

impl From<&TranscriptEntry> for TranscriptLine {
    fn from(e: &TranscriptEntry) -> Self {
        TranscriptLine {
            seq: e.seq,
            time: e.sim_time,
            from: e.from,
            to: e.to,
            envelope: e.envelope.to_base64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Refusal {
    pub sim_time: SimTime,
    pub from: PartyId,
    pub to: PartyId,
    pub reason: String,
}

/// Error raised by an actor while handling a delivered message.
#[derive(Debug, Clone, PartialEq)]
pub struct HandlerFailure {
    pub sim_time: SimTime,
    pub seq: u64,
    pub party: PartyId,
    pub error: ProtocolError,
}

#[derive(Debug)]
pub struct SimNet {
    registry: KeyRegistry,
    transcript: Vec<TranscriptEntry>,
    refusals: Vec<Refusal>,
    failures: Vec<HandlerFailure>,
    queue: VecDeque<usize>,
}

impl SimNet {
    pub fn new(registry: KeyRegistry) -> Self {
        SimNet {
            registry,
            transcript: Vec::new(),
            refusals: Vec::new(),
            failures: Vec::new(),
            queue: VecDeque::new(),
        }
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    /// Verifies and records an envelope, queueing it for delivery.
    pub fn send(&mut self, now: SimTime, from: PartyId, to: PartyId, envelope: SignedEnvelope) -> Result<u64, VerifyError> {
        let checked = if envelope.sender != from {
            Err(VerifyError::BadSignature)
        } else {
            self.registry.open(&envelope).map(|_| ())
        };
        if let Err(e) = checked {
            log::warn!("refused {from} -> {to}: {e}");
            self.refusals.push(Refusal {
                sim_time: now,
                from,
                to,
                reason: e.to_string(),
            });
            return Err(e);
        }
        let seq = self.transcript.len() as u64;
        self.transcript.push(TranscriptEntry {
            seq,
            sim_time: now,
            from,
            to,
            envelope,
        });
        self.queue.push_back(seq as usize);
        Ok(seq)
    }

    pub fn send_all(&mut self, now: SimTime, from: PartyId, out: Vec<Outgoing>) {
        for o in out {
            let _ = self.send(now, from, o.to, o.envelope);
        }
    }

    /// Delivers queued messages, including replies they trigger, until the
    /// queue drains.
    pub fn run(&mut self, now: SimTime, actors: &mut [&mut dyn Actor]) {
        while let Some(i) = self.queue.pop_front() {
            let entry = self.transcript[i].clone();
            let Some(actor) = actors.iter_mut().find(|a| a.party() == entry.to) else {
                self.refusals.push(Refusal {
                    sim_time: now,
                    from: entry.from,
                    to: entry.to,
                    reason: "no such recipient".into(),
                });
                continue;
            };
            let msg = entry.envelope.message().expect("verified at send time");
            match actor.handle(now, entry.from, msg, &entry.envelope) {
                Ok(out) => self.send_all(now, entry.to, out),
                Err(error) => {
                    log::warn!("{} failed on seq {}: {error}", entry.to, entry.seq);
                    self.failures.push(HandlerFailure {
                        sim_time: now,
                        seq: entry.seq,
                        party: entry.to,
                        error,
                    });
                }
            }
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn refusals(&self) -> &[Refusal] {
        &self.refusals
    }

    pub fn failures(&self) -> &[HandlerFailure] {
        &self.failures
    }

    pub fn transcript_jsonl(&self) -> String {
        transcript_to_jsonl(&self.transcript)
    }

    /// SHA-256 of the JSON-lines transcript.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.transcript_jsonl().as_bytes()))
    }
}

pub fn transcript_to_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(&TranscriptLine::from(e)).expect("line serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayFailure {
    /// Line number (0-based) in the replayed transcript.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub entries: usize,
    pub failures: Vec<ReplayFailure>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Re-verifies a JSON-lines transcript using only the public-key registry.
pub fn replay_jsonl(text: &str, registry: &KeyRegistry) -> ReplayReport {
    let mut report = ReplayReport::default();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        report.entries += 1;
        let fail = |reason: String| ReplayFailure { line: line_no, reason };
        let parsed: TranscriptLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                report.failures.push(fail(format!("unparseable: {e}")));
                continue;
            }
        };
        if parsed.seq != (report.entries - 1) as u64 {
            report.failures.push(fail(format!("sequence gap at {}", parsed.seq)));
            continue;
        }
        let env = match SignedEnvelope::from_base64(&parsed.envelope) {
            Ok(e) => e,
            Err(e) => {
                report.failures.push(fail(format!("envelope: {e}")));
                continue;
            }
        };
        if env.sender != parsed.from {
            report.failures.push(fail("sender differs from envelope".into()));
            continue;
        }
        if let Err(e) = registry.open(&env) {
            report.failures.push(fail(e.to_string()));
        }
    }
    report
}

/// Re-verifies in-memory entries.
pub fn replay(entries: &[TranscriptEntry], registry: &KeyRegistry) -> ReplayReport {
    replay_jsonl(&transcript_to_jsonl(entries), registry)
}
