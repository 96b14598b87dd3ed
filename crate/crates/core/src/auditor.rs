//! Offline audit of HA behaviour from LP evidence and ITPA records.
//!
//! The HA must never place the same id in an infected group twice. The LP
//! keeps every signed request and the ITPA keeps the infected group indices
//! the HA declared for each one; joining the two reveals every id that was
//! declared infected more than once, with the HA's own signatures as proof.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{KeyRegistry, SignedEnvelope};
use crate::intermediaries::{ItpaOutcome, ItpaRecord};
use crate::lp::{EvidenceLine, RetainedRequest};
use crate::model::{ContactTracingRequest, Message, PartyId, SimTime, TransactionId, UserId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub tx: TransactionId,
    pub received_at: SimTime,
    /// SHA-256 of the canonical envelope bytes.
    pub digest: String,
    pub envelope: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub user_id: UserId,
    pub tx_list: Vec<TransactionId>,
    pub evidence_refs: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoverageFinding {
    /// The LP holds a request the ITPA never mediated.
    MissingItpaRecord { tx: TransactionId },
    /// The ITPA mediated a transaction the LP has no request for.
    MissingEvidence { tx: TransactionId },
    CountMismatch { tx: TransactionId, declared: u32, received: u32 },
    /// The HA declared a group total different from the request it signed.
    DeclaredTotalMismatch { tx: TransactionId, declared: u32, actual: u32 },
    /// Declared infected indices that do not exist in the request.
    UnknownGroupIndex { tx: TransactionId, group_index: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityError {
    pub tx: Option<TransactionId>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub coverage_findings: Vec<CoverageFinding>,
    pub integrity_errors: Vec<IntegrityError>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.coverage_findings.is_empty() && self.integrity_errors.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum AuditInputError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

/// Parses an LP evidence export; signatures are checked later by [`audit`].
pub fn parse_evidence(text: &str) -> Result<Vec<RetainedRequest>, AuditInputError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| AuditInputError::Line { line: i + 1, reason };
        let l: EvidenceLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let envelope = SignedEnvelope::from_base64(&l.envelope).map_err(|e| bad(e.to_string()))?;
        out.push(RetainedRequest {
            tx: l.tx,
            envelope,
            received_at: l.received_at,
        });
    }
    Ok(out)
}

pub fn parse_itpa_records(text: &str) -> Result<Vec<ItpaRecord>, AuditInputError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditInputError::Line {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn open_request(r: &RetainedRequest, registry: &KeyRegistry) -> Result<ContactTracingRequest, String> {
    if r.envelope.sender != PartyId::Ha {
        return Err(format!("envelope signed by {}, not the HA", r.envelope.sender));
    }
    match registry.open(&r.envelope).map_err(|e| e.to_string())? {
        Message::ContactTracingRequest(req) if req.tx == r.tx => Ok(req),
        Message::ContactTracingRequest(_) => Err("transaction id differs from the signed request".into()),
        other => Err(format!("evidence holds a {:?}, not a request", other.kind())),
    }
}

/// Joins evidence and ITPA records. Any evidence that fails verification
/// aborts the audit: the report then carries only integrity errors.
pub fn audit(evidence: &[RetainedRequest], itpa: &[ItpaRecord], registry: &KeyRegistry) -> AuditReport {
    let mut report = AuditReport::default();
    let mut requests: BTreeMap<TransactionId, (&RetainedRequest, ContactTracingRequest)> = BTreeMap::new();
    for r in evidence {
        match open_request(r, registry) {
            Ok(req) => {
                if requests.insert(r.tx, (r, req)).is_some() {
                    report.integrity_errors.push(IntegrityError {
                        tx: Some(r.tx),
                        reason: "transaction appears twice in evidence".into(),
                    });
                }
            }
            Err(reason) => report.integrity_errors.push(IntegrityError { tx: Some(r.tx), reason }),
        }
    }
    if !report.integrity_errors.is_empty() {
        return report;
    }

    let mut records: BTreeMap<TransactionId, &ItpaRecord> = BTreeMap::new();
    for rec in itpa {
        records.entry(rec.tx).or_insert(rec);
    }
    for tx in requests.keys().filter(|tx| !records.contains_key(tx)) {
        report.coverage_findings.push(CoverageFinding::MissingItpaRecord { tx: *tx });
    }

    let mut declared: BTreeMap<UserId, BTreeSet<TransactionId>> = BTreeMap::new();
    let mut intra: BTreeSet<(UserId, TransactionId)> = BTreeSet::new();
    for (tx, rec) in &records {
        if let ItpaOutcome::CountMismatch { declared, received } = rec.outcome {
            report.coverage_findings.push(CoverageFinding::CountMismatch {
                tx: *tx,
                declared,
                received,
            });
        }
        let Some((_, req)) = requests.get(tx) else {
            report.coverage_findings.push(CoverageFinding::MissingEvidence { tx: *tx });
            continue;
        };
        if rec.total_groups as usize != req.groups.len() {
            report.coverage_findings.push(CoverageFinding::DeclaredTotalMismatch {
                tx: *tx,
                declared: rec.total_groups,
                actual: req.groups.len() as u32,
            });
        }
        for &gi in &rec.infected_group_indices {
            let Some(group) = req.group(gi) else {
                report
                    .coverage_findings
                    .push(CoverageFinding::UnknownGroupIndex { tx: *tx, group_index: gi });
                continue;
            };
            for id in &group.member_ids {
                if !declared.entry(id.clone()).or_default().insert(*tx) {
                    intra.insert((id.clone(), *tx));
                }
            }
        }
    }

    for (user, txs) in declared {
        let repeated_in_one = txs.iter().any(|tx| intra.contains(&(user.clone(), *tx)));
        if txs.len() < 2 && !repeated_in_one {
            continue;
        }
        let evidence_refs = txs
            .iter()
            .map(|tx| {
                let (r, _) = &requests[tx];
                EvidenceRef {
                    tx: *tx,
                    received_at: r.received_at,
                    digest: r.envelope.digest_hex(),
                    envelope: r.envelope.to_base64(),
                }
            })
            .collect();
        report.violations.push(Violation {
            user_id: user,
            tx_list: txs.into_iter().collect(),
            evidence_refs,
        });
    }
    report.coverage_findings.sort();
    report
}

/// Re-checks a violation from its attached envelopes alone: at least two
/// verifying HA requests, or one request naming the user in two groups, must
/// place the user in groups the ITPA records declare infected.
pub fn violation_is_proven(v: &Violation, itpa: &[ItpaRecord], registry: &KeyRegistry) -> bool {
    let mut hits = 0;
    for r in &v.evidence_refs {
        let Ok(env) = SignedEnvelope::from_base64(&r.envelope) else {
            return false;
        };
        let retained = RetainedRequest {
            tx: r.tx,
            envelope: env,
            received_at: r.received_at,
        };
        let Ok(req) = open_request(&retained, registry) else {
            return false;
        };
        let Some(rec) = itpa.iter().find(|rec| rec.tx == r.tx) else {
            return false;
        };
        hits += rec
            .infected_group_indices
            .iter()
            .filter_map(|&gi| req.group(gi))
            .filter(|g| g.member_ids.contains(&v.user_id))
            .count();
    }
    hits >= 2
}

/// Runs the audit once per simulated day over everything exported so far,
/// reporting each violation and finding only the first day it appears.
#[derive(Debug, Default)]
pub struct DailyAuditor {
    seen_violations: BTreeSet<(UserId, Vec<TransactionId>)>,
    seen_findings: BTreeSet<CoverageFinding>,
    reports: Vec<DailyAudit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyAudit {
    pub day: u32,
    pub report: AuditReport,
}

impl DailyAuditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run(&mut self, day: u32, evidence: &[RetainedRequest], itpa: &[ItpaRecord], registry: &KeyRegistry) -> &DailyAudit {
        let mut full = audit(evidence, itpa, registry);
        full.violations
            .retain(|v| self.seen_violations.insert((v.user_id.clone(), v.tx_list.clone())));
        full.coverage_findings.retain(|f| self.seen_findings.insert(f.clone()));
        self.reports.push(DailyAudit { day, report: full });
        self.reports.last().expect("just pushed")
    }

    pub fn reports(&self) -> &[DailyAudit] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<DailyAudit> {
        self.reports
    }
}
