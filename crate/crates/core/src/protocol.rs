//! Interface shared by the four parties and the message bus.

use thiserror::Error;

use crate::crypto::SignedEnvelope;
use crate::model::{IdpError, KeysError, Message, PartyId, RequestViolation, SimTime, TransactionId};

/// A signed message an actor wants delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub to: PartyId,
    pub envelope: SignedEnvelope,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{party} does not accept {kind} from {from}")]
    UnexpectedMessage {
        party: PartyId,
        from: PartyId,
        kind: &'static str,
    },
    #[error("unknown transaction {0}")]
    UnknownTransaction(TransactionId),
    #[error("transaction {0} already handled")]
    DuplicateTransaction(TransactionId),
    #[error("malformed request {tx}: {violations:?}")]
    InvalidRequest {
        tx: TransactionId,
        violations: Vec<RequestViolation>,
    },
    #[error("identity provider: {error:?} for {tx}")]
    Idp { tx: TransactionId, error: IdpError },
    #[error("identity provider returned {got} usable ids, {needed} needed, for {tx}")]
    IdpShortfall {
        tx: TransactionId,
        needed: usize,
        got: usize,
    },
    #[error("key request for {tx} failed: {error:?}")]
    Keys { tx: TransactionId, error: KeysError },
    #[error("keys received for {tx} do not match the declared infected groups")]
    KeyScope { tx: TransactionId },
    #[error("group {group_index} of {tx} does not decrypt")]
    Decrypt { tx: TransactionId, group_index: u32 },
    #[error("cannot plan round: {0}")]
    Planning(String),
}

/// One protocol party. Messages arrive already verified and decoded.
pub trait Actor {
    fn party(&self) -> PartyId;

    fn handle(
        &mut self,
        now: SimTime,
        from: PartyId,
        msg: Message,
        envelope: &SignedEnvelope,
    ) -> Result<Vec<Outgoing>, ProtocolError>;
}

pub(crate) fn unexpected(party: PartyId, from: PartyId, msg: &Message) -> ProtocolError {
    ProtocolError::UnexpectedMessage {
        party,
        from,
        kind: msg.kind(),
    }
}
