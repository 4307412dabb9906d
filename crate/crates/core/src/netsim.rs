//! In-process synchronous message bus. Messages sent during a round become
//! readable only after the barrier that closes it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::AgentId;

/// Size of a payload on the wire, in 8-byte reals.
pub trait WireSize {
    fn wire_reals(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<P> {
    pub sender: AgentId,
    /// Round in which the message was sent.
    pub round: u64,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub rounds: u64,
    pub bytes_estimate: u64,
}

#[derive(Debug, Clone)]
pub struct Bus<P> {
    pending: Vec<(AgentId, Message<P>)>,
    inboxes: Vec<Vec<Message<P>>>,
    stats: BusStats,
}

impl<P: Clone + WireSize> Bus<P> {
    pub fn new(n_agents: usize) -> Self {
        Self {
            pending: Vec::new(),
            inboxes: (0..n_agents).map(|_| Vec::new()).collect(),
            stats: BusStats::default(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.inboxes.len()
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    pub fn round(&self) -> u64 {
        self.stats.rounds
    }

    /// Queue `payload` for every recipient; delivered at the next barrier.
    pub fn broadcast<I>(&mut self, sender: AgentId, payload: P, recipients: I) -> Result<()>
    where
        I: IntoIterator<Item = AgentId>,
    {
        let n = self.n_agents();
        if sender >= n {
            return Err(Error::Config(format!("unknown sender {sender}")));
        }
        let recipients: Vec<AgentId> = recipients.into_iter().collect();
        for &r in &recipients {
            if r >= n {
                return Err(Error::Config(format!("unknown recipient {r}")));
            }
            assert_ne!(r, sender, "agent {sender} cannot message itself");
        }
        let bytes = 8 * payload.wire_reals() as u64;
        for r in recipients {
            self.pending.push((
                r,
                Message {
                    sender,
                    round: self.stats.rounds,
                    payload: payload.clone(),
                },
            ));
            self.stats.messages_sent += 1;
            self.stats.bytes_estimate += bytes;
        }
        Ok(())
    }

    /// Deliver everything pending and close the round. Each inbox stays sorted
    /// by sender id, FIFO within a sender.
    pub fn barrier(&mut self) -> usize {
        let delivered = self.pending.len();
        for (r, msg) in self.pending.drain(..) {
            self.inboxes[r].push(msg);
        }
        for inbox in &mut self.inboxes {
            inbox.sort_by_key(|m| m.sender);
        }
        self.stats.messages_delivered += delivered as u64;
        self.stats.rounds += 1;
        delivered
    }

    /// Take every readable message for `agent`.
    pub fn drain(&mut self, agent: AgentId) -> Vec<Message<P>> {
        std::mem::take(&mut self.inboxes[agent])
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}
