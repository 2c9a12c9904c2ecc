//! Actors of a run: ring nodes hosting the replicated service, and clients.

use serde::{Deserialize, Serialize};

use crate::client::Client;
use crate::dht::service::{self, Replica, ServiceConfig};
use crate::keyspace::{Key, KeySpace};
use crate::overlay::{LookupOutcome, Overlay, OverlayConfig, OverlayEvent, RoutingState};
use crate::protocol::{Msg, Timer};
use crate::recovery::{self, Recovery, RecoveryConfig};
use crate::simnet::{Actor, ActorId, Ctx, NodeAddress};

/// Lookup tokens for probes started by [`Node::probe`].
const PROBE_TAG: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeConfig {
    pub overlay: OverlayConfig,
    pub service: ServiceConfig,
    pub recovery: RecoveryConfig,
}

/// A ring member: routing, the replica service and its repair machinery.
#[derive(Debug, Clone)]
pub struct Node {
    pub overlay: Overlay,
    pub replica: Replica,
    pub recovery: Recovery,
    bootstrap: Option<NodeAddress>,
    probes: Vec<LookupOutcome<u64>>,
    next_probe: u64,
}

impl Node {
    pub fn new(ks: KeySpace, f: usize, config: NodeConfig, state: RoutingState) -> Self {
        Self {
            overlay: Overlay::new(ks, config.overlay, state),
            replica: Replica::new(ks, f, config.service),
            recovery: Recovery::new(ks, f, config.recovery),
            bootstrap: None,
            probes: Vec::new(),
            next_probe: 0,
        }
    }

    /// A node that joins through `bootstrap` when [`Timer::Join`] fires.
    pub fn joining(
        ks: KeySpace,
        f: usize,
        config: NodeConfig,
        me: NodeAddress,
        bootstrap: NodeAddress,
    ) -> Self {
        let mut n = Self::new(ks, f, config, RoutingState::detached(me, ks.bits()));
        n.bootstrap = Some(bootstrap);
        n
    }

    pub fn address(&self) -> NodeAddress {
        self.overlay.me()
    }

    /// Starts a lookup of `target` from this node on behalf of a test or
    /// harness; the outcome lands in [`Self::probes`].
    pub fn probe(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, target: Key) {
        self.next_probe += 1;
        let token = (self.next_probe << 2) | PROBE_TAG;
        self.overlay.lookup(ctx, target, token, false);
        self.dispatch(ctx);
    }

    pub fn probes(&self) -> &[LookupOutcome<u64>] {
        &self.probes
    }

    /// Routes overlay events to the service and recovery layers until none
    /// are left; handlers may start lookups that finish synchronously.
    fn dispatch(&mut self, ctx: &mut Ctx<'_, Msg, Timer>) {
        loop {
            let events = self.overlay.take_events();
            if events.is_empty() {
                return;
            }
            for e in events {
                match e {
                    OverlayEvent::Change(c) => {
                        self.recovery
                            .on_change(ctx, &mut self.overlay, &mut self.replica, c)
                    }
                    OverlayEvent::Lookup(out) => match out.tag & 3 {
                        service::TOKEN_TAG => self.replica.on_lookup(ctx, out),
                        recovery::TOKEN_TAG => self.recovery.on_lookup(ctx, out),
                        _ => self.probes.push(out),
                    },
                    OverlayEvent::Joined => {}
                }
            }
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, from: ActorId, msg: Msg) {
        let _ = self.overlay.on_message(ctx, from, &msg)
            || self.replica.on_message(ctx, &mut self.overlay, from, &msg)
            || self
                .recovery
                .on_message(ctx, &mut self.overlay, &mut self.replica, from, &msg);
        self.dispatch(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, timer: Timer) {
        if timer == Timer::Join {
            if let Some(b) = self.bootstrap {
                self.overlay.join(ctx, b);
                let phase = self.overlay.random_phase(ctx);
                self.overlay.start_maintenance(ctx, phase);
            }
        } else {
            let _ = self.overlay.on_timer(ctx, &timer)
                || self.replica.on_timer(ctx, &mut self.overlay, &timer)
                || self
                    .recovery
                    .on_timer(ctx, &mut self.overlay, &mut self.replica, &timer);
        }
        self.dispatch(ctx);
    }
}

/// Everything that can be hosted in a run.
#[derive(Debug, Clone)]
pub enum Participant {
    Node(Box<Node>),
    Client(Box<Client>),
}

impl Participant {
    pub fn as_node(&self) -> Option<&Node> {
        match self {
            Participant::Node(n) => Some(n),
            Participant::Client(_) => None,
        }
    }

    pub fn as_node_mut(&mut self) -> Option<&mut Node> {
        match self {
            Participant::Node(n) => Some(n),
            Participant::Client(_) => None,
        }
    }

    pub fn as_client(&self) -> Option<&Client> {
        match self {
            Participant::Client(c) => Some(c),
            Participant::Node(_) => None,
        }
    }
}

impl Actor for Participant {
    type Msg = Msg;
    type Timer = Timer;

    fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, from: ActorId, msg: Msg) {
        match self {
            Participant::Node(n) => n.on_message(ctx, from, msg),
            Participant::Client(c) => c.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, timer: Timer) {
        match self {
            Participant::Node(n) => n.on_timer(ctx, timer),
            Participant::Client(c) => c.on_timer(ctx, timer),
        }
    }
}
