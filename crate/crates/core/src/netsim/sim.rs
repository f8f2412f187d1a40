use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use super::adversary::{byzantine_value, AggOut, ByzAggregator, ByzantineStrategy, HonestView};
use super::config::{DelayClass, DelayModel, Roles, ScenarioConfig, US_PER_MS};
use super::report::{Counters, Decision, MsgKind, Preconditions, Rejected, RunReport};
use crate::codec::{digest, feed_response_bytes, Canonical};
use crate::crypto::{sign_fallback_vote, sign_vote, SimulatedScheme};
use crate::datasource::{assign_sources, get_data_feed, robust_median, DataSourceSpec, FeedRequest, SourceBehavior};
use crate::error::ConfigError;
use crate::protocol::{mean_half_even, AggregatorRound, Ctx, NodeRound, Via, WitnessOutcome};
use crate::smr::SmrLog;
use crate::types::{
    Digest, InstanceKey, NodeId, Phase, Price, ProtocolMessage, RoundId, SimTime, SmrTransaction,
    VariableId,
};

/// Runs one scenario under one seed until the event queue drains or the
/// event budget runs out.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<RunReport, ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, seed)?;
    sim.run();
    Ok(sim.finish())
}

enum Ev {
    RoundStart(u64),
    Feed {
        node: NodeId,
        key: InstanceKey,
        phase: Phase,
        median: Option<Price>,
    },
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Box<ProtocolMessage>,
    },
    NodeTimer {
        node: NodeId,
        key: InstanceKey,
    },
    AggTimer {
        agg: NodeId,
        key: InstanceKey,
    },
    ByzFallbackVote {
        node: NodeId,
        key: InstanceKey,
    },
    SmrSubmit {
        poster: NodeId,
        tx: Box<SmrTransaction>,
    },
    SmrWake {
        observer: NodeId,
    },
}

impl Ev {
    fn tag(&self) -> u8 {
        match self {
            Ev::RoundStart(_) => 0,
            Ev::Feed { .. } => 1,
            Ev::Deliver { .. } => 2,
            Ev::NodeTimer { .. } => 3,
            Ev::AggTimer { .. } => 4,
            Ev::ByzFallbackVote { .. } => 5,
            Ev::SmrSubmit { .. } => 6,
            Ev::SmrWake { .. } => 7,
        }
    }
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FeedState {
    NotStarted,
    Pending,
    Done,
}

struct Conclusion {
    value: Price,
    via: Via,
    seq: u64,
    at: SimTime,
}

struct Instance {
    nodes: BTreeMap<NodeId, NodeRound>,
    aggs: BTreeMap<NodeId, AggregatorRound>,
    byz_aggs: BTreeMap<NodeId, ByzAggregator>,
    clan_pending: usize,
    fallback_feeds: BTreeMap<NodeId, FeedState>,
    fallback_started: bool,
    rushed: BTreeSet<Phase>,
    conclusions: BTreeMap<NodeId, Conclusion>,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    seed: u64,
    ctx: Ctx,
    roles: Roles,
    node_strategy: ByzantineStrategy,
    sources: Vec<DataSourceSpec>,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Scheduled>>,
    now: SimTime,
    next_seq: u64,
    smr: SmrLog,
    instances: BTreeMap<InstanceKey, Instance>,
    wake_pending: BTreeMap<NodeId, SimTime>,
    proposal_phase: BTreeMap<Digest, Phase>,
    trace: Sha256,
    counters: Counters,
    rejections: Vec<Rejected>,
    feed_diagnostics: Vec<String>,
    honest_sends: u64,
    honest_deliveries: u64,
    causality_violations: usize,
    events: u64,
    budget_exhausted: bool,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, seed: u64) -> Result<Self, ConfigError> {
        let roles = cfg.roles(seed)?;
        let protocol = cfg.protocol_config()?;
        let scheme = Arc::new(SimulatedScheme::generate(roles.tribe.iter().copied(), seed));
        let ctx = Ctx::new(protocol, scheme.clone());
        let honest: Vec<NodeId> = roles.tribe.difference(&roles.byzantine).copied().collect();
        let smr = SmrLog::new(ctx.config.smr_rules(), scheme, honest);
        let mut sim = Sim {
            cfg,
            seed,
            ctx,
            node_strategy: cfg.faults.node_strategy.clone(),
            roles,
            sources: cfg.sources.specs()?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            now: 0,
            next_seq: 0,
            smr,
            instances: BTreeMap::new(),
            wake_pending: BTreeMap::new(),
            proposal_phase: BTreeMap::new(),
            trace: Sha256::new(),
            counters: Counters::default(),
            rejections: Vec::new(),
            feed_diagnostics: Vec::new(),
            honest_sends: 0,
            honest_deliveries: 0,
            causality_violations: 0,
            events: 0,
            budget_exhausted: false,
        };
        if cfg.protocol.rounds > 0 {
            sim.schedule(0, Ev::RoundStart(0));
        }
        Ok(sim)
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) {
        if at < self.now {
            self.causality_violations += 1;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, ev }));
    }

    fn honest(&self, n: NodeId) -> bool {
        !self.roles.is_byzantine(n)
    }

    fn run(&mut self) {
        while let Some(Reverse(s)) = self.queue.pop() {
            if self.events >= self.cfg.limits.max_events {
                self.budget_exhausted = true;
                break;
            }
            self.events += 1;
            self.now = s.at;
            self.record_trace(&s);
            self.dispatch(s.ev);
        }
    }

    fn record_trace(&mut self, s: &Scheduled) {
        self.trace.update(s.at.to_be_bytes());
        self.trace.update(s.seq.to_be_bytes());
        self.trace.update([s.ev.tag()]);
        match &s.ev {
            Ev::Deliver { from, to, msg } => {
                self.trace.update(from.0.to_be_bytes());
                self.trace.update(to.0.to_be_bytes());
                self.trace.update(msg.to_canonical_bytes());
            }
            Ev::SmrSubmit { poster, tx } => {
                self.trace.update(poster.0.to_be_bytes());
                self.trace.update(tx.to_canonical_bytes());
            }
            Ev::Feed { node, median, .. } => {
                self.trace.update(node.0.to_be_bytes());
                self.trace.update(median.map_or(i64::MIN, |m| m.micros()).to_be_bytes());
            }
            _ => {}
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::RoundStart(r) => self.on_round_start(r),
            Ev::Feed {
                node,
                key,
                phase,
                median,
            } => self.on_feed(node, key, phase, median),
            Ev::Deliver { from, to, msg } => self.on_deliver(from, to, *msg),
            Ev::NodeTimer { node, key } => {
                let ctx = self.ctx.clone();
                let vote = self
                    .instances
                    .get_mut(&key)
                    .and_then(|i| i.nodes.get_mut(&node))
                    .and_then(|n| n.on_fallback_timeout(&ctx));
                if let Some(v) = vote {
                    self.broadcast_aggregators(node, ProtocolMessage::FallbackVote(v), DelayClass::FallbackVote);
                }
            }
            Ev::AggTimer { agg, key } => {
                let ctx = self.ctx.clone();
                let Some(inst) = self.instances.get_mut(&key) else { return };
                let outs = if let Some(a) = inst.aggs.get_mut(&agg) {
                    a.on_timer(&ctx).map(AggOut::Post).into_iter().collect()
                } else if let Some(b) = inst.byz_aggs.get_mut(&agg) {
                    b.on_timer(&ctx)
                } else {
                    Vec::new()
                };
                self.apply_agg_outs(agg, outs);
            }
            Ev::ByzFallbackVote { node, key } => {
                if let Ok(v) = sign_fallback_vote(self.ctx.scheme.as_ref(), node, key) {
                    self.broadcast_aggregators(node, ProtocolMessage::FallbackVote(v), DelayClass::FallbackVote);
                }
            }
            Ev::SmrSubmit { poster, tx } => self.on_smr_submit(poster, *tx),
            Ev::SmrWake { observer } => self.on_smr_wake(observer),
        }
    }

    fn t_fallback(&self) -> SimTime {
        self.cfg.protocol.t_fallback_ms * US_PER_MS
    }

    fn t_ds(&self) -> SimTime {
        self.cfg.protocol.t_ds_ms * US_PER_MS
    }

    fn on_round_start(&mut self, r: u64) {
        let start = self.now;
        let ctx = self.ctx.clone();
        let agg_strategy = self.cfg.aggregator_strategy();
        for v in 0..self.cfg.protocol.variables {
            let key = InstanceKey::new(RoundId(r), VariableId(v));
            let mut inst = Instance {
                nodes: BTreeMap::new(),
                aggs: BTreeMap::new(),
                byz_aggs: BTreeMap::new(),
                clan_pending: 0,
                fallback_feeds: BTreeMap::new(),
                fallback_started: false,
                rushed: BTreeSet::new(),
                conclusions: BTreeMap::new(),
            };
            for &n in &self.roles.tribe {
                if self.honest(n) {
                    inst.nodes.insert(n, NodeRound::new(n, key));
                    inst.fallback_feeds.insert(n, FeedState::NotStarted);
                }
            }
            for &a in &self.roles.aggregators {
                if self.honest(a) {
                    inst.aggs.insert(a, AggregatorRound::new(a, key));
                } else {
                    let b = ByzAggregator::new(&ctx, a, key, agg_strategy.clone(), self.roles.byzantine.clone());
                    inst.byz_aggs.insert(a, b);
                }
            }
            self.instances.insert(key, inst);

            let clan: Vec<NodeId> = self.roles.clan.iter().copied().collect();
            let mut pending = 0;
            for &n in &clan {
                if self.honest(n) && self.start_feed(n, key, Phase::Clan, start) {
                    pending += 1;
                }
            }
            self.instances.get_mut(&key).expect("just inserted").clan_pending = pending;

            let agg_timer = start + self.t_ds() + self.t_fallback();
            let aggs: Vec<NodeId> = self.roles.aggregators.iter().copied().collect();
            for a in aggs {
                self.schedule(agg_timer, Ev::AggTimer { agg: a, key });
            }
            let stall_at = match self.node_strategy {
                ByzantineStrategy::Silent => None,
                ByzantineStrategy::StallFallback => Some(start),
                _ => Some(agg_timer),
            };
            if let Some(at) = stall_at {
                for &n in &clan {
                    if !self.honest(n) {
                        self.schedule(at, Ev::ByzFallbackVote { node: n, key });
                    }
                }
            }
            if pending == 0 {
                self.rush(key, Phase::Clan);
            }
        }
        if r + 1 < self.cfg.protocol.rounds {
            self.schedule((r + 1) * self.cfg.protocol.round_interval_ms * US_PER_MS, Ev::RoundStart(r + 1));
        }
    }

    /// Runs the data feed for `node`; returns whether it will complete.
    fn start_feed(&mut self, node: NodeId, key: InstanceKey, phase: Phase, at: SimTime) -> bool {
        let at = at + self.cfg.population.clock_offset_ms.get(&node.0).copied().unwrap_or(0) * US_PER_MS;
        let phase_salt: u64 = match phase {
            Phase::Clan => 0,
            Phase::Fallback => 1,
        };
        let vrf_seed = self.seed
            ^ key.round.0.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ u64::from(key.variable.0).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ phase_salt.wrapping_mul(0x1656_67B1_9E37_79F9);
        let variant = self.cfg.protocol.variant;
        let f_d = self.cfg.sources.f_d;
        let assignment = match assign_sources(&[node], &self.sources, f_d, variant, vrf_seed) {
            Ok(a) => a,
            Err(e) => {
                self.feed_diagnostics.push(format!("{key} {node}: {e}"));
                return false;
            }
        };
        let mult = self.cfg.trajectory.noise_multiplier(at);
        let scaled: Vec<DataSourceSpec> = assignment
            .get(node)
            .iter()
            .map(|id| {
                let mut s = self.sources[id.0 as usize].clone();
                if let SourceBehavior::Honest { noise_half_width } = &mut s.behavior {
                    *noise_half_width = noise_half_width.saturating_mul(mult);
                }
                s
            })
            .collect();
        let [lo, hi] = self.cfg.sources.latency_ms;
        let req = FeedRequest {
            sources: scaled.iter().collect(),
            variant,
            f_d,
            t_ds: self.t_ds(),
            truth: self.cfg.trajectory.truth(key.variable.0, at),
            latency: (lo * US_PER_MS, hi * US_PER_MS),
        };
        let outcome = get_data_feed(&req, &mut self.rng);
        let fallback = phase == Phase::Fallback;
        for r in &outcome.responses {
            let bytes = feed_response_bytes(r.source, key.variable, r.value).len();
            self.counters.add(fallback, MsgKind::Feed, bytes);
        }
        if let Some(d) = &outcome.diagnostic {
            self.feed_diagnostics.push(format!("{key} {node}: {d}"));
        }
        match outcome.completed_at {
            Some(done) => {
                let median = robust_median(&outcome.obs).ok();
                if median.is_none() {
                    self.feed_diagnostics.push(format!("{key} {node}: no observations, abstaining"));
                }
                self.schedule(
                    at + done,
                    Ev::Feed {
                        node,
                        key,
                        phase,
                        median,
                    },
                );
                true
            }
            None => {
                self.feed_diagnostics.push(format!("{key} {node}: feed never reached its quorum"));
                false
            }
        }
    }

    fn on_feed(&mut self, node: NodeId, key: InstanceKey, phase: Phase, median: Option<Price>) {
        let ctx = self.ctx.clone();
        let t_fallback = self.t_fallback();
        let Some(inst) = self.instances.get_mut(&key) else { return };
        let nr = inst.nodes.get_mut(&node).expect("feeds run for honest nodes");
        let msg = median.and_then(|m| nr.submit_value(&ctx, phase, m));
        let concluded = nr.is_concluded();
        match phase {
            Phase::Clan => {
                inst.clan_pending = inst.clan_pending.saturating_sub(1);
                let rush = inst.clan_pending == 0;
                if let Some(m) = msg {
                    self.broadcast_aggregators(node, ProtocolMessage::Value(m), DelayClass::Value);
                }
                if !concluded {
                    self.schedule(self.now + t_fallback, Ev::NodeTimer { node, key });
                }
                if rush {
                    self.rush(key, Phase::Clan);
                }
            }
            Phase::Fallback => {
                inst.fallback_feeds.insert(node, FeedState::Done);
                if let Some(m) = msg {
                    self.broadcast_aggregators(node, ProtocolMessage::Value(m), DelayClass::FallbackValue);
                }
                self.check_fallback_rush(key);
            }
        }
    }

    fn check_fallback_rush(&mut self, key: InstanceKey) {
        let Some(inst) = self.instances.get(&key) else { return };
        if !inst.fallback_started || inst.rushed.contains(&Phase::Fallback) {
            return;
        }
        let settled = inst
            .fallback_feeds
            .iter()
            .all(|(n, s)| *s == FeedState::Done || inst.conclusions.contains_key(n));
        if settled {
            self.rush(key, Phase::Fallback);
        }
    }

    fn honest_values(&self, key: InstanceKey, phase: Phase) -> Vec<Price> {
        self.instances
            .get(&key)
            .map(|i| i.nodes.values().filter_map(|n| n.submitted(phase)).collect())
            .unwrap_or_default()
    }

    /// Corrupted nodes pick their values once every honest value is fixed.
    fn rush(&mut self, key: InstanceKey, phase: Phase) {
        let Some(inst) = self.instances.get_mut(&key) else { return };
        if !inst.rushed.insert(phase) {
            return;
        }
        let honest = self.honest_values(key, phase);
        let truth = self.cfg.trajectory.truth(key.variable.0, self.now);
        let view = HonestView {
            count: honest.len(),
            min: honest.iter().min().copied().unwrap_or(truth),
            max: honest.iter().max().copied().unwrap_or(truth),
            truth,
        };
        let d = self.cfg.protocol.agreement_distance;
        let (eligible, class) = match phase {
            Phase::Clan => (&self.roles.clan, DelayClass::Value),
            Phase::Fallback => (&self.roles.tribe, DelayClass::FallbackValue),
        };
        let corrupted: Vec<NodeId> = eligible.intersection(&self.roles.byzantine).copied().collect();
        let aggs: Vec<NodeId> = self.roles.aggregators.iter().copied().collect();
        for n in corrupted {
            for (i, &a) in aggs.iter().enumerate() {
                let Some(v) = byzantine_value(&self.node_strategy, &view, d, i, &mut self.rng) else { continue };
                if let Ok(m) = crate::protocol::sign_value(&self.ctx, n, key, phase, v) {
                    self.send(n, a, ProtocolMessage::Value(m), class);
                }
            }
        }
        let ctx = self.ctx.clone();
        let byz: Vec<NodeId> = self.instances[&key].byz_aggs.keys().copied().collect();
        for a in byz {
            let outs = self
                .instances
                .get_mut(&key)
                .and_then(|i| i.byz_aggs.get_mut(&a))
                .map(|b| b.on_rush(&ctx, phase, view))
                .unwrap_or_default();
            self.apply_agg_outs(a, outs);
        }
    }

    fn sample(&mut self, model: DelayModel) -> SimTime {
        let us = match model {
            DelayModel::Fixed { ms } => ms * US_PER_MS,
            DelayModel::Uniform { lo_ms, hi_ms } => self.rng.gen_range(lo_ms * US_PER_MS..=hi_ms * US_PER_MS),
        };
        us.min(self.cfg.adversary.cap_ms * US_PER_MS)
    }

    fn delay(&mut self, from: NodeId, to: Option<NodeId>, class: DelayClass) -> SimTime {
        let adv = &self.cfg.adversary;
        let matched = adv.overrides.iter().find(|o| {
            o.from.is_none_or(|f| f == from.0)
                && o.to.is_none_or(|t| Some(NodeId(t)) == to)
                && o.class.is_none_or(|c| c == class)
        });
        let model = match (matched, &adv.byzantine_send) {
            (Some(o), _) => o.delay,
            (None, Some(m)) if self.roles.is_byzantine(from) => *m,
            _ => adv.model(class),
        };
        self.sample(model)
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage, class: DelayClass) {
        let (kind, fallback) = match &msg {
            ProtocolMessage::Value(v) => (MsgKind::Value, v.phase == Phase::Fallback),
            ProtocolMessage::VProp(p) => (MsgKind::VProp, p.payload.phase() == Phase::Fallback),
            ProtocolMessage::Vote(v) => (
                MsgKind::VoteVp,
                self.proposal_phase.get(&v.digest) == Some(&Phase::Fallback),
            ),
            ProtocolMessage::FallbackVote(_) => (MsgKind::VoteFt, false),
        };
        self.counters.add(fallback, kind, msg.encoded_len());
        let delay = if from == to { 0 } else { self.delay(from, Some(to), class) };
        if self.honest(from) && self.honest(to) {
            self.honest_sends += 1;
        }
        self.schedule(
            self.now + delay,
            Ev::Deliver {
                from,
                to,
                msg: Box::new(msg),
            },
        );
    }

    fn broadcast_aggregators(&mut self, from: NodeId, msg: ProtocolMessage, class: DelayClass) {
        let aggs: Vec<NodeId> = self.roles.aggregators.iter().copied().collect();
        for a in aggs {
            self.send(from, a, msg.clone(), class);
        }
    }

    fn apply_agg_outs(&mut self, agg: NodeId, outs: Vec<AggOut>) {
        for out in outs {
            match out {
                AggOut::Propose(p) => {
                    let phase = p.payload.phase();
                    self.proposal_phase.insert(digest(&p), phase);
                    let to: Vec<NodeId> = match phase {
                        Phase::Clan => self.roles.clan.iter().copied().collect(),
                        Phase::Fallback => self.roles.tribe.iter().copied().collect(),
                    };
                    let msg = ProtocolMessage::VProp(p);
                    for n in to {
                        self.send(agg, n, msg.clone(), DelayClass::Proposal);
                    }
                }
                AggOut::Post(tx) => {
                    let (kind, fallback) = match &tx {
                        SmrTransaction::VPost { proposal, .. } => {
                            (MsgKind::VPost, proposal.payload.phase() == Phase::Fallback)
                        }
                        SmrTransaction::FtPost { .. } => (MsgKind::FtPost, false),
                    };
                    self.counters.add(fallback, kind, tx.encoded_len());
                    let delay = self.delay(agg, None, DelayClass::SmrPost);
                    self.schedule(
                        self.now + delay,
                        Ev::SmrSubmit {
                            poster: agg,
                            tx: Box::new(tx),
                        },
                    );
                }
            }
        }
    }

    fn on_deliver(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage) {
        if self.honest(from) && self.honest(to) {
            self.honest_deliveries += 1;
        }
        let key = msg.key();
        let ctx = self.ctx.clone();
        let honest_to = self.honest(to);
        let votes = self.node_strategy.votes();
        let Some(inst) = self.instances.get_mut(&key) else { return };
        let mut outs = Vec::new();
        let mut reply = None;
        match &msg {
            ProtocolMessage::Value(v) => {
                if let Some(a) = inst.aggs.get_mut(&to) {
                    outs.extend(a.on_value(&ctx, v).map(AggOut::Propose));
                } else if let Some(b) = inst.byz_aggs.get_mut(&to) {
                    outs = b.on_value(&ctx, v);
                }
            }
            ProtocolMessage::VProp(p) => {
                if honest_to {
                    if let Some(n) = inst.nodes.get_mut(&to) {
                        reply = n.on_vprop(&ctx, p).map(|v| (p.aggregator, v));
                    }
                } else if votes {
                    reply = sign_vote(ctx.scheme.as_ref(), to, digest(p), key).ok().map(|v| (p.aggregator, v));
                }
            }
            ProtocolMessage::Vote(v) => {
                if let Some(a) = inst.aggs.get_mut(&to) {
                    outs.extend(a.on_vote(&ctx, v).map(AggOut::Post));
                } else if let Some(b) = inst.byz_aggs.get_mut(&to) {
                    outs = b.on_vote(&ctx, v);
                }
            }
            ProtocolMessage::FallbackVote(v) => {
                if let Some(a) = inst.aggs.get_mut(&to) {
                    outs.extend(a.on_fallback_vote(&ctx, v).map(AggOut::Post));
                } else if let Some(b) = inst.byz_aggs.get_mut(&to) {
                    outs = b.on_fallback_vote(&ctx, v);
                }
            }
        }
        if let Some((agg, vote)) = reply {
            self.send(to, agg, ProtocolMessage::Vote(vote), DelayClass::Vote);
        }
        self.apply_agg_outs(to, outs);
    }

    fn on_smr_submit(&mut self, poster: NodeId, tx: SmrTransaction) {
        let observers: Vec<NodeId> = self.roles.tribe.difference(&self.roles.byzantine).copied().collect();
        let mut delays = BTreeMap::new();
        for &o in &observers {
            delays.insert(o, self.delay(poster, Some(o), DelayClass::SmrDeliver));
        }
        let kind = tx.kind_name();
        match self.smr.post(tx, poster, self.now, |o| delays.get(&o).copied().unwrap_or(0)) {
            Ok(_) => {
                for o in observers {
                    self.schedule_wake(o);
                }
            }
            Err(reason) => self.rejections.push(Rejected {
                at: self.now,
                poster,
                kind,
                reason,
            }),
        }
    }

    fn schedule_wake(&mut self, observer: NodeId) {
        let Some(due) = self.smr.next_due(observer) else { return };
        let due = due.max(self.now);
        match self.wake_pending.get(&observer) {
            Some(&pending) if pending <= due => {}
            _ => {
                self.wake_pending.insert(observer, due);
                self.schedule(due, Ev::SmrWake { observer });
            }
        }
    }

    fn on_smr_wake(&mut self, observer: NodeId) {
        if self.wake_pending.get(&observer) == Some(&self.now) {
            self.wake_pending.remove(&observer);
        }
        let ctx = self.ctx.clone();
        let mut delivered = Vec::new();
        while let Some(e) = self.smr.deliver_next(observer, self.now) {
            delivered.push((e.seq, e.tx.clone()));
        }
        for (seq, tx) in delivered {
            let key = tx.key();
            let Some(inst) = self.instances.get_mut(&key) else { continue };
            if let Some(a) = inst.aggs.get_mut(&observer) {
                a.on_witness(&tx);
            }
            let Some(node) = inst.nodes.get_mut(&observer) else { continue };
            match node.witness(&ctx, &tx) {
                WitnessOutcome::Concluded { value, via } => {
                    inst.conclusions.insert(
                        observer,
                        Conclusion {
                            value,
                            via,
                            seq,
                            at: self.now,
                        },
                    );
                    self.check_fallback_rush(key);
                }
                WitnessOutcome::SwitchToFallback => {
                    inst.fallback_started = true;
                    let will_complete = self.start_feed(observer, key, Phase::Fallback, self.now);
                    let state = if will_complete { FeedState::Pending } else { FeedState::Done };
                    if let Some(i) = self.instances.get_mut(&key) {
                        i.fallback_feeds.insert(observer, state);
                    }
                    self.check_fallback_rush(key);
                }
                WitnessOutcome::Ignored | WitnessOutcome::Flagged(_) => {}
            }
        }
        self.schedule_wake(observer);
    }

    fn preconditions(&self) -> Preconditions {
        let byz_tribe = self.roles.byzantine.intersection(&self.roles.tribe).count();
        let faulty_weight: usize = self
            .sources
            .iter()
            .filter(|s| !matches!(s.behavior, SourceBehavior::Honest { .. }))
            .map(|s| s.weight as usize)
            .sum();
        Preconditions {
            honest_aggregator: self.roles.honest_aggregators() >= 1,
            clan_majority: self.roles.byzantine_in_clan() <= self.roles.f_c,
            tribe_supermajority: byz_tribe <= self.roles.f_t,
            sources_ok: faulty_weight <= self.cfg.sources.f_d,
        }
    }

    fn finish(self) -> RunReport {
        let pre = self.preconditions();
        let d = self.cfg.protocol.agreement_distance;
        let mut decisions = Vec::new();
        let (mut agreement_violations, mut validity_violations, mut bound_violations, mut unconcluded) = (0, 0, 0, 0);
        let mut witness_flags = Vec::new();
        for (key, inst) in &self.instances {
            for (n, node) in &inst.nodes {
                for f in node.flags() {
                    witness_flags.push(format!("{key} {n}: {f}"));
                }
            }
            let honest_nodes = inst.nodes.len();
            let values: BTreeSet<Price> = inst.conclusions.values().map(|c| c.value).collect();
            let agreement = values.len() <= 1;
            let first = inst.conclusions.values().next();
            let s = first.filter(|_| agreement).map(|c| c.value);
            let via = first.map(|c| c.via);
            let concluded_at = inst.conclusions.values().map(|c| c.at).max();
            let phase = match via {
                Some(Via::Fallback) => Phase::Fallback,
                _ => Phase::Clan,
            };
            let honest: Vec<Price> = inst.nodes.values().filter_map(|n| n.submitted(phase)).collect();
            let hmin = honest.iter().min().copied();
            let hmax = honest.iter().max().copied();
            let ideal = mean_half_even(honest.iter().copied());
            let spread = hmin.zip(hmax).map(|(lo, hi)| hi.distance(lo));
            let error = s.zip(ideal).map(|(s, i)| s.distance(i));
            let error_bound = spread.map(|sp| sp.saturating_add(d));
            let validity_ok = match (s, hmin, hmax, via) {
                (Some(s), Some(lo), Some(hi), Some(Via::Cluster)) => {
                    let d = i64::try_from(d).unwrap_or(i64::MAX);
                    lo.saturating_offset(-d) <= s && s <= hi.saturating_offset(d)
                }
                (Some(s), Some(lo), Some(hi), Some(Via::Fallback)) => lo <= s && s <= hi,
                _ => true,
            };
            let error_bound_ok = match (error, error_bound) {
                (Some(e), Some(b)) => e <= b,
                _ => true,
            };
            let gated = match via {
                Some(Via::Fallback) => pre.tribe_supermajority,
                _ => pre.clan_majority,
            };
            agreement_violations += usize::from(!agreement);
            validity_violations += usize::from(gated && !validity_ok);
            bound_violations += usize::from(gated && !error_bound_ok);
            unconcluded += honest_nodes - inst.conclusions.len();
            decisions.push(Decision {
                round: key.round,
                variable: key.variable,
                s,
                via,
                smr_seq: first.map(|c| c.seq),
                honest_min: hmin,
                honest_max: hmax,
                ideal,
                error,
                error_bound,
                fallback_triggered: inst.fallback_started,
                concluded: inst.conclusions.len(),
                honest_nodes,
                agreement,
                validity_ok,
                error_bound_ok,
                concluded_at,
            });
        }
        RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.seed,
            preconditions: pre,
            byzantine: self.roles.byzantine.iter().copied().collect(),
            decisions,
            counters: self.counters,
            smr_entries: self.smr.len(),
            smr_rejections: self.rejections,
            witness_flags,
            feed_diagnostics: self.feed_diagnostics,
            agreement_violations,
            validity_violations,
            error_bound_violations: bound_violations,
            unconcluded,
            causality_violations: self.causality_violations,
            honest_sends: self.honest_sends,
            honest_deliveries: self.honest_deliveries,
            events: self.events,
            budget_exhausted: self.budget_exhausted,
            end_time: self.now,
            trace_digest: hex::encode(self.trace.finalize()),
        }
    }
}

/// The SMR audit log of a run, as JSON lines.
pub fn run_with_audit(cfg: &ScenarioConfig, seed: u64) -> Result<(RunReport, String), ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, seed)?;
    sim.run();
    let audit = sim.smr.audit_jsonl();
    Ok((sim.finish(), audit))
}
