"""
Deterministic discrete-event simulation of the dumbbell fronthaul topology.

p UDP senders pace packets at their intersend time through an access link into
switch A, across the shared full-duplex bottleneck to switch B and out to their
receivers. Receivers return one ACK per data packet on the reverse direction.
Every link direction is an egress port with a drop-tail FIFO queue.
"""

import dataclasses
import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
import pandas as pd

from config import (
    DEFAULT_ACCESS_CAPACITY_BPS,
    DEFAULT_ACCESS_PROPAGATION_S,
    DEFAULT_ACK_PACKET_SIZE,
    DEFAULT_BOTTLENECK_PROPAGATION_S,
    DEFAULT_DATA_PACKET_SIZE,
    DEFAULT_LOSS_TIMEOUT_FACTOR,
    DEFAULT_QUEUE_CAPACITY,
    DEFAULT_WINDOW_S,
    INITIAL_LOAD_FRACTION,
    ConfigInvalid,
    SymccError,
    require,
)
from utils import convert_df_to_csv

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "time_s", "flow_id", "x1", "x2", "x3", "x4", "action", "reward", "acks", "losses",
    "sent", "rtt_samples", "delivered",
]
LINK_COLUMNS = ["time_s", "bottleneck_bits", "queue_occupancy", "drops"]


class SimulationInvariantError(SymccError):
    """Packet conservation or queue bounds were violated."""


@dataclass(frozen=True)
class Topology:
    """Dumbbell parameters. Capacities in bits/s, sizes in bytes, delays in seconds."""

    bottleneck_capacity: float
    pair_count: int
    access_capacity: float = DEFAULT_ACCESS_CAPACITY_BPS
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    data_packet_size: float = DEFAULT_DATA_PACKET_SIZE
    ack_packet_size: float = DEFAULT_ACK_PACKET_SIZE
    access_propagation: float = DEFAULT_ACCESS_PROPAGATION_S
    bottleneck_propagation: float = DEFAULT_BOTTLENECK_PROPAGATION_S

    def __post_init__(self):
        require(self.bottleneck_capacity > 0, "bottleneck_capacity", "must be > 0")
        require(self.access_capacity > 0, "access_capacity", "must be > 0")
        require(self.pair_count >= 1, "pair_count", "must be >= 1")
        require(self.queue_capacity >= 1, "queue_capacity", "must be >= 1")
        require(self.data_packet_size > 0, "data_packet_size", "must be > 0")
        require(self.ack_packet_size > 0, "ack_packet_size", "must be > 0")
        require(self.access_propagation >= 0, "access_propagation", "must be >= 0")
        require(self.bottleneck_propagation >= 0, "bottleneck_propagation", "must be >= 0")
        if self.access_capacity < self.bottleneck_capacity:
            logger.warning(
                "access links (%.3g bit/s) are slower than the bottleneck (%.3g bit/s)",
                self.access_capacity, self.bottleneck_capacity,
            )

    @property
    def data_bits(self):
        return self.data_packet_size * 8.0

    @property
    def ack_bits(self):
        return self.ack_packet_size * 8.0

    @property
    def bottleneck_serialization(self):
        """Seconds to put one data packet on the bottleneck."""
        return self.data_bits / self.bottleneck_capacity

    @property
    def access_serialization(self):
        return self.data_bits / self.access_capacity

    def default_initial_intersend(self):
        """Start every sender so the aggregate offered load is 10% of C."""
        return self.data_bits / (INITIAL_LOAD_FRACTION * self.bottleneck_capacity / self.pair_count)


def analytic_min_rtt(topology):
    """Empty-network RTT: data packet forward over three hops plus its ACK back."""
    t = topology
    forward = (
        t.data_bits / t.access_capacity + t.access_propagation
        + t.data_bits / t.bottleneck_capacity + t.bottleneck_propagation
        + t.data_bits / t.access_capacity + t.access_propagation
    )
    reverse = (
        t.ack_bits / t.access_capacity + t.access_propagation
        + t.ack_bits / t.bottleneck_capacity + t.bottleneck_propagation
        + t.ack_bits / t.access_capacity + t.access_propagation
    )
    return forward + reverse


class EventKind(IntEnum):
    """Tie-break priority for simultaneous events (lower runs first)."""

    ARRIVAL = 0
    DEPARTURE = 1
    SEND_TIMER = 2
    WINDOW_TICK = 3
    SIM_END = 4


@dataclass(order=True)
class SimEvent:
    timestamp: float
    kind: EventKind
    sequence: int
    payload: object = field(compare=False, default=None)


class EventQueue:
    """Min-heap ordered by (timestamp, kind priority, insertion sequence)."""

    def __init__(self):
        self._heap = []
        self._sequence = 0

    def push(self, timestamp, kind, payload=None):
        heapq.heappush(self._heap, (timestamp, kind, self._sequence, payload))
        self._sequence += 1

    def pop(self):
        return SimEvent(*heapq.heappop(self._heap))

    def __len__(self):
        return len(self._heap)


@dataclass(slots=True)
class Packet:
    flow_id: int
    seq: int
    size_bits: float
    sent_at: float
    is_ack: bool = False


class EnqueueResult(Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


class DropTailQueue:
    """FIFO that discards arrivals once `capacity` packets are waiting."""

    def __init__(self, capacity):
        self.capacity = capacity
        self._packets = deque()
        self.max_occupancy = 0
        self.drops = 0

    @property
    def occupancy(self):
        return len(self._packets)

    def enqueue(self, packet):
        if len(self._packets) >= self.capacity:
            self.drops += 1
            return EnqueueResult.DROPPED
        self._packets.append(packet)
        if len(self._packets) > self.max_occupancy:
            self.max_occupancy = len(self._packets)
        return EnqueueResult.ACCEPTED

    def dequeue(self):
        return self._packets.popleft()

    def __len__(self):
        return len(self._packets)


def enqueue(queue, packet):
    """Offer `packet` to a drop-tail queue."""
    return queue.enqueue(packet)


class Port:
    """Egress port: a drop-tail queue feeding one direction of a link."""

    def __init__(self, name, rate, propagation, capacity):
        self.name = name
        self.rate = rate
        self.propagation = propagation
        self.queue = DropTailQueue(capacity)
        self.next_hop = None
        self.in_service = None
        self.bits_sent = 0.0
        self.packets_sent = 0

    def offer(self, sim, packet):
        if self.in_service is None:
            self._start(sim, packet)
            return EnqueueResult.ACCEPTED
        return self.queue.enqueue(packet)

    def _start(self, sim, packet):
        self.in_service = packet
        sim.schedule(sim.now + packet.size_bits / self.rate, EventKind.DEPARTURE, self)

    def complete(self, sim):
        packet = self.in_service
        self.bits_sent += packet.size_bits
        self.packets_sent += 1
        sim.schedule(sim.now + self.propagation, EventKind.ARRIVAL, (self.next_hop, packet))
        self.in_service = None
        if self.queue:
            self._start(sim, self.queue.dequeue())

    def stats(self):
        return {
            "packets_sent": self.packets_sent,
            "bits_sent": self.bits_sent,
            "max_occupancy": self.queue.max_occupancy,
            "drops": self.queue.drops,
        }


class Switch:
    def __init__(self, name, route):
        self.name = name
        self.route = route

    def receive(self, sim, packet):
        self.route(packet).offer(sim, packet)


class Receiver:
    def __init__(self, flow_id, port, ack_bits):
        self.flow_id = flow_id
        self.port = port
        self.ack_bits = ack_bits
        self.received = 0

    def receive(self, sim, packet):
        self.received += 1
        ack = Packet(packet.flow_id, packet.seq, self.ack_bits, packet.sent_at, is_ack=True)
        self.port.offer(sim, ack)


@dataclass
class FlowState:
    flow_id: int
    packets_sent: int = 0
    packets_acked: int = 0
    packets_lost: int = 0
    packets_in_flight: int = 0
    late_acks: int = 0
    min_rtt_observed: float = math.inf
    # per-window accumulators, reset at every tick
    window_sent: int = 0
    window_acks: int = 0
    window_delivered: int = 0
    window_rtt_sum: float = 0.0
    window_rtt_samples: int = 0
    window_losses: int = 0

    def conserved(self):
        return self.packets_sent == self.packets_acked + self.packets_lost + self.packets_in_flight


@dataclass(frozen=True)
class WindowStats:
    """What a sender measured during one control window."""

    time: float
    flow_id: int
    intersend: float
    sent: int
    acks: int
    rtt_sum: float
    rtt_samples: int
    losses: int
    min_rtt: float
    delivered: int = 0


@dataclass(frozen=True)
class WindowDecision:
    observation: object
    action: float
    reward: float
    intersend: float


class Sender:
    """Rate-based UDP source: one packet every `intersend` seconds."""

    def __init__(self, flow_id, port, data_bits, intersend, start_time, agent):
        self.flow_id = flow_id
        self.port = port
        self.data_bits = data_bits
        self.intersend = intersend
        self.start_time = start_time
        self.agent = agent
        self.state = FlowState(flow_id)
        self.in_flight = {}
        self.next_seq = 0
        self.last_send = None
        self.generation = 0

    def schedule_next(self, sim):
        if self.last_send is None:
            when = max(sim.now, self.start_time)
        else:
            when = max(sim.now, self.last_send + self.intersend)
        self.generation += 1
        sim.schedule(when, EventKind.SEND_TIMER, (self, self.generation))

    def on_timer(self, sim, generation):
        if generation != self.generation:
            return
        packet = Packet(self.flow_id, self.next_seq, self.data_bits, sim.now)
        self.next_seq += 1
        self.in_flight[packet.seq] = packet.sent_at
        self.state.packets_sent += 1
        self.state.packets_in_flight += 1
        self.state.window_sent += 1
        self.last_send = sim.now
        self.port.offer(sim, packet)
        sim.schedule(sim.now + self.intersend, EventKind.SEND_TIMER, (self, self.generation))

    def receive(self, sim, ack):
        rtt = sim.now - ack.sent_at
        state = self.state
        state.window_delivered += 1
        if ack.seq in self.in_flight:
            del self.in_flight[ack.seq]
            state.packets_acked += 1
            state.packets_in_flight -= 1
            state.window_acks += 1
        else:
            # already declared lost by timeout; the RTT sample is still real
            state.late_acks += 1
        if rtt < state.min_rtt_observed:
            state.min_rtt_observed = rtt
        state.window_rtt_sum += rtt
        state.window_rtt_samples += 1

    def detect_losses(self, now, timeout_factor):
        state = self.state
        if not math.isfinite(state.min_rtt_observed):
            return
        deadline = now - timeout_factor * state.min_rtt_observed
        while self.in_flight:
            seq, sent_at = next(iter(self.in_flight.items()))
            if sent_at > deadline:
                break
            del self.in_flight[seq]
            state.packets_lost += 1
            state.packets_in_flight -= 1
            state.window_losses += 1

    def close_window(self, now):
        state = self.state
        stats = WindowStats(
            time=now,
            flow_id=self.flow_id,
            intersend=self.intersend,
            sent=state.window_sent,
            acks=state.window_acks,
            rtt_sum=state.window_rtt_sum,
            rtt_samples=state.window_rtt_samples,
            losses=state.window_losses,
            min_rtt=state.min_rtt_observed,
            delivered=state.window_delivered,
        )
        state.window_sent = state.window_acks = state.window_delivered = 0
        state.window_rtt_samples = state.window_losses = 0
        state.window_rtt_sum = 0.0
        return stats


@dataclass
class SimTrace:
    """Per-(flow, window) records, per-window link counters and final flow state."""

    windows: pd.DataFrame
    link: pd.DataFrame
    flows: tuple
    ports: dict
    metadata: dict

    def to_csv(self):
        return convert_df_to_csv(self.windows)

    def flow_frame(self):
        return pd.DataFrame([vars(f) for f in self.flows])


class Simulation:
    """One run of the dumbbell. Owns all of its mutable state."""

    def __init__(self, topology, agents, duration, window=DEFAULT_WINDOW_S, seed=0,
                 initial_intersend=None, start_jitter=True,
                 loss_timeout_factor=DEFAULT_LOSS_TIMEOUT_FACTOR):
        require(duration > 0, "duration", "must be > 0")
        require(window > 0, "window", "must be > 0")
        require(len(agents) == topology.pair_count, "policy_bindings",
                f"{topology.pair_count} flows need a policy each, got {len(agents)}")
        require(loss_timeout_factor > 0, "loss_timeout_factor", "must be > 0")
        self.topology = topology
        self.duration = duration
        self.window = window
        self.seed = seed
        self.loss_timeout_factor = loss_timeout_factor
        self.now = 0.0
        self.events = EventQueue()
        self.tick_count = max(1, int(math.floor(duration / window + 1e-9)))

        intersend = initial_intersend or topology.default_initial_intersend()
        require(intersend > 0, "initial_intersend", "must be > 0")
        rng = np.random.default_rng(seed)
        offsets = rng.uniform(0.0, intersend, size=topology.pair_count) if start_jitter \
            else np.zeros(topology.pair_count)
        self._build(agents, intersend, offsets)

    def _build(self, agents, intersend, offsets):
        t = self.topology
        q = t.queue_capacity
        self.bottleneck = Port("A->B", t.bottleneck_capacity, t.bottleneck_propagation, q)
        self.bottleneck_reverse = Port("B->A", t.bottleneck_capacity, t.bottleneck_propagation, q)
        to_senders, to_receivers = [], []
        self._access_ports = []
        self.senders, self.receivers = [], []
        for i in range(t.pair_count):
            up = Port(f"sender{i}->A", t.access_capacity, t.access_propagation, q)
            down = Port(f"B->receiver{i}", t.access_capacity, t.access_propagation, q)
            ack_up = Port(f"receiver{i}->B", t.access_capacity, t.access_propagation, q)
            ack_down = Port(f"A->sender{i}", t.access_capacity, t.access_propagation, q)
            sender = Sender(i, up, t.data_bits, intersend, float(offsets[i]), agents[i])
            receiver = Receiver(i, ack_up, t.ack_bits)
            down.next_hop = receiver
            ack_down.next_hop = sender
            self.senders.append(sender)
            self.receivers.append(receiver)
            to_senders.append(ack_down)
            to_receivers.append(down)
            self._access_ports.extend([up, down, ack_up, ack_down])

        self.switch_a = Switch("A", lambda p: to_senders[p.flow_id] if p.is_ack else self.bottleneck)
        self.switch_b = Switch("B", lambda p: self.bottleneck_reverse if p.is_ack else to_receivers[p.flow_id])
        self.bottleneck.next_hop = self.switch_b
        self.bottleneck_reverse.next_hop = self.switch_a
        for sender in self.senders:
            sender.port.next_hop = self.switch_a
        for receiver in self.receivers:
            receiver.port.next_hop = self.switch_b

    def tick_time(self, k):
        # k * window can land a hair past the duration in floating point
        t = k * self.window
        return self.duration if k == self.tick_count and math.isclose(t, self.duration) else t

    @property
    def ports(self):
        return [self.bottleneck, self.bottleneck_reverse] + self._access_ports

    def schedule(self, timestamp, kind, payload=None):
        self.events.push(timestamp, kind, payload)

    def run(self):
        """Process events until the end time; returns the SimTrace."""
        for sender in self.senders:
            sender.schedule_next(self)
        for k in range(1, self.tick_count + 1):
            self.schedule(self.tick_time(k), EventKind.WINDOW_TICK, k)
        self.schedule(max(self.duration, self.tick_time(self.tick_count)), EventKind.SIM_END)

        self._rows = []
        self._link_rows = []
        self._last_bits = 0.0
        self._last_drops = 0

        while self.events:
            event = self.events.pop()
            self.now = event.timestamp
            kind = event.kind
            if kind == EventKind.ARRIVAL:
                node, packet = event.payload
                node.receive(self, packet)
            elif kind == EventKind.DEPARTURE:
                event.payload.complete(self)
            elif kind == EventKind.SEND_TIMER:
                sender, generation = event.payload
                sender.on_timer(self, generation)
            elif kind == EventKind.WINDOW_TICK:
                self._on_tick()
            else:
                break
        return self._trace()

    def _on_tick(self):
        for sender in self.senders:
            sender.detect_losses(self.now, self.loss_timeout_factor)
            state = sender.state
            if not state.conserved():
                raise SimulationInvariantError(
                    f"flow {state.flow_id} at t={self.now:.6f}: sent {state.packets_sent} != "
                    f"acked {state.packets_acked} + lost {state.packets_lost} + in flight {state.packets_in_flight}"
                )
            stats = sender.close_window(self.now)
            decision = sender.agent.on_window(stats)
            obs = decision.observation
            self._rows.append((
                self.now, sender.flow_id, obs.x1, obs.x2, obs.x3, obs.x4,
                decision.action, decision.reward, stats.acks, stats.losses,
                stats.sent, stats.rtt_samples, stats.delivered,
            ))
            if decision.intersend != sender.intersend:
                sender.intersend = decision.intersend
                sender.schedule_next(self)

        for port in self.ports:
            if port.queue.occupancy > port.queue.capacity:
                raise SimulationInvariantError(f"queue {port.name} holds {port.queue.occupancy} packets")
        bits = self.bottleneck.bits_sent
        drops = self.bottleneck.queue.drops
        self._link_rows.append((self.now, bits - self._last_bits, self.bottleneck.queue.occupancy,
                                drops - self._last_drops))
        self._last_bits, self._last_drops = bits, drops

    def _trace(self):
        windows = pd.DataFrame(self._rows, columns=TRACE_COLUMNS)
        link = pd.DataFrame(self._link_rows, columns=LINK_COLUMNS)
        metadata = {
            "topology": dataclasses.asdict(self.topology),
            "duration_s": self.duration,
            "window_s": self.window,
            "seed": self.seed,
            "analytic_min_rtt_s": analytic_min_rtt(self.topology),
            "loss_timeout_factor": self.loss_timeout_factor,
        }
        return SimTrace(
            windows=windows,
            link=link,
            flows=tuple(s.state for s in self.senders),
            ports={p.name: p.stats() for p in self.ports},
            metadata=metadata,
        )


def run(topology, policy_bindings, duration, window=DEFAULT_WINDOW_S, seed=0, reward_spec=None,
        **options):
    """
    Simulate `topology` with one policy per flow and return the SimTrace.

    `policy_bindings` is either one policy shared by every flow or a sequence
    with one policy per flow.
    """
    # Import here to avoid circular imports
    from cc_env import FlowAgent, default_reward_spec

    if not isinstance(policy_bindings, (list, tuple)):
        policy_bindings = [policy_bindings] * topology.pair_count
    if len(policy_bindings) != topology.pair_count:
        raise ConfigInvalid("policy_bindings",
                            f"{topology.pair_count} flows need a policy each, got {len(policy_bindings)}")
    spec = reward_spec or default_reward_spec(topology, window)
    agents = [FlowAgent(policy, topology, spec) for policy in policy_bindings]
    sim = Simulation(topology, agents, duration, window, seed, **options)
    trace = sim.run()
    trace.metadata["reward_spec"] = spec.as_dict()
    return trace
