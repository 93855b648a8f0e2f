"""Offline verdict engine on a virtual clock, and the live-adapter contract."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Protocol

from .attack import AttackStats, Censor, as_policies
from .capture import Trace
from .core import PASS, Packet, Verdict, VerdictKind
from .flowtable import FlowTable
from .report import RunReport

log = logging.getLogger(__name__)


def shard_of(packet: Packet, shards: int) -> int:
    if shards <= 1 or packet.flow is None:
        return 0
    # Both directions land on one shard so reverse-flow flagging stays local.
    return packet.flow.canonical().stable_hash() % shards


def _run_shard(packets: list, chain, table: FlowTable, instrument: bool):
    censor = Censor(chain, table, instrument=instrument)
    out = []
    for pkt in packets:
        verdict = censor.process(pkt)
        if verdict.kind is VerdictKind.DROP:
            continue
        if verdict.kind is VerdictKind.DELAY:
            pkt = replace(pkt, timestamp_us=pkt.timestamp_us + verdict.delay_ms * 1000)
        out.append(pkt)
    return out, censor


def run_offline(trace: Trace, policy_chain=None, flow_table: Optional[FlowTable] = None, *,
                shards: int = 1, threads: int = 1, instrument: bool = True,
                table_capacity: int = 65536, ssrc_slots: int = 8, seed: Optional[int] = None,
                config: Optional[dict] = None) -> tuple[Trace, RunReport]:
    """Run ``trace`` through the censor and return (output trace, report).

    With ``shards > 1`` flows are partitioned by a direction-independent
    hash and each shard gets its own flow table; results are identical to
    single-shard mode while no table hits its capacity.
    """
    chain = as_policies(policy_chain)
    normalized = trace.normalized()
    if shards <= 1:
        table = flow_table if flow_table is not None else FlowTable(table_capacity, ssrc_slots)
        out, censor = _run_shard(normalized.packets, chain, table, instrument)
        outputs, censors = [out], [censor]
    else:
        if flow_table is not None:
            raise ValueError("a shared flow_table cannot be used with shards > 1")
        parts: list = [[] for _ in range(shards)]
        for pkt in normalized.packets:
            parts[shard_of(pkt, shards)].append(pkt)
        jobs = [(part, chain, FlowTable(table_capacity, ssrc_slots), instrument) for part in parts]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda a: _run_shard(*a), jobs))
        else:
            results = [_run_shard(*a) for a in jobs]
        outputs = [r[0] for r in results]
        censors = [r[1] for r in results]

    merged = [p for part in outputs for p in part]
    merged.sort(key=lambda p: (p.timestamp_us, p.original_index))
    stats = AttackStats()
    for c in censors:
        stats.merge(c.stats)
    if not censors[0].policies:
        stats.policies = []
    report = build_report(len(normalized), len(merged), stats, censors, seed=seed, config=config)
    return normalized.like(merged), report


def build_report(packets_in: int, packets_out: int, stats: AttackStats, censors, *,
                 seed=None, config=None) -> RunReport:
    flows = []
    for censor in censors:
        for key, st in censor.table.items():
            counts = stats.per_flow.get(str(key), {})
            flows.append({
                "flow": str(key),
                "webrtc_flagged": st.webrtc_flagged,
                "flagged_at_us": st.flagged_at,
                "packets_seen": counts.get("packets_seen", 0),
                "packets_dropped": counts.get("packets_dropped", 0),
                "state_bytes": st.serialized_size(),
            })
    flows.sort(key=lambda f: f["flow"])
    totals = {
        "packets_in": packets_in,
        "packets_out": packets_out,
        "packets_dropped": stats.packets_dropped,
        "packets_delayed": stats.packets_delayed,
        "conserved": packets_in == packets_out + stats.packets_dropped,
    }
    return RunReport(kind="attack", seed=seed, config=config or {}, totals=totals,
                     stats=stats.to_dict(), flows=flows)


# --- live adapter ---------------------------------------------------------


class HostUnavailableError(RuntimeError):
    pass


class HostHook(Protocol):
    """What a host packet-verdict facility (netfilter queue, divert socket, ...) must offer."""

    supports_delay: bool

    def open(self) -> None: ...

    def reinject(self, packet: Packet, delay_ms: int) -> None: ...

    def close(self) -> None: ...


@dataclass
class LiveStats:
    verdicts: int = 0
    overruns: int = 0
    delay_downgrades: int = 0
    max_latency_ms: float = 0.0


class LiveAdapter:
    """Synchronous per-packet verdicts for a host hook.

    ``on_packet`` returns before the next packet is accepted, which gives the
    per-flow ordering guarantee; decisions take the same path as offline.
    """

    def __init__(self, chain, host: HostHook, budget_ms: float = 1.0, table: Optional[FlowTable] = None):
        self.censor = Censor(chain, table)
        self.host = host
        self.budget_ms = budget_ms
        self.stats = LiveStats()
        self._lock = threading.Lock()
        self._started = False
        self._warned = False

    def start(self) -> None:
        try:
            self.host.open()
        except (OSError, HostUnavailableError) as exc:
            raise HostUnavailableError(f"host packet hook unavailable: {exc}") from exc
        self._started = True

    def stop(self) -> None:
        if self._started:
            self.host.close()
            self._started = False

    def on_packet(self, packet: Packet) -> Verdict:
        if not self._started:
            raise HostUnavailableError("adapter not started")
        with self._lock:
            t0 = time.perf_counter()
            verdict = self.censor.process(packet)
            if verdict.kind is VerdictKind.DELAY:
                if self.host.supports_delay:
                    self.host.reinject(packet, verdict.delay_ms)
                else:
                    if not self._warned:
                        log.warning("host cannot delay packets; Delay verdicts downgraded to Pass")
                        self._warned = True
                    self.stats.delay_downgrades += 1
                    verdict = PASS
            elapsed = (time.perf_counter() - t0) * 1000.0
            self.stats.verdicts += 1
            self.stats.max_latency_ms = max(self.stats.max_latency_ms, elapsed)
            if elapsed > self.budget_ms:
                self.stats.overruns += 1
            return verdict


class MemoryHost:
    """In-process host hook; records re-injections. Used for replay and tests."""

    def __init__(self, supports_delay: bool = True, available: bool = True):
        self.supports_delay = supports_delay
        self.available = available
        self.reinjected: list = []
        self.opened = False

    def open(self) -> None:
        if not self.available:
            raise HostUnavailableError("memory host disabled")
        self.opened = True

    def reinject(self, packet: Packet, delay_ms: int) -> None:
        self.reinjected.append((packet.timestamp_us + delay_ms * 1000, packet))

    def close(self) -> None:
        self.opened = False
