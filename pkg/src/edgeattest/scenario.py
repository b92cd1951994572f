"""Wire every service together and run the enrollment scenarios end to end.

``Deployment`` stands up a cluster, registrar, verifier, tenant and
controller on one network; ``run_scenario`` drives devices through one of
four scripted scenarios and collects timings and outcomes in a report.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

from .agent import AgentConfig, EdgeAgent
from .boot import STAGES, BootComponent, ReferenceState, Stage
from .cluster import EventKind, MockCluster, Phase
from .controller import Controller, ControllerConfig
from .crypto import CertificateAuthority
from .errors import EdgeAttestError
from .registrar import Registrar, RegistrarClient
from .tenant import Tenant, TenantClient
from .transport import InProcessNetwork, LoopbackNetwork
from .verifier import Verifier

logger = logging.getLogger(__name__)

DEFAULT_ROLE_RULES: tuple[tuple[str, str], ...] = (
    ("create", "node"),
    ("get", "node"),
    ("get", "pod"),
    ("list", "pod"),
    ("update", "pod"),
)

HAPPY_TIMELINE = (
    EventKind.REGISTERED,
    EventKind.CREDENTIALS_ISSUED,
    EventKind.PAYLOAD_DELIVERED,
    EventKind.ATTESTED,
    EventKind.WORKER_ENROLLED,
)


class Scenario(str, enum.Enum):
    HAPPY_PATH = "happy-path"
    BAD_INITIAL_BOOT = "bad-initial-boot"
    COMPROMISE_AFTER_ATTEST = "compromise-after-attest"
    BENCHMARK = "benchmark"


@dataclass
class ScenarioConfig:
    scenario: Scenario = Scenario.HAPPY_PATH
    device_count: int = 1
    poll_interval: float = 2.0
    worker_startup_delay: float = 0.0
    repetitions: int = 1
    seed: int = 0
    transport: str = "loopback"
    timeout: float = 60.0
    registration_backoff: float = 0.5
    controller_backoff: float = 0.5

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.poll_interval <= 0:
            raise ValueError("poll interval must be positive")
        if self.device_count < 1:
            raise ValueError("device count must be >= 1")
        if self.transport not in ("loopback", "inproc"):
            raise ValueError(f"unknown transport {self.transport!r}")


# -- boot chains ----------------------------------------------------------


def make_chain(rng: random.Random, tag: str = "") -> list[BootComponent]:
    """One component per stage with seeded pseudo-random content."""
    return [
        BootComponent.from_content(stage, f"{stage.value}{tag}", rng.randbytes(64)) for stage in STAGES
    ]


def make_reference(chain: list[BootComponent], rng: random.Random, extra_per_stage: int = 1) -> ReferenceState:
    allowed: dict[Stage, set[bytes]] = {s: set() for s in STAGES}
    for comp in chain:
        allowed[comp.stage].add(comp.content_digest)
    for stage in STAGES:
        for _ in range(extra_per_stage):
            allowed[stage].add(BootComponent.from_content(stage, "alt", rng.randbytes(64)).content_digest)
    return ReferenceState({s: frozenset(v) for s, v in allowed.items()})


def with_unknown_kernel(chain: list[BootComponent], rng: random.Random) -> list[BootComponent]:
    return [
        BootComponent.from_content(Stage.KERNEL, "kernel-custom", b"unapproved" + rng.randbytes(64))
        if c.stage is Stage.KERNEL
        else c
        for c in chain
    ]


# -- deployment -------------------------------------------------------------


class Deployment:
    """All cloud-side services on one network, plus a way to add devices."""

    def __init__(
        self,
        transport: str = "inproc",
        poll_interval: float = 2.0,
        worker_startup_delay: float = 0.0,
        registration_backoff: float = 0.5,
        controller_config: ControllerConfig | None = None,
        verifier_options: dict | None = None,
    ):
        self.network = LoopbackNetwork() if transport == "loopback" else InProcessNetwork()
        self.manufacturer_ca = CertificateAuthority("simulated-tpm-manufacturer")
        self.cluster = MockCluster()
        self.registrar = Registrar(self.manufacturer_ca, self.cluster)
        self.registrar_address = self.network.serve(self.registrar)
        self.registrar.start()
        self.verifier = Verifier(self.cluster, self.network, poll_interval=poll_interval, **(verifier_options or {}))
        self.verifier_address = self.network.serve(self.verifier)
        self.tenant = Tenant(self.network, self.registrar_address, self.verifier_address, self.cluster)
        self.tenant_address = self.network.serve(self.tenant)
        self.controller = Controller(
            self.cluster,
            RegistrarClient(self.network.connect(self.registrar_address)),
            TenantClient(self.network.connect(self.tenant_address)),
            controller_config or ControllerConfig(backoff=0.5),
        )
        self.controller.start()
        self.agent_config = AgentConfig(
            registration_backoff=registration_backoff, worker_startup_delay=worker_startup_delay
        )
        self.agents: dict[str, EdgeAgent] = {}

    def create_agent(self, device_id: str) -> EdgeAgent:
        agent = EdgeAgent(device_id, self.manufacturer_ca, self.cluster, AgentConfig(**asdict(self.agent_config)))
        agent.listen(self.network)
        self.agents[device_id] = agent
        return agent

    def apply_edge_node(self, agent: EdgeAgent, reference: ReferenceState, role_rules=DEFAULT_ROLE_RULES):
        return self.cluster.apply_edge_node(agent.device_id, agent.ek_cert, reference, agent.address, role_rules)

    def close(self) -> None:
        self.verifier.stop()
        self.controller.stop()
        self.registrar.stop()
        self.network.close()

    def __enter__(self) -> "Deployment":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def wait_until(pred: Callable[[], bool], timeout: float, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while True:
        if pred():
            return True
        if time.monotonic() >= deadline:
            return False
        time.sleep(interval)


# -- report ---------------------------------------------------------------

METRICS = ("time_to_registered", "time_to_attested", "time_to_revoked", "enrollment_total", "revocation_lag", "run_wall")


@dataclass
class RunRecord:
    run: int
    device: str
    metrics: dict[str, float | None]
    final_phase: str
    final_message: str
    executed: bool
    worker_enrolled: bool
    share_deliveries: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass
class ScenarioReport:
    scenario: str
    config: dict
    runs: list[RunRecord]
    aggregate: dict[str, dict[str, float]]
    event_timeline: list[dict]
    verdicts: list[dict]

    @property
    def ok(self) -> bool:
        return bool(self.runs) and all(r.ok for r in self.runs)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config": self.config,
            "ok": self.ok,
            "runs": [asdict(r) for r in self.runs],
            "aggregate": self.aggregate,
            "event_timeline": self.event_timeline,
            "verdicts": self.verdicts,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioReport":
        return cls(
            data["scenario"],
            data["config"],
            [RunRecord(**r) for r in data["runs"]],
            data["aggregate"],
            data["event_timeline"],
            data["verdicts"],
        )


def aggregate(runs: list[RunRecord]) -> dict[str, dict[str, float]]:
    out = {}
    for metric in METRICS:
        values = [r.metrics[metric] for r in runs if r.metrics.get(metric) is not None]
        if not values:
            continue
        out[metric] = {
            "mean": statistics.fmean(values),
            "std": statistics.stdev(values) if len(values) > 1 else 0.0,
            "n": len(values),
        }
    return out


def emit_report(report: ScenarioReport, format: str = "json") -> bytes:
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True).encode()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")
    passed = sum(r.ok for r in report.runs)
    lines = [
        f"scenario: {report.scenario}",
        f"runs: {passed}/{len(report.runs)} satisfied postconditions",
        "",
        f"{'metric':<22}{'mean (s)':>12}{'std (s)':>12}{'n':>6}",
        "-" * 52,
    ]
    for metric, agg in report.aggregate.items():
        lines.append(f"{metric:<22}{agg['mean']:>12.4f}{agg['std']:>12.4f}{agg['n']:>6d}")
    lines.append("")
    for metric, agg in report.aggregate.items():
        lines.append(f"{metric}: {agg['mean']:.3f} s ± {agg['std']:.3f} s")
    failures = [f"run {r.run} {r.device}: {f}" for r in report.runs for f in r.failures]
    if failures:
        lines += ["", "failures:"] + [f"  {f}" for f in failures]
    return ("\n".join(lines) + "\n").encode()


# -- scenarios ------------------------------------------------------------


def _first(events, kind: EventKind) -> float | None:
    for e in events:
        if e.kind is kind:
            return e.timestamp
    return None


def _in_order(events, kinds) -> bool:
    stamps = [_first(events, k) for k in kinds]
    return None not in stamps and all(a < b for a, b in zip(stamps, stamps[1:]))


def _run_once(config: ScenarioConfig, run: int) -> tuple[list[RunRecord], list[dict]]:
    rng = random.Random(config.seed * 1_000_003 + run)
    scenario = config.scenario
    started_run = time.time()
    with Deployment(
        config.transport,
        config.poll_interval,
        config.worker_startup_delay,
        config.registration_backoff,
        ControllerConfig(backoff=config.controller_backoff),
    ) as dep:
        cluster = dep.cluster
        devices = [f"edge-{i + 1:02d}" for i in range(config.device_count)]
        chains, agents = {}, {}
        for name in devices:
            chain = make_chain(rng)
            reference = make_reference(chain, rng)
            chains[name] = chain
            agents[name] = dep.create_agent(name)
            dep.apply_edge_node(agents[name], reference)
            if scenario is Scenario.BAD_INITIAL_BOOT:
                chains[name] = with_unknown_kernel(chain, rng)

        errors: dict[str, str] = {}

        def start(name: str) -> None:
            try:
                agents[name].boot_and_register(chains[name], dep.registrar_address)
            except EdgeAttestError as e:
                errors[name] = f"agent startup failed: {e}"

        threads = [threading.Thread(target=start, args=(n,)) for n in devices]
        for t in threads:
            t.start()
        for t in threads:
            t.join(config.timeout)

        def revoked(name: str) -> bool:
            return _first(cluster.events(name), EventKind.PERMISSIONS_REVOKED) is not None

        def enrolled(name: str) -> bool:
            return agents[name].state.worker_enrolled and cluster.get_edge_node(name).status.phase is Phase.ATTESTED

        compromised_at: dict[str, float] = {}
        deadline = config.timeout
        if scenario is Scenario.BAD_INITIAL_BOOT:
            wait_until(lambda: all(revoked(n) for n in devices), deadline)
        else:
            wait_until(lambda: all(enrolled(n) or agents[n].state.worker_error for n in devices), deadline)
        if scenario is Scenario.COMPROMISE_AFTER_ATTEST:
            # Land the reboot at an arbitrary phase of the poll cycle.
            time.sleep(rng.uniform(0, config.poll_interval))
            for name in devices:
                if enrolled(name):
                    bad = with_unknown_kernel(chains[name], rng)
                    compromised_at[name] = time.time()
                    agents[name].reboot(bad)
            wait_until(lambda: all(revoked(n) for n in compromised_at), deadline)
        wall = time.time() - started_run

        records = []
        for name in devices:
            agent = agents[name]
            events = cluster.events(name)
            res = cluster.get_edge_node(name)
            t0 = agent.timings.get("started", started_run)
            unattested = _first(events, EventKind.ATTESTATION_FAILED)
            revoked_at = _first(events, EventKind.PERMISSIONS_REVOKED)
            metrics = {
                "time_to_registered": _delta(t0, _first(events, EventKind.REGISTERED)),
                "time_to_attested": _delta(t0, _first(events, EventKind.ATTESTED)),
                "time_to_revoked": _delta(compromised_at.get(name), unattested) if name in compromised_at else None,
                "enrollment_total": _delta(t0, _first(events, EventKind.WORKER_ENROLLED)),
                "revocation_lag": _delta(unattested, revoked_at),
                "run_wall": wall,
            }
            rec = RunRecord(
                run,
                name,
                metrics,
                res.status.phase.value,
                res.status.message,
                agent.state.executed,
                agent.state.worker_enrolled,
                agent.share_deliveries,
            )
            if name in errors:
                rec.failures.append(errors[name])
            user = dep.controller.user_name(name)
            rules = res.spec.role_rules
            if scenario in (Scenario.HAPPY_PATH, Scenario.BENCHMARK):
                _check_happy(rec, events, cluster, user, rules, name)
            elif scenario is Scenario.BAD_INITIAL_BOOT:
                _check_bad_boot(rec, events, cluster, user, rules)
            else:
                _check_compromise(rec, events, cluster, user, rules, config.poll_interval)
            records.append(rec)

        timeline = [dict(e.to_dict(), t=e.timestamp, run=run) for e in cluster.events()]
    return records, timeline


def _delta(start: float | None, end: float | None) -> float | None:
    if start is None or end is None:
        return None
    return end - start


def _check_happy(rec: RunRecord, events, cluster: MockCluster, user: str, rules, name: str) -> None:
    if rec.final_phase != Phase.ATTESTED.value:
        rec.failures.append(f"final status {rec.final_phase}, expected Attested")
    if not rec.executed:
        rec.failures.append("agent did not execute the payload")
    if name not in cluster.list_workers():
        rec.failures.append("worker not enrolled")
    if not _in_order(events, HAPPY_TIMELINE):
        rec.failures.append(f"timeline out of order: {[e.kind.value for e in events]}")
    if not all(cluster.check_access(user, v, k) for v, k in rules):
        rec.failures.append("attested user lacks its role rules")


def _denied_everything(cluster: MockCluster, user: str, rules) -> bool:
    return not any(cluster.check_access(user, v, k) for v, k in rules)


def _check_bad_boot(rec: RunRecord, events, cluster: MockCluster, user: str, rules) -> None:
    if rec.final_phase != Phase.UNATTESTED.value:
        rec.failures.append(f"final status {rec.final_phase}, expected Unattested")
    if rec.final_message != "digest-not-allowed:kernel":
        rec.failures.append(f"unexpected failure reason {rec.final_message!r}")
    if rec.share_deliveries or rec.executed:
        rec.failures.append("agent received the second key share")
    if _first(events, EventKind.WORKER_ENROLLED) is not None:
        rec.failures.append("worker enrolled despite failed attestation")
    if _first(events, EventKind.ATTESTATION_FAILED) is None or _first(events, EventKind.PERMISSIONS_REVOKED) is None:
        rec.failures.append("missing AttestationFailed/PermissionsRevoked events")
    if not _denied_everything(cluster, user, rules):
        rec.failures.append("revoked user still has access")


def _check_compromise(rec: RunRecord, events, cluster: MockCluster, user: str, rules, poll_interval: float) -> None:
    if rec.final_phase != Phase.UNATTESTED.value:
        rec.failures.append(f"final status {rec.final_phase}, expected Unattested")
    enrolled_at = _first(events, EventKind.WORKER_ENROLLED)
    failed_at = _first(events, EventKind.ATTESTATION_FAILED)
    if enrolled_at is None or failed_at is None or not enrolled_at < failed_at:
        rec.failures.append("WorkerEnrolled does not precede AttestationFailed")
    if not _denied_everything(cluster, user, rules):
        rec.failures.append("revoked user still has access")
    detect = rec.metrics["time_to_revoked"]
    if detect is None or detect > 2 * poll_interval:
        rec.failures.append(f"detection took {detect}s, bound is {2 * poll_interval}s")


def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    runs: list[RunRecord] = []
    timeline: list[dict] = []
    verdicts: list[dict] = []
    scenario = config.scenario
    for run in range(config.repetitions):
        records, events = _run_once(config, run)
        runs += records
        timeline += events
        verdicts.append({r.device: {"phase": r.final_phase, "message": r.final_message} for r in records})
        logger.info("%s run %d: %s", scenario.value, run, "ok" if all(r.ok for r in records) else "FAILED")
    cfg = asdict(config)
    cfg["scenario"] = scenario.value
    return ScenarioReport(scenario.value, cfg, runs, aggregate(runs), timeline, verdicts)
