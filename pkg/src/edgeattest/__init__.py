"""Remotely attested enrollment of edge devices as orchestrator workers.

Simulated TPM devices boot, register, get boot-attested, and receive unique
revocable cluster credentials; continuous attestation grants and revokes
their permissions.
"""

from .agent import AgentConfig, EdgeAgent
from .boot import (
    AttestationVerdict,
    BootComponent,
    BootEventLog,
    Reason,
    ReferenceState,
    Stage,
    check_reference,
    parse_reference_state,
    replay_event_log,
    serialize_reference_state,
    simulate_boot,
)
from .cluster import ClusterEvent, EdgeNodeResource, EventKind, MockCluster, NodeStatus, Phase
from .controller import Controller, ControllerConfig
from .registrar import DeviceRecord, Registrar
from .scenario import Deployment, Scenario, ScenarioConfig, ScenarioReport, emit_report, run_scenario
from .tenant import KeySplit, Tenant, split_key
from .tpm import PcrBank, Quote, SimulatedTPM, pcr_extend, pcr_reset
from .verifier import Verifier

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AttestationVerdict",
    "BootComponent",
    "BootEventLog",
    "ClusterEvent",
    "Controller",
    "ControllerConfig",
    "Deployment",
    "DeviceRecord",
    "EdgeAgent",
    "EdgeNodeResource",
    "EventKind",
    "KeySplit",
    "MockCluster",
    "NodeStatus",
    "PcrBank",
    "Phase",
    "Quote",
    "Reason",
    "ReferenceState",
    "Registrar",
    "Scenario",
    "ScenarioConfig",
    "ScenarioReport",
    "SimulatedTPM",
    "Stage",
    "Tenant",
    "Verifier",
    "check_reference",
    "emit_report",
    "parse_reference_state",
    "pcr_extend",
    "pcr_reset",
    "replay_event_log",
    "run_scenario",
    "serialize_reference_state",
    "simulate_boot",
    "split_key",
]
