"""
Enrolling one edge device
=========================

Stand up the registrar, verifier, tenant and controller around an
in-memory cluster, then let a single agent boot, register and become a
worker node. Services talk JSON over HTTP on 127.0.0.1.
"""

import random

from edgeattest.scenario import Deployment, make_chain, make_reference

rng = random.Random(1)
chain = make_chain(rng)
reference = make_reference(chain, rng)

with Deployment("loopback", poll_interval=1.0) as dep:
    print("registrar at", dep.registrar_address)
    print("verifier  at", dep.verifier_address)

    agent = dep.create_agent("edge-01")
    dep.apply_edge_node(agent, reference)  # what an administrator would kubectl-apply

    agent.boot_and_register(chain, dep.registrar_address)
    agent.wait_for_worker(10)

    node = dep.cluster.get_edge_node("edge-01")
    print("\nstatus:", node.status.phase.value)
    print("workers:", dep.cluster.list_workers())
    print("may create nodes:", dep.cluster.check_access("edge-user-edge-01", "create", "node"))
    print("may delete nodes:", dep.cluster.check_access("edge-user-edge-01", "delete", "node"))

    print("\ntimeline")
    t0 = dep.cluster.events("edge-01")[0].timestamp
    for e in dep.cluster.events("edge-01"):
        print(f"  +{(e.timestamp - t0) * 1000:7.1f} ms  {e.kind.value:<18} {e.detail}")
