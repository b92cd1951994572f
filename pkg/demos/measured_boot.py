"""
Measured boot and golden values
===============================

Boot a simulated device, replay its event log, and appraise a quote
against an allowlist. Then swap in an unknown kernel and watch the
appraisal name the stage that broke.
"""

import os
import random

from edgeattest.crypto import CertificateAuthority
from edgeattest.tpm import SimulatedTPM
from edgeattest.boot import check_reference, replay_event_log, simulate_boot
from edgeattest.scenario import make_chain, make_reference, with_unknown_kernel

rng = random.Random(0)
ca = CertificateAuthority("demo-tpm-vendor")
tpm = SimulatedTPM("edge-01", ca)

# a five-stage chain: crtm, firmware, bootloader, kernel, keys
chain = make_chain(rng)
for c in chain:
    print(f"{c.stage.value:<11} {c.name:<16} {c.content_digest.hex()[:16]}...")

_, log = simulate_boot(chain, tpm.bank)

# the log alone reproduces the registers
replayed = replay_event_log(log)
assert replayed == tpm.bank.snapshot()
print("\nPCR 5 (kernel):", replayed[5].hex())

# golden values: the real digests plus one spare per stage
reference = make_reference(chain, rng)
nonce = os.urandom(32)
q = tpm.quote(nonce, reference.pcr_selection)
print("honest boot   ->", check_reference(log, q, reference, tpm.ak.public, tpm.identity.ek_public, nonce).message)

# same device, kernel nobody approved
tpm.power_cycle()
_, bad_log = simulate_boot(with_unknown_kernel(chain, rng), tpm.bank)
nonce = os.urandom(32)
q = tpm.quote(nonce, reference.pcr_selection)
print("custom kernel ->", check_reference(bad_log, q, reference, tpm.ak.public, tpm.identity.ek_public, nonce).message)

# a quote over an old nonce is stale even when the boot is fine
print("replayed quote ->", check_reference(bad_log, q, reference, tpm.ak.public, tpm.identity.ek_public, os.urandom(32)).message)
