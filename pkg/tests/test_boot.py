import itertools
import json
import os
import random

import pytest

from edgeattest.boot import (
    STAGES,
    AttestationVerdict,
    BootComponent,
    BootEventLog,
    LogEntry,
    Reason,
    ReferenceState,
    Stage,
    check_reference,
    parse_reference_state,
    replay_event_log,
    serialize_reference_state,
    simulate_boot,
)
from edgeattest.errors import BootOrderError, SchemaError
from edgeattest.tpm import PcrBank, SimulatedTPM

from conftest import oracle_chain, sha256


def comp(stage, content):
    return BootComponent.from_content(stage, f"{Stage(stage).value}-{content[:4].hex()}", content)


def test_boot_four_stages():
    c, f, b, k = (os.urandom(40) for _ in range(4))
    chain = [comp("crtm", c), comp("firmware", f), comp("bootloader", b), comp("kernel", k)]
    bank, log = simulate_boot(chain, PcrBank())
    assert len(log) == 4
    assert bank[0] == sha256(sha256(bytes(32) + sha256(c)) + sha256(f))
    assert bank[4] == oracle_chain([sha256(b)])
    assert bank[5] == oracle_chain([sha256(k)])
    assert [e.pcr for e in log] == [0, 0, 4, 5]


def test_boot_empty_and_out_of_order():
    with pytest.raises(BootOrderError):
        simulate_boot([], PcrBank())
    with pytest.raises(BootOrderError):
        simulate_boot([comp("kernel", b"k"), comp("crtm", b"c")], PcrBank())


def test_boot_deterministic(chain):
    b1, l1 = simulate_boot(chain, PcrBank())
    b2, l2 = simulate_boot(chain, PcrBank())
    assert b1.registers == b2.registers and l1 == l2


def test_replay(chain):
    bank, log = simulate_boot(chain, PcrBank())
    assert replay_event_log(log) == bank.snapshot()
    assert replay_event_log(BootEventLog()) == {i: bytes(32) for i in range(24)}


def test_replay_flipped_digest(chain):
    bank, log = simulate_boot(chain, PcrBank())
    entry = log.entries[2]
    bad = bytearray(entry.digest)
    bad[0] ^= 0xFF
    tampered = BootEventLog(list(log.entries))
    tampered.entries[2] = LogEntry(entry.stage, entry.name, bytes(bad), entry.pcr)
    expected = oracle_chain([bytes(bad)])  # bootloader is the only extend into PCR 4
    replayed = replay_event_log(tampered)
    assert replayed[4] == expected
    assert replayed != bank.snapshot()


def test_replay_malformed():
    with pytest.raises(SchemaError):
        replay_event_log(BootEventLog([LogEntry(Stage.CRTM, "x", b"short", 0)]))
    with pytest.raises(SchemaError):
        BootEventLog.from_json([{"stage": "crtm", "name": "x", "digest": "zz", "pcr": 0}])


def test_event_log_json_round_trip(chain):
    _, log = simulate_boot(chain, PcrBank())
    data = json.loads(json.dumps(log.to_json()))
    assert BootEventLog.from_json(data) == log
    assert set(data[0]) == {"stage", "name", "digest", "pcr"}


# -- appraisal ---------------------------------------------------------------


def attest(manufacturer_ca, chain, reference, nonce=None):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    _, log = simulate_boot(chain, t.bank)
    nonce = nonce or os.urandom(32)
    return t, log, t.quote(nonce, reference.pcr_selection), nonce


def test_check_reference_pass(manufacturer_ca, chain, reference):
    t, log, q, nonce = attest(manufacturer_ca, chain, reference)
    verdict = check_reference(log, q, reference, t.ak.public, t.identity.ek_public, nonce)
    assert verdict == AttestationVerdict.ok()


def test_check_reference_unknown_kernel(manufacturer_ca, chain, reference):
    bad = [comp("kernel", b"custom kernel") if c.stage is Stage.KERNEL else c for c in chain]
    t, log, q, nonce = attest(manufacturer_ca, bad, reference)
    verdict = check_reference(log, q, reference, t.ak.public, t.identity.ek_public, nonce)
    assert not verdict.passed
    assert verdict.failing_stage is Stage.KERNEL
    assert verdict.reason is Reason.DIGEST_NOT_ALLOWED
    assert verdict.message == "digest-not-allowed:kernel"


def test_check_reference_log_swapped_after_quote(manufacturer_ca, chain, reference):
    t, log, q, nonce = attest(manufacturer_ca, chain, reference)
    kernel_idx = next(i for i, e in enumerate(log.entries) if e.stage is Stage.KERNEL)
    other = next(d for d in reference.allowed[Stage.KERNEL] if d != log.entries[kernel_idx].digest)
    e = log.entries[kernel_idx]
    tampered = BootEventLog(list(log.entries))
    tampered.entries[kernel_idx] = LogEntry(e.stage, e.name, other, e.pcr)
    # oracle: the tampered log's PCR 5 no longer matches what was quoted
    assert oracle_chain([other]) != t.bank[5]
    verdict = check_reference(tampered, q, reference, t.ak.public, t.identity.ek_public, nonce)
    assert verdict.reason is Reason.LOG_REPLAY_MISMATCH


def test_check_reference_order_of_checks(manufacturer_ca, chain, reference):
    bad = [comp("kernel", b"custom") if c.stage is Stage.KERNEL else c for c in chain]
    t, log, q, nonce = attest(manufacturer_ca, bad, reference)
    other = SimulatedTPM("edge-02", manufacturer_ca)
    # signature beats everything else
    v = check_reference(log, q, reference, other.ak.public, t.identity.ek_public, os.urandom(32))
    assert v.reason is Reason.BAD_SIGNATURE
    # AK not bound to the EK we expect
    v = check_reference(log, q, reference, t.ak.public, other.identity.ek_public, nonce)
    assert v.reason is Reason.BAD_SIGNATURE
    # stale nonce beats replay and golden-value failures
    v = check_reference(log, q, reference, t.ak.public, t.identity.ek_public, os.urandom(32))
    assert v.reason is Reason.STALE_NONCE
    # wrong PCR selection
    q2 = t.quote(nonce, [0, 4])
    v = check_reference(log, q2, reference, t.ak.public, t.identity.ek_public, nonce)
    assert v.reason is Reason.PCR_MISMATCH


def test_verdict_invariant():
    with pytest.raises(ValueError):
        AttestationVerdict(True, Stage.KERNEL, None)
    with pytest.raises(ValueError):
        AttestationVerdict(False)


def test_monotone_in_allowed(manufacturer_ca, chain, reference):
    bad = [comp("kernel", b"custom") if c.stage is Stage.KERNEL else c for c in chain]
    for components in (chain, bad):
        t, log, q, nonce = attest(manufacturer_ca, components, reference)
        before = check_reference(log, q, reference, t.ak.public, t.identity.ek_public, nonce)
        for stage in STAGES:
            bigger = reference.with_allowed(stage, [os.urandom(32)])
            after = check_reference(log, q, bigger, t.ak.public, t.identity.ek_public, nonce)
            assert not (before.passed and not after.passed)
            assert after == check_reference(log, q, bigger, t.ak.public, t.identity.ek_public, nonce)


def test_exhaustive_small_sets(manufacturer_ca):
    # Two candidate digests per stage, the reference allows the first only;
    # every chain passes iff it picks only allowed candidates.
    rng = random.Random(7)
    cands = {s: [comp(s, rng.randbytes(16)), comp(s, rng.randbytes(16))] for s in STAGES}
    reference = ReferenceState({s: {cands[s][0].content_digest} for s in STAGES})
    t = SimulatedTPM("edge-01", manufacturer_ca)
    for picks in itertools.product([0, 1], repeat=len(STAGES)):
        chain = [cands[s][p] for s, p in zip(STAGES, picks)]
        t.power_cycle()
        _, log = simulate_boot(chain, t.bank)
        nonce = os.urandom(32)
        v = check_reference(log, t.quote(nonce, reference.pcr_selection), reference, t.ak.public, t.identity.ek_public, nonce)
        assert v.passed == (sum(picks) == 0)
        if not v.passed:
            assert v.failing_stage is STAGES[picks.index(1)]


# -- reference state JSON ----------------------------------------------------


def test_reference_round_trip(rng):
    ref = ReferenceState({s: {rng.randbytes(32), rng.randbytes(32)} for s in STAGES}, (0, 4, 5, 7))
    data = serialize_reference_state(ref)
    assert parse_reference_state(data) == ref
    assert json.loads(data)["pcr_selection"] == [0, 4, 5, 7]


def _doc(rng):
    return {"allowed": {s.value: [rng.randbytes(32).hex()] for s in STAGES}, "pcr_selection": [0, 4, 5, 7]}


def test_reference_documented_schema_parses(rng):
    ref = parse_reference_state(json.dumps(_doc(rng)))
    assert ref.pcr_selection == (0, 4, 5, 7)


def test_reference_missing_stage(rng):
    doc = _doc(rng)
    del doc["allowed"]["kernel"]
    with pytest.raises(SchemaError, match="kernel"):
        parse_reference_state(json.dumps(doc))


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda d: d["allowed"]["crtm"].__setitem__(0, "abc"), "odd hex length"),
        (lambda d: d["allowed"]["crtm"].__setitem__(0, "AB" * 32), "lowercase"),
        (lambda d: d["allowed"]["crtm"].__setitem__(0, "ab" * 31), "32-byte"),
        (lambda d: d.__setitem__("extra", 1), "unknown field"),
        (lambda d: d["allowed"].__setitem__("initrd", ["00" * 32]), "unknown stage"),
        (lambda d: d.__setitem__("pcr_selection", []), "pcr_selection"),
        (lambda d: d["allowed"].__setitem__("keys", []), "allowed.keys"),
    ],
)
def test_reference_strict(rng, mutate, fragment):
    doc = _doc(rng)
    mutate(doc)
    with pytest.raises(SchemaError, match=fragment):
        parse_reference_state(json.dumps(doc))
