"""
Scenario runs and reports
=========================

The same runner behind ``edgeattest run``. Ten happy-path repetitions
with a 2 s simulated worker start, summarised as a table; the JSON form
carries every run, the event timeline and the verdicts.
"""

import json

from edgeattest.scenario import Scenario, ScenarioConfig, emit_report, run_scenario

config = ScenarioConfig(Scenario.BENCHMARK, repetitions=10, worker_startup_delay=2.0, poll_interval=1.0)
report = run_scenario(config)
print(emit_report(report, "table").decode())

doc = json.loads(emit_report(report, "json"))
gap = doc["aggregate"]["enrollment_total"]["mean"] - doc["aggregate"]["time_to_attested"]["mean"]
print(f"worker start accounts for {gap:.2f} s of enrollment")
print("events in run 0:", [e["kind"] for e in doc["event_timeline"] if e["run"] == 0])
