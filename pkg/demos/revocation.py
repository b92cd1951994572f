"""
Revoking a compromised node
===========================

A device enrolls cleanly, then reboots into an unapproved kernel. The
verifier's next poll fails, the status flips to Unattested, and the
controller strips the node's permissions. A local webhook receiver shows
the second notification channel.
"""

import json
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from edgeattest.scenario import Deployment, make_chain, make_reference, with_unknown_kernel

received = []


class Hook(BaseHTTPRequestHandler):
    def do_POST(self):
        received.append(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
        self.send_response(204)
        self.end_headers()

    def log_message(self, *a):
        pass


hook = ThreadingHTTPServer(("127.0.0.1", 0), Hook)
threading.Thread(target=hook.serve_forever, daemon=True).start()
url = f"http://127.0.0.1:{hook.server_address[1]}/revoked"

rng = random.Random(2)
chain = make_chain(rng)
POLL = 0.5

with Deployment(
    "loopback", poll_interval=POLL, verifier_options={"channels": ("native", "webhook"), "webhook_url": url}
) as dep:
    agent = dep.create_agent("edge-01")
    dep.apply_edge_node(agent, make_reference(chain, rng))
    agent.boot_and_register(chain, dep.registrar_address)
    agent.wait_for_worker(10)
    user = dep.controller.user_name("edge-01")
    print("enrolled; may list pods:", dep.cluster.check_access(user, "list", "pod"))

    t = time.time()
    agent.reboot(with_unknown_kernel(chain, rng))
    while dep.cluster.get_edge_node("edge-01").status.phase.value != "Unattested":
        time.sleep(0.01)
    while dep.cluster.has_rolebinding(dep.controller.binding_name("edge-01")):
        time.sleep(0.01)
    print(f"detected after {time.time() - t:.2f} s (poll every {POLL} s)")
    print("status message:", dep.cluster.get_edge_node("edge-01").status.message)
    print("may list pods:", dep.cluster.check_access(user, "list", "pod"))

hook.shutdown()
print("webhook got:", received)
