"""
What goes over the wire
=======================

Agents broadcast a small place-recognition request every frame and answer
with a full state snapshot only when a keyframe matches.  The naive
alternative ships the snapshot every frame.
"""

# %%
from collabvio.comms import REQUEST_SIZE, message_size
from collabvio.harness import RunConfig, bandwidth_report, run
from collabvio.sim import Scenario, builtin_scenario

# A request is a 2048-byte binary VLAD plus a 24-byte header.
print("RequestUAV bytes:", REQUEST_SIZE)

# A snapshot with an 8-pose window, 10 SLAM features and 40 five-view tracks.
d = 15 + 6 * 8 + 3 * 10
print("MessageUAV bytes:", message_size(8, 10, d, [5] * 40))

# %%
# Compare the two policies on a short version of the overlapping squares.
spec = builtin_scenario("overlap_square").to_dict()
spec["duration"] = 5.0
scen = Scenario.from_dict(spec)

protocol = run(RunConfig(scen, mode="collaborative")).data
naive = run(RunConfig(scen, mode="naive")).data
table = bandwidth_report(protocol, naive)

for name in ("protocol", "naive"):
    for kind, v in table[name].items():
        print(f"{name:9s} {kind:8s} {v['count']:5d} messages {v['bytes'] / 1e6:8.2f} MB")
print("reduction:", table["reduction_pct"])
