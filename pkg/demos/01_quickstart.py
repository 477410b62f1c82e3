"""From packets to a service name, step by step.

Builds a small synthetic HTTPS capture, follows one flow through the
reassembler, looks at the features it yields and trains a decision tree on
the lot. Run with ``python demos/01_quickstart.py``.
"""

import numpy as np

from earlytls import (FEATURE_NAMES, FlowStore, TrainParams, extract, make_service_specs,
                      process_trace, serialize, synth_generate, train)

# %% A capture to play with: 6 services, 30 connections each
specs = make_service_specs(6, seed=1)
trace = synth_generate(specs, 30, seed=1)
print(f"{len(trace.flows)} flows, {len(trace.pcap) / 1e6:.2f} MB of pcap")

# %% Stream it through the flow table. A flow is "ready" once it has sent
# d application data packets (or ends earlier with at least one).
result = process_trace(trace.pcap, 5)
print(result.summary())

ev = result.events[0]
flow = ev.flow
print("first ready flow:", flow.oriented(), "reason:", ev.reason)
print("  SNI:", flow.sni)
print("  handshake packets (ts, dir, bytes):", flow.handshake_pkts[:4], "...")
print("  data packets:", flow.appdata_pkts)

# %% 36 numbers per flow, computed from at most d data packets
vec = extract(flow, 5)
for name, value in zip(FEATURE_NAMES, vec):
    if value:
        print(f"  {name:28s} {value:g}")

# %% Label by SNI and train. FlowStore keeps the flows so we can re-extract
# at any smaller d later on.
store = FlowStore.from_trace(trace.pcap, 5)
data = store.dataset(5)
tree = train(data, TrainParams())
print(f"tree: {tree.node_count} nodes, depth {tree.depth}")
pred = np.array(tree.predict_labels(data.X))
print("training accuracy:", np.mean(pred == np.array(store.labels)))

# %% The model is plain text and small enough to read
text = serialize(tree).decode()
print("\n".join(text.splitlines()[:12]))
