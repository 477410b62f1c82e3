"""Latency per flow and flows per second.

Two engines produce the same ready flows: the streaming pipeline (one segment
at a time, what a live monitor would run) and the compiled batch engine for
whole captures. Timings depend on the machine.
"""

import statistics
import time

from earlytls import FlowStore, extract, make_service_specs, process_trace, synth_generate, train
from earlytls.fastpath import run_batch, warm_up

specs = make_service_specs(20, 2, seed=4)
model = train(FlowStore.from_trace(synth_generate(specs, 20, seed=40).pcap, 5).dataset(5))
trace = synth_generate(specs, 50, seed=4)
print(f"{len(trace.flows)} flows to classify")

# %% Streaming: time from the ready trigger to a label
latencies = []


def on_ready(ev):
    t = time.perf_counter_ns()
    model.predict(extract(ev.flow, 5))
    latencies.append((time.perf_counter_ns() - t) / 1e6)


t = time.perf_counter()
process_trace(trace.pcap, 5, on_ready=on_ready)
elapsed = time.perf_counter() - t
print(f"streaming: {statistics.fmean(latencies):.3f} ± {statistics.stdev(latencies):.3f} ms "
      f"per flow, {len(latencies) / elapsed:,.0f} flows/s end to end")

# %% Batch: the first call compiles, later ones are fast
warm_up()
t = time.perf_counter()
batch = run_batch(trace.pcap, 5, model=model)
elapsed = time.perf_counter() - t
print(f"batch: {len(batch) / elapsed:,.0f} flows/s, {batch.n_fallback} flows replayed "
      f"through the reference machine")
agree = sum(model.labels[i] == batch.sni(k) for k, i in enumerate(batch.predictions))
print(f"predicted label equals SNI for {agree}/{len(batch)} flows")
