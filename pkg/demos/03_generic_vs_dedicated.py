"""One model for everyone, or one model per client population?

The synthetic generator can give every service several "archetypes", for
example a browser and a mobile app talking to the same host with different
TLS stacks and traffic shapes. Here we compare a pooled model against models
trained on a single archetype.
"""

from earlytls import (ExperimentConfig, FlowStore, make_service_specs, run_generic_vs_dedicated,
                      synth_generate)

specs = make_service_specs(5, 3, seed=0)
trace = synth_generate(specs, 50, seed=0)
archetype = {f.manifest_key: f.archetype for f in trace.flows}
store = FlowStore.from_trace(trace.pcap, 5)

parts = {}
for name in sorted(set(archetype.values())):
    parts[name] = store.select(lambda lf, name=name: archetype[lf.flow.oriented()] == name)
    print(f"{name}: {len(parts[name])} flows")

# %% Rows are training sets ("pooled" uses all of them), columns are test sets
result = run_generic_vs_dedicated(parts, ExperimentConfig(seed=0))
print(result.format())

# A dedicated model does about as well as the pooled one on its own
# population and much worse on the others.
for a in parts:
    others = [b for b in parts if b != a]
    cross = sum(result.cell(a, b) for b in others) / len(others)
    print(f"{a}: own {100 * result.cell(a, a):.1f}%, pooled {100 * result.cell('pooled', a):.1f}%, "
          f"elsewhere {100 * cross:.1f}%")
