"""How many data packets does the classifier need?

Sweeps the readiness threshold d and then crosses training and test
thresholds. Data packets carry most of the signal here: d=0 leaves only the
handshake, which several services share.
"""

from earlytls import ExperimentConfig, FlowStore, make_service_specs, run_d_sweep, synth_generate
from earlytls.evaluation import run_threshold_matrix

specs = make_service_specs(5, 3, difficulty=0.0, seed=0)
trace = synth_generate(specs, 50, seed=0)
store = FlowStore.from_trace(trace.pcap, 9)  # record up to 9 data packets per flow
print(f"{len(store)} labeled flows, {len(set(store.labels))} services")

# %% Ten-fold accuracy per threshold
for d, mean, std in run_d_sweep(store, [0, 1, 2, 3, 5, 7, 9], ExperimentConfig(seed=0)):
    print(f"d={d}: {100 * mean:6.2f} ± {100 * std:.2f} %")

# %% Train at one d, classify flows seen at another. The diagonal is best;
# a mismatch in either direction costs accuracy.
cfg = ExperimentConfig(seed=0, train_d=[1, 3, 5, 9], test_d=[1, 3, 5, 9])
matrix = run_threshold_matrix(store, cfg)
print(matrix.format())
