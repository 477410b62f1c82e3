"""Early identification of HTTPS services from the first packets of a flow.

Pipeline: pcap capture -> TCP reassembly and TLS record tracking -> 36
statistical features after ``d`` application-data packets -> C4.5 decision
tree. See the README for a tour.
"""

from .capture import PacketStream, decode_frame, open_pcap
from .classifier import (
    Dataset,
    DecisionTree,
    TrainParams,
    deserialize,
    predict,
    serialize,
    train,
)
from .evaluation import (
    ExperimentConfig,
    run_d_sweep,
    run_generic_vs_dedicated,
    run_threshold_matrix,
)
from .features import FEATURE_NAMES, N_FEATURES, extract
from .pipeline import FlowStore, process_trace
from .reassembly import FlowTable
from .synth import make_service_specs, synth_generate
from .tls_wire import parse_client_hello, parse_server_hello, scan_segment

__version__ = "0.1.0"

__all__ = [
    "PacketStream",
    "decode_frame",
    "open_pcap",
    "Dataset",
    "DecisionTree",
    "TrainParams",
    "deserialize",
    "predict",
    "serialize",
    "train",
    "ExperimentConfig",
    "run_d_sweep",
    "run_generic_vs_dedicated",
    "run_threshold_matrix",
    "FEATURE_NAMES",
    "N_FEATURES",
    "extract",
    "FlowStore",
    "process_trace",
    "FlowTable",
    "make_service_specs",
    "synth_generate",
    "parse_client_hello",
    "parse_server_hello",
    "scan_segment",
]
