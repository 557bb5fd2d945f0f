"""Client-server crop evaluation: framed TCP wire protocol, worker servers,
a dispatching client with pipelined attention precompute, and a scaling
simulator for planning worker counts.
"""

from .client import (
    ClusterConfig,
    RemoteFault,
    StreamAborted,
    WorkerError,
    WorkerTimeout,
    WorkerUnavailable,
    check_health,
    dispatch,
    evaluate_remote,
    run_remote_frame,
    run_stream,
)
from .sim import SimScenario, simulate_scaling, stage_latency_ms, write_sim_csv
from .wire import ProtocolError, recv_message, send_message
from .worker import DetectorServer, serve

__all__ = [
    "ClusterConfig",
    "DetectorServer",
    "ProtocolError",
    "check_health",
    "RemoteFault",
    "SimScenario",
    "StreamAborted",
    "WorkerError",
    "WorkerTimeout",
    "WorkerUnavailable",
    "dispatch",
    "evaluate_remote",
    "recv_message",
    "run_remote_frame",
    "run_stream",
    "send_message",
    "serve",
    "simulate_scaling",
    "stage_latency_ms",
    "write_sim_csv",
]
