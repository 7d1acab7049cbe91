"""Man-in-the-middle firewall for OBD-II/CAN traffic between a car and a dongle."""

from .codec import SignalSpec, classify_frame, decode, encode, load_signal_map, parse_signal_map
from .engine import Engine, EngineState, evaluate, matches, resolve, schedule_delayed, strictness_rank
from .model import Action, DecodedMessage, Direction, RawFrame, Verdict, canonicalize_identifier
from .pipeline import Firewall, PipelineConfig, run_firewall
from .policy import Behaviour, Policy, parse_policy, serialize_policy, validate_policy
from .storage import JsonlSink, MemorySink, StoredRecord, persist_batch, query

__version__ = "0.1.0"
