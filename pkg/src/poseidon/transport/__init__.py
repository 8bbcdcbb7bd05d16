from .frame import HEADER_SIZE, MAGIC, Frame, FrameError, MsgType, decode
from .meter import TrafficMeter
from .sim import SimConfig, SimDeadlock, SimEndpoint, SimNetwork, TransportError
from .tcp import TcpTransport, parse_endpoint

__all__ = [
    "HEADER_SIZE", "MAGIC", "Frame", "FrameError", "MsgType", "decode", "TrafficMeter",
    "SimConfig", "SimDeadlock", "SimEndpoint", "SimNetwork", "TransportError",
    "TcpTransport", "parse_endpoint",
]
