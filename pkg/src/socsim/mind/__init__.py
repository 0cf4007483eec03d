from .state import (AttitudeStore, EmotionState, MemoryNode, NeedState, Profile,
                    StreamMemory, EMOTIONS, NEED_PRIORITY)
from .driver import (ActionIntent, AppraisalResult, CognitiveDriver, DriverError,
                     RemoteDriver, RetryExhausted, ScriptedDriver, ScriptedRules,
                     call_with_retry, parse_model_json)
from .agent import AgentServices, SimAgent

__all__ = [
    "AttitudeStore", "EmotionState", "MemoryNode", "NeedState", "Profile",
    "StreamMemory", "EMOTIONS", "NEED_PRIORITY",
    "ActionIntent", "AppraisalResult", "CognitiveDriver", "DriverError",
    "RemoteDriver", "RetryExhausted", "ScriptedDriver", "ScriptedRules",
    "call_with_retry", "parse_model_json",
    "AgentServices", "SimAgent",
]
