"""
Congestion-control policies: symbolic (closed-form), scripted expert, constant and
an external-process bridge. Every policy maps an Observation to an action in [0.8, 1.5].
"""

import logging
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from config import ACTION_HIGH, ACTION_LOW, DEFAULT_UNITS, UNIT_SCALE, SymccError
from expr_core import evaluate, evaluate_batch, parse_infix, parse_preorder_string, to_infix

logger = logging.getLogger(__name__)

EXTERNAL_TIMEOUT_S = 1.0

# Closed-form policies distilled from the three collection datasets, as pre-order tokens.
# Integer coefficients are spelled out with repeated operands (the language has no constants).
SP1_PREORDER = "cos,+,x2,/,+,x2,x2,+,/,x1,+,*,x3,*,x3,x3,/,-,x2,x1,x1,x2"
SP2_PREORDER = "-,/,cos,/,x2,x1,*,x3,x3,/,x3,+,x3,/,+,/,*,x1,x3,*,x2,x2,x3,*,x2,x3"
SP3_PREORDER = (
    "cos,/,*,*,x2,x3,+,+,+,*,x2,x3,x2,+,x3,x3,x4,"
    "+,+,x1,*,*,x2,x2,*,x3,x4,*,x2,*,x3,x3"
)
BUILTIN_EXPRESSIONS = {"sp1": SP1_PREORDER, "sp2": SP2_PREORDER, "sp3": SP3_PREORDER}
BUILTIN_NAMES = ("sp1", "sp2", "sp3", "scripted-expert")


class PolicyError(SymccError):
    """A policy could not produce an action."""


class PolicyProtocolError(PolicyError):
    """The external endpoint replied with a malformed line or went away."""


class PolicyTimeout(PolicyError):
    """The external endpoint did not reply within the deadline."""


class PolicyRangeError(PolicyError):
    """The external endpoint proposed an action outside [0.8, 1.5]."""


@dataclass(frozen=True)
class ActionMapping:
    """Affine n(·): [−1, 1] → [lo, hi], clamping its input first."""

    lo: float = ACTION_LOW
    hi: float = ACTION_HIGH

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"mapping needs lo < hi, got {self.lo}, {self.hi}")

    @property
    def half_span(self):
        return (self.hi - self.lo) / 2.0

    def __call__(self, y):
        return self.lo + self.half_span * (min(1.0, max(-1.0, y)) + 1.0)

    def map_array(self, y):
        return self.lo + self.half_span * (np.clip(y, -1.0, 1.0) + 1.0)

    def inverse(self, a):
        """Regression label for an action: the y in [−1, 1] that maps to it."""
        return (np.asarray(a, dtype=np.float64) - self.lo) / self.half_span - 1.0


DEFAULT_MAPPING = ActionMapping()


def map_to_action(y, mapping=DEFAULT_MAPPING):
    if not math.isfinite(y):
        raise ValueError(f"cannot map non-finite value {y}")
    return mapping(y)


class Policy:
    """Base policy: deterministic function of the observation."""

    kind = "abstract"
    name = "policy"

    def act(self, obs):
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def close(self):
        pass

    def describe(self):
        return {"kind": self.kind, "name": self.name}


class SymbolicPolicy(Policy):
    kind = "symbolic"

    def __init__(self, tree, mapping=DEFAULT_MAPPING, units=DEFAULT_UNITS, name=None):
        if units not in UNIT_SCALE:
            raise ValueError(f"unknown units {units!r}")
        self.expression = tree
        self.mapping = mapping
        self.units = units
        self.name = name or to_infix(tree)

    def raw(self, obs):
        return evaluate(self.expression, obs.as_array(self.units))

    def act(self, obs):
        return self.mapping(self.raw(obs))

    def act_matrix(self, matrix):
        """Vectorised actions for an (n, 4) matrix already in this policy's units."""
        values, _ = evaluate_batch(self.expression, matrix)
        return self.mapping.map_array(values)

    def describe(self):
        return {"kind": self.kind, "name": self.name, "infix": to_infix(self.expression),
                "units": self.units}


def act_symbolic(policy, obs):
    if policy.kind != "symbolic":
        raise PolicyError(f"{policy.name} is not a symbolic policy")
    return policy.act(obs)


class ScriptedExpert(Policy):
    """
    Stand-in expert for end-to-end distillation without a trained RL agent.

    Loss-free windows get a = 0.8 + 0.35 / x3, the mapped value of 1/x3 − 1, so the
    action increases the load for x3 <= INCREASE_BELOW, sits near 1.0 around x3 = 1.75
    and decreases from DECREASE_FROM on (x3 = DECREASE_FROM itself gives 0.975).
    Any loss forces a decrease: max(0.8, min(base, LOSS_CAP) − LOSS_SLOPE · x4).
    """

    kind = "scripted-expert"
    name = "scripted-expert"
    INCREASE_BELOW = 1.5
    DECREASE_FROM = 2.0
    LOSS_CAP = 0.95
    LOSS_SLOPE = 0.25

    def __init__(self, mapping=DEFAULT_MAPPING):
        self.mapping = mapping

    def act(self, obs):
        base = self.mapping.lo + self.mapping.half_span / obs.x3
        if obs.x4 > 0:
            return max(self.mapping.lo, min(base, self.LOSS_CAP) - self.LOSS_SLOPE * obs.x4)
        return base

    def describe(self):
        return {"kind": self.kind, "name": self.name, "rule": "0.8 + 0.35 / x3; losses cap at 0.95"}


_SCRIPTED = ScriptedExpert()


def act_scripted_expert(obs):
    return _SCRIPTED.act(obs)


class ConstantPolicy(Policy):
    """Fixed action every window; a=1.0 keeps the initial intersend time."""

    kind = "constant"

    def __init__(self, action=1.0):
        if not ACTION_LOW <= action <= ACTION_HIGH:
            raise ValueError(f"action {action} outside [{ACTION_LOW}, {ACTION_HIGH}]")
        self.action = float(action)
        self.name = f"constant-{action:g}"

    def act(self, obs):
        return self.action


class ExternalPolicy(Policy):
    """
    Child process speaking the line protocol: request "x1 x2 x3 x4\\n", reply "a\\n".
    x1 and x2 are written in `units`. One request per window tick, strictly alternating.
    """

    kind = "external"

    def __init__(self, command, timeout=EXTERNAL_TIMEOUT_S, units=DEFAULT_UNITS):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.units = units
        self.name = f"external:{' '.join(self.command)}"
        self._process = None
        self._replies = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_process"] = None
        state["_replies"] = None
        return state

    def start(self):
        if self._process is not None:
            return self
        try:
            self._process = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as e:
            raise PolicyProtocolError(f"cannot start {self.command}: {e}") from e
        self._replies = queue.Queue()

        def reader(stream, replies):
            for line in stream:
                replies.put(line)
            replies.put(None)

        thread = threading.Thread(target=reader, args=(self._process.stdout, self._replies), daemon=True)
        thread.start()
        logger.info("started external policy %s (pid %d)", self.command, self._process.pid)
        return self

    def act(self, obs):
        self.start()
        x = obs.as_array(self.units)
        request = " ".join(repr(float(v)) for v in x) + "\n"
        try:
            self._process.stdin.write(request)
            self._process.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise PolicyProtocolError(f"endpoint closed its input: {e}") from e
        try:
            line = self._replies.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise PolicyTimeout(f"no reply within {self.timeout}s") from None
        if line is None:
            raise PolicyProtocolError("endpoint exited before replying")
        return parse_reply(line)

    def close(self):
        if self._process is None:
            return
        try:
            self._process.stdin.close()
        except OSError:
            pass
        try:
            self._process.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            self._process.kill()
            self._process.wait()
        self._process = None


def parse_reply(line):
    """Validate one reply line from an external endpoint."""
    text = line.strip()
    try:
        a = float(text)
    except ValueError:
        raise PolicyProtocolError(f"malformed reply {text!r}") from None
    if not math.isfinite(a):
        raise PolicyProtocolError(f"non-finite reply {text!r}")
    if not ACTION_LOW <= a <= ACTION_HIGH:
        raise PolicyRangeError(f"action {a} outside [{ACTION_LOW}, {ACTION_HIGH}]")
    return a


def act_external(endpoint, obs):
    return endpoint.act(obs)


def builtin_expression(name):
    return parse_preorder_string(BUILTIN_EXPRESSIONS[name])


def resolve_policy(spec, units=DEFAULT_UNITS, timeout=EXTERNAL_TIMEOUT_S):
    """
    Policy from a CLI/config string: a built-in name (sp1, sp2, sp3, scripted-expert),
    'constant:<a>', 'external:<command>', or an infix expression over x1..x4.
    """
    text = spec.strip()
    key = text.lower()
    if key in BUILTIN_EXPRESSIONS:
        return SymbolicPolicy(builtin_expression(key), units=units, name=key)
    if key == "scripted-expert":
        return ScriptedExpert()
    if key.startswith("constant:"):
        return ConstantPolicy(float(text.split(":", 1)[1]))
    if key.startswith("external:"):
        return ExternalPolicy(text.split(":", 1)[1], timeout=timeout, units=units)
    return SymbolicPolicy(parse_infix(text), units=units)
