"""The switch-scheduled recurrent model.

Every sensor owns one recurrent block: a periodic time embedding of the gap
since its previous observation, three tanh decay gates driven by the current
value and that embedding, and an LSTM-style cell whose both memory paths
read the shared summary state from the previous step.  At each step only the
blocks of sensors that fired run; their fresh cell states are aggregated
(mean, max, or attention) into the next summary.  The final summary, each
sensor's last hidden state, and an optional static embedding feed a linear
head with two logits.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import kernels
from .data import SwitchSchedule

AGGREGATIONS = ("mean", "max", "attention")
CONCATS = ("both", "global", "local")
STATE_INITS = ("zeros", "random")

_SENSOR_FIELDS = ("omega", "phi", "decay.W", "decay.V", "decay.b",
                  "cell.W", "cell.V", "cell.b")


@dataclass
class ModelConfig:
    sensor_count: int
    hidden: int = 64
    t2v_dim: int = 16
    static_count: int = 0
    aggregation: str = "mean"
    concat: str = "both"
    state_init: str = "zeros"
    seed: int = 0

    def validate(self) -> None:
        if self.sensor_count < 1:
            raise ValueError(f"sensor_count must be >= 1, got {self.sensor_count}")
        if self.hidden < 1 or self.t2v_dim < 1:
            raise ValueError(f"hidden and t2v_dim must be >= 1, "
                             f"got {self.hidden} and {self.t2v_dim}")
        if self.static_count < 0:
            raise ValueError(f"static_count must be >= 0, got {self.static_count}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, "
                             f"got {self.aggregation!r}")
        if self.concat not in CONCATS:
            raise ValueError(f"concat must be one of {CONCATS}, got {self.concat!r}")
        if self.state_init not in STATE_INITS:
            raise ValueError(f"state_init must be one of {STATE_INITS}, "
                             f"got {self.state_init!r}")

    @property
    def concat_dim(self) -> int:
        dim = 0
        if self.concat in ("both", "global"):
            dim += self.hidden
        if self.concat in ("both", "local"):
            dim += self.hidden * self.sensor_count
        if self.static_count:
            dim += self.hidden
        return dim


def _glorot(rng: np.random.Generator, shape: tuple[int, ...],
            fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


class SlanParams:
    """All trainable tensors plus the (non-trainable) initial states."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Parameter],
                 h0: np.ndarray, c0: np.ndarray) -> None:
        self.config = config
        self.tensors = tensors
        self.h0 = h0
        self.c0 = c0
        self._per_sensor = [
            tuple(tensors[f"sensor.{m}.{f}"] for f in _SENSOR_FIELDS)
            for m in range(config.sensor_count)]
        self._kernels: dict[tuple[str, int], tuple[object, tuple[int, ...]]] = {}

    def __getitem__(self, name: str) -> ad.Parameter:
        return self.tensors[name]

    def parameters(self) -> Iterator[ad.Parameter]:
        return iter(self.tensors.values())

    def zero_grads(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def sensor_tensors(self, m: int) -> tuple[ad.Parameter, ...]:
        """The eight per-sensor tensors in kernel argument order."""
        return self._per_sensor[m]

    def kernel(self, m: int, backend) -> object:
        """Sensor ``m``'s bound step kernel for ``backend``, cached.

        Kernels hold views of the live value buffers, so optimizer updates
        must stay in place; rebinding a tensor's value array triggers a
        rebuild here via the identity check.
        """
        values = tuple(p.value for p in self._per_sensor[m])
        ids = tuple(map(id, values))
        key = (backend.BACKEND, m)
        hit = self._kernels.get(key)
        if hit is None or hit[1] != ids:
            hit = (backend.make_cell(*values), ids)
            self._kernels[key] = hit
        return hit[0]

    def copy(self) -> "SlanParams":
        tensors = {name: ad.Parameter(name, p.value.copy())
                   for name, p in self.tensors.items()}
        return SlanParams(self.config, tensors, self.h0.copy(), self.c0.copy())

    def save(self, path: str | os.PathLike,
             extra_arrays: dict[str, np.ndarray] | None = None,
             extra_json: dict | None = None) -> None:
        """Self-describing checkpoint: every tensor under its name, config
        and any extra metadata as embedded JSON."""
        payload: dict[str, np.ndarray] = {
            "__config__": np.array(json.dumps(vars(self.config))),
            "__extra_json__": np.array(json.dumps(extra_json or {})),
            "buffer:h0": self.h0,
            "buffer:c0": self.c0,
        }
        for name, p in self.tensors.items():
            payload[f"param:{name}"] = p.value
        for name, arr in (extra_arrays or {}).items():
            payload[f"extra:{name}"] = np.asarray(arr)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path: str | os.PathLike
             ) -> tuple["SlanParams", dict[str, np.ndarray], dict]:
        with np.load(path, allow_pickle=False) as z:
            config = ModelConfig(**json.loads(str(z["__config__"])))
            extra_json = json.loads(str(z["__extra_json__"]))
            tensors = {}
            extra_arrays = {}
            for key in z.files:
                if key.startswith("param:"):
                    name = key[len("param:"):]
                    tensors[name] = ad.Parameter(name, z[key])
                elif key.startswith("extra:"):
                    extra_arrays[key[len("extra:"):]] = z[key]
            h0 = z["buffer:h0"]
            c0 = z["buffer:c0"]
        params = cls(config, tensors, h0, c0)
        return params, extra_arrays, extra_json


def init_params(config: ModelConfig) -> SlanParams:
    """Seeded initialization.

    Weight blocks are Glorot-uniform per gate, biases zero; the time
    embedding draws frequencies from U(0, 1) and phases from U(0, 2*pi).
    Initial hidden/summary states are zeros unless ``state_init`` asks for a
    small seeded gaussian.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    hsz, dt, s = config.hidden, config.t2v_dim, config.sensor_count
    tensors: dict[str, ad.Parameter] = {}

    def put(name: str, value: np.ndarray) -> None:
        tensors[name] = ad.Parameter(name, value)

    for m in range(s):
        put(f"sensor.{m}.omega", rng.uniform(0.0, 1.0, dt))
        put(f"sensor.{m}.phi", rng.uniform(0.0, 2.0 * np.pi, dt))
        put(f"sensor.{m}.decay.W", _glorot(rng, (3, hsz), 1, hsz))
        put(f"sensor.{m}.decay.V", _glorot(rng, (3, hsz, dt), dt, hsz))
        put(f"sensor.{m}.decay.b", np.zeros((3, hsz)))
        put(f"sensor.{m}.cell.W", _glorot(rng, (4, hsz), 1, hsz))
        put(f"sensor.{m}.cell.V", _glorot(rng, (4, hsz, hsz), hsz, hsz))
        put(f"sensor.{m}.cell.b", np.zeros((4, hsz)))

    put("head.W", _glorot(rng, (2, config.concat_dim), config.concat_dim, 2))
    put("head.b", np.zeros(2))
    if config.static_count:
        put("static.W", _glorot(rng, (hsz, config.static_count),
                                config.static_count, hsz))
        put("static.b", np.zeros(hsz))
    if config.aggregation == "attention":
        put("attention.W", _glorot(rng, (1, hsz), hsz, 1))
        put("attention.b", np.zeros(1))

    if config.state_init == "random":
        h0 = rng.normal(0.0, 0.1, (s, hsz))
        c0 = rng.normal(0.0, 0.1, hsz)
    else:
        h0 = np.zeros((s, hsz))
        c0 = np.zeros(hsz)
    return SlanParams(config, tensors, h0, c0)


# ---------------------------------------------------------------------------
# Plain-numpy views of the building blocks (for inspection and tests).

def time2vec(omega: np.ndarray, phi: np.ndarray, delta: float) -> np.ndarray:
    """sin(omega * delta + phi), elementwise."""
    return np.sin(omega * delta + phi)


def decay_gates(params: SlanParams, m: int, x: float, delta: float) -> np.ndarray:
    """The three tanh decay gates of sensor ``m``, stacked (3, hidden)."""
    w = params[f"sensor.{m}.decay.W"].value
    v = params[f"sensor.{m}.decay.V"].value
    b = params[f"sensor.{m}.decay.b"].value
    tv = time2vec(params[f"sensor.{m}.omega"].value,
                  params[f"sensor.{m}.phi"].value, delta)
    return np.tanh(w * x + v @ tv + b)


def cell_step(params: SlanParams, m: int, x: float, delta: float,
              h_prev: np.ndarray, c_glob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One sensor-block step outside the tape; returns (h_new, c_new)."""
    kern = params.kernel(m, kernels.get_backend())
    out, _ = kern.forward(float(x), float(delta), h_prev, c_glob)
    hsz = params.config.hidden
    return out[:hsz], out[hsz:]


def aggregate_values(kind: str, states: list[np.ndarray],
                     att_w: np.ndarray | None = None,
                     att_b: np.ndarray | None = None) -> np.ndarray:
    """Aggregation of freshly updated cell states, outside the tape."""
    if kind not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {kind!r}")
    if not states:
        raise ValueError("aggregate needs at least one state")
    if kind == "max":
        return np.maximum.reduce(states)
    if kind == "mean":
        w = np.full(len(states), 1.0 / len(states))
    else:
        scores = np.array([float(att_w[0] @ st + att_b[0]) for st in states])
        z = np.exp(scores - scores.max())
        w = z / z.sum()
    acc = states[0] * w[0]
    for i, st in enumerate(states[1:], start=1):
        acc = acc + st * w[i]
    return acc


# ---------------------------------------------------------------------------
# Tape rollout.

@dataclass
class Rollout:
    """Forward result: logits node plus what the rollout did."""

    tape: ad.Tape
    logits: ad.Node
    activations: list[list[tuple[int, float]]]
    concat_parts: list[tuple]
    attention: list[np.ndarray] | None = None

    def logit_values(self) -> np.ndarray:
        return self.logits.value


def positive_probability(logits: np.ndarray) -> float:
    """P(label = 1) from two logits, numerically stable."""
    z = logits - logits.max()
    e = np.exp(z)
    return float(e[1] / e.sum())


def forward(params: SlanParams, schedule: SwitchSchedule,
            statics: np.ndarray | None = None,
            tape: ad.Tape | None = None) -> Rollout:
    """Run one instance through the model on a fresh (or given) tape."""
    cfg = params.config
    if tape is None:
        tape = ad.Tape()
    backend = kernels.get_backend()
    hsz = cfg.hidden

    if cfg.static_count and statics is None:
        raise ValueError(f"model expects {cfg.static_count} static features, got none")
    if statics is not None and cfg.static_count != len(statics):
        raise ValueError(f"model expects {cfg.static_count} static features, "
                         f"got {len(statics)}")

    h_nodes: list[ad.Node | None] = [None] * cfg.sensor_count
    h_step: list[int | None] = [None] * cfg.sensor_count
    c_node = tape.leaf(params.c0)
    att_trace: list[np.ndarray] | None = [] if cfg.aggregation == "attention" else None
    activations: list[list[tuple[int, float]]] = []

    if cfg.aggregation == "attention":
        att_w = tape.param(params["attention.W"])
        att_b = tape.param(params["attention.b"])

    # Per-tape caches: one leaf per parameter, one bound kernel per sensor.
    sensor_leaves: list[tuple[ad.Node, ...] | None] = [None] * cfg.sensor_count
    sensor_kerns: list[object | None] = [None] * cfg.sensor_count

    for j, step in enumerate(schedule.steps):
        fresh: list[ad.Node] = []
        activations.append([(m, delta) for m, _, delta in step])
        for m, x, delta in step:
            if not 0 <= m < cfg.sensor_count:
                raise ValueError(f"schedule step {j} names sensor {m}, but the "
                                 f"model has {cfg.sensor_count} sensors")
            leaves = sensor_leaves[m]
            if leaves is None:
                leaves = tuple(tape.param(p) for p in params.sensor_tensors(m))
                sensor_leaves[m] = leaves
                sensor_kerns[m] = params.kernel(m, backend)
            kern = sensor_kerns[m]
            h_prev = h_nodes[m]
            if h_prev is None:
                h_prev = tape.leaf(params.h0[m])
            try:
                out, cache = kern.forward(float(x), float(delta),
                                          h_prev.value, c_node.value)
            except ValueError as exc:
                raise ad.AutodiffError(
                    f"non-finite cell output for sensor {m} at step {j} "
                    f"(t={schedule.timestamps[j]})") from exc
            parents = leaves + (h_prev, c_node)

            # The kernel emits [h; c] with one shared cache.  The two halves
            # become sibling nodes whose adjoints are preset views into one
            # buffer, so downstream accumulation writes straight through.
            # The h node carries the single kernel-backward hook: it sits
            # earlier on the tape than every consumer of either half, so by
            # the time the reverse sweep reaches it the buffer is complete.
            buf = np.zeros(2 * hsz)

            def bwd(_: np.ndarray, cache=cache, parents=parents,
                    buf=buf, backward=kern.backward) -> None:
                for par, pg in zip(parents, backward(cache, buf)):
                    ad.accumulate(par, pg)

            h_node = tape.custom(out[:hsz], bwd, label="cell_h")
            c_new = tape.custom(out[hsz:], None, label="cell_c")
            h_node.grad = buf[:hsz]
            c_new.grad = buf[hsz:]
            h_nodes[m] = h_node
            h_step[m] = j
            fresh.append(c_new)

        if cfg.aggregation == "mean":
            c_node = ad.stack_mean(fresh)
        elif cfg.aggregation == "max":
            c_node = ad.stack_max(fresh)
        else:
            scores = [ad.matmul(att_w, st) + att_b for st in fresh]
            weights = ad.softmax(ad.concat(scores))
            att_trace.append(weights.value.copy())
            c_node = ad.weighted_sum(weights, fresh)

    parts: list[ad.Node] = []
    labels: list[tuple] = []
    if cfg.concat in ("both", "global"):
        parts.append(c_node)
        labels.append(("summary", len(schedule.steps) - 1))
    if cfg.concat in ("both", "local"):
        for m in range(cfg.sensor_count):
            node = h_nodes[m]
            if node is None:
                node = tape.leaf(params.h0[m])
            parts.append(node)
            labels.append(("hidden", m, h_step[m]))
    if cfg.static_count:
        embed = ad.matmul(tape.param(params["static.W"]),
                          tape.leaf(np.asarray(statics, dtype=np.float64)))
        parts.append(embed + tape.param(params["static.b"]))
        labels.append(("static",))

    concat = parts[0] if len(parts) == 1 else ad.concat(parts)
    logits = ad.matmul(tape.param(params["head.W"]), concat) + tape.param(params["head.b"])
    return Rollout(tape, logits, activations, labels, att_trace)


def forward_loss(params: SlanParams, schedule: SwitchSchedule, label: int,
                 statics: np.ndarray | None = None) -> tuple[Rollout, ad.Node]:
    roll = forward(params, schedule, statics)
    return roll, ad.cross_entropy(roll.logits, label)
