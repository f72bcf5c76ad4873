"""Recurrent visual-attention agent.

Pipeline per step: a 3x3 conv (ReLU) extracts features from the 3-channel
grid observation; a fixed sinusoidal spatial basis is appended along
channels; 1x1 linear layers produce per-position keys and values for m
heads; queries come from the previous LSTM state, so attention at step t
depends on (obs_t, h_{t-1}) only. Per-head softmax over all positions gives
the attention maps; contracting them against the values gives the filtered
output O, which enters the LSTM together with an embedded pose vector.
Policy and value heads sit on top of the LSTM and share no parameters.

With ``use_attention=False`` the conv features are globally mean-pooled and
fed to the LSTM directly; no maps are produced and no attention parameters
exist.
"""

from __future__ import annotations

import struct

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def build_spatial_basis(h: int, w: int, c_s: int = 8) -> np.ndarray:
    """Fixed (h, w, c_s) sinusoidal position basis.

    The first c_s/2 channels encode x (the column index), the last c_s/2
    encode y (the row index). Within each half, frequency index i runs from
    1 to c_s/4 with divisor 100**(4*i/c_s); channel 2*(i-1) carries
    sin(coord/divisor) and channel 2*(i-1)+1 carries cos(coord/divisor).
    Coordinates are 0-based cell indices.
    """
    if c_s % 4 != 0:
        raise ValueError(f"basis depth must be divisible by 4, got {c_s}")
    basis = np.zeros((h, w, c_s))
    if c_s == 0:
        return basis
    half = c_s // 2
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for i in range(1, c_s // 4 + 1):
        div = 100.0 ** (4.0 * i / c_s)
        off = 2 * (i - 1)
        basis[:, :, off] = np.sin(xs / div)[None, :]
        basis[:, :, off + 1] = np.cos(xs / div)[None, :]
        basis[:, :, half + off] = np.sin(ys / div)[:, None]
        basis[:, :, half + off + 1] = np.cos(ys / div)[:, None]
    return basis


def pose_vector(x: int, y: int, direction: int) -> np.ndarray:
    """Scalar inputs for one agent: (x, y, one-hot direction of 4)."""
    v = np.zeros(6)
    v[0] = float(x)
    v[1] = float(y)
    v[2 + int(direction)] = 1.0
    return v


class RecurrentState:
    """Per-agent, per-episode LSTM state; zeros at episode start."""

    __slots__ = ("h", "c")

    def __init__(self, h, c):
        self.h = h
        self.c = c

    def detach(self) -> "RecurrentState":
        """Plain-array copy of the state (drops any tape linkage)."""
        h = self.h.data if isinstance(self.h, Tensor) else self.h
        c = self.c.data if isinstance(self.c, Tensor) else self.c
        return RecurrentState(h.copy(), c.copy())


class AttentionMaps:
    """Per-head attention fields and their head-mean, as plain arrays.

    ``per_head`` is (m, h, w) or (batch, m, h, w); ``mean_map`` drops the
    head axis. ``head_logits`` keeps the pre-softmax scores for the clipped
    incentive variant. These are detached copies: the differentiable path
    to the policy stays on the tape inside ``agent_step``.
    """

    __slots__ = ("per_head", "mean_map", "head_logits")

    def __init__(self, per_head: np.ndarray, head_logits: np.ndarray):
        self.per_head = per_head
        self.head_logits = head_logits
        self.mean_map = per_head.mean(axis=-3)

    def sample(self, i: int) -> "AttentionMaps":
        if self.per_head.ndim != 4:
            raise ValueError("sample() needs a batched AttentionMaps")
        return AttentionMaps(self.per_head[i].copy(), self.head_logits[i].copy())


class AgentCore:
    """Parameters and forward passes for one agent.

    All parameters live in ``self.params`` (name -> Tensor with
    requires_grad). ``forward_calls`` counts ``agent_step`` invocations so
    training can prove the incentive adds no extra network passes.
    """

    def __init__(self, height: int, width: int, num_actions: int = 7,
                 obs_channels: int = 3, conv_filters: int = 64,
                 basis_depth: int = 8, num_heads: int = 4, head_depth: int = 16,
                 cell_size: int = 64, scalar_embed: int = 5,
                 use_attention: bool = True, kv_activation: str = "none",
                 seed: int = 0):
        if kv_activation not in ("none", "relu"):
            raise ValueError(f"kv_activation must be 'none' or 'relu', got {kv_activation!r}")
        self.height = height
        self.width = width
        self.num_actions = num_actions
        self.obs_channels = obs_channels
        self.conv_filters = conv_filters
        self.basis_depth = basis_depth
        self.num_heads = num_heads
        self.head_depth = head_depth
        self.cell_size = cell_size
        self.scalar_embed = scalar_embed
        self.use_attention = use_attention
        self.kv_activation = kv_activation
        self.forward_calls = 0

        self.basis = build_spatial_basis(height, width, basis_depth if use_attention else 0)
        feat_dim = conv_filters + (basis_depth if use_attention else 0)
        kv_dim = num_heads * head_depth
        lstm_in = (kv_dim if use_attention else conv_filters) + scalar_embed

        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        p["conv/k"] = glorot((3, 3, obs_channels, conv_filters),
                             9 * obs_channels, 9 * conv_filters)
        p["conv/b"] = zeros(conv_filters)
        if use_attention:
            p["keys/w"] = glorot((feat_dim, kv_dim), feat_dim, kv_dim)
            p["keys/b"] = zeros(kv_dim)
            p["values/w"] = glorot((feat_dim, kv_dim), feat_dim, kv_dim)
            p["values/b"] = zeros(kv_dim)
            p["query/w"] = glorot((cell_size, kv_dim), cell_size, kv_dim)
            p["query/b"] = zeros(kv_dim)
        p["embed/w"] = glorot((6, scalar_embed), 6, scalar_embed)
        p["embed/b"] = zeros(scalar_embed)
        p["lstm/w"] = glorot((lstm_in + cell_size, 4 * cell_size),
                             lstm_in + cell_size, 4 * cell_size)
        p["lstm/b"] = zeros(4 * cell_size)
        for head in ("policy", "value"):
            out_dim = num_actions if head == "policy" else 1
            p[f"{head}/w1"] = glorot((cell_size, 64), cell_size, 64)
            p[f"{head}/b1"] = zeros(64)
            p[f"{head}/w2"] = glorot((64, 64), 64, 64)
            p[f"{head}/b2"] = zeros(64)
            p[f"{head}/out_w"] = glorot((64, out_dim), 64, out_dim)
            p[f"{head}/out_b"] = zeros(out_dim)
        self.params = p

    # -- pieces -------------------------------------------------------------

    def initial_state(self, batch: int | None = None) -> RecurrentState:
        if batch is None:
            shape = (self.cell_size,)
        else:
            shape = (batch, self.cell_size)
        return RecurrentState(np.zeros(shape), np.zeros(shape))

    def query_from_state(self, h_prev) -> Tensor:
        """Queries for the next frame from the previous LSTM state."""
        h = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
        q = nm.dense(h, self.params["query/w"], self.params["query/b"])
        if h.ndim == 1:
            return nm.reshape(q, (self.num_heads, self.head_depth))
        return nm.reshape(q, (q.shape[0], self.num_heads, self.head_depth))

    def encode_features(self, obs) -> Tensor:
        """Conv + ReLU features with the spatial basis appended."""
        x = obs if isinstance(obs, Tensor) else Tensor(obs)
        batched = x.ndim == 4
        if x.shape[-3] != self.height or x.shape[-2] != self.width:
            raise nm.ShapeError(
                f"observation spatial size {x.shape} does not match the "
                f"({self.height}, {self.width}) basis"
            )
        feat = nm.relu(nm.conv2d(x, self.params["conv/k"], self.params["conv/b"]))
        if not self.use_attention or self.basis_depth == 0:
            return feat
        if batched:
            b = x.shape[0]
            basis = np.broadcast_to(self.basis, (b,) + self.basis.shape)
        else:
            basis = self.basis
        return nm.concat_last(feat, Tensor(np.ascontiguousarray(basis)))

    def compute_attention(self, features, queries) -> tuple:
        """Per-head maps and the filtered output O.

        features: (h, w, d) or (batch, h, w, d); queries (m, c_m) or
        (batch, m, c_m). Returns (AttentionMaps, O tensor) with O of shape
        (m, c_m) or (batch, m, c_m) to match.
        """
        f = features if isinstance(features, Tensor) else Tensor(features)
        q = queries if isinstance(queries, Tensor) else Tensor(queries)
        batched = f.ndim == 4
        if not batched:
            f = nm.reshape(f, (1,) + f.shape)
            q = nm.reshape(q, (1,) + q.shape)
        b, h, w, d = f.shape
        m, c = self.num_heads, self.head_depth
        pos = h * w
        flat = nm.reshape(f, (b * pos, d))
        keys = nm.dense(flat, self.params["keys/w"], self.params["keys/b"])
        values = nm.dense(flat, self.params["values/w"], self.params["values/b"])
        if self.kv_activation == "relu":
            keys = nm.relu(keys)
            values = nm.relu(values)
        keys = nm.reshape(keys, (b, pos, m, c))
        values = nm.reshape(values, (b, pos, m, c))
        logits = nm.attention_scores(keys, q)          # (b, m, pos)
        weights = nm.softmax(logits)
        out = nm.attention_apply(weights, values)      # (b, m, c)
        per_head = weights.data.reshape(b, m, h, w).copy()
        head_logits = logits.data.reshape(b, m, h, w).copy()
        if not batched:
            per_head, head_logits = per_head[0], head_logits[0]
            out = nm.reshape(out, (m, c))
        return AttentionMaps(per_head, head_logits), out

    # -- full step ----------------------------------------------------------

    def agent_step(self, obs, p, state: RecurrentState):
        """One network pass: (action_logits, value, maps, new_state).

        obs is (batch, h, w, channels), p is the (batch, 6) pose matrix,
        state holds (batch, cell) h and c (arrays or tensors; tensors keep
        gradient flow through time during training replay). maps is None
        when attention is off.
        """
        self.forward_calls += 1
        x = obs if isinstance(obs, Tensor) else Tensor(obs)
        pv = p if isinstance(p, Tensor) else Tensor(p)
        if x.ndim != 4 or pv.ndim != 2:
            raise nm.ShapeError(
                f"agent_step expects batched inputs, got obs {x.shape}, p {pv.shape}"
            )
        h_prev = state.h if isinstance(state.h, Tensor) else Tensor(state.h)
        c_prev = state.c if isinstance(state.c, Tensor) else Tensor(state.c)

        features = self.encode_features(x)
        if self.use_attention:
            queries = self.query_from_state(h_prev)
            maps, attended = self.compute_attention(features, queries)
            m, c = self.num_heads, self.head_depth
            summary = nm.reshape(attended, (x.shape[0], m * c))
        else:
            maps = None
            summary = nm.spatial_mean(features)

        embedded = nm.dense(pv, self.params["embed/w"], self.params["embed/b"])
        lstm_in = nm.concat_last(summary, embedded)
        h_new, c_new = nm.lstm_step(lstm_in, h_prev, c_prev,
                                    self.params["lstm/w"], self.params["lstm/b"])

        def head(name: str) -> Tensor:
            z = nm.relu(nm.dense(h_new, self.params[f"{name}/w1"],
                                 self.params[f"{name}/b1"]))
            z = nm.relu(nm.dense(z, self.params[f"{name}/w2"],
                                 self.params[f"{name}/b2"]))
            return nm.dense(z, self.params[f"{name}/out_w"],
                            self.params[f"{name}/out_b"])

        action_logits = head("policy")
        value = nm.reshape(head("value"), (x.shape[0],))
        return action_logits, value, maps, RecurrentState(h_new, c_new)


def act(action_logits, mode: str, rng: np.random.Generator | None = None):
    """Pick actions from logits.

    greedy: argmax, ties to the lowest index. sample: categorical draw from
    softmax(logits) using ``rng``. Returns (actions, log_probs) as arrays
    for batched logits or scalars for a single logit vector.
    """
    logits = action_logits.data if isinstance(action_logits, Tensor) else np.asarray(action_logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    log_probs_all = z - np.log(e.sum(axis=-1, keepdims=True))
    if mode == "greedy":
        actions = np.argmax(logits, axis=-1)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sampling requires an rng")
        cum = np.cumsum(probs, axis=-1)
        u = rng.random(logits.shape[0])
        actions = (cum < u[:, None]).sum(axis=-1)
        actions = np.minimum(actions, logits.shape[-1] - 1)
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    picked = log_probs_all[np.arange(logits.shape[0]), actions]
    if single:
        return int(actions[0]), float(picked[0])
    return actions.astype(np.int64), picked


# ---------------------------------------------------------------------------
# attention-map export records (consumed by the renderer)

_MAP_HEADER = struct.Struct("<3q")


def write_map_record(f, maps: AttentionMaps) -> None:
    """Append one unbatched AttentionMaps to a binary stream.

    Record layout: (h, w, m) as little-endian int64, then the m head maps,
    then the mean map, all flat little-endian float64.
    """
    if maps.per_head.ndim != 3:
        raise ValueError("map records are per agent per timestep; pass maps.sample(i)")
    m, h, w = maps.per_head.shape
    f.write(_MAP_HEADER.pack(h, w, m))
    f.write(np.ascontiguousarray(maps.per_head, dtype="<f8").tobytes())
    f.write(np.ascontiguousarray(maps.mean_map, dtype="<f8").tobytes())


def read_map_records(path: str) -> list[dict]:
    """Read every record written by ``write_map_record`` from a file."""
    records = []
    with open(path, "rb") as f:
        while True:
            head = f.read(_MAP_HEADER.size)
            if not head:
                break
            if len(head) < _MAP_HEADER.size:
                raise ValueError("truncated attention-map record header")
            h, w, m = _MAP_HEADER.unpack(head)
            body = f.read(8 * (m * h * w + h * w))
            if len(body) < 8 * (m * h * w + h * w):
                raise ValueError("truncated attention-map record body")
            per_head = np.frombuffer(body, dtype="<f8", count=m * h * w).reshape(m, h, w)
            mean_map = np.frombuffer(body, dtype="<f8", offset=8 * m * h * w,
                                     count=h * w).reshape(h, w)
            records.append({"per_head": per_head.astype(np.float64),
                            "mean_map": mean_map.astype(np.float64)})
    return records
