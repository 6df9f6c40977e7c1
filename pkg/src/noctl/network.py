"""Branch/trunk operator networks: plain and skip-connection MLPs fused by a dot product.

Forward passes are written against the generic operations from
:mod:`noctl.autodiff`, so the same code runs on plain numpy arrays, on tape
variables (for reverse-mode gradients), and on duals (for input
derivatives), in any combination.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

_MAGIC = b"NOCTL"
_VERSION = 1
_KIND_CODES = {"fc": 0, "modified_fc": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of one fully-connected net.

    ``depth`` counts layer ranks including input and output, so a net of
    depth d applies d-1 affine maps with tanh after every hidden rank.
    Depth 2 is a single affine map.
    """

    kind: str
    in_width: int
    hidden: int
    depth: int
    out_width: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.kind == "modified_fc" and self.depth < 4:
            raise ValueError("modified_fc needs depth >= 4 (at least one gate layer)")
        if min(self.in_width, self.hidden, self.out_width) < 1:
            raise ValueError("all widths must be at least 1")
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")


def param_template(spec: NetworkSpec):
    """Ordered (name, shape) pairs for every weight matrix and bias vector."""
    if spec.kind == "fc":
        dims = [spec.in_width] + [spec.hidden] * (spec.depth - 2) + [spec.out_width]
        template = []
        for i in range(len(dims) - 1):
            template.append((f"w{i}", (dims[i], dims[i + 1])))
            template.append((f"b{i}", (dims[i + 1],)))
        return template
    n_gates = spec.depth - 3
    template = [
        ("wu", (spec.in_width, spec.hidden)),
        ("bu", (spec.hidden,)),
        ("wv", (spec.in_width, spec.hidden)),
        ("bv", (spec.hidden,)),
        ("w0", (spec.in_width, spec.hidden)),
        ("b0", (spec.hidden,)),
    ]
    for k in range(1, n_gates + 1):
        template.append((f"w{k}", (spec.hidden, spec.hidden)))
        template.append((f"b{k}", (spec.hidden,)))
    template.append(("wout", (spec.hidden, spec.out_width)))
    template.append(("bout", (spec.out_width,)))
    return template


@dataclass
class ParameterStore:
    """Ordered list of named parameter arrays; flatten/unflatten round-trips exactly."""

    entries: list = field(default_factory=list)

    def as_dict(self):
        return dict(self.entries)

    @property
    def n_params(self):
        return sum(arr.size for _, arr in self.entries)

    def flatten(self):
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for _, arr in self.entries])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        entries = []
        pos = 0
        for name, arr in self.entries:
            entries.append((name, flat[pos : pos + arr.size].reshape(arr.shape).copy()))
            pos += arr.size
        return ParameterStore(entries)

    def copy(self):
        return ParameterStore([(name, arr.copy()) for name, arr in self.entries])


def init_params(spec: NetworkSpec, seed: int) -> ParameterStore:
    """Glorot-uniform weights, zero biases; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape in param_template(spec):
        if len(shape) == 1:
            entries.append((name, np.zeros(shape)))
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            entries.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParameterStore(entries)


# -- forward passes ---------------------------------------------------------

def fc_forward(spec: NetworkSpec, params, x):
    """Plain MLP: affine + tanh on hidden ranks, final rank affine only."""
    n_affine = spec.depth - 1
    h = x
    for i in range(n_affine):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n_affine - 1:
            h = ad.tanh(h)
    return h


def modified_fc_forward(spec: NetworkSpec, params, x):
    """Skip-connection MLP: two input encoders gate every hidden update."""
    u = ad.tanh(x @ params["wu"] + params["bu"])
    v = ad.tanh(x @ params["wv"] + params["bv"])
    h = ad.tanh(x @ params["w0"] + params["b0"])
    for k in range(1, spec.depth - 2):
        z = ad.tanh(h @ params[f"w{k}"] + params[f"b{k}"])
        h = (1.0 - z) * u + z * v
    return h @ params["wout"] + params["bout"]


def net_forward(spec: NetworkSpec, params, x):
    if spec.kind == "fc":
        return fc_forward(spec, params, x)
    return modified_fc_forward(spec, params, x)


# -- the fused operator model ------------------------------------------------

@dataclass
class DeepOnetModel:
    """Branch net over sensor values, trunk net over query coordinates, dot-fused.

    The scalar output bias after the dot product is trainable and stored in
    checkpoints.
    """

    branch: NetworkSpec
    trunk: NetworkSpec
    branch_params: ParameterStore
    trunk_params: ParameterStore
    bias: float = 0.0

    def __post_init__(self):
        if self.branch.out_width != self.trunk.out_width:
            raise ValueError("branch and trunk output widths must match")

    @property
    def m(self):
        return self.branch.in_width

    @property
    def query_dim(self):
        return self.trunk.in_width

    def copy(self):
        return DeepOnetModel(
            self.branch,
            self.trunk,
            self.branch_params.copy(),
            self.trunk_params.copy(),
            self.bias,
        )

    # numpy fast paths -----------------------------------------------------

    def branch_out(self, sensors):
        sensors = np.asarray(sensors, dtype=np.float64)
        if sensors.shape[-1] != self.m:
            raise ValueError(f"expected {self.m} sensor values, got {sensors.shape[-1]}")
        return net_forward(self.branch, self.branch_params.as_dict(), sensors)

    def trunk_out(self, queries):
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.query_dim:
            raise ValueError(
                f"expected query dimension {self.query_dim}, got {queries.shape[1]}"
            )
        return net_forward(self.trunk, self.trunk_params.as_dict(), queries)

    def eval_queries(self, sensors, queries):
        """Operator output at each query row, for one sensor vector."""
        return self.trunk_out(queries) @ self.branch_out(sensors) + self.bias

    def field(self, sensors, queries, which=("y",)):
        """Output and requested query derivatives ("y", "dt", "dx", "dxx") at each row."""
        b = self.branch_out(sensors)
        params = self.trunk_params.as_dict()
        tables = query_derivatives(
            lambda q: net_forward(self.trunk, params, q), queries, which, self.query_dim
        )
        out = {}
        for key, table in tables.items():
            out[key] = table @ b + (self.bias if key == "y" else 0.0)
        return out


def deeponet_eval(model: DeepOnetModel, sensors, query) -> float:
    """dot(branch(sensors), trunk(query)) + bias for a single query point."""
    return float(model.eval_queries(sensors, np.atleast_2d(query))[0])


def query_derivatives(trunk_fn, queries, which, query_dim=None):
    """Evaluate ``trunk_fn`` and its query-coordinate derivatives.

    ``trunk_fn`` maps an (n, d) array-like (possibly dual-valued) to (n, p);
    duals are threaded through it to produce the requested first and second
    derivatives exactly.  Returns {"y": ..., requested keys...}.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n, d = queries.shape
    if query_dim is None:
        query_dim = d
    requested = [w for w in which if w != "y"]
    for w in requested:
        if w not in ("dt", "dx", "dxx"):
            raise ValueError(f"unknown derivative request {w!r}")
        if w in ("dx", "dxx") and query_dim < 2:
            raise ValueError("spatial derivative requested on a time-only trunk")
    tables = {}
    # time direction: last coordinate for (x, t) queries, only coordinate in 1-d
    if "dt" in requested:
        seed = np.zeros_like(queries)
        seed[:, -1] = 1.0
        out = trunk_fn(ad.Dual(queries, seed))
        tables.setdefault("y", out.primal)
        tables["dt"] = out.tangent
    if "dxx" in requested:
        seed = np.zeros_like(queries)
        seed[:, 0] = 1.0
        out = trunk_fn(ad.Dual(ad.Dual(queries, seed), ad.Dual(seed, None)))
        tables.setdefault("y", out.primal.primal)
        tables.setdefault("dx", out.primal.tangent)
        tables["dxx"] = out.tangent.tangent
    elif "dx" in requested:
        seed = np.zeros_like(queries)
        seed[:, 0] = 1.0
        out = trunk_fn(ad.Dual(queries, seed))
        tables.setdefault("y", out.primal)
        tables["dx"] = out.tangent
    if "y" not in tables:
        tables["y"] = trunk_fn(queries)
    return tables


def deeponet_input_derivs(model: DeepOnetModel, sensors, query, which):
    """Requested derivatives of the operator output at one query point."""
    b = model.branch_out(sensors)
    params = model.trunk_params.as_dict()
    tables = query_derivatives(
        lambda q: net_forward(model.trunk, params, q),
        np.atleast_2d(query),
        which,
        model.query_dim,
    )
    return np.array([float(tables[w][0] @ b) for w in which if w != "y"])


# -- tape integration --------------------------------------------------------

def param_vars(model: DeepOnetModel, tape, trainable=True):
    """Register model parameters on a tape in canonical flat order.

    Returns (branch_dict, trunk_dict, bias_var, ordered_leaf_list).  With
    ``trainable=False`` the parameters enter as constants.
    """
    enter = tape.input if trainable else tape.const
    leaves = []
    branch = {}
    for name, arr in model.branch_params.entries:
        v = enter(arr)
        branch[name] = v
        leaves.append(v)
    trunk = {}
    for name, arr in model.trunk_params.entries:
        v = enter(arr)
        trunk[name] = v
        leaves.append(v)
    bias = enter(np.float64(model.bias))
    leaves.append(bias)
    return branch, trunk, bias, leaves


def flatten_model(model: DeepOnetModel):
    """Canonical flat parameter vector: branch entries, trunk entries, bias."""
    return np.concatenate(
        [model.branch_params.flatten(), model.trunk_params.flatten(), [model.bias]]
    )


def model_with_flat(model: DeepOnetModel, flat):
    nb = model.branch_params.n_params
    nt = model.trunk_params.n_params
    if flat.size != nb + nt + 1:
        raise ValueError("flat vector length does not match the model")
    return DeepOnetModel(
        model.branch,
        model.trunk,
        model.branch_params.with_flat(flat[:nb]),
        model.trunk_params.with_flat(flat[nb : nb + nt]),
        float(flat[-1]),
    )


# -- checkpoint persistence ---------------------------------------------------

def _pack_spec(spec: NetworkSpec):
    return struct.pack(
        "<BIIII", _KIND_CODES[spec.kind], spec.in_width, spec.hidden, spec.depth,
        spec.out_width,
    )


def _unpack_spec(buf, pos):
    kind, in_w, hidden, depth, out_w = struct.unpack_from("<BIIII", buf, pos)
    if kind not in _KIND_NAMES:
        raise CheckpointShapeError(f"unknown network kind code {kind}")
    spec = NetworkSpec(_KIND_NAMES[kind], in_w, hidden, depth, out_w)
    return spec, pos + struct.calcsize("<BIIII")


def save_checkpoint(model: DeepOnetModel, path):
    """Little-endian binary dump; round-trips every parameter bit-exactly."""
    payload = np.concatenate(
        [model.branch_params.flatten(), model.trunk_params.flatten()]
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(_pack_spec(model.branch))
        fh.write(_pack_spec(model.trunk))
        fh.write(struct.pack("<II", model.m, model.query_dim))
        fh.write(struct.pack("<d", model.bias))
        fh.write(struct.pack("<Q", payload.size))
        fh.write(payload.tobytes())


def load_checkpoint(path) -> DeepOnetModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(_MAGIC) + 4 or buf[: len(_MAGIC)] != _MAGIC:
        raise CheckpointVersionError("bad magic header")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != _VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    try:
        branch_spec, pos = _unpack_spec(buf, pos)
        trunk_spec, pos = _unpack_spec(buf, pos)
        m, qdim = struct.unpack_from("<II", buf, pos)
        pos += 8
        (bias,) = struct.unpack_from("<d", buf, pos)
        pos += 8
        (n_params,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as exc:
        raise CheckpointTruncatedError("header ended early") from exc
    if m != branch_spec.in_width or qdim != trunk_spec.in_width:
        raise CheckpointShapeError("header sensor/query sizes disagree with specs")
    expected = sum(int(np.prod(s)) for _, s in param_template(branch_spec))
    expected += sum(int(np.prod(s)) for _, s in param_template(trunk_spec))
    if n_params != expected:
        raise CheckpointShapeError(
            f"declared {n_params} parameters, specs require {expected}"
        )
    end = pos + 8 * n_params
    if len(buf) < end:
        raise CheckpointTruncatedError(
            f"payload needs {8 * n_params} bytes, file has {len(buf) - pos}"
        )
    if len(buf) > end:
        raise CheckpointShapeError("trailing bytes after payload")
    flat = np.frombuffer(buf, dtype="<f8", count=n_params, offset=pos).astype(
        np.float64
    )
    nb = sum(int(np.prod(s)) for _, s in param_template(branch_spec))
    branch_store = ParameterStore(
        [(name, np.zeros(shape)) for name, shape in param_template(branch_spec)]
    ).with_flat(flat[:nb])
    trunk_store = ParameterStore(
        [(name, np.zeros(shape)) for name, shape in param_template(trunk_spec)]
    ).with_flat(flat[nb:])
    return DeepOnetModel(branch_spec, trunk_spec, branch_store, trunk_store, bias)
