"""Gated dilated-convolution note encoder and note-code interaction scorer.

The encoder stacks ``n_layers`` applications of ONE shared gated
convolution. Every layer sees the word embeddings concatenated with the
previous layer's hidden state, splits the convolution output into
input/output/candidate/forget blocks and updates a cell state::

    C' = sigmoid(F) * sigmoid(C) + sigmoid(I) * tanh(G)
    H  = sigmoid(O) * tanh(F)

The last layer's un-split convolution output ``U`` (n x 4*d_g) is scored
against projected code-description vectors ``V`` (m x d_v, d_v == 4*d_g)
through the interaction matrix ``V @ U.T``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("full", "no_nci", "no_gating")
CHECKPOINT_MAGIC = b"GCNCICK\n"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    """Checkpoint was trained against a different vocabulary or code set."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_codes: int
    d_e: int = 100
    d_g: int = 25
    kernel_size: int = 3
    n_layers: int = 2
    dilations: tuple[int, ...] = ()
    dropout: float = 0.2
    d_v: int | None = None
    max_len: int = 2500
    lstm_style_output: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("vocab_size", "n_codes", "d_e", "d_g", "kernel_size", "n_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        dil = tuple(int(d) for d in self.dilations) or tuple(2 ** i for i in range(self.n_layers))
        if len(dil) != self.n_layers:
            raise ConfigError(f"{len(dil)} dilations given for {self.n_layers} layers")
        if min(dil) < 1:
            raise ConfigError(f"dilations must be >= 1, got {dil}")
        object.__setattr__(self, "dilations", dil)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d_u)
        elif self.d_v != self.d_u:
            raise ConfigError(f"code vector width d_v={self.d_v} must equal feature width d_u={self.d_u}")

    @property
    def d_u(self) -> int:
        return self.d_g if self.variant == "no_gating" else 4 * self.d_g

    @property
    def receptive_field(self) -> int:
        return T.receptive_field(self.kernel_size, self.dilations)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["dilations"] = list(self.dilations)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(obj)
        if "dilations" in kw:
            kw["dilations"] = tuple(kw["dilations"])
        return cls(**kw)


def ablate(variant: str, config: ModelConfig) -> ModelConfig:
    """``config`` with the ablation ``variant`` substituted (``no_nci`` or ``no_gating``)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    return dataclasses.replace(config, variant=variant, d_v=None)


class ModelParams:
    """Named trainable tensors; the conv kernel exists once however deep the stack is."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name
            t.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.values.copy()) for k, t in self.tensors.items()})

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: t.shape for k, t in self.tensors.items()}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    c_in = config.d_e + config.d_g
    shapes = {
        "embedding": (config.vocab_size, config.d_e),
        "conv_kernel": (config.kernel_size * c_in, config.d_u),
        "conv_bias": (1, config.d_u),
        "h0": (1, config.d_g),
    }
    if config.variant == "no_nci":
        shapes["cls_weight"] = (config.d_u, config.n_codes)
        shapes["cls_bias"] = (1, config.n_codes)
    else:
        shapes["code_proj"] = (config.d_e, config.d_v)
        shapes["code_bias"] = (1, config.d_v)
        shapes["out_scale"] = (1, config.n_codes)
        shapes["out_bias"] = (1, config.n_codes)
    return shapes


def param_count(params: ModelParams) -> int:
    return params.count()


def expected_param_count(config: ModelConfig) -> int:
    """Closed form of :func:`param_count` for the full model and both ablations."""
    v, de, dg, k, dv, m = config.vocab_size, config.d_e, config.d_g, config.kernel_size, config.d_v, config.n_codes
    du = config.d_u
    base = v * de + k * (de + dg) * du + du + dg
    if config.variant == "no_nci":
        return base + du * m + m
    return base + de * dv + dv + 2 * m


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator, embeddings: np.ndarray | None = None) -> ModelParams:
    shapes = param_shapes(config)
    if embeddings is None:
        emb = rng.uniform(-0.5, 0.5, size=shapes["embedding"]) / config.d_e
    else:
        emb = np.array(embeddings, dtype=np.float64)
        if emb.shape != shapes["embedding"]:
            raise ConfigError(f"pretrained embeddings {emb.shape} do not match {shapes['embedding']}")
    kernel = _glorot(rng, *shapes["conv_kernel"])
    tensors = {
        "embedding": Tensor(emb),
        "conv_kernel": Tensor(kernel),
        "conv_bias": Tensor(np.zeros(shapes["conv_bias"])),
        "h0": Tensor(rng.uniform(-0.1, 0.1, size=shapes["h0"])),
    }
    if config.variant == "no_nci":
        tensors["cls_weight"] = Tensor(_glorot(rng, *shapes["cls_weight"]))
        tensors["cls_bias"] = Tensor(np.zeros(shapes["cls_bias"]))
    else:
        if config.d_e == config.d_v:
            proj = np.eye(config.d_e)
        else:
            proj = _glorot(rng, config.d_e, config.d_v)
        tensors["code_proj"] = Tensor(proj)
        tensors["code_bias"] = Tensor(np.zeros(shapes["code_bias"]))
        tensors["out_scale"] = Tensor(np.zeros(shapes["out_scale"]))
        tensors["out_bias"] = Tensor(np.zeros(shapes["out_bias"]))
    return ModelParams(tensors)


# -- encoder ----------------------------------------------------------------


class GatedOutput(NamedTuple):
    h: Tensor
    cell: Tensor
    u: Tensor


def gated_layer(
    inj: Tensor,
    cell_in: Tensor,
    kernel: Tensor,
    bias: Tensor,
    dilation: int,
    lstm_style_output: bool = False,
) -> GatedOutput:
    """One gated convolution step through depth.

    Returns the hidden state, the new cell state and the raw convolution
    output ``u`` (the features handed to the scorer after the last layer).
    With ``lstm_style_output`` the hidden state reads ``tanh`` of the new
    cell instead of ``tanh(F)``.
    """
    u = T.conv1d_dilated(inj, kernel, bias, dilation)
    if cell_in.shape != (u.rows, u.cols // 4):
        raise T.ShapeError(f"cell state {cell_in.shape} does not match gate width {u.cols // 4}")
    i, o, g, f = T.split_columns(u, 4)
    cell = T.add(T.mul(T.sigmoid(f), T.sigmoid(cell_in)), T.mul(T.sigmoid(i), T.tanh(g)))
    h = T.mul(T.sigmoid(o), T.tanh(cell if lstm_style_output else f))
    return GatedOutput(h, cell, u)


def run_encoder(
    x: Tensor,
    h0: Tensor,
    layers: Sequence[tuple[Tensor, Tensor]],
    dilations: Sequence[int],
    *,
    gated: bool = True,
    lstm_style_output: bool = False,
) -> Tensor:
    """Apply the stack; ``layers`` holds one (kernel, bias) pair per depth.

    The model passes the same pair at every depth. Passing distinct tensors
    gives an untied clone, which is how weight sharing is tested.
    """
    if len(layers) != len(dilations):
        raise T.ShapeError(f"{len(layers)} layers but {len(dilations)} dilations")
    n = x.rows
    h = T.broadcast_rows(h0, n)
    cell = Tensor(np.zeros((n, h0.cols)))
    u = None
    for (kernel, bias), d in zip(layers, dilations):
        inj = T.concat_features(x, h)
        if gated:
            h, cell, u = gated_layer(inj, cell, kernel, bias, d, lstm_style_output)
        else:
            u = h = T.tanh(T.conv1d_dilated(inj, kernel, bias, d))
    return u


def _check_ids(token_ids, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot encode an empty note")
    if ids.size > config.max_len:
        raise ValueError(f"note has {ids.size} tokens; max_len is {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    return ids


def encode_note_features(
    token_ids,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    ids = _check_ids(token_ids, config)
    x = T.embedding_lookup(params["embedding"], ids)
    x = T.dropout(x, config.dropout, training, rng)
    shared = (params["conv_kernel"], params["conv_bias"])
    return run_encoder(
        x,
        params["h0"],
        [shared] * config.n_layers,
        config.dilations,
        gated=config.variant != "no_gating",
        lstm_style_output=config.lstm_style_output,
    )


# -- scoring heads ----------------------------------------------------------


def build_code_matrix(desc_avg: Tensor, params: ModelParams) -> Tensor:
    proj = params["code_proj"]
    if desc_avg.cols != proj.rows:
        raise T.ShapeError(f"description vectors {desc_avg.shape} vs projection {proj.shape}")
    return T.add_row(T.matmul(desc_avg, proj), params["code_bias"])


def code_matrix(params: ModelParams, groups: Sequence[Sequence[int]]) -> Tensor:
    """Projected description means, recomputed from the current embedding table."""
    return build_code_matrix(T.bag_mean(params["embedding"], groups), params)


def interaction_matrix(U: Tensor, V: Tensor) -> Tensor:
    """Token-code dot products, m x n."""
    if U.cols != V.cols:
        raise T.ShapeError(f"feature width {U.cols} != code width {V.cols}")
    return T.matmul(V, T.transpose(U))


def nci_score(U: Tensor, V: Tensor, params: ModelParams) -> Tensor:
    """Per-code logits ``scale_j * mean_i(V_j . U_i) + bias_j`` as a 1 x m tensor."""
    inter = interaction_matrix(U, V)
    pooled = T.transpose(T.sum_axis(inter, 1))
    pooled = T.scale(pooled, 1.0 / U.rows)
    return T.add(T.mul(pooled, params["out_scale"]), params["out_bias"])


def maxpool_score(U: Tensor, params: ModelParams) -> Tensor:
    return T.add_row(T.matmul(T.max_rows(U), params["cls_weight"]), params["cls_bias"])


@dataclass
class Model:
    """Configuration, parameters and code descriptions bundled for scoring."""

    config: ModelConfig
    params: ModelParams
    groups: list[tuple[int, ...]]

    def __post_init__(self):
        if len(self.groups) != self.config.n_codes:
            raise ConfigError(f"{len(self.groups)} code descriptions for {self.config.n_codes} codes")
        for name, shape in param_shapes(self.config).items():
            if name not in self.params or self.params[name].shape != shape:
                raise ConfigError(f"parameter {name!r} missing or not shaped {shape}")

    def code_matrix(self) -> Tensor | None:
        if self.config.variant == "no_nci":
            return None
        return code_matrix(self.params, self.groups)

    def logits(self, token_ids, training: bool = False, rng=None, V: Tensor | None = None) -> Tensor:
        U = encode_note_features(token_ids, self.params, self.config, training, rng)
        if self.config.variant == "no_nci":
            return maxpool_score(U, self.params)
        if V is None:
            V = self.code_matrix()
        return nci_score(U, V, self.params)

    def forward(self, token_ids, training: bool = False, rng=None) -> Tensor:
        return T.sigmoid(self.logits(token_ids, training, rng))

    def loss(self, token_ids, code_ids: Iterable[int], training: bool = False, rng=None) -> Tensor:
        return T.bce_with_logits(self.logits(token_ids, training, rng), multi_hot(code_ids, self.config.n_codes))

    def predict_proba(self, notes: Sequence[Sequence[int]]) -> np.ndarray:
        """Eval-mode probabilities, one row per note; nothing is recorded."""
        V = self.code_matrix()
        out = np.empty((len(notes), self.config.n_codes))
        for r, ids in enumerate(notes):
            out[r] = T._sigmoid(self.logits(ids, V=V).values[0])
        return out


def forward(note, model: Model, training: bool = False, rng=None) -> Tensor:
    """Probabilities for one note (a :class:`NoteRecord` or a token-id sequence)."""
    ids = getattr(note, "token_ids", note)
    return model.forward(ids, training, rng)


def multi_hot(code_ids: Iterable[int], m: int) -> np.ndarray:
    y = np.zeros((1, m))
    idx = list(code_ids)
    if idx:
        y[0, idx] = 1.0
    return y


# -- checkpoint container ---------------------------------------------------


def _le_f32(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def save_checkpoint(path, config: ModelConfig, params: ModelParams, vocab_hash: str, codes_hash: str, extra: dict | None = None) -> str:
    """Write the checkpoint and return the sha256 of its bytes.

    Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON
    header, then each parameter as raw little-endian float32 in header order.
    """
    arrays, blobs, offset = [], [], 0
    for name, t in params.items():
        blob = _le_f32(t.values)
        arrays.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "vocab_hash": vocab_hash,
        "codes_hash": codes_hash,
        "arrays": arrays,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path, vocab_hash: str | None = None, codes_hash: str | None = None) -> tuple[ModelConfig, ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointMismatch(f"{path}: vocabulary hash differs from the checkpoint's")
    if codes_hash is not None and header["codes_hash"] != codes_hash:
        raise CheckpointMismatch(f"{path}: code-set hash differs from the checkpoint's")
    config = ModelConfig.from_json(header["config"])
    expected = param_shapes(config)
    body = data[16 + hlen:]
    tensors = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        if expected.get(spec["name"]) != shape:
            raise CheckpointError(f"{path}: array {spec['name']!r} has shape {shape}, config implies {expected.get(spec['name'])}")
        raw = body[spec["offset"]:spec["offset"] + spec["nbytes"]]
        if len(raw) != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: array {spec['name']!r} is truncated")
        tensors[spec["name"]] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
    if set(tensors) != set(expected):
        raise CheckpointError(f"{path}: parameters {sorted(set(expected) - set(tensors))} missing")
    return config, ModelParams(tensors), header
