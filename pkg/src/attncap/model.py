"""The transformer under measurement.

Architecture (pre-norm, as in x-transformers)::

    x = E[tokens] + P[:n]                     # frozen embeddings
    for each layer:
        x = x + W_O @ concat_h Attn_h(LN(x))  # causal multi-head attention
        x = x + FFN(LN(x))                    # GELU MLP, or exactly 0 if frozen
    logits = LN(x) @ head                     # frozen B x T output head

Initialization: the frozen output head is N(0, 1) and every other matrix is
N(0, 1/B); biases start at zero. Layer norms have no gain, so the final
normalized vector has norm sqrt(B) and the unit-variance head gives logits
of scale sqrt(B); with a 1/B head the logits stay O(1) and cross-entropy
can settle on a wrong argmax for hard targets.
``freeze_ffn`` zeroes and freezes the second FFN projection and both biases,
so the FFN branch contributes exactly 0 and the block is the identity.
``omit_wv`` replaces each head's W_V by the frozen slice projection
``eye(B, d_h)``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

CHECKPOINT_VERSION = 1
_PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    T: int
    N: int
    B: int
    H: int = 1
    L: int = 1
    d_h: int = 128
    ffn_mult: int = 4
    freeze_ffn: bool = False
    omit_wv: bool = False
    dropout: float = 0.0
    precision: str = "float64"

    def __post_init__(self):
        for name in ("T", "N", "B", "H", "L", "d_h", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"ModelConfig.{name} must be an integer >= 1, got {v!r}")
        if self.B < 2:
            raise ValueError("ModelConfig.B must be >= 2 for layer normalization")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ModelConfig.dropout must be in [0, 1), got {self.dropout}")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"ModelConfig.precision must be one of {sorted(_PRECISIONS)}")

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """Named weight arrays plus the list of names the optimizer may touch."""

    cfg: ModelConfig
    seed: int
    tensors: dict[str, np.ndarray]
    trainable: list[str] = field(default_factory=list)

    @property
    def frozen(self) -> list[str]:
        return [k for k in self.tensors if k not in set(self.trainable)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.seed, {k: v.copy() for k, v in self.tensors.items()}, list(self.trainable))

    def census(self) -> int:
        return int(sum(self.tensors[k].size for k in self.trainable))


def _head_names(layer: int, head: int) -> tuple[str, str, str]:
    pre = f"layers.{layer}.heads.{head}."
    return pre + "W_Q", pre + "W_K", pre + "W_V"


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.Generator(np.random.Philox(seed))
    std = 1.0 / math.sqrt(cfg.B)
    dt = cfg.dtype
    tensors: dict[str, np.ndarray] = {}
    trainable: list[str] = []

    def draw(shape):
        return (rng.standard_normal(shape) * std).astype(dt)

    tensors["token_embedding"] = draw((cfg.T, cfg.B))
    tensors["positional_embedding"] = draw((cfg.N, cfg.B))
    hidden = cfg.ffn_mult * cfg.B
    for layer in range(cfg.L):
        for head in range(cfg.H):
            q, k, v = _head_names(layer, head)
            tensors[q] = draw((cfg.B, cfg.d_h))
            tensors[k] = draw((cfg.B, cfg.d_h))
            trainable += [q, k]
            if cfg.omit_wv:
                tensors[v] = np.eye(cfg.B, cfg.d_h, dtype=dt)
            else:
                tensors[v] = draw((cfg.B, cfg.d_h))
                trainable.append(v)
        wo = f"layers.{layer}.W_O"
        tensors[wo] = draw((cfg.H * cfg.d_h, cfg.B))
        trainable.append(wo)
        pre = f"layers.{layer}.ffn."
        tensors[pre + "W1"] = draw((cfg.B, hidden))
        tensors[pre + "b1"] = np.zeros(hidden, dtype=dt)
        if cfg.freeze_ffn:
            tensors[pre + "W2"] = np.zeros((hidden, cfg.B), dtype=dt)
        else:
            tensors[pre + "W2"] = draw((hidden, cfg.B))
            trainable += [pre + "W1", pre + "b1", pre + "W2", pre + "b2"]
        tensors[pre + "b2"] = np.zeros(cfg.B, dtype=dt)
    tensors["output_head"] = rng.standard_normal((cfg.B, cfg.T)).astype(dt)
    return ModelParams(cfg, int(seed), tensors, trainable)


def count_trainable_params(cfg: ModelConfig) -> int:
    """Closed-form trainable-parameter count.

    ``L*(n_proj*H*B*d_h + H*d_h*B) + L*(2*m*B**2 + m*B + B)`` where
    ``n_proj`` is 3 (2 with ``omit_wv``), ``m`` is ``ffn_mult`` and the FFN
    term is dropped when ``freeze_ffn`` is set. Embeddings and the output
    head are frozen and never counted.
    """
    n_proj = 2 if cfg.omit_wv else 3
    attn = cfg.L * (n_proj * cfg.H * cfg.B * cfg.d_h + cfg.H * cfg.d_h * cfg.B)
    if cfg.freeze_ffn:
        return attn
    m = cfg.ffn_mult
    return attn + cfg.L * (2 * m * cfg.B**2 + m * cfg.B + cfg.B)


def quadratic_form_param_count(cfg: ModelConfig) -> int:
    """Query-key entries only (``W_Q`` and ``W_K``), the count used when attention is
    read as the bilinear form ``X W_A X^T``. 512 for B = d_h = 16 with one head."""
    return 2 * cfg.L * cfg.H * cfg.B * cfg.d_h


# ---------------------------------------------------------------------------
# forward pass


def attention_head(X, W_Q, W_K, W_V, *, causal: bool = True, query_rows: int | None = None) -> Tensor:
    """Scaled dot-product attention for one head.

    ``X`` is (..., n, B). With ``query_rows=k`` only the last ``k`` query
    positions are computed; the result equals the trailing rows of the full
    computation.
    """
    X, W_Q, W_K, W_V = (nx.as_tensor(t) for t in (X, W_Q, W_K, W_V))
    for W in (W_Q, W_K, W_V):
        if W.data.ndim != 2 or W.shape[0] != X.shape[-1]:
            raise DimensionError(f"attention_head: weight {W.shape} does not match input {X.shape}")
    d_h = W_Q.shape[1]
    Xq = X if query_rows is None else X[..., -query_rows:, :]
    Q = Xq @ W_Q
    K = X @ W_K
    V = X @ W_V
    A = nx.softmax_rows(Q @ nx.transpose(K), scale=math.sqrt(d_h), causal=causal)
    return A @ V


def quadratic_form_scores(X, W_A) -> np.ndarray:
    """``X @ W_A @ X.T``: the query-key scores written as one B x B matrix."""
    X, W_A = np.asarray(X), np.asarray(W_A)
    if W_A.ndim != 2 or W_A.shape[0] != W_A.shape[1] or W_A.shape[0] != X.shape[-1]:
        raise DimensionError(f"quadratic_form_scores: W_A {W_A.shape} does not match X {X.shape}")
    return X @ W_A @ np.swapaxes(X, -1, -2)


def ffn_block(x, W1, b1, W2, b2) -> Tensor:
    return nx.gelu(x @ W1 + b1) @ W2 + b2


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.ndim not in (1, 2):
        raise DimensionError(f"tokens must be (n,) or (batch, n), got shape {tok.shape}")
    if tok.shape[-1] > cfg.N or tok.shape[-1] < 1:
        raise DimensionError(f"sequence length {tok.shape[-1]} outside [1, {cfg.N}]")
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.T):
        raise IndexError(f"token ids must lie in [0, {cfg.T})")
    return tok.astype(np.int64)


def forward(
    params: ModelParams,
    tokens,
    *,
    weights: dict[str, Tensor] | None = None,
    last_only: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-softmax logits, shape (n, T) or (batch, n, T).

    ``weights`` overrides entries of ``params.tensors`` (the trainer passes
    gradient-tracking leaves here). ``last_only`` returns just the final
    position, (T,) or (batch, T), and skips query rows the result never
    depends on. ``rng`` enables dropout at ``cfg.dropout``.
    """
    cfg = params.cfg
    tok = _check_tokens(cfg, tokens)
    n = tok.shape[-1]

    def w(name: str) -> Tensor:
        if weights is not None and name in weights:
            return weights[name]
        return Tensor(params.tensors[name])

    x = nx.as_tensor(params.tensors["token_embedding"][tok] + params.tensors["positional_embedding"][:n])
    for layer in range(cfg.L):
        rows = 1 if (last_only and layer == cfg.L - 1) else None
        h = nx.layer_norm(x)
        heads = [attention_head(h, *(w(nm) for nm in _head_names(layer, i)), query_rows=rows) for i in range(cfg.H)]
        merged = heads[0] if cfg.H == 1 else nx.concat(heads, axis=-1)
        attn = nx.dropout(merged @ w(f"layers.{layer}.W_O"), cfg.dropout, rng)
        if rows is not None:
            x = x[..., -1:, :]
        x = x + attn
        if not cfg.freeze_ffn:
            pre = f"layers.{layer}.ffn."
            f = ffn_block(nx.layer_norm(x), w(pre + "W1"), w(pre + "b1"), w(pre + "W2"), w(pre + "b2"))
            x = x + nx.dropout(f, cfg.dropout, rng)
    logits = nx.layer_norm(x) @ w("output_head")
    if last_only:
        logits = logits[..., -1, :]
    return logits


def predict_next(params: ModelParams, prefix) -> np.ndarray | int:
    """Greedy next-token prediction from prefixes of length N-1.

    Ties go to the lowest token id. Accepts one prefix or a (batch, N-1) array.
    """
    tok = np.asarray(prefix)
    if tok.shape[-1] != params.cfg.N - 1:
        raise DimensionError(f"prefix length {tok.shape[-1]} != N-1 = {params.cfg.N - 1}")
    logits = forward(params, tok, last_only=True).data
    pred = np.argmax(logits, axis=-1)
    return int(pred) if tok.ndim == 1 else pred


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    """Write a ``.npz`` container: little-endian arrays plus a JSON header.

    The header (key ``__meta__``, UTF-8 bytes) carries the format version,
    config, seed and the trainable-name list.
    """
    meta = {
        "format": "attncap.checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "seed": params.seed,
        "trainable": params.trainable,
        "names": list(params.tensors),
    }
    arrays = {k: v.astype(v.dtype.newbyteorder("<")) for k, v in params.tensors.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != "attncap.checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} attncap checkpoint")
        tensors = {k: z[k].astype(z[k].dtype.newbyteorder("=")) for k in meta["names"]}
    return ModelParams(ModelConfig(**meta["config"]), meta["seed"], tensors, meta["trainable"])
