"""Pre-norm transformer encoder shared by every task head."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .surgery import allocate_vector

log = logging.getLogger(__name__)

PAD_ID = 0
CLS_ID = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 1024
    max_seq_len: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    dropout_rate: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def parameter_count(self) -> int:
        d, f = self.d_model, self.d_ff
        per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
        return self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d


class Encoder:
    """Token + position embeddings followed by ``n_layers`` pre-norm blocks.

    Parameters live in ``self.params`` (ordered name -> Tensor). Task heads
    register their own tensors so the optimizer can split shared from
    task-specific parameters.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.heads: dict[str, list[Tensor]] = {}
        self._dropout_rng = np.random.default_rng([seed, 7])
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std

        def p(name, shape, kind="normal"):
            if kind == "normal":
                v = rng.normal(0.0, std, size=shape)
            elif kind == "ones":
                v = np.ones(shape)
            else:
                v = np.zeros(shape)
            self.params[name] = Tensor(v, requires_grad=True, name=name)

        p("tok_emb", (c.vocab_size, c.d_model))
        p("pos_emb", (c.max_seq_len, c.d_model))
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            p(pre + "ln1.g", (c.d_model,), "ones")
            p(pre + "ln1.b", (c.d_model,), "zeros")
            for proj in ("q", "k", "v", "o"):
                p(pre + f"w{proj}", (c.d_model, c.d_model))
                p(pre + f"b{proj}", (c.d_model,), "zeros")
            p(pre + "ln2.g", (c.d_model,), "ones")
            p(pre + "ln2.b", (c.d_model,), "zeros")
            p(pre + "w1", (c.d_model, c.d_ff))
            p(pre + "b1", (c.d_ff,), "zeros")
            p(pre + "w2", (c.d_ff, c.d_model))
            p(pre + "b2", (c.d_model,), "zeros")
        p("ln_f.g", (c.d_model,), "ones")
        p("ln_f.b", (c.d_model,), "zeros")
        self._bind_grad_buffer()

    def _bind_grad_buffer(self) -> None:
        # every shared grad is a view into one flat vector
        self.grad_flat = allocate_vector(self.shared_dim())
        i = 0
        for t in self.params.values():
            n = t.size
            t.grad = self.grad_flat[i:i + n].reshape(t.shape)
            i += n

    # -- forward ----------------------------------------------------------

    def encode(self, tokens, train_mode: bool = False, attention_mask=None) -> Tensor:
        """Map a b x s batch of token ids to b x s x d_model states.

        Position 0 is expected to hold CLS. Padding (id 0) is masked out as
        an attention key unless an explicit ``attention_mask`` is passed.
        """
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise ValueError(f"token id outside [0, {c.vocab_size})")
        if tokens.shape[1] > c.max_seq_len:
            log.warning("sequence length %d > max_seq_len %d; truncating",
                        tokens.shape[1], c.max_seq_len)
            tokens = tokens[:, : c.max_seq_len]
            if attention_mask is not None:
                attention_mask = np.asarray(attention_mask)[:, : c.max_seq_len]
        b, s = tokens.shape
        if attention_mask is None:
            attention_mask = tokens != PAD_ID
        key_bias = np.where(np.asarray(attention_mask, dtype=bool), 0.0, -1e9)[:, None, None, :]
        rate = c.dropout_rate if train_mode else 0.0
        P = self.params

        x = dc.embedding(P["tok_emb"], tokens) + dc.slice_(P["pos_emb"], slice(0, s))
        x = self._dropout(x, rate)
        H, dh = c.n_heads, c.d_head
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            h = dc.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

            def heads(name):
                t = dc.matmul(h, P[pre + "w" + name]) + P[pre + "b" + name]
                return dc.transpose(dc.reshape(t, (b, s, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            attn = dc.softmax(scores + key_bias)
            ctx = dc.matmul(attn, v)
            ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, s, c.d_model))
            o = dc.matmul(ctx, P[pre + "wo"]) + P[pre + "bo"]
            x = x + self._dropout(o, rate)

            h2 = dc.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            f = dc.gelu(dc.matmul(h2, P[pre + "w1"]) + P[pre + "b1"])
            f = dc.matmul(f, P[pre + "w2"]) + P[pre + "b2"]
            x = x + self._dropout(f, rate)
        return dc.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def _dropout(self, x: Tensor, rate: float) -> Tensor:
        return dc.dropout(x, rate, self._dropout_rng) if rate > 0 else x

    # -- parameters -------------------------------------------------------

    @property
    def shared_params(self) -> list[Tensor]:
        return list(self.params.values())

    def register_head(self, task_id: str, params: Iterable[Tensor]) -> None:
        self.heads[task_id] = list(params)

    def unregister_head(self, task_id: str) -> None:
        self.heads.pop(task_id, None)

    def parameter_partition(self, task_ids: Iterable[str] | None = None):
        """Return ``(shared, per_head)``; ``per_head`` maps task id to its
        head tensors. Asking for an unregistered task raises KeyError."""
        if task_ids is None:
            task_ids = list(self.heads)
        per_head = {}
        for tid in task_ids:
            if tid not in self.heads:
                raise KeyError(f"task {tid!r} has no registered head")
            per_head[tid] = list(self.heads[tid])
        return self.shared_params, per_head

    def zero_grad(self) -> None:
        self.grad_flat.fill(0.0)

    def set_trainable(self, layers: Iterable[int], trainable: bool) -> None:
        """Toggle requires_grad for whole layers (used to localise gradients)."""
        for layer in layers:
            pre = f"layers.{layer}."
            for name, t in self.params.items():
                if name.startswith(pre):
                    t.requires_grad = trainable

    def shared_dim(self) -> int:
        return sum(t.size for t in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([t.values.reshape(-1) for t in self.params.values()])

    # -- GradTS instrumentation -------------------------------------------

    def head_grad_norms(self) -> tuple[np.ndarray, bool]:
        """L x H sums of |grad| over each attention head's own parameters.

        Head h of a layer owns columns ``h*dh:(h+1)*dh`` of the Q/K/V
        weights and biases and the matching rows of the output projection.
        Returns ``(matrix, warning)`` where ``warning`` is True when no
        gradient has been accumulated yet.
        """
        c = self.config
        H, dh = c.n_heads, c.d_head
        out = np.zeros((c.n_layers, H))
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            for name in ("q", "k", "v"):
                w = self.params[pre + "w" + name].grad
                bias = self.params[pre + "b" + name].grad
                if w is None:
                    continue
                out[layer] += np.abs(w).reshape(c.d_model, H, dh).sum(axis=(0, 2))
                out[layer] += np.abs(bias).reshape(H, dh).sum(axis=1)
            wo = self.params[pre + "wo"].grad
            if wo is not None:
                out[layer] += np.abs(wo).reshape(H, dh, c.d_model).sum(axis=(1, 2))
        warning = not np.any(out)
        if warning:
            log.warning("head_grad_norms called with no accumulated gradient")
        return out, warning

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != {t.shape}")
            t.values[...] = v


def save_checkpoint(path, encoder: Encoder, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """Write parameters (``enc/<name>``), optional extra arrays and the
    encoder config to a single ``.npz`` file."""
    path = Path(path)
    arrays = {f"enc/{k}": v for k, v in encoder.state_dict().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    header = {"encoder_config": asdict(encoder.config), "meta": meta or {}}
    arrays["__header__"] = np.array(json.dumps(header))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[Encoder, dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        cfg = EncoderConfig(**header["encoder_config"])
        enc = Encoder(cfg)
        state = {k[4:]: data[k] for k in data.files if k.startswith("enc/")}
        extra = {k[6:]: data[k] for k in data.files if k.startswith("extra/")}
    enc.load_state_dict(state)
    return enc, extra, header.get("meta", {})
