"""Vision Transformer backbone plus the dermatology classification head.

Pipeline for one image batch ``[B, H, W, 3]``:

    patchify -> linear patch embedding -> prepend class token -> + positional
    embedding -> depth x pre-LN encoder block -> final LN -> head

Each encoder block is ``x + MSA(LN(x))`` followed by ``x + MLP(LN(x))``.
The head flattens the token sequence (or takes only the class token when
``head_input == "cls"``) and applies
batch-norm -> dense(head_neurons) -> activation -> batch-norm -> dropout ->
dense(num_classes) -> softmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import BatchNormState, Tensor

NUM_CLASSES = 7

_PRESETS = {
    "L16": dict(patch_size=16, hidden_dim=1024, mlp_dim=4096, num_heads=16, depth=24),
    "L32": dict(patch_size=32, hidden_dim=1024, mlp_dim=4096, num_heads=16, depth=24),
    "B16": dict(patch_size=16, hidden_dim=768, mlp_dim=3072, num_heads=12, depth=12),
    "B32": dict(patch_size=32, hidden_dim=768, mlp_dim=3072, num_heads=12, depth=12),
    # desk-scale config used by tests and demos
    "tiny": dict(image_size=8, patch_size=4, hidden_dim=8, mlp_dim=16, num_heads=2, depth=1),
}
_ARCH_FIELDS = ("image_size", "patch_size", "hidden_dim", "mlp_dim", "num_heads", "depth")


@dataclass(frozen=True)
class ViTConfig:
    name: str = "custom"
    image_size: int = 224
    patch_size: int = 16
    hidden_dim: int = 1024
    mlp_dim: int = 4096
    num_heads: int = 16
    depth: int = 24
    num_classes: int = NUM_CLASSES
    dropout_rate: float = 0.5
    head_neurons: int = 28
    head_activation: str = "relu"
    head_input: str = "sequence"
    l2_lambda: float = 0.0
    mlp_activation: str = "gelu"
    ln_eps: float = 1e-6
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        for name in _ARCH_FIELDS + ("num_classes", "head_neurons"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.head_activation not in T.ACTIVATIONS or self.mlp_activation not in T.ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {T.ACTIVATIONS}")
        if self.head_input not in ("sequence", "cls"):
            raise ConfigurationError(f"head_input must be 'sequence' or 'cls', got {self.head_input!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.l2_lambda < 0:
            raise ConfigurationError("l2_lambda must be nonnegative")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def head_input_dim(self) -> int:
        return self.seq_len * self.hidden_dim if self.head_input == "sequence" else self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


def make_config(name: str, **overrides) -> ViTConfig:
    """Build one of the preset configs (``L16``, ``L32``, ``B16``, ``B32``, ``tiny``).

    ``"custom"`` requires every architecture field to be given explicitly.
    Any other keyword overrides the preset value.
    """
    if name == "custom":
        missing = [f for f in _ARCH_FIELDS if f not in overrides]
        if missing:
            raise ConfigurationError(f"custom config is missing {', '.join(missing)}")
        return ViTConfig(name="custom", **overrides)
    if name not in _PRESETS:
        raise ConfigurationError(f"unknown config {name!r}; expected one of {sorted(_PRESETS)} or 'custom'")
    known = {f.name for f in fields(ViTConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return ViTConfig(name=name, **{**_PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[H, W, C]`` (or ``[B, H, W, C]``) into flattened patches.

    Patches are ordered row-major from the top-left; inside a patch the
    pixels are row-major with channels last.  Weight import depends on this
    order, so it must not change.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    if image.ndim != 4:
        raise DimensionError(f"patchify expects [H, W, C] or [B, H, W, C], got {image.shape}")
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image of size {h}x{w} cannot be divided into {p}x{p} patches")
    out = (image.reshape(b, h // p, p, w // p, p, c)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(b, (h // p) * (w // p), p * p * c))
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def backbone_shapes(config: ViTConfig) -> Dict[str, tuple]:
    D, M = config.hidden_dim, config.mlp_dim
    shapes = {
        "patch_embed.w": (config.patch_dim, D),
        "patch_embed.b": (D,),
        "cls_token": (1, 1, D),
        "pos_embed": (config.seq_len, D),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gamma": (D,), p + "ln1.beta": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.gamma": (D,), p + "ln2.beta": (D,),
            p + "mlp.w1": (D, M), p + "mlp.b1": (M,),
            p + "mlp.w2": (M, D), p + "mlp.b2": (D,),
        })
    shapes["final_ln.gamma"] = (D,)
    shapes["final_ln.beta"] = (D,)
    return shapes


def head_shapes(config: ViTConfig) -> Dict[str, tuple]:
    F, H, C = config.head_input_dim, config.head_neurons, config.num_classes
    return {
        "head.bn1.gamma": (F,), "head.bn1.beta": (F,),
        "head.dense1.w": (F, H), "head.dense1.b": (H,),
        "head.bn2.gamma": (H,), "head.bn2.beta": (H,),
        "head.dense2.w": (H, C), "head.dense2.b": (C,),
    }


def buffer_shapes(config: ViTConfig) -> Dict[str, tuple]:
    F, H = config.head_input_dim, config.head_neurons
    return {
        "head.bn1.running_mean": (F,), "head.bn1.running_var": (F,),
        "head.bn2.running_mean": (H,), "head.bn2.running_var": (H,),
    }


def param_count(config: ViTConfig, include_head: bool = True) -> int:
    """Closed-form number of trainable scalars (batch-norm running stats excluded)."""
    D, M, S = config.hidden_dim, config.mlp_dim, config.seq_len
    embed = config.patch_dim * D + D + D + S * D
    block = 2 * D + 4 * (D * D + D) + 2 * D + (D * M + M) + (M * D + D)
    total = embed + config.depth * block + 2 * D
    if include_head:
        F, H, C = config.head_input_dim, config.head_neurons, config.num_classes
        total += 2 * F + (F * H + H) + 2 * H + (H * C + C)
    return total


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape, dtype=np.float32).reshape(-1)
    while True:
        bad = np.flatnonzero(np.abs(out) > 2.0)
        if bad.size == 0:
            break
        out[bad] = rng.standard_normal(bad.size, dtype=np.float32)
    return (out * std).astype(dtype).reshape(shape)


def _init_value(name: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    # leaves starting with "b" are biases and norm shifts
    if name == "pos_embed" or leaf.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    return _truncated_normal(rng, shape, 0.02, dtype)


# ---------------------------------------------------------------------------
# attention record
# ---------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Attention weights of one sample: ``weights[layer, head]`` is ``[S, S]``."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        w = self.weights
        if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
            raise DimensionError(f"attention record must be [depth, heads, S, S], got {w.shape}")

    @property
    def depth(self) -> int:
        return self.weights.shape[0]

    @property
    def num_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[-1]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ViTModel:
    """Named parameter set plus forward pass.

    ``params`` holds trainable tensors; ``buffers`` holds the head
    batch-norm running statistics, which are persisted but not trained.
    """

    def __init__(self, config: ViTConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.config = config
        expected = {**backbone_shapes(config), **head_shapes(config)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigurationError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        if set(buffers) != set(buffer_shapes(config)):
            raise ConfigurationError("batch-norm buffer set does not match config")
        self.params = params
        self.buffers = buffers
        self.bn1 = BatchNormState(buffers["head.bn1.running_mean"], buffers["head.bn1.running_var"],
                                  config.bn_momentum, config.bn_eps)
        self.bn2 = BatchNormState(buffers["head.bn2.running_mean"], buffers["head.bn2.running_var"],
                                  config.bn_momentum, config.bn_eps)

    @classmethod
    def zeros(cls, config: ViTConfig, dtype=None) -> "ViTModel":
        """Allocate every tensor as zeros (cheap: pages are only touched on write)."""
        dtype = dtype or T.get_default_dtype()
        shapes = {**backbone_shapes(config), **head_shapes(config)}
        params = {n: Tensor(np.zeros(s, dtype=dtype), requires_grad=True, name=n) for n, s in shapes.items()}
        buffers = {n: (np.ones(s, dtype=dtype) if n.endswith("var") else np.zeros(s, dtype=dtype))
                   for n, s in buffer_shapes(config).items()}
        return cls(config, params, buffers)

    # -- introspection ----------------------------------------------------
    def named_parameters(self, include_head: bool = True) -> Iterator[Tuple[str, Tensor]]:
        for name, p in self.params.items():
            if include_head or not name.startswith("head."):
                yield name, p

    def num_parameters(self, include_head: bool = True) -> int:
        return sum(int(p.data.size) for _, p in self.named_parameters(include_head))

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ---------------------------------------------------
    def embed_patches(self, patches) -> Tensor:
        """``[B, N, patch_dim]`` patches -> ``[B, N+1, D]`` tokens with class token and positions."""
        cfg, p = self.config, self.params
        patches = T.as_tensor(patches)
        if patches.ndim != 3 or patches.shape[1:] != (cfg.num_patches, cfg.patch_dim):
            raise DimensionError(
                f"expected patches [B, {cfg.num_patches}, {cfg.patch_dim}], got {patches.shape}")
        tokens = T.linear(patches, p["patch_embed.w"], p["patch_embed.b"])
        cls = T.broadcast_to(p["cls_token"], (patches.shape[0], 1, cfg.hidden_dim))
        return T.concat([cls, tokens], axis=1) + p["pos_embed"]

    def _attention(self, x: Tensor, i: int, attn_out: Optional[list]) -> Tensor:
        cfg, p = self.config, self.params
        pre = f"blocks.{i}.attn."
        B, S, D = x.shape
        H, dh = cfg.num_heads, cfg.head_dim

        def heads(t):
            return t.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q = heads(T.linear(x, p[pre + "wq"], p[pre + "bq"]))
        k = heads(T.linear(x, p[pre + "wk"], p[pre + "bk"]))
        v = heads(T.linear(x, p[pre + "wv"], p[pre + "bv"]))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if attn_out is not None:
            attn_out.append(attn.data.copy())
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return T.linear(ctx, p[pre + "wo"], p[pre + "bo"])

    def encode(self, tokens: Tensor, attn_out: Optional[list] = None,
               training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Run the encoder stack and the final layer norm over ``[B, S, D]`` tokens."""
        cfg, p = self.config, self.params
        x = tokens
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            h = T.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
            x = x + self._attention(h, i, attn_out)
            h = T.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
            h = T.activation(T.linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"]), cfg.mlp_activation,
                             training=training, rng=rng)
            x = x + T.linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        return T.layer_norm(x, p["final_ln.gamma"], p["final_ln.beta"], cfg.ln_eps)

    def encode_patches(self, patches, attn_out: Optional[list] = None) -> Tensor:
        return self.encode(self.embed_patches(patches), attn_out)

    def head(self, encoded: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Classification head; returns logits ``[B, num_classes]``."""
        cfg, p = self.config, self.params
        if cfg.head_input == "sequence":
            z = T.flatten(encoded, 1)
        else:
            z = encoded[:, 0]
        z = T.batch_norm(z, p["head.bn1.gamma"], p["head.bn1.beta"], self.bn1, training)
        z = T.linear(z, p["head.dense1.w"], p["head.dense1.b"])
        z = T.activation(z, cfg.head_activation, training=training, rng=rng)
        z = T.batch_norm(z, p["head.bn2.gamma"], p["head.bn2.beta"], self.bn2, training)
        z = T.dropout(z, cfg.dropout_rate, training, rng)
        return T.linear(z, p["head.dense2.w"], p["head.dense2.b"])

    def logits(self, images: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None,
               attn_out: Optional[list] = None) -> Tensor:
        cfg = self.config
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise DimensionError(
                f"expected images [B, {cfg.image_size}, {cfg.image_size}, 3], got {images.shape}")
        if training and images.shape[0] < 2:
            raise DimensionError("training-mode forward needs a batch of at least 2 (batch norm)")
        if rng is None and training:
            rng = np.random.default_rng()
        dtype = T.get_default_dtype()
        patches = patchify(images.astype(dtype, copy=False), cfg.patch_size)
        tokens = self.embed_patches(patches)
        encoded = self.encode(tokens, attn_out, training=training, rng=rng)
        return self.head(encoded, training=training, rng=rng)

    def forward(self, images: np.ndarray, training: bool = False, capture_attention: bool = False,
                rng: Optional[np.random.Generator] = None):
        """Class probabilities ``[B, num_classes]``.

        With ``capture_attention`` the return value is ``(probs, records)``
        where ``records`` holds one :class:`AttentionRecord` per sample.
        """
        attn = [] if capture_attention else None
        probs = T.softmax(self.logits(images, training, rng, attn), axis=-1)
        if not capture_attention:
            return probs
        stacked = np.stack(attn, axis=1)  # [B, depth, heads, S, S]
        return probs, [AttentionRecord(w) for w in stacked]

    __call__ = forward

    def predict_proba(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode probabilities without recording a graph."""
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start:start + batch_size]).data)
        if not out:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(out, axis=0)


def init_weights(config: ViTConfig, seed: int = 0, dtype=None) -> ViTModel:
    """Deterministic random initialization.

    Weight matrices, the class token and the head dense layers draw from a
    normal with std 0.02 truncated at two standard deviations; biases, norm
    shifts and the positional embedding start at zero; norm gains at one.
    """
    dtype = dtype or T.get_default_dtype()
    model = ViTModel.zeros(config, dtype)
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        t.data = _init_value(name, t.shape, rng, dtype)
    return model


def reinit_head(model: ViTModel, seed: int = 0) -> None:
    """Fresh head parameters and batch-norm statistics, backbone untouched."""
    rng = np.random.default_rng(seed)
    dtype = model.params["head.dense1.w"].dtype
    for name, shape in head_shapes(model.config).items():
        model.params[name].data = _init_value(name, shape, rng, dtype)
    for name, buf in model.buffers.items():
        buf[...] = 1.0 if name.endswith("var") else 0.0
