"""Vision-transformer encoder: patch embedding, class/register tokens,
learnable sinusoidal-initialized positional encoding, and stacked Pre-LN
transformer blocks.

Shapes follow the token-sequence convention: an image of H x W x 3 becomes
N = (H/patch) * (W/patch) patch tokens; one class token and four register
tokens are prepended, so the sequence is T = N + 5 rows of width d. Row 0
is always the class token, rows 1-4 the registers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .interpolate import resample_matrix
from .tensor import Tensor

NUM_REGISTER_TOKENS = 4
NUM_PREFIX_TOKENS = NUM_REGISTER_TOKENS + 1  # class token + registers


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one encoder variant."""

    embed_dim: int
    num_heads: int
    num_blocks: int
    ffn_kind: str = "swiglu"  # "swiglu" or "relu"
    patch_size: int = 14
    drop_rate: float = 0.0
    input_resolution: int = 224

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_kind not in ("swiglu", "relu"):
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.input_resolution % self.patch_size != 0:
            raise ConfigError(
                f"input_resolution {self.input_resolution} not divisible by "
                f"patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def base_grid(self) -> tuple[int, int]:
        side = self.input_resolution // self.patch_size
        return (side, side)

    def with_resolution(self, resolution: int) -> "ModelConfig":
        return replace(self, input_resolution=resolution)


# Named variants: (embed dim, heads, blocks). The base variant runs 18
# blocks, not the conventional 12.
PRESETS: dict[str, tuple[int, int, int]] = {
    "base": (768, 12, 18),
    "large": (1024, 16, 24),
    "giant": (1536, 24, 40),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        d, h, n = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(embed_dim=d, num_heads=h, num_blocks=n, **overrides)


def swiglu_hidden_dim(embed_dim: int) -> int:
    """Gated-FFN hidden width, ~8d/3 so parameters match the 4d MLP."""
    return max(int(round(8 * embed_dim / 3)), 1)


@dataclass
class TokenSequence:
    """The T x d embedding matrix with its patch-grid geometry."""

    tokens: Tensor
    grid: tuple[int, int]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def cls(self) -> Tensor:
        return tt.narrow(self.tokens, 0, 0, 1)

    @property
    def registers(self) -> Tensor:
        return tt.narrow(self.tokens, 0, 1, NUM_REGISTER_TOKENS)

    @property
    def patches(self) -> Tensor:
        return tt.narrow(self.tokens, 0, NUM_PREFIX_TOKENS, self.n_patches)


@dataclass
class BackboneOutput:
    cls: Tensor
    registers: Tensor
    patches: Tensor
    grid: tuple[int, int]
    per_block: list[Tensor] | None = None


def sincos_positions(n_pos: int, dim: int) -> np.ndarray:
    """1-D sinusoidal table: interleaved (sin, cos) pairs, zero-padded if odd."""
    out = np.zeros((n_pos, dim))
    half = dim // 2
    if half == 0:
        return out
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = np.arange(n_pos)[:, None] * freqs[None, :]
    out[:, 0:2 * half:2] = np.sin(angles)
    out[:, 1:2 * half:2] = np.cos(angles)
    return out


def sincos_grid(grid: tuple[int, int], dim: int) -> np.ndarray:
    """2-D sinusoidal table: rows encode y in the first half of the
    channels and x in the second half."""
    h, w = grid
    d_row = dim // 2
    d_col = dim - d_row
    row = sincos_positions(h, d_row)
    col = sincos_positions(w, d_col)
    out = np.zeros((h * w, dim))
    out[:, :d_row] = np.repeat(row, w, axis=0)
    out[:, d_row:] = np.tile(col, (h, 1))
    return out


def init_backbone_params(config: ModelConfig, rng: np.random.Generator,
                         requires_grad: bool = True) -> dict[str, Tensor]:
    """Fresh parameter dict; names are stable and sorted-checkpoint safe."""
    d = config.embed_dim
    dk = config.head_dim
    p = config.patch_size
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(tt.xavier(rng, shape), requires_grad=requires_grad)

    def tok(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, shape), requires_grad=requires_grad)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=requires_grad)

    w("patch_embed.w", (p * p * 3, d))
    zeros("patch_embed.b", (1, d))
    tok("cls_token", (1, d))
    tok("reg_tokens", (NUM_REGISTER_TOKENS, d))
    tok("mask_token", (1, d))

    # Learnable positional encoding initialized from fixed sinusoidal
    # values; class/register rows start at zero.
    grid = config.base_grid
    pe = np.zeros((NUM_PREFIX_TOKENS + grid[0] * grid[1], d))
    pe[NUM_PREFIX_TOKENS:] = sincos_grid(grid, d)
    params["pos_embed"] = Tensor(pe, requires_grad=requires_grad)

    for i in range(config.num_blocks):
        pre = f"block{i}."
        params[pre + "ln1.g"] = Tensor(np.ones((1, d)), requires_grad=requires_grad)
        zeros(pre + "ln1.b", (1, d))
        for h in range(config.num_heads):
            w(pre + f"attn.h{h}.wq", (d, dk))
            w(pre + f"attn.h{h}.wk", (d, dk))
            w(pre + f"attn.h{h}.wv", (d, dk))
        w(pre + "attn.wo", (d, d))
        params[pre + "ln2.g"] = Tensor(np.ones((1, d)), requires_grad=requires_grad)
        zeros(pre + "ln2.b", (1, d))
        if config.ffn_kind == "relu":
            hidden = 4 * d
            w(pre + "ffn.w1", (d, hidden))
            zeros(pre + "ffn.b1", (1, hidden))
            w(pre + "ffn.w2", (hidden, d))
            zeros(pre + "ffn.b2", (1, d))
        else:
            hidden = swiglu_hidden_dim(d)
            w(pre + "ffn.w1", (d, hidden))
            zeros(pre + "ffn.b1", (1, hidden))
            w(pre + "ffn.v", (d, hidden))
            zeros(pre + "ffn.bv", (1, hidden))
            w(pre + "ffn.w2", (hidden, d))
            zeros(pre + "ffn.b2", (1, d))

    params["norm.g"] = Tensor(np.ones((1, d)), requires_grad=requires_grad)
    zeros("norm.b", (1, d))
    return params


def extract_patches(image: np.ndarray, patch_size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """(N, patch*patch*3) row-major patch matrix from an (H, W, 3) image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(
            f"resolution {h}x{w} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    patches = (image.reshape(hp, patch_size, wp, patch_size, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(hp * wp, patch_size * patch_size * 3))
    return np.ascontiguousarray(patches), (hp, wp)


def positional_encoding(params: dict[str, Tensor], config: ModelConfig,
                        grid: tuple[int, int]) -> Tensor:
    """Positional rows for ``grid``, bicubically resampled when the grid
    differs from the one the parameter was created for."""
    pe = params["pos_embed"]
    base = config.base_grid
    if grid == base:
        return pe
    head = tt.narrow(pe, 0, 0, NUM_PREFIX_TOKENS)
    patch = tt.narrow(pe, 0, NUM_PREFIX_TOKENS, base[0] * base[1])
    m = Tensor(resample_matrix(base, grid, "bicubic"))
    return tt.concat([head, tt.matmul(m, patch)], axis=0)


def patchify_embed(image: np.ndarray | Tensor, params: dict[str, Tensor],
                   config: ModelConfig, mask: np.ndarray | None = None) -> TokenSequence:
    """Tokenize an image: linear patch embedding, optional mask-token
    substitution, class + register tokens, plus positional encoding."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    flat, grid = extract_patches(img, config.patch_size)
    n = flat.shape[0]
    x = tt.add(tt.matmul(Tensor(flat), params["patch_embed.w"]), params["patch_embed.b"])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != n:
            raise ConfigError(f"mask length {mask.shape[0]} != patch count {n}")
        if mask.any():
            m = Tensor(mask.astype(np.float64)[:, None])
            x = tt.add(tt.mul(x, tt.add(1.0, tt.mul(m, -1.0))),
                       tt.mul(m, params["mask_token"]))
    tokens = tt.concat([params["cls_token"], params["reg_tokens"], x], axis=0)
    tokens = tt.add(tokens, positional_encoding(params, config, grid))
    return TokenSequence(tokens=tokens, grid=grid)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head self-attention: softmax(x Wq (x Wk)^T / sqrt(dk)) x Wv."""
    dk = wq.shape[1]
    scores = tt.mul(tt.matmul(tt.matmul(x, wq), tt.transpose(tt.matmul(x, wk))),
                    1.0 / np.sqrt(dk))
    return tt.matmul(tt.softmax(scores, axis=-1), tt.matmul(x, wv))


def attention_weights(x: np.ndarray, wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Row-stochastic attention matrix (inspection/testing aid)."""
    dk = wq.shape[1]
    scores = (x @ wq) @ (x @ wk).T / np.sqrt(dk)
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str,
                         num_heads: int) -> Tensor:
    """Concat of per-head attention outputs, combined by the square Wo."""
    heads = [attention(x,
                       params[f"{prefix}attn.h{h}.wq"],
                       params[f"{prefix}attn.h{h}.wk"],
                       params[f"{prefix}attn.h{h}.wv"])
             for h in range(num_heads)]
    stacked = heads[0] if num_heads == 1 else tt.concat(heads, axis=1)
    return tt.matmul(stacked, params[f"{prefix}attn.wo"])


def ffn(x: Tensor, params: dict[str, Tensor], prefix: str, kind: str) -> Tensor:
    """Position-wise feed-forward: gated (swiglu) or ReLU MLP."""
    if kind == "relu":
        h = tt.relu(tt.add(tt.matmul(x, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
        return tt.add(tt.matmul(h, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    if kind == "swiglu":
        a = tt.add(tt.matmul(x, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"])
        b = tt.add(tt.matmul(x, params[prefix + "ffn.v"]), params[prefix + "ffn.bv"])
        return tt.add(tt.matmul(tt.mul(a, tt.swish(b)), params[prefix + "ffn.w2"]),
                      params[prefix + "ffn.b2"])
    raise ConfigError(f"unknown ffn kind {kind!r}")


def transformer_block(x: Tensor, params: dict[str, Tensor], config: ModelConfig,
                      block_index: int, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Pre-LN block: x + MHA(LN(x)), then + FFN(LN(.)). Stochastic depth
    drops each residual branch with prob drop_rate during training."""
    pre = f"block{block_index}."

    def branch_scale() -> float | None:
        # None = branch dropped entirely this pass
        if not training or config.drop_rate <= 0.0:
            return 1.0
        if rng is None:
            raise ConfigError("training with drop_rate > 0 requires an rng")
        if rng.random() < config.drop_rate:
            return None
        return 1.0 / (1.0 - config.drop_rate)

    s = branch_scale()
    if s is not None:
        att = multi_head_attention(
            tt.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"]),
            params, pre, config.num_heads)
        x = tt.add(x, tt.mul(att, s)) if s != 1.0 else tt.add(x, att)
    s = branch_scale()
    if s is not None:
        ff = ffn(tt.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"]),
                 params, pre, config.ffn_kind)
        x = tt.add(x, tt.mul(ff, s)) if s != 1.0 else tt.add(x, ff)
    return x


class Backbone:
    """Bundles a config with its parameters and runs the encoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ConfigError("Backbone needs either params or an rng to init from")
            params = init_backbone_params(config, rng)
        self.params = params

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def embed(self, image, mask: np.ndarray | None = None) -> TokenSequence:
        return patchify_embed(image, self.params, self.config, mask=mask)

    def run_block(self, index: int, x: Tensor, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
        return transformer_block(x, self.params, self.config, index,
                                 training=training, rng=rng)

    def final_norm(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.params["norm.g"], self.params["norm.b"])

    def forward(self, image, mask: np.ndarray | None = None, training: bool = False,
                rng: np.random.Generator | None = None,
                collect_blocks: bool = False) -> BackboneOutput:
        seq = self.embed(image, mask=mask)
        x = seq.tokens
        per_block: list[Tensor] | None = [] if collect_blocks else None
        for i in range(self.config.num_blocks):
            x = self.run_block(i, x, training=training, rng=rng)
            if per_block is not None:
                per_block.append(x)
        x = self.final_norm(x)
        n = seq.n_patches
        return BackboneOutput(
            cls=tt.narrow(x, 0, 0, 1),
            registers=tt.narrow(x, 0, 1, NUM_REGISTER_TOKENS),
            patches=tt.narrow(x, 0, NUM_PREFIX_TOKENS, n),
            grid=seq.grid,
            per_block=per_block,
        )
