"""Feature-pyramid adapter for dense prediction with a frozen backbone.

A small strided convolutional stem derives three feature maps at 1/8,
1/16 and 1/32 of the input resolution, flattened and concatenated into
pyramid tokens F_sp. At each configured transformer block the spatial
feature injector adds pyramid information into the patch tokens,

    X~ = X + gamma * CrossAttn(LN(X), LN(F_sp)),

gated by a zero-initialized per-channel vector gamma (the adapter starts
as an exact identity on the backbone path), and after the block the
multi-scale feature extractor refreshes the pyramid,

    F~ = F_sp + CrossAttn(LN(F_sp), LN(X_next));  F' = F~ + FFN(LN(F~)).

Cross-attention is "sparse": keys are a strided subsample of the source
tokens; stride 1 reproduces dense cross-attention bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .backbone import NUM_PREFIX_TOKENS, Backbone, BackboneOutput, ModelConfig
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int
    key_stride: int = 1
    interaction_blocks: tuple[int, ...] | None = None  # None = every block
    ffn_hidden: int | None = None  # default embed_dim

    def blocks_for(self, model: ModelConfig) -> tuple[int, ...]:
        if self.interaction_blocks is None:
            return tuple(range(model.num_blocks))
        bad = [b for b in self.interaction_blocks if not 0 <= b < model.num_blocks]
        if bad:
            raise ConfigError(f"interaction blocks out of range: {bad}")
        return tuple(self.interaction_blocks)


@dataclass
class PyramidFeatures:
    """Flattened multi-scale features: levels at 1/8, 1/16, 1/32."""

    tokens: Tensor
    level_grids: list[tuple[int, int]]

    def __post_init__(self):
        total = sum(h * w for h, w in self.level_grids)
        if self.tokens.shape[0] != total:
            raise ConfigError(
                f"pyramid token count {self.tokens.shape[0]} != level sum {total}")

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for h, w in self.level_grids:
            out.append(acc)
            acc += h * w
        return out

    def level(self, i: int) -> Tensor:
        h, w = self.level_grids[i]
        return tt.narrow(self.tokens, 0, self.offsets[i], h * w)


@dataclass
class AdaptedOutput:
    backbone: BackboneOutput
    pyramid: PyramidFeatures


def init_adapter_params(model: ModelConfig, cfg: AdapterConfig,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    d = model.embed_dim
    hidden = cfg.ffn_hidden or d
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(tt.xavier(rng, shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    w("stem.c1.w", (8 * 8 * 3, d))
    zeros("stem.c1.b", (1, d))
    w("stem.c2.w", (4 * d, d))
    zeros("stem.c2.b", (1, d))
    w("stem.c3.w", (4 * d, d))
    zeros("stem.c3.b", (1, d))

    for j, _ in enumerate(cfg.blocks_for(model)):
        pre = f"inter{j}."
        zeros(pre + "gamma", (1, d))  # zero gate: identity at initialization
        for side in ("inj", "ext"):
            ones(pre + side + ".lnq.g", (1, d))
            zeros(pre + side + ".lnq.b", (1, d))
            ones(pre + side + ".lnk.g", (1, d))
            zeros(pre + side + ".lnk.b", (1, d))
            w(pre + side + ".wq", (d, d))
            w(pre + side + ".wk", (d, d))
            w(pre + side + ".wv", (d, d))
            w(pre + side + ".wo", (d, d))
        ones(pre + "ext.ln2.g", (1, d))
        zeros(pre + "ext.ln2.b", (1, d))
        w(pre + "ext.ffn.w1", (d, hidden))
        zeros(pre + "ext.ffn.b1", (1, hidden))
        w(pre + "ext.ffn.w2", (hidden, d))
        zeros(pre + "ext.ffn.b2", (1, d))
    return params


class Adapter:
    def __init__(self, model: ModelConfig, cfg: AdapterConfig | None = None,
                 rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.model = model
        self.cfg = cfg or AdapterConfig(embed_dim=model.embed_dim)
        if self.cfg.embed_dim != model.embed_dim:
            raise ConfigError("adapter and backbone widths differ")
        if params is None:
            if rng is None:
                raise ConfigError("Adapter needs params or an rng")
            params = init_adapter_params(model, self.cfg, rng)
        self.params = params
        self.interaction_blocks = self.cfg.blocks_for(model)


def _conv_tokens(x: Tensor, grid: tuple[int, int], w: Tensor, b: Tensor
                 ) -> tuple[Tensor, tuple[int, int]]:
    """2x2 stride-2 convolution over row-major (h*w, d) feature tokens."""
    h, wd = grid
    if h % 2 or wd % 2:
        raise ConfigError(f"grid {grid} not halvable")
    oh, ow = h // 2, wd // 2
    idx = np.empty(oh * ow * 4, dtype=np.intp)
    pos = 0
    for i in range(oh):
        for j in range(ow):
            base = 2 * i * wd + 2 * j
            idx[pos:pos + 4] = (base, base + 1, base + wd, base + wd + 1)
            pos += 4
    gathered = tt.gather_rows(x, idx)
    stacked = tt.reshape(gathered, (oh * ow, 4 * x.shape[1]))
    return tt.relu(tt.add(tt.matmul(stacked, w), b)), (oh, ow)


def build_pyramid(image: np.ndarray, adapter: Adapter) -> PyramidFeatures:
    """Convolutional stem: three levels at 1/8, 1/16, 1/32 resolution."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    if h % 32 or w % 32:
        raise ConfigError(f"adapter input {h}x{w} must be divisible by 32")
    h1, w1 = h // 8, w // 8
    cols = (img.reshape(h1, 8, w1, 8, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h1 * w1, 8 * 8 * 3))
    p = adapter.params
    f1 = tt.relu(tt.add(tt.matmul(Tensor(cols), p["stem.c1.w"]), p["stem.c1.b"]))
    f2, g2 = _conv_tokens(f1, (h1, w1), p["stem.c2.w"], p["stem.c2.b"])
    f3, g3 = _conv_tokens(f2, g2, p["stem.c3.w"], p["stem.c3.b"])
    tokens = tt.concat([f1, f2, f3], axis=0)
    return PyramidFeatures(tokens=tokens, level_grids=[(h1, w1), g2, g3])


def sparse_cross_attention(queries: Tensor, keys: Tensor, params: dict[str, Tensor],
                           prefix: str, stride: int = 1) -> Tensor:
    """Cross-attention where each query attends to every stride-th key.

    Stride 1 is dense cross-attention. Queries/keys are already normalized
    by the caller.
    """
    if queries.shape[1] != keys.shape[1]:
        raise ConfigError("queries and keys must share channel width")
    if stride > 1:
        keys = tt.gather_rows(keys, np.arange(0, keys.shape[0], stride))
    d = queries.shape[1]
    q = tt.matmul(queries, params[prefix + "wq"])
    k = tt.matmul(keys, params[prefix + "wk"])
    v = tt.matmul(keys, params[prefix + "wv"])
    attn = tt.softmax(tt.mul(tt.matmul(q, tt.transpose(k)), 1.0 / np.sqrt(d)), axis=-1)
    return tt.matmul(tt.matmul(attn, v), params[prefix + "wo"])


def _ln(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return tt.layer_norm(x, params[name + ".g"], params[name + ".b"])


def inject(x: Tensor, pyramid: PyramidFeatures, adapter: Adapter,
           slot: int) -> Tensor:
    """Spatial feature injector; only patch tokens receive the update."""
    p = adapter.params
    pre = f"inter{slot}."
    n_patches = x.shape[0] - NUM_PREFIX_TOKENS
    head = tt.narrow(x, 0, 0, NUM_PREFIX_TOKENS)
    patches = tt.narrow(x, 0, NUM_PREFIX_TOKENS, n_patches)
    att = sparse_cross_attention(
        _ln(patches, p, pre + "inj.lnq"),
        _ln(pyramid.tokens, p, pre + "inj.lnk"),
        p, pre + "inj.", stride=adapter.cfg.key_stride)
    patches = tt.add(patches, tt.mul(p[pre + "gamma"], att))
    return tt.concat([head, patches], axis=0)


def extract(pyramid: PyramidFeatures, x_next: Tensor, adapter: Adapter,
            slot: int) -> PyramidFeatures:
    """Multi-scale feature extractor; token count is preserved."""
    p = adapter.params
    pre = f"inter{slot}."
    f = pyramid.tokens
    att = sparse_cross_attention(
        _ln(f, p, pre + "ext.lnq"),
        _ln(x_next, p, pre + "ext.lnk"),
        p, pre + "ext.", stride=adapter.cfg.key_stride)
    f = tt.add(f, att)
    h = tt.relu(tt.add(tt.matmul(_ln(f, p, pre + "ext.ln2"), p[pre + "ext.ffn.w1"]),
                       p[pre + "ext.ffn.b1"]))
    f = tt.add(f, tt.add(tt.matmul(h, p[pre + "ext.ffn.w2"]), p[pre + "ext.ffn.b2"]))
    return PyramidFeatures(tokens=f, level_grids=pyramid.level_grids)


def adapted_forward(image: np.ndarray, backbone: Backbone, adapter: Adapter,
                    check_frozen: bool = True) -> AdaptedOutput:
    """Interleave inject -> block -> extract at the configured blocks.

    The backbone must be frozen; a gradient appearing on any backbone
    parameter is a contract violation detected by assert_backbone_clean.
    """
    if check_frozen and not backbone.frozen:
        raise ContractError("adapted_forward requires a frozen backbone")
    seq = backbone.embed(image)
    x = seq.tokens
    pyramid = build_pyramid(image, adapter)
    slots = {b: i for i, b in enumerate(adapter.interaction_blocks)}
    for i in range(backbone.config.num_blocks):
        slot = slots.get(i)
        if slot is not None:
            x = inject(x, pyramid, adapter, slot)
        x = backbone.run_block(i, x)
        if slot is not None:
            pyramid = extract(pyramid, x, adapter, slot)
    x = backbone.final_norm(x)
    n = seq.n_patches
    out = BackboneOutput(
        cls=tt.narrow(x, 0, 0, 1),
        registers=tt.narrow(x, 0, 1, NUM_PREFIX_TOKENS - 1),
        patches=tt.narrow(x, 0, NUM_PREFIX_TOKENS, n),
        grid=seq.grid,
    )
    return AdaptedOutput(backbone=out, pyramid=pyramid)


def assert_backbone_clean(backbone: Backbone) -> None:
    """Raise if any backbone parameter accumulated a gradient."""
    dirty = [k for k, v in backbone.params.items() if v.grad is not None]
    if dirty:
        raise ContractError(f"gradients reached frozen backbone params: {dirty[:3]}")
