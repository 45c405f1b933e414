"""Frozen-backbone task heads: linear-probe classification, per-patch
segmentation over fused pyramid features, density counting, and
anchor-free box detection with greedy NMS.

Only head (and, for dense tasks, adapter) parameters train; the backbone
checksum is verified unchanged by every finetune run and a gradient on
any backbone parameter is a contract error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tt
from .adapter import Adapter, adapted_forward, assert_backbone_clean
from .backbone import Backbone
from .checkpoint import params_checksum
from .datagen import LabeledSample
from .errors import ConfigError, ContractError
from .interpolate import resample_matrix
from .optim import AdamW
from .tensor import Tensor

TASKS = ("classification", "segmentation", "counting", "detection")


@dataclass
class TaskHead:
    task: str
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)


def init_head(task: str, embed_dim: int, rng: np.random.Generator,
              num_classes: int | None = None,
              use_mean_patch: bool = False) -> TaskHead:
    d = embed_dim

    def w(shape):
        return Tensor(tt.xavier(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    if task == "classification":
        if not num_classes:
            raise ConfigError("classification head needs num_classes")
        in_dim = 2 * d if use_mean_patch else d
        return TaskHead(task, {"w": w((in_dim, num_classes)), "b": zeros((1, num_classes))},
                        {"num_classes": num_classes, "use_mean_patch": use_mean_patch})
    if task == "segmentation":
        if not num_classes:
            raise ConfigError("segmentation head needs num_classes")
        return TaskHead(task, {"w": w((2 * d, num_classes)), "b": zeros((1, num_classes))},
                        {"num_classes": num_classes})
    if task == "counting":
        return TaskHead(task, {"w": w((d, 1)), "b": zeros((1, 1))}, {})
    if task == "detection":
        return TaskHead(task, {"w": w((d, 5)), "b": zeros((1, 5))}, {})
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


# -- classification ---------------------------------------------------------------


def _probe_features(image, backbone: Backbone, head: TaskHead) -> Tensor:
    out = backbone.forward(image)
    if head.meta.get("use_mean_patch"):
        return tt.concat([out.cls, tt.tmean(out.patches, axis=0, keepdims=True)],
                         axis=1)
    return out.cls


def classify_logits(image, backbone: Backbone, head: TaskHead) -> Tensor:
    feats = _probe_features(image, backbone, head)
    return tt.add(tt.matmul(feats, head.params["w"]), head.params["b"])


def classify(image, backbone: Backbone, head: TaskHead) -> np.ndarray:
    """Class distribution for one image (softmax over the linear probe)."""
    return tt.softmax(classify_logits(image, backbone, head), axis=-1).data[0]


# -- segmentation -----------------------------------------------------------------


def _fused_cell_logits(image, backbone: Backbone, adapter: Adapter,
                       head: TaskHead):
    """Per-1/8-cell logits from pyramid level 0 fused with upsampled patch
    tokens; returns (logits Tensor (n1, C), level grid)."""
    adapted = adapted_forward(image, backbone, adapter)
    f1 = adapted.pyramid.level(0)
    grid8 = adapted.pyramid.level_grids[0]
    patch_grid = adapted.backbone.grid
    up = Tensor(resample_matrix(patch_grid, grid8, "bilinear"))
    patches_up = tt.matmul(up, adapted.backbone.patches)
    fused = tt.concat([f1, patches_up], axis=1)
    logits = tt.add(tt.matmul(fused, head.params["w"]), head.params["b"])
    return logits, grid8


def segment_logits(image, backbone: Backbone, adapter: Adapter, head: TaskHead,
                   out_hw: tuple[int, int]) -> Tensor:
    """Per-pixel class logits: cell logits bilinearly upsampled to out_hw."""
    logits, grid8 = _fused_cell_logits(image, backbone, adapter, head)
    up = Tensor(resample_matrix(grid8, out_hw, "bilinear"))
    return tt.matmul(up, logits)


def segment(image, backbone: Backbone, adapter: Adapter, head: TaskHead
            ) -> np.ndarray:
    """Per-pixel label map at the input resolution (argmax per pixel)."""
    h, w = np.asarray(image).shape[:2]
    logits = segment_logits(image, backbone, adapter, head, (h, w))
    return logits.data.argmax(axis=-1).reshape(h, w)


# -- counting ----------------------------------------------------------------------


def count(image, backbone: Backbone, head: TaskHead
          ) -> tuple[np.ndarray, float]:
    """(per-patch density, scalar count). Densities are softplus outputs,
    so the count is always nonnegative; the sum uses math.fsum so patch
    order cannot change the result."""
    density = count_density(image, backbone, head)
    vals = density.data.reshape(-1)
    return vals.copy(), float(math.fsum(vals.tolist()))


def count_density(image, backbone: Backbone, head: TaskHead) -> Tensor:
    out = backbone.forward(image)
    return tt.softplus(tt.add(tt.matmul(out.patches, head.params["w"]),
                              head.params["b"]))


def points_to_patch_counts(points: np.ndarray, canvas: int, patch: int) -> np.ndarray:
    """Bin point annotations into the patch grid (row-major)."""
    side = canvas // patch
    target = np.zeros(side * side)
    for x, y in np.asarray(points).reshape(-1, 2):
        col = min(int(x // patch), side - 1)
        row = min(int(y // patch), side - 1)
        target[row * side + col] += 1.0
    return target


# -- detection ---------------------------------------------------------------------


def detect_raw(image, backbone: Backbone, adapter: Adapter, head: TaskHead):
    """Cell-level raw predictions: returns (raw logits (n1, 5), grid)."""
    adapted = adapted_forward(image, backbone, adapter)
    f1 = adapted.pyramid.level(0)
    raw = tt.add(tt.matmul(f1, head.params["w"]), head.params["b"])
    return raw, adapted.pyramid.level_grids[0]


def decode_boxes(raw: np.ndarray, grid: tuple[int, int], cell: float,
                 image_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(scores, boxes) from per-cell objectness + (l, t, r, b) offsets.

    Offsets pass through softplus and scale by the cell size; boxes are
    clipped to the image.
    """
    gh, gw = grid
    h, w = image_hw
    obj = 1.0 / (1.0 + np.exp(-raw[:, 0]))
    off = np.log1p(np.exp(-np.abs(raw[:, 1:]))) + np.maximum(raw[:, 1:], 0.0)
    off = off * cell
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    cx = (cols + 0.5) * cell
    cy = (rows + 0.5) * cell
    boxes = np.stack([np.clip(cx - off[:, 0], 0, w), np.clip(cy - off[:, 1], 0, h),
                      np.clip(cx + off[:, 2], 0, w), np.clip(cy + off[:, 3], 0, h)],
                     axis=1)
    return obj, boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression keeping higher scores; ties broken
    by lower box index. Returns kept indices in keep order."""
    from .metrics import iou_box

    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou_box(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept


def detect(image, backbone: Backbone, adapter: Adapter, head: TaskHead,
           score_thresh: float = 0.5, nms_iou: float = 0.5
           ) -> list[tuple[float, tuple[float, float, float, float]]]:
    """Scored boxes after thresholding and greedy NMS."""
    img = np.asarray(image)
    raw, grid = detect_raw(image, backbone, adapter, head)
    scores, boxes = decode_boxes(raw.data, grid, cell=8.0, image_hw=img.shape[:2])
    keep = [i for i in range(len(scores)) if scores[i] > score_thresh]
    if not keep:
        return []
    kept_boxes = boxes[keep]
    kept_scores = scores[keep]
    final = nms(kept_boxes, kept_scores, nms_iou)
    return [(float(kept_scores[i]), tuple(float(v) for v in kept_boxes[i]))
            for i in final]


# -- finetuning ---------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    task: str
    steps: int = 200
    lr: float = 5e-3
    batch_size: int = 4
    num_classes: int | None = None
    use_mean_patch: bool = False
    use_adapter: bool | None = None  # default: dense tasks only
    pos_weight: float = 8.0  # detection objectness balancing

    def wants_adapter(self) -> bool:
        if self.use_adapter is not None:
            return self.use_adapter
        return self.task in ("segmentation", "detection")


def _one_hot(label: int, n: int) -> np.ndarray:
    v = np.zeros((1, n))
    v[0, label] = 1.0
    return v


def _sample_loss(sample: LabeledSample, task: str, backbone: Backbone,
                 head: TaskHead, adapter: Adapter | None,
                 cfg: FinetuneConfig) -> Tensor:
    if task == "classification":
        dist = tt.softmax(classify_logits(sample.image, backbone, head), axis=-1)
        return tt.cross_entropy_soft(Tensor(_one_hot(sample.label, cfg.num_classes)),
                                     dist, validate=False)
    if task == "segmentation":
        h, w = sample.image.shape[:2]
        logits = segment_logits(sample.image, backbone, adapter, head, (h, w))
        target = np.eye(cfg.num_classes)[sample.mask.reshape(-1)]
        return tt.cross_entropy_soft(Tensor(target),
                                     tt.softmax(logits, axis=-1), validate=False)
    if task == "counting":
        density = count_density(sample.image, backbone, head)
        patch = backbone.config.patch_size
        target = points_to_patch_counts(sample.points, sample.image.shape[0], patch)
        diff = tt.add(density, Tensor(-target[:, None]))
        return tt.tmean(tt.mul(diff, diff))
    if task == "detection":
        raw, grid = detect_raw(sample.image, backbone, adapter, head)
        gh, gw = grid
        obj_target = np.zeros((gh * gw, 1))
        off_target = np.zeros((gh * gw, 4))
        off_mask = np.zeros((gh * gw, 1))
        for x0, y0, x1, y1, _ in sample.boxes:
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            col = min(int(cx // 8.0), gw - 1)
            row = min(int(cy // 8.0), gh - 1)
            idx = row * gw + col
            obj_target[idx] = 1.0
            # offsets are decoded from the cell center, so regress against
            # cell-center-relative distances
            ccx, ccy = (col + 0.5) * 8.0, (row + 0.5) * 8.0
            off_target[idx] = ((ccx - x0) / 8.0, (ccy - y0) / 8.0,
                               (x1 - ccx) / 8.0, (y1 - ccy) / 8.0)
            off_mask[idx] = 1.0
        weights = np.where(obj_target > 0, cfg.pos_weight, 1.0)
        # logistic loss on the objectness logit: softplus(z) - t*z, which
        # keeps gradient s - t alive where MSE on sigmoid saturates
        z = tt.narrow(raw, 1, 0, 1)
        bce = tt.add(tt.softplus(z), tt.mul(z, Tensor(-obj_target)))
        obj_loss = tt.tmean(tt.mul(Tensor(weights), bce))
        # offsets regress in logit space against softplus-inverse targets
        # (plain least squares; softplus is applied only when decoding)
        z_target = np.log(np.expm1(np.maximum(off_target, 1e-3)))
        off_err = tt.mul(tt.add(tt.narrow(raw, 1, 1, 4), Tensor(-z_target)),
                         Tensor(off_mask))
        denom = max(float(off_mask.sum()) * 4.0, 1.0)
        off_loss = tt.mul(tt.tsum(tt.mul(off_err, off_err)), 1.0 / denom)
        return tt.add(obj_loss, off_loss)
    raise ConfigError(f"unknown task {task!r}")


def subset_for_fraction(samples: Sequence[LabeledSample], fraction: float,
                        seed: int) -> list[LabeledSample]:
    """Seeded resampling for the reduced-data protocol: a permutation
    prefix of exact size round(fraction * n)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(samples)
    k = int(round(fraction * n))
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    return [samples[i] for i in order[:k]]


def finetune_head(samples: Sequence[LabeledSample], backbone: Backbone,
                  cfg: FinetuneConfig, seed: int = 0,
                  adapter: Adapter | None = None
                  ) -> tuple[TaskHead, Adapter | None, list[float]]:
    """Train a task head (plus adapter for dense tasks) on a frozen
    backbone. Returns (head, adapter, loss history); raises ContractError
    if the backbone accumulates gradients or its checksum moves."""
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}")
    if not samples:
        raise ConfigError("empty training set")
    backbone.set_trainable(False)
    checksum_before = params_checksum(backbone.params)
    rng = np.random.default_rng(seed)
    head = init_head(cfg.task, backbone.config.embed_dim, rng,
                     num_classes=cfg.num_classes,
                     use_mean_patch=cfg.use_mean_patch)
    if cfg.wants_adapter() and adapter is None:
        adapter = Adapter(backbone.config, rng=rng)
    trainable = dict(head.params)
    if cfg.wants_adapter():
        trainable.update({f"adapter.{k}": v for k, v in adapter.params.items()})
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=0.0)
    history: list[float] = []
    for step in range(cfg.steps):
        idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)),
                         replace=False)
        terms = [_sample_loss(samples[i], cfg.task, backbone, head,
                              adapter if cfg.wants_adapter() else None, cfg)
                 for i in idx]
        total = terms[0]
        for t in terms[1:]:
            total = tt.add(total, t)
        loss = tt.mul(total, 1.0 / len(terms))
        opt.zero_grad()
        loss.backward()
        assert_backbone_clean(backbone)
        opt.step()
        history.append(float(loss.data))
    if params_checksum(backbone.params) != checksum_before:
        raise ContractError("backbone parameters changed during finetuning")
    return head, adapter if cfg.wants_adapter() else None, history
