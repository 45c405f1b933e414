"""Self-supervised pretraining: multi-view augmentation with patch
masking, momentum teacher, prototype projection heads, and the two
objectives (patch-level reconstruction, class-token distillation).

One training step:
  teacher encodes the clean global views; the student encodes masked
  globals plus the local views. The class-token loss aligns student
  distributions with teacher distributions across views; the patch loss
  matches teacher patch targets at the positions masked out of the
  student's input. The teacher is an EMA of the student and never
  receives gradients (its forward records no graph at all).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as tt
from .backbone import Backbone, ModelConfig, init_backbone_params
from .errors import ConfigError, InputError
from .interpolate import resize_bilinear
from .optim import AdamW, cosine_warmup_lr
from .tensor import NonFiniteError, Tensor


# -- views --------------------------------------------------------------------


@dataclass(frozen=True)
class AugConfig:
    """Augmentation and masking policy for one pretraining run."""

    global_size: int = 32
    local_size: int = 16
    n_local: int = 4
    patch_size: int = 8
    mask_ratio: float = 0.4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.1, 0.4)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    def __post_init__(self):
        if self.global_size % self.patch_size or self.local_size % self.patch_size:
            raise ConfigError("crop sizes must be divisible by the patch size")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")

    @property
    def global_patches(self) -> int:
        return (self.global_size // self.patch_size) ** 2


@dataclass
class ViewBatch:
    """Augmented views of one image plus the student-side patch masks."""

    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    masks: list[np.ndarray]  # one boolean (N,) per student view; locals all-False
    source_seed: int

    def __post_init__(self):
        if len(self.global_views) != 2:
            raise ConfigError("a view batch carries exactly 2 global views")


def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _augment(img: np.ndarray, rng: np.random.Generator, out_size: int,
             scale: tuple[float, float], aug: AugConfig) -> np.ndarray:
    h, w, _ = img.shape
    area = rng.uniform(*scale)
    side = max(int(round(math.sqrt(area) * min(h, w))), 1)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[top:top + side, left:left + side]
    view = resize_bilinear(crop, out_size, out_size)
    if rng.random() < aug.flip_prob:
        view = view[:, ::-1]
    if rng.random() < aug.jitter_prob:
        s = aug.jitter_strength
        brightness, contrast, saturation = rng.uniform(1.0 - s, 1.0 + s, size=3)
        view = view * brightness
        view = view.mean() + (view - view.mean()) * contrast
        gray = _luminance(view)[:, :, None]
        view = gray + (view - gray) * saturation
    if rng.random() < aug.grayscale_prob:
        view = np.repeat(_luminance(view)[:, :, None], 3, axis=2)
    if rng.random() < aug.blur_prob:
        sigma = rng.uniform(*aug.blur_sigma)
        view = gaussian_filter(view, sigma=(sigma, sigma, 0.0))
    return np.clip(view, -1.0, 2.0)


def _patch_mask(rng: np.random.Generator, n_patches: int, ratio: float) -> np.ndarray:
    k = int(round(ratio * n_patches))
    mask = np.zeros(n_patches, dtype=bool)
    if k > 0:
        mask[rng.choice(n_patches, size=k, replace=False)] = True
    return mask


def make_views(image: np.ndarray, aug: AugConfig, seed: int) -> ViewBatch:
    """Deterministic multi-view augmentation of one image."""
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape[0], image.shape[1]) < aug.global_size:
        raise InputError(
            f"image {image.shape[:2]} smaller than global crop {aug.global_size}")
    rng = np.random.Generator(np.random.Philox(seed))
    global_views = [_augment(image, rng, aug.global_size, aug.global_scale, aug)
                    for _ in range(2)]
    local_views = [_augment(image, rng, aug.local_size, aug.local_scale, aug)
                   for _ in range(aug.n_local)]
    n = aug.global_patches
    n_local_patches = (aug.local_size // aug.patch_size) ** 2
    masks = [_patch_mask(rng, n, aug.mask_ratio) for _ in range(2)]
    masks += [np.zeros(n_local_patches, dtype=bool) for _ in range(aug.n_local)]
    return ViewBatch(global_views=global_views, local_views=local_views,
                     masks=masks, source_seed=seed)


# -- projection head ------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    n_prototypes: int = 64
    hidden_dim: int = 64
    bottleneck_dim: int = 32
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9


class ProjectionHead:
    """3-layer MLP to a bottleneck, then a weight-normalized prototype
    layer; outputs are distributions over the prototypes."""

    def __init__(self, in_dim: int, cfg: HeadConfig, rng: np.random.Generator,
                 requires_grad: bool = True, use_centering: bool = True):
        self.cfg = cfg
        self.use_centering = use_centering
        k, h, b = cfg.n_prototypes, cfg.hidden_dim, cfg.bottleneck_dim

        def w(shape):
            return Tensor(tt.xavier(rng, shape), requires_grad=requires_grad)

        protos = rng.normal(0.0, 1.0, (k, b))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.params: dict[str, Tensor] = {
            "w1": w((in_dim, h)), "b1": Tensor(np.zeros((1, h)), requires_grad=requires_grad),
            "w2": w((h, h)), "b2": Tensor(np.zeros((1, h)), requires_grad=requires_grad),
            "w3": w((h, b)), "b3": Tensor(np.zeros((1, b)), requires_grad=requires_grad),
            "prototypes": Tensor(protos, requires_grad=requires_grad),
        }
        self.center = np.zeros(k)

    def logits(self, tokens: Tensor) -> Tensor:
        """Pre-softmax prototype scores for a (rows, d) token matrix."""
        p = self.params
        x = tt.gelu(tt.add(tt.matmul(tokens, p["w1"]), p["b1"]))
        x = tt.gelu(tt.add(tt.matmul(x, p["w2"]), p["b2"]))
        z = tt.add(tt.matmul(x, p["w3"]), p["b3"])
        norm = tt.sqrt(tt.add(tt.tsum(tt.mul(z, z), axis=-1, keepdims=True), 1e-12))
        return tt.matmul(tt.div(z, norm), tt.transpose(p["prototypes"]))

    def project(self, tokens: Tensor, role: str) -> Tensor:
        """Distributions over prototypes; teacher logits are centered and
        sharpened at tau_teacher, student softened at tau_student."""
        logits = self.logits(tokens)
        if role == "teacher":
            if self.use_centering:
                logits = tt.add(logits, Tensor(-self.center))
            return tt.softmax(tt.mul(logits, 1.0 / self.cfg.tau_teacher), axis=-1)
        if role == "student":
            return tt.softmax(tt.mul(logits, 1.0 / self.cfg.tau_student), axis=-1)
        raise ConfigError(f"role must be teacher or student, got {role!r}")

    def update_center(self, teacher_logits: np.ndarray, momentum: float | None = None) -> None:
        m = self.cfg.center_momentum if momentum is None else momentum
        batch_mean = np.asarray(teacher_logits).reshape(-1, self.center.size).mean(axis=0)
        self.center = m * self.center + (1.0 - m) * batch_mean

    def renormalize_prototypes(self) -> None:
        data = self.params["prototypes"].data
        data /= np.linalg.norm(data, axis=1, keepdims=True)


# -- losses ---------------------------------------------------------------------


def loss_rec(teacher_patch_dists: Tensor, student_patch_dists: Tensor,
             mask: np.ndarray) -> tuple[Tensor, bool]:
    """Mean cross-entropy over the masked patch positions only.

    Returns (loss, empty_mask_flag); an empty mask contributes 0.
    """
    mask = np.asarray(mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return Tensor(0.0), True
    t = tt.gather_rows(teacher_patch_dists, idx)
    s = tt.gather_rows(student_patch_dists, idx)
    return tt.cross_entropy_soft(t, s, validate=False), False


def loss_dis(teacher_cls_dists: list[Tensor], student_cls_dists: list[Tensor],
             exclude_diagonal: bool = True) -> Tensor:
    """Class-token cross-entropy averaged over (teacher view, student view)
    pairs; same-view pairs are skipped when the index ranges overlap."""
    terms = []
    for i, t in enumerate(teacher_cls_dists):
        for j, s in enumerate(student_cls_dists):
            if exclude_diagonal and i == j:
                continue
            terms.append(tt.cross_entropy_soft(t, s, validate=False))
    if not terms:
        raise ConfigError("loss_dis has no view pairs to average")
    total = terms[0]
    for term in terms[1:]:
        total = tt.add(total, term)
    return tt.mul(total, 1.0 / len(terms))


def sinkhorn_normalize(logits, iters: int = 3) -> np.ndarray:
    """Alternating column/row normalization of exp(logits) toward uniform
    marginals (rows sum to 1 exactly; columns approach batch/K)."""
    if iters < 1:
        raise ConfigError("sinkhorn_normalize needs iters >= 1")
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"expected (batch, K) logits, got shape {arr.shape}")
    b, k = arr.shape
    q = np.exp(arr - arr.max())
    for _ in range(iters):
        q = q / q.sum(axis=1, keepdims=True)
        q = q / q.sum(axis=0, keepdims=True) * (b / k)
    # final row step restores exact per-sample distributions
    q = q / q.sum(axis=1, keepdims=True)
    return q


# -- teacher/student pair ---------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    w_dis: float = 1.0
    w_rec: float = 1.0
    sk_weight: float = 0.0
    sk_iters: int = 3
    momentum: float = 0.996
    head: HeadConfig = field(default_factory=HeadConfig)
    aug: AugConfig = field(default_factory=AugConfig)


def _clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


class TeacherStudentPair:
    """Student (trainable) and its EMA teacher, with cls/patch heads."""

    def __init__(self, config: ModelConfig, pretrain: PretrainConfig,
                 rng: np.random.Generator):
        self.config = config
        self.pretrain = pretrain
        self.student_backbone = Backbone(config, rng)
        self.student_cls_head = ProjectionHead(config.embed_dim, pretrain.head, rng)
        self.student_patch_head = ProjectionHead(config.embed_dim, pretrain.head, rng)
        self.teacher_backbone = Backbone(
            config, params=_clone_params(self.student_backbone.params))
        self.teacher_cls_head = self._clone_head(self.student_cls_head)
        self.teacher_patch_head = self._clone_head(self.student_patch_head)

    def _clone_head(self, head: ProjectionHead) -> ProjectionHead:
        clone = ProjectionHead.__new__(ProjectionHead)
        clone.cfg = head.cfg
        clone.use_centering = head.use_centering
        clone.params = _clone_params(head.params)
        clone.center = head.center.copy()
        return clone

    def student_params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.student_backbone.params.items()}
        out.update({f"cls_head.{k}": v for k, v in self.student_cls_head.params.items()})
        out.update({f"patch_head.{k}": v for k, v in self.student_patch_head.params.items()})
        return out

    def teacher_params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.teacher_backbone.params.items()}
        out.update({f"cls_head.{k}": v for k, v in self.teacher_cls_head.params.items()})
        out.update({f"patch_head.{k}": v for k, v in self.teacher_patch_head.params.items()})
        return out


def ema_update(pair: TeacherStudentPair, momentum: float | None = None) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    m = pair.pretrain.momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {m}")
    student = pair.student_params()
    for name, tp in pair.teacher_params().items():
        tp.data *= m
        tp.data += (1.0 - m) * student[name].data


# -- the training step -------------------------------------------------------------


def pretrain_step(view_batches: list[ViewBatch], pair: TeacherStudentPair,
                  optimizer: AdamW, lr: float | None = None,
                  rng: np.random.Generator | None = None) -> dict[str, float]:
    """One optimization step over a batch of per-image view sets.

    total = w_dis * L_dis + w_rec * L_rec (+ sk_weight * L_dis with
    Sinkhorn-normalized teacher targets). Backward touches only the
    student; then EMA update and center update.
    """
    cfg = pair.pretrain
    # Masking serves the reconstruction objective only: with w_rec = 0 the
    # student sees clean views and the mask cannot reach the loss.
    use_mask = cfg.w_rec > 0.0
    dis_terms: list[Tensor] = []
    rec_terms: list[Tensor] = []
    sk_pairs: list[tuple[int, Tensor]] = []  # (teacher logit row, student dist)
    teacher_cls_logits: list[np.ndarray] = []
    teacher_patch_logits: list[np.ndarray] = []
    empty_mask_warnings = 0

    for views in view_batches:
        t_cls_dists, t_patch_dists = [], []
        for g in views.global_views:
            out = pair.teacher_backbone.forward(g)
            logit = pair.teacher_cls_head.logits(out.cls)
            teacher_cls_logits.append(logit.data.reshape(-1))
            if pair.teacher_cls_head.use_centering:
                logit = tt.add(logit, Tensor(-pair.teacher_cls_head.center))
            t_cls_dists.append(tt.softmax(
                tt.mul(logit, 1.0 / cfg.head.tau_teacher), axis=-1))
            if use_mask:
                t_patch_dists.append(
                    pair.teacher_patch_head.project(out.patches, "teacher"))
                teacher_patch_logits.append(
                    pair.teacher_patch_head.logits(out.patches).data)
        s_cls_dists, s_patch_dists = [], []
        for v, (view, mask) in enumerate(
                zip(views.global_views + views.local_views, views.masks)):
            is_global = v < 2
            out = pair.student_backbone.forward(
                view, mask=mask if (is_global and use_mask) else None,
                training=True, rng=rng)
            s_cls_dists.append(pair.student_cls_head.project(out.cls, "student"))
            if is_global and use_mask:
                s_patch_dists.append(pair.student_patch_head.project(out.patches, "student"))

        dis_terms.append(loss_dis(t_cls_dists, s_cls_dists))
        if use_mask:
            recs = []
            for i in range(2):
                r, warned = loss_rec(t_patch_dists[i], s_patch_dists[i], views.masks[i])
                empty_mask_warnings += int(warned)
                recs.append(r)
            rec_terms.append(tt.mul(tt.add(recs[0], recs[1]), 0.5))
        else:
            rec_terms.append(Tensor(0.0))
        if cfg.sk_weight > 0.0:
            base = len(teacher_cls_logits) - 2
            for i in range(2):
                for j, s in enumerate(s_cls_dists):
                    if i == j:
                        continue
                    sk_pairs.append((base + i, s))

    n = len(view_batches)
    l_dis = tt.mul(_sum_terms(dis_terms), 1.0 / n)
    l_rec = tt.mul(_sum_terms(rec_terms), 1.0 / n)
    total = tt.add(tt.mul(l_dis, cfg.w_dis), tt.mul(l_rec, cfg.w_rec))
    l_sk_value = 0.0
    if cfg.sk_weight > 0.0 and sk_pairs:
        sk_targets = sinkhorn_normalize(
            np.stack(teacher_cls_logits) / cfg.head.tau_teacher, cfg.sk_iters)
        sk_terms = [tt.cross_entropy_soft(Tensor(sk_targets[i][None, :]), s,
                                          validate=False)
                    for i, s in sk_pairs]
        l_sk = tt.mul(_sum_terms(sk_terms), 1.0 / len(sk_terms))
        l_sk_value = float(l_sk.data)
        total = tt.add(total, tt.mul(l_sk, cfg.sk_weight))

    if not np.isfinite(total.data):
        raise NonFiniteError(
            f"non-finite pretraining loss (dis={float(l_dis.data)}, "
            f"rec={float(l_rec.data)})")

    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr=lr)
    pair.student_cls_head.renormalize_prototypes()
    pair.student_patch_head.renormalize_prototypes()
    ema_update(pair)
    pair.teacher_cls_head.update_center(np.stack(teacher_cls_logits))
    if teacher_patch_logits:
        pair.teacher_patch_head.update_center(
            np.concatenate(teacher_patch_logits, axis=0))

    return {
        "loss_total": float(total.data),
        "loss_dis": float(l_dis.data),
        "loss_rec": float(l_rec.data),
        "loss_sk": l_sk_value,
        "sk_weight": cfg.sk_weight,
        "empty_masks": empty_mask_warnings,
    }


def _sum_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = tt.add(total, t)
    return total


def pretrain_run(images: list[np.ndarray], pair: TeacherStudentPair, steps: int,
                 lr: float = 3e-3, batch_size: int = 4, seed: int = 0,
                 warmup_steps: int = 10,
                 log_lines: list[str] | None = None) -> list[dict[str, float]]:
    """Pretraining loop over a fixed image pool with cosine LR decay."""
    rng = np.random.default_rng(seed)
    opt = AdamW(pair.student_params(), lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        batch = [make_views(images[i], pair.pretrain.aug,
                            seed=(seed << 20) + step * 97 + int(i)) for i in idx]
        step_lr = cosine_warmup_lr(step, steps, lr, warmup_steps=warmup_steps)
        stats = pretrain_step(batch, pair, opt, lr=step_lr)
        history.append(stats)
        if log_lines is not None:
            log_lines.append(format_log_line(step, stats, step_lr,
                                             pair.pretrain.momentum))
    return history


def format_log_line(step: int, stats: dict[str, float], lr: float, momentum: float) -> str:
    parts = [f"step={step}"]
    for key in ("loss_total", "loss_dis", "loss_rec", "loss_sk"):
        if key in stats:
            parts.append(f"{key}={stats[key]:.6f}")
    parts.append(f"lr={lr:.6g}")
    parts.append(f"m={momentum:.6g}")
    return " ".join(parts)
