"""Distillation of a trained (frozen) teacher into a smaller student.

Unlike pretraining, both networks consume the *same* inputs: each student
view (masked globals plus locals) is also fed to the teacher, and the
objectives compare outputs view by view. The teacher is frozen for the
entire job; the student keeps a ReLU MLP feed-forward. No EMA update and
no centering happen in this mode, and teacher/student temperatures are
equal, so a student initialized as an exact copy of an equal-size teacher
starts at loss == mean teacher entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .backbone import Backbone, ModelConfig
from .checkpoint import params_checksum
from .errors import ConfigError
from .optim import AdamW
from .ssl import (AugConfig, HeadConfig, ProjectionHead, ViewBatch,
                  format_log_line, loss_rec, make_views)
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    w_dis: float = 1.0
    w_rec: float = 1.0
    tau: float = 0.1
    head: HeadConfig = field(default_factory=HeadConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def head_config(self) -> HeadConfig:
        # equal temperatures: plain soft-target matching
        return HeadConfig(
            n_prototypes=self.head.n_prototypes,
            hidden_dim=self.head.hidden_dim,
            bottleneck_dim=self.head.bottleneck_dim,
            tau_student=self.tau,
            tau_teacher=self.tau,
            center_momentum=self.head.center_momentum,
        )


class DistillJob:
    """A frozen teacher, a trainable student, and the distillation config."""

    def __init__(self, teacher_backbone: Backbone, teacher_cls_head: ProjectionHead,
                 teacher_patch_head: ProjectionHead, student_config: ModelConfig,
                 config: DistillConfig, rng: np.random.Generator):
        if student_config.ffn_kind != "relu":
            raise ConfigError("distilled students use the ReLU MLP feed-forward")
        self.config = config
        hc = config.head_config()
        self.teacher_backbone = teacher_backbone
        self.teacher_cls_head = self._freeze_head(teacher_cls_head, hc)
        self.teacher_patch_head = self._freeze_head(teacher_patch_head, hc)
        self.teacher_backbone.set_trainable(False)
        self.student_backbone = Backbone(student_config, rng)
        self.student_cls_head = ProjectionHead(student_config.embed_dim, hc, rng,
                                               use_centering=False)
        self.student_patch_head = ProjectionHead(student_config.embed_dim, hc, rng,
                                                 use_centering=False)
        t_protos = self.teacher_cls_head.params["prototypes"].shape[0]
        s_protos = self.student_cls_head.params["prototypes"].shape[0]
        if t_protos != s_protos:
            raise ConfigError(
                f"teacher has {t_protos} prototypes but student head has {s_protos}")
        self.teacher_checksum = self._checksum_teacher()

    @staticmethod
    def _freeze_head(head: ProjectionHead, hc: HeadConfig) -> ProjectionHead:
        head.cfg = hc
        head.use_centering = False
        for p in head.params.values():
            p.requires_grad = False
            p.grad = None
        return head

    def _checksum_teacher(self) -> str:
        params = {f"backbone.{k}": v for k, v in self.teacher_backbone.params.items()}
        params.update({f"cls_head.{k}": v for k, v in self.teacher_cls_head.params.items()})
        params.update({f"patch_head.{k}": v
                       for k, v in self.teacher_patch_head.params.items()})
        return params_checksum(params)

    def verify_teacher_unchanged(self) -> bool:
        return self._checksum_teacher() == self.teacher_checksum

    def student_params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.student_backbone.params.items()}
        out.update({f"cls_head.{k}": v for k, v in self.student_cls_head.params.items()})
        out.update({f"patch_head.{k}": v
                    for k, v in self.student_patch_head.params.items()})
        return out

    def _student_views(self, views: ViewBatch):
        """(view, mask_or_None, is_global) triples, the inputs both nets see."""
        out = []
        for v, (view, mask) in enumerate(
                zip(views.global_views + views.local_views, views.masks)):
            is_global = v < 2
            out.append((view, mask if is_global and mask.any() else None, is_global))
        return out


def distill_step(view_batches: list[ViewBatch], job: DistillJob,
                 optimizer: AdamW, lr: float | None = None) -> dict[str, float]:
    """One student update against frozen teacher targets."""
    cfg = job.config
    dis_terms: list[Tensor] = []
    rec_terms: list[Tensor] = []
    for views in view_batches:
        for view, mask, is_global in job._student_views(views):
            t_out = job.teacher_backbone.forward(view, mask=mask)
            s_out = job.student_backbone.forward(view, mask=mask)
            t_cls = job.teacher_cls_head.project(t_out.cls, "teacher")
            s_cls = job.student_cls_head.project(s_out.cls, "student")
            dis_terms.append(tt.cross_entropy_soft(t_cls, s_cls, validate=False))
            if is_global and mask is not None:
                t_patch = job.teacher_patch_head.project(t_out.patches, "teacher")
                s_patch = job.student_patch_head.project(s_out.patches, "student")
                r, _ = loss_rec(t_patch, s_patch, mask)
                rec_terms.append(r)
    l_dis = _mean_terms(dis_terms)
    l_rec = _mean_terms(rec_terms) if rec_terms else Tensor(0.0)
    total = tt.add(tt.mul(l_dis, cfg.w_dis), tt.mul(l_rec, cfg.w_rec))
    if not np.isfinite(total.data):
        raise NonFiniteError("non-finite distillation loss")
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr=lr)
    job.student_cls_head.renormalize_prototypes()
    job.student_patch_head.renormalize_prototypes()
    return {
        "loss_total": float(total.data),
        "loss_dis": float(l_dis.data),
        "loss_rec": float(l_rec.data),
    }


def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = tt.add(total, t)
    return tt.mul(total, 1.0 / len(terms))


def teacher_entropy(job: DistillJob, view_batches: list[ViewBatch]) -> float:
    """Mean entropy of teacher class-token distributions over the same
    views distill_step would consume."""
    ents = []
    for views in view_batches:
        for view, mask, _ in job._student_views(views):
            out = job.teacher_backbone.forward(view, mask=mask)
            p = job.teacher_cls_head.project(out.cls, "teacher").data.reshape(-1)
            p = np.maximum(p, 1e-12)
            ents.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(ents))


def _cls_dist(backbone: Backbone, head: ProjectionHead, image: np.ndarray,
              role: str) -> np.ndarray:
    out = backbone.forward(image)
    return head.project(out.cls, role).data.reshape(-1)


def kl_teacher_student(job: DistillJob, images: list[np.ndarray]) -> float:
    """Mean KL(teacher || student) of class-token distributions on clean
    images (the held-out monitoring quantity)."""
    kls = []
    for img in images:
        t = _cls_dist(job.teacher_backbone, job.teacher_cls_head, img, "teacher")
        s = _cls_dist(job.student_backbone, job.student_cls_head, img, "student")
        t = np.maximum(t, 1e-12)
        s = np.maximum(s, 1e-12)
        kls.append(float((t * (np.log(t) - np.log(s))).sum()))
    return float(np.mean(kls))


def agreement(teacher_backbone: Backbone, teacher_head: ProjectionHead,
              student_backbone: Backbone, student_head: ProjectionHead,
              images: list[np.ndarray]) -> float:
    """Fraction of images whose argmax prototype coincides."""
    hits = 0
    for img in images:
        t = _cls_dist(teacher_backbone, teacher_head, img, "teacher")
        s = _cls_dist(student_backbone, student_head, img, "student")
        hits += int(np.argmax(t) == np.argmax(s))
    return hits / len(images)


def distill_run(images: list[np.ndarray], job: DistillJob, steps: int,
                lr: float = 2e-3, batch_size: int = 4, seed: int = 0,
                log_lines: list[str] | None = None) -> list[dict[str, float]]:
    """Simple distillation loop over a fixed image pool."""
    rng = np.random.default_rng(seed)
    opt = AdamW(job.student_params(), lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        batch = [make_views(images[i], job.config.aug, seed=(seed << 20) + step * 97 + int(i))
                 for i in idx]
        stats = distill_step(batch, job, opt, lr=lr)
        history.append(stats)
        if log_lines is not None:
            log_lines.append(format_log_line(step, stats, lr, 0.0))
    return history
