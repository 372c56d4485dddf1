"""Three-stage training.

Stage 1 pretrains the viewport descriptor on labeled 2D patches.  Stage 2
trains the local branch (descriptor nearly frozen, graph layers at full
rate) and the global branch independently against MOS.  Stage 3 jointly
tunes everything with the branches at a vanishing rate and the 2-to-1
regressor learning from scratch.  All loops are deterministic given the
config seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import ManifestRecord, load_images, make_pretrain_patches
from .model import QualityModel
from .nn.optim import Adam


@dataclass(frozen=True)
class TrainConfig:
    """Batching, per-stage rates/schedules, epochs, and the run seed.

    Rate structure: stage-2 graph layers decay 4x periodically over a
    descriptor pinned at 1e-6; the stage-2 global head runs 10x above its
    streams and drops 10x midway; stage-3 branches crawl at 1e-6 under a
    1e-2 regressor.  Epoch counts and the 1e-3 stage-1 rate are desk-scale
    (fresh weights, minutes on a CPU).
    """

    batch_size: int = 8
    seed: int = 0
    stage1_epochs: int = 30
    stage1_lr: float = 1e-3
    stage2_local_epochs: int = 25
    stage2_global_epochs: int = 40
    stage2_local_lr: float = 3e-3
    stage2_descriptor_lr: float = 1e-6
    stage2_decay_factor: float = 0.25
    stage2_decay_every: int = 16
    stage2_global_head_lr: float = 1e-2
    stage2_global_stream_lr: float = 1e-3
    stage2_global_decay_frac: float = 0.5
    stage3_epochs: int = 12
    stage3_branch_lr: float = 1e-6
    stage3_regressor_lr: float = 1e-2
    n_pretrain_patches: int = 600

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch normalization)")
        for name in ("stage1_lr", "stage2_local_lr", "stage2_descriptor_lr",
                     "stage2_global_head_lr", "stage2_global_stream_lr",
                     "stage3_branch_lr", "stage3_regressor_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PreparedSample:
    """Model-independent per-image tensors, computed once per run."""

    views: np.ndarray          # (n, 3, s, s) descriptor-ready
    a_hat: np.ndarray          # (n, n) float64
    global_in: np.ndarray      # (3, H, W) stream-ready
    mos: float
    ref_id: str
    path: str


@dataclass
class LogRow:
    stage: str
    epoch: int
    loss: float
    lr: float


def prepare_samples(model: QualityModel, records: list[ManifestRecord],
                    images: list[np.ndarray] | None = None) -> list[PreparedSample]:
    """Run the (parameter-free) detection/extraction pipeline over a dataset."""
    if images is None:
        images = load_images(records)
    out = []
    for rec, img in zip(records, images):
        views, a_hat, global_in = model.prepare_sample(img, name=rec.image_path)
        out.append(PreparedSample(views, a_hat, global_in, rec.mos,
                                  rec.ref_id, rec.image_path))
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain_descriptor(model: QualityModel, patches: np.ndarray,
                        labels: np.ndarray, tc: TrainConfig) -> list[LogRow]:
    """Stage 1: minimize squared error of patch quality predictions."""
    if len(patches) == 0:
        raise ValueError("empty patch dataset")
    rng = np.random.default_rng([tc.seed, 1])
    opt = Adam(model.descriptor.params() + model.desc_head.params(), lr=tc.stage1_lr)
    logs: list[LogRow] = []
    for epoch in range(tc.stage1_epochs):
        losses = []
        for idx in _batches(len(patches), tc.batch_size, rng):
            if len(idx) < 2:
                continue  # batch norm needs company
            batch = patches[idx]
            y = np.array([model.normalize_label(v) for v in labels[idx]])
            opt.zero_grad()
            pred = model.patch_forward(batch, train=True)
            err = pred - y
            losses.append(float(np.mean(err * err)))
            model.patch_backward((2.0 / len(idx)) * err)
            opt.step()
        logs.append(LogRow("stage1", epoch, float(np.mean(losses)), opt.lr))
    return logs


def pretrain_local(model: QualityModel, samples: list[PreparedSample],
                   tc: TrainConfig) -> list[LogRow]:
    """Stage 2a: local branch against MOS; descriptor pinned near-frozen."""
    rng = np.random.default_rng([tc.seed, 2])
    opt_gcn = Adam(model.gcn.params(), lr=tc.stage2_local_lr)
    opt_desc = Adam(model.descriptor.params(), lr=tc.stage2_descriptor_lr)
    logs: list[LogRow] = []
    for epoch in range(tc.stage2_local_epochs):
        if epoch > 0 and epoch % tc.stage2_decay_every == 0:
            opt_gcn.scale_lr(tc.stage2_decay_factor)
        losses = []
        for idx in _batches(len(samples), tc.batch_size, rng):
            opt_gcn.zero_grad()
            opt_desc.zero_grad()
            q = model.local_forward_batch([samples[i].views for i in idx],
                                          [samples[i].a_hat for i in idx],
                                          train=True)
            y = np.array([model.normalize_label(samples[i].mos) for i in idx])
            err = q - y
            losses.extend((err * err).tolist())
            model.local_backward_batch(2.0 * err / len(idx))
            opt_gcn.step()
            opt_desc.step()
        logs.append(LogRow("stage2-local", epoch, float(np.mean(losses)), opt_gcn.lr))
    return logs


def pretrain_global(model: QualityModel, samples: list[PreparedSample],
                    tc: TrainConfig) -> list[LogRow]:
    """Stage 2b: global branch against MOS.

    No pretrained stream weights are bundled, so the streams train here at
    a tenth of the head's rate instead of staying frozen.
    """
    rng = np.random.default_rng([tc.seed, 3])
    opt_head = Adam(model.global_head.params(), lr=tc.stage2_global_head_lr)
    opt_streams = Adam(model.stream_s.params() + model.stream_v.params(),
                       lr=tc.stage2_global_stream_lr)
    decay_at = max(1, int(tc.stage2_global_decay_frac * tc.stage2_global_epochs))
    logs: list[LogRow] = []
    for epoch in range(tc.stage2_global_epochs):
        if epoch == decay_at:
            opt_head.scale_lr(0.1)
            opt_streams.scale_lr(0.1)
        losses = []
        for idx in _batches(len(samples), tc.batch_size, rng):
            opt_head.zero_grad()
            opt_streams.zero_grad()
            for i in idx:
                s = samples[i]
                q = model.global_forward_prepared(s.global_in, train=True)
                err = q - model.normalize_label(s.mos)
                losses.append(err * err)
                model.global_backward(2.0 * err / len(idx))
            opt_head.step()
            opt_streams.step()
        logs.append(LogRow("stage2-global", epoch, float(np.mean(losses)), opt_head.lr))
    return logs


def joint_train(model: QualityModel, samples: list[PreparedSample],
                tc: TrainConfig) -> list[LogRow]:
    """Stage 3: end-to-end tuning; branches crawl, regressor learns."""
    rng = np.random.default_rng([tc.seed, 4])
    opt_reg = Adam(model.regressor.params(), lr=tc.stage3_regressor_lr)
    opt_branches = Adam(model.branch_params(), lr=tc.stage3_branch_lr)
    logs: list[LogRow] = []
    for epoch in range(tc.stage3_epochs):
        losses = []
        for idx in _batches(len(samples), tc.batch_size, rng):
            opt_reg.zero_grad()
            opt_branches.zero_grad()
            # Local branch runs as one batch; each global forward is paired
            # with its backward immediately (stream caches hold one image).
            q_l = model.local_forward_batch([samples[i].views for i in idx],
                                            [samples[i].a_hat for i in idx],
                                            train=True)
            g_local = np.zeros(len(idx))
            for k, i in enumerate(idx):
                s = samples[i]
                q_g = model.global_forward_prepared(s.global_in, train=True)
                q = model.regress(q_l[k], q_g)
                err = q - model.normalize_label(s.mos)
                losses.append(err * err)
                g = model.regressor.backward(
                    np.full((1, 1), 2.0 * err / len(idx), dtype=model.dtype))
                g_local[k] = g[0, 0]
                model.global_backward(float(g[0, 1]))
            model.local_backward_batch(g_local)
            opt_reg.step()
            opt_branches.step()
        logs.append(LogRow("stage3", epoch, float(np.mean(losses)), opt_reg.lr))
    return logs


def train_all(model: QualityModel, records: list[ManifestRecord],
              tc: TrainConfig, images: list[np.ndarray] | None = None,
              stages: tuple[int, ...] = (1, 2, 3),
              progress=None) -> list[LogRow]:
    """Run the requested stages over a training set; returns the joined log."""
    if not records:
        raise ValueError("empty training set")
    if images is None:
        images = load_images(records)
    # Map training labels onto [0.5, 1.5]: positive (the graph head ends in a
    # softplus, so Q_L cannot go negative) and near the scale fresh networks
    # start at, which keeps the step budget spent on ranking, not drift.
    mos = np.array([r.mos for r in records], dtype=np.float64)
    span = max(float(mos.max() - mos.min()), 1e-6)
    model.set_label_scale(float(mos.min()) - 0.5 * span, span)
    logs: list[LogRow] = []

    def note(msg):
        if progress is not None:
            progress(msg)

    if 1 in stages:
        note("stage 1: pretraining descriptor on synthetic 2D patches")
        patches, labels = make_pretrain_patches(
            tc.n_pretrain_patches, size=model.cfg.viewport_size, seed=tc.seed)
        logs += pretrain_descriptor(model, patches, labels, tc)
    if 2 in stages or 3 in stages:
        note("preparing viewpoint/viewport cache")
        samples = prepare_samples(model, records, images)
        if 2 in stages:
            note("stage 2: pretraining local branch")
            logs += pretrain_local(model, samples, tc)
            note("stage 2: pretraining global branch")
            logs += pretrain_global(model, samples, tc)
        if 3 in stages:
            note("stage 3: joint optimization")
            logs += joint_train(model, samples, tc)
    return logs


def write_training_log(path, logs: list[LogRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "loss", "lr"])
        for row in logs:
            writer.writerow([row.epoch, row.stage, f"{row.loss:.9g}", f"{row.lr:.9g}"])
