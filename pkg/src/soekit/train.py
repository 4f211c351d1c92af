"""Cross-scale distillation trainer.

One training step follows the published recipe end to end: sample scenes,
build the teacher's crop-and-resized view (which at least doubles the mask's
relative size), encode both views with the shared VAE, compute the masked
reconstruction loss, noise both latents at a shared per-sample timestep with
independent noise draws, run the adapter-augmented student on the original
view and the frozen teacher on the zoomed view, revert both predictions to
clean-latent estimates, and combine the masked denoising loss, the
cross-scale distillation loss (teacher side detached), and the VAE loss into
one weighted objective. Only adapters train (plus the VAE when tuning is
enabled).

Also hosts teacher pretraining (VAE phase, then denoiser phase, on
generic-sized objects) and mask-conditioned DDIM editing with latent and
pixel compositing.
"""

import copy
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from soekit import tensor as T
from soekit.checkpoint import load_checkpoint, save_checkpoint
from soekit.config import RunConfig
from soekit.data import COLOR_NAMES, LABELS, SoeSample, curation_filter
from soekit.lora import LoraConfig, LoraAdapterSet, attach
from soekit.nets import ConditionEmbedder, MiniUnet, ModelConfig, Vae
from soekit.optim import make_optimizer
from soekit.rng import stream_rng
from soekit.schedule import NoiseSchedule, ddim_timesteps, make_schedule
from soekit.tensor import Tensor

DISTILL_CROP_SIDE = 8  # latent-space side both mask crops are resized to

LOSS_CSV_HEADER = "step,L_denoise,L_distill,L_vae,L_total,wall_ms"


class ConfigurationError(RuntimeError):
    pass


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        image_side=cfg.data.image_side,
        latent_factor=cfg.model.latent_factor,
        latent_channels=cfg.model.latent_channels,
        base_width=cfg.model.base_width,
        depth=cfg.model.depth,
        cond_dim=cfg.model.cond_dim,
        time_dim=cfg.model.time_dim,
        groups=cfg.model.groups,
        n_labels=len(LABELS),
        n_colors=len(COLOR_NAMES),
    )


def lora_config(cfg: RunConfig) -> LoraConfig:
    return LoraConfig(
        rank=cfg.lora.rank,
        alpha=cfg.lora.alpha,
        blocks=tuple(cfg.lora.blocks),
        init_std=cfg.lora.init_std,
    )


# -- geometry -------------------------------------------------------------------


def mask_bbox(mask: np.ndarray) -> tuple:
    """Tight (x0, y0, x1, y1) of the nonzero region; half-open on the right."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty (degenerate sample)")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def crop_resize_pair(image: np.ndarray, mask: np.ndarray, s: int):
    """Teacher view: an s x s window centred on the mask, blown up to full size.

    The window is translated (never shrunk) to stay inside the image; the
    crop upsamples bilinearly, the mask with nearest so it stays binary.
    Returns (image', mask') at the original resolution.
    """
    h, w = mask.shape
    x0, y0, x1, y1 = mask_bbox(mask)
    if (x1 - x0) > s or (y1 - y0) > s:
        raise ValueError(f"mask bbox {(x1 - x0)}x{(y1 - y0)} larger than crop size {s}")
    if s > min(h, w):
        raise ValueError(f"crop size {s} exceeds image side {min(h, w)}")
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    wx = int(np.clip(round(cx - s / 2.0), 0, w - s))
    wy = int(np.clip(round(cy - s / 2.0), 0, h - s))

    img_crop = image[wy : wy + s, wx : wx + s]
    msk_crop = mask[wy : wy + s, wx : wx + s]
    img_t = Tensor(np.ascontiguousarray(img_crop.transpose(2, 0, 1))[None])
    up = T.resize_bilinear(img_t, h, w).data[0].transpose(1, 2, 0)
    msk_t = Tensor(msk_crop[None, None])
    up_m = T.resize_nearest(msk_t, h, w).data[0, 0]
    return np.ascontiguousarray(up), np.ascontiguousarray(up_m)


# -- batched schedule helpers ------------------------------------------------------


def _coef(vals, ts, dtype) -> Tensor:
    return Tensor(np.asarray(vals[np.asarray(ts) - 1], dtype=dtype).reshape(-1, 1, 1, 1), dtype=dtype)


def add_noise_batch(z0: Tensor, eps: Tensor, ts, sched: NoiseSchedule) -> Tensor:
    """Per-sample forward noising with a timestep vector."""
    return T.add(T.mul(z0, _coef(sched.alpha_t, ts, z0.dtype)), T.mul(eps, _coef(sched.sigma_t, ts, eps.dtype)))


def predict_z0_batch(z_t: Tensor, eps_pred: Tensor, ts, sched: NoiseSchedule) -> Tensor:
    alphas = sched.alpha_t[np.asarray(ts) - 1]
    if alphas.min() < 1e-8:
        raise ValueError("degenerate reversion: alpha_t below 1e-8 in batch")
    inv = Tensor(np.asarray(1.0 / alphas, z_t.dtype).reshape(-1, 1, 1, 1), dtype=z_t.dtype)
    return T.mul(T.sub(z_t, T.mul(eps_pred, _coef(sched.sigma_t, ts, z_t.dtype))), inv)


# -- losses -----------------------------------------------------------------------


def denoise_loss(eps: Tensor, eps_pred: Tensor, m_latent: Tensor, delta: float = 1.0) -> Tensor:
    """Masked Huber between true and predicted noise, mean over masked entries."""
    try:
        return T.masked_huber(eps_pred, eps, m_latent, delta=delta)
    except ValueError as e:
        raise ValueError(f"denoise_loss: {e}") from None


def distill_loss(z0_hat: Tensor, m_latent: Tensor, z0p_hat: Tensor, mp_latent: Tensor,
                 loss_type: str = "huber", delta: float = 1.0) -> Tensor:
    """Align mask-gated clean-latent crops of student and teacher.

    Each latent is gated by its own mask, cropped to the mask's latent bbox,
    and bilinearly resized to a common 8x8 before the distance. The teacher
    side is detached: gradient flows into the student path only.
    """
    if loss_type not in ("huber", "mse"):
        raise ValueError(f"distill_loss: unknown loss type {loss_type!r}")
    z0p_hat = z0p_hat.detach()
    student_gated = T.mul(z0_hat, m_latent)
    teacher_gated = T.mul(z0p_hat, mp_latent.detach() if mp_latent.requires_grad else mp_latent)
    s_crops, t_crops = [], []
    b = z0_hat.shape[0]
    for i in range(b):
        sx0, sy0, sx1, sy1 = _latent_bbox(m_latent.data[i, 0], "student")
        tx0, ty0, tx1, ty1 = _latent_bbox(mp_latent.data[i, 0], "teacher")
        s_row = T.crop(T.slice_(student_gated, (slice(i, i + 1),)), sy0, sy1, sx0, sx1)
        t_row = T.crop(T.slice_(teacher_gated, (slice(i, i + 1),)), ty0, ty1, tx0, tx1)
        s_crops.append(T.resize_bilinear(s_row, DISTILL_CROP_SIDE, DISTILL_CROP_SIDE))
        t_crops.append(T.resize_bilinear(t_row, DISTILL_CROP_SIDE, DISTILL_CROP_SIDE))
    s_all = T.concat(s_crops, axis=0) if b > 1 else s_crops[0]
    t_all = T.concat(t_crops, axis=0) if b > 1 else t_crops[0]
    if loss_type == "huber":
        return T.huber(s_all, t_all, delta=delta)
    return T.mse(s_all, t_all)


def _latent_bbox(mask2d: np.ndarray, who: str) -> tuple:
    try:
        return mask_bbox(mask2d)
    except ValueError:
        raise ValueError(f"distill_loss: {who} mask empty at latent resolution (degenerate sample)") from None


def vae_recon_loss(x: Tensor, m: Tensor, vae: Vae, delta: float = 1.0, unmasked: bool = False) -> Tensor:
    """Huber between the image and its reconstruction, gated by the mask."""
    recon = vae.decode(vae.encode(x))
    if unmasked:
        return T.huber(recon, x, delta=delta)
    try:
        return T.masked_huber(recon, x, m, delta=delta)
    except ValueError as e:
        raise ValueError(f"vae_recon_loss: {e}") from None


def total_loss(denoise, distill, vae, distill_weight: float, vae_weight: float) -> Tensor:
    """Weighted sum; parts passed as None are absent from the graph entirely."""
    parts = []
    if denoise is not None:
        parts.append(denoise)
    if distill is not None:
        parts.append(T.mul(distill, Tensor(np.asarray(distill_weight, distill.dtype), dtype=distill.dtype)))
    if vae is not None:
        parts.append(T.mul(vae, Tensor(np.asarray(vae_weight, vae.dtype), dtype=vae.dtype)))
    if not parts:
        raise ValueError("total_loss: no active parts")
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out


# -- model bundle + checkpoint glue -------------------------------------------------


@dataclass
class Bundle:
    """Everything a checkpoint holds: networks, adapters, schedule, metadata."""

    cfg: RunConfig
    vae: Vae
    unet: MiniUnet
    cond: ConditionEmbedder
    sched: NoiseSchedule
    adapters: LoraAdapterSet = None
    frozen: bool = False
    merged: bool = False
    role: str = "student"
    step_count: int = 0

    def arrays(self, optimizer=None) -> dict:
        out = {}
        for prefix, module in (("vae", self.vae), ("unet", self.unet), ("cond", self.cond)):
            for name, p in module.params().items():
                out[f"{prefix}.{name}"] = p.data
        if self.adapters is not None:
            for name, p in self.adapters.params().items():
                out[name] = p.data
        if optimizer is not None:
            out.update(optimizer.state_arrays())
        return out

    def config_blob(self, optimizer=None) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "frozen": self.frozen,
            "merged": self.merged,
            "role": self.role,
            "has_adapters": self.adapters is not None,
            "optimizer_step_count": optimizer.step_count if optimizer else self.step_count,
        }


def save_bundle(path, bundle: Bundle, optimizer=None) -> Path:
    return save_checkpoint(path, bundle.arrays(optimizer), bundle.config_blob(optimizer))


def load_bundle(path) -> Bundle:
    arrays, blob = load_checkpoint(path)
    cfg = RunConfig.from_dict(blob["config"])
    mc = model_config(cfg)
    seed = cfg.train.seed
    vae = Vae(mc, seed=seed)
    unet = MiniUnet(mc, seed=seed)
    cond = ConditionEmbedder(mc, seed=seed)
    for prefix, module in (("vae", vae), ("unet", unet), ("cond", cond)):
        for name, p in module.params().items():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise ValueError(f"checkpoint missing array {key!r}")
            if arrays[key].shape != p.shape:
                raise ValueError(f"checkpoint array {key!r} has shape {arrays[key].shape}, expected {p.shape}")
            p.data = arrays[key].copy()
    adapters = None
    if blob.get("has_adapters"):
        adapters = attach(unet, lora_config(cfg), seed=seed)
        for name, p in adapters.params().items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing adapter array {name!r}")
            p.data = arrays[name].copy()
    bundle = Bundle(
        cfg=cfg, vae=vae, unet=unet, cond=cond,
        sched=make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end),
        adapters=adapters,
        frozen=bool(blob.get("frozen", False)),
        merged=bool(blob.get("merged", False)),
        role=blob.get("role", "student"),
        step_count=int(blob.get("optimizer_step_count", 0)),
    )
    if bundle.merged:
        bundle.unet.merged = True
    # loaded models are inert; the Trainer re-establishes trainability itself
    for module in (bundle.vae, bundle.unet, bundle.cond):
        module.set_trainable(False)
    if adapters is not None:
        for p in adapters.params().values():
            p.requires_grad = False
    return bundle


# -- batches -------------------------------------------------------------------------


def batch_tensors(samples, crop_size: int = None):
    """Stacked views for one batch; teacher views only when crop_size is given."""
    xs, ms, xps, mps, label_ids, color_ids = [], [], [], [], [], []
    for s in samples:
        m = s.mask()
        xs.append(s.image.transpose(2, 0, 1))
        ms.append(m[None])
        if crop_size is not None:
            xp, mp = crop_resize_pair(s.image, m, crop_size)
            xps.append(xp.transpose(2, 0, 1))
            mps.append(mp[None])
        label_ids.append(s.label_id)
        color_ids.append(s.color_id)
    return (
        Tensor(np.stack(xs)),
        Tensor(np.stack(ms)),
        Tensor(np.stack(xps)) if xps else None,
        Tensor(np.stack(mps)) if mps else None,
        np.asarray(label_ids),
        np.asarray(color_ids),
    )


@dataclass
class LossReport:
    step: int
    denoise: float
    distill: float
    vae: float
    total: float
    wall_ms: float

    def csv_line(self) -> str:
        return (
            f"{self.step},{self.denoise:.6f},{self.distill:.6f},"
            f"{self.vae:.6f},{self.total:.6f},{self.wall_ms:.3f}"
        )


# -- trainer --------------------------------------------------------------------------


class Trainer:
    """Owns all mutable training state for one adapter-tuning run."""

    def __init__(self, cfg: RunConfig, dataset, teacher: Bundle, loss_csv=None):
        cfg.validate()
        tc = cfg.train
        if not teacher.frozen:
            raise ConfigurationError("teacher not frozen")
        if not dataset:
            raise ConfigurationError("training dataset is empty")
        if not (tc.use_adapters or tc.use_vae_tuning):
            raise ConfigurationError("nothing to train: enable adapters or vae tuning")
        if teacher.cfg.schedule != cfg.schedule or teacher.cfg.model != cfg.model:
            raise ConfigurationError(
                "checkpoint/config mismatch: teacher schedule or model section differs from run config"
            )
        self.cfg = cfg
        self.dataset = list(dataset)
        self.sched = teacher.sched
        self.teacher_unet = teacher.unet
        self.teacher_unet.set_trainable(False)

        self.vae = copy.deepcopy(teacher.vae)
        self.cond = copy.deepcopy(teacher.cond)
        self.cond.set_trainable(False)
        self.student = copy.deepcopy(teacher.unet)
        self.adapters = None
        trainables = {}
        if tc.use_adapters:
            self.adapters = attach(self.student, lora_config(cfg), seed=tc.seed)
            trainables.update(self.adapters.params())
        else:
            self.student.set_trainable(False)
        if tc.use_vae_tuning:
            self.vae.set_trainable(True)
            trainables.update({f"vae.{k}": p for k, p in self.vae.params().items()})
        else:
            self.vae.set_trainable(False)
        self.optimizer = make_optimizer(tc.optimizer, trainables, lr=tc.lr)
        self.loss_csv = Path(loss_csv) if loss_csv else None
        if self.loss_csv:
            self.loss_csv.parent.mkdir(parents=True, exist_ok=True)
            self.loss_csv.write_text(LOSS_CSV_HEADER + "\n")

    def _draw_batch(self, step: int):
        rng = stream_rng(self.cfg.train.seed, "noise", step, 0)
        idx = rng.integers(0, len(self.dataset), size=self.cfg.train.batch_size)
        return [self.dataset[int(i)] for i in idx]

    def train_step(self, step: int, samples=None) -> LossReport:
        t0 = time.perf_counter()
        tc = self.cfg.train
        if tc.use_adapters and self.adapters is None:
            raise ConfigurationError("missing adapters on the student model")
        if any(p.requires_grad for p in self.teacher_unet.params().values()):
            raise ConfigurationError("teacher not frozen")
        samples = samples if samples is not None else self._draw_batch(step)
        x, m, xp, mp, label_ids, color_ids = batch_tensors(samples, tc.crop_size)
        b = x.shape[0]

        z = self.vae.encode(x)
        zp = self.vae.encode(xp)

        vae_part = None
        if tc.use_vae_tuning:
            vae_part = vae_recon_loss(x, m, self.vae, delta=tc.huber_delta, unmasked=tc.unmasked_vae_loss)

        rng = stream_rng(tc.seed, "noise", step, 1)
        ts = rng.integers(1, self.sched.T + 1, size=b)
        eps_s = Tensor(rng.standard_normal(z.shape).astype(np.float32))
        eps_t = Tensor(rng.standard_normal(zp.shape).astype(np.float32))
        z_t = add_noise_batch(z, eps_s, ts, self.sched)
        zp_t = add_noise_batch(zp.detach(), eps_t, ts, self.sched)

        cond = self.cond.embed(label_ids, color_ids, tc.prompt_style)
        m_lat = self.student.latent_mask(m)
        mp_lat = self.teacher_unet.latent_mask(mp)

        eps_pred = self.student.forward(z_t, ts, cond, m)
        den_part = denoise_loss(eps_s, eps_pred, m_lat, delta=tc.huber_delta)

        dist_part = None
        if tc.use_distill:
            epsp_pred = self.teacher_unet.forward(zp_t, ts, cond, mp)
            z0_hat = predict_z0_batch(z_t, eps_pred, ts, self.sched)
            z0p_hat = predict_z0_batch(zp_t, epsp_pred, ts, self.sched)
            dist_part = distill_loss(z0_hat, m_lat, z0p_hat, mp_lat,
                                     loss_type=tc.distill_loss, delta=tc.huber_delta)

        loss = total_loss(den_part, dist_part, vae_part, tc.distill_weight, tc.vae_weight)
        T.backward(loss)
        self.optimizer.step()

        report = LossReport(
            step=step,
            denoise=float(den_part.item()),
            distill=float(dist_part.item()) if dist_part is not None else 0.0,
            vae=float(vae_part.item()) if vae_part is not None else 0.0,
            total=float(loss.item()),
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        if self.loss_csv:
            with open(self.loss_csv, "a") as fh:
                fh.write(report.csv_line() + "\n")
        return report

    def run(self, steps=None) -> list:
        steps = steps if steps is not None else self.cfg.train.steps
        return [self.train_step(i) for i in range(steps)]

    def bundle(self, role="student") -> Bundle:
        return Bundle(
            cfg=self.cfg, vae=self.vae, unet=self.student, cond=self.cond,
            sched=self.sched, adapters=self.adapters, frozen=False, role=role,
            step_count=self.optimizer.step_count,
        )


# -- teacher pretraining ----------------------------------------------------------------


def pretrain_teacher(dataset, cfg: RunConfig, loss_csv=None) -> Bundle:
    """Train VAE then denoiser on generic-sized objects; returns a frozen bundle.

    Phase A fits the autoencoder with full-image reconstruction; phase B
    trains the U-Net and condition embedder with the masked denoising loss
    on the frozen autoencoder.
    """
    cfg.validate()
    if not dataset:
        raise ConfigurationError("pretraining dataset is empty")
    for s in dataset:
        if not curation_filter(s, "train-generic"):
            raise ConfigurationError(f"sample {s.id} is not generic-sized (side fraction outside [1/4, 1/2])")
    tc = cfg.train
    mc = model_config(cfg)
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    vae = Vae(mc, seed=tc.seed)
    unet = MiniUnet(mc, seed=tc.seed)
    cond = ConditionEmbedder(mc, seed=tc.seed)

    csv_fh = None
    if loss_csv:
        Path(loss_csv).parent.mkdir(parents=True, exist_ok=True)
        csv_fh = open(loss_csv, "w")
        csv_fh.write(LOSS_CSV_HEADER + "\n")

    def log(report):
        if csv_fh:
            csv_fh.write(report.csv_line() + "\n")

    def draw(step, tag):
        rng = stream_rng(tc.seed, "noise", step, tag)
        idx = rng.integers(0, len(dataset), size=tc.batch_size)
        return [dataset[int(i)] for i in idx]

    # phase A: autoencoder
    opt_vae = make_optimizer(tc.optimizer, {f"vae.{k}": p for k, p in vae.params().items()}, lr=tc.pretrain_lr)
    for step in range(tc.pretrain_vae_steps):
        t0 = time.perf_counter()
        samples = draw(step, 2)
        x, m, *_ = batch_tensors(samples)
        loss = vae_recon_loss(x, m, vae, delta=tc.huber_delta, unmasked=True)
        T.backward(loss)
        opt_vae.step()
        log(LossReport(step, 0.0, 0.0, float(loss.item()), float(loss.item()),
                       (time.perf_counter() - t0) * 1000.0))

    # phase B: denoiser on the frozen autoencoder
    vae.set_trainable(False)
    trainables = {f"unet.{k}": p for k, p in unet.params().items()}
    trainables.update({f"cond.{k}": p for k, p in cond.params().items()})
    opt = make_optimizer(tc.optimizer, trainables, lr=tc.pretrain_lr)
    for step in range(tc.pretrain_steps):
        t0 = time.perf_counter()
        samples = draw(step, 3)
        x, m, *_ = batch_tensors(samples)
        label_ids = np.asarray([s.label_id for s in samples])
        color_ids = np.asarray([s.color_id for s in samples])
        z = vae.encode(x).detach()
        rng = stream_rng(tc.seed, "noise", step, 4)
        ts = rng.integers(1, sched.T + 1, size=len(samples))
        eps = Tensor(rng.standard_normal(z.shape).astype(np.float32))
        z_t = add_noise_batch(z, eps, ts, sched)
        cond_tokens = cond.embed(label_ids, color_ids, tc.prompt_style)
        eps_pred = unet.forward(z_t, ts, cond_tokens, m)
        loss = denoise_loss(eps, eps_pred, unet.latent_mask(m), delta=tc.huber_delta)
        T.backward(loss)
        opt.step()
        log(LossReport(tc.pretrain_vae_steps + step, float(loss.item()), 0.0, 0.0,
                       float(loss.item()), (time.perf_counter() - t0) * 1000.0))
    if csv_fh:
        csv_fh.close()

    for module in (vae, unet, cond):
        module.set_trainable(False)
    return Bundle(cfg=cfg, vae=vae, unet=unet, cond=cond, sched=sched,
                  frozen=True, role="teacher", step_count=opt.step_count)


# -- editing --------------------------------------------------------------------------


def edit(image: np.ndarray, bbox, label: str, color: str, style: str,
         bundle: Bundle, steps: int, seed: int) -> np.ndarray:
    """Inpaint the bbox with the prompted object; outside pixels are preserved.

    The masked latent region starts from pure noise at t = T; every DDIM step
    re-composites the known region (original latent re-noised to the current
    level), and the decoded result is composited with the input in pixel
    space so content outside the mask is restored exactly.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    h, w = image.shape[:2]
    x0, y0, bw, bh = (int(v) for v in bbox)
    if not (0 <= x0 and 0 <= y0 and bw > 0 and bh > 0 and x0 + bw <= w and y0 + bh <= h):
        raise ValueError(f"bbox {bbox} outside image bounds {w}x{h}")
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS}")
    if color not in COLOR_NAMES:
        raise ValueError(f"unknown color {color!r}; expected one of {COLOR_NAMES}")

    sched = bundle.sched
    mask = np.zeros((h, w), np.float32)
    mask[y0 : y0 + bh, x0 : x0 + bw] = 1.0
    m = Tensor(mask[None, None])
    x = Tensor(image.transpose(2, 0, 1)[None])

    z0 = bundle.vae.encode(x).detach()
    ml = bundle.unet.latent_mask(m)
    ml_np = ml.data
    rng = stream_rng(seed, "eval")
    cond = bundle.cond.embed([LABELS.index(label)], [COLOR_NAMES.index(color)], style)

    noise = rng.standard_normal(z0.shape).astype(np.float32)
    z = Tensor(ml_np * noise + (1.0 - ml_np) * add_noise_int(z0.data, noise, sched.T, sched))
    for t, t_prev in zip(*_step_pairs(sched.T, steps)):
        eps_pred = bundle.unet.forward(z, t, cond, m).detach()
        z_next = _ddim_np(z.data, eps_pred.data, t, t_prev, sched)
        if t_prev > 0:
            keep = add_noise_int(z0.data, rng.standard_normal(z0.shape).astype(np.float32), t_prev, sched)
        else:
            keep = z0.data
        z = Tensor(ml_np * z_next + (1.0 - ml_np) * keep)

    decoded = bundle.vae.decode(z).data[0].transpose(1, 2, 0)
    mask3 = mask[:, :, None]
    out = mask3 * decoded + (1.0 - mask3) * image
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0).astype(np.float32))


def _step_pairs(T_total: int, steps: int):
    ts = ddim_timesteps(T_total, steps)
    return ts[:-1], ts[1:]


def add_noise_int(z0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    return (sched.alpha(t) * z0 + sched.sigma(t) * eps).astype(np.float32)


def _ddim_np(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    z0_hat = (z_t - sched.sigma(t) * eps) / sched.alpha(t)
    if t_prev == 0:
        return z0_hat.astype(np.float32)
    return (sched.alpha(t_prev) * z0_hat + sched.sigma(t_prev) * eps).astype(np.float32)
