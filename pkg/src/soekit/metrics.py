"""Masked-region evaluation.

All metrics operate on bbox crops only, never the whole image: a small
frozen probe classifier supplies both the alignment score (probability the
crop matches the prompted shape/color) and the feature vectors behind a
Frechet distance between generated and reference crop distributions.

The probe is trained once on independently generated scenes spanning small
through generic object sizes, and is versioned via the checkpoint format so
metric values are stable across runs.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from soekit import tensor as T
from soekit.checkpoint import load_checkpoint, save_checkpoint
from soekit.data import COLOR_NAMES, LABELS, generate_scene
from soekit.nets import Conv2d, Linear, Module
from soekit.optim import Adam
from soekit.rng import stream_rng
from soekit.tensor import Tensor

PROBE_CROP_SIDE = 32
PROBE_FEATURE_DIM = 32
PROBE_DATA_SUBSTREAM = 9  # distinct from the dataset splits' substreams


# -- cropping -----------------------------------------------------------------------


def masked_crop(image: np.ndarray, bbox, out_side: int = PROBE_CROP_SIDE) -> np.ndarray:
    """Bbox region of an (H, W, 3) image bilinearly resized to out_side^2."""
    h, w = image.shape[:2]
    x, y, bw, bh = (int(v) for v in bbox)
    if bw <= 0 or bh <= 0:
        raise ValueError(f"degenerate bbox {bbox}: width and height must be positive")
    if not (0 <= x and 0 <= y and x + bw <= w and y + bh <= h):
        raise ValueError(f"bbox {bbox} outside image bounds {w}x{h}")
    region = np.ascontiguousarray(image[y : y + bh, x : x + bw].transpose(2, 0, 1))[None]
    out = T.resize_bilinear(Tensor(region), out_side, out_side).data[0]
    return np.ascontiguousarray(out.transpose(1, 2, 0))


# -- probe classifier ----------------------------------------------------------------


class ProbeClassifier(Module):
    """Small convnet: 32x32 crop -> (shape logits, color logits).

    The penultimate dense activations are the feature vector used by the
    Frechet metric. Frozen after training; identical input, identical output.
    """

    def __init__(self, seed: int):
        rng = stream_rng(seed, "probe", 0)
        self.conv1 = Conv2d(rng, 3, 16, 3, 2, 1)
        self.conv2 = Conv2d(rng, 16, 32, 3, 2, 1)
        self.conv3 = Conv2d(rng, 32, 32, 3, 2, 1)
        self.fc = Linear(rng, 32 * 4 * 4, PROBE_FEATURE_DIM)
        self.head_shape = Linear(rng, PROBE_FEATURE_DIM, len(LABELS))
        self.head_color = Linear(rng, PROBE_FEATURE_DIM, len(COLOR_NAMES))
        self.trained = False

    def forward(self, crops: Tensor):
        """crops: (B, 3, 32, 32). Returns (shape_logits, color_logits, features)."""
        h = T.silu(self.conv1.forward(crops))
        h = T.silu(self.conv2.forward(h))
        h = T.silu(self.conv3.forward(h))
        h = T.reshape(h, (h.shape[0], -1))
        feats = T.silu(self.fc.forward(h))
        return self.head_shape.forward(feats), self.head_color.forward(feats), feats

    def probabilities(self, crops_hwc) -> tuple:
        """Softmax (shape, color) probabilities for a batch of HWC crops."""
        self._require_trained()
        x = Tensor(np.stack([c.transpose(2, 0, 1) for c in crops_hwc]))
        ls, lc, _ = self.forward(x)
        return T.softmax(ls).data, T.softmax(lc).data

    def features(self, crops_hwc) -> np.ndarray:
        self._require_trained()
        x = Tensor(np.stack([c.transpose(2, 0, 1) for c in crops_hwc]))
        return self.forward(x)[2].data

    def _require_trained(self):
        if not self.trained:
            raise RuntimeError("probe classifier is untrained; train or load it first")


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, np.float32)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = T.sum_(T.mul(T.log_softmax(logits), Tensor(onehot)))
    return T.mul(picked, Tensor(np.asarray(-1.0 / len(targets), np.float32)))


def train_probe(seed: int, count: int = 1500, steps: int = 700, lr: float = 2e-3,
                image_side: int = 64, batch_size: int = 32) -> ProbeClassifier:
    """Fit the probe on freshly generated scenes over a wide size range."""
    probe = ProbeClassifier(seed)
    crops, shape_ids, color_ids = [], [], []
    wide = (5.0 / image_side, (image_side // 2 + 1) / image_side)
    for i in range(count):
        s = generate_scene((seed, PROBE_DATA_SUBSTREAM, i), wide, image_side=image_side)
        crops.append(masked_crop(s.image, s.bbox).transpose(2, 0, 1))
        shape_ids.append(s.label_id)
        color_ids.append(s.color_id)
    crops = np.stack(crops)
    shape_ids = np.asarray(shape_ids)
    color_ids = np.asarray(color_ids)

    opt = Adam(probe.params(), lr=lr)
    rng = stream_rng(seed, "probe", 1)
    for _ in range(steps):
        idx = rng.integers(0, count, size=batch_size)
        x = Tensor(crops[idx])
        ls, lc, _ = probe.forward(x)
        loss = T.add(_cross_entropy(ls, shape_ids[idx]), _cross_entropy(lc, color_ids[idx]))
        T.backward(loss)
        opt.step()
    probe.set_trainable(False)
    probe.trained = True
    return probe


def save_probe(path, probe: ProbeClassifier, seed: int) -> Path:
    arrays = {f"probe.{k}": p.data for k, p in probe.params().items()}
    return save_checkpoint(path, arrays, {"role": "probe", "probe_seed": seed})


def load_probe(path) -> ProbeClassifier:
    arrays, blob = load_checkpoint(path)
    if blob.get("role") != "probe":
        raise ValueError(f"{path} is not a probe checkpoint")
    probe = ProbeClassifier(seed=int(blob["probe_seed"]))
    for name, p in probe.params().items():
        p.data = arrays[f"probe.{name}"].copy()
    probe.set_trainable(False)
    probe.trained = True
    return probe


# -- Frechet distance -----------------------------------------------------------------


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, shrinkage: float = 1e-6) -> float:
    """2-Wasserstein distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), covariances
    with 1/(N-1) normalisation, matrix roots by symmetric eigendecomposition
    with negative eigenvalues clamped to zero, and shrinkage*I added to both
    covariances to stabilise near-singular small-sample fits.
    """
    a = np.asarray(feats_a, np.float64)
    b = np.asarray(feats_b, np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (N,d)/(M,d), got {a.shape} and {b.shape}")
    n, d = a.shape
    m = b.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"need at least 2 samples per side, got {n} and {m}")
    if n <= d or m <= d:
        warnings.warn(
            f"sample counts ({n}, {m}) do not exceed feature dim {d}; covariance estimates are singular",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False) + shrinkage * np.eye(d)
    cb = np.cov(b, rowvar=False) + shrinkage * np.eye(d)
    sqrt_a = _sym_sqrt(ca)
    inner = _sym_sqrt(sqrt_a @ cb @ sqrt_a)
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(inner))
    return max(dist, 0.0)


# -- alignment ----------------------------------------------------------------------


def alignment_score(crop: np.ndarray, prompted_label: str, prompted_color: str,
                    style: str, probe: ProbeClassifier) -> float:
    """Probe probability that the crop matches the prompt, in [0,1].

    Label-only style scores the label probability; color+label takes the
    geometric mean of label and color probabilities.
    """
    if style not in ("label_only", "color_label"):
        raise ValueError(f"unknown prompt style {style!r}")
    ps, pc = probe.probabilities([crop])
    p_label = float(ps[0, LABELS.index(prompted_label)])
    if style == "label_only":
        return p_label
    p_color = float(pc[0, COLOR_NAMES.index(prompted_color)])
    return float(np.sqrt(p_label * p_color))


# -- effective area -----------------------------------------------------------------


def effective_area(image_side: int, mask_side: int, latent_factor: int, depth: int) -> int:
    """Feature-map footprint of a mask after latent + U-Net downsampling.

    round(map_side * mask_fraction) with half-away-from-zero rounding, where
    map_side = image_side / (latent_factor * 2^depth). Collapsing to <= 1
    cell is the conditioning-starvation regime for small objects.
    """
    if image_side <= 0 or mask_side <= 0 or latent_factor <= 0 or depth < 0:
        raise ValueError("all arguments must be positive (depth may be zero)")
    if mask_side > image_side:
        raise ValueError(f"mask side {mask_side} exceeds image side {image_side}")
    map_side = image_side / (latent_factor * (2 ** depth))
    raw = map_side * (mask_side / image_side)
    return max(int(np.floor(raw + 0.5)), 0)


# -- evaluation protocol ---------------------------------------------------------------


@dataclass
class StyleRow:
    style: str
    alignment_mean: float
    frechet: float
    n: int


@dataclass
class MetricsReport:
    rows: list
    seed: int
    config_echo: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        lines = ["style,alignment_mean,frechet,n"]
        for r in self.rows:
            lines.append(f"{r.style},{r.alignment_mean:.6f},{r.frechet:.6f},{r.n}")
        return "\n".join(lines) + "\n"


def metrics_from_crop_pairs(gen_crops, ref_crops, labels, colors, style, probe) -> StyleRow:
    """Alignment over generated crops + Frechet between the two crop sets."""
    scores = [
        alignment_score(c, lab, col, style, probe)
        for c, lab, col in zip(gen_crops, labels, colors)
    ]
    fd = frechet_distance(probe.features(gen_crops), probe.features(ref_crops))
    return StyleRow(style=style, alignment_mean=float(np.mean(scores)), frechet=fd, n=len(gen_crops))


def evaluate(bundle, val_samples, style: str, seed: int, probe: ProbeClassifier,
             ddim_steps: int = 10, max_samples: int = None) -> MetricsReport:
    """Edit every validation sample at its own bbox/prompt and score the crops.

    Per-sample noise comes from substreams of `seed`, so reports are
    reproducible regardless of evaluation order or count.
    """
    from soekit.rng import child_seed
    from soekit.train import edit

    if not val_samples:
        raise ValueError("validation split is empty")
    samples = sorted(val_samples, key=lambda s: s.id)
    if max_samples is not None:
        samples = samples[:max_samples]
    side = bundle.cfg.data.image_side
    for s in samples:
        if s.image.shape[0] != side or s.image.shape[1] != side:
            raise ValueError(
                f"checkpoint/config mismatch: sample {s.id} is {s.image.shape[1]}x{s.image.shape[0]}, "
                f"checkpoint expects {side}x{side}"
            )
    gen_crops, ref_crops, labels, colors = [], [], [], []
    for i, s in enumerate(samples):
        out = edit(s.image, s.bbox, s.label, s.color, style, bundle,
                   steps=ddim_steps, seed=child_seed(seed, "eval", i))
        gen_crops.append(masked_crop(out, s.bbox))
        ref_crops.append(masked_crop(s.image, s.bbox))
        labels.append(s.label)
        colors.append(s.color)
    row = metrics_from_crop_pairs(gen_crops, ref_crops, labels, colors, style, probe)
    return MetricsReport(rows=[row], seed=seed, config_echo=bundle.cfg.to_dict())


def write_details_csv(path, sample_ids, scores):
    lines = ["id,alignment"]
    for sid, sc in zip(sample_ids, scores):
        lines.append(f"{sid},{sc:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
