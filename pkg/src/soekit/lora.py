"""Low-rank adapters for the U-Net's dense and attention-projection weights.

An adapter holds the factor pair (A, B) of a rank-r update dW = B A for a
base weight W0 of shape (j, k) (row-vector convention, j in, k out): B is
(j, r) and zero-initialised, A is (r, k) and Gaussian-initialised, so the
update is exactly zero until training moves B. The update is always applied
factorised -- x B A -- and only materialised when merging into W0.

Selectable groups mirror a depth-4 reference net's ablation axes
("mid", "down2_up2", "down1_up1", "down0_up3") mapped onto the mini net's
levels; convolutions are never adapted.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from soekit import tensor as T
from soekit.nets import Linear, MiniUnet
from soekit.rng import stream_rng
from soekit.tensor import Tensor


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 1.0
    blocks: tuple = ("mid", "down1_up1", "down0_up3")
    init_std: float = 0.01

    def replace(self, **kw):
        d = {**self.__dict__, **kw}
        d["blocks"] = tuple(d["blocks"])
        return LoraConfig(**d)


class LoraAdapter:
    """One (A, B) factor pair bound to a named base weight."""

    def __init__(self, target: str, j: int, k: int, rank: int, alpha: float, init_std: float, rng):
        if rank >= min(j, k):
            raise ValueError(f"lora rank {rank} must be < min(j, k) = {min(j, k)} for {target!r}")
        self.target = target
        self.rank = rank
        self.alpha = alpha
        self.a = Tensor((rng.standard_normal((rank, k)) * init_std).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros((j, rank), np.float32), requires_grad=True)

    def delta(self, x: Tensor) -> Tensor:
        """Factorised update alpha * ((x @ B) @ A); never materialises B A."""
        return T.mul(T.matmul(T.matmul(x, self.b), self.a), Tensor(np.asarray(self.alpha, x.dtype), dtype=x.dtype))

    def dense_update(self) -> np.ndarray:
        """alpha * B A, materialised only for merging."""
        return (self.alpha * (self.b.data @ self.a.data)).astype(np.float32)

    def param_count(self) -> int:
        return self.a.size + self.b.size


def adapted_matmul(x: Tensor, w0: Tensor, adapter: LoraAdapter) -> Tensor:
    """x @ W0 plus the adapter's factorised low-rank update."""
    return T.add(T.matmul(x, w0), adapter.delta(x))


@dataclass
class LoraAdapterSet:
    """Adapters keyed by target weight name, bound to one base model."""

    base: MiniUnet
    config: LoraConfig
    adapters: dict = field(default_factory=dict)

    def params(self) -> dict:
        out = {}
        for target, ad in self.adapters.items():
            out[f"lora.{target}.A"] = ad.a
            out[f"lora.{target}.B"] = ad.b
        return out

    def param_count(self) -> int:
        return sum(ad.param_count() for ad in self.adapters.values())


def attach(base: MiniUnet, cfg: LoraConfig, seed: int) -> LoraAdapterSet:
    """Create adapters on every dense/attention weight of the selected groups.

    Base weights are flagged non-trainable; adapter factors are trainable.
    Same seed, same config => bit-identical A matrices.
    """
    if not cfg.blocks:
        raise ValueError("lora config selects no blocks")
    groups = base.block_map()
    unknown = [b for b in cfg.blocks if b not in groups]
    if unknown:
        raise ValueError(f"unknown adapter block(s) {unknown}; this net has {sorted(groups)}")
    rng = stream_rng(seed, "lora")
    adapter_set = LoraAdapterSet(base=base, config=cfg)
    for group in cfg.blocks:
        for prefix, block in groups[group]:
            for name, linear in block.adaptable_linears(prefix).items():
                j, k = linear.w.shape
                ad = LoraAdapter(name, j, k, cfg.rank, cfg.alpha, cfg.init_std, rng)
                linear.adapter = ad
                adapter_set.adapters[name] = ad
    base.set_trainable(False)
    return adapter_set


def _linears_by_name(model: MiniUnet) -> dict:
    out = {}
    for group in model.block_map().values():
        for prefix, block in group:
            out.update(block.adaptable_linears(prefix))
    return out


def merge(base: MiniUnet, adapter_set: LoraAdapterSet) -> MiniUnet:
    """New model with W0 + alpha B A folded into each target; adapters dropped.

    The merged copy is marked and cannot be merged again; merging adapters
    into a model they were not attached to is rejected.
    """
    if adapter_set.base is not base:
        raise ValueError("adapter/base mismatch: adapters were attached to a different model")
    if getattr(base, "merged", False):
        raise ValueError("model already carries merged adapters; refusing a second merge")
    merged = copy.deepcopy(base)
    linears = _linears_by_name(merged)
    for target, ad in adapter_set.adapters.items():
        if target not in linears:
            raise ValueError(f"adapter target {target!r} not present in model")
        lin = linears[target]
        if lin.w.shape != (ad.b.shape[0], ad.a.shape[1]):
            raise ValueError(f"adapter/base mismatch on {target!r}: {lin.w.shape}")
        lin.w.data = lin.w.data + ad.dense_update()
        lin.adapter = None
    for lin in _linears_by_name(merged).values():
        lin.adapter = None
    merged.merged = True
    return merged


def strip_adapters(model: MiniUnet):
    """Remove adapter slots (used when loading a plain base)."""
    for lin in _linears_by_name(model).values():
        lin.adapter = None
    return model
