"""Per-iteration pruning decisions and the training step that interleaves them with SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .network import PASS_THROUGH, Add, Conv, Input, Layer, Network
from .params import FilterMask, FilterSkeleton, SharedMaskGroup, slice_mask
from .regularizers import PenaltyConfig, fm_penalty_tensor, fs_penalty, fs_prox_step


@dataclass
class Phase:
    epochs: int
    alpha: float = 0.0
    beta: float = 0.0
    rho: float = 0.0
    delta: float = 0.0
    lr: float = 0.1
    # epoch offsets (within the phase) at which lr is divided by 10
    lr_milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("phase epochs must be non-negative")
        if min(self.alpha, self.beta, self.rho, self.delta) < 0:
            raise ValueError("alpha, beta, rho and delta must be non-negative")
        if self.lr <= 0:
            raise ValueError("phase learning rate must be positive")

    @property
    def prunes(self) -> bool:
        return self.rho > 0 or self.delta > 0

    @property
    def frozen_structure(self) -> bool:
        return self.alpha == self.beta == self.rho == self.delta == 0

    def lr_at(self, epoch_in_phase: int) -> float:
        drops = sum(1 for m in self.lr_milestones if epoch_in_phase >= m)
        return self.lr * (0.1**drops)


@dataclass
class SmofSchedule:
    phases: list[Phase] = field(default_factory=list)
    r: float = 1.0
    check_interval: int = 1

    def __post_init__(self):
        if not 0 <= self.r <= 1:
            raise ValueError("learnable mask fraction r must lie in [0, 1]")
        if self.check_interval < 1:
            raise ValueError("check_interval must be a positive integer")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def phase_at(self, epoch: int) -> tuple[int, Phase, int]:
        """(phase index, phase, epoch offset inside the phase) for a global epoch."""
        start = 0
        for k, p in enumerate(self.phases):
            if epoch < start + p.epochs:
                return k, p, epoch - start
            start += p.epochs
        raise IndexError(f"epoch {epoch} beyond schedule of {start} epochs")


# ---------------------------------------------------------------------------
# pruning checks


def fs_peel_check(fs: FilterSkeleton, rho: float) -> bool:
    """Peel the outermost active slice if its l1 mass falls below ``rho * 4(K+1-2i)``."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    i = fs.i_min
    K = fs.kernel_size
    if i > K // 2:
        return False
    mass = float(np.abs(fs.values.data[slice_mask(K, i)]).astype(np.float64).sum())
    if mass < rho * 4 * (K + 1 - 2 * i):
        fs.freeze_slice()
        return True
    return False


def fm_threshold_check(fm: FilterMask, delta: float) -> int:
    """Prune learnable entries with |value| < delta; returns the number pruned."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    vals = fm.values.data
    cand = fm.active & (np.abs(vals) < delta)
    if not cand.any():
        return 0
    survivors = ~fm.pruned & ~cand
    if not survivors.any():
        idx = np.flatnonzero(cand)
        keep = idx[np.argmax(np.abs(vals[idx]))]
        cand[keep] = False
    fm.prune(cand)
    return int(cand.sum())


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD over conv/linear/bn weights and the active Filter Mask entries.

    Skeletons are excluded; they move only through the proximal step.
    """

    def __init__(self, model: Network, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def _update(self, key: str, value: np.ndarray, grad: np.ndarray, lr: float, active=None) -> None:
        v = self.velocity.get(key)
        if self.momentum:
            v = grad.copy() if v is None else self.momentum * v + grad
            self.velocity[key] = v
        else:
            v = grad
        if active is None:
            value -= value.dtype.type(lr) * v
        else:
            value[active] -= value.dtype.type(lr) * v[active]

    def step(self, lr: float) -> None:
        model = self.model
        for key, p in model.weight_params():
            if p.grad is None:
                raise ValueError(f"missing gradient for {key}")
            g = p.grad
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            self._update(key, p.data, g, lr)
        if not model.masked:
            return
        for gid, fm in model.masks.items():
            active = fm.active
            if not active.any():
                continue
            if fm.values.grad is None:
                raise ValueError(f"missing gradient for mask {gid}")
            g = np.where(active, fm.values.grad, 0).astype(fm.values.dtype)
            self._update(f"mask:{gid}", fm.values.data, g, lr, active)

    def forget(self, key: str, idx) -> None:
        """Zero the momentum of entries that were just frozen or pruned."""
        if key in self.velocity:
            self.velocity[key][idx] = 0

    def state(self) -> dict[str, np.ndarray]:
        return self.velocity


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class IterationResult:
    loss: float
    data_loss: float
    fs_penalty: float
    fm_penalty: float
    peeled: int = 0
    pruned: int = 0


def run_pruning_checks(model: Network, phase: Phase, optimizer: SGD | None = None) -> tuple[int, int]:
    peeled = pruned = 0
    if phase.rho > 0:
        for _, fs in model.skeletons():
            peeled += fs_peel_check(fs, phase.rho)
    if phase.delta > 0:
        for gid, fm in model.masks.items():
            before = fm.pruned.copy()
            n = fm_threshold_check(fm, phase.delta)
            if n and optimizer is not None:
                optimizer.forget(f"mask:{gid}", fm.pruned & ~before)
            pruned += n
    return peeled, pruned


def compute_loss(model: Network, images, labels, cfg: PenaltyConfig):
    """Forward pass; returns (graph loss, data loss, fm penalty) tensors.

    The graph loss covers the data term and the mask l1 term. The skeleton
    penalty stays out of the graph so skeleton gradients are those of the
    data loss alone, as the proximal step expects.
    """
    logits = model.forward(ad.Tensor(images, dtype=model.dtype))
    data = ad.softmax_cross_entropy(logits, labels)
    fm_pen = fm_penalty_tensor(model, cfg)
    total = data if fm_pen is None else ad.add(data, fm_pen)
    return total, data, fm_pen


def training_iteration(
    model: Network,
    batch: tuple[np.ndarray, np.ndarray],
    phase: Phase,
    optimizer: SGD,
    iteration: int,
    lr: float,
    schedule: SmofSchedule | None = None,
    penalty_mode: str = "group-adaptive",
    scaled_gradient_step: bool = False,
) -> IterationResult:
    """Pruning checks, one SGD step on weights and masks, one prox step on skeletons."""
    interval = schedule.check_interval if schedule is not None else 1
    cfg = PenaltyConfig(phase.alpha, phase.beta, penalty_mode, scaled_gradient_step)
    peeled = pruned = 0
    if model.masked and phase.prunes and iteration % interval == 0:
        peeled, pruned = run_pruning_checks(model, phase, optimizer)

    model.train()
    model.zero_grad()
    images, labels = batch
    fs_pen = fs_penalty(model, cfg)
    total, data, fm_pen = compute_loss(model, images, labels, cfg)
    ad.backward(total)
    optimizer.step(lr)
    if model.masked:
        for _, fs in model.skeletons():
            if fs.num_slices == 0:
                continue  # 1x1 kernels have nothing to peel
            fs_prox_step(fs, fs.values.grad, lr, cfg)
    fm_val = float(fm_pen.data) if fm_pen is not None else 0.0
    return IterationResult(
        loss=float(data.data) + fm_val + fs_pen,
        data_loss=float(data.data),
        fs_penalty=fs_pen,
        fm_penalty=fm_val,
        peeled=peeled,
        pruned=pruned,
    )


# ---------------------------------------------------------------------------
# shared mask groups


class _UnionFind:
    def __init__(self, order: dict[str, int]):
        self.parent: dict[str, str] = {}
        self.order = order

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earlier-declared name as root for stable group ids
            self.parent[max(ra, rb, key=self.order.get)] = min(ra, rb, key=self.order.get)


def _producer(layers: dict[str, Layer], name: str) -> str:
    """Walk back through channel-preserving layers to the conv/add/input that made ``name``."""
    layer = layers[name]
    while layer.kind in PASS_THROUGH:
        layer = layers[layer.inputs[0]]
    return layer.name


def build_shared_groups(layers: dict[str, Layer]) -> list[SharedMaskGroup]:
    """Group convs whose outputs meet (directly or through chains of adds) at residual adds.

    Convs not involved in any add form singleton groups. Group order follows
    the first member's position in ``layers``.
    """
    order = {n: k for k, n in enumerate(layers)}
    uf = _UnionFind(order)
    for layer in layers.values():
        if isinstance(layer, Conv):
            uf.find(layer.name)
    for layer in layers.values():
        if not isinstance(layer, Add):
            continue
        uf.find(layer.name)
        for src in layer.inputs:
            prod = _producer(layers, src)
            if isinstance(layers[prod], Input):
                raise ValueError(f"residual add {layer.name} reaches the network input; its channels cannot be masked")
            if not isinstance(layers[prod], (Conv, Add)):
                raise ValueError(f"residual add {layer.name}: unsupported producer {prod}")
            uf.union(layer.name, prod)

    members: dict[str, list[str]] = {}
    for layer in layers.values():
        if isinstance(layer, Conv):
            members.setdefault(uf.find(layer.name), []).append(layer.name)
    groups = []
    for names in members.values():
        widths = {layers[n].out_channels for n in names}
        if len(widths) != 1:
            raise ValueError(f"shared group {names} mixes output widths {sorted(widths)}")
        gid = names[0] if len(names) == 1 else f"shared:{names[0]}"
        groups.append(SharedMaskGroup(gid, names))
    groups.sort(key=lambda g: order[g.member_layer_ids[0]])
    return groups


def check_model_invariants(model: Network) -> None:
    """Structural invariants that must hold after every iteration."""
    for _, fs in model.skeletons():
        fs.check_invariants()
    for fm in model.masks.values():
        fm.check_invariants()
    for c in model.convs():
        if c.group is not None and c.group in model.masks:
            assert model.masks[c.group].length == c.out_channels
    model.check_residuals()
