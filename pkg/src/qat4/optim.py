"""QuantAwareAdamW and the cosine-with-warm-restarts learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, PoisonedInputError
from .layers import cross_entropy_loss
from .quantize import TANH_CLIP_SCALE, tanh_soft_clip
from .tensor import global_l2_norm


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    clip_norm: float = 0.5
    tanh_clip_scale: float = TANH_CLIP_SCALE
    grad_clip: bool = True
    tanh_clip: bool = True


def clip_gradients_global(params, max_norm=0.5):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_l2_norm(p.grad for p in params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= p.grad.dtype.type(factor)
    return norm


def apply_tanh_clip(params, scale=TANH_CLIP_SCALE):
    for p in params:
        if p.quantized:
            p.value[...] = tanh_soft_clip(p.value, scale)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


class QuantAwareAdamW:
    """AdamW with global-norm gradient clipping and post-update tanh clipping.

    ``step`` runs, in order: clip gradients, Adam update, decoupled weight
    decay (only on params flagged ``decay``), tanh soft clip on quantized
    masters.
    """

    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = config if config is not None else OptimConfig()
        self.state = OptimizerState()
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.value)
            self.state.v[p.name] = np.zeros_like(p.value)

    def adamw_step(self, lr):
        cfg = self.config
        st = self.state
        st.t += 1
        bc1 = 1.0 - cfg.beta1 ** st.t
        bc2 = 1.0 - cfg.beta2 ** st.t
        for p in self.params:
            m, v, g = st.m[p.name], st.v[p.name], p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v / bc2) + cfg.eps
            p.value -= ((lr / bc1) * m / denom).astype(p.value.dtype)
            if p.decay and cfg.weight_decay:
                p.value -= (lr * cfg.weight_decay) * p.value

    def step(self, lr):
        """One full update; returns the pre-clip gradient norm."""
        cfg = self.config
        if cfg.grad_clip:
            norm = clip_gradients_global(self.params, cfg.clip_norm)
        else:
            norm = global_l2_norm(p.grad for p in self.params)
        self.adamw_step(lr)
        if cfg.tanh_clip:
            apply_tanh_clip(self.params, cfg.tanh_clip_scale)
        return norm


@dataclass
class LrSchedule:
    """Per-step cosine annealing, optionally with warm restarts.

    Cycle ``i`` lasts ``t0 * t_mult**i`` epochs. With ``restarts=False`` a
    single cosine spans ``total_epochs`` and then stays at ``eta_min``.
    """

    base_lr: float = 1e-3
    t0: float = 100
    t_mult: float = 1
    eta_min: float = 1e-5
    restarts: bool = True
    total_epochs: float = 150


def cosine_lr(base_lr, eta_min, t_cur, t_i):
    return eta_min + (base_lr - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i)) / 2.0


def cycle_position(schedule, t):
    """Return ``(t_cur, t_i)`` for fractional epoch ``t``."""
    if not schedule.restarts:
        return min(t, schedule.total_epochs), schedule.total_epochs
    t_i = float(schedule.t0)
    if schedule.t_mult == 1:
        return t % t_i, t_i
    start = 0.0
    while t >= start + t_i:
        start += t_i
        t_i *= schedule.t_mult
    return t - start, t_i


def lr_at(schedule, epoch, step_within_epoch=0, steps_per_epoch=1):
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    t = epoch + step_within_epoch / steps_per_epoch
    t_cur, t_i = cycle_position(schedule, t)
    return cosine_lr(schedule.base_lr, schedule.eta_min, t_cur, t_i)


STREAM_DROPOUT = 1


@dataclass
class StepReport:
    step: int
    loss: float
    accuracy: float
    grad_norm: float
    lr: float
    unique_levels: dict
    nan: bool = False


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    net: object
    optimizer: QuantAwareAdamW
    schedule: LrSchedule
    seed: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    steps_per_epoch: int = 1
    best_acc: float = -1.0

    def lr(self):
        return lr_at(self.schedule, self.epoch, self.step_in_epoch, self.steps_per_epoch)


def _check_finite(arrays, step, where):
    for a in arrays:
        if not np.isfinite(a).all():
            raise DivergenceError(step, where)


def train_step(net, images, labels, optimizer, lr, step=0):
    """forward -> loss -> backward -> clip -> AdamW -> tanh clip.

    Raises DivergenceError if any loss, gradient or weight becomes non-finite.
    """
    for d in net.dropouts():
        d.rng = np.random.default_rng([net.seed, STREAM_DROPOUT, step])
    net.zero_grad()
    try:
        logits = net.forward(images, training=True)
    except PoisonedInputError:
        raise DivergenceError(step, "quantizer input") from None
    _check_finite([logits], step, "logits")
    loss, dlogits = cross_entropy_loss(logits, labels)
    net.backward(dlogits)
    params = net.params()
    _check_finite([p.grad for p in params], step, "gradients")
    norm = optimizer.step(lr)
    _check_finite([p.value for p in params], step, "weights")
    acc = float((logits.argmax(axis=1) == labels).mean())
    return StepReport(step, loss, acc, norm, lr, net.unique_levels())


def step_state(state, images, labels):
    """Run one train_step at the state's clock and advance the clock."""
    report = train_step(state.net, images, labels, state.optimizer, state.lr(),
                        state.global_step)
    state.global_step += 1
    state.step_in_epoch += 1
    return report
