"""
Optimization for the LoGoNet toolkit
AdamW with decoupled weight decay and the cosine learning-rate schedule with
linear warmup
"""

import math

import numpy as np

from utils.errors import ArgumentError, CheckpointMismatchError

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-5
PEAK_LR = 1e-4

STATE_PREFIX = "optim"


def adamw_step(param, grad, m, v, step, lr, beta1=BETAS[0], beta2=BETAS[1], eps=ADAM_EPS,
               weight_decay=WEIGHT_DECAY):
    """
    One in-place AdamW update of a single array

    The decay theta <- theta - lr * wd * theta is applied first and apart
    from the bias-corrected adaptive step.

    Args:
        param: Parameter array (updated in place)
        grad: Gradient array
        m, v: First and second moment arrays (updated in place)
        step: 1-based step counter
        lr: Learning rate of this step
    """
    if step < 1:
        raise ArgumentError(f"AdamW step counter starts at 1, got {step}")
    if weight_decay:
        param -= param * param.dtype.type(lr * weight_decay)
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


def cosine_warmup_lr(step, warmup_steps, total_steps, peak_lr=PEAK_LR):
    """
    Linear ramp 0 -> peak over warmup_steps, then half-cosine decay to 0 at total_steps

    Args:
        step: Current step in [0, total_steps]
    """
    if total_steps < 1 or warmup_steps < 0:
        raise ArgumentError(f"invalid schedule: warmup {warmup_steps}, total {total_steps}")
    step = min(max(step, 0), total_steps)
    if warmup_steps and step <= warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """
    Optimizer owning the moments of a fixed set of named parameters

    Usage:
        optimizer = AdamW(model.named_parameters(), lr=1e-4,
                          schedule=lambda t: cosine_warmup_lr(t, 10, 500))
        optimizer.zero_grad(); loss.backward(); optimizer.step()
    """

    def __init__(self, named_parameters, lr=PEAK_LR, betas=BETAS, eps=ADAM_EPS,
                 weight_decay=WEIGHT_DECAY, schedule=None):
        self.params = list(named_parameters)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ArgumentError("optimizer parameter names must be unique")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def current_lr(self, step=None):
        step = self.step_count if step is None else step
        return self.schedule(step) if self.schedule is not None else self.lr

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, schedule_step=None):
        """
        Advance the counter and update every parameter holding a gradient

        Args:
            schedule_step: Position on the learning-rate schedule; defaults to
                the number of updates taken, bias correction always uses the latter

        Returns:
            Learning rate applied
        """
        self.step_count += 1
        lr = self.current_lr(schedule_step)
        for name, p in self.params:
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.step_count, lr,
                       self.beta1, self.beta2, self.eps, self.weight_decay)
        return lr

    def state_dict(self):
        """Moments and step counter keyed under the 'optim.' prefix"""
        state = {f"{STATE_PREFIX}.step": np.array([self.step_count], dtype=np.float64)}
        for name, _ in self.params:
            state[f"{STATE_PREFIX}.m.{name}"] = self.m[name]
            state[f"{STATE_PREFIX}.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state):
        """Restore moments and the step counter written by state_dict"""
        key = f"{STATE_PREFIX}.step"
        if key not in state:
            raise ArgumentError("checkpoint carries no optimizer state")
        missing = [f"{STATE_PREFIX}.{kind}.{name}" for name, _ in self.params for kind in ("m", "v")
                   if f"{STATE_PREFIX}.{kind}.{name}" not in state]
        if missing:
            raise CheckpointMismatchError(missing=missing)
        self.step_count = int(np.asarray(state[key]).reshape(-1)[0])
        for name, _ in self.params:
            self.m[name][...] = state[f"{STATE_PREFIX}.m.{name}"]
            self.v[name][...] = state[f"{STATE_PREFIX}.v.{name}"]
