"""Adam with an optional frustum-restricted sparse mode.

In sparse mode each Gaussian keeps its own step counter: moments are neither
decayed nor bias-corrected while a Gaussian is inactive, so an intermittently
visible Gaussian behaves exactly like a fresh optimizer fed only its own
active-round gradients.
"""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

GROUPS = ("position", "log_scale", "rotation", "opacity_logit", "sh")


class AdamState:
    """Moment arrays parallel to the GaussianMap plus per-Gaussian counters."""

    def __init__(self, count: int, lrs: dict, dtype=np.float32):
        shapes = {"position": (3,), "log_scale": (3,), "rotation": (4,),
                  "opacity_logit": (), "sh": (16, 3)}
        self.lrs = dict(lrs)
        self.dtype = np.dtype(dtype)
        self.shapes = shapes
        self.m = {g: np.zeros((count,) + shapes[g], dtype=dtype) for g in GROUPS}
        self.v = {g: np.zeros((count,) + shapes[g], dtype=dtype) for g in GROUPS}
        self.steps = np.zeros(count, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.steps.shape[0]

    def resize(self, new_count: int) -> None:
        """Grow state for newly appended Gaussians (zero moments, zero steps)."""
        extra = new_count - self.count
        if extra < 0:
            raise ValueError("Adam state cannot shrink")
        if extra == 0:
            return
        for g in GROUPS:
            pad = np.zeros((extra,) + self.shapes[g], dtype=self.dtype)
            self.m[g] = np.concatenate([self.m[g], pad])
            self.v[g] = np.concatenate([self.v[g], pad.copy()])
        self.steps = np.concatenate([self.steps, np.zeros(extra, dtype=np.int64)])

    def to_dict(self) -> dict:
        out = {"steps": self.steps}
        for g in GROUPS:
            out[f"m_{g}"] = self.m[g]
            out[f"v_{g}"] = self.v[g]
        return out

    @classmethod
    def from_dict(cls, data: dict, lrs: dict, dtype=np.float32) -> "AdamState":
        st = cls(data["steps"].shape[0], lrs, dtype=dtype)
        st.steps = data["steps"].astype(np.int64)
        for g in GROUPS:
            st.m[g] = data[f"m_{g}"].astype(dtype)
            st.v[g] = data[f"v_{g}"].astype(dtype)
        return st


def _group_lr(name: str, lrs: dict, dtype):
    if name == "sh":
        # Degree-0 coefficients train faster than the higher bands.
        lr = np.full((16, 1), lrs["sh_rest"], dtype=dtype)
        lr[0, 0] = lrs["sh0"]
        return lr
    return dtype.type(lrs[name])


def adam_step(params: dict, grads: dict, state: AdamState, active=None) -> None:
    """One Adam step over ``params`` in place.

    ``active`` restricts the update to an index array (or boolean mask) of
    Gaussians; everything else (parameters, moments, counters) is untouched.
    """
    dt = state.dtype
    b1, b2 = dt.type(BETA1), dt.type(BETA2)
    eps = dt.type(EPS)

    if active is not None:
        active = np.asarray(active)
        if active.dtype == bool:
            active = np.nonzero(active)[0]
        if active.size == 0:
            return
        state.steps[active] += 1
        t = state.steps[active]
    else:
        state.steps += 1
        t = state.steps

    for g in GROUPS:
        lr = _group_lr(g, state.lrs, dt)
        extra = (1,) * (params[g].ndim - 1)
        bc1 = (1 - b1 ** t.astype(dt)).reshape((-1,) + extra)
        bc2 = (1 - b2 ** t.astype(dt)).reshape((-1,) + extra)
        if active is None:
            grad = grads[g]
            m = state.m[g]
            v = state.v[g]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / bc1
            v_hat = v / bc2
            params[g] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            grad = grads[g][active]
            m = b1 * state.m[g][active] + (1 - b1) * grad
            v = b2 * state.v[g][active] + (1 - b2) * grad * grad
            state.m[g][active] = m
            state.v[g][active] = v
            m_hat = m / bc1
            v_hat = v / bc2
            params[g][active] -= lr * m_hat / (np.sqrt(v_hat) + eps)


class ScalarAdam:
    """Plain Adam for one small parameter block (the exposure matrix)."""

    def __init__(self, shape, lr: float, dtype=np.float64):
        self.lr = lr
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = BETA1 * self.m + (1 - BETA1) * grad
        self.v = BETA2 * self.v + (1 - BETA2) * grad * grad
        m_hat = self.m / (1 - BETA1 ** self.t)
        v_hat = self.v / (1 - BETA2 ** self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + EPS)
