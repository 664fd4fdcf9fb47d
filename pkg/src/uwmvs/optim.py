"""Named parameter collections and the Adam update."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .autodiff import Tensor


class ParameterSet(Mapping):
    """Ordered mapping ``name -> Tensor`` plus Adam moment buffers.

    Every parameter is a leaf tensor with ``requires_grad=True``.  The first
    and second moment buffers are created lazily and always match the
    parameter shapes.
    """

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grad_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(t.grad)) for k, t in self._params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and moment buffers, flattened into one name space."""
        out = self.arrays()
        for k in self._params:
            out[f"adam.m/{k}"] = self.m[k].copy()
            out[f"adam.v/{k}"] = self.v[k].copy()
        return out

    @classmethod
    def from_state_arrays(cls, arrays: Mapping[str, np.ndarray], step_count: int = 0):
        ps = cls({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        for k in ps:
            if f"adam.m/{k}" in arrays:
                ps.m[k] = np.asarray(arrays[f"adam.m/{k}"], dtype=ps[k].dtype).copy()
                ps.v[k] = np.asarray(arrays[f"adam.v/{k}"], dtype=ps[k].dtype).copy()
        ps.step_count = int(step_count)
        return ps

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        adam_step(self, lr, beta1, beta2, eps)


def adam_step(params: ParameterSet, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params._params.items():
        g = p.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    params.zero_grad()
