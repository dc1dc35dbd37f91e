"""Adam with bias correction and a constant learning rate.

State is keyed by parameter name so it can ride along in checkpoints and
survive a save/load round trip bitwise. Parameters whose grad is None are
skipped; modules disabled by an ablation toggle never receive gradients and
must not be stepped.
"""

import numpy as np


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ValueError(f"duplicate parameter name: {name}")
            seen.add(name)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = {"step": 0,
                      "m": np.zeros_like(p.data),
                      "v": np.zeros_like(p.data)}
                self.state[name] = st
            st["step"] += 1
            t = st["step"]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** t)
            v_hat = st["v"] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_dict(self):
        return {name: {"step": st["step"],
                       "m": st["m"].copy(),
                       "v": st["v"].copy()}
                for name, st in self.state.items()}

    def load_state_dict(self, state):
        names = {name for name, _ in self.params}
        for name in state:
            if name not in names:
                raise KeyError(f"optimizer state for unknown parameter "
                               f"{name}")
        self.state = {name: {"step": int(st["step"]),
                             "m": np.array(st["m"], dtype=np.float64),
                             "v": np.array(st["v"], dtype=np.float64)}
                      for name, st in state.items()}
