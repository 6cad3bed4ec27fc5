"""Small feed-forward networks with hand-written backprop for the actor and critic."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "linear", "pi_tanh")


class Mlp:
    """Dense network ``x @ W + b`` per layer; batches are rows."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng=None, dtype=np.float64):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = [int(s) for s in sizes]
        self.activations = list(activations)
        self.dtype = np.dtype(dtype)
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out, act in zip(self.sizes[:-1], self.sizes[1:], self.activations):
            # He-uniform before rectifiers, LeCun-uniform elsewhere
            limit = np.sqrt(6.0 / fan_in) if act == "relu" else np.sqrt(1.0 / fan_in)
            self.params.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.activations = list(self.activations)
        other.dtype = self.dtype
        other.params = [p.copy() for p in self.params]
        other._cache = None
        return other

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input has shape {x.shape}, network expects dim {self.in_dim}")
        hs, zs = [x], []
        h = x
        for i, act in enumerate(self.activations):
            z = h @ self.params[2 * i]
            z += self.params[2 * i + 1]
            if act == "relu":
                # rectified in place; the backward mask reads h > 0 instead of z > 0
                h = np.maximum(z, 0, out=z)
            else:
                h = _activate(z, act)
            hs.append(h)
            zs.append(z)
        self._cache = (hs, zs, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out: np.ndarray, param_grads: bool = True):
        """Backprop ``grad_out`` (dL/d output) through the last ``forward`` call.

        Returns ``(grads, grad_input)`` where ``grads`` mirrors ``params``
        (``None`` when ``param_grads`` is false).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        hs, zs, single = self._cache
        g = np.array(grad_out, dtype=self.dtype)
        if single:
            g = g.reshape(1, -1)
        if g.shape != hs[-1].shape:
            raise ValueError(f"grad_out shape {g.shape} != output shape {hs[-1].shape}")
        grads: list = [None] * len(self.params) if param_grads else None
        for i in reversed(range(self.n_layers)):
            act = self.activations[i]
            if act == "relu":
                np.multiply(g, hs[i + 1] > 0, out=g)
            elif act == "pi_tanh":
                t = np.tanh(zs[i])
                g = g * (np.pi * (1 - t * t))
            if param_grads:
                grads[2 * i] = hs[i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if single else g)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for p in self.params:
            p[...] = flat[off : off + p.size].reshape(p.shape)
            off += p.size


_PI_INSIDE = {np.dtype(t): np.nextafter(t(np.pi), t(0)) for t in (np.float32, np.float64)}
# float32(pi) rounds above pi, so clamp one more ulp inward for float32
_PI_INSIDE[np.dtype(np.float32)] = np.nextafter(_PI_INSIDE[np.dtype(np.float32)], np.float32(0))


def _pi_tanh(z: np.ndarray) -> np.ndarray:
    lim = _PI_INSIDE[z.dtype]
    return np.clip(np.pi * np.tanh(z), -lim, lim).astype(z.dtype, copy=False)


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0)
    if act == "pi_tanh":
        return _pi_tanh(z)
    return z


def make_actor(M: int, rng=None, dtype=np.float64) -> Mlp:
    """M -> 16M -> 16M -> M, ReLU hidden layers, pi*tanh output."""
    return Mlp([M, 16 * M, 16 * M, M], ["relu", "relu", "pi_tanh"], rng, dtype)


def make_critic(M: int, rng=None, dtype=np.float64) -> Mlp:
    """2M -> 32M -> 32M -> 1, ReLU hidden layers, linear output."""
    return Mlp([2 * M, 32 * M, 32 * M, 1], ["relu", "relu", "linear"], rng, dtype)


def actor_forward(actor: Mlp, state: np.ndarray) -> np.ndarray:
    return actor.forward(state)


def critic_forward(critic: Mlp, state: np.ndarray, action: np.ndarray):
    s = np.asarray(state)
    a = np.asarray(action)
    if s.shape != a.shape:
        raise ValueError(f"state {s.shape} and action {a.shape} shapes differ")
    q = critic.forward(np.concatenate([s, a], axis=-1))
    return float(q[0]) if s.ndim == 1 else q[:, 0]


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        step = self.lr / c1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= step * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"m{i}": m for i, m in enumerate(self.m)}
        out.update({f"v{i}": v for i, v in enumerate(self.v)})
        return out


def critic_step(critic: Mlp, opt: Adam, states, actions, targets) -> float:
    """One optimizer step on the mean squared TD error; returns the pre-step loss."""
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("critic_step needs a nonempty batch")
    x = np.concatenate([states, np.asarray(actions)], axis=1)
    q = critic.forward(x)[:, 0]
    err = q - np.asarray(targets, dtype=critic.dtype)
    B = err.shape[0]
    grads, _ = critic.backward((2.0 / B) * err[:, None])
    opt.step(grads)
    return float(np.mean(err.astype(np.float64) ** 2))


def policy_gradient(actor: Mlp, critic: Mlp, states):
    """Gradient of -mean Q(s, mu(s)) w.r.t. the actor parameters, and mean Q."""
    states = np.asarray(states, dtype=actor.dtype)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("actor_step needs a nonempty batch")
    M = actor.out_dim
    a = actor.forward(states)
    q = critic.forward(np.concatenate([states, a], axis=1))[:, 0]
    B = states.shape[0]
    _, gx = critic.backward(np.full((B, 1), -1.0 / B, dtype=critic.dtype), param_grads=False)
    grads, _ = actor.backward(gx[:, -M:])
    return grads, float(np.mean(q, dtype=np.float64))


def actor_step(actor: Mlp, critic: Mlp, opt: Adam, states) -> float:
    """Ascend mean Q(s, mu(s)) through the critic; returns the pre-step estimate."""
    grads, j = policy_gradient(actor, critic, states)
    opt.step(grads)
    return j


@dataclass
class TargetPair:
    source: Mlp
    target: Mlp

    @classmethod
    def of(cls, net: Mlp) -> "TargetPair":
        return cls(net, net.copy())

    def soft_update(self, tau: float) -> None:
        soft_update(self.target, self.source, tau)


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- tau*source + (1-tau)*target, in place."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    for pt, ps in zip(target.params, source.params):
        if pt.shape != ps.shape:
            raise ValueError("target and source shapes differ")
        if tau == 1:
            pt[...] = ps
        else:
            # a step toward the source, so equal parameters stay bit-equal
            pt += tau * (ps - pt)


def kink_margin(net: Mlp, x) -> float:
    """Smallest |pre-activation| over rectifier units for input batch ``x``."""
    net.forward(x)
    hs = net._cache[0]
    worst = np.inf
    for i, act in enumerate(net.activations):
        if act == "relu":
            # the cached z of a rectifier layer is overwritten, so recompute it
            z = hs[i] @ net.params[2 * i] + net.params[2 * i + 1]
            worst = min(worst, float(np.min(np.abs(z))))
    return worst


def nudge_off_kinks(net: Mlp, x, margin=1e-3, rng=None, scale=1e-2, tries=1000) -> np.ndarray:
    """Perturb ``x`` until no rectifier unit sits within ``margin`` of its kink."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, dtype=net.dtype)
    for _ in range(tries):
        if kink_margin(net, x) > margin:
            return x
        x = x + scale * rng.standard_normal(x.shape)
    raise RuntimeError("could not move input away from rectifier kinks")


def gradient_check(net: Mlp, x, epsilon: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    The scalar probed is ``sum(c * net(x))`` with a fixed random ``c``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    x = np.atleast_2d(np.asarray(x, dtype=net.dtype))
    c = np.random.default_rng(seed).standard_normal((x.shape[0], net.out_dim))

    def f():
        return float(np.sum(c * net.forward(x)))

    f()
    analytic, _ = net.backward(c)
    worst = 0.0
    for p, g in zip(net.params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            fp = f()
            flat[i] = old - epsilon
            fm = f()
            flat[i] = old
            cd = (fp - fm) / (2 * epsilon)
            err = abs(gflat[i] - cd) / max(abs(gflat[i]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst


def _rng_state_json(rng: Optional[np.random.Generator]) -> Optional[str]:
    return None if rng is None else json.dumps(rng.bit_generator.state)


def _restore_rng(state: Optional[str]) -> Optional[np.random.Generator]:
    if state is None:
        return None
    st = json.loads(state)
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def pack_checkpoint(nets: dict, opts: dict, rngs: dict, extra: Optional[dict] = None, meta=None) -> bytes:
    """Serialize networks, optimizer moments, RNG states and extra arrays to bytes."""
    header = {
        "version": CHECKPOINT_VERSION,
        "nets": {k: {"sizes": n.sizes, "activations": n.activations, "dtype": n.dtype.str} for k, n in nets.items()},
        "opts": {
            k: {"lr": o.lr, "weight_decay": o.weight_decay, "betas": [o.beta1, o.beta2], "eps": o.eps, "t": o.t, "net": k2}
            for k, (o, k2) in opts.items()
        },
        "rngs": {k: _rng_state_json(r) for k, r in rngs.items()},
        "meta": meta or {},
    }
    arrays = {}
    for k, n in nets.items():
        for i, p in enumerate(n.params):
            arrays[f"net/{k}/{i}"] = p
    for k, (o, _) in opts.items():
        for name, arr in o.state_arrays().items():
            arrays[f"opt/{k}/{name}"] = arr
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    return buf.getvalue()


def unpack_checkpoint(blob: bytes):
    """Inverse of ``pack_checkpoint``: returns (nets, opts, rngs, extra, meta)."""
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for k, spec in header["nets"].items():
            n = Mlp(spec["sizes"], spec["activations"], dtype=np.dtype(spec["dtype"]))
            n.params = [z[f"net/{k}/{i}"].copy() for i in range(len(n.params))]
            nets[k] = n
        opts = {}
        for k, spec in header["opts"].items():
            net = nets[spec["net"]]
            o = Adam(net.params, spec["lr"], spec["weight_decay"], tuple(spec["betas"]), spec["eps"])
            o.t = spec["t"]
            o.m = [z[f"opt/{k}/m{i}"].copy() for i in range(len(net.params))]
            o.v = [z[f"opt/{k}/v{i}"].copy() for i in range(len(net.params))]
            opts[k] = o
        rngs = {k: _restore_rng(v) for k, v in header["rngs"].items()}
        extra = {k[len("extra/"):]: z[k].copy() for k in z.files if k.startswith("extra/")}
    return nets, opts, rngs, extra, header["meta"]
