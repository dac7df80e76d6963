"""MLP decoder mapping latent points to circuit leaf logits.

Hidden layers are ``affine -> batch-norm (optional) -> LeakyReLU``; the last
layer is affine only.  Gradients are derived by hand; everything runs in
float64.

Batch-norm statistics are taken over the *integration points* fed through
the network together.  ``freeze_stats(Z)`` stores the statistics of a point
set so that eval-mode forwards reproduce a train-mode forward over ``Z``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import rng_for

FORMAT_VERSION = 1
NUM_LAYERS = 6
MIN_HIDDEN = 64


class DecoderError(ValueError):
    pass


def hidden_widths(latent_dim: int, output_dim: int, num_layers: int = NUM_LAYERS,
                  min_width: int = MIN_HIDDEN) -> list:
    """Geometric interpolation from ``latent_dim`` to ``output_dim``, clamped below."""
    ratio = output_dim / latent_dim
    return [max(min_width, int(round(latent_dim * ratio ** (k / num_layers)))) for k in range(1, num_layers)]


class Decoder:
    def __init__(self, latent_dim: int, output_dim: int, widths: Sequence[int], slope: float = 0.01,
                 batch_norm: bool = True, momentum: float = 0.1, bn_eps: float = 1e-5):
        if latent_dim < 1 or output_dim < 1:
            raise DecoderError("latent and output dimensions must be positive")
        self.latent_dim = int(latent_dim)
        self.output_dim = int(output_dim)
        self.widths = [int(w) for w in widths]
        self.slope = float(slope)
        self.batch_norm = bool(batch_norm)
        self.momentum = float(momentum)
        self.bn_eps = float(bn_eps)
        self.bn_frozen = False
        self.structure_ref: Optional[dict] = None
        dims = [self.latent_dim, *self.widths, self.output_dim]
        self.layers = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            layer = {"W": np.zeros((fan_in, fan_out)), "b": np.zeros(fan_out)}
            if self.batch_norm and k < len(dims) - 2:
                layer.update(gamma=np.ones(fan_out), beta=np.zeros(fan_out),
                             running_mean=np.zeros(fan_out), running_var=np.ones(fan_out))
            self.layers.append(layer)
        self._version = 0

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list:
        """Trainable arrays, in a fixed order shared with ``backward``'s gradients."""
        out = []
        for layer in self.layers:
            out += [layer["W"], layer["b"]]
            if "gamma" in layer:
                out += [layer["gamma"], layer["beta"]]
        return out

    def touch(self):
        """Mark parameters as modified; older forward caches become stale."""
        self._version += 1

    def copy(self) -> "Decoder":
        return copy.deepcopy(self)

    # -- forward / backward ----------------------------------------------

    def forward(self, Z, mode: str = "train", track: bool = True):
        """Return raw logits ``(N, output_dim)`` and a cache for ``backward``.

        In train mode batch-norm uses the statistics of ``Z``; ``track``
        additionally updates the running statistics.
        """
        if mode not in ("train", "eval"):
            raise DecoderError(f"unknown mode {mode!r}")
        if mode == "eval" and self.batch_norm and not self.bn_frozen:
            raise DecoderError("eval mode needs frozen batch-norm statistics (call freeze_stats)")
        a = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if a.shape[1] != self.latent_dim:
            raise DecoderError(f"expected {self.latent_dim}-dimensional points, got {a.shape[1]}")
        steps = []
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            step = {"a": a}
            h = a @ layer["W"] + layer["b"]
            if k == last:
                steps.append(step)
                a = h
                break
            if "gamma" in layer:
                if mode == "train":
                    mean, var = h.mean(axis=0), h.var(axis=0)
                    if track:
                        m = self.momentum
                        layer["running_mean"] = (1 - m) * layer["running_mean"] + m * mean
                        layer["running_var"] = (1 - m) * layer["running_var"] + m * var
                else:
                    mean, var = layer["running_mean"], layer["running_var"]
                s = np.sqrt(var + self.bn_eps)
                xhat = (h - mean) / s
                step.update(xhat=xhat, s=s)
                h = layer["gamma"] * xhat + layer["beta"]
            step["pre"] = h
            a = np.where(h > 0, h, self.slope * h)
            steps.append(step)
        cache = {"steps": steps, "mode": mode, "version": self._version}
        return a, cache

    def backward(self, cache, dout):
        """Exact reverse-mode gradients: ``(param_grads, dZ)``."""
        if cache.get("version") != self._version:
            raise DecoderError("stale forward cache: parameters changed since the forward pass")
        steps = cache["steps"]
        if len(steps) != len(self.layers):
            raise DecoderError("forward cache does not belong to this decoder")
        g = np.asarray(dout, dtype=np.float64)
        grads = []
        for layer, step in zip(reversed(self.layers), reversed(steps)):
            layer_grads = []
            if "pre" in step:
                g = np.where(step["pre"] > 0, g, self.slope * g)
                if "xhat" in step:
                    xhat, s = step["xhat"], step["s"]
                    dgamma = (g * xhat).sum(axis=0)
                    dbeta = g.sum(axis=0)
                    dx = g * layer["gamma"]
                    if cache["mode"] == "train":
                        g = (dx - dx.mean(axis=0) - xhat * (dx * xhat).mean(axis=0)) / s
                    else:
                        g = dx / s
                    layer_grads = [dgamma, dbeta]
            dW = step["a"].T @ g
            db = g.sum(axis=0)
            grads = [dW, db, *layer_grads] + grads
            g = g @ layer["W"].T
        return grads, g

    def latent_gradient(self, Z, upstream, mode: str = "train", cache=None):
        """Gradient of ``sum(upstream * forward(Z))`` w.r.t. the points ``Z``."""
        if cache is None:
            _, cache = self.forward(Z, mode=mode, track=False)
        return self.backward(cache, upstream)[1]

    def freeze_stats(self, Z):
        """Set running statistics to the batch statistics of ``Z``, layer by layer."""
        a = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        for k, layer in enumerate(self.layers[:-1]):
            h = a @ layer["W"] + layer["b"]
            if "gamma" in layer:
                layer["running_mean"] = h.mean(axis=0)
                layer["running_var"] = h.var(axis=0)
                h = layer["gamma"] * (h - layer["running_mean"]) / np.sqrt(layer["running_var"] + self.bn_eps) \
                    + layer["beta"]
            a = np.where(h > 0, h, self.slope * h)
        self.bn_frozen = True

    def __call__(self, Z, mode="train"):
        return self.forward(Z, mode=mode, track=False)[0]

    # -- serialisation ---------------------------------------------------

    def to_json(self) -> dict:
        layers = [{k: v.tolist() for k, v in layer.items()} for layer in self.layers]
        return {
            "version": FORMAT_VERSION,
            "arch": {
                "latent_dim": self.latent_dim, "output_dim": self.output_dim, "widths": self.widths,
                "slope": self.slope, "batch_norm": self.batch_norm, "momentum": self.momentum,
                "bn_eps": self.bn_eps,
            },
            "layers": layers,
            "bn_frozen": self.bn_frozen,
            "structure_ref": self.structure_ref,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Decoder":
        if not isinstance(obj, dict) or obj.get("version") != FORMAT_VERSION:
            raise DecoderError(f"unsupported decoder file version {obj.get('version') if isinstance(obj, dict) else obj!r}")
        try:
            dec = cls(**obj["arch"])
            if len(obj["layers"]) != len(dec.layers):
                raise DecoderError("layer count does not match the architecture")
            for layer, saved in zip(dec.layers, obj["layers"]):
                if set(layer) != set(saved):
                    raise DecoderError("layer fields do not match the architecture")
                for key in layer:
                    arr = np.array(saved[key], dtype=np.float64).reshape(layer[key].shape)
                    layer[key] = arr
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DecoderError):
                raise
            raise DecoderError(f"malformed decoder file: {exc}") from exc
        if any(np.any(l.get("running_var", 1.0) <= 0) for l in dec.layers):
            raise DecoderError("batch-norm running variance must be positive")
        dec.bn_frozen = bool(obj.get("bn_frozen", False))
        dec.structure_ref = obj.get("structure_ref")
        return dec

    def digest(self) -> str:
        """SHA-256 over the full serialised model (parameters and statistics)."""
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def param_digest(self) -> str:
        """SHA-256 over the trainable parameters only."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_decoder(latent_dim: int, output_dim: int, hidden_spec=None, seed: int = 0, slope: float = 0.01,
                 batch_norm: bool = True, momentum: float = 0.1) -> Decoder:
    """Kaiming-uniform (LeakyReLU gain) initialisation; deterministic in ``seed``.

    ``hidden_spec`` is ``None`` for the default geometric widths or an
    explicit width list (``[]`` gives a single affine layer).
    """
    if latent_dim < 1 or output_dim < 1:
        raise DecoderError("latent and output dimensions must be positive")
    widths = hidden_widths(latent_dim, output_dim) if hidden_spec is None else list(hidden_spec)
    dec = Decoder(latent_dim, output_dim, widths, slope=slope, batch_norm=batch_norm, momentum=momentum)
    rng = rng_for(seed)
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    for layer in dec.layers:
        fan_in, fan_out = layer["W"].shape
        bound = gain * np.sqrt(3.0 / fan_in)
        layer["W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layer["b"] = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out)
    return dec


def save_decoder(dec: Decoder, path) -> None:
    Path(path).write_text(json.dumps(dec.to_json()) + "\n", encoding="utf-8")


def load_decoder(path) -> Decoder:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DecoderError(f"cannot read decoder {path}: {exc}") from exc
    return Decoder.from_json(obj)


class Adam:
    """Bias-corrected Adam; ``step`` minimises, so pass negated gradients to ascend."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Optional[list] = None
        self.v: Optional[list] = None

    def step(self, params: list, grads: list) -> list:
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ValueError("parameter and gradient shapes differ")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params
