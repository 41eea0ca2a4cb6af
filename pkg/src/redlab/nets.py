"""Model components: small MLP extractors, the shared linear head, the domain
discriminator, and the learnable causal/environmental mixing factor."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "sigmoid", "none")
GROUPS = ("g_c", "g_es", "g_et", "lambda", "h", "d")


class Mlp:
    """Stack of affine layers, each followed by its activation tag."""

    def __init__(self, layers: list[tuple[Tensor, Tensor, str]]):
        for (w, _, act), (w_next, _, _) in zip(layers, layers[1:]):
            if w.shape[1] != w_next.shape[0]:
                raise ad.DimensionError(f"layer chain broken: {w.shape} -> {w_next.shape}")
        for _, _, act in layers:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.layers = layers

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: list[int], acts: list[str]) -> Mlp:
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], acts):
            # fan-in uniform init; ReLU layers get the Kaiming gain
            bound = np.sqrt(6.0 / fan_in) if act == "relu" else np.sqrt(1.0 / fan_in)
            w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            layers.append((w, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for w, b, _ in self.layers for t in (w, b)]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for w, b, act in self.layers:
            out = ad.add_bias(ad.matmul(out, w), b)
            if act == "relu":
                out = ad.relu(out)
            elif act == "sigmoid":
                out = ad.sigmoid(out)
        return out

    def copy_from(self, other: Mlp) -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()


@dataclass
class ModelDims:
    input_dim: int
    num_classes: int
    feat_dim: int = 16
    hidden_dim: int = 64
    disc_hidden: int = 64
    disc_mode: str = "conditional"
    feat_act: str = "relu"

    @property
    def disc_input_dim(self) -> int:
        return self.feat_dim * self.num_classes if self.disc_mode == "conditional" else self.feat_dim


def parameter_count(dims: ModelDims) -> int:
    def mlp(sizes):
        return sum(a * b + b for a, b in zip(sizes, sizes[1:]))

    extractor = mlp([dims.input_dim, dims.hidden_dim, dims.hidden_dim, dims.feat_dim])
    head = mlp([dims.feat_dim, dims.num_classes])
    disc = mlp([dims.disc_input_dim, dims.disc_hidden, dims.disc_hidden, 1])
    return 3 * extractor + head + disc + 1


@dataclass
class RedModel:
    dims: ModelDims
    g_c: Mlp
    g_es: Mlp
    g_et: Mlp
    h: Mlp
    d: Mlp
    theta_lambda: Tensor
    lambda_fixed: float | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, dims: ModelDims, seed: int = 0, lambda_fixed: float | None = None) -> RedModel:
        rng = np.random.default_rng(seed)
        ext = [dims.input_dim, dims.hidden_dim, dims.hidden_dim, dims.feat_dim]
        acts = ["relu", "relu", dims.feat_act]
        g_c = Mlp.init(rng, ext, acts)
        g_es = Mlp.init(rng, ext, acts)
        g_et = Mlp.init(rng, ext, acts)
        h = Mlp.init(rng, [dims.feat_dim, dims.num_classes], ["none"])
        d = Mlp.init(rng, [dims.disc_input_dim, dims.disc_hidden, dims.disc_hidden, 1],
                     ["relu", "relu", "sigmoid"])
        return cls(dims, g_c, g_es, g_et, h, d, Tensor(0.0, requires_grad=True), lambda_fixed)

    def groups(self) -> dict[str, list[Tensor]]:
        lam = [] if self.lambda_fixed is not None else [self.theta_lambda]
        return {
            "g_c": self.g_c.parameters(),
            "g_es": self.g_es.parameters(),
            "g_et": self.g_et.parameters(),
            "lambda": lam,
            "h": self.h.parameters(),
            "d": self.d.parameters(),
        }

    def parameters(self) -> list[Tensor]:
        return [p for ps in self.groups().values() for p in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def env_extractor(self, env: str) -> Mlp:
        if env == "source":
            return self.g_es
        if env == "target":
            return self.g_et
        raise ValueError(f"env must be 'source' or 'target', got {env!r}")

    def lam(self) -> Tensor:
        if self.lambda_fixed is not None:
            return Tensor(self.lambda_fixed)
        return ad.sigmoid(self.theta_lambda)

    @property
    def lambda_value(self) -> float:
        return self.lam().item()

    def mix(self, z_c: Tensor, z_e: Tensor, lam: Tensor | None = None) -> Tensor:
        lam = self.lam() if lam is None else lam
        return ad.add(ad.scale(z_c, lam), ad.scale(z_e, ad.sub(1.0, lam)))

    def fuse(self, x: Tensor, env: str) -> Tensor:
        return self.mix(self.g_c(x), self.env_extractor(env)(x))

    def predict_fused(self, x: Tensor, env: str) -> Tensor:
        return ad.softmax_rows(self.h(self.fuse(x, env)))

    def predict_env(self, x: Tensor, env: str) -> Tensor:
        return ad.softmax_rows(self.h(self.env_extractor(env)(x)))

    def predict_causal(self, x: Tensor) -> Tensor:
        return ad.softmax_rows(self.h(self.g_c(x)))

    def discriminate(self, z: Tensor, p: Tensor | None = None, mode: str | None = None) -> Tensor:
        mode = mode or self.dims.disc_mode
        if mode == "conditional":
            if p is None:
                raise ValueError("conditional discriminator needs class probabilities")
            inp = ad.batch_outer(z, p)
        elif mode == "plain":
            inp = z
        else:
            raise ValueError(f"unknown discriminator mode {mode!r}")
        if inp.shape[1] != self.d.in_dim:
            raise ad.DimensionError(
                f"discriminator expects {self.d.in_dim} inputs, {mode} mode gives {inp.shape[1]}")
        return self.d(inp)

    def clone(self) -> RedModel:
        other = RedModel.init(self.dims, 0, self.lambda_fixed)
        other.load_state(self.state())
        other.meta = dict(self.meta)
        return other

    def state(self) -> dict[str, np.ndarray]:
        out = {"theta_lambda": self.theta_lambda.data.copy()}
        for name in ("g_c", "g_es", "g_et", "h", "d"):
            for i, (w, b, _) in enumerate(getattr(self, name).layers):
                out[f"{name}.{i}.weight"] = w.data.copy()
                out[f"{name}.{i}.bias"] = b.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.theta_lambda.data = np.array(state["theta_lambda"], dtype=np.float64)
        for name in ("g_c", "g_es", "g_et", "h", "d"):
            for i, (w, b, _) in enumerate(getattr(self, name).layers):
                w.data = np.array(state[f"{name}.{i}.weight"], dtype=np.float64)
                b.data = np.array(state[f"{name}.{i}.bias"], dtype=np.float64)


def save_checkpoint(model: RedModel, path, config: dict | None = None) -> None:
    """Write an ``.npz`` holding every parameter array plus a JSON header.

    The header (array ``__meta__``) records the format version, model
    dimensions, ``lambda_fixed`` and a SHA-256 of the canonical config JSON.
    """
    config = config or {}
    cfg_json = json.dumps(config, sort_keys=True, default=str)
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims.__dict__,
        "lambda_fixed": model.lambda_fixed,
        "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "config": config,
    }
    arrays = model.state()
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True, default=str))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> RedModel:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k: npz[k] for k in npz.files if k != "__meta__"}
    model = RedModel.init(ModelDims(**meta["dims"]), 0, meta["lambda_fixed"])
    model.load_state(state)
    model.meta = meta
    return model
