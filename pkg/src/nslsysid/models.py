"""Neural identification models: unstructured, input-affine and port-Hamiltonian.

A model is a flat float64 parameter vector ``theta`` plus a layout of MLP
blocks.  The forward pass runs in torch so gradients (including the gradient
of the learned Hamiltonian with respect to the state) come from reverse-mode
autodiff.  Structural constraints of the pH architecture hold for every
``theta``:

    J_hat = D (A - A^T) D          skew-symmetric
    R_hat = D Lambda Lambda^T D    positive semidefinite
    H_hat = 0.5 * |h(x)|^2         nonnegative

where ``D`` is the constant diagonal output scaling taken from the training
data.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericalFailureError

ARCHITECTURES = ("unstructured", "input-affine", "ph")
VARIANCE_FLOOR = 1e-8
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class MLPConfig:
    in_dim: int
    out_dim: int
    hidden: int
    depth: int

    def __post_init__(self):
        if self.hidden < 1 or self.depth < 1:
            raise InvalidArgumentError("MLP needs hidden >= 1 and depth >= 1")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * self.depth + [self.out_dim]
        return [(dims[k + 1], dims[k]) for k in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass
class NormStats:
    """Affine normalisation of inputs and output scaling of the heads."""

    x_mean: np.ndarray
    x_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    xdot_std: np.ndarray
    y_std: np.ndarray

    @classmethod
    def from_data(cls, X, U, Xdot, Y) -> "NormStats":
        def std(a):
            return np.maximum(np.asarray(a, dtype=float).std(axis=0), STD_FLOOR)

        return cls(np.mean(X, axis=0), std(X), np.mean(U, axis=0), std(U), std(Xdot), std(Y))

    @classmethod
    def identity(cls, n: int, m: int) -> "NormStats":
        return cls(np.zeros(n), np.ones(n), np.zeros(m), np.ones(m), np.ones(n), np.ones(m))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in cls.__dataclass_fields__})


def block_layout(arch: str, n: int, m: int, n_h: int, n_d: int) -> dict[str, MLPConfig]:
    """Named MLP blocks of an architecture, in parameter-vector order."""
    if arch == "unstructured":
        h = int(round(2 * n_h))
        return {"f": MLPConfig(n + m, n, h, n_d), "g": MLPConfig(n, m, h, n_d)}
    if arch == "input-affine":
        return {
            "h": MLPConfig(n, n, n_h, n_d),
            "j": MLPConfig(n, n * m, n_h, n_d),
            "k": MLPConfig(n, m, n_h, n_d),
        }
    if arch == "ph":
        return {
            "A": MLPConfig(n, n * n, n_h, n_d),
            "Lambda": MLPConfig(n, n * (n + 1) // 2, n_h, n_d),
            "B": MLPConfig(n, n * m, n_h, n_d),
            "H": MLPConfig(n, n, n_h, n_d),
        }
    raise InvalidArgumentError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


@dataclass
class IdentModel:
    arch: str
    n: int
    m: int
    n_h: int
    n_d: int
    theta: np.ndarray
    norm: NormStats
    blocks: dict[str, MLPConfig] = field(init=False, repr=False)

    def __post_init__(self):
        self.blocks = block_layout(self.arch, self.n, self.m, self.n_h, self.n_d)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.param_count,):
            raise InvalidArgumentError(f"theta has {self.theta.size} entries, layout needs {self.param_count}")

    @property
    def param_count(self) -> int:
        return sum(cfg.n_params for cfg in self.blocks.values())

    def with_theta(self, theta) -> "IdentModel":
        return replace(self, theta=np.array(theta, dtype=float))


def glorot_init(blocks: dict[str, MLPConfig], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, flattened in layout order."""
    parts = []
    for cfg in blocks.values():
        for out_dim, in_dim in cfg.layer_shapes:
            limit = np.sqrt(6.0 / (in_dim + out_dim))
            parts.append(rng.uniform(-limit, limit, size=out_dim * in_dim))
            parts.append(np.zeros(out_dim))
    return np.concatenate(parts)


def build_model(arch: str, n: int, m: int, n_h: int, n_d: int, norm: NormStats | None = None, rng=None) -> IdentModel:
    if n_h < 1 or n_d < 1:
        raise InvalidArgumentError("n_h and n_d must be >= 1")
    rng = np.random.default_rng(rng)
    blocks = block_layout(arch, n, m, n_h, n_d)
    norm = norm if norm is not None else NormStats.identity(n, m)
    return IdentModel(arch, n, m, n_h, n_d, glorot_init(blocks, rng), norm)


# ---------------------------------------------------------------------------
# torch forward pass


class _Net:
    """Torch view of an :class:`IdentModel`; one leaf tensor per layer weight/bias."""

    def __init__(self, model: IdentModel, requires_grad: bool = True):
        self.model = model
        self.params: list[torch.Tensor] = []
        self.layers: dict[str, list[tuple[torch.Tensor, torch.Tensor]]] = {}
        theta = torch.from_numpy(model.theta.copy())
        offset = 0
        for name, cfg in model.blocks.items():
            layers = []
            for out_dim, in_dim in cfg.layer_shapes:
                W = theta[offset : offset + out_dim * in_dim].reshape(out_dim, in_dim).clone()
                offset += out_dim * in_dim
                b = theta[offset : offset + out_dim].clone()
                offset += out_dim
                W.requires_grad_(requires_grad)
                b.requires_grad_(requires_grad)
                layers.append((W, b))
                self.params += [W, b]
            self.layers[name] = layers
        nm = model.norm
        self.x_mean, self.x_std = torch.from_numpy(nm.x_mean), torch.from_numpy(nm.x_std)
        self.u_mean, self.u_std = torch.from_numpy(nm.u_mean), torch.from_numpy(nm.u_std)
        self.xdot_std, self.y_std = torch.from_numpy(nm.xdot_std), torch.from_numpy(nm.y_std)
        self._tril = torch.tril_indices(model.n, model.n)

    def theta(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.params]).numpy().copy()

    def flat_grad(self) -> np.ndarray:
        return torch.cat(
            [(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in self.params]
        ).numpy().copy()

    def mlp(self, name: str, z: torch.Tensor) -> torch.Tensor:
        layers = self.layers[name]
        for W, b in layers[:-1]:
            z = torch.tanh(torch.addmm(b, z, W.t()))
        W, b = layers[-1]
        return torch.addmm(b, z, W.t())

    def hamiltonian(self, x: torch.Tensor) -> torch.Tensor:
        h = self.mlp("H", (x - self.x_mean) / self.x_std)
        return 0.5 * (h * h).sum(dim=-1)

    def structure(self, x: torch.Tensor):
        """pH maps ``(J_hat, R_hat, B_hat)`` at a batch of states."""
        n, m = self.model.n, self.model.m
        xn = (x - self.x_mean) / self.x_std
        batch = x.shape[0]
        D = self.xdot_std
        A = self.mlp("A", xn).reshape(batch, n, n)
        # one symmetric factor keeps J exactly skew in floating point
        J = (A - A.transpose(1, 2)) * (D[:, None] * D[None, :])
        Lam = x.new_zeros(batch, n, n)
        Lam[:, self._tril[0], self._tril[1]] = self.mlp("Lambda", xn)
        Lam = Lam * D[:, None]
        R = Lam @ Lam.transpose(1, 2)
        B = self.mlp("B", xn).reshape(batch, n, m) * D[:, None]
        return J, R, B

    def forward(self, x: torch.Tensor, u: torch.Tensor, create_graph: bool):
        arch = self.model.arch
        if arch == "unstructured":
            xn = (x - self.x_mean) / self.x_std
            un = (u - self.u_mean) / self.u_std
            xdot = self.mlp("f", torch.cat([xn, un], dim=1)) * self.xdot_std
            y = self.mlp("g", xn) * self.y_std
            return xdot, y
        if arch == "input-affine":
            n, m = self.model.n, self.model.m
            xn = (x - self.x_mean) / self.x_std
            un = (u - self.u_mean) / self.u_std
            j = self.mlp("j", xn).reshape(-1, n, m)
            xdot = (self.mlp("h", xn) + (j @ un[..., None]).squeeze(-1)) * self.xdot_std
            y = self.mlp("k", xn) * self.y_std
            return xdot, y
        # ph operates on physical u so that y^T u is the supplied power
        x = x if x.requires_grad else x.detach().requires_grad_(True)
        H = self.hamiltonian(x)
        (gH,) = torch.autograd.grad(H.sum(), x, create_graph=create_graph)
        J, R, B = self.structure(x)
        xdot = ((J - R) @ gH[..., None]).squeeze(-1) + (B @ u[..., None]).squeeze(-1)
        y = (B.transpose(1, 2) @ gH[..., None]).squeeze(-1)
        return xdot, y


def _as_batch(a, dim: int, name: str) -> tuple[torch.Tensor, bool]:
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a2 = a[None] if single else a
    if a2.ndim != 2 or a2.shape[1] != dim:
        raise InvalidArgumentError(f"{name} must have trailing dimension {dim}, got shape {a.shape}")
    if not np.all(np.isfinite(a2)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(a2)), single


@dataclass
class ModelPrediction:
    xdot_hat: np.ndarray
    y_hat: np.ndarray


def predict(model: IdentModel, x, u) -> ModelPrediction:
    """Predicted state derivative and output for a state/input (or batch)."""
    xt, single = _as_batch(x, model.n, "x")
    ut, _ = _as_batch(u, model.m, "u")
    if xt.shape[0] != ut.shape[0]:
        raise InvalidArgumentError("x and u batch sizes differ")
    net = _Net(model, requires_grad=False)
    with torch.enable_grad():
        xdot, y = net.forward(xt, ut, create_graph=False)
    xdot, y = xdot.detach().numpy(), y.detach().numpy()
    if not (np.all(np.isfinite(xdot)) and np.all(np.isfinite(y))):
        raise NumericalFailureError("non-finite model prediction")
    if single:
        return ModelPrediction(xdot[0], y[0])
    return ModelPrediction(xdot, y)


def ph_structure(model: IdentModel, x):
    """Learned ``(J_hat, R_hat, B_hat, H_hat)`` of a pH model at states ``x``."""
    if model.arch != "ph":
        raise InvalidArgumentError("structure maps exist only for the ph architecture")
    xt, single = _as_batch(x, model.n, "x")
    net = _Net(model, requires_grad=False)
    with torch.no_grad():
        J, R, B = net.structure(xt)
        H = net.hamiltonian(xt)
    out = tuple(t.numpy() for t in (J, R, B, H))
    return tuple(o[0] for o in out) if single else out


def batch_loss(xdot_hat, y_hat, xdot, y) -> torch.Tensor:
    """Squared residuals normalised by the batch's own column variances."""
    s = torch.clamp(xdot.var(dim=0, unbiased=False), min=VARIANCE_FLOOR)
    s_y = torch.clamp(y.var(dim=0, unbiased=False), min=VARIANCE_FLOOR)
    return (((xdot - xdot_hat) ** 2) / s).sum(dim=1).mean() + (((y - y_hat) ** 2) / s_y).sum(dim=1).mean()


def loss_and_grad(model: IdentModel, X, U, Xdot, Y) -> tuple[float, np.ndarray]:
    """Batch-normalised MSE loss and its exact gradient with respect to ``theta``."""
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    net = _Net(model)
    xt, ut = torch.from_numpy(np.ascontiguousarray(X, dtype=float)), torch.from_numpy(np.ascontiguousarray(U, dtype=float))
    xdot_hat, y_hat = net.forward(xt, ut, create_graph=True)
    loss = batch_loss(xdot_hat, y_hat, torch.from_numpy(np.asarray(Xdot, dtype=float)), torch.from_numpy(np.asarray(Y, dtype=float)))
    loss.backward()
    return float(loss.detach()), net.flat_grad()


# ---------------------------------------------------------------------------
# checkpoints: "NSLM" header, arch tag, dims, theta, then the JSON sidecar

_CKPT = struct.Struct("<4sI16sIIIIQ")


def save_checkpoint(model: IdentModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = model.arch.encode().ljust(16, b"\0")
    norm = model.norm
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(b"NSLM", 1, tag, model.n, model.m, model.n_h, model.n_d, model.param_count))
        fh.write(model.theta.astype("<f8").tobytes())
        for v in (norm.x_mean, norm.x_std, norm.u_mean, norm.u_std, norm.xdot_std, norm.y_std):
            fh.write(np.asarray(v, dtype="<f8").tobytes())
    meta = {"arch": model.arch, "n": model.n, "m": model.m, "n_h": model.n_h, "n_d": model.n_d,
            "param_count": model.param_count, "norm": norm.to_dict()}
    meta.update(extra or {})
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> IdentModel:
    raw = Path(path).read_bytes()
    magic, version, tag, n, m, n_h, n_d, p = _CKPT.unpack_from(raw)
    if magic != b"NSLM" or version != 1:
        raise InvalidArgumentError(f"{path}: not a model checkpoint")
    off = _CKPT.size
    theta = np.frombuffer(raw, "<f8", count=p, offset=off).astype(float)
    off += 8 * p
    vecs = []
    for size in (n, n, m, m, n, m):
        vecs.append(np.frombuffer(raw, "<f8", count=size, offset=off).astype(float))
        off += 8 * size
    return IdentModel(tag.rstrip(b"\0").decode(), n, m, n_h, n_d, theta, NormStats(*vecs))
