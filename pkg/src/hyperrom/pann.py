"""Physics-augmented input-convex network (PANN) for reduced strain energy.

The network maps reduced coordinates ``x_r`` to an energy.  Input gradient
(reduced force) and input Hessian (reduced tangent stiffness) are propagated
layer by layer in closed form, so that parameter gradients of losses on all
three quantities come from a single reverse pass through that computation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import archive
from .errors import InputError, NumericError

DTYPE = torch.float64
STD_FLOOR = 1e-12


def softplus(x: torch.Tensor, alpha) -> torch.Tensor:
    """``ln(1 + exp(alpha**2 x)) / alpha**2``, overflow-free for any ``x``."""
    a2 = torch.as_tensor(alpha, dtype=DTYPE) ** 2
    t = a2 * torch.as_tensor(x, dtype=DTYPE)
    return torch.logaddexp(t, torch.zeros_like(t)) / a2


def softplus_squared(x: torch.Tensor, beta) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """SoftplusSquared ``ln(1 + exp(beta**2 x))**2 / (2 beta**4)`` and its first two derivatives."""
    b2 = torch.as_tensor(beta, dtype=DTYPE) ** 2
    x = torch.as_tensor(x, dtype=DTYPE)
    s = softplus(x, torch.sqrt(b2))
    sig = torch.sigmoid(b2 * x)
    value = 0.5 * s * s
    d1 = s * sig
    d2 = sig * sig + s * b2 * sig * torch.sigmoid(-b2 * x)
    return value, d1, d2


def parameter_count(r: int, width: int, depth: int) -> int:
    """Trainable parameters of a PANN with ``depth`` hidden layers of ``width`` neurons."""
    if depth < 1 or width < 1 or r < 1:
        raise InputError("depth, width and r must be >= 1")
    return ((r + 1) * width + (width + r + r * r) + 2
            + (width + r + 1) * width * (depth - 1))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, r: int) -> "Standardizer":
        return cls(np.zeros(r), np.ones(r))

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


class PannModel(nn.Module):
    """ICNN with pass-through layers, quadratic term ``x^T A~^T A~ x`` and consistency offsets.

    Hidden layer 0: ``z = phi(W0 s + b0)``; hidden layer i: ``z = phi(softplus(Wz_i) z + Wx_i s + b_i)``;
    output: ``softplus(wz) . z + wx . s + x^T A x`` without bias, where ``s`` is the
    standardized input.  The quadratic term acts on the raw input.
    """

    def __init__(self, r: int, width: int, depth: int, standardizer: Standardizer | None = None):
        super().__init__()
        if depth < 1 or width < 1 or r < 1:
            raise InputError("depth, width and r must be >= 1")
        self.r, self.width, self.depth = r, width, depth
        z = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=DTYPE))  # noqa: E731
        self.W0 = z(width, r)
        self.b0 = z(width)
        self.Wz = nn.ParameterList([z(width, width) for _ in range(depth - 1)])
        self.Wx = nn.ParameterList([z(width, r) for _ in range(depth - 1)])
        self.b = nn.ParameterList([z(width) for _ in range(depth - 1)])
        self.wz_out = z(width)
        self.wx_out = z(r)
        self.A_tilde = z(r, r)
        self.alpha_raw = nn.Parameter(torch.ones((), dtype=DTYPE))
        self.beta_raw = nn.Parameter(torch.ones((), dtype=DTYPE))
        std = standardizer or Standardizer.identity(r)
        if len(std.mean) != r:
            raise InputError("standardizer dimension does not match r")
        self.register_buffer("input_mean", torch.tensor(std.mean, dtype=DTYPE))
        self.register_buffer("input_std", torch.tensor(np.maximum(std.std, STD_FLOOR), dtype=DTYPE))
        self.register_buffer("energy_offset", torch.zeros((), dtype=DTYPE))
        self.register_buffer("force_offset", torch.zeros(r, dtype=DTYPE))
        self.seed: int | None = None

    # -- construction -------------------------------------------------------------

    @property
    def standardizer(self) -> Standardizer:
        return Standardizer(self.input_mean.numpy().copy(), self.input_std.numpy().copy())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def architecture(self) -> dict:
        return {"r": self.r, "width": self.width, "depth": self.depth}

    @torch.no_grad()
    def glorot_init(self, seed: int) -> "PannModel":
        """Uniform Glorot weights, zero biases, ``alpha_raw = beta_raw = 1``."""
        if seed < 0:
            raise InputError("seed must be >= 0")
        gen = torch.Generator().manual_seed(seed)

        def fill(p, fan_in, fan_out):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            p.uniform_(-bound, bound, generator=gen)

        h, r = self.width, self.r
        fill(self.W0, r, h)
        self.b0.zero_()
        for Wz, Wx, b in zip(self.Wz, self.Wx, self.b):
            fill(Wz, h, h)
            fill(Wx, r, h)
            b.zero_()
        fill(self.wz_out, h, 1)
        fill(self.wx_out, r, 1)
        fill(self.A_tilde, r, r)
        self.alpha_raw.fill_(1.0)
        self.beta_raw.fill_(1.0)
        self.seed = seed
        self.refresh_offsets()
        return self

    @torch.no_grad()
    def set_quadratic(self, A_tilde: np.ndarray) -> None:
        self.A_tilde.copy_(torch.as_tensor(A_tilde, dtype=DTYPE))
        self.refresh_offsets()

    # -- evaluation ---------------------------------------------------------------

    def quadratic_matrix(self) -> torch.Tensor:
        A = self.A_tilde.T @ self.A_tilde
        return 0.5 * (A + A.T)

    def icnn(self, x: torch.Tensor, hessian: bool = True, check: bool = True):
        """Raw ICNN energy, input gradient and (optionally) input Hessian for a batch ``x``."""
        alpha, beta = self.alpha_raw, self.beta_raw
        inv_std = 1.0 / self.input_std
        s = (x - self.input_mean) * inv_std

        def act(a, layer):
            out = softplus_squared(a, beta)
            if check and not bool(torch.isfinite(out[0]).all() & torch.isfinite(out[1]).all()):
                raise NumericError(f"non-finite activation in hidden layer {layer}")
            return out

        Ja = self.W0 * inv_std
        z, d1, d2 = act(s @ self.W0.T + self.b0, 0)
        J = d1[:, :, None] * Ja
        H = d2[:, :, None, None] * (Ja[:, :, None] * Ja[:, None, :]) if hessian else None
        for i, (Wz, Wx, b) in enumerate(zip(self.Wz, self.Wx, self.b), start=1):
            Wzb = softplus(Wz, alpha)
            a = z @ Wzb.T + s @ Wx.T + b
            Ja = torch.einsum("hk,nkr->nhr", Wzb, J) + Wx * inv_std
            z, d1, d2 = act(a, i)
            if hessian:
                Ha = torch.einsum("hk,nkrs->nhrs", Wzb, H)
                H = d2[..., None, None] * (Ja[..., :, None] * Ja[..., None, :]) + d1[..., None, None] * Ha
            J = d1[..., None] * Ja

        wzb = softplus(self.wz_out, alpha)
        A = self.quadratic_matrix()
        e = z @ wzb + s @ self.wx_out + torch.einsum("ni,ij,nj->n", x, A, x)
        g = torch.einsum("h,nhr->nr", wzb, J) + self.wx_out * inv_std + 2.0 * x @ A
        K = None
        if hessian:
            K = torch.einsum("h,nhrs->nrs", wzb, H) + 2.0 * A
            K = 0.5 * (K + K.transpose(-1, -2))
        if check and not bool(torch.isfinite(e).all()):
            raise NumericError("non-finite energy in output layer")
        return e, g, K

    def icnn_energy(self, x: torch.Tensor) -> torch.Tensor:
        """Plain forward pass (energy only) of the raw ICNN, without derivative propagation."""
        s = (x - self.input_mean) / self.input_std
        z = softplus_squared(s @ self.W0.T + self.b0, self.beta_raw)[0]
        for Wz, Wx, b in zip(self.Wz, self.Wx, self.b):
            z = softplus_squared(z @ softplus(Wz, self.alpha_raw).T + s @ Wx.T + b, self.beta_raw)[0]
        A = self.quadratic_matrix()
        return (z @ softplus(self.wz_out, self.alpha_raw) + s @ self.wx_out
                + torch.einsum("...i,ij,...j->...", x, A, x))

    def forward(self, x: torch.Tensor, hessian: bool = True, check: bool = True):
        """Corrected energy, force and tangent stiffness; offsets follow the current parameters."""
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.ndim == 1
        x = torch.atleast_2d(x)
        if x.shape[-1] != self.r:
            raise InputError(f"input has {x.shape[-1]} components, model expects {self.r}")
        x0 = torch.zeros(1, self.r, dtype=DTYPE)
        e, g, K = self.icnn(torch.cat([x, x0]), hessian=hessian, check=check)
        e0, g0 = e[-1], g[-1]
        with torch.no_grad():
            self.energy_offset.copy_(e0)
            self.force_offset.copy_(g0)
        e_hat = e[:-1] - x @ g0 - e0
        f_hat = g[:-1] - g0
        K_hat = K[:-1] if hessian else None
        if single:
            return e_hat[0], f_hat[0], None if K_hat is None else K_hat[0]
        return e_hat, f_hat, K_hat

    @torch.no_grad()
    def refresh_offsets(self) -> None:
        e, g, _ = self.icnn(torch.zeros(1, self.r, dtype=DTYPE), hessian=False)
        self.energy_offset.copy_(e[0])
        self.force_offset.copy_(g[0])

    @torch.no_grad()
    def predict(self, x_r: np.ndarray, hessian: bool = True):
        """NumPy convenience wrapper around :meth:`forward`."""
        e, f, K = self(torch.as_tensor(np.asarray(x_r, dtype=float)), hessian=hessian)
        return (e.numpy().copy() if e.ndim else float(e), f.numpy().copy(),
                None if K is None else K.numpy().copy())

    # -- persistence --------------------------------------------------------------

    def save(self, path, hyperparameters: dict | None = None) -> Path:
        path = Path(path).with_suffix(".hrmod")
        self.refresh_offsets()
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        meta = {"architecture": self.architecture(), "seed": self.seed,
                "energy_offset": float(self.energy_offset), "parameters": self.num_parameters()}
        archive.save_arrays(path, "pann", arrays, meta)
        path.with_suffix(".json").write_text(json.dumps(
            {**meta, "hyperparameters": hyperparameters or {}}, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "PannModel":
        arrays, meta = archive.load_arrays(Path(path).with_suffix(".hrmod"), "pann")
        arch = meta["architecture"]
        model = cls(arch["r"], arch["width"], arch["depth"])
        model.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()})
        model.seed = meta["seed"]
        return model


def physical_init_quadratic(K_r0: np.ndarray) -> np.ndarray:
    """``A~`` with ``A~^T A~ = K_r0 / 2`` from the eigendecomposition of ``K_r0``."""
    K = np.asarray(K_r0, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InputError("K_r0 must be square")
    K = 0.5 * (K + K.T)
    lam, Q = np.linalg.eigh(K)
    if lam.min() < -1e-10 * max(np.abs(lam).max(), np.finfo(float).tiny):
        raise InputError(f"K_r0 has a negative eigenvalue {lam.min():.3e}")
    lam = np.clip(lam, 0.0, None)
    return (Q * np.sqrt(lam)).T / math.sqrt(2.0)


def build_model(r: int, width: int, depth: int, seed: int, standardizer: Standardizer | None = None,
                rest_stiffness: np.ndarray | None = None) -> PannModel:
    """Glorot-initialized model; ``rest_stiffness`` switches on the physical quadratic init."""
    model = PannModel(r, width, depth, standardizer).glorot_init(seed)
    if rest_stiffness is not None:
        model.set_quadratic(physical_init_quadratic(rest_stiffness))
    return model


def force_and_tangent(model: PannModel, x_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced force and tangent stiffness at a single reduced state (NumPy in and out)."""
    _, f, K = model.predict(np.asarray(x_r, dtype=float))
    return f, K
