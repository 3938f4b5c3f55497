"""Recurrent and stochastic building blocks on top of the autodiff core.

The GRU step and the whole-utterance GRU run are fused tape primitives with
hand-written adjoints; the sequence form exists because per-token Python
dispatch would dominate training time otherwise.  Both are cross-checked in
the test suite against each other and against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation, Tape, Tensor, _tape_of, sigmoid_values


@dataclass
class GruParams:
    """Weights of one GRU cell: update (z), reset (r) and candidate (h) gates.

    Input-to-hidden matrices are (H, D), hidden-to-hidden are (H, H), biases
    are length H.
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.shape[1]

    def check(self) -> None:
        h, d = self.hidden_size, self.input_size
        for name in ("w_z", "w_r", "w_h"):
            if getattr(self, name).shape != (h, d):
                raise ContractViolation(f"GruParams.{name}: expected {(h, d)}")
        for name in ("u_z", "u_r", "u_h"):
            if getattr(self, name).shape != (h, h):
                raise ContractViolation(f"GruParams.{name}: expected {(h, h)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (h,):
                raise ContractViolation(f"GruParams.{name}: expected {(h,)}")

    def tensors(self) -> tuple:
        return (self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h)


def _gru_forward_arrays(x, h_prev, p: GruParams):
    z = sigmoid_values(p.w_z.data @ x + p.u_z.data @ h_prev + p.b_z.data)
    r = sigmoid_values(p.w_r.data @ x + p.u_r.data @ h_prev + p.b_r.data)
    c = np.tanh(p.w_h.data @ x + p.u_h.data @ (r * h_prev) + p.b_h.data)
    return (1.0 - z) * h_prev + z * c, z, r, c


def _gru_backward_step(g, x, h_prev, z, r, c, p: GruParams):
    """Adjoints of one GRU step.  Returns (dx, dh_prev, d_params...)."""
    dz = g * (c - h_prev)
    dc = g * z
    dh = g * (1.0 - z)
    da_h = dc * (1.0 - c * c)
    rh = r * h_prev
    d_rh = p.u_h.data.T @ da_h
    dr = d_rh * h_prev
    dh = dh + d_rh * r
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dx = p.w_h.data.T @ da_h + p.w_r.data.T @ da_r + p.w_z.data.T @ da_z
    dh = dh + p.u_r.data.T @ da_r + p.u_z.data.T @ da_z
    return (
        dx,
        dh,
        np.outer(da_z, x), np.outer(da_z, h_prev), da_z,
        np.outer(da_r, x), np.outer(da_r, h_prev), da_r,
        np.outer(da_h, x), np.outer(da_h, rh), da_h,
    )


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU update: h' = (1-z)*h + z*tanh(Wh x + Uh (r*h) + bh).

    The reset gate acts inside the candidate's recurrent term; with all
    parameters zero this halves h_prev exactly (z = 1/2, candidate = 0).
    """
    p.check()
    if x.shape != (p.input_size,) or h_prev.shape != (p.hidden_size,):
        raise ContractViolation(
            f"gru_step: x{x.shape}/h{h_prev.shape} do not match params "
            f"(D={p.input_size}, H={p.hidden_size})")
    tape = _tape_of(x, h_prev, *p.tensors())
    h_next, z, r, c = _gru_forward_arrays(x.data, h_prev.data, p)
    out = Tensor(h_next, tape)
    if tape is not None:
        xd, hd = x.data, h_prev.data

        def bwd(g):
            return _gru_backward_step(g, xd, hd, z, r, c, p)

        tape.record(out, (x, h_prev) + p.tensors(), bwd)
    return out


def gru_sequence(xs: Tensor, h0: Tensor, p: GruParams) -> Tensor:
    """Run a GRU over the rows of xs (T, D) from h0; returns all states (T, H).

    Equivalent to folding gru_step over the rows, but recorded as a single
    tape primitive: the input-side projections batch into one matmul and the
    backward pass is hand-rolled truncated BPTT over the T steps.
    """
    p.check()
    if xs.data.ndim != 2 or xs.shape[1] != p.input_size or h0.shape != (p.hidden_size,):
        raise ContractViolation(
            f"gru_sequence: xs{xs.shape}/h0{h0.shape} do not match params")
    tape = _tape_of(xs, h0, *p.tensors())
    steps = xs.shape[0]
    hidden = p.hidden_size

    ax_z = xs.data @ p.w_z.data.T + p.b_z.data
    ax_r = xs.data @ p.w_r.data.T + p.b_r.data
    ax_h = xs.data @ p.w_h.data.T + p.b_h.data
    zs = np.empty((steps, hidden))
    rs = np.empty((steps, hidden))
    cs = np.empty((steps, hidden))
    hs = np.empty((steps, hidden))
    h = h0.data
    uz, ur, uh = p.u_z.data, p.u_r.data, p.u_h.data
    for t in range(steps):
        z = sigmoid_values(ax_z[t] + uz @ h)
        r = sigmoid_values(ax_r[t] + ur @ h)
        c = np.tanh(ax_h[t] + uh @ (r * h))
        zs[t], rs[t], cs[t] = z, r, c
        h = (1.0 - z) * h + z * c
        hs[t] = h
    out = Tensor(hs, tape)

    if tape is not None:
        x_data, h0_data = xs.data, h0.data

        def bwd(g):
            da_z = np.empty((steps, hidden))
            da_r = np.empty((steps, hidden))
            da_h = np.empty((steps, hidden))
            prev = np.empty((steps, hidden))
            dh = np.zeros(hidden)
            for t in range(steps - 1, -1, -1):
                h_prev = hs[t - 1] if t > 0 else h0_data
                prev[t] = h_prev
                z, r, c = zs[t], rs[t], cs[t]
                gt = g[t] + dh
                dah = gt * z * (1.0 - c * c)
                d_rh = uh.T @ dah
                dar = d_rh * h_prev * r * (1.0 - r)
                daz = gt * (c - h_prev) * z * (1.0 - z)
                da_z[t], da_r[t], da_h[t] = daz, dar, dah
                dh = gt * (1.0 - z) + d_rh * r + ur.T @ dar + uz.T @ daz
            rh = rs * prev
            d_xs = da_z @ p.w_z.data + da_r @ p.w_r.data + da_h @ p.w_h.data
            return (
                d_xs,
                dh,
                da_z.T @ x_data, da_z.T @ prev, da_z.sum(axis=0),
                da_r.T @ x_data, da_r.T @ prev, da_r.sum(axis=0),
                da_h.T @ x_data, da_h.T @ rh, da_h.sum(axis=0),
            )

        tape.record(out, (xs, h0) + p.tensors(), bwd)
    return out


def last_row(m: Tensor) -> Tensor:
    """Final row of a (T, D) matrix as a vector."""
    if m.data.ndim != 2 or m.shape[0] < 1:
        raise ContractViolation("last_row: need a nonempty matrix")
    out = Tensor(m.data[-1].copy(), m.tape)
    if m.tape is not None:
        shape = m.shape

        def bwd(g):
            gm = np.zeros(shape)
            gm[-1] = g
            return (gm,)

        m.tape.record(out, (m,), bwd)
    return out


def sample_gaussian(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw z = mu + sigma * eps with eps ~ N(0, I).

    Differentiable in mu and sigma; the draw itself is treated as a constant.
    """
    if mu.shape != sigma.shape:
        raise ContractViolation(f"sample_gaussian: shape mismatch {mu.shape} vs {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ContractViolation("sample_gaussian: sigma must be entrywise positive")
    eps = rng.standard_normal(mu.shape)
    tape = _tape_of(mu, sigma)
    out = Tensor(mu.data + sigma.data * eps, tape)
    if tape is not None:
        tape.record(out, (mu, sigma), lambda g: (g.copy(), g * eps))
    return out


def uniform_init(rng: np.random.Generator, shape: tuple, scale: float = 0.08) -> np.ndarray:
    """Weight initializer: uniform(-scale, scale)."""
    return rng.uniform(-scale, scale, size=shape)
