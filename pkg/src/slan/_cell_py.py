"""Pure NumPy cell-step kernel.

Layout contract shared with the compiled backend:

* time2vec tensors: ``omega``/``phi`` of shape ``(d_t,)``
* decay tensors: ``W (3, H)``, ``V (3, H, d_t)``, ``b (3, H)``; rows are the
  hidden-, cell-, and output-decay gates in that order
* cell tensors: ``W (4, H)``, ``V (4, H, H)``, ``b (4, H)``; rows are the
  forget, input, output, and candidate pre-activations in that order

``make_cell`` binds one sensor's tensors and returns an object with

* ``forward(x, delta, h_prev, c_glob) -> (out, cache)`` where ``out`` is the
  concatenation ``[h_new; c_new]`` of length ``2 H``
* ``backward(cache, grad_out) -> 10-tuple`` of adjoints in parameter order
  ``omega, phi, decay W/V/b, cell W/V/b, h_prev, c_glob``

Both backends compute the same math; they agree to roundoff but are not
bit-identical to each other.
"""

import numpy as np

BACKEND = "python"


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _PyCell:
    """One sensor's bound tensors plus the forward/backward rules."""

    __slots__ = ("omega", "phi", "w_dec", "v_dec", "b_dec",
                 "w_cell", "v_cell", "b_cell")

    def __init__(self, omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell):
        self.omega = omega
        self.phi = phi
        self.w_dec = w_dec
        self.v_dec = v_dec
        self.b_dec = b_dec
        self.w_cell = w_cell
        self.v_cell = v_cell
        self.b_cell = b_cell

    def forward(self, x, delta, h_prev, c_glob):
        u = self.omega * delta + self.phi
        cos_u = np.cos(u)
        tv = np.sin(u)
        gd = np.tanh(self.w_dec * x + self.v_dec @ tv + self.b_dec)
        h_til = gd[0] * h_prev
        z = self.w_cell * x + self.v_cell @ h_til + self.b_cell
        f = _sigmoid(z[0])
        i = _sigmoid(z[1])
        o = _sigmoid(z[2])
        cand = np.tanh(z[3])
        keep = f * c_glob
        p = i * cand
        c_new = keep + p * gd[1]
        th = np.tanh(keep + p * gd[2])
        out = np.concatenate([o * th, c_new])
        if not np.isfinite(out).all():
            raise ValueError("non-finite cell output")
        cache = (cos_u, tv, gd, h_til, f, i, o, cand, p, th,
                 x, delta, h_prev, c_glob)
        return out, cache

    def backward(self, cache, grad_out):
        (cos_u, tv, gd, h_til, f, i, o, cand, p, th,
         x, delta, h_prev, c_glob) = cache
        hsz = f.shape[0]
        dh = grad_out[:hsz]
        dc = grad_out[hsz:]

        d_o = dh * th
        d_q = dh * o * (1.0 - th * th)
        d_keep = dc + d_q
        d_p = dc * gd[1] + d_q * gd[2]
        da = np.empty_like(gd)
        da[1] = dc * p * (1.0 - gd[1] * gd[1])
        da[2] = d_q * p * (1.0 - gd[2] * gd[2])
        d_f = d_keep * c_glob
        d_cglob = d_keep * f
        d_i = d_p * cand
        d_cand = d_p * i

        dz = np.empty((4, hsz))
        dz[0] = d_f * f * (1.0 - f)
        dz[1] = d_i * i * (1.0 - i)
        dz[2] = d_o * o * (1.0 - o)
        dz[3] = d_cand * (1.0 - cand * cand)

        d_w_cell = dz * x
        d_b_cell = dz
        d_v_cell = dz[:, :, None] * h_til[None, None, :]
        d_h_til = np.tensordot(self.v_cell, dz, axes=([0, 1], [0, 1]))

        d_h_prev = d_h_til * gd[0]
        da[0] = d_h_til * h_prev * (1.0 - gd[0] * gd[0])

        d_w_dec = da * x
        d_b_dec = da
        d_v_dec = da[:, :, None] * tv[None, None, :]
        d_tv = np.tensordot(self.v_dec, da, axes=([0, 1], [0, 1]))

        du = d_tv * cos_u
        d_omega = du * delta
        d_phi = du.copy()

        return (d_omega, d_phi, d_w_dec, d_v_dec, d_b_dec,
                d_w_cell, d_v_cell, d_b_cell, d_h_prev, d_cglob)


def make_cell(omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell):
    return _PyCell(omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell)
