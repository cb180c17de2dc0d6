# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled cell-step kernel.  Mirrors _cell_py exactly; see that module for
the layout contract.  A CellKernel binds one sensor's tensors once, so the
per-step calls acquire only the two state views.  Heavy loops run without
the GIL."""

import numpy as np

from libc.math cimport cos, exp, isfinite, sin, tanh
from libc.stdlib cimport free, malloc

BACKEND = "compiled"


cdef inline double _sig(double v) noexcept nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


cdef class CellKernel:
    cdef double[::1] omega, phi
    cdef double[:, ::1] w_dec, b_dec, w_cell, b_cell
    cdef double[:, :, ::1] v_dec, v_cell
    cdef Py_ssize_t H, dt
    cdef object _refs

    def __init__(self, omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell):
        self._refs = (omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell)
        self.omega = omega
        self.phi = phi
        self.w_dec = w_dec
        self.v_dec = v_dec
        self.b_dec = b_dec
        self.w_cell = w_cell
        self.v_cell = v_cell
        self.b_cell = b_cell
        self.H = w_dec.shape[1]
        self.dt = omega.shape[0]

    def forward(self, double x, double delta, double[::1] h_prev, double[::1] c_glob):
        """Returns (out, cache): out = [h_new; c_new], cache feeds backward.

        The cache block packs cos_u | tv | gd(3H) | h_til | f | i | o |
        cand | p | th.  Raises ValueError on a non-finite output.
        """
        cdef Py_ssize_t H = self.H, dt = self.dt
        cdef Py_ssize_t g, hh, k, bad
        block_a = np.empty(2 * dt + 10 * H)
        out_a = np.empty(2 * H)
        cdef double[::1] b = block_a
        cdef double[::1] out = out_a
        cdef Py_ssize_t o_tv = dt, o_gd = 2 * dt, o_htil = 2 * dt + 3 * H
        cdef Py_ssize_t o_f = o_htil + H, o_i = o_f + H, o_o = o_i + H
        cdef Py_ssize_t o_cand = o_o + H, o_p = o_cand + H, o_th = o_p + H
        cdef double u, acc, z0, z1, z2, z3, fv, iv, ov, cv, keep, pv

        bad = 0
        with nogil:
            for k in range(dt):
                u = self.omega[k] * delta + self.phi[k]
                b[k] = cos(u)
                b[o_tv + k] = sin(u)
            for g in range(3):
                for hh in range(H):
                    acc = self.w_dec[g, hh] * x + self.b_dec[g, hh]
                    for k in range(dt):
                        acc += self.v_dec[g, hh, k] * b[o_tv + k]
                    b[o_gd + g * H + hh] = tanh(acc)
            for hh in range(H):
                b[o_htil + hh] = b[o_gd + hh] * h_prev[hh]
            for hh in range(H):
                z0 = self.w_cell[0, hh] * x + self.b_cell[0, hh]
                z1 = self.w_cell[1, hh] * x + self.b_cell[1, hh]
                z2 = self.w_cell[2, hh] * x + self.b_cell[2, hh]
                z3 = self.w_cell[3, hh] * x + self.b_cell[3, hh]
                for k in range(H):
                    z0 += self.v_cell[0, hh, k] * b[o_htil + k]
                    z1 += self.v_cell[1, hh, k] * b[o_htil + k]
                    z2 += self.v_cell[2, hh, k] * b[o_htil + k]
                    z3 += self.v_cell[3, hh, k] * b[o_htil + k]
                fv = _sig(z0)
                iv = _sig(z1)
                ov = _sig(z2)
                cv = tanh(z3)
                keep = fv * c_glob[hh]
                pv = iv * cv
                b[o_f + hh] = fv
                b[o_i + hh] = iv
                b[o_o + hh] = ov
                b[o_cand + hh] = cv
                b[o_p + hh] = pv
                b[o_th + hh] = tanh(keep + pv * b[o_gd + 2 * H + hh])
                out[hh] = ov * b[o_th + hh]
                out[H + hh] = keep + pv * b[o_gd + H + hh]
            for hh in range(2 * H):
                if not isfinite(out[hh]):
                    bad = 1
                    break
        if bad:
            raise ValueError("non-finite cell output")
        return out_a, (block_a, x, delta, h_prev, c_glob)

    def backward(self, tuple cache, double[::1] grad_out):
        """Adjoints in parameter order: omega, phi, decay W/V/b, cell W/V/b,
        h_prev, c_glob."""
        block_a, x_f, delta_f, h_prev_mv, c_glob_mv = cache
        cdef double[::1] b = block_a
        cdef double[::1] h_prev = h_prev_mv
        cdef double[::1] c_glob = c_glob_mv
        cdef double x = x_f, delta = delta_f
        cdef Py_ssize_t H = self.H, dt = self.dt
        cdef Py_ssize_t g, hh, k
        cdef Py_ssize_t o_tv = dt, o_gd = 2 * dt, o_htil = 2 * dt + 3 * H
        cdef Py_ssize_t o_f = o_htil + H, o_i = o_f + H, o_o = o_i + H
        cdef Py_ssize_t o_cand = o_o + H, o_p = o_cand + H, o_th = o_p + H

        d_omega_a = np.empty(dt)
        d_phi_a = np.empty(dt)
        d_w_dec_a = np.empty((3, H))
        d_v_dec_a = np.empty((3, H, dt))
        d_b_dec_a = np.empty((3, H))
        d_w_cell_a = np.empty((4, H))
        d_v_cell_a = np.empty((4, H, H))
        d_b_cell_a = np.empty((4, H))
        d_h_prev_a = np.empty(H)
        d_cglob_a = np.empty(H)
        cdef double[::1] d_omega = d_omega_a, d_phi = d_phi_a
        cdef double[:, ::1] d_w_dec = d_w_dec_a, d_b_dec = d_b_dec_a
        cdef double[:, :, ::1] d_v_dec = d_v_dec_a, d_v_cell = d_v_cell_a
        cdef double[:, ::1] d_w_cell = d_w_cell_a, d_b_cell = d_b_cell_a
        cdef double[::1] d_h_prev = d_h_prev_a, d_cglob = d_cglob_a

        cdef double dh, dc, d_o, d_th, d_q, d_keep, d_p, d_f, d_i, d_cand
        cdef double v, du, fv, iv, ov, cv, thv, g1, g2, g3
        cdef double *dz
        cdef double *da
        cdef double *d_htil
        cdef double *d_tv

        with nogil:
            dz = <double *> malloc(4 * H * sizeof(double))
            da = <double *> malloc(3 * H * sizeof(double))
            d_htil = <double *> malloc(H * sizeof(double))
            d_tv = <double *> malloc(dt * sizeof(double))
            for hh in range(H):
                dh = grad_out[hh]
                dc = grad_out[H + hh]
                fv = b[o_f + hh]
                iv = b[o_i + hh]
                ov = b[o_o + hh]
                cv = b[o_cand + hh]
                thv = b[o_th + hh]
                g2 = b[o_gd + H + hh]
                g3 = b[o_gd + 2 * H + hh]
                d_o = dh * thv
                d_th = dh * ov
                d_q = d_th * (1.0 - thv * thv)
                d_keep = dc + d_q
                d_p = dc * g2 + d_q * g3
                da[H + hh] = dc * b[o_p + hh] * (1.0 - g2 * g2)
                da[2 * H + hh] = d_q * b[o_p + hh] * (1.0 - g3 * g3)
                d_f = d_keep * c_glob[hh]
                d_cglob[hh] = d_keep * fv
                d_i = d_p * cv
                d_cand = d_p * iv
                dz[hh] = d_f * fv * (1.0 - fv)
                dz[H + hh] = d_i * iv * (1.0 - iv)
                dz[2 * H + hh] = d_o * ov * (1.0 - ov)
                dz[3 * H + hh] = d_cand * (1.0 - cv * cv)
            for k in range(H):
                d_htil[k] = 0.0
            for g in range(4):
                for hh in range(H):
                    v = dz[g * H + hh]
                    d_w_cell[g, hh] = v * x
                    d_b_cell[g, hh] = v
                    for k in range(H):
                        d_v_cell[g, hh, k] = v * b[o_htil + k]
                        d_htil[k] += self.v_cell[g, hh, k] * v
            for hh in range(H):
                g1 = b[o_gd + hh]
                d_h_prev[hh] = d_htil[hh] * g1
                da[hh] = d_htil[hh] * h_prev[hh] * (1.0 - g1 * g1)
            for k in range(dt):
                d_tv[k] = 0.0
            for g in range(3):
                for hh in range(H):
                    v = da[g * H + hh]
                    d_w_dec[g, hh] = v * x
                    d_b_dec[g, hh] = v
                    for k in range(dt):
                        d_v_dec[g, hh, k] = v * b[o_tv + k]
                        d_tv[k] += self.v_dec[g, hh, k] * v
            for k in range(dt):
                du = d_tv[k] * b[k]
                d_omega[k] = du * delta
                d_phi[k] = du
            free(dz)
            free(da)
            free(d_htil)
            free(d_tv)

        return (d_omega_a, d_phi_a, d_w_dec_a, d_v_dec_a, d_b_dec_a,
                d_w_cell_a, d_v_cell_a, d_b_cell_a, d_h_prev_a, d_cglob_a)


def make_cell(omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell):
    return CellKernel(omega, phi, w_dec, v_dec, b_dec, w_cell, v_cell, b_cell)
