# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense-layer kernels; semantics match ``_numpy`` up to
floating-point summation order.

Single-row (rollout) calls take hand-written loops where interpreter and
BLAS dispatch overhead dominates; batched calls fall through to the same
BLAS expressions as the numpy backend, which is faster there.
"""

import numpy as np

_BATCH_CUTOVER = 16


cdef void _affine_rows(double[:, ::1] x, double[:, ::1] w, double[::1] b,
                       double[:, ::1] z) noexcept:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], m = w.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double xv
    for i in range(n):
        for j in range(m):
            z[i, j] = b[j]
        for k in range(d):
            xv = x[i, k]
            for j in range(m):
                z[i, j] += xv * w[k, j]


def affine(x, weights, bias, relu):
    cdef Py_ssize_t n = x.shape[0]
    if weights.shape[0] != x.shape[1] or bias.shape[0] != weights.shape[1]:
        raise ValueError("affine: shape mismatch")
    if n >= _BATCH_CUTOVER:
        z = x @ weights
        z += bias
        if relu:
            return np.maximum(z, 0.0), z
        return z, z
    z_arr = np.empty((n, weights.shape[1]), dtype=np.float64)
    _affine_rows(x, weights, bias, z_arr)
    if not relu:
        return z_arr, z_arr
    return np.maximum(z_arr, 0.0), z_arr


cdef void _backward_rows(double[:, ::1] x, double[:, ::1] w,
                         double[:, ::1] preact, double[:, ::1] d_out,
                         bint relu, double[:, ::1] dw, double[::1] db,
                         double[:, ::1] dx) noexcept:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], m = w.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double g, acc
    for i in range(n):
        for k in range(d):
            acc = 0.0
            for j in range(m):
                g = d_out[i, j]
                if relu and preact[i, j] <= 0.0:
                    g = 0.0
                dw[k, j] += x[i, k] * g
                acc += g * w[k, j]
            dx[i, k] = acc
    for j in range(m):
        acc = 0.0
        for i in range(n):
            g = d_out[i, j]
            if relu and preact[i, j] <= 0.0:
                g = 0.0
            acc += g
        db[j] = acc


def affine_backward(x, weights, preact, d_out, relu):
    cdef Py_ssize_t n = x.shape[0]
    if d_out.shape[0] != n or d_out.shape[1] != weights.shape[1]:
        raise ValueError("affine_backward: shape mismatch")
    if n >= _BATCH_CUTOVER:
        dz = np.where(preact > 0.0, d_out, 0.0) if relu else d_out
        return dz @ weights.T, x.T @ dz, dz.sum(axis=0)
    dw = np.zeros_like(weights)
    db = np.empty(weights.shape[1], dtype=np.float64)
    dx = np.empty_like(x)
    _backward_rows(x, weights, preact, d_out, relu, dw, db, dx)
    return dx, dw, db


def sgd_update(double[::1] param, double[::1] velocity, double[::1] grad,
               double lr, double momentum):
    cdef Py_ssize_t n = param.shape[0]
    if velocity.shape[0] != n or grad.shape[0] != n:
        raise ValueError("sgd_update: shape mismatch")
    cdef Py_ssize_t i
    for i in range(n):
        velocity[i] = momentum * velocity[i] + grad[i]
        param[i] -= lr * velocity[i]
