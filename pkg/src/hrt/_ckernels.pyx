# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: row softmax, row layer-norm, flat Adam update."""

from libc.math cimport exp, sqrt

import numpy as np

ctypedef fused real:
    float
    double


def softmax_rows(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef real m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0
        for j in range(d):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(d):
            out[i, j] /= s


def layer_norm_rows(real[:, ::1] x, real[::1] gain, real[::1] bias,
                    real[:, ::1] out, real[::1] mean, real[::1] inv_std,
                    double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef real mu, var, dv, istd
    for i in range(n):
        mu = 0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0
        for j in range(d):
            dv = x[i, j] - mu
            var += dv * dv
        var /= d
        istd = <real>(1.0 / sqrt(var + eps))
        mean[i] = mu
        inv_std[i] = istd
        for j in range(d):
            out[i, j] = (x[i, j] - mu) * istd * gain[j] + bias[j]


def adam_update_flat(double[::1] value, double[::1] grad,
                     double[::1] m, double[::1] v,
                     long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = value.shape[0]
    cdef Py_ssize_t i
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double g, mhat, vhat
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / c1
        vhat = v[i] / c2
        value[i] -= lr * mhat / (sqrt(vhat) + eps)
        grad[i] = 0.0
