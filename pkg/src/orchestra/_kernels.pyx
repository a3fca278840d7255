# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rollout kernels: single-sample MLP forward, masked softmax, sampling, fit test."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

cdef double FIT_TOL = 1e-12


def mlp_forward(list weights, list biases, x):
    cdef Py_ssize_t n_layers = len(weights)
    cdef double[::1] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] W
    cdef double[::1] b
    cdef double[::1] out
    cdef double *wrow
    cdef double *po
    cdef Py_ssize_t k, i, j, n_in, n_out
    cdef double acc
    for k in range(n_layers):
        W = weights[k]
        b = biases[k]
        n_in = W.shape[0]
        n_out = W.shape[1]
        if h.shape[0] != n_in:
            raise ValueError(f"layer {k}: expected input of size {n_in}, got {h.shape[0]}")
        out = np.empty(n_out, dtype=np.float64)
        po = &out[0]
        for j in range(n_out):
            po[j] = b[j]
        for i in range(n_in):
            acc = h[i]
            if acc != 0.0:
                wrow = &W[i, 0]
                for j in range(n_out):
                    po[j] += acc * wrow[j]
        if k < n_layers - 1:
            for j in range(n_out):
                po[j] = tanh(po[j])
        h = out
    return np.asarray(h)


def masked_softmax(logits, mask):
    cdef double[::1] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef cnp.uint8_t[::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t n = z.shape[0], i
    cdef double zmax = 0.0, total = 0.0
    cdef bint any_legal = False
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        if m[i]:
            if not any_legal or z[i] > zmax:
                zmax = z[i]
            any_legal = True
    if not any_legal:
        raise ValueError("mask has no legal action")
    for i in range(n):
        if m[i]:
            out[i] = exp(z[i] - zmax)
            total += out[i]
    for i in range(n):
        out[i] /= total
    return out_arr


def sample_index(probs, double u):
    cdef double[::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, last = -1
    cdef double total = 0.0, acc = 0.0, target
    for i in range(n):
        total += p[i]
    target = u * total
    for i in range(n):
        if p[i] > 0.0:
            acc += p[i]
            last = i
            if acc > target:
                return i
    return last


def fits(residual, demand, active):
    cdef double[:, ::1] res = np.ascontiguousarray(residual, dtype=np.float64)
    cdef double[::1] d = np.ascontiguousarray(demand, dtype=np.float64)
    cdef cnp.uint8_t[::1] act = np.ascontiguousarray(active, dtype=np.uint8)
    cdef Py_ssize_t n = res.shape[0], r, m
    out_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    for m in range(n):
        if not act[m]:
            continue
        out[m] = 1
        for r in range(res.shape[1]):
            if res[m, r] + FIT_TOL < d[r]:
                out[m] = 0
                break
    return out_arr
