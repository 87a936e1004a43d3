# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: pairwise ranking loss and tie-averaged ranks."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def rank_loss(const double[::1] scores, const double[::1] labels, double tau):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t i, j
    cdef double m = 0.0, t, z, w
    cdef bint any_pair = False
    grad_arr = np.zeros(n)
    cdef double[::1] grad = grad_arr
    for i in range(n):
        for j in range(n):
            if labels[i] > labels[j]:
                t = (scores[j] - scores[i]) / tau
                if t > m:
                    m = t
                any_pair = True
    if not any_pair:
        return 0.0, grad_arr
    z = exp(-m)
    for i in range(n):
        for j in range(n):
            if labels[i] > labels[j]:
                z += exp((scores[j] - scores[i]) / tau - m)
    for i in range(n):
        for j in range(n):
            if labels[i] > labels[j]:
                w = exp((scores[j] - scores[i]) / tau - m) / (z * tau)
                grad[j] += w
                grad[i] -= w
    return m + log(z), grad_arr


def average_ranks(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k, start, end
    cdef double avg
    order_arr = np.argsort(x, kind="mergesort")
    cdef const cnp.int64_t[::1] order = order_arr.astype(np.int64)
    ranks_arr = np.empty(n)
    cdef double[::1] ranks = ranks_arr
    start = 0
    while start < n:
        end = start + 1
        while end < n and x[order[end]] == x[order[start]]:
            end += 1
        avg = (start + end + 1) / 2.0
        for k in range(start, end):
            ranks[order[k]] = avg
        start = end
    return ranks_arr
