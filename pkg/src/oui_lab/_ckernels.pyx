# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, exp

cnp.import_array()

cdef double GRAVITY = 9.8
cdef double MASSCART = 1.0
cdef double MASSPOLE = 0.1
cdef double TOTAL_MASS = MASSCART + MASSPOLE
cdef double LENGTH = 0.5
cdef double POLEMASS_LENGTH = MASSPOLE * LENGTH
cdef double FORCE_MAG = 10.0
cdef double TAU = 0.02


def cartpole_step(double x, double x_dot, double theta, double theta_dot, int action):
    cdef double force = FORCE_MAG if action == 1 else -FORCE_MAG
    cdef double costheta = cos(theta)
    cdef double sintheta = sin(theta)
    cdef double temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
    cdef double thetaacc = (GRAVITY * sintheta - costheta * temp) / (
        LENGTH * (4.0 / 3.0 - MASSPOLE * costheta * costheta / TOTAL_MASS)
    )
    cdef double xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
    return (
        x + TAU * x_dot,
        x_dot + TAU * xacc,
        theta + TAU * theta_dot,
        theta_dot + TAU * thetaacc,
    )


cdef class DenseStack:
    cdef list _weights
    cdef list _biases
    cdef int n_layers
    cdef int max_width
    cdef double[::1] buf_a
    cdef double[::1] buf_b

    def __init__(self, weights, biases):
        self._weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self._biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.n_layers = len(self._weights)
        widths = [w.shape[0] for w in self._weights] + [w.shape[1] for w in self._weights]
        self.max_width = max(widths)
        self.buf_a = np.zeros(self.max_width)
        self.buf_b = np.zeros(self.max_width)

    @property
    def weights(self):
        return self._weights

    @property
    def biases(self):
        return self._biases

    cdef int _forward(self, const double[::1] obs) except -1:
        # result lands in buf_a[:out_width]
        cdef double[:, ::1] w
        cdef double[::1] b
        cdef double[::1] src
        cdef double[::1] dst
        cdef double acc
        cdef Py_ssize_t i, k, n_out, n_in
        cdef int layer
        n_in = obs.shape[0]
        for k in range(n_in):
            self.buf_a[k] = obs[k]
        for layer in range(self.n_layers):
            w = self._weights[layer]
            b = self._biases[layer]
            n_out = w.shape[0]
            n_in = w.shape[1]
            src = self.buf_a
            dst = self.buf_b
            for i in range(n_out):
                acc = 0.0
                for k in range(n_in):
                    acc += w[i, k] * src[k]
                acc += b[i]
                if layer < self.n_layers - 1 and acc < 0.0:
                    acc = 0.0
                dst[i] = acc
            for i in range(n_out):
                self.buf_a[i] = dst[i]
        return 0

    def forward_one(self, obs):
        cdef const double[::1] o = np.ascontiguousarray(obs, dtype=np.float64)
        self._forward(o)
        n_out = self._weights[self.n_layers - 1].shape[0]
        return np.asarray(self.buf_a[:n_out]).copy()

    def sample(self, obs, double u):
        cdef const double[::1] o = np.ascontiguousarray(obs, dtype=np.float64)
        self._forward(o)
        cdef Py_ssize_t n = self._weights[self.n_layers - 1].shape[0]
        cdef Py_ssize_t a
        cdef double mx = self.buf_a[0]
        cdef double total = 0.0
        cdef double acc = 0.0
        for a in range(1, n):
            if self.buf_a[a] > mx:
                mx = self.buf_a[a]
        for a in range(n):
            self.buf_b[a] = exp(self.buf_a[a] - mx)
            total += self.buf_b[a]
        for a in range(n - 1):
            acc += self.buf_b[a] / total
            if u < acc:
                return a
        return n - 1


def gae(const double[::1] rewards, const double[::1] values, const double[::1] next_values,
        terminated, truncated, double gamma, double lam):
    cdef const unsigned char[::1] term = np.ascontiguousarray(terminated, dtype=np.uint8)
    cdef const unsigned char[::1] trunc = np.ascontiguousarray(truncated, dtype=np.uint8)
    cdef Py_ssize_t n = rewards.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] adv = out
    cdef double last = 0.0
    cdef double nonterm, cont, delta
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        nonterm = 0.0 if term[t] else 1.0
        cont = 0.0 if (term[t] or trunc[t]) else 1.0
        delta = rewards[t] + gamma * next_values[t] * nonterm - values[t]
        last = delta + gamma * lam * cont * last
        adv[t] = last
    return out


def column_counts(mask):
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask).view(np.uint8)
    cdef Py_ssize_t n_rows = m.shape[0], n_cols = m.shape[1], r, c
    out = np.zeros(n_cols, dtype=np.int64)
    cdef cnp.int64_t[::1] s = out
    # bool bytes are 0/1, so plain adds keep the loop branch-free
    for r in range(n_rows):
        for c in range(n_cols):
            s[c] += m[r, c]
    return out


def transition_counts(prev, curr):
    cdef const unsigned char[:, ::1] p = np.ascontiguousarray(prev).view(np.uint8)
    cdef const unsigned char[:, ::1] q = np.ascontiguousarray(curr).view(np.uint8)
    if p.shape[0] != q.shape[0] or p.shape[1] != q.shape[1]:
        raise ValueError("mask shapes differ")
    cdef Py_ssize_t n_rows = p.shape[0], n_cols = p.shape[1], r, c
    mp = np.zeros(n_cols, dtype=np.int64)
    pm = np.zeros(n_cols, dtype=np.int64)
    cdef cnp.int64_t[::1] n_mp = mp
    cdef cnp.int64_t[::1] n_pm = pm
    for r in range(n_rows):
        for c in range(n_cols):
            n_pm[c] += p[r, c] & (q[r, c] ^ 1)
            n_mp[c] += q[r, c] & (p[r, c] ^ 1)
    return mp, pm
