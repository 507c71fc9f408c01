# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: the MCMC chain, the backward recursion, the MAP
recursion and the Carpenter merge.

Each kernel mirrors its pure-Python counterpart operation for operation
(same random-number consumption, same floating-point expression order), so
the two backends agree bit for bit. The one exception is Poisson data whose
total count is too large for the lgamma table, where libm lgamma is used.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, lgamma, INFINITY, fabs
from libc.string cimport memmove, memcpy
from libc.stdint cimport int64_t, uint8_t
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t
from posix.time cimport clock_gettime, timespec, CLOCK_MONOTONIC

cnp.import_array()

DEF MAX_REDRAWS = 50
DEF POISSON_GAMMA = 0
DEF GAUSSIAN_MEAN = 1


ctypedef struct Scorer:
    int kind
    Py_ssize_t n
    double c0, c1, c2
    bint lgamma_table
    const double *length
    const double *ps
    const double *pss
    const double *plf
    const double *fgap
    const double *gap
    const double *fsurv
    const double *surv


cdef inline double marginal(const Scorer *s, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # evidence of y[a+1..b]
    cdef double kk = <double>(b - a)
    cdef double s1 = s.ps[b] - s.ps[a]
    cdef double s2, f, dev, ss, q
    if s.kind == POISSON_GAMMA:
        f = s.plf[b] - s.plf[a]
        if s.lgamma_table:
            return s.c0 - f + s.length[<Py_ssize_t>s1] - (s1 + s.c1) * log(kk + s.c2)
        return s.c0 - f + lgamma(s1 + s.c1) - (s1 + s.c1) * log(kk + s.c2)
    s2 = s.pss[b] - s.pss[a]
    if s.kind == GAUSSIAN_MEAN:
        dev = s1 / kk
        ss = s2 - s1 * dev
        if ss < 0.0:
            ss = 0.0
        q = ss + kk / (kk * s.c1 + 1.0) * dev * dev
        return s.length[b - a] - q / s.c2
    if s2 < 0.0:
        s2 = 0.0
    return s.length[b - a] - (s.c0 + 0.5 * kk) * log(s.c1 + 0.5 * s2)


cdef inline double seg(const Scorer *s, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef double link
    cdef Py_ssize_t n = s.n
    if b < n:
        link = s.fgap[b] if a == 0 else s.gap[b - a]
    else:
        link = s.fsurv[n - 1] if a == 0 else s.surv[n - 1 - a]
    return link + marginal(s, a, b)


cdef Scorer make_scorer(int kind, const double[::1] consts, const double[::1] length,
                        const double[::1] ps, const double[::1] pss, const double[::1] plf,
                        const double[::1] fgap, const double[::1] gap,
                        const double[::1] fsurv, const double[::1] surv):
    cdef Scorer s
    s.kind = kind
    s.n = ps.shape[0] - 1
    s.c0 = consts[0]
    s.c1 = consts[1]
    s.c2 = consts[2]
    s.lgamma_table = consts[3] != 0.0
    s.length = &length[0]
    s.ps = &ps[0]
    s.pss = &pss[0]
    s.plf = &plf[0] if plf.shape[0] > 0 else NULL
    s.fgap = &fgap[0]
    s.gap = &gap[0]
    s.fsurv = &fsurv[0]
    s.surv = &surv[0]
    return s


cdef inline double now() noexcept nogil:
    cdef timespec ts
    clock_gettime(CLOCK_MONOTONIC, &ts)
    return ts.tv_sec + 1e-9 * ts.tv_nsec


# --------------------------------------------------------------------------
# Carpenter merge


def merge_sorted_uniforms(const double[::1] probs, const double[::1] u):
    """Category of each sorted uniform under the cumulative distribution of ``probs``."""
    cdef Py_ssize_t m = probs.shape[0]
    cdef Py_ssize_t nd = u.shape[0]
    cdef cnp.ndarray[int64_t, ndim=1] out_arr = np.empty(nd, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Py_ssize_t i = 0, j = 0, last = 0
    cdef double q = 0.0
    for j in range(m):
        if probs[j] > 0.0:
            last = j
    j = 0
    with nogil:
        while i < nd:
            if j >= m:
                out[i] = last
                i += 1
            elif u[i] < q + probs[j]:
                out[i] = j
                i += 1
            else:
                q = q + probs[j]
                j += 1
    return out_arr


# --------------------------------------------------------------------------
# backward recursion


cdef inline double neumaier_log_sum(const double *terms, Py_ssize_t count) noexcept nogil:
    cdef Py_ssize_t j
    cdef double mx = -INFINITY, s = 0.0, c = 0.0, x, tmp
    for j in range(count):
        if terms[j] > mx:
            mx = terms[j]
    if mx == -INFINITY:
        return -INFINITY
    for j in range(count):
        x = exp(terms[j] - mx)
        tmp = s + x
        if fabs(s) >= fabs(x):
            c += (s - tmp) + x
        else:
            c += (x - tmp) + s
        s = tmp
    return mx + log(s + c)


def backward_recursion(int kind, const double[::1] consts, const double[::1] length,
                       const double[::1] ps, const double[::1] pss, const double[::1] plf,
                       const double[::1] fgap, const double[::1] gap,
                       const double[::1] fsurv, const double[::1] surv,
                       double threshold):
    """log Q(t) for t = 1..n+1 (index t) and the per-t count of dropped terms."""
    cdef Scorer s = make_scorer(kind, consts, length, ps, pss, plf, fgap, gap, fsurv, surv)
    cdef Py_ssize_t n = s.n
    cdef cnp.ndarray[double, ndim=1] logq_arr = np.full(n + 2, -INFINITY)
    cdef cnp.ndarray[int64_t, ndim=1] dropped_arr = np.zeros(n + 2, dtype=np.int64)
    cdef double[::1] logq = logq_arr
    cdef int64_t[::1] dropped = dropped_arr
    cdef cnp.ndarray[double, ndim=1] buf_arr = np.empty(n + 1)
    cdef double *terms = <double *> cnp.PyArray_DATA(buf_arr)
    cdef Py_ssize_t t, i, count
    cdef double term, run_max, run_sum, log_thr
    cdef bint truncate = threshold > 0.0
    log_thr = log(threshold) if truncate else -INFINITY
    with nogil:
        logq[n + 1] = 0.0
        for t in range(n, 0, -1):
            count = 0
            run_max = -INFINITY
            run_sum = 0.0
            for i in range(t, n):
                term = seg(&s, t - 1, i) + logq[i + 1]
                terms[count] = term
                count += 1
                if truncate:
                    if count > 1 and run_max > -INFINITY and term - (run_max + log(run_sum)) < log_thr:
                        dropped[t] = n - 1 - i
                        break
                    if term > run_max:
                        run_sum = run_sum * exp(run_max - term) + 1.0 if run_max > -INFINITY else 1.0
                        run_max = term
                    elif term > -INFINITY:
                        run_sum += exp(term - run_max)
            terms[count] = seg(&s, t - 1, n)
            count += 1
            logq[t] = neumaier_log_sum(terms, count)
    return logq_arr, dropped_arr


def map_recursion(int kind, const double[::1] consts, const double[::1] length,
                  const double[::1] ps, const double[::1] pss, const double[::1] plf,
                  const double[::1] fgap, const double[::1] gap,
                  const double[::1] fsurv, const double[::1] surv):
    """Max-product analogue of the backward recursion: best log posterior and argmax links."""
    cdef Scorer s = make_scorer(kind, consts, length, ps, pss, plf, fgap, gap, fsurv, surv)
    cdef Py_ssize_t n = s.n
    cdef cnp.ndarray[double, ndim=1] best_arr = np.full(n + 2, -INFINITY)
    cdef cnp.ndarray[int64_t, ndim=1] nxt_arr = np.zeros(n + 2, dtype=np.int64)
    cdef double[::1] best = best_arr
    cdef int64_t[::1] nxt = nxt_arr
    cdef Py_ssize_t t, i, arg
    cdef double v, bv
    with nogil:
        best[n + 1] = 0.0
        for t in range(n, 0, -1):
            bv = seg(&s, t - 1, n)
            arg = n
            for i in range(t, n):
                v = seg(&s, t - 1, i) + best[i + 1]
                if v > bv:
                    bv = v
                    arg = i
            best[t] = bv
            nxt[t] = arg
    return best_arr, nxt_arr


# --------------------------------------------------------------------------
# MCMC chain


cdef class _Chain:
    cdef Scorer s
    cdef bitgen_t *rng
    cdef Py_ssize_t n, k
    cdef int64_t *pos
    cdef uint8_t *z
    cdef double *log_a
    cdef double *log_d
    cdef double *a_w
    cdef double *d_w
    cdef uint8_t *active
    cdef int64_t *active_list
    cdef int64_t *active_index
    cdef Py_ssize_t n_active
    cdef double *alias_prob
    cdef int64_t *alias_idx
    cdef double *scaled
    cdef int64_t *small
    cdef int64_t *large
    cdef bint stale
    cdef double act_free_sum, d_sum, a_inactive, log_a_inactive, log_cutoff, log_floor, log_ceil
    cdef Py_ssize_t act_free_count, inact_free_count
    cdef int64_t rebuilds
    cdef object _keep

    cdef inline double unif(self) noexcept nogil:
        return self.rng.next_double(self.rng.state)

    cdef inline Py_ssize_t lower_bound(self, int64_t i) noexcept nogil:
        cdef Py_ssize_t lo = 0, hi = self.k, mid
        while lo < hi:
            mid = (lo + hi) >> 1
            if self.pos[mid] < i:
                lo = mid + 1
            else:
                hi = mid
        return lo

    cdef inline void neighbors(self, int64_t i, int64_t *a, int64_t *b) noexcept nogil:
        cdef Py_ssize_t idx = self.lower_bound(i)
        a[0] = self.pos[idx - 1] if idx > 0 else 0
        if idx < self.k and self.pos[idx] == i:
            idx += 1
        b[0] = self.pos[idx] if idx < self.k else self.n

    cdef inline void activate(self, int64_t i) noexcept nogil:
        self.active[i] = 1
        self.active_index[i] = self.n_active
        self.active_list[self.n_active] = i
        self.n_active += 1

    cdef inline void deactivate(self, int64_t i) noexcept nogil:
        cdef int64_t idx = self.active_index[i]
        cdef int64_t last = self.active_list[self.n_active - 1]
        self.n_active -= 1
        if last != i:
            self.active_list[idx] = last
            self.active_index[last] = idx
        self.active_index[i] = -1
        self.active[i] = 0

    cdef void resync(self) noexcept nogil:
        cdef double s = 0.0, d = 0.0
        cdef Py_ssize_t count = 0, j
        cdef int64_t i
        for j in range(self.n_active):
            i = self.active_list[j]
            if not self.z[i]:
                s += self.a_w[i]
                count += 1
        self.act_free_sum = s if count else 0.0
        self.act_free_count = count
        self.inact_free_count = (self.n - 1 - self.k) - count
        for j in range(self.k):
            d += self.d_w[self.pos[j]]
        self.d_sum = d

    cdef void rebuild(self) noexcept nogil:
        cdef Py_ssize_t m = self.n_active, j, ns = 0, nl = 0
        cdef int64_t lo, hi
        cdef double total = 0.0, scale
        self.rebuilds += 1
        if m > 0:
            for j in range(m):
                total += self.a_w[self.active_list[j]]
            scale = m / total
            for j in range(m):
                self.scaled[j] = self.a_w[self.active_list[j]] * scale
                self.alias_prob[j] = 1.0
                self.alias_idx[j] = j
            for j in range(m):
                if self.scaled[j] < 1.0:
                    self.small[ns] = j
                    ns += 1
                else:
                    self.large[nl] = j
                    nl += 1
            while ns > 0 and nl > 0:
                ns -= 1
                lo = self.small[ns]
                nl -= 1
                hi = self.large[nl]
                self.alias_prob[lo] = self.scaled[lo]
                self.alias_idx[lo] = hi
                self.scaled[hi] = (self.scaled[hi] + self.scaled[lo]) - 1.0
                if self.scaled[hi] < 1.0:
                    self.small[ns] = hi
                    ns += 1
                else:
                    self.large[nl] = hi
                    nl += 1
        self.stale = False
        self.resync()

    cdef inline double hat_log_a(self, int64_t i) noexcept nogil:
        return self.log_a[i] if self.active[i] else self.log_a_inactive

    cdef inline double hat_a(self, int64_t i) noexcept nogil:
        return self.a_w[i] if self.active[i] else self.a_inactive

    cdef inline double add_mass(self) noexcept nogil:
        return self.act_free_sum + self.a_inactive * self.inact_free_count

    cdef void on_toggle(self, int64_t i, bint now_on) noexcept nogil:
        if now_on:
            if self.active[i]:
                self.act_free_count -= 1
                self.act_free_sum = self.act_free_sum - self.a_w[i] if self.act_free_count else 0.0
            else:
                self.inact_free_count -= 1
            self.d_sum += self.d_w[i]
        else:
            if self.active[i]:
                self.act_free_count += 1
                self.act_free_sum += self.a_w[i]
            else:
                self.inact_free_count += 1
            self.d_sum -= self.d_w[i]

    cdef inline double clamp(self, double v) noexcept nogil:
        if v < self.log_floor:
            return self.log_floor
        if v > self.log_ceil:
            return self.log_ceil
        return v

    cdef double shift_log_a(self, int64_t i, double step, bint occupied) noexcept nogil:
        cdef double old_log = self.log_a[i]
        cdef double new_log = self.clamp(old_log + step)
        cdef double old_w, new_w
        cdef bint was_active, now_active
        if new_log == old_log:
            return 0.0
        old_w = self.a_w[i]
        new_w = exp(new_log)
        self.log_a[i] = new_log
        self.a_w[i] = new_w
        was_active = self.active[i]
        now_active = new_log > self.log_cutoff
        if was_active and now_active:
            if not occupied:
                self.act_free_sum += new_w - old_w
            self.stale = True
        elif was_active:
            self.deactivate(i)
            if not occupied:
                self.act_free_count -= 1
                self.act_free_sum = self.act_free_sum - old_w if self.act_free_count else 0.0
                self.inact_free_count += 1
            self.stale = True
        elif now_active:
            self.activate(i)
            if not occupied:
                self.act_free_count += 1
                self.act_free_sum += new_w
                self.inact_free_count -= 1
            self.stale = True
        return new_log - old_log

    cdef double shift_log_d(self, int64_t i, double step, bint occupied) noexcept nogil:
        cdef double old_log = self.log_d[i]
        cdef double new_log = self.clamp(old_log + step)
        cdef double new_w
        if new_log == old_log:
            return 0.0
        new_w = exp(new_log)
        if occupied:
            self.d_sum += new_w - self.d_w[i]
        self.log_d[i] = new_log
        self.d_w[i] = new_w
        return new_log - old_log

    cdef int64_t draw_add(self) noexcept nogil:
        cdef double u, target, acc
        cdef int64_t cand, last, m, seen, tgt
        cdef Py_ssize_t tries, j, slot
        if self.stale:
            self.rebuild()
        u = self.unif()
        if self.act_free_count > 0 and (self.inact_free_count == 0 or u * self.add_mass() < self.act_free_sum):
            for tries in range(MAX_REDRAWS):
                slot = <Py_ssize_t>(self.unif() * self.n_active)
                if not (self.unif() < self.alias_prob[slot]):
                    slot = self.alias_idx[slot]
                cand = self.active_list[slot]
                if not self.z[cand]:
                    return cand
            target = self.unif() * self.act_free_sum
            acc = 0.0
            last = -1
            for j in range(self.n_active):
                cand = self.active_list[j]
                if not self.z[cand]:
                    acc += self.a_w[cand]
                    last = cand
                    if target < acc:
                        return cand
            return last
        m = self.n - 1
        for tries in range(MAX_REDRAWS):
            cand = 1 + <int64_t>(self.unif() * m)
            if not self.z[cand] and not self.active[cand]:
                return cand
        tgt = <int64_t>(self.unif() * self.inact_free_count)
        seen = 0
        last = -1
        for cand in range(1, self.n):
            if not self.z[cand] and not self.active[cand]:
                if seen == tgt:
                    return cand
                seen += 1
                last = cand
        return last

    cdef int64_t draw_delete(self, double *log_dsum) noexcept nogil:
        cdef double total = 0.0, target, acc = 0.0
        cdef Py_ssize_t j
        cdef int64_t i
        for j in range(self.k):
            total += self.d_w[self.pos[j]]
        self.d_sum = total
        log_dsum[0] = log(total)
        target = self.unif() * total
        for j in range(self.k):
            i = self.pos[j]
            acc += self.d_w[i]
            if target < acc:
                return i
        return self.pos[self.k - 1]

    cdef inline void insert_pos(self, int64_t i) noexcept nogil:
        cdef Py_ssize_t idx = self.lower_bound(i)
        memmove(&self.pos[idx + 1], &self.pos[idx], (self.k - idx) * sizeof(int64_t))
        self.pos[idx] = i
        self.k += 1
        self.z[i] = 1

    cdef inline void remove_pos(self, int64_t i) noexcept nogil:
        cdef Py_ssize_t idx = self.lower_bound(i)
        memmove(&self.pos[idx], &self.pos[idx + 1], (self.k - idx - 1) * sizeof(int64_t))
        self.k -= 1
        self.z[i] = 0

    cdef double full_log_post(self) noexcept nogil:
        cdef double total = 0.0
        cdef int64_t prev = 0
        cdef Py_ssize_t j
        for j in range(self.k):
            total += seg(&self.s, prev, self.pos[j])
            prev = self.pos[j]
        return total + seg(&self.s, prev, self.n)


def run_chain(object bit_generator, int kind, const double[::1] consts, const double[::1] length,
              const double[::1] ps, const double[::1] pss, const double[::1] plf,
              const double[::1] fgap, const double[::1] gap,
              const double[::1] fsurv, const double[::1] surv,
              const int64_t[::1] init_pos, double init_log_post,
              const double[::1] log_a_init, const double[::1] log_d_init,
              dict cfg):
    """Run the adaptive add/delete(/adjust) sampler; see ``sampler.run``."""
    cdef _Chain ch = _Chain()
    cdef Py_ssize_t n = ps.shape[0] - 1
    cdef Py_ssize_t i_, j_
    ch.s = make_scorer(kind, consts, length, ps, pss, plf, fgap, gap, fsurv, surv)
    capsule = bit_generator.capsule
    ch.rng = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    ch.n = n

    pos_arr = np.zeros(n + 1, dtype=np.int64)
    z_arr = np.zeros(n + 1, dtype=np.uint8)
    log_a_arr = np.array(log_a_init, dtype=np.float64)
    log_d_arr = np.array(log_d_init, dtype=np.float64)
    a_w_arr = np.exp(log_a_arr)
    d_w_arr = np.exp(log_d_arr)
    active_arr = np.zeros(n + 1, dtype=np.uint8)
    active_list_arr = np.zeros(n + 1, dtype=np.int64)
    active_index_arr = np.full(n + 1, -1, dtype=np.int64)
    alias_prob_arr = np.ones(n + 1)
    alias_idx_arr = np.zeros(n + 1, dtype=np.int64)
    scaled_arr = np.zeros(n + 1)
    small_arr = np.zeros(n + 1, dtype=np.int64)
    large_arr = np.zeros(n + 1, dtype=np.int64)
    ch._keep = (pos_arr, z_arr, log_a_arr, log_d_arr, a_w_arr, d_w_arr, active_arr, active_list_arr,
                active_index_arr, alias_prob_arr, alias_idx_arr, scaled_arr, small_arr, large_arr)
    ch.pos = <int64_t *> cnp.PyArray_DATA(pos_arr)
    ch.z = <uint8_t *> cnp.PyArray_DATA(z_arr)
    ch.log_a = <double *> cnp.PyArray_DATA(log_a_arr)
    ch.log_d = <double *> cnp.PyArray_DATA(log_d_arr)
    ch.a_w = <double *> cnp.PyArray_DATA(a_w_arr)
    ch.d_w = <double *> cnp.PyArray_DATA(d_w_arr)
    ch.active = <uint8_t *> cnp.PyArray_DATA(active_arr)
    ch.active_list = <int64_t *> cnp.PyArray_DATA(active_list_arr)
    ch.active_index = <int64_t *> cnp.PyArray_DATA(active_index_arr)
    ch.alias_prob = <double *> cnp.PyArray_DATA(alias_prob_arr)
    ch.alias_idx = <int64_t *> cnp.PyArray_DATA(alias_idx_arr)
    ch.scaled = <double *> cnp.PyArray_DATA(scaled_arr)
    ch.small = <int64_t *> cnp.PyArray_DATA(small_arr)
    ch.large = <int64_t *> cnp.PyArray_DATA(large_arr)

    cdef bint thresholding = cfg["thresholding"]
    ch.log_cutoff = cfg["log_cutoff"] if thresholding else -INFINITY
    ch.log_a_inactive = cfg["log_a_inactive"]
    ch.a_inactive = exp(ch.log_a_inactive)
    ch.log_floor = cfg["log_floor"]
    ch.log_ceil = cfg["log_ceil"]
    ch.k = init_pos.shape[0]
    for i_ in range(ch.k):
        ch.pos[i_] = init_pos[i_]
        ch.z[init_pos[i_]] = 1
    ch.n_active = 0
    for i_ in range(1, n):
        if ch.log_a[i_] > ch.log_cutoff:
            ch.activate(i_)
    ch.stale = True
    ch.rebuilds = 0
    ch.resync()

    cdef int64_t iterations = cfg["iterations"]
    cdef int64_t burn_in = cfg["burn_in"]
    cdef int64_t thin = cfg["thin"]
    cdef double p_add = cfg["p_add"]
    cdef double alpha_target = cfg["alpha_target"]
    cdef double h = cfg["h"]
    cdef bint adjust = cfg["adjust"]
    cdef bint dual = cfg["dual"]
    cdef double w_dual = cfg["dual_weight"]
    cdef bint adaptation = cfg["adaptation"]
    cdef double time_budget = cfg["time_budget"]
    cdef int64_t recompute_every = cfg["recompute_every"]
    cdef bint track_states = cfg["track_states"]
    cdef double lpa = cfg["log_prior_odds"]

    count_hist_arr = np.zeros(n, dtype=np.int64)
    incl_arr = np.zeros(n + 1, dtype=np.int64)
    since_arr = np.zeros(n + 1, dtype=np.int64)
    map_pos_arr = np.zeros(n + 1, dtype=np.int64)
    state_hist_arr = np.zeros((1 << (n - 1)) if track_states else 1, dtype=np.int64)
    cdef int64_t[::1] count_hist = count_hist_arr
    cdef int64_t[::1] incl = incl_arr
    cdef int64_t[::1] since = since_arr
    cdef int64_t[::1] map_pos = map_pos_arr
    cdef int64_t[::1] state_hist = state_hist_arr
    cdef int64_t prop[3]
    cdef int64_t acc[3]
    prop[0] = prop[1] = prop[2] = 0
    acc[0] = acc[1] = acc[2] = 0

    cdef int64_t code = 0
    if track_states:
        for i_ in range(ch.k):
            code ^= (<int64_t>1) << (ch.pos[i_] - 1)

    cdef double log_post = init_log_post
    cdef double best = init_log_post
    cdef Py_ssize_t map_k = ch.k
    for i_ in range(ch.k):
        map_pos[i_] = ch.pos[i_]
    trace_iter = [0]
    trace_time = [0.0]
    trace_lp = [init_log_post]

    cdef int64_t ns = 0, t, accepted_moves = 0, done = 0
    cdef int64_t i, a, b, jn, idx, width
    cdef double u, delta, lfwd, lrev, lr, alpha_f, alpha_r, s, step, applied, log_dsum, fresh
    cdef double max_ratio = 0.0, wmin = INFINITY, wmax = -INFINITY, max_drift = 0.0
    cdef bint accepted, is_add, improved
    cdef double t0 = now()
    cdef double nd = <double>n

    for t in range(iterations):
        if time_budget > 0.0 and t > 0 and (t & 0xFFFF) == 0:
            if now() - t0 >= time_budget:
                break
        accepted = False
        improved = False
        u = ch.unif()
        is_add = u < p_add
        if is_add:
            prop[0] += 1
            if ch.k < n - 1:
                i = ch.draw_add()
                ch.neighbors(i, &a, &b)
                delta = (seg(&ch.s, a, i) + seg(&ch.s, i, b)) - seg(&ch.s, a, b)
                lfwd = ch.hat_log_a(i) - log(ch.add_mass())
                lrev = ch.log_d[i] - log(ch.d_sum + ch.d_w[i])
                lr = delta + lpa + lrev - lfwd
                alpha_f = 1.0 if lr >= 0.0 else exp(lr)
                alpha_r = 1.0 if lr <= 0.0 else exp(-lr)
                if ch.unif() < alpha_f:
                    accepted = True
                    acc[0] += 1
                    ch.on_toggle(i, True)
                    ch.insert_pos(i)
                    since[i] = ns
                    if track_states:
                        code ^= (<int64_t>1) << (i - 1)
                    log_post += delta
        else:
            prop[1] += 1
            if ch.k > 0:
                i = ch.draw_delete(&log_dsum)
                ch.neighbors(i, &a, &b)
                delta = seg(&ch.s, a, b) - (seg(&ch.s, a, i) + seg(&ch.s, i, b))
                lfwd = ch.log_d[i] - log_dsum
                lrev = ch.hat_log_a(i) - log(ch.hat_a(i) + ch.add_mass())
                lr = delta - lpa + lrev - lfwd
                alpha_f = 1.0 if lr >= 0.0 else exp(lr)
                alpha_r = 1.0 if lr <= 0.0 else exp(-lr)
                if ch.unif() < alpha_f:
                    accepted = True
                    acc[1] += 1
                    ch.on_toggle(i, False)
                    ch.remove_pos(i)
                    incl[i] += ns - since[i]
                    if track_states:
                        code ^= (<int64_t>1) << (i - 1)
                    log_post += delta

        if accepted:
            accepted_moves += 1
            improved = log_post > best
            if adaptation:
                s = h * nd / (t + 1.0)
                if dual:
                    if is_add:
                        applied = ch.shift_log_a(i, s * (alpha_f - alpha_target) * (1.0 - w_dual * alpha_f), True)
                        if fabs(applied) > max_ratio * s:
                            max_ratio = fabs(applied) / s
                        applied = ch.shift_log_d(i, s * (alpha_r - alpha_target) * alpha_f, True)
                    else:
                        applied = ch.shift_log_a(i, s * (alpha_r - alpha_target) * alpha_f, False)
                        if fabs(applied) > max_ratio * s:
                            max_ratio = fabs(applied) / s
                        applied = ch.shift_log_d(i, s * (alpha_f - alpha_target) * (1.0 - w_dual * alpha_f), False)
                elif is_add:
                    applied = ch.shift_log_a(i, s * (alpha_f - alpha_target), True)
                else:
                    applied = ch.shift_log_d(i, s * (alpha_f - alpha_target), False)
                if fabs(applied) > max_ratio * s:
                    max_ratio = fabs(applied) / s
                if ch.log_a[i] < wmin:
                    wmin = ch.log_a[i]
                if ch.log_d[i] < wmin:
                    wmin = ch.log_d[i]
                if ch.log_a[i] > wmax:
                    wmax = ch.log_a[i]
                if ch.log_d[i] > wmax:
                    wmax = ch.log_d[i]

        if adjust and ch.k > 0:
            prop[2] += 1
            idx = <int64_t>(ch.unif() * ch.k)
            i = ch.pos[idx]
            a = ch.pos[idx - 1] if idx > 0 else 0
            b = ch.pos[idx + 1] if idx + 1 < ch.k else n
            width = b - a - 1
            jn = a + 1 + <int64_t>(ch.unif() * width)
            if jn == i:
                acc[2] += 1
            else:
                delta = (seg(&ch.s, a, jn) + seg(&ch.s, jn, b)) - (seg(&ch.s, a, i) + seg(&ch.s, i, b))
                alpha_f = 1.0 if delta >= 0.0 else exp(delta)
                if ch.unif() < alpha_f:
                    acc[2] += 1
                    accepted_moves += 1
                    ch.on_toggle(i, False)
                    ch.on_toggle(jn, True)
                    ch.pos[idx] = jn
                    ch.z[i] = 0
                    ch.z[jn] = 1
                    incl[i] += ns - since[i]
                    since[jn] = ns
                    if track_states:
                        code ^= ((<int64_t>1) << (i - 1)) | ((<int64_t>1) << (jn - 1))
                    log_post += delta
                    if log_post > best:
                        improved = True

        if recompute_every > 0 and accepted_moves >= recompute_every:
            accepted_moves = 0
            fresh = ch.full_log_post()
            if fabs(fresh - log_post) > max_drift:
                max_drift = fabs(fresh - log_post)
            log_post = fresh
            ch.resync()

        if improved and log_post > best:
            best = log_post
            map_k = ch.k
            memcpy(&map_pos[0], ch.pos, ch.k * sizeof(int64_t))
            trace_iter.append(t + 1)
            trace_time.append(now() - t0)
            trace_lp.append(best)

        if t >= burn_in and (t - burn_in) % thin == 0:
            count_hist[ch.k] += 1
            if track_states:
                state_hist[code] += 1
            ns += 1
        done = t + 1

    for j_ in range(ch.k):
        i = ch.pos[j_]
        incl[i] += ns - since[i]

    return {
        "iterations_done": done,
        "elapsed": now() - t0,
        "n_samples": ns,
        "count_hist": count_hist_arr,
        "inclusion": incl_arr,
        "state_hist": state_hist_arr if track_states else None,
        "map_log_post": best,
        "map_positions": map_pos_arr[:map_k].copy(),
        "trace_iter": np.array(trace_iter, dtype=np.int64),
        "trace_time": np.array(trace_time),
        "trace_log_post": np.array(trace_lp),
        "proposed": np.array([prop[0], prop[1], prop[2]], dtype=np.int64),
        "accepted": np.array([acc[0], acc[1], acc[2]], dtype=np.int64),
        "final_positions": pos_arr[:ch.k].copy(),
        "final_log_post": log_post,
        "log_a": log_a_arr,
        "log_d": log_d_arr,
        "max_adapt_ratio": max_ratio,
        "weight_min": wmin,
        "weight_max": wmax,
        "max_drift": max_drift,
        "rebuilds": ch.rebuilds,
    }
