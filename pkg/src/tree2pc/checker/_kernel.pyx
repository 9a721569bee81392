# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled successor kernel; a line-for-line port of ``_kernel_py``.

States are the same flat tuples of Python ints, so both kernels are
interchangeable behind ``tree2pc.checker.kernel``.
"""
from libc.stdint cimport uint64_t

from ._kernel_py import ACTION_NAMES, MAX_NODES, MUTANT_COMMIT_ON_NO, NONE, N_MSG_WORDS  # noqa: F401
from ._kernel_py import initial_state, pack_node  # noqa: F401

cdef enum:
    NMAX = 8
    NMSG = 6

cdef enum:
    RUNNING = 0
    PREPARE = 1
    COMMIT = 2
    ABORT = 3
    TOMBSTONE = 4

cdef enum:
    M_REQ = 0
    M_OK = 1
    M_NO = 2
    M_COMMIT = 3
    M_ABORT = 4
    M_ACK = 5

cdef enum:
    A_ROOT_START = 0
    A_PREPARE_REQUEST = 1
    A_DUPLICATE_PREPARE = 2
    A_ORPHAN_PREPARE = 3
    A_PREPARE_RESPONSE = 4
    A_COMMIT_DECIDED = 5
    A_ABORT_DECIDED = 6
    A_COMMIT_REQUEST = 7
    A_ABORT_REQUEST = 8
    A_ORPHAN_COMMIT = 9
    A_ORPHAN_ABORT = 10
    A_INTERNAL_ABORT = 11
    A_ACK_RESPONSE = 12
    A_FORGET_CTX = 13
    A_ADD_INTERMEDIATE = 14

cdef uint64_t PNONE = 15


cdef struct World:
    int n
    uint64_t nodes[NMAX]
    uint64_t msgs[NMSG]
    long dyn


cdef inline uint64_t set_state(uint64_t w, uint64_t s):
    return (w & ~(<uint64_t>7)) | s


cdef inline uint64_t merge(uint64_t w, uint64_t mc):
    return (w & ~(<uint64_t>0xFFFF00)) | (mc << 8)


cdef inline uint64_t reset_votes(uint64_t w):
    return w & ~((<uint64_t>0xFFFF) << 24)


cdef inline uint64_t set_acks(uint64_t w, uint64_t acks):
    return (w & ~((<uint64_t>0xFF) << 40)) | (acks << 40)


cdef inline uint64_t set_parent(uint64_t w, uint64_t p):
    return (w & ~((<uint64_t>15) << 3)) | (p << 3)


cdef inline uint64_t get_vote(uint64_t w, int c):
    return (w >> (24 + 2 * c)) & 3


cdef inline uint64_t fanout(int src, uint64_t mask):
    return mask << (src * 8)


cdef inline uint64_t senders_to(uint64_t word, int dst, int n):
    cdef uint64_t srcs = 0
    cdef int s
    for s in range(n):
        if (word >> (s * 8 + dst)) & 1:
            srcs |= (<uint64_t>1) << s
    return srcs


cdef inline bint all_votes_ok(uint64_t w, int mutant):
    cdef uint64_t ch = (w >> 8) & 0xFF
    cdef int c = 0
    cdef uint64_t v
    while ch:
        if ch & 1:
            v = get_vote(w, c)
            if mutant == 1:
                if v == 0:
                    return False
            elif v != 1:
                return False
        ch >>= 1
        c += 1
    return True


cdef inline bint any_vote_no(uint64_t w):
    cdef uint64_t ch = (w >> 8) & 0xFF
    cdef int c = 0
    while ch:
        if ch & 1 and get_vote(w, c) == 2:
            return True
        ch >>= 1
        c += 1
    return False


cdef void load(World* W, tuple state, int n):
    cdef int k
    W.n = n
    for k in range(n):
        W.nodes[k] = state[k]
    for k in range(NMSG):
        W.msgs[k] = state[n + k]
    W.dyn = state[n + NMSG]


cdef tuple store(World* W):
    cdef int n = W.n
    cdef int k
    cdef list out = [None] * (n + NMSG + 1)
    for k in range(n):
        out[k] = W.nodes[k]
    for k in range(NMSG):
        out[n + k] = W.msgs[k]
    out[n + NMSG] = W.dyn
    return tuple(out)


cdef inline void emit(list out, World* W, tuple state, int action, int node, int arg,
                      uint64_t nw, int k1, uint64_t b1, int k2, uint64_t b2, long new_dyn):
    # Build the successor only if it differs from the current state.
    cdef bint changed = nw != W.nodes[node] or new_dyn != W.dyn
    if k1 >= 0 and (W.msgs[k1] | b1) != W.msgs[k1]:
        changed = True
    if k2 >= 0 and (W.msgs[k2] | b2) != W.msgs[k2]:
        changed = True
    if not changed:
        return
    cdef World S = W[0]
    S.nodes[node] = nw
    if k1 >= 0:
        S.msgs[k1] |= b1
    if k2 >= 0:
        S.msgs[k2] |= b2
    S.dyn = new_dyn
    out.append((action, node, arg, store(&S)))


def successors(tuple state, int n, int root, long max_dyn, int mutant=0):
    """Return ``[(action, node, arg, successor), ...]`` for every non-stutter
    instance of every enabled action."""
    cdef World W
    load(&W, state, n)
    cdef list out = []
    cdef int i, s, c, k, val, tgt, act, oact
    cdef uint64_t w, st, par, ch, im, mc, nw, rf, frm, acks, parent_bit
    cdef bint is_root
    for i in range(n):
        w = W.nodes[i]
        st = w & 7
        par = (w >> 3) & 15
        ch = (w >> 8) & 0xFF
        im = (w >> 16) & 0xFF
        mc = ch | im
        is_root = i == root

        if is_root and st == RUNNING:
            nw = reset_votes(merge(set_state(w, PREPARE), mc))
            emit(out, &W, state, A_ROOT_START, i, -1, nw, M_REQ, fanout(i, mc), -1, 0, W.dyn)

        rf = senders_to(W.msgs[M_REQ], i, n)
        s = 0
        while rf:
            if rf & 1:
                if st == RUNNING:
                    nw = reset_votes(merge(set_state(w, PREPARE), mc))
                    nw = set_parent(nw, s)
                    emit(out, &W, state, A_PREPARE_REQUEST, i, s, nw, M_REQ, fanout(i, mc), -1, 0, W.dyn)
                elif st == PREPARE:
                    if <uint64_t>s != par:
                        emit(out, &W, state, A_DUPLICATE_PREPARE, i, s, w,
                             M_OK, (<uint64_t>1) << (i * 8 + s), -1, 0, W.dyn)
                elif st == ABORT or st == TOMBSTONE:
                    nw = w
                    if par == PNONE:
                        nw = set_parent(w, s)
                    emit(out, &W, state, A_ORPHAN_PREPARE, i, s, nw,
                         M_NO, (<uint64_t>1) << (i * 8 + s), -1, 0, W.dyn)
            rf >>= 1
            s += 1

        if st == PREPARE:
            for k in range(M_OK, M_NO + 1):
                val = 1 if k == M_OK else 2
                frm = senders_to(W.msgs[k], i, n) & ch
                s = 0
                while frm:
                    if frm & 1 and get_vote(w, s) == 0:
                        nw = w | ((<uint64_t>val) << (24 + 2 * s))
                        emit(out, &W, state, A_PREPARE_RESPONSE, i, s * 4 + val, nw, -1, 0, -1, 0, W.dyn)
                    frm >>= 1
                    s += 1

        if st == PREPARE and all_votes_ok(w, mutant):
            if is_root:
                nw = set_acks(merge(set_state(w, COMMIT), mc), 0)
                emit(out, &W, state, A_COMMIT_DECIDED, i, -1, nw, M_COMMIT, fanout(i, mc), -1, 0, W.dyn)
            elif par != PNONE:
                emit(out, &W, state, A_COMMIT_DECIDED, i, -1, w,
                     M_OK, (<uint64_t>1) << (i * 8 + par), -1, 0, W.dyn)

        if (st == PREPARE or (is_root and st == RUNNING)) and any_vote_no(w):
            if is_root:
                nw = set_acks(merge(set_state(w, ABORT), mc), 0)
                emit(out, &W, state, A_ABORT_DECIDED, i, -1, nw, M_ABORT, fanout(i, mc), -1, 0, W.dyn)
            elif par != PNONE:
                emit(out, &W, state, A_ABORT_DECIDED, i, -1, w,
                     M_NO, (<uint64_t>1) << (i * 8 + par), -1, 0, W.dyn)

        if not is_root:
            for k in range(M_COMMIT, M_ABORT + 1):
                if k == M_COMMIT:
                    tgt, act, oact = COMMIT, A_COMMIT_REQUEST, A_ORPHAN_COMMIT
                else:
                    tgt, act, oact = ABORT, A_ABORT_REQUEST, A_ORPHAN_ABORT
                frm = senders_to(W.msgs[k], i, n)
                s = 0
                while frm:
                    if frm & 1:
                        if st == RUNNING or st == PREPARE:
                            nw = set_acks(merge(set_state(w, tgt), mc), 0)
                            if par == PNONE:
                                nw = set_parent(nw, s)
                            emit(out, &W, state, act, i, s, nw, k, fanout(i, mc),
                                 M_ACK, (<uint64_t>1) << (i * 8 + s), W.dyn)
                        elif st == <uint64_t>tgt or st == TOMBSTONE:
                            emit(out, &W, state, oact, i, s, w,
                                 M_ACK, (<uint64_t>1) << (i * 8 + s), -1, 0, W.dyn)
                    frm >>= 1
                    s += 1

        if st == RUNNING:
            nw = set_acks(merge(set_state(w, ABORT), mc), 0)
            if par != PNONE:
                parent_bit = (<uint64_t>1) << (i * 8 + par)
                emit(out, &W, state, A_INTERNAL_ABORT, i, -1, nw, M_ABORT, fanout(i, mc),
                     M_NO, parent_bit, W.dyn)
            else:
                emit(out, &W, state, A_INTERNAL_ABORT, i, -1, nw, M_ABORT, fanout(i, mc), -1, 0, W.dyn)

        if st == COMMIT or st == ABORT:
            acks = (w >> 40) & 0xFF
            frm = senders_to(W.msgs[M_ACK], i, n) & ch & ~acks
            s = 0
            while frm:
                if frm & 1:
                    emit(out, &W, state, A_ACK_RESPONSE, i, s,
                         set_acks(w, acks | ((<uint64_t>1) << s)), -1, 0, -1, 0, W.dyn)
                frm >>= 1
                s += 1
            if ch & ~acks == 0:
                emit(out, &W, state, A_FORGET_CTX, i, -1, set_state(w, TOMBSTONE), -1, 0, -1, 0, W.dyn)

        if st != TOMBSTONE and W.dyn < max_dyn:
            for c in range(n):
                if c != i and not (mc >> c) & 1:
                    emit(out, &W, state, A_ADD_INTERMEDIATE, i, c, w | ((<uint64_t>1) << (16 + c)),
                         -1, 0, -1, 0, W.dyn + 1)
    return out


cdef inline uint64_t remap_mask(uint64_t mask, int* perm, int n):
    cdef uint64_t out = 0
    cdef int c
    for c in range(n):
        if (mask >> c) & 1:
            out |= (<uint64_t>1) << perm[c]
    return out


cdef void permute(World* W, World* P, int* perm):
    cdef int n = W.n
    cdef int i, c, s, d, k
    cdef uint64_t w, par, votes, nv, word, nword
    P.n = n
    P.dyn = W.dyn
    for i in range(n):
        w = W.nodes[i]
        par = (w >> 3) & 15
        if par != PNONE:
            par = perm[par]
        votes = (w >> 24) & 0xFFFF
        nv = 0
        for c in range(n):
            nv |= ((votes >> (2 * c)) & 3) << (2 * perm[c])
        P.nodes[perm[i]] = (
            (w & 7)
            | (par << 3)
            | (remap_mask((w >> 8) & 0xFF, perm, n) << 8)
            | (remap_mask((w >> 16) & 0xFF, perm, n) << 16)
            | (nv << 24)
            | (remap_mask((w >> 40) & 0xFF, perm, n) << 40)
        )
    for k in range(NMSG):
        word = W.msgs[k]
        nword = 0
        for s in range(n):
            for d in range(n):
                if (word >> (s * 8 + d)) & 1:
                    nword |= (<uint64_t>1) << (perm[s] * 8 + perm[d])
        P.msgs[k] = nword


cdef bint less(World* a, World* b):
    cdef int k
    for k in range(a.n):
        if a.nodes[k] != b.nodes[k]:
            return a.nodes[k] < b.nodes[k]
    for k in range(NMSG):
        if a.msgs[k] != b.msgs[k]:
            return a.msgs[k] < b.msgs[k]
    return False


def canonical(tuple state, int n, tuple perms):
    """Lexicographically least image of ``state`` under ``perms``."""
    cdef World W, best, cand
    cdef int perm[NMAX]
    cdef int i
    load(&W, state, n)
    best = W
    for p in perms:
        for i in range(n):
            perm[i] = p[i]
        permute(&W, &cand, perm)
        if less(&cand, &best):
            best = cand
    return store(&best)


F_UNSTABLE = 1
F_NO_PROGRESS = 2
F_INCONSISTENT = 4

cdef int RANK[5]
RANK[:] = [0, 1, 2, 2, 3]


cdef inline int popcount(uint64_t x):
    return __builtin_popcountll(x)


cdef extern from *:
    int __builtin_popcountll(unsigned long long)


cdef long w_progress(World* W):
    cdef long total = W.dyn
    cdef int i, k
    cdef uint64_t w, votes
    for i in range(W.n):
        w = W.nodes[i]
        total += 100 * RANK[w & 7]
        total += popcount((w >> 40) & 0xFF)
        votes = (w >> 24) & 0xFFFF
        while votes:
            total += (votes & 3) != 0
            votes >>= 2
    for k in range(NMSG):
        total += popcount(W.msgs[k])
    return total


cdef bint w_consistent(World* W):
    cdef bint committed = False, aborted = False
    cdef int i
    cdef uint64_t s
    for i in range(W.n):
        s = W.nodes[i] & 7
        committed |= s == COMMIT
        aborted |= s == ABORT
    return not (committed and aborted)


cdef bint w_stable(World* A, World* B):
    cdef int i
    cdef uint64_t a, b
    for i in range(A.n):
        a = A.nodes[i] & 7
        b = B.nodes[i] & 7
        if a == COMMIT and b != COMMIT and b != TOMBSTONE:
            return False
        if a == ABORT and b != ABORT and b != TOMBSTONE:
            return False
        if a == TOMBSTONE and b != TOMBSTONE:
            return False
    return True


def progress(tuple state, int n):
    cdef World W
    load(&W, state, n)
    return w_progress(&W)


def consistent(tuple state, int n):
    cdef World W
    load(&W, state, n)
    return w_consistent(&W)


def decision_stable(tuple pre, tuple post, int n):
    cdef World A, B
    load(&A, pre, n)
    load(&B, post, n)
    return w_stable(&A, &B)


def terminal_agreement(tuple state, int n):
    cdef World W
    cdef int i
    load(&W, state, n)
    for i in range(n):
        if (W.nodes[i] & 7) < COMMIT:
            return False
    return w_consistent(&W)


def expand(tuple state, int n, int root, long max_dyn, int mutant=0, perms=None):
    """Successors with invariant flags: ``[(action, node, arg, succ, flags)]``."""
    cdef World W, S, best, cand
    cdef int perm[NMAX]
    cdef int i, flags
    cdef long phi
    load(&W, state, n)
    phi = w_progress(&W)
    cdef list out = []
    for a, node, arg, succ in successors(state, n, root, max_dyn, mutant):
        load(&S, succ, n)
        flags = 0
        if not w_stable(&W, &S):
            flags |= F_UNSTABLE
        if w_progress(&S) <= phi:
            flags |= F_NO_PROGRESS
        if not w_consistent(&S):
            flags |= F_INCONSISTENT
        if perms:
            best = S
            for p in perms:
                for i in range(n):
                    perm[i] = p[i]
                permute(&S, &cand, perm)
                if less(&cand, &best):
                    best = cand
            succ = store(&best)
        out.append((a, node, arg, succ, flags))
    return out
