"""Pure-Python successor kernel for the abstract transition relation.

A world state is a flat tuple of ints::

    (node_0, ..., node_{N-1}, req, ok, no, commit, abort, ack, dyn)

Each ``node_i`` word packs one node's variables:

    bits  0-2   rmState (TwoPCState value)
    bits  3-6   parent (15 = none)
    bits  8-15  children mask
    bits 16-23  intermediate_children mask
    bits 24-39  votes, two bits per node (0 unknown, 1 ok, 2 no)
    bits 40-47  acks mask

The six message words are sets of ``(src, dst)`` pairs, bit ``src*8+dst``.
``dyn`` counts AddIntermediateParticipant firings. The message set only
grows, so an action that would reproduce the current state is a stutter and
is not reported.

``_kernel.pyx`` is a line-for-line Cython port; keep them in sync.
"""

MAX_NODES = 8
NONE = 15

RUNNING, PREPARE, COMMIT, ABORT, TOMBSTONE = 0, 1, 2, 3, 4

M_REQ, M_OK, M_NO, M_COMMIT, M_ABORT, M_ACK = 0, 1, 2, 3, 4, 5
N_MSG_WORDS = 6

(
    A_ROOT_START,
    A_PREPARE_REQUEST,
    A_DUPLICATE_PREPARE,
    A_ORPHAN_PREPARE,
    A_PREPARE_RESPONSE,
    A_COMMIT_DECIDED,
    A_ABORT_DECIDED,
    A_COMMIT_REQUEST,
    A_ABORT_REQUEST,
    A_ORPHAN_COMMIT,
    A_ORPHAN_ABORT,
    A_INTERNAL_ABORT,
    A_ACK_RESPONSE,
    A_FORGET_CTX,
    A_ADD_INTERMEDIATE,
) = range(15)

ACTION_NAMES = (
    "RootStartToCommit",
    "Handle2pcPrepareRequest",
    "Handle2pcDuplicatePrepareRequest",
    "HandleOrphan2pcPrepareRequest",
    "Handle2pcPrepareResponse",
    "Handle2pcCommitDecided",
    "Handle2pcAbortDecided",
    "Handle2pcCommitRequest",
    "Handle2pcAbortRequest",
    "HandleOrphan2pcCommitRequest",
    "HandleOrphan2pcAbortRequest",
    "InternalAbort",
    "Handle2pcAckResponse",
    "ForgetCtx",
    "AddIntermediateParticipant",
)

# Mutation used as a negative control: commit once every vote is in,
# regardless of its value.
MUTANT_COMMIT_ON_NO = 1


def get_state(w):
    return w & 7


def get_parent(w):
    return (w >> 3) & 15


def get_children(w):
    return (w >> 8) & 0xFF


def get_interm(w):
    return (w >> 16) & 0xFF


def get_vote(w, c):
    return (w >> (24 + 2 * c)) & 3


def get_acks(w):
    return (w >> 40) & 0xFF


def pack_node(state, parent, children, interm, votes, acks):
    """``votes`` is a 16-bit field (two bits per node)."""
    return state | (parent << 3) | (children << 8) | (interm << 16) | (votes << 24) | (acks << 40)


def initial_state(n, children_of):
    """Init: every node RUNNING, children as given, votes unknown, acks false."""
    words = [pack_node(RUNNING, NONE, children_of.get(i, 0), 0, 0, 0) for i in range(n)]
    return tuple(words) + (0,) * N_MSG_WORDS + (0,)


def _set_state(w, s):
    return (w & ~7) | s


def _merge(w, mc):
    # ApplyMerge: children := mc, intermediate_children := {}
    return (w & ~0xFFFF00) | (mc << 8)


def _reset_votes(w):
    return w & ~(0xFFFF << 24)


def _set_acks(w, acks):
    return (w & ~(0xFF << 40)) | (acks << 40)


def _fanout(src, mask):
    bits = 0
    base = src * 8
    c = 0
    while mask:
        if mask & 1:
            bits |= 1 << (base + c)
        mask >>= 1
        c += 1
    return bits


def _senders_to(word, dst):
    """Bitmask of sources that have a message to ``dst`` in ``word``."""
    srcs = 0
    s = 0
    while word >> (s * 8):
        if (word >> (s * 8 + dst)) & 1:
            srcs |= 1 << s
        s += 1
    return srcs


def _all_votes_ok(w, mutant):
    ch = get_children(w)
    c = 0
    while ch:
        if ch & 1:
            v = get_vote(w, c)
            if mutant == MUTANT_COMMIT_ON_NO:
                if v == 0:
                    return False
            elif v != 1:
                return False
        ch >>= 1
        c += 1
    return True


def _any_vote_no(w):
    ch = get_children(w)
    c = 0
    while ch:
        if ch & 1 and get_vote(w, c) == 2:
            return True
        ch >>= 1
        c += 1
    return False


def successors(state, n, root, max_dyn, mutant=0):
    """Return ``[(action, node, arg, successor), ...]`` for every non-stutter
    instance of every enabled action."""
    out = []
    msgs = list(state[n:n + N_MSG_WORDS])
    dyn = state[n + N_MSG_WORDS]
    nodes = state[:n]

    def emit(action, node, arg, new_node_word, msg_updates, new_dyn=dyn):
        words = list(nodes)
        words[node] = new_node_word
        m = list(msgs)
        for k, bits in msg_updates:
            m[k] |= bits
        succ = tuple(words) + tuple(m) + (new_dyn,)
        if succ != state:
            out.append((action, node, arg, succ))

    for i in range(n):
        w = nodes[i]
        st = w & 7
        par = (w >> 3) & 15
        ch = (w >> 8) & 0xFF
        im = (w >> 16) & 0xFF
        mc = ch | im
        is_root = i == root

        if is_root and st == RUNNING:
            nw = _reset_votes(_merge(_set_state(w, PREPARE), mc))
            emit(A_ROOT_START, i, -1, nw, [(M_REQ, _fanout(i, mc))])

        req_from = _senders_to(msgs[M_REQ], i)
        if req_from:
            s = 0
            rf = req_from
            while rf:
                if rf & 1:
                    if st == RUNNING:
                        nw = _reset_votes(_merge(_set_state(w, PREPARE), mc))
                        nw = (nw & ~(15 << 3)) | (s << 3)
                        emit(A_PREPARE_REQUEST, i, s, nw, [(M_REQ, _fanout(i, mc))])
                    elif st == PREPARE:
                        if s != par:
                            emit(A_DUPLICATE_PREPARE, i, s, w, [(M_OK, 1 << (i * 8 + s))])
                    elif st == ABORT or st == TOMBSTONE:
                        nw = w
                        if par == NONE:
                            nw = (w & ~(15 << 3)) | (s << 3)
                        emit(A_ORPHAN_PREPARE, i, s, nw, [(M_NO, 1 << (i * 8 + s))])
                rf >>= 1
                s += 1

        if st == PREPARE:
            for k, val in ((M_OK, 1), (M_NO, 2)):
                frm = _senders_to(msgs[k], i) & ch
                s = 0
                while frm:
                    if frm & 1 and get_vote(w, s) == 0:
                        nw = w | (val << (24 + 2 * s))
                        emit(A_PREPARE_RESPONSE, i, s * 4 + val, nw, [])
                    frm >>= 1
                    s += 1

        if st == PREPARE and _all_votes_ok(w, mutant):
            if is_root:
                nw = _set_acks(_merge(_set_state(w, COMMIT), mc), 0)
                emit(A_COMMIT_DECIDED, i, -1, nw, [(M_COMMIT, _fanout(i, mc))])
            elif par != NONE:
                emit(A_COMMIT_DECIDED, i, -1, w, [(M_OK, 1 << (i * 8 + par))])

        if (st == PREPARE or (is_root and st == RUNNING)) and _any_vote_no(w):
            if is_root:
                nw = _set_acks(_merge(_set_state(w, ABORT), mc), 0)
                emit(A_ABORT_DECIDED, i, -1, nw, [(M_ABORT, _fanout(i, mc))])
            elif par != NONE:
                emit(A_ABORT_DECIDED, i, -1, w, [(M_NO, 1 << (i * 8 + par))])

        if not is_root:
            for k, target, act, orphan_states, orphan_act in (
                (M_COMMIT, COMMIT, A_COMMIT_REQUEST, (COMMIT, TOMBSTONE), A_ORPHAN_COMMIT),
                (M_ABORT, ABORT, A_ABORT_REQUEST, (ABORT, TOMBSTONE), A_ORPHAN_ABORT),
            ):
                frm = _senders_to(msgs[k], i)
                s = 0
                while frm:
                    if frm & 1:
                        if st == RUNNING or st == PREPARE:
                            nw = _set_acks(_merge(_set_state(w, target), mc), 0)
                            if par == NONE:
                                nw = (nw & ~(15 << 3)) | (s << 3)
                            emit(act, i, s, nw, [(k, _fanout(i, mc)), (M_ACK, 1 << (i * 8 + s))])
                        elif st in orphan_states:
                            emit(orphan_act, i, s, w, [(M_ACK, 1 << (i * 8 + s))])
                    frm >>= 1
                    s += 1

        if st == RUNNING:
            nw = _set_acks(_merge(_set_state(w, ABORT), mc), 0)
            upd = [(M_ABORT, _fanout(i, mc))]
            if par != NONE:
                upd.append((M_NO, 1 << (i * 8 + par)))
            emit(A_INTERNAL_ABORT, i, -1, nw, upd)

        if st == COMMIT or st == ABORT:
            acks = (w >> 40) & 0xFF
            frm = _senders_to(msgs[M_ACK], i) & ch & ~acks
            s = 0
            while frm:
                if frm & 1:
                    emit(A_ACK_RESPONSE, i, s, _set_acks(w, acks | (1 << s)), [])
                frm >>= 1
                s += 1
            if ch & ~acks == 0:
                emit(A_FORGET_CTX, i, -1, _set_state(w, TOMBSTONE), [])

        if st != TOMBSTONE and dyn < max_dyn:
            for c in range(n):
                if c != i and not (mc >> c) & 1:
                    emit(A_ADD_INTERMEDIATE, i, c, w | (1 << (16 + c)), [], dyn + 1)

    return out


def _remap(mask, perm):
    out = 0
    c = 0
    while mask:
        if mask & 1:
            out |= 1 << perm[c]
        mask >>= 1
        c += 1
    return out


def permute(state, n, perm):
    """Rename node ``i`` to ``perm[i]`` throughout a packed state."""
    words = [0] * n
    for i in range(n):
        w = state[i]
        par = (w >> 3) & 15
        if par != NONE:
            par = perm[par]
        votes = (w >> 24) & 0xFFFF
        nv = 0
        for c in range(n):
            nv |= ((votes >> (2 * c)) & 3) << (2 * perm[c])
        words[perm[i]] = pack_node(
            w & 7,
            par,
            _remap((w >> 8) & 0xFF, perm),
            _remap((w >> 16) & 0xFF, perm),
            nv,
            _remap((w >> 40) & 0xFF, perm),
        )
    msgs = []
    for k in range(N_MSG_WORDS):
        word = state[n + k]
        out = 0
        for s in range(n):
            for d in range(n):
                if (word >> (s * 8 + d)) & 1:
                    out |= 1 << (perm[s] * 8 + perm[d])
        msgs.append(out)
    return tuple(words) + tuple(msgs) + (state[n + N_MSG_WORDS],)


def canonical(state, n, perms):
    """Lexicographically least image of ``state`` under ``perms``."""
    best = state
    for p in perms:
        cand = permute(state, n, p)
        if cand < best:
            best = cand
    return best


# Per-edge flags returned by ``expand``.
F_UNSTABLE = 1  # a decided node left its decision
F_NO_PROGRESS = 2  # the ranking function did not increase
F_INCONSISTENT = 4  # successor has both COMMIT and ABORT

_RANK = (0, 1, 2, 2, 3)


def progress(state, n):
    """Ranking function: every non-stutter action strictly increases it."""
    total = state[n + N_MSG_WORDS]
    for i in range(n):
        w = state[i]
        total += 100 * _RANK[w & 7]
        total += bin((w >> 40) & 0xFF).count("1")
        votes = (w >> 24) & 0xFFFF
        while votes:
            total += (votes & 3) != 0
            votes >>= 2
    for k in range(N_MSG_WORDS):
        total += bin(state[n + k]).count("1")
    return total


def consistent(state, n):
    committed = aborted = False
    for i in range(n):
        s = state[i] & 7
        committed |= s == COMMIT
        aborted |= s == ABORT
    return not (committed and aborted)


def decision_stable(pre, post, n):
    for i in range(n):
        a, b = pre[i] & 7, post[i] & 7
        if a == COMMIT and b not in (COMMIT, TOMBSTONE):
            return False
        if a == ABORT and b not in (ABORT, TOMBSTONE):
            return False
        if a == TOMBSTONE and b != TOMBSTONE:
            return False
    return True


def terminal_agreement(state, n):
    return all((state[i] & 7) >= COMMIT for i in range(n)) and consistent(state, n)


def expand(state, n, root, max_dyn, mutant=0, perms=None):
    """Successors with invariant flags: ``[(action, node, arg, succ, flags)]``.

    With ``perms`` each successor is replaced by its canonical image; flags
    are computed on the concrete edge first.
    """
    phi = progress(state, n)
    out = []
    for a, node, arg, succ in successors(state, n, root, max_dyn, mutant):
        flags = 0
        if not decision_stable(state, succ, n):
            flags |= F_UNSTABLE
        if progress(succ, n) <= phi:
            flags |= F_NO_PROGRESS
        if not consistent(succ, n):
            flags |= F_INCONSISTENT
        if perms:
            succ = canonical(succ, n, perms)
        out.append((a, node, arg, succ, flags))
    return out
