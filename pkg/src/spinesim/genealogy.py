"""Tree simulation and martingale functionals.

Trees are flat maps from ancestry labels to nodes. A label is a tuple of
child indices, the root being the empty tuple, so every ancestor of a node is
a prefix of its label and genealogy queries never recurse.

Three samplers exist:

* `simulate_tree_P`: the plain branching process. Each node owns a hashed
  generator keyed by its label, interleaving motion moves with a fission
  clock thinned at the global rate bound.
* `simulate_spine_only`: just the distinguished line of descent under the
  size-biased measure: tilted motion, fission clock at rate A*beta, offspring
  from the size-biased law.
* `simulate_tree_Qtilde`: the spine plus independent plain subtrees hanging
  off every non-spine child. `resample_subtrees` regenerates only those
  subtrees while the spine stays frozen.

Martingale functionals (`compute_M`, `compute_eta`, `spine_rhs`,
`project_eta`, `spine_partial_sums`) evaluate the additive martingale, the
spine change-of-measure density and its factors, the spine decomposition
right side, and the running-maximum diagnostics on these structures. Two
vectorized population engines cover the regimes where per-node trees are too
slow: lockstep Euler evolution for the interval diffusion and an event-count
engine for spatially homogeneous chains.
"""

import bisect
import math

import numpy as np

DEFAULT_N_MAX = 10**6

_SPINE_MOTION = b"spine-motion"
_SPINE_EVENTS = b"spine-events"
_PSPINE = b"uniform-spine"


class TreeNode:
    """One individual: its label, lifespan, path trace, and fate.

    `end` is the fission or kill time (None while alive at the horizon).
    `offspring_count` is None unless the node fissioned; killed nodes carry 0.
    The trace is a jump list [(time, state), ...] on the chain backend and a
    pair of aligned arrays (times, positions) on the diffusion backend.
    """

    __slots__ = (
        "label",
        "birth",
        "end",
        "trace",
        "offspring_count",
        "alive_at_horizon",
        "killed",
        "position_at_horizon",
    )

    def __init__(self, label, birth, end, trace, offspring_count, alive, killed, position):
        self.label = label
        self.birth = birth
        self.end = end
        self.trace = trace
        self.offspring_count = offspring_count
        self.alive_at_horizon = alive
        self.killed = killed
        self.position_at_horizon = position

    @property
    def lifetime(self):
        return (self.end if self.end is not None else math.inf) - self.birth

    def __repr__(self):
        fate = "alive" if self.alive_at_horizon else ("killed" if self.killed else "fission")
        return f"<TreeNode {self.label} b={self.birth:.4g} {fate}>"


class MarkedTree:
    """Label-indexed genealogy up to a horizon."""

    def __init__(self, nodes, horizon, root_state, alive_set, overflowed=False, spine=None):
        self.nodes = nodes
        self.horizon = horizon
        self.root_state = root_state
        self.alive_set = alive_set
        self.overflowed = overflowed
        self.spine = spine

    def __len__(self):
        return len(self.nodes)

    def consistency_checks(self):
        """Structural invariants as (name, ok, detail) rows."""
        checks = []
        ok_parent = all(
            len(lab) == 0 or lab[:-1] in self.nodes for lab in self.nodes
        )
        checks.append(("every non-root node has a parent", ok_parent, ""))
        worst_t = 0.0
        worst_b = 0.0
        pos_ok = True
        bad = None
        for lab, node in self.nodes.items():
            if len(lab) == 0:
                continue
            parent = self.nodes.get(lab[:-1])
            if parent is None:
                continue
            worst_t = max(worst_t, abs(node.birth - parent.end))
            if _trace_at(parent.trace, parent.end) != _trace_at(node.trace, node.birth):
                pos_ok = False
                bad = lab
            born = math.fsum(self.nodes[lab[:i]].lifetime for i in range(len(lab)))
            worst_b = max(worst_b, abs(born - node.birth))
        checks.append(
            ("child birth equals parent fission time", worst_t < 1e-12, f"worst {worst_t:.3g}")
        )
        checks.append(
            ("birth times recompute from lifetimes", worst_b < 1e-12, f"worst {worst_b:.3g}")
        )
        checks.append(
            ("child starts at the parent's fission position", pos_ok, str(bad) if bad else "")
        )
        expected_alive = {
            lab
            for lab, node in self.nodes.items()
            if node.birth <= self.horizon and (node.end is None or node.end > self.horizon)
        }
        checks.append(
            (
                "alive set is exactly b <= T < end",
                expected_alive == set(self.alive_set),
                f"{len(expected_alive)} vs {len(self.alive_set)}",
            )
        )
        return checks


class SpineDecoration:
    """The distinguished line: its path, fission times, and offspring counts.

    `offspring_counts` are floats because the size-biased heavy-tailed law
    can produce counts beyond exact integer range; `log_offspring` carries
    their logarithms exactly in that regime. `child_indices[i]` says which
    child continues the spine after fission i.
    """

    __slots__ = (
        "spine_labels",
        "trace",
        "fission_times",
        "fission_states",
        "offspring_counts",
        "log_offspring",
        "child_indices",
        "horizon",
        "root_state",
        "end_state",
    )

    def __init__(
        self,
        spine_labels,
        trace,
        fission_times,
        fission_states,
        offspring_counts,
        log_offspring,
        child_indices,
        horizon,
        root_state,
        end_state,
    ):
        self.spine_labels = spine_labels
        self.trace = trace
        self.fission_times = fission_times
        self.fission_states = fission_states
        self.offspring_counts = offspring_counts
        self.log_offspring = log_offspring
        self.child_indices = child_indices
        self.horizon = horizon
        self.root_state = root_state
        self.end_state = end_state

    @property
    def n_fissions(self):
        return len(self.fission_times)


class MartingaleTrack:
    """Values of the additive martingale and the spine density factors."""

    __slots__ = ("t", "M", "eta1", "eta2", "eta3", "eta", "valid")

    def __init__(self, t, M, eta1=None, eta2=None, eta3=None, eta=None, valid=True):
        self.t = t
        self.M = M
        self.eta1 = eta1
        self.eta2 = eta2
        self.eta3 = eta3
        self.eta = eta
        self.valid = valid

    def __repr__(self):
        if not self.valid:
            return f"<MartingaleTrack t={self.t} overflowed>"
        return f"<MartingaleTrack t={self.t} M={self.M}>"


# --- trace helpers -----------------------------------------------------------


def _trace_at(trace, t):
    """Path value at time t (latest recorded value not after t)."""
    if isinstance(trace, tuple):
        times, xs = trace
        idx = int(np.searchsorted(times, t, side="right")) - 1
        return float(xs[max(idx, 0)])
    idx = bisect.bisect_right(trace, (t, math.inf)) - 1
    return trace[max(idx, 0)][1]


def _trace_slice(trace, lo, hi):
    """Restriction of a trace to [lo, hi), keeping the value at lo."""
    if isinstance(trace, tuple):
        times, xs = trace
        i = max(int(np.searchsorted(times, lo, side="right")) - 1, 0)
        j = int(np.searchsorted(times, hi, side="left"))
        if j <= i:
            return np.array([lo]), np.array([_trace_at(trace, lo)])
        part_t = times[i:j].copy()
        part_x = xs[i:j].copy()
        part_t[0] = lo
        return part_t, part_x
    i = max(bisect.bisect_right(trace, (lo, math.inf)) - 1, 0)
    out = [(t, s) for t, s in trace[i:] if t < hi]
    if not out:
        return [(lo, _trace_at(trace, lo))]
    out[0] = (lo, out[0][1])
    return out


def _concat_traces(traces):
    """Join per-node traces of an ancestral line into one path."""
    first = traces[0]
    if isinstance(first, tuple):
        times = np.concatenate([tr[0] for tr in traces])
        xs = np.concatenate([tr[1] for tr in traces])
        return times, xs
    out = []
    for tr in traces:
        out.extend(tr)
    return out


def _integrate_weight(trace, t_end, weight_at):
    """Integral of weight_at(path value) over [trace start, t_end].

    Jump-list traces integrate exactly (the path is piecewise constant);
    array traces use the trapezoid rule on the stored skeleton, which is
    exact for the spatially constant weights used on that backend.
    """
    if isinstance(trace, tuple):
        times, xs = trace
        keep = times <= t_end
        ts = np.append(times[keep], t_end)
        vals = weight_at(xs[keep])
        vals = np.append(vals, vals[-1] if len(vals) else weight_at(xs[:1]))
        return float(np.trapezoid(vals, ts))
    total = 0.0
    for i, (t, s) in enumerate(trace):
        if t >= t_end:
            break
        t_next = trace[i + 1][0] if i + 1 < len(trace) else t_end
        total += (min(t_next, t_end) - t) * weight_at(s)
    return total


# --- plain branching simulation ----------------------------------------------


def _run_finite_node(motion, branching, beta_max, label, birth, state, horizon, g, child_cap):
    """Evolve one chain-backend individual; returns (TreeNode, children).

    `children` is None when the offspring count alone exceeds `child_cap`;
    the caller must treat that as a budget overflow without the child list
    ever being materialized (the heavy-tailed law makes multi-million
    counts possible in a single fission).
    """
    trace = [(birth, state)]
    t = birth
    s = state
    next_c = birth + (g.exponential() / beta_max if beta_max > 0 else math.inf)
    while True:
        hold, nxt = motion.jump(s, g)
        t_move = t + hold
        while next_c <= t_move and next_c < horizon:
            beta_s = branching.beta_at(s)
            if beta_s >= beta_max or g.random() * beta_max < beta_s:
                r = branching.law_at(s).sample_one(g)
                node = TreeNode(label, birth, next_c, trace, r, False, False, None)
                if r > child_cap:
                    return node, None
                children = [(label + (i,), next_c, s) for i in range(1, r + 1)]
                return node, children
            next_c += g.exponential() / beta_max
        if t_move >= horizon:
            return TreeNode(label, birth, None, trace, None, True, False, s), []
        if nxt is None:
            return TreeNode(label, birth, t_move, trace, 0, False, True, None), []
        t, s = t_move, nxt
        trace.append((t, s))


def _run_diffusion_node(motion, branching, label, birth, x, horizon, g, child_cap):
    """Evolve one diffusion-backend individual; returns (TreeNode, children).

    The child_cap contract matches _run_finite_node."""
    beta = branching.beta_at(x)
    ts = [birth]
    xs = [x]
    t = birth
    next_f = birth + (g.exponential() / beta if beta > 0 else math.inf)
    dt0 = motion.step_dt
    while True:
        t_stop = min(next_f, horizon)
        killed = False
        while t < t_stop - 1e-15:
            h = min(dt0, t_stop - t)
            x1 = motion.euler_step(x, g, h)
            t = min(t + h, t_stop)
            if x1 is None:
                killed = True
                break
            x = x1
            ts.append(t)
            xs.append(x)
        trace = (np.asarray(ts), np.asarray(xs))
        if killed:
            return TreeNode(label, birth, t, trace, 0, False, True, None), []
        if next_f > horizon:
            return TreeNode(label, birth, None, trace, None, True, False, x), []
        r = branching.law_at(x).sample_one(g)
        node = TreeNode(label, birth, next_f, trace, r, False, False, None)
        if r > child_cap:
            return node, None
        children = [(label + (i,), next_f, x) for i in range(1, r + 1)]
        return node, children


def _grow_p_nodes(spec, entries, horizon, streams, nodes, alive_set, n_max):
    """Grow plain subtrees from the given (label, birth, state) seeds.

    Mutates `nodes` and `alive_set`; returns True if the node budget was hit
    (growth stops, the tree is truncated).
    """
    motion = spec.motion
    branching = spec.branching
    finite = spec.is_finite
    beta_max = branching.beta_max()
    stack = list(entries)
    while stack:
        label, birth, state = stack.pop()
        if len(nodes) >= n_max:
            return True
        g = streams.node(label)
        if finite:
            node, children = _run_finite_node(
                motion, branching, beta_max, label, birth, state, horizon, g, n_max
            )
        else:
            node, children = _run_diffusion_node(
                motion, branching, label, birth, state, horizon, g, n_max
            )
        nodes[label] = node
        if children is None:
            return True
        if node.alive_at_horizon:
            alive_set.add(label)
        else:
            stack.extend(children)
    return False


def simulate_tree_P(spec, x, T, streams, n_max=DEFAULT_N_MAX):
    """Simulate the plain branching process from x up to horizon T.

    `streams` is a NodeStreams (one replica's generator family). Fission
    clocks are thinned at the global bound beta_max; motion deaths remove the
    particle without branching. When the node budget n_max is exceeded the
    tree is returned truncated with `overflowed` set.
    """
    nodes = {}
    alive = set()
    overflow = _grow_p_nodes(spec, [((), 0.0, x)], T, streams, nodes, alive, n_max)
    return MarkedTree(nodes, T, x, alive, overflowed=overflow)


# --- spine simulation ----------------------------------------------------------


def _draw_size_biased(law, g):
    """Sample the size-biased law; returns (count, log count)."""
    if hasattr(law, "sample_with_log"):
        r, logr = law.sample_with_log(g, 1)
        return float(r[0]), float(logr[0])
    r = law.sample_one(g)
    return float(r), math.log(r)


def simulate_spine_only(spec, eig, tilt, x, T, streams):
    """Simulate only the distinguished line under the size-biased measure.

    The spine moves by the tilted motion, fissions at the accelerated
    intensity (A beta) realized by thinning at the bound A_max beta_max, and
    draws offspring counts from the size-biased law; the continuing child
    index is uniform among them. Returns the SpineDecoration over [0, T].
    """
    g_mo = streams.named(_SPINE_MOTION)
    g_ev = streams.named(_SPINE_EVENTS)
    branching = spec.branching
    finite = spec.is_finite
    means = branching.mean_vector()
    a_max = float(np.max(means))
    beta_max = branching.beta_max()
    bound = a_max * beta_max
    if finite:
        sb_laws = (
            [law.size_biased() for law in branching.laws]
            if branching.spatial
            else branching.laws.size_biased()
        )
    else:
        sb_laws = branching.laws.size_biased()

    labels = [()]
    fission_times = []
    fission_states = []
    counts = []
    logs = []
    child_idx = []

    def record_fission(t, s):
        law = sb_laws[s] if (finite and branching.spatial) else sb_laws
        r, logr = _draw_size_biased(law, g_ev)
        if r < 2**62:
            idx = int(g_ev.integers(1, int(r) + 1))
        else:
            idx = 1
        fission_times.append(t)
        fission_states.append(s)
        counts.append(r)
        logs.append(logr)
        child_idx.append(idx)
        labels.append(labels[-1] + (idx,))

    t = 0.0
    s = x
    if finite:
        trace = [(0.0, x)]
        chain = tilt.motion
        next_c = g_ev.exponential() / bound
        while True:
            hold, nxt = chain.jump(s, g_mo)
            t_move = t + hold
            while next_c <= t_move and next_c < T:
                rate = means[s] * branching.beta_at(s) if branching.spatial else bound
                if rate >= bound or g_ev.random() * bound < rate:
                    record_fission(next_c, s)
                next_c += g_ev.exponential() / bound
            if t_move >= T:
                end_state = s
                break
            t, s = t_move, nxt
            trace.append((t, s))
    else:
        ts = [0.0]
        xs = [x]
        diff = tilt.motion
        dt0 = diff.step_dt
        next_c = g_ev.exponential() / bound
        while True:
            t_stop = min(next_c, T)
            while t < t_stop - 1e-15:
                h = min(dt0, t_stop - t)
                if h >= dt0:
                    s = diff.euler_step(s, g_mo)
                else:
                    mu = s + diff.drift(s) * h
                    sd = math.sqrt(h)
                    for _ in range(1000):
                        cand = mu + sd * g_mo.standard_normal()
                        if diff.a < cand < diff.b:
                            s = cand
                            break
                t = min(t + h, t_stop)
                ts.append(t)
                xs.append(s)
            if next_c > T:
                end_state = s
                break
            record_fission(next_c, s)
            next_c += g_ev.exponential() / bound
        trace = (np.asarray(ts), np.asarray(xs))
    return SpineDecoration(
        labels,
        trace,
        fission_times,
        fission_states,
        counts,
        logs,
        child_idx,
        T,
        x,
        end_state,
    )


def _tree_from_decoration(spec, decoration, streams, n_max):
    """Assemble a full tree around a frozen spine.

    Spine nodes are cut out of the decoration's trace; every non-spine child
    at each spine fission seeds an independent plain subtree drawn from
    `streams`. Used both to finish a size-biased simulation and to resample
    subtrees against a fixed spine.
    """
    T = decoration.horizon
    nodes = {}
    alive = set()
    overflow = False
    seeds = []
    times = [0.0] + list(decoration.fission_times)
    n_fiss = decoration.n_fissions
    for i in range(n_fiss + 1):
        label = decoration.spine_labels[i]
        birth = times[i]
        end = decoration.fission_times[i] if i < n_fiss else None
        trace = _trace_slice(decoration.trace, birth, end if end is not None else T)
        if i < n_fiss:
            r = decoration.offspring_counts[i]
            r_int = int(r) if r < 2**62 else None
            node = TreeNode(
                label, birth, end, trace,
                r_int if r_int is not None else r,
                False, False, None,
            )
            nodes[label] = node
            if r_int is None or r_int - 1 > n_max:
                overflow = True
                continue
            state = decoration.fission_states[i]
            keep = decoration.child_indices[i]
            seeds.extend(
                (label + (j,), end, state) for j in range(1, r_int + 1) if j != keep
            )
        else:
            node = TreeNode(label, birth, None, trace, None, True, False, decoration.end_state)
            nodes[label] = node
            alive.add(label)
    if not overflow:
        overflow = _grow_p_nodes(spec, seeds, T, streams, nodes, alive, n_max)
    return MarkedTree(
        nodes, T, decoration.root_state, alive, overflowed=overflow,
        spine=tuple(decoration.spine_labels),
    )


def simulate_tree_Qtilde(spec, eig, tilt, x, T, streams, n_max=DEFAULT_N_MAX):
    """Simulate a spine-decorated tree under the size-biased measure."""
    decoration = simulate_spine_only(spec, eig, tilt, x, T, streams)
    tree = _tree_from_decoration(spec, decoration, streams, n_max)
    return tree, decoration


def resample_subtrees(spec, decoration, streams, n_max=DEFAULT_N_MAX):
    """Redraw every off-spine subtree; the spine itself stays frozen.

    Pass a distinct `streams` (for example NodeStreams.with_round(k)) per
    resampling round: equal rounds reproduce identical trees, different
    rounds give independent subtrees, which is what the conditional
    expectation tests need.
    """
    return _tree_from_decoration(spec, decoration, streams, n_max)


def decorate_uniform_spine(tree, g):
    """Pick a line of descent by uniform child choices through a plain tree.

    Returns a SpineDecoration, or None when the walk dies with a killed
    particle before the horizon. The offspring counts along the walk weight
    the spine with probability prod(1/r_v), matching the projection weights.
    """
    label = ()
    spine_nodes = [tree.nodes[label]]
    child_idx = []
    while True:
        node = spine_nodes[-1]
        if node.alive_at_horizon:
            break
        if node.killed:
            return None
        idx = int(g.integers(1, node.offspring_count + 1))
        child_idx.append(idx)
        label = label + (idx,)
        spine_nodes.append(tree.nodes[label])
    interior = spine_nodes[:-1]
    return SpineDecoration(
        [n.label for n in spine_nodes],
        _concat_traces([n.trace for n in spine_nodes]),
        [n.end for n in interior],
        [_trace_at(n.trace, n.end) for n in interior],
        [float(n.offspring_count) for n in interior],
        [math.log(n.offspring_count) for n in interior],
        child_idx,
        tree.horizon,
        tree.root_state,
        spine_nodes[-1].position_at_horizon,
    )


# --- martingale functionals ----------------------------------------------------


def compute_M(tree, eig):
    """Additive martingale at the horizon: e^{-lambda1 T} <phi, X_T> / phi(x).

    Overflowed trees yield an invalid track (their particle set is
    truncated, so the sum would be meaningless).
    """
    T = tree.horizon
    if tree.overflowed:
        return MartingaleTrack(T, math.nan, valid=False)
    phi_root = eig.phi_at(tree.root_state)
    total = math.fsum(
        float(eig.phi_at(tree.nodes[lab].position_at_horizon)) for lab in tree.alive_set
    )
    return MartingaleTrack(T, math.exp(-eig.lambda1 * T) * total / float(phi_root))


def _eta_factors(decoration, spec, eig):
    """The three spine density factors evaluated on one decoration."""
    branching = spec.branching
    T = decoration.horizon
    if spec.is_finite:
        means = branching.mean_vector()
        gw = np.asarray(branching.growth_weight(), dtype=float)
        if np.ndim(gw) == 0:
            gw = np.full(spec.motion.n_states, float(gw))

        def weight_at(s):
            return gw[s]

        def mean_at(s):
            return float(means[s]) if np.ndim(means) else float(means)

    else:
        mean_const = float(branching.mean_vector())
        gw_const = (mean_const - 1.0) * branching.beta_at(0)

        def weight_at(s):
            return gw_const * np.ones_like(np.asarray(s, dtype=float))

        def mean_at(s):
            return mean_const

    integral = _integrate_weight(decoration.trace, T, weight_at)
    prod_a = 1.0
    prod_r = 1.0
    for s, r in zip(decoration.fission_states, decoration.offspring_counts):
        a = mean_at(s)
        prod_a *= a
        prod_r *= r / a
    eta1 = prod_a * math.exp(-integral)
    eta2 = prod_r
    eta3 = (
        float(eig.phi_at(decoration.end_state))
        / float(eig.phi_at(decoration.root_state))
        * math.exp(-eig.lambda1 * T + integral)
    )
    return eta1, eta2, eta3


def compute_eta(tree, decoration, spec, eig):
    """Spine density factors and their product, plus M of the ambient tree."""
    track_m = compute_M(tree, eig)
    eta1, eta2, eta3 = _eta_factors(decoration, spec, eig)
    return MartingaleTrack(
        tree.horizon,
        track_m.M,
        eta1=eta1,
        eta2=eta2,
        eta3=eta3,
        eta=eta1 * eta2 * eta3,
        valid=track_m.valid,
    )


def spine_rhs(decoration, eig):
    """Right side of the spine decomposition of the additive martingale:
    phi(Y_T) e^{-lambda1 T} + sum_i (r_i - 1) phi(Y_{zeta_i}) e^{-lambda1 zeta_i}.
    """
    lam = eig.lambda1
    total = float(eig.phi_at(decoration.end_state)) * math.exp(-lam * decoration.horizon)
    parts = [
        (r - 1.0) * float(eig.phi_at(s)) * math.exp(-lam * z)
        for z, s, r in zip(
            decoration.fission_times,
            decoration.fission_states,
            decoration.offspring_counts,
        )
    ]
    return total + math.fsum(parts)


def _line_through(tree, leaf_label):
    """Decoration-shaped view of the ancestral line ending at a leaf."""
    line = [tree.nodes[leaf_label[:i]] for i in range(len(leaf_label) + 1)]
    interior = line[:-1]
    return SpineDecoration(
        [n.label for n in line],
        _concat_traces([n.trace for n in line]),
        [n.end for n in interior],
        [_trace_at(n.trace, n.end) for n in interior],
        [float(n.offspring_count) for n in interior],
        [math.log(n.offspring_count) for n in interior],
        list(leaf_label),
        tree.horizon,
        tree.root_state,
        line[-1].position_at_horizon,
    )


def project_eta(tree, spec, eig):
    """Average of the spine density over all lines of descent, brute force.

    Enumerates every particle alive at the horizon, weights its line by
    prod(1/r_v) over proper ancestors, and sums the eta values. The result
    telescopes to compute_M exactly; the test suites assert agreement to
    1e-10 on every tree, which is the projection identity at tree level.
    """
    if tree.overflowed:
        raise ValueError("projection is undefined on a truncated tree")
    parts = []
    for leaf in tree.alive_set:
        dec = _line_through(tree, leaf)
        eta1, eta2, eta3 = _eta_factors(dec, spec, eig)
        weight = 1.0
        for r in dec.offspring_counts:
            weight /= r
        parts.append(weight * eta1 * eta2 * eta3)
    return math.fsum(parts)


class PartialSums:
    """Running partial sums and maxima of the spine fission terms."""

    __slots__ = ("terms", "partials", "running_max", "log_terms", "log_running_max")

    def __init__(self, terms, partials, running_max, log_terms, log_running_max):
        self.terms = terms
        self.partials = partials
        self.running_max = running_max
        self.log_terms = log_terms
        self.log_running_max = log_running_max


def spine_partial_sums(decoration, eig):
    """Terms e^{-lambda1 zeta_i} r_i phi(Y_{zeta_i}) along the spine.

    Returns their running sums and running maxima, in both linear and log
    scale; the log scale stays exact when the counts overflow floats.
    """
    lam = eig.lambda1
    zs = np.asarray(decoration.fission_times, dtype=float)
    if len(zs) == 0:
        empty = np.empty(0)
        return PartialSums(empty, empty, empty, empty, empty)
    phis = np.asarray([float(eig.phi_at(s)) for s in decoration.fission_states])
    logs = np.asarray(decoration.log_offspring, dtype=float)
    log_terms = logs - lam * zs + np.log(phis)
    with np.errstate(over="ignore"):
        terms = np.exp(log_terms)
    return PartialSums(
        terms,
        np.cumsum(terms),
        np.maximum.accumulate(terms),
        log_terms,
        np.maximum.accumulate(log_terms),
    )


# --- vectorized population engines ---------------------------------------------


def population_run(law, beta, t_grid, g, n_max=DEFAULT_N_MAX, block=4096):
    """Total population size of a homogeneous branching process on a time grid.

    Valid when beta and the offspring law are spatially constant, in which
    case the population size is autonomous: events arrive at rate
    beta * N and each adds (k - 1) individuals. Draws arrive in fixed-size
    blocks (offspring counts, then exponentials) so a replica's randomness
    does not depend on the grid. Returns (sizes, overflowed) aligned with
    t_grid; sizes are floats and carry +inf where the cap n_max was passed,
    with the overflow flag set from that horizon on.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    sizes = np.empty(len(t_grid))
    overflowed = np.zeros(len(t_grid), dtype=bool)
    t = 0.0
    n = 1.0
    j = 0
    while True:
        ks = law.sample(g, block).astype(float)
        es = g.exponential(size=block)
        ns = n + np.cumsum(ks - 1.0)
        n_before = np.concatenate(([n], ns[:-1]))
        gaps = es / (beta * n_before)
        times = t + np.cumsum(gaps)
        over = np.nonzero(ns > n_max)[0]
        t_over = times[over[0]] if over.size else math.inf
        while j < len(t_grid):
            if t_over <= t_grid[j]:
                sizes[j:] = math.inf
                overflowed[j:] = True
                return sizes, overflowed
            happened = int(np.searchsorted(times, t_grid[j], side="right"))
            if happened == block:
                break
            sizes[j] = ns[happened - 1] if happened > 0 else n
            j += 1
        if j == len(t_grid):
            return sizes, overflowed
        n = float(ns[-1])
        t = float(times[-1])


def simulate_diffusion_population(motion, branching, x, T, g, n_reps, n_max=DEFAULT_N_MAX):
    """Lockstep Euler evolution of n_reps branching diffusions.

    All replicas in the batch advance through shared vectorized draws;
    fission clocks are per-particle exponential countdowns resolved at step
    boundaries (an O(dt) quantization, same order as the Euler motion
    itself). Returns (rep_index, positions, overflowed) where the first two
    arrays describe all particles alive at T and the flag array marks
    replicas that passed the particle cap.
    """
    beta = branching.beta_at(x)
    law = branching.law_at(x)
    a, b = motion.a, motion.b
    dt0 = motion.step_dt
    bridge = motion.bridge_correction
    pos = np.full(n_reps, float(x))
    rep = np.arange(n_reps, dtype=np.int64)
    clock = g.exponential(size=n_reps) / beta
    overflowed = np.zeros(n_reps, dtype=bool)
    t = 0.0
    while t < T - 1e-15 and len(pos):
        h = min(dt0, T - t)
        sd = math.sqrt(h)
        new = pos + sd * g.standard_normal(len(pos))
        dead = (new <= a) | (new >= b)
        if bridge:
            u1 = g.random(len(pos))
            u2 = g.random(len(pos))
            with np.errstate(over="ignore"):
                dead |= u1 < np.exp(-2.0 * (pos - a) * (new - a) / h)
                dead |= u2 < np.exp(-2.0 * (b - pos) * (b - new) / h)
        keep = ~dead
        pos, rep, clock = new[keep], rep[keep], clock[keep] - h
        t += h
        due = clock <= 0.0
        if due.any():
            idx = np.nonzero(due)[0]
            ks = law.sample(g, len(idx)).astype(np.int64)
            parents_pos = pos[idx]
            parents_rep = rep[idx]
            child_pos = np.repeat(parents_pos, ks)
            child_rep = np.repeat(parents_rep, ks)
            child_clock = g.exponential(size=len(child_pos)) / beta
            keep = ~due
            pos = np.concatenate([pos[keep], child_pos])
            rep = np.concatenate([rep[keep], child_rep])
            clock = np.concatenate([clock[keep], child_clock])
            counts = np.bincount(rep, minlength=n_reps)
            over = counts > n_max
            if over.any():
                overflowed |= over
                alive_ok = ~over[rep]
                pos, rep, clock = pos[alive_ok], rep[alive_ok], clock[alive_ok]
    return rep, pos, overflowed


# --- text dump -----------------------------------------------------------------


def format_label(label):
    """Dotted rendering of an ancestry label; the root is '-'."""
    return ".".join(str(i) for i in label) if label else "-"


def tree_dump_lines(tree):
    """One tab-separated line per node: label, birth, end, offspring, trace."""
    lines = []
    for label in sorted(tree.nodes):
        node = tree.nodes[label]
        end = "-" if node.end is None else f"{node.end:.9g}"
        r = "-" if node.offspring_count is None else str(node.offspring_count)
        if isinstance(node.trace, tuple):
            times, xs = node.trace
            parts = [f"{t:.6g}:{v:.6g}" for t, v in zip(times, xs)]
            if len(parts) > 12:
                parts = parts[:6] + ["..."] + parts[-5:]
            trace = ";".join(parts)
        else:
            trace = ";".join(f"{t:.9g}:{s}" for t, s in node.trace)
        lines.append(f"{format_label(label)}\t{node.birth:.9g}\t{end}\t{r}\t{trace}")
    return lines
