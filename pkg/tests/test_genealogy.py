"""Genealogy tests: trees, spines, density factors, and the projection identity.

Hand-built fixtures carry their oracles in comments; simulation-backed tests
use fixed seeds and 3-SE bands.
"""

import math

import numpy as np
import pytest

from spinesim.genealogy import (
    MarkedTree,
    SpineDecoration,
    TreeNode,
    _eta_factors,
    compute_M,
    compute_eta,
    decorate_uniform_spine,
    format_label,
    population_run,
    project_eta,
    resample_subtrees,
    simulate_diffusion_population,
    simulate_spine_only,
    simulate_tree_P,
    simulate_tree_Qtilde,
    spine_partial_sums,
    spine_rhs,
    tree_dump_lines,
)
from spinesim.rng import TAG_POPULATION, TAG_SPINE, TAG_TREE, replica_stream, tree_streams


def _hand_tree_sym_three_leaves(T=1.0):
    """Root splits at 0.4; first child splits at 0.7; three particles at T."""
    nodes = {
        (): TreeNode((), 0.0, 0.4, [(0.0, 0)], 2, False, False, None),
        (1,): TreeNode((1,), 0.4, 0.7, [(0.4, 0)], 2, False, False, None),
        (2,): TreeNode((2,), 0.4, None, [(0.4, 0)], None, True, False, 0),
        (1, 1): TreeNode((1, 1), 0.7, None, [(0.7, 0)], None, True, False, 0),
        (1, 2): TreeNode((1, 2), 0.7, None, [(0.7, 0)], None, True, False, 0),
    }
    return MarkedTree(nodes, T, 0, {(2,), (1, 1), (1, 2)})


# --- martingale fixtures -----------------------------------------------------


def test_m_three_leaves_sym(sym_eig):
    tree = _hand_tree_sym_three_leaves()
    track = compute_M(tree, sym_eig)
    assert track.valid
    assert track.M == pytest.approx(3 * math.exp(-1.0), rel=1e-14)


def test_m_single_particle_bm(bm_eig):
    trace = (np.array([0.0, 1.0]), np.array([math.pi / 4, math.pi / 2]))
    root = TreeNode((), 0.0, None, trace, None, True, False, math.pi / 2)
    tree = MarkedTree({(): root}, 1.0, math.pi / 4, {()})
    track = compute_M(tree, bm_eig)
    # e^{-1/2} sin(pi/2) / sin(pi/4) = sqrt(2) e^{-1/2}
    assert track.M == pytest.approx(math.sqrt(2) * math.exp(-0.5), rel=1e-14)


def test_m_overflowed_tree_is_invalid(sym_eig):
    tree = _hand_tree_sym_three_leaves()
    tree.overflowed = True
    track = compute_M(tree, sym_eig)
    assert not track.valid and math.isnan(track.M)
    with pytest.raises(ValueError):
        project_eta(tree, None, sym_eig)


def test_hand_tree_passes_consistency():
    rows = _hand_tree_sym_three_leaves().consistency_checks()
    assert all(ok for _, ok, _ in rows), rows


def test_consistency_catches_birth_tampering():
    tree = _hand_tree_sym_three_leaves()
    tree.nodes[(1, 1)].birth = 0.71
    rows = dict((n, ok) for n, ok, _ in tree.consistency_checks())
    assert not rows["child birth equals parent fission time"]


def test_consistency_catches_alive_set_tampering():
    tree = _hand_tree_sym_three_leaves()
    tree.alive_set.discard((2,))
    rows = dict((n, ok) for n, ok, _ in tree.consistency_checks())
    assert not rows["alive set is exactly b <= T < end"]


# --- eta factor fixtures -----------------------------------------------------


def test_eta_sym_no_fissions(sym, sym_eig):
    dec = SpineDecoration([()], [(0.0, 0)], [], [], [], [], [], 1.0, 0, 0)
    eta1, eta2, eta3 = _eta_factors(dec, sym, sym_eig)
    assert eta1 == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert eta2 == 1.0
    assert eta3 == pytest.approx(1.0, rel=1e-12)


def test_eta_sym_two_binary_fissions(sym, sym_eig):
    dec = SpineDecoration(
        [(), (1,), (1, 1)],
        [(0.0, 0)],
        [0.3, 0.6],
        [0, 0],
        [2.0, 2.0],
        [math.log(2), math.log(2)],
        [1, 1],
        1.0,
        0,
        0,
    )
    eta1, eta2, eta3 = _eta_factors(dec, sym, sym_eig)
    assert eta1 * eta2 * eta3 == pytest.approx(4 * math.exp(-1.0), rel=1e-12)
    assert eta2 == pytest.approx(1.0)


def test_eta_asym_hand_value(asym, asym_eig):
    """State 0 until 0.25, then state 1; one r=3 fission at 0.6.

    weight integral: 0.25*1 + 0.75*3 = 2.5
    eta1 = A(1) e^{-2.5} = 2.5 e^{-2.5}
    eta2 = 3/2.5 = 1.2
    eta3 = (phi(1)/phi(0)) e^{-lambda1 + 2.5} = 2 e^{0.5}
    product = 6 e^{-2}
    """
    dec = SpineDecoration(
        [(), (2,)],
        [(0.0, 0), (0.25, 1)],
        [0.6],
        [1],
        [3.0],
        [math.log(3.0)],
        [2],
        1.0,
        0,
        1,
    )
    eta1, eta2, eta3 = _eta_factors(dec, asym, asym_eig)
    assert eta1 == pytest.approx(2.5 * math.exp(-2.5), rel=1e-10)
    assert eta2 == pytest.approx(1.2, rel=1e-12)
    assert eta3 == pytest.approx(2 * math.exp(0.5), rel=1e-9)
    assert eta1 * eta2 * eta3 == pytest.approx(0.8120116994196762, rel=1e-9)


def test_spine_rhs_one_fission(sym_eig):
    dec = SpineDecoration(
        [(), (1,)], [(0.0, 0)], [0.3], [0], [2.0], [math.log(2)], [1], 1.0, 0, 0
    )
    assert spine_rhs(dec, sym_eig) == pytest.approx(
        math.exp(-1.0) + math.exp(-0.3), rel=1e-12
    )


def test_partial_sums_fixture(sym_eig):
    dec = SpineDecoration(
        [(), (1,), (1, 1)],
        [(0.0, 0)],
        [0.3, 0.9],
        [0, 0],
        [2.0, 2.0],
        [math.log(2), math.log(2)],
        [1, 1],
        1.0,
        0,
        0,
    )
    ps = spine_partial_sums(dec, sym_eig)
    assert ps.terms == pytest.approx([2 * math.exp(-0.3), 2 * math.exp(-0.9)], rel=1e-12)
    assert ps.partials == pytest.approx(
        [2 * math.exp(-0.3), 2 * math.exp(-0.3) + 2 * math.exp(-0.9)], rel=1e-12
    )
    assert ps.running_max == pytest.approx([2 * math.exp(-0.3)] * 2, rel=1e-12)
    assert ps.log_running_max[-1] == pytest.approx(math.log(2) - 0.3, rel=1e-12)


def test_partial_sums_empty(sym_eig):
    dec = SpineDecoration([()], [(0.0, 0)], [], [], [], [], [], 1.0, 0, 0)
    ps = spine_partial_sums(dec, sym_eig)
    assert len(ps.terms) == 0 and len(ps.partials) == 0


# --- P-trees -------------------------------------------------------------------


def test_tree_zero_horizon(sym, sym_eig):
    tree = simulate_tree_P(sym, 0, 0.0, tree_streams(1, TAG_TREE, 0))
    assert len(tree) == 1 and tree.alive_set == {()}
    assert compute_M(tree, sym_eig).M == 1.0


def test_tree_reproducible(sym):
    a = simulate_tree_P(sym, 0, 1.5, tree_streams(7, TAG_TREE, 4))
    b = simulate_tree_P(sym, 0, 1.5, tree_streams(7, TAG_TREE, 4))
    assert set(a.nodes) == set(b.nodes)
    assert all(a.nodes[k].birth == b.nodes[k].birth for k in a.nodes)
    assert a.alive_set == b.alive_set


def test_trees_pass_consistency(sym, asym):
    for spec, n in [(sym, 120), (asym, 120)]:
        for i in range(n):
            tree = simulate_tree_P(spec, 0, 1.0, tree_streams(11, TAG_TREE, i))
            assert not tree.overflowed
            rows = tree.consistency_checks()
            assert all(ok for _, ok, _ in rows), (i, [r for r in rows if not r[1]])


def test_zero_fission_trees_have_exact_m(sym, sym_eig):
    """Conditioned on no fission the tree is one particle and M = e^{-T}."""
    hits = 0
    for i in range(200):
        tree = simulate_tree_P(sym, 0, 1.0, tree_streams(13, TAG_TREE, i))
        if len(tree) == 1 and not tree.overflowed:
            hits += 1
            assert compute_M(tree, sym_eig).M == pytest.approx(math.exp(-1.0), rel=1e-14)
    assert hits > 10  # P(no fission) = e^{-1}


def test_mean_population_sym(sym):
    """E of the particle count is e^{(A-1) beta T} = e^T for MODEL-SYM."""
    counts = np.array(
        [
            len(simulate_tree_P(sym, 0, 1.0, tree_streams(17, TAG_TREE, i)).alive_set)
            for i in range(4000)
        ],
        dtype=float,
    )
    se = counts.std() / math.sqrt(len(counts))
    assert abs(counts.mean() - math.e) <= 3 * se


def test_tree_overflow_flag(sym):
    tree = simulate_tree_P(sym, 0, 6.0, tree_streams(19, TAG_TREE, 0), n_max=10)
    assert tree.overflowed


def test_projection_identity_asym(asym, asym_eig):
    """Brute-force spine average equals the martingale on every tree."""
    worst = 0.0
    for i in range(250):
        tree = simulate_tree_P(asym, 0, 1.0, tree_streams(23, TAG_TREE, i))
        if tree.overflowed:
            continue
        m = compute_M(tree, asym_eig).M
        p = project_eta(tree, asym, asym_eig)
        worst = max(worst, abs(p - m))
    assert worst < 1e-10


def test_projection_hand_tree(sym, sym_eig):
    tree = _hand_tree_sym_three_leaves()
    assert project_eta(tree, sym, sym_eig) == pytest.approx(
        3 * math.exp(-1.0), rel=1e-12
    )


# --- spines under the tilted measure ----------------------------------------------


def test_spine_marginal_sym(sym, sym_eig, sym_tilt):
    """Tilted chain on MODEL-SYM is the original chain; occupancy of state 0
    at t=1 from state 0 is (1 + e^{-2})/2."""
    n = 4000
    hits = 0
    for i in range(n):
        dec = simulate_spine_only(sym, sym_eig, sym_tilt, 0, 1.0, tree_streams(29, TAG_SPINE, i))
        hits += dec.end_state == 0
    p = (1 + math.exp(-2)) / 2
    se = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) <= 3 * se


def test_spine_fission_rate_and_counts(sym, sym_eig, sym_tilt):
    n = 3000
    fissions = []
    for i in range(n):
        dec = simulate_spine_only(sym, sym_eig, sym_tilt, 0, 1.5, tree_streams(31, TAG_SPINE, i))
        fissions.append(dec.n_fissions)
        assert all(r == 2.0 for r in dec.offspring_counts)
        assert all(0.0 < z <= 1.5 for z in dec.fission_times)
    arr = np.array(fissions, dtype=float)
    se = arr.std() / math.sqrt(n)
    assert abs(arr.mean() - 3.0) <= 3 * se  # rate A beta = 2, horizon 1.5


def test_spine_decoration_sorted_times(asym, asym_eig, asym_tilt):
    for i in range(50):
        dec = simulate_spine_only(asym, asym_eig, asym_tilt, 0, 2.0, tree_streams(37, TAG_SPINE, i))
        zs = list(dec.fission_times)
        assert zs == sorted(zs)
        assert len(zs) == len(dec.fission_states) == len(dec.offspring_counts)


def test_qtilde_tree_contains_spine(asym, asym_eig, asym_tilt):
    tree, dec = simulate_tree_Qtilde(asym, asym_eig, asym_tilt, 0, 1.0, tree_streams(41, TAG_SPINE, 2))
    assert tree.spine == tuple(dec.spine_labels)
    for lab in dec.spine_labels:
        assert lab in tree.nodes
    rows = tree.consistency_checks()
    assert all(ok for _, ok, _ in rows), rows


def test_qtilde_spine_offspring_recorded(asym, asym_eig, asym_tilt):
    # interior spine nodes carry the size-biased counts from the decoration
    for i in range(40):
        tree, dec = simulate_tree_Qtilde(
            asym, asym_eig, asym_tilt, 0, 1.0, tree_streams(43, TAG_SPINE, i)
        )
        for j, lab in enumerate(dec.spine_labels[:-1]):
            assert tree.nodes[lab].offspring_count == int(dec.offspring_counts[j])


def test_resample_freezes_spine_and_reproduces(asym, asym_eig, asym_tilt):
    streams = tree_streams(47, TAG_SPINE, 5)
    dec = simulate_spine_only(asym, asym_eig, asym_tilt, 0, 1.0, streams)
    t1 = resample_subtrees(asym, dec, streams.with_round(3))
    t2 = resample_subtrees(asym, dec, streams.with_round(3))
    t3 = resample_subtrees(asym, dec, streams.with_round(4))
    assert tree_dump_lines(t1) == tree_dump_lines(t2)
    assert t1.spine == tuple(dec.spine_labels)
    m1 = compute_M(t1, asym_eig).M
    m3 = compute_M(t3, asym_eig).M
    assert m1 == compute_M(t2, asym_eig).M
    assert m1 != m3 or len(t1) == 1


def test_uniform_spine_decoration(sym, sym_eig):
    tree = _hand_tree_sym_three_leaves()
    g = np.random.default_rng(0)
    dec = decorate_uniform_spine(tree, g)
    assert dec is not None
    assert dec.spine_labels[-1] in tree.alive_set
    assert dec.horizon == tree.horizon
    track = compute_eta(tree, dec, sym, sym_eig)
    assert track.eta == pytest.approx(track.eta1 * track.eta2 * track.eta3, rel=1e-12)


def test_eta_product_identity_on_simulated_trees(asym, asym_eig):
    g = np.random.default_rng(1)
    for i in range(60):
        tree = simulate_tree_P(asym, 0, 1.0, tree_streams(53, TAG_TREE, i))
        if tree.overflowed:
            continue
        dec = decorate_uniform_spine(tree, g)
        if dec is None:
            continue
        track = compute_eta(tree, dec, asym, asym_eig)
        assert track.eta == pytest.approx(track.eta1 * track.eta2 * track.eta3, rel=1e-12)
        assert track.valid


# --- population engines ------------------------------------------------------------


def test_population_run_mean_growth(sym):
    law = sym.branching.law_at(0)
    vals = []
    for i in range(3000):
        sizes, over = population_run(law, 1.0, [1.0], replica_stream(59, TAG_POPULATION, i))
        assert not over.any()
        vals.append(sizes[0])
    arr = np.array(vals)
    se = arr.std() / math.sqrt(len(arr))
    assert abs(arr.mean() - math.e) <= 3 * se


def test_population_run_monotone_in_t(sym):
    law = sym.branching.law_at(0)
    sizes, _ = population_run(law, 1.0, [0.5, 1.0, 2.0, 4.0], replica_stream(61, TAG_POPULATION, 0))
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))


def test_population_run_overflow_is_sticky(sym):
    law = sym.branching.law_at(0)
    found = False
    for i in range(200):
        sizes, over = population_run(
            law, 1.0, [1.0, 2.0, 8.0], replica_stream(67, TAG_POPULATION, i), n_max=20
        )
        if over.any():
            found = True
            j = int(np.argmax(over))
            assert over[j:].all()
            assert np.isinf(sizes[j:]).all()
            assert np.isfinite(sizes[:j]).all()
    assert found


def test_population_run_reproducible(sym):
    law = sym.branching.law_at(0)
    a, _ = population_run(law, 1.0, [1.0, 3.0], replica_stream(71, TAG_POPULATION, 9))
    b, _ = population_run(law, 1.0, [1.0, 3.0], replica_stream(71, TAG_POPULATION, 9))
    assert np.array_equal(a, b)


def test_diffusion_population_mean_martingale(bm, bm_eig):
    rep, pos, over = simulate_diffusion_population(
        bm.motion, bm.branching, math.pi / 2, 0.5, replica_stream(73, TAG_POPULATION, 0), 600
    )
    assert not over.any()
    weights = np.sin(pos) / math.sin(math.pi / 2)
    m_vals = np.bincount(rep, weights=weights, minlength=600) * math.exp(-bm_eig.lambda1 * 0.5)
    se = m_vals.std() / math.sqrt(len(m_vals))
    assert abs(m_vals.mean() - 1.0) <= 3 * se


# --- dump format ----------------------------------------------------------------


def test_format_label():
    assert format_label(()) == "-"
    assert format_label((1, 3, 2)) == "1.3.2"


def test_tree_dump_fields(sym):
    tree = simulate_tree_P(sym, 0, 1.0, tree_streams(79, TAG_TREE, 0))
    lines = tree_dump_lines(tree)
    assert len(lines) == len(tree.nodes)
    for line in lines:
        parts = line.split("\t")
        assert len(parts) == 5
    roots = [l for l in lines if l.startswith("-\t")]
    assert len(roots) == 1


def test_tree_dump_diffusion_trace_abbreviated(bm):
    tree = simulate_tree_P(bm, math.pi / 2, 0.3, tree_streams(83, TAG_TREE, 1))
    lines = tree_dump_lines(tree)
    # 300 Euler points per segment get cut down to a preview
    assert any("..." in l for l in lines)
