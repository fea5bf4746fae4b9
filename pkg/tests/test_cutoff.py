import random

import pytest

from moesim.cutoff import BindingConstraint, CutoffInput, feasibility_report, solve_cutoff

MB = 1_000_000
GB = 1_000_000_000


def paper_mixtral_input(**overrides) -> CutoffInput:
    kw = dict(
        k=1,
        l_all=32,
        t_comp=0.003,
        t_io=0.014,
        m_expert=336 * MB,
        m_gpu=24 * GB,
        m_peak=8 * GB,
    )
    kw.update(overrides)
    return CutoffInput(**kw)


def brute_force(inp: CutoffInput):
    """Exhaustive oracle: check both inequalities directly for every L."""
    feasible = []
    for L in range(inp.l_all):
        n = (L + 1) * inp.k
        mem_ok = inp.m_peak + n * inp.m_expert < inp.m_gpu
        lhs = max((L - 1) * inp.t_comp + inp.k * inp.t_io, n * inp.t_io)
        overlap_ok = lhs <= inp.l_all * inp.t_comp
        if mem_ok and overlap_ok:
            feasible.append(L)
    return max(feasible) if feasible else None


def random_input(rng: random.Random) -> CutoffInput:
    m_gpu = rng.randrange(1 * GB, 64 * GB)
    return CutoffInput(
        k=rng.randrange(1, 9),
        l_all=rng.randrange(1, 64),
        t_comp=rng.uniform(0.0, 0.02),
        t_io=rng.uniform(0.0, 0.05),
        m_expert=rng.randrange(1 * MB, 2 * GB),
        m_gpu=m_gpu,
        m_peak=rng.randrange(0, m_gpu),
    )


def test_solver_equals_brute_force_on_randomized_inputs():
    rng = random.Random(12345)
    for _ in range(1000):
        inp = random_input(rng)
        expect = brute_force(inp)
        got = solve_cutoff(inp)
        assert got.layer == expect
        assert got.feasible == (expect is not None)
        if expect is not None:
            assert got.n_expert == (expect + 1) * inp.k


def test_paper_timing_mixtral_instance():
    # t_comp=3 ms, t_io=14 ms, 32 layers, k=1: overlap budget 96 ms admits
    # six experts, so L=5 with the overlap constraint binding
    result = solve_cutoff(paper_mixtral_input())
    assert result.feasible
    assert result.layer == 5
    assert result.n_expert == 6
    assert result.binding_constraint is BindingConstraint.OVERLAP


def test_zero_io_reaches_full_depth():
    result = solve_cutoff(paper_mixtral_input(t_io=0.0))
    assert result.layer == 31
    assert result.binding_constraint in (BindingConstraint.MEMORY, BindingConstraint.NONE)


def test_memory_bound_instance():
    # room for exactly 3 experts beside the peak, k=1, negligible I/O
    inp = paper_mixtral_input(
        t_io=1e-9,
        m_gpu=8 * GB + 3 * 336 * MB + 1,
        m_peak=8 * GB,
    )
    result = solve_cutoff(inp)
    assert result.layer == 2
    assert result.binding_constraint is BindingConstraint.MEMORY


def test_infeasible_returns_result_not_error():
    inp = paper_mixtral_input(m_gpu=8 * GB + 1, m_peak=8 * GB)
    result = solve_cutoff(inp)
    assert not result.feasible
    assert result.layer is None
    assert result.n_expert == 0


def test_feasibility_slacks_at_solution():
    inp = paper_mixtral_input()
    result = solve_cutoff(inp)
    at = feasibility_report(inp, result.layer)
    assert at.memory_slack_bytes > 0
    assert at.overlap_slack_seconds >= 0
    past = feasibility_report(inp, result.layer + 1)
    assert past.memory_slack_bytes <= 0 or past.overlap_slack_seconds < 0


def test_feasibility_slack_zero_io_positive():
    inp = paper_mixtral_input(t_io=0.0)
    for L in (0, 5, 31):
        rep = feasibility_report(inp, L)
        # overlap lhs reduces to max((L-1) * t_comp, 0), leaving at least
        # (l_all - L + 1) * t_comp of window
        expect = inp.l_all * inp.t_comp - max((L - 1) * inp.t_comp, 0.0)
        assert rep.overlap_slack_seconds == pytest.approx(expect)
        if L >= 1:
            assert rep.overlap_slack_seconds == pytest.approx((inp.l_all - L + 1) * inp.t_comp)
        assert rep.overlap_slack_seconds > 0


def test_feasibility_layer_range():
    inp = paper_mixtral_input()
    with pytest.raises(ValueError):
        feasibility_report(inp, -1)
    with pytest.raises(ValueError):
        feasibility_report(inp, inp.l_all)


def test_monotonicity_properties():
    rng = random.Random(99)
    for _ in range(300):
        inp = random_input(rng)
        base = solve_cutoff(inp)

        def level(res):
            return -1 if res.layer is None else res.layer

        slower_io = solve_cutoff(
            CutoffInput(
                k=inp.k,
                l_all=inp.l_all,
                t_comp=inp.t_comp,
                t_io=inp.t_io * 1.5 + 1e-6,
                m_expert=inp.m_expert,
                m_gpu=inp.m_gpu,
                m_peak=inp.m_peak,
            )
        )
        assert level(slower_io) <= level(base)

        if inp.k + 1 <= 16:
            more_k = solve_cutoff(
                CutoffInput(
                    k=inp.k + 1,
                    l_all=inp.l_all,
                    t_comp=inp.t_comp,
                    t_io=inp.t_io,
                    m_expert=inp.m_expert,
                    m_gpu=inp.m_gpu,
                    m_peak=inp.m_peak,
                )
            )
            assert level(more_k) <= level(base)

        faster_comp = solve_cutoff(
            CutoffInput(
                k=inp.k,
                l_all=inp.l_all,
                t_comp=inp.t_comp * 1.5 + 1e-6,
                t_io=inp.t_io,
                m_expert=inp.m_expert,
                m_gpu=inp.m_gpu,
                m_peak=inp.m_peak,
            )
        )
        assert level(faster_comp) >= level(base)

        more_mem = solve_cutoff(
            CutoffInput(
                k=inp.k,
                l_all=inp.l_all,
                t_comp=inp.t_comp,
                t_io=inp.t_io,
                m_expert=inp.m_expert,
                m_gpu=inp.m_gpu + 2 * GB,
                m_peak=inp.m_peak,
            )
        )
        assert level(more_mem) >= level(base)


def test_input_validation():
    with pytest.raises(ValueError):
        paper_mixtral_input(k=0)
    with pytest.raises(ValueError):
        paper_mixtral_input(m_peak=24 * GB)
    with pytest.raises(ValueError):
        paper_mixtral_input(m_expert=0)
