"""Shared builders for the test suite."""

import pytest

from moesim.config import HardwareSpec, ModelSpec, Policy, PolicySpec, ProfiledTimings


def mixtral_model(**overrides) -> ModelSpec:
    kw = dict(
        name="mixtral-like",
        num_layers=32,
        experts_per_layer=8,
        topk_activated=2,
        shared_experts=0,
        expert_size=336_000_000,
        draft_layers=32,
        draft_topk=0,
    )
    kw.update(overrides)
    return ModelSpec(**kw)


def deepseek_model(**overrides) -> ModelSpec:
    kw = dict(
        name="deepseek-like",
        num_layers=27,
        experts_per_layer=64,
        topk_activated=6,
        shared_experts=2,
        expert_size=16_500_000,
        draft_layers=27,
        draft_topk=6,
    )
    kw.update(overrides)
    return ModelSpec(**kw)


def small_model(**overrides) -> ModelSpec:
    """Tiny model for fast simulation unit tests."""
    kw = dict(
        name="tiny",
        num_layers=4,
        experts_per_layer=8,
        topk_activated=2,
        shared_experts=0,
        expert_size=1_000_000,
        draft_layers=4,
        draft_topk=0,
    )
    kw.update(overrides)
    return ModelSpec(**kw)


def desk_hardware(**overrides) -> HardwareSpec:
    kw = dict(
        name="desk",
        gpu_memory=24_000_000_000,
        peak_non_expert_memory=8_000_000_000,
        pcie_bandwidth=32e9,
        io_launch_overhead=0.0,
    )
    kw.update(overrides)
    return HardwareSpec(**kw)


def desk_timings(**overrides) -> ProfiledTimings:
    kw = dict(
        t_comp_target=0.003,
        t_comp_draft=0.005,
        t_io_expert=0.0105,
        t_predict=0.0002,
    )
    kw.update(overrides)
    return ProfiledTimings(**kw)


def desk_policy(**overrides) -> PolicySpec:
    kw = dict(
        policy=Policy.DRAFT_PREFETCH,
        prefetch_k=1,
        draft_length=2,
        acceptance_rate=0.97,
        seed=1234,
        fidelity=1.0,
    )
    kw.update(overrides)
    return PolicySpec(**kw)


@pytest.fixture
def mixtral():
    return mixtral_model()


@pytest.fixture
def tiny():
    return small_model()
