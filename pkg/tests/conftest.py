import numpy as np
import pytest

from codamlm.basis import build_basis, default_sbp
from codamlm.data import between_within_split
from codamlm.model import ModelSpec, SamplerConfig, build_design, default_priors, fit
from codamlm.simulate import DGPParams, generate


@pytest.fixture(scope="session")
def dgp3() -> DGPParams:
    return DGPParams(
        mu_between=[0.06, -0.56],
        cov_between=[[0.36, 0.02], [0.02, 0.36]],
        mu_within=[0.0, 0.0],
        cov_within=[[0.09, 0.01], [0.01, 0.09]],
        gamma0=2.0,
        beta_between=[-0.3, 0.2],
        beta_within=[-0.4, 0.28],
        sigma_u=1.0,
        sigma_eps=1.0,
        total=1440.0,
        part_names=("sleep", "pa", "sb"),
    )


@pytest.fixture(scope="session")
def fitted(dgp3):
    """One medium fit shared by tests that only read from it."""
    table, truth = generate(dgp3, 40, 5, seed=2024)
    basis = build_basis(default_sbp(3, dgp3.part_names))
    coords = between_within_split(table, basis)
    spec = ModelSpec(outcome="y", n_parts=3, basis=basis)
    design = build_design(coords, table, spec)
    priors = default_priors(table.outcome)
    cfg = SamplerConfig(chains=2, warmup=400, iterations=400, seed=77)
    draws = fit(spec, design, priors, cfg)
    return {
        "params": dgp3,
        "table": table,
        "truth": truth,
        "basis": basis,
        "coords": coords,
        "spec": spec,
        "design": design,
        "priors": priors,
        "draws": draws,
    }


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
