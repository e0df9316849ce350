"""Shared fixtures: the aircraft benchmark pipeline and a small scalar plant."""

import numpy as np
import pytest

from ddspc.behavioral import build_hankel_stack
from ddspc.lti import ArxModel, Excitation, aircraft_model, collect_data
from ddspc.ocp import OcpConfig
from ddspc.pce import GermFamily, build_joint_basis, gaussian_initial_basis
from ddspc.terminal import identify_arx, synthesize

AIRCRAFT_SEED = 2024
AIRCRAFT_PE_ORDER = 4 + 10 + 2


@pytest.fixture(scope="session")
def aircraft():
    return aircraft_model()


@pytest.fixture(scope="session")
def aircraft_archive(aircraft):
    return collect_data(
        aircraft, 90, Excitation.stabilized(aircraft), seed=AIRCRAFT_SEED,
        pe_order=AIRCRAFT_PE_ORDER,
    )


@pytest.fixture(scope="session")
def aircraft_stack(aircraft_archive):
    return build_hankel_stack(aircraft_archive, horizon=10)


@pytest.fixture(scope="session")
def aircraft_terminal(aircraft, aircraft_archive):
    phi_hat, d_hat = identify_arx(aircraft_archive)
    return synthesize(
        phi_hat,
        d_hat,
        t_ini=2,
        q=np.eye(3),
        r=np.eye(1),
        sigma_w=aircraft.disturbance_cov,
        y_bounds=[(-1.0, 1.0), None, None],
        sigma_tighten_y=np.sqrt((2 - 0.1) / 0.1),
        seed=7,
    )


@pytest.fixture(scope="session")
def aircraft_config(aircraft, aircraft_terminal):
    l_ini, init_fams = gaussian_initial_basis(8)
    basis = build_joint_basis(l_ini, aircraft.disturbance_families, 10, init_fams)
    return OcpConfig(
        horizon=10,
        q=np.eye(3),
        r=np.eye(1),
        basis=basis,
        terminal=aircraft_terminal,
        y_bounds=((-1.0, 1.0), None, None),
        eps_y=0.1,
        pe_order=AIRCRAFT_PE_ORDER,
    )


def make_small_plant():
    """Scalar ARX with one-step memory: n_z = 2, mild dynamics."""
    return ArxModel(
        phi=np.array([[0.4, 0.5]]),
        d=np.array([[0.3]]),
        t_ini=1,
        disturbance_families=(GermFamily.uniform(-0.3, 0.3),),
    )


@pytest.fixture(scope="session")
def small_plant():
    return make_small_plant()


@pytest.fixture(scope="session")
def small_setup(small_plant):
    """Plant, archive, stack, terminal ingredients, and config (N = 4)."""
    horizon = 4
    archive = collect_data(small_plant, 60, Excitation(), seed=11, pe_order=2 + horizon + 1)
    stack = build_hankel_stack(archive, horizon)
    phi_hat, d_hat = identify_arx(archive)
    terminal = synthesize(
        phi_hat,
        d_hat,
        t_ini=1,
        q=np.eye(1),
        r=np.eye(1),
        sigma_w=small_plant.disturbance_cov,
        y_bounds=[(-5.0, 5.0)],
        sigma_tighten_y=np.sqrt((2 - 0.1) / 0.1),
        seed=3,
    )
    l_ini, init_fams = gaussian_initial_basis(2)
    basis = build_joint_basis(l_ini, small_plant.disturbance_families, horizon, init_fams)
    config = OcpConfig(
        horizon=horizon,
        q=np.eye(1),
        r=np.eye(1),
        basis=basis,
        terminal=terminal,
        y_bounds=((-5.0, 5.0),),
        eps_y=0.1,
        pe_order=2 + horizon + 1,
    )
    return small_plant, archive, stack, config
