import numpy as np
import pytest

from lago.model import TrialDataset

_ACCEPTANCE_LINES: list[str] = []


def make_dataset(beta_A, gamma, eta=(), *, n_per_cell=8, noise=0.0, seed=0, control_share=0.25):
    """Random full-rank trial data from the fixed-effects model.

    Every centre appears in every stage; interventions vary within each cell.
    """
    rng = np.random.default_rng(seed)
    beta_A = np.asarray(beta_A, float)
    gamma = np.asarray(gamma, float)
    eta = np.r_[0.0, np.asarray(eta, float)]
    P, J, K = beta_A.size, gamma.size, eta.size
    stage, centre, arm, A = [], [], [], []
    for k in range(1, K + 1):
        for j in range(1, J + 1):
            for _ in range(n_per_cell):
                treated = rng.random() >= control_share
                stage.append(k)
                centre.append(j)
                arm.append(int(treated))
                A.append(rng.uniform(0, 3, P) if treated else np.zeros(P))
    stage, centre, A = np.array(stage), np.array(centre), np.array(A)
    y = A @ beta_A + gamma[centre - 1] + eta[stage - 1] + noise * rng.standard_normal(len(stage))
    return TrialDataset(stage, centre, np.array(arm), A, y, K=K, J=J, P=P)


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
