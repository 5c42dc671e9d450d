import numpy as np
import pytest

from sgct.random_field import CovarianceSpec, KLExpansion, compute_kl


def pad_with_null_terms(kl: KLExpansion, extra: int) -> KLExpansion:
    """Append ``extra`` KL terms with zero eigenvalue: the field ignores those parameters."""
    rng = np.random.default_rng(0)
    modes = np.column_stack([kl.modes, rng.normal(size=(kl.modes.shape[0], extra))])
    lam = np.r_[kl.eigenvalues, np.zeros(extra)]
    return KLExpansion(kl.n_side, lam, modes, kl.mean_field, kl.spec)


@pytest.fixture(scope="session")
def toy_kl():
    """Small smooth expansion: 17^2 KL grid, 6 terms."""
    return compute_kl(CovarianceSpec(nu=2.5, xi=0.4, sigma2=2.0), 17, 6, mean=3.0)


@pytest.fixture(scope="session")
def one_term_kl(toy_kl):
    """One active KL term followed by two null terms (so three or more coordinates can be refined)."""
    single = KLExpansion(toy_kl.n_side, toy_kl.eigenvalues[:1], toy_kl.modes[:, :1], toy_kl.mean_field, toy_kl.spec)
    return pad_with_null_terms(single, 2)


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
