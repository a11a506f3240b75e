import numpy as np
import pytest

from voxmap.volume import Volume

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def make_analytic_volume(fn, dims, origin=(0.0, 0.0, 0.0),
                         spacing=(1.0, 1.0, 1.0), **kwargs) -> Volume:
    """Sample a scalar function of physical (x, y, z) onto a grid."""
    nx, ny, nz = dims
    xs = origin[0] + spacing[0] * np.arange(nx)
    ys = origin[1] + spacing[1] * np.arange(ny)
    zs = origin[2] + spacing[2] * np.arange(nz)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    vals = np.asarray(fn(X, Y, Z), dtype=np.float32)
    return Volume(vals, spacing, origin, **kwargs)


def bumpy(x, y, z):
    """Smooth nonlinear scalar field with structure everywhere."""
    return (np.sin(0.55 * x) * np.cos(0.43 * y)
            + 0.5 * np.sin(0.31 * z + 0.2 * x)
            + 0.25 * np.cos(0.17 * x * 0.5 + 0.37 * y - 0.23 * z))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    """Canonical 64-cubed phantom: image, masks, truth."""
    from voxmap.phantom import PhantomSpec, generate_phantom

    spec = PhantomSpec(dims=(64, 64, 64))
    image, masks, truth = generate_phantom(spec)
    return spec, image, masks, truth
