import numpy as np
import pytest

from dscreg.geom import Correspondences, RigidTransform, axis_angle, random_pose


def rz(deg: float) -> np.ndarray:
    return axis_angle(np.array([0.0, 0.0, 1.0]), np.radians(deg))


def inlier_scene(rng, n=20, noise=0.0, pose=None):
    """Noiseless (or lightly noisy) all-inlier correspondences under a random pose."""
    pose = random_pose(rng) if pose is None else pose
    src = rng.uniform(-1.5, 1.5, size=(n, 3))
    dst = src @ pose.rotation.T + pose.translation + noise * rng.standard_normal((n, 3))
    return Correspondences(src, dst, labels=np.ones(n, dtype=bool)), pose


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def identity():
    return RigidTransform.identity()


def gradient_mismatches(net, corrs, labels, sigma_d=0.1, lam=1.0, step=1e-5, rtol=1e-4, atol=1e-8):
    """Compare analytic gradients with central differences; return offending entries."""
    from dscreg.embed import backward, scene_loss

    grads = backward(net, corrs, labels, sigma_d, lam)
    bad = []
    for name, p in net.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = scene_loss(net, corrs, labels, sigma_d, lam)
            p[idx] = old - step
            lm = scene_loss(net, corrs, labels, sigma_d, lam)
            p[idx] = old
            fd = (lp - lm) / (2 * step)
            an = float(grads[name][idx])
            if abs(an - fd) > max(rtol * max(abs(an), abs(fd)), atol):
                bad.append((name, idx, an, fd))
    return bad


def jittered_net(cfg, seed, scale=0.3):
    """Freshly initialized network with every parameter perturbed (avoids symmetric inits)."""
    from dscreg.embed import EmbeddingNetwork

    net = EmbeddingNetwork.init(cfg, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 7919))
    for k, v in net.params.items():
        net.params[k] = np.array(v + rng.normal(0.0, scale, np.shape(v)))
    return net


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
