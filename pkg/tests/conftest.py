import numpy as np
import pytest


def random_tri(rng, n=None, diag_range=(0.5, 2.0)):
    """Packed lower-triangular factors with diagonals of random sign, well away from zero."""
    shape = () if n is None else (n,)
    l = rng.normal(0.0, 0.5, shape + (6,))
    mag = rng.uniform(*diag_range, shape + (3,)) * rng.choice([-1.0, 1.0], shape + (3,))
    l[..., [0, 2, 5]] = mag
    return l


def dense_lower(l):
    m = np.zeros((3, 3))
    k = 0
    for i in range(3):
        for j in range(i + 1):
            m[i, j] = l[k]
            k += 1
    return m


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_encoder(rng, n_gaussians=4, n_volumes=5, spread=1.0):
    from gpe.encoder import GaussianEncoder
    return GaussianEncoder(rng.uniform(-spread, spread, (n_gaussians, 3)), random_tri(rng, n_gaussians),
                           rng.normal(size=(n_gaussians, n_volumes)), rng.normal(size=n_volumes))


def randomize_biases(mlp, rng, scale=0.1):
    for layer in mlp.layers:
        layer.bias[:] = rng.normal(0.0, scale, layer.bias.shape)
    return mlp


def random_classifier(rng, n_gaussians=4, n_volumes=6, n_classes=3, tnet=True, tnet_volumes=5, hidden=(7,)):
    from gpe.encoder import GPEClassifier, TNet
    from gpe.mlp import MLP
    t = None
    if tnet:
        reg = MLP.create((tnet_volumes, 4, 9), rng)
        # small but nonzero so the transform stays invertible
        reg.layers[-1].weight *= 0.05
        t = TNet(random_encoder(rng, n_gaussians, tnet_volumes), reg)
    if t is not None:
        randomize_biases(t.regressor, rng, 0.01)
    head = randomize_biases(MLP.create((n_volumes,) + tuple(hidden) + (n_classes,), rng), rng)
    return GPEClassifier(random_encoder(rng, n_gaussians, n_volumes), t, head)


FD_STEP = 1e-6
FD_FLOOR = 1e-3  # below this magnitude entries are compared to 1e-8 absolute


def fd_max_rel_error(loss_fn, params, grads, step=FD_STEP, floor=FD_FLOOR):
    """Worst relative error between ``grads`` and central differences of ``loss_fn``.

    ``params`` maps names to arrays that ``loss_fn`` reads; they are perturbed
    in place and restored.
    """
    worst, where = 0.0, None
    for name, arr in params.items():
        g = grads[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = loss_fn()
            flat[i] = old - step
            down = loss_fn()
            flat[i] = old
            num = (up - down) / (2 * step)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            if err > worst:
                worst, where = err, (name, i, gflat[i], num)
    loss_fn()
    return worst, where


def random_fd_classifier(rng, tnet=None):
    """Small classifier within the gradient-check size limits (N_G<=8, K<=16)."""
    if tnet is None:
        tnet = bool(rng.integers(2))
    g = int(rng.integers(1, 9))
    k = int(rng.integers(2, 17))
    clf = random_classifier(rng, n_gaussians=g, n_volumes=k, n_classes=int(rng.integers(2, 5)), tnet=tnet,
                            tnet_volumes=int(rng.integers(2, 17)), hidden=(int(rng.integers(3, 9)),))
    # keep Gaussians broad enough that likelihoods are not all underflowing
    for enc in clf.encoders().values():
        enc.chol *= 0.7
        enc.refresh()
    return clf


def monte_carlo_fisher(mean, chol, n, rng):
    """Mean outer product of the score of N(mu, (L L^T)^-1) in (mu, packed L) coordinates."""
    from gpe.linalg import TRI_COLS, TRI_ROWS, chol_to_precision, precision_to_covariance
    prec = chol_to_precision(chol)
    cov = precision_to_covariance(chol)
    lower = dense_lower(chol)
    x = rng.multivariate_normal(mean, cov, size=n)
    d = x - mean
    scores = np.empty((n, 9))
    scores[:, :3] = d @ prec
    for s, (a, b) in enumerate(zip(TRI_ROWS, TRI_COLS)):
        e = np.zeros((3, 3))
        e[a, b] = 1.0
        dp = e @ lower.T + lower @ e.T
        # d/dl log N = 0.5 tr(S dP) - 0.5 d^T dP d
        scores[:, 3 + s] = 0.5 * np.trace(cov @ dp) - 0.5 * np.einsum("ni,ij,nj->n", d, dp, d)
    return scores.T @ scores / n
