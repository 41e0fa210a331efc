"""Small smooth instances of the DeepRED objective for finite-difference checks.

Central differences are only meaningful where the function is smooth on the
scale of the step.  ReLU and max-pool kinks break that, so the toy networks
are moved to a point where every ReLU input sits well inside its active side
(BN shifts near +2), and among a fixed list of seeds the one with the largest
kink margin is used.  The selection never looks at gradient errors.
"""

import numpy as np

from petrecon.autodiff import LinearOperator, Tape, Tensor, backward
from petrecon.geometry import ImageGrid, ScanGeometry, get_projector
from petrecon.networks import NetworkSpec, build_denoiser, build_generator
from petrecon.reconstruct import build_deepred_objective, network_input
from petrecon.simulation import make_phantom, simulate_scan

TOY_GRID = ImageGrid(8, 8)
TOY_GEOM = ScanGeometry.parallel(TOY_GRID, 12, 8)


def kink_margin(loss) -> float:
    """Smallest |ReLU input| and smallest top-two gap over live max-pool windows."""
    m = np.inf
    for node in Tape.from_loss(loss).nodes:
        if node.op == "relu":
            m = min(m, float(np.abs(node.parents[0].data).min()))
        elif node.op == "max_pool2":
            x = node.parents[0].data
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            win = np.sort(win, axis=1)
            live = win[:, 3] > 0
            if live.any():
                m = min(m, float((win[live, 3] - win[live, 2]).min()))
    return m


def pre_bn_biases(*paramsets) -> set:
    """Conv biases followed by BN: their gradient is identically zero."""
    return {n[:-len(".bn.gamma")] + ".bias"
            for ps in paramsets for n in ps.names() if n.endswith(".bn.gamma")}


def _active_point(g_ps, d_ps, seed):
    rng = np.random.default_rng(100 + seed)
    for p in list(g_ps) + list(d_ps):
        if p.role == "bn_beta":
            p.data = 2.0 + 0.3 * rng.standard_normal(p.shape)
        elif p.role == "bias":
            p.data = 0.3 * rng.standard_normal(p.shape)
    d_ps["layer1.bias"].data = 2.0 + 0.3 * rng.standard_normal(d_ps["layer1.bias"].shape)


def smooth_toy_objective(lam=2.0, output_scale=1.5, seeds=range(10)):
    """Returns ``(loss_fn, params, zero_params, margin, seed)``."""
    bundle = simulate_scan(make_phantom("brain", TOY_GRID), TOY_GEOM, 1e4, seed=2)
    proj = get_projector(TOY_GRID, TOY_GEOM)
    op = LinearOperator.from_projector(proj)
    z = Tensor(network_input(proj, bundle.y.values))
    best = None
    for s in seeds:
        g_ps, g_fwd = build_generator(NetworkSpec.generator(2, 1), s)
        d_ps, d_fwd = build_denoiser(NetworkSpec.denoiser(3, 3), s + 1)
        _active_point(g_ps, d_ps, s)

        def loss(g_fwd=g_fwd, d_fwd=d_fwd):
            return build_deepred_objective(bundle, op, g_fwd, d_fwd, lam, z, output_scale).total

        m = kink_margin(loss())
        if best is None or m > best[0]:
            best = (m, s, g_ps, d_ps, loss)
    m, s, g_ps, d_ps, loss = best
    zero = pre_bn_biases(g_ps, d_ps)
    params = [p for p in list(g_ps) + list(d_ps) if p.name not in zero]
    zero_params = [p for p in list(g_ps) + list(d_ps) if p.name in zero]
    return loss, params, zero_params, m, s


def zero_gradient_check(loss, zero_params, step=1e-3) -> float:
    """Largest |gradient| (analytic or central difference) over structurally-zero
    parameters, relative to the largest analytic gradient of the loss."""
    every = backward(loss())
    scale = max(float(np.abs(g).max()) for g in every.values())
    worst = 0.0
    for p in zero_params:
        worst = max(worst, float(np.abs(every[p.name]).max()))
        flat = p.data.ravel()
        for i in range(p.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss().item()
            flat[i] = orig - step
            fm = loss().item()
            flat[i] = orig
            worst = max(worst, abs(fp - fm) / (2 * step))
    return worst / scale
