import numpy as np

from gridtopo.agent import PARAM_NAMES, compute_gradients, forward, loss_terms
from gridtopo.chronics import from_actuals
from gridtopo.grid_model import make_grid
from gridtopo.power_flow import Injections


def two_bus_grid(i_max: float = 1.0):
    """Generator at substation 0 feeding one load at substation 1 over two parallel lines."""
    lines = [(0, 1, 0.01, 0.1, 0.0, i_max), (0, 1, 0.01, 0.1, 0.0, i_max)]
    return make_grid(2, lines, gen_subs=[0], load_subs=[1])


def constant_chronics(grid, load_p, T: int, v: float = 1.0, name: str = "const"):
    """Loads held at ``load_p`` (sequence per step or scalar) with the slack covering all of it."""
    lp = np.broadcast_to(np.asarray(load_p, dtype=float).reshape(-1, 1), (T, grid.n_load)).copy()
    lq = 0.0 * lp
    gp = np.zeros((T, grid.n_gen))
    gv = np.full((T, grid.n_gen), v)
    return from_actuals(lp, lq, gp, gv, name=name)


def gradient_check(params, obs, actions, returns, entropy_coeff, coords, eps=1e-6):
    """Relative error between analytic gradients and central differences at ``coords`` of the flat vector.

    The advantage is frozen at its unperturbed value, matching how the
    analytic gradient treats it.
    """
    _, v = forward(params, obs)
    adv = returns - v
    grads, _ = compute_gradients(params, obs, actions, returns, entropy_coeff, clip_norm=None)
    analytic = grads.flat()[coords]
    base = params.flat()
    numeric = np.empty(len(coords))
    for j, c in enumerate(coords):
        up, down = base.copy(), base.copy()
        up[c] += eps
        down[c] -= eps
        lu = loss_terms(params.with_flat(up), obs, actions, returns, entropy_coeff, advantage=adv)["total"]
        ld = loss_terms(params.with_flat(down), obs, actions, returns, entropy_coeff, advantage=adv)["total"]
        numeric[j] = (lu - ld) / (2 * eps)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


def sample_coords(params, rng, per_group=20):
    """Random flat indices covering every parameter array."""
    out, offset = [], 0
    for k in PARAM_NAMES:
        n = params.arrays[k].size
        out.extend((offset + rng.choice(n, size=min(per_group, n), replace=False)).tolist())
        offset += n
    return np.array(out)


def random_batch(params, rng, n=8):
    obs = rng.uniform(-1, 1, (n, params.n_in))
    actions = rng.integers(0, params.n_actions, n)
    returns = rng.normal(0, 2, n)
    return obs, actions, returns


def gauss_seidel(grid, graph, inj, tol=1e-13, max_iter=20000):
    """Plain Gauss-Seidel on the nodal graph, written without any package helpers."""
    n = graph.n_nodes
    Y = np.zeros((n, n), dtype=complex)
    for e, ln_id in enumerate(graph.edge_line):
        ln = grid.lines[ln_id]
        i, j = graph.edge_from[e], graph.edge_to[e]
        y = 1 / complex(ln.r, ln.x)
        Y[i, i] += y + 1j * ln.b / 2
        Y[j, j] += y + 1j * ln.b / 2
        Y[i, j] -= y
        Y[j, i] -= y
    S = np.zeros(n, dtype=complex)
    for g, node in enumerate(graph.gen_node):
        S[node] += inj.gen_p[g]
    for d, node in enumerate(graph.load_node):
        S[node] -= complex(inj.load_p[d], inj.load_q[d])
    slack = graph.slack_node
    vset = {}
    for g, node in enumerate(graph.gen_node):
        vset.setdefault(int(node), float(inj.gen_v[g]))
    vset[slack] = float(inj.gen_v[grid.slack_gen])
    V = np.ones(n, dtype=complex)
    for node, v in vset.items():
        V[node] = v
    for _ in range(max_iter):
        delta = 0.0
        for i in range(n):
            if i == slack:
                continue
            if i in vset:
                q = -np.imag(np.conj(V[i]) * (Y[i] @ V))
                s = complex(S[i].real, q)
            else:
                s = S[i]
            new = (np.conj(s / V[i]) - (Y[i] @ V - Y[i, i] * V[i])) / Y[i, i]
            if i in vset:
                new = vset[i] * new / abs(new)
            delta = max(delta, abs(new - V[i]))
            V[i] = new
        if delta < tol:
            return V
    raise AssertionError("oracle did not converge")


def random_injections(grid, base, rng):
    load_p = base.load_p * rng.uniform(0.6, 1.15, grid.n_load)
    load_q = base.load_q * rng.uniform(0.6, 1.15, grid.n_load)
    share = rng.uniform(0.2, 1.0, grid.n_gen) * grid.p_max_pu
    gen_p = share / share.sum() * load_p.sum() * 1.02
    gen_v = base.gen_v + rng.uniform(-0.02, 0.02, grid.n_gen)
    return Injections(load_p, load_q, gen_p, gen_v)


def unequal_pair(i_max1: float = 1.0):
    # line 0 carries two thirds of the flow, line 1 one third
    lines = [(0, 1, 0.01, 0.1, 0.0, 1.0), (0, 1, 0.01, 0.2, 0.0, i_max1)]
    return make_grid(2, lines, gen_subs=[0], load_subs=[1])


def load_series(values):
    lp = np.asarray(values, dtype=float).reshape(-1, 1)
    return from_actuals(lp, 0 * lp, 0 * lp, np.ones_like(lp), name="crafted")


def run_noop(env, ch, level):
    """Step a scenario with NoOp until it ends; returns every StepResult."""
    state, _ = env.reset(ch, level)
    out = []
    while not state.terminal:
        res = env.step(state, 0)
        state = res.state
        out.append(res)
    return out
