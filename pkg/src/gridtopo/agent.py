"""Actor-critic network in plain numpy.

One shared rectified layer (200 units) feeds two heads, each with its own
50-unit rectified layer: a softmax actor over the action catalog and a linear
critic. Gradients are computed by hand; the optimizer is RMSProp with separate
step sizes for the actor branch, the critic branch and the shared trunk.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

SHARED = ("w0", "b0")
ACTOR = ("wa1", "ba1", "wa2", "ba2")
CRITIC = ("wc1", "bc1", "wc2", "bc2")
PARAM_NAMES = SHARED + ACTOR + CRITIC


class TrainingError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    """Checkpoint was produced for a different grid or action catalog."""


@dataclass(frozen=True)
class TrainHyper:
    gamma: float = 0.95
    lr_actor: float = 5e-4
    lr_critic: float = 1e-3
    entropy_coeff: float = 0.01
    rollout: int = 0  # 0 = whole-episode Monte-Carlo returns
    clip_norm: float = 40.0
    reward_scale: float = 0.01  # keeps returns O(1) so the entropy bonus is not swamped
    rms_decay: float = 0.99
    rms_eps: float = 1e-3  # floor on the RMSProp denominator so near-zero gradients take small steps

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if self.rollout < 0:
            raise ValueError("rollout must be >= 0")


class NetworkParams:
    """Named weight arrays. ``w*`` are (fan_in, fan_out); ``b*`` are vectors."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in PARAM_NAMES}
        a = self.arrays
        if a["w0"].shape[1] != a["wa1"].shape[0] or a["w0"].shape[1] != a["wc1"].shape[0]:
            raise ValueError("shared layer width does not match the heads")
        if a["wc2"].shape[1] != 1:
            raise ValueError("critic output must be a single unit")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_in(self) -> int:
        return self.arrays["w0"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.arrays["wa2"].shape[1]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays.items()}

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, vec: np.ndarray) -> "NetworkParams":
        out, i = {}, 0
        for k in PARAM_NAMES:
            n = self.arrays[k].size
            out[k] = np.asarray(vec[i:i + n], dtype=np.float64).reshape(self.arrays[k].shape)
            i += n
        return NetworkParams(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def check_compatible(self, other: "NetworkParams") -> None:
        if self.shapes() != other.shapes():
            raise ValueError(f"shape mismatch: {self.shapes()} vs {other.shapes()}")


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_params(n_in: int, n_actions: int, seed: int = 0, hidden: int = 200, head: int = 50) -> NetworkParams:
    """Orthogonal init; small actor output so the initial policy is close to uniform."""
    rng = np.random.default_rng(seed)
    relu = np.sqrt(2.0)
    return NetworkParams({
        "w0": _orthogonal(rng, n_in, hidden, relu), "b0": np.zeros(hidden),
        "wa1": _orthogonal(rng, hidden, head, relu), "ba1": np.zeros(head),
        "wa2": _orthogonal(rng, head, n_actions, 0.01), "ba2": np.zeros(n_actions),
        "wc1": _orthogonal(rng, hidden, head, relu), "bc1": np.zeros(head),
        "wc2": _orthogonal(rng, head, 1, 1.0), "bc2": np.zeros(1),
    })


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _forward_full(params: NetworkParams, x: np.ndarray):
    p = params.arrays
    if x.shape[-1] != params.n_in:
        raise ValueError(f"observation length {x.shape[-1]} != network input {params.n_in}")
    a0 = x @ p["w0"] + p["b0"]
    h0 = np.maximum(a0, 0.0)
    aa = h0 @ p["wa1"] + p["ba1"]
    ha = np.maximum(aa, 0.0)
    z = ha @ p["wa2"] + p["ba2"]
    ac = h0 @ p["wc1"] + p["bc1"]
    hc = np.maximum(ac, 0.0)
    v = (hc @ p["wc2"] + p["bc2"])[..., 0]
    return a0, h0, aa, ha, z, ac, hc, v


def forward(params: NetworkParams, obs) -> tuple[np.ndarray, np.ndarray | float]:
    """Action probabilities and state value for one observation or a batch."""
    x = np.asarray(obs, dtype=np.float64)
    *_, z, _, _, v = _forward_full(params, x)
    probs = np.exp(_log_softmax(z))
    if x.ndim == 1:
        return probs, float(v)
    return probs, v


def logits(params: NetworkParams, obs) -> np.ndarray:
    return _forward_full(params, np.asarray(obs, dtype=np.float64))[4]


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def select_action(probs, mode: str = "argmax", rng: np.random.Generator | None = None,
                  mask: np.ndarray | None = None) -> int:
    """Greedy (first maximum wins) or sampled action index."""
    p = np.asarray(probs, dtype=np.float64)
    if mask is not None:
        p = np.where(mask, p, 0.0)
        total = p.sum()
        p = p / total if total > 0 else mask / mask.sum()
    if mode == "argmax":
        return int(np.argmax(p))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        c = np.cumsum(p)
        return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))
    raise ValueError(f"unknown mode {mode!r}")


def discounted_returns(rewards: Sequence[float], gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """Q_t = r_t + gamma * Q_{t+1}, seeded with ``bootstrap`` past the last step."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty reward sequence")
    out = np.empty_like(r)
    acc = float(bootstrap)
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Trajectory:
    """One episode's transitions.

    ``observations[i]`` is None for steps where the NoOp was taken automatically
    (below the gating threshold); those steps still contribute their reward to
    the returns of earlier decisions but are not trained on.
    """

    scenario: str = ""
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminal: bool = False
    bootstrap: float = 0.0

    def append(self, obs, action: int, reward: float) -> None:
        if not np.isfinite(reward):
            raise TrainingError(f"non-finite reward {reward}")
        self.observations.append(obs)
        self.actions.append(int(action))
        self.rewards.append(float(reward))

    def __len__(self) -> int:
        return len(self.rewards)

    def batch(self, gamma: float, reward_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(obs, action, return) rows at decision steps; ``bootstrap`` is already in scaled units."""
        r = np.asarray(self.rewards) * reward_scale
        q = discounted_returns(r, gamma, 0.0 if self.terminal else self.bootstrap)
        idx = [i for i, o in enumerate(self.observations) if o is not None]
        if not idx:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0)
        obs = np.stack([self.observations[i] for i in idx])
        return obs, np.array([self.actions[i] for i in idx], dtype=np.int64), q[idx]


def loss_terms(params: NetworkParams, obs: np.ndarray, actions: np.ndarray, returns: np.ndarray,
               entropy_coeff: float, advantage: np.ndarray | None = None) -> dict[str, float]:
    """Scalar losses. ``advantage`` defaults to Q - V and is treated as a constant."""
    x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    *_, z, _, _, v = _forward_full(params, x)
    logp = _log_softmax(z)
    probs = np.exp(logp)
    adv = returns - v if advantage is None else advantage
    h = -(probs * logp).sum(axis=1)
    chosen = logp[np.arange(len(actions)), actions]
    actor = float(-(chosen * adv).sum() - entropy_coeff * h.sum())
    critic = float(((returns - v) ** 2).sum())
    return {"actor_loss": actor, "critic_loss": critic, "entropy": float(h.mean()),
            "total": actor + critic}


def global_norm(grads: NetworkParams) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.arrays.values())))


def compute_gradients(params: NetworkParams, obs, actions, returns, entropy_coeff: float = 0.01,
                      clip_norm: float | None = 40.0) -> tuple[NetworkParams, dict[str, float]]:
    """Gradient of actor loss + critic loss with respect to every parameter.

    Actor loss is ``-sum(log pi(a|s) * A) - c * sum(H)`` with ``A = Q - V`` held
    fixed; critic loss is ``sum((Q - V)**2)``. The result is rescaled to global
    norm ``clip_norm`` when it exceeds it.
    """
    x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    a_idx = np.asarray(actions, dtype=np.int64)
    q = np.asarray(returns, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if not (len(a_idx) == len(q) == x.shape[0]):
        raise ValueError("batch columns differ in length")
    p = params.arrays
    a0, h0, aa, ha, z, ac, hc, v = _forward_full(params, x)
    logp = _log_softmax(z)
    probs = np.exp(logp)
    adv = q - v
    n = x.shape[0]
    rows = np.arange(n)
    h = -(probs * logp).sum(axis=1)

    # actor head
    dz = probs * adv[:, None]
    dz[rows, a_idx] -= adv
    dz += entropy_coeff * probs * (logp + h[:, None])
    g_wa2 = ha.T @ dz
    g_ba2 = dz.sum(0)
    dha = dz @ p["wa2"].T
    daa = dha * (aa > 0)
    g_wa1 = h0.T @ daa
    g_ba1 = daa.sum(0)

    # critic head
    dv = -2.0 * adv
    g_wc2 = hc.T @ dv[:, None]
    g_bc2 = np.array([dv.sum()])
    dhc = dv[:, None] @ p["wc2"].T
    dac = dhc * (ac > 0)
    g_wc1 = h0.T @ dac
    g_bc1 = dac.sum(0)

    # shared trunk receives both heads
    dh0 = daa @ p["wa1"].T + dac @ p["wc1"].T
    da0 = dh0 * (a0 > 0)
    g_w0 = x.T @ da0
    g_b0 = da0.sum(0)

    grads = NetworkParams({"w0": g_w0, "b0": g_b0, "wa1": g_wa1, "ba1": g_ba1, "wa2": g_wa2, "ba2": g_ba2,
                           "wc1": g_wc1, "bc1": g_bc1, "wc2": g_wc2, "bc2": g_bc2})
    actor = float(-(logp[rows, a_idx] * adv).sum() - entropy_coeff * h.sum())
    critic = float((adv ** 2).sum())
    norm = global_norm(grads)
    info = {"actor_loss": actor, "critic_loss": critic, "entropy": float(h.mean()), "grad_norm": norm,
            "clipped": False}
    if not (np.isfinite(actor) and np.isfinite(critic) and np.isfinite(norm)):
        raise TrainingError(f"non-finite loss or gradient: actor={actor} critic={critic} norm={norm}")
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        for k in PARAM_NAMES:
            grads.arrays[k] *= scale
        info["clipped"] = True
    return grads, info


@dataclass
class RMSProp:
    """Per-parameter squared-gradient accumulator."""

    decay: float = 0.99
    eps: float = 1e-3
    square: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "RMSProp":
        return RMSProp(self.decay, self.eps, {k: v.copy() for k, v in self.square.items()})


def group_rates(lr_actor: float, lr_critic: float) -> dict[str, float]:
    shared = 0.5 * (lr_actor + lr_critic)
    rates = {k: shared for k in SHARED}
    rates.update({k: lr_actor for k in ACTOR})
    rates.update({k: lr_critic for k in CRITIC})
    return rates


def apply_update(params: NetworkParams, grads: NetworkParams, opt: RMSProp, lr_actor: float,
                 lr_critic: float) -> NetworkParams:
    """One RMSProp descent step; ``opt`` is updated in place, ``params`` is not."""
    params.check_compatible(grads)
    rates = group_rates(lr_actor, lr_critic)
    out = {}
    for k in PARAM_NAMES:
        g = grads.arrays[k]
        sq = opt.square.get(k)
        if sq is None:
            sq = np.zeros_like(g)
        sq = opt.decay * sq + (1.0 - opt.decay) * g * g
        opt.square[k] = sq
        out[k] = params.arrays[k] - rates[k] * g / (np.sqrt(sq) + opt.eps)
    return NetworkParams(out)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, params: NetworkParams, *, grid_hash: str, catalog_hash: str,
                    meta: dict | None = None, opt: RMSProp | None = None) -> Path:
    """Write an ``.npz`` container holding weights plus a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "gridtopo-checkpoint", "version": CHECKPOINT_VERSION,
        "grid_hash": grid_hash, "catalog_hash": catalog_hash,
        "shapes": {k: list(v) for k, v in params.shapes().items()},
        "meta": meta or {},
    }
    payload = {f"param/{k}": v for k, v in params.arrays.items()}
    if opt is not None:
        payload.update({f"rms/{k}": v for k, v in opt.square.items()})
    payload["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    params: NetworkParams
    header: dict
    opt: RMSProp | None = None

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def load_checkpoint(path: str | Path, *, catalog_hash: str | None = None, grid_hash: str | None = None
                    ) -> Checkpoint:
    """Read a checkpoint, refusing it when the stored hashes differ from the given ones."""
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
            square = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("rms/")}
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: not a checkpoint ({exc})") from exc
    if header.get("format") != "gridtopo-checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    if header.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header['version']} is newer than supported")
    if catalog_hash is not None and header["catalog_hash"] != catalog_hash:
        raise CheckpointMismatch(
            f"{path}: action catalog hash {header['catalog_hash']} does not match {catalog_hash}")
    if grid_hash is not None and header["grid_hash"] != grid_hash:
        raise CheckpointMismatch(f"{path}: grid hash {header['grid_hash']} does not match {grid_hash}")
    params = NetworkParams(arrays)
    for k, shape in header["shapes"].items():
        if tuple(shape) != params.arrays[k].shape:
            raise ValueError(f"{path}: stored shape of {k} disagrees with header")
    return Checkpoint(params, header, RMSProp(square=square) if square else None)


def batch_from(trajectories: Iterable[Trajectory], gamma: float, reward_scale: float = 1.0):
    parts = [t.batch(gamma, reward_scale) for t in trajectories]
    parts = [p for p in parts if len(p[1])]
    if not parts:
        return None
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))
