"""Sampling plans, DDIM stepping, history guidance, windowed rollout and decoding.

A plan assigns every (token-step, agent) position one of three roles:

* ``GENERATE`` tokens start from noise and step from tau=1 to tau=0 over
  ``steps`` iterations beginning at their start iteration;
* ``CLAMP`` tokens are copied from the conditioning input; they are visible
  (tau=0) from their reveal iteration on and fully noised before it;
* ``HIDDEN`` tokens stay at tau=1 for the whole run and are returned as zeros.

Every strategy reduces to a choice of roles and start iterations. All strategy
indices (history length, keyframes) count token-steps, not frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import MotionSequence, derive_transforms
from .dfot import DFoT, TokenCodec, TokenSequence, alpha_bar
from .errors import (DegenerateLevel, InvalidMode, InvalidStrategyParams, InvalidWindow, MissingConditioning,
                     ParseError, PlanModelMismatch, ShapeMismatch)
from .geometry import RigidTransform, rot6d_to_matrix
from .vqvae import VQVAE

GENERATE, CLAMP, HIDDEN = 0, 1, 2
STRATEGIES = ("inpaint", "predict", "joint", "agentic-sync", "agentic-async", "inbetween", "control")
GUIDANCE_MODES = ("none", "hg", "shg", "phg")
DEFAULT_STEPS = 30


# ---------------------------------------------------------------------------
# plans

@dataclass
class SamplingPlan:
    strategy: str
    role: np.ndarray            # (T', P) int
    start: np.ndarray           # (T', P) int, first denoising iteration of GENERATE tokens
    reveal: np.ndarray          # (T', P) int, iteration from which CLAMP tokens are visible
    steps: int = DEFAULT_STEPS
    params: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.role.shape[0]

    @property
    def n_agents(self):
        return self.role.shape[1]

    @property
    def clamp(self):
        return self.role == CLAMP

    @property
    def n_iterations(self):
        gen = self.role == GENERATE
        last = (self.start[gen] + self.steps).max() if gen.any() else 0
        return int(last)

    def levels(self, k):
        """Noise level of every token at the start of iteration ``k``, (T', P)."""
        gen = 1.0 - np.clip(k - self.start, 0, self.steps) / self.steps
        clamp = np.where(k >= self.reveal, 0.0, 1.0)
        return np.select([self.role == GENERATE, self.role == CLAMP], [gen, clamp], 1.0)

    def schedule(self):
        """Full level matrix (n_iterations + 1, T', P)."""
        return np.stack([self.levels(k) for k in range(self.n_iterations + 1)])


def _check(cond, msg):
    if not cond:
        raise InvalidStrategyParams(msg)


def _agent(p, P, name):
    _check(isinstance(p, (int, np.integer)) and 0 <= p < P, f"{name}={p} is not an agent index below {P}")
    return int(p)


def make_plan(strategy, P, Tp, *, history=0, target=1, offset=1.0, keyframes=(), controller=0,
              order=None, steps=DEFAULT_STEPS) -> SamplingPlan:
    """Build the plan for ``strategy`` over ``Tp`` token-steps and ``P`` agents.

    ``history`` clamps the first token-steps of every agent. ``target`` names the
    generated agent for inpaint/predict; ``offset`` is the turn-taking fraction for
    agentic-async; ``order`` is the agent order within an async step.
    """
    _check(strategy in STRATEGIES, f"unknown strategy {strategy!r}")
    _check(P >= 1 and Tp >= 1, "plan needs at least one agent and one token-step")
    _check(isinstance(steps, (int, np.integer)) and steps >= 1, "steps must be a positive integer")
    _check(0 <= history <= Tp, f"history={history} outside [0, {Tp}]")
    role = np.full((Tp, P), GENERATE, dtype=int)
    start = np.zeros((Tp, P), dtype=int)
    reveal = np.zeros((Tp, P), dtype=int)
    params = {}
    future = np.arange(Tp) >= history

    if strategy == "inpaint":
        target = _agent(target, P, "target")
        role[:] = CLAMP
        role[:, target] = GENERATE
        params = {"target": target}
    elif strategy == "predict":
        target = _agent(target, P, "target")
        _check(history < Tp, "predict needs at least one future token-step")
        role[~future] = CLAMP
        role[future] = HIDDEN
        role[future, target] = GENERATE
        params = {"history": history, "target": target}
    elif strategy == "joint":
        role[~future] = CLAMP
        params = {"history": history}
    elif strategy in ("agentic-sync", "agentic-async"):
        if strategy == "agentic-sync":
            offset = 0.0
        _check(0.0 <= offset <= 1.0, f"offset={offset} outside [0, 1]")
        order = list(range(P)) if order is None else [_agent(a, P, "order") for a in order]
        _check(sorted(order) == list(range(P)), f"order {order} is not a permutation of the agents")
        lag = int(round(offset * steps))
        per_step = steps + (P - 1) * lag
        role[~future] = CLAMP
        for i in np.flatnonzero(future):
            for k, a in enumerate(order):
                start[i, a] = (i - history) * per_step + k * lag
        params = {"history": history, "offset": float(offset)}
        if strategy == "agentic-async":
            params["order"] = ",".join(map(str, order))
    elif strategy == "inbetween":
        keys = sorted({int(k) for k in keyframes})
        _check(len(keys) > 0, "inbetween needs at least one keyframe")
        _check(all(0 <= k < Tp for k in keys), f"keyframes {keys} outside [0, {Tp})")
        role[keys] = CLAMP
        params = {"keyframes": ",".join(map(str, keys))}
    elif strategy == "control":
        controller = _agent(controller, P, "controller")
        _check(P >= 2, "control needs a controlled agent")
        _check(history < Tp, "control needs at least one future token-step")
        role[~future] = CLAMP
        role[:, controller] = CLAMP
        for i in np.flatnonzero(future):
            start[i] = (i - history) * steps
            reveal[i, controller] = (i - history) * steps
        params = {"history": history, "controller": controller}
    return SamplingPlan(strategy, role, start, reveal, steps, params)


def plan_dumps(plan: SamplingPlan) -> str:
    lines = [f"strategy {plan.strategy}", f"steps {plan.steps}", f"shape {plan.n_steps} {plan.n_agents}"]
    lines += [f"param {k}={v}" for k, v in plan.params.items()]
    for name in ("role", "start", "reveal"):
        for row in getattr(plan, name):
            lines.append(f"{name} " + " ".join(map(str, row)))
    for k, lv in enumerate(plan.schedule()):
        lines.append(f"schedule {k} " + " ".join(repr(float(v)) for v in lv.ravel()))
    return "\n".join(lines) + "\n"


def plan_loads(text: str) -> SamplingPlan:
    head, rows, params = {}, {"role": [], "start": [], "reveal": []}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        key, _, rest = line.partition(" ")
        try:
            if key in ("strategy", "steps"):
                head[key] = rest
            elif key == "shape":
                head["shape"] = tuple(int(v) for v in rest.split())
            elif key == "param":
                k, _, v = rest.partition("=")
                params[k] = v
            elif key in rows:
                rows[key].append([int(v) for v in rest.split()])
            elif key != "schedule" and line.strip():
                raise ParseError(f"unknown plan line {key!r}", lineno, key)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, key) from exc
    if "shape" not in head or "strategy" not in head:
        raise ParseError("plan text lacks strategy or shape")
    arrays = {k: np.asarray(v, dtype=int).reshape(head["shape"]) for k, v in rows.items()}
    return SamplingPlan(head["strategy"], arrays["role"], arrays["start"], arrays["reveal"],
                        int(head.get("steps", DEFAULT_STEPS)), params)


# ---------------------------------------------------------------------------
# DDIM

def ddim_step(m_cur, m0_hat, tau_cur, tau_next):
    """Deterministic x0-parameterized step from ``tau_cur`` to ``tau_next``.

    Levels broadcast against the token axis. At ``tau_next == 0`` the result is
    ``m0_hat`` bit for bit.
    """
    tau_cur = np.asarray(tau_cur, dtype=float)
    tau_next = np.asarray(tau_next, dtype=float)
    if np.any(tau_cur <= 0):
        raise DegenerateLevel("cannot step a token that is already at tau = 0")
    if np.any(tau_next >= tau_cur) or np.any(tau_next < 0) or np.any(tau_cur > 1):
        raise DegenerateLevel("ddim_step needs 0 <= tau_next < tau_cur <= 1")
    ab_cur = alpha_bar(tau_cur)[..., None]
    ab_next = np.where(tau_next == 0, 1.0, alpha_bar(tau_next))[..., None]
    eps_hat = (m_cur - np.sqrt(ab_cur) * m0_hat) / np.sqrt(1.0 - ab_cur)
    out = np.sqrt(ab_next) * m0_hat + np.sqrt(1.0 - ab_next) * eps_hat
    return np.where(tau_next[..., None] == 0, m0_hat, out)


# ---------------------------------------------------------------------------
# guidance

@dataclass(frozen=True)
class GuidanceSpec:
    mode: str = "none"
    w: float = 1.0

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise InvalidMode(f"unknown guidance mode {self.mode!r}")
        if not math.isfinite(self.w):
            raise InvalidMode("guidance weight must be finite")


def build_guidance_contexts(plan: SamplingPlan, mode, present=None):
    """History-keep masks (T', P) for every branch of ``mode``.

    Returns a dict with ``cond`` and ``uncond`` masks plus a list under ``self``
    (SHG: one agent's history each) or ``partner`` (PHG: all but one agent).
    Excluded histories are re-noised to tau = 1 by the sampler.
    """
    if mode not in ("hg", "shg", "phg"):
        raise InvalidMode(f"guidance contexts need mode hg, shg or phg, got {mode!r}")
    hist = plan.role == CLAMP
    agents = range(plan.n_agents) if present is None else np.flatnonzero(present)
    out = {"cond": hist, "uncond": np.zeros_like(hist)}
    if mode == "shg":
        out["self"] = [hist & (np.arange(plan.n_agents) == n) for n in agents]
    elif mode == "phg":
        out["partner"] = [hist & (np.arange(plan.n_agents) != n) for n in agents]
    return out


# ---------------------------------------------------------------------------
# sampling

def structural_template(layout, present, n_steps):
    """Structural channel values and mask for a sequence with agent presence ``present``."""
    P = len(present)
    tmpl = np.zeros((n_steps, P, layout.width))
    if layout.use_partner:
        for p in range(P):
            for q in range(P):
                if q != p and present[p] and present[q]:
                    tmpl[:, p, layout.presence.start + q - (q > p)] = 1.0
    bits = tmpl[..., layout.presence] > 0.5
    return tmpl, layout.structural_mask(bits)


def _forward(model: DFoT, x, tau, present):
    Tp, P, D = x.shape
    dtype = next(model.parameters()).dtype
    time = torch.arange(Tp).repeat_interleave(P)[None]
    agent = torch.arange(P).repeat(Tp)[None]
    valid = torch.as_tensor(np.tile(present, Tp))[None]
    with torch.no_grad():
        out = model(torch.as_tensor(x.reshape(1, Tp * P, D), dtype=dtype),
                    torch.as_tensor(tau.reshape(1, -1), dtype=dtype), time, agent, valid)
    return out.reshape(Tp, P, D).double().numpy()


@dataclass
class SampleTrace:
    final_pred: np.ndarray      # m0_hat used at each token's last step
    final_tau: np.ndarray       # level after the run
    n_forwards: int


def sample(model: DFoT, plan: SamplingPlan, conditioning: TokenSequence | None = None,
           guidance: GuidanceSpec | None = None, seed=0, present=None, beta=None, return_trace=False):
    """Run ``plan`` and return the generated TokenSequence.

    Initial noise is drawn from ``default_rng(seed)`` in (token-step, agent, channel)
    order; guidance re-noising uses the independent stream ``default_rng([seed, 1])``.
    """
    guidance = guidance or GuidanceSpec()
    layout = model.config.layout
    Tp, P = plan.n_steps, plan.n_agents
    if P > layout.p_max:
        raise PlanModelMismatch(f"plan has {P} agents, model supports {layout.p_max}")
    clamp = plan.role == CLAMP
    if conditioning is None:
        if clamp.any():
            raise MissingConditioning(f"strategy {plan.strategy} clamps tokens but no conditioning was given")
        present = np.ones(P, dtype=bool) if present is None else np.asarray(present, dtype=bool)
        beta = np.zeros((P, 10)) if beta is None else beta
        cond = np.zeros((Tp, P, layout.width))
    else:
        if conditioning.tokens.shape != (Tp, P, layout.width):
            raise PlanModelMismatch(f"conditioning {conditioning.tokens.shape} does not match plan "
                                    f"({Tp}, {P}) and token width {layout.width}")
        present = conditioning.present if present is None else np.asarray(present, dtype=bool)
        beta = conditioning.beta if beta is None else beta
        cond = conditioning.tokens
    tmpl, structural = structural_template(layout, present, Tp)

    rng = np.random.default_rng(seed)
    grng = np.random.default_rng([seed, 1])
    noise = rng.standard_normal((Tp, P, layout.width))
    x = np.where(structural, tmpl, noise)
    gen = (plan.role == GENERATE) & present[None]
    final_pred = np.zeros_like(x)
    final_tau = plan.levels(plan.n_iterations)
    contexts = build_guidance_contexts(plan, guidance.mode, present) if guidance.mode != "none" else None
    n_fwd = 0

    for k in range(plan.n_iterations):
        tau_cur, tau_next = plan.levels(k), plan.levels(k + 1)
        stepping = gen & (tau_next < tau_cur)
        if not stepping.any():
            continue
        visible = clamp & (tau_cur == 0)
        x = np.where(visible[..., None], cond, x)

        def branch(keep):
            drop = visible & ~keep
            if not drop.any():
                return _forward(model, x, tau_cur, present)
            fresh = np.where(structural, tmpl, grng.standard_normal(x.shape))
            xb = np.where(drop[..., None], fresh, x)
            return _forward(model, xb, np.where(drop, 1.0, tau_cur), present)

        pred = branch(np.ones_like(clamp))
        n_fwd += 1
        if contexts is not None:
            w = guidance.w
            uncond = branch(contexts["uncond"])
            n_fwd += 1
            if guidance.mode == "hg":
                pred = (1 + w) * pred - w * uncond
            else:
                variants = contexts["self" if guidance.mode == "shg" else "partner"]
                extra = np.mean([branch(m) for m in variants], axis=0)
                n_fwd += len(variants)
                pred = pred + w * extra - w * uncond
        pred = np.where(structural, tmpl, pred)
        stepped = ddim_step(x[stepping], pred[stepping], tau_cur[stepping], tau_next[stepping])
        x[stepping] = np.where(structural[stepping], tmpl[stepping], stepped)
        done = stepping & (tau_next == 0)
        final_pred[done] = pred[done]

    out = np.where(clamp[..., None], cond, x)
    out = np.where(gen[..., None] | clamp[..., None], out, 0.0)
    out[:, ~present] = 0.0
    result = TokenSequence(out, present.copy(), np.asarray(beta), layout)
    if return_trace:
        return result, SampleTrace(final_pred, final_tau, n_fwd)
    return result


def rollout_ultralong(model: DFoT, seed_tokens: TokenSequence, W, O, total, guidance=None, seed=0,
                      steps=DEFAULT_STEPS):
    """Windowed rollout: each window clamps the last ``O`` token-steps and generates ``W - O`` more.

    Returns the seed followed by exactly ``total`` new token-steps.
    """
    if not (0 < O < W):
        raise InvalidWindow(f"need 0 < O < W, got W={W}, O={O}")
    if seed_tokens.n_steps < O:
        raise InvalidWindow(f"seed has {seed_tokens.n_steps} token-steps, overlap needs {O}")
    if total < 0:
        raise InvalidWindow("total must be non-negative")
    S = W - O
    tokens = seed_tokens.tokens
    seeds = np.random.SeedSequence(seed).spawn(max(1, math.ceil(total / S)))
    produced, window = 0, 0
    while produced < total:
        n_new = min(S, total - produced)
        ctx = np.concatenate([tokens[-O:], np.zeros((n_new,) + tokens.shape[1:])])
        cond = seed_tokens.replace(tokens=ctx)
        plan = make_plan("joint", seed_tokens.n_agents, O + n_new, history=O, steps=steps)
        out = sample(model, plan, cond, guidance, seed=int(seeds[window].generate_state(1)[0]))
        tokens = np.concatenate([tokens, out.tokens[O:]])
        produced += n_new
        window += 1
    return seed_tokens.replace(tokens=tokens)


def rollout_windows(S, total):
    return math.ceil(total / S)


# ---------------------------------------------------------------------------
# decoding

def decode_to_motion(tokens: TokenSequence, vqvae: VQVAE | None, codec: TokenCodec,
                     initial: RigidTransform, snap=True, fps=30) -> MotionSequence:
    """Denormalize, decode poses and integrate canonical deltas from ``initial`` (P,) world frames."""
    layout = codec.layout
    Tp, P = tokens.tokens.shape[:2]
    if initial.shape != (P,):
        raise ShapeMismatch(f"initial frames {initial.shape} do not match {P} agents")
    w = layout.omega
    T = Tp * w
    raw = codec.denormalize(tokens.tokens)
    dvec = raw[..., layout.delta].reshape(Tp, P, w, 9).transpose(0, 2, 1, 3).reshape(T, P, 9)
    present = tokens.present
    dvec[:, ~present] = RigidTransform.identity((T, int((~present).sum()))).to_vec9()
    dR = rot6d_to_matrix(dvec[..., :6])
    delta = RigidTransform(dR, dvec[..., 6:])
    dvec = delta.to_vec9()

    z = raw[..., layout.z].transpose(1, 0, 2)            # (P, T', d_z)
    c = np.concatenate([np.broadcast_to(tokens.beta[:, None, :], (P, T, tokens.beta.shape[-1])),
                        dvec.transpose(1, 0, 2)], -1)
    if vqvae is None:
        x = z.reshape(P, T, -1)
    else:
        dtype = next(vqvae.parameters()).dtype
        zt = torch.as_tensor(z, dtype=dtype)
        with torch.no_grad():
            if snap:
                zt, _ = vqvae.quantize(zt)
            x = vqvae.decode(zt, torch.as_tensor(c, dtype=dtype)).double().numpy()
    J6 = x.shape[-1] - 9
    theta = x[..., :J6].reshape(P, T, J6 // 6, 6).transpose(1, 0, 2, 3)
    c2r_vec = x[..., J6:].transpose(1, 0, 2)
    c2r = RigidTransform(rot6d_to_matrix(c2r_vec[..., :6]), c2r_vec[..., 6:])

    R = np.empty((T, P, 3, 3))
    t = np.empty((T, P, 3))
    R[0], t[0] = initial.R, initial.t
    for f in range(1, T):
        step = RigidTransform(R[f - 1], t[f - 1]) @ delta[f]
        R[f], t[f] = step.R, step.t
    canonical = RigidTransform(R, t)
    root = canonical @ c2r
    theta = np.where(present[None, :, None, None], theta, _identity6(theta.shape))
    seq = MotionSequence(fps=fps, beta=np.asarray(tokens.beta, dtype=float), theta=theta,
                         root_world=root, presence=present.copy())
    return derive_transforms(seq)


def _identity6(shape):
    out = np.zeros(shape)
    out[..., 0] = 1.0
    out[..., 4] = 1.0
    return out
