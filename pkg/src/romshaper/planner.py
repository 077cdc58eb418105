"""Receding-horizon planner on the reduced-order model.

Each plan is a direct transcription of the ROM dynamics over the rest of
the current support phase plus the following phases in the horizon, with
the future footstep locations as decision variables.  Defects couple
knots through Hermite-Simpson collocation (the model acceleration is
collocated at interval midpoints of a cubic interpolant), the CoM state
jumps at each touchdown because it is expressed relative to the stance
foot, and inequalities (footstep reach, CoM height band) enter as
one-sided quadratic penalties.  A damped Gauss-Newton loop solves the
resulting nonlinear least squares; identical inputs give identical
plans.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .biped import FsmSchedule, FsmState
from .rom import (
    DegenerateHeightError,
    RomParams,
    RomState,
    accel_of,
    feature_jacobian_of,
    features_of,
)

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class Task:
    """High-level command: stride length per step and ground incline."""

    stride_length: float  # m
    ground_incline: float  # rad


@dataclass(frozen=True)
class PlannerConfig:
    footsteps_in_horizon: int = 2  # touchdown events in the horizon
    knots_per_phase: int = 5
    reach_max: float = 0.6  # horizontal footstep reach, m
    w_velocity: float = 4.0
    w_footstep: float = 1.0
    w_effort: float = 1e-3
    w_defect: float = 1e8
    w_penalty: float = 1e4  # one-sided quadratic inequality penalties
    max_iterations: int = 25
    tol: float = 1e-9
    raibert_gain: float = 0.15  # s
    com_height_min: float = 0.55
    com_height_max: float = 1.05
    swing_apex: float = 0.08

    def __post_init__(self):
        if self.footsteps_in_horizon < 1:
            raise ValueError("need at least one footstep in the horizon")
        if self.knots_per_phase < 3:
            raise ValueError("need at least three knots per phase")


@dataclass(frozen=True)
class RegTargets:
    torso_pitch: float = 0.0  # keep the torso upright
    stance_leg_length: float = 0.8
    swing_leg_length: float = 0.75


@dataclass(frozen=True)
class RetargetOverrides:
    """Post-training task re-specification; None keeps the default."""

    torso_pitch: float | None = None
    stance_leg_length: float | None = None
    swing_leg_length: float | None = None


def regularization_targets(task: Task, retarget: RetargetOverrides | None = None) -> RegTargets:
    """Targets filling the robot's redundancy; overridable without retraining."""
    targets = RegTargets()
    if retarget is not None:
        updates = {
            k: v
            for k, v in (
                ("torso_pitch", retarget.torso_pitch),
                ("stance_leg_length", retarget.stance_leg_length),
                ("swing_leg_length", retarget.swing_leg_length),
            )
            if v is not None
        }
        targets = replace(targets, **updates)
    return targets


def pd_desired_accel(pos_des, vel_des, acc_ff, pos, vel, kp: float, kd: float):
    """Feedforward plus PD feedback in output space."""
    return (
        np.asarray(acc_ff, dtype=float)
        + kp * (np.asarray(pos_des, dtype=float) - np.asarray(pos, dtype=float))
        + kd * (np.asarray(vel_des, dtype=float) - np.asarray(vel, dtype=float))
    )


def _minjerk(phi: float):
    s = 10 * phi**3 - 15 * phi**4 + 6 * phi**5
    ds = 30 * phi**2 - 60 * phi**3 + 30 * phi**4
    dds = 60 * phi - 180 * phi**2 + 120 * phi**3
    return s, ds, dds


def _smoothstep(r: float):
    return 3 * r**2 - 2 * r**3, 6 * r - 6 * r**2, 6 - 12 * r


def swing_foot_trajectory(
    start: np.ndarray,
    target: np.ndarray,
    apex_height: float,
    phase: float,
    duration: float = 1.0,
):
    """Swing-foot reference: min-jerk horizontally, two-segment arc vertically.

    ``phase`` runs over [0, 1]; derivatives are scaled by ``duration`` so
    they are true time derivatives of the reference.
    """
    start = np.asarray(start, dtype=float)
    target = np.asarray(target, dtype=float)
    phi = float(np.clip(phase, 0.0, 1.0))
    s, ds, dds = _minjerk(phi)
    px = start[0] + (target[0] - start[0]) * s
    vx = (target[0] - start[0]) * ds / duration
    ax = (target[0] - start[0]) * dds / duration**2
    if phi <= 0.5:
        r, scale = 2.0 * phi, 2.0 / duration
        sig, dsig, ddsig = _smoothstep(r)
        pz = start[1] + (apex_height - start[1]) * sig
        vz = (apex_height - start[1]) * dsig * scale
        az = (apex_height - start[1]) * ddsig * scale**2
    else:
        r, scale = 2.0 * phi - 1.0, 2.0 / duration
        sig, dsig, ddsig = _smoothstep(r)
        pz = apex_height + (target[1] - apex_height) * sig
        vz = (target[1] - apex_height) * dsig * scale
        az = (target[1] - apex_height) * ddsig * scale**2
    return np.array([px, pz]), np.array([vx, vz]), np.array([ax, az])


# --- transcription ----------------------------------------------------------


@dataclass
class TranscriptionProblem:
    """Assembled data for one solve: time grid, pinned state, cost anchors."""

    y0: np.ndarray  # (4,) initial ROM state, pinned
    stance0_x: float
    durations: np.ndarray  # (n_seg,) seconds
    knots_per_phase: int
    n_footsteps: int  # decision footsteps = n_seg - 1
    v_des: float
    raibert_anchor: np.ndarray  # (n_footsteps,) frozen regularization targets
    cfg: PlannerConfig

    @property
    def n_segments(self) -> int:
        return self.durations.size

    @property
    def n_vars(self) -> int:
        K = self.knots_per_phase
        return 4 * (self.n_segments * K - 1) + self.n_footsteps

    def knot_slice(self, seg: int, k: int):
        """Decision-vector slice of knot (seg, k); None for the pinned knot."""
        K = self.knots_per_phase
        idx = seg * K + k
        if idx == 0:
            return None
        return slice(4 * (idx - 1), 4 * idx)

    def footstep_index(self, j: int) -> int:
        return 4 * (self.n_segments * self.knots_per_phase - 1) + j

    def knot(self, z: np.ndarray, seg: int, k: int) -> np.ndarray:
        sl = self.knot_slice(seg, k)
        return self.y0 if sl is None else z[sl]

    def segment_states(self, z: np.ndarray, seg: int) -> np.ndarray:
        K = self.knots_per_phase
        return np.stack([self.knot(z, seg, k) for k in range(K)])

    def footstep_x(self, z: np.ndarray, j: int) -> float:
        return float(z[self.footstep_index(j)])


def _state_derivative(params: RomParams, states: np.ndarray) -> np.ndarray:
    out = np.empty_like(states)
    out[..., :2] = states[..., 2:]
    out[..., 2:] = accel_of(params, states)
    return out


def _derivative_jacobian(params: RomParams, states: np.ndarray) -> np.ndarray:
    n = states.shape[0]
    A = np.zeros((n, 4, 4))
    A[:, 0, 2] = A[:, 1, 3] = 1.0
    dphi = feature_jacobian_of(params.basis, states)
    A[:, 2:, :] = np.einsum("if,nfj->nij", params.theta, dphi)
    return A


def transcription_residuals(
    params: RomParams, decision_vars: np.ndarray, problem: TranscriptionProblem
):
    """Stacked residual vector and its analytic Jacobian.

    Rows: weighted collocation defects and touchdown-jump equalities,
    velocity-tracking and acceleration-effort costs, footstep
    regularization, and the one-sided inequality penalties.
    """
    z = np.asarray(decision_vars, dtype=float)
    cfg = problem.cfg
    K = problem.knots_per_phase
    n_seg = problem.n_segments
    sw_dyn = np.sqrt(cfg.w_defect)
    n_knots = n_seg * K
    sw_vel = np.sqrt(cfg.w_velocity / n_knots)
    sw_eff = np.sqrt(cfg.w_effort / n_knots)
    sw_pen = np.sqrt(cfg.w_penalty)

    rows: list[np.ndarray] = []
    jacs: list[list] = []  # per residual: [(first column, dense block), ...]

    def add(res, blocks):
        rows.append(np.atleast_1d(np.asarray(res, dtype=float)))
        jacs.append(blocks)

    def col(sl) -> int:
        return sl.start if isinstance(sl, slice) else int(sl)

    for s in range(n_seg):
        states = problem.segment_states(z, s)
        F = _state_derivative(params, states)
        A = _derivative_jacobian(params, states)
        h = problem.durations[s] / (K - 1)
        mids = 0.5 * (states[:-1] + states[1:]) + (h / 8.0) * (F[:-1] - F[1:])
        Fm = _state_derivative(params, mids)
        Am = _derivative_jacobian(params, mids)
        eye = np.eye(4)
        for k in range(K - 1):
            defect = states[k + 1] - states[k] - (h / 6.0) * (F[k] + 4 * Fm[k] + F[k + 1])
            dk = -eye - (h / 6.0) * (A[k] + 4 * Am[k] @ (0.5 * eye + (h / 8.0) * A[k]))
            dk1 = eye - (h / 6.0) * (A[k + 1] + 4 * Am[k] @ (0.5 * eye - (h / 8.0) * A[k + 1]))
            blocks = []
            sl_k = problem.knot_slice(s, k)
            sl_k1 = problem.knot_slice(s, k + 1)
            if sl_k is not None:
                blocks.append((col(sl_k), sw_dyn * dk))
            blocks.append((col(sl_k1), sw_dyn * dk1))
            add(sw_dyn * defect, blocks)
        if s + 1 < n_seg:
            # touchdown: CoM position re-expressed about the new stance foot
            z_end = problem.knot(z, s, K - 1)
            z_next = problem.knot(z, s + 1, 0)
            p_prev = problem.stance0_x if s == 0 else problem.footstep_x(z, s - 1)
            p_new = problem.footstep_x(z, s)
            jump = z_next - z_end
            jump[0] -= p_prev - p_new
            blocks = [(col(problem.knot_slice(s + 1, 0)), sw_dyn * np.eye(4))]
            sl_end = problem.knot_slice(s, K - 1)
            if sl_end is not None:
                blocks.append((col(sl_end), -sw_dyn * np.eye(4)))
            colv = np.zeros((4, 1))
            colv[0, 0] = sw_dyn
            blocks.append((problem.footstep_index(s), colv))
            if s >= 1:
                col_prev = np.zeros((4, 1))
                col_prev[0, 0] = -sw_dyn
                blocks.append((problem.footstep_index(s - 1), col_prev))
            add(sw_dyn * jump, blocks)

    # velocity tracking and effort at every decision knot
    for s in range(n_seg):
        states = problem.segment_states(z, s)
        acc = accel_of(params, states)
        dacc = np.einsum(
            "if,nfj->nij", params.theta, feature_jacobian_of(params.basis, states)
        )
        for k in range(K):
            sl = problem.knot_slice(s, k)
            if sl is None:
                continue
            row = np.zeros((1, 4))
            row[0, 2] = sw_vel
            add(sw_vel * (states[k][2] - problem.v_des), [(col(sl), row)])
            add(sw_eff * acc[k], [(col(sl), sw_eff * dacc[k])])

    # footstep regularization about the frozen Raibert anchor
    sw_step = np.sqrt(cfg.w_footstep)
    for j in range(problem.n_footsteps):
        px = problem.footstep_x(z, j)
        add(
            sw_step * (px - problem.raibert_anchor[j]),
            [(problem.footstep_index(j), np.array([[sw_step]]))],
        )

    # one-sided penalties: footstep reach, CoM height band
    for j in range(problem.n_footsteps):
        z_end = problem.knot(z, j, K - 1)
        p_prev = problem.stance0_x if j == 0 else problem.footstep_x(z, j - 1)
        px = problem.footstep_x(z, j)
        d = px - (p_prev + z_end[0])  # step position relative to CoM at switch
        viol = abs(d) - cfg.reach_max
        if viol > 0:
            sgn = np.sign(d)
            blocks = [(problem.footstep_index(j), np.array([[sw_pen * sgn]]))]
            sl_end = problem.knot_slice(j, K - 1)
            row = np.zeros((1, 4))
            row[0, 0] = -sw_pen * sgn
            if sl_end is not None:
                blocks.append((col(sl_end), row))
            if j >= 1:
                blocks.append((problem.footstep_index(j - 1), np.array([[-sw_pen * sgn]])))
            add(sw_pen * viol, blocks)
    for s in range(n_seg):
        for k in range(K):
            sl = problem.knot_slice(s, k)
            if sl is None:
                continue
            yv = problem.knot(z, s, k)[1]
            if yv < cfg.com_height_min:
                row = np.zeros((1, 4))
                row[0, 1] = -sw_pen
                add(sw_pen * (cfg.com_height_min - yv), [(col(sl), row)])
            elif yv > cfg.com_height_max:
                row = np.zeros((1, 4))
                row[0, 1] = sw_pen
                add(sw_pen * (yv - cfg.com_height_max), [(col(sl), row)])

    residual = np.concatenate(rows)
    J = np.zeros((residual.size, problem.n_vars))
    r0 = 0
    for res, blocks in zip(rows, jacs):
        nr = res.size
        for start, block in blocks:
            block = np.atleast_2d(block)
            J[r0 : r0 + nr, start : start + block.shape[1]] += block
        r0 += nr
    return residual, J


# --- plan solution and solve -------------------------------------------------


@dataclass
class PlanSegment:
    times: np.ndarray  # absolute seconds, (K,)
    states: np.ndarray  # (K, 4): y (rel. stance), ydot
    stance: np.ndarray  # (2,) world
    derivs: np.ndarray | None = None  # (K, 4): ydot, model accel at knots


@dataclass
class PlanSolution:
    knot_times: np.ndarray
    com_knots: list
    next_footstep: np.ndarray
    solve_status: str
    iterations: int
    segments: list
    decision: np.ndarray | None = None
    signature: tuple | None = None

    def sample(self, params: RomParams, t: float):
        """Desired CoM state at time t: (y, ydot, ff accel, stance).

        Cubic Hermite interpolation of the knots; the feedforward
        acceleration is the interpolant's second derivative, which
        matches the model acceleration exactly at the knots.
        """
        seg = self.segments[0]
        for cand in self.segments:
            if t <= cand.times[-1] + 1e-12:
                seg = cand
                break
            seg = cand
        times, states = seg.times, seg.states
        if seg.derivs is None:
            seg.derivs = _state_derivative(params, states)
        t = float(np.clip(t, times[0], times[-1]))
        k = min(int(np.searchsorted(times, t, side="right")) - 1, times.size - 2)
        k = max(k, 0)
        h = times[k + 1] - times[k]
        tau = (t - times[k]) / h
        z0, z1 = states[k], states[k + 1]
        f0, f1 = seg.derivs[k], seg.derivs[k + 1]
        h00 = 2 * tau**3 - 3 * tau**2 + 1
        h10 = tau**3 - 2 * tau**2 + tau
        h01 = -2 * tau**3 + 3 * tau**2
        h11 = tau**3 - tau**2
        zt = h00 * z0 + h10 * h * f0 + h01 * z1 + h11 * h * f1
        d00 = (6 * tau**2 - 6 * tau) / h
        d10 = 3 * tau**2 - 4 * tau + 1
        d01 = (-6 * tau**2 + 6 * tau) / h
        d11 = 3 * tau**2 - 2 * tau
        acc = (d00 * z0 + d10 * f0 + d01 * z1 + d11 * f1)[2:]
        return zt[:2], zt[2:], acc, seg.stance.copy()


def accel_of_state(params: RomParams, state: np.ndarray) -> np.ndarray:
    return params.theta @ features_of(params.basis, state)


def _rom_guess(params: RomParams, y0: np.ndarray, duration: float, K: int) -> np.ndarray:
    """Forward integration used only to seed the solver; clamped for safety."""
    basis = params.basis
    floor = basis.z_min + 0.05
    states = np.empty((K, 4))
    states[0] = y0
    h = duration / (K - 1)
    s = y0.copy()
    for k in range(1, K):
        for _ in range(4):
            sub = h / 4.0
            s = s + sub * _safe_derivative(params, s, floor)
            s[1] = max(s[1], floor)
            np.clip(s[2:], -10.0, 10.0, out=s[2:])
        states[k] = s
    return states


def _safe_derivative(params: RomParams, s: np.ndarray, floor: float) -> np.ndarray:
    sc = s.copy()
    sc[1] = max(sc[1], floor)
    acc = params.theta @ features_of(params.basis, sc)
    return np.concatenate([s[2:], np.clip(acc, -100.0, 100.0)])


def _raibert_step(com_x, com_vx, v_des, t_ss, gain):
    return com_x + com_vx * t_ss / 2.0 + gain * (com_vx - v_des)


def plan(
    params: RomParams,
    y0: RomState,
    stance_pos: np.ndarray,
    fsm: FsmState,
    task: Task,
    cfg: PlannerConfig,
    warm: PlanSolution | None = None,
    schedule: FsmSchedule = FsmSchedule(),
    t_now: float = 0.0,
) -> PlanSolution:
    """Solve the receding-horizon ROM problem from the measured state."""
    stance_pos = np.asarray(stance_pos, dtype=float)
    y0_vec = y0.as_vector() if isinstance(y0, RomState) else np.asarray(y0, float)
    K, n_seg = cfg.knots_per_phase, cfg.footsteps_in_horizon
    t_ss = schedule.single_support
    d0 = max(t_ss - fsm.time_in_mode, 1e-3)
    durations = np.concatenate([[d0], np.full(n_seg - 1, t_ss)])
    v_des = task.stride_length / schedule.step_period
    signature = (n_seg, K, round(d0 * 1e6), round(stance_pos[0] * 1e9), round(v_des * 1e9))

    if y0_vec[1] < params.basis.z_min:
        sol = PlanSolution(
            knot_times=np.array([t_now]),
            com_knots=[RomState.from_vector(y0_vec)],
            next_footstep=stance_pos.copy(),
            solve_status=INFEASIBLE,
            iterations=0,
            segments=[
                PlanSegment(np.array([t_now, t_now + d0]), np.tile(y0_vec, (2, 1)), stance_pos.copy())
            ],
            signature=signature,
        )
        return sol

    # initial guess: warm decision vector when the grid matches, else a
    # forward rollout of the model with Raibert footsteps
    n_vars = 4 * (n_seg * K - 1) + (n_seg - 1)
    raibert = np.zeros(max(n_seg - 1, 1))
    if warm is not None and warm.signature == signature and warm.decision is not None:
        z = warm.decision.copy()
        prob = TranscriptionProblem(
            y0=y0_vec, stance0_x=float(stance_pos[0]), durations=durations,
            knots_per_phase=K, n_footsteps=n_seg - 1, v_des=v_des,
            raibert_anchor=warm_raibert(warm, n_seg - 1), cfg=cfg,
        )
    else:
        z = np.empty(n_vars)
        states = _rom_guess(params, y0_vec, d0, K)
        p_prev_x = float(stance_pos[0])
        anchors = []
        for s in range(n_seg):
            for k in range(K):
                if s == 0 and k == 0:
                    continue
                idx = s * K + k
                z[4 * (idx - 1) : 4 * idx] = states[k]
            if s + 1 < n_seg:
                com_x = p_prev_x + states[-1][0]
                p_new = _raibert_step(com_x, states[-1][2], v_des, t_ss, cfg.raibert_gain)
                anchors.append(p_new)
                z[4 * (n_seg * K - 1) + s] = p_new
                y_next = states[-1].copy()
                y_next[0] += p_prev_x - p_new
                states = _rom_guess(params, y_next, t_ss, K)
                p_prev_x = p_new
        raibert = np.asarray(anchors) if anchors else np.zeros(0)
        prob = TranscriptionProblem(
            y0=y0_vec, stance0_x=float(stance_pos[0]), durations=durations,
            knots_per_phase=K, n_footsteps=n_seg - 1, v_des=v_des,
            raibert_anchor=raibert, cfg=cfg,
        )

    def cost_of(zv):
        try:
            r, _ = transcription_residuals(params, zv, prob)
        except (DegenerateHeightError, FloatingPointError):
            return np.inf, None
        c = float(r @ r)
        return (c, r) if np.isfinite(c) else (np.inf, None)

    status = MAX_ITER
    cost, _ = cost_of(z)
    if not np.isfinite(cost):
        # clamped guess should always evaluate; fall back to holding y0
        z = np.concatenate([np.tile(y0_vec, n_seg * K - 1), np.zeros(n_seg - 1)])
        cost, _ = cost_of(z)
    best_z, best_cost = z.copy(), cost
    iterations = 0
    for it in range(cfg.max_iterations):
        iterations = it + 1
        r, J = transcription_residuals(params, z, prob)
        JtJ = J.T @ J
        JtJ[np.diag_indices_from(JtJ)] += 1e-10
        try:
            step = np.linalg.solve(JtJ, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        alpha, improved = 1.0, False
        for _ in range(10):
            cand = z + alpha * step
            c_cand, _ = cost_of(cand)
            if c_cand < cost:
                z, cost, improved = cand, c_cand, True
                break
            alpha *= 0.5
        if cost < best_cost:
            best_z, best_cost = z.copy(), cost
        if not improved:
            status = CONVERGED
            break
        if np.max(np.abs(alpha * step)) < cfg.tol:
            status = CONVERGED
            break
    z = best_z

    # assemble segments in world time/coordinates
    segments = []
    t0 = t_now
    stance = stance_pos.copy()
    for s in range(n_seg):
        times = t0 + np.linspace(0.0, prob.durations[s], K)
        segments.append(
            PlanSegment(times=times, states=prob.segment_states(z, s), stance=stance.copy())
        )
        t0 = times[-1]
        if s + 1 < n_seg:
            stance = np.array([prob.footstep_x(z, s), 0.0])
    if n_seg > 1:
        next_fs = np.array([prob.footstep_x(z, 0), 0.0])
    else:
        end = prob.segment_states(z, 0)[-1]
        next_fs = np.array(
            [_raibert_step(stance_pos[0] + end[0], end[2], v_des, t_ss, cfg.raibert_gain), 0.0]
        )
    seg0 = segments[0]
    return PlanSolution(
        knot_times=seg0.times.copy(),
        com_knots=[RomState.from_vector(st) for st in seg0.states],
        next_footstep=next_fs,
        solve_status=status,
        iterations=iterations,
        segments=segments,
        decision=z.copy(),
        signature=signature,
    )


def warm_raibert(warm: PlanSolution, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    anchors = [seg.stance[0] for seg in warm.segments[1:]]
    while len(anchors) < n:
        anchors.append(anchors[-1] if anchors else 0.0)
    return np.asarray(anchors[:n])
