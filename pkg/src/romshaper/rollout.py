"""Episode rollouts: the full MPC stack driving the simulated biped.

The planner is the policy; everything else (simulator, FSM, swing and
regularization trajectories, PD conversion, OSC) is the environment.
The environment runs at 1 kHz, the planner at 20 Hz, and the recorded
trace is the environment state downsampled to the planner rate.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import biped, osc, planner, rom
from .biped import (
    BipedModel,
    ContactMode,
    FsmMode,
    FsmSchedule,
    FullState,
    LEFT,
    RIGHT,
)
from .planner import PlannerConfig, RetargetOverrides, Task

COMPLETED = "completed"
FELL = "fell"


def derive_seed(*parts) -> int:
    """Platform-stable seed from (master seed, iteration, sample, task, ...)."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class RewardWeights:
    """Weights of the two reward terms.

    ``w`` scales the torque cost so a nominal standing tick lands near
    exp(-1); ``w_stride`` and ``w_speed`` are the diagonal of the
    task-error norm over (stride, walking speed).
    """

    w: float = 1.67e-3
    w_stride: float = 25.0
    w_speed: float = 3.0

    def __post_init__(self):
        if self.w <= 0 or self.w_stride < 0 or self.w_speed < 0:
            raise ValueError("reward weights must be nonnegative, w positive")

    @property
    def W(self) -> np.ndarray:
        return np.diag([self.w_stride, self.w_speed])


@dataclass(frozen=True)
class ControllerGains:
    com_kp: float = 50.0
    com_kd: float = 10.0
    com_weight: float = 10.0
    swing_kp: float = 200.0
    swing_kd: float = 20.0
    swing_weight: float = 5.0
    torso_kp: float = 100.0
    torso_kd: float = 10.0
    torso_weight: float = 2.0
    leg_kp: float = 100.0
    leg_kd: float = 10.0
    leg_weight: float = 0.5
    rho_u: float = 1e-4


@dataclass(frozen=True)
class EpisodeConfig:
    horizon_ticks: int = 100
    planner_hz: int = 20
    sim_hz: int = 1000
    seed: int = 0
    settle_time: float = 0.1
    com_height: float = 0.9
    foot_spread: float = 0.1
    vel_jitter: float = 0.02  # seeded initial CoM velocity spread, m/s
    pitch_jitter: float = 0.01  # seeded initial pitch spread, rad

    def __post_init__(self):
        if self.horizon_ticks < 1:
            raise ValueError("horizon must be at least one tick")
        if self.sim_hz % self.planner_hz != 0:
            raise ValueError("sim rate must be divisible by the planner rate")

    @property
    def substeps(self) -> int:
        return self.sim_hz // self.planner_hz

    @property
    def tick_dt(self) -> float:
        return 1.0 / self.planner_hz

    @property
    def sim_dt(self) -> float:
        return 1.0 / self.sim_hz


@dataclass
class FootstepRecord:
    step_index: int
    landing_time: float
    landing_pos: np.ndarray
    stride: float
    mean_pelvis_height: float
    mean_torso_pitch: float
    torque_sq_sum: float  # sum of u'u over the step's substeps
    duration: float


@dataclass
class RolloutTrace:
    task: Task
    seed: int
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    u: np.ndarray
    fsm_mode: np.ndarray
    stride_fb: np.ndarray
    speed_fb: np.ndarray
    h: np.ndarray
    r: np.ndarray
    contact_forces: list
    outcome: str
    fall_time: float | None
    footsteps: list
    diagnostics: str = ""
    tracking_reward_mean: float = 0.0

    @property
    def ticks(self) -> int:
        return self.t.size


def desired_feedback(task: Task, schedule: FsmSchedule) -> np.ndarray:
    """Commanded (stride, walking speed) pair."""
    return np.array([task.stride_length, task.stride_length / schedule.step_period])


def reward(h: float, gamma: np.ndarray, gamma_fb: np.ndarray, wts: RewardWeights) -> float:
    """exp(-w*h) plus half-weighted task-tracking term; in (0, 1.5]."""
    if h < 0:
        raise ValueError(f"accumulated torque cost must be nonnegative, got {h}")
    e = np.asarray(gamma, dtype=float) - np.asarray(gamma_fb, dtype=float)
    dist = float(np.sqrt(e @ wts.W @ e))
    return float(np.exp(-wts.w * h) + 0.5 * np.exp(-dist))


def episode_return(trace: RolloutTrace) -> float:
    """Sum of realized per-tick rewards; no terminal bonus or penalty."""
    return float(np.sum(trace.r))


class _RolloutAbort(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class MpcController:
    """Planner, trajectory generators, and OSC for a single episode."""

    def __init__(
        self,
        params: rom.RomParams,
        task: Task,
        model: BipedModel,
        schedule: FsmSchedule,
        planner_cfg: PlannerConfig,
        gains: ControllerGains,
        retarget: RetargetOverrides | None = None,
    ):
        self.params = params
        self.task = task
        self.model = model
        self.schedule = schedule
        self.cfg = planner_cfg
        self.gains = gains
        self.reg = planner.regularization_targets(task, retarget)
        self.plan_solution: planner.PlanSolution | None = None
        self.plan_calls = 0
        self.anchors: dict = {}
        self.swing_liftoff: np.ndarray | None = None
        self.last_u = np.zeros(4)

    def set_anchor(self, side: str, pos: np.ndarray) -> None:
        self.anchors[side] = np.asarray(pos, dtype=float).copy()

    def on_support_change(self, x: FullState, fsm):
        stance = fsm.stance_foot()
        swing = fsm.swing_foot()
        foot = biped.foot_position(self.model, x.q, stance)
        self.set_anchor(stance, np.array([foot[0], 0.0]))
        self.anchors.pop(swing, None)
        self.swing_liftoff = biped.foot_position(self.model, x.q, swing).copy()
        self.plan_solution = None  # grid changed; cold-start the next solve

    def replan(self, x: FullState, t: float, fsm) -> None:
        stance = self.anchors[fsm.stance_foot()]
        y0 = rom.com_embedding(self.model, x, stance)
        sol = planner.plan(
            self.params, y0, stance, fsm, self.task, self.cfg,
            warm=self.plan_solution, schedule=self.schedule, t_now=t,
        )
        self.plan_calls += 1
        if sol.solve_status == planner.INFEASIBLE:
            raise _RolloutAbort("planner infeasible: CoM height under guard")
        self.plan_solution = sol

    def outputs_walking(self, x: FullState, t: float, fsm) -> list:
        g = self.gains
        stance_side = fsm.stance_foot()
        swing_side = fsm.swing_foot()
        y_des, yd_des, acc_ff, stance = self.plan_solution.sample(self.params, t)
        com_target = stance + y_des
        target = self.plan_solution.next_footstep
        swing_pos, swing_vel, swing_acc = planner.swing_foot_trajectory(
            self.swing_liftoff, target, self.cfg.swing_apex, fsm.phase,
            duration=self.schedule.single_support,
        )
        return [
            osc.OutputSpec("com", com_target, yd_des, acc_ff, g.com_kp, g.com_kd, g.com_weight),
            osc.OutputSpec(
                "swing_foot", swing_pos, swing_vel, swing_acc,
                g.swing_kp, g.swing_kd, g.swing_weight, side=swing_side,
            ),
            osc.OutputSpec(
                "torso_pitch", np.array([self.reg.torso_pitch]), np.zeros(1), np.zeros(1),
                g.torso_kp, g.torso_kd, g.torso_weight,
            ),
            osc.OutputSpec(
                "leg_length", np.array([self.reg.stance_leg_length]), np.zeros(1), np.zeros(1),
                g.leg_kp, g.leg_kd, g.leg_weight, side=stance_side,
            ),
            osc.OutputSpec(
                "leg_length", np.array([self.reg.swing_leg_length]), np.zeros(1), np.zeros(1),
                g.leg_kp, g.leg_kd, g.leg_weight, side=swing_side,
            ),
        ]

    def outputs_holding(self, com_target: np.ndarray) -> list:
        g = self.gains
        specs = [
            osc.OutputSpec("com", com_target, np.zeros(2), np.zeros(2), g.com_kp, g.com_kd, g.com_weight),
            osc.OutputSpec(
                "torso_pitch", np.array([self.reg.torso_pitch]), np.zeros(1), np.zeros(1),
                g.torso_kp, g.torso_kd, g.torso_weight,
            ),
        ]
        for side in (LEFT, RIGHT):
            specs.append(
                osc.OutputSpec(
                    "leg_length", np.array([self.reg.stance_leg_length]), np.zeros(1),
                    np.zeros(1), g.leg_kp, g.leg_kd, g.leg_weight, side=side,
                )
            )
        return specs

    def torque(self, x: FullState, outputs: list, contact: ContactMode, terms=None) -> np.ndarray:
        u = osc.osc_solve(
            self.model, x, outputs, contact, rho_u=self.gains.rho_u,
            warm_u=self.last_u, terms=terms,
        )
        self.last_u = u
        return u


def _touchdown(model: BipedModel, x: FullState, side: str) -> FullState:
    """Extend the landing leg to the ground, then apply the plastic impact."""
    ia, il = biped._LEG_COORDS[side]
    q = x.q.copy()
    hip = q[:2] + biped._rot(q[2]) @ np.asarray(model.hip_offset)
    cosb = np.cos(q[2] + q[ia])
    if cosb > 0.05 and hip[1] > 0:
        q[il] = float(np.clip(hip[1] / cosb, model.leg_min, model.leg_max))
    x = FullState(q=q, v=x.v.copy(), t=x.t)
    return biped.impact_map(model, x, side)


def rollout(
    params: rom.RomParams,
    task: Task,
    cfg: EpisodeConfig,
    model: BipedModel | None = None,
    schedule: FsmSchedule | None = None,
    planner_cfg: PlannerConfig | None = None,
    gains: ControllerGains | None = None,
    weights: RewardWeights | None = None,
    retarget: RetargetOverrides | None = None,
) -> RolloutTrace:
    """Run one episode of the MPC on the given task; pure in (inputs, seed)."""
    model = (model or BipedModel()).with_incline(task.ground_incline)
    schedule = schedule or FsmSchedule()
    planner_cfg = planner_cfg or PlannerConfig()
    gains = gains or ControllerGains()
    weights = weights or RewardWeights()
    rng = np.random.default_rng(cfg.seed)

    x = biped.standing_state(model, cfg.com_height, cfg.foot_spread)
    x.v[0] += rng.normal(0.0, cfg.vel_jitter)
    x.q[2] += rng.normal(0.0, cfg.pitch_jitter)
    x.t = -cfg.settle_time

    ctrl = MpcController(params, task, model, schedule, planner_cfg, gains, retarget)
    for side in (LEFT, RIGHT):
        foot = biped.foot_position(model, x.q, side)
        ctrl.set_anchor(side, np.array([foot[0], 0.0]))
    com0 = biped.com_position(model, x.q).copy()
    gamma = desired_feedback(task, schedule)

    dt = cfg.sim_dt
    n_settle = int(round(cfg.settle_time * cfg.sim_hz))
    T = cfg.horizon_ticks
    sub = cfg.substeps

    rec_t = np.zeros(T)
    rec_q = np.zeros((T, biped.NQ))
    rec_v = np.zeros((T, biped.NQ))
    rec_u = np.zeros((T, 4))
    rec_mode = np.zeros(T, dtype=int)
    rec_stride = np.zeros(T)
    rec_speed = np.zeros(T)
    rec_h = np.zeros(T)
    rec_r = np.zeros(T)
    rec_forces: list = []
    footsteps: list = []

    outcome, fall_time, diagnostics = COMPLETED, None, ""
    ticks_done = 0

    # per-step accumulators (over single-support phases)
    last_landing_x = None
    step_acc = {"height": 0.0, "pitch": 0.0, "n": 0, "uu": 0.0, "t0": 0.0}

    def close_step(landing_time: float, landing: np.ndarray, index: int):
        nonlocal last_landing_x
        stride = landing[0] - last_landing_x if last_landing_x is not None else 0.0
        n = max(step_acc["n"], 1)
        footsteps.append(
            FootstepRecord(
                step_index=index,
                landing_time=landing_time,
                landing_pos=landing.copy(),
                stride=float(stride),
                mean_pelvis_height=step_acc["height"] / n,
                mean_torso_pitch=step_acc["pitch"] / n,
                torque_sq_sum=step_acc["uu"],
                duration=landing_time - step_acc["t0"],
            )
        )
        last_landing_x = float(landing[0])
        step_acc.update(height=0.0, pitch=0.0, n=0, uu=0.0, t0=landing_time)

    try:
        # settle on both feet before the gait starts
        both = ContactMode(active=(LEFT, RIGHT), anchors=ctrl.anchors)
        for _ in range(n_settle):
            terms = biped.dynamics_terms(model, x.q, x.v)
            u = ctrl.torque(x, ctrl.outputs_holding(com0), both, terms)
            x = biped.integrate_step(model, x, u, both, dt, terms=terms)
            if biped.is_fallen(model, x):
                raise _RolloutAbort("fell during settle")

        fsm = biped.fsm_state(0.0, schedule)
        ctrl.on_support_change(x, fsm)
        last_landing_x = float(ctrl.anchors[fsm.stance_foot()][0])
        step_acc["t0"] = 0.0
        prev_fsm = fsm

        for tick in range(T):
            t_tick = tick * cfg.tick_dt
            fsm = biped.fsm_state(t_tick, schedule)
            if fsm.mode != prev_fsm.mode:
                if fsm.mode != FsmMode.DOUBLE_SUPPORT:
                    landing_side = fsm.stance_foot()
                    x = _touchdown(model, x, landing_side)
                    close_step(
                        t_tick, biped.foot_position(model, x.q, landing_side), prev_fsm.step_index
                    )
                    ctrl.on_support_change(x, fsm)
                else:
                    x = _touchdown(model, x, prev_fsm.swing_foot())
                    foot = biped.foot_position(model, x.q, prev_fsm.swing_foot())
                    ctrl.set_anchor(prev_fsm.swing_foot(), np.array([foot[0], 0.0]))
                prev_fsm = fsm
            if fsm.mode != FsmMode.DOUBLE_SUPPORT:
                ctrl.replan(x, t_tick, fsm)

            com_start = biped.com_position(model, x.q)
            h_tick = 0.0
            first_force = None
            for s in range(sub):
                t = t_tick + s * dt
                fsm = biped.fsm_state(t, schedule)
                if fsm.mode != prev_fsm.mode:  # switch between ticks (t_ds > 0)
                    if fsm.mode != FsmMode.DOUBLE_SUPPORT:
                        landing_side = fsm.stance_foot()
                        x = _touchdown(model, x, landing_side)
                        close_step(
                            t, biped.foot_position(model, x.q, landing_side), prev_fsm.step_index
                        )
                        ctrl.on_support_change(x, fsm)
                        ctrl.replan(x, t, fsm)
                    else:
                        x = _touchdown(model, x, prev_fsm.swing_foot())
                        foot = biped.foot_position(model, x.q, prev_fsm.swing_foot())
                        ctrl.set_anchor(prev_fsm.swing_foot(), np.array([foot[0], 0.0]))
                    prev_fsm = fsm
                if fsm.mode == FsmMode.DOUBLE_SUPPORT:
                    contact = ContactMode(active=(LEFT, RIGHT), anchors=ctrl.anchors)
                    outputs = ctrl.outputs_holding(biped.com_position(model, x.q))
                else:
                    contact = ContactMode(active=(fsm.stance_foot(),), anchors=ctrl.anchors)
                    outputs = ctrl.outputs_walking(x, t, fsm)
                terms = biped.dynamics_terms(model, x.q, x.v)
                u = ctrl.torque(x, outputs, contact, terms)
                if s == 0:
                    rec_t[tick] = t_tick
                    rec_q[tick] = x.q
                    rec_v[tick] = x.v
                    rec_u[tick] = u
                    rec_mode[tick] = int(fsm.mode)
                    _, forces = biped.dynamics(model, x, u, contact, stabilized=True, terms=terms)
                    first_force = {k: v.copy() for k, v in forces.items()}
                h_tick += float(u @ u) * dt
                step_acc["uu"] += float(u @ u)
                step_acc["height"] += float(x.q[1])
                step_acc["pitch"] += float(x.q[2])
                step_acc["n"] += 1
                x = biped.integrate_step(model, x, u, contact, dt, terms=terms)
                if biped.is_fallen(model, x):
                    raise _RolloutAbort(f"fell at t={x.t:.3f}")
            com_end = biped.com_position(model, x.q)
            stride_fb = footsteps[-1].stride if footsteps else 0.0
            speed_fb = (com_end[0] - com_start[0]) / cfg.tick_dt
            gamma_fb = np.array([stride_fb, speed_fb])
            rec_stride[tick] = stride_fb
            rec_speed[tick] = speed_fb
            rec_h[tick] = h_tick
            rec_r[tick] = reward(h_tick, gamma, gamma_fb, weights)
            rec_forces.append(first_force)
            ticks_done = tick + 1
    except _RolloutAbort as abort:
        outcome, fall_time, diagnostics = FELL, x.t, abort.reason
    except (
        biped.SimulationDiverged,
        biped.SingularContact,
        osc.OscInfeasibleError,
        rom.DegenerateHeightError,
    ) as exc:
        outcome, fall_time = FELL, x.t
        diagnostics = f"{type(exc).__name__}: {exc}"

    n = ticks_done
    track_mean = 0.0
    if n:
        e = np.stack([rec_stride[:n], rec_speed[:n]], axis=1) - gamma
        dist = np.sqrt(np.einsum("ij,jk,ik->i", e, weights.W, e))
        track_mean = float(np.mean(0.5 * np.exp(-dist)))
    return RolloutTrace(
        task=task,
        seed=cfg.seed,
        t=rec_t[:n].copy(),
        q=rec_q[:n].copy(),
        v=rec_v[:n].copy(),
        u=rec_u[:n].copy(),
        fsm_mode=rec_mode[:n].copy(),
        stride_fb=rec_stride[:n].copy(),
        speed_fb=rec_speed[:n].copy(),
        h=rec_h[:n].copy(),
        r=rec_r[:n].copy(),
        contact_forces=rec_forces,
        outcome=outcome,
        fall_time=fall_time,
        footsteps=footsteps,
        diagnostics=diagnostics,
        tracking_reward_mean=track_mean,
    )


def eval_return(
    params: rom.RomParams,
    tasks: list,
    cfg: EpisodeConfig,
    seeds: list | None = None,
    **rollout_kwargs,
):
    """Mean return over tasks, plus the per-task traces for curriculum flags."""
    if not tasks:
        raise ValueError("need at least one task")
    if seeds is None:
        seeds = [cfg.seed] * len(tasks)
    traces = []
    for task, seed in zip(tasks, seeds):
        from dataclasses import replace as _replace

        traces.append(rollout(params, task, _replace(cfg, seed=seed), **rollout_kwargs))
    returns = [episode_return(tr) for tr in traces]
    return float(np.mean(returns)), traces


def write_trace_csv(trace: RolloutTrace, path) -> None:
    """Trace rows at the planner rate; schema fixed for external plotting."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = (
            ["tick", "t"]
            + [f"q{i}" for i in range(7)]
            + [f"v{i}" for i in range(7)]
            + [f"u{i}" for i in range(4)]
            + ["fsm_mode", "stride", "h", "r"]
        )
        wr.writerow(header)
        for k in range(trace.ticks):
            row = (
                [k, repr(float(trace.t[k]))]
                + [repr(float(val)) for val in trace.q[k]]
                + [repr(float(val)) for val in trace.v[k]]
                + [repr(float(val)) for val in trace.u[k]]
                + [int(trace.fsm_mode[k]), repr(float(trace.stride_fb[k])),
                   repr(float(trace.h[k])), repr(float(trace.r[k]))]
            )
            wr.writerow(row)
