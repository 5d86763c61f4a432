"""Multi-agent lockstep runner, trajectory metrics and run reports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .comms import (
    Event,
    LinkModel,
    MessageUAV,
    ProtocolNode,
    deserialize,
    message_type,
    naive_broadcast_step,
    serialize,
)
from .fusion import collab_msckf_update, match_tracks, slam_slam_update, snapshot_from_state
from .place import Keyframe, build_vlad, should_create_keyframe, train_vocabulary
from .propagation import augment_window, propagate
from .sim import Scenario, TrackManager, generate_truth, load_scenario, synthesize_frame
from .state import IMU_DIM, CovarianceError, ImuState, initial_state, quat_exp, quat_mul, quat_normalize
from .vision import MSCKF, SLAM, MeasurementNoise, classify_tracks, msckf_update, remove_feature, slam_init_and_update

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MODES = ("independent", "collaborative", "naive")
MATCHING = ("descriptor", "oracle-id")
DIVERGENCE_LIMIT = 1e3
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: object  # Scenario or path
    mode: str = "collaborative"
    matching: str = "descriptor"
    out_dir: object = None
    seed: int | None = None
    enable_slam_slam: bool = True
    enable_collab_msckf: bool = True
    alignment: str = "none"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.matching not in MATCHING:
            raise ConfigError(f"matching must be one of {MATCHING}")
        if self.alignment not in ("none", "se3"):
            raise ConfigError("alignment must be 'none' or 'se3'")

    def load(self):
        scen = self.scenario if isinstance(self.scenario, Scenario) else load_scenario(self.scenario)
        if self.seed is not None:
            d = scen.to_dict()
            d["seed"] = int(self.seed)
            scen = Scenario.from_dict(d)
        return scen


# ---------------------------------------------------------------------------
# metrics


def _associate(t_est, t_true, tol=1e-3):
    t_true = np.asarray(t_true, float)
    idx = np.clip(np.searchsorted(t_true, t_est), 1, max(len(t_true) - 1, 1))
    pairs = []
    for k, t in enumerate(t_est):
        cands = [j for j in (idx[k] - 1, idx[k]) if 0 <= j < len(t_true)]
        j = min(cands, key=lambda j: abs(t_true[j] - t))
        if abs(t_true[j] - t) <= tol:
            pairs.append((k, j))
    return pairs


def umeyama_se3(src, dst):
    """Rotation and translation minimizing ``sum |R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    S = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(S)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def compute_ate(t_est, p_est, t_true, p_true, alignment="none"):
    """RMSE of position errors over timestamp-associated samples.

    Returns ``(rmse, errors)`` with per-sample error norms.
    """
    pairs = _associate(np.asarray(t_est, float), t_true)
    if not pairs:
        raise ValueError("no overlapping timestamps between estimate and truth")
    ki, ji = map(list, zip(*pairs))
    est = np.asarray(p_est, float)[ki]
    tru = np.asarray(p_true, float)[ji]
    if alignment == "se3":
        R, t = umeyama_se3(est, tru)
        est = est @ R.T + t
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    err = np.linalg.norm(est - tru, axis=1)
    return float(np.sqrt(np.mean(err**2))), err


NEES_BAND = (float(chi2.ppf(0.025, 3)), float(chi2.ppf(0.975, 3)))


def compute_nees(p_est, p_true, covs):
    """Position NEES per tick; returns ``(series, average, fraction_in_band)``.

    Ticks with a singular covariance are skipped (NaN in the series).
    """
    out = np.full(len(p_est), np.nan)
    for k, (e, P) in enumerate(zip(np.asarray(p_est) - np.asarray(p_true), covs)):
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            logger.debug("NEES tick %d skipped: singular covariance", k)
            continue
        y = np.linalg.solve(L, e)
        out[k] = y @ y
    ok = out[~np.isnan(out)]
    if len(ok) == 0:
        return out, float("nan"), float("nan")
    inside = np.mean((ok >= NEES_BAND[0]) & (ok <= NEES_BAND[1]))
    return out, float(np.mean(ok)), float(inside)


def bandwidth_report(protocol, naive):
    """Byte totals of two comparable reports and the protocol's reduction."""
    for key in ("scenario", "seed"):
        if protocol.get(key) != naive.get(key):
            raise ValueError(f"reports differ in {key}: cannot compare")
    bp = sum(v["bytes"] for v in protocol["bandwidth"].values())
    bn = sum(v["bytes"] for v in naive["bandwidth"].values())
    reduction = 1.0 - bp / bn if bn else 0.0
    return {
        "protocol": protocol["bandwidth"],
        "naive": naive["bandwidth"],
        "protocol_bytes": bp,
        "naive_bytes": bn,
        "reduction": reduction,
        "reduction_pct": f"{100 * reduction:.2f}%",
    }


# ---------------------------------------------------------------------------
# agent


@dataclass
class PendingMatch:
    local_track_id: int
    remote_track: object
    snapshot: object
    t_received: float


@dataclass
class Diagnostics:
    counts: dict = field(default_factory=dict)

    def add(self, group, info):
        g = self.counts.setdefault(group, {})
        for k, v in info.items():
            if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
                g[k] = g.get(k, 0) + int(v)


class Agent:
    def __init__(self, index, scenario, truth, landmarks, vocab, rng, peers):
        self.id = index
        self.scenario = scenario
        self.truth = truth
        self.landmarks = landmarks
        self.vocab = vocab
        self.rng = rng
        fs = scenario.filter
        self.noise = MeasurementNoise(max(scenario.camera.sigma_v, 1e-4))
        self.imu_noise = scenario.imu.noise_params()
        self.tracker = TrackManager(scenario.dropout, np.random.default_rng(rng.integers(2**63)))
        self.node = ProtocolNode(index, peers, scenario.comms.retrieval_threshold, scenario.comms.dedup_time)
        self.diag = Diagnostics()
        self.pending = []
        self.kf_position = None
        self.kf_count = 0
        self.history = {"t": [], "p": [], "p_true": [], "P": []}
        self.x = self._initial_state(fs)
        self.imu_t = np.array([s.t for s in truth.imu_samples])

    def _initial_state(self, fs):
        tr = self.truth
        sig = np.concatenate(
            [
                np.full(3, fs.sigma_p0),
                np.full(3, fs.sigma_v0),
                np.full(3, fs.sigma_theta0),
                np.full(3, max(self.scenario.imu.bias_g_init, 1e-6)),
                np.full(3, max(self.scenario.imu.bias_a_init, 1e-5)),
            ]
        )
        err = self.rng.normal(0, 1, IMU_DIM) * sig if self.scenario.initial_error else np.zeros(IMU_DIM)
        q = quat_normalize(quat_mul(tr.quats[0], quat_exp(err[6:9])))
        imu = ImuState(
            tr.positions[0] + err[0:3],
            tr.velocities[0] + err[3:6],
            q,
            tr.b_g[0] + err[9:12],
            tr.b_a[0] + err[12:15],
        )
        return initial_state(imu, np.diag(sig**2), fs.window_size, self.id, float(tr.frame_times[0]))

    def imu_slice(self, t0, t1):
        lo = max(np.searchsorted(self.imu_t, t0, side="right") - 1, 0)
        hi = np.searchsorted(self.imu_t, t1, side="left") + 1
        return self.truth.imu_samples[lo:hi]

    # -- per-frame pipeline ----------------------------------------------

    def vision_step(self, k, t, collab_msckf):
        """Propagate, clone, observe and run the single-agent updates."""
        if k > 0:
            self.x = propagate(self.x, self.imu_slice(self.x.time, t), t, self.imu_noise)
        self.x = augment_window(self.x, frame_id=k)
        obs = synthesize_frame(
            self.truth.positions[k], self.truth.quats[k], self.landmarks, self.scenario.camera, self.rng, self.scenario.p_flip
        )
        self.frame_descriptors = np.array([o.descriptor for o in obs]).reshape(-1, 32)
        active, finished = self.tracker.step(k, t, obs)
        fs = self.scenario.filter
        win = self.x.window

        # features whose track ended leave the state
        for tr in finished:
            if self.x.feature_index(tr.track_id) is not None:
                self.x = remove_feature(self.x, tr.track_id)
        slam_ids = [f.feature_id for f in self.x.features]
        active_c = classify_tracks(active, win, slam_ids, fs.track_baseline_min)
        finished_c = classify_tracks(finished, win, (), fs.track_baseline_min)

        slam_tracks = [tr for tr in active_c if tr.kind == SLAM]
        long_tracks = [tr for tr in active_c if tr.kind == MSCKF]
        # promotion preference: longest surviving track first
        candidates = sorted(long_tracks, key=lambda tr: (-len(tr), tr.track_id))
        self.x, info, promoted = slam_init_and_update(
            self.x, slam_tracks + candidates, self.noise, fs.max_slam_features, current_frame=k
        )
        self.diag.add("slam", info)
        promoted = set(promoted)
        msckf_tracks = [tr for tr in finished_c if tr.kind == MSCKF]
        msckf_tracks += [tr for tr in long_tracks if tr.track_id not in promoted]
        if msckf_tracks:
            self.x, info = msckf_update(self.x, msckf_tracks, self.noise)
            self.diag.add("msckf", info)
        consumed = [tr for tr in long_tracks if tr.track_id not in promoted]
        self.tracker.retire(tr.track_id for tr in consumed)
        if collab_msckf:
            self._run_pending(t, msckf_tracks)
        self.active_tracks = [tr for tr in active if tr.track_id not in {c.track_id for c in consumed}]

    def _run_pending(self, t, used_tracks):
        stale = self.scenario.comms.stale_time
        self.pending = [m for m in self.pending if t - m.t_received <= stale]
        used = {tr.track_id: tr for tr in used_tracks}
        by_snap = {}
        keep = []
        for m in self.pending:
            tr = used.get(m.local_track_id)
            if tr is None:
                keep.append(m)
                continue
            by_snap.setdefault(id(m.snapshot), (m.snapshot, []))[1].append((tr, m.remote_track))
        self.pending = keep
        for snap, pairs in by_snap.values():
            self.x, info = collab_msckf_update(self.x, snap, pairs, self.noise)
            self.diag.add("collab_msckf", info)

    def keyframe_step(self, k, t):
        p = self.x.window.positions[-1]
        C = self.x.window.rotation(len(self.x.window) - 1)
        depths = [(C @ (f.world_point(self.x.window) - p))[2] for f in self.x.features]
        depths = [z for z in depths if z > 0] or [max(abs(p[2]), 1.0)]
        if not should_create_keyframe(self.kf_position, p, depths, self.scenario.comms.keyframe_threshold):
            return
        snap = snapshot_from_state(self.x, self.active_tracks)
        vlad = build_vlad(self.frame_descriptors, self.vocab, t, self.id)
        self.node.keyframes.append(Keyframe(self.kf_count, vlad, snap, p.copy()))
        self.kf_count += 1
        self.kf_position = p.copy()

    def handle_response(self, t, msg, matching, slam_slam, collab_msckf):
        snap = msg.to_snapshot()
        if snap.agent_id == self.id:
            return
        if slam_slam and self.x.features and snap.features:
            local = [_FeatureRef(f.feature_id, f.descriptor, None) for f in self.x.features]
            remote = [_FeatureRef(j, f.descriptor, None) for j, f in enumerate(snap.features)]
            if matching == "oracle-id":
                local, remote = self._oracle_label(local), self._oracle_label(remote)
            matches = match_tracks(local, remote, mode=matching)
            pairs = [(local[m.local_index].track_id, remote[m.remote_index].track_id) for m in matches]
            if pairs:
                self.x, info = slam_slam_update(self.x, snap, pairs)
                info.pop("residuals", None)
                self.diag.add("slam_slam", info)
        if collab_msckf and snap.tracks:
            local = [tr for tr in self.active_tracks if len(tr.in_window(self.x.window)) >= 1]
            remote = self._oracle_label(snap.tracks) if matching == "oracle-id" else snap.tracks
            matches = match_tracks(local, remote, mode=matching)
            taken = {m.local_track_id for m in self.pending}
            for m in matches:
                lt = local[m.local_index]
                if lt.track_id in taken:
                    continue
                self.pending.append(PendingMatch(lt.track_id, snap.tracks[m.remote_index], snap, t))
            self.diag.add("matching", {"track_matches": len(matches)})

    def _oracle_label(self, items):
        """Attach the landmark id whose noiseless descriptor is nearest.

        Wire messages carry no ground-truth ids, so this stands in for them.
        """
        out = []
        for it in items:
            d = np.bitwise_count(self.landmarks.descriptors ^ np.asarray(it.descriptor, dtype=np.uint8)).sum(axis=1)
            out.append(replace(it, landmark_id=int(np.argmin(d))))
        return out

    def record(self, t):
        x = self.x
        self.history["t"].append(t)
        self.history["p"].append(x.imu.p_w_i.copy())
        self.history["P"].append(x.cov[0:3, 0:3].copy())


@dataclass
class _FeatureRef:
    """Adapter giving SLAM features the fields ``match_tracks`` reads."""

    track_id: int
    descriptor: np.ndarray
    landmark_id: int | None


# ---------------------------------------------------------------------------
# run


@dataclass
class RunReport:
    data: dict
    exit_code: int = EXIT_OK
    timings: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)
    link: object = None

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        if self.link is not None:
            self.link.export_csv(out / "bytes.csv")
        for aid, tr in self.trajectories.items():
            rows = ["t,px,py,pz,tx,ty,tz"]
            for t, p, q in zip(tr["t"], tr["p"], tr["p_true"]):
                rows.append(",".join(repr(float(v)) for v in (t, *p, *q)))
            (out / f"trajectory_agent{aid}.csv").write_text("\n".join(rows) + "\n")


_VOCAB_CACHE = {}


def scenario_vocabulary(scenario, landmarks):
    key = (scenario.seed, landmarks.descriptors.tobytes())
    if key not in _VOCAB_CACHE:
        _VOCAB_CACHE[key] = train_vocabulary(landmarks.descriptors, seed=scenario.seed)
    return _VOCAB_CACHE[key]


def _round(v, nd=12):
    return float(f"{float(v):.{nd}g}")


def _tick(agents, link, vocab, config, k, t, collab, collab_msckf, slam_slam):
    """One camera tick: single-agent vision, then message exchange and collaborative updates."""
    for ag in agents:
        ag.vision_step(k, t, collab_msckf)
        ag.keyframe_step(k, t)
    if not collab:
        return
    for m in link.deliver(t):
        ag = agents[m.receiver]
        msg = deserialize(m.payload)
        if m.msg_type == "request":
            for dest, out in ag.node.step(Event("request-received", t, msg)):
                link.send(t, ag.id, dest, message_type(out), serialize(out))
        else:
            ag.node.step(Event("response-received", t, msg))
            for t_rx, rmsg in ag.node.drain():
                ag.handle_response(t_rx, rmsg, config.matching, slam_slam, collab_msckf)
    for ag in agents:
        if config.mode == "collaborative":
            vlad = build_vlad(ag.frame_descriptors, vocab, t, ag.id)
            outgoing = ag.node.step(Event("frame-tick", t, vlad))
        else:
            snap = snapshot_from_state(ag.x, ag.active_tracks)
            outgoing = naive_broadcast_step(ag.node, t, MessageUAV.from_snapshot(snap))
        for dest, out in outgoing:
            link.send(t, ag.id, dest, message_type(out), serialize(out))


def run(config):
    """Execute one multi-agent run; returns a :class:`RunReport`."""
    wall = {"total": time.perf_counter()}
    scen = config.load()
    landmarks, truths = generate_truth(scen)
    vocab = scenario_vocabulary(scen, landmarks)
    U = len(truths)
    root = np.random.SeedSequence([scen.seed, 7])
    agent_rngs = [np.random.default_rng(s) for s in root.spawn(U)]
    agents = [Agent(i, scen, truths[i], landmarks, vocab, agent_rngs[i], range(U)) for i in range(U)]
    link = LinkModel(range(U), scen.comms.latency, scen.comms.drop_prob, seed=scen.seed)
    collab = config.mode != "independent"
    collab_msckf = collab and config.enable_collab_msckf
    slam_slam = collab and config.enable_slam_slam
    frame_times = truths[0].frame_times
    status = "ok"
    exit_code = EXIT_OK
    phase = {"tick": 0.0}

    for k, t in enumerate(frame_times):
        t = float(t)
        t0 = time.perf_counter()
        try:
            _tick(agents, link, vocab, config, k, t, collab, collab_msckf, slam_slam)
        except CovarianceError as exc:
            logger.error("covariance failure at t=%.3f: %s", t, exc)
            status, exit_code = "diverged", EXIT_DIVERGED
            break
        phase["tick"] += time.perf_counter() - t0
        diverged = False
        for ag in agents:
            ag.record(t)
            ag.history["p_true"].append(ag.truth.positions[k].copy())
            if not np.all(np.isfinite(ag.x.imu.p_w_i)) or np.linalg.norm(
                ag.x.imu.p_w_i - ag.truth.positions[k]
            ) > DIVERGENCE_LIMIT:
                diverged = True
        if diverged:
            status, exit_code = "diverged", EXIT_DIVERGED
            logger.error("divergence at t=%.3f", t)
            break

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": scen.name,
        "seed": scen.seed,
        "mode": config.mode,
        "matching": config.matching,
        "status": status,
        "frames": len(agents[0].history["t"]),
        "agents": [],
        "bandwidth": link.bytes_by_type(),
    }
    trajectories = {}
    for ag in agents:
        h = ag.history
        p, pt = np.array(h["p"]), np.array(h["p_true"])
        if len(p):
            rmse, err = compute_ate(h["t"], p, h["t"], pt, config.alignment)
            nees, nees_avg, nees_in = compute_nees(p, pt, h["P"])
        else:
            rmse, err, nees, nees_avg, nees_in = np.nan, np.array([np.nan]), [], np.nan, np.nan
        report["agents"].append(
            {
                "agent_id": ag.id,
                "ate_rmse": _round(rmse),
                "ate_mean": _round(np.mean(err)),
                "ate_std": _round(np.std(err)),
                "nees_avg": _round(nees_avg),
                "nees_in_band": _round(nees_in),
                "nees_series": [None if np.isnan(v) else _round(v) for v in nees],
                "keyframes": ag.kf_count,
                "updates": ag.diag.counts,
            }
        )
        trajectories[ag.id] = h
    wall["total"] = time.perf_counter() - wall["total"]
    wall.update(phase)
    rep = RunReport(report, exit_code, wall, trajectories, link)
    if config.out_dir is not None:
        rep.write(config.out_dir)
    return rep


__all__ = [
    "RunConfig",
    "RunReport",
    "ConfigError",
    "run",
    "compute_ate",
    "compute_nees",
    "bandwidth_report",
    "umeyama_se3",
    "NEES_BAND",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
]
