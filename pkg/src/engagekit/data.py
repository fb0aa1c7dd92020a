"""Session storage and the synthetic dyadic-conversation generator.

A session directory holds a `manifest.json` plus one binary matrix file per
feature stream and per role (`target/`, `partner/`), with frame labels as a
one-column matrix. The matrix container ("DATF") is 16 bytes of header --
magic, version, rows, cols, all little-endian -- followed by row-major
float32 payload, and round-trips bit-exactly.

The generator replaces the private challenge recordings: each speaker gets a
smoothed mean-reverting latent engagement level in [0, 1], the partner's
latent is coupled to the target's, and every feature stream is a fixed
random affine readout of (latent, latent velocity, 1) plus observation
noise. Everything is a pure function of (seed, session index).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .model import STREAMS, DEFAULT_FEATURE_DIMS

DATF_MAGIC = b"DATF"
DATF_VERSION = 1
SCHEMA_VERSION = 1

LABELS_FILE = "labels"
ROLE_IDS = {"target": 0, "partner": 1}


class DataFormatError(ValueError):
    """A file or directory does not satisfy the session storage contract."""


def write_matrix(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DataFormatError(f"write_matrix: need a 2-d array, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise DataFormatError("write_matrix: refusing to store non-finite values")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(DATF_MAGIC)
        f.write(struct.pack("<III", DATF_VERSION, rows, cols))
        f.write(payload)


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header, {len(raw)} bytes < 16")
    if raw[:4] != DATF_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, rows, cols = struct.unpack_from("<III", raw, 4)
    if version != DATF_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = rows * cols * 4
    actual = len(raw) - 16
    if actual != expected:
        raise DataFormatError(f"{path}: payload is {actual} bytes at offset 16, "
                              f"expected {expected} for {rows}x{cols}")
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    return data.reshape(rows, cols).copy()


@dataclass
class RoleData:
    streams: dict[str, np.ndarray]
    labels: np.ndarray | None = None


@dataclass
class SessionRecord:
    session_id: str
    num_frames: int
    roles: dict[str, RoleData]
    frame_rate_hz: float = 25.0

    def feature_dims(self) -> dict[str, int]:
        any_role = next(iter(self.roles.values()))
        return {name: arr.shape[1] for name, arr in any_role.streams.items()}

    def validate(self) -> None:
        if "target" not in self.roles:
            raise DataFormatError(f"session '{self.session_id}' has no target role")
        dims = None
        for role, data in self.roles.items():
            missing = [s for s in STREAMS if s not in data.streams]
            if missing:
                raise DataFormatError(f"session '{self.session_id}' role '{role}' is "
                                      f"missing streams {missing}")
            for name, arr in data.streams.items():
                if arr.ndim != 2 or arr.shape[0] != self.num_frames:
                    raise DataFormatError(
                        f"session '{self.session_id}' stream '{role}/{name}' has "
                        f"{arr.shape[0]} rows, expected {self.num_frames}")
            role_dims = {name: arr.shape[1] for name, arr in data.streams.items()}
            if dims is None:
                dims = role_dims
            elif role_dims != dims:
                raise DataFormatError(f"session '{self.session_id}' role '{role}' has "
                                      f"stream dims {role_dims}, other roles have {dims}")
            if data.labels is not None:
                labels = np.asarray(data.labels)
                if labels.shape != (self.num_frames,):
                    raise DataFormatError(
                        f"session '{self.session_id}' labels for '{role}' have shape "
                        f"{labels.shape}, expected ({self.num_frames},)")
                bad = np.where((labels < 0.0) | (labels > 1.0))[0]
                if bad.size:
                    raise DataFormatError(
                        f"session '{self.session_id}' label out of [0, 1] for role "
                        f"'{role}' at frame {int(bad[0])}: {float(labels[bad[0]])}")
        if self.roles["target"].labels is None:
            raise DataFormatError(f"session '{self.session_id}' target role must "
                                  f"carry labels")


def save_session(directory, record: SessionRecord) -> None:
    record.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "session_id": record.session_id,
        "frame_rate_hz": record.frame_rate_hz,
        "num_frames": record.num_frames,
        "feature_dims": record.feature_dims(),
        "roles": sorted(record.roles),
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    for role, data in record.roles.items():
        role_dir = directory / role
        role_dir.mkdir(exist_ok=True)
        for name, arr in data.streams.items():
            write_matrix(role_dir / f"{name}.datf", arr)
        if data.labels is not None:
            write_matrix(role_dir / f"{LABELS_FILE}.datf",
                         np.asarray(data.labels).reshape(-1, 1))


def load_session(directory) -> SessionRecord:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{directory}: no manifest.json")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(f"{directory}: unsupported schema_version "
                              f"{manifest.get('schema_version')}")
    num_frames = int(manifest["num_frames"])
    dims = manifest["feature_dims"]
    roles = {}
    for role in manifest["roles"]:
        role_dir = directory / role
        streams = {}
        for name in STREAMS:
            path = role_dir / f"{name}.datf"
            if not path.exists():
                raise DataFormatError(f"{directory}: missing stream file {role}/{name}.datf")
            arr = read_matrix(path)
            if arr.shape[1] != int(dims[name]):
                raise DataFormatError(f"{directory}: stream '{role}/{name}' has dim "
                                      f"{arr.shape[1]}, manifest says {dims[name]}")
            streams[name] = arr
        labels = None
        labels_path = role_dir / f"{LABELS_FILE}.datf"
        if labels_path.exists():
            labels = read_matrix(labels_path)[:, 0]
        roles[role] = RoleData(streams=streams, labels=labels)
    record = SessionRecord(
        session_id=manifest["session_id"],
        num_frames=num_frames,
        roles=roles,
        frame_rate_hz=float(manifest.get("frame_rate_hz", 25.0)),
    )
    record.validate()
    return record


def load_sessions(directory) -> list[SessionRecord]:
    """Load every session directory (one manifest.json each) under `directory`."""
    directory = Path(directory)
    if (directory / "manifest.json").exists():
        return [load_session(directory)]
    out = [load_session(p.parent) for p in sorted(directory.glob("*/manifest.json"))]
    if not out:
        raise DataFormatError(f"{directory}: no session directories found")
    return out


@dataclass
class SynthConfig:
    sessions: int = 5
    num_frames: int = 2000
    seed: int = 0
    mean_reversion: float = 0.05        # pull toward 0.5 per frame
    latent_noise: float = 0.05          # innovation std of the walk
    smooth_window: int = 9              # centered moving-average width
    partner_coupling: float = 0.6       # in [-1, 1]
    obs_noise: float = 0.5              # observation noise scale (see below)
    distortion_frac: float = 0.35       # portion of obs_noise that distorts the
                                        # perceived latent per stream (smooth,
                                        # common-mode; a linear probe cannot
                                        # average or project it away). 0.35
                                        # puts a frame-wise linear probe near
                                        # CCC 0.8 at the default dims.
    quantize_levels: int = 0            # 0 = continuous labels
    feature_dims: dict = field(default_factory=lambda: dict(DEFAULT_FEATURE_DIMS))
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        if not -1.0 <= self.partner_coupling <= 1.0:
            raise ValueError("partner_coupling must be in [-1, 1]")
        if self.quantize_levels < 0 or self.quantize_levels == 1:
            raise ValueError("quantize_levels must be 0 or >= 2")
        if self.smooth_window < 1:
            raise ValueError("smooth_window must be >= 1")
        if self.num_frames < 1 or self.sessions < 1:
            raise ValueError("need at least one frame and one session")
        if not 0.0 <= self.distortion_frac <= 1.0:
            raise ValueError("distortion_frac must be in [0, 1]")


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    # Centered moving average, truncated (not shrunk) at the series edges;
    # well defined for any series length, including shorter than the window.
    if window <= 1 or x.size <= 1:
        return x
    idx = np.arange(x.size)
    lo = np.maximum(idx - (window - 1) // 2, 0)
    hi = np.minimum(idx + window // 2 + 1, x.size)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    return (csum[hi] - csum[lo]) / (hi - lo)

def _latent_walk(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    e = np.empty(cfg.num_frames)
    e[0] = rng.uniform(0.2, 0.8)
    steps = rng.standard_normal(cfg.num_frames - 1) * cfg.latent_noise
    for t in range(cfg.num_frames - 1):
        e[t + 1] = np.clip(e[t] + cfg.mean_reversion * (0.5 - e[t]) + steps[t], 0.0, 1.0)
    return _smooth(e, cfg.smooth_window)


def _readout_matrix(seed: int, role: str, stream: str, dim: int) -> np.ndarray:
    # Fixed per (seed, role, stream): every session of one corpus shares the
    # same latent-to-feature mapping, otherwise there is nothing to learn.
    rng = np.random.default_rng([seed, ROLE_IDS[role], STREAMS.index(stream), 0xA])
    return rng.standard_normal((3, dim))


def _quantize(labels: np.ndarray, levels: int) -> np.ndarray:
    if levels == 0:
        return labels
    return np.round(labels * (levels - 1)) / (levels - 1)


def synth_session(cfg: SynthConfig, session_index: int) -> SessionRecord:
    """Deterministic synthetic dyad: every byte is a function of
    (cfg.seed, session_index)."""
    rng_target = np.random.default_rng([cfg.seed, session_index, 1])
    rng_partner = np.random.default_rng([cfg.seed, session_index, 2])
    target_latent = _latent_walk(rng_target, cfg)
    indep = _latent_walk(rng_partner, cfg)
    rho = cfg.partner_coupling
    partner_latent = np.clip(rho * target_latent + (1.0 - abs(rho)) * indep, 0.0, 1.0)

    distortion_std = cfg.obs_noise * cfg.distortion_frac
    roles = {}
    for role, latent in (("target", target_latent), ("partner", partner_latent)):
        streams = {}
        for name in STREAMS:
            dim = cfg.feature_dims[name]
            readout = _readout_matrix(cfg.seed, role, name, dim)
            noise_rng = np.random.default_rng(
                [cfg.seed, session_index, ROLE_IDS[role], STREAMS.index(name), 0xF])
            # Each stream perceives a smoothly distorted latent: the stream's
            # whole readout moves with e + nu, so neither averaging the dims
            # nor any projection can separate nu from e within the stream.
            # High-dim white noise, by contrast, averages out entirely.
            observed = latent
            if distortion_std > 0 and cfg.num_frames > 1:
                nu = _latent_walk(noise_rng, cfg)
                nu = (nu - nu.mean()) / max(nu.std(), 1e-12)
                observed = latent + distortion_std * nu
            velocity = np.diff(observed, prepend=observed[0])
            drivers = np.stack([observed, velocity, np.ones_like(observed)], axis=1)
            white = noise_rng.standard_normal((cfg.num_frames, dim)) * cfg.obs_noise
            streams[name] = drivers @ readout + white
        roles[role] = RoleData(streams=streams,
                               labels=_quantize(latent, cfg.quantize_levels))
    return SessionRecord(
        session_id=f"synth-{cfg.seed:04d}-{session_index:03d}",
        num_frames=cfg.num_frames,
        roles=roles,
        frame_rate_hz=cfg.frame_rate_hz,
    )


def synth_corpus(cfg: SynthConfig, out_dir, start_index: int = 0) -> list[Path]:
    """Write cfg.sessions synthetic sessions under out_dir; returns the paths.

    The latent-to-feature readouts depend on the seed only, so corpora from
    one seed share a feature space: generate train and validation splits with
    the same seed and disjoint index ranges (e.g. indices 0..4 and 5).
    """
    out_dir = Path(out_dir)
    paths = []
    for i in range(start_index, start_index + cfg.sessions):
        record = synth_session(cfg, i)
        path = out_dir / f"session_{i:03d}"
        save_session(path, record)
        paths.append(path)
    with open(out_dir / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump({**asdict(cfg), "start_index": start_index}, f, indent=2, sort_keys=True)
    return paths


def partner_aggregate(partners: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Frame-wise mean across several partners' stream sets (multi-party
    adaptation); identity for a single partner."""
    if not partners:
        raise ValueError("need at least one partner")
    if len(partners) == 1:
        return partners[0]
    first = partners[0]
    for other in partners[1:]:
        for name in first:
            if other[name].shape != first[name].shape:
                raise ValueError(f"partner stream '{name}' shapes disagree: "
                                 f"{other[name].shape} vs {first[name].shape}")
    return {name: np.mean([p[name] for p in partners], axis=0) for name in first}
