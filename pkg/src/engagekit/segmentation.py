"""Windowed segmentation of a session timeline and exact reassembly.

A session of T frames is cut into ceil(T/s) windows. Window k supervises the
core frames [k*s, min((k+1)*s, T)) and additionally sees a context halo of l
frames on each side, so every window has the fixed length s + 2l. Frames
outside [0, T) are filled by edge replication. Cores tile the timeline with
no overlap, which makes reassembly a straight copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    """One inference window. `start`/`end` are in session coordinates and may
    spill outside [0, T); `core_*` never do."""

    index: int
    start: int
    end: int
    core_start: int
    core_end: int
    left_pad: int
    right_pad: int

    @property
    def window_len(self) -> int:
        return self.end - self.start

    @property
    def core_len(self) -> int:
        return self.core_end - self.core_start

    @property
    def core_offset(self) -> int:
        """Window-local position of the first core frame (== context_len)."""
        return self.core_start - self.start


def make_segments(num_frames: int, core_len: int, context_len: int) -> list[Segment]:
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if core_len < 1 or context_len < 0:
        raise ValueError(f"need core_len >= 1 and context_len >= 0, got "
                         f"{core_len}/{context_len}")
    segments = []
    n = -(-num_frames // core_len)  # ceil
    for k in range(n):
        core_start = k * core_len
        core_end = min(core_start + core_len, num_frames)
        start = core_start - context_len
        end = core_start + core_len + context_len
        segments.append(Segment(
            index=k,
            start=start,
            end=end,
            core_start=core_start,
            core_end=core_end,
            left_pad=max(0, -start),
            right_pad=max(0, end - num_frames),
        ))
    return segments


def window_indices(segment: Segment, num_frames: int) -> np.ndarray:
    """Frame indices for the window with edge replication outside [0, T)."""
    return np.clip(np.arange(segment.start, segment.end), 0, num_frames - 1)


def core_mask(segment: Segment) -> np.ndarray:
    """Boolean [window_len] mask of the supervised (real core) positions."""
    mask = np.zeros(segment.window_len, dtype=bool)
    off = segment.core_offset
    mask[off:off + segment.core_len] = True
    return mask


def extract_window(session, segment: Segment, role: str) -> dict[str, np.ndarray]:
    """Gather one role's feature rows over a window; replicated at the edges."""
    if role not in session.roles:
        raise KeyError(f"session '{session.session_id}' has no role '{role}'")
    idx = window_indices(segment, session.num_frames)
    return {name: arr[idx] for name, arr in session.roles[role].streams.items()}


def window_labels(session, segment: Segment, role: str = "target") -> np.ndarray:
    labels = session.roles[role].labels
    if labels is None:
        raise ValueError(f"role '{role}' of session '{session.session_id}' has no labels")
    return labels[window_indices(segment, session.num_frames)]


@dataclass
class WindowBatch:
    """A stack of equal-length windows ready for the model: per-stream arrays
    of shape [B, L, dim] for each role, plus window labels and the supervised
    core mask, both [B, L]."""

    target: dict[str, np.ndarray]
    partner: dict[str, np.ndarray]
    labels: np.ndarray
    mask: np.ndarray
    segments: list[Segment]


def build_mixed_batch(items) -> WindowBatch:
    """Stack (session, segment) pairs -- possibly from different sessions --
    into one WindowBatch. All windows share the length s + 2l, so mixing is a
    plain stack."""
    items = list(items)
    if not items:
        raise ValueError("empty window batch")
    target_rows = [extract_window(session, seg, "target") for session, seg in items]
    has_partner = all("partner" in session.roles for session, _ in items)
    partner_rows = ([extract_window(session, seg, "partner") for session, seg in items]
                    if has_partner else None)
    first = target_rows[0]
    stack = lambda rows, name: np.stack([r[name] for r in rows])
    return WindowBatch(
        target={name: stack(target_rows, name) for name in first},
        partner=({name: stack(partner_rows, name) for name in first}
                 if has_partner else None),
        labels=np.stack([window_labels(session, seg) for session, seg in items]),
        mask=np.stack([core_mask(seg) for _, seg in items]),
        segments=[seg for _, seg in items],
    )


def build_window_batch(session, segments: list[Segment]) -> WindowBatch:
    return build_mixed_batch((session, seg) for seg in segments)


def reassemble(per_segment_preds, segments: list[Segment], num_frames: int) -> np.ndarray:
    """Stitch per-window predictions back to a [T] series by copying each
    segment's core region; context and padded tail frames are discarded."""
    if len(per_segment_preds) != len(segments):
        raise ValueError(f"got {len(per_segment_preds)} prediction arrays for "
                         f"{len(segments)} segments")
    out = np.full(num_frames, np.nan)
    for pred, seg in zip(per_segment_preds, segments):
        pred = np.asarray(pred).reshape(seg.window_len, -1)[:, 0]
        off = seg.core_offset
        out[seg.core_start:seg.core_end] = pred[off:off + seg.core_len]
    if np.isnan(out).any():
        raise ValueError("segment cores do not tile the timeline")
    return out
