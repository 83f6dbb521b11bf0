"""Raycast scene rendering.

The world is planar: striped wall segments of finite height plus spherical
objects whose surface stripes run either around the azimuth ("vertical"
stripes, the goal) or along the elevation ("horizontal", the adversaries).
Each eye renders a grid of square angular pixels centered on its outward
normal.  Padded renders extend the grid by (res+1) cells per axis at the same
angular pitch so corner photoreceptors can receive blurred light from outside
the nominal field of view; the unpadded render is exactly the central crop of
the padded one by construction.

The inner loop is a numba kernel (scalar, fastmath off, so results are
deterministic); rendering dominates the training budget otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

_EPS = 1e-9
_FAR = 1e12                # finite stand-in for "no hit" to keep arithmetic NaN-free
_RAY_ORIGIN_SHRINK = 0.99  # keep ray origins strictly inside the body radius


@dataclass(frozen=True)
class WallGeometry:
    """Vectorized wall bundle: segments with vertical striped texture."""

    a: np.ndarray            # (S, 2) segment start
    m: np.ndarray            # (S, 2) segment vector (b - a)
    length: np.ndarray       # (S,)
    stripe_freq: np.ndarray  # (S,) cycles per world unit along the wall; 0 = flat
    stripe_phase: np.ndarray
    albedo_lo: np.ndarray
    albedo_hi: np.ndarray
    half_height: float


@dataclass(frozen=True)
class EyeGrid:
    """Precomputed per-eye ray layout shared by every render call."""

    eye_angles_rad: np.ndarray   # (E,) offsets from heading
    col_offsets: np.ndarray      # (Wp,) azimuth offsets, padded grid
    tan_rows: np.ndarray         # (Hp,) tangent of elevation per padded row
    cos_rows: np.ndarray         # (Hp,)
    sin_rows: np.ndarray         # (Hp,)
    res_h: int
    res_w: int

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.tan_rows.size, self.col_offsets.size

    @property
    def crop(self) -> tuple[slice, slice]:
        h0 = (self.res_h + 1) // 2
        w0 = (self.res_w + 1) // 2
        return slice(h0, h0 + self.res_h), slice(w0, w0 + self.res_w)


def make_eye_grid(eye_angles_deg: np.ndarray, fov_deg: float, res_h: int, res_w: int) -> EyeGrid:
    """Square angular pixels: pitch = fov / max(res_w, res_h) on both axes."""
    pitch = np.radians(fov_deg) / max(res_w, res_h)
    hp, wp = res_h + res_h + 1, res_w + res_w + 1
    cols = (np.arange(wp) + 0.5 - wp / 2.0) * pitch
    rows = (np.arange(hp) + 0.5 - hp / 2.0) * pitch
    # positive row index looks downward; elevation beta = -row angle
    beta = -rows
    return EyeGrid(
        eye_angles_rad=np.radians(np.asarray(eye_angles_deg, dtype=float)),
        col_offsets=cols,
        tan_rows=np.tan(beta),
        cos_rows=np.cos(beta),
        sin_rows=np.sin(beta),
        res_h=res_h,
        res_w=res_w,
    )


@numba.njit(cache=True, fastmath=False)
def _render_kernel(a_seg, m_seg, seg_len, freq, phase, alo, ahi, half_h,
                   origin, eye_dir, env_of, wall_variant, col_off,
                   tan_rows, cos_rows, sin_rows,
                   obj_pos, obj_radius, obj_az, obj_cyc, obj_lo, obj_hi,
                   background, albedo, depth):
    # a_seg/m_seg have a leading variant axis (e.g. base and mirrored maze);
    # wall_variant[env] picks the wall set each environment lives in
    ne = origin.shape[0]
    wp = col_off.shape[0]
    hp = tan_rows.shape[0]
    ns = a_seg.shape[1]
    nk = obj_radius.shape[0]
    two_pi = 2.0 * np.pi
    for i in range(ne):
        ox = origin[i, 0]
        oy = origin[i, 1]
        env = env_of[i]
        var = wall_variant[env]
        for j in range(wp):
            alpha = eye_dir[i] + col_off[j]
            dx = np.cos(alpha)
            dy = np.sin(alpha)
            t_wall = _FAR
            s_hit = 0.0
            widx = -1
            for s in range(ns):
                mx = m_seg[var, s, 0]
                my = m_seg[var, s, 1]
                denom = dx * my - dy * mx
                if abs(denom) < _EPS:
                    denom = _EPS
                aox = a_seg[var, s, 0] - ox
                aoy = a_seg[var, s, 1] - oy
                t = (aox * my - aoy * mx) / denom
                u = (aox * dy - aoy * dx) / denom
                if t > _EPS and 0.0 <= u <= 1.0 and t < t_wall:
                    t_wall = t
                    s_hit = u
                    widx = s
            wall_albedo = background
            if widx >= 0:
                if freq[widx] > 0.0:
                    fr = (s_hit * seg_len[widx] * freq[widx] + phase[widx]) % 1.0
                    wall_albedo = ahi[widx] if fr < 0.5 else alo[widx]
                else:
                    wall_albedo = ahi[widx]
            for r in range(hp):
                alb = background
                dep = _FAR
                if widx >= 0 and abs(t_wall * tan_rows[r]) <= half_h:
                    alb = wall_albedo
                    dep = t_wall / cos_rows[r]
                d3x = cos_rows[r] * dx
                d3y = cos_rows[r] * dy
                for q in range(nk):
                    ocx = ox - obj_pos[env, q, 0]
                    ocy = oy - obj_pos[env, q, 1]
                    b = d3x * ocx + d3y * ocy
                    disc = b * b - (ocx * ocx + ocy * ocy - obj_radius[q] * obj_radius[q])
                    if disc >= 0.0:
                        t = -b - np.sqrt(disc)
                        if t > _EPS and t < dep:
                            if obj_az[q]:
                                px = ocx + t * d3x
                                py = ocy + t * d3y
                                coord = np.arctan2(py, px) / two_pi + 0.5
                            else:
                                v = t * sin_rows[r] / obj_radius[q]
                                if v > 1.0:
                                    v = 1.0
                                elif v < -1.0:
                                    v = -1.0
                                coord = np.arcsin(v) / np.pi + 0.5
                            fr = (coord * obj_cyc[q]) % 1.0
                            alb = obj_hi if fr < 0.5 else obj_lo
                            dep = t
                albedo[i, r, j] = alb
                depth[i, r, j] = dep


def render_scene_batch(
    walls: WallGeometry,
    grid: EyeGrid,
    agent_pos: np.ndarray,       # (N, 2)
    agent_heading: np.ndarray,   # (N,)
    body_radius: float,
    obj_pos: np.ndarray,         # (N, K, 2), K may be 0
    obj_radius: np.ndarray,      # (K,)
    obj_axis_azimuth: np.ndarray,  # (K,) bool: stripes vary with azimuth
    obj_cycles: np.ndarray,      # (K,)
    obj_lo: float,
    obj_hi: float,
    background: float,
    wall_variants: tuple[np.ndarray, np.ndarray] | None = None,
    wall_variant_of: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Albedo and depth, shape (N, E, Hp, Wp), for every env and eye.

    wall_variants optionally provides stacked (V, S, 2) a/m arrays (e.g. the
    base and mirrored maze); wall_variant_of[env] selects per environment.
    """
    n = agent_pos.shape[0]
    e = grid.eye_angles_rad.size
    hp, wp = grid.padded_shape

    eye_dir = (agent_heading[:, None] + grid.eye_angles_rad[None, :]).reshape(-1)
    eye_u = np.stack([np.cos(eye_dir), np.sin(eye_dir)], axis=-1)
    origin = np.repeat(agent_pos, e, axis=0) + body_radius * _RAY_ORIGIN_SHRINK * eye_u
    env_of = np.repeat(np.arange(n), e)
    if wall_variants is None:
        a_seg = walls.a[None, :, :]
        m_seg = walls.m[None, :, :]
        variant_of = np.zeros(n, dtype=np.int64)
    else:
        a_seg, m_seg = wall_variants
        variant_of = wall_variant_of.astype(np.int64)

    albedo = np.empty((n * e, hp, wp))
    depth = np.empty((n * e, hp, wp))
    _render_kernel(np.ascontiguousarray(a_seg), np.ascontiguousarray(m_seg),
                   walls.length, walls.stripe_freq, walls.stripe_phase,
                   walls.albedo_lo, walls.albedo_hi, walls.half_height,
                   origin, eye_dir, env_of, variant_of, grid.col_offsets,
                   grid.tan_rows, grid.cos_rows, grid.sin_rows,
                   obj_pos, obj_radius, obj_axis_azimuth, obj_cycles,
                   float(obj_lo), float(obj_hi), float(background),
                   albedo, depth)
    albedo = albedo.reshape(n, e, hp, wp)
    depth = depth.reshape(n, e, hp, wp)
    return albedo, np.where(depth >= _FAR, np.inf, depth)
