"""Spatio-temporal Gaussian primitives.

A scene is a flat set of anisotropic 3D Gaussians. Each primitive carries a
constant world-space velocity and a temporal opacity envelope: it drifts
linearly away from its temporal center and fades with a Gaussian falloff in
time. Evaluating the set at a fixed time yields ordinary 3D Gaussians
(position + effective opacity) that the rasterizer consumes, so a scene with
zero velocities and huge temporal extents degenerates to a static splat
cloud.

All arrays are float64 in memory; persistence narrows to float32.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

# Primitives whose temporal extent reaches this value are treated as
# permanently visible: the temporal falloff is exactly 1.0 and its time
# derivatives are exactly 0. Without the cutoff, exp(-(t/1e6)^2) differs
# from 1.0 by a few ulps and "static" scenes would not render bit-identically
# across times.
STATIC_EXTENT_CUTOFF = 1.0e6

# Floor for temporal extents; training clamps here after every step.
MIN_TEMPORAL_EXTENT = 1.0e-4

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: np.ndarray | float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


@dataclass(frozen=True)
class TimeSample:
    """A frame index paired with its normalized time in [0, 1]."""

    frame_index: int
    t: float


def frame_time(frame_index: int, num_frames: int) -> float:
    """Normalized time of a frame; a single-frame sequence sits at t=0."""
    if num_frames <= 1:
        return 0.0
    return frame_index / (num_frames - 1)


def frame_duration(num_frames: int) -> float:
    """Normalized time between consecutive frames (1.0 for single-frame)."""
    if num_frames <= 1:
        return 1.0
    return 1.0 / (num_frames - 1)


@dataclass
class SplatSet:
    """Learnable primitive arrays. Field order is the persistence order."""

    position: np.ndarray        # (N, 3) world meters
    rotation: np.ndarray        # (N, 4) quaternion (w, x, y, z)
    log_scale: np.ndarray       # (N, 3) log of per-axis standard deviation
    sh: np.ndarray              # (N, B, 3) spherical-harmonic coefficients
    opacity_logit: np.ndarray   # (N,)
    velocity: np.ndarray        # (N, 3) meters per unit normalized time
    temporal_center: np.ndarray  # (N,) normalized time
    temporal_extent: np.ndarray  # (N,) > 0, normalized time
    is_static: np.ndarray       # (N,) bool, informational label from seeding

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def sh_degree(self) -> int:
        basis = self.sh.shape[1]
        degree = int(round(np.sqrt(basis))) - 1
        if (degree + 1) ** 2 != basis:
            raise ValueError(f"sh basis size {basis} is not a square")
        return degree

    def validate(self) -> None:
        n = self.count
        shapes = {
            "position": (n, 3),
            "rotation": (n, 4),
            "log_scale": (n, 3),
            "opacity_logit": (n,),
            "velocity": (n, 3),
            "temporal_center": (n,),
            "temporal_extent": (n,),
            "is_static": (n,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"sh has shape {self.sh.shape}, expected (N, B, 3)")
        self.sh_degree
        if not np.all(self.temporal_extent > 0):
            raise ValueError("temporal_extent must be positive")
        for f in fields(self):
            arr = getattr(self, f.name)
            if f.name != "is_static" and not np.all(np.isfinite(arr)):
                raise ValueError(f"{f.name} contains non-finite values")

    def copy(self) -> "SplatSet":
        return SplatSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, index: np.ndarray) -> "SplatSet":
        """Row subset / reorder; used by densification and pruning."""
        return SplatSet(**{f.name: getattr(self, f.name)[index].copy() for f in fields(self)})

    @staticmethod
    def concatenate(parts: list["SplatSet"]) -> "SplatSet":
        kw = {}
        for f in fields(SplatSet):
            kw[f.name] = np.concatenate([getattr(p, f.name) for p in parts], axis=0)
        return SplatSet(**kw)


def empty_splats(n: int = 0, sh_degree: int = 0) -> SplatSet:
    b = (sh_degree + 1) ** 2
    return SplatSet(
        position=np.zeros((n, 3)),
        rotation=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scale=np.zeros((n, 3)),
        sh=np.zeros((n, b, 3)),
        opacity_logit=np.zeros(n),
        velocity=np.zeros((n, 3)),
        temporal_center=np.zeros(n),
        temporal_extent=np.full(n, 2.0),
        is_static=np.ones(n, dtype=bool),
    )


@dataclass
class InstantSplats:
    """A SplatSet frozen at one time: drifted centers, faded opacities."""

    position_t: np.ndarray   # (N, 3)
    opacity_t: np.ndarray    # (N,) in [0, 1]
    rotation: np.ndarray     # view of parent
    log_scale: np.ndarray    # view of parent
    sh: np.ndarray           # view of parent

    @property
    def count(self) -> int:
        return self.position_t.shape[0]


def _temporal_envelope(splats: SplatSet, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian falloff exp(-(t-center)^2/extent^2) and its static mask."""
    d = t - splats.temporal_center
    static = splats.temporal_extent >= STATIC_EXTENT_CUTOFF
    g = np.exp(-(d * d) / (splats.temporal_extent * splats.temporal_extent))
    g[static] = 1.0
    return g, static


def evaluate_at_time(splats: SplatSet, t: float) -> InstantSplats:
    """Drift positions along velocity and fade opacity around the center.

    position(t) = position + velocity * (t - center)
    opacity(t)  = sigmoid(opacity_logit) * exp(-(t - center)^2 / extent^2)
    """
    if not np.isfinite(t):
        raise ValueError(f"non-finite evaluation time {t}")
    d = (t - splats.temporal_center)[:, None]
    g, _ = _temporal_envelope(splats, t)
    return InstantSplats(
        position_t=splats.position + splats.velocity * d,
        opacity_t=sigmoid(splats.opacity_logit) * g,
        rotation=splats.rotation,
        log_scale=splats.log_scale,
        sh=splats.sh,
    )


@dataclass
class TimeGradients:
    """Partials of the instant quantities w.r.t. the temporal parameters.

    Position partials omitted where trivial: d position(t) / d position = I
    and d position(t) / d velocity = (t - center) * I, so only the scalar
    factor is stored.
    """

    dposition_dvelocity: np.ndarray  # (N,) scalar factor (t - center)
    dposition_dcenter: np.ndarray    # (N, 3) = -velocity
    dposition_dt: np.ndarray         # (N, 3) = velocity
    dopacity_dlogit: np.ndarray      # (N,)
    dopacity_dcenter: np.ndarray     # (N,)
    dopacity_dextent: np.ndarray     # (N,)
    dopacity_dt: np.ndarray          # (N,)


def evaluate_time_gradients(splats: SplatSet, t: float) -> TimeGradients:
    """Analytic partials matching :func:`evaluate_at_time`."""
    d = t - splats.temporal_center
    s = sigmoid(splats.opacity_logit)
    g, static = _temporal_envelope(splats, t)
    tau2 = splats.temporal_extent * splats.temporal_extent
    # d/dcenter of exp(-d^2/tau^2) = g * 2d/tau^2; d/dt is its negative.
    dg_dcenter = np.where(static, 0.0, g * 2.0 * d / tau2)
    dg_dextent = np.where(static, 0.0, g * 2.0 * d * d / (tau2 * splats.temporal_extent))
    return TimeGradients(
        dposition_dvelocity=d,
        dposition_dcenter=-splats.velocity,
        dposition_dt=splats.velocity.copy(),
        dopacity_dlogit=s * (1.0 - s) * g,
        dopacity_dcenter=s * dg_dcenter,
        dopacity_dextent=s * dg_dextent,
        dopacity_dt=-s * dg_dcenter,
    )


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical-harmonic basis values for unit directions.

    :param dirs: (N, 3) unit vectors.
    :param degree: max band, 0..3.
    :return: (N, (degree+1)^2) basis values.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree {degree} out of supported range 0..3")
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b = np.empty((n, (degree + 1) ** 2))
    b[:, 0] = SH_C0
    if degree >= 1:
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[:, 4] = SH_C2[0] * x * y
        b[:, 5] = SH_C2[1] * y * z
        b[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        b[:, 7] = SH_C2[3] * x * z
        b[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        b[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        b[:, 10] = SH_C3[1] * x * y * z
        b[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        b[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        b[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        b[:, 14] = SH_C3[5] * z * (xx - yy)
        b[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_gradient(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (N, (degree+1)^2, 3)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree {degree} out of supported range 0..3")
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = -2.0 * SH_C2[2] * x
        g[:, 6, 1] = -2.0 * SH_C2[2] * y
        g[:, 6, 2] = 4.0 * SH_C2[2] * z
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = 2.0 * SH_C2[4] * x
        g[:, 8, 1] = -2.0 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = 6.0 * SH_C3[0] * x * y
        g[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = -2.0 * SH_C3[2] * x * y
        g[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[:, 11, 2] = 8.0 * SH_C3[2] * y * z
        g[:, 12, 0] = -6.0 * SH_C3[3] * x * z
        g[:, 12, 1] = -6.0 * SH_C3[3] * y * z
        g[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[:, 13, 1] = -2.0 * SH_C3[4] * x * y
        g[:, 13, 2] = 8.0 * SH_C3[4] * x * z
        g[:, 14, 0] = 2.0 * SH_C3[5] * x * z
        g[:, 14, 1] = -2.0 * SH_C3[5] * y * z
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[:, 15, 1] = -6.0 * SH_C3[6] * x * y
    return g


def sh_to_color(sh: np.ndarray, dirs: np.ndarray, degree: int | None = None) -> np.ndarray:
    """View-dependent RGB from SH coefficients, clamped to [0, 1].

    :param sh: (N, B, 3) coefficients.
    :param dirs: (N, 3) unit view directions (primitive minus camera center).
    :param degree: bands to evaluate; defaults to all bands present.
    :return: (N, 3) colors.
    """
    full = int(round(np.sqrt(sh.shape[1]))) - 1
    if degree is None:
        degree = full
    basis = sh_basis(dirs, degree)
    raw = 0.5 + np.einsum("nb,nbc->nc", basis, sh[:, : basis.shape[1], :])
    return np.clip(raw, 0.0, 1.0)
