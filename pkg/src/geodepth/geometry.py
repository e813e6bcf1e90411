"""Rigid transforms, pinhole cameras and the target-to-source reprojection map.

Extrinsics are world-to-camera throughout (COLMAP's native convention):
``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalise quaternion {q!r}")
    q = q / n
    # q and -q encode the same rotation; keep w >= 0 so equality is meaningful
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray

    def __post_init__(self):
        q = _canonical(self.quat)
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Rotation:
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __matmul__(self, other: Rotation) -> Rotation:
        return Rotation(_quat_mul(self.quat, other.quat))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix().T

    def angle(self) -> float:
        return 2.0 * float(np.arctan2(np.linalg.norm(self.quat[1:]), self.quat[0]))

    def as_axis_angle(self) -> np.ndarray:
        n = np.linalg.norm(self.quat[1:])
        if n < 1e-12:
            return 2.0 * self.quat[1:].copy()
        return self.angle() * self.quat[1:] / n

    def __repr__(self):
        return f"Rotation(quat={self.quat.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def inverse(self) -> Pose:
        r_inv = self.rotation.inverse()
        return Pose(r_inv, -r_inv.apply(self.translation))

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return self.inverse().translation.copy()

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __repr__(self):
        return f"Pose(quat={self.rotation.quat.tolist()}, t={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation.apply(b.translation) + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def relative_pose(e_t: Pose, e_s: Pose) -> Pose:
    """Target-camera to source-camera transform ``E_s @ E_t^-1``."""
    return compose(e_s, e_t.inverse())


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion for tiny angles."""
    v = np.asarray(v, dtype=float)
    th2 = float(v @ v)
    k = skew(v)
    if th2 < _SMALL_ANGLE**2:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * k + b * (k @ k)


def so3_exp_jacobian(v: np.ndarray) -> np.ndarray:
    """Derivatives ``dR/dv_i`` of the exponential map, shape (3, 3, 3).

    Closed form of Gallego & Yezzi; reduces to the generators at ``v = 0``.
    """
    v = np.asarray(v, dtype=float)
    th2 = float(v @ v)
    eye = np.eye(3)
    if th2 < _SMALL_ANGLE**2:
        # first-order expansion: R ~ I + [v]x + [v]x^2 / 2
        k = skew(v)
        out = np.empty((3, 3, 3))
        for i in range(3):
            ei = skew(eye[i])
            out[i] = ei + 0.5 * (ei @ k + k @ ei)
        return out
    r = so3_exp(v)
    out = np.empty((3, 3, 3))
    for i in range(3):
        c = np.cross(v, (eye - r) @ eye[i])
        out[i] = (v[i] * skew(v) + skew(c)) @ r / th2
    return out


def axis_angle_to_rotation(v: np.ndarray) -> Rotation:
    v = np.asarray(v, dtype=float)
    th = float(np.linalg.norm(v))
    if th < _SMALL_ANGLE:
        q = np.array([1.0 - th * th / 8.0, *(0.5 * v)])
    else:
        q = np.array([np.cos(th / 2), *(np.sin(th / 2) * v / th)])
    return Rotation(q)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera; pixel ``(u, v)`` has its centre at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def scaled(self, factor: float) -> Intrinsics:
        # keeps pixel-centre convention: u' = (u + 0.5) * f - 0.5
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def pixel_rays(self) -> np.ndarray:
        """``K^-1 [u, v, 1]`` for every pixel, shape (H, W, 3); z component is 1."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def reproject(p_t, depth, k: Intrinsics, pose: Pose):
    """Map target pixel(s) with known depth into continuous source coordinates.

    Returns ``(uv, valid)``; ``valid`` is False where the point lands behind the
    source camera. Out-of-image coordinates are returned as-is.
    """
    p_t = np.asarray(p_t, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    ph = np.concatenate([p_t, np.ones(p_t.shape[:-1] + (1,))], axis=-1)
    x = depth[..., None] * (ph @ k.K_inv.T)
    y = x @ pose.R.T + pose.translation
    z = y[..., 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * y[..., 0] / safe + k.cx, k.fy * y[..., 1] / safe + k.cy], axis=-1)
    return uv, valid
