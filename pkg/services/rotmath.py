"""
Rotation algebra shared by every other module.

Rotations are 3x3 matrices (RotM) or their 6D encodings (Rot6: the first two
matrix columns, column-major). All functions accept arbitrary leading batch
axes and work in double precision.
"""

import numpy as np

from services.errors import DegenerateInput

DEGENERATE_EPS = 1e-12
RANK_EPS = 1e-9


def identity_6d() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def sixd_encode(R: np.ndarray) -> np.ndarray:
    """
    Encode rotation matrices as 6D vectors.

    Args:
        R: (..., 3, 3) rotation matrices

    Returns:
        (..., 6) array holding column 0 followed by column 1
    """
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def sixd_decode(a: np.ndarray) -> np.ndarray:
    """
    Decode 6D vectors into rotation matrices with Gram-Schmidt.

    Args:
        a: (..., 6) encodings, not necessarily orthonormal

    Returns:
        (..., 3, 3) rotation matrices with columns (b1, b2, b1 x b2)

    Raises:
        DegenerateInput: first column near zero or second column parallel to it
    """
    a = np.asarray(a, dtype=np.float64)
    a1 = a[..., 0:3]
    a2 = a[..., 3:6]

    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_EPS):
        raise DegenerateInput("6D decode: first column has (near) zero norm")
    b1 = a1 / n1

    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERATE_EPS):
        raise DegenerateInput("6D decode: second column is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def angular_velocity(R_prev: np.ndarray, R_cur: np.ndarray) -> np.ndarray:
    """Relative rotation R_prev^T R_cur (inverse of a rotation is its transpose)."""
    R_prev = np.asarray(R_prev, dtype=np.float64)
    return np.swapaxes(R_prev, -1, -2) @ np.asarray(R_cur, dtype=np.float64)


def linear_velocity(p_prev: np.ndarray, p_cur: np.ndarray) -> np.ndarray:
    """Displacement per frame, in meters/frame."""
    return np.asarray(p_cur, dtype=np.float64) - np.asarray(p_prev, dtype=np.float64)


def geodesic_angle_deg(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """
    Geodesic distance between rotations, in degrees within [0, 180].

    Uses atan2(sin, cos) of the relative rotation instead of a bare arccos so
    small angles keep full precision; the value is the same angle.
    """
    M = angular_velocity(R1, R2)
    cos = np.clip((np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.stack(
        [M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]],
        axis=-1,
    )
    sin = np.linalg.norm(skew, axis=-1) / 2.0
    return np.degrees(np.arctan2(sin, cos))


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """
    Nearest rotation to M in the Frobenius sense (polar projection).

    Raises:
        DegenerateInput: M is rank-deficient within RANK_EPS
    """
    U, S, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    if np.any(S[..., -1] <= RANK_EPS):
        raise DegenerateInput("rotation mean is rank-deficient")
    det = np.linalg.det(U @ Vt)
    D = np.zeros(U.shape[:-2] + (3,))
    D[..., 0] = 1.0
    D[..., 1] = 1.0
    D[..., 2] = np.sign(det)
    return (U * D[..., None, :]) @ Vt


def chordal_mean(rs: np.ndarray) -> np.ndarray:
    """
    Chordal L2 mean of rotations.

    Args:
        rs: (..., k, 3, 3) stack of k rotations; k must be at least 1

    Returns:
        (..., 3, 3) the rotation minimizing sum ||R - R_i||_F^2
    """
    rs = np.asarray(rs, dtype=np.float64)
    if rs.ndim < 3 or rs.shape[-3] == 0:
        raise DegenerateInput("chordal_mean needs a non-empty list of rotations")
    return project_to_rotation(rs.mean(axis=-3))


def axis_angle_matrix(axis, angle_rad) -> np.ndarray:
    """
    Rodrigues' formula: rotation by angle_rad about a fixed axis.

    Args:
        axis: 3-vector (normalized here)
        angle_rad: scalar or array of angles

    Returns:
        (*angle.shape, 3, 3) rotation matrices
    """
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    theta = np.asarray(angle_rad, dtype=np.float64)[..., None, None]
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rot_x(angle_rad):
    return axis_angle_matrix([1.0, 0.0, 0.0], angle_rad)


def rot_y(angle_rad):
    return axis_angle_matrix([0.0, 1.0, 0.0], angle_rad)


def rot_z(angle_rad):
    return axis_angle_matrix([0.0, 0.0, 1.0], angle_rad)
